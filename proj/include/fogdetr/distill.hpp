#pragma once

#include <optional>
#include <stdexcept>
#include <string>
#include <vector>

#include <json.hpp>

#include "fogdetr/detector.hpp"
#include "fogdetr/optim.hpp"

namespace fogdetr {

/// Backbone stages P (1-based) and their weights lambda.
struct PerceptualConfig {
  std::vector<int> layers{2, 3};
  std::vector<double> lambda{0.5, 1.0};

  void validate() const;
  nlohmann::json to_json() const;
  static PerceptualConfig from_json(const nlohmann::json& j);
};

struct TeacherStudentPair {
  DetectorConfig model;
  DetectorParams teacher;  // frozen
  DetectorParams student;
  PerceptualConfig perceptual;
  double perc_weight = 1.0;

  /// Freezes the teacher and checks that backbone stage shapes agree.
  static TeacherStudentPair make(DetectorConfig model, DetectorParams teacher, DetectorParams student,
                                 PerceptualConfig perceptual, double perc_weight = 1.0);
};

/// sum over l in P of lambda_l * mean((teacher_l - student_l)^2).
Tensor perceptual_loss(const std::vector<Tensor>& teacher_features, const std::vector<Tensor>& student_features,
                       const PerceptualConfig& config);

/// Teacher backbone on the clear image (no gradients), student on the foggy one.
Tensor perceptual_loss(const Image& clear, const Image& foggy, const TeacherStudentPair& pair);

/// L_obj + weight * L_perc.
Tensor total_loss(const Tensor& obj, const Tensor& perc, double perc_weight = 1.0);

/// One training sample. input is what the trained network sees; clear is
/// the matching fog-free render used by the teacher.
struct TrainExample {
  std::string id;
  Image clear;
  Image input;
  Annotation annotation;
  std::optional<DepthMap> depth;
  double beta = 0.0;
};

struct StepMetrics {
  std::size_t step = 0;
  double l_obj = 0.0;
  double l_perc = 0.0;
  double l_total = 0.0;

  nlohmann::json to_json() const;
};

/// Raised when a step produces a non-finite loss; parameters are left
/// untouched by that step.
class NonFiniteLoss : public std::runtime_error {
 public:
  explicit NonFiniteLoss(StepMetrics m);
  StepMetrics metrics;
};

/// Detection-only step (baseline, WAA, WFE, and PL teachers).
StepMetrics detection_step(const std::vector<TrainExample>& batch, const DetectorConfig& cfg,
                           const DetectorParams& params, Sgd& optimizer, std::size_t step);

/// Teacher forward on clear inputs, student forward on the fogged inputs,
/// student update from L_obj + L_perc.
StepMetrics distill_step(const std::vector<TrainExample>& batch, const TeacherStudentPair& pair, Sgd& optimizer,
                         std::size_t step);

}  // namespace fogdetr
