#pragma once

#include <filesystem>
#include <functional>
#include <optional>
#include <string>
#include <vector>

#include <json.hpp>

#include "fogdetr/dataset.hpp"
#include "fogdetr/detector.hpp"
#include "fogdetr/distill.hpp"
#include "fogdetr/optim.hpp"

namespace fogdetr {

/// What the trained network sees each step.
enum class InputMode {
  dataset,  // the stored foggy render of the split
  clear,    // the clear render
  mixed,    // clear with probability clear_fraction, else fog re-applied on the fly
};

struct MixConfig {
  double clear_fraction = 0.5;
  std::vector<double> betas{fog_presets::kLow, fog_presets::kMid, fog_presets::kHigh};
  double atmospheric_light = fog_presets::kAtmosphericLight;
};

struct TeacherConfig {
  std::optional<std::filesystem::path> checkpoint;  // trained first when absent
  std::size_t steps = 6000;
  double lr = 0.0;  // 0 uses the student learning rate
  MixConfig mix;
};

struct TrainConfig {
  DetectorConfig model;
  std::filesystem::path dataset;
  std::size_t steps = 6000;
  std::size_t batch_size = 4;
  std::size_t limit = 0;  // train on the first `limit` samples only; 0 = all
  SgdOptions sgd{0.02, 0.9, 1.0};
  InputMode input = InputMode::dataset;
  MixConfig mix;
  PerceptualConfig perceptual;
  double perc_weight = 1.0;
  TeacherConfig teacher;
  bool student_from_teacher = false;

  void validate() const;
  nlohmann::json to_json() const;
  static TrainConfig from_json(const nlohmann::json& j);
};

struct TrainResult {
  std::string status = "completed";  // or "diverged"
  std::vector<StepMetrics> metrics;
  std::optional<StepMetrics> divergence;
  DetectorParams params;
  std::string checkpoint_hash;
  std::optional<std::string> teacher_checkpoint_hash;
};

using ProgressFn = std::function<void(const std::string&)>;

/// Trains under out_dir: metrics.jsonl and checkpoint/ (plus teacher/ for PL
/// without a given teacher). seed drives initialisation and batch order.
/// A non-finite loss stops training and keeps the last good parameters.
TrainResult train(const TrainConfig& cfg, std::uint64_t seed, const std::filesystem::path& out_dir,
                  const ProgressFn& progress = {});

/// Same, on samples already in memory (no dataset directory needed).
TrainResult train(const TrainConfig& cfg, const std::vector<Sample>& samples, bool has_depth, std::uint64_t seed,
                  const std::filesystem::path& out_dir, const ProgressFn& progress = {});

/// Network input for a sample as evaluated: its foggy render and fog level.
DetectorInput eval_input(const DetectorConfig& cfg, const Sample& s);

MapReport evaluate(const DetectorConfig& cfg, const DetectorParams& params, const std::vector<Sample>& samples);

}  // namespace fogdetr
