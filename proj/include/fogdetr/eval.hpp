#pragma once

#include <Eigen/Core>

#include <algorithm>
#include <optional>
#include <stdexcept>
#include <string>
#include <vector>

#include <json.hpp>

#include "fogdetr/scene.hpp"

namespace fogdetr {

class EvalError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Corner form (x0, y0, x1, y1) of a (cx, cy, w, h) box.
template <typename Derived>
Eigen::Matrix<typename Derived::Scalar, 4, 1> to_corners(const Eigen::MatrixBase<Derived>& b) {
  using S = typename Derived::Scalar;
  return {b[0] - b[2] / S(2), b[1] - b[3] / S(2), b[0] + b[2] / S(2), b[1] + b[3] / S(2)};
}

/// Intersection over union of two (cx, cy, w, h) boxes; 0 if either has no area.
template <typename A, typename B>
typename A::Scalar iou(const Eigen::MatrixBase<A>& a, const Eigen::MatrixBase<B>& b) {
  using S = typename A::Scalar;
  if (!(a[2] > S(0) && a[3] > S(0) && b[2] > S(0) && b[3] > S(0))) return S(0);
  const auto ca = to_corners(a);
  const auto cb = to_corners(b);
  const S iw = std::max(S(0), std::min(ca[2], cb[2]) - std::max(ca[0], cb[0]));
  const S ih = std::max(S(0), std::min(ca[3], cb[3]) - std::max(ca[1], cb[1]));
  const S inter = iw * ih;
  const S uni = a[2] * a[3] + b[2] * b[3] - inter;
  return uni > S(0) ? inter / uni : S(0);
}

/// IoU minus the fraction of the enclosing box not covered by the union.
template <typename A, typename B>
typename A::Scalar generalized_iou(const Eigen::MatrixBase<A>& a, const Eigen::MatrixBase<B>& b) {
  using S = typename A::Scalar;
  const auto ca = to_corners(a);
  const auto cb = to_corners(b);
  const S iw = std::max(S(0), std::min(ca[2], cb[2]) - std::max(ca[0], cb[0]));
  const S ih = std::max(S(0), std::min(ca[3], cb[3]) - std::max(ca[1], cb[1]));
  const S inter = iw * ih;
  const S uni = a[2] * a[3] + b[2] * b[3] - inter;
  const S enclose = (std::max(ca[2], cb[2]) - std::min(ca[0], cb[0])) *
                    (std::max(ca[3], cb[3]) - std::min(ca[1], cb[1]));
  if (!(uni > S(0)) || !(enclose > S(0))) return S(-1);
  return inter / uni - (enclose - uni) / enclose;
}

struct EvalPrediction {
  std::string image_id;
  Box box = Box::Zero();
  int category = 0;
  double confidence = 0.0;
};

struct ImageGroundTruth {
  std::string image_id;
  Annotation annotation;
};

struct PRCurve {
  int category = 0;
  std::vector<double> recall;
  std::vector<double> precision;
  std::size_t ground_truth = 0;
};

/// Confidence-ranked precision/recall points for one category, using
/// greedy one-to-one matching (each prediction takes the best unmatched
/// ground truth of its image at IoU >= iou_threshold).
PRCurve precision_recall(const std::vector<EvalPrediction>& predictions,
                         const std::vector<ImageGroundTruth>& ground_truth, int category,
                         double iou_threshold = 0.5);

/// All-point interpolated AP; nullopt when the category has no ground truth.
std::optional<double> average_precision(const std::vector<EvalPrediction>& predictions,
                                        const std::vector<ImageGroundTruth>& ground_truth,
                                        int category, double iou_threshold = 0.5);

struct MapReport {
  std::vector<std::optional<double>> per_category;
  double map = 0.0;
};

MapReport map50(const std::vector<EvalPrediction>& predictions,
                const std::vector<ImageGroundTruth>& ground_truth, int categories = kCategoryCount);

nlohmann::json report_json(const MapReport& report, const std::string& split);

struct TableRow {
  std::string model;
  std::string split;
  MapReport report;
};

/// Plain-text table with one row per (model, eval set) and a column per
/// category followed by mAP.
std::string format_table(const std::vector<TableRow>& rows);

}  // namespace fogdetr
