#include "fogdetr/eval.hpp"

#include <cstdio>
#include <map>
#include <numeric>
#include <tuple>

namespace fogdetr {

namespace {

// Total order on predictions so ranking never depends on input order.
bool ranks_before(const EvalPrediction& a, const EvalPrediction& b) {
  if (a.confidence != b.confidence) return a.confidence > b.confidence;
  return std::tie(a.image_id, a.box[0], a.box[1], a.box[2], a.box[3]) <
         std::tie(b.image_id, b.box[0], b.box[1], b.box[2], b.box[3]);
}

std::string fmt3(double v) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "%.3f", v);
  return buf;
}

}  // namespace

PRCurve precision_recall(const std::vector<EvalPrediction>& predictions,
                         const std::vector<ImageGroundTruth>& ground_truth, int category,
                         double iou_threshold) {
  PRCurve curve;
  curve.category = category;

  std::map<std::string, std::vector<Box>> gt_boxes;
  for (const auto& img : ground_truth) {
    auto& boxes = gt_boxes[img.image_id];
    for (std::size_t i = 0; i < img.annotation.labels.size(); ++i) {
      if (img.annotation.labels[i] == category) {
        boxes.push_back(img.annotation.boxes[i]);
        ++curve.ground_truth;
      }
    }
  }

  std::vector<const EvalPrediction*> ranked;
  for (const auto& p : predictions) {
    if (p.category == category) ranked.push_back(&p);
  }
  std::sort(ranked.begin(), ranked.end(),
            [](const EvalPrediction* a, const EvalPrediction* b) { return ranks_before(*a, *b); });

  std::map<std::string, std::vector<bool>> taken;
  for (const auto& [id, boxes] : gt_boxes) taken[id].assign(boxes.size(), false);

  std::size_t tp = 0;
  for (std::size_t k = 0; k < ranked.size(); ++k) {
    const EvalPrediction& p = *ranked[k];
    auto it = gt_boxes.find(p.image_id);
    if (it != gt_boxes.end()) {
      auto& used = taken[p.image_id];
      double best = -1.0;
      std::size_t best_index = 0;
      for (std::size_t g = 0; g < it->second.size(); ++g) {
        if (used[g]) continue;
        const double o = iou(p.box, it->second[g]);
        if (o > best) {
          best = o;
          best_index = g;
        }
      }
      if (best >= iou_threshold) {
        used[best_index] = true;
        ++tp;
      }
    }
    curve.recall.push_back(curve.ground_truth ? static_cast<double>(tp) / curve.ground_truth : 0.0);
    curve.precision.push_back(static_cast<double>(tp) / static_cast<double>(k + 1));
  }
  return curve;
}

std::optional<double> average_precision(const std::vector<EvalPrediction>& predictions,
                                        const std::vector<ImageGroundTruth>& ground_truth,
                                        int category, double iou_threshold) {
  const PRCurve curve = precision_recall(predictions, ground_truth, category, iou_threshold);
  if (curve.ground_truth == 0) return std::nullopt;

  std::vector<double> mrec{0.0};
  std::vector<double> mpre{0.0};
  mrec.insert(mrec.end(), curve.recall.begin(), curve.recall.end());
  mpre.insert(mpre.end(), curve.precision.begin(), curve.precision.end());
  mrec.push_back(1.0);
  mpre.push_back(0.0);
  for (std::size_t i = mpre.size() - 1; i > 0; --i) mpre[i - 1] = std::max(mpre[i - 1], mpre[i]);

  double ap = 0.0;
  for (std::size_t i = 1; i < mrec.size(); ++i) {
    if (mrec[i] != mrec[i - 1]) ap += (mrec[i] - mrec[i - 1]) * mpre[i];
  }
  return ap;
}

MapReport map50(const std::vector<EvalPrediction>& predictions,
                const std::vector<ImageGroundTruth>& ground_truth, int categories) {
  MapReport report;
  double total = 0.0;
  int counted = 0;
  for (int c = 0; c < categories; ++c) {
    auto ap = average_precision(predictions, ground_truth, c, 0.5);
    report.per_category.push_back(ap);
    if (ap) {
      total += *ap;
      ++counted;
    }
  }
  if (counted == 0) throw EvalError("map50: no ground truth in any category");
  report.map = total / counted;
  return report;
}

nlohmann::json report_json(const MapReport& report, const std::string& split) {
  nlohmann::json per = nlohmann::json::object();
  for (std::size_t c = 0; c < report.per_category.size(); ++c) {
    const std::string name = c < kCategoryNames.size() ? std::string(kCategoryNames[c]) : std::to_string(c);
    per[name] = report.per_category[c] ? nlohmann::json(*report.per_category[c]) : nlohmann::json(nullptr);
  }
  return {{"per_category", per}, {"map50", report.map}, {"split", split}};
}

std::string format_table(const std::vector<TableRow>& rows) {
  std::size_t model_w = 5, split_w = 9;
  for (const auto& r : rows) {
    model_w = std::max(model_w, r.model.size());
    split_w = std::max(split_w, r.split.size());
  }
  auto pad = [](std::string s, std::size_t w) {
    s.resize(std::max(w, s.size()), ' ');
    return s;
  };
  std::string out = pad("Model", model_w) + "  " + pad("Eval. Set", split_w);
  for (auto name : kCategoryNames) out += "  " + pad(std::string(name), 8);
  out += "  mAP\n";
  for (const auto& r : rows) {
    out += pad(r.model, model_w) + "  " + pad(r.split, split_w);
    for (std::size_t c = 0; c < kCategoryNames.size(); ++c) {
      const bool has = c < r.report.per_category.size() && r.report.per_category[c];
      out += "  " + pad(has ? fmt3(*r.report.per_category[c]) : "-", 8);
    }
    out += "  " + fmt3(r.report.map) + "\n";
  }
  return out;
}

}  // namespace fogdetr
