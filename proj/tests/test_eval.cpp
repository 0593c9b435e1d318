#include <doctest.h>

#include <algorithm>
#include <functional>
#include <map>

#include "fogdetr/eval.hpp"
#include "fogdetr/rng.hpp"

using namespace fogdetr;

namespace {

Box box(double cx, double cy, double w, double h) { return Box(cx, cy, w, h); }

EvalPrediction pred(const std::string& id, const Box& b, int cat, double conf) { return {id, b, cat, conf}; }

ImageGroundTruth gt(const std::string& id, std::vector<Box> boxes, std::vector<int> labels) {
  return {id, Annotation{std::move(boxes), std::move(labels)}};
}

// Exhaustive evaluator for small instances. For every image and category it
// enumerates all one-to-one prediction/ground-truth matchings at the IoU
// threshold and keeps the one in which every prediction, taken in
// confidence order, holds the highest-IoU ground truth still free (or none
// if nothing free clears the threshold). AP is the sum over true positives
// of the best precision at that rank or later, per unit of recall.
struct Oracle {
  static double iou_ref(const Box& a, const Box& b) {
    const double ax0 = a[0] - a[2] / 2, ax1 = a[0] + a[2] / 2, ay0 = a[1] - a[3] / 2, ay1 = a[1] + a[3] / 2;
    const double bx0 = b[0] - b[2] / 2, bx1 = b[0] + b[2] / 2, by0 = b[1] - b[3] / 2, by1 = b[1] + b[3] / 2;
    const double iw = std::max(0.0, std::min(ax1, bx1) - std::max(ax0, bx0));
    const double ih = std::max(0.0, std::min(ay1, by1) - std::max(ay0, by0));
    const double inter = iw * ih;
    return inter / (a[2] * a[3] + b[2] * b[3] - inter);
  }

  // preds sorted by descending confidence; returns which are true positives.
  static std::vector<bool> match_image(const std::vector<Box>& preds, const std::vector<Box>& gts, int& consistent) {
    const std::size_t n = preds.size(), g = gts.size();
    std::vector<int> assign(n, -1), chosen;
    consistent = 0;
    std::function<void(std::size_t, std::vector<bool>&)> rec = [&](std::size_t k, std::vector<bool>& used) {
      if (k == n) {
        if (greedy_consistent(preds, gts, assign)) {
          ++consistent;
          chosen = assign;
        }
        return;
      }
      assign[k] = -1;
      rec(k + 1, used);
      for (std::size_t j = 0; j < g; ++j) {
        if (used[j] || iou_ref(preds[k], gts[j]) < 0.5) continue;
        used[j] = true;
        assign[k] = static_cast<int>(j);
        rec(k + 1, used);
        used[j] = false;
        assign[k] = -1;
      }
    };
    std::vector<bool> used(g, false);
    rec(0, used);
    std::vector<bool> tp(n, false);
    for (std::size_t k = 0; k < n && !chosen.empty(); ++k) tp[k] = chosen[k] >= 0;
    return tp;
  }

  static bool greedy_consistent(const std::vector<Box>& preds, const std::vector<Box>& gts,
                                const std::vector<int>& assign) {
    std::vector<bool> taken(gts.size(), false);
    for (std::size_t k = 0; k < preds.size(); ++k) {
      double best = -1;
      for (std::size_t j = 0; j < gts.size(); ++j) {
        if (!taken[j]) best = std::max(best, iou_ref(preds[k], gts[j]));
      }
      if (assign[k] < 0) {
        if (best >= 0.5) return false;
      } else {
        if (iou_ref(preds[k], gts[static_cast<std::size_t>(assign[k])]) != best) return false;
        taken[static_cast<std::size_t>(assign[k])] = true;
      }
    }
    return true;
  }

  static std::optional<double> ap(const std::vector<EvalPrediction>& preds, const std::vector<ImageGroundTruth>& gts,
                                  int category, bool& ok) {
    std::size_t n_gt = 0;
    std::map<std::string, std::vector<Box>> gt_boxes;
    for (const auto& img : gts)
      for (std::size_t i = 0; i < img.annotation.size(); ++i)
        if (img.annotation.labels[i] == category) {
          gt_boxes[img.image_id].push_back(img.annotation.boxes[i]);
          ++n_gt;
        }
    if (n_gt == 0) return std::nullopt;

    std::vector<EvalPrediction> ranked;
    for (const auto& p : preds)
      if (p.category == category) ranked.push_back(p);
    std::sort(ranked.begin(), ranked.end(), [](const auto& a, const auto& b) { return a.confidence > b.confidence; });

    std::vector<bool> is_tp(ranked.size(), false);
    std::map<std::string, std::vector<std::size_t>> by_image;
    for (std::size_t k = 0; k < ranked.size(); ++k) by_image[ranked[k].image_id].push_back(k);
    for (const auto& [id, idx] : by_image) {
      std::vector<Box> boxes;
      for (auto k : idx) boxes.push_back(ranked[k].box);
      int consistent = 0;
      auto tp = match_image(boxes, gt_boxes[id], consistent);
      ok = ok && consistent == 1;
      for (std::size_t i = 0; i < idx.size(); ++i) is_tp[idx[i]] = tp[i];
    }

    std::vector<double> precision(ranked.size());
    std::size_t hits = 0;
    for (std::size_t k = 0; k < ranked.size(); ++k) {
      hits += is_tp[k];
      precision[k] = static_cast<double>(hits) / static_cast<double>(k + 1);
    }
    double area = 0;
    for (std::size_t k = 0; k < ranked.size(); ++k) {
      if (!is_tp[k]) continue;
      area += *std::max_element(precision.begin() + static_cast<std::ptrdiff_t>(k), precision.end()) /
              static_cast<double>(n_gt);
    }
    return area;
  }
};

Box random_box(Rng& rng) {
  const double w = rng.uniform(0.05, 0.4), h = rng.uniform(0.05, 0.4);
  return box(rng.uniform(w / 2, 1 - w / 2), rng.uniform(h / 2, 1 - h / 2), w, h);
}

Box jitter(const Box& b, Rng& rng) {
  Box out = b;
  for (int i = 0; i < 4; ++i) out[i] += rng.normal(0.0, 0.02);
  out[2] = std::max(out[2], 0.01);
  out[3] = std::max(out[3], 0.01);
  return out;
}

struct Instance {
  std::vector<EvalPrediction> preds;
  std::vector<ImageGroundTruth> gts;
};

// A few images with at most four boxes each; predictions mix near-duplicates
// of ground truth (sometimes mislabelled) with clutter.
Instance random_instance(Rng& rng) {
  Instance inst;
  const auto images = rng.uniform_int(1, 3);
  for (std::int64_t i = 0; i < images; ++i) {
    const std::string id = "img" + std::to_string(i);
    ImageGroundTruth g{id, {}};
    const auto n_gt = rng.uniform_int(i == 0 ? 1 : 0, 4);
    for (std::int64_t k = 0; k < n_gt; ++k) {
      g.annotation.boxes.push_back(random_box(rng));
      g.annotation.labels.push_back(static_cast<int>(rng.uniform_int(0, 2)));
    }
    const auto n_pred = rng.uniform_int(0, 4);
    for (std::int64_t k = 0; k < n_pred; ++k) {
      EvalPrediction p{id, random_box(rng), static_cast<int>(rng.uniform_int(0, 2)), rng.uniform()};
      if (n_gt > 0 && rng.uniform() < 0.7) {
        const auto j = static_cast<std::size_t>(rng.uniform_int(0, n_gt - 1));
        p.box = jitter(g.annotation.boxes[j], rng);
        if (rng.uniform() < 0.8) p.category = g.annotation.labels[j];
      }
      inst.preds.push_back(p);
    }
    inst.gts.push_back(std::move(g));
  }
  return inst;
}

}  // namespace

TEST_CASE("iou examples") {
  CHECK(iou(box(0.5, 0.5, 0.25, 0.25), box(0.5, 0.5, 0.25, 0.25)) == 1.0);
  CHECK(iou(box(0.3, 0.6, 0.2, 0.1), box(0.3, 0.6, 0.2, 0.1)) == doctest::Approx(1.0).epsilon(1e-15));
  CHECK(iou(box(0.2, 0.2, 0.1, 0.1), box(0.8, 0.8, 0.1, 0.1)) == 0.0);
  // corners (0,0,2,2) and (1,1,3,3)
  CHECK(iou(box(1, 1, 2, 2), box(2, 2, 2, 2)) == doctest::Approx(1.0 / 7.0).epsilon(1e-15));
  CHECK(iou(box(0.5, 0.5, 0.0, 0.2), box(0.5, 0.5, 0.2, 0.2)) == 0.0);
  CHECK(generalized_iou(box(0.5, 0.5, 0.25, 0.25), box(0.5, 0.5, 0.25, 0.25)) == 1.0);
  CHECK(generalized_iou(box(0.5, 0.5, 0.0, 0.0), box(0.5, 0.5, 0.0, 0.0)) == -1.0);
}

TEST_CASE("iou is symmetric and bounded") {
  Rng rng(41);
  for (int k = 0; k < 1000; ++k) {
    Box a = random_box(rng), b = rng.uniform() < 0.5 ? jitter(a, rng) : random_box(rng);
    const double ab = iou(a, b);
    CHECK(ab == iou(b, a));
    CHECK(ab >= 0.0);
    CHECK(ab <= 1.0);
    CHECK(generalized_iou(a, b) <= ab + 1e-12);
  }
}

TEST_CASE("average precision examples") {
  auto truth = std::vector{gt("a", {box(0.5, 0.5, 0.2, 0.2)}, {1})};
  CHECK(*average_precision({pred("a", box(0.5, 0.5, 0.2, 0.2), 1, 0.9)}, truth, 1) == 1.0);
  CHECK(*average_precision({pred("a", box(0.1, 0.1, 0.1, 0.1), 1, 0.9), pred("a", box(0.5, 0.5, 0.2, 0.2), 1, 0.8)},
                           truth, 1) == 0.5);
  CHECK(*average_precision({}, truth, 1) == 0.0);
  CHECK_FALSE(average_precision({}, truth, 2).has_value());
  // a duplicate of a matched box is a false positive
  CHECK(*average_precision({pred("a", box(0.5, 0.5, 0.2, 0.2), 1, 0.9), pred("a", box(0.5, 0.5, 0.2, 0.2), 1, 0.8)},
                           truth, 1) == 1.0);
  // a prediction on another image never matches
  CHECK(*average_precision({pred("b", box(0.5, 0.5, 0.2, 0.2), 1, 0.9)}, truth, 1) == 0.0);

  PRCurve curve = precision_recall({pred("a", box(0.1, 0.1, 0.1, 0.1), 1, 0.9), pred("a", box(0.5, 0.5, 0.2, 0.2), 1, 0.8)},
                                   truth, 1);
  CHECK(curve.recall == std::vector<double>{0.0, 1.0});
  CHECK(curve.precision == std::vector<double>{0.0, 0.5});
}

TEST_CASE("map50 examples") {
  std::vector<ImageGroundTruth> truth;
  std::vector<EvalPrediction> perfect;
  for (int c = 0; c < kCategoryCount; ++c) {
    const std::string id = "i" + std::to_string(c);
    truth.push_back(gt(id, {box(0.3, 0.3, 0.2, 0.2)}, {c}));
    perfect.push_back(pred(id, box(0.3, 0.3, 0.2, 0.2), c, 0.9));
  }
  CHECK(map50(perfect, truth).map == 1.0);
  std::vector<EvalPrediction> one{perfect[2]};
  MapReport r = map50(one, truth);
  CHECK(r.map == doctest::Approx(0.2).epsilon(1e-15));
  CHECK(*r.per_category[2] == 1.0);
  CHECK(*r.per_category[0] == 0.0);

  // categories without ground truth are reported absent and left out of the mean
  MapReport partial = map50({perfect[0]}, {truth[0], truth[1]});
  CHECK_FALSE(partial.per_category[3].has_value());
  CHECK(partial.map == 0.5);

  CHECK_THROWS_AS(map50(perfect, {gt("x", {}, {})}), EvalError);

  auto j = report_json(partial, "high");
  CHECK(j["split"] == "high");
  CHECK(j["map50"] == 0.5);
  CHECK(j["per_category"]["circle"] == 1.0);
  CHECK(j["per_category"]["bar"].is_null());

  const std::string table = format_table({{"baseline", "high", partial}});
  CHECK(table.find("Eval. Set") != std::string::npos);
  CHECK(table.find("triangle") != std::string::npos);
  CHECK(table.find("0.500") != std::string::npos);
}

TEST_CASE("map50 matches the exhaustive evaluator") {
  Rng rng(2024);
  double worst = 0;
  int nontrivial = 0;
  for (int scene = 0; scene < 500; ++scene) {
    Instance inst = random_instance(rng);
    bool ok = true;
    MapReport got = map50(inst.preds, inst.gts);
    double total = 0;
    int counted = 0;
    for (int c = 0; c < kCategoryCount; ++c) {
      auto want = Oracle::ap(inst.preds, inst.gts, c, ok);
      REQUIRE(want.has_value() == got.per_category[static_cast<std::size_t>(c)].has_value());
      if (!want) continue;
      worst = std::max(worst, std::abs(*want - *got.per_category[static_cast<std::size_t>(c)]));
      total += *want;
      ++counted;
      nontrivial += *want > 0 && *want < 1;
    }
    CHECK_MESSAGE(ok, "scene " << scene << " has no unique greedy matching");
    worst = std::max(worst, std::abs(total / counted - got.map));
  }
  MESSAGE("mAP oracle max deviation " << worst << ", fractional APs " << nontrivial);
  CHECK(worst <= 1e-9);
  CHECK(nontrivial > 50);
}

TEST_CASE("AP depends only on confidence order") {
  Rng rng(77);
  for (int k = 0; k < 200; ++k) {
    Instance inst = random_instance(rng);
    auto squashed = inst.preds;
    for (auto& p : squashed) p.confidence = p.confidence * p.confidence * 0.5 + 0.1;
    for (int c = 0; c < 3; ++c) {
      auto a = average_precision(inst.preds, inst.gts, c), b = average_precision(squashed, inst.gts, c);
      REQUIRE(a.has_value() == b.has_value());
      if (a) CHECK(*a == *b);
    }
  }
}

TEST_CASE("a false positive ranked first never raises AP") {
  Rng rng(78);
  for (int k = 0; k < 200; ++k) {
    Instance inst = random_instance(rng);
    for (int c = 0; c < 3; ++c) {
      auto before = average_precision(inst.preds, inst.gts, c);
      if (!before) continue;
      auto with_fp = inst.preds;
      // a box on an image with no ground truth cannot match anything
      with_fp.push_back(pred("nowhere", random_box(rng), c, 1.0));
      CHECK(*average_precision(with_fp, inst.gts, c) <= *before);
    }
  }
}

TEST_CASE("map50 ignores prediction order") {
  Rng rng(79);
  for (int k = 0; k < 200; ++k) {
    Instance inst = random_instance(rng);
    auto shuffled = inst.preds;
    std::shuffle(shuffled.begin(), shuffled.end(), rng);
    MapReport a = map50(inst.preds, inst.gts), b = map50(shuffled, inst.gts);
    CHECK(a.map == b.map);
    CHECK(a.per_category == b.per_category);
  }
  // equal confidences are ordered by content, not list position
  auto truth = std::vector{gt("a", {box(0.5, 0.5, 0.2, 0.2)}, {0})};
  std::vector<EvalPrediction> tied{pred("a", box(0.1, 0.1, 0.1, 0.1), 0, 0.5), pred("a", box(0.5, 0.5, 0.2, 0.2), 0, 0.5)};
  std::vector<EvalPrediction> flipped{tied[1], tied[0]};
  CHECK(*average_precision(tied, truth, 0) == *average_precision(flipped, truth, 0));
}
