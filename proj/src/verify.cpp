#include "fogdetr/verify.hpp"

#include <algorithm>
#include <bit>
#include <chrono>
#include <cstdio>
#include <cstring>
#include <map>
#include <numeric>
#include <random>

#include "fogdetr/attention.hpp"
#include "fogdetr/checkpoint.hpp"
#include "fogdetr/commands.hpp"
#include "fogdetr/dataset.hpp"
#include "fogdetr/detector.hpp"
#include "fogdetr/distill.hpp"
#include "fogdetr/eval.hpp"
#include "fogdetr/gradcheck.hpp"
#include "fogdetr/scene.hpp"

namespace fogdetr {

namespace fs = std::filesystem;

namespace {

struct Outcome {
  bool passed;
  std::string detail;
};

using SuiteFn = std::function<Outcome(Rng&, const fs::path&)>;

std::string num(double v) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "%.3g", v);
  return buf;
}

Outcome at_most(double value, double tol, const std::string& what) {
  return {value <= tol, what + " " + num(value) + " (limit " + num(tol) + ")"};
}

Tensor rnd(Rng& rng, Index rows, Index cols, bool requires_grad = false) {
  Matrix m(rows, cols);
  for (Index i = 0; i < m.size(); ++i) m.data()[i] = rng.normal();
  return Tensor::from_matrix(std::move(m), requires_grad);
}

Image random_image(Rng& rng, Index h, Index w) {
  Image img(h, w);
  for (Index i = 0; i < img.pixels.size(); ++i) img.pixels.data()[i] = rng.uniform();
  return img;
}

DepthMap random_depth(Rng& rng, Index h, Index w) {
  DepthMap d(h, w);
  for (Index i = 0; i < d.depth.size(); ++i) d.depth(i) = rng.uniform(0.0, 12.0);
  return d;
}

double row_stochastic_error(const AttentionTrace& trace) {
  double worst = 0;
  for (const auto& w : trace.weights) {
    if ((w.array() < 0).any()) return 1.0;
    worst = std::max(worst, (w.rowwise().sum().array() - 1.0).abs().maxCoeff());
  }
  return worst;
}

double max_abs(const Matrix& a, const Matrix& b) { return (a - b).cwiseAbs().maxCoeff(); }

template <typename F>
double worst_gradient(int probes, Rng& rng, F&& cases_for_probe) {
  double worst = 0;
  for (int probe = 0; probe < probes; ++probe) {
    auto cases = cases_for_probe(rng);
    for (auto& [f, params] : cases) {
      GradCheckOptions options;
      options.seed = static_cast<std::uint64_t>(probe);
      options.coords_per_param = 4;
      worst = std::max(worst, gradient_check_report(f, params, options).max_relative_error);
    }
  }
  return worst;
}

using GradCase = std::pair<std::function<Tensor()>, std::vector<Tensor>>;

// autodiff-core

Outcome ops_gradient(Rng& rng, const fs::path&) {
  const double worst = worst_gradient(100, rng, [](Rng& r) {
    Tensor a = rnd(r, 3, 4, true), b = rnd(r, 3, 4, true), row = rnd(r, 1, 4, true), col = rnd(r, 3, 1, true);
    Tensor sq = rnd(r, 4, 3, true), w = rnd(r, 3, 4);
    Tensor pos = Tensor::from_matrix(Matrix(a.value().array().abs() + 0.5), true);
    Tensor gain = Tensor::from_matrix(Shape{4}, rnd(r, 1, 4).value(), true);
    Tensor bias = Tensor::from_matrix(Shape{4}, rnd(r, 1, 4).value(), true);
    Tensor map = Tensor::from_matrix(Shape{4, 4, 2}, rnd(r, 16, 2).value(), true);
    Tensor kernel = rnd(r, 18, 1);
    auto wsum = [w](const Tensor& t) { return sum(mul(t, w)); };
    static const std::vector<Index> picks{2, 0, 2};
    return std::vector<GradCase>{
        {[=] { return sum_squares(matmul(a, sq)); }, {a, sq}},
        {[=] { return wsum(add(a, row)); }, {a, row}},
        {[=] { return wsum(sub(a, col)); }, {a, col}},
        {[=] { return wsum(mul(a, b)); }, {a, b}},
        {[=] { return wsum(div(a, pos)); }, {a, pos}},
        {[=] { return wsum(maximum(a, b)); }, {a, b}},
        {[=] { return wsum(minimum(a, b)); }, {a, b}},
        {[=] { return wsum(exp(a)); }, {a}},
        {[=] { return wsum(log(pos)); }, {pos}},
        {[=] { return wsum(abs(a)); }, {a}},
        {[=] { return wsum(relu(a)); }, {a}},
        {[=] { return wsum(sigmoid(a)); }, {a}},
        {[=] { return wsum(softmax_rows(a)); }, {a}},
        {[=] { return wsum(log_softmax_rows(a)); }, {a}},
        {[=] { return wsum(layer_norm(a, gain, bias)); }, {a, gain, bias}},
        {[=] { return sum_squares(concat({a, col}, 1)); }, {a, col}},
        {[=] { return sum_squares(gather_rows(transpose(sq), picks)); }, {sq}},
        {[=] { return mean(row_sum(mul(a, a))); }, {a}},
        {[=] { return sum_squares(matmul(im2col(map, 3, 2, 1), kernel)); }, {map}},
    };
  });
  return at_most(worst, 1e-4, "max relative gradient error over 100 probes");
}

Outcome softmax_rows_property(Rng& rng, const fs::path&) {
  double sum_err = 0, shift_err = 0;
  for (int k = 0; k < 200; ++k) {
    Tensor x = rnd(rng, 4, 6);
    Matrix s = softmax_rows(x).value();
    if ((s.array() < 0).any()) return {false, "negative softmax entry"};
    sum_err = std::max(sum_err, (s.rowwise().sum().array() - 1.0).abs().maxCoeff());
    Matrix shifted = x.value();
    for (Index i = 0; i < shifted.rows(); ++i) shifted.row(i).array() += rng.uniform(-20, 20);
    shift_err = std::max(shift_err, max_abs(softmax_rows(Tensor::from_matrix(shifted)).value(), s));
  }
  return {sum_err <= 1e-12 && shift_err <= 1e-12,
          "row-sum error " + num(sum_err) + ", shift error " + num(shift_err) + " (limit 1e-12)"};
}

Outcome matmul_associative(Rng& rng, const fs::path&) {
  double worst = 0;
  for (int k = 0; k < 100; ++k) {
    Tensor a = rnd(rng, 3, 5), b = rnd(rng, 5, 4), c = rnd(rng, 4, 2);
    Matrix left = matmul(matmul(a, b), c).value(), right = matmul(a, matmul(b, c)).value();
    worst = std::max(worst, (left - right).norm() / std::max(1.0, left.norm()));
  }
  return at_most(worst, 1e-9, "relative difference");
}

Outcome replay(Rng& rng, const fs::path&) {
  const std::uint64_t seed = rng.next_u64();
  auto run = [seed] {
    Rng r(seed);
    Tensor w = rnd(r, 4, 4, true), x = rnd(r, 3, 4);
    Tape tape;
    Tape::Scope scope(tape);
    Tensor loss = sum_squares(layer_norm(softmax_rows(matmul(x, w)), LayerNormParams::identity(4)));
    backward(loss, tape);
    return std::make_pair(loss.item(), w.grad());
  };
  auto [l1, g1] = run();
  auto [l2, g2] = run();
  const bool same = std::bit_cast<std::uint64_t>(l1) == std::bit_cast<std::uint64_t>(l2) &&
                    std::memcmp(g1.data(), g2.data(), sizeof(double) * static_cast<std::size_t>(g1.size())) == 0;
  return {same, same ? "loss and gradients bit-identical" : "replay differs"};
}

// fogsim

Outcome fog_monotone(Rng& rng, const fs::path&) {
  int violations = 0;
  for (int k = 0; k < 200; ++k) {
    Image clear = random_image(rng, 2, 2);
    DepthMap depth = random_depth(rng, 2, 2);
    const double a = rng.uniform();
    Image::Pixels previous = Image::Pixels::Constant(4, 3, 2.0);
    for (double beta = 0.0; beta <= 1.0; beta += 0.05) {
      Image::Pixels gap = (apply_fog(clear, depth, FogParams{beta, a}).pixels - a).abs();
      violations += static_cast<int>((gap > previous + 1e-15).count());
      previous = gap;
    }
  }
  return {violations == 0, std::to_string(violations) + " increases of |I_t - A| with beta"};
}

Outcome fog_channels(Rng& rng, const fs::path&) {
  Image clear = random_image(rng, 4, 4);
  DepthMap depth = random_depth(rng, 4, 4);
  Image permuted = clear;
  permuted.pixels.col(0) = clear.pixels.col(2);
  permuted.pixels.col(2) = clear.pixels.col(0);
  FogParams fog{rng.uniform(0, 0.2), rng.uniform(0.5, 1.0)};
  Image a = apply_fog(clear, depth, fog), b = apply_fog(permuted, depth, fog);
  const bool ok = (a.pixels.col(0) == b.pixels.col(2)).all() && (a.pixels.col(1) == b.pixels.col(1)).all() &&
                  (a.pixels.col(2) == b.pixels.col(0)).all();
  return {ok, ok ? "channel swap commutes with fog" : "channels interact"};
}

Outcome fog_multiplicative(Rng& rng, const fs::path&) {
  double worst = 0;
  for (int k = 0; k < 100; ++k) {
    DepthMap d = random_depth(rng, 3, 3);
    const double b1 = rng.uniform(0, 0.5), b2 = rng.uniform(0, 0.5);
    DepthMap::Values rhs = transmission(d, b1) * transmission(d, b2);
    worst = std::max(worst, (transmission(d, b1 + b2) - rhs).abs().maxCoeff());
  }
  return at_most(worst, 1e-12, "max |t(b1+b2) - t(b1) t(b2)|");
}

Outcome fog_annotations(Rng& rng, const fs::path&) {
  SceneOptions options;
  options.max_objects = 5;
  double worst = 1.0;
  for (int trial = 0; trial < 100; ++trial) {
    SceneSpec spec = random_scene(32, 32, rng, options);
    RenderedScene scene = render_scene(spec);
    for (std::size_t i = 0; i < spec.objects.size(); ++i) {
      double x0 = 1e9, y0 = 1e9, x1 = -1e9, y1 = -1e9;
      for (Index y = 0; y < 32; ++y)
        for (Index x = 0; x < 32; ++x)
          if (object_covers(spec.objects[i], x, y)) {
            x0 = std::min<double>(x0, x);
            y0 = std::min<double>(y0, y);
            x1 = std::max<double>(x1, x + 1);
            y1 = std::max<double>(y1, y + 1);
          }
      if (!(x1 > x0)) return {false, "object with an empty pixel mask"};
      Box mask((x0 + x1) / 64.0, (y0 + y1) / 64.0, (x1 - x0) / 32.0, (y1 - y0) / 32.0);
      worst = std::min(worst, iou(scene.annotation.boxes[i], mask));
    }
  }
  return {worst >= 0.95, "minimum IoU with pixel-mask box " + num(worst) + " (floor 0.95)"};
}

Outcome fog_identity(Rng& rng, const fs::path&) {
  Image clear = random_image(rng, 8, 8);
  DepthMap depth = random_depth(rng, 8, 8);
  const double identity_err = (apply_fog(clear, depth, FogParams{0.0, 0.9}).pixels - clear.pixels).abs().maxCoeff();
  DepthMap far(8, 8);
  far.depth.setConstant(1e4);
  const double limit_err = (apply_fog(clear, far, FogParams{0.08, 0.9}).pixels - 0.9).abs().maxCoeff();
  return {identity_err == 0.0 && limit_err <= 1e-6,
          "beta=0 error " + num(identity_err) + ", far-depth error " + num(limit_err)};
}

// attention

Outcome attention_row_stochastic(Rng& rng, const fs::path&) {
  double worst = 0;
  for (int trial = 0; trial < 50; ++trial) {
    AttentionParams single = AttentionParams::random(4, 1, 3, rng), multi = AttentionParams::random(4, 2, 3, rng);
    Tensor x = rnd(rng, 6, 4), v_w = scale(rnd(rng, 6, 1), 5.0);
    FusionParams fusion{multi, AttentionParams::random(4, 2, 3, rng), AttentionParams::random(4, 2, 3, rng),
                        LayerNormParams::identity(4)};
    AttentionTrace trace;
    self_attention(x, single, &trace);
    multi_head_attention(x, x, x, multi, &trace);
    multi_head_attention(rnd(rng, 3, 4), x, x, multi, &trace);
    fog_aware_attention(x, v_w, single, FogScaleAxis::key, &trace);
    fog_aware_attention(x, v_w, single, FogScaleAxis::query, &trace);
    multi_head_fog_attention(x, v_w, multi, FogScaleAxis::key, &trace);
    worst = std::max(worst, row_stochastic_error(trace));
  }
  return at_most(worst, 1e-12, "max |row sum - 1|");
}

Outcome attention_unit_scalar(Rng& rng, const fs::path&) {
  double worst = 0;
  for (int trial = 0; trial < 50; ++trial) {
    AttentionParams single = AttentionParams::random(5, 1, 4, rng);
    Tensor x = rnd(rng, 7, 5);
    Tensor ones = Tensor::from_matrix(Matrix::Ones(7, 1));
    worst = std::max(worst, max_abs(fog_aware_attention(x, ones, single).value(), self_attention(x, single).value()));
  }
  return at_most(worst, 1e-12, "max difference from self-attention");
}

Outcome attention_single_head(Rng& rng, const fs::path&) {
  double worst = 0;
  for (int trial = 0; trial < 50; ++trial) {
    AttentionParams p = AttentionParams::random(4, 1, 4, rng);
    p.w_o = Tensor::from_matrix(Matrix::Identity(4, 4));
    Tensor x = rnd(rng, 5, 4);
    worst = std::max(worst, max_abs(multi_head_attention(x, x, x, p).value(), self_attention(x, p).value()));
  }
  return {worst == 0.0, "max difference " + num(worst) + " (must be exact)"};
}

Outcome attention_permutation(Rng& rng, const fs::path&) {
  AttentionParams p = AttentionParams::random(5, 2, 4, rng);
  double worst = 0;
  for (int trial = 0; trial < 50; ++trial) {
    Tensor x = rnd(rng, 7, 5);
    std::vector<Index> perm(7);
    std::iota(perm.begin(), perm.end(), Index{0});
    std::shuffle(perm.begin(), perm.end(), rng);
    Tensor px = gather_rows(x, perm);
    worst = std::max(worst, max_abs(multi_head_attention(px, px, px, p).value(),
                                    gather_rows(multi_head_attention(x, x, x, p), perm).value()));
  }
  return at_most(worst, 1e-12, "max |SA(Px) - P SA(x)|");
}

Outcome attention_fusion_collapse(Rng& rng, const fs::path&) {
  double worst = 0;
  for (int trial = 0; trial < 20; ++trial) {
    AttentionParams shared = AttentionParams::random(6, 2, 3, rng);
    FusionParams tied{shared, shared, shared, LayerNormParams::identity(6)};
    Tensor x = rnd(rng, 5, 6);
    Tensor e_img = multi_head_attention(x, x, x, shared);
    Matrix reduced = layer_norm(add(e_img, multi_head_attention(e_img, e_img, e_img, shared)), tied.norm).value();
    worst = std::max(worst, max_abs(fusion_encoder_layer(x, x, tied).fused.value(), reduced));
  }
  return at_most(worst, 1e-12, "max difference from layer_norm(E + SA(E))");
}

Outcome attention_gradient(Rng& rng, const fs::path&) {
  const double worst = worst_gradient(100, rng, [](Rng& r) {
    AttentionParams single = AttentionParams::random(4, 1, 3, r), multi = AttentionParams::random(4, 2, 3, r);
    WeatherScalarParams ws = WeatherScalarParams::random(4, r);
    FusionParams fusion{AttentionParams::random(4, 2, 3, r), AttentionParams::random(4, 2, 3, r),
                        AttentionParams::random(4, 2, 3, r), LayerNormParams::identity(4)};
    Tensor x = rnd(r, 5, 4, true), xf = rnd(r, 5, 4, true), w = rnd(r, 5, 4), w3 = rnd(r, 5, 3);
    auto with = [](std::vector<Tensor> a, const std::vector<Tensor>& b) {
      a.insert(a.end(), b.begin(), b.end());
      return a;
    };
    return std::vector<GradCase>{
        {[=] { return sum(mul(self_attention(x, single), w3)); }, with({x}, single.parameters())},
        {[=] { return sum(mul(multi_head_attention(x, xf, xf, multi), w)); }, with({x, xf}, multi.parameters())},
        {[=] { return sum(mul(fog_aware_attention(x, weather_scalar(xf, ws), single), w3)); },
         with({x, xf, ws.w_t}, single.parameters())},
        {[=] { return sum(mul(multi_head_fog_attention(x, weather_scalar(xf, ws, false), multi), w)); },
         with({x, xf, ws.w_t}, multi.parameters())},
        {[=] { return sum(mul(fusion_encoder_layer(x, xf, fusion).fused, w)); }, with({x, xf}, fusion.parameters())},
    };
  });
  return at_most(worst, 1e-4, "max relative gradient error over 100 probes");
}

// detector

DetectorConfig base_config(std::uint64_t seed, Variant v = Variant::baseline) {
  DetectorConfig c;
  c.variant = v;
  c.seed = seed;
  return c;
}

double brute_force_min(const Matrix& cost) {
  std::vector<Index> cols(static_cast<std::size_t>(cost.cols()));
  std::iota(cols.begin(), cols.end(), Index{0});
  double best = std::numeric_limits<double>::infinity();
  do {
    double total = 0;
    for (Index i = 0; i < cost.rows(); ++i) total += cost(i, cols[static_cast<std::size_t>(i)]);
    best = std::min(best, total);
  } while (std::next_permutation(cols.begin(), cols.end()));
  return best;
}

Outcome hungarian_oracle(Rng& rng, const fs::path&) {
  int mismatches = 0;
  for (int k = 0; k < 1000; ++k) {
    const Index n = rng.uniform_int(1, 7), m = rng.uniform_int(n, 7);
    Matrix cost(n, m);
    for (Index i = 0; i < cost.size(); ++i) cost.data()[i] = rng.uniform(0, 10);
    if (k % 3 == 0) cost = cost.array().round();  // ties
    Assignment a = solve_assignment(cost);
    std::vector<bool> used(static_cast<std::size_t>(m), false);
    double total = 0;
    bool valid = static_cast<Index>(a.column_of_row.size()) == n;
    for (Index i = 0; valid && i < n; ++i) {
      const Index c = a.column_of_row[static_cast<std::size_t>(i)];
      valid = c >= 0 && c < m && !used[static_cast<std::size_t>(c)];
      if (valid) {
        used[static_cast<std::size_t>(c)] = true;
        total += cost(i, c);
      }
    }
    const double best = brute_force_min(cost);
    if (!valid || std::abs(total - best) > 1e-9 * std::max(1.0, best)) ++mismatches;
  }
  return {mismatches == 0, std::to_string(mismatches) + " of 1000 assignments off the brute-force optimum"};
}

Outcome loss_gt_permutation(Rng& rng, const fs::path&) {
  double worst = 0;
  for (int k = 0; k < 20; ++k) {
    DetectorConfig cfg = base_config(rng.next_u64());
    DetectorParams p = DetectorParams::init(cfg);
    SceneOptions opts;
    opts.max_objects = 4;
    RenderedScene scene = render_scene(random_scene(32, 32, rng, opts));
    DetectionOutput out = forward(make_input(cfg, scene.image, nullptr, 0), cfg, p).output;
    Annotation shuffled = scene.annotation;
    std::vector<std::size_t> order(shuffled.size());
    std::iota(order.begin(), order.end(), std::size_t{0});
    std::shuffle(order.begin(), order.end(), rng);
    for (std::size_t i = 0; i < order.size(); ++i) {
      shuffled.boxes[i] = scene.annotation.boxes[order[i]];
      shuffled.labels[i] = scene.annotation.labels[order[i]];
    }
    auto loss = [&](const Annotation& a) {
      return detection_loss(out, a, hungarian_match(out, a, cfg.loss), cfg.loss).total.item();
    };
    const double a = loss(scene.annotation), b = loss(shuffled);
    worst = std::max(worst, std::abs(a - b) / std::max(1.0, std::abs(a)));
  }
  return at_most(worst, 1e-12, "relative loss change under ground-truth reordering");
}

Outcome gradient_step(Rng& rng, const fs::path&) {
  int decreased = 0;
  for (int k = 0; k < 10; ++k) {
    DetectorConfig cfg = base_config(rng.next_u64());
    DetectorParams p = DetectorParams::init(cfg);
    RenderedScene scene = render_scene(random_scene(32, 32, rng));
    DetectorInput in = make_input(cfg, scene.image, nullptr, 0);
    auto loss_at = [&](Tape* tape) {
      std::optional<Tape::Scope> scope;
      if (tape) scope.emplace(*tape);
      auto fr = forward(in, cfg, p);
      return detection_loss(fr.output, scene.annotation, hungarian_match(fr.output, scene.annotation, cfg.loss),
                            cfg.loss)
          .total;
    };
    Tape tape;
    Tensor before = loss_at(&tape);
    backward(before, tape);
    for (auto& t : p.parameters()) {
      t.mutable_value() -= 1e-3 * t.grad();
      t.zero_grad();
    }
    decreased += loss_at(nullptr).item() < before.item();
  }
  return {decreased >= 9, std::to_string(decreased) + "/10 steps decreased the loss (need 9)"};
}

Outcome variant_dispatch(Rng& rng, const fs::path&) {
  for (int k = 0; k < 5; ++k) {
    DetectorConfig base = base_config(rng.next_u64()), pl = base;
    pl.variant = Variant::pl;
    DetectorParams p = DetectorParams::init(base);
    DetectorInput in = make_input(base, random_image(rng, 32, 32), nullptr, 0);
    ForwardResult a = forward(in, base, p), b = forward(in, pl, p);
    if (a.memory.value() != b.memory.value() || a.output.boxes.value() != b.output.boxes.value() ||
        a.output.class_logits.value() != b.output.class_logits.value()) {
      return {false, "baseline and PL activations differ"};
    }
  }
  return {true, "baseline and PL activations bit-identical"};
}

Annotation random_annotation(Rng& rng) {
  Annotation a;
  for (auto k = rng.uniform_int(1, 4); k > 0; --k) {
    const double w = rng.uniform(0.1, 0.4), h = rng.uniform(0.1, 0.4);
    a.boxes.push_back(Box(rng.uniform(w / 2, 1 - w / 2), rng.uniform(h / 2, 1 - h / 2), w, h));
    a.labels.push_back(static_cast<int>(rng.uniform_int(0, kCategoryCount - 1)));
  }
  return a;
}

// The loss is checked on free head outputs with the matching held fixed, and
// the backbone on its own, so no discrete choice sits inside a difference.
Outcome detector_gradient(Rng& rng, const fs::path&) {
  const double worst = worst_gradient(100, rng, [](Rng& r) {
    Tensor box_logits = rnd(r, 5, 4, true), class_logits = rnd(r, 5, kCategoryCount + 1, true);
    Annotation gt = random_annotation(r);
    MatchResult match = hungarian_match({sigmoid(box_logits), class_logits}, gt, {});
    BackboneParams bb = BackboneParams::random(3, {2, 3, 2}, r);
    for (auto& b : bb.biases)
      for (Index i = 0; i < b.size(); ++i) b.mutable_value().data()[i] = r.normal(0, 0.1);
    Matrix img(64, 3);
    for (Index i = 0; i < img.size(); ++i) img.data()[i] = r.uniform();
    Tensor image = Tensor::from_matrix(Shape{8, 8, 3}, img, true);
    Tensor w = Tensor::from_matrix(Shape{1, 1, 2}, rnd(r, 1, 2).value());
    std::vector<Tensor> bb_params = bb.parameters();
    bb_params.push_back(image);
    return std::vector<GradCase>{
        {[=] { return detection_loss({sigmoid(box_logits), class_logits}, gt, match, {}).total; },
         {box_logits, class_logits}},
        {[=] {
           auto maps = backbone_forward(image, bb);
           return add(sum(mul(maps[2], w)), sum_squares(maps[1]));
         },
         bb_params},
    };
  });
  return at_most(worst, 1e-4, "max relative gradient error of detection loss and backbone");
}

// distill

std::vector<Tensor> random_stack(Rng& rng) {
  const std::array<Shape, 3> shapes{Shape{16, 16, 8}, Shape{8, 8, 16}, Shape{4, 4, 32}};
  std::vector<Tensor> out;
  for (const auto& s : shapes) out.push_back(Tensor::from_matrix(s, rnd(rng, shape_size(s) / s.back(), s.back()).value()));
  return out;
}

TrainExample fog_example(Rng& rng) {
  RenderedScene r = render_scene(random_scene(32, 32, rng));
  const double beta = fog_presets::kHigh;
  return {"x", r.image, apply_fog(r.image, r.depth, FogParams{beta, 0.9}), r.annotation, r.depth, beta};
}

Outcome perc_tied_zero(Rng& rng, const fs::path&) {
  DetectorConfig cfg = base_config(rng.next_u64(), Variant::pl);
  DetectorParams p = DetectorParams::init(cfg);
  auto pair = TeacherStudentPair::make(cfg, p, p.clone(), PerceptualConfig{});
  const double v = perceptual_loss(fog_example(rng).clear, fog_example(rng).clear, pair).item();
  Image img = random_image(rng, 32, 32);
  const double w = perceptual_loss(img, img, pair).item();
  return {v > 0.0 && w == 0.0, "identical inputs " + num(w) + " (must be 0), distinct inputs " + num(v)};
}

Outcome perc_non_negative(Rng& rng, const fs::path&) {
  double lowest = 1e300;
  for (int k = 0; k < 1000; ++k) lowest = std::min(lowest, perceptual_loss(random_stack(rng), random_stack(rng), {}).item());
  return {lowest >= 0.0, "minimum over 1000 pairs " + num(lowest)};
}

Outcome perc_symmetric(Rng& rng, const fs::path&) {
  for (int k = 0; k < 200; ++k) {
    auto a = random_stack(rng), b = random_stack(rng);
    if (perceptual_loss(a, b, {}).item() != perceptual_loss(b, a, {}).item()) return {false, "asymmetric pair"};
  }
  return {true, "200 swapped pairs equal"};
}

Outcome perc_teacher_frozen(Rng& rng, const fs::path&) {
  DetectorConfig cfg = base_config(rng.next_u64(), Variant::pl);
  auto pair = TeacherStudentPair::make(cfg, DetectorParams::init(cfg), DetectorParams::init(base_config(rng.next_u64())),
                                       PerceptualConfig{});
  Sgd opt(pair.student.parameters(), {0.02, 0.9, 1.0});
  std::vector<TrainExample> batch{fog_example(rng), fog_example(rng)};
  for (std::size_t step = 1; step <= 3; ++step) distill_step(batch, pair, opt, step);
  // a direct backward through the loss as well
  Tape tape;
  {
    Tape::Scope scope(tape);
    backward(perceptual_loss(batch[0].clear, batch[0].input, pair), tape);
  }
  for (const auto& [name, t] : pair.teacher.named_parameters()) {
    if (t.requires_grad() || t.has_grad()) return {false, "teacher parameter " + name + " carries a gradient"};
  }
  return {true, "no teacher gradients after 3 steps"};
}

Outcome perc_homogeneous(Rng& rng, const fs::path&) {
  DetectorConfig cfg = base_config(rng.next_u64(), Variant::pl);
  DetectorParams teacher = DetectorParams::init(cfg), student = DetectorParams::init(base_config(rng.next_u64()));
  std::vector<TrainExample> batch{fog_example(rng), fog_example(rng)};
  auto l_perc = [&](double c) {
    auto pair = TeacherStudentPair::make(cfg, teacher, student.clone(), PerceptualConfig{{2, 3}, {0.5 * c, 1.0 * c}});
    Sgd opt(pair.student.parameters(), {0.0, 0.9, 0.0});
    return distill_step(batch, pair, opt, 1).l_perc;
  };
  const double base = l_perc(1.0);
  for (double c : {0.25, 2.0, 16.0}) {
    if (l_perc(c) != c * base) return {false, "scaling lambda by " + num(c) + " is not exact"};
  }
  return {base > 0, "L_perc scales exactly for c in {0.25, 2, 16}"};
}

Outcome perc_gradient(Rng& rng, const fs::path&) {
  double worst = 0;
  for (int probe = 0; probe < 10; ++probe) {
    DetectorConfig cfg = base_config(rng.next_u64(), Variant::pl);
    auto pair = TeacherStudentPair::make(cfg, DetectorParams::init(cfg),
                                         DetectorParams::init(base_config(rng.next_u64())), PerceptualConfig{});
    TrainExample ex = fog_example(rng);
    GradCheckOptions options;
    options.seed = static_cast<std::uint64_t>(probe);
    options.coords_per_param = 4;
    worst = std::max(worst, gradient_check_report([&] { return perceptual_loss(ex.clear, ex.input, pair); },
                                                  pair.student.backbone.parameters(), options)
                                .max_relative_error);
  }
  return at_most(worst, 1e-4, "max relative gradient error of the perceptual loss");
}

// evalkit

Box random_box(Rng& rng) {
  const double w = rng.uniform(0.05, 0.4), h = rng.uniform(0.05, 0.4);
  return Box(rng.uniform(w / 2, 1 - w / 2), rng.uniform(h / 2, 1 - h / 2), w, h);
}

struct EvalInstance {
  std::vector<EvalPrediction> preds;
  std::vector<ImageGroundTruth> gts;
};

EvalInstance random_instance(Rng& rng) {
  EvalInstance inst;
  const auto images = rng.uniform_int(1, 3);
  for (std::int64_t i = 0; i < images; ++i) {
    ImageGroundTruth g{"img" + std::to_string(i), {}};
    const auto n_gt = rng.uniform_int(i == 0 ? 1 : 0, 4);
    for (std::int64_t k = 0; k < n_gt; ++k) {
      g.annotation.boxes.push_back(random_box(rng));
      g.annotation.labels.push_back(static_cast<int>(rng.uniform_int(0, 2)));
    }
    for (std::int64_t k = rng.uniform_int(0, 4); k > 0; --k) {
      EvalPrediction p{g.image_id, random_box(rng), static_cast<int>(rng.uniform_int(0, 2)), rng.uniform()};
      if (n_gt > 0 && rng.uniform() < 0.7) {
        const auto j = static_cast<std::size_t>(rng.uniform_int(0, n_gt - 1));
        p.box = g.annotation.boxes[j];
        for (int c = 0; c < 4; ++c) p.box[c] += rng.normal(0, 0.02);
        p.box[2] = std::max(p.box[2], 0.01);
        p.box[3] = std::max(p.box[3], 0.01);
        if (rng.uniform() < 0.8) p.category = g.annotation.labels[j];
      }
      inst.preds.push_back(p);
    }
    inst.gts.push_back(std::move(g));
  }
  return inst;
}

// Enumerates every one-to-one matching per image at IoU >= 0.5 and keeps the
// one where each prediction, in confidence order, holds the best free
// ground truth; AP sums, over true positives, the best precision at that
// rank or later.
std::optional<double> enumerated_ap(const EvalInstance& inst, int category) {
  std::map<std::string, std::vector<Box>> gt;
  std::size_t n_gt = 0;
  for (const auto& img : inst.gts)
    for (std::size_t i = 0; i < img.annotation.size(); ++i)
      if (img.annotation.labels[i] == category) {
        gt[img.image_id].push_back(img.annotation.boxes[i]);
        ++n_gt;
      }
  if (n_gt == 0) return std::nullopt;
  std::vector<EvalPrediction> ranked;
  for (const auto& p : inst.preds)
    if (p.category == category) ranked.push_back(p);
  std::sort(ranked.begin(), ranked.end(), [](const auto& a, const auto& b) { return a.confidence > b.confidence; });

  std::vector<bool> tp(ranked.size(), false);
  for (const auto& [id, boxes] : gt) {
    std::vector<std::size_t> idx;
    for (std::size_t k = 0; k < ranked.size(); ++k)
      if (ranked[k].image_id == id) idx.push_back(k);
    std::vector<int> assign(idx.size(), -1), chosen;
    std::vector<bool> used(boxes.size(), false);
    auto consistent = [&] {
      std::vector<bool> taken(boxes.size(), false);
      for (std::size_t k = 0; k < idx.size(); ++k) {
        double best = -1;
        for (std::size_t j = 0; j < boxes.size(); ++j)
          if (!taken[j]) best = std::max(best, iou(ranked[idx[k]].box, boxes[j]));
        if (assign[k] < 0 ? best >= 0.5 : iou(ranked[idx[k]].box, boxes[static_cast<std::size_t>(assign[k])]) != best)
          return false;
        if (assign[k] >= 0) taken[static_cast<std::size_t>(assign[k])] = true;
      }
      return true;
    };
    std::function<void(std::size_t)> rec = [&](std::size_t k) {
      if (k == idx.size()) {
        if (consistent()) chosen = assign;
        return;
      }
      rec(k + 1);
      for (std::size_t j = 0; j < boxes.size(); ++j) {
        if (used[j] || iou(ranked[idx[k]].box, boxes[j]) < 0.5) continue;
        used[j] = true;
        assign[k] = static_cast<int>(j);
        rec(k + 1);
        used[j] = false;
        assign[k] = -1;
      }
    };
    rec(0);
    for (std::size_t k = 0; k < chosen.size(); ++k) tp[idx[k]] = chosen[k] >= 0;
  }
  std::vector<double> precision(ranked.size());
  std::size_t hits = 0;
  for (std::size_t k = 0; k < ranked.size(); ++k) {
    hits += tp[k];
    precision[k] = static_cast<double>(hits) / static_cast<double>(k + 1);
  }
  double area = 0;
  for (std::size_t k = 0; k < ranked.size(); ++k)
    if (tp[k]) area += *std::max_element(precision.begin() + static_cast<std::ptrdiff_t>(k), precision.end()) / n_gt;
  return area;
}

Outcome eval_iou_symmetric(Rng& rng, const fs::path&) {
  for (int k = 0; k < 1000; ++k) {
    Box a = random_box(rng), b = random_box(rng);
    if (k % 2) b = a + Box(rng.normal(0, 0.02), rng.normal(0, 0.02), 0.01, -0.01);
    if (iou(a, b) != iou(b, a)) return {false, "iou(a, b) != iou(b, a)"};
  }
  return {true, "1000 pairs symmetric"};
}

Outcome eval_monotone_confidence(Rng& rng, const fs::path&) {
  for (int k = 0; k < 200; ++k) {
    EvalInstance inst = random_instance(rng);
    auto squashed = inst.preds;
    for (auto& p : squashed) p.confidence = 0.1 + 0.5 * p.confidence * p.confidence;
    for (int c = 0; c < 3; ++c) {
      if (average_precision(inst.preds, inst.gts, c) != average_precision(squashed, inst.gts, c))
        return {false, "AP changed under a monotone confidence transform"};
    }
  }
  return {true, "200 instances unchanged"};
}

Outcome eval_false_positive(Rng& rng, const fs::path&) {
  for (int k = 0; k < 200; ++k) {
    EvalInstance inst = random_instance(rng);
    for (int c = 0; c < 3; ++c) {
      auto before = average_precision(inst.preds, inst.gts, c);
      if (!before) continue;
      auto with_fp = inst.preds;
      with_fp.push_back({"unlabelled", random_box(rng), c, 1.0});
      if (*average_precision(with_fp, inst.gts, c) > *before) return {false, "a leading false positive raised AP"};
    }
  }
  return {true, "200 instances checked"};
}

Outcome eval_order_invariant(Rng& rng, const fs::path&) {
  for (int k = 0; k < 200; ++k) {
    EvalInstance inst = random_instance(rng);
    auto shuffled = inst.preds;
    std::shuffle(shuffled.begin(), shuffled.end(), rng);
    MapReport a = map50(inst.preds, inst.gts), b = map50(shuffled, inst.gts);
    if (a.map != b.map || a.per_category != b.per_category) return {false, "map50 depends on prediction order"};
  }
  return {true, "200 shuffles unchanged"};
}

Outcome eval_oracle(Rng& rng, const fs::path&) {
  double worst = 0;
  for (int k = 0; k < 500; ++k) {
    EvalInstance inst = random_instance(rng);
    MapReport got = map50(inst.preds, inst.gts);
    double total = 0;
    int counted = 0;
    for (int c = 0; c < kCategoryCount; ++c) {
      auto want = enumerated_ap(inst, c);
      const auto& have = got.per_category[static_cast<std::size_t>(c)];
      if (want.has_value() != have.has_value()) return {false, "category presence differs from the oracle"};
      if (!want) continue;
      worst = std::max(worst, std::abs(*want - *have));
      total += *want;
      ++counted;
    }
    worst = std::max(worst, std::abs(total / counted - got.map));
  }
  return at_most(worst, 1e-9, "max deviation from the enumeration oracle over 500 scenes");
}

// harness

std::map<std::string, std::string> tree_hashes(const fs::path& root) {
  std::map<std::string, std::string> out;
  for (const auto& e : fs::recursive_directory_iterator(root)) {
    if (e.is_regular_file()) out[fs::relative(e.path(), root).string()] = file_hash(e.path());
  }
  return out;
}

RunConfig tiny_run(const fs::path& data, Variant v) {
  RunConfig cfg;
  cfg.generate.count = 4;
  cfg.generate.splits = {{"train", {fog_presets::kLow, fog_presets::kHigh}, 0, std::nullopt}};
  cfg.train.dataset = data / "train";
  cfg.train.model.variant = v;
  cfg.train.steps = 8;
  cfg.train.batch_size = 2;
  cfg.train.teacher.steps = 8;
  cfg.eval.data_root = data;
  cfg.eval.splits = {"train"};
  return cfg;
}

Outcome harness_determinism(Rng& rng, const fs::path& scratch) {
  const std::uint64_t seed = rng.next_u64() % 1000;
  const fs::path data = scratch / "determinism_data";
  RunConfig cfg = tiny_run(data, Variant::pl);
  cmd_generate(cfg, seed, data);
  TrainResult a = cmd_train(cfg, seed, scratch / "run_a");
  TrainResult b = cmd_train(cfg, seed, scratch / "run_b");
  auto slurp = [](const fs::path& p) { return file_hash(p); };
  const bool metrics_same = slurp(scratch / "run_a" / "metrics.jsonl") == slurp(scratch / "run_b" / "metrics.jsonl");
  const bool ckpt_same = a.checkpoint_hash == b.checkpoint_hash && a.teacher_checkpoint_hash == b.teacher_checkpoint_hash;
  return {metrics_same && ckpt_same, std::string("metrics ") + (metrics_same ? "identical" : "differ") +
                                         ", checkpoint " + a.checkpoint_hash.substr(0, 12) +
                                         (ckpt_same ? " both runs" : " vs " + b.checkpoint_hash.substr(0, 12))};
}

Outcome harness_eval_read_only(Rng& rng, const fs::path& scratch) {
  const std::uint64_t seed = rng.next_u64() % 1000;
  const fs::path data = scratch / "eval_data";
  RunConfig cfg = tiny_run(data, Variant::baseline);
  cmd_generate(cfg, seed, data);
  cmd_train(cfg, seed, scratch / "eval_run");
  cfg.eval.checkpoint = scratch / "eval_run" / "checkpoint";
  const auto data_before = tree_hashes(data), ckpt_before = tree_hashes(*cfg.eval.checkpoint);
  nlohmann::json first = cmd_eval(cfg, seed, scratch / "eval_out_a");
  nlohmann::json second = cmd_eval(cfg, seed, scratch / "eval_out_b");
  const bool unchanged = data_before == tree_hashes(data) && ckpt_before == tree_hashes(*cfg.eval.checkpoint);
  const bool repeatable = first == second;
  return {unchanged && repeatable, std::string(unchanged ? "inputs unchanged" : "inputs modified") +
                                       (repeatable ? ", repeat evaluation identical" : ", repeat evaluation differs")};
}

Outcome harness_fail_fast(Rng& rng, const fs::path& scratch) {
  const std::uint64_t seed = rng.next_u64() % 1000;
  const fs::path data = scratch / "no_depth";
  RunConfig cfg = tiny_run(data, Variant::waa);
  cfg.generate.write_depth = false;
  cmd_generate(cfg, seed, data);
  std::string detail;
  for (Variant v : {Variant::waa, Variant::wfe}) {
    cfg.train.model.variant = v;
    const fs::path out = scratch / ("fail_fast_" + variant_name(v));
    try {
      cmd_train(cfg, seed, out);
      return {false, variant_name(v) + " trained without a fog stream"};
    } catch (const ConfigError& e) {
      if (fs::exists(out / "metrics.jsonl")) return {false, variant_name(v) + " started before failing"};
      detail = e.what();
    }
  }
  return {true, "rejected before training: " + detail};
}

struct Suite {
  SuiteInfo info;
  SuiteFn run;
};

const std::vector<Suite>& all_suites() {
  static const std::vector<Suite> suites = {
      {{"autodiff.gradient_check", "every differentiable op matches central differences, rel. error < 1e-4"},
       ops_gradient},
      {{"autodiff.softmax_rows", "softmax rows sum to 1 within 1e-12 and ignore per-row shifts"},
       softmax_rows_property},
      {{"autodiff.matmul_associativity", "(AB)C equals A(BC) within 1e-9 relative"}, matmul_associative},
      {{"autodiff.replay", "a seeded forward/backward replay is bit-identical"}, replay},
      {{"fog.monotone_in_beta", "|I_t - A| is non-increasing in beta"}, fog_monotone},
      {{"fog.channel_independence", "fog acts on each colour channel independently"}, fog_channels},
      {{"fog.transmission_multiplicative", "t(b1 + b2) = t(b1) t(b2) within 1e-12"}, fog_multiplicative},
      {{"fog.annotation_fit", "every annotation box has IoU >= 0.95 with its pixel mask"}, fog_annotations},
      {{"fog.identity_and_limit", "beta = 0 is the exact identity; far depth tends to A within 1e-6"}, fog_identity},
      {{"attention.row_stochastic", "every attention matrix is row-stochastic within 1e-12"},
       attention_row_stochastic},
      {{"attention.unit_weather_scalar", "fog-aware attention with V_w = 1 equals self-attention within 1e-12"},
       attention_unit_scalar},
      {{"attention.single_head_reduction", "multi-head attention with h = 1, W_O = I equals self-attention exactly"},
       attention_single_head},
      {{"attention.permutation_equivariance", "SA(Px) = P SA(x) within 1e-12"}, attention_permutation},
      {{"attention.fusion_collapse", "fusion with tied streams equals layer_norm(E + SA(E)) within 1e-12"},
       attention_fusion_collapse},
      {{"attention.gradient_check", "all attention variants pass gradient checks, rel. error < 1e-4"},
       attention_gradient},
      {{"detector.hungarian_oracle", "assignment cost equals the brute-force optimum on 1000 matrices up to 7x7"},
       hungarian_oracle},
      {{"detector.loss_gt_permutation", "detection loss is invariant to ground-truth order"}, loss_gt_permutation},
      {{"detector.gradient_step", "one lr = 1e-3 gradient step lowers the loss in >= 9 of 10 seeds"}, gradient_step},
      {{"detector.variant_dispatch", "baseline and PL forward passes are identical"}, variant_dispatch},
      {{"detector.gradient_check", "detection loss and backbone gradients match central differences, rel. error < 1e-4"},
       detector_gradient},
      {{"distill.tied_zero", "perceptual loss is 0 for tied parameters on identical inputs"}, perc_tied_zero},
      {{"distill.non_negative", "perceptual loss is >= 0"}, perc_non_negative},
      {{"distill.symmetric", "perceptual loss is symmetric in its two feature stacks"}, perc_symmetric},
      {{"distill.teacher_frozen", "teacher parameters never receive gradients"}, perc_teacher_frozen},
      {{"distill.lambda_homogeneity", "scaling every lambda by c scales L_perc by exactly c"}, perc_homogeneous},
      {{"distill.gradient_check", "perceptual loss gradients match central differences, rel. error < 1e-4"},
       perc_gradient},
      {{"eval.iou_symmetric", "iou(a, b) == iou(b, a)"}, eval_iou_symmetric},
      {{"eval.confidence_order_only", "AP is unchanged by strictly monotone confidence transforms"},
       eval_monotone_confidence},
      {{"eval.false_positive_first", "a false positive ranked above all predictions never raises AP"},
       eval_false_positive},
      {{"eval.order_invariance", "map50 does not depend on prediction order"}, eval_order_invariant},
      {{"eval.map_oracle", "mAP@50 equals an exhaustive matching evaluator within 1e-9"}, eval_oracle},
      {{"harness.determinism", "identical config and seed give identical metrics and checkpoint hashes"},
       harness_determinism},
      {{"harness.eval_read_only", "eval leaves dataset and checkpoint files unchanged"}, harness_eval_read_only},
      {{"harness.fog_stream_fail_fast", "WAA/WFE training stops before starting when the fog stream is absent"},
       harness_fail_fast},
  };
  return suites;
}

class SoftmaxFault {
 public:
  explicit SoftmaxFault(double delta) { testing::set_softmax_perturbation(delta); }
  ~SoftmaxFault() { testing::set_softmax_perturbation(0.0); }
  SoftmaxFault(const SoftmaxFault&) = delete;
  SoftmaxFault& operator=(const SoftmaxFault&) = delete;
};

}  // namespace

bool VerifyReport::passed() const {
  return std::all_of(suites.begin(), suites.end(), [](const auto& s) { return s.passed; });
}

std::vector<std::string> VerifyReport::failures() const {
  std::vector<std::string> out;
  for (const auto& s : suites)
    if (!s.passed) out.push_back(s.name);
  return out;
}

nlohmann::json VerifyReport::to_json() const {
  nlohmann::json list = nlohmann::json::array();
  for (const auto& s : suites) {
    list.push_back({{"name", s.name}, {"invariant", s.invariant}, {"passed", s.passed}, {"detail", s.detail}});
  }
  return {{"suites", list}, {"passed", passed()}, {"failures", failures()}, {"count", suites.size()}};
}

std::string VerifyReport::to_text() const {
  std::string out;
  for (const auto& s : suites) {
    out += std::string(s.passed ? "PASS " : "FAIL ") + s.name + ": " + s.invariant + " [" + s.detail + "]\n";
  }
  const auto failed = failures();
  out += std::to_string(suites.size() - failed.size()) + "/" + std::to_string(suites.size()) + " suites passed\n";
  return out;
}

const std::vector<SuiteInfo>& verify_suites() {
  static const std::vector<SuiteInfo> infos = [] {
    std::vector<SuiteInfo> v;
    for (const auto& s : all_suites()) v.push_back(s.info);
    return v;
  }();
  return infos;
}

VerifyReport run_verify(const VerifyOptions& options, const std::function<void(const SuiteResult&)>& on_result) {
  for (const auto& name : options.only) {
    const auto& suites = all_suites();
    if (std::none_of(suites.begin(), suites.end(), [&](const Suite& s) { return s.info.name == name; })) {
      throw ConfigError("unknown verify suite '" + name + "'");
    }
  }
  fs::path scratch = options.scratch;
  bool owns_scratch = false;
  if (scratch.empty()) {
    std::random_device rd;
    scratch = fs::temp_directory_path() / ("fogdetr_verify_" + std::to_string(rd()) + std::to_string(rd()));
    owns_scratch = true;
  }
  fs::create_directories(scratch);

  VerifyReport report;
  const Rng root(options.seed);
  SoftmaxFault fault(options.softmax_fault);
  for (const auto& suite : all_suites()) {
    if (!options.only.empty() &&
        std::find(options.only.begin(), options.only.end(), suite.info.name) == options.only.end()) {
      continue;
    }
    Rng rng = root.split(suite.info.name);
    SuiteResult r{suite.info.name, suite.info.invariant, false, "", 0.0};
    const auto t0 = std::chrono::steady_clock::now();
    try {
      Outcome o = suite.run(rng, scratch / suite.info.name);
      r.passed = o.passed;
      r.detail = o.detail;
    } catch (const std::exception& e) {
      r.detail = std::string("threw: ") + e.what();
    }
    r.seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
    if (on_result) on_result(r);
    report.suites.push_back(std::move(r));
  }
  if (owns_scratch) {
    std::error_code ec;
    fs::remove_all(scratch, ec);
  }
  return report;
}

}  // namespace fogdetr
