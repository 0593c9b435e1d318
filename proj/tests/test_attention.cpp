#include <doctest.h>

#include <algorithm>
#include <numeric>

#include "fogdetr/attention.hpp"
#include "fogdetr/gradcheck.hpp"
#include "reference.hpp"

using namespace fogdetr;
namespace ref = fogdetr::reference;

namespace {

Tensor random_tokens(Rng& rng, Index n, Index d, bool requires_grad = false) {
  Matrix m(n, d);
  for (Index i = 0; i < m.size(); ++i) m.data()[i] = rng.normal();
  return Tensor::from_matrix(std::move(m), requires_grad);
}

ref::Mat dense(const Tensor& t) { return t.value(); }

std::vector<ref::Head> heads_of(const AttentionParams& p) {
  std::vector<ref::Head> out;
  for (Index h = 0; h < p.heads(); ++h) out.push_back({dense(p.w_q[h]), dense(p.w_k[h]), dense(p.w_v[h])});
  return out;
}

double max_abs(const Matrix& a, const ref::Mat& b) { return (a - b).cwiseAbs().maxCoeff(); }

double row_stochastic_error(const AttentionTrace& trace) {
  double worst = 0;
  for (const auto& w : trace.weights) {
    if ((w.array() < 0).any()) return 1.0;
    worst = std::max(worst, (w.rowwise().sum().array() - 1.0).abs().maxCoeff());
  }
  return worst;
}

ref::Mat key_scale(const Tensor& v_w, Index n) {
  ref::Mat s(n, n);
  for (Index i = 0; i < n; ++i)
    for (Index j = 0; j < n; ++j) s(i, j) = v_w.value()(j, 0);
  return s;
}

}  // namespace

TEST_CASE("self_attention examples") {
  Rng rng(1);
  AttentionParams p = AttentionParams::random(4, 1, 3, rng);

  Tensor single = random_tokens(rng, 1, 4);
  Matrix v1 = single.value() * p.w_v[0].value();
  CHECK(max_abs(self_attention(single, p).value(), v1) == 0.0);

  AttentionParams zero_qk = p;
  zero_qk.w_q = {Tensor::zeros({4, 3})};
  zero_qk.w_k = {Tensor::zeros({4, 3})};
  Tensor x = random_tokens(rng, 5, 4);
  Matrix out = self_attention(x, zero_qk).value();
  Eigen::RowVectorXd mean_v = (x.value() * p.w_v[0].value()).colwise().mean();
  for (Index i = 0; i < 5; ++i) CHECK((out.row(i) - mean_v).cwiseAbs().maxCoeff() < 1e-14);

  Tensor x34 = random_tokens(rng, 3, 4);
  ref::Mat expected = ref::attention(dense(x34), dense(x34), dense(p.w_q[0]), dense(p.w_k[0]), dense(p.w_v[0]));
  CHECK(max_abs(self_attention(x34, p).value(), expected) < 1e-13);
}

TEST_CASE("multi_head_attention reductions and oracle") {
  Rng rng(2);
  AttentionParams one = AttentionParams::random(6, 1, 6, rng);
  one.w_o = Tensor::from_matrix(Matrix::Identity(6, 6));
  Tensor x = random_tokens(rng, 5, 6);
  CHECK(multi_head_attention(x, x, x, one).value() == self_attention(x, one).value());

  AttentionParams two = AttentionParams::random(6, 2, 3, rng);
  ref::Mat expected = ref::multi_head(dense(x), dense(x), heads_of(two), dense(two.w_o));
  CHECK(max_abs(multi_head_attention(x, x, x, two).value(), expected) < 1e-13);

  // cross-attention: distinct query stream
  Tensor q = random_tokens(rng, 3, 6);
  ref::Mat cross = ref::multi_head(dense(q), dense(x), heads_of(two), dense(two.w_o));
  CHECK(max_abs(multi_head_attention(q, x, x, two).value(), cross) < 1e-13);
}

TEST_CASE("multi_head_attention rejects W_O mismatch") {
  Rng rng(3);
  AttentionParams p = AttentionParams::random(4, 2, 2, rng);
  p.w_o = Tensor::zeros({3, 4});
  Tensor x = random_tokens(rng, 3, 4);
  CHECK_THROWS_AS(multi_head_attention(x, x, x, p), ParameterError);
  AttentionParams q = AttentionParams::random(4, 1, 2, rng);
  CHECK_THROWS_AS(self_attention(random_tokens(rng, 3, 5), q), DimensionError);
}

TEST_CASE("self-attention is permutation equivariant") {
  Rng rng(4);
  AttentionParams p = AttentionParams::random(5, 2, 4, rng);
  for (int trial = 0; trial < 50; ++trial) {
    Tensor x = random_tokens(rng, 7, 5);
    std::vector<Index> perm(7);
    std::iota(perm.begin(), perm.end(), Index{0});
    for (Index i = 6; i > 0; --i) std::swap(perm[i], perm[rng.uniform_int(0, i)]);
    Tensor px = gather_rows(x, perm);
    Matrix lhs = multi_head_attention(px, px, px, p).value();
    Matrix rhs = gather_rows(multi_head_attention(x, x, x, p), perm).value();
    CHECK((lhs - rhs).cwiseAbs().maxCoeff() <= 1e-12);
  }
}

TEST_CASE("weather_scalar examples") {
  Rng rng(5);
  Tensor z = random_tokens(rng, 6, 4);
  WeatherScalarParams zero{Tensor::zeros({4, 1})};
  CHECK((weather_scalar(z, zero).value().array() == 0.5).all());

  WeatherScalarParams w = WeatherScalarParams::random(4, rng);
  Tensor big = Tensor::from_matrix(Matrix::Constant(3, 4, 1.0));
  WeatherScalarParams neg{Tensor::from_matrix(Matrix::Constant(4, 1, -100.0))};
  CHECK((weather_scalar(big, neg).value().array() < 1e-100).all());

  Matrix got = weather_scalar(z, w).value();
  Matrix raw = weather_scalar(z, w, false).value();
  for (Index i = 0; i < 6; ++i) {
    double dot = 0;
    for (Index c = 0; c < 4; ++c) dot += z.value()(i, c) * w.w_t.value()(c, 0);
    CHECK(std::abs(raw(i, 0) - dot) < 1e-14);
    CHECK(std::abs(got(i, 0) - ref::sigmoid(dot)) < 1e-14);
  }
}

TEST_CASE("fog_aware_attention examples") {
  Rng rng(6);
  AttentionParams p = AttentionParams::random(4, 1, 4, rng);
  Tensor x = random_tokens(rng, 5, 4);

  Tensor ones = Tensor::from_matrix(Matrix::Ones(5, 1));
  CHECK(fog_aware_attention(x, ones, p).value() == self_attention(x, p).value());

  AttentionTrace trace;
  Tensor zeros = Tensor::zeros({5, 1});
  fog_aware_attention(x, zeros, p, FogScaleAxis::key, &trace);
  CHECK((trace.weights[0].array() - 0.2).abs().maxCoeff() < 1e-15);

  Matrix spike = Matrix::Constant(5, 1, 0.3);
  spike(2, 0) = 25.0;
  Tensor v_w = Tensor::from_matrix(spike);
  ref::Mat scale = key_scale(v_w, 5);
  ref::Mat expected = ref::attention(dense(x), dense(x), dense(p.w_q[0]), dense(p.w_k[0]), dense(p.w_v[0]), &scale);
  CHECK(max_abs(fog_aware_attention(x, v_w, p).value(), expected) < 1e-12);

  ref::Mat row_scale = key_scale(v_w, 5).transpose();
  ref::Mat by_query =
      ref::attention(dense(x), dense(x), dense(p.w_q[0]), dense(p.w_k[0]), dense(p.w_v[0]), &row_scale);
  CHECK(max_abs(fog_aware_attention(x, v_w, p, FogScaleAxis::query).value(), by_query) < 1e-12);

  CHECK_THROWS_AS(fog_aware_attention(x, Tensor::zeros({4, 1}), p), DimensionError);
}

TEST_CASE("multi-head fog attention with unit scalars equals multi-head attention") {
  Rng rng(7);
  AttentionParams p = AttentionParams::random(6, 3, 2, rng);
  Tensor x = random_tokens(rng, 4, 6);
  Tensor ones = Tensor::from_matrix(Matrix::Ones(4, 1));
  CHECK(multi_head_fog_attention(x, ones, p).value() == multi_head_attention(x, x, x, p).value());
  Tensor v_w = random_tokens(rng, 4, 1);
  ref::Mat scale = key_scale(v_w, 4);
  ref::Mat expected = ref::multi_head(dense(x), dense(x), heads_of(p), dense(p.w_o), &scale);
  CHECK(max_abs(multi_head_fog_attention(x, v_w, p).value(), expected) < 1e-12);
}

TEST_CASE("fusion_encoder_layer reductions and composition oracle") {
  Rng rng(8);
  const Index d = 6;
  AttentionParams shared = AttentionParams::random(d, 2, 3, rng);
  FusionParams tied{shared, shared, shared, LayerNormParams::identity(d)};
  Tensor x = random_tokens(rng, 5, d);

  FusionOutput same = fusion_encoder_layer(x, x, tied);
  Tensor e_img = multi_head_attention(x, x, x, shared);
  Matrix reduced = layer_norm(add(e_img, multi_head_attention(e_img, e_img, e_img, shared)), tied.norm).value();
  CHECK((same.fused.value() - reduced).cwiseAbs().maxCoeff() <= 1e-12);

  FusionParams zero_v{AttentionParams::random(d, 2, 3, rng), AttentionParams::random(d, 2, 3, rng),
                      AttentionParams::random(d, 2, 3, rng), LayerNormParams::identity(d)};
  for (auto& w : zero_v.cross.w_v) w = Tensor::zeros({d, 3});
  Tensor fog0 = Tensor::zeros({5, d});
  FusionOutput z = fusion_encoder_layer(x, fog0, zero_v);
  CHECK((z.fused.value() - layer_norm(z.image_context, zero_v.norm).value()).cwiseAbs().maxCoeff() <= 1e-12);

  FusionParams p{AttentionParams::random(d, 2, 3, rng), AttentionParams::random(d, 2, 3, rng),
                 AttentionParams::random(d, 2, 3, rng), LayerNormParams::identity(d)};
  Tensor xf = random_tokens(rng, 5, d);
  ref::Mat ei = ref::multi_head(dense(x), dense(x), heads_of(p.image), dense(p.image.w_o));
  ref::Mat ef = ref::multi_head(dense(xf), dense(xf), heads_of(p.fog), dense(p.fog.w_o));
  ref::Mat ec = ref::multi_head(ei, ef, heads_of(p.cross), dense(p.cross.w_o));
  ref::Mat expected = ref::layer_norm(ei + ec, Eigen::RowVectorXd::Ones(d), Eigen::RowVectorXd::Zero(d));
  CHECK(max_abs(fusion_encoder_layer(x, xf, p).fused.value(), expected) < 1e-12);

  CHECK_THROWS_AS(fusion_encoder_layer(x, random_tokens(rng, 4, d), p), DimensionError);
}

TEST_CASE("sinusoidal_positions") {
  Matrix t = sinusoidal_positions(16, 8).value();
  for (Index c = 0; c < 8; ++c) CHECK(t(0, c) == (c % 2 == 0 ? 0.0 : 1.0));
  CHECK((t.array().abs() <= 1.0).all());
  Matrix longer = sinusoidal_positions(32, 8).value();
  CHECK(longer.topRows(16) == t);
  CHECK_THROWS_AS(sinusoidal_positions(4, 7), ParameterError);
}

TEST_CASE("every attention variant is row-stochastic") {
  Rng rng(9);
  for (int trial = 0; trial < 50; ++trial) {
    AttentionParams single = AttentionParams::random(4, 1, 3, rng);
    AttentionParams multi = AttentionParams::random(4, 2, 3, rng);
    Tensor x = random_tokens(rng, 6, 4);
    Tensor v_w = scale(random_tokens(rng, 6, 1), 5.0);
    AttentionTrace trace;
    self_attention(x, single, &trace);
    multi_head_attention(x, x, x, multi, &trace);
    multi_head_attention(random_tokens(rng, 3, 4), x, x, multi, &trace);
    fog_aware_attention(x, v_w, single, FogScaleAxis::key, &trace);
    fog_aware_attention(x, v_w, single, FogScaleAxis::query, &trace);
    multi_head_fog_attention(x, v_w, multi, FogScaleAxis::key, &trace);
    CHECK(trace.weights.size() == 9);
    CHECK(row_stochastic_error(trace) <= 1e-12);
  }
}

TEST_CASE("attention variants pass gradient checks") {
  Rng rng(10);
  double worst = 0;
  for (int probe = 0; probe < 100; ++probe) {
    const Index d = 4;
    AttentionParams single = AttentionParams::random(d, 1, 3, rng);
    AttentionParams multi = AttentionParams::random(d, 2, 2, rng);
    FusionParams fusion{AttentionParams::random(d, 2, 2, rng), AttentionParams::random(d, 2, 2, rng),
                        AttentionParams::random(d, 2, 2, rng), LayerNormParams::identity(d)};
    WeatherScalarParams ws = WeatherScalarParams::random(d, rng);
    Tensor x = random_tokens(rng, 4, d, true);
    Tensor xf = random_tokens(rng, 4, d, true);
    Tensor weights = random_tokens(rng, 4, d);
    Tensor w3 = random_tokens(rng, 4, 3);
    auto wsum = [](const Tensor& a, const Tensor& b) { return sum(mul(a, b)); };

    auto with = [](std::vector<Tensor> a, const std::vector<Tensor>& b) {
      a.insert(a.end(), b.begin(), b.end());
      return a;
    };
    std::vector<std::pair<std::function<Tensor()>, std::vector<Tensor>>> cases = {
        {[&] { return wsum(self_attention(x, single), w3); }, with({x}, single.parameters())},
        {[&] { return wsum(multi_head_attention(x, xf, xf, multi), weights); }, with({x, xf}, multi.parameters())},
        {[&] { return wsum(fog_aware_attention(x, weather_scalar(xf, ws), single), w3); },
         with({x, xf, ws.w_t}, single.parameters())},
        {[&] { return wsum(fog_aware_attention(x, weather_scalar(xf, ws, false), single), w3); },
         with({x, xf, ws.w_t}, single.parameters())},
        {[&] { return wsum(multi_head_fog_attention(x, weather_scalar(xf, ws), multi), weights); },
         with({x, xf, ws.w_t}, multi.parameters())},
        {[&] { return wsum(fusion_encoder_layer(x, xf, fusion).fused, weights); }, with({x, xf}, fusion.parameters())},
    };
    for (std::size_t k = 0; k < cases.size(); ++k) {
      GradCheckOptions options;
      options.seed = static_cast<std::uint64_t>(probe);
      auto report = gradient_check_report(cases[k].first, cases[k].second, options);
      CHECK_MESSAGE(report.max_relative_error < 1e-4, "variant " << k << " probe " << probe);
      worst = std::max(worst, report.max_relative_error);
    }
  }
  MESSAGE("worst attention gradient error " << worst);
}
