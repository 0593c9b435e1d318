#include "fogdetr/attention.hpp"

#include <cmath>
#include <string>

namespace fogdetr {

namespace {

Tensor random_matrix(Index rows, Index cols, double stddev, Rng& rng) {
  Matrix m(rows, cols);
  for (Index i = 0; i < m.size(); ++i) m.data()[i] = rng.normal(0.0, stddev);
  return Tensor::from_matrix(std::move(m), true);
}

std::string dims(const Tensor& t) { return shape_string(t.shape()); }

void check_tokens(const Tensor& t, const char* what) {
  if (t.rows() < 1 || t.cols() < 1) throw DimensionError(std::string(what) + ": empty token sequence " + dims(t));
}

struct HeadResult {
  Tensor output;
  Matrix weights;
};

HeadResult attention_head(const Tensor& q_in, const Tensor& k_in, const Tensor& v_in, const Tensor& w_q,
                          const Tensor& w_k, const Tensor& w_v, const Tensor* v_w, FogScaleAxis axis) {
  Tensor q = matmul(q_in, w_q);
  Tensor k = matmul(k_in, w_k);
  Tensor v = matmul(v_in, w_v);
  Tensor logits = scale(matmul(q, transpose(k)), 1.0 / std::sqrt(static_cast<double>(w_q.cols())));
  if (v_w) logits = mul(logits, axis == FogScaleAxis::key ? transpose(*v_w) : *v_w);
  Tensor weights = softmax_rows(logits);
  return {matmul(weights, v), weights.value()};
}

void check_inputs(const Tensor& q_in, const Tensor& k_in, const Tensor& v_in, const AttentionParams& p) {
  check_tokens(q_in, "attention query");
  check_tokens(k_in, "attention key");
  check_tokens(v_in, "attention value");
  const Index d = p.model_dim();
  if (q_in.cols() != d || k_in.cols() != d || v_in.cols() != d) {
    throw DimensionError("attention: inputs " + dims(q_in) + ", " + dims(k_in) + ", " + dims(v_in) +
                         " do not match model dim " + std::to_string(d));
  }
  if (k_in.rows() != v_in.rows()) {
    throw DimensionError("attention: key " + dims(k_in) + " and value " + dims(v_in) + " token counts differ");
  }
}

void check_weather(const Tensor& x, const Tensor& v_w) {
  if (v_w.rows() != x.rows() || v_w.cols() != 1) {
    throw DimensionError("weather scalars " + dims(v_w) + " do not match " + std::to_string(x.rows()) +
                         " tokens");
  }
}

}  // namespace

///////////////////////////////////////////
// Parameter records
///////////////////////////////////////////

AttentionParams AttentionParams::random(Index model_dim, Index heads, Index key_dim, Rng& rng) {
  if (model_dim < 1 || heads < 1 || key_dim < 1) throw ParameterError("attention dims must be >= 1");
  AttentionParams p;
  const double s_in = 1.0 / std::sqrt(static_cast<double>(model_dim));
  for (Index h = 0; h < heads; ++h) {
    p.w_q.push_back(random_matrix(model_dim, key_dim, s_in, rng));
    p.w_k.push_back(random_matrix(model_dim, key_dim, s_in, rng));
    p.w_v.push_back(random_matrix(model_dim, key_dim, s_in, rng));
  }
  p.w_o = random_matrix(heads * key_dim, model_dim, 1.0 / std::sqrt(static_cast<double>(heads * key_dim)), rng);
  return p;
}

void AttentionParams::validate(bool needs_output_projection) const {
  if (w_q.empty()) throw ParameterError("attention needs at least one head");
  if (w_k.size() != w_q.size() || w_v.size() != w_q.size()) {
    throw ParameterError("attention: per-head projection counts differ");
  }
  const Index d = model_dim(), dk = key_dim();
  for (std::size_t h = 0; h < w_q.size(); ++h) {
    for (const Tensor* w : {&w_q[h], &w_k[h], &w_v[h]}) {
      if (w->rows() != d || w->cols() != dk) {
        throw ParameterError("attention head " + std::to_string(h) + " projection " + dims(*w) +
                             " is not " + std::to_string(d) + "x" + std::to_string(dk));
      }
    }
  }
  if (needs_output_projection) {
    if (!w_o.defined() || w_o.rows() != heads() * dk) {
      throw ParameterError("attention: W_O rows must equal heads * key_dim = " + std::to_string(heads() * dk) +
                           (w_o.defined() ? ", got " + dims(w_o) : std::string(", W_O missing")));
    }
  }
}

std::vector<Tensor> AttentionParams::parameters() const {
  std::vector<Tensor> out;
  for (std::size_t h = 0; h < w_q.size(); ++h) {
    out.push_back(w_q[h]);
    out.push_back(w_k[h]);
    out.push_back(w_v[h]);
  }
  if (w_o.defined()) out.push_back(w_o);
  return out;
}

WeatherScalarParams WeatherScalarParams::random(Index model_dim, Rng& rng) {
  return {random_matrix(model_dim, 1, 1.0 / std::sqrt(static_cast<double>(model_dim)), rng)};
}

LayerNormParams LayerNormParams::identity(Index dim) {
  return {Tensor::from_matrix(Shape{dim}, Matrix::Ones(1, dim), true),
          Tensor::from_matrix(Shape{dim}, Matrix::Zero(1, dim), true), 1e-5};
}

std::vector<Tensor> FusionParams::parameters() const {
  std::vector<Tensor> out;
  for (const auto* a : {&image, &fog, &cross}) {
    auto ps = a->parameters();
    out.insert(out.end(), ps.begin(), ps.end());
  }
  out.push_back(norm.gain);
  out.push_back(norm.bias);
  return out;
}

///////////////////////////////////////////
// Attention variants
///////////////////////////////////////////

Tensor self_attention(const Tensor& x, const AttentionParams& p, AttentionTrace* trace) {
  p.validate(false);
  if (p.heads() != 1) throw ParameterError("self_attention is single-head; use multi_head_attention");
  check_inputs(x, x, x, p);
  HeadResult r = attention_head(x, x, x, p.w_q[0], p.w_k[0], p.w_v[0], nullptr, FogScaleAxis::key);
  if (trace) trace->weights.push_back(std::move(r.weights));
  return r.output;
}

Tensor multi_head_attention(const Tensor& q_in, const Tensor& k_in, const Tensor& v_in, const AttentionParams& p,
                            AttentionTrace* trace) {
  p.validate(true);
  check_inputs(q_in, k_in, v_in, p);
  std::vector<Tensor> heads;
  for (Index h = 0; h < p.heads(); ++h) {
    HeadResult r = attention_head(q_in, k_in, v_in, p.w_q[h], p.w_k[h], p.w_v[h], nullptr, FogScaleAxis::key);
    if (trace) trace->weights.push_back(std::move(r.weights));
    heads.push_back(std::move(r.output));
  }
  Tensor joined = heads.size() == 1 ? heads.front() : concat(heads, 1);
  return matmul(joined, p.w_o);
}

Tensor weather_scalar(const Tensor& fog_stream, const WeatherScalarParams& w, bool squash) {
  check_tokens(fog_stream, "weather_scalar");
  if (w.w_t.rows() != fog_stream.cols() || w.w_t.cols() != 1) {
    throw DimensionError("weather_scalar: W_t " + dims(w.w_t) + " does not project " + dims(fog_stream) +
                         " to one value per token");
  }
  Tensor raw = matmul(fog_stream, w.w_t);
  return squash ? sigmoid(raw) : raw;
}

Tensor fog_aware_attention(const Tensor& x, const Tensor& v_w, const AttentionParams& p, FogScaleAxis axis,
                           AttentionTrace* trace) {
  p.validate(false);
  if (p.heads() != 1) throw ParameterError("fog_aware_attention is single-head; use multi_head_fog_attention");
  check_inputs(x, x, x, p);
  check_weather(x, v_w);
  HeadResult r = attention_head(x, x, x, p.w_q[0], p.w_k[0], p.w_v[0], &v_w, axis);
  if (trace) trace->weights.push_back(std::move(r.weights));
  return r.output;
}

Tensor multi_head_fog_attention(const Tensor& x, const Tensor& v_w, const AttentionParams& p, FogScaleAxis axis,
                                AttentionTrace* trace) {
  p.validate(true);
  check_inputs(x, x, x, p);
  check_weather(x, v_w);
  std::vector<Tensor> heads;
  for (Index h = 0; h < p.heads(); ++h) {
    HeadResult r = attention_head(x, x, x, p.w_q[h], p.w_k[h], p.w_v[h], &v_w, axis);
    if (trace) trace->weights.push_back(std::move(r.weights));
    heads.push_back(std::move(r.output));
  }
  Tensor joined = heads.size() == 1 ? heads.front() : concat(heads, 1);
  return matmul(joined, p.w_o);
}

Tensor layer_norm(const Tensor& x, const LayerNormParams& p) { return layer_norm(x, p.gain, p.bias, p.eps); }

FusionOutput fusion_encoder_layer(const Tensor& x_img, const Tensor& x_fog, const FusionParams& p) {
  if (x_img.rows() != x_fog.rows() || x_img.cols() != x_fog.cols()) {
    throw DimensionError("fusion_encoder_layer: image stream " + dims(x_img) + " vs fog stream " + dims(x_fog));
  }
  Tensor e_img = multi_head_attention(x_img, x_img, x_img, p.image);
  Tensor e_fog = multi_head_attention(x_fog, x_fog, x_fog, p.fog);
  Tensor e_cross = multi_head_attention(e_img, e_fog, e_fog, p.cross);
  return {layer_norm(add(e_img, e_cross), p.norm), e_img, e_fog};
}

Tensor sinusoidal_positions(Index n, Index d) {
  if (n < 1 || d < 2 || d % 2 != 0) {
    throw ParameterError("sinusoidal_positions needs n >= 1 and an even d >= 2, got n=" + std::to_string(n) +
                         " d=" + std::to_string(d));
  }
  Matrix table(n, d);
  for (Index pos = 0; pos < n; ++pos) {
    for (Index i = 0; i < d / 2; ++i) {
      const double freq = std::pow(10000.0, -2.0 * static_cast<double>(i) / static_cast<double>(d));
      table(pos, 2 * i) = std::sin(static_cast<double>(pos) * freq);
      table(pos, 2 * i + 1) = std::cos(static_cast<double>(pos) * freq);
    }
  }
  return Tensor::from_matrix(std::move(table));
}

}  // namespace fogdetr
