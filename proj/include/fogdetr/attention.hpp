#pragma once

#include <vector>

#include "fogdetr/fog.hpp"
#include "fogdetr/rng.hpp"
#include "fogdetr/tensor.hpp"

namespace fogdetr {

/// Per-head projections W_Q, W_K, W_V (d x d_k each) and the shared output
/// projection W_O ((h * d_k) x d). Single-head ops ignore W_O.
struct AttentionParams {
  std::vector<Tensor> w_q;
  std::vector<Tensor> w_k;
  std::vector<Tensor> w_v;
  Tensor w_o;

  Index heads() const { return static_cast<Index>(w_q.size()); }
  Index key_dim() const { return w_q.empty() ? 0 : w_q.front().cols(); }
  Index model_dim() const { return w_q.empty() ? 0 : w_q.front().rows(); }

  static AttentionParams random(Index model_dim, Index heads, Index key_dim, Rng& rng);
  void validate(bool needs_output_projection) const;
  std::vector<Tensor> parameters() const;
};

/// Linear projection W_t (d x 1) from fog-stream tokens to one scalar each.
struct WeatherScalarParams {
  Tensor w_t;

  static WeatherScalarParams random(Index model_dim, Rng& rng);
};

struct LayerNormParams {
  Tensor gain;
  Tensor bias;
  double eps = 1e-5;

  static LayerNormParams identity(Index dim);
  std::vector<Tensor> parameters() const { return {gain, bias}; }
};

struct FusionParams {
  AttentionParams image;
  AttentionParams fog;
  AttentionParams cross;
  LayerNormParams norm;

  std::vector<Tensor> parameters() const;
};

/// Which axis of the n x n logit matrix the weather scalars scale.
enum class FogScaleAxis {
  key,    // column j scaled by V_w[j]
  query,  // row i scaled by V_w[i]
};

/// Attention matrices captured per head, for inspection.
struct AttentionTrace {
  std::vector<Matrix> weights;
};

/// softmax(Q K^T / sqrt(d_k)) V with Q = X W_Q, K = X W_K, V = X W_V.
Tensor self_attention(const Tensor& x, const AttentionParams& p, AttentionTrace* trace = nullptr);

/// Concat(head_1..head_h) W_O where head_i attends from q_in over k_in/v_in.
Tensor multi_head_attention(const Tensor& q_in, const Tensor& k_in, const Tensor& v_in,
                            const AttentionParams& p, AttentionTrace* trace = nullptr);

/// Per-token weather scalar W_t z, optionally squashed through a sigmoid.
Tensor weather_scalar(const Tensor& fog_stream, const WeatherScalarParams& w, bool squash = true);

/// softmax((Q K^T / sqrt(d_k)) (.) V_w) V for a single head.
Tensor fog_aware_attention(const Tensor& x, const Tensor& v_w, const AttentionParams& p,
                           FogScaleAxis axis = FogScaleAxis::key, AttentionTrace* trace = nullptr);

/// Multi-head form of fog_aware_attention: every head's logits are scaled
/// by V_w before the softmax, then heads are concatenated and projected.
Tensor multi_head_fog_attention(const Tensor& x, const Tensor& v_w, const AttentionParams& p,
                                FogScaleAxis axis = FogScaleAxis::key,
                                AttentionTrace* trace = nullptr);

struct FusionOutput {
  Tensor fused;          // layer_norm(E_img + E_cross)
  Tensor image_context;  // E_img
  Tensor fog_context;    // E_fog
};

/// Dual self-attention followed by clear-queries-fog cross-attention and a
/// residual + layer norm.
FusionOutput fusion_encoder_layer(const Tensor& x_img, const Tensor& x_fog, const FusionParams& p);

Tensor layer_norm(const Tensor& x, const LayerNormParams& p);

/// Sine/cosine table: row pos, columns (2i, 2i+1) hold
/// sin(pos / 10000^(2i/d)) and cos(pos / 10000^(2i/d)).
Tensor sinusoidal_positions(Index n, Index d);

}  // namespace fogdetr
