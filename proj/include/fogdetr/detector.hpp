#pragma once

#include <array>
#include <optional>
#include <string>
#include <utility>
#include <vector>

#include <json.hpp>

#include "fogdetr/attention.hpp"
#include "fogdetr/eval.hpp"
#include "fogdetr/fog.hpp"
#include "fogdetr/rng.hpp"
#include "fogdetr/scene.hpp"
#include "fogdetr/tensor.hpp"

namespace fogdetr {

/// Invalid run or model configuration (CLI exit code 2).
class ConfigError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

/// Parameters or features from incompatible architectures.
class ArchitectureError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

enum class Variant { baseline, pl, waa, wfe };

std::string variant_name(Variant v);
Variant parse_variant(const std::string& name);

/// Where decoder queries come from: the top-m encoder tokens by class score
/// (each with a grid reference box), or m learned embeddings.
enum class QueryInit { select, learned };

/// What the auxiliary fog stream sees: the fog density map 1 - exp(-beta d)
/// or the foggy image itself.
enum class AuxInput { density, foggy };

struct LossWeights {
  double cls = 1.0;
  double l1 = 5.0;
  double giou = 2.0;
  double no_object = 0.1;  // CE weight of the no-object class
};

struct DetectorConfig {
  Variant variant = Variant::baseline;
  Index image_size = 32;
  std::array<Index, 3> channels{8, 16, 32};
  Index model_dim = 32;
  Index heads = 2;
  Index key_dim = 16;
  Index queries = 10;
  Index encoder_layers = 1;
  Index categories = kCategoryCount;
  Index box_hidden = 32;
  LossWeights loss;
  bool squash_weather = true;
  FogScaleAxis fog_axis = FogScaleAxis::key;
  AuxInput aux_input = AuxInput::density;
  QueryInit query_init = QueryInit::select;
  std::uint64_t seed = 0;

  bool needs_fog_stream() const { return variant == Variant::waa || variant == Variant::wfe; }
  Index aux_channels() const { return aux_input == AuxInput::density ? 1 : 3; }
  Index token_count() const { return (image_size / 8) * (image_size / 8); }
  void validate() const;

  nlohmann::json to_json() const;
  /// Missing keys keep their defaults; unknown keys are rejected.
  static DetectorConfig from_json(const nlohmann::json& j);
};

struct BackboneParams {
  std::array<Tensor, 3> kernels;  // (3*3*C_in) x C_out
  std::array<Tensor, 3> biases;   // 1 x C_out

  static BackboneParams random(Index in_channels, const std::array<Index, 3>& channels, Rng& rng);
  Index in_channels() const { return kernels[0].rows() / 9; }
  std::vector<Tensor> parameters() const;
};

/// Three 3x3 stride-2 conv + relu stages. Input and outputs are {H, W, C}.
std::vector<Tensor> backbone_forward(const Tensor& image, const BackboneParams& params);
std::vector<Tensor> backbone_forward(const Image& image, const BackboneParams& params);

struct EncoderLayerParams {
  AttentionParams attention;  // baseline, PL, WAA
  FusionParams fusion;        // WFE
  LayerNormParams norm;
};

struct DetectorParams {
  BackboneParams backbone;
  Tensor token_proj;  // C3 x d
  Tensor token_bias;  // 1 x d

  // Auxiliary fog stream (WAA, WFE only).
  std::optional<BackboneParams> aux_backbone;
  Tensor aux_proj;
  Tensor aux_bias;
  std::optional<WeatherScalarParams> weather;

  std::vector<EncoderLayerParams> encoder;

  Tensor queries;  // m x d, learned query init only
  AttentionParams decoder;
  LayerNormParams decoder_norm;
  Tensor class_w, class_b;  // d x (C+1), 1 x (C+1)
  Tensor box_w1, box_b1;    // d x hidden
  Tensor box_w2, box_b2;    // hidden x 4

  static DetectorParams init(const DetectorConfig& cfg);
  /// Stable names in a fixed order; checkpoints and optimizers key on these.
  std::vector<std::pair<std::string, Tensor>> named_parameters() const;
  std::vector<Tensor> parameters() const;
  DetectorParams clone(bool requires_grad = true) const;
  void set_requires_grad(bool flag) const;
};

struct DetectionOutput {
  Tensor boxes;         // m x 4, (cx, cy, w, h) in [0, 1]
  Tensor class_logits;  // m x (C + 1); last column is no-object
};

/// Forced encoder behaviour for inspection and tests.
struct EncodeOptions {
  const Tensor* weather_override = nullptr;  // replaces V_w in WAA
  Tensor* weather_out = nullptr;             // receives the V_w actually used
  AttentionTrace* trace = nullptr;
};

/// Flattened stage map projected to d, plus sinusoidal positions.
Tensor make_tokens(const Tensor& feature_map, const Tensor& proj, const Tensor& bias);

Tensor encode(const Tensor& clear_tokens, const std::optional<Tensor>& fog_tokens, const DetectorConfig& cfg,
              const DetectorParams& params, const EncodeOptions& options = {});

/// Cross-attention from queries to memory, then the class head and a
/// two-layer box head. reference (m x 4) is added before the box sigmoid.
DetectionOutput decode(const Tensor& memory, const Tensor& queries, const DetectorParams& params,
                       const Matrix* reference = nullptr);

/// Pre-sigmoid (cx, cy, w, h) of a box centred on each cell of a g x g token grid.
Matrix grid_reference(Index grid, double size = 0.25);

struct QuerySelection {
  std::vector<Index> tokens;  // best first
  Matrix reference;           // m x 4
};

/// Ranks memory tokens by their best foreground class logit (ties by index)
/// and keeps the top cfg.queries.
QuerySelection select_queries(const Tensor& memory, const DetectorConfig& cfg, const DetectorParams& params);

/// One input to the detector. aux is the fog-stream input {H, W, c}.
struct DetectorInput {
  Tensor image;
  std::optional<Tensor> aux;
};

Tensor image_tensor(const Image& image);
/// Fog density 1 - exp(-beta d) as an {H, W, 1} map.
Tensor density_tensor(const DepthMap& depth, double beta);

/// Builds the detector input for a (possibly fogged) image. Fog-stream
/// variants need the depth map when aux_input is density.
DetectorInput make_input(const DetectorConfig& cfg, const Image& image, const DepthMap* depth, double beta);

struct ForwardResult {
  std::vector<Tensor> features;  // backbone stages f^(1..3)
  Tensor memory;
  DetectionOutput output;
};

ForwardResult forward(const DetectorInput& input, const DetectorConfig& cfg, const DetectorParams& params,
                      const EncodeOptions& options = {});

// Matching and loss

struct MatchResult {
  std::vector<std::pair<Index, Index>> pairs;  // (query, ground truth), sorted by ground truth
};

struct Assignment {
  std::vector<Index> column_of_row;
  double total = 0.0;
};

/// Exact minimum-cost assignment of every row to a distinct column
/// (rows <= cols).
Assignment solve_assignment(const Matrix& cost);

/// Rows are ground-truth boxes, columns are queries.
Matrix matching_cost(const DetectionOutput& pred, const Annotation& gt, const LossWeights& w);

MatchResult hungarian_match(const DetectionOutput& pred, const Annotation& gt, const LossWeights& w);

struct LossTerms {
  Tensor total;
  Tensor cls;   // weighted
  Tensor l1;    // weighted
  Tensor giou;  // weighted
};

LossTerms detection_loss(const DetectionOutput& pred, const Annotation& gt, const MatchResult& match,
                         const LossWeights& w);

/// One prediction per query: best foreground class and its probability.
std::vector<EvalPrediction> to_predictions(const DetectionOutput& out, const std::string& image_id);

}  // namespace fogdetr
