#include "fogdetr/detector.hpp"

#include <algorithm>
#include <cmath>

namespace fogdetr {

namespace {

Tensor normal_matrix(Index rows, Index cols, double stddev, Rng& rng) {
  Matrix m(rows, cols);
  for (Index i = 0; i < m.size(); ++i) m.data()[i] = rng.normal(0.0, stddev);
  return Tensor::from_matrix(std::move(m), true);
}

Tensor zero_row(Index cols) { return Tensor::from_matrix(Matrix::Zero(1, cols), true); }

double fan_in_sd(Index fan_in) { return 1.0 / std::sqrt(static_cast<double>(fan_in)); }

template <typename F>
void visit_attention(const std::string& prefix, AttentionParams& p, F&& f) {
  for (std::size_t h = 0; h < p.w_q.size(); ++h) {
    const std::string idx = std::to_string(h);
    f(prefix + ".q." + idx, p.w_q[h]);
    f(prefix + ".k." + idx, p.w_k[h]);
    f(prefix + ".v." + idx, p.w_v[h]);
  }
  if (p.w_o.defined()) f(prefix + ".o", p.w_o);
}

template <typename F>
void visit_norm(const std::string& prefix, LayerNormParams& n, F&& f) {
  if (n.gain.defined()) f(prefix + ".gain", n.gain);
  if (n.bias.defined()) f(prefix + ".bias", n.bias);
}

template <typename F>
void visit_backbone(const std::string& prefix, BackboneParams& b, F&& f) {
  for (std::size_t s = 0; s < 3; ++s) {
    f(prefix + "." + std::to_string(s) + ".kernel", b.kernels[s]);
    f(prefix + "." + std::to_string(s) + ".bias", b.biases[s]);
  }
}

template <typename F>
void visit(DetectorParams& p, F&& f) {
  visit_backbone("backbone", p.backbone, f);
  f("token.proj", p.token_proj);
  f("token.bias", p.token_bias);
  if (p.aux_backbone) {
    visit_backbone("aux.backbone", *p.aux_backbone, f);
    f("aux.proj", p.aux_proj);
    f("aux.bias", p.aux_bias);
  }
  if (p.weather) f("weather.w_t", p.weather->w_t);
  for (std::size_t l = 0; l < p.encoder.size(); ++l) {
    const std::string prefix = "encoder." + std::to_string(l);
    auto& layer = p.encoder[l];
    visit_attention(prefix + ".attn", layer.attention, f);
    visit_norm(prefix + ".norm", layer.norm, f);
    visit_attention(prefix + ".fusion.image", layer.fusion.image, f);
    visit_attention(prefix + ".fusion.fog", layer.fusion.fog, f);
    visit_attention(prefix + ".fusion.cross", layer.fusion.cross, f);
    visit_norm(prefix + ".fusion.norm", layer.fusion.norm, f);
  }
  if (p.queries.defined()) f("queries", p.queries);
  visit_attention("decoder.attn", p.decoder, f);
  visit_norm("decoder.norm", p.decoder_norm, f);
  f("head.class.w", p.class_w);
  f("head.class.b", p.class_b);
  f("head.box.w1", p.box_w1);
  f("head.box.b1", p.box_b1);
  f("head.box.w2", p.box_w2);
  f("head.box.b2", p.box_b2);
}

}  // namespace

///////////////////////////////////////////
// Configuration
///////////////////////////////////////////

std::string variant_name(Variant v) {
  switch (v) {
    case Variant::baseline: return "baseline";
    case Variant::pl: return "PL";
    case Variant::waa: return "WAA";
    case Variant::wfe: return "WFE";
  }
  return "?";
}

Variant parse_variant(const std::string& name) {
  for (Variant v : {Variant::baseline, Variant::pl, Variant::waa, Variant::wfe}) {
    std::string canonical = variant_name(v);
    bool same = canonical.size() == name.size();
    for (std::size_t i = 0; same && i < name.size(); ++i) {
      same = std::tolower(static_cast<unsigned char>(canonical[i])) == std::tolower(static_cast<unsigned char>(name[i]));
    }
    if (same) return v;
  }
  throw ConfigError("unknown variant '" + name + "' (expected baseline, PL, WAA or WFE)");
}

void DetectorConfig::validate() const {
  if (image_size < 8 || image_size % 8 != 0) {
    throw ConfigError("image_size must be a positive multiple of 8, got " + std::to_string(image_size));
  }
  for (Index c : channels) {
    if (c < 1) throw ConfigError("backbone channels must be >= 1");
  }
  if (model_dim < 2 || model_dim % 2 != 0) throw ConfigError("model_dim must be even and >= 2");
  if (heads < 1 || key_dim < 1) throw ConfigError("heads and key_dim must be >= 1");
  if (queries < 1) throw ConfigError("queries must be >= 1");
  if (encoder_layers < 1) throw ConfigError("encoder_layers must be >= 1");
  if (categories < 1) throw ConfigError("categories must be >= 1");
  if (box_hidden < 1) throw ConfigError("box_hidden must be >= 1");
  if (query_init == QueryInit::select && queries > token_count()) {
    throw ConfigError("query selection needs queries <= " + std::to_string(token_count()) + " encoder tokens");
  }
  for (double w : {loss.cls, loss.l1, loss.giou, loss.no_object}) {
    if (!(w >= 0) || !std::isfinite(w)) throw ConfigError("loss weights must be finite and >= 0");
  }
}

nlohmann::json DetectorConfig::to_json() const {
  return {{"variant", variant_name(variant)},
          {"image_size", image_size},
          {"channels", channels},
          {"model_dim", model_dim},
          {"heads", heads},
          {"key_dim", key_dim},
          {"queries", queries},
          {"encoder_layers", encoder_layers},
          {"categories", categories},
          {"box_hidden", box_hidden},
          {"loss", {{"cls", loss.cls}, {"l1", loss.l1}, {"giou", loss.giou}, {"no_object", loss.no_object}}},
          {"squash_weather", squash_weather},
          {"fog_axis", fog_axis == FogScaleAxis::key ? "key" : "query"},
          {"aux_input", aux_input == AuxInput::density ? "density" : "foggy"},
          {"query_init", query_init == QueryInit::select ? "select" : "learned"},
          {"seed", seed}};
}

DetectorConfig DetectorConfig::from_json(const nlohmann::json& j) {
  if (!j.is_object()) throw ConfigError("model config must be a JSON object");
  DetectorConfig c;
  try {
    for (const auto& [key, value] : j.items()) {
      if (key == "variant") c.variant = parse_variant(value.get<std::string>());
      else if (key == "image_size") c.image_size = value.get<Index>();
      else if (key == "channels") c.channels = value.get<std::array<Index, 3>>();
      else if (key == "model_dim") c.model_dim = value.get<Index>();
      else if (key == "heads") c.heads = value.get<Index>();
      else if (key == "key_dim") c.key_dim = value.get<Index>();
      else if (key == "queries") c.queries = value.get<Index>();
      else if (key == "encoder_layers") c.encoder_layers = value.get<Index>();
      else if (key == "categories") c.categories = value.get<Index>();
      else if (key == "box_hidden") c.box_hidden = value.get<Index>();
      else if (key == "squash_weather") c.squash_weather = value.get<bool>();
      else if (key == "seed") c.seed = value.get<std::uint64_t>();
      else if (key == "fog_axis") {
        const auto s = value.get<std::string>();
        if (s != "key" && s != "query") throw ConfigError("fog_axis must be 'key' or 'query'");
        c.fog_axis = s == "key" ? FogScaleAxis::key : FogScaleAxis::query;
      } else if (key == "aux_input") {
        const auto s = value.get<std::string>();
        if (s != "density" && s != "foggy") throw ConfigError("aux_input must be 'density' or 'foggy'");
        c.aux_input = s == "density" ? AuxInput::density : AuxInput::foggy;
      } else if (key == "query_init") {
        const auto s = value.get<std::string>();
        if (s != "select" && s != "learned") throw ConfigError("query_init must be 'select' or 'learned'");
        c.query_init = s == "select" ? QueryInit::select : QueryInit::learned;
      } else if (key == "loss") {
        for (const auto& [lk, lv] : value.items()) {
          if (lk == "cls") c.loss.cls = lv.get<double>();
          else if (lk == "l1") c.loss.l1 = lv.get<double>();
          else if (lk == "giou") c.loss.giou = lv.get<double>();
          else if (lk == "no_object") c.loss.no_object = lv.get<double>();
          else throw ConfigError("unknown loss weight '" + lk + "'");
        }
      } else {
        throw ConfigError("unknown model config key '" + key + "'");
      }
    }
  } catch (const nlohmann::json::exception& e) {
    throw ConfigError(std::string("model config: ") + e.what());
  }
  c.validate();
  return c;
}

///////////////////////////////////////////
// Backbone
///////////////////////////////////////////

BackboneParams BackboneParams::random(Index in_channels, const std::array<Index, 3>& channels, Rng& rng) {
  BackboneParams b;
  Index c_in = in_channels;
  for (std::size_t s = 0; s < 3; ++s) {
    // He initialisation for relu stages.
    b.kernels[s] = normal_matrix(9 * c_in, channels[s], std::sqrt(2.0 / static_cast<double>(9 * c_in)), rng);
    b.biases[s] = zero_row(channels[s]);
    c_in = channels[s];
  }
  return b;
}

std::vector<Tensor> BackboneParams::parameters() const {
  std::vector<Tensor> out;
  for (std::size_t s = 0; s < 3; ++s) {
    out.push_back(kernels[s]);
    out.push_back(biases[s]);
  }
  return out;
}

std::vector<Tensor> backbone_forward(const Tensor& image, const BackboneParams& params) {
  if (image.rank() != 3) throw DimensionError("backbone_forward: expected an {H, W, C} map, got " + shape_string(image.shape()));
  const Index h = image.shape()[0], w = image.shape()[1], c = image.shape()[2];
  if (h % 8 != 0 || w % 8 != 0 || h == 0 || w == 0) {
    throw ConfigError("backbone_forward: image " + std::to_string(h) + "x" + std::to_string(w) +
                      " is not divisible by 8");
  }
  if (params.kernels[0].rows() != 9 * c) {
    throw DimensionError("backbone_forward: first stage expects " + std::to_string(params.in_channels()) +
                         " channels, image has " + std::to_string(c));
  }
  std::vector<Tensor> maps;
  Tensor x = image;
  Index hh = h, ww = w;
  for (std::size_t s = 0; s < 3; ++s) {
    hh /= 2;
    ww /= 2;
    Tensor y = relu(add(matmul(im2col(x, 3, 2, 1), params.kernels[s]), params.biases[s]));
    x = reshape(y, {hh, ww, params.kernels[s].cols()});
    maps.push_back(x);
  }
  return maps;
}

std::vector<Tensor> backbone_forward(const Image& image, const BackboneParams& params) {
  return backbone_forward(image_tensor(image), params);
}

Tensor image_tensor(const Image& image) {
  return Tensor::from_matrix(Shape{image.height, image.width, 3}, Matrix(image.pixels.matrix()));
}

Tensor density_tensor(const DepthMap& depth, double beta) {
  Matrix m = fog_density(depth, beta).matrix();
  return Tensor::from_matrix(Shape{depth.height, depth.width, 1}, std::move(m));
}

///////////////////////////////////////////
// Parameters
///////////////////////////////////////////

DetectorParams DetectorParams::init(const DetectorConfig& cfg) {
  cfg.validate();
  Rng root(cfg.seed);
  const Index d = cfg.model_dim, c3 = cfg.channels[2];
  DetectorParams p;

  // Each block draws from its own stream so variants share the common blocks.
  Rng bb = root.split("backbone");
  p.backbone = BackboneParams::random(3, cfg.channels, bb);
  Rng tok = root.split("tokens");
  p.token_proj = normal_matrix(c3, d, fan_in_sd(c3), tok);
  p.token_bias = zero_row(d);

  if (cfg.needs_fog_stream()) {
    Rng aux = root.split("aux");
    p.aux_backbone = BackboneParams::random(cfg.aux_channels(), cfg.channels, aux);
    p.aux_proj = normal_matrix(c3, d, fan_in_sd(c3), aux);
    p.aux_bias = zero_row(d);
  }
  if (cfg.variant == Variant::waa) {
    Rng wr = root.split("weather");
    p.weather = WeatherScalarParams::random(d, wr);
  }

  for (Index l = 0; l < cfg.encoder_layers; ++l) {
    Rng er = root.split("encoder").split(static_cast<std::uint64_t>(l));
    EncoderLayerParams layer;
    if (cfg.variant == Variant::wfe) {
      Rng fr = er.split("fusion");
      layer.fusion.image = AttentionParams::random(d, cfg.heads, cfg.key_dim, fr);
      layer.fusion.fog = AttentionParams::random(d, cfg.heads, cfg.key_dim, fr);
      layer.fusion.cross = AttentionParams::random(d, cfg.heads, cfg.key_dim, fr);
      layer.fusion.norm = LayerNormParams::identity(d);
    } else {
      layer.attention = AttentionParams::random(d, cfg.heads, cfg.key_dim, er);
      layer.norm = LayerNormParams::identity(d);
    }
    p.encoder.push_back(std::move(layer));
  }

  Rng dr = root.split("decoder");
  if (cfg.query_init == QueryInit::learned) p.queries = normal_matrix(cfg.queries, d, 1.0, dr);
  p.decoder = AttentionParams::random(d, cfg.heads, cfg.key_dim, dr);
  p.decoder_norm = LayerNormParams::identity(d);
  Rng hr = root.split("heads");
  p.class_w = normal_matrix(d, cfg.categories + 1, fan_in_sd(d), hr);
  p.class_b = zero_row(cfg.categories + 1);
  p.box_w1 = normal_matrix(d, cfg.box_hidden, std::sqrt(2.0 / static_cast<double>(d)), hr);
  p.box_b1 = zero_row(cfg.box_hidden);
  p.box_w2 = normal_matrix(cfg.box_hidden, 4, fan_in_sd(cfg.box_hidden), hr);
  p.box_b2 = zero_row(4);
  return p;
}

std::vector<std::pair<std::string, Tensor>> DetectorParams::named_parameters() const {
  std::vector<std::pair<std::string, Tensor>> out;
  DetectorParams view = *this;  // shares nodes
  visit(view, [&](const std::string& name, Tensor& t) { out.emplace_back(name, t); });
  return out;
}

std::vector<Tensor> DetectorParams::parameters() const {
  std::vector<Tensor> out;
  for (auto& [name, t] : named_parameters()) out.push_back(t);
  return out;
}

DetectorParams DetectorParams::clone(bool requires_grad) const {
  DetectorParams copy = *this;
  visit(copy, [&](const std::string&, Tensor& t) { t = t.clone(requires_grad); });
  return copy;
}

void DetectorParams::set_requires_grad(bool flag) const {
  DetectorParams view = *this;
  visit(view, [&](const std::string&, Tensor& t) { t.set_requires_grad(flag); });
}

///////////////////////////////////////////
// Forward pass
///////////////////////////////////////////

Tensor make_tokens(const Tensor& feature_map, const Tensor& proj, const Tensor& bias) {
  if (feature_map.rank() != 3) {
    throw DimensionError("make_tokens: expected an {H, W, C} map, got " + shape_string(feature_map.shape()));
  }
  const Index n = feature_map.shape()[0] * feature_map.shape()[1];
  Tensor flat = reshape(feature_map, {n, feature_map.shape()[2]});
  Tensor tokens = add(matmul(flat, proj), bias);
  return add(tokens, sinusoidal_positions(n, proj.cols()));
}

Tensor encode(const Tensor& clear_tokens, const std::optional<Tensor>& fog_tokens, const DetectorConfig& cfg,
              const DetectorParams& params, const EncodeOptions& options) {
  if (cfg.needs_fog_stream() && !fog_tokens) {
    throw ConfigError("encode: variant " + variant_name(cfg.variant) + " needs the fog stream");
  }
  if (!cfg.needs_fog_stream() && fog_tokens) {
    throw ConfigError("encode: variant " + variant_name(cfg.variant) + " takes no fog stream");
  }
  if (params.encoder.empty()) throw ConfigError("encode: no encoder layers");

  Tensor x = clear_tokens;
  switch (cfg.variant) {
    case Variant::baseline:
    case Variant::pl:
      for (const auto& layer : params.encoder) {
        x = layer_norm(add(x, multi_head_attention(x, x, x, layer.attention, options.trace)), layer.norm);
      }
      break;
    case Variant::waa: {
      if (!params.weather) throw ConfigError("encode: WAA parameters lack the weather projection");
      Tensor v_w = options.weather_override ? *options.weather_override
                                            : weather_scalar(*fog_tokens, *params.weather, cfg.squash_weather);
      if (options.weather_out) *options.weather_out = v_w;
      for (const auto& layer : params.encoder) {
        x = layer_norm(add(x, multi_head_fog_attention(x, v_w, layer.attention, cfg.fog_axis, options.trace)),
                       layer.norm);
      }
      break;
    }
    case Variant::wfe:
      for (const auto& layer : params.encoder) x = fusion_encoder_layer(x, *fog_tokens, layer.fusion).fused;
      break;
  }
  return x;
}

DetectionOutput decode(const Tensor& memory, const Tensor& queries, const DetectorParams& params,
                       const Matrix* reference) {
  Tensor h = layer_norm(add(queries, multi_head_attention(queries, memory, memory, params.decoder)),
                        params.decoder_norm);
  Tensor logits = add(matmul(h, params.class_w), params.class_b);
  Tensor hidden = relu(add(matmul(h, params.box_w1), params.box_b1));
  Tensor box_logits = add(matmul(hidden, params.box_w2), params.box_b2);
  if (reference) {
    if (reference->rows() != queries.rows() || reference->cols() != 4) {
      throw DimensionError("decode: reference boxes must be " + std::to_string(queries.rows()) + "x4");
    }
    box_logits = add(box_logits, Tensor::from_matrix(*reference));
  }
  return {sigmoid(box_logits), logits};
}

Matrix grid_reference(Index grid, double size) {
  auto logit = [](double p) { return std::log(p / (1.0 - p)); };
  Matrix ref(grid * grid, 4);
  for (Index t = 0; t < grid * grid; ++t) {
    const double cx = (static_cast<double>(t % grid) + 0.5) / static_cast<double>(grid);
    const double cy = (static_cast<double>(t / grid) + 0.5) / static_cast<double>(grid);
    ref.row(t) << logit(cx), logit(cy), logit(size), logit(size);
  }
  return ref;
}

QuerySelection select_queries(const Tensor& memory, const DetectorConfig& cfg, const DetectorParams& params) {
  const Index n = memory.rows();
  const Index grid = cfg.image_size / 8;
  if (n != grid * grid) throw DimensionError("select_queries: memory has " + std::to_string(n) + " tokens");
  if (cfg.queries > n) throw ConfigError("select_queries: more queries than tokens");
  const Matrix scores = (memory.value() * params.class_w.value()).rowwise() + params.class_b.value().row(0);
  std::vector<std::pair<double, Index>> ranked;
  for (Index t = 0; t < n; ++t) ranked.emplace_back(-scores.row(t).head(cfg.categories).maxCoeff(), t);
  std::sort(ranked.begin(), ranked.end());
  const Matrix all = grid_reference(grid);
  QuerySelection sel;
  sel.reference.resize(cfg.queries, 4);
  for (Index k = 0; k < cfg.queries; ++k) {
    sel.tokens.push_back(ranked[static_cast<std::size_t>(k)].second);
    sel.reference.row(k) = all.row(sel.tokens.back());
  }
  return sel;
}

DetectorInput make_input(const DetectorConfig& cfg, const Image& image, const DepthMap* depth, double beta) {
  DetectorInput in{image_tensor(image), std::nullopt};
  if (!cfg.needs_fog_stream()) return in;
  if (cfg.aux_input == AuxInput::foggy) {
    in.aux = in.image;
  } else {
    if (!depth) throw ConfigError("variant " + variant_name(cfg.variant) + " needs depth maps for the fog stream");
    in.aux = density_tensor(*depth, beta);
  }
  return in;
}

ForwardResult forward(const DetectorInput& input, const DetectorConfig& cfg, const DetectorParams& params,
                      const EncodeOptions& options) {
  ForwardResult r;
  r.features = backbone_forward(input.image, params.backbone);
  Tensor tokens = make_tokens(r.features[2], params.token_proj, params.token_bias);
  std::optional<Tensor> fog_tokens;
  if (cfg.needs_fog_stream()) {
    if (!input.aux) throw ConfigError("variant " + variant_name(cfg.variant) + " needs the fog stream input");
    if (!params.aux_backbone) throw ConfigError("parameters lack the auxiliary backbone");
    auto aux_maps = backbone_forward(*input.aux, *params.aux_backbone);
    fog_tokens = make_tokens(aux_maps[2], params.aux_proj, params.aux_bias);
  }
  r.memory = encode(tokens, fog_tokens, cfg, params, options);
  if (cfg.query_init == QueryInit::select) {
    QuerySelection sel = select_queries(r.memory, cfg, params);
    r.output = decode(r.memory, gather_rows(r.memory, sel.tokens), params, &sel.reference);
  } else {
    if (!params.queries.defined()) throw ConfigError("parameters lack learned queries");
    r.output = decode(r.memory, params.queries, params);
  }
  return r;
}

std::vector<EvalPrediction> to_predictions(const DetectionOutput& out, const std::string& image_id) {
  const Matrix& logits = out.class_logits.value();
  const Matrix& boxes = out.boxes.value();
  const Index fg = logits.cols() - 1;
  std::vector<EvalPrediction> preds;
  for (Index q = 0; q < logits.rows(); ++q) {
    const double m = logits.row(q).maxCoeff();
    const Eigen::RowVectorXd e = (logits.row(q).array() - m).exp().matrix();
    const double z = e.sum();
    Index best = 0;
    for (Index c = 1; c < fg; ++c) {
      if (e[c] > e[best]) best = c;
    }
    EvalPrediction p;
    p.image_id = image_id;
    p.box = boxes.row(q).transpose().cwiseMax(0.0).cwiseMin(1.0);
    p.category = static_cast<int>(best);
    p.confidence = std::clamp(e[best] / z, 0.0, 1.0);
    preds.push_back(std::move(p));
  }
  return preds;
}

}  // namespace fogdetr
