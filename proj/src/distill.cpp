#include "fogdetr/distill.hpp"

#include <cmath>
#include <limits>

namespace fogdetr {

void PerceptualConfig::validate() const {
  if (layers.empty()) throw ConfigError("perceptual: layer set P must be non-empty");
  if (layers.size() != lambda.size()) throw ConfigError("perceptual: need one lambda per layer");
  bool any_positive = false;
  for (std::size_t i = 0; i < layers.size(); ++i) {
    if (layers[i] < 1 || layers[i] > 3) throw ConfigError("perceptual: layers must be backbone stages 1..3");
    for (std::size_t j = 0; j < i; ++j) {
      if (layers[j] == layers[i]) throw ConfigError("perceptual: duplicate layer " + std::to_string(layers[i]));
    }
    if (!(lambda[i] >= 0) || !std::isfinite(lambda[i])) throw ConfigError("perceptual: lambda must be finite and >= 0");
    any_positive = any_positive || lambda[i] > 0;
  }
  if (!any_positive) throw ConfigError("perceptual: at least one lambda must be > 0");
}

nlohmann::json PerceptualConfig::to_json() const { return {{"layers", layers}, {"lambda", lambda}}; }

PerceptualConfig PerceptualConfig::from_json(const nlohmann::json& j) {
  PerceptualConfig c;
  try {
    for (const auto& [key, value] : j.items()) {
      if (key == "layers") c.layers = value.get<std::vector<int>>();
      else if (key == "lambda") c.lambda = value.get<std::vector<double>>();
      else throw ConfigError("unknown perceptual key '" + key + "'");
    }
  } catch (const nlohmann::json::exception& e) {
    throw ConfigError(std::string("perceptual config: ") + e.what());
  }
  c.validate();
  return c;
}

TeacherStudentPair TeacherStudentPair::make(DetectorConfig model, DetectorParams teacher, DetectorParams student,
                                            PerceptualConfig perceptual, double perc_weight) {
  perceptual.validate();
  if (!(perc_weight >= 0) || !std::isfinite(perc_weight)) throw ConfigError("perc_weight must be finite and >= 0");
  for (std::size_t s = 0; s < 3; ++s) {
    if (teacher.backbone.kernels[s].shape() != student.backbone.kernels[s].shape()) {
      throw ArchitectureError("teacher and student backbone stage " + std::to_string(s + 1) + " differ: " +
                              shape_string(teacher.backbone.kernels[s].shape()) + " vs " +
                              shape_string(student.backbone.kernels[s].shape()));
    }
  }
  TeacherStudentPair pair;
  pair.model = model;
  // A private frozen copy, so freezing never touches the caller's tensors.
  pair.teacher = teacher.clone(false);
  pair.student = std::move(student);
  pair.perceptual = std::move(perceptual);
  pair.perc_weight = perc_weight;
  return pair;
}

Tensor perceptual_loss(const std::vector<Tensor>& teacher_features, const std::vector<Tensor>& student_features,
                       const PerceptualConfig& config) {
  config.validate();
  Tensor total;
  for (std::size_t i = 0; i < config.layers.size(); ++i) {
    const auto l = static_cast<std::size_t>(config.layers[i]);
    if (l > teacher_features.size() || l > student_features.size()) {
      throw ArchitectureError("perceptual_loss: stage " + std::to_string(l) + " missing from a feature stack");
    }
    const Tensor& t = teacher_features[l - 1];
    const Tensor& s = student_features[l - 1];
    if (t.shape() != s.shape()) {
      throw ArchitectureError("perceptual_loss: stage " + std::to_string(l) + " shapes differ: " +
                              shape_string(t.shape()) + " vs " + shape_string(s.shape()));
    }
    Tensor term = scale(sum_squares(sub(t, s)), config.lambda[i] / static_cast<double>(t.size()));
    total = total.defined() ? add(total, term) : term;
  }
  return total;
}

Tensor perceptual_loss(const Image& clear, const Image& foggy, const TeacherStudentPair& pair) {
  auto teacher = backbone_forward(clear, pair.teacher.backbone);
  auto student = backbone_forward(foggy, pair.student.backbone);
  return perceptual_loss(teacher, student, pair.perceptual);
}

Tensor total_loss(const Tensor& obj, const Tensor& perc, double perc_weight) {
  if (!std::isfinite(obj.item()) || !std::isfinite(perc.item())) {
    throw EvaluationError("total_loss: non-finite input");
  }
  return perc_weight == 1.0 ? add(obj, perc) : add(obj, scale(perc, perc_weight));
}

nlohmann::json StepMetrics::to_json() const {
  auto num = [](double v) { return std::isfinite(v) ? nlohmann::json(v) : nlohmann::json(std::to_string(v)); };
  return {{"step", step}, {"l_obj", num(l_obj)}, {"l_perc", num(l_perc)}, {"l_total", num(l_total)}};
}

NonFiniteLoss::NonFiniteLoss(StepMetrics m)
    : std::runtime_error("non-finite loss at step " + std::to_string(m.step) + " (l_obj=" + std::to_string(m.l_obj) +
                         ", l_perc=" + std::to_string(m.l_perc) + ")"),
      metrics(m) {}

namespace {

struct BatchLoss {
  Tensor obj;
  Tensor perc;
};

BatchLoss batch_loss(const std::vector<TrainExample>& batch, const DetectorConfig& cfg, const DetectorParams& params,
                     const TeacherStudentPair* pair) {
  if (batch.empty()) throw ContractError("training step on an empty batch");
  Tensor obj, perc;
  for (const auto& ex : batch) {
    auto fr = forward(make_input(cfg, ex.input, ex.depth ? &*ex.depth : nullptr, ex.beta), cfg, params);
    // Non-finite outputs cannot be matched; report them as a non-finite loss.
    const bool finite_out = fr.output.boxes.value().allFinite() && fr.output.class_logits.value().allFinite();
    Tensor l = finite_out
                   ? detection_loss(fr.output, ex.annotation, hungarian_match(fr.output, ex.annotation, cfg.loss), cfg.loss).total
                   : Tensor::scalar(std::numeric_limits<double>::quiet_NaN());
    obj = obj.defined() ? add(obj, l) : l;
    if (pair) {
      Tensor p = perceptual_loss(backbone_forward(ex.clear, pair->teacher.backbone), fr.features, pair->perceptual);
      perc = perc.defined() ? add(perc, p) : p;
    }
  }
  const double inv = 1.0 / static_cast<double>(batch.size());
  return {scale(obj, inv), pair ? scale(perc, inv) : Tensor::scalar(0.0)};
}

bool finite(const StepMetrics& m) { return std::isfinite(m.l_obj) && std::isfinite(m.l_perc) && std::isfinite(m.l_total); }

}  // namespace

StepMetrics detection_step(const std::vector<TrainExample>& batch, const DetectorConfig& cfg,
                           const DetectorParams& params, Sgd& optimizer, std::size_t step) {
  Tape tape;
  Tape::Scope scope(tape);
  BatchLoss l = batch_loss(batch, cfg, params, nullptr);
  StepMetrics m{step, l.obj.item(), 0.0, l.obj.item()};
  if (!finite(m)) throw NonFiniteLoss(m);
  backward(l.obj, tape);
  optimizer.step();
  return m;
}

StepMetrics distill_step(const std::vector<TrainExample>& batch, const TeacherStudentPair& pair, Sgd& optimizer,
                         std::size_t step) {
  Tape tape;
  Tape::Scope scope(tape);
  BatchLoss l = batch_loss(batch, pair.model, pair.student, &pair);
  StepMetrics m{step, l.obj.item(), l.perc.item(), 0.0};
  m.l_total = m.l_obj + pair.perc_weight * m.l_perc;
  if (!finite(m)) throw NonFiniteLoss(m);
  Tensor total = total_loss(l.obj, l.perc, pair.perc_weight);
  m.l_total = total.item();
  backward(total, tape);
  optimizer.step();
  return m;
}

}  // namespace fogdetr
