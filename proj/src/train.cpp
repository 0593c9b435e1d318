#include "fogdetr/train.hpp"

#include <cmath>
#include <fstream>
#include <numeric>

#include "fogdetr/checkpoint.hpp"

namespace fogdetr {

namespace fs = std::filesystem;

namespace {

std::string input_name(InputMode m) {
  switch (m) {
    case InputMode::dataset: return "dataset";
    case InputMode::clear: return "clear";
    case InputMode::mixed: return "mixed";
  }
  return "?";
}

InputMode parse_input(const std::string& s) {
  for (InputMode m : {InputMode::dataset, InputMode::clear, InputMode::mixed}) {
    if (input_name(m) == s) return m;
  }
  throw ConfigError("input must be 'dataset', 'clear' or 'mixed', got '" + s + "'");
}

nlohmann::json mix_json(const MixConfig& m) {
  return {{"clear_fraction", m.clear_fraction}, {"betas", m.betas}, {"atmospheric_light", m.atmospheric_light}};
}

MixConfig mix_from_json(const nlohmann::json& j) {
  MixConfig m;
  for (const auto& [k, v] : j.items()) {
    if (k == "clear_fraction") m.clear_fraction = v.get<double>();
    else if (k == "betas") m.betas = v.get<std::vector<double>>();
    else if (k == "atmospheric_light") m.atmospheric_light = v.get<double>();
    else throw ConfigError("unknown mix key '" + k + "'");
  }
  return m;
}

void validate_mix(const MixConfig& m) {
  if (!(m.clear_fraction >= 0 && m.clear_fraction <= 1)) throw ConfigError("mix.clear_fraction must be in [0, 1]");
  if (m.betas.empty() && m.clear_fraction < 1) throw ConfigError("mix.betas must be non-empty");
  for (double b : m.betas) FogParams{b, m.atmospheric_light}.validate();
}

TrainExample make_example(const Sample& s, InputMode mode, const MixConfig& mix, Rng& rng) {
  TrainExample ex{s.id, s.clear, s.foggy, s.annotation, s.depth, s.fog.beta};
  if (mode == InputMode::clear) {
    ex.input = s.clear;
    ex.beta = 0.0;
  } else if (mode == InputMode::mixed) {
    if (rng.uniform() < mix.clear_fraction) {
      ex.input = s.clear;
      ex.beta = 0.0;
    } else {
      if (!s.depth) throw ConfigError("mixed fog inputs need depth maps in the dataset");
      const auto k = static_cast<std::size_t>(rng.uniform_int(0, static_cast<std::int64_t>(mix.betas.size()) - 1));
      ex.beta = mix.betas[k];
      ex.input = apply_fog(s.clear, *s.depth, FogParams{ex.beta, mix.atmospheric_light});
    }
  }
  return ex;
}

std::vector<TrainExample> draw_batch(const std::vector<Sample>& samples, std::size_t batch_size, InputMode mode,
                                     const MixConfig& mix, Rng rng) {
  std::vector<std::size_t> order(samples.size());
  std::iota(order.begin(), order.end(), std::size_t{0});
  const std::size_t k = std::min(batch_size, samples.size());
  for (std::size_t i = 0; i < k; ++i) {
    const auto j = static_cast<std::size_t>(rng.uniform_int(static_cast<std::int64_t>(i),
                                                            static_cast<std::int64_t>(samples.size()) - 1));
    std::swap(order[i], order[j]);
  }
  std::vector<TrainExample> batch;
  for (std::size_t i = 0; i < k; ++i) batch.push_back(make_example(samples[order[i]], mode, mix, rng));
  return batch;
}

struct LoopResult {
  std::vector<StepMetrics> metrics;
  std::optional<StepMetrics> divergence;
};

std::vector<Matrix> snapshot(const std::vector<Tensor>& params) {
  std::vector<Matrix> out;
  out.reserve(params.size());
  for (const auto& p : params) out.push_back(p.value());
  return out;
}

// Runs `steps` updates through step_fn, streaming metrics to out_dir. On a
// non-finite loss the parameters are rolled back to the ones that produced
// the last finite loss, since the update before a blow-up may already have
// written non-finite values.
template <typename StepFn>
LoopResult run_loop(std::size_t steps, const std::vector<Tensor>& params, const fs::path& out_dir,
                    const std::string& label, const ProgressFn& progress, StepFn&& step_fn) {
  fs::create_directories(out_dir);
  std::ofstream metrics(out_dir / "metrics.jsonl", std::ios::trunc);
  if (!metrics) throw IoError("cannot write " + (out_dir / "metrics.jsonl").string());
  LoopResult r;
  std::vector<Matrix> last_good = snapshot(params);
  for (std::size_t step = 1; step <= steps; ++step) {
    std::vector<Matrix> before = snapshot(params);
    try {
      StepMetrics m = step_fn(step);
      metrics << m.to_json().dump() << '\n';
      r.metrics.push_back(m);
      last_good = std::move(before);
    } catch (const NonFiniteLoss& e) {
      for (std::size_t i = 0; i < params.size(); ++i) {
        Tensor t = params[i];
        t.mutable_value() = last_good[i];
        t.zero_grad();
      }
      r.divergence = e.metrics;
      if (progress) progress(label + ": " + e.what());
      break;
    }
    if (progress && (step % 100 == 0 || step == steps)) {
      progress(label + " step " + std::to_string(step) + "/" + std::to_string(steps) +
               " loss " + std::to_string(r.metrics.back().l_total));
    }
  }
  return r;
}

}  // namespace

void TrainConfig::validate() const {
  model.validate();
  if (steps < 1) throw ConfigError("train.steps must be >= 1");
  if (batch_size < 1) throw ConfigError("train.batch_size must be >= 1");
  if (!(sgd.lr >= 0) || !(sgd.momentum >= 0 && sgd.momentum < 1) || !(sgd.max_grad_norm >= 0)) {
    throw ConfigError("train: need lr >= 0, momentum in [0, 1), max_grad_norm >= 0");
  }
  validate_mix(mix);
  validate_mix(teacher.mix);
  if (model.variant == Variant::pl) {
    perceptual.validate();
    if (!(perc_weight >= 0)) throw ConfigError("train.perc_weight must be >= 0");
    if (!teacher.checkpoint && teacher.steps < 1) throw ConfigError("train.teacher.steps must be >= 1");
  }
}

nlohmann::json TrainConfig::to_json() const {
  nlohmann::json teacher_json = {{"checkpoint", teacher.checkpoint ? nlohmann::json(teacher.checkpoint->string()) : nlohmann::json(nullptr)},
                                 {"steps", teacher.steps},
                                 {"lr", teacher.lr},
                                 {"mix", mix_json(teacher.mix)}};
  return {{"model", model.to_json()},
          {"dataset", dataset.string()},
          {"steps", steps},
          {"batch_size", batch_size},
          {"limit", limit},
          {"lr", sgd.lr},
          {"momentum", sgd.momentum},
          {"max_grad_norm", sgd.max_grad_norm},
          {"input", input_name(input)},
          {"mix", mix_json(mix)},
          {"perceptual", perceptual.to_json()},
          {"perc_weight", perc_weight},
          {"teacher", teacher_json},
          {"student_init", student_from_teacher ? "teacher" : "random"}};
}

TrainConfig TrainConfig::from_json(const nlohmann::json& j) {
  if (!j.is_object()) throw ConfigError("train config must be a JSON object");
  TrainConfig c;
  try {
    for (const auto& [k, v] : j.items()) {
      if (k == "model") c.model = DetectorConfig::from_json(v);
      else if (k == "dataset") c.dataset = v.get<std::string>();
      else if (k == "steps") c.steps = v.get<std::size_t>();
      else if (k == "batch_size") c.batch_size = v.get<std::size_t>();
      else if (k == "limit") c.limit = v.get<std::size_t>();
      else if (k == "lr") c.sgd.lr = v.get<double>();
      else if (k == "momentum") c.sgd.momentum = v.get<double>();
      else if (k == "max_grad_norm") c.sgd.max_grad_norm = v.get<double>();
      else if (k == "input") c.input = parse_input(v.get<std::string>());
      else if (k == "mix") c.mix = mix_from_json(v);
      else if (k == "perceptual") c.perceptual = PerceptualConfig::from_json(v);
      else if (k == "perc_weight") c.perc_weight = v.get<double>();
      else if (k == "student_init") {
        const auto s = v.get<std::string>();
        if (s != "teacher" && s != "random") throw ConfigError("student_init must be 'teacher' or 'random'");
        c.student_from_teacher = s == "teacher";
      } else if (k == "teacher") {
        for (const auto& [tk, tv] : v.items()) {
          if (tk == "checkpoint") {
            if (!tv.is_null()) c.teacher.checkpoint = fs::path(tv.get<std::string>());
          } else if (tk == "steps") c.teacher.steps = tv.get<std::size_t>();
          else if (tk == "lr") c.teacher.lr = tv.get<double>();
          else if (tk == "mix") c.teacher.mix = mix_from_json(tv);
          else throw ConfigError("unknown teacher key '" + tk + "'");
        }
      } else {
        throw ConfigError("unknown train key '" + k + "'");
      }
    }
  } catch (const nlohmann::json::exception& e) {
    throw ConfigError(std::string("train config: ") + e.what());
  }
  c.validate();
  return c;
}

TrainResult train(const TrainConfig& cfg, std::uint64_t seed, const fs::path& out_dir, const ProgressFn& progress) {
  cfg.validate();
  if (cfg.dataset.empty()) throw ConfigError("train.dataset is required");
  DatasetManifest manifest;
  try {
    manifest = read_manifest(cfg.dataset);
  } catch (const IoError& e) {
    throw ConfigError(std::string("train.dataset: ") + e.what());
  }
  // Fail before loading any images when a fog-stream variant lacks depth.
  if (cfg.model.needs_fog_stream() && cfg.model.aux_input == AuxInput::density && !manifest.fog_stream) {
    throw ConfigError("variant " + variant_name(cfg.model.variant) +
                      " needs the fog stream, but the dataset manifest has none");
  }
  if (manifest.height != cfg.model.image_size || manifest.width != cfg.model.image_size) {
    throw ConfigError("dataset images are " + std::to_string(manifest.height) + "x" + std::to_string(manifest.width) +
                      ", model expects " + std::to_string(cfg.model.image_size));
  }
  return train(cfg, load_dataset(cfg.dataset, manifest), manifest.fog_stream, seed, out_dir, progress);
}

TrainResult train(const TrainConfig& cfg, const std::vector<Sample>& all_samples, bool has_depth, std::uint64_t seed,
                  const fs::path& out_dir, const ProgressFn& progress) {
  cfg.validate();
  if (cfg.model.needs_fog_stream() && cfg.model.aux_input == AuxInput::density && !has_depth) {
    throw ConfigError("variant " + variant_name(cfg.model.variant) + " needs the fog stream (depth maps)");
  }
  if (all_samples.empty()) throw ConfigError("training set is empty");
  std::vector<Sample> samples = all_samples;
  if (cfg.limit > 0 && cfg.limit < samples.size()) samples.resize(cfg.limit);

  DetectorConfig model = cfg.model;
  model.seed = seed;
  Rng root(seed);
  TrainResult result;

  if (model.variant != Variant::pl) {
    result.params = DetectorParams::init(model);
    Sgd opt(result.params.parameters(), cfg.sgd);
    Rng batches = root.split("batches");
    LoopResult loop = run_loop(cfg.steps, result.params.parameters(), out_dir, variant_name(model.variant), progress, [&](std::size_t step) {
      auto batch = draw_batch(samples, cfg.batch_size, cfg.input, cfg.mix, batches.split(step));
      return detection_step(batch, model, result.params, opt, step);
    });
    result.metrics = std::move(loop.metrics);
    result.divergence = loop.divergence;
  } else {
    DetectorParams teacher;
    if (cfg.teacher.checkpoint) {
      teacher = load_checkpoint(*cfg.teacher.checkpoint, model).params;
    } else {
      DetectorConfig tcfg = model;
      tcfg.seed = root.split("teacher").next_u64();
      teacher = DetectorParams::init(tcfg);
      SgdOptions topt = cfg.sgd;
      if (cfg.teacher.lr > 0) topt.lr = cfg.teacher.lr;
      Sgd opt(teacher.parameters(), topt);
      Rng batches = root.split("teacher-batches");
      LoopResult loop = run_loop(cfg.teacher.steps, teacher.parameters(), out_dir / "teacher", "teacher", progress, [&](std::size_t step) {
        auto batch = draw_batch(samples, cfg.batch_size, InputMode::mixed, cfg.teacher.mix, batches.split(step));
        return detection_step(batch, tcfg, teacher, opt, step);
      });
      save_checkpoint(out_dir / "teacher" / "checkpoint", tcfg, teacher);
      result.teacher_checkpoint_hash = checkpoint_hash(out_dir / "teacher" / "checkpoint");
      if (loop.divergence) {
        result.status = "diverged";
        result.divergence = loop.divergence;
        result.params = teacher;
        fs::create_directories(out_dir);
        std::ofstream(out_dir / "metrics.jsonl", std::ios::trunc);
        save_checkpoint(out_dir / "checkpoint", model, teacher);
        result.checkpoint_hash = checkpoint_hash(out_dir / "checkpoint");
        return result;
      }
    }
    DetectorParams student = cfg.student_from_teacher ? teacher.clone(true) : DetectorParams::init(model);
    TeacherStudentPair pair = TeacherStudentPair::make(model, teacher, student, cfg.perceptual, cfg.perc_weight);
    Sgd opt(pair.student.parameters(), cfg.sgd);
    Rng batches = root.split("batches");
    LoopResult loop = run_loop(cfg.steps, pair.student.parameters(), out_dir, "student", progress, [&](std::size_t step) {
      auto batch = draw_batch(samples, cfg.batch_size, cfg.input, cfg.mix, batches.split(step));
      return distill_step(batch, pair, opt, step);
    });
    result.params = pair.student;
    result.metrics = std::move(loop.metrics);
    result.divergence = loop.divergence;
  }
  if (result.divergence) result.status = "diverged";
  save_checkpoint(out_dir / "checkpoint", model, result.params);
  result.checkpoint_hash = checkpoint_hash(out_dir / "checkpoint");
  return result;
}

DetectorInput eval_input(const DetectorConfig& cfg, const Sample& s) {
  return make_input(cfg, s.foggy, s.depth ? &*s.depth : nullptr, s.fog.beta);
}

MapReport evaluate(const DetectorConfig& cfg, const DetectorParams& params, const std::vector<Sample>& samples) {
  NoGradScope no_grad;
  std::vector<EvalPrediction> predictions;
  std::vector<ImageGroundTruth> truth;
  for (const auto& s : samples) {
    auto fr = forward(eval_input(cfg, s), cfg, params);
    auto preds = to_predictions(fr.output, s.id);
    predictions.insert(predictions.end(), preds.begin(), preds.end());
    truth.push_back({s.id, s.annotation});
  }
  return map50(predictions, truth, static_cast<int>(cfg.categories));
}

}  // namespace fogdetr
