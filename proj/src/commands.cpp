#include "fogdetr/commands.hpp"

#include <chrono>
#include <fstream>
#include <set>

#include "fogdetr/checkpoint.hpp"
#include "fogdetr/eval.hpp"

namespace fogdetr {

namespace fs = std::filesystem;
using nlohmann::json;

namespace {

using Clock = std::chrono::steady_clock;

double seconds_since(Clock::time_point t0) { return std::chrono::duration<double>(Clock::now() - t0).count(); }

void write_text(const fs::path& path, const std::string& text) {
  fs::create_directories(path.parent_path());
  std::ofstream os(path, std::ios::trunc | std::ios::binary);
  if (!os) throw IoError("cannot write " + path.string());
  os << text;
}

void write_json(const fs::path& path, const json& j) { write_text(path, j.dump(2) + "\n"); }

fs::path resolve(const fs::path& p, const fs::path& base) {
  return p.empty() || p.is_absolute() || base.empty() ? p : base / p;
}

json scene_json(const SceneOptions& s) {
  return {{"min_objects", s.min_objects}, {"max_objects", s.max_objects}, {"min_size", s.min_size},
          {"max_size", s.max_size}};
}

SceneOptions scene_from_json(const json& j) {
  SceneOptions s;
  for (const auto& [k, v] : j.items()) {
    if (k == "min_objects") s.min_objects = v.get<int>();
    else if (k == "max_objects") s.max_objects = v.get<int>();
    else if (k == "min_size") s.min_size = v.get<int>();
    else if (k == "max_size") s.max_size = v.get<int>();
    else throw ConfigError("unknown generate.scene key '" + k + "'");
  }
  return s;
}

json generate_json(const GenerateConfig& g) {
  json splits = json::array();
  for (const auto& s : g.splits) {
    splits.push_back({{"name", s.name},
                      {"betas", s.betas},
                      {"count", s.count},
                      {"scene_seed", s.scene_seed ? json(*s.scene_seed) : json(nullptr)}});
  }
  return {{"count", g.count},
          {"splits", splits},
          {"atmospheric_light", g.atmospheric_light},
          {"image_size", g.image_size},
          {"write_depth", g.write_depth},
          {"scene", scene_json(g.scene)}};
}

GenerateConfig generate_from_json(const json& j) {
  GenerateConfig g;
  for (const auto& [k, v] : j.items()) {
    if (k == "count") g.count = v.get<std::size_t>();
    else if (k == "atmospheric_light") g.atmospheric_light = v.get<double>();
    else if (k == "image_size") g.image_size = v.get<Index>();
    else if (k == "write_depth") g.write_depth = v.get<bool>();
    else if (k == "scene") g.scene = scene_from_json(v);
    else if (k == "splits") {
      g.splits.clear();
      for (const auto& sj : v) {
        SplitSpec s;
        for (const auto& [sk, sv] : sj.items()) {
          if (sk == "name") s.name = sv.get<std::string>();
          else if (sk == "betas") s.betas = sv.get<std::vector<double>>();
          else if (sk == "count") s.count = sv.get<std::size_t>();
          else if (sk == "scene_seed") {
            if (!sv.is_null()) s.scene_seed = sv.get<std::uint64_t>();
          } else throw ConfigError("unknown split key '" + sk + "'");
        }
        g.splits.push_back(std::move(s));
      }
    } else throw ConfigError("unknown generate key '" + k + "'");
  }
  return g;
}

void validate_generate(const GenerateConfig& g) {
  if (g.splits.empty()) throw ConfigError("generate.splits must be non-empty");
  if (g.count < 1) throw ConfigError("generate.count must be >= 1");
  if (g.image_size < 8 || g.image_size % 8 != 0) throw ConfigError("generate.image_size must be a multiple of 8");
  std::set<std::string> names;
  for (const auto& s : g.splits) {
    if (s.name.empty() || s.name.find_first_of("/\\") != std::string::npos || s.name == "." || s.name == "..") {
      throw ConfigError("generate: bad split name '" + s.name + "'");
    }
    if (!names.insert(s.name).second) throw ConfigError("generate: duplicate split '" + s.name + "'");
    if (s.betas.empty()) throw ConfigError("generate: split '" + s.name + "' has no fog levels");
    for (double b : s.betas) {
      try {
        FogParams{b, g.atmospheric_light}.validate();
      } catch (const ParameterError& e) {
        throw ConfigError("generate: split '" + s.name + "': " + e.what());
      }
    }
  }
}

json eval_json(const EvalConfig& e) {
  return {{"checkpoint", e.checkpoint ? json(e.checkpoint->string()) : json(nullptr)},
          {"data_root", e.data_root ? json(e.data_root->string()) : json(nullptr)},
          {"splits", e.splits},
          {"model_name", e.model_name}};
}

EvalConfig eval_from_json(const json& j) {
  EvalConfig e;
  for (const auto& [k, v] : j.items()) {
    if (k == "checkpoint") {
      if (!v.is_null()) e.checkpoint = fs::path(v.get<std::string>());
    } else if (k == "data_root") {
      if (!v.is_null()) e.data_root = fs::path(v.get<std::string>());
    } else if (k == "splits") e.splits = v.get<std::vector<std::string>>();
    else if (k == "model_name") e.model_name = v.get<std::string>();
    else throw ConfigError("unknown eval key '" + k + "'");
  }
  return e;
}

json metrics_json(const std::optional<StepMetrics>& m) { return m ? m->to_json() : json(nullptr); }

struct SplitEval {
  std::string split;
  MapReport report;
};

// Evaluates each named split under root; missing splits are an error only
// when required.
std::vector<SplitEval> evaluate_splits(const DetectorConfig& model, const DetectorParams& params, const fs::path& root,
                                       const std::vector<std::string>& splits, bool required) {
  std::vector<SplitEval> out;
  for (const auto& split : splits) {
    const fs::path dir = root / split;
    if (!fs::exists(dir / "manifest.json")) {
      if (required) throw ConfigError("eval split '" + split + "' not found under " + root.string());
      continue;
    }
    DatasetManifest manifest = read_manifest(dir);
    if (model.needs_fog_stream() && model.aux_input == AuxInput::density && !manifest.fog_stream) {
      throw ConfigError("variant " + variant_name(model.variant) + " needs the fog stream, split '" + split +
                        "' has none");
    }
    if (manifest.height != model.image_size || manifest.width != model.image_size) {
      throw ConfigError("split '" + split + "' image size does not match the model");
    }
    out.push_back({split, evaluate(model, params, load_dataset(dir, manifest))});
  }
  return out;
}

json splits_json(const std::vector<SplitEval>& evals) {
  json j = json::object();
  for (const auto& e : evals) j[e.split] = report_json(e.report, e.split);
  return j;
}

std::string table_text(const std::string& model, const std::vector<SplitEval>& evals) {
  std::vector<TableRow> rows;
  for (const auto& e : evals) rows.push_back({model, e.split, e.report});
  return rows.empty() ? std::string() : format_table(rows);
}

json run_manifest(const std::string& command, const RunConfig& cfg, std::uint64_t seed, json artifacts) {
  json config = cfg.to_json();
  config["seed"] = seed;
  return {{"command", command}, {"seed", seed}, {"config", config}, {"artifacts", std::move(artifacts)}};
}

}  // namespace

json RunConfig::to_json() const {
  return {{"seed", seed ? json(*seed) : json(nullptr)},
          {"generate", generate_json(generate)},
          {"train", train.to_json()},
          {"eval", eval_json(eval)},
          {"verify", {{"softmax_fault", verify.softmax_fault}, {"suites", verify.suites}}}};
}

RunConfig RunConfig::from_json(const json& j, const fs::path& base_dir) {
  if (!j.is_object()) throw ConfigError("run config must be a JSON object");
  RunConfig c;
  try {
    for (const auto& [k, v] : j.items()) {
      if (k == "seed") {
        if (!v.is_null()) {
          if (!v.is_number_unsigned()) throw ConfigError("seed must be a non-negative integer");
          c.seed = v.get<std::uint64_t>();
        }
      } else if (k == "generate") c.generate = generate_from_json(v);
      else if (k == "train") {
        c.train = TrainConfig::from_json(v);
        c.model_given = v.contains("model");
      } else if (k == "eval") c.eval = eval_from_json(v);
      else if (k == "verify") {
        for (const auto& [vk, vv] : v.items()) {
          if (vk == "softmax_fault") c.verify.softmax_fault = vv.get<double>();
          else if (vk == "suites") c.verify.suites = vv.get<std::vector<std::string>>();
          else throw ConfigError("unknown verify key '" + vk + "'");
        }
      } else {
        throw ConfigError("unknown config section '" + k + "'");
      }
    }
  } catch (const json::exception& e) {
    throw ConfigError(std::string("config: ") + e.what());
  }
  validate_generate(c.generate);
  c.train.dataset = resolve(c.train.dataset, base_dir);
  if (c.train.teacher.checkpoint) c.train.teacher.checkpoint = resolve(*c.train.teacher.checkpoint, base_dir);
  if (c.eval.checkpoint) c.eval.checkpoint = resolve(*c.eval.checkpoint, base_dir);
  if (c.eval.data_root) c.eval.data_root = resolve(*c.eval.data_root, base_dir);
  return c;
}

RunConfig RunConfig::load(const fs::path& file) {
  std::ifstream is(file);
  if (!is) throw ConfigError("cannot read config " + file.string());
  json j;
  try {
    j = json::parse(is);
  } catch (const json::exception& e) {
    throw ConfigError("config " + file.string() + " is not valid JSON: " + e.what());
  }
  return from_json(j, fs::absolute(file).parent_path());
}

void cmd_generate(const RunConfig& cfg, std::uint64_t seed, const fs::path& out) {
  const auto t0 = Clock::now();
  const GenerateConfig& g = cfg.generate;
  validate_generate(g);
  json splits = json::object();
  std::string text;
  for (const auto& s : g.splits) {
    DatasetOptions options;
    options.split = s.name;
    options.height = options.width = g.image_size;
    options.scene = g.scene;
    options.write_depth = g.write_depth;
    std::vector<FogParams> levels;
    for (double b : s.betas) levels.push_back({b, g.atmospheric_light});
    const std::size_t count = s.count ? s.count : g.count;
    const std::uint64_t scene_seed = s.scene_seed.value_or(seed);
    make_dataset(out / s.name, count, levels, scene_seed, options);
    splits[s.name] = {{"path", s.name}, {"count", count}, {"betas", s.betas}, {"scene_seed", scene_seed}};
    text += s.name + ": " + std::to_string(count) + " pairs\n";
  }
  write_json(out / "manifest.json", run_manifest("generate", cfg, seed, {{"splits", splits}}));
  json report = {{"command", "generate"}, {"seed", seed}, {"splits", splits}, {"wall_clock_seconds", seconds_since(t0)}};
  write_json(out / "report.json", report);
  write_text(out / "report.txt", text);
}

TrainResult cmd_train(const RunConfig& cfg, std::uint64_t seed, const fs::path& out, const ProgressFn& progress) {
  const auto t0 = Clock::now();
  TrainResult result = train(cfg.train, seed, out, progress);

  DetectorConfig model = cfg.train.model;
  model.seed = seed;
  std::vector<SplitEval> evals;
  if (cfg.eval.data_root) evals = evaluate_splits(model, result.params, *cfg.eval.data_root, cfg.eval.splits, false);

  json artifacts = {{"metrics", "metrics.jsonl"}, {"checkpoint", "checkpoint/"}, {"report", "report.json"}};
  if (result.teacher_checkpoint_hash) artifacts["teacher"] = "teacher/";
  write_json(out / "manifest.json", run_manifest("train", cfg, seed, artifacts));

  json report = {{"command", "train"},
                 {"seed", seed},
                 {"config", run_manifest("train", cfg, seed, {})["config"]},
                 {"status", result.status},
                 {"steps_completed", result.metrics.size()},
                 {"final", result.metrics.empty() ? json(nullptr) : result.metrics.back().to_json()},
                 {"divergence", metrics_json(result.divergence)},
                 {"metrics", "metrics.jsonl"},
                 {"evaluation", splits_json(evals)},
                 {"checkpoint_hash", result.checkpoint_hash},
                 {"teacher_checkpoint_hash",
                  result.teacher_checkpoint_hash ? json(*result.teacher_checkpoint_hash) : json(nullptr)},
                 {"wall_clock_seconds", seconds_since(t0)}};
  write_json(out / "report.json", report);

  std::string text = "variant " + variant_name(model.variant) + ", seed " + std::to_string(seed) + ": " +
                     result.status + " after " + std::to_string(result.metrics.size()) + " steps\n";
  if (result.divergence) {
    const auto& d = *result.divergence;
    text += "non-finite loss at step " + std::to_string(d.step) + ": " + d.to_json().dump() +
            "; checkpoint holds the last finite-loss parameters\n";
  } else if (!result.metrics.empty()) {
    text += "final " + result.metrics.back().to_json().dump() + "\n";
  }
  text += table_text(cfg.eval.model_name.empty() ? variant_name(model.variant) : cfg.eval.model_name, evals);
  text += "checkpoint " + result.checkpoint_hash + "\n";
  write_text(out / "report.txt", text);
  return result;
}

json cmd_eval(const RunConfig& cfg, std::uint64_t seed, const fs::path& out) {
  const auto t0 = Clock::now();
  if (!cfg.eval.checkpoint) throw ConfigError("eval needs a checkpoint (eval.checkpoint or --checkpoint)");
  if (!cfg.eval.data_root) throw ConfigError("eval needs eval.data_root");
  if (cfg.eval.splits.empty()) throw ConfigError("eval.splits must be non-empty");
  const fs::path ckpt = *cfg.eval.checkpoint;
  LoadedCheckpoint loaded;
  try {
    loaded = cfg.model_given ? load_checkpoint(ckpt, cfg.train.model) : load_checkpoint(ckpt);
  } catch (const IoError& e) {
    throw ConfigError(std::string("eval checkpoint: ") + e.what());
  }
  std::vector<SplitEval> evals =
      evaluate_splits(loaded.config, loaded.params, *cfg.eval.data_root, cfg.eval.splits, true);
  const std::string model = cfg.eval.model_name.empty() ? variant_name(loaded.config.variant) : cfg.eval.model_name;

  json result = {{"model", model},
                 {"checkpoint", ckpt.string()},
                 {"checkpoint_hash", checkpoint_hash(ckpt)},
                 {"splits", splits_json(evals)}};
  write_json(out / "manifest.json", run_manifest("eval", cfg, seed, {{"report", "report.json"}}));
  json report = result;
  report["command"] = "eval";
  report["seed"] = seed;
  report["wall_clock_seconds"] = seconds_since(t0);
  write_json(out / "report.json", report);
  write_text(out / "report.txt", table_text(model, evals));
  return result;
}

VerifyReport cmd_verify(const RunConfig& cfg, std::uint64_t seed, const fs::path& out, const ProgressFn& progress) {
  const auto t0 = Clock::now();
  VerifyOptions options;
  options.seed = seed;
  options.softmax_fault = cfg.verify.softmax_fault;
  options.only = cfg.verify.suites;
  VerifyReport report = run_verify(options, [&](const SuiteResult& r) {
    if (progress) progress(std::string(r.passed ? "PASS " : "FAIL ") + r.name + " [" + r.detail + "]");
  });
  write_json(out / "manifest.json", run_manifest("verify", cfg, seed, {{"report", "report.json"}}));
  json j = report.to_json();
  j["command"] = "verify";
  j["seed"] = seed;
  j["softmax_fault"] = cfg.verify.softmax_fault;
  j["wall_clock_seconds"] = seconds_since(t0);
  write_json(out / "report.json", j);
  write_text(out / "report.txt", report.to_text());
  return report;
}

int run_command(const CommandLine& line, std::ostream& log, std::ostream& err) {
  try {
    RunConfig cfg = line.config ? RunConfig::load(*line.config) : RunConfig{};
    if (line.seed) cfg.seed = line.seed;
    if (!cfg.seed) throw ConfigError("a seed is required: set \"seed\" in the config or pass --seed");
    if (line.checkpoint) cfg.eval.checkpoint = fs::absolute(*line.checkpoint);
    if (line.softmax_fault) cfg.verify.softmax_fault = *line.softmax_fault;
    if (line.out.empty()) throw ConfigError("--out is required");
    const std::uint64_t seed = *cfg.seed;
    ProgressFn progress;
    if (!line.quiet) progress = [&log](const std::string& msg) { log << msg << '\n' << std::flush; };

    if (line.command == "generate") {
      cmd_generate(cfg, seed, line.out);
      if (!line.quiet) log << "wrote " << cfg.generate.splits.size() << " splits to " << line.out.string() << '\n';
      return 0;
    }
    if (line.command == "train") {
      TrainResult r = cmd_train(cfg, seed, line.out, progress);
      if (!line.quiet) log << r.status << ", checkpoint " << r.checkpoint_hash << '\n';
      if (r.status == "diverged") {
        err << "training diverged at step " << r.divergence->step << "; see " << (line.out / "report.json").string()
            << '\n';
        return 1;
      }
      return 0;
    }
    if (line.command == "eval") {
      cmd_eval(cfg, seed, line.out);
      if (!line.quiet) {
        std::ifstream is(line.out / "report.txt");
        log << is.rdbuf();
      }
      return 0;
    }
    if (line.command == "verify") {
      VerifyReport r = cmd_verify(cfg, seed, line.out, progress);
      const auto failed = r.failures();
      if (!failed.empty()) {
        for (const auto& s : r.suites)
          if (!s.passed) err << "invariant violated: " << s.name << ": " << s.invariant << " [" << s.detail << "]\n";
        return 1;
      }
      if (!line.quiet) log << r.suites.size() << " suites passed\n";
      return 0;
    }
    throw ConfigError("unknown command '" + line.command + "'");
  } catch (const ConfigError& e) {
    err << "config error: " << e.what() << '\n';
    return 2;
  } catch (const ArchitectureError& e) {
    err << "architecture mismatch: " << e.what() << '\n';
    return 2;
  } catch (const ParameterError& e) {
    err << "config error: " << e.what() << '\n';
    return 2;
  } catch (const SpecError& e) {
    err << "config error: " << e.what() << '\n';
    return 2;
  } catch (const IoError& e) {
    err << "i/o error: " << e.what() << '\n';
    return 2;
  } catch (const std::exception& e) {
    err << "error: " << e.what() << '\n';
    return 1;
  }
}

}  // namespace fogdetr
