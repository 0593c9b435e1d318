#include <doctest.h>

#include <cmath>
#include <sstream>

#include "fogdetr/checkpoint.hpp"
#include "fogdetr/commands.hpp"
#include "fogdetr/rng.hpp"
#include "test_util.hpp"

using namespace fogdetr;
using fogdetr::test::slurp;
using fogdetr::test::TempDir;
using nlohmann::json;
namespace fs = std::filesystem;

namespace {

struct Run {
  int code;
  std::string log, err;
};

Run run(const std::string& command, const std::optional<fs::path>& config, std::optional<std::uint64_t> seed,
        const fs::path& out, const std::optional<fs::path>& checkpoint = {}, std::optional<double> fault = {}) {
  CommandLine line;
  line.command = command;
  line.config = config;
  line.seed = seed;
  line.out = out;
  line.checkpoint = checkpoint;
  line.softmax_fault = fault;
  line.quiet = true;
  std::ostringstream log, err;
  const int code = run_command(line, log, err);
  return {code, log.str(), err.str()};
}

fs::path write_config(const fs::path& dir, const std::string& name, const json& j) {
  fs::create_directories(dir);
  const fs::path p = dir / name;
  std::ofstream(p) << j.dump(2);
  return p;
}

json load_json(const fs::path& p) { return json::parse(slurp(p)); }

json small_generate(std::size_t count) {
  return {{"count", count},
          {"splits",
           {{{"name", "clear"}, {"betas", {0.0}}},
            {{"name", "low"}, {"betas", {fog_presets::kLow}}},
            {{"name", "mid"}, {"betas", {fog_presets::kMid}}},
            {{"name", "high"}, {"betas", {fog_presets::kHigh}}}}}};
}

std::map<std::string, std::string> tree(const fs::path& root) {
  std::map<std::string, std::string> out;
  for (const auto& e : fs::recursive_directory_iterator(root))
    if (e.is_regular_file()) out[fs::relative(e.path(), root).string()] = file_hash(e.path());
  return out;
}

bool params_equal(const DetectorParams& a, const DetectorParams& b) {
  auto na = a.named_parameters(), nb = b.named_parameters();
  if (na.size() != nb.size()) return false;
  for (std::size_t i = 0; i < na.size(); ++i) {
    if (na[i].first != nb[i].first) return false;
    if (na[i].second.value() != nb[i].second.value()) return false;
  }
  return true;
}

bool params_finite(const DetectorParams& p) {
  for (const auto& [name, t] : p.named_parameters())
    if (!t.value().allFinite()) return false;
  return true;
}

}  // namespace

TEST_CASE("run config round-trips through JSON and rejects unknown keys") {
  RunConfig c;
  c.seed = 17;
  c.generate.count = 12;
  c.generate.splits = {{"fog", {0.05, 0.07}, 3, 99}};
  c.train.model.variant = Variant::wfe;
  c.train.steps = 33;
  c.train.sgd.lr = 0.005;
  c.train.dataset = "/data/train";
  c.eval.splits = {"fog"};
  c.eval.data_root = "/data";
  c.verify.suites = {"fog.monotone_in_beta"};
  const json j = c.to_json();
  RunConfig back = RunConfig::from_json(j);
  CHECK(back.to_json() == j);
  CHECK(back.generate.splits[0].scene_seed == 99u);
  CHECK(back.model_given);

  for (const char* section : {"generate", "train", "eval", "verify"}) {
    json bad = j;
    bad[section]["bogus"] = 1;
    CHECK_THROWS_AS(RunConfig::from_json(bad), ConfigError);
  }
  json bad = j;
  bad["extra"] = 1;
  CHECK_THROWS_AS(RunConfig::from_json(bad), ConfigError);
  bad = j;
  bad["seed"] = -1;
  CHECK_THROWS_AS(RunConfig::from_json(bad), ConfigError);
}

TEST_CASE("config paths resolve against the config file's directory") {
  TempDir tmp("harness_paths");
  const fs::path cfg = write_config(tmp.path() / "cfgs", "run.json",
                                    {{"train", {{"dataset", "data/train"}}}, {"eval", {{"data_root", "/abs"}}}});
  RunConfig c = RunConfig::load(cfg);
  CHECK(c.train.dataset == fs::absolute(tmp.path() / "cfgs") / "data/train");
  CHECK(*c.eval.data_root == fs::path("/abs"));
}

TEST_CASE("every command needs a seed and reports config errors with exit 2") {
  TempDir tmp("harness_seed");
  for (const char* cmd : {"generate", "train", "eval", "verify"}) {
    Run r = run(cmd, std::nullopt, std::nullopt, tmp.path() / cmd);
    CHECK(r.code == 2);
    CHECK(r.err.find("seed") != std::string::npos);
  }
  const fs::path broken = tmp.path() / "broken.json";
  std::ofstream(broken) << "{ not json";
  CHECK(run("generate", broken, 1, tmp.path() / "g").code == 2);
  const fs::path unknown = write_config(tmp.path(), "unknown.json", {{"seed", 1}, {"trian", json::object()}});
  CHECK(run("generate", unknown, std::nullopt, tmp.path() / "g").code == 2);
  const fs::path bad_beta =
      write_config(tmp.path(), "beta.json", {{"seed", 1}, {"generate", {{"splits", {{{"name", "x"}, {"betas", {-0.1}}}}}}}});
  CHECK(run("generate", bad_beta, std::nullopt, tmp.path() / "g").code == 2);
  CHECK(run("eval", std::nullopt, 1, tmp.path() / "e").code == 2);
}

TEST_CASE("generate writes one dataset per split, reproducibly") {
  TempDir tmp("harness_generate");
  const fs::path cfg = write_config(tmp.path(), "gen.json", {{"generate", small_generate(10)}});
  REQUIRE(run("generate", cfg, 5, tmp.path() / "a").code == 0);
  REQUIRE(run("generate", cfg, 5, tmp.path() / "b").code == 0);
  for (const char* split : {"clear", "low", "mid", "high"}) {
    DatasetManifest m = read_manifest(tmp.path() / "a" / split);
    CHECK(m.count == 10);
    CHECK(m.fog_stream);
  }
  auto ta = tree(tmp.path() / "a"), tb = tree(tmp.path() / "b");
  ta.erase("report.json");
  tb.erase("report.json");
  CHECK(ta == tb);

  // Splits share the scene seed, so annotations agree and beta = 0 leaves images clear.
  const auto clear = load_dataset(tmp.path() / "a" / "clear", read_manifest(tmp.path() / "a" / "clear"));
  const auto high = load_dataset(tmp.path() / "a" / "high", read_manifest(tmp.path() / "a" / "high"));
  for (std::size_t i = 0; i < clear.size(); ++i) {
    CHECK((clear[i].foggy.pixels == clear[i].clear.pixels).all());
    CHECK((clear[i].clear.pixels == high[i].clear.pixels).all());
    CHECK(clear[i].annotation.boxes.size() == high[i].annotation.boxes.size());
    CHECK((high[i].foggy.pixels != high[i].clear.pixels).any());
  }
  CHECK(load_json(tmp.path() / "a" / "manifest.json")["seed"] == 5);

  REQUIRE(run("generate", cfg, 6, tmp.path() / "c").code == 0);
  CHECK(slurp(tmp.path() / "a/high/annotations.jsonl") != slurp(tmp.path() / "c/high/annotations.jsonl"));
}

TEST_CASE("train, eval and the run artifacts") {
  TempDir tmp("harness_train");
  const fs::path data = tmp.path() / "data";
  REQUIRE(run("generate", write_config(tmp.path(), "gen.json", {{"generate", small_generate(6)}}), 3, data).code == 0);

  json base = {{"train",
                {{"dataset", (data / "high").string()},
                 {"model", {{"variant", "baseline"}}},
                 {"steps", 20},
                 {"batch_size", 2}}},
               {"eval", {{"data_root", data.string()}}}};

  SUBCASE("a run records config, metrics, checkpoint and evaluation") {
    REQUIRE(run("train", write_config(tmp.path(), "t.json", base), 8, tmp.path() / "run").code == 0);
    const fs::path out = tmp.path() / "run";
    json report = load_json(out / "report.json");
    CHECK(report["status"] == "completed");
    CHECK(report["steps_completed"] == 20);
    CHECK(report["config"]["seed"] == 8);
    CHECK(report["evaluation"].size() == 4);
    CHECK(report["checkpoint_hash"] == checkpoint_hash(out / "checkpoint"));
    const std::string hash = report["checkpoint_hash"];
    CHECK(hash.size() == 40);
    CHECK(hash.find_first_not_of("0123456789abcdef") == std::string::npos);
    std::istringstream metrics(slurp(out / "metrics.jsonl"));
    std::size_t lines = 0;
    for (std::string l; std::getline(metrics, l); ++lines) {
      json m = json::parse(l);
      CHECK(m["step"] == lines + 1);
      CHECK(std::isfinite(m["l_total"].get<double>()));
    }
    CHECK(lines == 20);
    CHECK(fs::exists(out / "manifest.json"));
    CHECK(fs::exists(out / "report.txt"));

    // eval is read-only and repeatable, and agrees with the report written at training time.
    const auto before = tree(data);
    const auto ckpt_before = tree(out / "checkpoint");
    json ecfg = base;
    ecfg["eval"]["checkpoint"] = (out / "checkpoint").string();
    const fs::path ep = write_config(tmp.path(), "e.json", ecfg);
    REQUIRE(run("eval", ep, 8, tmp.path() / "e1").code == 0);
    REQUIRE(run("eval", ep, 8, tmp.path() / "e2").code == 0);
    CHECK(tree(data) == before);
    CHECK(tree(out / "checkpoint") == ckpt_before);
    json e1 = load_json(tmp.path() / "e1/report.json"), e2 = load_json(tmp.path() / "e2/report.json");
    CHECK(e1["splits"] == e2["splits"]);
    CHECK(e1["splits"]["high"]["map50"] == report["evaluation"]["high"]["map50"]);
  }

  SUBCASE("same seed gives identical metrics and checkpoints") {
    const fs::path cfg = write_config(tmp.path(), "t.json", base);
    REQUIRE(run("train", cfg, 4, tmp.path() / "r1").code == 0);
    REQUIRE(run("train", cfg, 4, tmp.path() / "r2").code == 0);
    REQUIRE(run("train", cfg, 5, tmp.path() / "r3").code == 0);
    CHECK(slurp(tmp.path() / "r1/metrics.jsonl") == slurp(tmp.path() / "r2/metrics.jsonl"));
    CHECK(checkpoint_hash(tmp.path() / "r1/checkpoint") == checkpoint_hash(tmp.path() / "r2/checkpoint"));
    CHECK(checkpoint_hash(tmp.path() / "r1/checkpoint") != checkpoint_hash(tmp.path() / "r3/checkpoint"));
  }

  SUBCASE("lr = 0 leaves the initial parameters") {
    json c = base;
    c["train"]["lr"] = 0.0;
    REQUIRE(run("train", write_config(tmp.path(), "t.json", c), 9, tmp.path() / "r").code == 0);
    LoadedCheckpoint ck = load_checkpoint(tmp.path() / "r/checkpoint");
    DetectorConfig m = ck.config;
    CHECK(m.seed == 9);
    CHECK(params_equal(ck.params, DetectorParams::init(m)));
  }

  SUBCASE("an untrained model scores near zero") {
    json c = base;
    c["train"]["lr"] = 0.0;
    c["train"]["steps"] = 1;
    REQUIRE(run("train", write_config(tmp.path(), "t.json", c), 2, tmp.path() / "r").code == 0);
    json report = load_json(tmp.path() / "r/report.json");
    for (const auto& [split, r] : report["evaluation"].items()) CHECK(r["map50"].get<double>() < 0.05);
  }

  SUBCASE("evaluating with a mismatched architecture exits 2") {
    REQUIRE(run("train", write_config(tmp.path(), "t.json", base), 1, tmp.path() / "r").code == 0);
    json c = base;
    c["train"]["model"]["model_dim"] = 48;
    c["eval"]["checkpoint"] = (tmp.path() / "r/checkpoint").string();
    Run r = run("eval", write_config(tmp.path(), "e.json", c), 1, tmp.path() / "e");
    CHECK(r.code == 2);
    CHECK(r.err.find("architecture") != std::string::npos);
    CHECK(run("eval", write_config(tmp.path(), "e2.json", base), 1, tmp.path() / "e2", tmp.path() / "nowhere").code == 2);
  }

  SUBCASE("a corrupted checkpoint blob is rejected") {
    REQUIRE(run("train", write_config(tmp.path(), "t.json", base), 1, tmp.path() / "r").code == 0);
    for (const auto& e : fs::directory_iterator(tmp.path() / "r/checkpoint")) {
      if (e.path().extension() != ".bin") continue;
      std::fstream f(e.path(), std::ios::in | std::ios::out | std::ios::binary);
      f.seekp(9);
      f.put('\x7f');
      break;
    }
    CHECK_THROWS_AS(load_checkpoint(tmp.path() / "r/checkpoint"), IoError);
    CHECK(run("eval", write_config(tmp.path(), "e.json", base), 1, tmp.path() / "e", tmp.path() / "r/checkpoint").code == 2);
  }

  SUBCASE("a diverging run stops, keeps finite parameters and exits 1") {
    json c = base;
    c["train"]["lr"] = 1e30;
    c["train"]["max_grad_norm"] = 0.0;
    c["train"]["steps"] = 50;
    Run r = run("train", write_config(tmp.path(), "t.json", c), 3, tmp.path() / "r");
    CHECK(r.code == 1);
    CHECK(r.err.find("diverged") != std::string::npos);
    json report = load_json(tmp.path() / "r/report.json");
    CHECK(report["status"] == "diverged");
    REQUIRE(report["divergence"].is_object());
    CHECK(report["steps_completed"].get<std::size_t>() < 50);
    CHECK(report["divergence"]["step"].get<std::size_t>() == report["steps_completed"].get<std::size_t>() + 1);
    CHECK(params_finite(load_checkpoint(tmp.path() / "r/checkpoint").params));
    CHECK(slurp(tmp.path() / "r/report.txt").find("non-finite loss") != std::string::npos);
  }

  SUBCASE("fog-stream variants fail fast without depth maps") {
    const fs::path nodepth = tmp.path() / "nodepth";
    json g = {{"generate", small_generate(4)}};
    g["generate"]["write_depth"] = false;
    REQUIRE(run("generate", write_config(tmp.path(), "g.json", g), 3, nodepth).code == 0);
    for (const char* v : {"WAA", "WFE"}) {
      json c = base;
      c["train"]["dataset"] = (nodepth / "high").string();
      c["train"]["model"]["variant"] = v;
      const fs::path out = tmp.path() / (std::string("ff_") + v);
      Run r = run("train", write_config(tmp.path(), "t.json", c), 3, out);
      CHECK(r.code == 2);
      CHECK(r.err.find("fog stream") != std::string::npos);
      CHECK_FALSE(fs::exists(out / "metrics.jsonl"));
    }
  }
}

TEST_CASE("a baseline overfits two samples") {
  TempDir tmp("harness_overfit");
  const fs::path data = tmp.path() / "data";
  json g = {{"generate", {{"count", 2}, {"splits", {{{"name", "clear"}, {"betas", {0.0}}}}}}}};
  REQUIRE(run("generate", write_config(tmp.path(), "g.json", g), 11, data).code == 0);
  json c = {{"train",
             {{"dataset", (data / "clear").string()},
              {"model", {{"variant", "baseline"}}},
              {"steps", 200},
              {"batch_size", 2}}}};
  REQUIRE(run("train", write_config(tmp.path(), "t.json", c), 11, tmp.path() / "r").code == 0);
  std::istringstream metrics(slurp(tmp.path() / "r/metrics.jsonl"));
  std::vector<double> loss;
  for (std::string l; std::getline(metrics, l);) loss.push_back(json::parse(l)["l_obj"].get<double>());
  REQUIRE(loss.size() == 200);
  CHECK(loss.back() < 0.5 * loss.front());
}

TEST_CASE("a student cloned from its teacher on clear input starts with zero perceptual loss") {
  TempDir tmp("harness_pl");
  const fs::path data = tmp.path() / "data";
  json g = {{"generate", {{"count", 4}, {"splits", {{{"name", "clear"}, {"betas", {0.0}}}}}}}};
  REQUIRE(run("generate", write_config(tmp.path(), "g.json", g), 2, data).code == 0);
  json c = {{"train",
             {{"dataset", (data / "clear").string()},
              {"model", {{"variant", "PL"}}},
              {"steps", 3},
              {"batch_size", 2},
              {"teacher", {{"steps", 5}}}}}};
  REQUIRE(run("train", write_config(tmp.path(), "t.json", c), 2, tmp.path() / "first").code == 0);
  json report = load_json(tmp.path() / "first/report.json");
  CHECK(report["teacher_checkpoint_hash"].is_string());
  CHECK(fs::exists(tmp.path() / "first/teacher/metrics.jsonl"));

  c["train"]["teacher"] = {{"checkpoint", (tmp.path() / "first/teacher/checkpoint").string()}};
  c["train"]["student_init"] = "teacher";
  REQUIRE(run("train", write_config(tmp.path(), "t2.json", c), 2, tmp.path() / "second").code == 0);
  std::istringstream metrics(slurp(tmp.path() / "second/metrics.jsonl"));
  std::string first_line;
  std::getline(metrics, first_line);
  CHECK(json::parse(first_line)["l_perc"].get<double>() == 0.0);
  CHECK_FALSE(fs::exists(tmp.path() / "second/teacher"));
}

TEST_CASE("verify reports each suite and names a violated invariant") {
  TempDir tmp("harness_verify");
  const fs::path cfg = write_config(
      tmp.path(), "v.json", {{"verify", {{"suites", {"attention.row_stochastic", "fog.monotone_in_beta"}}}}});
  Run ok = run("verify", cfg, 1, tmp.path() / "ok");
  CHECK(ok.code == 0);
  json report = load_json(tmp.path() / "ok/report.json");
  CHECK(report["suites"].size() == 2);

  Run bad = run("verify", cfg, 1, tmp.path() / "bad", std::nullopt, 1e-3);
  CHECK(bad.code == 1);
  CHECK(bad.err.find("attention.row_stochastic") != std::string::npos);
  CHECK(bad.err.find("fog.monotone_in_beta") == std::string::npos);

  const fs::path unknown = write_config(tmp.path(), "u.json", {{"verify", {{"suites", {"no.such_suite"}}}}});
  CHECK(run("verify", unknown, 1, tmp.path() / "u").code == 2);
  CHECK(verify_suites().size() >= 30);
}
