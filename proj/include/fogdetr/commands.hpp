#pragma once

#include <cstdint>
#include <filesystem>
#include <optional>
#include <ostream>
#include <string>
#include <vector>

#include <json.hpp>

#include "fogdetr/dataset.hpp"
#include "fogdetr/train.hpp"
#include "fogdetr/verify.hpp"

namespace fogdetr {

/// One generated split: its fog levels and, optionally, its own size and
/// scene seed. Splits sharing a scene seed render the same scenes.
struct SplitSpec {
  std::string name;
  std::vector<double> betas;
  std::size_t count = 0;                   // 0 uses GenerateConfig::count
  std::optional<std::uint64_t> scene_seed;  // run seed when absent
};

struct GenerateConfig {
  std::size_t count = 200;
  std::vector<SplitSpec> splits{{"clear", {0.0}, 0, std::nullopt},
                                {"low", {fog_presets::kLow}, 0, std::nullopt},
                                {"mid", {fog_presets::kMid}, 0, std::nullopt},
                                {"high", {fog_presets::kHigh}, 0, std::nullopt}};
  double atmospheric_light = fog_presets::kAtmosphericLight;
  Index image_size = 32;
  bool write_depth = true;
  SceneOptions scene;
};

struct EvalConfig {
  std::optional<std::filesystem::path> checkpoint;
  std::optional<std::filesystem::path> data_root;  // holds one dataset directory per split
  std::vector<std::string> splits{"clear", "low", "mid", "high"};
  std::string model_name;  // table label; the variant name when empty
};

struct VerifyConfig {
  double softmax_fault = 0.0;
  std::vector<std::string> suites;
};

/// A run's whole configuration: one JSON document with optional sections
/// generate / train / eval / verify. Paths are resolved against the
/// directory of the config file.
struct RunConfig {
  std::optional<std::uint64_t> seed;
  GenerateConfig generate;
  TrainConfig train;
  bool model_given = false;  // train.model present in the document
  EvalConfig eval;
  VerifyConfig verify;

  /// Every field, defaults included.
  nlohmann::json to_json() const;
  static RunConfig from_json(const nlohmann::json& j, const std::filesystem::path& base_dir = {});
  static RunConfig load(const std::filesystem::path& file);
};

void cmd_generate(const RunConfig& cfg, std::uint64_t seed, const std::filesystem::path& out);
TrainResult cmd_train(const RunConfig& cfg, std::uint64_t seed, const std::filesystem::path& out,
                      const ProgressFn& progress = {});
/// Per-split reports; reads the checkpoint and datasets only.
nlohmann::json cmd_eval(const RunConfig& cfg, std::uint64_t seed, const std::filesystem::path& out);
VerifyReport cmd_verify(const RunConfig& cfg, std::uint64_t seed, const std::filesystem::path& out,
                        const ProgressFn& progress = {});

struct CommandLine {
  std::string command;
  std::optional<std::filesystem::path> config;
  std::optional<std::uint64_t> seed;
  std::filesystem::path out;
  std::optional<std::filesystem::path> checkpoint;
  std::optional<double> softmax_fault;
  bool quiet = false;
};

/// Runs a subcommand and maps the outcome to an exit code: 0 success,
/// 1 invariant failure or divergence, 2 configuration error.
int run_command(const CommandLine& line, std::ostream& log, std::ostream& err);

}  // namespace fogdetr
