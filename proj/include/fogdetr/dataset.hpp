#pragma once

#include <cstdint>
#include <filesystem>
#include <optional>
#include <string>
#include <vector>

#include <json.hpp>

#include "fogdetr/fog.hpp"
#include "fogdetr/scene.hpp"
#include "fogdetr/serialize.hpp"

namespace fogdetr {

// Binary PPM (P6, 8-bit). Encoding rounds to the nearest of 256 levels.
std::string encode_ppm(const Image& image);
Image decode_ppm(std::string_view bytes);
void write_ppm(const std::filesystem::path& path, const Image& image);
Image read_ppm(const std::filesystem::path& path);

/// Depth maps use the flat tensor layout with shape {H, W}.
void write_depth(const std::filesystem::path& path, const DepthMap& depth);
DepthMap read_depth(const std::filesystem::path& path);

nlohmann::json annotation_record(const std::string& id, const Annotation& annotation,
                                 const FogParams& fog);
Annotation annotation_from_record(const nlohmann::json& record);

struct DatasetOptions {
  std::string split = "train";
  Index height = 32;
  Index width = 32;
  SceneOptions scene;
  bool write_depth = true;
};

struct SampleRecord {
  std::string id;
  std::string clear;
  std::string foggy;
  std::string depth;  // empty when the fog stream is not stored
  FogParams fog;
};

struct DatasetManifest {
  std::string split;
  std::size_t count = 0;
  std::uint64_t seed = 0;
  Index height = 0;
  Index width = 0;
  std::vector<FogParams> fog_levels;
  bool fog_stream = false;
  std::vector<SampleRecord> samples;

  nlohmann::json to_json() const;
  static DatasetManifest from_json(const nlohmann::json& j);
};

struct Sample {
  std::string id;
  Image clear;
  Image foggy;
  std::optional<DepthMap> depth;
  Annotation annotation;
  FogParams fog;
};

/// Renders n scenes, fogs each with a level drawn uniformly from fog_levels
/// and writes clear/, foggy/, depth/, annotations.jsonl and manifest.json
/// under dir.
DatasetManifest make_dataset(const std::filesystem::path& dir, std::size_t n,
                             const std::vector<FogParams>& fog_levels, std::uint64_t seed,
                             const DatasetOptions& options = {});

DatasetManifest read_manifest(const std::filesystem::path& dir);
std::vector<Sample> load_dataset(const std::filesystem::path& dir, const DatasetManifest& manifest);

}  // namespace fogdetr
