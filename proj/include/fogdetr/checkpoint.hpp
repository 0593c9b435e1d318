#pragma once

#include <filesystem>
#include <string>
#include <string_view>

#include <json.hpp>

#include "fogdetr/detector.hpp"

namespace fogdetr {

/// Git object id of a blob: sha1("blob <size>\0" + bytes), lower-case hex.
std::string git_blob_hash(std::string_view bytes);
std::string file_hash(const std::filesystem::path& path);

/// Writes manifest.json plus one .bin blob per named parameter under dir.
/// Returns the manifest, which records every blob's hash.
nlohmann::json save_checkpoint(const std::filesystem::path& dir, const DetectorConfig& cfg,
                               const DetectorParams& params);

struct LoadedCheckpoint {
  DetectorConfig config;
  DetectorParams params;
};

/// Verifies blob hashes; throws IoError on corruption.
LoadedCheckpoint load_checkpoint(const std::filesystem::path& dir);

/// As above, but throws ArchitectureError unless the stored architecture
/// matches expected (seed and loss weights may differ).
LoadedCheckpoint load_checkpoint(const std::filesystem::path& dir, const DetectorConfig& expected);

/// Hash of the checkpoint manifest, which pins every blob.
std::string checkpoint_hash(const std::filesystem::path& dir);

}  // namespace fogdetr
