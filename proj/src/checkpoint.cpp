#include "fogdetr/checkpoint.hpp"

#include <openssl/evp.h>

#include <cstdio>
#include <fstream>
#include <map>
#include <memory>
#include <sstream>

#include "fogdetr/serialize.hpp"

namespace fogdetr {

namespace fs = std::filesystem;

namespace {

constexpr const char* kFormat = "fogdetr-checkpoint";

std::string read_bytes(const fs::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot read " + path.string());
  std::ostringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

void write_bytes(const fs::path& path, const std::string& bytes) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw IoError("cannot write " + path.string());
  out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
  if (!out) throw IoError("write failed for " + path.string());
}

std::string blob_name(const std::string& param) { return param + ".bin"; }

// The fields that decide parameter shapes.
nlohmann::json architecture(const DetectorConfig& c) {
  nlohmann::json j = c.to_json();
  j.erase("seed");
  j.erase("loss");
  j.erase("squash_weather");
  j.erase("fog_axis");
  return j;
}

}  // namespace

std::string git_blob_hash(std::string_view bytes) {
  const std::string header = "blob " + std::to_string(bytes.size()) + '\0';
  std::unique_ptr<EVP_MD_CTX, decltype(&EVP_MD_CTX_free)> ctx(EVP_MD_CTX_new(), EVP_MD_CTX_free);
  unsigned char digest[EVP_MAX_MD_SIZE];
  unsigned int length = 0;
  if (!ctx || EVP_DigestInit_ex(ctx.get(), EVP_sha1(), nullptr) != 1 ||
      EVP_DigestUpdate(ctx.get(), header.data(), header.size()) != 1 ||
      EVP_DigestUpdate(ctx.get(), bytes.data(), bytes.size()) != 1 ||
      EVP_DigestFinal_ex(ctx.get(), digest, &length) != 1) {
    throw IoError("sha1 digest failed");
  }
  std::string hex;
  char buf[3];
  for (unsigned int i = 0; i < length; ++i) {
    const unsigned char b = digest[i];
    std::snprintf(buf, sizeof buf, "%02x", b);
    hex += buf;
  }
  return hex;
}

std::string file_hash(const fs::path& path) { return git_blob_hash(read_bytes(path)); }

nlohmann::json save_checkpoint(const fs::path& dir, const DetectorConfig& cfg, const DetectorParams& params) {
  std::error_code ec;
  fs::create_directories(dir, ec);
  if (ec) throw IoError("cannot create checkpoint directory " + dir.string() + ": " + ec.message());
  nlohmann::json tensors = nlohmann::json::array();
  for (const auto& [name, t] : params.named_parameters()) {
    std::ostringstream os;
    write_tensor(os, t);
    const std::string bytes = os.str();
    write_bytes(dir / blob_name(name), bytes);
    tensors.push_back({{"name", name}, {"file", blob_name(name)}, {"shape", t.shape()}, {"hash", git_blob_hash(bytes)}});
  }
  nlohmann::json manifest = {{"format", kFormat}, {"version", 1}, {"model", cfg.to_json()}, {"tensors", tensors}};
  write_bytes(dir / "manifest.json", manifest.dump(2) + "\n");
  return manifest;
}

LoadedCheckpoint load_checkpoint(const fs::path& dir) {
  nlohmann::json manifest;
  try {
    manifest = nlohmann::json::parse(read_bytes(dir / "manifest.json"));
  } catch (const nlohmann::json::exception& e) {
    throw IoError("checkpoint manifest in " + dir.string() + " is not valid JSON: " + e.what());
  }
  if (manifest.value("format", std::string()) != kFormat) {
    throw IoError(dir.string() + " is not a checkpoint directory");
  }
  LoadedCheckpoint out;
  out.config = DetectorConfig::from_json(manifest.at("model"));
  out.params = DetectorParams::init(out.config);

  std::map<std::string, nlohmann::json> entries;
  for (const auto& e : manifest.at("tensors")) entries[e.at("name").get<std::string>()] = e;
  auto named = out.params.named_parameters();
  if (named.size() != entries.size()) {
    throw ArchitectureError("checkpoint holds " + std::to_string(entries.size()) + " tensors, model expects " +
                            std::to_string(named.size()));
  }
  for (auto& [name, t] : named) {
    auto it = entries.find(name);
    if (it == entries.end()) throw ArchitectureError("checkpoint lacks parameter " + name);
    const std::string bytes = read_bytes(dir / it->second.at("file").get<std::string>());
    if (git_blob_hash(bytes) != it->second.at("hash").get<std::string>()) {
      throw IoError("checkpoint blob for " + name + " does not match its recorded hash");
    }
    std::istringstream is(bytes);
    Tensor stored = read_tensor(is);
    if (stored.shape() != t.shape()) {
      throw ArchitectureError("parameter " + name + " has shape " + shape_string(stored.shape()) + ", model expects " +
                              shape_string(t.shape()));
    }
    t.mutable_value() = stored.value();
  }
  return out;
}

LoadedCheckpoint load_checkpoint(const fs::path& dir, const DetectorConfig& expected) {
  LoadedCheckpoint out = load_checkpoint(dir);
  if (architecture(out.config) != architecture(expected)) {
    throw ArchitectureError("checkpoint architecture " + architecture(out.config).dump() +
                            " does not match the configured " + architecture(expected).dump());
  }
  return out;
}

std::string checkpoint_hash(const fs::path& dir) { return file_hash(dir / "manifest.json"); }

}  // namespace fogdetr
