#include "fogdetr/dataset.hpp"

#include <cstdio>
#include <fstream>

namespace fogdetr {

namespace fs = std::filesystem;
using nlohmann::json;

namespace {

json fog_json(const FogParams& f) { return json{{"beta", f.beta}, {"A", f.atmospheric_light}}; }

FogParams fog_from_json(const json& j) {
  FogParams f;
  f.beta = j.at("beta").get<double>();
  f.atmospheric_light = j.value("A", fog_presets::kAtmosphericLight);
  f.validate();
  return f;
}

std::string sample_id(std::size_t i) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "%06zu", i);
  return buf;
}

void ensure_dir(const fs::path& p) {
  std::error_code ec;
  fs::create_directories(p, ec);
  if (ec || !fs::is_directory(p)) throw IoError("cannot create directory " + p.string() + ": " + ec.message());
}

}  // namespace

json annotation_record(const std::string& id, const Annotation& a, const FogParams& fog) {
  json boxes = json::array();
  for (const auto& b : a.boxes) boxes.push_back({b[0], b[1], b[2], b[3]});
  return json{{"id", id}, {"boxes", boxes}, {"labels", a.labels}, {"fog", fog_json(fog)}};
}

Annotation annotation_from_record(const json& record) {
  Annotation a;
  for (const auto& b : record.at("boxes")) {
    a.boxes.emplace_back(b.at(0).get<double>(), b.at(1).get<double>(), b.at(2).get<double>(),
                         b.at(3).get<double>());
  }
  a.labels = record.at("labels").get<std::vector<int>>();
  a.validate();
  return a;
}

json DatasetManifest::to_json() const {
  json levels = json::array();
  for (const auto& f : fog_levels) levels.push_back(fog_json(f));
  json items = json::array();
  for (const auto& s : samples) {
    json item{{"id", s.id}, {"clear", s.clear}, {"foggy", s.foggy}, {"fog", fog_json(s.fog)}};
    if (!s.depth.empty()) item["depth"] = s.depth;
    items.push_back(item);
  }
  return json{{"split", split},          {"count", count},
              {"seed", seed},            {"canvas", {height, width}},
              {"fog_levels", levels},    {"fog_stream", fog_stream},
              {"annotations", "annotations.jsonl"}, {"samples", items}};
}

DatasetManifest DatasetManifest::from_json(const json& j) {
  DatasetManifest m;
  m.split = j.at("split").get<std::string>();
  m.count = j.at("count").get<std::size_t>();
  m.seed = j.at("seed").get<std::uint64_t>();
  m.height = j.at("canvas").at(0).get<Index>();
  m.width = j.at("canvas").at(1).get<Index>();
  for (const auto& f : j.at("fog_levels")) m.fog_levels.push_back(fog_from_json(f));
  m.fog_stream = j.at("fog_stream").get<bool>();
  for (const auto& item : j.at("samples")) {
    SampleRecord s;
    s.id = item.at("id").get<std::string>();
    s.clear = item.at("clear").get<std::string>();
    s.foggy = item.at("foggy").get<std::string>();
    s.depth = item.value("depth", std::string());
    s.fog = fog_from_json(item.at("fog"));
    m.samples.push_back(std::move(s));
  }
  return m;
}

DatasetManifest make_dataset(const fs::path& dir, std::size_t n, const std::vector<FogParams>& fog_levels,
                             std::uint64_t seed, const DatasetOptions& options) {
  if (n < 1) throw SpecError("make_dataset needs n >= 1");
  if (fog_levels.empty()) throw SpecError("make_dataset needs at least one fog level");
  for (const auto& f : fog_levels) f.validate();

  ensure_dir(dir / "clear");
  ensure_dir(dir / "foggy");
  if (options.write_depth) ensure_dir(dir / "depth");

  DatasetManifest manifest;
  manifest.split = options.split;
  manifest.count = n;
  manifest.seed = seed;
  manifest.height = options.height;
  manifest.width = options.width;
  manifest.fog_levels = fog_levels;
  manifest.fog_stream = options.write_depth;

  const Rng root(seed);
  const Rng scenes = root.split("scenes");
  Rng levels = root.split("fog-levels");

  std::ofstream annotations(dir / "annotations.jsonl", std::ios::trunc);
  if (!annotations) throw IoError("cannot write " + (dir / "annotations.jsonl").string());

  for (std::size_t i = 0; i < n; ++i) {
    Rng scene_rng = scenes.split(static_cast<std::uint64_t>(i));
    const SceneSpec spec = random_scene(options.height, options.width, scene_rng, options.scene);
    const RenderedScene scene = render_scene(spec);
    const FogParams fog =
        fog_levels[static_cast<std::size_t>(levels.uniform_int(0, static_cast<std::int64_t>(fog_levels.size()) - 1))];
    const Image foggy = apply_fog(scene.image, scene.depth, fog);

    SampleRecord rec;
    rec.id = sample_id(i);
    rec.clear = "clear/" + rec.id + ".ppm";
    rec.foggy = "foggy/" + rec.id + ".ppm";
    rec.fog = fog;
    write_ppm(dir / rec.clear, scene.image);
    write_ppm(dir / rec.foggy, foggy);
    if (options.write_depth) {
      rec.depth = "depth/" + rec.id + ".bin";
      write_depth(dir / rec.depth, scene.depth);
    }
    annotations << annotation_record(rec.id, scene.annotation, fog).dump() << '\n';
    manifest.samples.push_back(std::move(rec));
  }
  if (!annotations) throw IoError("failed writing annotations.jsonl");

  std::ofstream os(dir / "manifest.json", std::ios::trunc);
  if (!os) throw IoError("cannot write " + (dir / "manifest.json").string());
  os << manifest.to_json().dump(2) << '\n';
  return manifest;
}

DatasetManifest read_manifest(const fs::path& dir) {
  std::ifstream is(dir / "manifest.json");
  if (!is) throw IoError("no manifest.json in " + dir.string());
  try {
    return DatasetManifest::from_json(json::parse(is));
  } catch (const json::exception& e) {
    throw IoError("bad manifest in " + dir.string() + ": " + e.what());
  }
}

std::vector<Sample> load_dataset(const fs::path& dir, const DatasetManifest& manifest) {
  std::ifstream is(dir / "annotations.jsonl");
  if (!is) throw IoError("no annotations.jsonl in " + dir.string());
  std::vector<json> records;
  for (std::string line; std::getline(is, line);) {
    if (!line.empty()) records.push_back(json::parse(line));
  }
  if (records.size() != manifest.samples.size()) {
    throw IoError("annotations.jsonl has " + std::to_string(records.size()) + " records, manifest lists " +
                  std::to_string(manifest.samples.size()));
  }
  std::vector<Sample> samples;
  samples.reserve(records.size());
  for (std::size_t i = 0; i < records.size(); ++i) {
    const auto& rec = manifest.samples[i];
    if (records[i].at("id").get<std::string>() != rec.id) throw IoError("annotation order differs from manifest");
    Sample s;
    s.id = rec.id;
    s.clear = read_ppm(dir / rec.clear);
    s.foggy = read_ppm(dir / rec.foggy);
    if (!rec.depth.empty()) s.depth = read_depth(dir / rec.depth);
    s.annotation = annotation_from_record(records[i]);
    s.fog = rec.fog;
    samples.push_back(std::move(s));
  }
  return samples;
}

}  // namespace fogdetr
