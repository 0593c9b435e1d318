#include "fogdetr/scene.hpp"

#include <algorithm>
#include <cmath>
#include <string>

namespace fogdetr {

namespace {

Index snap(double v) { return static_cast<Index>(std::lround(v)); }

int triangle_width(int size) { return size % 2 == 1 ? size : size - 1; }
int bar_height(int size) { return std::max(2, size / 3); }
int cross_thickness(int size) { return std::max(2, size / 3); }

bool overlaps(const PixelRect& a, const PixelRect& b, Index margin) {
  return a.left < b.left + b.width + margin && b.left < a.left + a.width + margin &&
         a.top < b.top + b.height + margin && b.top < a.top + a.height + margin;
}

}  // namespace

double background_depth(Index y, Index height) {
  if (height <= 1) return 1.0;
  return 10.0 - 9.0 * static_cast<double>(y) / static_cast<double>(height - 1);
}

PixelRect object_extent(const SceneObject& o) {
  const int s = o.size;
  switch (o.kind) {
    case ShapeKind::circle: {
      const Index r = s / 2;
      return {snap(o.center.x()) - r, snap(o.center.y()) - r, 2 * r, 2 * r};
    }
    case ShapeKind::square:
      return {snap(o.center.x() - s / 2.0), snap(o.center.y() - s / 2.0), s, s};
    case ShapeKind::triangle: {
      const int w = triangle_width(s);
      return {snap(o.center.x() - w / 2.0), snap(o.center.y() - s / 2.0), w, s};
    }
    case ShapeKind::bar: {
      const int h = bar_height(s);
      return {snap(o.center.x() - s / 2.0), snap(o.center.y() - h / 2.0), s, h};
    }
    case ShapeKind::cross:
      return {snap(o.center.x() - s / 2.0), snap(o.center.y() - s / 2.0), s, s};
  }
  throw SpecError("unknown shape kind");
}

bool object_covers(const SceneObject& o, Index x, Index y) {
  const PixelRect r = object_extent(o);
  if (x < r.left || x >= r.left + r.width || y < r.top || y >= r.top + r.height) return false;
  const double px = static_cast<double>(x) + 0.5;
  const double py = static_cast<double>(y) + 0.5;
  switch (o.kind) {
    case ShapeKind::circle: {
      const double radius = static_cast<double>(r.width) / 2.0;
      const double cx = static_cast<double>(r.left) + radius;
      const double cy = static_cast<double>(r.top) + radius;
      return (px - cx) * (px - cx) + (py - cy) * (py - cy) <= radius * radius;
    }
    case ShapeKind::square:
    case ShapeKind::bar:
      return true;
    case ShapeKind::triangle: {
      // Apex at the top edge, centred on a pixel column; base on the bottom edge.
      const double apex_x = static_cast<double>(r.left) + r.width / 2.0;
      const double half = (r.width / 2.0) * (py - static_cast<double>(r.top)) / r.height;
      return std::abs(px - apex_x) <= half + 1e-12;
    }
    case ShapeKind::cross: {
      const Index t = cross_thickness(o.size);
      const Index band = (r.width - t) / 2;
      const bool in_row = y >= r.top + band && y < r.top + band + t;
      const bool in_col = x >= r.left + band && x < r.left + band + t;
      return in_row || in_col;
    }
  }
  return false;
}

void SceneSpec::validate() const {
  if (height < 1 || width < 1) throw SpecError("scene canvas must be non-empty");
  if (objects.empty()) throw SpecError("scene needs at least one object");
  for (std::size_t i = 0; i < objects.size(); ++i) {
    const auto& o = objects[i];
    const int kind = static_cast<int>(o.kind);
    if (kind < 0 || kind >= kCategoryCount) throw SpecError("object category out of range");
    if (o.size < 2) throw SpecError("object size must be >= 2 pixels");
    if (!(o.depth >= 0.0)) throw SpecError("object depth must be >= 0");
    const PixelRect r = object_extent(o);
    if (r.left < 0 || r.top < 0 || r.left + r.width > width || r.top + r.height > height) {
      throw SpecError("object " + std::to_string(i) + " extends outside the " +
                      std::to_string(height) + "x" + std::to_string(width) + " canvas");
    }
  }
}

void Annotation::validate() const {
  if (boxes.size() != labels.size()) throw SpecError("annotation boxes/labels length mismatch");
  for (std::size_t i = 0; i < boxes.size(); ++i) {
    const Box& b = boxes[i];
    if ((b.array() < 0.0).any() || (b.array() > 1.0).any() || b[2] <= 0 || b[3] <= 0) {
      throw SpecError("annotation box " + std::to_string(i) + " outside [0,1] or empty");
    }
    if (labels[i] < 0 || labels[i] >= kCategoryCount) throw SpecError("annotation label out of range");
  }
}

RenderedScene render_scene(const SceneSpec& spec) {
  spec.validate();
  const Index H = spec.height, W = spec.width;
  RenderedScene out{Image(H, W), DepthMap(H, W), {}};

  for (Index y = 0; y < H; ++y) {
    const double t = H > 1 ? static_cast<double>(y) / static_cast<double>(H - 1) : 0.0;
    const Eigen::Vector3d c = (1 - t) * spec.background_top + t * spec.background_bottom;
    const double d = background_depth(y, H);
    for (Index x = 0; x < W; ++x) {
      for (Index ch = 0; ch < 3; ++ch) out.image.at(y, x, ch) = c[ch];
      out.depth.at(y, x) = d;
    }
  }

  for (const auto& o : spec.objects) {
    const PixelRect r = object_extent(o);
    for (Index y = r.top; y < r.top + r.height; ++y) {
      for (Index x = r.left; x < r.left + r.width; ++x) {
        if (!object_covers(o, x, y)) continue;
        for (Index ch = 0; ch < 3; ++ch) out.image.at(y, x, ch) = o.color[ch];
        out.depth.at(y, x) = o.depth;
      }
    }
    out.annotation.boxes.emplace_back((r.left + r.width / 2.0) / static_cast<double>(W),
                                      (r.top + r.height / 2.0) / static_cast<double>(H),
                                      r.width / static_cast<double>(W),
                                      r.height / static_cast<double>(H));
    out.annotation.labels.push_back(static_cast<int>(o.kind));
  }

  if (spec.noise > 0) {
    Rng rng(spec.seed);
    Rng noise = rng.split("pixel-noise");
    for (Index i = 0; i < out.image.pixels.size(); ++i) {
      double& v = out.image.pixels.data()[i];
      v = std::clamp(v + noise.normal(0.0, spec.noise), 0.0, 1.0);
    }
  }
  return out;
}

SceneSpec random_scene(Index height, Index width, Rng& rng, const SceneOptions& options) {
  SceneSpec spec;
  spec.height = height;
  spec.width = width;
  spec.seed = rng.next_u64();
  for (int c = 0; c < 3; ++c) {
    spec.background_top[c] = rng.uniform(0.25, 0.55);
    spec.background_bottom[c] = rng.uniform(0.05, 0.3);
  }

  const int count = static_cast<int>(rng.uniform_int(options.min_objects, options.max_objects));
  std::vector<PixelRect> placed;
  for (int i = 0; i < count; ++i) {
    for (int attempt = 0; attempt < 200; ++attempt) {
      SceneObject o;
      o.kind = static_cast<ShapeKind>(rng.uniform_int(0, kCategoryCount - 1));
      o.size = static_cast<int>(rng.uniform_int(options.min_size, options.max_size));
      o.center = {rng.uniform(0, static_cast<double>(width)), rng.uniform(0, static_cast<double>(height))};
      o.depth = rng.uniform(2.0, 9.0);
      // Bright, saturated colours stand apart from the muted background.
      for (int c = 0; c < 3; ++c) o.color[c] = rng.uniform(0.0, 1.0);
      o.color[rng.uniform_int(0, 2)] = rng.uniform(0.8, 1.0);
      const PixelRect r = object_extent(o);
      if (r.left < 0 || r.top < 0 || r.left + r.width > width || r.top + r.height > height) continue;
      bool clash = false;
      for (const auto& p : placed) clash = clash || overlaps(r, p, 1);
      if (clash) continue;
      placed.push_back(r);
      spec.objects.push_back(o);
      break;
    }
  }
  if (spec.objects.empty()) throw SpecError("random_scene could not place any object");
  return spec;
}

}  // namespace fogdetr
