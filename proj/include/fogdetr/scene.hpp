#pragma once

#include <Eigen/Core>

#include <array>
#include <cstdint>
#include <stdexcept>
#include <string_view>
#include <vector>

#include "fogdetr/fog.hpp"
#include "fogdetr/rng.hpp"

namespace fogdetr {

class SpecError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

/// Synthetic object categories. Five of them, one per detection class.
enum class ShapeKind : int { circle = 0, square = 1, triangle = 2, bar = 3, cross = 4 };

inline constexpr int kCategoryCount = 5;
inline constexpr std::array<std::string_view, kCategoryCount> kCategoryNames = {
    "circle", "square", "triangle", "bar", "cross"};

using Box = Eigen::Vector4d;  // (cx, cy, w, h), normalized

/// Integer pixel rectangle [left, left + width) x [top, top + height).
struct PixelRect {
  Index left = 0;
  Index top = 0;
  Index width = 0;
  Index height = 0;
};

struct SceneObject {
  ShapeKind kind = ShapeKind::square;
  Eigen::Vector3d color = Eigen::Vector3d::Constant(0.5);
  Eigen::Vector2d center = Eigen::Vector2d::Zero();  // pixels (x, y)
  int size = 8;                                      // pixels
  double depth = 5.0;
};

struct SceneSpec {
  Index height = 32;
  Index width = 32;
  std::vector<SceneObject> objects;
  Eigen::Vector3d background_top = Eigen::Vector3d(0.3, 0.35, 0.45);
  Eigen::Vector3d background_bottom = Eigen::Vector3d(0.15, 0.15, 0.1);
  double noise = 0.02;
  std::uint64_t seed = 0;

  void validate() const;
};

struct Annotation {
  std::vector<Box> boxes;
  std::vector<int> labels;

  std::size_t size() const { return labels.size(); }
  void validate() const;
};

struct RenderedScene {
  Image image;
  DepthMap depth;
  Annotation annotation;
};

struct SceneOptions {
  int min_objects = 1;
  int max_objects = 3;
  int min_size = 6;
  int max_size = 12;
};

/// Depth of the background at row y: a ramp from 10 (top) to 1 (bottom).
double background_depth(Index y, Index height);

/// Pixel footprint bounds of an object after snapping its geometry to the
/// pixel grid.
PixelRect object_extent(const SceneObject& object);

/// Whether the pixel centred at (x + 0.5, y + 0.5) belongs to the object.
bool object_covers(const SceneObject& object, Index x, Index y);

RenderedScene render_scene(const SceneSpec& spec);

/// Non-overlapping random layout on the given canvas.
SceneSpec random_scene(Index height, Index width, Rng& rng, const SceneOptions& options = {});

}  // namespace fogdetr
