#pragma once

#include <Eigen/Core>

#include <cmath>
#include <stdexcept>
#include <string>

#include "fogdetr/tensor.hpp"

namespace fogdetr {

class ParameterError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

/// Row-major RGB image, one pixel per row, values in [0, 1].
template <typename Scalar>
struct ImageT {
  using Pixels = Eigen::Array<Scalar, Eigen::Dynamic, 3, Eigen::RowMajor>;

  Index height = 0;
  Index width = 0;
  Pixels pixels;

  ImageT() = default;
  ImageT(Index h, Index w) : height(h), width(w), pixels(Pixels::Zero(h * w, 3)) {}

  Scalar& at(Index y, Index x, Index c) { return pixels(y * width + x, c); }
  Scalar at(Index y, Index x, Index c) const { return pixels(y * width + x, c); }
};

/// Per-pixel scene depth, row-major, non-negative.
template <typename Scalar>
struct DepthMapT {
  using Values = Eigen::Array<Scalar, Eigen::Dynamic, 1>;

  Index height = 0;
  Index width = 0;
  Values depth;

  DepthMapT() = default;
  DepthMapT(Index h, Index w) : height(h), width(w), depth(Values::Zero(h * w)) {}

  Scalar& at(Index y, Index x) { return depth(y * width + x); }
  Scalar at(Index y, Index x) const { return depth(y * width + x); }
};

using Image = ImageT<double>;
using DepthMap = DepthMapT<double>;

struct FogParams {
  double beta = 0.0;
  double atmospheric_light = 0.9;

  void validate() const {
    if (!(beta >= 0.0) || !std::isfinite(beta)) {
      throw ParameterError("fog beta must be finite and >= 0, got " + std::to_string(beta));
    }
    if (!(atmospheric_light >= 0.0 && atmospheric_light <= 1.0)) {
      throw ParameterError("atmospheric light must lie in [0, 1], got " +
                           std::to_string(atmospheric_light));
    }
  }
};

/// Named severity presets, in scattering per depth unit.
namespace fog_presets {
inline constexpr double kLow = 0.04;
inline constexpr double kMid = 0.06;
inline constexpr double kHigh = 0.08;
inline constexpr double kAtmosphericLight = 0.9;
}  // namespace fog_presets

/// exp(-beta * d) per element.
template <typename Derived>
auto transmission(const Eigen::ArrayBase<Derived>& depth, typename Derived::Scalar beta) {
  if (!(beta >= 0)) throw ParameterError("transmission: beta must be >= 0");
  return (depth * (-beta)).exp();
}

template <typename Scalar>
typename DepthMapT<Scalar>::Values transmission(const DepthMapT<Scalar>& depth, Scalar beta) {
  return transmission(depth.depth, beta);
}

/// 1 - exp(-beta * d): the fraction of each pixel made of airlight.
template <typename Scalar>
typename DepthMapT<Scalar>::Values fog_density(const DepthMapT<Scalar>& depth, Scalar beta) {
  return Scalar(1) - transmission(depth.depth, beta);
}

/// Atmospheric scattering: I_s * t + A * (1 - t), t = exp(-beta * d),
/// clamped to [0, 1].
template <typename Scalar>
ImageT<Scalar> apply_fog(const ImageT<Scalar>& clear, const DepthMapT<Scalar>& depth,
                         const FogParams& params) {
  params.validate();
  if (clear.height != depth.height || clear.width != depth.width) {
    throw DimensionError("apply_fog: image [" + std::to_string(clear.height) + "x" +
                         std::to_string(clear.width) + "] vs depth [" +
                         std::to_string(depth.height) + "x" + std::to_string(depth.width) + "]");
  }
  const Scalar a = static_cast<Scalar>(params.atmospheric_light);
  const auto t = transmission(depth.depth, static_cast<Scalar>(params.beta)).eval();
  ImageT<Scalar> out(clear.height, clear.width);
  out.pixels = (clear.pixels.colwise() * t + (a * (Scalar(1) - t)).replicate(1, 3))
                   .max(Scalar(0))
                   .min(Scalar(1));
  return out;
}

}  // namespace fogdetr
