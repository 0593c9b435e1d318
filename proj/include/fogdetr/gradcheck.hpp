#pragma once

#include <cstdint>
#include <functional>
#include <optional>
#include <vector>

#include "fogdetr/tensor.hpp"

namespace fogdetr {

struct GradCheckOptions {
  double step = 1e-6;
  /// Check a random subset of coordinates per parameter instead of all.
  std::optional<Index> coords_per_param;
  std::uint64_t seed = 0;
  /// A coordinate whose one-sided differences disagree by more than this
  /// (relative) straddles a kink of a piecewise-linear op and is skipped.
  double kink_tolerance = 1e-2;
};

struct GradCheckReport {
  double max_relative_error = 0.0;
  std::size_t checked = 0;
  std::size_t skipped_kinks = 0;
};

/// Compares reverse-mode gradients of a scalar function against central
/// differences. The error per coordinate is
/// |analytic - numeric| / max(1, |analytic|).
GradCheckReport gradient_check_report(const std::function<Tensor()>& f, std::vector<Tensor> params,
                                      const GradCheckOptions& options = {});

double gradient_check(const std::function<Tensor()>& f, std::vector<Tensor> params, double step);

}  // namespace fogdetr
