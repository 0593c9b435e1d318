#include "fogdetr/gradcheck.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>

#include "fogdetr/rng.hpp"

namespace fogdetr {

namespace {

double evaluate(const std::function<Tensor()>& f) {
  NoGradScope no_grad;
  Tensor out = f();
  if (out.size() != 1) throw ContractError("gradient_check: function is not scalar-valued");
  double v = out.item();
  if (!std::isfinite(v)) throw EvaluationError("gradient_check: non-finite function value at probe");
  return v;
}

}  // namespace

GradCheckReport gradient_check_report(const std::function<Tensor()>& f, std::vector<Tensor> params,
                                      const GradCheckOptions& options) {
  if (!(options.step >= 1e-6 && options.step <= 1e-4)) {
    throw ContractError("gradient_check: step must lie in [1e-6, 1e-4]");
  }
  for (auto& p : params) {
    if (!p.is_leaf() || !p.requires_grad()) {
      throw ContractError("gradient_check: parameters must be leaves that require gradients");
    }
    p.zero_grad();
  }

  std::vector<Matrix> analytic;
  {
    Tape tape;
    Tape::Scope scope(tape);
    Tensor out = f();
    if (out.size() != 1) throw ContractError("gradient_check: function is not scalar-valued");
    if (!std::isfinite(out.item())) {
      throw EvaluationError("gradient_check: non-finite function value at probe");
    }
    backward(out, tape);
  }
  for (auto& p : params) {
    analytic.push_back(p.grad());
    p.zero_grad();
  }

  GradCheckReport report;
  Rng rng(options.seed);
  const double h = options.step;
  const double f0 = evaluate(f);
  for (std::size_t k = 0; k < params.size(); ++k) {
    Matrix& value = params[k].mutable_value();
    std::vector<Index> coords(static_cast<std::size_t>(value.size()));
    std::iota(coords.begin(), coords.end(), Index{0});
    if (options.coords_per_param && *options.coords_per_param < value.size()) {
      for (Index i = 0; i < *options.coords_per_param; ++i) {
        auto j = static_cast<std::size_t>(rng.uniform_int(i, value.size() - 1));
        std::swap(coords[static_cast<std::size_t>(i)], coords[j]);
      }
      coords.resize(static_cast<std::size_t>(*options.coords_per_param));
    }
    for (Index c : coords) {
      double& slot = value.data()[c];
      const double saved = slot;
      slot = saved + h;
      const double fp = evaluate(f);
      slot = saved - h;
      const double fm = evaluate(f);
      slot = saved;
      const double central = (fp - fm) / (2 * h);
      const double one_sided_gap = std::abs((fp - f0) - (f0 - fm)) / h;
      if (one_sided_gap > options.kink_tolerance * std::max(1.0, std::abs(central))) {
        ++report.skipped_kinks;
        continue;
      }
      const double a = analytic[k].data()[c];
      const double err = std::abs(a - central) / std::max(1.0, std::abs(a));
      report.max_relative_error = std::max(report.max_relative_error, err);
      ++report.checked;
    }
  }
  return report;
}

double gradient_check(const std::function<Tensor()>& f, std::vector<Tensor> params, double step) {
  GradCheckOptions options;
  options.step = step;
  return gradient_check_report(f, std::move(params), options).max_relative_error;
}

}  // namespace fogdetr
