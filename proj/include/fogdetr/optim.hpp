#pragma once

#include <vector>

#include "fogdetr/tensor.hpp"

namespace fogdetr {

struct SgdOptions {
  double lr = 0.01;
  double momentum = 0.9;
  double max_grad_norm = 0.0;  // global norm clip; 0 disables
};

/// Heavy-ball SGD: v <- momentum * v + g; p <- p - lr * v.
class Sgd {
 public:
  Sgd(std::vector<Tensor> params, SgdOptions options);

  /// Applies the accumulated gradients, then clears them.
  void step();
  const SgdOptions& options() const { return options_; }
  double last_grad_norm() const { return last_norm_; }

 private:
  std::vector<Tensor> params_;
  std::vector<Matrix> velocity_;
  SgdOptions options_;
  double last_norm_ = 0.0;
};

}  // namespace fogdetr
