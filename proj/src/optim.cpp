#include "fogdetr/optim.hpp"

#include <cmath>

namespace fogdetr {

Sgd::Sgd(std::vector<Tensor> params, SgdOptions options) : params_(std::move(params)), options_(options) {
  if (!(options_.lr >= 0) || !(options_.momentum >= 0 && options_.momentum < 1) || !(options_.max_grad_norm >= 0)) {
    throw ContractError("Sgd: need lr >= 0, momentum in [0, 1) and max_grad_norm >= 0");
  }
  for (const auto& p : params_) {
    if (!p.is_leaf() || !p.requires_grad()) throw ContractError("Sgd: parameters must be trainable leaves");
    velocity_.push_back(Matrix::Zero(p.rows(), p.cols()));
  }
}

void Sgd::step() {
  std::vector<Matrix> grads;
  double sq = 0.0;
  for (const auto& p : params_) {
    grads.push_back(p.grad());
    sq += grads.back().squaredNorm();
  }
  last_norm_ = std::sqrt(sq);
  double factor = 1.0;
  if (options_.max_grad_norm > 0 && last_norm_ > options_.max_grad_norm) factor = options_.max_grad_norm / last_norm_;
  for (std::size_t i = 0; i < params_.size(); ++i) {
    Tensor p = params_[i];
    velocity_[i] = options_.momentum * velocity_[i] + factor * grads[i];
    p.mutable_value() -= options_.lr * velocity_[i];
    p.zero_grad();
  }
}

}  // namespace fogdetr
