#include "fogdetr/tensor.hpp"

#include <sstream>

namespace fogdetr {

namespace {

thread_local Tape* g_active_tape = nullptr;

std::pair<Index, Index> matrix_dims(const Shape& shape) {
  if (shape.empty()) return {1, 1};
  Index cols = shape.back();
  Index rows = 1;
  for (std::size_t i = 0; i + 1 < shape.size(); ++i) rows *= shape[i];
  return {rows, cols};
}

}  // namespace

std::string shape_string(const Shape& shape) {
  std::ostringstream os;
  os << '[';
  for (std::size_t i = 0; i < shape.size(); ++i) {
    if (i) os << 'x';
    os << shape[i];
  }
  os << ']';
  return os.str();
}

Index shape_size(const Shape& shape) {
  Index n = 1;
  for (Index d : shape) n *= d;
  return n;
}

void detail::Node::accumulate(const Matrix& delta) {
  if (!requires_grad) return;
  if (grad) {
    *grad += delta;
  } else {
    grad = delta;
  }
}

///////////////////////////////////////////
// Tensor
///////////////////////////////////////////

Tensor::Tensor() = default;

Tensor::Tensor(Shape shape, std::vector<double> data, bool requires_grad) {
  for (Index d : shape) {
    if (d < 0) throw DimensionError("negative dimension in shape " + shape_string(shape));
  }
  if (shape_size(shape) != static_cast<Index>(data.size())) {
    throw DimensionError("shape " + shape_string(shape) + " does not match " +
                         std::to_string(data.size()) + " values");
  }
  auto [rows, cols] = matrix_dims(shape);
  node_ = std::make_shared<detail::Node>();
  node_->shape = std::move(shape);
  node_->value = Eigen::Map<const Matrix>(data.data(), rows, cols);
  node_->requires_grad = requires_grad;
}

Tensor Tensor::from_matrix(Matrix value, bool requires_grad) {
  Shape shape{value.rows(), value.cols()};
  return from_matrix(std::move(shape), std::move(value), requires_grad);
}

Tensor Tensor::from_matrix(Shape shape, Matrix value, bool requires_grad) {
  auto [rows, cols] = matrix_dims(shape);
  if (rows != value.rows() || cols != value.cols()) {
    throw DimensionError("shape " + shape_string(shape) + " does not match matrix " +
                         std::to_string(value.rows()) + "x" + std::to_string(value.cols()));
  }
  auto node = std::make_shared<detail::Node>();
  node->shape = std::move(shape);
  node->value = std::move(value);
  node->requires_grad = requires_grad;
  return Tensor(std::move(node));
}

Tensor Tensor::zeros(Shape shape, bool requires_grad) {
  auto [rows, cols] = matrix_dims(shape);
  return from_matrix(std::move(shape), Matrix::Zero(rows, cols), requires_grad);
}

Tensor Tensor::scalar(double value, bool requires_grad) {
  Matrix m(1, 1);
  m(0, 0) = value;
  return from_matrix(Shape{}, std::move(m), requires_grad);
}

const Shape& Tensor::shape() const {
  if (!node_) throw ContractError("use of undefined tensor");
  return node_->shape;
}

const Matrix& Tensor::value() const {
  if (!node_) throw ContractError("use of undefined tensor");
  return node_->value;
}

std::span<const double> Tensor::data() const {
  const Matrix& v = value();
  return {v.data(), static_cast<std::size_t>(v.size())};
}

double Tensor::item() const {
  if (size() != 1) throw ContractError("item() on tensor of shape " + shape_string(shape()));
  return value()(0, 0);
}

Matrix& Tensor::mutable_value() {
  if (!is_leaf()) throw ContractError("mutable_value() on a non-leaf tensor");
  return node_->value;
}

bool Tensor::requires_grad() const { return node_ && node_->requires_grad; }

void Tensor::set_requires_grad(bool flag) {
  if (!is_leaf()) throw ContractError("set_requires_grad() on a non-leaf tensor");
  node_->requires_grad = flag;
  if (!flag) node_->grad.reset();
}

bool Tensor::has_grad() const { return node_ && node_->grad.has_value(); }

Matrix Tensor::grad() const {
  if (has_grad()) return *node_->grad;
  return Matrix::Zero(rows(), cols());
}

void Tensor::zero_grad() {
  if (node_) node_->grad.reset();
}

Tensor Tensor::detach() const { return clone(false); }

Tensor Tensor::clone(bool requires_grad) const {
  return from_matrix(shape(), value(), requires_grad);
}

bool Tensor::is_leaf() const { return node_ && !node_->backward; }

///////////////////////////////////////////
// Tape
///////////////////////////////////////////

Tape::Scope::Scope(Tape& tape) : previous_(g_active_tape) { g_active_tape = &tape; }
Tape::Scope::~Scope() { g_active_tape = previous_; }

NoGradScope::NoGradScope() : previous_(g_active_tape) { g_active_tape = nullptr; }
NoGradScope::~NoGradScope() { g_active_tape = previous_; }

Tape* Tape::active() { return g_active_tape; }

void Tape::record(std::shared_ptr<detail::Node> node) { nodes_.push_back(std::move(node)); }

Matrix GradientMap::at(const Tensor& t) const { return t.grad(); }

GradientMap backward(const Tensor& loss, const Tape& tape) {
  if (!loss.defined() || loss.size() != 1) {
    throw ContractError("backward() needs a scalar loss, got " +
                        (loss.defined() ? shape_string(loss.shape()) : std::string("undefined")));
  }
  GradientMap map;
  auto& root = *loss.node();
  if (!root.requires_grad) return map;
  root.accumulate(Matrix::Ones(1, 1));

  const auto& nodes = tape.nodes();
  for (auto it = nodes.rbegin(); it != nodes.rend(); ++it) {
    detail::Node& node = **it;
    if (!node.grad || !node.backward) continue;
    node.backward(node);
    ++map.populated_;
  }
  return map;
}

namespace detail {

Tensor make_result(Shape shape, Matrix value, const std::vector<Tensor>& inputs,
                   BackwardFn backward) {
  auto node = std::make_shared<Node>();
  node->shape = std::move(shape);
  node->value = std::move(value);
  Tape* tape = Tape::active();
  bool needs_grad = false;
  if (tape) {
    for (const auto& in : inputs) needs_grad = needs_grad || in.requires_grad();
  }
  if (needs_grad) {
    node->requires_grad = true;
    node->backward = std::move(backward);
    node->parents.reserve(inputs.size());
    for (const auto& in : inputs) node->parents.push_back(in.node());
    tape->record(node);
  }
  return Tensor(std::move(node));
}

Tensor make_result(Shape shape, Matrix value, std::initializer_list<Tensor> inputs,
                   BackwardFn backward) {
  return make_result(std::move(shape), std::move(value), std::vector<Tensor>(inputs),
                     std::move(backward));
}

}  // namespace detail

}  // namespace fogdetr
