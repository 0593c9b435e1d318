#pragma once

#include <Eigen/Core>

#include <cstdint>
#include <functional>
#include <memory>
#include <optional>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

namespace fogdetr {

using Index = Eigen::Index;
using Matrix = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using Shape = std::vector<Index>;

class DimensionError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

class ContractError : public std::logic_error {
 public:
  using std::logic_error::logic_error;
};

class EvaluationError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

std::string shape_string(const Shape& shape);
Index shape_size(const Shape& shape);

namespace detail {

struct Node;
using BackwardFn = std::function<void(Node& self)>;

struct Node {
  Shape shape;
  Matrix value;
  bool requires_grad = false;
  std::optional<Matrix> grad;
  std::vector<std::shared_ptr<Node>> parents;
  BackwardFn backward;

  void accumulate(const Matrix& delta);
};

}  // namespace detail

/// Dense double tensor with an optional gradient.
///
/// Values are viewed as a row-major matrix whose column count is the last
/// dimension and whose row count is the product of the leading dimensions.
/// A rank-0 tensor is a 1x1 matrix and a rank-1 tensor is a single row.
/// Copies share the underlying node; use clone() for an independent leaf.
class Tensor {
 public:
  Tensor();
  Tensor(Shape shape, std::vector<double> data, bool requires_grad = false);

  static Tensor from_matrix(Matrix value, bool requires_grad = false);
  static Tensor from_matrix(Shape shape, Matrix value, bool requires_grad = false);
  static Tensor zeros(Shape shape, bool requires_grad = false);
  static Tensor scalar(double value, bool requires_grad = false);

  bool defined() const { return static_cast<bool>(node_); }
  const Shape& shape() const;
  Index rank() const { return static_cast<Index>(shape().size()); }
  Index rows() const { return value().rows(); }
  Index cols() const { return value().cols(); }
  Index size() const { return value().size(); }

  const Matrix& value() const;
  std::span<const double> data() const;
  double item() const;

  /// In-place access for leaves (parameters). Throws for op results.
  Matrix& mutable_value();

  bool requires_grad() const;
  void set_requires_grad(bool flag);
  bool has_grad() const;
  /// Accumulated gradient, or zeros when none has been populated.
  Matrix grad() const;
  void zero_grad();

  /// New leaf with the same value; no history, no gradient.
  Tensor detach() const;
  Tensor clone(bool requires_grad) const;
  bool is_leaf() const;

  const std::shared_ptr<detail::Node>& node() const { return node_; }
  explicit Tensor(std::shared_ptr<detail::Node> node) : node_(std::move(node)) {}

 private:
  std::shared_ptr<detail::Node> node_;
};

/// Ordered record of the operations executed while it is active.
///
/// Nodes are appended at creation, so the record is in topological order.
class Tape {
 public:
  Tape() = default;
  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;

  /// Makes a tape the active recorder for the current thread.
  class Scope {
   public:
    explicit Scope(Tape& tape);
    ~Scope();
    Scope(const Scope&) = delete;
    Scope& operator=(const Scope&) = delete;

   private:
    Tape* previous_;
  };

  void record(std::shared_ptr<detail::Node> node);
  std::size_t size() const { return nodes_.size(); }
  const std::vector<std::shared_ptr<detail::Node>>& nodes() const { return nodes_; }
  void clear() { nodes_.clear(); }

  static Tape* active();

 private:
  std::vector<std::shared_ptr<detail::Node>> nodes_;
};

/// Disables recording on the current thread for its lifetime.
class NoGradScope {
 public:
  NoGradScope();
  ~NoGradScope();
  NoGradScope(const NoGradScope&) = delete;
  NoGradScope& operator=(const NoGradScope&) = delete;

 private:
  Tape* previous_;
};

class GradientMap {
 public:
  /// Gradient of the loss with respect to t; zeros if t was not reached.
  Matrix at(const Tensor& t) const;
  std::size_t populated() const { return populated_; }

 private:
  friend GradientMap backward(const Tensor& loss, const Tape& tape);
  std::size_t populated_ = 0;
};

/// Reverse sweep over the tape, seeding d(loss)/d(loss) = 1.
GradientMap backward(const Tensor& loss, const Tape& tape);

namespace detail {

/// Builds an op result; records it on the active tape when any input
/// requires a gradient.
Tensor make_result(Shape shape, Matrix value, std::initializer_list<Tensor> inputs,
                   BackwardFn backward);
Tensor make_result(Shape shape, Matrix value, const std::vector<Tensor>& inputs,
                   BackwardFn backward);

}  // namespace detail

// ---------------------------------------------------------------------------
// Operations. Binary elementwise ops accept an equal-shape right operand or
// one that broadcasts: 1x1 scalar, 1xN row, or Mx1 column.
// ---------------------------------------------------------------------------

Tensor matmul(const Tensor& a, const Tensor& b);
Tensor transpose(const Tensor& a);
Tensor reshape(const Tensor& a, Shape shape);

Tensor add(const Tensor& a, const Tensor& b);
Tensor sub(const Tensor& a, const Tensor& b);
Tensor mul(const Tensor& a, const Tensor& b);
Tensor div(const Tensor& a, const Tensor& b);
Tensor minimum(const Tensor& a, const Tensor& b);
Tensor maximum(const Tensor& a, const Tensor& b);

Tensor scale(const Tensor& a, double factor);
Tensor add_scalar(const Tensor& a, double offset);
Tensor neg(const Tensor& a);
Tensor exp(const Tensor& a);
Tensor log(const Tensor& a);
Tensor abs(const Tensor& a);
Tensor relu(const Tensor& a);
Tensor sigmoid(const Tensor& a);

Tensor sum(const Tensor& a);
Tensor mean(const Tensor& a);
Tensor sum_squares(const Tensor& a);
Tensor row_sum(const Tensor& a);

Tensor concat(const std::vector<Tensor>& parts, int axis);
Tensor slice_rows(const Tensor& a, Index start, Index count);
Tensor slice_cols(const Tensor& a, Index start, Index count);
Tensor gather_rows(const Tensor& a, std::span<const Index> rows);

Tensor softmax_rows(const Tensor& x);
Tensor log_softmax_rows(const Tensor& x);
Tensor layer_norm(const Tensor& x, const Tensor& gain, const Tensor& bias, double eps = 1e-5);

/// Patch extraction for a {H, W, C} map: output row (i, j) holds the k*k*C
/// window at stride `stride` with zero padding `pad`, ordered (dy, dx, c).
Tensor im2col(const Tensor& map, Index kernel, Index stride, Index pad);

inline Tensor operator+(const Tensor& a, const Tensor& b) { return add(a, b); }
inline Tensor operator-(const Tensor& a, const Tensor& b) { return sub(a, b); }
inline Tensor operator*(const Tensor& a, const Tensor& b) { return mul(a, b); }
inline Tensor operator/(const Tensor& a, const Tensor& b) { return div(a, b); }
inline Tensor operator*(const Tensor& a, double s) { return scale(a, s); }
inline Tensor operator*(double s, const Tensor& a) { return scale(a, s); }
inline Tensor operator-(const Tensor& a) { return neg(a); }

namespace testing {

/// Additive perturbation applied to every softmax_rows output. Zero in
/// normal operation; used by the verifier's mutation smoke test.
void set_softmax_perturbation(double delta);
double softmax_perturbation();

}  // namespace testing

}  // namespace fogdetr
