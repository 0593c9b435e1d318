#include <cmath>
#include <string>

#include "fogdetr/tensor.hpp"

namespace fogdetr {

using detail::make_result;
using detail::Node;

namespace {

double g_softmax_perturbation = 0.0;

Shape matrix_shape(Index rows, Index cols) { return Shape{rows, cols}; }

std::string dims(const Tensor& t) { return shape_string(t.shape()); }

enum class Broadcast { same, scalar, row, col };

Broadcast classify(const Tensor& a, const Tensor& b, const char* op) {
  const Matrix& x = a.value();
  const Matrix& y = b.value();
  if (x.rows() == y.rows() && x.cols() == y.cols()) return Broadcast::same;
  if (y.size() == 1) return Broadcast::scalar;
  if (y.rows() == 1 && y.cols() == x.cols()) return Broadcast::row;
  if (y.cols() == 1 && y.rows() == x.rows()) return Broadcast::col;
  throw DimensionError(std::string(op) + ": cannot broadcast " + dims(b) + " onto " + dims(a));
}

Matrix expand(const Matrix& y, Broadcast kind, Index rows, Index cols) {
  switch (kind) {
    case Broadcast::same:
      return y;
    case Broadcast::scalar:
      return Matrix::Constant(rows, cols, y(0, 0));
    case Broadcast::row:
      return y.replicate(rows, 1);
    case Broadcast::col:
      return y.replicate(1, cols);
  }
  return y;
}

Matrix reduce_to(const Matrix& g, Broadcast kind) {
  switch (kind) {
    case Broadcast::same:
      return g;
    case Broadcast::scalar: {
      Matrix r(1, 1);
      r(0, 0) = g.sum();
      return r;
    }
    case Broadcast::row:
      return g.colwise().sum();
    case Broadcast::col:
      return g.rowwise().sum();
  }
  return g;
}

template <typename Forward, typename GradA, typename GradB>
Tensor binary(const Tensor& a, const Tensor& b, const char* name, Forward forward, GradA grad_a,
              GradB grad_b) {
  Broadcast kind = classify(a, b, name);
  const Matrix& x = a.value();
  Matrix y = expand(b.value(), kind, x.rows(), x.cols());
  Matrix out = forward(x.array(), y.array()).matrix();
  return make_result(a.shape(), std::move(out), {a, b},
                     [kind, grad_a, grad_b](Node& self) {
                       const Matrix& g = *self.grad;
                       const Matrix& x = self.parents[0]->value;
                       Matrix y = expand(self.parents[1]->value, kind, x.rows(), x.cols());
                       if (self.parents[0]->requires_grad) {
                         self.parents[0]->accumulate(grad_a(g.array(), x.array(), y.array()).matrix());
                       }
                       if (self.parents[1]->requires_grad) {
                         Matrix gy = grad_b(g.array(), x.array(), y.array()).matrix();
                         self.parents[1]->accumulate(reduce_to(gy, kind));
                       }
                     });
}

template <typename Forward, typename Derivative>
Tensor unary(const Tensor& a, Forward forward, Derivative derivative) {
  Matrix out = forward(a.value().array()).matrix();
  return make_result(a.shape(), std::move(out), {a}, [derivative](Node& self) {
    const Matrix& g = *self.grad;
    self.parents[0]->accumulate(
        (g.array() * derivative(self.parents[0]->value.array(), self.value.array())).matrix());
  });
}

Tensor scalar_result(double v, const Tensor& a, detail::BackwardFn fn) {
  Matrix m(1, 1);
  m(0, 0) = v;
  return make_result(Shape{}, std::move(m), {a}, std::move(fn));
}

}  // namespace

namespace testing {
void set_softmax_perturbation(double delta) { g_softmax_perturbation = delta; }
double softmax_perturbation() { return g_softmax_perturbation; }
}  // namespace testing

///////////////////////////////////////////
// Linear algebra
///////////////////////////////////////////

Tensor matmul(const Tensor& a, const Tensor& b) {
  if (a.cols() != b.rows()) {
    throw DimensionError("matmul: inner dimensions differ for " + dims(a) + " and " + dims(b));
  }
  Matrix out = a.value() * b.value();
  Shape shape = matrix_shape(out.rows(), out.cols());
  return make_result(std::move(shape), std::move(out), {a, b}, [](Node& self) {
    const Matrix& g = *self.grad;
    auto& lhs = *self.parents[0];
    auto& rhs = *self.parents[1];
    if (lhs.requires_grad) lhs.accumulate(g * rhs.value.transpose());
    if (rhs.requires_grad) rhs.accumulate(lhs.value.transpose() * g);
  });
}

Tensor transpose(const Tensor& a) {
  Matrix out = a.value().transpose();
  Shape shape = matrix_shape(out.rows(), out.cols());
  return make_result(std::move(shape), std::move(out), {a},
                     [](Node& self) { self.parents[0]->accumulate(self.grad->transpose()); });
}

Tensor reshape(const Tensor& a, Shape shape) {
  if (shape_size(shape) != a.size()) {
    throw DimensionError("reshape: " + dims(a) + " has " + std::to_string(a.size()) +
                         " values, target " + shape_string(shape) + " needs " +
                         std::to_string(shape_size(shape)));
  }
  Index cols = shape.empty() ? 1 : shape.back();
  Index rows = cols == 0 ? 0 : a.size() / cols;
  Matrix out = Eigen::Map<const Matrix>(a.value().data(), rows, cols);
  return make_result(std::move(shape), std::move(out), {a}, [](Node& self) {
    auto& parent = *self.parents[0];
    parent.accumulate(
        Eigen::Map<const Matrix>(self.grad->data(), parent.value.rows(), parent.value.cols()));
  });
}

///////////////////////////////////////////
// Elementwise binary
///////////////////////////////////////////

Tensor add(const Tensor& a, const Tensor& b) {
  return binary(
      a, b, "add", [](const auto& x, const auto& y) { return x + y; },
      [](const auto& g, const auto&, const auto&) { return g; },
      [](const auto& g, const auto&, const auto&) { return g; });
}

Tensor sub(const Tensor& a, const Tensor& b) {
  return binary(
      a, b, "sub", [](const auto& x, const auto& y) { return x - y; },
      [](const auto& g, const auto&, const auto&) { return g; },
      [](const auto& g, const auto&, const auto&) { return -g; });
}

Tensor mul(const Tensor& a, const Tensor& b) {
  return binary(
      a, b, "mul", [](const auto& x, const auto& y) { return x * y; },
      [](const auto& g, const auto&, const auto& y) { return g * y; },
      [](const auto& g, const auto& x, const auto&) { return g * x; });
}

Tensor div(const Tensor& a, const Tensor& b) {
  return binary(
      a, b, "div", [](const auto& x, const auto& y) { return x / y; },
      [](const auto& g, const auto&, const auto& y) { return g / y; },
      [](const auto& g, const auto& x, const auto& y) { return -g * x / (y * y); });
}

// Ties route the gradient to the left operand.
Tensor minimum(const Tensor& a, const Tensor& b) {
  return binary(
      a, b, "minimum", [](const auto& x, const auto& y) { return x.min(y); },
      [](const auto& g, const auto& x, const auto& y) { return (x <= y).select(g, 0.0 * g); },
      [](const auto& g, const auto& x, const auto& y) { return (x <= y).select(0.0 * g, g); });
}

Tensor maximum(const Tensor& a, const Tensor& b) {
  return binary(
      a, b, "maximum", [](const auto& x, const auto& y) { return x.max(y); },
      [](const auto& g, const auto& x, const auto& y) { return (x >= y).select(g, 0.0 * g); },
      [](const auto& g, const auto& x, const auto& y) { return (x >= y).select(0.0 * g, g); });
}

///////////////////////////////////////////
// Elementwise unary
///////////////////////////////////////////

Tensor scale(const Tensor& a, double factor) {
  return unary(
      a, [factor](const auto& x) { return x * factor; },
      [factor](const auto& x, const auto&) { return decltype(x.eval())::Constant(x.rows(), x.cols(), factor); });
}

Tensor add_scalar(const Tensor& a, double offset) {
  return unary(
      a, [offset](const auto& x) { return x + offset; },
      [](const auto& x, const auto&) { return decltype(x.eval())::Ones(x.rows(), x.cols()); });
}

Tensor neg(const Tensor& a) { return scale(a, -1.0); }

Tensor exp(const Tensor& a) {
  return unary(
      a, [](const auto& x) { return x.exp(); }, [](const auto&, const auto& y) { return y; });
}

Tensor log(const Tensor& a) {
  return unary(
      a, [](const auto& x) { return x.log(); }, [](const auto& x, const auto&) { return x.inverse(); });
}

Tensor abs(const Tensor& a) {
  return unary(
      a, [](const auto& x) { return x.abs(); },
      [](const auto& x, const auto&) { return x.sign(); });
}

Tensor relu(const Tensor& a) {
  return unary(
      a, [](const auto& x) { return x.max(0.0); },
      [](const auto& x, const auto&) { return (x > 0.0).template cast<double>(); });
}

Tensor sigmoid(const Tensor& a) {
  return unary(
      a,
      [](const auto& x) {
        return x.unaryExpr([](double v) {
          if (v >= 0) return 1.0 / (1.0 + std::exp(-v));
          double e = std::exp(v);
          return e / (1.0 + e);
        });
      },
      [](const auto&, const auto& y) { return y * (1.0 - y); });
}

///////////////////////////////////////////
// Reductions
///////////////////////////////////////////

Tensor sum(const Tensor& a) {
  return scalar_result(a.value().sum(), a, [](Node& self) {
    auto& p = *self.parents[0];
    p.accumulate(Matrix::Constant(p.value.rows(), p.value.cols(), (*self.grad)(0, 0)));
  });
}

Tensor mean(const Tensor& a) {
  if (a.size() == 0) throw DimensionError("mean of empty tensor " + dims(a));
  return scalar_result(a.value().mean(), a, [](Node& self) {
    auto& p = *self.parents[0];
    double g = (*self.grad)(0, 0) / static_cast<double>(p.value.size());
    p.accumulate(Matrix::Constant(p.value.rows(), p.value.cols(), g));
  });
}

Tensor sum_squares(const Tensor& a) {
  return scalar_result(a.value().squaredNorm(), a, [](Node& self) {
    auto& p = *self.parents[0];
    p.accumulate(2.0 * (*self.grad)(0, 0) * p.value);
  });
}

Tensor row_sum(const Tensor& a) {
  Matrix out = a.value().rowwise().sum();
  Shape shape = matrix_shape(out.rows(), 1);
  return make_result(std::move(shape), std::move(out), {a}, [](Node& self) {
    auto& p = *self.parents[0];
    p.accumulate(self.grad->replicate(1, p.value.cols()));
  });
}

///////////////////////////////////////////
// Structural
///////////////////////////////////////////

Tensor concat(const std::vector<Tensor>& parts, int axis) {
  if (parts.empty()) throw DimensionError("concat of zero tensors");
  if (axis != 0 && axis != 1) throw DimensionError("concat axis must be 0 or 1");
  Index rows = 0, cols = 0;
  for (const auto& p : parts) {
    if (axis == 0) {
      if (p.cols() != parts[0].cols()) {
        throw DimensionError("concat rows: " + dims(parts[0]) + " vs " + dims(p));
      }
      rows += p.rows();
      cols = p.cols();
    } else {
      if (p.rows() != parts[0].rows()) {
        throw DimensionError("concat cols: " + dims(parts[0]) + " vs " + dims(p));
      }
      cols += p.cols();
      rows = p.rows();
    }
  }
  Matrix out(rows, cols);
  Index offset = 0;
  for (const auto& p : parts) {
    if (axis == 0) {
      out.middleRows(offset, p.rows()) = p.value();
      offset += p.rows();
    } else {
      out.middleCols(offset, p.cols()) = p.value();
      offset += p.cols();
    }
  }
  return make_result(matrix_shape(rows, cols), std::move(out), parts, [axis](Node& self) {
    Index offset = 0;
    for (auto& parent : self.parents) {
      if (axis == 0) {
        Index n = parent->value.rows();
        parent->accumulate(self.grad->middleRows(offset, n));
        offset += n;
      } else {
        Index n = parent->value.cols();
        parent->accumulate(self.grad->middleCols(offset, n));
        offset += n;
      }
    }
  });
}

Tensor slice_rows(const Tensor& a, Index start, Index count) {
  if (start < 0 || count < 0 || start + count > a.rows()) {
    throw DimensionError("slice_rows [" + std::to_string(start) + ", +" + std::to_string(count) +
                         ") out of range for " + dims(a));
  }
  Matrix out = a.value().middleRows(start, count);
  return make_result(matrix_shape(count, a.cols()), std::move(out), {a}, [start, count](Node& self) {
    auto& p = *self.parents[0];
    Matrix g = Matrix::Zero(p.value.rows(), p.value.cols());
    g.middleRows(start, count) = *self.grad;
    p.accumulate(g);
  });
}

Tensor slice_cols(const Tensor& a, Index start, Index count) {
  if (start < 0 || count < 0 || start + count > a.cols()) {
    throw DimensionError("slice_cols [" + std::to_string(start) + ", +" + std::to_string(count) +
                         ") out of range for " + dims(a));
  }
  Matrix out = a.value().middleCols(start, count);
  return make_result(matrix_shape(a.rows(), count), std::move(out), {a}, [start, count](Node& self) {
    auto& p = *self.parents[0];
    Matrix g = Matrix::Zero(p.value.rows(), p.value.cols());
    g.middleCols(start, count) = *self.grad;
    p.accumulate(g);
  });
}

Tensor gather_rows(const Tensor& a, std::span<const Index> rows) {
  std::vector<Index> idx(rows.begin(), rows.end());
  Matrix out(static_cast<Index>(idx.size()), a.cols());
  for (std::size_t i = 0; i < idx.size(); ++i) {
    if (idx[i] < 0 || idx[i] >= a.rows()) {
      throw DimensionError("gather_rows index " + std::to_string(idx[i]) + " out of range for " +
                           dims(a));
    }
    out.row(static_cast<Index>(i)) = a.value().row(idx[i]);
  }
  Shape shape = matrix_shape(out.rows(), out.cols());
  return make_result(std::move(shape), std::move(out), {a},
                     [idx = std::move(idx)](Node& self) {
                       auto& p = *self.parents[0];
                       Matrix g = Matrix::Zero(p.value.rows(), p.value.cols());
                       for (std::size_t i = 0; i < idx.size(); ++i) {
                         g.row(idx[i]) += self.grad->row(static_cast<Index>(i));
                       }
                       p.accumulate(g);
                     });
}

///////////////////////////////////////////
// Normalizers
///////////////////////////////////////////

Tensor softmax_rows(const Tensor& x) {
  const Matrix& v = x.value();
  Matrix out = (v.colwise() - v.rowwise().maxCoeff()).array().exp().matrix();
  out.array().colwise() /= out.rowwise().sum().array();
  if (g_softmax_perturbation != 0.0) out.array() += g_softmax_perturbation;
  return make_result(x.shape(), std::move(out), {x}, [](Node& self) {
    const Matrix& g = *self.grad;
    const Matrix& y = self.value;
    Eigen::VectorXd dot = (g.array() * y.array()).rowwise().sum();
    self.parents[0]->accumulate((y.array() * (g.array().colwise() - dot.array())).matrix());
  });
}

Tensor log_softmax_rows(const Tensor& x) {
  const Matrix& v = x.value();
  Matrix shifted = v.colwise() - v.rowwise().maxCoeff();
  Eigen::VectorXd lse = shifted.array().exp().rowwise().sum().log();
  Matrix out = shifted.colwise() - lse;
  return make_result(x.shape(), std::move(out), {x}, [](Node& self) {
    const Matrix& g = *self.grad;
    Matrix p = self.value.array().exp();
    Eigen::VectorXd gs = g.rowwise().sum();
    self.parents[0]->accumulate((g.array() - p.array().colwise() * gs.array()).matrix());
  });
}

Tensor layer_norm(const Tensor& x, const Tensor& gain, const Tensor& bias, double eps) {
  const Index d = x.cols();
  if (d < 1) throw DimensionError("layer_norm needs at least one feature, got " + dims(x));
  if (eps <= 0) throw DimensionError("layer_norm eps must be positive");
  if (gain.size() != d || bias.size() != d) {
    throw DimensionError("layer_norm: gain " + dims(gain) + " / bias " + dims(bias) +
                         " do not match features of " + dims(x));
  }
  const Matrix& v = x.value();
  Eigen::VectorXd mu = v.rowwise().mean();
  Matrix centered = v.colwise() - mu;
  Eigen::VectorXd var = centered.array().square().rowwise().mean();
  Eigen::VectorXd inv = (var.array() + eps).rsqrt();
  Matrix xhat = centered.array().colwise() * inv.array();
  Eigen::RowVectorXd g = Eigen::Map<const Eigen::RowVectorXd>(gain.value().data(), d);
  Eigen::RowVectorXd b = Eigen::Map<const Eigen::RowVectorXd>(bias.value().data(), d);
  Matrix out = (xhat.array().rowwise() * g.array()).rowwise() + b.array();
  return make_result(x.shape(), std::move(out), {x, gain, bias},
                     [xhat = std::move(xhat), inv = std::move(inv), d](Node& self) {
                       const Matrix& up = *self.grad;
                       auto& px = *self.parents[0];
                       auto& pg = *self.parents[1];
                       auto& pb = *self.parents[2];
                       if (pg.requires_grad) {
                         Matrix gg = (up.array() * xhat.array()).colwise().sum();
                         pg.accumulate(Eigen::Map<const Matrix>(gg.data(), pg.value.rows(), pg.value.cols()));
                       }
                       if (pb.requires_grad) {
                         Matrix gb = up.colwise().sum();
                         pb.accumulate(Eigen::Map<const Matrix>(gb.data(), pb.value.rows(), pb.value.cols()));
                       }
                       if (px.requires_grad) {
                         Eigen::RowVectorXd gain_row =
                             Eigen::Map<const Eigen::RowVectorXd>(pg.value.data(), d);
                         Matrix gxhat = up.array().rowwise() * gain_row.array();
                         Eigen::VectorXd s1 = gxhat.rowwise().sum();
                         Eigen::VectorXd s2 = (gxhat.array() * xhat.array()).rowwise().sum();
                         Matrix gx = (static_cast<double>(d) * gxhat).colwise() - s1;
                         gx -= (xhat.array().colwise() * s2.array()).matrix();
                         gx.array().colwise() *= inv.array() / static_cast<double>(d);
                         px.accumulate(gx);
                       }
                     });
}

///////////////////////////////////////////
// Convolution support
///////////////////////////////////////////

Tensor im2col(const Tensor& map, Index kernel, Index stride, Index pad) {
  if (map.rank() != 3) throw DimensionError("im2col expects a {H, W, C} map, got " + dims(map));
  const Index h = map.shape()[0], w = map.shape()[1], c = map.shape()[2];
  if (kernel < 1 || stride < 1 || pad < 0) throw DimensionError("im2col: bad kernel/stride/pad");
  const Index ho = (h + 2 * pad - kernel) / stride + 1;
  const Index wo = (w + 2 * pad - kernel) / stride + 1;
  if (ho < 1 || wo < 1) throw DimensionError("im2col: kernel larger than padded map " + dims(map));
  const Matrix& v = map.value();
  Matrix out = Matrix::Zero(ho * wo, kernel * kernel * c);
  for (Index i = 0; i < ho; ++i) {
    for (Index j = 0; j < wo; ++j) {
      const Index row = i * wo + j;
      for (Index dy = 0; dy < kernel; ++dy) {
        const Index y = i * stride - pad + dy;
        if (y < 0 || y >= h) continue;
        for (Index dx = 0; dx < kernel; ++dx) {
          const Index x = j * stride - pad + dx;
          if (x < 0 || x >= w) continue;
          out.block(row, (dy * kernel + dx) * c, 1, c) = v.row(y * w + x);
        }
      }
    }
  }
  return make_result(Shape{ho * wo, kernel * kernel * c}, std::move(out), {map},
                     [h, w, c, ho, wo, kernel, stride, pad](Node& self) {
                       const Matrix& g = *self.grad;
                       Matrix gm = Matrix::Zero(h * w, c);
                       for (Index i = 0; i < ho; ++i) {
                         for (Index j = 0; j < wo; ++j) {
                           const Index row = i * wo + j;
                           for (Index dy = 0; dy < kernel; ++dy) {
                             const Index y = i * stride - pad + dy;
                             if (y < 0 || y >= h) continue;
                             for (Index dx = 0; dx < kernel; ++dx) {
                               const Index x = j * stride - pad + dx;
                               if (x < 0 || x >= w) continue;
                               gm.row(y * w + x) += g.block(row, (dy * kernel + dx) * c, 1, c);
                             }
                           }
                         }
                       }
                       self.parents[0]->accumulate(gm);
                     });
}

}  // namespace fogdetr
