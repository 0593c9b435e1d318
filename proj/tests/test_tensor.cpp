#include <doctest.h>

#include <cmath>
#include <bit>
#include <cstring>
#include <sstream>

#include "fogdetr/gradcheck.hpp"
#include "fogdetr/rng.hpp"
#include "fogdetr/serialize.hpp"
#include "fogdetr/tensor.hpp"

using namespace fogdetr;

namespace {

Matrix mat(Index rows, Index cols, std::initializer_list<double> values) {
  Matrix m(rows, cols);
  auto it = values.begin();
  for (Index i = 0; i < rows; ++i)
    for (Index j = 0; j < cols; ++j) m(i, j) = *it++;
  return m;
}

Tensor random_tensor(Rng& rng, Index rows, Index cols, bool requires_grad = true) {
  Matrix m(rows, cols);
  for (Index i = 0; i < m.size(); ++i) m.data()[i] = rng.normal();
  return Tensor::from_matrix(m, requires_grad);
}

}  // namespace

TEST_CASE("matmul examples") {
  Matrix a = mat(2, 2, {0.3, -1.2, 4.0, 2.5});
  Tensor id = Tensor::from_matrix(Matrix::Identity(2, 2));
  CHECK(matmul(id, Tensor::from_matrix(a)).value() == a);

  Tensor lhs = Tensor::from_matrix(mat(2, 2, {1, 2, 3, 4}));
  Tensor rhs = Tensor::from_matrix(mat(2, 1, {5, 6}));
  Matrix expected = mat(2, 1, {17, 39});  // 1*5+2*6, 3*5+4*6
  CHECK(matmul(lhs, rhs).value() == expected);

  Tensor zero = Tensor::zeros({3, 2});
  CHECK(matmul(zero, rhs.detach()).value().isZero());
}

TEST_CASE("matmul shape mismatch names both shapes") {
  Tensor a = Tensor::zeros({2, 3});
  Tensor b = Tensor::zeros({2, 3});
  try {
    matmul(a, b);
    FAIL("expected DimensionError");
  } catch (const DimensionError& e) {
    std::string msg = e.what();
    CHECK(msg.find("[2x3]") != std::string::npos);
  }
}

TEST_CASE("softmax_rows examples") {
  Tensor x = Tensor::from_matrix(mat(3, 2, {0, 0, std::log(2.0), 0, 1000, 0}));
  Matrix y = softmax_rows(x).value();
  CHECK(y(0, 0) == doctest::Approx(0.5).epsilon(1e-15));
  CHECK(y(0, 1) == doctest::Approx(0.5).epsilon(1e-15));
  CHECK(std::abs(y(1, 0) - 2.0 / 3.0) < 1e-15);
  CHECK(std::abs(y(1, 1) - 1.0 / 3.0) < 1e-15);
  CHECK(std::isfinite(y(2, 0)));
  CHECK(y(2, 0) == doctest::Approx(1.0));
  CHECK(y(2, 1) < 1e-300);
}

TEST_CASE("softmax rows are stochastic and shift invariant") {
  Rng rng(11);
  for (int trial = 0; trial < 50; ++trial) {
    Tensor x = random_tensor(rng, 4, 7, false);
    Matrix y = softmax_rows(x).value();
    CHECK((y.array() >= 0).all());
    CHECK((y.rowwise().sum().array() - 1.0).abs().maxCoeff() <= 1e-12);
    Matrix shifted = x.value();
    for (Index r = 0; r < shifted.rows(); ++r) shifted.row(r).array() += rng.uniform(-50, 50);
    Matrix y2 = softmax_rows(Tensor::from_matrix(shifted)).value();
    CHECK((y - y2).cwiseAbs().maxCoeff() <= 1e-12);
  }
}

TEST_CASE("layer_norm examples") {
  Tensor gain = Tensor::from_matrix(Shape{3}, Matrix::Ones(1, 3));
  Tensor bias = Tensor::from_matrix(Shape{3}, Matrix::Zero(1, 3));
  Tensor constant = Tensor::from_matrix(Matrix::Constant(2, 3, 4.2));
  CHECK(layer_norm(constant, gain, bias).value().isZero());

  Tensor g2 = Tensor::from_matrix(Shape{2}, Matrix::Ones(1, 2));
  Tensor b2 = Tensor::from_matrix(Shape{2}, Matrix::Zero(1, 2));
  Matrix y = layer_norm(Tensor::from_matrix(mat(1, 2, {1, -1})), g2, b2, 1e-300).value();
  CHECK(y(0, 0) == doctest::Approx(1.0).epsilon(1e-15));
  CHECK(y(0, 1) == doctest::Approx(-1.0).epsilon(1e-15));

  Rng rng(3);
  Tensor x = random_tensor(rng, 4, 3, false);
  Tensor zero_gain = Tensor::from_matrix(Shape{3}, Matrix::Zero(1, 3));
  Tensor b3 = Tensor::from_matrix(Shape{3}, mat(1, 3, {0.1, -2, 7}));
  Matrix out = layer_norm(x, zero_gain, b3).value();
  for (Index r = 0; r < 4; ++r) CHECK(out.row(r) == b3.value());
}

TEST_CASE("layer_norm normalizes rows") {
  Rng rng(5);
  Tensor x = random_tensor(rng, 6, 8, false);
  Tensor gain = Tensor::from_matrix(Shape{8}, Matrix::Ones(1, 8));
  Tensor bias = Tensor::from_matrix(Shape{8}, Matrix::Zero(1, 8));
  Matrix y = layer_norm(x, gain, bias).value();
  for (Index r = 0; r < y.rows(); ++r) {
    CHECK(std::abs(y.row(r).mean()) < 1e-12);
    CHECK(y.row(r).array().square().mean() == doctest::Approx(1.0).epsilon(1e-3));
  }
}

TEST_CASE("backward examples") {
  Tensor x = Tensor::from_matrix(Shape{2, 3}, Matrix::Random(2, 3), true);
  {
    Tape tape;
    Tape::Scope scope(tape);
    backward(sum(x), tape);
  }
  CHECK(x.grad().isApprox(Matrix::Ones(2, 3)));

  Tensor v(Shape{3}, {1, 2, 3}, true);
  Tensor unused(Shape{2}, {5, 5}, true);
  GradientMap grads;
  {
    Tape tape;
    Tape::Scope scope(tape);
    grads = backward(sum(mul(v, v)), tape);
  }
  Matrix expected = mat(1, 3, {2, 4, 6});
  CHECK(grads.at(v) == expected);
  CHECK(grads.at(unused).isZero());
  CHECK(!unused.has_grad());
}

TEST_CASE("backward rejects non-scalar loss") {
  Tensor x = Tensor::zeros({2, 2}, true);
  Tape tape;
  Tape::Scope scope(tape);
  Tensor y = add_scalar(x, 1.0);
  CHECK_THROWS_AS(backward(y, tape), ContractError);
}

TEST_CASE("tape is topologically ordered and visits nodes once") {
  Rng rng(2);
  Tensor a = random_tensor(rng, 3, 3);
  Tape tape;
  Tensor loss;
  {
    Tape::Scope scope(tape);
    Tensor b = matmul(a, a);
    loss = sum(mul(b, b));
  }
  for (std::size_t i = 0; i < tape.size(); ++i) {
    for (const auto& parent : tape.nodes()[i]->parents) {
      if (parent->backward) {
        bool before = false;
        for (std::size_t j = 0; j < i; ++j) before = before || tape.nodes()[j] == parent;
        CHECK(before);
      }
    }
  }
  CHECK(backward(loss, tape).populated() == tape.size());
}

TEST_CASE("gradient_check examples") {
  Rng rng(21);
  Tensor w = random_tensor(rng, 3, 4);
  Tensor x = random_tensor(rng, 4, 2, false);
  CHECK(gradient_check([&] { return sum(matmul(w, x)); }, {w}, 1e-6) < 1e-6);

  Tensor c = random_tensor(rng, 2, 2);
  CHECK(gradient_check([&] { return Tensor::scalar(3.0); }, {c}, 1e-6) == 0.0);

  CHECK_THROWS_AS(gradient_check([&] { return sum(matmul(w, x)); }, {w}, 1e-2), ContractError);
  CHECK_THROWS_AS(gradient_check([&] { return sum(log(scale(w, 0.0))); }, {w}, 1e-6),
                  EvaluationError);
}

TEST_CASE("every elementwise and structural op passes gradient_check at 100 probes") {
  Rng rng(1234);
  double worst = 0.0;
  for (int probe = 0; probe < 100; ++probe) {
    Tensor a = random_tensor(rng, 3, 4);
    Tensor b = random_tensor(rng, 3, 4);
    Tensor row = random_tensor(rng, 1, 4);
    Tensor col = random_tensor(rng, 3, 1);
    Tensor sq = random_tensor(rng, 4, 3);
    Tensor pos = Tensor::from_matrix(Matrix(a.value().array().abs() + 0.5), true);
    Tensor gain = Tensor::from_matrix(Shape{4}, random_tensor(rng, 1, 4, false).value(), true);
    Tensor bias = Tensor::from_matrix(Shape{4}, random_tensor(rng, 1, 4, false).value(), true);
    Tensor weights = random_tensor(rng, 3, 4, false);
    Tensor map = Tensor::from_matrix(Shape{4, 4, 2}, random_tensor(rng, 16, 2, false).value(), true);
    Tensor kernel = random_tensor(rng, 18, 1, false);
    const std::vector<Index> picks{2, 0, 2};

    auto wsum = [&](const Tensor& t) { return sum(mul(t, weights)); };
    std::vector<std::pair<std::function<Tensor()>, std::vector<Tensor>>> cases = {
        {[&] { return sum(matmul(a, sq)); }, {a, sq}},
        {[&] { return sum_squares(matmul(a, sq)); }, {a, sq}},
        {[&] { return sum_squares(transpose(a)); }, {a}},
        {[&] { return wsum(add(a, row)); }, {a, row}},
        {[&] { return wsum(sub(a, col)); }, {a, col}},
        {[&] { return wsum(mul(a, b)); }, {a, b}},
        {[&] { return wsum(div(a, pos)); }, {a, pos}},
        {[&] { return wsum(minimum(a, b)); }, {a, b}},
        {[&] { return wsum(maximum(a, b)); }, {a, b}},
        {[&] { return wsum(scale(a, -1.7)); }, {a}},
        {[&] { return wsum(add_scalar(a, 0.3)); }, {a}},
        {[&] { return wsum(exp(a)); }, {a}},
        {[&] { return wsum(log(pos)); }, {pos}},
        {[&] { return wsum(abs(a)); }, {a}},
        {[&] { return wsum(relu(a)); }, {a}},
        {[&] { return wsum(sigmoid(a)); }, {a}},
        {[&] { return mean(mul(a, b)); }, {a, b}},
        {[&] { return sum_squares(row_sum(a)); }, {a}},
        {[&] { return sum_squares(concat({a, b}, 0)); }, {a, b}},
        {[&] { return sum_squares(concat({a, col}, 1)); }, {a, col}},
        {[&] { return wsum(concat({slice_rows(a, 1, 2), slice_rows(b, 0, 1)}, 0)); }, {a, b}},
        {[&] { return sum_squares(slice_cols(a, 1, 2)); }, {a}},
        {[&] { return sum_squares(gather_rows(a, picks)); }, {a}},
        {[&] { return wsum(softmax_rows(a)); }, {a}},
        {[&] { return wsum(log_softmax_rows(a)); }, {a}},
        {[&] { return wsum(layer_norm(a, gain, bias)); }, {a, gain, bias}},
        {[&] { return sum_squares(reshape(a, {2, 6})); }, {a}},
        {[&] { return sum_squares(matmul(im2col(map, 3, 2, 1), kernel)); },
         {map}},
    };
    for (std::size_t k = 0; k < cases.size(); ++k) {
      GradCheckOptions options;
      options.seed = static_cast<std::uint64_t>(probe);
      auto report = gradient_check_report(cases[k].first, cases[k].second, options);
      CHECK_MESSAGE(report.max_relative_error < 1e-4, "case " << k << " probe " << probe);
      worst = std::max(worst, report.max_relative_error);
    }
  }
  MESSAGE("worst relative error " << worst);
}

TEST_CASE("matmul is associative on random triples") {
  Rng rng(77);
  for (int trial = 0; trial < 100; ++trial) {
    Tensor a = random_tensor(rng, 3, 5, false);
    Tensor b = random_tensor(rng, 5, 4, false);
    Tensor c = random_tensor(rng, 4, 2, false);
    Matrix left = matmul(matmul(a, b), c).value();
    Matrix right = matmul(a, matmul(b, c)).value();
    CHECK((left - right).norm() <= 1e-9 * std::max(1.0, left.norm()));
  }
}

TEST_CASE("seeded forward/backward replay is bit-identical") {
  auto run = [] {
    Rng rng(99);
    Tensor w = random_tensor(rng, 4, 4);
    Tensor x = random_tensor(rng, 3, 4, false);
    Tape tape;
    Tape::Scope scope(tape);
    Tensor loss = sum_squares(softmax_rows(matmul(x, w)));
    backward(loss, tape);
    return std::make_pair(loss.item(), w.grad());
  };
  auto [l1, g1] = run();
  auto [l2, g2] = run();
  CHECK(std::bit_cast<std::uint64_t>(l1) == std::bit_cast<std::uint64_t>(l2));
  CHECK(std::memcmp(g1.data(), g2.data(), sizeof(double) * g1.size()) == 0);
}

TEST_CASE("tensor binary layout") {
  Tensor t(Shape{2, 1}, {1.5, -2.0});
  std::ostringstream os;
  write_tensor(os, t);
  std::string bytes = os.str();
  REQUIRE(bytes.size() == 4 + 2 * 4 + 2 * 8);
  CHECK(bytes.substr(0, 4) == std::string("\x02\x00\x00\x00", 4));
  CHECK(bytes.substr(4, 4) == std::string("\x02\x00\x00\x00", 4));
  CHECK(bytes.substr(8, 4) == std::string("\x01\x00\x00\x00", 4));
  CHECK(bytes.substr(12, 8) == std::string("\x00\x00\x00\x00\x00\x00\xf8\x3f", 8));  // 1.5

  Rng rng(8);
  for (int trial = 0; trial < 20; ++trial) {
    Shape shape;
    Index rank = rng.uniform_int(0, 3);
    for (Index i = 0; i < rank; ++i) shape.push_back(rng.uniform_int(1, 4));
    std::vector<double> values(static_cast<std::size_t>(shape_size(shape)));
    for (auto& v : values) v = rng.normal();
    Tensor src(shape, values);
    std::stringstream ss;
    write_tensor(ss, src);
    Tensor back = read_tensor(ss);
    CHECK(back.shape() == shape);
    CHECK(back.value() == src.value());
  }
  std::istringstream truncated(bytes.substr(0, 10));
  CHECK_THROWS_AS(read_tensor(truncated), IoError);
}

TEST_CASE("tensor invariants") {
  CHECK_THROWS_AS(Tensor(Shape{2, 2}, {1, 2, 3}), DimensionError);
  Tensor leaf = Tensor::zeros({2}, true);
  Tensor derived;
  {
    Tape tape;
    Tape::Scope scope(tape);
    derived = add_scalar(leaf, 1.0);
  }
  CHECK_THROWS_AS(derived.mutable_value(), ContractError);
  Tensor y = add_scalar(leaf, 1.0);  // no active tape: nothing recorded
  CHECK(!y.requires_grad());
}

TEST_CASE("op results carry their shapes") {
  Tensor a = Tensor::zeros({3, 4}, true), b = Tensor::zeros({4, 2}, true);
  Tape tape;
  Tape::Scope scope(tape);
  CHECK(matmul(a, b).shape() == Shape{3, 2});
  CHECK(transpose(a).shape() == Shape{4, 3});
  CHECK(sigmoid(matmul(a, b)).shape() == Shape{3, 2});
  CHECK(row_sum(a).shape() == Shape{3, 1});
  CHECK(slice_cols(a, 1, 2).shape() == Shape{3, 2});
  CHECK(concat({a, a}, 0).shape() == Shape{6, 4});
  CHECK(softmax_rows(a).shape() == Shape{3, 4});
}
