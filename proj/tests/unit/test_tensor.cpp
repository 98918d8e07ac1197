#include <cmath>
#include <random>

#include "doctest.h"
#include "odseg/runtime.hpp"
#include "odseg/tensor.hpp"
#include "support/random.hpp"

using namespace odseg;
using odseg::testing::random_tensor;

namespace {

struct CheckFiniteScope {
  bool previous = runtime().check_finite;
  CheckFiniteScope() { runtime().check_finite = true; }
  ~CheckFiniteScope() { runtime().check_finite = previous; }
};

std::vector<double> values(const Tensor<double>& t) { return {t.data().begin(), t.data().end()}; }

}  // namespace

TEST_CASE("create") {
  auto z = Tensor<double>::zeros({2, 2});
  CHECK(values(z) == std::vector<double>{0, 0, 0, 0});
  CHECK_FALSE(z.requires_grad());

  auto t = Tensor<double>::from_data({3}, {1, 2, 3});
  CHECK(values(t) == std::vector<double>{1, 2, 3});

  CHECK_THROWS_AS(Tensor<double>::from_data({2, 3}, {1, 2, 3, 4, 5}), ShapeError);
  CHECK_THROWS_AS(Tensor<double>::zeros({2, 0}), ShapeError);
  CHECK_THROWS_AS(Tensor<double>::zeros({}), ShapeError);
}

TEST_CASE("row-major index round trip is bijective") {
  const Shape shape{3, 4, 2, 5};
  for (Index i = 0; i < shape_numel(shape); ++i) {
    const Shape c = unravel_index(shape, i);
    CHECK(ravel_index(shape, c) == i);
  }
  const Shape strides = shape_strides(shape);
  CHECK(strides == Shape{40, 10, 5, 1});
}

TEST_CASE("elementwise") {
  auto a = Tensor<double>::from_data({2}, {1, 2});
  auto b = Tensor<double>::from_data({2}, {3, 4});
  CHECK(values(add(a, b)) == std::vector<double>{4, 6});
  CHECK(values(elementwise(ElementwiseOp::Sub, a, &b)) == std::vector<double>{-2, -2});
  CHECK(sigmoid(Tensor<double>::from_data({1}, {0})).item() == 0.5);
  auto lr = leaky_relu(Tensor<double>::from_data({2}, {-2, 3}), 0.01);
  CHECK(lr.data()[0] == doctest::Approx(-0.02).epsilon(1e-15));
  CHECK(lr.data()[1] == 3.0);
  CHECK(values(scale(a, 3.0)) == std::vector<double>{3, 6});

  SUBCASE("broadcast along unit axes") {
    auto m = Tensor<double>::from_data({2, 3}, {1, 2, 3, 4, 5, 6});
    auto row = Tensor<double>::from_data({1, 3}, {10, 20, 30});
    CHECK(values(add(m, row)) == std::vector<double>{11, 22, 33, 14, 25, 36});
    auto col = Tensor<double>::from_data({2, 1}, {1, 2});
    CHECK(values(mul(m, col)) == std::vector<double>{1, 2, 3, 8, 10, 12});
    CHECK_THROWS_AS(add(m, Tensor<double>::zeros({3, 2})), ShapeError);
    CHECK_THROWS_AS(add(m, Tensor<double>::zeros({6})), ShapeError);
  }
  SUBCASE("division by tiny value is flagged") {
    auto tiny = Tensor<double>::from_data({2}, {1.0, 1e-31});
    CHECK_THROWS_AS(div(a, tiny), NumericError);
  }
  SUBCASE("non-finite outputs raise when checking is on") {
    CheckFiniteScope scope;
    auto big = Tensor<double>::from_data({1}, {1e308});
    CHECK_THROWS_AS(mul(big, big), NumericError);
  }
}

TEST_CASE("matmul") {
  auto eye = Tensor<double>::from_data({2, 2}, {1, 0, 0, 1});
  auto m = Tensor<double>::from_data({2, 2}, {1, 2, 3, 4});
  CHECK(values(matmul(eye, m)) == values(m));
  CHECK(matmul(Tensor<double>::from_data({1, 2}, {1, 2}), Tensor<double>::from_data({2, 1}, {3, 4})).item() == 11.0);
  CHECK_THROWS_AS(matmul(m, Tensor<double>::zeros({3, 1})), ShapeError);

  std::mt19937_64 rng(11);
  auto a = random_tensor<double>({4, 5}, rng);
  auto b = random_tensor<double>({5, 3}, rng);
  auto c = matmul(a, b);
  for (Index i = 0; i < 4; ++i)
    for (Index j = 0; j < 3; ++j) {
      double ref = 0;
      for (Index k = 0; k < 5; ++k) ref += a.at({i, k}) * b.at({k, j});
      CHECK(std::abs(c.at({i, j}) - ref) <= 1e-12);
    }
}

TEST_CASE("softmax") {
  auto u = softmax(Tensor<double>::zeros({4}), 0, 1.0);
  for (double v : u.data()) CHECK(v == 0.25);

  auto s = softmax(Tensor<double>::from_data({2}, {1000, 0}), 0, 1.0);
  CHECK(s.data()[0] == doctest::Approx(1.0));
  CHECK(s.data()[1] < 1e-300);
  CHECK(std::isfinite(s.data()[1]));

  std::mt19937_64 rng(3);
  for (int trial = 0; trial < 20; ++trial) {
    auto row = softmax(random_tensor<double>({6}, rng, -5, 5), 0, 0.7);
    double total = 0;
    for (double v : row.data()) {
      CHECK(v >= 0.0);
      total += v;
    }
    CHECK(std::abs(total - 1.0) <= 1e-6);
  }

  SUBCASE("inner axis of a matrix") {
    auto m = random_tensor<double>({3, 4, 2}, rng);
    auto p = softmax(m, 1, 2.0);
    for (Index i = 0; i < 3; ++i)
      for (Index k = 0; k < 2; ++k) {
        double total = 0;
        for (Index j = 0; j < 4; ++j) total += p.at({i, j, k});
        CHECK(total == doctest::Approx(1.0).epsilon(1e-12));
      }
  }
  CHECK_THROWS_AS(softmax(Tensor<double>::zeros({2}), 0, 0.0), ValueError);
}

TEST_CASE("reduce") {
  auto m = Tensor<double>::from_data({2, 2}, {1, 3, 5, 7});
  CHECK(reduce(ReduceOp::Mean, m, {0, 1}).item() == 4.0);
  CHECK(values(reduce(ReduceOp::Sum, m, {})) == values(m));
  CHECK(values(reduce(ReduceOp::Sum, m, {0})) == std::vector<double>{6, 10});
  CHECK(reduce(ReduceOp::Sum, m, {1}, true).shape() == Shape{2, 1});
  CHECK_THROWS_AS(reduce(ReduceOp::Sum, m, {2}), ShapeError);
  CHECK_THROWS_AS(reduce(ReduceOp::Sum, m, {0, 0}), ShapeError);

  std::mt19937_64 rng(5);
  auto r = random_tensor<double>({3, 4}, rng);
  double best = r.data()[0];
  for (double v : r.data()) best = std::max(best, v);
  CHECK(reduce(ReduceOp::Max, r, {0, 1}).item() == best);
}

TEST_CASE("global_average_pool") {
  auto c = global_average_pool(Tensor<double>::full({3, 2, 2, 2}, 1.5));
  CHECK(values(c) == std::vector<double>{1.5, 1.5, 1.5});
  auto ramp = global_average_pool(Tensor<double>::from_data({1, 2, 2, 2}, {1, 2, 3, 4, 5, 6, 7, 8}));
  CHECK(ramp.item() == 4.5);

  std::mt19937_64 rng(9);
  auto x = random_tensor<double>({3, 4, 4, 4}, rng);
  auto gap = global_average_pool(x);
  auto ref = reduce(ReduceOp::Mean, x, {1, 2, 3});
  for (Index i = 0; i < 3; ++i) CHECK(std::abs(gap.data()[i] - ref.data()[i]) <= 1e-12);
  CHECK_THROWS_AS(global_average_pool(Tensor<double>::zeros({3, 4})), ShapeError);
}

TEST_CASE("backward basics") {
  auto x = Tensor<double>::from_data({1}, {3.0});
  x.set_requires_grad(true);
  backward(mul(x, x));
  CHECK(x.grad()[0] == 6.0);

  auto a = Tensor<double>::from_data({2, 2}, {1, 2, 3, 4});
  auto b = Tensor<double>::from_data({2, 2}, {5, 6, 7, 8});
  a.set_requires_grad(true);
  backward(sum(matmul(a, b)));
  // d/dA_ij sum(AB) = sum_k B_jk
  CHECK(values(Tensor<double>::from_data({2, 2}, {a.grad()[0], a.grad()[1], a.grad()[2], a.grad()[3]})) ==
        std::vector<double>{11, 15, 11, 15});

  CHECK_THROWS_AS(backward(add(a, b)), ShapeError);
}

TEST_CASE("fan-out accumulates like a duplicated subexpression") {
  std::mt19937_64 rng(21);
  auto x = random_tensor<double>({5}, rng);
  auto x2 = x.detach();
  x.set_requires_grad(true);
  x2.set_requires_grad(true);

  // Shared: s = sigmoid(x) used twice.
  auto s = sigmoid(x);
  backward(sum(add(mul(s, s), scale(s, 3.0))));

  // Oracle: the same expression with the subexpression rebuilt per use.
  auto s1 = sigmoid(x2);
  auto s2 = sigmoid(x2);
  auto s3 = sigmoid(x2);
  backward(sum(add(mul(s1, s2), scale(s3, 3.0))));
  for (Index i = 0; i < 5; ++i) CHECK(x.grad()[i] == doctest::Approx(x2.grad()[i]).epsilon(1e-14));
}

TEST_CASE("tape is topologically ordered and visits nodes once") {
  auto x = Tensor<double>::from_data({2}, {1, 2}).set_requires_grad(true);
  auto y = sigmoid(x);
  auto z = add(y, mul(y, x));
  auto loss = sum(z);
  auto tape = Tape<double>::record(loss);
  // x, y, mul, add, sum
  CHECK(tape.size() == 5);
  const auto& nodes = tape.nodes();
  for (std::size_t i = 0; i < nodes.size(); ++i)
    for (const auto& p : nodes[i]->parents) {
      const auto pos = std::find(nodes.begin(), nodes.end(), p.get());
      CHECK(pos < nodes.begin() + static_cast<std::ptrdiff_t>(i));
    }
  CHECK(nodes.back() == loss.node().get());
}

TEST_CASE("no-grad guard suppresses recording") {
  auto x = Tensor<double>::from_data({2}, {1, 2}).set_requires_grad(true);
  NoGradGuard guard;
  auto y = sigmoid(x);
  CHECK_FALSE(y.requires_grad());
}

TEST_CASE("finite-difference check of tensor ops") {
  std::mt19937_64 rng(77);
  GradCheckOptions opts;
  opts.samples = 200;

  auto res = finite_difference_check([](const Tensor<double>& x) { return sum(x); },
                                     random_tensor<double>({4, 3}, rng), opts);
  CHECK(res.max_rel_error <= 1e-9);

  res = finite_difference_check([](const Tensor<double>& x) { return sum(sigmoid(x)); },
                                random_tensor<double>({10}, rng, -3, 3), opts);
  CHECK(res.max_rel_error <= 1e-6);

  auto a = random_tensor<double>({3, 4}, rng);
  auto b = random_tensor<double>({4, 2}, rng);
  auto bias = random_tensor<double>({1, 2}, rng, 0.5, 2.0);
  auto r = random_tensor<double>({3, 2}, rng);
  res = finite_difference_check(
      [&]() {
        auto y = div(add(matmul(a, b), bias), bias);
        return sum(mul(softmax(y, 1, 0.5), r));
      },
      {a, b, bias}, opts);
  CHECK(res.max_rel_error <= 1e-6);

  auto x = random_tensor<double>({2, 3, 2, 2}, rng);
  auto w = random_tensor<double>({2, 3, 2, 2}, rng);
  res = finite_difference_check(
      [&]() {
        auto g = global_average_pool(mul(x, w));
        auto m = reduce(ReduceOp::Max, x, {1}, true);
        auto t = transpose2d(m.reshape({2, 4}));
        return add(sum(leaky_relu(g, 0.1)), sum(mul(t, t)));
      },
      {x, w}, opts);
  CHECK(res.max_rel_error <= 1e-6);

  auto p = random_tensor<double>({3, 2, 2}, rng);
  auto q = random_tensor<double>({2, 2, 2}, rng);
  auto rw = random_tensor<double>({4, 2, 2}, rng);
  res = finite_difference_check(
      [&]() {
        auto cat = concat0(std::vector<Tensor<double>>{p, q});
        auto ls = log_softmax(slice0(cat, 1, 5), 0);
        auto lg = log(add_scalar(mul(slice0(cat, 0, 4), slice0(cat, 0, 4)), 1.0));
        return sum(mul(add(ls, lg), rw));
      },
      {p, q}, opts);
  CHECK(res.max_rel_error <= 1e-6);
}
