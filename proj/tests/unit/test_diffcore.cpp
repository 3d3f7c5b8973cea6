#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>
#include <limits>

#include "s2sd/autodiff.hpp"
#include "s2sd/errors.hpp"
#include "s2sd/gradcheck.hpp"
#include "test_support.hpp"

using namespace s2sd;
using s2sd::testing::random_tensor;

TEST_CASE("sum of squares") {
  std::vector<Tensor> params{Tensor::row(std::vector<double>{1, 2, 3})};
  auto r = value_and_grad([](Graph&, std::span<const Var> p) { return sum(p[0] * p[0]); }, params);
  CHECK(r.value == 14.0);
  CHECK(s2sd::testing::values(r.grads[0]) == std::vector<double>{2, 4, 6});
}

TEST_CASE("barrier kills one factor") {
  std::vector<Tensor> params{Tensor::row(std::vector<double>{1, 2})};
  auto r = value_and_grad(
      [](Graph&, std::span<const Var> p) { return sum(stop_gradient(p[0]) * p[0]); }, params);
  CHECK(r.value == 5.0);
  CHECK(s2sd::testing::values(r.grads[0]) == std::vector<double>{1, 2});
}

TEST_CASE("stop_gradient of a scalar has zero derivative") {
  std::vector<Tensor> params{Tensor::scalar(2.5)};
  auto r = value_and_grad(
      [](Graph&, std::span<const Var> p) { return sum(stop_gradient(p[0])); }, params);
  CHECK(r.value == 2.5);
  CHECK(r.grads[0].item() == 0.0);
}

TEST_CASE("stop_gradient is idempotent") {
  Graph g;
  Var p = g.parameter(Tensor::row(std::vector<double>{1, -2}));
  Var s1 = stop_gradient(p);
  Var s2 = stop_gradient(s1);
  CHECK(s2.id() == s1.id());
  Var loss = sum(s2 * p);
  g.backward(loss);
  CHECK(s2sd::testing::values(p.grad()) == std::vector<double>{1, -2});
}

TEST_CASE("finite differences on textbook functions") {
  std::vector<Tensor> three{Tensor::scalar(3.0)};
  auto sq = finite_difference_grad([](Graph&, std::span<const Var> p) { return sum(p[0] * p[0]); },
                                   three, 1e-5);
  CHECK(std::abs(sq[0].item() - 6.0) < 1e-9);
  std::vector<Tensor> zero{Tensor::scalar(0.0)};
  auto ex = finite_difference_grad([](Graph&, std::span<const Var> p) { return sum(exp(p[0])); },
                                   zero, 1e-5);
  CHECK(std::abs(ex[0].item() - 1.0) < 1e-9);
  CHECK_THROWS_AS(finite_difference_grad([](Graph&, std::span<const Var> p) { return sum(p[0]); },
                                         zero, 0.0),
                  std::invalid_argument);
}

namespace {

// Exercises every primitive: matmul, add_row, relu, exp, log, sqrt,
// maximum, softmax, normalization, concatenation, gather and reshape.
Var three_layer(Graph&, std::span<const Var> p) {
  Var x = p[0];
  Var h1 = relu(add_row(matmul_nt(x, p[1]), p[2]));
  Var h2 = l2_normalize_rows(add_row(matmul_nt(h1, p[3]), p[4]));
  Var h3 = softmax_rows(scale(matmul_nt(h2, p[5]), 2.0));
  Var parts[] = {h3, h2};
  Var cat = concat_cols(parts);
  Var logs = log(add_scalar(cat, 2.0));
  Var roots = sqrt(add_scalar(exp(scale(logs, 0.5)), 1.0));
  Var flat = reshape(mul(roots, maximum(cat, -0.5)), {1, cat.value().size()});
  std::size_t picks[] = {0, 3, 5, 7};
  return add(mean(gather(flat, picks)), sum(transpose(div(row_sums(h3), add_scalar(row_sums(h2), 3.0)))));
}

}  // namespace

TEST_CASE("random three-layer composition matches central differences") {
  for (std::uint64_t seed = 0; seed < 5; ++seed) {
    Rng rng(seed);
    std::vector<Tensor> params{
        random_tensor({6, 5}, rng), random_tensor({4, 5}, rng), random_tensor({1, 4}, rng),
        random_tensor({3, 4}, rng), random_tensor({1, 3}, rng), random_tensor({3, 3}, rng)};
    const double err = s2sd::testing::gradient_error(three_layer, params, 1e-5);
    CAPTURE(seed);
    CHECK(err < 1e-6);
  }
}

TEST_CASE("backward visits each node once and is repeatable") {
  Rng rng(11);
  std::vector<Tensor> params{
      random_tensor({6, 5}, rng), random_tensor({4, 5}, rng), random_tensor({1, 4}, rng),
      random_tensor({3, 4}, rng), random_tensor({1, 3}, rng), random_tensor({3, 3}, rng)};
  Graph g;
  std::vector<Var> vars;
  for (const auto& t : params) vars.push_back(g.parameter(t));
  Var loss = three_layer(g, vars);
  g.backward(loss);
  CHECK(g.last_backward_visits() == g.size());
  std::vector<Tensor> first;
  for (const auto& v : vars) first.push_back(v.grad());
  g.backward(loss);
  for (std::size_t i = 0; i < vars.size(); ++i) CHECK(vars[i].grad() == first[i]);
  auto again = value_and_grad(three_layer, params);
  for (std::size_t i = 0; i < vars.size(); ++i) CHECK(again.grads[i] == first[i]);
}

TEST_CASE("shape errors name the primitive and shapes") {
  Graph g;
  Var a = g.parameter(Tensor({2, 3}, 1.0));
  Var b = g.parameter(Tensor({2, 3}, 1.0));
  try {
    matmul(a, b);
    FAIL("expected ShapeError");
  } catch (const ShapeError& e) {
    const std::string what = e.what();
    CHECK(what.find("matmul") != std::string::npos);
    CHECK(what.find("2x3") != std::string::npos);
  }
  CHECK_THROWS_AS(add(a, g.parameter(Tensor({3, 2}, 1.0))), ShapeError);
}

TEST_CASE("non-finite intermediate names the node") {
  Graph g;
  Var a = g.parameter(Tensor::row(std::vector<double>{0.0, 1.0}));
  try {
    log(a);
    FAIL("expected NonFiniteError");
  } catch (const NonFiniteError& e) {
    CHECK(e.op() == "log");
    CHECK(e.node() == 1);
  }
}

TEST_CASE("softmax and normalization numerics") {
  Graph g;
  Var big = g.constant(Tensor::row(std::vector<double>{1000.0, 1001.0}));
  Var s = softmax_rows(big);
  CHECK(std::abs(s.value()[1] - 1.0 / (1.0 + std::exp(-1.0))) < 1e-12);
  Var z = g.parameter(Tensor::row(std::vector<double>{0.0, 0.0}));
  Var n = l2_normalize_rows(z);
  CHECK(n.value().all_finite());
  g.backward(sum(n));
  CHECK(z.grad().all_finite());
  Var huge = g.constant(Tensor::row(std::vector<double>{3e300, -4e300}));
  Tensor u = l2_normalize_rows(huge).value();
  CHECK(std::abs(u[0] - 0.6) < 1e-15);
  CHECK(std::abs(u[1] + 0.8) < 1e-15);
}
