#include "s2sd/gradcheck.hpp"

#include <algorithm>
#include <cmath>
#include <stdexcept>

#include "s2sd/errors.hpp"

namespace s2sd {

namespace {
std::vector<Var> bind(Graph& g, std::span<const Tensor> params) {
  std::vector<Var> vars;
  vars.reserve(params.size());
  for (const auto& p : params) vars.push_back(g.parameter(p));
  return vars;
}
}  // namespace

ValueAndGrad value_and_grad(const LossFn& loss, std::span<const Tensor> params) {
  Graph g;
  auto vars = bind(g, params);
  Var out = loss(g, vars);
  g.backward(out);
  ValueAndGrad result;
  result.value = out.item();
  result.grads.reserve(vars.size());
  for (const Var& v : vars) result.grads.push_back(v.grad());
  return result;
}

namespace {
double evaluate_with(const LossFn& loss, std::span<const Tensor> params,
                     std::vector<Tensor>* stops_in, std::vector<Tensor>* stops_out) {
  Graph g;
  if (stops_in) g.replay_stops(*stops_in);
  std::vector<Var> vars;
  vars.reserve(params.size());
  for (const auto& p : params) vars.push_back(g.constant(p));
  const double value = loss(g, vars).item();
  if (stops_out) *stops_out = g.stop_values();
  return value;
}
}  // namespace

double evaluate_loss(const LossFn& loss, std::span<const Tensor> params) {
  return evaluate_with(loss, params, nullptr, nullptr);
}

std::vector<Tensor> finite_difference_grad(const LossFn& loss, std::span<const Tensor> params,
                                           double h) {
  if (!(h > 0.0)) throw std::invalid_argument("finite_difference_grad: step must be positive");
  std::vector<Tensor> work(params.begin(), params.end());
  std::vector<Tensor> stops;
  evaluate_with(loss, work, nullptr, &stops);
  std::vector<Tensor> grads;
  grads.reserve(work.size());
  for (std::size_t t = 0; t < work.size(); ++t) {
    Tensor g(work[t].shape());
    for (std::size_t i = 0; i < work[t].size(); ++i) {
      const double orig = work[t][i];
      work[t][i] = orig + h;
      const double up = evaluate_with(loss, work, &stops, nullptr);
      work[t][i] = orig - h;
      const double down = evaluate_with(loss, work, &stops, nullptr);
      work[t][i] = orig;
      g[i] = (up - down) / (2.0 * h);
    }
    grads.push_back(std::move(g));
  }
  return grads;
}

double max_relative_error(std::span<const Tensor> a, std::span<const Tensor> b, double floor) {
  if (a.size() != b.size()) throw ShapeError("max_relative_error: tensor count mismatch");
  double worst = 0.0;
  for (std::size_t t = 0; t < a.size(); ++t) {
    if (a[t].shape() != b[t].shape()) {
      throw ShapeError("max_relative_error: " + shape_string(a[t].shape()) + " vs " +
                       shape_string(b[t].shape()));
    }
    double scale = floor, diff = 0.0;
    for (std::size_t i = 0; i < a[t].size(); ++i) {
      scale = std::max({scale, std::abs(a[t][i]), std::abs(b[t][i])});
      diff = std::max(diff, std::abs(a[t][i] - b[t][i]));
    }
    worst = std::max(worst, diff / scale);
  }
  return worst;
}

}  // namespace s2sd
