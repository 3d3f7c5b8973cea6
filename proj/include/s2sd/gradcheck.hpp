#pragma once

#include <functional>
#include <span>
#include <vector>

#include "s2sd/autodiff.hpp"

namespace s2sd {

/// Builds a scalar loss on `graph` from one Var per parameter tensor.
using LossFn = std::function<Var(Graph& graph, std::span<const Var> params)>;

struct ValueAndGrad {
  double value = 0.0;
  std::vector<Tensor> grads;
};

/// Loss value and one gradient per parameter from a single reverse sweep.
ValueAndGrad value_and_grad(const LossFn& loss, std::span<const Tensor> params);

/// Loss value only; no gradient bookkeeping is done.
double evaluate_loss(const LossFn& loss, std::span<const Tensor> params);

/// Central differences (f(p + h e_i) - f(p - h e_i)) / 2h for every coordinate.
/// stop_gradient outputs keep their values from the unperturbed evaluation.
std::vector<Tensor> finite_difference_grad(const LossFn& loss, std::span<const Tensor> params,
                                           double h);

/// max_i |a_i - b_i| / max(max|a|, max|b|, floor), taken over every tensor pair.
double max_relative_error(std::span<const Tensor> a, std::span<const Tensor> b,
                          double floor = 1e-10);

}  // namespace s2sd
