#include "s2sd/optim.hpp"

#include <cmath>

#include "s2sd/errors.hpp"

namespace s2sd {

void adam_step(std::span<Tensor> params, std::span<const Tensor> grads, AdamState& state,
               const AdamConfig& config) {
  if (params.size() != grads.size()) throw ShapeError("adam_step: parameter/gradient count mismatch");
  if (state.m.empty()) {
    for (const auto& p : params) {
      state.m.emplace_back(p.shape(), 0.0);
      state.v.emplace_back(p.shape(), 0.0);
    }
  }
  if (state.m.size() != params.size()) throw ShapeError("adam_step: state does not match parameters");
  ++state.t;
  const double t = static_cast<double>(state.t);
  const double c1 = 1.0 - std::pow(config.beta1, t);
  const double c2 = 1.0 - std::pow(config.beta2, t);
  for (std::size_t k = 0; k < params.size(); ++k) {
    Tensor& p = params[k];
    const Tensor& g = grads[k];
    if (p.shape() != g.shape()) {
      throw ShapeError("adam_step: param " + shape_string(p.shape()) + " vs grad " + shape_string(g.shape()));
    }
    Tensor& m = state.m[k];
    Tensor& v = state.v[k];
    for (std::size_t i = 0; i < p.size(); ++i) {
      const double gi = g[i] + config.weight_decay * p[i];
      m[i] = config.beta1 * m[i] + (1.0 - config.beta1) * gi;
      v[i] = config.beta2 * v[i] + (1.0 - config.beta2) * gi * gi;
      p[i] -= config.lr * (m[i] / c1) / (std::sqrt(v[i] / c2) + config.eps);
    }
  }
}

}  // namespace s2sd
