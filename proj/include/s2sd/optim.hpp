#pragma once

#include <span>
#include <vector>

#include "s2sd/config.hpp"
#include "s2sd/tensor.hpp"

namespace s2sd {

struct AdamState {
  std::vector<Tensor> m;
  std::vector<Tensor> v;
  std::size_t t = 0;
};

/// Bias-corrected Adam. Weight decay is added to the gradient as an L2 term
/// (not decoupled). Moments are allocated on the first call.
void adam_step(std::span<Tensor> params, std::span<const Tensor> grads, AdamState& state,
               const AdamConfig& config);

}  // namespace s2sd
