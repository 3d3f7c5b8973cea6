#pragma once

#include <cstddef>
#include <cstdint>
#include <string>
#include <vector>

namespace s2sd {

struct GradCheckResult {
  std::string loss;
  std::uint64_t seed = 0;
  std::size_t batch = 0;
  double value = 0.0;
  double error = 0.0;  // max relative error of backward against central differences
};

/// Gradient checks for every loss, distillation kernel, composite objective
/// and distillation variant. Seed s uses a batch of 8 + 2s samples (capped at
/// 16) drawn from random heads over random features.
std::vector<GradCheckResult> run_gradient_suite(std::size_t n_seeds = 5, double h = 1e-4);

}  // namespace s2sd
