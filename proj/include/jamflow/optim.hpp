#pragma once

#include <cstdint>
#include <span>
#include <string>
#include <vector>

#include "jamflow/tensor.hpp"

namespace jamflow {
inline namespace JAMFLOW_PRECISION {

struct AdamConfig {
  double lr = 1e-3;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
};

struct OptimizerState {
  AdamConfig config;
  std::uint64_t step = 0;
  std::vector<std::vector<Scalar>> m;
  std::vector<std::vector<Scalar>> v;

  void init(std::span<const Tensor> params);
};

// One bias-corrected Adam update. `lr` overrides config.lr so schedules can
// stay outside the state. Throws NumericError naming the first parameter whose
// gradient is not finite; in that case nothing is modified.
void adam_step(std::span<Tensor> params, std::span<const std::vector<Scalar>> grads, OptimizerState& state,
               double lr);
inline void adam_step(std::span<Tensor> params, std::span<const std::vector<Scalar>> grads, OptimizerState& state) {
  adam_step(params, grads, state, state.config.lr);
}

double global_norm(std::span<const std::vector<Scalar>> grads);
// Rescales so the global norm is at most max_norm; returns the norm before clipping.
double clip_global_norm(std::span<std::vector<Scalar>> grads, double max_norm);

}  // namespace JAMFLOW_PRECISION
}  // namespace jamflow
