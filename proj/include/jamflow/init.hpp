#pragma once

#include <cmath>
#include <string>

#include "jamflow/tensor.hpp"

namespace jamflow {
inline namespace JAMFLOW_PRECISION {

// U(-1/sqrt(fan_in), 1/sqrt(fan_in)), the usual default for linear layers.
inline Tensor init_uniform(Shape shape, std::size_t fan_in, CounterRng rng, std::string name) {
  const double bound = 1.0 / std::sqrt(static_cast<double>(fan_in));
  std::vector<Scalar> v(shape_numel(shape));
  for (auto& x : v) x = static_cast<Scalar>(rng.uniform(-bound, bound));
  return Tensor::parameter(std::move(shape), std::move(v), std::move(name));
}

inline Tensor init_normal(Shape shape, double stddev, CounterRng rng, std::string name) {
  std::vector<Scalar> v(shape_numel(shape));
  for (auto& x : v) x = static_cast<Scalar>(rng.normal() * stddev);
  return Tensor::parameter(std::move(shape), std::move(v), std::move(name));
}

inline Tensor init_zeros(Shape shape, std::string name) {
  std::vector<Scalar> v(shape_numel(shape), 0);
  return Tensor::parameter(std::move(shape), std::move(v), std::move(name));
}

}  // namespace JAMFLOW_PRECISION
}  // namespace jamflow
