#include "jamflow/optim.hpp"

#include <cmath>

namespace jamflow {
inline namespace JAMFLOW_PRECISION {

void OptimizerState::init(std::span<const Tensor> params) {
  step = 0;
  m.clear();
  v.clear();
  for (const auto& p : params) {
    m.emplace_back(p.numel(), 0);
    v.emplace_back(p.numel(), 0);
  }
}

void adam_step(std::span<Tensor> params, std::span<const std::vector<Scalar>> grads, OptimizerState& state,
               double lr) {
  if (grads.size() != params.size()) throw ShapeError("adam_step", "gradient count does not match parameter count");
  if (state.m.size() != params.size()) state.init(params);
  for (std::size_t i = 0; i < params.size(); ++i) {
    if (grads[i].size() != params[i].numel() || state.m[i].size() != params[i].numel()) {
      throw ShapeError("adam_step", "gradient or moment size mismatch for parameter '" + params[i].name() + "'");
    }
    for (Scalar g : grads[i]) {
      if (!std::isfinite(g)) throw NumericError("adam_step: non-finite gradient for parameter '" + params[i].name() + "'");
    }
  }

  state.step += 1;
  const auto& c = state.config;
  const double t = static_cast<double>(state.step);
  const Scalar b1 = static_cast<Scalar>(c.beta1);
  const Scalar b2 = static_cast<Scalar>(c.beta2);
  const Scalar bc1 = static_cast<Scalar>(1.0 - std::pow(c.beta1, t));
  const Scalar bc2 = static_cast<Scalar>(1.0 - std::pow(c.beta2, t));
  const Scalar step_lr = static_cast<Scalar>(lr);
  const Scalar eps = static_cast<Scalar>(c.eps);

  for (std::size_t i = 0; i < params.size(); ++i) {
    auto p = params[i].mutable_data();
    auto& m = state.m[i];
    auto& v = state.v[i];
    const auto& g = grads[i];
    for (std::size_t j = 0; j < p.size(); ++j) {
      m[j] = b1 * m[j] + (1 - b1) * g[j];
      v[j] = b2 * v[j] + (1 - b2) * g[j] * g[j];
      const Scalar m_hat = m[j] / bc1;
      const Scalar v_hat = v[j] / bc2;
      p[j] -= step_lr * m_hat / (std::sqrt(v_hat) + eps);
    }
  }
}

double global_norm(std::span<const std::vector<Scalar>> grads) {
  double total = 0;
  for (const auto& g : grads)
    for (Scalar x : g) total += static_cast<double>(x) * static_cast<double>(x);
  return std::sqrt(total);
}

double clip_global_norm(std::span<std::vector<Scalar>> grads, double max_norm) {
  const double norm = global_norm(grads);
  if (max_norm > 0 && norm > max_norm) {
    const Scalar scale = static_cast<Scalar>(max_norm / norm);
    for (auto& g : grads)
      for (auto& x : g) x *= scale;
  }
  return norm;
}

}  // namespace JAMFLOW_PRECISION
}  // namespace jamflow
