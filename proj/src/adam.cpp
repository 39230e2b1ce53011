#include <cmath>

#include "rulelab/errors.hpp"
#include "rulelab/model.hpp"

namespace rulelab {

void step(PolicyModel& m, std::span<const double> grad, OptimizerState& state,
          const AdamConfig& cfg) {
  const std::size_t n = m.size();
  if (grad.size() != n) {
    throw DomainError("optimizer step: gradient has " + std::to_string(grad.size()) +
                      " entries, model has " + std::to_string(n));
  }
  double norm2 = 0.0;
  for (std::size_t i = 0; i < n; ++i) {
    if (!std::isfinite(grad[i])) {
      throw NumericalError("optimizer step: non-finite gradient entry at index " +
                           std::to_string(i));
    }
    norm2 += grad[i] * grad[i];
  }
  double clip = 1.0;
  if (cfg.max_grad_norm > 0.0) {
    const double norm = std::sqrt(norm2);
    if (norm > cfg.max_grad_norm) clip = cfg.max_grad_norm / norm;
  }
  if (state.m.size() != n) state.m.assign(n, 0.0);
  if (state.v.size() != n) state.v.assign(n, 0.0);
  ++state.step;
  const double t = static_cast<double>(state.step);
  const double bc1 = 1.0 - std::pow(cfg.beta1, t);
  const double bc2 = 1.0 - std::pow(cfg.beta2, t);
  auto p = m.params();
  for (std::size_t i = 0; i < n; ++i) {
    const double g = grad[i] * clip;
    state.m[i] = cfg.beta1 * state.m[i] + (1.0 - cfg.beta1) * g;
    state.v[i] = cfg.beta2 * state.v[i] + (1.0 - cfg.beta2) * g * g;
    const double m_hat = state.m[i] / bc1;
    const double v_hat = state.v[i] / bc2;
    p[i] -= cfg.lr * (m_hat / (std::sqrt(v_hat) + cfg.eps) + cfg.weight_decay * p[i]);
  }
}

}  // namespace rulelab
