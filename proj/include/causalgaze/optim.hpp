#pragma once

#include <cmath>
#include <cstdint>
#include <string>
#include <vector>

#include "causalgaze/error.hpp"
#include "causalgaze/tensor.hpp"

namespace causalgaze::train {

struct SchedulerConfig {
  std::uint64_t t0 = 10;
  std::uint64_t t_mult = 2;
  double eta_min = 1e-6;
};

/// Cosine annealing with warm restarts, stepped per epoch. Cycle i lasts
/// t0 * t_mult^i epochs; lr is lr0 at every cycle start.
inline double cosine_warm_restart_lr(std::uint64_t epoch, double lr0, const SchedulerConfig& s) {
  if (s.t0 == 0 || s.t_mult == 0) throw ConfigError("scheduler: T0 and Tmult must be >= 1");
  std::uint64_t t_cur = epoch;
  std::uint64_t t_i = s.t0;
  while (t_cur >= t_i) {
    t_cur -= t_i;
    t_i *= s.t_mult;
  }
  double c;
  if (t_cur == 0) c = 1.0;
  else if (2 * t_cur == t_i) c = 0.0;
  else c = std::cos(M_PI * static_cast<double>(t_cur) / static_cast<double>(t_i));
  // Written so that c = 1, 0, -1 give lr0, the midpoint and eta_min without rounding drift.
  return ((1.0 + c) * lr0 + (1.0 - c) * s.eta_min) / 2.0;
}

struct AdamWConfig {
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
  double weight_decay = 0.01;
};

struct AdamWState {
  std::vector<Tensor> m, v;
  std::uint64_t t = 0;
};

/// One decoupled-weight-decay Adam step over matching (param, grad) lists.
/// Nothing is modified when any gradient is non-finite.
inline void adamw_step(std::vector<Tensor*> params, const std::vector<Tensor>& grads,
                       const std::vector<std::string>& names, AdamWState& state, double lr, const AdamWConfig& cfg) {
  if (params.size() != grads.size()) throw ShapeError("adamw: parameter/gradient count mismatch");
  for (std::size_t k = 0; k < params.size(); ++k) {
    const std::string name = k < names.size() ? names[k] : "#" + std::to_string(k);
    if (!params[k]->same_shape(grads[k])) {
      throw ShapeError("adamw: gradient shape " + grads[k].shape_string() + " for parameter " + name + " " +
                       params[k]->shape_string());
    }
    if (!grads[k].all_finite()) throw NumericError("non-finite gradient for parameter " + name);
  }
  if (state.m.empty()) {
    for (const Tensor* p : params) {
      state.m.emplace_back(p->rows(), p->cols());
      state.v.emplace_back(p->rows(), p->cols());
    }
  }
  if (state.m.size() != params.size()) throw ShapeError("adamw: optimizer state does not match parameters");
  ++state.t;
  const double bc1 = 1.0 - std::pow(cfg.beta1, static_cast<double>(state.t));
  const double bc2 = 1.0 - std::pow(cfg.beta2, static_cast<double>(state.t));
  for (std::size_t k = 0; k < params.size(); ++k) {
    Tensor& p = *params[k];
    Tensor& m = state.m[k];
    Tensor& v = state.v[k];
    const Tensor& g = grads[k];
    for (std::size_t i = 0; i < p.size(); ++i) {
      m[i] = cfg.beta1 * m[i] + (1.0 - cfg.beta1) * g[i];
      v[i] = cfg.beta2 * v[i] + (1.0 - cfg.beta2) * g[i] * g[i];
      const double m_hat = m[i] / bc1;
      const double v_hat = v[i] / bc2;
      p[i] = p[i] - lr * (m_hat / (std::sqrt(v_hat) + cfg.eps) + cfg.weight_decay * p[i]);
    }
  }
}

}  // namespace causalgaze::train
