#pragma once

// LAMB optimizer with per-parameter trust ratio, plus the linear
// warm-up / linear-decay learning-rate schedule.

#include <cmath>
#include <cstdint>
#include <vector>

#include "rtdp/errors.hpp"
#include "rtdp/tensor.hpp"

namespace rtdp {

template <typename T>
struct LambConfigT {
  T lr_peak = T(6e-3);
  T beta1 = T(0.878);
  T beta2 = T(0.974);
  T eps = T(1e-6);
  T weight_decay = T(0.01);
  T trust_clip = T(10);
};

template <typename T>
struct LambStateT {
  int64_t step_count = 0;  // shared across parameters
  std::vector<std::vector<T>> m, v;

  void init(const ParameterStoreT<T>& params) {
    step_count = 0;
    m.clear();
    v.clear();
    for (size_t i = 0; i < params.size(); ++i) {
      m.emplace_back(params[i].tensor.numel(), T(0));
      v.emplace_back(params[i].tensor.numel(), T(0));
    }
  }
};

// One LAMB update:
//   m <- b1 m + (1-b1) g            v <- b2 v + (1-b2) g^2
//   mhat = m / (1-b1^t)             vhat = v / (1-b2^t)
//   u = mhat / (sqrt(vhat) + eps) + wd * w    (wd = 0 when decay-exempt)
//   phi = clamp(|w| / |u|, 0, trust_clip), 1 when either norm is zero
//   w <- w - lr * phi * u
template <typename T>
void lamb_step(ParameterStoreT<T>& params, LambStateT<T>& state, const LambConfigT<T>& cfg,
               T lr) {
  if (lr < T(0)) throw contract_error("lamb_step: negative learning rate");
  if (state.m.size() != params.size()) state.init(params);
  ++state.step_count;
  const T bc1 = T(1) - std::pow(cfg.beta1, static_cast<T>(state.step_count));
  const T bc2 = T(1) - std::pow(cfg.beta2, static_cast<T>(state.step_count));

  std::vector<T> update;
  for (size_t pi = 0; pi < params.size(); ++pi) {
    auto& p = params[pi];
    auto& w = p.tensor.value();
    const std::vector<T> g = p.tensor.grad_or_zeros();
    for (size_t i = 0; i < g.size(); ++i)
      if (!std::isfinite(static_cast<double>(g[i])))
        throw error("lamb_step: non-finite gradient in parameter '" + p.name + "'");

    auto& m = state.m[pi];
    auto& v = state.v[pi];
    const T wd = p.decay_exempt ? T(0) : cfg.weight_decay;
    update.assign(w.size(), T(0));
    double w_norm_sq = 0, u_norm_sq = 0;
    for (size_t i = 0; i < w.size(); ++i) {
      m[i] = cfg.beta1 * m[i] + (T(1) - cfg.beta1) * g[i];
      v[i] = cfg.beta2 * v[i] + (T(1) - cfg.beta2) * g[i] * g[i];
      const T mhat = m[i] / bc1;
      const T vhat = v[i] / bc2;
      const T u = mhat / (std::sqrt(vhat) + cfg.eps) + wd * w[i];
      update[i] = u;
      w_norm_sq += static_cast<double>(w[i]) * static_cast<double>(w[i]);
      u_norm_sq += static_cast<double>(u) * static_cast<double>(u);
    }
    const T w_norm = static_cast<T>(std::sqrt(w_norm_sq));
    const T u_norm = static_cast<T>(std::sqrt(u_norm_sq));
    T trust = (w_norm > T(0) && u_norm > T(0)) ? w_norm / u_norm : T(1);
    trust = std::min(std::max(trust, T(0)), cfg.trust_clip);
    const T step_size = lr * trust;
    for (size_t i = 0; i < w.size(); ++i) w[i] -= step_size * update[i];
  }
}

struct Schedule {
  int64_t warmup_steps = 0;
  int64_t total_steps = 0;

  void validate() const {
    if (!(warmup_steps > 0 && warmup_steps < total_steps))
      throw config_error("schedule: need 0 < warmup (" + std::to_string(warmup_steps) +
                         ") < total (" + std::to_string(total_steps) + ")");
  }
};

// Linear warm-up to lr_peak at warmup_steps, then linear decay to zero at
// total_steps.
inline double lr_at(int64_t step, const Schedule& sched, double lr_peak) {
  sched.validate();
  if (step < 0 || step > sched.total_steps)
    throw contract_error("lr_at: step " + std::to_string(step) + " outside [0, " +
                         std::to_string(sched.total_steps) + "]");
  const double warm = static_cast<double>(step) / static_cast<double>(sched.warmup_steps);
  const double decay = static_cast<double>(sched.total_steps - step) /
                       static_cast<double>(sched.total_steps - sched.warmup_steps);
  return lr_peak * std::min(warm, decay);
}

using LambConfig = LambConfigT<float>;
using LambState = LambStateT<float>;

}  // namespace rtdp
