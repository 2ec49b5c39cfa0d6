// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <map>
#include <set>
#include <string>

#include "skillnet/autodiff.hpp"

namespace skillnet {

struct AdamConfig {
  double beta1 = 0.9;
  double beta2 = 0.98;
  double eps = 1e-6;
};

struct AdamSlot {
  Tensor m;
  Tensor v;
  std::uint64_t step = 0;  // updates this parameter has actually received
};

/// Moments and step counts are per parameter so that sparsely activated
/// skills get bias correction from their own update count.
struct AdamState {
  AdamConfig config;
  std::map<std::string, AdamSlot> slots;

  AdamSlot& slot(const Parameter& p) {
    auto it = slots.find(p.name);
    if (it == slots.end()) it = slots.emplace(p.name, AdamSlot{Tensor(p.value.shape()), Tensor(p.value.shape()), 0}).first;
    return it->second;
  }
};

/// Bias-corrected Adam over `active` only; every other parameter keeps its
/// value, moments and step count untouched.
inline void adam_update(ParameterStore& params, AdamState& state, const std::set<std::string>& active, double lr) {
  const auto& c = state.config;
  for (const auto& name : active) {
    Parameter& p = params.get(name);
    AdamSlot& s = state.slot(p);
    ++s.step;
    const double bc1 = 1.0 - std::pow(c.beta1, static_cast<double>(s.step));
    const double bc2 = 1.0 - std::pow(c.beta2, static_cast<double>(s.step));
    for (std::size_t i = 0; i < p.size(); ++i) {
      const double g = p.grad[i];
      s.m[i] = c.beta1 * s.m[i] + (1.0 - c.beta1) * g;
      s.v[i] = c.beta2 * s.v[i] + (1.0 - c.beta2) * g * g;
      p.value[i] -= lr * (s.m[i] / bc1) / (std::sqrt(s.v[i] / bc2) + c.eps);
    }
  }
}

/// Scales the grads of `names` so their joint L2 norm is at most max_norm.
/// Returns the norm before clipping.
inline double clip_grad_norm(ParameterStore& params, const std::set<std::string>& names, double max_norm) {
  double sq = 0.0;
  for (const auto& n : names)
    for (double g : params.get(n).grad.data()) sq += g * g;
  const double norm = std::sqrt(sq);
  if (max_norm > 0.0 && norm > max_norm) {
    const double k = max_norm / norm;
    for (const auto& n : names)
      for (double& g : params.get(n).grad.storage()) g *= k;
  }
  return norm;
}

/// Linear warmup to peak, then linear decay to zero at total_steps.
struct LrSchedule {
  double peak = 1e-3;
  std::size_t warmup_steps = 200;
  std::size_t total_steps = 2000;

  void validate() const {
    if (warmup_steps == 0 || warmup_steps > total_steps) throw ConfigError("schedule needs 0 < warmup <= total");
    if (!(peak > 0.0)) throw ConfigError("peak learning rate must be positive");
  }
};

inline double lr_at(const LrSchedule& s, std::size_t step) {
  if (step >= s.total_steps) return 0.0;
  if (step <= s.warmup_steps) return s.peak * static_cast<double>(step) / static_cast<double>(s.warmup_steps);
  return s.peak * static_cast<double>(s.total_steps - step) / static_cast<double>(s.total_steps - s.warmup_steps);
}

}  // namespace skillnet
