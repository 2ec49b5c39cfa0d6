// SPDX-License-Identifier: Apache-2.0
//
// Temperature-scaled multinomial task sampling:
//   p_i = |T_i| / sum_j |T_j|,   q_i = p_i^alpha / sum_j p_j^alpha.
#pragma once

#include <cmath>
#include <cstdint>
#include <random>
#include <span>
#include <vector>

#include "skillnet/error.hpp"

namespace skillnet {

inline std::vector<double> task_sampling_probs(std::span<const double> sizes, double alpha) {
  if (sizes.empty()) throw ConfigError("task sampler needs at least one task");
  if (!(alpha >= 0.0)) throw ConfigError("alpha must be >= 0");
  double total = 0.0;
  for (double s : sizes) {
    if (!(s > 0.0)) throw ConfigError("task sizes must be positive");
    total += s;
  }
  std::vector<double> q(sizes.size());
  double z = 0.0;
  for (std::size_t i = 0; i < sizes.size(); ++i) z += (q[i] = std::pow(sizes[i] / total, alpha));
  for (double& v : q) v /= z;
  return q;
}

/// Uniform double in [0, 1) from the top 53 bits; unlike
/// std::uniform_real_distribution the stream is identical across stdlibs.
inline double uniform01(std::mt19937_64& rng) { return static_cast<double>(rng() >> 11) * 0x1.0p-53; }

inline std::size_t uniform_index(std::mt19937_64& rng, std::size_t n) {
  return std::min(n - 1, static_cast<std::size_t>(uniform01(rng) * static_cast<double>(n)));
}

class TaskSampler {
 public:
  explicit TaskSampler(std::vector<double> probs) : probs_(std::move(probs)) {
    if (probs_.empty()) throw ConfigError("task sampler needs at least one task");
    double acc = 0.0;
    for (double p : probs_) {
      if (p < 0.0) throw ConfigError("negative task probability");
      cumulative_.push_back(acc += p);
    }
    if (!(acc > 0.0)) throw ConfigError("task probabilities sum to zero");
  }

  TaskSampler(std::span<const double> sizes, double alpha) : TaskSampler(task_sampling_probs(sizes, alpha)) {}

  const std::vector<double>& probs() const { return probs_; }

  std::size_t sample(std::mt19937_64& rng) const {
    const double u = uniform01(rng) * cumulative_.back();
    for (std::size_t i = 0; i < cumulative_.size(); ++i)
      if (u < cumulative_[i]) return i;
    return cumulative_.size() - 1;
  }

 private:
  std::vector<double> probs_;
  std::vector<double> cumulative_;
};

}  // namespace skillnet
