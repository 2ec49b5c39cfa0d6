// SPDX-License-Identifier: Apache-2.0
//
// Exhaustive enumeration over all K^L label paths of a linear-chain CRF.
#pragma once

#include <cmath>
#include <vector>

#include "skillnet/tensor.hpp"

namespace skillnet::oracles {

struct CrfEnumeration {
  double log_partition = 0.0;
  std::vector<int> best_path;  // first maximum in lexicographic order
  double best_score = 0.0;
};

inline double brute_path_score(const Tensor& em, const Tensor& trans, const Tensor& start, const Tensor& end,
                               const std::vector<int>& y) {
  const std::size_t K = em.dim(1);
  double s = start[static_cast<std::size_t>(y[0])];
  for (std::size_t t = 0; t < y.size(); ++t) {
    s += em.at(t, static_cast<std::size_t>(y[t]));
    if (t > 0) s += trans[static_cast<std::size_t>(y[t - 1]) * K + static_cast<std::size_t>(y[t])];
  }
  return s + end[static_cast<std::size_t>(y.back())];
}

template <typename Visit>
void for_each_path(std::size_t L, std::size_t K, Visit&& visit) {
  std::vector<int> y(L, 0);
  while (true) {
    visit(y);
    std::size_t t = L;
    while (t > 0) {
      --t;
      if (static_cast<std::size_t>(++y[t]) < K) break;
      y[t] = 0;
      if (t == 0) return;
    }
    if (L == 0) return;
  }
}

inline CrfEnumeration enumerate_crf(const Tensor& em, const Tensor& trans, const Tensor& start, const Tensor& end) {
  const std::size_t L = em.dim(0), K = em.dim(1);
  std::vector<double> scores;
  CrfEnumeration out;
  out.best_score = -INFINITY;
  for_each_path(L, K, [&](const std::vector<int>& y) {
    const double s = brute_path_score(em, trans, start, end, y);
    scores.push_back(s);
    if (s > out.best_score) {
      out.best_score = s;
      out.best_path = y;
    }
  });
  double mx = -INFINITY;
  for (double s : scores) mx = std::max(mx, s);
  double z = 0.0;
  for (double s : scores) z += std::exp(s - mx);
  out.log_partition = mx + std::log(z);
  return out;
}

}  // namespace skillnet::oracles
