// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <algorithm>
#include <cmath>
#include <functional>
#include <random>
#include <vector>

#include "skillnet/autodiff.hpp"

namespace skillnet {

struct GradCheckOptions {
  double step = 1e-5;
  // Coordinates checked per parameter; 0 checks every coordinate.
  std::size_t max_coords_per_param = 0;
  std::uint64_t seed = 0;
  // Fourth-order stencil (f(x-2h) - 8f(x-h) + 8f(x+h) - f(x+2h)) / 12h.
  // Lets deep compositions use a larger h without truncation error.
  bool five_point = false;
};

struct GradCheckResult {
  double max_rel_error = 0.0;
  std::string worst_param;
  std::size_t worst_index = 0;
  std::size_t coords_checked = 0;
  double worst_analytic = 0.0;
  double worst_numeric = 0.0;
};

/// Compares taped gradients of a scalar function against central finite
/// differences. `f` must build its computation on the given tape from the
/// listed parameters and return a scalar. Relative error per coordinate is
/// |analytic - fd| / (|analytic| + |fd| + 1e-12).
inline GradCheckResult grad_check(const std::function<Var(Tape&)>& f, const std::vector<Parameter*>& params,
                                  GradCheckOptions opt = {}) {
  for (Parameter* p : params) p->zero_grad();
  {
    Tape tape;
    Var loss = f(tape);
    tape.backward(loss);
  }
  auto eval = [&]() {
    Tape tape;
    return f(tape).item();
  };
  GradCheckResult res;
  std::mt19937_64 rng(opt.seed);
  for (Parameter* p : params) {
    std::vector<std::size_t> coords(p->size());
    for (std::size_t i = 0; i < coords.size(); ++i) coords[i] = i;
    if (opt.max_coords_per_param && coords.size() > opt.max_coords_per_param) {
      std::shuffle(coords.begin(), coords.end(), rng);
      coords.resize(opt.max_coords_per_param);
      std::sort(coords.begin(), coords.end());
    }
    for (std::size_t i : coords) {
      const double orig = p->value[i];
      auto at = [&](double delta) {
        p->value[i] = orig + delta;
        const double v = eval();
        p->value[i] = orig;
        return v;
      };
      const double h = opt.step;
      const double fd = opt.five_point ? (8.0 * (at(h) - at(-h)) - (at(2 * h) - at(-2 * h))) / (12.0 * h)
                                       : (at(h) - at(-h)) / (2.0 * h);
      const double an = p->grad[i];
      const double rel = std::abs(an - fd) / (std::abs(an) + std::abs(fd) + 1e-12);
      ++res.coords_checked;
      if (rel > res.max_rel_error) {
        res.max_rel_error = rel;
        res.worst_param = p->name;
        res.worst_index = i;
        res.worst_analytic = an;
        res.worst_numeric = fd;
      }
    }
  }
  return res;
}

}  // namespace skillnet
