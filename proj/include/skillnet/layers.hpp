// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <string>

#include "skillnet/autodiff.hpp"
#include "skillnet/model.hpp"

namespace skillnet {

/// gelu(x W1 + b1) W2 + b2 with parameters under `prefix`.
inline Var ffn(Tape& tape, Model& m, const std::string& prefix, Var x) {
  Var h = add_bias(matmul(x, tape.param(m.param(prefix + "w1"))), tape.param(m.param(prefix + "b1")));
  h = gelu(h);
  return add_bias(matmul(h, tape.param(m.param(prefix + "w2"))), tape.param(m.param(prefix + "b2")));
}

inline Var post_norm(Tape& tape, Model& m, const std::string& prefix, Var x) {
  return layer_norm(x, tape.param(m.param(prefix + "gain")), tape.param(m.param(prefix + "bias")), m.config.ln_eps);
}

}  // namespace skillnet
