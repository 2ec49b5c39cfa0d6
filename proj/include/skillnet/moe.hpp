// SPDX-License-Identifier: Apache-2.0
//
// Mixture-of-experts FFN layer with learned top-2 token gating.
#pragma once

#include <array>
#include <cmath>
#include <span>
#include <vector>

#include "skillnet/autodiff.hpp"
#include "skillnet/layers.hpp"
#include "skillnet/model.hpp"

namespace skillnet {

struct Top2 {
  std::array<std::size_t, 2> experts{};
  std::array<double, 2> weights{};
};

/// Top-2 selection over gate logits; ties go to the lower index. The two
/// weights are a softmax over the selected logits only.
inline Top2 top2_from_logits(std::span<const double> logits) {
  if (logits.size() < 2) throw DimensionError("top-2 gating needs at least two experts");
  std::size_t a = 0;
  for (std::size_t e = 1; e < logits.size(); ++e)
    if (logits[e] > logits[a]) a = e;
  std::size_t b = a == 0 ? 1 : 0;
  for (std::size_t e = 0; e < logits.size(); ++e)
    if (e != a && logits[e] > logits[b]) b = e;
  const double mx = logits[a];
  const double ea = 1.0, eb = std::exp(logits[b] - mx);
  return {{a, b}, {ea / (ea + eb), eb / (ea + eb)}};
}

/// Routing decision for one token state [d] through gate [d x E].
inline Top2 moe_route(std::span<const double> token_state, const Tensor& gate) {
  if (gate.rank() != 2 || gate.dim(0) != token_state.size())
    throw DimensionError("moe_route: gate " + shape_str(gate.shape()) + " does not match state of length " +
                         std::to_string(token_state.size()));
  const std::size_t d = gate.dim(0), e = gate.dim(1);
  std::vector<double> logits(e, 0.0);
  for (std::size_t p = 0; p < d; ++p)
    for (std::size_t j = 0; j < e; ++j) logits[j] += token_state[p] * gate[p * e + j];
  return top2_from_logits(logits);
}

/// Dense [n x E] gate weights: zero except the two selected experts per row.
/// Gradients flow through the renormalized weights; the selection is fixed.
inline Var top2_gate(Var logits) {
  const Tensor& lv = logits.value();
  const std::size_t n = lv.rows(), e = lv.cols();
  Tensor out({n, e});
  std::vector<Top2> sel(n);
  for (std::size_t r = 0; r < n; ++r) {
    sel[r] = top2_from_logits(lv.row(r));
    out[r * e + sel[r].experts[0]] = sel[r].weights[0];
    out[r * e + sel[r].experts[1]] = sel[r].weights[1];
  }
  return logits.tape->record(std::move(out), {logits}, [l = logits.id, sel = std::move(sel), e](Tape& t, std::size_t self) {
    const Tensor& g = t.grad(self);
    auto& gl = t.grad(l);
    for (std::size_t r = 0; r < sel.size(); ++r) {
      const auto [a, b] = sel[r].experts;
      const auto [wa, wb] = sel[r].weights;
      const double ga = g[r * e + a], gb = g[r * e + b];
      const double avg = wa * ga + wb * gb;
      gl[r * e + a] += wa * (ga - avg);
      gl[r * e + b] += wb * (gb - avg);
    }
  });
}

/// Per token: w_a FFN_a(x) + w_b FFN_b(x) for the routed pair. Each expert
/// only runs on the tokens routed to it.
inline Var moe_output(Tape& tape, Model& m, std::size_t layer, Var x) {
  const std::size_t n = x.value().rows();
  Var weights = top2_gate(matmul(x, tape.param(m.param(names::gate(layer)))));
  const Tensor& wv = weights.value();
  const std::size_t experts = wv.cols();
  std::vector<Var> parts;
  for (std::size_t e = 0; e < experts; ++e) {
    std::vector<std::size_t> rows;
    for (std::size_t r = 0; r < n; ++r)
      if (wv[r * experts + e] != 0.0) rows.push_back(r);
    if (rows.empty()) continue;
    Var xe = gather_rows(x, rows);
    Var he = ffn(tape, m, names::expert_prefix(layer, e), xe);
    Var we = gather_rows(select_column(weights, e), rows);
    parts.push_back(scatter_rows(scale_rows(he, we), rows, n));
  }
  Var acc = parts.front();
  for (std::size_t i = 1; i < parts.size(); ++i) acc = add(acc, parts[i]);
  return acc;
}

}  // namespace skillnet
