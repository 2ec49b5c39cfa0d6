// SPDX-License-Identifier: Apache-2.0
//
// Skill-modular Transformer encoder.
//
// Every layer is post-LN: x = LN(x + Attn(x)), then x = LN(x + F(x)). In the
// top num_skill_layers layers F is the skill bank: each active skill's FFN
// runs on the attention output and the results are averaged,
//   F(x) = mean_{k in S} FFN_k(x),
// so inactive skills are never evaluated and receive no gradient.
#pragma once

#include <algorithm>
#include <random>
#include <set>
#include <span>
#include <string>
#include <vector>

#include "skillnet/autodiff.hpp"
#include "skillnet/model.hpp"
#include "skillnet/layers.hpp"
#include "skillnet/moe.hpp"

namespace skillnet {

/// Token-level encoder input, row-major [batch x seq_len].
struct EncoderInput {
  std::size_t batch = 0;
  std::size_t seq_len = 0;
  std::vector<int> token_ids;
  std::vector<int> segment_ids;
  std::vector<int> attention_mask;  // 1 = real token, 0 = padding

  void validate(const EncoderConfig& cfg) const {
    const std::size_t n = batch * seq_len;
    if (token_ids.size() != n || segment_ids.size() != n || attention_mask.size() != n)
      throw DimensionError("encoder input arrays do not match batch x seq_len");
    if (seq_len > cfg.max_seq_len) throw DimensionError("sequence longer than max_seq_len");
    for (std::size_t i = 0; i < n; ++i) {
      if (token_ids[i] < 0 || static_cast<std::size_t>(token_ids[i]) >= cfg.vocab_size)
        throw DataError("token id " + std::to_string(token_ids[i]) + " outside vocabulary");
      if (segment_ids[i] < 0 || static_cast<std::size_t>(segment_ids[i]) >= cfg.type_vocab_size)
        throw DataError("segment id outside type vocabulary");
    }
  }
};

/// Sorted, deduplicated, range-checked active skill indices.
inline std::vector<std::size_t> validate_active(std::span<const std::size_t> active, std::size_t num_skills) {
  if (active.empty()) throw RoutingError("active skill set is empty");
  std::vector<std::size_t> s(active.begin(), active.end());
  for (std::size_t k : s)
    if (k >= num_skills)
      throw RoutingError("skill index " + std::to_string(k) + " out of range for " + std::to_string(num_skills) +
                         " skills");
  std::sort(s.begin(), s.end());
  s.erase(std::unique(s.begin(), s.end()), s.end());
  return s;
}

struct EncodeOptions {
  // Needed only when config.dropout > 0 (training).
  std::mt19937_64* dropout_rng = nullptr;
};

/// Average of the active skills' FFN outputs, before residual and norm.
inline Var skill_bank_output(Tape& tape, Model& m, std::size_t layer, Var x, std::span<const std::size_t> active) {
  const auto s = validate_active(active, m.registry.size());
  std::vector<Var> outs;
  outs.reserve(s.size());
  for (std::size_t k : s) outs.push_back(ffn(tape, m, names::skill_prefix(layer, m.registry.id_at(k)), x));
  return outs.size() == 1 ? outs.front() : mean_of(outs);
}

/// LN(x + mean_{k in S} FFN_k(x)) for skill-modular layer `layer`.
inline Var skill_ffn_sublayer(Tape& tape, Model& m, std::size_t layer, Var x, std::span<const std::size_t> active) {
  Var pooled = skill_bank_output(tape, m, layer, x, active);
  return post_norm(tape, m, names::layer(layer) + ".ffn.ln.", add(x, pooled));
}

inline Var moe_ffn_sublayer(Tape& tape, Model& m, std::size_t layer, Var x) {
  Var mixed = moe_output(tape, m, layer, x);
  return post_norm(tape, m, names::layer(layer) + ".ffn.ln.", add(x, mixed));
}

inline Var attention_sublayer(Tape& tape, Model& m, std::size_t layer, Var x, const EncoderInput& in,
                              const EncodeOptions& opt) {
  const std::string a = names::layer(layer) + ".attention.";
  Var q = add_bias(matmul(x, tape.param(m.param(a + "wq"))), tape.param(m.param(a + "bq")));
  Var k = matmul(x, tape.param(m.param(a + "wk")));
  Var v = add_bias(matmul(x, tape.param(m.param(a + "wv"))), tape.param(m.param(a + "bv")));
  Var ctx = attention(q, k, v, in.attention_mask, {in.batch, in.seq_len, m.config.num_heads});
  Var o = add_bias(matmul(ctx, tape.param(m.param(a + "wo"))), tape.param(m.param(a + "bo")));
  if (opt.dropout_rng) o = dropout(o, m.config.dropout, *opt.dropout_rng);
  return post_norm(tape, m, a + "ln.", add(x, o));
}

inline Var embed(Tape& tape, Model& m, const EncoderInput& in) {
  std::vector<int> positions(in.batch * in.seq_len);
  for (std::size_t b = 0; b < in.batch; ++b)
    for (std::size_t i = 0; i < in.seq_len; ++i) positions[b * in.seq_len + i] = static_cast<int>(i);
  Var x = embedding(tape.param(m.param("embeddings.token")), in.token_ids);
  x = add(x, embedding(tape.param(m.param("embeddings.position")), positions));
  x = add(x, embedding(tape.param(m.param("embeddings.segment")), in.segment_ids));
  return post_norm(tape, m, "embeddings.ln.", x);
}

/// Hidden states [batch*seq_len x hidden_dim] under active skill set S.
inline Var encode(Tape& tape, Model& m, const EncoderInput& in, std::span<const std::size_t> active,
                  const EncodeOptions& opt = {}) {
  in.validate(m.config);
  const auto s = validate_active(active, m.registry.size());
  Var x = embed(tape, m, in);
  for (std::size_t l = 0; l < m.config.num_layers; ++l) {
    x = attention_sublayer(tape, m, l, x, in, opt);
    if (!m.config.is_modular_layer(l)) {
      Var f = ffn(tape, m, names::plain_ffn_prefix(l), x);
      if (opt.dropout_rng) f = dropout(f, m.config.dropout, *opt.dropout_rng);
      x = post_norm(tape, m, names::layer(l) + ".ffn.ln.", add(x, f));
    } else if (m.config.ffn_kind == FfnKind::skill) {
      Var f = skill_bank_output(tape, m, l, x, s);
      if (opt.dropout_rng) f = dropout(f, m.config.dropout, *opt.dropout_rng);
      x = post_norm(tape, m, names::layer(l) + ".ffn.ln.", add(x, f));
    } else {
      Var f = moe_output(tape, m, l, x);
      if (opt.dropout_rng) f = dropout(f, m.config.dropout, *opt.dropout_rng);
      x = post_norm(tape, m, names::layer(l) + ".ffn.ln.", add(x, f));
    }
  }
  return x;
}

/// Encoder parameters touched by a forward/backward pass under S.
inline std::set<std::string> active_parameter_names(const Model& m, std::span<const std::size_t> active) {
  const auto s = validate_active(active, m.registry.size());
  std::set<std::string> out = m.shared_encoder_params();
  for (std::size_t k : s) {
    auto sp = m.skill_params(m.registry.id_at(k));
    out.insert(sp.begin(), sp.end());
  }
  return out;
}

/// Parameters a single token actually uses: for MoE layers only the gate and
/// two experts count.
inline std::size_t activated_parameter_count(const Model& m, std::span<const std::size_t> active) {
  std::size_t n = m.params.count(active_parameter_names(m, active));
  if (m.config.ffn_kind == FfnKind::moe) {
    const std::size_t modular = std::min(m.config.num_skill_layers, m.config.num_layers);
    const std::size_t idle = m.config.num_experts > 2 ? m.config.num_experts - 2 : 0;
    n -= modular * idle * m.ffn_param_count();
  }
  return n;
}

}  // namespace skillnet
