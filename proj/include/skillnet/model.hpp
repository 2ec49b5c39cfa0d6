// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cstdint>
#include <map>
#include <random>
#include <set>
#include <string>
#include <string_view>
#include <vector>

#include "skillnet/autodiff.hpp"
#include "skillnet/routing.hpp"

namespace skillnet {

enum class FfnKind { skill, moe };

inline std::string to_string(FfnKind k) { return k == FfnKind::skill ? "skill" : "moe"; }
inline FfnKind ffn_kind_from_string(const std::string& s) {
  if (s == "skill") return FfnKind::skill;
  if (s == "moe") return FfnKind::moe;
  throw ConfigError("unknown ffn kind: " + s);
}

/// Encoder geometry. Modular FFN banks (skills or MoE experts) occupy the
/// top `num_skill_layers` layers; the layers below use one plain FFN.
struct EncoderConfig {
  std::size_t vocab_size = 256;
  std::size_t max_seq_len = 64;
  std::size_t num_layers = 2;
  std::size_t num_skill_layers = 1;
  std::size_t hidden_dim = 64;
  std::size_t num_heads = 4;
  std::size_t ffn_dim = 128;
  std::size_t num_skills = 7;
  std::size_t type_vocab_size = 2;
  FfnKind ffn_kind = FfnKind::skill;
  std::size_t num_experts = 7;
  double dropout = 0.0;
  double init_std = 0.02;
  double ln_eps = 1e-12;

  void validate() const {
    if (hidden_dim == 0 || num_heads == 0 || hidden_dim % num_heads != 0)
      throw ConfigError("hidden_dim must be a positive multiple of num_heads");
    if (num_skill_layers > num_layers) throw ConfigError("num_skill_layers exceeds num_layers");
    if (num_skills < 1) throw ConfigError("num_skills must be >= 1");
    if (type_vocab_size < 2) throw ConfigError("type_vocab_size must be >= 2");
    if (vocab_size < 6 || max_seq_len < 2 || ffn_dim == 0) throw ConfigError("degenerate encoder config");
    if (ffn_kind == FfnKind::moe && num_experts < 2) throw ConfigError("MoE needs at least two experts");
    if (dropout < 0.0 || dropout >= 1.0) throw ConfigError("dropout must lie in [0, 1)");
  }

  bool is_modular_layer(std::size_t layer) const { return layer + num_skill_layers >= num_layers; }

  friend bool operator==(const EncoderConfig&, const EncoderConfig&) = default;
};

enum class HeadKind { classification, crf, span, mlm, nsp };

inline std::string to_string(HeadKind k) {
  switch (k) {
    case HeadKind::classification: return "classification";
    case HeadKind::crf: return "crf";
    case HeadKind::span: return "span";
    case HeadKind::mlm: return "mlm";
    case HeadKind::nsp: return "nsp";
  }
  return "?";
}

inline HeadKind head_kind_from_string(const std::string& s) {
  for (HeadKind k : {HeadKind::classification, HeadKind::crf, HeadKind::span, HeadKind::mlm, HeadKind::nsp})
    if (to_string(k) == s) return k;
  throw ConfigError("unknown head kind: " + s);
}

inline HeadKind head_kind_for(HeadType t) {
  switch (t) {
    case HeadType::sequence_classification:
    case HeadType::pair_classification: return HeadKind::classification;
    case HeadType::token_tagging: return HeadKind::crf;
    case HeadType::span_extraction: return HeadKind::span;
  }
  return HeadKind::classification;
}

struct HeadSpec {
  HeadKind kind = HeadKind::classification;
  std::size_t num_labels = 0;

  friend bool operator==(const HeadSpec&, const HeadSpec&) = default;
};

namespace names {

inline std::string layer(std::size_t l) { return "layer." + std::to_string(l); }
inline std::string skill_prefix(std::size_t l, std::string_view skill) {
  return layer(l) + ".ffn." + std::string(skill) + ".";
}
inline std::string plain_ffn_prefix(std::size_t l) { return layer(l) + ".ffn."; }
inline std::string expert_prefix(std::size_t l, std::size_t e) {
  return layer(l) + ".moe.expert" + std::to_string(e) + ".";
}
inline std::string gate(std::size_t l) { return layer(l) + ".moe.gate"; }
inline std::string head(std::string_view task) { return "head." + std::string(task) + "."; }

inline const std::vector<std::string>& ffn_parts() {
  static const std::vector<std::string> parts{"w1", "b1", "w2", "b2"};
  return parts;
}

}  // namespace names

// FNV-1a; seeds per-parameter initializers so a parameter's initial value
// depends only on (model seed, parameter name).
inline std::uint64_t name_hash(std::string_view s) {
  std::uint64_t h = 1469598103934665603ull;
  for (unsigned char c : s) {
    h ^= c;
    h *= 1099511628211ull;
  }
  return h;
}

/// Encoder parameters, skill registry and task heads of one model.
class Model {
 public:
  EncoderConfig config;
  SkillRegistry registry;
  ParameterStore params;
  std::map<std::string, HeadSpec> heads;
  std::uint64_t seed = 0;

  Model() = default;
  Model(const Model&) = delete;
  Model& operator=(const Model&) = delete;
  Model(Model&&) = default;
  Model& operator=(Model&&) = default;

  Model(EncoderConfig cfg, SkillRegistry reg, std::uint64_t init_seed)
      : config(cfg), registry(std::move(reg)), seed(init_seed) {
    config.num_skills = registry.size();
    config.validate();
    build_encoder();
  }

  Parameter& param(const std::string& name) { return params.get(name); }
  const Parameter& param(const std::string& name) const { return params.get(name); }

  Tensor init_weight(const std::string& name, const Shape& shape) const {
    std::mt19937_64 rng(seed ^ name_hash(name));
    return truncated_normal(shape, config.init_std, rng);
  }

  void add_weight(const std::string& name, const Shape& shape) { params.add(name, init_weight(name, shape)); }
  void add_zeros(const std::string& name, const Shape& shape) { params.add(name, Tensor(shape)); }
  void add_ones(const std::string& name, const Shape& shape) { params.add(name, Tensor(shape, 1.0)); }

  void add_ffn(const std::string& prefix) {
    const std::size_t d = config.hidden_dim, f = config.ffn_dim;
    add_weight(prefix + "w1", {d, f});
    add_zeros(prefix + "b1", {f});
    add_weight(prefix + "w2", {f, d});
    add_zeros(prefix + "b2", {d});
  }

  std::size_t ffn_param_count() const {
    const std::size_t d = config.hidden_dim, f = config.ffn_dim;
    return d * f + f + f * d + d;
  }

  void add_head(const std::string& task, HeadSpec spec) {
    if (heads.count(task)) throw ConfigError("head already exists for task " + task);
    const std::size_t d = config.hidden_dim;
    const std::string p = names::head(task);
    switch (spec.kind) {
      case HeadKind::classification:
        if (spec.num_labels < 2) throw ConfigError("classification head needs >= 2 labels");
        add_weight(p + "weight", {d, spec.num_labels});
        add_zeros(p + "bias", {spec.num_labels});
        break;
      case HeadKind::crf:
        if (spec.num_labels < 1) throw ConfigError("CRF head needs >= 1 label");
        add_weight(p + "emission.weight", {d, spec.num_labels});
        add_zeros(p + "emission.bias", {spec.num_labels});
        add_zeros(p + "transitions", {spec.num_labels, spec.num_labels});
        add_zeros(p + "start", {spec.num_labels});
        add_zeros(p + "end", {spec.num_labels});
        break;
      case HeadKind::span:
        add_weight(p + "start", {d, 1});
        add_weight(p + "end", {d, 1});
        break;
      case HeadKind::mlm:
        // Output projection is tied to the token embedding.
        add_zeros(p + "bias", {config.vocab_size});
        break;
      case HeadKind::nsp:
        add_weight(p + "pooler.weight", {d, d});
        add_zeros(p + "pooler.bias", {d});
        add_weight(p + "weight", {d, 2});
        add_zeros(p + "bias", {2});
        break;
    }
    heads[task] = spec;
  }

  std::vector<std::string> head_param_names(const std::string& task) const {
    std::vector<std::string> out;
    const std::string p = names::head(task);
    for (const auto& [n, _] : params)
      if (n.rfind(p, 0) == 0) out.push_back(n);
    return out;
  }

  /// Encoder parameters shared by every routing: embeddings, attention,
  /// plain FFNs, layer norms and MoE experts/gates.
  std::set<std::string> shared_encoder_params() const {
    std::set<std::string> out;
    for (const auto& [n, _] : params) {
      if (n.rfind("head.", 0) == 0) continue;
      if (is_skill_param(n)) continue;
      out.insert(n);
    }
    return out;
  }

  std::set<std::string> skill_params(std::string_view skill) const {
    std::set<std::string> out;
    if (config.ffn_kind != FfnKind::skill) return out;
    for (std::size_t l = 0; l < config.num_layers; ++l) {
      if (!config.is_modular_layer(l)) continue;
      for (const auto& part : names::ffn_parts()) out.insert(names::skill_prefix(l, skill) + part);
    }
    return out;
  }

  std::set<std::string> encoder_params() const {
    std::set<std::string> out;
    for (const auto& [n, _] : params)
      if (n.rfind("head.", 0) != 0) out.insert(n);
    return out;
  }

 private:
  bool is_skill_param(const std::string& n) const {
    if (config.ffn_kind != FfnKind::skill) return false;
    for (std::size_t l = 0; l < config.num_layers; ++l) {
      if (!config.is_modular_layer(l)) continue;
      for (const auto& s : registry.skills())
        if (n.rfind(names::skill_prefix(l, s.id), 0) == 0) return true;
    }
    return false;
  }

  void build_encoder() {
    const std::size_t d = config.hidden_dim;
    add_weight("embeddings.token", {config.vocab_size, d});
    add_weight("embeddings.position", {config.max_seq_len, d});
    add_weight("embeddings.segment", {config.type_vocab_size, d});
    add_ones("embeddings.ln.gain", {d});
    add_zeros("embeddings.ln.bias", {d});
    for (std::size_t l = 0; l < config.num_layers; ++l) {
      const std::string a = names::layer(l) + ".attention.";
      // No key bias: it shifts every score of a query row equally and so
      // never changes the attention distribution.
      add_weight(a + "wq", {d, d});
      add_zeros(a + "bq", {d});
      add_weight(a + "wk", {d, d});
      add_weight(a + "wv", {d, d});
      add_zeros(a + "bv", {d});
      add_weight(a + "wo", {d, d});
      add_zeros(a + "bo", {d});
      add_ones(a + "ln.gain", {d});
      add_zeros(a + "ln.bias", {d});
      if (!config.is_modular_layer(l)) {
        add_ffn(names::plain_ffn_prefix(l));
      } else if (config.ffn_kind == FfnKind::skill) {
        for (const auto& s : registry.skills()) add_ffn(names::skill_prefix(l, s.id));
      } else {
        for (std::size_t e = 0; e < config.num_experts; ++e) add_ffn(names::expert_prefix(l, e));
        add_weight(names::gate(l), {d, config.num_experts});
      }
      add_ones(names::layer(l) + ".ffn.ln.gain", {d});
      add_zeros(names::layer(l) + ".ffn.ln.bias", {d});
    }
  }
};

}  // namespace skillnet
