// SPDX-License-Identifier: Apache-2.0
//
// Sparse pre-training. Each step picks MLM or NSP with equal chance and runs
// the encoder under that objective's fixed skill set (S_MLM = {s2, s7},
// S_NSP = {s1, s3, s7}). Only four skill banks exist during pre-training;
// initialize_multitask_from_pretrain copies them into a full registry and
// fills every other skill with the general skill's weights.
//
// Corpus format: one sentence per line, blank line between documents.
#pragma once

#include <fstream>
#include <random>
#include <set>
#include <sstream>
#include <string>
#include <vector>

#include "skillnet/encoder.hpp"
#include "skillnet/heads.hpp"
#include "skillnet/optim.hpp"
#include "skillnet/sampler.hpp"
#include "skillnet/trainer.hpp"
#include "skillnet/vocab.hpp"

namespace skillnet {

struct PretrainConfig {
  std::vector<std::string> mlm_skills{"s2", "s7"};
  std::vector<std::string> nsp_skills{"s1", "s3", "s7"};
  double mask_prob = 0.15;
  double mask_token_frac = 0.8;    // of selected positions -> [MASK]
  double random_token_frac = 0.1;  // -> random token; the rest stay unchanged
  double nsp_negative_rate = 0.5;
  std::size_t steps = 1000;
  std::size_t batch_size = 16;
  std::size_t max_seq_len = 64;
  LrSchedule schedule{1e-3, 100, 1000};
  double clip_norm = 1.0;
  std::uint64_t seed = 2022;
  std::size_t log_every = 50;

  void validate() const {
    auto prob = [](double p) { return p >= 0.0 && p <= 1.0; };
    if (!prob(mask_prob) || !prob(mask_token_frac) || !prob(random_token_frac) || !prob(nsp_negative_rate) ||
        mask_token_frac + random_token_frac > 1.0)
      throw ConfigError("pre-training probabilities must lie in [0, 1]");
    if (batch_size == 0) throw ConfigError("batch_size must be positive");
    if (mlm_skills.empty() || nsp_skills.empty()) throw ConfigError("pre-training skill sets must be non-empty");
    schedule.validate();
  }
};

/// The four skill banks that exist during pre-training.
inline SkillRegistry pretrain_registry(const SkillRegistry& full = default_registry()) {
  std::vector<Skill> skills;
  for (const auto& s : full.skills())
    if (s.id == "s1" || s.id == "s2" || s.id == "s3" || s.id == "s7") skills.push_back(s);
  if (skills.size() != 4) throw RoutingError("registry lacks one of s1, s2, s3, s7");
  return SkillRegistry(std::move(skills), full.general_skill());
}

// ---------------------------------------------------------------------------
// Corpus

using Document = std::vector<std::vector<std::string>>;  // sentences of tokens

inline std::vector<Document> parse_corpus(const std::string& text) {
  std::vector<Document> docs(1);
  std::istringstream in(text);
  for (std::string line; std::getline(in, line);) {
    auto toks = split_ws(line);
    if (toks.empty()) {
      if (!docs.back().empty()) docs.emplace_back();
    } else {
      docs.back().push_back(std::move(toks));
    }
  }
  if (docs.back().empty()) docs.pop_back();
  return docs;
}

inline std::vector<Document> read_corpus(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw DataError("cannot open corpus " + path);
  std::stringstream ss;
  ss << in.rdbuf();
  return parse_corpus(ss.str());
}

// ---------------------------------------------------------------------------
// Examples

struct MlmExample {
  std::vector<int> ids;
  std::vector<int> labels;  // original id at corrupted positions, kIgnoreLabel elsewhere
};

/// BERT-style corruption of the non-special positions of `ids`. At least one
/// position is always corrupted.
inline MlmExample mask_tokens(const std::vector<int>& ids, std::mt19937_64& rng, const PretrainConfig& cfg,
                              std::size_t vocab_size) {
  std::vector<std::size_t> candidates;
  for (std::size_t i = 0; i < ids.size(); ++i)
    if (!Vocab::is_special(ids[i])) candidates.push_back(i);
  if (candidates.empty()) throw DataError("nothing to mask: sequence holds only special tokens");
  if (vocab_size <= static_cast<std::size_t>(kNumSpecial)) throw ConfigError("vocabulary has no ordinary tokens");

  std::vector<std::size_t> chosen;
  for (std::size_t i : candidates)
    if (uniform01(rng) < cfg.mask_prob) chosen.push_back(i);
  if (chosen.empty()) chosen.push_back(candidates[uniform_index(rng, candidates.size())]);

  MlmExample ex{ids, std::vector<int>(ids.size(), kIgnoreLabel)};
  for (std::size_t i : chosen) {
    ex.labels[i] = ids[i];
    const double u = uniform01(rng);
    if (u < cfg.mask_token_frac)
      ex.ids[i] = kMaskId;
    else if (u < cfg.mask_token_frac + cfg.random_token_frac)
      ex.ids[i] = kNumSpecial + static_cast<int>(uniform_index(rng, vocab_size - kNumSpecial));
  }
  return ex;
}

struct NspExample {
  Encoded encoded;
  int is_next = 0;
  std::size_t doc_a = 0, sent_a = 0, doc_b = 0, sent_b = 0;
};

/// A sentence and either its successor (label 1) or a sentence drawn from a
/// different document (label 0). `force` overrides the coin.
inline NspExample build_nsp_pair(const std::vector<Document>& corpus, const Vocab& vocab, std::mt19937_64& rng,
                                 const PretrainConfig& cfg, std::size_t max_len,
                                 std::optional<bool> force = std::nullopt) {
  std::vector<std::size_t> usable;
  for (std::size_t d = 0; d < corpus.size(); ++d)
    if (corpus[d].size() >= 2) usable.push_back(d);
  if (usable.size() < 2) throw DataError("corpus needs at least two documents with two or more sentences");

  NspExample ex;
  ex.doc_a = usable[uniform_index(rng, usable.size())];
  ex.sent_a = uniform_index(rng, corpus[ex.doc_a].size() - 1);
  const bool positive = force ? *force : !(uniform01(rng) < cfg.nsp_negative_rate);
  if (positive) {
    ex.doc_b = ex.doc_a;
    ex.sent_b = ex.sent_a + 1;
  } else {
    ex.doc_b = (ex.doc_a + 1 + uniform_index(rng, corpus.size() - 1)) % corpus.size();
    ex.sent_b = uniform_index(rng, corpus[ex.doc_b].size());
  }
  ex.is_next = positive ? 1 : 0;
  ex.encoded = encode_pair(vocab, corpus[ex.doc_a][ex.sent_a], corpus[ex.doc_b][ex.sent_b], max_len);
  return ex;
}

// ---------------------------------------------------------------------------
// Batches

struct PretrainBatch {
  EncoderInput input;
  std::vector<int> mlm_labels;  // [batch*seq_len]
  std::vector<int> nsp_labels;  // [batch]
};

namespace detail {

inline void append_padded(EncoderInput& in, const std::vector<int>& ids, const std::vector<int>& segs, std::size_t L) {
  const std::size_t pad = L - ids.size();
  in.token_ids.insert(in.token_ids.end(), ids.begin(), ids.end());
  in.token_ids.insert(in.token_ids.end(), pad, kPadId);
  in.segment_ids.insert(in.segment_ids.end(), segs.begin(), segs.end());
  in.segment_ids.insert(in.segment_ids.end(), pad, 0);
  in.attention_mask.insert(in.attention_mask.end(), ids.size(), 1);
  in.attention_mask.insert(in.attention_mask.end(), pad, 0);
}

}  // namespace detail

inline PretrainBatch make_mlm_batch(const std::vector<Document>& corpus, const Vocab& vocab, std::mt19937_64& rng,
                                    const PretrainConfig& cfg) {
  if (corpus.empty()) throw DataError("empty corpus");
  std::vector<Encoded> enc;
  std::vector<MlmExample> masked;
  std::size_t L = 0;
  for (std::size_t i = 0; i < cfg.batch_size; ++i) {
    const auto& doc = corpus[uniform_index(rng, corpus.size())];
    enc.push_back(encode_single(vocab, doc[uniform_index(rng, doc.size())], cfg.max_seq_len));
    masked.push_back(mask_tokens(enc.back().ids, rng, cfg, vocab.size()));
    L = std::max(L, enc.back().ids.size());
  }
  PretrainBatch b;
  b.input.batch = cfg.batch_size;
  b.input.seq_len = L;
  for (std::size_t i = 0; i < enc.size(); ++i) {
    detail::append_padded(b.input, masked[i].ids, enc[i].segments, L);
    b.mlm_labels.insert(b.mlm_labels.end(), masked[i].labels.begin(), masked[i].labels.end());
    b.mlm_labels.insert(b.mlm_labels.end(), L - masked[i].labels.size(), kIgnoreLabel);
  }
  return b;
}

inline PretrainBatch make_nsp_batch(const std::vector<Document>& corpus, const Vocab& vocab, std::mt19937_64& rng,
                                    const PretrainConfig& cfg) {
  std::vector<NspExample> pairs;
  std::size_t L = 0;
  for (std::size_t i = 0; i < cfg.batch_size; ++i) {
    pairs.push_back(build_nsp_pair(corpus, vocab, rng, cfg, cfg.max_seq_len));
    L = std::max(L, pairs.back().encoded.ids.size());
  }
  PretrainBatch b;
  b.input.batch = cfg.batch_size;
  b.input.seq_len = L;
  for (const auto& p : pairs) {
    detail::append_padded(b.input, p.encoded.ids, p.encoded.segments, L);
    b.nsp_labels.push_back(p.is_next);
  }
  return b;
}

// ---------------------------------------------------------------------------
// Steps

enum class Objective { mlm, nsp };

inline std::string to_string(Objective o) { return o == Objective::mlm ? "mlm" : "nsp"; }

inline void ensure_pretrain_heads(Model& m) {
  if (!m.heads.count("mlm")) m.add_head("mlm", {HeadKind::mlm, 0});
  if (!m.heads.count("nsp")) m.add_head("nsp", {HeadKind::nsp, 2});
}

inline std::vector<std::size_t> skill_indices(const SkillRegistry& r, const std::vector<std::string>& ids) {
  std::vector<std::size_t> out;
  for (const auto& id : ids) out.push_back(r.index_of(id));
  return validate_active(out, r.size());
}

inline Var pretrain_loss(Tape& tape, Model& m, Objective obj, const PretrainBatch& b,
                         std::span<const std::size_t> active) {
  Var h = encode(tape, m, b.input, active);
  if (obj == Objective::mlm) return mlm_loss(tape, m, h, b.mlm_labels);
  return nsp_loss(tape, m, h, b.input.batch, b.input.seq_len, b.nsp_labels).loss;
}

struct PretrainStepResult {
  Objective objective = Objective::mlm;
  double loss = 0.0;
};

class Pretrainer {
 public:
  Pretrainer(Model&, Vocab&&, std::vector<Document>, PretrainConfig, MetricsLog* = nullptr) = delete;
  Pretrainer(Model& model, const Vocab& vocab, std::vector<Document> corpus, PretrainConfig cfg,
             MetricsLog* log = nullptr)
      : model_(model), vocab_(vocab), corpus_(std::move(corpus)), cfg_(std::move(cfg)), log_(log),
        objective_rng_(cfg_.seed ^ name_hash("objective")), data_rng_(cfg_.seed ^ name_hash("pretrain-data")) {
    cfg_.validate();
    if (model_.config.ffn_kind != FfnKind::skill) throw ConfigError("sparse pre-training needs a skill encoder");
    if (vocab_.size() != model_.config.vocab_size) throw ConfigError("vocabulary size differs from the model's");
    ensure_pretrain_heads(model_);
    mlm_active_ = skill_indices(model_.registry, cfg_.mlm_skills);
    nsp_active_ = skill_indices(model_.registry, cfg_.nsp_skills);
  }

  AdamState& optimizer() { return optim_; }
  std::size_t steps_done() const { return step_; }
  const std::vector<std::size_t>& active(Objective o) const { return o == Objective::mlm ? mlm_active_ : nsp_active_; }

  PretrainStepResult step() {
    const Objective obj = uniform01(objective_rng_) < 0.5 ? Objective::mlm : Objective::nsp;
    const PretrainBatch b = obj == Objective::mlm ? make_mlm_batch(corpus_, vocab_, data_rng_, cfg_)
                                                  : make_nsp_batch(corpus_, vocab_, data_rng_, cfg_);
    const auto& active = obj == Objective::mlm ? mlm_active_ : nsp_active_;
    ++step_;
    const double lr = lr_at(cfg_.schedule, step_);

    model_.params.zero_grad();
    Tape tape;
    Var loss = pretrain_loss(tape, model_, obj, b, active);
    const double value = loss.value()[0];
    if (!std::isfinite(value)) throw DivergenceError("non-finite " + to_string(obj) + " loss");
    tape.backward(loss);
    std::set<std::string> names = active_parameter_names(model_, active);
    for (const auto& n : model_.head_param_names(to_string(obj))) names.insert(n);
    clip_grad_norm(model_.params, names, cfg_.clip_norm);
    adam_update(model_.params, optim_, names, lr);

    auto& w = window_[obj == Objective::mlm ? 0 : 1];
    w.first += value;
    ++w.second;
    if (log_ && step_ % cfg_.log_every == 0) {
      nlohmann::json rec{{"event", "pretrain"}, {"step", step_}, {"lr", lr}};
      for (int k = 0; k < 2; ++k) {
        const std::string name = k == 0 ? "mlm" : "nsp";
        rec[name + "_steps"] = window_[k].second;
        rec[name + "_loss"] = window_[k].second ? nlohmann::json(window_[k].first / static_cast<double>(window_[k].second))
                                                 : nlohmann::json(nullptr);
        window_[k] = {0.0, 0};
      }
      log_->write(rec);
    }
    return {obj, value};
  }

  void run() {
    while (step_ < cfg_.steps) step();
  }

 private:
  Model& model_;
  const Vocab& vocab_;
  std::vector<Document> corpus_;
  PretrainConfig cfg_;
  MetricsLog* log_;
  std::vector<std::size_t> mlm_active_, nsp_active_;
  AdamState optim_;
  std::mt19937_64 objective_rng_, data_rng_;
  std::pair<double, std::size_t> window_[2]{};
  std::size_t step_ = 0;
};

// ---------------------------------------------------------------------------
// Hand-off to multi-task training

/// Builds a model over `full` whose shared parameters and pre-trained skills
/// are copied from `pre`; skills absent from `pre` start as copies of the
/// general skill. Pre-training heads are dropped.
inline Model initialize_multitask_from_pretrain(const Model& pre, const SkillRegistry& full, std::uint64_t seed) {
  for (const char* id : {"s1", "s2", "s3", "s7"})
    if (!pre.registry.find(id)) throw RoutingError(std::string("pre-trained model lacks skill ") + id);
  if (!pre.registry.general_skill()) throw RoutingError("pre-trained model has no general skill");
  const std::string general = *pre.registry.general_skill();
  if (!full.find(general)) throw RoutingError("target registry lacks the general skill " + general);
  if (pre.config.ffn_kind != FfnKind::skill) throw ConfigError("pre-trained model is not a skill encoder");

  EncoderConfig cfg = pre.config;
  cfg.num_skills = full.size();
  Model m(cfg, full, seed);
  for (const auto& name : pre.shared_encoder_params()) m.param(name).value = pre.param(name).value;
  for (const auto& s : full.skills()) {
    const std::string source = pre.registry.find(s.id) ? s.id : general;
    for (std::size_t l = 0; l < cfg.num_layers; ++l) {
      if (!cfg.is_modular_layer(l)) continue;
      for (const auto& part : names::ffn_parts())
        m.param(names::skill_prefix(l, s.id) + part).value = pre.param(names::skill_prefix(l, source) + part).value;
    }
  }
  return m;
}

}  // namespace skillnet
