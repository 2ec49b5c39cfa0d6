// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <random>
#include <string>
#include <vector>

#include "skillnet/encoder.hpp"
#include "skillnet/model.hpp"
#include "skillnet/synthetic.hpp"
#include "skillnet/trainer.hpp"

namespace skillnet::testing {

inline Tensor random_tensor(Shape shape, std::mt19937_64& rng, double scale = 1.0) {
  std::uniform_real_distribution<double> u(-scale, scale);
  Tensor t(std::move(shape));
  for (double& v : t.storage()) v = u(rng);
  return t;
}

inline SkillRegistry three_skills() {
  return SkillRegistry({{"s1", "a"}, {"s2", "b"}, {"s7", "general"}}, std::string("s7"));
}

inline EncoderConfig tiny_config() {
  EncoderConfig c;
  c.vocab_size = 12;
  c.max_seq_len = 8;
  c.num_layers = 2;
  c.num_skill_layers = 1;
  c.hidden_dim = 8;
  c.num_heads = 2;
  c.ffn_dim = 12;
  return c;
}

/// Overwrites every parameter with uniform noise so no gradient is
/// accidentally tiny or structurally symmetric. LN gains stay near 1.
inline void randomize(Model& m, std::mt19937_64& rng, double scale = 0.5) {
  std::uniform_real_distribution<double> u(-scale, scale);
  for (auto& [name, p] : m.params) {
    const bool gain = name.size() >= 4 && name.compare(name.size() - 4, 4, "gain") == 0;
    for (double& v : p.value.storage()) v = gain ? 1.0 + 0.5 * u(rng) : u(rng);
  }
}

/// Batch with per-sequence lengths; position 0 carries token 2 ([CLS]).
inline EncoderInput random_input(const std::vector<std::size_t>& lengths, std::size_t seq_len, std::size_t vocab,
                                 std::mt19937_64& rng) {
  EncoderInput in;
  in.batch = lengths.size();
  in.seq_len = seq_len;
  std::uniform_int_distribution<int> tok(5, static_cast<int>(vocab) - 1);
  for (std::size_t b = 0; b < in.batch; ++b)
    for (std::size_t i = 0; i < seq_len; ++i) {
      const bool real = i < lengths[b];
      in.token_ids.push_back(!real ? 0 : i == 0 ? 2 : tok(rng));
      in.segment_ids.push_back(real && i >= lengths[b] / 2 ? 1 : 0);
      in.attention_mask.push_back(real ? 1 : 0);
    }
  return in;
}

inline std::vector<Parameter*> all_params(Model& m) {
  std::vector<Parameter*> out;
  for (auto& [_, p] : m.params) out.push_back(&p);
  return out;
}

inline std::vector<Parameter*> named_params(Model& m, const std::vector<std::string>& names) {
  std::vector<Parameter*> out;
  for (const auto& n : names) out.push_back(&m.param(n));
  return out;
}

/// sum(x * R) for a fixed random R: a loss whose gradient reaches every
/// coordinate of x with generic magnitude.
inline Var probe_loss(Var x, std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  Var r = x.tape->constant(random_tensor(x.value().shape(), rng));
  return sum(mul(x, r));
}

/// Narrow encoder over the synthetic vocabulary; fast enough for unit tests.
inline EncoderConfig small_suite_config() {
  EncoderConfig c;
  c.vocab_size = synthetic::vocabulary().size();
  c.max_seq_len = 64;
  c.num_layers = 2;
  c.num_skill_layers = 1;
  c.hidden_dim = 16;
  c.num_heads = 2;
  c.ffn_dim = 24;
  return c;
}

/// The six built-in tasks generated in memory, cut to `train` / `eval` examples.
inline std::vector<TaskData> small_suite(std::size_t train = 64, std::size_t eval = 32, std::uint64_t seed = 2022) {
  std::vector<TaskData> out;
  for (const auto& r : synthetic::recipes()) {
    auto tr = synthetic::generate(r, seed, false);
    auto ev = synthetic::generate(r, seed, true);
    tr.resize(std::min(train, tr.size()));
    ev.resize(std::min(eval, ev.size()));
    out.push_back({synthetic::spec_of(r), std::move(tr), std::move(ev)});
  }
  return out;
}

/// One of the adaptation tasks (N1, N2) in memory. Sizes are multiples of
/// four so ranking groups stay whole.
inline TaskData small_new_task(const std::string& id, std::size_t train = 64, std::size_t eval = 32,
                               std::uint64_t seed = 2022) {
  for (const auto& r : synthetic::new_task_recipes()) {
    if (r.id != id) continue;
    auto tr = synthetic::generate(r, seed, false);
    auto ev = synthetic::generate(r, seed, true);
    tr.resize(std::min(train, tr.size()));
    ev.resize(std::min(eval, ev.size()));
    return {synthetic::spec_of(r), std::move(tr), std::move(ev)};
  }
  throw ConfigError("no new task " + id);
}

}  // namespace skillnet::testing
