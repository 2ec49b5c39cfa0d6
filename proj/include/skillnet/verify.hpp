// SPDX-License-Identifier: Apache-2.0
//
// Standalone oracle checks: gradients against finite differences, sparsity
// of updates, equivalence with the reference encoder, sampler arithmetic,
// CRF against enumeration, and the pre-training activation pattern. Each
// returns a pass/fail result with a one-line detail; none of them trains a
// full model.
#pragma once

#include <bit>
#include <chrono>
#include <cmath>
#include <functional>
#include <random>
#include <sstream>
#include <string>
#include <vector>

#include "skillnet/encoder.hpp"
#include "skillnet/grad_check.hpp"
#include "skillnet/heads.hpp"
#include "skillnet/moe.hpp"
#include "skillnet/oracles/crf_bruteforce.hpp"
#include "skillnet/oracles/reference_encoder.hpp"
#include "skillnet/pretrain.hpp"
#include "skillnet/sampler.hpp"
#include "skillnet/synthetic.hpp"
#include "skillnet/trainer.hpp"

namespace skillnet::verify {

struct CheckResult {
  std::string name;
  bool passed = false;
  std::string detail;
  double seconds = 0.0;
};

namespace detail {

inline void randomize(Model& m, std::mt19937_64& rng, double scale = 0.5) {
  std::uniform_real_distribution<double> u(-scale, scale);
  for (auto& [name, p] : m.params) {
    const bool gain = name.size() >= 4 && name.compare(name.size() - 4, 4, "gain") == 0;
    for (double& v : p.value.storage()) v = gain ? 1.0 + 0.5 * u(rng) : u(rng);
  }
}

inline Tensor random_tensor(Shape shape, std::mt19937_64& rng, double scale = 1.0) {
  std::uniform_real_distribution<double> u(-scale, scale);
  Tensor t(std::move(shape));
  for (double& v : t.storage()) v = u(rng);
  return t;
}

inline EncoderInput random_input(const std::vector<std::size_t>& lengths, std::size_t seq_len, std::size_t vocab,
                                 std::mt19937_64& rng) {
  EncoderInput in;
  in.batch = lengths.size();
  in.seq_len = seq_len;
  std::uniform_int_distribution<int> tok(kNumSpecial, static_cast<int>(vocab) - 1);
  for (std::size_t b = 0; b < in.batch; ++b)
    for (std::size_t i = 0; i < seq_len; ++i) {
      const bool real = i < lengths[b];
      in.token_ids.push_back(!real ? kPadId : i == 0 ? kClsId : tok(rng));
      in.segment_ids.push_back(real && i >= lengths[b] / 2 ? 1 : 0);
      in.attention_mask.push_back(real ? 1 : 0);
    }
  return in;
}

/// sum(x * R) for a fixed random R.
inline Var probe_loss(Var x, std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  Var r = x.tape->constant(random_tensor(x.value().shape(), rng));
  return sum(mul(x, r));
}

inline bool bit_equal(const Tensor& a, const Tensor& b) {
  if (a.shape() != b.shape()) return false;
  for (std::size_t i = 0; i < a.size(); ++i)
    if (std::bit_cast<std::uint64_t>(a[i]) != std::bit_cast<std::uint64_t>(b[i])) return false;
  return true;
}

inline bool all_zero(const Tensor& t) {
  for (double v : t.data())
    if (v != 0.0) return false;
  return true;
}

/// 2 layers, hidden 8, skills {s1, s2, s7}.
inline Model gradcheck_model(FfnKind kind, std::uint64_t seed) {
  EncoderConfig c;
  c.vocab_size = 12;
  c.max_seq_len = 8;
  c.num_layers = 2;
  c.num_skill_layers = 1;
  c.hidden_dim = 8;
  c.num_heads = 2;
  c.ffn_dim = 12;
  c.ffn_kind = kind;
  return Model(c, SkillRegistry({{"s1", ""}, {"s2", ""}, {"s7", ""}}, std::string("s7")), seed);
}

inline CheckResult timed(std::string name, const std::function<void(CheckResult&)>& body) {
  CheckResult r;
  r.name = std::move(name);
  const auto t0 = std::chrono::steady_clock::now();
  try {
    body(r);
  } catch (const std::exception& e) {
    r.passed = false;
    r.detail = std::string("exception: ") + e.what();
  }
  r.seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
  return r;
}

inline std::string fmt(double v) {
  std::ostringstream s;
  s << std::setprecision(3) << v;
  return s.str();
}

}  // namespace detail

/// Encoder, each task head on top of it, and the MoE layer, against a
/// five-point finite-difference stencil.
inline CheckResult gradients(double tol = 1e-5) {
  return detail::timed("gradients", [&](CheckResult& r) {
    GradCheckOptions opt;
    opt.step = 1e-3;
    opt.five_point = true;
    std::ostringstream d;
    bool ok = true;
    double worst = 0.0;
    auto record = [&](const std::string& what, const GradCheckResult& g) {
      worst = std::max(worst, g.max_rel_error);
      if (g.max_rel_error >= tol) {
        ok = false;
        d << what << " fails at " << g.worst_param << "[" << g.worst_index << "] ";
      }
    };

    Model m = detail::gradcheck_model(FfnKind::skill, 6);
    m.add_head("cls", {HeadKind::classification, 3});
    m.add_head("tag", {HeadKind::crf, 3});
    m.add_head("span", {HeadKind::span, 0});
    std::mt19937_64 rng(12);
    detail::randomize(m, rng);
    const auto in = detail::random_input({4, 3}, 4, 12, rng);
    const std::vector<std::size_t> s{0, 2};
    auto params_for = [&](const std::string& task) {
      std::vector<Parameter*> out;
      for (const auto& n : active_parameter_names(m, s)) out.push_back(&m.param(n));
      if (!task.empty())
        for (const auto& n : m.head_param_names(task)) out.push_back(&m.param(n));
      return out;
    };

    record("encoder", grad_check([&](Tape& t) { return detail::probe_loss(encode(t, m, in, s), 99); }, params_for(""), opt));
    record("cls", grad_check([&](Tape& t) { return cls_loss(t, m, "cls", encode(t, m, in, s), 2, 4, {2, 0}).loss; },
                             params_for("cls"), opt));
    record("crf", grad_check(
                      [&](Tape& t) {
                        return crf_tagging_loss(t, m, "tag", encode(t, m, in, s), {{1, 2, 3}, {5, 6}}, {{0, 2, 1}, {1, 1}});
                      },
                      params_for("tag"), opt));
    {
      const std::vector<int> passage{0, 0, 1, 1, 0, 1, 1, 0};
      auto params = params_for("span");
      // The top LN bias moves every span logit of a row equally: its gradient
      // is exactly zero, and relative error on a zero is meaningless.
      std::erase_if(params, [](Parameter* p) { return p->name == "layer.1.ffn.ln.bias"; });
      record("span", grad_check(
                         [&](Tape& t) {
                           return span_loss(t, m, "span", encode(t, m, in, s), 2, 4, passage, {2, 1}, {3, 2}).loss;
                         },
                         params, opt));
    }

    Model moe = detail::gradcheck_model(FfnKind::moe, 9);
    std::mt19937_64 mrng(10);
    detail::randomize(moe, mrng);
    const Tensor xv = detail::random_tensor({8, 8}, mrng);
    std::vector<Parameter*> mp{&moe.param(names::gate(1)), &moe.param("layer.1.ffn.ln.gain"),
                               &moe.param("layer.1.ffn.ln.bias")};
    for (std::size_t e = 0; e < moe.config.num_experts; ++e)
      for (const auto& part : names::ffn_parts()) mp.push_back(&moe.param(names::expert_prefix(1, e) + part));
    GradCheckOptions mopt = opt;
    mopt.step = 1e-4;  // small enough that no perturbation flips a top-2 choice
    record("moe", grad_check([&](Tape& t) { return detail::probe_loss(moe_ffn_sublayer(t, moe, 1, t.constant(xv)), 5); },
                             mp, mopt));
    r.passed = ok;
    d << "max relative error " << detail::fmt(worst) << " (encoder, cls, crf, span, moe)";
    r.detail = d.str();
  });
}

/// 100 sampled training steps on the synthetic tasks; after each, skills
/// outside the sampled task's routing must have zero gradient and unchanged
/// values, moments and step counts.
inline CheckResult sparsity(std::size_t draws = 100) {
  return detail::timed("sparsity", [&](CheckResult& r) {
    static const Vocab vocab = synthetic::vocabulary();
    EncoderConfig c;
    c.vocab_size = vocab.size();
    c.hidden_dim = 16;
    c.num_heads = 2;
    c.ffn_dim = 24;
    Model m(c, default_registry(), 5);
    std::vector<TaskData> tasks;
    for (const auto& rec : synthetic::recipes()) {
      auto tr = synthetic::generate(rec, 2022, false);
      tr.resize(64);
      tasks.push_back({synthetic::spec_of(rec), std::move(tr), {}});
    }
    TrainerConfig tc;
    tc.steps = draws;
    tc.batch_size = 4;
    tc.schedule = {1e-3, 10, draws + 1};
    MultitaskTrainer trainer(m, vocab, tasks, tc);
    std::size_t checked = 0, violations = 0;
    for (std::size_t i = 0; i < draws; ++i) {
      std::map<std::string, Tensor> before;
      for (const auto& [n, p] : m.params) before.emplace(n, p.value);
      const auto slots = trainer.optimizer().slots;
      const std::size_t t = trainer.step();
      const auto& active = trainer.active(t);
      for (std::size_t k = 0; k < m.registry.size(); ++k) {
        if (std::find(active.begin(), active.end(), k) != active.end()) continue;
        for (const auto& n : m.skill_params(m.registry.id_at(k))) {
          ++checked;
          const auto& p = m.param(n);
          bool ok = detail::all_zero(p.grad) && detail::bit_equal(p.value, before.at(n));
          const auto it = slots.find(n);
          const auto& now = trainer.optimizer().slots;
          if (it == slots.end()) {
            ok = ok && !now.count(n);
          } else {
            const auto& s = now.at(n);
            ok = ok && s.step == it->second.step && detail::bit_equal(s.m, it->second.m) &&
                 detail::bit_equal(s.v, it->second.v);
          }
          violations += ok ? 0 : 1;
        }
      }
    }
    r.passed = violations == 0 && checked > 0;
    r.detail = std::to_string(draws) + " draws, " + std::to_string(checked) + " inactive tensors checked, " +
               std::to_string(violations) + " changed";
  });
}

/// Active set {s7} against the plain-loop reference encoder.
inline CheckResult dense_equivalence(double tol = 1e-10) {
  return detail::timed("dense-equivalence", [&](CheckResult& r) {
    double worst = 0.0;
    for (std::size_t skill_layers : {std::size_t{1}, std::size_t{2}}) {
      EncoderConfig c;
      c.vocab_size = 20;
      c.max_seq_len = 10;
      c.num_layers = 2;
      c.num_skill_layers = skill_layers;
      c.hidden_dim = 16;
      c.num_heads = 4;
      c.ffn_dim = 24;
      Model m(c, default_registry(), 11);
      std::mt19937_64 rng(5 + skill_layers);
      detail::randomize(m, rng);
      const auto in = detail::random_input({7, 4, 10}, 10, 20, rng);
      Tape tape;
      const std::vector<std::size_t> s7{m.registry.index_of("s7")};
      const Tensor h = encode(tape, m, in, s7).value();
      const auto ref = oracles::ReferenceEncoder::from_model(m, "s7");
      const auto expected = ref.run(in.batch, in.seq_len, in.token_ids, in.segment_ids, in.attention_mask);
      for (std::size_t row = 0; row < in.batch * in.seq_len; ++row)
        if (in.attention_mask[row])
          for (std::size_t j = 0; j < c.hidden_dim; ++j)
            worst = std::max(worst, std::abs(h.at(row, j) - expected[row * c.hidden_dim + j]));
    }
    r.passed = worst < tol;
    r.detail = "max |delta| " + detail::fmt(worst) + " over 1 and 2 skill layers";
  });
}

/// Task sampler on the reference dataset sizes: exact uniform at alpha 0, direct arithmetic at
/// alpha 1, and 100k draws per alpha within 0.01 of q (chi-square reported).
inline CheckResult sampler(std::size_t draws = 100000) {
  return detail::timed("sampler", [&](CheckResult& r) {
    const std::vector<double> sizes{9.6, 50.0, 34.3, 53.3, 15.7, 10.0};
    bool ok = true;
    for (double q : task_sampling_probs(sizes, 0.0)) ok = ok && q == 1.0 / 6.0;
    const auto q1 = task_sampling_probs(sizes, 1.0);
    double total = 0.0;
    for (double s : sizes) total += s;
    double arith = 0.0;
    for (std::size_t i = 0; i < 6; ++i) arith = std::max(arith, std::abs(q1[i] - sizes[i] / total));
    ok = ok && arith < 1e-12;
    double dev = 0.0, chi_max = 0.0;
    for (double alpha : {0.0, 0.5, 1.0}) {
      TaskSampler s(sizes, alpha);
      std::mt19937_64 rng(99);
      std::vector<double> counts(6, 0.0);
      for (std::size_t i = 0; i < draws; ++i) ++counts[s.sample(rng)];
      double chi = 0.0;
      for (std::size_t i = 0; i < 6; ++i) {
        const double expect = s.probs()[i] * static_cast<double>(draws);
        dev = std::max(dev, std::abs(counts[i] / static_cast<double>(draws) - s.probs()[i]));
        chi += (counts[i] - expect) * (counts[i] - expect) / expect;
      }
      chi_max = std::max(chi_max, chi);
    }
    // 20.52 is the 0.999 quantile of chi-square with 5 degrees of freedom
    ok = ok && dev < 0.01 && chi_max < 20.52;
    r.passed = ok;
    r.detail = "alpha=1 arithmetic |delta| " + detail::fmt(arith) + ", max frequency deviation " + detail::fmt(dev) +
               ", max chi-square " + detail::fmt(chi_max);
  });
}

/// Forward algorithm and Viterbi against enumeration of every path.
inline CheckResult crf(std::size_t trials = 200) {
  return detail::timed("crf", [&](CheckResult& r) {
    std::mt19937_64 rng(5);
    double worst = 0.0;
    std::size_t path_mismatch = 0;
    for (std::size_t t = 0; t < trials; ++t) {
      const std::size_t L = 1 + t % 4, K = 1 + (t / 4) % 3;
      const Tensor em = detail::random_tensor({L, K}, rng, 2.0), tr = detail::random_tensor({K, K}, rng, 2.0),
                   st = detail::random_tensor({K}, rng, 2.0), en = detail::random_tensor({K}, rng, 2.0);
      const CrfScores s{em, tr, st, en};
      const auto brute = oracles::enumerate_crf(em, tr, st, en);
      worst = std::max(worst, std::abs(crf_log_partition(s) - brute.log_partition));
      path_mismatch += crf_viterbi(s) == brute.best_path ? 0 : 1;
    }
    r.passed = worst < 1e-10 && path_mismatch == 0;
    r.detail = std::to_string(trials) + " instances, max |log Z delta| " + detail::fmt(worst) + ", " +
               std::to_string(path_mismatch) + " Viterbi mismatches";
  });
}

/// MLM steps update exactly the {s2, s7} banks and NSP steps exactly
/// {s1, s3, s7}; the objective mix over `mix_steps` is 0.5 within 0.02;
/// initialization from the pre-trained model copies s7 into s4, s5, s6.
inline CheckResult pretrain_activation(std::size_t mix_steps = 10000) {
  return detail::timed("pretrain-activation", [&](CheckResult& r) {
    static const Vocab vocab = synthetic::vocabulary();
    synthetic::Gen g(77);
    auto corpus = parse_corpus(synthetic::corpus(g, 200));
    std::ostringstream d;
    bool ok = true;

    EncoderConfig c;
    c.vocab_size = vocab.size();
    c.hidden_dim = 16;
    c.num_heads = 2;
    c.ffn_dim = 24;
    {
      Model m(c, pretrain_registry(), 4);
      PretrainConfig pc;
      pc.steps = 60;
      pc.batch_size = 4;
      pc.max_seq_len = 24;
      pc.schedule = {1e-3, 6, 60};
      Pretrainer pt(m, vocab, corpus, pc);
      std::size_t wrong = 0;
      for (std::size_t i = 0; i < pc.steps; ++i) {
        std::map<std::string, Tensor> before;
        for (const auto& [n, p] : m.params) before.emplace(n, p.value);
        const auto step = pt.step();
        const auto& expect = step.objective == Objective::mlm ? pc.mlm_skills : pc.nsp_skills;
        for (const auto& s : m.registry.skills()) {
          bool touched = false;
          for (const auto& n : m.skill_params(s.id))
            touched = touched || !detail::all_zero(m.param(n).grad) || !detail::bit_equal(m.param(n).value, before.at(n));
          const bool want = std::find(expect.begin(), expect.end(), s.id) != expect.end();
          wrong += touched == want ? 0 : 1;
        }
      }
      ok = ok && wrong == 0;
      d << "60 steps, " << wrong << " bank mismatches; ";

      const Model full = initialize_multitask_from_pretrain(m, default_registry(), 9);
      bool copied = true;
      for (std::size_t l = 0; l < full.config.num_layers; ++l) {
        if (!full.config.is_modular_layer(l)) continue;
        for (const auto& part : names::ffn_parts())
          for (const char* s : {"s4", "s5", "s6"})
            copied = copied && detail::bit_equal(full.param(names::skill_prefix(l, s) + part).value,
                                                 full.param(names::skill_prefix(l, "s7") + part).value);
      }
      ok = ok && copied;
      d << "s4/s5/s6 " << (copied ? "bit-equal" : "differ") << " to s7; ";
    }
    {
      EncoderConfig t = c;
      t.hidden_dim = 8;
      t.ffn_dim = 8;
      Model m(t, pretrain_registry(), 1);
      PretrainConfig pc;
      pc.steps = mix_steps;
      pc.batch_size = 1;
      pc.max_seq_len = 12;
      pc.schedule = {1e-3, mix_steps / 10, mix_steps};
      Pretrainer pt(m, vocab, corpus, pc);
      std::size_t mlm = 0;
      for (std::size_t i = 0; i < mix_steps; ++i) mlm += pt.step().objective == Objective::mlm ? 1 : 0;
      const double frac = static_cast<double>(mlm) / static_cast<double>(mix_steps);
      ok = ok && std::abs(frac - 0.5) <= 0.02;
      d << "MLM share " << detail::fmt(frac) << " over " << mix_steps << " steps";
    }
    r.passed = ok;
    r.detail = d.str();
  });
}

inline std::vector<CheckResult> all() {
  return {gradients(), sparsity(), dense_equivalence(), sampler(), crf(), pretrain_activation()};
}

}  // namespace skillnet::verify
