// SPDX-License-Identifier: Apache-2.0
#include <catch_amalgamated.hpp>

#include <cmath>
#include <random>

#include "skillnet/encoder.hpp"
#include "skillnet/grad_check.hpp"
#include "skillnet/heads.hpp"
#include "skillnet/oracles/crf_bruteforce.hpp"
#include "support.hpp"

using namespace skillnet;
using namespace skillnet::testing;

namespace {

Model head_model() {
  Model m(tiny_config(), three_skills(), 6);
  m.add_head("cls", {HeadKind::classification, 3});
  m.add_head("tag", {HeadKind::crf, 3});
  m.add_head("span", {HeadKind::span, 0});
  return m;
}

struct Crf {
  Tensor em, tr, st, en;
  CrfScores scores() const { return {em, tr, st, en}; }
};

Crf random_crf(std::size_t L, std::size_t K, std::mt19937_64& rng) {
  return {random_tensor({L, K}, rng, 2.0), random_tensor({K, K}, rng, 2.0), random_tensor({K}, rng, 2.0),
          random_tensor({K}, rng, 2.0)};
}

double scalar_ce(const std::vector<double>& logits, std::size_t label) {
  double mx = logits[0];
  for (double v : logits) mx = std::max(mx, v);
  double z = 0.0;
  for (double v : logits) z += std::exp(v - mx);
  return -(logits[label] - mx - std::log(z));
}

}  // namespace

TEST_CASE("cls loss closed forms and scalar reference", "[heads]") {
  Model m = head_model();
  std::mt19937_64 rng(3);
  const Tensor hv = random_tensor({2 * 4, 8}, rng);

  m.param("head.cls.weight").value.fill(0.0);
  {
    Tape tape;
    CHECK(cls_loss(tape, m, "cls", tape.constant(hv), 2, 4, {0, 2}).loss.item() == Catch::Approx(std::log(3.0)).epsilon(1e-14));
  }

  Model two(tiny_config(), three_skills(), 1);
  two.add_head("b", {HeadKind::classification, 2});
  two.param("head.b.weight").value.fill(0.0);
  two.param("head.b.weight").value.at(0, 0) = std::log(3.0);
  Tensor h1({1, 8});
  h1[0] = 1.0;
  {
    Tape tape;
    CHECK(cls_loss(tape, two, "b", tape.constant(h1), 1, 1, {0}).loss.item() ==
          Catch::Approx(-std::log(0.75)).epsilon(1e-14));
  }

  randomize(m, rng);
  const std::vector<int> labels{2, 1};
  double ref = 0.0;
  const auto& w = m.param("head.cls.weight").value;
  const auto& b = m.param("head.cls.bias").value;
  for (std::size_t s = 0; s < 2; ++s) {
    std::vector<double> logits(3);
    for (std::size_t c = 0; c < 3; ++c) {
      logits[c] = b[c];
      for (std::size_t p = 0; p < 8; ++p) logits[c] += hv.at(s * 4, p) * w.at(p, c);
    }
    ref += scalar_ce(logits, static_cast<std::size_t>(labels[s])) / 2.0;
  }
  Tape tape;
  CHECK(std::abs(cls_loss(tape, m, "cls", tape.constant(hv), 2, 4, labels).loss.item() - ref) < 1e-12);
  CHECK_THROWS_AS(cls_loss(tape, m, "cls", tape.constant(hv), 2, 4, {0, 3}), DataError);
}

TEST_CASE("crf nll closed forms", "[heads][crf]") {
  for (std::size_t L : {1u, 3u, 5u})
    for (std::size_t K : {1u, 2u, 4u}) {
      const Tensor em({L, K}), tr({K, K}), z({K});
      CHECK(crf_nll({em, tr, z, z}, std::vector<int>(L, 0)) ==
            Catch::Approx(static_cast<double>(L) * std::log(static_cast<double>(K))).margin(1e-12));
    }
  std::mt19937_64 rng(4);
  const Crf c = random_crf(1, 4, rng);
  std::vector<double> logits(4);
  for (std::size_t k = 0; k < 4; ++k) logits[k] = c.st[k] + c.em[k] + c.en[k];
  for (int y = 0; y < 4; ++y) CHECK(std::abs(crf_nll(c.scores(), {y}) - scalar_ce(logits, static_cast<std::size_t>(y))) < 1e-12);
}

TEST_CASE("crf log partition and viterbi equal exhaustive enumeration", "[heads][crf]") {
  std::mt19937_64 rng(5);
  for (int trial = 0; trial < 200; ++trial) {
    const std::size_t L = 1 + static_cast<std::size_t>(trial) % 5, K = 1 + static_cast<std::size_t>(trial / 5) % 4;
    const Crf c = random_crf(L, K, rng);
    const auto brute = oracles::enumerate_crf(c.em, c.tr, c.st, c.en);
    CHECK(std::abs(crf_log_partition(c.scores()) - brute.log_partition) < 1e-10);
    CHECK(crf_viterbi(c.scores()) == brute.best_path);
  }
  const Crf c = random_crf(3, 3, rng);
  CHECK(std::abs(crf_log_partition(c.scores()) - oracles::enumerate_crf(c.em, c.tr, c.st, c.en).log_partition) <
        1e-10);
}

TEST_CASE("crf distribution normalizes and viterbi dominates", "[heads][crf]") {
  std::mt19937_64 rng(6);
  for (std::size_t L = 1; L <= 4; ++L)
    for (std::size_t K = 1; K <= 3; ++K) {
      const Crf c = random_crf(L, K, rng);
      const auto best = crf_viterbi(c.scores());
      const double best_score = crf_path_score(c.scores(), best);
      double total = 0.0;
      oracles::for_each_path(L, K, [&](const std::vector<int>& y) {
        total += std::exp(-crf_nll(c.scores(), y));
        CHECK(best_score >= crf_path_score(c.scores(), y));
      });
      CHECK(std::abs(total - 1.0) < 1e-9);
    }
}

TEST_CASE("crf viterbi simple cases and shift invariance", "[heads][crf]") {
  const Tensor em = Tensor::matrix({{0, 5, 0}, {3, 0, 0}, {0, 0, 1}});
  const Tensor tr({3, 3});
  CHECK(crf_viterbi(em, tr) == std::vector<int>{1, 0, 2});

  std::mt19937_64 rng(7);
  Crf c = random_crf(1, 4, rng);
  std::size_t arg = 0;
  for (std::size_t k = 1; k < 4; ++k)
    if (c.st[k] + c.em[k] + c.en[k] > c.st[arg] + c.em[arg] + c.en[arg]) arg = k;
  CHECK(crf_viterbi(c.scores()) == std::vector<int>{static_cast<int>(arg)});

  c = random_crf(4, 3, rng);
  Crf shifted = c;
  for (std::size_t k = 0; k < 3; ++k) shifted.em.at(2, k) += 1.75;
  CHECK(crf_viterbi(c.scores()) == crf_viterbi(shifted.scores()));
  oracles::for_each_path(4, 3, [&](const std::vector<int>& y) {
    CHECK(std::abs(crf_nll(c.scores(), y) - crf_nll(shifted.scores(), y)) < 1e-12);
  });
}

TEST_CASE("span loss closed forms and scalar reference", "[heads][span]") {
  Model m = head_model();
  std::mt19937_64 rng(8);
  randomize(m, rng);
  const std::size_t B = 2, L = 6;
  const Tensor hv = random_tensor({B * L, 8}, rng);
  const std::vector<int> passage{0, 0, 1, 1, 1, 1, 0, 0, 0, 1, 1, 0};
  const std::vector<int> gs{3, 3}, ge{5, 4};

  auto zero = m.param("head.span.start").value;
  m.param("head.span.start").value.fill(0.0);
  m.param("head.span.end").value.fill(0.0);
  {
    Tape tape;
    auto out = span_loss(tape, m, "span", tape.constant(hv), B, L, passage, {2, 9 - 6}, {5, 4});
    // P = 4 and 2 passage tokens
    CHECK(out.loss.item() == Catch::Approx((std::log(4.0) + std::log(2.0)) / 2.0).epsilon(1e-14));
    for (std::size_t i = 2; i < 6; ++i) CHECK(out.start_probs.at(0, i) == Catch::Approx(0.25));
    CHECK(out.start_probs.at(0, 0) == 0.0);
  }
  m.param("head.span.start").value = zero;
  const auto& vs = m.param("head.span.start").value;
  const auto& ve = m.param("head.span.end").value;

  double ref = 0.0;
  for (std::size_t b = 0; b < B; ++b) {
    std::vector<double> ls, le;
    std::size_t si = 0, ei = 0;
    for (std::size_t i = 0; i < L; ++i) {
      if (!passage[b * L + i]) continue;
      double s = 0.0, e = 0.0;
      for (std::size_t p = 0; p < 8; ++p) {
        s += hv.at(b * L + i, p) * vs[p];
        e += hv.at(b * L + i, p) * ve[p];
      }
      if (static_cast<int>(i) == gs[b]) si = ls.size();
      if (static_cast<int>(i) == ge[b]) ei = le.size();
      ls.push_back(s);
      le.push_back(e);
    }
    ref += 0.5 * (scalar_ce(ls, si) + scalar_ce(le, ei)) / static_cast<double>(B);
  }
  Tape tape;
  auto out = span_loss(tape, m, "span", tape.constant(hv), B, L, passage, gs, ge);
  CHECK(std::abs(out.loss.item() - ref) < 1e-12);
  for (std::size_t b = 0; b < B; ++b) {
    double ss = 0.0, se = 0.0;
    for (std::size_t i = 0; i < L; ++i) {
      ss += out.start_probs.at(b, i);
      se += out.end_probs.at(b, i);
    }
    CHECK(std::abs(ss - 1.0) < 1e-12);
    CHECK(std::abs(se - 1.0) < 1e-12);
  }
  CHECK_THROWS_AS(span_loss(tape, m, "span", tape.constant(hv), B, L, passage, {1, 3}, {5, 4}), DataError);
  CHECK_THROWS_AS(span_loss(tape, m, "span", tape.constant(hv), B, L, passage, {3, 3}, {5, 11}), DataError);
}

TEST_CASE("span decode", "[heads][span]") {
  std::vector<double> s(8, 0.0), e(8, 0.0);
  s[2] = 1.0;
  e[5] = 1.0;
  CHECK(span_decode(s, e, 30) == std::pair<std::size_t, std::size_t>{2, 5});
  const std::vector<double> u(8, 0.125);
  CHECK(span_decode(u, u, 30) == std::pair<std::size_t, std::size_t>{0, 0});

  std::mt19937_64 rng(9);
  std::uniform_real_distribution<double> d(0.0, 1.0);
  for (int trial = 0; trial < 50; ++trial) {
    std::vector<double> a(6), b(6);
    for (auto& v : a) v = d(rng);
    for (auto& v : b) v = d(rng);
    const std::size_t max_len = 1 + static_cast<std::size_t>(trial) % 6;
    std::pair<std::size_t, std::size_t> best{0, 0};
    double bs = -1.0;
    for (std::size_t i = 0; i < 6; ++i)
      for (std::size_t j = 0; j < 6; ++j)
        if (i <= j && j - i < max_len && a[i] * b[j] > bs) {
          bs = a[i] * b[j];
          best = {i, j};
        }
    CHECK(span_decode(a, b, max_len) == best);
  }
}

TEST_CASE("each head on the full model passes a finite-difference check", "[heads][gradcheck]") {
  Model m = head_model();
  std::mt19937_64 rng(12);
  randomize(m, rng);
  const auto in = random_input({4, 4}, 4, 12, rng);
  const std::vector<std::size_t> s{1, 2};
  GradCheckOptions opt;
  opt.step = 1e-3;
  opt.five_point = true;

  auto params_for = [&](const std::string& task) {
    std::vector<Parameter*> out;
    for (const auto& n : active_parameter_names(m, s)) out.push_back(&m.param(n));
    for (const auto& n : m.head_param_names(task)) out.push_back(&m.param(n));
    return out;
  };

  SECTION("classification") {
    auto f = [&](Tape& t) { return cls_loss(t, m, "cls", encode(t, m, in, s), 2, 4, {2, 0}).loss; };
    const auto r = grad_check(f, params_for("cls"), opt);
    INFO(r.worst_param << " " << r.worst_analytic << " vs " << r.worst_numeric);
    CHECK(r.max_rel_error < 1e-5);
  }
  SECTION("crf") {
    auto f = [&](Tape& t) {
      return crf_tagging_loss(t, m, "tag", encode(t, m, in, s), {{1, 2, 3}, {5, 6, 7}}, {{0, 2, 1}, {1, 1, 0}});
    };
    const auto r = grad_check(f, params_for("tag"), opt);
    INFO(r.worst_param << " " << r.worst_analytic << " vs " << r.worst_numeric);
    CHECK(r.max_rel_error < 1e-5);
  }
  SECTION("span") {
    const std::vector<int> passage{0, 0, 1, 1, 0, 1, 1, 1};
    auto f = [&](Tape& t) { return span_loss(t, m, "span", encode(t, m, in, s), 2, 4, passage, {2, 1}, {3, 3}).loss; };
    // The last LN bias shifts every span logit of a row equally, so its
    // gradient is exactly zero and only finite-difference noise remains.
    auto params = params_for("span");
    std::erase_if(params, [](Parameter* p) { return p->name == "layer.1.ffn.ln.bias"; });
    const auto r = grad_check(f, params, opt);
    INFO(r.worst_param << " " << r.worst_analytic << " vs " << r.worst_numeric);
    CHECK(r.max_rel_error < 1e-5);
  }
}
