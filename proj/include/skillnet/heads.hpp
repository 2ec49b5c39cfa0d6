// SPDX-License-Identifier: Apache-2.0
//
// Task prediction layers on top of encoder hidden states.
#pragma once

#include <algorithm>
#include <cmath>
#include <limits>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include "skillnet/autodiff.hpp"
#include "skillnet/model.hpp"

namespace skillnet {

namespace detail {

inline double log_sum_exp(const double* v, std::size_t n) {
  double mx = -INFINITY;
  for (std::size_t i = 0; i < n; ++i) mx = std::max(mx, v[i]);
  if (!std::isfinite(mx)) return mx;
  double s = 0.0;
  for (std::size_t i = 0; i < n; ++i) s += std::exp(v[i] - mx);
  return mx + std::log(s);
}

inline std::vector<std::size_t> cls_rows(std::size_t batch, std::size_t seq_len) {
  std::vector<std::size_t> rows(batch);
  for (std::size_t b = 0; b < batch; ++b) rows[b] = b * seq_len;
  return rows;
}

}  // namespace detail

// ---------------------------------------------------------------------------
// Sequence / pair classification over [CLS]

/// Logits [batch x num_labels] from the position-0 hidden state of each sequence.
inline Var cls_logits(Tape& tape, Model& m, const std::string& task, Var hidden, std::size_t batch,
                      std::size_t seq_len) {
  const std::string p = names::head(task);
  Var cls = gather_rows(hidden, detail::cls_rows(batch, seq_len));
  return add_bias(matmul(cls, tape.param(m.param(p + "weight"))), tape.param(m.param(p + "bias")));
}

struct ClsOutput {
  Var loss;
  Var logits;
};

inline ClsOutput cls_loss(Tape& tape, Model& m, const std::string& task, Var hidden, std::size_t batch,
                          std::size_t seq_len, const std::vector<int>& labels) {
  Var logits = cls_logits(tape, m, task, hidden, batch, seq_len);
  const std::size_t c = logits.value().cols();
  for (int l : labels)
    if (l < 0 || static_cast<std::size_t>(l) >= c)
      throw DataError("label " + std::to_string(l) + " >= num_labels " + std::to_string(c) + " for task " + task);
  return {cross_entropy(logits, labels), logits};
}

// ---------------------------------------------------------------------------
// Linear-chain CRF
//
// score(y) = start[y0] + sum_t emit[t][y_t] + sum_{t>0} trans[y_{t-1}][y_t] + end[y_{L-1}]
// nll(y)   = logZ - score(y), logZ by the forward algorithm in log space.

struct CrfScores {
  const Tensor& emissions;    // [L x K]
  const Tensor& transitions;  // [K x K], row = previous label
  const Tensor& start;        // [K]
  const Tensor& end;          // [K]
};

inline double crf_path_score(const CrfScores& s, const std::vector<int>& path) {
  const std::size_t k = s.emissions.cols();
  double score = s.start[static_cast<std::size_t>(path.front())] + s.end[static_cast<std::size_t>(path.back())];
  for (std::size_t t = 0; t < path.size(); ++t) {
    score += s.emissions[t * k + static_cast<std::size_t>(path[t])];
    if (t) score += s.transitions[static_cast<std::size_t>(path[t - 1]) * k + static_cast<std::size_t>(path[t])];
  }
  return score;
}

namespace detail {

inline void check_crf(const CrfScores& s, const std::vector<int>* gold) {
  if (s.emissions.rank() != 2) throw DimensionError("CRF emissions must be [L x K]");
  const std::size_t L = s.emissions.dim(0), K = s.emissions.dim(1);
  if (L == 0 || K == 0) throw DimensionError("CRF needs L >= 1 and K >= 1");
  if (s.transitions.size() != K * K || s.start.size() != K || s.end.size() != K)
    throw DimensionError("CRF transition/start/end sizes do not match K = " + std::to_string(K));
  if (gold) {
    if (gold->size() != L) throw DimensionError("CRF gold path length differs from emissions");
    for (int y : *gold)
      if (y < 0 || static_cast<std::size_t>(y) >= K) throw DataError("CRF label out of range");
  }
}

// alpha[t][j]: log-sum of scores of all prefixes ending in label j at t.
inline std::vector<double> crf_forward(const CrfScores& s) {
  const std::size_t L = s.emissions.dim(0), K = s.emissions.dim(1);
  std::vector<double> alpha(L * K);
  std::vector<double> tmp(K);
  for (std::size_t j = 0; j < K; ++j) alpha[j] = s.start[j] + s.emissions[j];
  for (std::size_t t = 1; t < L; ++t) {
    for (std::size_t j = 0; j < K; ++j) {
      for (std::size_t i = 0; i < K; ++i) tmp[i] = alpha[(t - 1) * K + i] + s.transitions[i * K + j];
      alpha[t * K + j] = log_sum_exp(tmp.data(), K) + s.emissions[t * K + j];
    }
  }
  return alpha;
}

// beta[t][i]: log-sum of scores of all suffixes after label i at t (incl. end).
inline std::vector<double> crf_backward(const CrfScores& s) {
  const std::size_t L = s.emissions.dim(0), K = s.emissions.dim(1);
  std::vector<double> beta(L * K);
  std::vector<double> tmp(K);
  for (std::size_t i = 0; i < K; ++i) beta[(L - 1) * K + i] = s.end[i];
  for (std::size_t t = L - 1; t-- > 0;) {
    for (std::size_t i = 0; i < K; ++i) {
      for (std::size_t j = 0; j < K; ++j)
        tmp[j] = s.transitions[i * K + j] + s.emissions[(t + 1) * K + j] + beta[(t + 1) * K + j];
      beta[t * K + i] = log_sum_exp(tmp.data(), K);
    }
  }
  return beta;
}

inline double crf_log_z(const CrfScores& s, const std::vector<double>& alpha) {
  const std::size_t L = s.emissions.dim(0), K = s.emissions.dim(1);
  std::vector<double> tmp(K);
  for (std::size_t j = 0; j < K; ++j) tmp[j] = alpha[(L - 1) * K + j] + s.end[j];
  return log_sum_exp(tmp.data(), K);
}

}  // namespace detail

inline double crf_log_partition(const CrfScores& s) {
  detail::check_crf(s, nullptr);
  return detail::crf_log_z(s, detail::crf_forward(s));
}

inline double crf_nll(const CrfScores& s, const std::vector<int>& gold) {
  detail::check_crf(s, &gold);
  return crf_log_partition(s) - crf_path_score(s, gold);
}

/// Taped negative log-likelihood of `gold`. Gradients are marginals minus
/// gold indicators, from forward-backward.
inline Var crf_nll(Var emissions, Var transitions, Var start, Var end, std::vector<int> gold) {
  const CrfScores s{emissions.value(), transitions.value(), start.value(), end.value()};
  detail::check_crf(s, &gold);
  auto alpha = detail::crf_forward(s);
  const double log_z = detail::crf_log_z(s, alpha);
  const double nll = log_z - crf_path_score(s, gold);
  return emissions.tape->record(
      Tensor::scalar(nll), {emissions, transitions, start, end},
      [e = emissions.id, tr = transitions.id, st = start.id, en = end.id, gold = std::move(gold),
       alpha = std::move(alpha), log_z](Tape& t, std::size_t self) {
        const double g = t.grad(self)[0];
        const CrfScores s{t.value(e), t.value(tr), t.value(st), t.value(en)};
        const std::size_t L = s.emissions.dim(0), K = s.emissions.dim(1);
        const auto beta = detail::crf_backward(s);
        const auto y = [&](std::size_t i) { return static_cast<std::size_t>(gold[i]); };
        if (t.requires_grad(e)) {
          auto& ge = t.grad(e);
          for (std::size_t i = 0; i < L; ++i)
            for (std::size_t j = 0; j < K; ++j)
              ge[i * K + j] += g * std::exp(alpha[i * K + j] + beta[i * K + j] - log_z);
          for (std::size_t i = 0; i < L; ++i) ge[i * K + y(i)] -= g;
        }
        if (t.requires_grad(st)) {
          auto& gs = t.grad(st);
          for (std::size_t j = 0; j < K; ++j) gs[j] += g * std::exp(alpha[j] + beta[j] - log_z);
          gs[y(0)] -= g;
        }
        if (t.requires_grad(en)) {
          auto& gn = t.grad(en);
          for (std::size_t j = 0; j < K; ++j)
            gn[j] += g * std::exp(alpha[(L - 1) * K + j] + beta[(L - 1) * K + j] - log_z);
          gn[y(L - 1)] -= g;
        }
        if (t.requires_grad(tr)) {
          auto& gt = t.grad(tr);
          for (std::size_t i = 1; i < L; ++i)
            for (std::size_t a = 0; a < K; ++a)
              for (std::size_t b = 0; b < K; ++b)
                gt[a * K + b] += g * std::exp(alpha[(i - 1) * K + a] + s.transitions[a * K + b] +
                                              s.emissions[i * K + b] + beta[i * K + b] - log_z);
          for (std::size_t i = 1; i < L; ++i) gt[y(i - 1) * K + y(i)] -= g;
        }
      });
}

/// Highest-scoring label path; ties resolve toward lower label indices.
inline std::vector<int> crf_viterbi(const CrfScores& s) {
  detail::check_crf(s, nullptr);
  const std::size_t L = s.emissions.dim(0), K = s.emissions.dim(1);
  std::vector<double> best(L * K);
  std::vector<std::size_t> back(L * K, 0);
  for (std::size_t j = 0; j < K; ++j) best[j] = s.start[j] + s.emissions[j];
  for (std::size_t t = 1; t < L; ++t) {
    for (std::size_t j = 0; j < K; ++j) {
      std::size_t arg = 0;
      double mx = best[(t - 1) * K] + s.transitions[j];
      for (std::size_t i = 1; i < K; ++i) {
        const double v = best[(t - 1) * K + i] + s.transitions[i * K + j];
        if (v > mx) {
          mx = v;
          arg = i;
        }
      }
      best[t * K + j] = mx + s.emissions[t * K + j];
      back[t * K + j] = arg;
    }
  }
  std::size_t last = 0;
  double mx = best[(L - 1) * K] + s.end[0];
  for (std::size_t j = 1; j < K; ++j) {
    const double v = best[(L - 1) * K + j] + s.end[j];
    if (v > mx) {
      mx = v;
      last = j;
    }
  }
  std::vector<int> path(L);
  path[L - 1] = static_cast<int>(last);
  for (std::size_t t = L - 1; t > 0; --t) {
    last = back[t * K + last];
    path[t - 1] = static_cast<int>(last);
  }
  return path;
}

inline std::vector<int> crf_viterbi(const Tensor& emissions, const Tensor& transitions) {
  const std::size_t k = emissions.cols();
  const Tensor zeros({k});
  return crf_viterbi(CrfScores{emissions, transitions, zeros, zeros});
}

/// Emission scores [batch*seq_len x K] for the task's CRF head.
inline Var crf_emissions(Tape& tape, Model& m, const std::string& task, Var hidden) {
  const std::string p = names::head(task);
  return add_bias(matmul(hidden, tape.param(m.param(p + "emission.weight"))),
                  tape.param(m.param(p + "emission.bias")));
}

/// Mean CRF NLL over sequences. positions[b] lists the flattened rows of the
/// taggable tokens of sequence b; tags[b] holds their gold labels.
inline Var crf_tagging_loss(Tape& tape, Model& m, const std::string& task, Var hidden,
                            const std::vector<std::vector<std::size_t>>& positions,
                            const std::vector<std::vector<int>>& tags) {
  if (positions.size() != tags.size() || positions.empty()) throw DimensionError("tagging batch mismatch");
  const std::string p = names::head(task);
  Var em = crf_emissions(tape, m, task, hidden);
  Var trans = tape.param(m.param(p + "transitions"));
  Var start = tape.param(m.param(p + "start"));
  Var end = tape.param(m.param(p + "end"));
  std::vector<Var> losses;
  for (std::size_t b = 0; b < positions.size(); ++b) {
    if (positions[b].size() != tags[b].size()) throw DimensionError("tag count differs from token count");
    if (positions[b].empty()) continue;
    losses.push_back(crf_nll(gather_rows(em, positions[b]), trans, start, end, tags[b]));
  }
  if (losses.empty()) throw DataError("tagging batch contains no tokens");
  return mean_of(losses);
}

// ---------------------------------------------------------------------------
// Span extraction

struct SpanOutput {
  Var loss;
  Tensor start_probs;  // [batch x seq_len], zero outside the passage
  Tensor end_probs;
};

namespace detail {

inline Tensor masked_softmax_rows(const Tensor& logits, const std::vector<unsigned char>& mask) {
  const std::size_t n = logits.rows(), c = logits.cols();
  Tensor out({n, c});
  for (std::size_t r = 0; r < n; ++r) {
    double mx = -INFINITY;
    for (std::size_t j = 0; j < c; ++j)
      if (mask[r * c + j]) mx = std::max(mx, logits[r * c + j]);
    if (!std::isfinite(mx)) continue;
    double z = 0.0;
    for (std::size_t j = 0; j < c; ++j)
      if (mask[r * c + j]) z += (out[r * c + j] = std::exp(logits[r * c + j] - mx));
    for (std::size_t j = 0; j < c; ++j) out[r * c + j] /= z;
  }
  return out;
}

}  // namespace detail

/// Start/end logits are hidden . v_start and hidden . v_end, softmaxed over
/// passage positions only. Loss = (CE_start + CE_end) / 2, each batch-averaged.
inline SpanOutput span_loss(Tape& tape, Model& m, const std::string& task, Var hidden, std::size_t batch,
                            std::size_t seq_len, const std::vector<int>& passage_mask,
                            const std::vector<int>& gold_start, const std::vector<int>& gold_end) {
  if (passage_mask.size() != batch * seq_len) throw DimensionError("passage mask shape mismatch");
  if (gold_start.size() != batch || gold_end.size() != batch) throw DimensionError("span label count mismatch");
  std::vector<unsigned char> mask(passage_mask.begin(), passage_mask.end());
  for (std::size_t b = 0; b < batch; ++b) {
    const int s = gold_start[b], e = gold_end[b];
    const auto inside = [&](int i) {
      return i >= 0 && static_cast<std::size_t>(i) < seq_len && mask[b * seq_len + static_cast<std::size_t>(i)];
    };
    if (!inside(s) || !inside(e)) throw DataError("gold span index outside passage");
    if (s > e) throw DataError("gold span start after end");
  }
  const std::string p = names::head(task);
  Var ls = reshape(matmul(hidden, tape.param(m.param(p + "start"))), {batch, seq_len});
  Var le = reshape(matmul(hidden, tape.param(m.param(p + "end"))), {batch, seq_len});
  Var loss = scale(add(cross_entropy(ls, gold_start, &mask), cross_entropy(le, gold_end, &mask)), 0.5);
  return {loss, detail::masked_softmax_rows(ls.value(), mask), detail::masked_softmax_rows(le.value(), mask)};
}

/// argmax over i <= j, j - i < max_answer_len of start[i] * end[j]; ties go
/// to the smaller i, then the smaller j.
inline std::pair<std::size_t, std::size_t> span_decode(std::span<const double> start, std::span<const double> end,
                                                       std::size_t max_answer_len) {
  if (start.size() != end.size() || start.empty()) throw DimensionError("span_decode: distribution mismatch");
  if (max_answer_len == 0) throw ConfigError("max_answer_len must be >= 1");
  std::pair<std::size_t, std::size_t> best{0, 0};
  double best_score = -1.0;
  for (std::size_t i = 0; i < start.size(); ++i) {
    for (std::size_t j = i; j < end.size() && j - i < max_answer_len; ++j) {
      const double sc = start[i] * end[j];
      if (sc > best_score) {
        best_score = sc;
        best = {i, j};
      }
    }
  }
  return best;
}

// ---------------------------------------------------------------------------
// Pre-training heads

/// Masked-LM loss; the vocabulary projection reuses the token embedding.
/// labels is [batch*seq_len] with kIgnoreLabel at uncorrupted positions.
inline Var mlm_loss(Tape& tape, Model& m, Var hidden, const std::vector<int>& labels) {
  std::vector<std::size_t> rows;
  std::vector<int> targets;
  for (std::size_t i = 0; i < labels.size(); ++i) {
    if (labels[i] == kIgnoreLabel) continue;
    rows.push_back(i);
    targets.push_back(labels[i]);
  }
  if (rows.empty()) throw DataError("MLM batch has no corrupted positions");
  Var states = gather_rows(hidden, rows);
  Var logits = matmul(states, transpose(tape.param(m.param("embeddings.token"))));
  logits = add_bias(logits, tape.param(m.param(names::head("mlm") + "bias")));
  return cross_entropy(logits, targets);
}

/// Next-sentence loss through a tanh pooler on [CLS].
inline ClsOutput nsp_loss(Tape& tape, Model& m, Var hidden, std::size_t batch, std::size_t seq_len,
                          const std::vector<int>& is_next) {
  const std::string p = names::head("nsp");
  Var cls = gather_rows(hidden, detail::cls_rows(batch, seq_len));
  Var pooled = tanh(add_bias(matmul(cls, tape.param(m.param(p + "pooler.weight"))),
                             tape.param(m.param(p + "pooler.bias"))));
  Var logits = add_bias(matmul(pooled, tape.param(m.param(p + "weight"))), tape.param(m.param(p + "bias")));
  return {cross_entropy(logits, is_next), logits};
}

}  // namespace skillnet
