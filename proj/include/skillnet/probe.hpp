// SPDX-License-Identifier: Apache-2.0
//
// Generator self-test: a multinomial logistic probe over bag-of-marker
// features. A task counts as learnable when the probe scores >= 0.95 on its
// evaluation split. Features are token families (trailing digits stripped),
// families under the scope of a sentence-level "not", and for pairs the
// co-occurring non-filler tokens across segments.
#pragma once

#include <algorithm>
#include <cctype>
#include <cmath>
#include <map>
#include <string>
#include <unordered_map>
#include <vector>

#include "skillnet/dataset.hpp"
#include "skillnet/metrics.hpp"

namespace skillnet::probe {

using Features = std::vector<std::string>;

inline std::string family(const std::string& t) {
  std::size_t e = t.size();
  while (e > 0 && std::isdigit(static_cast<unsigned char>(t[e - 1]))) --e;
  return t.substr(0, e);
}

inline bool is_filler(const std::string& t) { return family(t) == "w"; }

inline Features text_features(const std::vector<std::string>& toks, const std::string& prefix = "") {
  Features f;
  const bool negated = std::find(toks.begin(), toks.end(), "not") != toks.end();
  for (const auto& t : toks) {
    if (is_filler(t)) continue;
    f.push_back(prefix + family(t));
    if (negated && t != "not") f.push_back(prefix + "not~" + family(t));
  }
  return f;
}

inline Features pair_features(const std::vector<std::string>& a, const std::vector<std::string>& b) {
  Features f = text_features(a, "a:");
  for (auto& x : text_features(b, "b:")) f.push_back(std::move(x));
  for (const auto& x : a)
    for (const auto& y : b)
      if (!is_filler(x) && !is_filler(y) && family(x) != "fin" && family(y) != "fin" && family(x) != "med" &&
          family(y) != "med")
        f.push_back("x:" + x + "|" + y);
  return f;
}

/// Multinomial logistic regression trained by plain SGD in a fixed order.
class Logistic {
 public:
  explicit Logistic(std::size_t classes) : classes_(classes) {}

  void fit(const std::vector<Features>& xs, const std::vector<int>& ys, int epochs = 8, double lr = 0.3) {
    for (const auto& x : xs)
      for (const auto& name : x) index(name);
    w_.assign(ids_.size() * classes_, 0.0);
    b_.assign(classes_, 0.0);
    for (int e = 0; e < epochs; ++e)
      for (std::size_t i = 0; i < xs.size(); ++i) {
        const auto p = probs(xs[i]);
        for (std::size_t c = 0; c < classes_; ++c) {
          const double g = p[c] - (static_cast<int>(c) == ys[i] ? 1.0 : 0.0);
          b_[c] -= lr * g;
          for (const auto& name : xs[i]) {
            auto it = ids_.find(name);
            if (it != ids_.end()) w_[it->second * classes_ + c] -= lr * g;
          }
        }
      }
  }

  std::vector<double> probs(const Features& x) const {
    std::vector<double> z = b_;
    for (const auto& name : x) {
      auto it = ids_.find(name);
      if (it == ids_.end() || it->second * classes_ >= w_.size()) continue;
      for (std::size_t c = 0; c < classes_; ++c) z[c] += w_[it->second * classes_ + c];
    }
    double mx = z[0];
    for (double v : z) mx = std::max(mx, v);
    double s = 0.0;
    for (double& v : z) s += (v = std::exp(v - mx));
    for (double& v : z) v /= s;
    return z;
  }

  int predict(const Features& x) const {
    const auto p = probs(x);
    return static_cast<int>(std::max_element(p.begin(), p.end()) - p.begin());
  }

 private:
  void index(const std::string& name) { ids_.emplace(name, ids_.size()); }

  std::size_t classes_;
  std::unordered_map<std::string, std::size_t> ids_;
  std::vector<double> w_, b_;
};

namespace detail {

inline Features token_features(const std::vector<std::string>& toks, std::size_t i) {
  const std::string f = family(toks[i]);
  const std::string prev = i > 0 ? family(toks[i - 1]) : "^";
  return {"t:" + f, "p:" + prev, "tp:" + f + "|" + (prev == f ? "same" : "diff")};
}

inline Features span_token_features(const std::string& qword, const std::vector<std::string>& p, std::size_t i,
                                    bool start) {
  const std::string f = family(p[i]);
  const bool edge = start ? (i == 0 || family(p[i - 1]) != f) : (i + 1 == p.size() || family(p[i + 1]) != f);
  return {"q:" + qword + "|" + f, "q:" + qword + "|" + f + "|" + (edge ? "edge" : "inner")};
}

}  // namespace detail

/// Trains on `train` and returns the task's metric on `eval`.
inline double probe_score(const TaskSpec& task, const std::vector<Example>& train, const std::vector<Example>& eval) {
  if (task.head == HeadType::token_tagging) {
    Logistic m(task.num_labels());
    std::vector<Features> xs;
    std::vector<int> ys;
    for (const auto& ex : train) {
      const auto& g = std::get<TaggingExample>(ex);
      for (std::size_t i = 0; i < g.tokens.size(); ++i) {
        xs.push_back(detail::token_features(g.tokens, i));
        ys.push_back(label_index(task, g.tags[i]));
      }
    }
    m.fit(xs, ys);
    std::vector<std::vector<std::string>> pred, gold;
    for (const auto& ex : eval) {
      const auto& g = std::get<TaggingExample>(ex);
      std::vector<std::string> p;
      for (std::size_t i = 0; i < g.tokens.size(); ++i)
        p.push_back(task.labels[static_cast<std::size_t>(m.predict(detail::token_features(g.tokens, i)))]);
      pred.push_back(std::move(p));
      gold.push_back(g.tags);
    }
    return entity_f1(pred, gold).f1;
  }
  if (task.head == HeadType::span_extraction) {
    Logistic ms(2), me(2);
    std::vector<Features> xs, xe;
    std::vector<int> ys, ye;
    for (const auto& ex : train) {
      const auto& s = std::get<SpanExample>(ex);
      const auto q = split_ws(s.question);
      const auto p = split_ws(s.passage);
      for (std::size_t i = 0; i < p.size(); ++i) {
        xs.push_back(detail::span_token_features(q[0], p, i, true));
        ys.push_back(static_cast<int>(i) == s.answer_start);
        xe.push_back(detail::span_token_features(q[0], p, i, false));
        ye.push_back(static_cast<int>(i) == s.answer_end);
      }
    }
    ms.fit(xs, ys);
    me.fit(xe, ye);
    double total = 0.0;
    for (const auto& ex : eval) {
      const auto& s = std::get<SpanExample>(ex);
      const auto q = split_ws(s.question);
      const auto p = split_ws(s.passage);
      std::size_t bs = 0, be = 0;
      double best = -1.0;
      for (std::size_t i = 0; i < p.size(); ++i)
        for (std::size_t j = i; j < p.size() && j - i < 4; ++j) {
          const double sc = ms.probs(detail::span_token_features(q[0], p, i, true))[1] *
                            me.probs(detail::span_token_features(q[0], p, j, false))[1];
          if (sc > best) {
            best = sc;
            bs = i;
            be = j;
          }
        }
      const std::vector<std::string> pred(p.begin() + static_cast<std::ptrdiff_t>(bs), p.begin() + static_cast<std::ptrdiff_t>(be) + 1);
      const std::vector<std::string> gold(p.begin() + s.answer_start, p.begin() + s.answer_end + 1);
      total += span_token_f1(pred, gold);
    }
    return total / static_cast<double>(eval.size());
  }

  auto feats = [](const Example& ex) {
    if (const auto* t = std::get_if<TextExample>(&ex)) return text_features(split_ws(t->text));
    const auto& p = std::get<PairExample>(ex);
    return pair_features(split_ws(p.text_a), split_ws(p.text_b));
  };
  auto label = [&](const Example& ex) {
    if (const auto* t = std::get_if<TextExample>(&ex)) return label_index(task, t->label);
    return label_index(task, std::get<PairExample>(ex).label);
  };
  Logistic m(task.num_labels());
  std::vector<Features> xs;
  std::vector<int> ys;
  for (const auto& ex : train) {
    xs.push_back(feats(ex));
    ys.push_back(label(ex));
  }
  m.fit(xs, ys);
  std::vector<int> pred, gold, groups;
  std::vector<double> scores;
  for (const auto& ex : eval) {
    const auto x = feats(ex);
    pred.push_back(m.predict(x));
    gold.push_back(label(ex));
    if (task.ranking) {
      scores.push_back(m.probs(x)[1]);
      groups.push_back(*std::get<PairExample>(ex).group);
    }
  }
  if (task.ranking) return top1_accuracy(groups, scores, gold);
  if (task.metric == "f1") return binary_f1(pred, gold).f1;
  return accuracy(pred, gold);
}

}  // namespace skillnet::probe
