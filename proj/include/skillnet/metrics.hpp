// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <algorithm>
#include <map>
#include <set>
#include <string>
#include <tuple>
#include <vector>

#include "skillnet/error.hpp"

namespace skillnet {

struct Prf {
  double precision = 0.0;
  double recall = 0.0;
  double f1 = 0.0;
};

inline Prf prf_from_counts(std::size_t tp, std::size_t predicted, std::size_t gold) {
  Prf r;
  if (predicted == 0 && gold == 0) return {1.0, 1.0, 1.0};
  r.precision = predicted ? static_cast<double>(tp) / static_cast<double>(predicted) : 0.0;
  r.recall = gold ? static_cast<double>(tp) / static_cast<double>(gold) : 0.0;
  r.f1 = r.precision + r.recall > 0.0 ? 2.0 * r.precision * r.recall / (r.precision + r.recall) : 0.0;
  return r;
}

inline double accuracy(const std::vector<int>& predicted, const std::vector<int>& gold) {
  if (predicted.size() != gold.size() || gold.empty()) throw DataError("accuracy: size mismatch or empty input");
  std::size_t hit = 0;
  for (std::size_t i = 0; i < gold.size(); ++i) hit += predicted[i] == gold[i];
  return static_cast<double>(hit) / static_cast<double>(gold.size());
}

/// F1 of the positive class.
inline Prf binary_f1(const std::vector<int>& predicted, const std::vector<int>& gold, int positive = 1) {
  if (predicted.size() != gold.size()) throw DataError("binary_f1: size mismatch");
  std::size_t tp = 0, pp = 0, gp = 0;
  for (std::size_t i = 0; i < gold.size(); ++i) {
    pp += predicted[i] == positive;
    gp += gold[i] == positive;
    tp += predicted[i] == positive && gold[i] == positive;
  }
  return prf_from_counts(tp, pp, gp);
}

using Entity = std::tuple<std::string, std::size_t, std::size_t>;  // type, first, last

/// Entities of a BIO sequence. An I- tag that does not continue an entity of
/// its type opens a new one (conlleval convention).
inline std::vector<Entity> bio_entities(const std::vector<std::string>& tags) {
  std::vector<Entity> out;
  std::string cur;
  std::size_t start = 0;
  auto close = [&](std::size_t last) {
    if (!cur.empty()) out.emplace_back(cur, start, last);
    cur.clear();
  };
  for (std::size_t i = 0; i < tags.size(); ++i) {
    const std::string& t = tags[i];
    const bool chunk = t.size() > 2 && (t[0] == 'B' || t[0] == 'I') && t[1] == '-';
    if (!chunk) {
      close(i - 1);
      continue;
    }
    const std::string type = t.substr(2);
    if (t[0] == 'I' && type == cur) continue;
    close(i - 1);
    cur = type;
    start = i;
  }
  close(tags.size() - 1);
  return out;
}

/// Micro-averaged entity-level F1: an entity counts when type and both
/// boundaries match.
inline Prf entity_f1(const std::vector<std::vector<std::string>>& predicted,
                     const std::vector<std::vector<std::string>>& gold) {
  if (predicted.size() != gold.size()) throw DataError("entity_f1: sequence count mismatch");
  std::size_t tp = 0, pp = 0, gp = 0;
  for (std::size_t s = 0; s < gold.size(); ++s) {
    const auto p = bio_entities(predicted[s]);
    const auto g = bio_entities(gold[s]);
    const std::set<Entity> gs(g.begin(), g.end());
    pp += p.size();
    gp += g.size();
    for (const auto& e : std::set<Entity>(p.begin(), p.end())) tp += gs.count(e);
  }
  return prf_from_counts(tp, pp, gp);
}

/// Token-overlap F1 between predicted and gold answer tokens (bag of tokens).
inline double span_token_f1(const std::vector<std::string>& predicted, const std::vector<std::string>& gold) {
  std::map<std::string, int> counts;
  for (const auto& t : gold) ++counts[t];
  std::size_t common = 0;
  for (const auto& t : predicted)
    if (counts[t]-- > 0) ++common;
  if (common == 0) return predicted.empty() && gold.empty() ? 1.0 : 0.0;
  const double p = static_cast<double>(common) / static_cast<double>(predicted.size());
  const double r = static_cast<double>(common) / static_cast<double>(gold.size());
  return 2.0 * p * r / (p + r);
}

/// Fraction of groups whose highest-scoring candidate (lowest index on
/// ties) is a gold positive.
inline double top1_accuracy(const std::vector<int>& groups, const std::vector<double>& scores,
                            const std::vector<int>& gold, int positive = 1) {
  if (groups.size() != scores.size() || groups.size() != gold.size() || groups.empty())
    throw DataError("top1_accuracy: size mismatch or empty input");
  std::map<int, std::size_t> best;
  for (std::size_t i = 0; i < groups.size(); ++i) {
    auto it = best.find(groups[i]);
    if (it == best.end())
      best.emplace(groups[i], i);
    else if (scores[i] > scores[it->second])
      it->second = i;
  }
  std::size_t hit = 0;
  for (const auto& [_, i] : best) hit += gold[i] == positive;
  return static_cast<double>(hit) / static_cast<double>(best.size());
}

}  // namespace skillnet
