// SPDX-License-Identifier: Apache-2.0
//
// Seeded synthetic suite over a toy vocabulary. Each task is solvable from
// surface tokens:
//   T1 sentiment     polarity of 1 or 2 agreeing markers, flipped by a "not" anywhere
//   T2 inference     hypothesis fact equal to (entailment), antonym of (contradiction)
//                    or unrelated to (neutral) the premise fact
//   T3 similarity    finance-marked pair sharing a keyword or not
//   T4 topic         majority topic among keywords
//   T5 entities      BIO tags over per/org/loc tokens; a second entity token
//                    comes from the continuation family (perx, ...)
//   T6 reading       answer is the passage entity of the asked type
//   N1 answer check  candidate holds the question keyword and an entity of the asked type
//   N2 medical       rank the candidate whose cure matches the symptom
#pragma once

#include <cstdint>
#include <filesystem>
#include <fstream>
#include <map>
#include <random>
#include <string>
#include <vector>

#include "skillnet/dataset.hpp"
#include "skillnet/model.hpp"
#include "skillnet/sampler.hpp"
#include "skillnet/task_config.hpp"

namespace skillnet::synthetic {

inline constexpr std::size_t kFillers = 60;
inline constexpr std::size_t kMarkers = 8;      // p*, n*
inline constexpr std::size_t kFacts = 12;       // f*, a*
inline constexpr std::size_t kKeywords = 12;    // k*
inline constexpr std::size_t kTopics = 5;
inline constexpr std::size_t kTopicWords = 6;   // tp<t>_<j>
inline constexpr std::size_t kEntities = 8;     // per*, org*, loc*, tim*; continuations perx* ...
inline constexpr std::size_t kMedical = 10;     // sym*, cure*
inline const std::vector<std::string> kTopicNames{"sports", "finance", "tech", "travel", "food"};

inline std::string tok(const std::string& family, std::size_t i) { return family + std::to_string(i); }

/// Every surface token of the suite, in a fixed order.
inline std::vector<std::string> vocabulary_tokens() {
  std::vector<std::string> v;
  auto family = [&](const std::string& f, std::size_t n) {
    for (std::size_t i = 0; i < n; ++i) v.push_back(tok(f, i));
  };
  family("w", kFillers);
  family("p", kMarkers);
  family("n", kMarkers);
  v.push_back("not");
  family("f", kFacts);
  family("a", kFacts);
  family("fin", 6);
  family("k", kKeywords);
  for (std::size_t t = 0; t < kTopics; ++t) family("tp" + std::to_string(t) + "_", kTopicWords);
  family("per", kEntities);
  family("org", kEntities);
  family("loc", kEntities);
  family("tim", kEntities);
  for (const char* f : {"perx", "orgx", "locx", "timx"}) family(f, kEntities);
  for (const char* q : {"qwho", "qwhere", "qwhen"}) v.push_back(q);
  family("med", 6);
  family("sym", kMedical);
  family("cure", kMedical);
  return v;
}

inline Vocab vocabulary() { return Vocab(vocabulary_tokens()); }

/// The cure that answers symptom i (a fixed permutation).
inline std::size_t cure_for(std::size_t symptom) { return (3 * symptom + 1) % kMedical; }

class Gen {
 public:
  explicit Gen(std::uint64_t seed) : rng_(seed) {}

  std::size_t index(std::size_t n) { return uniform_index(rng_, n); }
  std::size_t range(std::size_t lo, std::size_t hi) { return lo + index(hi - lo + 1); }
  bool coin(double p) { return uniform01(rng_) < p; }
  std::string filler() { return tok("w", index(kFillers)); }

  std::vector<std::string> fillers(std::size_t n) {
    std::vector<std::string> out;
    for (std::size_t i = 0; i < n; ++i) out.push_back(filler());
    return out;
  }

  /// Inserts `piece` at a random boundary of `words`; returns its start.
  std::size_t insert(std::vector<std::string>& words, const std::vector<std::string>& piece) {
    const std::size_t at = index(words.size() + 1);
    words.insert(words.begin() + static_cast<std::ptrdiff_t>(at), piece.begin(), piece.end());
    return at;
  }

  std::mt19937_64& rng() { return rng_; }

 private:
  std::mt19937_64 rng_;
};

inline std::uint64_t stream_seed(std::uint64_t seed, const std::string& name) { return seed ^ name_hash(name); }

// ---------------------------------------------------------------------------

inline std::vector<Example> sentiment(Gen& g, std::size_t n) {
  std::vector<Example> out;
  for (std::size_t i = 0; i < n; ++i) {
    const bool positive = g.coin(0.5);
    const bool negated = g.coin(0.4);
    const bool surface = negated ? !positive : positive;
    auto words = g.fillers(g.range(4, 8));
    const std::size_t markers = g.range(1, 2);
    for (std::size_t m = 0; m < markers; ++m) g.insert(words, {tok(surface ? "p" : "n", g.index(kMarkers))});
    if (negated) g.insert(words, {"not"});
    out.push_back(TextExample{join_ws(words), positive ? "positive" : "negative"});
  }
  return out;
}

inline std::vector<Example> inference(Gen& g, std::size_t n) {
  static const std::vector<std::string> labels{"entailment", "neutral", "contradiction"};
  std::vector<Example> out;
  for (std::size_t i = 0; i < n; ++i) {
    const std::size_t label = g.index(3);
    const std::size_t fact = g.index(kFacts);
    auto premise = g.fillers(g.range(4, 7));
    g.insert(premise, {tok("f", fact)});
    std::string h;
    if (label == 0) {
      h = tok("f", fact);
    } else if (label == 2) {
      h = tok("a", fact);
    } else {
      const std::size_t other = (fact + 1 + g.index(kFacts - 1)) % kFacts;
      h = tok(g.coin(0.5) ? "f" : "a", other);
    }
    auto hyp = g.fillers(g.range(2, 4));
    g.insert(hyp, {h});
    out.push_back(PairExample{join_ws(premise), join_ws(hyp), labels[label], std::nullopt});
  }
  return out;
}

inline std::vector<Example> similarity(Gen& g, std::size_t n) {
  std::vector<Example> out;
  for (std::size_t i = 0; i < n; ++i) {
    const bool same = g.coin(0.5);
    const std::size_t k = g.index(kKeywords);
    const std::size_t k2 = same ? k : (k + 1 + g.index(kKeywords - 1)) % kKeywords;
    auto a = g.fillers(g.range(3, 5));
    auto b = g.fillers(g.range(3, 5));
    g.insert(a, {tok("fin", g.index(6))});
    g.insert(b, {tok("fin", g.index(6))});
    g.insert(a, {tok("k", k)});
    g.insert(b, {tok("k", k2)});
    out.push_back(PairExample{join_ws(a), join_ws(b), same ? "same" : "different", std::nullopt});
  }
  return out;
}

inline std::vector<Example> topic(Gen& g, std::size_t n) {
  std::vector<Example> out;
  for (std::size_t i = 0; i < n; ++i) {
    const std::size_t t = g.index(kTopics);
    auto words = g.fillers(g.range(4, 8));
    for (int r = 0; r < 2; ++r) g.insert(words, {"tp" + std::to_string(t) + "_" + std::to_string(g.index(kTopicWords))});
    if (g.coin(0.5)) {
      const std::size_t other = (t + 1 + g.index(kTopics - 1)) % kTopics;
      g.insert(words, {"tp" + std::to_string(other) + "_" + std::to_string(g.index(kTopicWords))});
    }
    out.push_back(TextExample{join_ws(words), kTopicNames[t]});
  }
  return out;
}

inline const std::vector<std::string>& ner_labels() {
  static const std::vector<std::string> l{"O", "B-PER", "I-PER", "B-ORG", "I-ORG", "B-LOC", "I-LOC"};
  return l;
}

inline std::vector<Example> entities(Gen& g, std::size_t n) {
  static const std::vector<std::pair<std::string, std::string>> types{{"per", "PER"}, {"org", "ORG"}, {"loc", "LOC"}};
  std::vector<Example> out;
  for (std::size_t i = 0; i < n; ++i) {
    const std::size_t count = g.range(1, 3);
    TaggingExample ex;
    auto push_fillers = [&](std::size_t k) {
      for (std::size_t j = 0; j < k; ++j) {
        ex.tokens.push_back(g.filler());
        ex.tags.push_back("O");
      }
    };
    push_fillers(g.range(0, 2));
    for (std::size_t e = 0; e < count; ++e) {
      const auto& [fam, tag] = types[g.index(3)];
      const std::size_t len = g.range(1, 2);
      for (std::size_t j = 0; j < len; ++j) {
        ex.tokens.push_back(tok(j == 0 ? fam : fam + "x", g.index(kEntities)));
        ex.tags.push_back((j == 0 ? "B-" : "I-") + tag);
      }
      push_fillers(g.range(1, 3));
    }
    out.push_back(std::move(ex));
  }
  return out;
}

inline std::vector<Example> reading(Gen& g, std::size_t n) {
  static const std::vector<std::pair<std::string, std::string>> kinds{{"qwho", "per"}, {"qwhere", "loc"}, {"qwhen", "tim"}};
  std::vector<Example> out;
  for (std::size_t i = 0; i < n; ++i) {
    const std::size_t asked = g.index(3);
    std::vector<std::string> question{kinds[asked].first};
    auto qf = g.fillers(g.range(1, 2));
    question.insert(question.end(), qf.begin(), qf.end());

    // passage: fillers with three entities separated by at least one filler
    std::vector<std::string> passage;
    int start = 0, end = 0;
    std::vector<std::size_t> order{0, 1, 2};
    for (std::size_t a = 0; a < 2; ++a) std::swap(order[a], order[a + g.index(3 - a)]);
    auto more = g.fillers(g.range(0, 2));
    passage.insert(passage.end(), more.begin(), more.end());
    for (std::size_t k : order) {
      const std::size_t len = g.range(1, 2);
      if (k == asked) start = static_cast<int>(passage.size());
      for (std::size_t j = 0; j < len; ++j) passage.push_back(tok(kinds[k].second + (j ? "x" : ""), g.index(kEntities)));
      if (k == asked) end = static_cast<int>(passage.size()) - 1;
      more = g.fillers(g.range(1, 3));
      passage.insert(passage.end(), more.begin(), more.end());
    }
    out.push_back(SpanExample{join_ws(question), join_ws(passage), start, end});
  }
  return out;
}

inline std::vector<Example> answer_check(Gen& g, std::size_t n) {
  static const std::vector<std::pair<std::string, std::string>> kinds{{"qwho", "per"}, {"qwhere", "loc"}, {"qwhen", "tim"}};
  std::vector<Example> out;
  for (std::size_t i = 0; i < n; ++i) {
    const bool yes = g.coin(0.5);
    const std::size_t asked = g.index(3), k = g.index(kKeywords);
    std::size_t k2 = k, shown = asked;
    if (!yes) {
      if (g.coin(0.5))
        k2 = (k + 1 + g.index(kKeywords - 1)) % kKeywords;
      else
        shown = (asked + 1 + g.index(2)) % 3;
    }
    std::vector<std::string> q{kinds[asked].first};
    auto qf = g.fillers(g.range(1, 2));
    q.insert(q.end(), qf.begin(), qf.end());
    g.insert(q, {tok("k", k)});
    auto cand = g.fillers(g.range(3, 6));
    g.insert(cand, {tok("k", k2)});
    g.insert(cand, {tok(kinds[shown].second, g.index(kEntities))});
    out.push_back(PairExample{join_ws(q), join_ws(cand), yes ? "yes" : "no", std::nullopt});
  }
  return out;
}

/// `groups` questions with four candidates each, exactly one correct.
inline std::vector<Example> medical(Gen& g, std::size_t groups) {
  std::vector<Example> out;
  for (std::size_t gi = 0; gi < groups; ++gi) {
    const std::size_t sym = g.index(kMedical);
    auto q = g.fillers(g.range(2, 4));
    g.insert(q, {tok("med", g.index(6))});
    g.insert(q, {tok("sym", sym)});
    const std::size_t right = g.index(4);
    std::vector<std::size_t> used{cure_for(sym)};
    for (std::size_t c = 0; c < 4; ++c) {
      std::size_t cure = cure_for(sym);
      if (c != right) {
        do {
          cure = g.index(kMedical);
        } while (std::find(used.begin(), used.end(), cure) != used.end());
        used.push_back(cure);
      }
      auto a = g.fillers(g.range(2, 4));
      g.insert(a, {tok("med", g.index(6))});
      g.insert(a, {tok("cure", cure)});
      out.push_back(PairExample{join_ws(q), join_ws(a), c == right ? "yes" : "no", static_cast<int>(gi)});
    }
  }
  return out;
}

/// Documents of 3-6 sentences; each document draws keywords from one topic,
/// so adjacent sentences share a topic and random pairs mostly do not.
inline std::string corpus(Gen& g, std::size_t documents) {
  std::string out;
  for (std::size_t d = 0; d < documents; ++d) {
    if (d) out += '\n';
    const std::size_t t = g.index(kTopics);
    const std::size_t sentences = g.range(3, 6);
    for (std::size_t s = 0; s < sentences; ++s) {
      auto words = g.fillers(g.range(4, 8));
      const std::size_t kw = g.range(1, 2);
      for (std::size_t k = 0; k < kw; ++k) g.insert(words, {"tp" + std::to_string(t) + "_" + std::to_string(g.index(kTopicWords))});
      out += join_ws(words) + '\n';
    }
  }
  return out;
}

// ---------------------------------------------------------------------------

struct TaskRecipe {
  std::string id;
  std::string name;
  HeadType head;
  std::vector<std::string> skills;
  std::vector<std::string> labels;
  std::string metric;
  bool ranking = false;
  std::size_t train_size;  // examples, or groups for ranking
  std::size_t eval_size;
  std::vector<Example> (*make)(Gen&, std::size_t);
};

/// Train sizes are the original dataset sizes scaled by 1/10; evaluation
/// sets are scaled the same way but kept at 500 or more.
inline std::vector<TaskRecipe> recipes() {
  using H = HeadType;
  return {
      {"T1", "sentiment", H::sequence_classification, {"s1", "s4", "s7"}, {"negative", "positive"}, "accuracy", false, 960, 500, sentiment},
      {"T2", "inference", H::pair_classification, {"s1", "s3", "s7"}, {"entailment", "neutral", "contradiction"}, "accuracy", false, 5000, 500, inference},
      {"T3", "similarity", H::pair_classification, {"s1", "s3", "s6", "s7"}, {"different", "same"}, "accuracy", false, 3430, 500, similarity},
      {"T4", "topic", H::sequence_classification, {"s1", "s7"}, kTopicNames, "accuracy", false, 5330, 1000, topic},
      {"T5", "entities", H::token_tagging, {"s2", "s7"}, ner_labels(), "entity_f1", false, 1570, 500, entities},
      {"T6", "reading", H::span_extraction, {"s2", "s3", "s5", "s7"}, {}, "span_f1", false, 1000, 500, reading},
  };
}

inline std::vector<TaskRecipe> new_task_recipes() {
  using H = HeadType;
  return {
      {"N1", "answer_check", H::pair_classification, {"s1", "s3", "s5", "s7"}, {"no", "yes"}, "f1", false, 2000, 500, answer_check},
      {"N2", "medical", H::pair_classification, {"s1", "s3", "s5", "s7"}, {"no", "yes"}, "top1", true, 500, 200, medical},
  };
}

inline std::vector<Example> generate(const TaskRecipe& r, std::uint64_t seed, bool eval) {
  Gen g(stream_seed(seed, r.id + (eval ? ".eval" : ".train")));
  return r.make(g, eval ? r.eval_size : r.train_size);
}

inline TaskSpec spec_of(const TaskRecipe& r) {
  TaskSpec t;
  t.id = r.id;
  t.name = r.name;
  t.head = r.head;
  t.skill_ids = r.skills;
  t.labels = r.labels;
  t.metric = r.metric;
  t.ranking = r.ranking;
  t.train_path = r.id + ".train.jsonl";
  t.eval_path = r.id + ".eval.jsonl";
  return t;
}

struct SuiteOptions {
  std::uint64_t seed = 2022;
  std::size_t corpus_documents = 2000;
};

/// Writes vocab.txt, corpus.txt, tasks.json and train/eval JSONL for every
/// task into `dir`; returns the path of tasks.json. Pure function of the seed.
inline std::string write_suite(const std::string& dir, const SuiteOptions& opt = {}) {
  namespace fs = std::filesystem;
  fs::create_directories(dir);
  const fs::path base(dir);
  vocabulary().save((base / "vocab.txt").string());
  {
    Gen g(stream_seed(opt.seed, "corpus"));
    std::ofstream out(base / "corpus.txt", std::ios::binary);
    out << corpus(g, opt.corpus_documents);
  }
  TaskConfig cfg;
  cfg.registry = default_registry();
  cfg.vocab_path = "vocab.txt";
  cfg.corpus_path = "corpus.txt";
  for (const auto& r : recipes()) {
    write_jsonl((base / (r.id + ".train.jsonl")).string(), generate(r, opt.seed, false));
    write_jsonl((base / (r.id + ".eval.jsonl")).string(), generate(r, opt.seed, true));
    cfg.tasks.push_back(spec_of(r));
  }
  for (const auto& r : new_task_recipes()) {
    write_jsonl((base / (r.id + ".train.jsonl")).string(), generate(r, opt.seed, false));
    write_jsonl((base / (r.id + ".eval.jsonl")).string(), generate(r, opt.seed, true));
    AdaptationPlan p;
    p.task = spec_of(r);
    if (r.ranking) p.inject_skill = "s8";
    cfg.new_tasks.push_back(std::move(p));
  }
  const std::string path = (base / "tasks.json").string();
  save_task_config(cfg, path);
  return path;
}

}  // namespace skillnet::synthetic
