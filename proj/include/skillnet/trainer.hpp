// SPDX-License-Identifier: Apache-2.0
//
// Joint multi-task training: sample a task by its size-tempered rate, draw a batch from it,
// run the encoder under the task's skill set, and update only the
// parameters that the step touched.
//
// Metrics log records (one JSON object per line, keys sorted):
//   {"event":"train","step","task","loss","mean_loss","lr","grad_norm"}
//   {"event":"eval","step","metrics":{task: score},"avg"}
#pragma once

#include <cmath>
#include <fstream>
#include <map>
#include <memory>
#include <numeric>
#include <random>
#include <set>
#include <span>
#include <string>
#include <vector>

#include <json.hpp>

#include "skillnet/batch.hpp"
#include "skillnet/encoder.hpp"
#include "skillnet/heads.hpp"
#include "skillnet/metrics.hpp"
#include "skillnet/optim.hpp"
#include "skillnet/sampler.hpp"
#include "skillnet/task_config.hpp"

namespace skillnet {

struct TaskData {
  TaskSpec spec;
  std::vector<Example> train;
  std::vector<Example> eval;
};

inline TaskData load_task_data(const TaskSpec& spec) {
  TaskData d{spec, read_jsonl(spec.train_path, spec.head), read_jsonl(spec.eval_path, spec.head)};
  if (d.train.empty()) throw DataError("task " + spec.id + " has no training examples");
  validate_examples(spec, d.train);
  validate_examples(spec, d.eval);
  return d;
}

/// The task's metric name, resolving the empty default from the head type.
inline std::string resolved_metric(const TaskSpec& t) {
  if (!t.metric.empty()) return t.metric;
  switch (t.head) {
    case HeadType::sequence_classification:
    case HeadType::pair_classification: return t.ranking ? "top1" : "accuracy";
    case HeadType::token_tagging: return "entity_f1";
    case HeadType::span_extraction: return "span_f1";
  }
  return "accuracy";
}

class MetricsLog {
 public:
  MetricsLog() = default;
  explicit MetricsLog(const std::string& path) {
    const std::filesystem::path p(path);
    if (p.has_parent_path()) std::filesystem::create_directories(p.parent_path());
    out_ = std::make_unique<std::ofstream>(path, std::ios::binary | std::ios::trunc);
    if (!*out_) throw ConfigError("cannot open metrics log " + path);
  }

  void write(const nlohmann::json& record) {
    if (!out_) return;
    *out_ << record.dump() << '\n';
    out_->flush();
  }

  bool enabled() const { return out_ != nullptr; }

 private:
  std::unique_ptr<std::ofstream> out_;
};

// ---------------------------------------------------------------------------
// One step

inline void ensure_head(Model& m, const TaskSpec& task) {
  if (auto it = m.heads.find(task.id); it != m.heads.end()) {
    if (it->second.kind != head_kind_for(task.head)) throw ConfigError("head of task " + task.id + " has the wrong kind");
    return;
  }
  m.add_head(task.id, {head_kind_for(task.head), task.num_labels()});
}

inline Var task_loss(Tape& tape, Model& m, const TaskSpec& task, const Batch& b, std::span<const std::size_t> active,
                     const EncodeOptions& opt = {}) {
  Var h = encode(tape, m, b.input, active, opt);
  switch (task.head) {
    case HeadType::sequence_classification:
    case HeadType::pair_classification:
      return cls_loss(tape, m, task.id, h, b.input.batch, b.input.seq_len, b.labels).loss;
    case HeadType::token_tagging: return crf_tagging_loss(tape, m, task.id, h, b.tag_rows, b.tags);
    case HeadType::span_extraction:
      return span_loss(tape, m, task.id, h, b.input.batch, b.input.seq_len, b.passage_mask, b.span_start, b.span_end)
          .loss;
  }
  throw ConfigError("unknown head type");
}

/// Encoder parameters of the routing plus the task's head.
inline std::set<std::string> touched_parameters(const Model& m, const std::string& task_id,
                                                std::span<const std::size_t> active) {
  auto s = active_parameter_names(m, active);
  for (const auto& n : m.head_param_names(task_id)) s.insert(n);
  return s;
}

struct StepOutcome {
  double loss = 0.0;
  double grad_norm = 0.0;
  std::size_t updated_params = 0;
};

/// Forward, backward, clip and sparse Adam. `trainable`, when given, further
/// restricts which touched parameters are updated. Grads are zeroed before
/// the pass and left in place afterwards.
inline StepOutcome train_step(Model& m, AdamState& optim, const TaskSpec& task, std::span<const std::size_t> active,
                              const Batch& b, double lr, double clip_norm,
                              const std::set<std::string>* trainable = nullptr,
                              std::mt19937_64* dropout_rng = nullptr) {
  m.params.zero_grad();
  Tape tape;
  EncodeOptions opt;
  if (m.config.dropout > 0.0) opt.dropout_rng = dropout_rng;
  Var loss = task_loss(tape, m, task, b, active, opt);
  const double value = loss.value()[0];
  if (!std::isfinite(value)) throw DivergenceError("non-finite loss on task " + task.id);
  tape.backward(loss);

  std::set<std::string> names;
  for (const auto& n : touched_parameters(m, task.id, active))
    if (!trainable || trainable->count(n)) names.insert(n);
  StepOutcome out;
  out.loss = value;
  out.grad_norm = clip_grad_norm(m.params, names, clip_norm);
  if (!std::isfinite(out.grad_norm)) throw DivergenceError("non-finite gradient on task " + task.id);
  adam_update(m.params, optim, names, lr);
  out.updated_params = m.params.count(names);
  return out;
}

// ---------------------------------------------------------------------------
// Evaluation

struct EvalOptions {
  std::size_t max_seq_len = 64;
  std::size_t batch_size = 64;
  std::size_t max_answer_len = 8;
};

inline double evaluate(Model& m, const Vocab& vocab, const TaskSpec& task, std::span<const std::size_t> active,
                       const std::vector<Example>& examples, const EvalOptions& opt = {}) {
  if (examples.empty()) throw DataError("task " + task.id + " has no evaluation examples");
  const std::string metric = resolved_metric(task);
  const bool cls = task.head == HeadType::sequence_classification || task.head == HeadType::pair_classification;
  if (cls != (metric == "accuracy" || metric == "f1" || metric == "top1") ||
      (task.head == HeadType::token_tagging) != (metric == "entity_f1") ||
      (task.head == HeadType::span_extraction) != (metric == "span_f1"))
    throw ConfigError("metric " + metric + " does not fit the head of task " + task.id);

  std::vector<int> pred, gold, groups;
  std::vector<double> scores;
  std::vector<std::vector<std::string>> pred_tags, gold_tags;
  double span_sum = 0.0;
  const int positive = static_cast<int>(task.num_labels()) - 1;

  for (std::size_t lo = 0; lo < examples.size(); lo += opt.batch_size) {
    const std::size_t hi = std::min(examples.size(), lo + opt.batch_size);
    std::vector<const Example*> chunk;
    for (std::size_t i = lo; i < hi; ++i) chunk.push_back(&examples[i]);
    const Batch b = make_batch(vocab, task, chunk, opt.max_seq_len);
    Tape tape;
    Var h = encode(tape, m, b.input, active);
    const std::size_t n = b.input.batch, L = b.input.seq_len;

    if (cls) {
      const Tensor& logits = cls_logits(tape, m, task.id, h, n, L).value();
      const std::size_t c = logits.cols();
      for (std::size_t r = 0; r < n; ++r) {
        const double* row = logits.data().data() + r * c;
        pred.push_back(static_cast<int>(std::max_element(row, row + c) - row));
        gold.push_back(b.labels[r]);
        // log-odds of the positive class against the rest
        scores.push_back(row[positive] - detail::log_sum_exp(row, c));
        if (task.ranking) {
          const auto& g = std::get<PairExample>(*chunk[r]).group;
          if (!g) throw DataError("ranking task " + task.id + " has an example without a group");
          groups.push_back(*g);
        }
      }
    } else if (task.head == HeadType::token_tagging) {
      const Tensor& em = crf_emissions(tape, m, task.id, h).value();
      const std::string p = names::head(task.id);
      const Tensor& trans = m.param(p + "transitions").value;
      const Tensor& start = m.param(p + "start").value;
      const Tensor& end = m.param(p + "end").value;
      const std::size_t k = em.cols();
      for (std::size_t r = 0; r < n; ++r) {
        const auto& rows = b.tag_rows[r];
        std::vector<std::string> pt, gt;
        if (!rows.empty()) {
          Tensor sub({rows.size(), k});
          for (std::size_t t = 0; t < rows.size(); ++t)
            for (std::size_t j = 0; j < k; ++j) sub[t * k + j] = em[rows[t] * k + j];
          for (int y : crf_viterbi(CrfScores{sub, trans, start, end})) pt.push_back(task.labels[static_cast<std::size_t>(y)]);
        }
        for (int y : b.tags[r]) gt.push_back(task.labels[static_cast<std::size_t>(y)]);
        // gold tags beyond the truncation point count as missed entities
        const auto& full = std::get<TaggingExample>(*chunk[r]).tags;
        for (std::size_t t = gt.size(); t < full.size(); ++t) {
          gt.push_back(full[t]);
          pt.push_back("O");
        }
        pred_tags.push_back(std::move(pt));
        gold_tags.push_back(std::move(gt));
      }
    } else {
      const Tensor& v_start = m.param(names::head(task.id) + "start").value;
      const Tensor& v_end = m.param(names::head(task.id) + "end").value;
      const Tensor& hv = h.value();
      const std::size_t d = hv.cols();
      for (std::size_t r = 0; r < n; ++r) {
        const auto& ex = std::get<SpanExample>(*chunk[r]);
        const auto passage = split_ws(ex.passage);
        const std::size_t off = b.passage_offset[r];
        std::size_t len = 0;
        while (off + len < L && b.passage_mask[r * L + off + len]) ++len;
        std::vector<double> ls(len), le(len);
        for (std::size_t i = 0; i < len; ++i) {
          const double* x = hv.data().data() + (r * L + off + i) * d;
          for (std::size_t j = 0; j < d; ++j) {
            ls[i] += x[j] * v_start[j];
            le[i] += x[j] * v_end[j];
          }
        }
        // decoding on logits is equivalent to decoding on softmax products
        const double ms = *std::max_element(ls.begin(), ls.end()), me = *std::max_element(le.begin(), le.end());
        for (auto& v : ls) v = std::exp(v - ms);
        for (auto& v : le) v = std::exp(v - me);
        const auto [i, j] = span_decode(ls, le, opt.max_answer_len);
        const std::vector<std::string> pt(passage.begin() + static_cast<long>(i), passage.begin() + static_cast<long>(j) + 1);
        const std::vector<std::string> gt(passage.begin() + ex.answer_start, passage.begin() + ex.answer_end + 1);
        span_sum += span_token_f1(pt, gt);
      }
    }
  }

  if (metric == "accuracy") return accuracy(pred, gold);
  if (metric == "f1") return binary_f1(pred, gold, positive).f1;
  if (metric == "top1") {
    if (!task.ranking) throw ConfigError("top1 metric needs a ranking task: " + task.id);
    return top1_accuracy(groups, scores, gold, positive);
  }
  if (metric == "entity_f1") return entity_f1(pred_tags, gold_tags).f1;
  return span_sum / static_cast<double>(examples.size());
}

// ---------------------------------------------------------------------------
// Joint training loop

struct TrainerConfig {
  std::size_t steps = 2000;
  std::size_t batch_size = 16;
  std::size_t max_seq_len = 64;
  double alpha = 1.0;
  LrSchedule schedule{};
  double clip_norm = 1.0;
  std::uint64_t seed = 2022;
  std::size_t log_every = 50;
  std::size_t eval_every = 0;  // 0 evaluates once, after the last step
  EvalOptions eval{};

  void validate() const {
    if (batch_size == 0) throw ConfigError("batch_size must be positive");
    if (!(alpha >= 0.0)) throw ConfigError("alpha must be >= 0");
    if (log_every == 0) throw ConfigError("log_every must be positive");
    schedule.validate();
  }
};

using TaskScores = std::map<std::string, double>;

inline double average(const TaskScores& s) {
  if (s.empty()) return 0.0;
  double sum = 0.0;
  for (const auto& [_, v] : s) sum += v;
  return sum / static_cast<double>(s.size());
}

class MultitaskTrainer {
 public:
  MultitaskTrainer(Model& model, const Vocab& vocab, std::vector<TaskData> tasks, TrainerConfig cfg,
                   MetricsLog* log = nullptr)
      : model_(model), vocab_(vocab), tasks_(std::move(tasks)), cfg_(cfg), log_(log),
        task_rng_(cfg.seed ^ name_hash("tasks")), batch_rng_(cfg.seed ^ name_hash("batches")),
        dropout_rng_(cfg.seed ^ name_hash("dropout")) {
    cfg_.validate();
    if (tasks_.empty()) throw ConfigError("trainer needs at least one task");
    std::vector<double> sizes;
    for (const auto& t : tasks_) {
      if (t.train.empty()) throw DataError("task " + t.spec.id + " has no training examples");
      ensure_head(model_, t.spec);
      active_.push_back(canonicalize(t.spec, model_.registry));
      sizes.push_back(static_cast<double>(t.train.size()));
    }
    sampler_ = std::make_unique<TaskSampler>(sizes, cfg_.alpha);
    counts_.assign(tasks_.size(), 0);
    loss_sums_.assign(tasks_.size(), 0.0);
  }

  // The trainer keeps a reference to the vocabulary.
  MultitaskTrainer(Model&, Vocab&&, std::vector<TaskData>, TrainerConfig, MetricsLog* = nullptr) = delete;

  /// Restricts updates to these parameter names (adaptation regimes).
  void set_trainable(std::set<std::string> names) { trainable_ = std::move(names); }

  AdamState& optimizer() { return optim_; }
  const std::vector<TaskData>& tasks() const { return tasks_; }
  const std::vector<std::size_t>& active(std::size_t task) const { return active_.at(task); }
  const std::vector<std::size_t>& task_counts() const { return counts_; }
  std::size_t steps_done() const { return step_; }

  Batch draw_batch(std::size_t task) {
    const auto& train = tasks_[task].train;
    std::vector<const Example*> chosen;
    for (std::size_t i = 0; i < cfg_.batch_size; ++i) chosen.push_back(&train[uniform_index(batch_rng_, train.size())]);
    return make_batch(vocab_, tasks_[task].spec, chosen, cfg_.max_seq_len);
  }

  /// One sampled step; returns the sampled task index.
  std::size_t step(StepOutcome* outcome = nullptr) {
    const std::size_t t = sampler_->sample(task_rng_);
    const Batch b = draw_batch(t);
    ++step_;
    const double lr = lr_at(cfg_.schedule, step_);
    const StepOutcome o = train_step(model_, optim_, tasks_[t].spec, active_[t], b, lr, cfg_.clip_norm,
                                     trainable_ ? &*trainable_ : nullptr, &dropout_rng_);
    ++counts_[t];
    loss_sums_[t] += o.loss;
    window_loss_ += o.loss;
    ++window_n_;
    if (log_ && step_ % cfg_.log_every == 0) {
      log_->write({{"event", "train"},
                   {"step", step_},
                   {"task", tasks_[t].spec.id},
                   {"loss", o.loss},
                   {"mean_loss", window_loss_ / static_cast<double>(window_n_)},
                   {"lr", lr},
                   {"grad_norm", o.grad_norm}});
      window_loss_ = 0.0;
      window_n_ = 0;
    }
    if (outcome) *outcome = o;
    return t;
  }

  TaskScores evaluate_all() {
    TaskScores s;
    for (std::size_t i = 0; i < tasks_.size(); ++i)
      s[tasks_[i].spec.id] = evaluate(model_, vocab_, tasks_[i].spec, active_[i], tasks_[i].eval, cfg_.eval);
    if (log_) log_->write({{"event", "eval"}, {"step", step_}, {"metrics", s}, {"avg", average(s)}});
    return s;
  }

  /// Runs the remaining steps up to cfg.steps and evaluates at the end.
  TaskScores run() {
    while (step_ < cfg_.steps) {
      step();
      if (cfg_.eval_every && step_ % cfg_.eval_every == 0 && step_ < cfg_.steps) evaluate_all();
    }
    return evaluate_all();
  }

 private:
  Model& model_;
  const Vocab& vocab_;
  std::vector<TaskData> tasks_;
  TrainerConfig cfg_;
  MetricsLog* log_;
  std::vector<std::vector<std::size_t>> active_;
  std::unique_ptr<TaskSampler> sampler_;
  AdamState optim_;
  std::optional<std::set<std::string>> trainable_;
  std::mt19937_64 task_rng_, batch_rng_, dropout_rng_;
  std::vector<std::size_t> counts_;
  std::vector<double> loss_sums_;
  double window_loss_ = 0.0;
  std::size_t window_n_ = 0;
  std::size_t step_ = 0;
};

}  // namespace skillnet
