// SPDX-License-Identifier: Apache-2.0
//
// Result tables and the multi-run experiments behind them: system
// comparison, single-skill ablation, α sweep and modular-layer sweep.
// Every run inside an experiment is trained from scratch with the same seed.
#pragma once

#include <cstdio>
#include <iomanip>
#include <sstream>
#include <string>
#include <vector>

#include "skillnet/baselines.hpp"

namespace skillnet {

struct SummaryRow {
  std::string label;
  TaskScores scores;
  // leading columns such as "#Params Activated", in column order
  std::vector<std::pair<std::string, std::string>> extra;
};

/// Rows of per-task scores; Avg is always recomputed from the task columns.
class SummaryTable {
 public:
  SummaryTable(std::string title, std::vector<std::string> tasks) : title_(std::move(title)), tasks_(std::move(tasks)) {}

  void add(SummaryRow row) {
    for (const auto& t : tasks_)
      if (!row.scores.count(t)) throw ConfigError("row '" + row.label + "' lacks a score for " + t);
    if (!rows_.empty()) {
      const auto& first = rows_.front().extra;
      bool same = first.size() == row.extra.size();
      for (std::size_t i = 0; same && i < first.size(); ++i) same = first[i].first == row.extra[i].first;
      if (!same) throw ConfigError("row '" + row.label + "' has different extra columns");
    }
    rows_.push_back(std::move(row));
  }

  const std::vector<SummaryRow>& rows() const { return rows_; }
  const std::vector<std::string>& tasks() const { return tasks_; }

  double avg(const SummaryRow& r) const {
    double s = 0.0;
    for (const auto& t : tasks_) s += r.scores.at(t);
    return tasks_.empty() ? 0.0 : s / static_cast<double>(tasks_.size());
  }

  /// Scores as percentages with two decimals, columns padded to align.
  std::string text() const {
    std::vector<std::string> header{""};
    if (!rows_.empty())
      for (const auto& [k, _] : rows_.front().extra) header.push_back(k);
    for (const auto& t : tasks_) header.push_back(t);
    header.push_back("Avg");

    std::vector<std::vector<std::string>> cells{header};
    for (const auto& r : rows_) {
      std::vector<std::string> line{r.label};
      for (const auto& [_, v] : r.extra) line.push_back(v);
      for (const auto& t : tasks_) line.push_back(pct(r.scores.at(t)));
      line.push_back(pct(avg(r)));
      cells.push_back(std::move(line));
    }
    std::vector<std::size_t> width(header.size(), 0);
    for (const auto& line : cells)
      for (std::size_t i = 0; i < line.size(); ++i) width[i] = std::max(width[i], line[i].size());

    std::ostringstream out;
    if (!title_.empty()) out << title_ << "\n";
    for (std::size_t li = 0; li < cells.size(); ++li) {
      std::string row;
      for (std::size_t i = 0; i < cells[li].size(); ++i) {
        const std::string& c = cells[li][i];
        const std::string pad(width[i] - c.size(), ' ');
        row += i == 0 ? c + pad : "  " + pad + c;
      }
      while (!row.empty() && row.back() == ' ') row.pop_back();
      out << row << "\n";
      if (li == 0) out << std::string(row.size(), '-') << "\n";
    }
    return out.str();
  }

  nlohmann::json json() const {
    nlohmann::json rows = nlohmann::json::array();
    for (const auto& r : rows_) {
      nlohmann::json j{{"system", r.label}};
      for (const auto& [k, v] : r.extra) j[k] = v;
      nlohmann::json scores = nlohmann::json::object();
      for (const auto& t : tasks_) scores[t] = r.scores.at(t);
      j["scores"] = scores;
      j["avg"] = avg(r);
      rows.push_back(j);
    }
    return {{"title", title_}, {"tasks", tasks_}, {"rows", rows}};
  }

 private:
  static std::string pct(double v) {
    char buf[32];
    std::snprintf(buf, sizeof buf, "%.2f", 100.0 * v);
    return buf;
  }

  std::string title_;
  std::vector<std::string> tasks_;
  std::vector<SummaryRow> rows_;
};

inline std::vector<std::string> task_ids(const std::vector<TaskData>& tasks) {
  std::vector<std::string> out;
  for (const auto& t : tasks) out.push_back(t.spec.id);
  return out;
}

inline SummaryRow system_row(const SystemResult& r) {
  return {system_label(r.kind), r.scores, {{"#Params Activated", std::to_string(r.activated_params)}}};
}

/// Everything a single-model run needs besides the system kind.
struct ExperimentSetup {
  EncoderConfig encoder;
  SkillRegistry registry;
  std::vector<TaskData> tasks;
  const Vocab* vocab = nullptr;
  TrainerConfig trainer;
};

inline SummaryTable compare_systems(const ExperimentSetup& s, const std::vector<SystemKind>& kinds,
                                    const RunOutput& out = {}, std::vector<SystemResult>* results = nullptr) {
  SummaryTable table("Multi-task results", task_ids(s.tasks));
  for (SystemKind k : kinds) {
    RunOutput o = out;
    if (o.run_id.empty()) o.run_id = "train";
    auto r = run_system(k, s.encoder, s.registry, s.tasks, *s.vocab, s.trainer, o);
    table.add(system_row(r));
    if (results) results->push_back(std::move(r));
  }
  return table;
}

/// Full model plus one run per removed skill. Each ablated
/// run checks that neither its registry, its routing nor its parameters
/// mention the removed skill.
inline SummaryTable run_ablation(const ExperimentSetup& s, const RunOutput& out = {},
                                 std::vector<std::string> removed = {}) {
  if (removed.empty()) removed = s.registry.ids();
  SummaryTable table("Skill ablation", task_ids(s.tasks));
  RunOutput o = out;
  o.run_id = "ablate-full";
  table.add({"SkillNet", run_system(SystemKind::skillnet, s.encoder, s.registry, s.tasks, *s.vocab, s.trainer, o).scores, {}});

  for (const auto& skill : removed) {
    std::vector<TaskSpec> specs;
    for (const auto& t : s.tasks) specs.push_back(t.spec);
    const AblationResult ab = ablate(s.registry, specs, skill);
    std::vector<TaskData> tasks = s.tasks;
    for (std::size_t i = 0; i < tasks.size(); ++i) tasks[i].spec = ab.tasks[i];

    if (ab.registry.find(skill)) throw RoutingError("ablation kept " + skill + " in the registry");
    for (const auto& t : ab.tasks)
      if (std::find(t.skill_ids.begin(), t.skill_ids.end(), skill) != t.skill_ids.end())
        throw RoutingError("ablation left " + skill + " in the routing of " + t.id);
    {
      const Model probe(s.encoder, ab.registry, s.trainer.seed);
      for (const auto& [n, _] : probe.params)
        if (n.find("." + skill + ".") != std::string::npos) throw RoutingError("ablated model still has " + n);
    }

    o.run_id = "ablate-wo-" + skill;
    const auto r = run_system(SystemKind::skillnet, s.encoder, ab.registry, tasks, *s.vocab, s.trainer, o);
    table.add({"  - w/o " + skill, r.scores, {}});
  }
  return table;
}

inline SummaryTable alpha_sweep(const ExperimentSetup& s, const std::vector<double>& alphas, const RunOutput& out = {}) {
  SummaryTable table("Sampling rate sweep", task_ids(s.tasks));
  for (double a : alphas) {
    TrainerConfig tc = s.trainer;
    tc.alpha = a;
    std::ostringstream label;
    label << "alpha=" << a;
    RunOutput o = out;
    o.run_id = "sweep-" + label.str();
    const auto r = run_system(SystemKind::skillnet, s.encoder, s.registry, s.tasks, *s.vocab, tc, o);
    table.add({label.str(), r.scores, {}});
  }
  return table;
}

/// One run per number of top skill-modular layers, with total parameters.
inline SummaryTable layer_sweep(const ExperimentSetup& s, const std::vector<std::size_t>& layers,
                                const RunOutput& out = {}) {
  SummaryTable table("Skill-layer sweep", task_ids(s.tasks));
  for (std::size_t n : layers) {
    EncoderConfig c = s.encoder;
    c.num_skill_layers = n;
    c.validate();
    RunOutput o = out;
    o.run_id = "sweep-layers" + std::to_string(n);
    const auto r = run_system(SystemKind::skillnet, c, s.registry, s.tasks, *s.vocab, s.trainer, o);
    table.add({"layers=" + std::to_string(n), r.scores, {{"#Params Total", std::to_string(r.total_params)}}});
  }
  return table;
}

}  // namespace skillnet
