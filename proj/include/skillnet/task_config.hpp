// SPDX-License-Identifier: Apache-2.0
//
// Task configuration file (JSON). Relative paths resolve against the
// directory holding the file.
//
// {
//   "vocab": "vocab.txt",
//   "corpus": "corpus.txt",
//   "general_skill": "s7",
//   "skills": [{"id": "s1", "description": "..."}, ...],
//   "tasks": [{"id": "T1", "name": "sentiment", "head": "sequence_classification",
//              "skills": ["s1", "s4", "s7"], "labels": ["negative", "positive"],
//              "train": "T1.train.jsonl", "eval": "T1.eval.jsonl",
//              "metric": "accuracy", "ranking": false}, ...],
//   "new_tasks": [{ ...task fields...,
//                   "adaptation": {"inject_skill": "s8", "init_source": "s7", "update_old_skills": true}}]
// }
#pragma once

#include <filesystem>
#include <fstream>
#include <optional>
#include <string>
#include <vector>

#include <json.hpp>

#include "skillnet/routing.hpp"

namespace skillnet {

struct AdaptationPlan {
  TaskSpec task;
  std::optional<std::string> inject_skill;
  std::string init_source = "s7";
  bool update_old_skills = true;
};

struct TaskConfig {
  SkillRegistry registry;
  std::vector<TaskSpec> tasks;
  std::vector<AdaptationPlan> new_tasks;
  std::string vocab_path;
  std::string corpus_path;

  const TaskSpec& task(const std::string& id) const {
    for (const auto& t : tasks)
      if (t.id == id) return t;
    for (const auto& p : new_tasks)
      if (p.task.id == id) return p.task;
    throw ConfigError("no task with id " + id);
  }

  const AdaptationPlan& plan(const std::string& id) const {
    for (const auto& p : new_tasks)
      if (p.task.id == id) return p;
    throw ConfigError("no new task with id " + id);
  }
};

namespace detail {

inline nlohmann::json task_to_json(const TaskSpec& t) {
  nlohmann::json j;
  j["id"] = t.id;
  j["name"] = t.name;
  j["head"] = to_string(t.head);
  j["skills"] = t.skill_ids;
  j["labels"] = t.labels;
  j["train"] = t.train_path;
  j["eval"] = t.eval_path;
  j["metric"] = t.metric;
  j["ranking"] = t.ranking;
  return j;
}

inline TaskSpec task_from_json(const nlohmann::json& j, const std::filesystem::path& base) {
  TaskSpec t;
  t.id = j.at("id").get<std::string>();
  t.name = j.value("name", t.id);
  t.head = head_type_from_string(j.at("head").get<std::string>());
  t.skill_ids = j.at("skills").get<std::vector<std::string>>();
  t.labels = j.value("labels", std::vector<std::string>{});
  auto resolve = [&](const std::string& p) { return p.empty() ? p : (base / p).lexically_normal().string(); };
  t.train_path = resolve(j.value("train", std::string{}));
  t.eval_path = resolve(j.value("eval", std::string{}));
  t.metric = j.value("metric", std::string{});
  t.ranking = j.value("ranking", false);
  if (t.head != HeadType::span_extraction && t.labels.empty()) throw ConfigError("task " + t.id + " declares no labels");
  return t;
}

}  // namespace detail

inline nlohmann::json task_config_to_json(const TaskConfig& c) {
  nlohmann::json j;
  j["vocab"] = c.vocab_path;
  j["corpus"] = c.corpus_path;
  if (c.registry.general_skill()) j["general_skill"] = *c.registry.general_skill();
  j["skills"] = nlohmann::json::array();
  for (const auto& s : c.registry.skills()) j["skills"].push_back({{"id", s.id}, {"description", s.description}});
  j["tasks"] = nlohmann::json::array();
  for (const auto& t : c.tasks) j["tasks"].push_back(detail::task_to_json(t));
  j["new_tasks"] = nlohmann::json::array();
  for (const auto& p : c.new_tasks) {
    auto tj = detail::task_to_json(p.task);
    tj["adaptation"] = {{"inject_skill", p.inject_skill ? nlohmann::json(*p.inject_skill) : nlohmann::json()},
                        {"init_source", p.init_source},
                        {"update_old_skills", p.update_old_skills}};
    j["new_tasks"].push_back(tj);
  }
  return j;
}

inline void save_task_config(const TaskConfig& c, const std::string& path) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw ConfigError("cannot write " + path);
  out << task_config_to_json(c).dump(2) << '\n';
}

inline TaskConfig load_task_config(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw ConfigError("cannot read task config " + path);
  const std::filesystem::path base = std::filesystem::path(path).parent_path();
  TaskConfig c;
  try {
    const auto j = nlohmann::json::parse(in);
    std::vector<Skill> skills;
    for (const auto& s : j.at("skills")) skills.push_back({s.at("id").get<std::string>(), s.value("description", "")});
    std::optional<std::string> general;
    if (j.contains("general_skill") && !j["general_skill"].is_null()) general = j["general_skill"].get<std::string>();
    c.registry = SkillRegistry(std::move(skills), general);
    auto resolve = [&](const std::string& p) { return p.empty() ? p : (base / p).lexically_normal().string(); };
    c.vocab_path = resolve(j.value("vocab", std::string{}));
    c.corpus_path = resolve(j.value("corpus", std::string{}));
    for (const auto& t : j.at("tasks")) c.tasks.push_back(detail::task_from_json(t, base));
    if (j.contains("new_tasks"))
      for (const auto& t : j["new_tasks"]) {
        AdaptationPlan p;
        p.task = detail::task_from_json(t, base);
        if (t.contains("adaptation")) {
          const auto& a = t["adaptation"];
          if (a.contains("inject_skill") && !a["inject_skill"].is_null()) p.inject_skill = a["inject_skill"].get<std::string>();
          p.init_source = a.value("init_source", p.init_source);
          p.update_old_skills = a.value("update_old_skills", true);
        }
        c.new_tasks.push_back(std::move(p));
      }
  } catch (const nlohmann::json::exception& e) {
    throw ConfigError(path + ": " + e.what());
  }
  for (const auto& t : c.tasks) canonicalize(t, c.registry);
  return c;
}

}  // namespace skillnet
