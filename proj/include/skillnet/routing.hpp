// SPDX-License-Identifier: Apache-2.0
//
// Skill registry and task -> skill routing.
#pragma once

#include <algorithm>
#include <optional>
#include <set>
#include <string>
#include <vector>

#include "skillnet/error.hpp"

namespace skillnet {

struct Skill {
  std::string id;
  std::string description;

  friend bool operator==(const Skill&, const Skill&) = default;
};

enum class HeadType { sequence_classification, pair_classification, token_tagging, span_extraction };

inline std::string to_string(HeadType h) {
  switch (h) {
    case HeadType::sequence_classification: return "sequence_classification";
    case HeadType::pair_classification: return "pair_classification";
    case HeadType::token_tagging: return "token_tagging";
    case HeadType::span_extraction: return "span_extraction";
  }
  return "?";
}

inline HeadType head_type_from_string(const std::string& s) {
  if (s == "sequence_classification") return HeadType::sequence_classification;
  if (s == "pair_classification") return HeadType::pair_classification;
  if (s == "token_tagging") return HeadType::token_tagging;
  if (s == "span_extraction") return HeadType::span_extraction;
  throw ConfigError("unknown head type: " + s);
}

/// Ordered skills; a skill's index is its position in the FFN bank.
/// Without a general skill (after ablating it) no skill is auto-activated.
class SkillRegistry {
 public:
  SkillRegistry() = default;
  SkillRegistry(std::vector<Skill> skills, std::optional<std::string> general_skill)
      : skills_(std::move(skills)), general_(std::move(general_skill)) {
    validate();
  }

  const std::vector<Skill>& skills() const { return skills_; }
  std::size_t size() const { return skills_.size(); }
  const std::optional<std::string>& general_skill() const { return general_; }

  std::optional<std::size_t> find(const std::string& id) const {
    for (std::size_t i = 0; i < skills_.size(); ++i)
      if (skills_[i].id == id) return i;
    return std::nullopt;
  }

  std::size_t index_of(const std::string& id) const {
    if (auto i = find(id)) return *i;
    throw RoutingError("unknown skill id: " + id);
  }

  const std::string& id_at(std::size_t index) const {
    if (index >= skills_.size()) throw RoutingError("skill index " + std::to_string(index) + " out of range");
    return skills_[index].id;
  }

  std::vector<std::string> ids() const {
    std::vector<std::string> out;
    for (const auto& s : skills_) out.push_back(s.id);
    return out;
  }

  void append(Skill s) {
    if (find(s.id)) throw RoutingError("skill id already registered: " + s.id);
    skills_.push_back(std::move(s));
  }

  friend bool operator==(const SkillRegistry&, const SkillRegistry&) = default;

 private:
  void validate() const {
    std::set<std::string> seen;
    for (const auto& s : skills_)
      if (!seen.insert(s.id).second) throw RoutingError("duplicate skill id: " + s.id);
    if (general_ && !seen.count(*general_)) throw RoutingError("general skill not in registry: " + *general_);
  }

  std::vector<Skill> skills_;
  std::optional<std::string> general_;
};

struct TaskSpec {
  std::string id;
  std::string name;
  HeadType head = HeadType::sequence_classification;
  std::vector<std::string> skill_ids;
  std::vector<std::string> labels;  // empty for span extraction
  std::string train_path;
  std::string eval_path;
  // Pair tasks evaluated by ranking within candidate groups (top-1 accuracy).
  bool ranking = false;
  // Empty picks the head's default: accuracy, entity_f1 or span_f1.
  std::string metric;

  std::size_t num_labels() const { return labels.size(); }
};

/// Sorted bank indices of the task's skills plus the general skill.
inline std::vector<std::size_t> canonicalize(const TaskSpec& task, const SkillRegistry& registry) {
  std::set<std::size_t> idx;
  for (const auto& id : task.skill_ids) {
    auto i = registry.find(id);
    if (!i) throw RoutingError("task " + task.id + " references unknown skill '" + id + "'");
    idx.insert(*i);
  }
  if (registry.general_skill()) idx.insert(registry.index_of(*registry.general_skill()));
  if (idx.empty()) throw RoutingError("task " + task.id + " has no active skills");
  return {idx.begin(), idx.end()};
}

inline std::vector<std::string> canonical_ids(const TaskSpec& task, const SkillRegistry& registry) {
  std::vector<std::string> out;
  for (std::size_t i : canonicalize(task, registry)) out.push_back(registry.id_at(i));
  return out;
}

struct AblationResult {
  SkillRegistry registry;
  std::vector<TaskSpec> tasks;
};

/// Removes one skill from the registry and from every task. A task left with
/// no skills falls back to the general skill, or, if the general skill is the
/// one removed, to the lowest-index remaining skill of the registry.
inline AblationResult ablate(const SkillRegistry& registry, const std::vector<TaskSpec>& tasks,
                             const std::string& removed) {
  if (!registry.find(removed)) throw RoutingError("cannot ablate unknown skill '" + removed + "'");
  std::vector<Skill> kept;
  for (const auto& s : registry.skills())
    if (s.id != removed) kept.push_back(s);
  if (kept.empty()) throw RoutingError("cannot ablate the only skill");
  std::optional<std::string> general = registry.general_skill();
  if (general && *general == removed) general.reset();
  SkillRegistry next(std::move(kept), general);

  std::vector<TaskSpec> out = tasks;
  for (auto& t : out) {
    std::erase(t.skill_ids, removed);
    if (t.skill_ids.empty()) t.skill_ids.push_back(general ? *general : next.skills().front().id);
  }
  return {std::move(next), std::move(out)};
}

/// Seven skills with their descriptions; s7 is the general skill.
inline SkillRegistry default_registry() {
  return SkillRegistry(
      {
          {"s1", "get the semantic meaning of a sequence"},
          {"s2", "get the semantic meaning of a token"},
          {"s3", "understand how two text segments interact"},
          {"s4", "understand the sentiment of texts"},
          {"s5", "understand natural language questions"},
          {"s6", "understand texts in finance domain"},
          {"s7", "generic skill"},
      },
      std::string("s7"));
}

/// Task -> skill pattern of the six built-in tasks (T1..T6).
inline std::vector<std::pair<std::string, std::vector<std::string>>> default_routing() {
  return {
      {"T1", {"s1", "s4", "s7"}},       {"T2", {"s1", "s3", "s7"}}, {"T3", {"s1", "s3", "s6", "s7"}},
      {"T4", {"s1", "s7"}},             {"T5", {"s2", "s7"}},       {"T6", {"s2", "s3", "s5", "s7"}},
  };
}

}  // namespace skillnet
