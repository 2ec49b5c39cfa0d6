// SPDX-License-Identifier: Apache-2.0
//
// Adapting a trained multi-task model to a new task. The task either reuses
// existing skills or gets a freshly injected skill (e.g. s8) copied from the
// general skill. With update_old_skills = false, everything outside the new
// skill bank and the new head is frozen, attention and embeddings included.
// Freezing goes through the optimizer's update set, so frozen parameters
// never see an Adam step.
#pragma once

#include <map>
#include <set>
#include <string>
#include <vector>

#include "skillnet/encoder.hpp"
#include "skillnet/task_config.hpp"
#include "skillnet/trainer.hpp"

namespace skillnet {

/// Grows every skill bank by one FFN whose weights are bit-copies of
/// `init_source`'s. Nothing else changes.
inline void add_skill(Model& m, const std::string& new_id, const std::string& init_source,
                      const std::string& description = "") {
  if (m.config.ffn_kind != FfnKind::skill) throw ConfigError("skills can only be added to a skill encoder");
  if (m.registry.find(new_id)) throw RoutingError("skill id already registered: " + new_id);
  m.registry.index_of(init_source);
  m.registry.append({new_id, description});
  m.config.num_skills = m.registry.size();
  for (std::size_t l = 0; l < m.config.num_layers; ++l) {
    if (!m.config.is_modular_layer(l)) continue;
    for (const auto& part : names::ffn_parts())
      m.params.add(names::skill_prefix(l, new_id) + part, m.param(names::skill_prefix(l, init_source) + part).value);
  }
}

/// Active skill ids for the new task: the declared skills, the injected
/// skill, and the general skill, in registry order.
inline std::vector<std::size_t> adaptation_active(const AdaptationPlan& plan, const SkillRegistry& reg) {
  TaskSpec t = plan.task;
  if (plan.inject_skill && std::find(t.skill_ids.begin(), t.skill_ids.end(), *plan.inject_skill) == t.skill_ids.end())
    t.skill_ids.push_back(*plan.inject_skill);
  return canonicalize(t, reg);
}

/// name -> trainable, over every parameter of the model.
using TrainableMask = std::map<std::string, bool>;

inline TrainableMask trainable_mask(const Model& m, const AdaptationPlan& plan, std::span<const std::size_t> active) {
  std::set<std::string> on;
  for (const auto& n : m.head_param_names(plan.task.id)) on.insert(n);
  if (plan.inject_skill) {
    const auto bank = m.skill_params(*plan.inject_skill);
    on.insert(bank.begin(), bank.end());
  }
  if (plan.update_old_skills) {
    const auto act = active_parameter_names(m, active);
    on.insert(act.begin(), act.end());
  }
  TrainableMask mask;
  for (const auto& [n, _] : m.params) mask[n] = on.count(n) != 0;
  return mask;
}

inline std::set<std::string> trainable_names(const TrainableMask& mask) {
  std::set<std::string> out;
  for (const auto& [n, on] : mask)
    if (on) out.insert(n);
  return out;
}

struct AdaptResult {
  double score = 0.0;
  std::string metric;
  std::size_t activated_params = 0;
  std::size_t trainable_params = 0;
  std::vector<std::string> active_skills;
  std::vector<std::string> warnings;
};

inline void validate_plan(const AdaptationPlan& plan, const SkillRegistry& reg) {
  if (plan.inject_skill && reg.find(*plan.inject_skill))
    throw RoutingError("injected skill " + *plan.inject_skill + " is already registered");
  if (plan.inject_skill) reg.index_of(plan.init_source);
  for (const auto& id : plan.task.skill_ids)
    if (!reg.find(id) && !(plan.inject_skill && id == *plan.inject_skill))
      throw RoutingError("task " + plan.task.id + " routes to unknown skill " + id);
  if (plan.task.skill_ids.empty() && !plan.inject_skill && !reg.general_skill())
    throw RoutingError("task " + plan.task.id + " routes to no skill");
}

/// Injects the plan's skill (if any), then trains on the new task alone and
/// evaluates it. `model` is modified in place.
inline AdaptResult adapt(Model& model, const Vocab& vocab, const AdaptationPlan& plan, TaskData data,
                         TrainerConfig cfg, MetricsLog* log = nullptr) {
  validate_plan(plan, model.registry);
  if (plan.inject_skill) add_skill(model, *plan.inject_skill, plan.init_source, "injected for " + plan.task.id);

  AdaptResult r;
  if (!plan.update_old_skills && !plan.inject_skill)
    r.warnings.push_back("update_old_skills=false without an injected skill: only the head of " + plan.task.id +
                         " trains");

  TaskSpec spec = plan.task;
  if (plan.inject_skill && std::find(spec.skill_ids.begin(), spec.skill_ids.end(), *plan.inject_skill) == spec.skill_ids.end())
    spec.skill_ids.push_back(*plan.inject_skill);
  data.spec = spec;
  const auto active = adaptation_active(plan, model.registry);

  MultitaskTrainer trainer(model, vocab, {std::move(data)}, cfg, log);
  const TrainableMask mask = trainable_mask(model, plan, active);
  auto names = trainable_names(mask);
  r.trainable_params = model.params.count(names);
  const auto head = model.head_param_names(spec.id);
  r.activated_params = activated_parameter_count(model, active) + model.params.count({head.begin(), head.end()});
  for (std::size_t k : active) r.active_skills.push_back(model.registry.id_at(k));
  r.metric = resolved_metric(spec);

  if (log) {
    nlohmann::json rec{{"event", "adapt"},
                       {"task", spec.id},
                       {"inject_skill", plan.inject_skill ? nlohmann::json(*plan.inject_skill) : nlohmann::json()},
                       {"update_old_skills", plan.update_old_skills},
                       {"active_skills", r.active_skills},
                       {"activated_params", r.activated_params},
                       {"trainable_params", r.trainable_params}};
    if (!r.warnings.empty()) rec["warnings"] = r.warnings;
    log->write(rec);
  }
  trainer.set_trainable(std::move(names));
  r.score = trainer.run().at(spec.id);
  return r;
}

}  // namespace skillnet
