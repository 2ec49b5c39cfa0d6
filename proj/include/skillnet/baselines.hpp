// SPDX-License-Identifier: Apache-2.0
//
// Comparison systems trained under the same sampler, optimizer, schedule and
// evaluation as SkillNet:
//   dense          one shared encoder, plain FFNs everywhere
//   moe            the modular layers hold 7 experts with top-2 token gating
//   task-specific  one dense encoder per task, each trained on its task alone
//                  for steps / N steps, so the total step count matches
#pragma once

#include <cmath>
#include <filesystem>
#include <string>
#include <vector>

#include "skillnet/checkpoint.hpp"
#include "skillnet/pretrain.hpp"
#include "skillnet/trainer.hpp"

namespace skillnet {

enum class SystemKind { skillnet, dense, moe, task_specific };

inline std::string to_string(SystemKind k) {
  switch (k) {
    case SystemKind::skillnet: return "skillnet";
    case SystemKind::dense: return "dense";
    case SystemKind::moe: return "moe";
    case SystemKind::task_specific: return "task-specific";
  }
  return "?";
}

inline SystemKind system_kind_from_string(const std::string& s) {
  if (s == "skillnet") return SystemKind::skillnet;
  if (s == "dense" || s == "dense_joint") return SystemKind::dense;
  if (s == "moe" || s == "moe_joint") return SystemKind::moe;
  if (s == "task-specific" || s == "task_specific") return SystemKind::task_specific;
  throw ConfigError("unknown system '" + s + "' (expected skillnet, dense, moe or task-specific)");
}

inline std::string system_label(SystemKind k) {
  switch (k) {
    case SystemKind::skillnet: return "SkillNet";
    case SystemKind::dense: return "Joint fine-tuning (Dense)";
    case SystemKind::moe: return "Joint fine-tuning (MoE)";
    case SystemKind::task_specific: return "Task-specific fine-tuning";
  }
  return "?";
}

inline EncoderConfig system_config(SystemKind k, EncoderConfig c) {
  switch (k) {
    case SystemKind::skillnet: c.ffn_kind = FfnKind::skill; break;
    case SystemKind::moe: c.ffn_kind = FfnKind::moe; break;
    case SystemKind::dense:
    case SystemKind::task_specific:
      c.ffn_kind = FfnKind::skill;
      c.num_skill_layers = 0;
      break;
  }
  return c;
}

/// Steps and schedule for one task-specific model: the joint budget split
/// evenly, warmup kept at the same fraction.
inline TrainerConfig task_specific_config(TrainerConfig tc, std::size_t num_tasks) {
  const std::size_t steps = std::max<std::size_t>(1, tc.steps / num_tasks);
  const double frac = static_cast<double>(tc.schedule.warmup_steps) / static_cast<double>(tc.schedule.total_steps);
  tc.steps = steps;
  tc.schedule.total_steps = steps;
  tc.schedule.warmup_steps = std::clamp<std::size_t>(static_cast<std::size_t>(std::llround(frac * steps)), 1, steps);
  if (tc.eval_every) tc.eval_every = std::max<std::size_t>(1, tc.eval_every / num_tasks);
  return tc;
}

struct SystemResult {
  SystemKind kind = SystemKind::skillnet;
  TaskScores scores;
  std::size_t total_params = 0;      // summed over all models of the system
  std::size_t activated_params = 0;  // encoder parameters one example touches, mean over tasks
  std::vector<std::string> checkpoints;
};

struct RunOutput {
  MetricsLog* log = nullptr;
  std::string checkpoint_dir;  // empty: no checkpoints written
  std::string run_id;          // prefix for checkpoint file names
  // SkillNet only: start from this pre-trained model instead of a fresh init
  const Model* pretrained = nullptr;
};

namespace detail {

inline std::size_t mean_activated(const Model& m, const std::vector<TaskData>& tasks) {
  double sum = 0.0;
  for (const auto& t : tasks) sum += static_cast<double>(activated_parameter_count(m, canonicalize(t.spec, m.registry)));
  return static_cast<std::size_t>(std::llround(sum / static_cast<double>(tasks.size())));
}

inline std::string checkpoint_path(const RunOutput& out, const std::string& name) {
  const std::string stem = out.run_id.empty() ? name : out.run_id + "-" + name;
  return (std::filesystem::path(out.checkpoint_dir) / (stem + ".ckpt")).string();
}

}  // namespace detail

/// Trains one joint model (skillnet, dense or moe) or the N task-specific
/// models, evaluates every task and optionally writes checkpoints with
/// optimizer state. A pre-trained model fixes the encoder geometry, so
/// `base` is ignored in that case.
inline SystemResult run_system(SystemKind kind, const EncoderConfig& base, const SkillRegistry& registry,
                               const std::vector<TaskData>& tasks, const Vocab& vocab, const TrainerConfig& tc,
                               const RunOutput& out = {}) {
  if (tasks.empty()) throw ConfigError("no tasks to train");
  SystemResult r;
  r.kind = kind;
  const EncoderConfig cfg = system_config(kind, base);
  auto mark = [&](const nlohmann::json& extra) {
    if (!out.log) return;
    nlohmann::json rec{{"event", "run"}, {"system", to_string(kind)}};
    if (!out.run_id.empty()) rec["run"] = out.run_id;
    rec.update(extra);
    out.log->write(rec);
  };

  if (out.pretrained && kind != SystemKind::skillnet)
    throw ConfigError("pre-trained initialization applies to skillnet only");
  if (kind != SystemKind::task_specific) {
    mark({{"steps", tc.steps}, {"pretrained", out.pretrained != nullptr}});
    Model m = out.pretrained ? initialize_multitask_from_pretrain(*out.pretrained, registry, tc.seed)
                             : Model(cfg, registry, tc.seed);
    MultitaskTrainer trainer(m, vocab, tasks, tc, out.log);
    r.scores = trainer.run();
    r.total_params = m.params.count();
    r.activated_params = detail::mean_activated(m, tasks);
    if (!out.checkpoint_dir.empty()) {
      r.checkpoints.push_back(detail::checkpoint_path(out, to_string(kind)));
      save_checkpoint(r.checkpoints.back(), m, &trainer.optimizer(),
                      {{"system", to_string(kind)}, {"steps", trainer.steps_done()}});
    }
    return r;
  }

  const TrainerConfig per = task_specific_config(tc, tasks.size());
  double activated = 0.0;
  for (const auto& t : tasks) {
    mark({{"task", t.spec.id}, {"steps", per.steps}});
    Model m(cfg, registry, tc.seed);
    MultitaskTrainer trainer(m, vocab, {t}, per, out.log);
    r.scores[t.spec.id] = trainer.run().at(t.spec.id);
    r.total_params += m.params.count();
    activated += static_cast<double>(activated_parameter_count(m, canonicalize(t.spec, m.registry)));
    if (!out.checkpoint_dir.empty()) {
      r.checkpoints.push_back(detail::checkpoint_path(out, to_string(kind) + "-" + t.spec.id));
      save_checkpoint(r.checkpoints.back(), m, &trainer.optimizer(),
                      {{"system", to_string(kind)}, {"task", t.spec.id}, {"steps", trainer.steps_done()}});
    }
  }
  r.activated_params = static_cast<std::size_t>(std::llround(activated / static_cast<double>(tasks.size())));
  return r;
}

}  // namespace skillnet
