// SPDX-License-Identifier: Apache-2.0
//
// Run configuration for the command-line tool. Values resolve as
//   command-line flag > environment (directories only) > config file > default
// Config file (JSON, every key optional; relative paths resolve against the
// file's directory):
//
// {
//   "tasks": "suite/tasks.json",
//   "seed": 2022,
//   "metrics_dir": "runs/metrics",
//   "checkpoint_dir": "runs/checkpoints",
//   "model":    {"num_layers": 2, "hidden_dim": 64, ...},
//   "train":    {"steps": 2000, "batch_size": 16, "max_seq_len": 64, "alpha": 1.0,
//                "lr": 1e-3, "warmup_fraction": 0.1, "clip_norm": 1.0,
//                "log_every": 50, "eval_every": 0},
//   "pretrain": {same keys as train except alpha and eval_every, plus
//                "mask_prob", "nsp_negative_rate"},
//   "adapt":    {same keys as train}
// }
#pragma once

#include <cmath>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <optional>
#include <set>
#include <string>

#include <json.hpp>

#include "skillnet/checkpoint.hpp"
#include "skillnet/pretrain.hpp"
#include "skillnet/trainer.hpp"

namespace skillnet {

inline constexpr const char* kMetricsDirEnv = "SKILLNET_METRICS_DIR";
inline constexpr const char* kCheckpointDirEnv = "SKILLNET_CHECKPOINT_DIR";

/// Step budget and schedule shape shared by the three training loops.
struct LoopSettings {
  std::size_t steps = 2000;
  std::size_t batch_size = 16;
  std::size_t max_seq_len = 64;
  double alpha = 1.0;
  double lr = 1e-3;
  double warmup_fraction = 0.1;
  double clip_norm = 1.0;
  std::size_t log_every = 50;
  std::size_t eval_every = 0;

  LrSchedule schedule() const {
    if (!(warmup_fraction > 0.0 && warmup_fraction <= 1.0)) throw ConfigError("warmup_fraction must lie in (0, 1]");
    const auto warm = static_cast<std::size_t>(std::llround(warmup_fraction * static_cast<double>(steps)));
    return {lr, std::clamp<std::size_t>(warm, 1, std::max<std::size_t>(steps, 1)), steps};
  }
};

struct RunConfig {
  std::string tasks_path;
  std::uint64_t seed = 2022;
  std::string metrics_dir = "runs/metrics";
  std::string checkpoint_dir = "runs/checkpoints";
  EncoderConfig model;
  LoopSettings train;
  LoopSettings pretrain{.steps = 1000};
  LoopSettings adapt{.steps = 1000};
  double mask_prob = 0.15;
  double nsp_negative_rate = 0.5;

  TrainerConfig trainer_config(const LoopSettings& s) const {
    if (s.steps == 0) throw ConfigError("steps must be positive");
    TrainerConfig t;
    t.steps = s.steps;
    t.batch_size = s.batch_size;
    t.max_seq_len = s.max_seq_len;
    t.alpha = s.alpha;
    t.schedule = s.schedule();
    t.clip_norm = s.clip_norm;
    t.seed = seed;
    t.log_every = s.log_every;
    t.eval_every = s.eval_every;
    t.eval.max_seq_len = s.max_seq_len;
    t.validate();
    return t;
  }

  PretrainConfig pretrain_config() const {
    if (pretrain.steps == 0) throw ConfigError("steps must be positive");
    PretrainConfig p;
    p.steps = pretrain.steps;
    p.batch_size = pretrain.batch_size;
    p.max_seq_len = pretrain.max_seq_len;
    p.schedule = pretrain.schedule();
    p.clip_norm = pretrain.clip_norm;
    p.seed = seed;
    p.log_every = pretrain.log_every;
    p.mask_prob = mask_prob;
    p.nsp_negative_rate = nsp_negative_rate;
    p.validate();
    return p;
  }
};

namespace detail {

inline void reject_unknown(const nlohmann::json& j, const std::set<std::string>& known, const std::string& where) {
  if (!j.is_object()) throw ConfigError(where + " must be a JSON object");
  for (const auto& [k, _] : j.items())
    if (!known.count(k)) throw ConfigError("unknown key '" + k + "' in " + where);
}

inline void read_loop(const nlohmann::json& j, LoopSettings& s, const std::string& where, bool pretrain = false) {
  std::set<std::string> known{"steps",           "batch_size", "max_seq_len", "alpha",     "lr",
                              "warmup_fraction", "clip_norm",  "log_every",   "eval_every"};
  if (pretrain) known.insert({"mask_prob", "nsp_negative_rate"});
  reject_unknown(j, known, where);
  auto get = [&](const char* key, auto& field) {
    if (j.contains(key)) field = j.at(key).get<std::remove_reference_t<decltype(field)>>();
  };
  get("steps", s.steps);
  get("batch_size", s.batch_size);
  get("max_seq_len", s.max_seq_len);
  get("alpha", s.alpha);
  get("lr", s.lr);
  get("warmup_fraction", s.warmup_fraction);
  get("clip_norm", s.clip_norm);
  get("log_every", s.log_every);
  get("eval_every", s.eval_every);
}

inline nlohmann::json loop_to_json(const LoopSettings& s) {
  return {{"steps", s.steps},         {"batch_size", s.batch_size}, {"max_seq_len", s.max_seq_len},
          {"alpha", s.alpha},         {"lr", s.lr},                 {"warmup_fraction", s.warmup_fraction},
          {"clip_norm", s.clip_norm}, {"log_every", s.log_every},   {"eval_every", s.eval_every}};
}

}  // namespace detail

/// Applies a parsed config file on top of `c`.
inline void apply_config_json(RunConfig& c, const nlohmann::json& j, const std::filesystem::path& base_dir = {}) {
  try {
    detail::reject_unknown(j, {"tasks", "seed", "metrics_dir", "checkpoint_dir", "model", "train", "pretrain", "adapt"},
                           "run config");
    auto path = [&](const char* key, std::string& field) {
      if (!j.contains(key)) return;
      const std::filesystem::path p(j.at(key).get<std::string>());
      field = p.is_absolute() || base_dir.empty() ? p.string() : (base_dir / p).lexically_normal().string();
    };
    path("tasks", c.tasks_path);
    path("metrics_dir", c.metrics_dir);
    path("checkpoint_dir", c.checkpoint_dir);
    if (j.contains("seed")) c.seed = j.at("seed").get<std::uint64_t>();
    if (j.contains("model")) {
      detail::reject_unknown(j.at("model"),
                             {"max_seq_len", "num_layers", "num_skill_layers", "hidden_dim", "num_heads", "ffn_dim",
                              "num_experts", "dropout", "init_std", "ln_eps"},
                             "model");
      c.model = encoder_config_from_json(j.at("model"), c.model);
    }
    if (j.contains("train")) detail::read_loop(j.at("train"), c.train, "train");
    if (j.contains("adapt")) detail::read_loop(j.at("adapt"), c.adapt, "adapt");
    if (j.contains("pretrain")) {
      const auto& p = j.at("pretrain");
      detail::read_loop(p, c.pretrain, "pretrain", true);
      if (p.contains("mask_prob")) c.mask_prob = p.at("mask_prob").get<double>();
      if (p.contains("nsp_negative_rate")) c.nsp_negative_rate = p.at("nsp_negative_rate").get<double>();
    }
  } catch (const nlohmann::json::exception& e) {
    throw ConfigError(std::string("bad run config: ") + e.what());
  }
}

inline void load_config_file(RunConfig& c, const std::string& path) {
  std::ifstream in(path);
  if (!in) throw ConfigError("cannot open run config " + path);
  nlohmann::json j;
  try {
    j = nlohmann::json::parse(in);
  } catch (const nlohmann::json::exception& e) {
    throw ConfigError("run config " + path + " is not valid JSON: " + e.what());
  }
  apply_config_json(c, j, std::filesystem::path(path).parent_path());
}

/// Environment overrides for the output directories.
inline void apply_environment(RunConfig& c) {
  if (const char* m = std::getenv(kMetricsDirEnv); m && *m) c.metrics_dir = m;
  if (const char* k = std::getenv(kCheckpointDirEnv); k && *k) c.checkpoint_dir = k;
}

/// Everything that influences results; output directories are left out so
/// a run logs the same bytes wherever it writes.
inline nlohmann::json run_config_to_json(const RunConfig& c) {
  auto model = encoder_config_to_json(c.model);
  model.erase("vocab_size");
  model.erase("num_skills");
  model.erase("type_vocab_size");
  model.erase("ffn_kind");
  auto pre = detail::loop_to_json(c.pretrain);
  pre["mask_prob"] = c.mask_prob;
  pre["nsp_negative_rate"] = c.nsp_negative_rate;
  return {{"tasks", c.tasks_path},
          {"seed", c.seed},
          {"model", model},
          {"train", detail::loop_to_json(c.train)},
          {"pretrain", pre},
          {"adapt", detail::loop_to_json(c.adapt)}};
}

}  // namespace skillnet
