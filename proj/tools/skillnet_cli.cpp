// SPDX-License-Identifier: Apache-2.0
//
// skillnet: command-line driver for data generation, pre-training, joint
// training, evaluation, adaptation, ablation, sweeps and oracle checks.
//
// Exit status: 0 on success, 1 when a run fails (divergence, data error,
// failed check), 2 on usage or configuration errors.

#include <filesystem>
#include <fstream>
#include <iostream>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include <CLI11.hpp>

#include "skillnet/adaptation.hpp"
#include "skillnet/experiments.hpp"
#include "skillnet/run_config.hpp"
#include "skillnet/synthetic.hpp"
#include "skillnet/task_config.hpp"
#include "skillnet/verify.hpp"

namespace fs = std::filesystem;
using namespace skillnet;

namespace {

constexpr int kRunFailure = 1;
constexpr int kUsageError = 2;

// Flags shared by the commands; each one is applied only when given.
struct CommonFlags {
  std::string config;
  std::optional<std::string> tasks, metrics_dir, checkpoint_dir;
  std::optional<std::uint64_t> seed;
  std::optional<std::size_t> steps, batch_size;
  std::optional<double> lr, alpha;
};

void add_common(CLI::App* app, CommonFlags& f, bool training) {
  app->add_option("--config", f.config, "Run configuration file (JSON)");
  app->add_option("--tasks", f.tasks, "Task configuration file (tasks.json)");
  app->add_option("--seed", f.seed, "Random seed");
  app->add_option("--metrics-dir", f.metrics_dir, std::string("Metrics directory (env ") + kMetricsDirEnv + ")");
  app->add_option("--checkpoint-dir", f.checkpoint_dir,
                  std::string("Checkpoint directory (env ") + kCheckpointDirEnv + ")");
  if (!training) return;
  app->add_option("--steps", f.steps, "Optimizer steps");
  app->add_option("--batch-size", f.batch_size, "Examples per step");
  app->add_option("--lr", f.lr, "Peak learning rate");
}

RunConfig resolve(const CommonFlags& f, LoopSettings RunConfig::*loop = nullptr) {
  RunConfig c;
  if (!f.config.empty()) load_config_file(c, f.config);
  apply_environment(c);
  if (f.tasks) c.tasks_path = *f.tasks;
  if (f.metrics_dir) c.metrics_dir = *f.metrics_dir;
  if (f.checkpoint_dir) c.checkpoint_dir = *f.checkpoint_dir;
  if (f.seed) c.seed = *f.seed;
  if (loop) {
    LoopSettings& s = c.*loop;
    if (f.steps) s.steps = *f.steps;
    if (f.batch_size) s.batch_size = *f.batch_size;
    if (f.lr) s.lr = *f.lr;
    if (f.alpha) s.alpha = *f.alpha;
  }
  return c;
}

/// Task configuration plus vocabulary, checked before any training starts.
struct Workspace {
  TaskConfig tasks;
  Vocab vocab;
};

Workspace open_workspace(RunConfig& c) {
  if (c.tasks_path.empty()) throw ConfigError("no task configuration: pass --tasks or set \"tasks\" in --config");
  if (!fs::exists(c.tasks_path)) throw ConfigError("task configuration not found: " + c.tasks_path);
  Workspace w{load_task_config(c.tasks_path), {}};
  if (w.tasks.vocab_path.empty()) throw ConfigError("task configuration names no vocabulary");
  w.vocab = Vocab::load(w.tasks.vocab_path);
  c.model.vocab_size = w.vocab.size();
  c.model.max_seq_len = std::max({c.model.max_seq_len, c.train.max_seq_len, c.adapt.max_seq_len, c.pretrain.max_seq_len});
  for (const auto& t : w.tasks.tasks)
    for (const auto* p : {&t.train_path, &t.eval_path})
      if (!fs::exists(*p)) throw ConfigError("dataset not found: " + *p);
  return w;
}

std::vector<TaskData> load_tasks(const Workspace& w) {
  std::vector<TaskData> out;
  for (const auto& t : w.tasks.tasks) out.push_back(load_task_data(t));
  return out;
}

std::string metrics_path(const RunConfig& c, const std::string& name) {
  return (fs::path(c.metrics_dir) / (name + ".jsonl")).string();
}

void write_text(const fs::path& path, const std::string& text) {
  if (path.has_parent_path()) fs::create_directories(path.parent_path());
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw ConfigError("cannot write " + path.string());
  out << text;
}

/// Prints a table and stores it next to the metrics as .txt and .json.
void emit_table(const RunConfig& c, const std::string& name, const SummaryTable& t) {
  std::cout << t.text() << std::flush;
  write_text(fs::path(c.metrics_dir) / (name + ".summary.txt"), t.text());
  write_text(fs::path(c.metrics_dir) / (name + ".summary.json"), t.json().dump(2) + "\n");
}

void log_config(MetricsLog& log, const RunConfig& c, const std::string& command) {
  log.write({{"event", "config"}, {"command", command}, {"config", run_config_to_json(c)}});
}

RunOutput log_only(MetricsLog& log) {
  RunOutput o;
  o.log = &log;
  return o;
}

ExperimentSetup setup_for(const RunConfig& c, const Workspace& w) {
  ExperimentSetup s;
  s.encoder = c.model;
  s.registry = w.tasks.registry;
  s.tasks = load_tasks(w);
  s.vocab = &w.vocab;
  s.trainer = c.trainer_config(c.train);
  return s;
}

template <typename T>
std::vector<T> parse_list(const std::string& text, const char* what) {
  std::vector<T> out;
  std::stringstream ss(text);
  std::string item;
  while (std::getline(ss, item, ',')) {
    std::istringstream one(item);
    T v{};
    if (!(one >> v) || !(one >> std::ws).eof()) throw ConfigError(std::string("bad ") + what + " list: " + text);
    out.push_back(v);
  }
  if (out.empty()) throw ConfigError(std::string("empty ") + what + " list");
  return out;
}

// ---------------------------------------------------------------------------

int cmd_gen_data(const std::string& out, std::uint64_t seed, std::size_t documents) {
  synthetic::SuiteOptions opt;
  opt.seed = seed;
  opt.corpus_documents = documents;
  std::cout << synthetic::write_suite(out, opt) << "\n";
  return 0;
}

int cmd_pretrain(RunConfig c) {
  Workspace w = open_workspace(c);
  if (w.tasks.corpus_path.empty() || !fs::exists(w.tasks.corpus_path))
    throw ConfigError("pre-training corpus not found: " + w.tasks.corpus_path);
  const PretrainConfig pc = c.pretrain_config();
  MetricsLog log(metrics_path(c, "pretrain"));
  log_config(log, c, "pretrain");
  Model m(system_config(SystemKind::skillnet, c.model), pretrain_registry(w.tasks.registry), c.seed);
  Pretrainer pt(m, w.vocab, read_corpus(w.tasks.corpus_path), pc, &log);
  pt.run();
  const std::string path = (fs::path(c.checkpoint_dir) / "pretrain.ckpt").string();
  save_checkpoint(path, m, &pt.optimizer(), {{"command", "pretrain"}, {"steps", pc.steps}});
  std::cout << "checkpoint " << path << "\n";
  return 0;
}

int cmd_train(RunConfig c, const std::string& baseline, const std::string& init) {
  Workspace w = open_workspace(c);
  std::vector<SystemKind> kinds;
  if (baseline == "all")
    kinds = {SystemKind::task_specific, SystemKind::dense, SystemKind::moe, SystemKind::skillnet};
  else
    kinds = {system_kind_from_string(baseline)};
  std::optional<LoadedCheckpoint> pre;
  if (!init.empty()) {
    if (kinds.size() != 1 || kinds[0] != SystemKind::skillnet)
      throw ConfigError("--init applies to --baseline skillnet only");
    if (!fs::exists(init)) throw ConfigError("pre-trained checkpoint not found: " + init);
    pre = load_checkpoint(init);
  }
  const ExperimentSetup s = setup_for(c, w);
  MetricsLog log(metrics_path(c, "train"));
  log_config(log, c, "train");
  RunOutput out{&log, c.checkpoint_dir, "train", pre ? &pre->model : nullptr};
  std::vector<SystemResult> results;
  const SummaryTable t = compare_systems(s, kinds, out, &results);
  for (const auto& r : results)
    for (const auto& p : r.checkpoints) std::cout << "checkpoint " << p << "\n";
  emit_table(c, "train", t);
  return 0;
}

int cmd_eval(RunConfig c, const std::string& checkpoint) {
  Workspace w = open_workspace(c);
  if (!fs::exists(checkpoint)) throw ConfigError("checkpoint not found: " + checkpoint);
  LoadedCheckpoint ck = load_checkpoint(checkpoint);
  Model& m = ck.model;
  std::vector<TaskSpec> specs = w.tasks.tasks;
  for (const auto& p : w.tasks.new_tasks) {
    TaskSpec t = p.task;
    if (p.inject_skill && m.registry.find(*p.inject_skill)) t.skill_ids.push_back(*p.inject_skill);
    specs.push_back(t);
  }
  TaskScores scores;
  std::vector<std::string> ids;
  EvalOptions opt;
  opt.max_seq_len = c.train.max_seq_len;
  for (const auto& t : specs) {
    if (!m.heads.count(t.id)) continue;
    const TaskData d = load_task_data(t);
    scores[t.id] = evaluate(m, w.vocab, t, canonicalize(t, m.registry), d.eval, opt);
    ids.push_back(t.id);
  }
  if (ids.empty()) throw ConfigError("checkpoint has no head for any configured task");
  SummaryTable table("Evaluation", ids);
  table.add({fs::path(checkpoint).stem().string(), scores, {}});
  emit_table(c, "eval", table);
  return 0;
}

struct AdaptFlags {
  std::string checkpoint, task, inject, init_source;
  bool no_inject = false, freeze_old = false, update_old = false;
};

int cmd_adapt(RunConfig c, const AdaptFlags& f) {
  Workspace w = open_workspace(c);
  if (!fs::exists(f.checkpoint)) throw ConfigError("base checkpoint not found: " + f.checkpoint);
  AdaptationPlan plan = w.tasks.plan(f.task);
  if (!f.inject.empty()) plan.inject_skill = f.inject;
  if (f.no_inject) plan.inject_skill.reset();
  if (!f.init_source.empty()) plan.init_source = f.init_source;
  if (f.freeze_old) plan.update_old_skills = false;
  if (f.update_old) plan.update_old_skills = true;

  LoadedCheckpoint ck = load_checkpoint(f.checkpoint);
  const TaskData data = load_task_data(plan.task);
  const std::string run = "adapt-" + plan.task.id;
  MetricsLog log(metrics_path(c, run));
  log_config(log, c, "adapt");
  const TrainerConfig tc = c.trainer_config(c.adapt);
  const AdaptResult r = adapt(ck.model, w.vocab, plan, data, tc, &log);
  for (const auto& warning : r.warnings) std::cerr << "warning: " << warning << "\n";

  const std::string path = (fs::path(c.checkpoint_dir) / (run + ".ckpt")).string();
  save_checkpoint(path, ck.model, nullptr,
                  {{"command", "adapt"}, {"task", plan.task.id}, {"base", fs::path(f.checkpoint).filename().string()}});
  std::cout << "checkpoint " << path << "\n";

  const std::string label = std::string("SkillNet") + (plan.inject_skill ? " + " + *plan.inject_skill : "");
  SummaryTable t("Adaptation to " + plan.task.id + " (" + r.metric + ")", {plan.task.id});
  t.add({label,
         {{plan.task.id, r.score}},
         {{"Update Old Skills", plan.update_old_skills ? "Y" : "N"},
          {"#Params Activated", std::to_string(r.activated_params)},
          {"#Params Trainable", std::to_string(r.trainable_params)}}});
  emit_table(c, run, t);
  return 0;
}

int cmd_ablate(RunConfig c, const std::string& skills) {
  Workspace w = open_workspace(c);
  const ExperimentSetup s = setup_for(c, w);
  std::vector<std::string> removed;
  if (!skills.empty()) removed = parse_list<std::string>(skills, "skill");
  MetricsLog log(metrics_path(c, "ablate"));
  log_config(log, c, "ablate");
  emit_table(c, "ablate", run_ablation(s, log_only(log), removed));
  return 0;
}

int cmd_sweep(RunConfig c, const std::string& alphas, const std::string& layers) {
  if (alphas.empty() && layers.empty()) throw ConfigError("sweep needs --alpha and/or --layers");
  Workspace w = open_workspace(c);
  const ExperimentSetup s = setup_for(c, w);
  MetricsLog log(metrics_path(c, "sweep"));
  log_config(log, c, "sweep");
  if (!alphas.empty()) emit_table(c, "sweep-alpha", alpha_sweep(s, parse_list<double>(alphas, "alpha"), log_only(log)));
  if (!layers.empty()) emit_table(c, "sweep-layers", layer_sweep(s, parse_list<std::size_t>(layers, "layer"), log_only(log)));
  return 0;
}

int cmd_verify(const std::string& only) {
  std::vector<verify::CheckResult> results;
  const std::vector<std::pair<std::string, verify::CheckResult (*)()>> checks{
      {"gradients", [] { return verify::gradients(); }},
      {"sparsity", [] { return verify::sparsity(); }},
      {"dense-equivalence", [] { return verify::dense_equivalence(); }},
      {"sampler", [] { return verify::sampler(); }},
      {"crf", [] { return verify::crf(); }},
      {"pretrain-activation", [] { return verify::pretrain_activation(); }},
  };
  bool any = false, ok = true;
  for (const auto& [name, run] : checks) {
    if (!only.empty() && only != name) continue;
    any = true;
    const auto r = run();
    ok = ok && r.passed;
    std::cout << (r.passed ? "PASS " : "FAIL ") << r.name << " (" << std::fixed << std::setprecision(1) << r.seconds
              << " s): " << r.detail << "\n";
  }
  if (!any) throw ConfigError("unknown check '" + only + "'");
  return ok ? 0 : kRunFailure;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Skill-modular sparse Transformer: training, adaptation and experiments"};
  app.require_subcommand(1);
  CommonFlags f;

  auto* gen = app.add_subcommand("gen-data", "Write the synthetic task suite, vocabulary and corpus");
  std::string gen_out;
  std::uint64_t gen_seed = 2022;
  std::size_t gen_docs = 2000;
  gen->add_option("--out", gen_out, "Output directory")->required();
  gen->add_option("--seed", gen_seed, "Random seed");
  gen->add_option("--corpus-docs", gen_docs, "Documents in the pre-training corpus");

  auto* pre = app.add_subcommand("pretrain", "Sparse MLM/NSP pre-training");
  add_common(pre, f, true);

  auto* train = app.add_subcommand("train", "Joint multi-task training of one system or all four");
  add_common(train, f, true);
  std::string baseline = "skillnet", init;
  train->add_option("--baseline", baseline, "skillnet, dense, moe, task-specific or all");
  train->add_option("--init", init, "Pre-trained checkpoint to initialize SkillNet from");
  train->add_option("--alpha", f.alpha, "Task sampling rate (0 uniform, 1 proportional to size)");

  auto* eval = app.add_subcommand("eval", "Evaluate a checkpoint on every task it has a head for");
  add_common(eval, f, false);
  std::string eval_ckpt;
  eval->add_option("--checkpoint", eval_ckpt, "Checkpoint to evaluate")->required();

  auto* ad = app.add_subcommand("adapt", "Adapt a trained model to a new task");
  add_common(ad, f, true);
  AdaptFlags af;
  ad->add_option("--checkpoint", af.checkpoint, "Base multi-task checkpoint")->required();
  ad->add_option("--task", af.task, "New task id from the task configuration")->required();
  auto* inject = ad->add_option("--inject-skill", af.inject, "Inject a new skill with this id");
  ad->add_flag("--no-inject", af.no_inject, "Reuse existing skills only")->excludes(inject);
  ad->add_option("--init-source", af.init_source, "Skill the injected skill is copied from");
  auto* freeze = ad->add_flag("--freeze-old", af.freeze_old, "Train only the new skill and the head");
  ad->add_flag("--update-old", af.update_old, "Also train shared and activated old skills")->excludes(freeze);

  auto* abl = app.add_subcommand("ablate", "Full model plus one run per removed skill");
  add_common(abl, f, true);
  std::string abl_skills;
  abl->add_option("--skills", abl_skills, "Comma-separated subset of skills to remove (default: all)");
  abl->add_option("--alpha", f.alpha, "Task sampling rate (0 uniform, 1 proportional to size)");

  auto* sw = app.add_subcommand("sweep", "Sampling-rate and skill-layer sweeps");
  add_common(sw, f, true);
  std::string sw_alpha, sw_layers;
  sw->add_option("--alpha", sw_alpha, "Comma-separated alpha values, e.g. 0,0.25,0.5,0.75,1");
  sw->add_option("--layers", sw_layers, "Comma-separated numbers of top skill layers");

  auto* ver = app.add_subcommand("verify", "Run the oracle checks (no training)");
  std::string only;
  ver->add_option("--only", only, "Run a single check by name");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? 0 : kUsageError;
  }

  try {
    if (*gen) return cmd_gen_data(gen_out, gen_seed, gen_docs);
    if (*pre) return cmd_pretrain(resolve(f, &RunConfig::pretrain));
    if (*train) return cmd_train(resolve(f, &RunConfig::train), baseline, init);
    if (*eval) return cmd_eval(resolve(f), eval_ckpt);
    if (*ad) return cmd_adapt(resolve(f, &RunConfig::adapt), af);
    if (*abl) return cmd_ablate(resolve(f, &RunConfig::train), abl_skills);
    if (*sw) return cmd_sweep(resolve(f, &RunConfig::train), sw_alpha, sw_layers);
    if (*ver) return cmd_verify(only);
  } catch (const ConfigError& e) {
    std::cerr << "error: " << e.what() << "\n";
    return kUsageError;
  } catch (const RoutingError& e) {
    std::cerr << "error: " << e.what() << "\n";
    return kUsageError;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return kRunFailure;
  }
  return kUsageError;
}
