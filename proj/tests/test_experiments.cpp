// SPDX-License-Identifier: Apache-2.0
#include <catch_amalgamated.hpp>

#include <filesystem>

#include "skillnet/experiments.hpp"
#include "support.hpp"

using namespace skillnet;
using namespace skillnet::testing;
namespace fs = std::filesystem;

namespace {

const Vocab& vocab() {
  static const Vocab v = synthetic::vocabulary();
  return v;
}

ExperimentSetup tiny_setup(std::size_t steps = 12) {
  ExperimentSetup s;
  s.encoder = small_suite_config();
  s.encoder.hidden_dim = 8;
  s.encoder.ffn_dim = 8;
  s.registry = default_registry();
  s.tasks = small_suite(16, 8);
  s.vocab = &vocab();
  s.trainer.steps = steps;
  s.trainer.batch_size = 2;
  s.trainer.schedule = {1e-3, 2, steps};
  return s;
}

std::string slurp(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  std::stringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

}  // namespace

TEST_CASE("system geometries", "[baselines]") {
  const EncoderConfig base = small_suite_config();
  const Model skill(system_config(SystemKind::skillnet, base), default_registry(), 1);
  const Model dense(system_config(SystemKind::dense, base), default_registry(), 1);
  const Model moe(system_config(SystemKind::moe, base), default_registry(), 1);
  CHECK(dense.params.count() < skill.params.count());
  CHECK(skill.params.count() - dense.params.count() == 6 * skill.ffn_param_count());
  CHECK(moe.params.count() == dense.params.count() + 6 * moe.ffn_param_count() + base.hidden_dim * 7);
  for (const auto& s : default_registry().skills()) CHECK(dense.skill_params(s.id).empty());
  CHECK(moe.params.contains(names::gate(1)));
  CHECK(system_config(SystemKind::task_specific, base) == system_config(SystemKind::dense, base));

  for (auto k : {SystemKind::skillnet, SystemKind::dense, SystemKind::moe, SystemKind::task_specific})
    CHECK(system_kind_from_string(to_string(k)) == k);
  CHECK(system_kind_from_string("moe_joint") == SystemKind::moe);
  CHECK_THROWS_AS(system_kind_from_string("bert"), ConfigError);
}

TEST_CASE("task-specific budget split", "[baselines]") {
  TrainerConfig tc;
  const auto per = task_specific_config(tc, 6);
  CHECK(per.steps == 333);
  CHECK(per.schedule.total_steps == 333);
  CHECK(per.schedule.warmup_steps == 33);
  tc.steps = 4;
  tc.schedule = {1e-3, 1, 4};
  const auto tiny = task_specific_config(tc, 6);
  CHECK(tiny.steps == 1);
  CHECK(tiny.schedule.warmup_steps == 1);
}

TEST_CASE("every system runs the same protocol", "[baselines]") {
  const auto s = tiny_setup();
  const fs::path dir = fs::temp_directory_path() / "skillnet-test-systems";
  fs::remove_all(dir);
  std::vector<SystemResult> results;
  for (auto k : {SystemKind::skillnet, SystemKind::dense, SystemKind::moe, SystemKind::task_specific}) {
    RunOutput out;
    out.checkpoint_dir = dir.string();
    results.push_back(run_system(k, s.encoder, s.registry, s.tasks, vocab(), s.trainer, out));
    const auto& r = results.back();
    CHECK(r.scores.size() == 6);
    for (const auto& [_, v] : r.scores) {
      CHECK(v >= 0.0);
      CHECK(v <= 1.0);
    }
    CHECK(r.checkpoints.size() == (k == SystemKind::task_specific ? 6u : 1u));
    std::size_t total = 0;
    for (const auto& c : r.checkpoints) {
      const auto loaded = load_checkpoint(c);
      CHECK(loaded.optim.has_value());
      total += loaded.model.params.count();
    }
    CHECK(total == r.total_params);
  }
  CHECK(results[1].total_params < results[0].total_params);
  CHECK(results[1].activated_params < results[0].activated_params);
  CHECK(results[3].activated_params == results[1].activated_params);
  const auto one = load_checkpoint(results[3].checkpoints[0]);
  CHECK(one.model.heads.size() == 1);
  CHECK(one.meta.at("task") == "T1");
  fs::remove_all(dir);
}

TEST_CASE("system runs are reproducible", "[baselines]") {
  const auto s = tiny_setup();
  const fs::path dir = fs::temp_directory_path() / "skillnet-test-repro";
  std::vector<std::string> bytes, logs;
  for (int i = 0; i < 2; ++i) {
    fs::remove_all(dir);
    const std::string log_path = (dir / "metrics.jsonl").string();
    fs::create_directories(dir);
    {
      MetricsLog log(log_path);
      RunOutput out{&log, dir.string(), "r"};
      auto tc = s.trainer;
      tc.log_every = 3;
      run_system(SystemKind::moe, s.encoder, s.registry, s.tasks, vocab(), tc, out);
    }
    bytes.push_back(slurp((dir / "r-moe.ckpt").string()));
    logs.push_back(slurp(log_path));
  }
  CHECK(bytes[0] == bytes[1]);
  CHECK(logs[0] == logs[1]);
  CHECK(logs[0].find("\"event\":\"run\"") != std::string::npos);
  fs::remove_all(dir);
}

TEST_CASE("summary table", "[experiments]") {
  SummaryTable t("Title", {"T1", "T2", "T3"});
  t.add({"alpha", {{"T1", 0.9}, {"T2", 0.8}, {"T3", 0.7}}, {{"#Params", "10"}}});
  t.add({"b", {{"T1", 1.0}, {"T2", 0.5}, {"T3", 0.25}, {"T9", 0.0}}, {{"#Params", "200"}}});
  CHECK(t.avg(t.rows()[0]) == (0.9 + 0.8 + 0.7) / 3.0);
  CHECK(t.avg(t.rows()[1]) == (1.0 + 0.5 + 0.25) / 3.0);
  CHECK_THROWS_AS(t.add({"c", {{"T1", 1.0}, {"T2", 1.0}}, {{"#Params", "1"}}}), ConfigError);
  CHECK_THROWS_AS(t.add({"c", {{"T1", 1.0}, {"T2", 1.0}, {"T3", 1.0}}, {}}), ConfigError);

  const std::string text = t.text();
  CHECK(text ==
        "Title\n"
        "       #Params      T1     T2     T3    Avg\n"
        "-------------------------------------------\n"
        "alpha       10   90.00  80.00  70.00  80.00\n"
        "b          200  100.00  50.00  25.00  58.33\n");
  const auto j = t.json();
  CHECK(j["rows"].size() == 2);
  CHECK(j["rows"][1]["#Params"] == "200");
  CHECK(j["rows"][1]["scores"].size() == 3);
  CHECK(j["rows"][0]["avg"].get<double>() == t.avg(t.rows()[0]));
}

TEST_CASE("ablation harness shape and determinism", "[experiments]") {
  const auto s = tiny_setup(6);
  const auto a = run_ablation(s);
  REQUIRE(a.rows().size() == 8);
  CHECK(a.rows()[0].label == "SkillNet");
  for (std::size_t i = 1; i < 8; ++i) CHECK(a.rows()[i].label == "  - w/o s" + std::to_string(i));
  CHECK(a.text() == run_ablation(s).text());
  CHECK(a.json() == run_ablation(s).json());

  // the full row is the plain SkillNet run
  CHECK(a.rows()[0].scores == run_system(SystemKind::skillnet, s.encoder, s.registry, s.tasks, vocab(), s.trainer).scores);
  CHECK_THROWS_AS(run_ablation(s, {}, {"s9"}), RoutingError);
}

TEST_CASE("alpha and layer sweeps", "[experiments]") {
  auto s = tiny_setup(4);
  const auto a = alpha_sweep(s, {0.0, 0.5, 1.0});
  REQUIRE(a.rows().size() == 3);
  CHECK(a.rows()[1].label == "alpha=0.5");

  s.encoder.num_layers = 3;
  const auto l = layer_sweep(s, {1, 2, 3});
  REQUIRE(l.rows().size() == 3);
  std::vector<long> totals;
  for (const auto& r : l.rows()) totals.push_back(std::stol(r.extra.at(0).second));
  const long bank = 6 * static_cast<long>(Model(s.encoder, s.registry, 1).ffn_param_count());
  CHECK(totals[1] - totals[0] == bank);
  CHECK(totals[2] - totals[1] == bank);
  CHECK_THROWS_AS(layer_sweep(s, {4}), ConfigError);
}
