// SPDX-License-Identifier: Apache-2.0
#include <catch_amalgamated.hpp>

#include <cmath>
#include <filesystem>
#include <limits>

#include "skillnet/checkpoint.hpp"
#include "support.hpp"

using namespace skillnet;
using namespace skillnet::testing;

namespace {

TrainerConfig quick_config(std::size_t steps) {
  TrainerConfig c;
  c.steps = steps;
  c.batch_size = 4;
  c.schedule = {1e-3, std::max<std::size_t>(1, steps / 10), steps};
  c.log_every = 1;
  return c;
}

bool bit_equal(const Tensor& a, const Tensor& b) {
  return a.shape() == b.shape() && std::memcmp(a.data().data(), b.data().data(), a.size() * sizeof(double)) == 0;
}

}  // namespace

TEST_CASE("checkpoint round trip is bit exact", "[checkpoint]") {
  const Vocab v = synthetic::vocabulary();
  Model m(small_suite_config(), default_registry(), 11);
  MultitaskTrainer tr(m, v, small_suite(), quick_config(20));
  for (int i = 0; i < 20; ++i) tr.step();
  // values that a text format would mangle
  auto& p = m.param("embeddings.ln.bias");
  p.value[0] = -0.0;
  p.value[1] = std::numeric_limits<double>::denorm_min();
  p.value[2] = 0.1 + 0.2;
  p.value[3] = std::numeric_limits<double>::infinity();

  const nlohmann::json meta{{"step", 20}, {"note", "x"}};
  const std::string bytes = serialize_checkpoint(m, &tr.optimizer(), meta);
  const LoadedCheckpoint back = deserialize_checkpoint(bytes);
  CHECK(serialize_checkpoint(back.model, &*back.optim, back.meta) == bytes);
  CHECK(back.meta == meta);
  CHECK(back.model.config == m.config);
  CHECK(back.model.registry == m.registry);
  CHECK(back.model.heads == m.heads);
  CHECK(back.model.seed == m.seed);
  for (const auto& [name, param] : m.params) {
    INFO(name);
    CHECK(bit_equal(back.model.param(name).value, param.value));
  }
  REQUIRE(back.optim);
  CHECK(back.optim->slots.size() == tr.optimizer().slots.size());
  for (const auto& [name, slot] : tr.optimizer().slots) {
    const auto& s = back.optim->slots.at(name);
    CHECK(s.step == slot.step);
    CHECK(bit_equal(s.m, slot.m));
    CHECK(bit_equal(s.v, slot.v));
  }

  const auto dir = std::filesystem::temp_directory_path() / "skillnet_test_ckpt";
  std::filesystem::remove_all(dir);
  save_checkpoint((dir / "a.ckpt").string(), m, &tr.optimizer(), meta);
  CHECK(serialize_checkpoint(load_checkpoint((dir / "a.ckpt").string()).model, &tr.optimizer(), meta) == bytes);
  CHECK_FALSE(std::filesystem::exists(dir / "a.ckpt.tmp"));
}

TEST_CASE("checkpoint without optimizer state", "[checkpoint]") {
  Model m(tiny_config(), three_skills(), 3);
  m.add_head("t", {HeadKind::crf, 3});
  const auto back = deserialize_checkpoint(serialize_checkpoint(m));
  CHECK_FALSE(back.optim.has_value());
  CHECK(back.model.params.names() == m.params.names());
}

TEST_CASE("damaged checkpoints are rejected", "[checkpoint]") {
  Model m(tiny_config(), three_skills(), 3);
  const std::string bytes = serialize_checkpoint(m);
  CHECK_THROWS_AS(deserialize_checkpoint(bytes.substr(0, bytes.size() - 3)), DataError);
  CHECK_THROWS_AS(deserialize_checkpoint("skillnet-checkpoint 99\n{}\n"), DataError);
  CHECK_THROWS_AS(deserialize_checkpoint(bytes + "x"), DataError);
  std::string renamed = bytes;
  const auto at = renamed.find("embeddings.ln.bias f64");
  REQUIRE(at != std::string::npos);
  renamed.replace(at, 10, "embeddingz");
  CHECK_THROWS_AS(deserialize_checkpoint(renamed), DataError);
  CHECK_THROWS_AS(load_checkpoint("/nonexistent/x.ckpt"), DataError);
}

TEST_CASE("sparse steps leave inactive skills untouched", "[trainer]") {
  const Vocab v = synthetic::vocabulary();
  Model m(small_suite_config(), default_registry(), 5);
  MultitaskTrainer tr(m, v, small_suite(), quick_config(100));
  for (int draw = 0; draw < 100; ++draw) {
    std::map<std::string, Tensor> before;
    for (const auto& [name, p] : m.params) before.emplace(name, p.value);
    const auto slots_before = tr.optimizer().slots;
    const std::size_t t = tr.step();
    const auto& active = tr.active(t);
    for (std::size_t k = 0; k < m.registry.size(); ++k) {
      const bool on = std::find(active.begin(), active.end(), k) != active.end();
      for (const auto& name : m.skill_params(m.registry.id_at(k))) {
        const auto& p = m.param(name);
        if (on) continue;
        INFO(name << " at draw " << draw);
        CHECK(std::all_of(p.grad.data().begin(), p.grad.data().end(), [](double g) { return g == 0.0; }));
        CHECK(bit_equal(p.value, before.at(name)));
        const auto it = slots_before.find(name);
        if (it == slots_before.end()) {
          CHECK(tr.optimizer().slots.count(name) == 0);
        } else {
          const auto& now = tr.optimizer().slots.at(name);
          CHECK(now.step == it->second.step);
          CHECK(bit_equal(now.m, it->second.m));
          CHECK(bit_equal(now.v, it->second.v));
        }
      }
    }
    // other tasks' heads are untouched too
    for (const auto& other : tr.tasks())
      if (other.spec.id != tr.tasks()[t].spec.id)
        for (const auto& name : m.head_param_names(other.spec.id)) CHECK(bit_equal(m.param(name).value, before.at(name)));
  }
  const auto& counts = tr.task_counts();
  CHECK(std::accumulate(counts.begin(), counts.end(), std::size_t{0}) == 100);
}

TEST_CASE("training reduces loss on a separable task", "[trainer]") {
  const Vocab v = synthetic::vocabulary();
  TaskSpec spec;
  spec.id = "sep";
  spec.head = HeadType::sequence_classification;
  spec.skill_ids = {"s1"};
  spec.labels = {"neg", "pos"};
  synthetic::Gen g(9);
  std::vector<Example> data;
  for (int i = 0; i < 200; ++i) {
    const bool pos = g.coin(0.5);
    auto words = g.fillers(g.range(3, 6));
    g.insert(words, {synthetic::tok(pos ? "p" : "n", g.index(8))});
    data.push_back(TextExample{join_ws(words), pos ? "pos" : "neg"});
  }
  Model m(small_suite_config(), default_registry(), 1);
  auto cfg = quick_config(200);
  cfg.batch_size = 8;
  MultitaskTrainer tr(m, v, {{spec, data, data}}, cfg);
  double first = 0.0, tail = 0.0;
  for (int i = 0; i < 200; ++i) {
    StepOutcome o;
    tr.step(&o);
    if (i == 0) first = o.loss;
    if (i >= 180) tail += o.loss / 20.0;
  }
  CHECK(first == Catch::Approx(std::log(2.0)).margin(0.05));
  CHECK(tail < std::log(2.0));
  CHECK(tail < 0.2);
  CHECK(tr.evaluate_all().at("sep") > 0.95);
}

TEST_CASE("identical seeds give identical trajectories", "[trainer]") {
  const Vocab v = synthetic::vocabulary();
  auto run = [&](std::uint64_t seed) {
    Model m(small_suite_config(), default_registry(), 2);
    auto cfg = quick_config(30);
    cfg.seed = seed;
    MultitaskTrainer tr(m, v, small_suite(), cfg);
    std::vector<double> losses;
    for (int i = 0; i < 30; ++i) {
      StepOutcome o;
      tr.step(&o);
      losses.push_back(o.loss);
    }
    return std::make_pair(losses, serialize_checkpoint(m, &tr.optimizer()));
  };
  const auto a = run(4), b = run(4), c = run(5);
  CHECK(a.first == b.first);
  CHECK(a.second == b.second);
  CHECK(a.first != c.first);
}

TEST_CASE("divergence is reported instead of propagated", "[trainer]") {
  const Vocab v = synthetic::vocabulary();
  Model m(small_suite_config(), default_registry(), 2);
  MultitaskTrainer tr(m, v, small_suite(), quick_config(10));
  m.param("embeddings.ln.gain").value[0] = std::numeric_limits<double>::quiet_NaN();
  CHECK_THROWS_AS(tr.step(), DivergenceError);
}

TEST_CASE("metrics log records", "[trainer]") {
  const Vocab v = synthetic::vocabulary();
  const auto path = (std::filesystem::temp_directory_path() / "skillnet_test_metrics.jsonl").string();
  {
    MetricsLog log(path);
    Model m(small_suite_config(), default_registry(), 2);
    auto cfg = quick_config(6);
    cfg.log_every = 3;
    cfg.eval_every = 3;
    MultitaskTrainer tr(m, v, small_suite(16, 8), cfg, &log);
    const auto scores = tr.run();
    CHECK(scores.size() == 6);
    for (const auto& [_, s] : scores) {
      CHECK(s >= 0.0);
      CHECK(s <= 1.0);
    }
  }
  std::ifstream in(path);
  std::vector<nlohmann::json> recs;
  for (std::string line; std::getline(in, line);) recs.push_back(nlohmann::json::parse(line));
  REQUIRE(recs.size() == 4);
  CHECK(recs[0]["event"] == "train");
  CHECK(recs[0]["step"] == 3);
  for (const char* key : {"task", "loss", "mean_loss", "lr", "grad_norm"}) CHECK(recs[0].contains(key));
  CHECK(recs[1]["event"] == "eval");
  CHECK(recs[1]["metrics"].size() == 6);
  CHECK(recs[3]["event"] == "eval");
  CHECK(recs[3]["step"] == 6);
  double sum = 0.0;
  for (const auto& [_, x] : recs[3]["metrics"].items()) sum += x.get<double>();
  CHECK(recs[3]["avg"].get<double>() == sum / 6.0);
}

TEST_CASE("evaluation metrics follow the head", "[trainer]") {
  TaskSpec t;
  t.head = HeadType::token_tagging;
  CHECK(resolved_metric(t) == "entity_f1");
  t.head = HeadType::span_extraction;
  CHECK(resolved_metric(t) == "span_f1");
  t.head = HeadType::pair_classification;
  CHECK(resolved_metric(t) == "accuracy");
  t.ranking = true;
  CHECK(resolved_metric(t) == "top1");

  const Vocab v = synthetic::vocabulary();
  Model m(small_suite_config(), default_registry(), 2);
  auto suite = small_suite(8, 8);
  auto spec = suite[4].spec;  // tagging
  ensure_head(m, spec);
  spec.metric = "accuracy";
  const std::vector<std::size_t> active{0, 6};
  CHECK_THROWS_AS(evaluate(m, v, spec, active, suite[4].eval), ConfigError);
}
