// SPDX-License-Identifier: Apache-2.0
#include <catch_amalgamated.hpp>

#include <algorithm>
#include <map>

#include "skillnet/routing.hpp"

using namespace skillnet;

namespace {

TaskSpec task(const std::string& id, std::vector<std::string> skills) {
  TaskSpec t;
  t.id = id;
  t.skill_ids = std::move(skills);
  return t;
}

std::vector<TaskSpec> builtin_tasks() {
  std::vector<TaskSpec> out;
  for (const auto& [id, skills] : default_routing()) out.push_back(task(id, skills));
  return out;
}

}  // namespace

TEST_CASE("built-in routing reproduces the tick pattern", "[routing]") {
  // rows T1..T6, columns s1..s7
  const std::map<std::string, std::string> ticks{
      {"T1", "1001001"}, {"T2", "1010001"}, {"T3", "1010011"},
      {"T4", "1000001"}, {"T5", "0100001"}, {"T6", "0110101"},
  };
  const auto reg = default_registry();
  REQUIRE(reg.size() == 7);
  REQUIRE(reg.general_skill() == "s7");
  const auto tasks = builtin_tasks();
  REQUIRE(tasks.size() == 6);
  for (const auto& t : tasks) {
    std::string row(7, '0');
    for (std::size_t k : canonicalize(t, reg)) row[k] = '1';
    CHECK(row == ticks.at(t.id));
  }
}

TEST_CASE("canonicalize adds the general skill and sorts", "[routing]") {
  const auto reg = default_registry();
  CHECK(canonicalize(task("mrc", {"s5", "s2", "s7", "s3"}), reg) == std::vector<std::size_t>{1, 2, 4, 6});
  CHECK(canonical_ids(task("x", {"s1"}), reg) == std::vector<std::string>{"s1", "s7"});

  const auto a = canonicalize(task("x", {"s6", "s1", "s6"}), reg);
  const auto b = canonicalize(task("x", {"s1", "s6"}), reg);
  CHECK(a == b);
  // idempotent through ids
  CHECK(canonical_ids(task("x", canonical_ids(task("x", {"s6", "s1"}), reg)), reg) ==
        canonical_ids(task("x", {"s6", "s1"}), reg));
}

TEST_CASE("unknown skill id is a routing error naming it", "[routing]") {
  const auto reg = default_registry();
  CHECK_THROWS_MATCHES(canonicalize(task("x", {"s1", "s99"}), reg), RoutingError,
                       Catch::Matchers::MessageMatches(Catch::Matchers::ContainsSubstring("s99")));
  CHECK_THROWS_AS(reg.index_of("s0"), RoutingError);
  CHECK_THROWS_AS(reg.id_at(7), RoutingError);
}

TEST_CASE("registry rejects duplicates and a missing general skill", "[routing]") {
  CHECK_THROWS_AS(SkillRegistry({{"s1", ""}, {"s1", ""}}, std::nullopt), RoutingError);
  CHECK_THROWS_AS(SkillRegistry({{"s1", ""}}, std::string("s7")), RoutingError);
  auto reg = default_registry();
  CHECK_THROWS_AS(reg.append({"s3", ""}), RoutingError);
  reg.append({"s8", "new"});
  CHECK(reg.index_of("s8") == 7);
}

TEST_CASE("ablate removes one skill from registry and routing", "[routing]") {
  const auto reg = default_registry();
  const auto tasks = builtin_tasks();

  SECTION("w/o s4: sentiment task keeps s1 and s7") {
    auto r = ablate(reg, tasks, "s4");
    CHECK(r.registry.size() == 6);
    CHECK(canonical_ids(r.tasks[0], r.registry) == std::vector<std::string>{"s1", "s7"});
  }
  SECTION("w/o s7: no auto-add, T4 keeps only s1") {
    auto r = ablate(reg, tasks, "s7");
    CHECK_FALSE(r.registry.general_skill().has_value());
    CHECK(canonical_ids(r.tasks[3], r.registry) == std::vector<std::string>{"s1"});
    CHECK(canonical_ids(r.tasks[4], r.registry) == std::vector<std::string>{"s2"});
  }
  SECTION("removing an unused skill leaves routing unchanged") {
    auto big = reg;
    big.append({"s8", "unused"});
    auto r = ablate(big, tasks, "s8");
    for (std::size_t i = 0; i < tasks.size(); ++i)
      CHECK(canonical_ids(r.tasks[i], r.registry) == canonical_ids(tasks[i], reg));
  }
  SECTION("fallback when a task loses its only skill") {
    const SkillRegistry small({{"s1", ""}, {"s2", ""}, {"s7", ""}}, std::string("s7"));
    auto r = ablate(small, {task("a", {"s7"})}, "s7");
    CHECK(r.tasks[0].skill_ids == std::vector<std::string>{"s1"});
    auto r2 = ablate(small, {task("a", {"s2"})}, "s2");
    CHECK(r2.tasks[0].skill_ids == std::vector<std::string>{"s7"});
  }
  SECTION("every deletion leaves no reference and no empty set") {
    for (const auto& id : reg.ids()) {
      auto r = ablate(reg, tasks, id);
      for (const auto& t : r.tasks) {
        CHECK(std::find(t.skill_ids.begin(), t.skill_ids.end(), id) == t.skill_ids.end());
        CHECK_FALSE(canonicalize(t, r.registry).empty());
      }
    }
  }
  CHECK_THROWS_AS(ablate(reg, tasks, "s42"), RoutingError);
}

TEST_CASE("head type strings round-trip", "[routing]") {
  for (HeadType h : {HeadType::sequence_classification, HeadType::pair_classification, HeadType::token_tagging,
                     HeadType::span_extraction})
    CHECK(head_type_from_string(to_string(h)) == h);
  CHECK_THROWS_AS(head_type_from_string("regression"), ConfigError);
}
