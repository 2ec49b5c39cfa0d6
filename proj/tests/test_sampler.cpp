// SPDX-License-Identifier: Apache-2.0
#include <catch_amalgamated.hpp>

#include <array>

#include "skillnet/sampler.hpp"

using namespace skillnet;

namespace {
const std::array<double, 6> kSizes{9.6, 50.0, 34.3, 53.3, 15.7, 10.0};
}

TEST_CASE("alpha zero is uniform", "[sampler]") {
  for (double q : task_sampling_probs(kSizes, 0.0)) CHECK(q == 1.0 / 6.0);
}

TEST_CASE("alpha one is proportional to size", "[sampler]") {
  const auto q = task_sampling_probs(kSizes, 1.0);
  const double total = 9.6 + 50.0 + 34.3 + 53.3 + 15.7 + 10.0;
  for (std::size_t i = 0; i < 6; ++i) CHECK(std::abs(q[i] - kSizes[i] / total) < 1e-12);
  const std::array<double, 6> rounded{0.0555, 0.2892, 0.1984, 0.3083, 0.0908, 0.0578};
  for (std::size_t i = 0; i < 6; ++i) CHECK(std::abs(q[i] - rounded[i]) < 5e-5);
}

TEST_CASE("intermediate alpha flattens toward uniform", "[sampler]") {
  const auto q1 = task_sampling_probs(kSizes, 1.0);
  const auto qh = task_sampling_probs(kSizes, 0.5);
  double sum = 0.0;
  for (std::size_t i = 0; i < 6; ++i) {
    sum += qh[i];
    CHECK(std::abs(qh[i] - 1.0 / 6.0) <= std::abs(q1[i] - 1.0 / 6.0));
  }
  CHECK(sum == Catch::Approx(1.0));
  // scaling every size leaves q unchanged
  std::array<double, 6> scaled{};
  for (std::size_t i = 0; i < 6; ++i) scaled[i] = kSizes[i] * 1000.0;
  const auto qs = task_sampling_probs(scaled, 0.5);
  for (std::size_t i = 0; i < 6; ++i) CHECK(qs[i] == Catch::Approx(qh[i]).epsilon(1e-12));
}

TEST_CASE("empirical frequencies track q", "[sampler]") {
  for (double alpha : {0.0, 0.5, 1.0}) {
    TaskSampler s(kSizes, alpha);
    std::mt19937_64 rng(99);
    std::array<int, 6> counts{};
    const int n = 100000;
    for (int i = 0; i < n; ++i) ++counts[s.sample(rng)];
    for (std::size_t i = 0; i < 6; ++i) CHECK(std::abs(counts[i] / static_cast<double>(n) - s.probs()[i]) < 0.01);
  }
}

TEST_CASE("sampler edge cases", "[sampler]") {
  const std::array<double, 1> one{5.0};
  TaskSampler s(one, 1.0);
  std::mt19937_64 rng(1);
  for (int i = 0; i < 100; ++i) CHECK(s.sample(rng) == 0);
  CHECK_THROWS_AS(task_sampling_probs(std::span<const double>{}, 1.0), ConfigError);
  const std::array<double, 2> bad{1.0, 0.0};
  CHECK_THROWS_AS(task_sampling_probs(bad, 1.0), ConfigError);
  CHECK_THROWS_AS(task_sampling_probs(kSizes, -1.0), ConfigError);
  CHECK_THROWS_AS(TaskSampler(std::vector<double>{0.0, 0.0}), ConfigError);

  std::mt19937_64 a(7), b(7);
  for (int i = 0; i < 1000; ++i) {
    const double u = uniform01(a);
    CHECK(u >= 0.0);
    CHECK(u < 1.0);
    CHECK(uniform_index(b, 3) < 3);
  }
}
