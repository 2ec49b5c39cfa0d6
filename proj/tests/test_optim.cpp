// SPDX-License-Identifier: Apache-2.0
#include <catch_amalgamated.hpp>

#include <cmath>

#include "skillnet/optim.hpp"

using namespace skillnet;

TEST_CASE("adam matches hand-computed steps", "[optim]") {
  ParameterStore ps;
  auto& p = ps.add("w", Tensor({2}, std::vector<double>{1.0, -2.0}));
  AdamState st;
  p.grad = Tensor({2}, std::vector<double>{0.5, -4.0});
  adam_update(ps, st, {"w"}, 0.1);
  // first bias-corrected step moves by lr * g / (|g| + eps)
  CHECK(p.value[0] == Catch::Approx(1.0 - 0.1 * 0.5 / (0.5 + 1e-6)).epsilon(1e-14));
  CHECK(p.value[1] == Catch::Approx(-2.0 + 0.1 * 4.0 / (4.0 + 1e-6)).epsilon(1e-14));

  p.grad = Tensor({2}, std::vector<double>{-0.5, 0.0});
  adam_update(ps, st, {"w"}, 0.1);
  const double m = 0.9 * 0.05 + 0.1 * -0.5, v = 0.98 * 0.02 * 0.25 + 0.02 * 0.25;
  const double mh = m / (1 - 0.81), vh = v / (1 - 0.98 * 0.98);
  CHECK(p.value[0] == Catch::Approx(1.0 - 0.1 * 0.5 / (0.5 + 1e-6) - 0.1 * mh / (std::sqrt(vh) + 1e-6)).epsilon(1e-12));
  CHECK(st.slots.at("w").step == 2);

  ParameterStore one;
  auto& q = one.add("q", Tensor({1}, 1.0));
  q.grad.fill(1.0);
  AdamState fresh;
  adam_update(one, fresh, {"q"}, 0.1);
  CHECK(q.value[0] == Catch::Approx(0.9).margin(1e-6));
  CHECK(q.value[0] == 1.0 - 0.1 / (1.0 + 1e-6));
}

TEST_CASE("adam leaves parameters outside the active set untouched", "[optim]") {
  ParameterStore ps;
  auto& a = ps.add("a", Tensor({3}, 0.25));
  auto& b = ps.add("b", Tensor({3}, 0.75));
  AdamState st;
  for (int i = 0; i < 5; ++i) {
    a.grad.fill(1.0);
    b.grad.fill(1.0);
    adam_update(ps, st, {"a"}, 1e-2);
  }
  CHECK(b.value.storage() == std::vector<double>(3, 0.75));
  CHECK(st.slots.count("b") == 0);
  adam_update(ps, st, {"b"}, 1e-2);
  CHECK(st.slots.at("a").step == 5);
  CHECK(st.slots.at("b").step == 1);
  // b's first update gets full bias correction of its own
  CHECK(b.value[0] == Catch::Approx(0.75 - 1e-2 / (1.0 + 1e-6)).epsilon(1e-14));

  // zero gradient on an active parameter from a fresh state is a no-op
  auto& c = ps.add("c", Tensor({2}, 3.0));
  c.grad.fill(0.0);
  adam_update(ps, st, {"c"}, 1.0);
  CHECK(c.value.storage() == std::vector<double>(2, 3.0));
}

TEST_CASE("gradient clipping", "[optim]") {
  ParameterStore ps;
  auto& a = ps.add("a", Tensor({2}));
  auto& b = ps.add("b", Tensor({1}));
  a.grad = Tensor({2}, std::vector<double>{3.0, 0.0});
  b.grad = Tensor({1}, std::vector<double>{4.0});
  CHECK(clip_grad_norm(ps, {"a", "b"}, 1.0) == 5.0);
  CHECK(a.grad[0] == Catch::Approx(0.6));
  CHECK(b.grad[0] == Catch::Approx(0.8));
  CHECK(clip_grad_norm(ps, {"a", "b"}, 10.0) == Catch::Approx(1.0));
  CHECK(a.grad[0] == Catch::Approx(0.6));
}

TEST_CASE("learning rate schedule", "[optim]") {
  LrSchedule s{1e-3, 200, 2000};
  CHECK(lr_at(s, 0) == 0.0);
  CHECK(lr_at(s, 100) == Catch::Approx(5e-4));
  CHECK(lr_at(s, 200) == Catch::Approx(1e-3));
  CHECK(lr_at(s, 1100) == Catch::Approx(5e-4));
  CHECK(lr_at(s, 2000) == 0.0);
  CHECK(lr_at(s, 5000) == 0.0);
  CHECK_THROWS_AS((LrSchedule{1e-3, 0, 10}.validate()), ConfigError);
  CHECK_THROWS_AS((LrSchedule{1e-3, 20, 10}.validate()), ConfigError);
  CHECK_THROWS_AS((LrSchedule{0.0, 2, 10}.validate()), ConfigError);
}
