// SPDX-License-Identifier: Apache-2.0
#include <catch_amalgamated.hpp>

#include <cmath>
#include <random>

#include "skillnet/autodiff.hpp"
#include "skillnet/grad_check.hpp"

using namespace skillnet;

namespace {

Tensor random_tensor(Shape shape, std::mt19937_64& rng, double scale = 1.0) {
  std::uniform_real_distribution<double> u(-scale, scale);
  Tensor t(std::move(shape));
  for (double& v : t.storage()) v = u(rng);
  return t;
}

// Triple-loop reference product.
Tensor reference_matmul(const Tensor& a, const Tensor& b) {
  Tensor c({a.dim(0), b.dim(1)});
  for (std::size_t i = 0; i < a.dim(0); ++i)
    for (std::size_t j = 0; j < b.dim(1); ++j) {
      double s = 0.0;
      for (std::size_t p = 0; p < a.dim(1); ++p) s += a.at(i, p) * b.at(p, j);
      c.at(i, j) = s;
    }
  return c;
}

// Scalar-loop reference layer norm over one row.
std::vector<double> reference_layer_norm(const std::vector<double>& x, const std::vector<double>& g,
                                         const std::vector<double>& b, double eps) {
  double mean = 0.0;
  for (double v : x) mean += v;
  mean /= static_cast<double>(x.size());
  double var = 0.0;
  for (double v : x) var += (v - mean) * (v - mean);
  var /= static_cast<double>(x.size());
  std::vector<double> out(x.size());
  for (std::size_t i = 0; i < x.size(); ++i) out[i] = (x[i] - mean) / std::sqrt(var + eps) * g[i] + b[i];
  return out;
}

}  // namespace

TEST_CASE("matmul identity, scalar and triple-loop oracle", "[tensor]") {
  Tape tape;
  Var id = tape.constant(Tensor::matrix({{1, 0}, {0, 1}}));
  Var m = tape.constant(Tensor::matrix({{1.5, -2}, {3, 4.25}}));
  CHECK(matmul(id, m).value() == m.value());

  Var two = tape.constant(Tensor::matrix({{2}}));
  Var three = tape.constant(Tensor::matrix({{3}}));
  CHECK(matmul(two, three).value().item() == 6.0);

  std::mt19937_64 rng(7);
  Tensor a = random_tensor({3, 4}, rng), b = random_tensor({4, 2}, rng);
  Tensor ref = reference_matmul(a, b);
  Tensor got = matmul(tape.constant(a), tape.constant(b)).value();
  for (std::size_t i = 0; i < ref.size(); ++i) CHECK(std::abs(got[i] - ref[i]) < 1e-12);
}

TEST_CASE("matmul shape mismatch names both shapes", "[tensor]") {
  Tape tape;
  Var a = tape.constant(Tensor({2, 3}));
  Var b = tape.constant(Tensor({2, 3}));
  try {
    matmul(a, b);
    FAIL("expected DimensionError");
  } catch (const DimensionError& e) {
    const std::string msg = e.what();
    CHECK(msg.find("[2x3]") != std::string::npos);
  }
}

TEST_CASE("softmax closed forms and invariances", "[tensor]") {
  Tape tape;
  Var c = tape.constant(Tensor({1, 4}, {2, 2, 2, 2}));
  for (double p : softmax(c, 1).value().storage()) CHECK(p == Catch::Approx(0.25).epsilon(1e-15));

  Var x = tape.constant(Tensor({1, 2}, {0.0, std::log(3.0)}));
  const Tensor& y = softmax(x, 1).value();
  CHECK(std::abs(y[0] - 0.25) < 1e-15);
  CHECK(std::abs(y[1] - 0.75) < 1e-15);

  std::mt19937_64 rng(3);
  Tensor r = random_tensor({5, 6}, rng, 4.0);
  Tensor shifted = r;
  for (double& v : shifted.storage()) v += 17.25;
  const Tensor a = softmax(tape.constant(r), 1).value();
  const Tensor b = softmax(tape.constant(shifted), 1).value();
  for (std::size_t i = 0; i < 5; ++i) {
    double s = 0.0;
    for (std::size_t j = 0; j < 6; ++j) {
      s += a.at(i, j);
      CHECK(a.at(i, j) >= 0.0);
      CHECK(std::abs(a.at(i, j) - b.at(i, j)) < 1e-12);
    }
    CHECK(std::abs(s - 1.0) < 1e-12);
  }
  // axis 0 normalizes columns
  const Tensor col = softmax(tape.constant(r), 0).value();
  for (std::size_t j = 0; j < 6; ++j) {
    double s = 0.0;
    for (std::size_t i = 0; i < 5; ++i) s += col.at(i, j);
    CHECK(std::abs(s - 1.0) < 1e-12);
  }
}

TEST_CASE("layer_norm examples and scalar oracle", "[tensor]") {
  Tape tape;
  Var g = tape.constant(Tensor({4}, 1.0));
  Var b = tape.constant(Tensor({4}, 0.0));
  Var c = tape.constant(Tensor({1, 4}, {3, 3, 3, 3}));
  for (double v : layer_norm(c, g, b, 1e-12).value().storage()) CHECK(std::abs(v) < 1e-9);

  Var g2 = tape.constant(Tensor({2}, 1.0));
  Var b2 = tape.constant(Tensor({2}, 0.0));
  Var pm = tape.constant(Tensor({1, 2}, {1, -1}));
  const Tensor y = layer_norm(pm, g2, b2, 1e-300).value();
  CHECK(std::abs(y[0] - 1.0) < 1e-12);
  CHECK(std::abs(y[1] + 1.0) < 1e-12);

  std::mt19937_64 rng(11);
  Tensor x = random_tensor({1, 9}, rng, 3.0);
  Tensor gain = random_tensor({9}, rng), bias = random_tensor({9}, rng);
  const Tensor got = layer_norm(tape.constant(x), tape.constant(gain), tape.constant(bias), 1e-12).value();
  const auto ref = reference_layer_norm(x.storage(), gain.storage(), bias.storage(), 1e-12);
  for (std::size_t i = 0; i < 9; ++i) CHECK(std::abs(got[i] - ref[i]) < 1e-12);
}

TEST_CASE("backward: sum gives ones, unused parameter stays exactly zero", "[autodiff]") {
  std::mt19937_64 rng(1);
  Parameter x("x", random_tensor({3, 2}, rng));
  Parameter unused("unused", random_tensor({2}, rng));
  Tape tape;
  Var loss = sum(tape.param(x));
  tape.param(unused);
  tape.backward(loss);
  for (double g : x.grad.storage()) CHECK(g == 1.0);
  for (double g : unused.grad.storage()) CHECK(g == 0.0);
}

TEST_CASE("backward rejects non-scalar losses", "[autodiff]") {
  Parameter x("x", Tensor({2, 2}, 1.0));
  Tape tape;
  CHECK_THROWS_AS(tape.backward(tape.param(x)), DimensionError);
}

TEST_CASE("gradients accumulate additively and zero_grad resets", "[autodiff]") {
  std::mt19937_64 rng(2);
  Parameter w("w", random_tensor({3, 3}, rng));
  Parameter x("x", random_tensor({2, 3}, rng));
  auto run = [&] {
    Tape tape;
    Var y = gelu(matmul(tape.param(x), tape.param(w)));
    tape.backward(sum(mul(y, y)));
  };
  run();
  const Tensor once = w.grad;
  run();
  for (std::size_t i = 0; i < once.size(); ++i) CHECK(w.grad[i] == 2.0 * once[i]);
  w.zero_grad();
  for (double g : w.grad.storage()) CHECK(g == 0.0);
}

TEST_CASE("kernels are deterministic", "[autodiff]") {
  std::mt19937_64 rng(5);
  Tensor a = random_tensor({6, 5}, rng), b = random_tensor({5, 4}, rng);
  Tape t1, t2;
  const Tensor r1 = softmax(gelu(matmul(t1.constant(a), t1.constant(b))), 1).value();
  const Tensor r2 = softmax(gelu(matmul(t2.constant(a), t2.constant(b))), 1).value();
  CHECK(r1 == r2);
}

TEST_CASE("2-layer MLP analytic gradients match central differences", "[autodiff]") {
  std::mt19937_64 rng(9);
  Parameter w1("w1", random_tensor({4, 6}, rng));
  Parameter b1("b1", random_tensor({6}, rng));
  Parameter w2("w2", random_tensor({6, 3}, rng));
  Parameter b2("b2", random_tensor({3}, rng));
  const Tensor input = random_tensor({5, 4}, rng);
  const std::vector<int> labels{0, 2, 1, 1, 0};
  auto f = [&](Tape& t) {
    Var h = gelu(add_bias(matmul(t.constant(input), t.param(w1)), t.param(b1)));
    Var logits = add_bias(matmul(h, t.param(w2)), t.param(b2));
    return cross_entropy(logits, labels);
  };
  auto res = grad_check(f, {&w1, &b1, &w2, &b2});
  INFO(res.worst_param << "[" << res.worst_index << "] " << res.worst_analytic << " vs " << res.worst_numeric);
  CHECK(res.max_rel_error < 1e-6);
}

TEST_CASE("grad_check: quadratic bowl and constant function", "[autodiff]") {
  Parameter x("x", Tensor({4}, {0.3, -1.2, 2.0, 0.7}));
  auto bowl = [&](Tape& t) {
    Var v = t.param(x);
    return sum(mul(v, v));
  };
  CHECK(grad_check(bowl, {&x}).max_rel_error < 1e-9);

  auto constant = [&](Tape& t) {
    t.param(x);
    return t.constant(Tensor::scalar(4.0));
  };
  auto res = grad_check(constant, {&x});
  CHECK(res.max_rel_error == 0.0);
  for (double g : x.grad.storage()) CHECK(g == 0.0);
}

TEST_CASE("every differentiable primitive passes finite differences", "[autodiff]") {
  std::mt19937_64 rng(21);
  // Each primitive is checked through loss = sum(op(...) * R) for a fixed random R.
  auto check = [&](const char* name, std::vector<Parameter*> params, const std::function<Var(Tape&)>& op) {
    Tensor probe;
    {
      Tape t;
      probe = random_tensor(op(t).shape(), rng);
    }
    auto f = [&](Tape& t) { return sum(mul(op(t), t.constant(probe))); };
    auto res = grad_check(f, params);
    INFO(name << ": " << res.worst_param << "[" << res.worst_index << "] " << res.worst_analytic << " vs "
              << res.worst_numeric);
    CHECK(res.max_rel_error < 1e-5);
  };
  for (int trial = 0; trial < 3; ++trial) {
    Parameter a("a", random_tensor({4, 6}, rng));
    Parameter b("b", random_tensor({6, 5}, rng));
    Parameter c("c", random_tensor({4, 6}, rng));
    Parameter g("g", random_tensor({6}, rng));
    Parameter bias("bias", random_tensor({6}, rng));
    Parameter table("table", random_tensor({5, 6}, rng));
    Parameter q("q", random_tensor({8, 6}, rng));
    Parameter k("k", random_tensor({8, 6}, rng));
    Parameter v("v", random_tensor({8, 6}, rng));
    Parameter w("w", random_tensor({4, 1}, rng));
    check("matmul", {&a, &b}, [&](Tape& t) { return matmul(t.param(a), t.param(b)); });
    check("add/sub/mul", {&a, &c}, [&](Tape& t) {
      return mul(add(t.param(a), t.param(c)), sub(t.param(a), t.param(c)));
    });
    check("add_bias", {&a, &bias}, [&](Tape& t) { return add_bias(t.param(a), t.param(bias)); });
    check("scale", {&a}, [&](Tape& t) { return scale(t.param(a), -1.75); });
    check("mean_of", {&a, &c}, [&](Tape& t) { return mean_of({t.param(a), t.param(c), t.param(a)}); });
    check("transpose/reshape", {&a}, [&](Tape& t) { return reshape(transpose(t.param(a)), {3, 8}); });
    check("gather/scatter", {&a}, [&](Tape& t) {
      return scatter_rows(gather_rows(t.param(a), {3, 1, 3}), {0, 4, 2}, 5);
    });
    check("select_column", {&a}, [&](Tape& t) { return select_column(t.param(a), 2); });
    check("scale_rows", {&a, &w}, [&](Tape& t) { return scale_rows(t.param(a), t.param(w)); });
    check("embedding", {&table}, [&](Tape& t) { return embedding(t.param(table), {0, 3, 3, 4}); });
    check("gelu", {&a}, [&](Tape& t) { return gelu(scale(t.param(a), 2.0)); });
    check("tanh", {&a}, [&](Tape& t) { return tanh(t.param(a)); });
    check("softmax axis 1", {&a}, [&](Tape& t) { return softmax(t.param(a), 1); });
    check("softmax axis 0", {&a}, [&](Tape& t) { return softmax(t.param(a), 0); });
    check("layer_norm", {&a, &g, &bias}, [&](Tape& t) {
      return layer_norm(t.param(a), t.param(g), t.param(bias), 1e-12);
    });
    check("attention", {&q, &k, &v}, [&](Tape& t) {
      return attention(t.param(q), t.param(k), t.param(v), {1, 1, 1, 0, 1, 1, 0, 0}, {2, 4, 2});
    });
    check("cross_entropy", {&a}, [&](Tape& t) {
      return cross_entropy(t.param(a), {1, kIgnoreLabel, 5, 0});
    });
    const std::vector<unsigned char> allowed{1, 1, 0, 1, 1, 1, 0, 1, 1, 1, 1, 1,
                                             1, 0, 0, 0, 1, 1, 1, 1, 1, 1, 1, 0};
    check("masked cross_entropy", {&a}, [&](Tape& t) { return cross_entropy(t.param(a), {3, 1, 5, 4}, &allowed); });
  }
}

TEST_CASE("attention ignores masked keys entirely", "[autodiff]") {
  std::mt19937_64 rng(4);
  Tensor q = random_tensor({4, 4}, rng), k = random_tensor({4, 4}, rng), v = random_tensor({4, 4}, rng);
  Tape tape;
  Tensor out1 = attention(tape.constant(q), tape.constant(k), tape.constant(v), {1, 1, 1, 0}, {1, 4, 2}).value();
  for (std::size_t j = 0; j < 4; ++j) {
    k.at(3, j) += 100.0;
    v.at(3, j) -= 50.0;
  }
  Tensor out2 = attention(tape.constant(q), tape.constant(k), tape.constant(v), {1, 1, 1, 0}, {1, 4, 2}).value();
  CHECK(out1 == out2);
}
