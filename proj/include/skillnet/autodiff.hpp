// SPDX-License-Identifier: Apache-2.0
//
// Tape-based reverse-mode automatic differentiation over Tensor values.
//
// A Tape records every value produced during a forward pass. Each recorded
// node may carry a backward closure that pushes the node's gradient into its
// parents. Nodes are appended in evaluation order, so walking the tape from
// the loss backwards is a valid reverse topological order. Parameters enter
// the tape as leaves; backward() accumulates their gradients into
// Parameter::grad, which is only ever reset by zero_grad().
#pragma once

#include <algorithm>
#include <cmath>
#include <functional>
#include <map>
#include <memory>
#include <random>
#include <set>
#include <string>
#include <unordered_map>
#include <vector>

#include "skillnet/error.hpp"
#include "skillnet/tensor.hpp"

namespace skillnet {

struct Parameter {
  std::string name;
  Tensor value;
  Tensor grad;

  Parameter() = default;
  Parameter(std::string n, Tensor v) : name(std::move(n)), value(std::move(v)), grad(value.shape()) {}

  void zero_grad() { grad.fill(0.0); }
  std::size_t size() const { return value.size(); }
};

/// Named parameters of a model, ordered by name. Addresses are stable for the
/// lifetime of the store (std::map nodes never move).
class ParameterStore {
 public:
  Parameter& add(const std::string& name, Tensor value) {
    auto [it, inserted] = params_.try_emplace(name, name, std::move(value));
    if (!inserted) throw ConfigError("duplicate parameter name: " + name);
    return it->second;
  }

  bool contains(const std::string& name) const { return params_.count(name) != 0; }

  Parameter& get(const std::string& name) {
    auto it = params_.find(name);
    if (it == params_.end()) throw ConfigError("unknown parameter: " + name);
    return it->second;
  }
  const Parameter& get(const std::string& name) const {
    auto it = params_.find(name);
    if (it == params_.end()) throw ConfigError("unknown parameter: " + name);
    return it->second;
  }

  void erase(const std::string& name) { params_.erase(name); }

  std::vector<std::string> names() const {
    std::vector<std::string> out;
    out.reserve(params_.size());
    for (const auto& [n, _] : params_) out.push_back(n);
    return out;
  }

  std::size_t count() const {
    std::size_t n = 0;
    for (const auto& [_, p] : params_) n += p.size();
    return n;
  }

  std::size_t count(const std::set<std::string>& names) const {
    std::size_t n = 0;
    for (const auto& name : names) n += get(name).size();
    return n;
  }

  void zero_grad() {
    for (auto& [_, p] : params_) p.zero_grad();
  }

  auto begin() { return params_.begin(); }
  auto end() { return params_.end(); }
  auto begin() const { return params_.begin(); }
  auto end() const { return params_.end(); }
  std::size_t size() const { return params_.size(); }

 private:
  std::map<std::string, Parameter> params_;
};

class Tape;

/// Handle to a value recorded on a Tape.
struct Var {
  Tape* tape = nullptr;
  std::size_t id = 0;

  const Tensor& value() const;
  const Shape& shape() const { return value().shape(); }
  double item() const { return value().item(); }
};

class Tape {
 public:
  using BackwardFn = std::function<void(Tape&, std::size_t)>;

  Tape() { nodes_.reserve(256); }
  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;

  Var constant(Tensor value) {
    nodes_.push_back(Node{std::move(value), {}, false, nullptr, {}});
    return Var{this, nodes_.size() - 1};
  }

  // Parameter leaves are cached so each parameter has one node per tape.
  Var param(Parameter& p) {
    if (auto it = leaf_of_.find(&p); it != leaf_of_.end()) return Var{this, it->second};
    nodes_.push_back(Node{p.value, {}, true, &p, {}});
    leaf_of_[&p] = nodes_.size() - 1;
    return Var{this, nodes_.size() - 1};
  }

  Var record(Tensor value, std::initializer_list<Var> parents, BackwardFn fn) {
    bool needs = false;
    for (const Var& v : parents) {
      if (v.tape != this) throw Error("operands recorded on different tapes");
      needs = needs || nodes_[v.id].requires_grad;
    }
    assert_finite(value);
    nodes_.push_back(Node{std::move(value), {}, needs, nullptr, needs ? std::move(fn) : BackwardFn{}});
    return Var{this, nodes_.size() - 1};
  }

  Var record(Tensor value, const std::vector<Var>& parents, BackwardFn fn) {
    bool needs = false;
    for (const Var& v : parents) {
      if (v.tape != this) throw Error("operands recorded on different tapes");
      needs = needs || nodes_[v.id].requires_grad;
    }
    assert_finite(value);
    nodes_.push_back(Node{std::move(value), {}, needs, nullptr, needs ? std::move(fn) : BackwardFn{}});
    return Var{this, nodes_.size() - 1};
  }

  const Tensor& value(std::size_t id) const { return nodes_[id].value; }
  bool requires_grad(std::size_t id) const { return nodes_[id].requires_grad; }

  Tensor& grad(std::size_t id) {
    Node& n = nodes_[id];
    if (n.grad.empty()) n.grad = Tensor(n.value.shape());
    return n.grad;
  }

  /// Reverse pass from a scalar loss; accumulates into Parameter::grad.
  void backward(Var loss) {
    if (loss.tape != this) throw Error("loss recorded on a different tape");
    if (nodes_[loss.id].value.size() != 1) {
      throw DimensionError("backward() needs a scalar loss, got shape " +
                           shape_str(nodes_[loss.id].value.shape()));
    }
    for (Node& n : nodes_) n.grad = Tensor();
    grad(loss.id)[0] += 1.0;
    for (std::size_t i = loss.id + 1; i-- > 0;) {
      Node& n = nodes_[i];
      if (n.grad.empty() || !n.requires_grad) continue;
      if (n.backward) n.backward(*this, i);
    }
    for (Node& n : nodes_) {
      if (n.param == nullptr || n.grad.empty()) continue;
      auto& dst = n.param->grad.storage();
      const auto& src = n.grad.storage();
      for (std::size_t k = 0; k < dst.size(); ++k) dst[k] += src[k];
    }
  }

  std::size_t size() const { return nodes_.size(); }

 private:
  struct Node {
    Tensor value;
    Tensor grad;
    bool requires_grad = false;
    Parameter* param = nullptr;
    BackwardFn backward;
  };

  std::vector<Node> nodes_;
  std::unordered_map<const Parameter*, std::size_t> leaf_of_;
};

inline const Tensor& Var::value() const { return tape->value(id); }

inline void backward(Var loss) { loss.tape->backward(loss); }

namespace detail {

inline void require_same_shape(const char* op, const Tensor& a, const Tensor& b) {
  if (a.shape() != b.shape()) {
    throw DimensionError(std::string(op) + ": shape mismatch " + shape_str(a.shape()) + " vs " +
                         shape_str(b.shape()));
  }
}

inline void require_matrix(const char* op, const Tensor& a) {
  if (a.rank() != 2) throw DimensionError(std::string(op) + ": expected a matrix, got " + shape_str(a.shape()));
}

inline void axpy(std::vector<double>& dst, const std::vector<double>& src) {
  for (std::size_t i = 0; i < dst.size(); ++i) dst[i] += src[i];
}

}  // namespace detail

// ---------------------------------------------------------------------------
// Elementwise and structural ops

inline Var matmul(Var a, Var b) {
  const Tensor& av = a.value();
  const Tensor& bv = b.value();
  detail::require_matrix("matmul", av);
  detail::require_matrix("matmul", bv);
  if (av.dim(1) != bv.dim(0)) {
    throw DimensionError("matmul: inner dimensions disagree for " + shape_str(av.shape()) + " and " +
                         shape_str(bv.shape()));
  }
  const std::size_t m = av.dim(0), k = av.dim(1), n = bv.dim(1);
  Tensor out({m, n});
  gemm_acc(av.data().data(), bv.data().data(), out.data().data(), m, k, n);
  return a.tape->record(std::move(out), {a, b}, [a = a.id, b = b.id, m, k, n](Tape& t, std::size_t self) {
    const Tensor& g = t.grad(self);
    if (t.requires_grad(a)) {
      gemm_nt_acc(g.data().data(), t.value(b).data().data(), t.grad(a).data().data(), m, n, k);
    }
    if (t.requires_grad(b)) {
      gemm_tn_acc(t.value(a).data().data(), g.data().data(), t.grad(b).data().data(), m, k, n);
    }
  });
}

inline Var add(Var a, Var b) {
  detail::require_same_shape("add", a.value(), b.value());
  Tensor out = a.value();
  detail::axpy(out.storage(), b.value().storage());
  return a.tape->record(std::move(out), {a, b}, [a = a.id, b = b.id](Tape& t, std::size_t self) {
    const Tensor& g = t.grad(self);
    if (t.requires_grad(a)) detail::axpy(t.grad(a).storage(), g.storage());
    if (t.requires_grad(b)) detail::axpy(t.grad(b).storage(), g.storage());
  });
}

inline Var sub(Var a, Var b) {
  detail::require_same_shape("sub", a.value(), b.value());
  Tensor out = a.value();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] -= b.value()[i];
  return a.tape->record(std::move(out), {a, b}, [a = a.id, b = b.id](Tape& t, std::size_t self) {
    const Tensor& g = t.grad(self);
    if (t.requires_grad(a)) detail::axpy(t.grad(a).storage(), g.storage());
    if (t.requires_grad(b)) {
      auto& gb = t.grad(b);
      for (std::size_t i = 0; i < gb.size(); ++i) gb[i] -= g[i];
    }
  });
}

inline Var mul(Var a, Var b) {
  detail::require_same_shape("mul", a.value(), b.value());
  Tensor out = a.value();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] *= b.value()[i];
  return a.tape->record(std::move(out), {a, b}, [a = a.id, b = b.id](Tape& t, std::size_t self) {
    const Tensor& g = t.grad(self);
    if (t.requires_grad(a)) {
      auto& ga = t.grad(a);
      const auto& bv = t.value(b);
      for (std::size_t i = 0; i < ga.size(); ++i) ga[i] += g[i] * bv[i];
    }
    if (t.requires_grad(b)) {
      auto& gb = t.grad(b);
      const auto& av = t.value(a);
      for (std::size_t i = 0; i < gb.size(); ++i) gb[i] += g[i] * av[i];
    }
  });
}

/// x[rows x n] + bias[n], bias broadcast over rows.
inline Var add_bias(Var x, Var bias) {
  const Tensor& xv = x.value();
  const Tensor& bv = bias.value();
  if (bv.size() != xv.cols()) {
    throw DimensionError("add_bias: bias " + shape_str(bv.shape()) + " does not match last axis of " +
                         shape_str(xv.shape()));
  }
  Tensor out = xv;
  const std::size_t n = xv.cols();
  for (std::size_t r = 0; r < xv.rows(); ++r)
    for (std::size_t j = 0; j < n; ++j) out[r * n + j] += bv[j];
  return x.tape->record(std::move(out), {x, bias}, [x = x.id, b = bias.id, n](Tape& t, std::size_t self) {
    const Tensor& g = t.grad(self);
    if (t.requires_grad(x)) detail::axpy(t.grad(x).storage(), g.storage());
    if (t.requires_grad(b)) {
      auto& gb = t.grad(b);
      const std::size_t rows = g.size() / n;
      for (std::size_t r = 0; r < rows; ++r)
        for (std::size_t j = 0; j < n; ++j) gb[j] += g[r * n + j];
    }
  });
}

inline Var scale(Var x, double c) {
  Tensor out = x.value();
  for (double& v : out.storage()) v *= c;
  return x.tape->record(std::move(out), {x}, [x = x.id, c](Tape& t, std::size_t self) {
    const Tensor& g = t.grad(self);
    auto& gx = t.grad(x);
    for (std::size_t i = 0; i < gx.size(); ++i) gx[i] += c * g[i];
  });
}

/// Arithmetic mean of same-shaped values. Summation runs in argument order.
inline Var mean_of(const std::vector<Var>& xs) {
  if (xs.empty()) throw DimensionError("mean_of: no operands");
  Tensor out(xs.front().shape());
  for (const Var& v : xs) {
    detail::require_same_shape("mean_of", out, v.value());
    detail::axpy(out.storage(), v.value().storage());
  }
  const double inv = 1.0 / static_cast<double>(xs.size());
  for (double& v : out.storage()) v *= inv;
  std::vector<std::size_t> ids;
  for (const Var& v : xs) ids.push_back(v.id);
  return xs.front().tape->record(std::move(out), xs, [ids, inv](Tape& t, std::size_t self) {
    const Tensor& g = t.grad(self);
    for (std::size_t id : ids) {
      if (!t.requires_grad(id)) continue;
      auto& gi = t.grad(id);
      for (std::size_t i = 0; i < gi.size(); ++i) gi[i] += inv * g[i];
    }
  });
}

inline Var sum(Var x) {
  double s = 0.0;
  for (double v : x.value().storage()) s += v;
  return x.tape->record(Tensor::scalar(s), {x}, [x = x.id](Tape& t, std::size_t self) {
    const double g = t.grad(self)[0];
    for (double& v : t.grad(x).storage()) v += g;
  });
}

inline Var reshape(Var x, Shape shape) {
  Tensor out = x.value().reshaped(std::move(shape));
  return x.tape->record(std::move(out), {x}, [x = x.id](Tape& t, std::size_t self) {
    detail::axpy(t.grad(x).storage(), t.grad(self).storage());
  });
}

inline Var transpose(Var x) {
  const Tensor& xv = x.value();
  detail::require_matrix("transpose", xv);
  const std::size_t r = xv.dim(0), c = xv.dim(1);
  Tensor out({c, r});
  for (std::size_t i = 0; i < r; ++i)
    for (std::size_t j = 0; j < c; ++j) out[j * r + i] = xv[i * c + j];
  return x.tape->record(std::move(out), {x}, [x = x.id, r, c](Tape& t, std::size_t self) {
    const Tensor& g = t.grad(self);
    auto& gx = t.grad(x);
    for (std::size_t i = 0; i < r; ++i)
      for (std::size_t j = 0; j < c; ++j) gx[i * c + j] += g[j * r + i];
  });
}

/// Rows of x[n x m] at the given indices, in order.
inline Var gather_rows(Var x, std::vector<std::size_t> idx) {
  const Tensor& xv = x.value();
  const std::size_t m = xv.cols(), n = xv.rows();
  Tensor out({idx.size(), m});
  for (std::size_t r = 0; r < idx.size(); ++r) {
    if (idx[r] >= n) throw DimensionError("gather_rows: row index out of range");
    std::copy_n(xv.data().data() + idx[r] * m, m, out.data().data() + r * m);
  }
  return x.tape->record(std::move(out), {x}, [x = x.id, idx = std::move(idx), m](Tape& t, std::size_t self) {
    const Tensor& g = t.grad(self);
    auto& gx = t.grad(x);
    for (std::size_t r = 0; r < idx.size(); ++r)
      for (std::size_t j = 0; j < m; ++j) gx[idx[r] * m + j] += g[r * m + j];
  });
}

/// Inverse of gather_rows: a [rows x m] matrix of zeros with x's rows added at idx.
inline Var scatter_rows(Var x, std::vector<std::size_t> idx, std::size_t rows) {
  const Tensor& xv = x.value();
  const std::size_t m = xv.cols();
  if (idx.size() != xv.rows()) throw DimensionError("scatter_rows: index count does not match rows");
  Tensor out({rows, m});
  for (std::size_t r = 0; r < idx.size(); ++r) {
    if (idx[r] >= rows) throw DimensionError("scatter_rows: row index out of range");
    for (std::size_t j = 0; j < m; ++j) out[idx[r] * m + j] += xv[r * m + j];
  }
  return x.tape->record(std::move(out), {x}, [x = x.id, idx = std::move(idx), m](Tape& t, std::size_t self) {
    const Tensor& g = t.grad(self);
    auto& gx = t.grad(x);
    for (std::size_t r = 0; r < idx.size(); ++r)
      for (std::size_t j = 0; j < m; ++j) gx[r * m + j] += g[idx[r] * m + j];
  });
}

/// Column j of x[n x m] as an [n x 1] matrix.
inline Var select_column(Var x, std::size_t j) {
  const Tensor& xv = x.value();
  const std::size_t m = xv.cols(), n = xv.rows();
  if (j >= m) throw DimensionError("select_column: column out of range");
  Tensor out({n, 1});
  for (std::size_t r = 0; r < n; ++r) out[r] = xv[r * m + j];
  return x.tape->record(std::move(out), {x}, [x = x.id, j, m, n](Tape& t, std::size_t self) {
    const Tensor& g = t.grad(self);
    auto& gx = t.grad(x);
    for (std::size_t r = 0; r < n; ++r) gx[r * m + j] += g[r];
  });
}

/// Row r of x[n x m] scaled by w[n x 1][r].
inline Var scale_rows(Var x, Var w) {
  const Tensor& xv = x.value();
  const Tensor& wv = w.value();
  const std::size_t n = xv.rows(), m = xv.cols();
  if (wv.size() != n) throw DimensionError("scale_rows: weight count does not match rows");
  Tensor out = xv;
  for (std::size_t r = 0; r < n; ++r)
    for (std::size_t j = 0; j < m; ++j) out[r * m + j] *= wv[r];
  return x.tape->record(std::move(out), {x, w}, [x = x.id, w = w.id, n, m](Tape& t, std::size_t self) {
    const Tensor& g = t.grad(self);
    if (t.requires_grad(x)) {
      auto& gx = t.grad(x);
      const auto& wv = t.value(w);
      for (std::size_t r = 0; r < n; ++r)
        for (std::size_t j = 0; j < m; ++j) gx[r * m + j] += g[r * m + j] * wv[r];
    }
    if (t.requires_grad(w)) {
      auto& gw = t.grad(w);
      const auto& xv = t.value(x);
      for (std::size_t r = 0; r < n; ++r) {
        double s = 0.0;
        for (std::size_t j = 0; j < m; ++j) s += g[r * m + j] * xv[r * m + j];
        gw[r] += s;
      }
    }
  });
}

/// Rows of table[V x d] selected by ids.
inline Var embedding(Var table, const std::vector<int>& ids) {
  const Tensor& tv = table.value();
  detail::require_matrix("embedding", tv);
  std::vector<std::size_t> idx(ids.size());
  for (std::size_t i = 0; i < ids.size(); ++i) {
    if (ids[i] < 0 || static_cast<std::size_t>(ids[i]) >= tv.dim(0)) {
      throw DimensionError("embedding: id " + std::to_string(ids[i]) + " outside table of " +
                           std::to_string(tv.dim(0)) + " rows");
    }
    idx[i] = static_cast<std::size_t>(ids[i]);
  }
  return gather_rows(table, std::move(idx));
}

// ---------------------------------------------------------------------------
// Nonlinearities and normalization

namespace detail {
constexpr double kGeluC = 0.7978845608028654;  // sqrt(2/pi)
constexpr double kGeluA = 0.044715;
}  // namespace detail

/// GELU, tanh approximation: 0.5 x (1 + tanh(sqrt(2/pi) (x + 0.044715 x^3))).
inline Var gelu(Var x) {
  Tensor out = x.value();
  for (double& v : out.storage()) {
    const double u = detail::kGeluC * (v + detail::kGeluA * v * v * v);
    v = 0.5 * v * (1.0 + std::tanh(u));
  }
  return x.tape->record(std::move(out), {x}, [x = x.id](Tape& t, std::size_t self) {
    const Tensor& g = t.grad(self);
    const Tensor& xv = t.value(x);
    auto& gx = t.grad(x);
    for (std::size_t i = 0; i < gx.size(); ++i) {
      const double v = xv[i];
      const double u = detail::kGeluC * (v + detail::kGeluA * v * v * v);
      const double th = std::tanh(u);
      const double du = detail::kGeluC * (1.0 + 3.0 * detail::kGeluA * v * v);
      gx[i] += g[i] * (0.5 * (1.0 + th) + 0.5 * v * (1.0 - th * th) * du);
    }
  });
}

inline Var tanh(Var x) {
  Tensor out = x.value();
  for (double& v : out.storage()) v = std::tanh(v);
  return x.tape->record(std::move(out), {x}, [x = x.id](Tape& t, std::size_t self) {
    const Tensor& g = t.grad(self);
    const Tensor& y = t.value(self);
    auto& gx = t.grad(x);
    for (std::size_t i = 0; i < gx.size(); ++i) gx[i] += g[i] * (1.0 - y[i] * y[i]);
  });
}

/// Softmax along `axis`, max-subtracted.
inline Var softmax(Var x, std::size_t axis) {
  const Tensor& xv = x.value();
  if (axis >= xv.rank()) throw DimensionError("softmax: axis out of range for " + shape_str(xv.shape()));
  std::size_t outer = 1, inner = 1;
  const std::size_t len = xv.dim(axis);
  for (std::size_t i = 0; i < axis; ++i) outer *= xv.dim(i);
  for (std::size_t i = axis + 1; i < xv.rank(); ++i) inner *= xv.dim(i);
  Tensor out(xv.shape());
  for (std::size_t o = 0; o < outer; ++o) {
    for (std::size_t in = 0; in < inner; ++in) {
      const std::size_t base = o * len * inner + in;
      double mx = xv[base];
      for (std::size_t j = 1; j < len; ++j) mx = std::max(mx, xv[base + j * inner]);
      double z = 0.0;
      for (std::size_t j = 0; j < len; ++j) {
        const double e = std::exp(xv[base + j * inner] - mx);
        out[base + j * inner] = e;
        z += e;
      }
      for (std::size_t j = 0; j < len; ++j) out[base + j * inner] /= z;
    }
  }
  return x.tape->record(std::move(out), {x}, [x = x.id, outer, inner, len](Tape& t, std::size_t self) {
    const Tensor& g = t.grad(self);
    const Tensor& y = t.value(self);
    auto& gx = t.grad(x);
    for (std::size_t o = 0; o < outer; ++o) {
      for (std::size_t in = 0; in < inner; ++in) {
        const std::size_t base = o * len * inner + in;
        double dot = 0.0;
        for (std::size_t j = 0; j < len; ++j) dot += g[base + j * inner] * y[base + j * inner];
        for (std::size_t j = 0; j < len; ++j) {
          const std::size_t k = base + j * inner;
          gx[k] += y[k] * (g[k] - dot);
        }
      }
    }
  });
}

/// Normalizes each row over the last axis, then applies gain and bias.
inline Var layer_norm(Var x, Var gain, Var bias, double eps = 1e-12) {
  const Tensor& xv = x.value();
  const std::size_t n = xv.cols(), rows = xv.rows();
  if (gain.value().size() != n || bias.value().size() != n) {
    throw DimensionError("layer_norm: gain/bias must match last axis of " + shape_str(xv.shape()));
  }
  Tensor out(xv.shape());
  Tensor xhat(xv.shape());
  std::vector<double> inv_std(rows);
  const Tensor& gv = gain.value();
  const Tensor& bv = bias.value();
  for (std::size_t r = 0; r < rows; ++r) {
    const double* xr = xv.data().data() + r * n;
    double mean = 0.0;
    for (std::size_t j = 0; j < n; ++j) mean += xr[j];
    mean /= static_cast<double>(n);
    double var = 0.0;
    for (std::size_t j = 0; j < n; ++j) var += (xr[j] - mean) * (xr[j] - mean);
    var /= static_cast<double>(n);
    const double is = 1.0 / std::sqrt(var + eps);
    inv_std[r] = is;
    for (std::size_t j = 0; j < n; ++j) {
      const double h = (xr[j] - mean) * is;
      xhat[r * n + j] = h;
      out[r * n + j] = h * gv[j] + bv[j];
    }
  }
  return x.tape->record(
      std::move(out), {x, gain, bias},
      [x = x.id, gid = gain.id, bid = bias.id, n, rows, xhat = std::move(xhat),
       inv_std = std::move(inv_std)](Tape& t, std::size_t self) {
        const Tensor& g = t.grad(self);
        const Tensor& gv = t.value(gid);
        if (t.requires_grad(gid)) {
          auto& gg = t.grad(gid);
          for (std::size_t r = 0; r < rows; ++r)
            for (std::size_t j = 0; j < n; ++j) gg[j] += g[r * n + j] * xhat[r * n + j];
        }
        if (t.requires_grad(bid)) {
          auto& gb = t.grad(bid);
          for (std::size_t r = 0; r < rows; ++r)
            for (std::size_t j = 0; j < n; ++j) gb[j] += g[r * n + j];
        }
        if (t.requires_grad(x)) {
          auto& gx = t.grad(x);
          const double inv_n = 1.0 / static_cast<double>(n);
          for (std::size_t r = 0; r < rows; ++r) {
            double s1 = 0.0, s2 = 0.0;
            for (std::size_t j = 0; j < n; ++j) {
              const double dh = g[r * n + j] * gv[j];
              s1 += dh;
              s2 += dh * xhat[r * n + j];
            }
            for (std::size_t j = 0; j < n; ++j) {
              const double dh = g[r * n + j] * gv[j];
              gx[r * n + j] += inv_std[r] * (dh - inv_n * s1 - xhat[r * n + j] * inv_n * s2);
            }
          }
        }
      });
}

/// Inverted dropout. rate == 0 returns x unchanged and records nothing.
inline Var dropout(Var x, double rate, std::mt19937_64& rng) {
  if (rate <= 0.0) return x;
  if (rate >= 1.0) throw ConfigError("dropout rate must be < 1");
  Tensor mask(x.shape());
  const double keep = 1.0 / (1.0 - rate);
  for (double& m : mask.storage()) {
    const double u = static_cast<double>(rng() >> 11) * 0x1.0p-53;
    m = u < rate ? 0.0 : keep;
  }
  Var mv = x.tape->constant(std::move(mask));
  return mul(x, mv);
}

// ---------------------------------------------------------------------------
// Losses

inline constexpr int kIgnoreLabel = -1;

/// Mean softmax cross-entropy of logits[n x C] rows against labels.
/// Rows labelled kIgnoreLabel are skipped; optional `allowed` (n x C, 0/1)
/// excludes entries from the softmax. Returns 0 when every row is ignored.
inline Var cross_entropy(Var logits, const std::vector<int>& labels,
                         const std::vector<unsigned char>* allowed = nullptr) {
  const Tensor& lv = logits.value();
  const std::size_t c = lv.cols(), n = lv.rows();
  if (labels.size() != n) throw DimensionError("cross_entropy: label count does not match logit rows");
  if (allowed && allowed->size() != n * c) throw DimensionError("cross_entropy: mask shape mismatch");
  Tensor probs({n, c});
  double total = 0.0;
  std::size_t counted = 0;
  for (std::size_t r = 0; r < n; ++r) {
    if (labels[r] == kIgnoreLabel) continue;
    if (labels[r] < 0 || static_cast<std::size_t>(labels[r]) >= c) {
      throw DataError("cross_entropy: label " + std::to_string(labels[r]) + " outside [0, " +
                      std::to_string(c) + ")");
    }
    const auto lab = static_cast<std::size_t>(labels[r]);
    if (allowed && !(*allowed)[r * c + lab]) throw DataError("cross_entropy: label on a masked position");
    double mx = -INFINITY;
    for (std::size_t j = 0; j < c; ++j)
      if (!allowed || (*allowed)[r * c + j]) mx = std::max(mx, lv[r * c + j]);
    double z = 0.0;
    for (std::size_t j = 0; j < c; ++j) {
      if (allowed && !(*allowed)[r * c + j]) continue;
      const double e = std::exp(lv[r * c + j] - mx);
      probs[r * c + j] = e;
      z += e;
    }
    for (std::size_t j = 0; j < c; ++j) probs[r * c + j] /= z;
    total += -(lv[r * c + lab] - mx - std::log(z));
    ++counted;
  }
  const double inv = counted ? 1.0 / static_cast<double>(counted) : 0.0;
  return logits.tape->record(
      Tensor::scalar(total * inv), {logits},
      [l = logits.id, labels, probs = std::move(probs), inv, c](Tape& t, std::size_t self) {
        const double g = t.grad(self)[0] * inv;
        auto& gl = t.grad(l);
        for (std::size_t r = 0; r < labels.size(); ++r) {
          if (labels[r] == kIgnoreLabel) continue;
          for (std::size_t j = 0; j < c; ++j) gl[r * c + j] += g * probs[r * c + j];
          gl[r * c + static_cast<std::size_t>(labels[r])] -= g;
        }
      });
}

// ---------------------------------------------------------------------------
// Attention

struct AttentionGeometry {
  std::size_t batch = 0;
  std::size_t seq_len = 0;
  std::size_t heads = 1;
};

/// Multi-head scaled dot-product attention over projected q, k, v, each
/// [batch*seq_len x d]. Keys with key_mask == 0 are excluded from every
/// softmax (additive -inf masking); they contribute exactly nothing.
inline Var attention(Var q, Var k, Var v, const std::vector<int>& key_mask, AttentionGeometry geo) {
  const Tensor& qv = q.value();
  const Tensor& kv = k.value();
  const Tensor& vv = v.value();
  detail::require_same_shape("attention", qv, kv);
  detail::require_same_shape("attention", qv, vv);
  const std::size_t B = geo.batch, L = geo.seq_len, H = geo.heads, d = qv.cols();
  if (qv.rows() != B * L) throw DimensionError("attention: rows do not equal batch*seq_len");
  if (key_mask.size() != B * L) throw DimensionError("attention: mask shape mismatch");
  if (H == 0 || d % H != 0) throw DimensionError("attention: hidden size not divisible by heads");
  const std::size_t dh = d / H;
  const double sc = 1.0 / std::sqrt(static_cast<double>(dh));
  // probs laid out [B, H, L(query), L(key)]
  Tensor probs({B, H, L, L});
  Tensor out({B * L, d});
  std::vector<double> row(L);
  for (std::size_t b = 0; b < B; ++b) {
    const int* mask = key_mask.data() + b * L;
    for (std::size_t h = 0; h < H; ++h) {
      for (std::size_t i = 0; i < L; ++i) {
        const double* qi = qv.data().data() + (b * L + i) * d + h * dh;
        double mx = -INFINITY;
        for (std::size_t j = 0; j < L; ++j) {
          if (!mask[j]) continue;
          const double* kj = kv.data().data() + (b * L + j) * d + h * dh;
          double s = 0.0;
          for (std::size_t p = 0; p < dh; ++p) s += qi[p] * kj[p];
          row[j] = s * sc;
          mx = std::max(mx, row[j]);
        }
        double z = 0.0;
        double* pr = probs.data().data() + ((b * H + h) * L + i) * L;
        for (std::size_t j = 0; j < L; ++j) {
          if (!mask[j]) continue;
          pr[j] = std::exp(row[j] - mx);
          z += pr[j];
        }
        double* oi = out.data().data() + (b * L + i) * d + h * dh;
        for (std::size_t j = 0; j < L; ++j) {
          if (!mask[j]) continue;
          pr[j] /= z;
          const double* vj = vv.data().data() + (b * L + j) * d + h * dh;
          for (std::size_t p = 0; p < dh; ++p) oi[p] += pr[j] * vj[p];
        }
      }
    }
  }
  return q.tape->record(
      std::move(out), {q, k, v},
      [qid = q.id, kid = k.id, vid = v.id, probs = std::move(probs), B, L, H, d, dh, sc](Tape& t,
                                                                                        std::size_t self) {
        const Tensor& g = t.grad(self);
        const Tensor& qv = t.value(qid);
        const Tensor& kv = t.value(kid);
        const Tensor& vv = t.value(vid);
        const bool need_q = t.requires_grad(qid), need_k = t.requires_grad(kid), need_v = t.requires_grad(vid);
        double* gq = need_q ? t.grad(qid).data().data() : nullptr;
        double* gk = need_k ? t.grad(kid).data().data() : nullptr;
        double* gv = need_v ? t.grad(vid).data().data() : nullptr;
        std::vector<double> dp(L);
        for (std::size_t b = 0; b < B; ++b) {
          for (std::size_t h = 0; h < H; ++h) {
            for (std::size_t i = 0; i < L; ++i) {
              const double* pr = probs.data().data() + ((b * H + h) * L + i) * L;
              const double* gi = g.data().data() + (b * L + i) * d + h * dh;
              double dot = 0.0;
              for (std::size_t j = 0; j < L; ++j) {
                if (pr[j] == 0.0) {
                  dp[j] = 0.0;
                  continue;
                }
                const double* vj = vv.data().data() + (b * L + j) * d + h * dh;
                double s = 0.0;
                for (std::size_t p = 0; p < dh; ++p) s += gi[p] * vj[p];
                dp[j] = s;
                dot += s * pr[j];
                if (gv) {
                  double* gvj = gv + (b * L + j) * d + h * dh;
                  for (std::size_t p = 0; p < dh; ++p) gvj[p] += pr[j] * gi[p];
                }
              }
              if (!gq && !gk) continue;
              const double* qi = qv.data().data() + (b * L + i) * d + h * dh;
              for (std::size_t j = 0; j < L; ++j) {
                if (pr[j] == 0.0) continue;
                const double ds = pr[j] * (dp[j] - dot) * sc;
                const double* kj = kv.data().data() + (b * L + j) * d + h * dh;
                if (gq) {
                  double* gqi = gq + (b * L + i) * d + h * dh;
                  for (std::size_t p = 0; p < dh; ++p) gqi[p] += ds * kj[p];
                }
                if (gk) {
                  double* gkj = gk + (b * L + j) * d + h * dh;
                  for (std::size_t p = 0; p < dh; ++p) gkj[p] += ds * qi[p];
                }
              }
            }
          }
        }
      });
}

/// Deterministic truncated-normal initializer (resample outside 2 std).
inline Tensor truncated_normal(const Shape& shape, double stddev, std::mt19937_64& rng) {
  Tensor t(shape);
  std::normal_distribution<double> nd(0.0, 1.0);
  for (double& v : t.storage()) {
    double z;
    do {
      z = nd(rng);
    } while (std::abs(z) > 2.0);
    v = z * stddev;
  }
  return t;
}

}  // namespace skillnet
