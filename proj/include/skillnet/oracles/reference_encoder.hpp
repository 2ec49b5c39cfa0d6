// SPDX-License-Identifier: Apache-2.0
//
// Plain-loop post-LN Transformer encoder with one FFN per layer. It shares no
// code with the taped encoder and serves as an independent reference for it.
#pragma once

#include <cmath>
#include <string>
#include <vector>

#include "skillnet/model.hpp"

namespace skillnet::oracles {

struct ReferenceLayer {
  std::vector<double> wq, bq, wk, wv, bv, wo, bo, ln1_g, ln1_b;
  std::vector<double> w1, b1, w2, b2, ln2_g, ln2_b;
};

struct ReferenceEncoder {
  std::size_t hidden = 0, heads = 0, ffn_dim = 0;
  double eps = 1e-12;
  std::vector<double> tok, pos, seg, emb_g, emb_b;
  std::vector<ReferenceLayer> layers;

  /// Copies a model's weights; modular layers take their FFN from `skill`.
  static ReferenceEncoder from_model(const Model& m, const std::string& skill) {
    auto v = [&](const std::string& n) { return m.param(n).value.storage(); };
    ReferenceEncoder r;
    r.hidden = m.config.hidden_dim;
    r.heads = m.config.num_heads;
    r.ffn_dim = m.config.ffn_dim;
    r.eps = m.config.ln_eps;
    r.tok = v("embeddings.token");
    r.pos = v("embeddings.position");
    r.seg = v("embeddings.segment");
    r.emb_g = v("embeddings.ln.gain");
    r.emb_b = v("embeddings.ln.bias");
    for (std::size_t l = 0; l < m.config.num_layers; ++l) {
      const std::string p = "layer." + std::to_string(l) + ".";
      const std::string f = m.config.is_modular_layer(l) ? p + "ffn." + skill + "." : p + "ffn.";
      ReferenceLayer L;
      L.wq = v(p + "attention.wq");
      L.bq = v(p + "attention.bq");
      L.wk = v(p + "attention.wk");
      L.wv = v(p + "attention.wv");
      L.bv = v(p + "attention.bv");
      L.wo = v(p + "attention.wo");
      L.bo = v(p + "attention.bo");
      L.ln1_g = v(p + "attention.ln.gain");
      L.ln1_b = v(p + "attention.ln.bias");
      L.w1 = v(f + "w1");
      L.b1 = v(f + "b1");
      L.w2 = v(f + "w2");
      L.b2 = v(f + "b2");
      L.ln2_g = v(p + "ffn.ln.gain");
      L.ln2_b = v(p + "ffn.ln.bias");
      r.layers.push_back(std::move(L));
    }
    return r;
  }

  // y[n x out] = x[n x in] * w[in x out] + b
  static std::vector<double> linear(const std::vector<double>& x, std::size_t n, std::size_t in,
                                    const std::vector<double>& w, const std::vector<double>* b, std::size_t out) {
    std::vector<double> y(n * out);
    for (std::size_t r = 0; r < n; ++r)
      for (std::size_t j = 0; j < out; ++j) {
        double s = 0.0;
        for (std::size_t p = 0; p < in; ++p) s += x[r * in + p] * w[p * out + j];
        y[r * out + j] = s + (b ? (*b)[j] : 0.0);
      }
    return y;
  }

  void norm(std::vector<double>& x, std::size_t n, const std::vector<double>& g, const std::vector<double>& b) const {
    const std::size_t d = hidden;
    for (std::size_t r = 0; r < n; ++r) {
      double mean = 0.0, var = 0.0;
      for (std::size_t j = 0; j < d; ++j) mean += x[r * d + j];
      mean /= static_cast<double>(d);
      for (std::size_t j = 0; j < d; ++j) var += (x[r * d + j] - mean) * (x[r * d + j] - mean);
      var /= static_cast<double>(d);
      for (std::size_t j = 0; j < d; ++j) x[r * d + j] = (x[r * d + j] - mean) / std::sqrt(var + eps) * g[j] + b[j];
    }
  }

  std::vector<double> run(std::size_t batch, std::size_t seq, const std::vector<int>& tokens,
                          const std::vector<int>& segments, const std::vector<int>& mask) const {
    const std::size_t d = hidden, n = batch * seq, dh = d / heads;
    std::vector<double> x(n * d);
    for (std::size_t b = 0; b < batch; ++b)
      for (std::size_t i = 0; i < seq; ++i) {
        const std::size_t r = b * seq + i;
        for (std::size_t j = 0; j < d; ++j)
          x[r * d + j] = tok[static_cast<std::size_t>(tokens[r]) * d + j] + pos[i * d + j] +
                         seg[static_cast<std::size_t>(segments[r]) * d + j];
      }
    norm(x, n, emb_g, emb_b);
    for (const auto& L : layers) {
      const auto q = linear(x, n, d, L.wq, &L.bq, d);
      const auto k = linear(x, n, d, L.wk, nullptr, d);
      const auto v = linear(x, n, d, L.wv, &L.bv, d);
      std::vector<double> ctx(n * d, 0.0);
      for (std::size_t b = 0; b < batch; ++b)
        for (std::size_t h = 0; h < heads; ++h)
          for (std::size_t i = 0; i < seq; ++i) {
            std::vector<double> score(seq, -INFINITY);
            double mx = -INFINITY;
            for (std::size_t j = 0; j < seq; ++j) {
              if (!mask[b * seq + j]) continue;
              double s = 0.0;
              for (std::size_t p = 0; p < dh; ++p) s += q[(b * seq + i) * d + h * dh + p] * k[(b * seq + j) * d + h * dh + p];
              score[j] = s / std::sqrt(static_cast<double>(dh));
              mx = std::max(mx, score[j]);
            }
            double z = 0.0;
            for (std::size_t j = 0; j < seq; ++j) z += mask[b * seq + j] ? std::exp(score[j] - mx) : 0.0;
            for (std::size_t j = 0; j < seq; ++j) {
              if (!mask[b * seq + j]) continue;
              const double pj = std::exp(score[j] - mx) / z;
              for (std::size_t p = 0; p < dh; ++p) ctx[(b * seq + i) * d + h * dh + p] += pj * v[(b * seq + j) * d + h * dh + p];
            }
          }
      const auto o = linear(ctx, n, d, L.wo, &L.bo, d);
      for (std::size_t i = 0; i < n * d; ++i) x[i] += o[i];
      norm(x, n, L.ln1_g, L.ln1_b);
      auto h1 = linear(x, n, d, L.w1, &L.b1, ffn_dim);
      for (double& u : h1) u = 0.5 * u * (1.0 + std::tanh(std::sqrt(2.0 / M_PI) * (u + 0.044715 * u * u * u)));
      const auto f = linear(h1, n, ffn_dim, L.w2, &L.b2, d);
      for (std::size_t i = 0; i < n * d; ++i) x[i] += f[i];
      norm(x, n, L.ln2_g, L.ln2_b);
    }
    return x;
  }
};

}  // namespace skillnet::oracles
