#pragma once

// Straight-line reimplementation of the network forward pass used as a test
// oracle. It reads the flat parameter vector sequentially in the documented
// tensor order and evaluates one position at a time with nested vectors, so it
// shares no code with the production forward pass.

#include <cmath>
#include <cstddef>
#include <vector>

#include "dft/model.hpp"

namespace dft::testing {

using Vec = std::vector<double>;
using Mat = std::vector<Vec>;  // row-major, rows x cols

struct RefLayer {
  Vec ln1_g, ln1_b;
  Mat wq, wk, wv, wo;
  Vec ln2_g, ln2_b;
  Mat w1;
  Vec b1;
  Mat w2;
  Vec b2;
};

struct RefModel {
  std::size_t K = 0, d = 0;
  Mat tok, pos;
  std::vector<RefLayer> layers;
  Vec lnf_g, lnf_b;

  explicit RefModel(const ModelParams& p) {
    K = p.config().vocab;
    d = p.config().width;
    const std::size_t f = 4 * d;
    auto flat = p.flat();
    std::size_t at = 0;
    auto vec = [&](std::size_t n) {
      Vec v(flat.begin() + static_cast<std::ptrdiff_t>(at), flat.begin() + static_cast<std::ptrdiff_t>(at + n));
      at += n;
      return v;
    };
    auto mat = [&](std::size_t r, std::size_t c) {
      Mat m;
      for (std::size_t i = 0; i < r; ++i) m.push_back(vec(c));
      return m;
    };
    tok = mat(K, d);
    pos = mat(ModelConfig::kMaxPositions, d);
    for (std::size_t l = 0; l < p.config().layers; ++l) {
      RefLayer L;
      L.ln1_g = vec(d);
      L.ln1_b = vec(d);
      L.wq = mat(d, d);
      L.wk = mat(d, d);
      L.wv = mat(d, d);
      L.wo = mat(d, d);
      L.ln2_g = vec(d);
      L.ln2_b = vec(d);
      L.w1 = mat(d, f);
      L.b1 = vec(f);
      L.w2 = mat(f, d);
      L.b2 = vec(d);
      layers.push_back(std::move(L));
    }
    lnf_g = vec(d);
    lnf_b = vec(d);
  }

  static Vec layer_norm(const Vec& x, const Vec& g, const Vec& b) {
    double mean = 0;
    for (double v : x) mean += v;
    mean /= static_cast<double>(x.size());
    double var = 0;
    for (double v : x) var += (v - mean) * (v - mean);
    var /= static_cast<double>(x.size());
    Vec y(x.size());
    for (std::size_t i = 0; i < x.size(); ++i) y[i] = g[i] * (x[i] - mean) / std::sqrt(var + 1e-5) + b[i];
    return y;
  }

  // y = x^T M (x has M.size() entries)
  static Vec vecmat(const Vec& x, const Mat& m) {
    Vec y(m[0].size(), 0.0);
    for (std::size_t i = 0; i < m.size(); ++i)
      for (std::size_t j = 0; j < y.size(); ++j) y[j] += x[i] * m[i][j];
    return y;
  }

  static double gelu(double x) { return 0.5 * x * (1.0 + std::tanh(std::sqrt(2.0 / M_PI) * (x + 0.044715 * x * x * x))); }

  // Logits for the next token after `ctx`.
  Vec logits(const std::vector<TokenId>& ctx) const {
    Mat h;
    for (std::size_t t = 0; t < ctx.size(); ++t) {
      Vec x(d);
      for (std::size_t i = 0; i < d; ++i) x[i] = tok[ctx[t]][i] + pos[t][i];
      h.push_back(x);
    }
    for (const auto& L : layers) {
      Mat q, k, v;
      for (const auto& x : h) {
        Vec a = layer_norm(x, L.ln1_g, L.ln1_b);
        q.push_back(vecmat(a, L.wq));
        k.push_back(vecmat(a, L.wk));
        v.push_back(vecmat(a, L.wv));
      }
      Mat next = h;
      for (std::size_t t = 0; t < h.size(); ++t) {
        Vec w(t + 1);
        double hi = -1e300;
        for (std::size_t s = 0; s <= t; ++s) {
          double dot = 0;
          for (std::size_t i = 0; i < d; ++i) dot += q[t][i] * k[s][i];
          w[s] = dot / std::sqrt(static_cast<double>(d));
          hi = std::max(hi, w[s]);
        }
        double z = 0;
        for (double& e : w) z += (e = std::exp(e - hi));
        Vec o(d, 0.0);
        for (std::size_t s = 0; s <= t; ++s)
          for (std::size_t i = 0; i < d; ++i) o[i] += w[s] / z * v[s][i];
        Vec proj = vecmat(o, L.wo);
        for (std::size_t i = 0; i < d; ++i) next[t][i] += proj[i];
      }
      for (auto& x : next) {
        Vec b = layer_norm(x, L.ln2_g, L.ln2_b);
        Vec hid = vecmat(b, L.w1);
        for (std::size_t j = 0; j < hid.size(); ++j) hid[j] = gelu(hid[j] + L.b1[j]);
        Vec out = vecmat(hid, L.w2);
        for (std::size_t i = 0; i < d; ++i) x[i] += out[i] + L.b2[i];
      }
      h = next;
    }
    Vec last = layer_norm(h.back(), lnf_g, lnf_b);
    Vec out(K, 0.0);
    for (std::size_t kk = 0; kk < K; ++kk)
      for (std::size_t i = 0; i < d; ++i) out[kk] += last[i] * tok[kk][i];
    return out;
  }

  double logprob(const std::vector<TokenId>& x, const std::vector<TokenId>& y) const {
    std::vector<TokenId> ctx = x;
    double total = 0;
    for (TokenId t : y) {
      Vec l = logits(ctx);
      double hi = -1e300;
      for (double v : l) hi = std::max(hi, v);
      double z = 0;
      for (double v : l) z += std::exp(v - hi);
      total += l[t] - hi - std::log(z);
      ctx.push_back(t);
    }
    return total;
  }
};

// Every coordinate drawn N(0, scale^2), including LayerNorm gains and biases.
inline ModelParams fully_random(ModelConfig cfg, std::uint64_t seed, double scale = 0.3) {
  ModelParams p(cfg);
  std::mt19937_64 eng(seed);
  for (double& v : p.flat()) v = scale * standard_normal(eng);
  return p;
}

}  // namespace dft::testing
