#pragma once

// A small pre-LayerNorm decoder-only transformer with tied input/output
// embeddings, single-head causal attention and a GELU feed-forward block.
// Forward and reverse passes are written out by hand in double precision.

#include <algorithm>
#include <array>
#include <bit>
#include <cmath>
#include <cstdint>
#include <cstring>
#include <fstream>
#include <random>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include "dft/core.hpp"

namespace dft {

struct ModelConfig {
  std::size_t vocab = 2;
  std::size_t width = 16;
  std::size_t layers = 1;

  static constexpr std::size_t kMaxPositions = 48;
  static constexpr double kLayerNormEps = 1e-5;

  std::size_t ff() const { return 4 * width; }

  friend bool operator==(const ModelConfig&, const ModelConfig&) = default;
};

// Offsets of every tensor inside the flat parameter vector.
struct LayerOffsets {
  std::size_t ln1_g, ln1_b, wq, wk, wv, wo, ln2_g, ln2_b, w1, b1, w2, b2;
};

struct ParamLayout {
  std::size_t tok_emb = 0;
  std::size_t pos_emb = 0;
  std::vector<LayerOffsets> layers;
  std::size_t lnf_g = 0;
  std::size_t lnf_b = 0;
  std::size_t total = 0;

  explicit ParamLayout(const ModelConfig& cfg) {
    const std::size_t d = cfg.width;
    const std::size_t f = cfg.ff();
    std::size_t at = 0;
    auto take = [&at](std::size_t n) {
      std::size_t off = at;
      at += n;
      return off;
    };
    tok_emb = take(cfg.vocab * d);
    pos_emb = take(ModelConfig::kMaxPositions * d);
    for (std::size_t l = 0; l < cfg.layers; ++l) {
      LayerOffsets o{};
      o.ln1_g = take(d);
      o.ln1_b = take(d);
      o.wq = take(d * d);
      o.wk = take(d * d);
      o.wv = take(d * d);
      o.wo = take(d * d);
      o.ln2_g = take(d);
      o.ln2_b = take(d);
      o.w1 = take(d * f);
      o.b1 = take(f);
      o.w2 = take(f * d);
      o.b2 = take(d);
      layers.push_back(o);
    }
    lnf_g = take(d);
    lnf_b = take(d);
    total = at;
  }
};

using Gradient = std::vector<double>;

class ModelParams {
 public:
  ModelParams() = default;
  explicit ModelParams(ModelConfig cfg) : cfg_(cfg), layout_(cfg), data_(layout_.total, 0.0) {
    if (cfg.vocab < 1) throw InputError("vocabulary size must be at least 1");
    if (cfg.width < 1) throw InputError("width must be at least 1");
  }

  // All-zero parameters: every context yields uniform next-token probabilities.
  static ModelParams zeros(ModelConfig cfg) { return ModelParams(cfg); }

  // Gaussian weights with unit LayerNorm gains and zero biases.
  static ModelParams random(ModelConfig cfg, std::uint64_t seed, double scale = 0.1) {
    ModelParams p(cfg);
    std::mt19937_64 eng(seed);
    for (double& v : p.data_) v = scale * standard_normal(eng);
    const std::size_t d = cfg.width;
    auto fill = [&](std::size_t off, std::size_t n, double value) {
      std::fill_n(p.data_.begin() + static_cast<std::ptrdiff_t>(off), n, value);
    };
    for (const auto& o : p.layout_.layers) {
      fill(o.ln1_g, d, 1.0);
      fill(o.ln1_b, d, 0.0);
      fill(o.ln2_g, d, 1.0);
      fill(o.ln2_b, d, 0.0);
      fill(o.b1, cfg.ff(), 0.0);
      fill(o.b2, d, 0.0);
    }
    fill(p.layout_.lnf_g, d, 1.0);
    fill(p.layout_.lnf_b, d, 0.0);
    return p;
  }

  const ModelConfig& config() const { return cfg_; }
  const ParamLayout& layout() const { return layout_; }
  std::size_t size() const { return data_.size(); }

  std::span<double> flat() { return data_; }
  std::span<const double> flat() const { return data_; }

  const double* at(std::size_t offset) const { return data_.data() + offset; }
  double* at(std::size_t offset) { return data_.data() + offset; }

  Gradient zero_gradient() const { return Gradient(data_.size(), 0.0); }

 private:
  ModelConfig cfg_{};
  ParamLayout layout_{ModelConfig{}};
  std::vector<double> data_;
};

// ---------------------------------------------------------------------------
// forward / backward

namespace detail {

inline constexpr double kGeluC = 0.7978845608028654;  // sqrt(2/pi)

inline double gelu(double x) {
  double u = kGeluC * (x + 0.044715 * x * x * x);
  return 0.5 * x * (1.0 + std::tanh(u));
}

inline double gelu_grad(double x) {
  double u = kGeluC * (x + 0.044715 * x * x * x);
  double t = std::tanh(u);
  return 0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * kGeluC * (1.0 + 3.0 * 0.044715 * x * x);
}

// out[T x m] = in[T x n] * w[n x m] (+ bias)
inline void matmul(const double* in, const double* w, double* out, std::size_t rows, std::size_t n,
                   std::size_t m, const double* bias = nullptr) {
  for (std::size_t t = 0; t < rows; ++t) {
    double* o = out + t * m;
    for (std::size_t j = 0; j < m; ++j) o[j] = bias ? bias[j] : 0.0;
    const double* x = in + t * n;
    for (std::size_t i = 0; i < n; ++i) {
      const double xi = x[i];
      if (xi == 0.0) continue;
      const double* wr = w + i * m;
      for (std::size_t j = 0; j < m; ++j) o[j] += xi * wr[j];
    }
  }
}

// Given dout[T x m] for out = in * w: din += dout * w^T, dw += in^T * dout.
inline void matmul_backward(const double* in, const double* w, const double* dout, double* din, double* dw,
                            std::size_t rows, std::size_t n, std::size_t m) {
  for (std::size_t t = 0; t < rows; ++t) {
    const double* go = dout + t * m;
    const double* x = in + t * n;
    double* gx = din + t * n;
    for (std::size_t i = 0; i < n; ++i) {
      const double* wr = w + i * m;
      double* gw = dw + i * m;
      double acc = 0.0;
      const double xi = x[i];
      for (std::size_t j = 0; j < m; ++j) {
        acc += go[j] * wr[j];
        gw[j] += xi * go[j];
      }
      gx[i] += acc;
    }
  }
}

struct LayerNormCache {
  std::vector<double> xhat;  // T x d
  std::vector<double> rstd;  // T
};

inline void layer_norm(const double* x, const double* g, const double* b, double* y, LayerNormCache& c,
                       std::size_t rows, std::size_t d) {
  c.xhat.assign(rows * d, 0.0);
  c.rstd.assign(rows, 0.0);
  for (std::size_t t = 0; t < rows; ++t) {
    const double* xr = x + t * d;
    double mean = 0.0;
    for (std::size_t i = 0; i < d; ++i) mean += xr[i];
    mean /= static_cast<double>(d);
    double var = 0.0;
    for (std::size_t i = 0; i < d; ++i) var += (xr[i] - mean) * (xr[i] - mean);
    var /= static_cast<double>(d);
    double rstd = 1.0 / std::sqrt(var + ModelConfig::kLayerNormEps);
    c.rstd[t] = rstd;
    for (std::size_t i = 0; i < d; ++i) {
      double xh = (xr[i] - mean) * rstd;
      c.xhat[t * d + i] = xh;
      y[t * d + i] = g[i] * xh + b[i];
    }
  }
}

inline void layer_norm_backward(const double* dy, const double* g, const LayerNormCache& c, double* dx,
                                double* dg, double* db, std::size_t rows, std::size_t d) {
  std::vector<double> dxhat(d);
  for (std::size_t t = 0; t < rows; ++t) {
    const double* dyr = dy + t * d;
    const double* xh = c.xhat.data() + t * d;
    double mean_dxhat = 0.0;
    double mean_dxhat_xhat = 0.0;
    for (std::size_t i = 0; i < d; ++i) {
      dg[i] += dyr[i] * xh[i];
      db[i] += dyr[i];
      dxhat[i] = dyr[i] * g[i];
      mean_dxhat += dxhat[i];
      mean_dxhat_xhat += dxhat[i] * xh[i];
    }
    mean_dxhat /= static_cast<double>(d);
    mean_dxhat_xhat /= static_cast<double>(d);
    for (std::size_t i = 0; i < d; ++i) {
      dx[t * d + i] += c.rstd[t] * (dxhat[i] - mean_dxhat - xh[i] * mean_dxhat_xhat);
    }
  }
}

struct BlockCache {
  std::vector<double> x_in;  // residual stream entering the block
  LayerNormCache ln1;
  std::vector<double> a, q, k, v, att, o;
  std::vector<double> x_mid;  // after attention residual
  LayerNormCache ln2;
  std::vector<double> bn, hpre, h;
};

struct ForwardCache {
  Tokens tokens;
  std::vector<BlockCache> blocks;
  std::vector<double> x_final;
  LayerNormCache lnf;
  std::vector<double> hidden;  // T x d, post final LayerNorm
};

inline void check_finite_activations(std::span<const double> xs, std::size_t layer) {
  if (!all_finite(xs)) throw NumericError("non-finite activation in layer " + std::to_string(layer));
}

}  // namespace detail

// Runs the network over `tokens`, filling `cache` with the final hidden states
// (post LayerNorm) and everything the reverse pass needs.
inline void forward(const ModelParams& params, std::span<const TokenId> tokens, detail::ForwardCache& cache) {
  using namespace detail;
  const auto& cfg = params.config();
  const auto& lay = params.layout();
  const std::size_t d = cfg.width;
  const std::size_t f = cfg.ff();
  const std::size_t rows = tokens.size();
  if (rows == 0) throw InputError("context must be non-empty");
  if (rows > ModelConfig::kMaxPositions) {
    throw InputError("sequence of length " + std::to_string(rows) + " exceeds " +
                     std::to_string(ModelConfig::kMaxPositions) + " positions");
  }
  check_tokens(tokens, cfg.vocab);

  cache.tokens.assign(tokens.begin(), tokens.end());
  cache.blocks.resize(cfg.layers);

  std::vector<double> x(rows * d);
  for (std::size_t t = 0; t < rows; ++t) {
    const double* e = params.at(lay.tok_emb + tokens[t] * d);
    const double* p = params.at(lay.pos_emb + t * d);
    for (std::size_t i = 0; i < d; ++i) x[t * d + i] = e[i] + p[i];
  }

  const double scale = 1.0 / std::sqrt(static_cast<double>(d));
  for (std::size_t l = 0; l < cfg.layers; ++l) {
    const auto& o = lay.layers[l];
    auto& c = cache.blocks[l];
    c.x_in = x;
    c.a.assign(rows * d, 0.0);
    layer_norm(x.data(), params.at(o.ln1_g), params.at(o.ln1_b), c.a.data(), c.ln1, rows, d);
    c.q.assign(rows * d, 0.0);
    c.k.assign(rows * d, 0.0);
    c.v.assign(rows * d, 0.0);
    matmul(c.a.data(), params.at(o.wq), c.q.data(), rows, d, d);
    matmul(c.a.data(), params.at(o.wk), c.k.data(), rows, d, d);
    matmul(c.a.data(), params.at(o.wv), c.v.data(), rows, d, d);

    c.att.assign(rows * rows, 0.0);
    for (std::size_t t = 0; t < rows; ++t) {
      double* row = c.att.data() + t * rows;
      for (std::size_t s = 0; s <= t; ++s) {
        double dot = 0.0;
        for (std::size_t i = 0; i < d; ++i) dot += c.q[t * d + i] * c.k[s * d + i];
        row[s] = dot * scale;
      }
      softmax_inplace(std::span<double>(row, t + 1));
    }
    c.o.assign(rows * d, 0.0);
    for (std::size_t t = 0; t < rows; ++t) {
      for (std::size_t s = 0; s <= t; ++s) {
        const double w = c.att[t * rows + s];
        for (std::size_t i = 0; i < d; ++i) c.o[t * d + i] += w * c.v[s * d + i];
      }
    }
    std::vector<double> proj(rows * d);
    matmul(c.o.data(), params.at(o.wo), proj.data(), rows, d, d);
    for (std::size_t i = 0; i < x.size(); ++i) x[i] += proj[i];
    c.x_mid = x;

    c.bn.assign(rows * d, 0.0);
    layer_norm(x.data(), params.at(o.ln2_g), params.at(o.ln2_b), c.bn.data(), c.ln2, rows, d);
    c.hpre.assign(rows * f, 0.0);
    matmul(c.bn.data(), params.at(o.w1), c.hpre.data(), rows, d, f, params.at(o.b1));
    c.h.resize(rows * f);
    for (std::size_t i = 0; i < c.h.size(); ++i) c.h[i] = gelu(c.hpre[i]);
    matmul(c.h.data(), params.at(o.w2), proj.data(), rows, f, d, params.at(o.b2));
    for (std::size_t i = 0; i < x.size(); ++i) x[i] += proj[i];
    check_finite_activations(x, l);
  }

  cache.x_final = x;
  cache.hidden.assign(rows * d, 0.0);
  layer_norm(x.data(), params.at(lay.lnf_g), params.at(lay.lnf_b), cache.hidden.data(), cache.lnf, rows, d);
  check_finite_activations(cache.hidden, cfg.layers);
}

// logits[k] = hidden[t] . W_k for the tied embedding matrix W.
inline std::vector<double> logits_at(const ModelParams& params, const detail::ForwardCache& cache, std::size_t t) {
  const auto& cfg = params.config();
  const std::size_t d = cfg.width;
  std::vector<double> out(cfg.vocab, 0.0);
  const double* h = cache.hidden.data() + t * d;
  for (std::size_t k = 0; k < cfg.vocab; ++k) {
    const double* e = params.at(params.layout().tok_emb + k * d);
    double acc = 0.0;
    for (std::size_t i = 0; i < d; ++i) acc += h[i] * e[i];
    out[k] = acc;
  }
  return out;
}

// Accumulates into `grad` the parameter gradient given dL/dlogits (rows x vocab).
inline void backward(const ModelParams& params, const detail::ForwardCache& cache, std::span<const double> dlogits,
                     Gradient& grad) {
  using namespace detail;
  const auto& cfg = params.config();
  const auto& lay = params.layout();
  const std::size_t d = cfg.width;
  const std::size_t f = cfg.ff();
  const std::size_t K = cfg.vocab;
  const std::size_t rows = cache.tokens.size();

  std::vector<double> dh(rows * d, 0.0);
  for (std::size_t t = 0; t < rows; ++t) {
    const double* gl = dlogits.data() + t * K;
    const double* h = cache.hidden.data() + t * d;
    for (std::size_t k = 0; k < K; ++k) {
      const double g = gl[k];
      if (g == 0.0) continue;
      const double* e = params.at(lay.tok_emb + k * d);
      double* ge = grad.data() + lay.tok_emb + k * d;
      for (std::size_t i = 0; i < d; ++i) {
        dh[t * d + i] += g * e[i];
        ge[i] += g * h[i];
      }
    }
  }

  std::vector<double> dx(rows * d, 0.0);
  layer_norm_backward(dh.data(), params.at(lay.lnf_g), cache.lnf, dx.data(), grad.data() + lay.lnf_g,
                      grad.data() + lay.lnf_b, rows, d);

  const double scale = 1.0 / std::sqrt(static_cast<double>(d));
  for (std::size_t l = cfg.layers; l-- > 0;) {
    const auto& o = lay.layers[l];
    const auto& c = cache.blocks[l];

    // feed-forward: x_out = x_mid + gelu(LN2(x_mid) W1 + b1) W2 + b2
    std::vector<double> dhid(rows * f, 0.0);
    matmul_backward(c.h.data(), params.at(o.w2), dx.data(), dhid.data(), grad.data() + o.w2, rows, f, d);
    for (std::size_t t = 0; t < rows; ++t)
      for (std::size_t i = 0; i < d; ++i) grad[o.b2 + i] += dx[t * d + i];
    for (std::size_t i = 0; i < dhid.size(); ++i) dhid[i] *= gelu_grad(c.hpre[i]);
    for (std::size_t t = 0; t < rows; ++t)
      for (std::size_t j = 0; j < f; ++j) grad[o.b1 + j] += dhid[t * f + j];
    std::vector<double> dbn(rows * d, 0.0);
    matmul_backward(c.bn.data(), params.at(o.w1), dhid.data(), dbn.data(), grad.data() + o.w1, rows, d, f);
    std::vector<double> dmid = dx;
    layer_norm_backward(dbn.data(), params.at(o.ln2_g), c.ln2, dmid.data(), grad.data() + o.ln2_g,
                        grad.data() + o.ln2_b, rows, d);

    // attention: x_mid = x_in + softmax(q k^T / sqrt(d)) v Wo
    std::vector<double> dout(rows * d, 0.0);
    matmul_backward(c.o.data(), params.at(o.wo), dmid.data(), dout.data(), grad.data() + o.wo, rows, d, d);
    std::vector<double> dq(rows * d, 0.0), dk(rows * d, 0.0), dv(rows * d, 0.0);
    std::vector<double> datt(rows);
    for (std::size_t t = 0; t < rows; ++t) {
      const double* arow = c.att.data() + t * rows;
      double weighted = 0.0;
      for (std::size_t s = 0; s <= t; ++s) {
        double acc = 0.0;
        for (std::size_t i = 0; i < d; ++i) {
          acc += dout[t * d + i] * c.v[s * d + i];
          dv[s * d + i] += arow[s] * dout[t * d + i];
        }
        datt[s] = acc;
        weighted += arow[s] * acc;
      }
      for (std::size_t s = 0; s <= t; ++s) {
        const double ds = arow[s] * (datt[s] - weighted) * scale;
        if (ds == 0.0) continue;
        for (std::size_t i = 0; i < d; ++i) {
          dq[t * d + i] += ds * c.k[s * d + i];
          dk[s * d + i] += ds * c.q[t * d + i];
        }
      }
    }
    std::vector<double> da(rows * d, 0.0);
    matmul_backward(c.a.data(), params.at(o.wq), dq.data(), da.data(), grad.data() + o.wq, rows, d, d);
    matmul_backward(c.a.data(), params.at(o.wk), dk.data(), da.data(), grad.data() + o.wk, rows, d, d);
    matmul_backward(c.a.data(), params.at(o.wv), dv.data(), da.data(), grad.data() + o.wv, rows, d, d);
    dx = dmid;
    layer_norm_backward(da.data(), params.at(o.ln1_g), c.ln1, dx.data(), grad.data() + o.ln1_g,
                        grad.data() + o.ln1_b, rows, d);
  }

  for (std::size_t t = 0; t < rows; ++t) {
    double* ge = grad.data() + lay.tok_emb + cache.tokens[t] * d;
    double* gp = grad.data() + lay.pos_emb + t * d;
    for (std::size_t i = 0; i < d; ++i) {
      ge[i] += dx[t * d + i];
      gp[i] += dx[t * d + i];
    }
  }
}

// ---------------------------------------------------------------------------
// public model API

inline std::vector<double> token_logits(const ModelParams& params, const TokenSequence& context) {
  detail::ForwardCache cache;
  forward(params, context.ids, cache);
  return logits_at(params, cache, context.size() - 1);
}

namespace detail {

inline void check_pair(const ModelParams& params, const TokenSequence& x, const TokenSequence& y) {
  if (x.empty()) throw InputError("prompt must be non-empty");
  if (y.empty()) throw InputError("answer must be non-empty");
  if (!y.terminated()) throw InputError("answer must end with the end-of-sequence token");
  check_tokens(x.ids, params.config().vocab);
  check_tokens(y.ids, params.config().vocab);
}

inline Tokens joined_context(const TokenSequence& x, const TokenSequence& y) {
  Tokens ctx = x.ids;
  ctx.insert(ctx.end(), y.ids.begin(), y.ids.end() - 1);
  return ctx;
}

// Shared body of sequence_logprob / logprob_grad. When `grad` is non-null the
// gradient of log P(y|x), scaled by `scale`, is added to it.
inline double logprob_impl(const ModelParams& params, const TokenSequence& x, const TokenSequence& y,
                           Gradient* grad, double scale) {
  check_pair(params, x, y);
  const std::size_t K = params.config().vocab;
  const Tokens ctx = joined_context(x, y);
  ForwardCache cache;
  forward(params, ctx, cache);
  const std::size_t first = x.size() - 1;
  std::vector<double> dlogits;
  if (grad) dlogits.assign(ctx.size() * K, 0.0);
  double total = 0.0;
  for (std::size_t j = 0; j < y.size(); ++j) {
    const std::size_t t = first + j;
    auto logits = logits_at(params, cache, t);
    const double lse = log_sum_exp(logits);
    total += logits[y.ids[j]] - lse;
    if (grad) {
      double* gl = dlogits.data() + t * K;
      for (std::size_t k = 0; k < K; ++k) gl[k] = -scale * std::exp(logits[k] - lse);
      gl[y.ids[j]] += scale;
    }
  }
  if (grad) backward(params, cache, dlogits, *grad);
  return total;
}

}  // namespace detail

// log P(y | x): sum over answer positions of the log-softmax entry of the
// realized token. Prompt positions are conditioned on, never scored.
inline double sequence_logprob(const ModelParams& params, const TokenSequence& x, const TokenSequence& y) {
  return detail::logprob_impl(params, x, y, nullptr, 0.0);
}

// Adds scale * d/dtheta log P(y|x) into `grad` and returns log P(y|x).
inline double accumulate_logprob_grad(const ModelParams& params, const TokenSequence& x, const TokenSequence& y,
                                      double scale, Gradient& grad) {
  if (grad.size() != params.size()) throw InputError("gradient buffer does not match parameter layout");
  return detail::logprob_impl(params, x, y, &grad, scale);
}

inline std::pair<double, Gradient> logprob_grad(const ModelParams& params, const TokenSequence& x,
                                                const TokenSequence& y) {
  Gradient g = params.zero_gradient();
  double lp = accumulate_logprob_grad(params, x, y, 1.0, g);
  return {lp, std::move(g)};
}

// ---------------------------------------------------------------------------
// sampling

struct GenConfig {
  double temperature = 0.7;
  std::size_t top_k = 50;  // 0 means unlimited
  double top_p = 1.0;
  std::size_t max_tokens = 8;
  std::uint64_t seed = 0;

  void validate() const {
    if (!(temperature >= 0.0) || !std::isfinite(temperature)) throw InputError("temperature must be >= 0");
    if (!(top_p > 0.0 && top_p <= 1.0)) throw InputError("top_p must lie in (0, 1]");
    if (max_tokens < 1) throw InputError("max_tokens must be positive");
  }
};

// Next-token distribution after temperature scaling, top-k truncation and
// top-p truncation, renormalized. Temperature 0 yields a one-hot argmax.
inline std::vector<double> truncated_distribution(std::span<const double> logits, const GenConfig& cfg) {
  const std::size_t K = logits.size();
  std::vector<double> probs(K, 0.0);
  if (cfg.temperature == 0.0) {
    probs[static_cast<std::size_t>(std::max_element(logits.begin(), logits.end()) - logits.begin())] = 1.0;
    return probs;
  }
  for (std::size_t k = 0; k < K; ++k) probs[k] = logits[k] / cfg.temperature;
  softmax_inplace(probs);

  std::vector<std::size_t> order(K);
  for (std::size_t k = 0; k < K; ++k) order[k] = k;
  std::stable_sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) { return probs[a] > probs[b]; });

  std::size_t keep = K;
  if (cfg.top_k > 0) keep = std::min(keep, cfg.top_k);
  if (cfg.top_p < 1.0) {
    double mass = 0.0;
    for (std::size_t r = 0; r < keep; ++r) {
      mass += probs[order[r]];
      if (mass >= cfg.top_p) {
        keep = r + 1;
        break;
      }
    }
  }
  std::vector<double> out(K, 0.0);
  double total = 0.0;
  for (std::size_t r = 0; r < keep; ++r) total += probs[order[r]];
  for (std::size_t r = 0; r < keep; ++r) out[order[r]] = probs[order[r]] / total;
  return out;
}

template <typename Engine>
TokenId draw_token(std::span<const double> probs, Engine& eng) {
  const double u = uniform01(eng);
  double acc = 0.0;
  std::size_t last = 0;
  for (std::size_t k = 0; k < probs.size(); ++k) {
    if (probs[k] <= 0.0) continue;
    last = k;
    acc += probs[k];
    if (u < acc) return static_cast<TokenId>(k);
  }
  return static_cast<TokenId>(last);
}

// Samples an answer for `prompt`. At most max_tokens tokens are produced; an
// answer that reaches the budget without the terminator gets one appended in
// its last slot.
inline TokenSequence sample(const ModelParams& params, const TokenSequence& prompt_seq, const GenConfig& cfg) {
  cfg.validate();
  if (prompt_seq.empty()) throw InputError("prompt must be non-empty");
  check_tokens(prompt_seq.ids, params.config().vocab);
  const std::size_t room = ModelConfig::kMaxPositions + 1 - prompt_seq.size();
  const std::size_t budget = std::min(cfg.max_tokens, room);
  if (budget == 0) throw InputError("prompt leaves no room for an answer");

  std::mt19937_64 eng(cfg.seed);
  Tokens ctx = prompt_seq.ids;
  Tokens out;
  while (out.size() + 1 < budget) {
    auto logits = token_logits(params, TokenSequence{ctx, Role::kPrompt});
    auto probs = truncated_distribution(logits, cfg);
    TokenId next = draw_token(probs, eng);
    out.push_back(next);
    if (next == kEos) return answer(std::move(out));
    ctx.push_back(next);
  }
  out.push_back(kEos);
  return answer(std::move(out));
}

// ---------------------------------------------------------------------------
// persistence: "DFTM" | version | K | d | layers (u32 LE) | flat doubles (LE)

inline constexpr std::uint32_t kParamFormatVersion = 1;

namespace detail {

template <typename T>
T byteswap(T value) {
  auto bytes = std::bit_cast<std::array<unsigned char, sizeof(T)>>(value);
  std::reverse(bytes.begin(), bytes.end());
  return std::bit_cast<T>(bytes);
}

template <typename T>
void write_le(std::ostream& os, T value) {
  if constexpr (std::endian::native == std::endian::big) value = byteswap(value);
  os.write(reinterpret_cast<const char*>(&value), sizeof(T));
}

template <typename T>
bool read_le(std::istream& is, T& value) {
  if (!is.read(reinterpret_cast<char*>(&value), sizeof(T))) return false;
  if constexpr (std::endian::native == std::endian::big) value = byteswap(value);
  return true;
}

}  // namespace detail

inline void save_params(const ModelParams& params, const std::string& path) {
  std::ofstream os(path, std::ios::binary | std::ios::trunc);
  if (!os) throw Error("cannot open " + path + " for writing");
  os.write("DFTM", 4);
  detail::write_le<std::uint32_t>(os, kParamFormatVersion);
  detail::write_le<std::uint32_t>(os, static_cast<std::uint32_t>(params.config().vocab));
  detail::write_le<std::uint32_t>(os, static_cast<std::uint32_t>(params.config().width));
  detail::write_le<std::uint32_t>(os, static_cast<std::uint32_t>(params.config().layers));
  for (double v : params.flat()) detail::write_le<std::uint64_t>(os, std::bit_cast<std::uint64_t>(v));
  if (!os) throw Error("write failed for " + path);
}

inline ModelParams load_params(const std::string& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw Error("cannot open " + path);
  std::array<char, 4> magic{};
  if (!is.read(magic.data(), 4) || std::string_view(magic.data(), 4) != "DFTM") {
    throw FormatError(path + ": missing DFTM header");
  }
  std::uint32_t version = 0, vocab = 0, width = 0, layers = 0;
  if (!detail::read_le(is, version) || !detail::read_le(is, vocab) || !detail::read_le(is, width) ||
      !detail::read_le(is, layers)) {
    throw FormatError(path + ": truncated header");
  }
  if (version != kParamFormatVersion) {
    throw FormatError(path + ": unsupported format version " + std::to_string(version));
  }
  if (vocab < 1 || width < 1 || width > 4096 || layers > 64) throw FormatError(path + ": implausible shape");
  ModelParams params(ModelConfig{vocab, width, layers});
  for (double& v : params.flat()) {
    std::uint64_t bits = 0;
    if (!detail::read_le(is, bits)) throw FormatError(path + ": truncated parameter payload");
    v = std::bit_cast<double>(bits);
  }
  if (is.peek() != std::char_traits<char>::eof()) throw FormatError(path + ": trailing bytes after payload");
  return params;
}

// Loads and insists on the expected shape.
inline ModelParams load_params(const std::string& path, const ModelConfig& expected) {
  ModelParams p = load_params(path);
  if (!(p.config() == expected)) {
    throw FormatError(path + ": shape mismatch (file K=" + std::to_string(p.config().vocab) +
                      " d=" + std::to_string(p.config().width) + " layers=" + std::to_string(p.config().layers) +
                      ", expected K=" + std::to_string(expected.vocab) + " d=" + std::to_string(expected.width) +
                      " layers=" + std::to_string(expected.layers) + ")");
  }
  return p;
}

// FNV-1a over the parameter bytes, hex encoded.
inline std::string params_hash(const ModelParams& params) {
  std::uint64_t h = 0xcbf29ce484222325ULL;
  auto mix = [&h](std::uint64_t word) {
    for (int b = 0; b < 8; ++b) {
      h ^= (word >> (8 * b)) & 0xffU;
      h *= 0x100000001b3ULL;
    }
  };
  mix(params.config().vocab);
  mix(params.config().width);
  mix(params.config().layers);
  for (double v : params.flat()) mix(std::bit_cast<std::uint64_t>(v));
  static constexpr char kHex[] = "0123456789abcdef";
  std::string out(16, '0');
  for (int i = 15; i >= 0; --i) {
    out[static_cast<std::size_t>(i)] = kHex[h & 0xf];
    h >>= 4;
  }
  return out;
}

}  // namespace dft
