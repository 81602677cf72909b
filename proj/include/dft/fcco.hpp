#pragma once

// Stochastic optimizer for the discriminative objective. Each training example
// i keeps a moving-average estimate u_i of its inner sum
//   g_i(theta) = sum_{y'} exp(s(y', x_i) / tau)
// stored as log u_i. A step draws negatives from the offline pool, refreshes
// log u_i for the minibatch, forms the gradient estimate and applies AdamW.
// SFT and the pairwise baselines (DPO, SimPO, SPIN) share the same loop.

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <functional>
#include <numbers>
#include <optional>
#include <ostream>
#include <span>
#include <string>
#include <vector>

#include "dft/core.hpp"
#include "dft/model.hpp"
#include "dft/objectives.hpp"
#include "dft/pool.hpp"

namespace dft {

// ---------------------------------------------------------------------------
// moving-average estimators

// u <- (1 - gamma) u + gamma * mean weight. Linear-domain reference.
inline double update_u_linear(double u, double batch_mean_weight, double gamma) {
  if (!std::isfinite(u) || !std::isfinite(batch_mean_weight)) throw NumericError("non-finite estimator input");
  if (!(u > 0.0)) throw InputError("u must be positive");
  if (!(batch_mean_weight >= 0.0)) throw InputError("batch mean weight must be non-negative");
  if (!(gamma > 0.0 && gamma <= 1.0)) throw InputError("gamma must lie in (0, 1]");
  return (1.0 - gamma) * u + gamma * batch_mean_weight;
}

// Log-domain update:
//   b = log(1 - gamma) + log u,  w = log gamma + logmeanexp(log weights)
//   log u <- max(b, w) - log sigmoid(|b - w|)
// gamma = 1 reduces to log u <- logmeanexp(log weights).
inline double update_u_log(double u_log, std::span<const double> log_weights, double gamma) {
  if (log_weights.empty()) throw InputError("need at least one log weight");
  if (!(gamma > 0.0 && gamma <= 1.0)) throw InputError("gamma must lie in (0, 1]");
  if (!std::isfinite(u_log) || !all_finite(log_weights)) throw NumericError("non-finite estimator input");
  const double w = std::log(gamma) + log_mean_exp(log_weights);
  if (gamma == 1.0) return w;
  const double b = std::log1p(-gamma) + u_log;
  return std::max(b, w) - log_sigmoid(std::abs(b - w));
}

struct EstimatorState {
  std::vector<double> u_log;  // log u_i, starts at 0 (u = 1)
  double gamma = 1.0;

  EstimatorState() = default;
  EstimatorState(std::size_t n, double gamma_) : u_log(n, 0.0), gamma(gamma_) {
    if (!(gamma > 0.0 && gamma <= 1.0)) throw InputError("gamma must lie in (0, 1]");
  }

  std::size_t size() const { return u_log.size(); }

  double update(std::size_t i, std::span<const double> log_weights) {
    if (i >= u_log.size()) throw InputError("estimator index " + std::to_string(i) + " out of range");
    u_log[i] = update_u_log(u_log[i], log_weights, gamma);
    return u_log[i];
  }
};

// ---------------------------------------------------------------------------
// AdamW

struct AdamWConfig {
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
  double weight_decay = 0.0;
};

struct OptState {
  std::vector<double> m;
  std::vector<double> v;
  std::size_t step = 0;
  AdamWConfig cfg;

  OptState() = default;
  OptState(std::size_t n, AdamWConfig c) : m(n, 0.0), v(n, 0.0), cfg(c) {}
};

// Decoupled weight decay, bias-corrected moments.
inline void adamw_step(ModelParams& params, OptState& opt, std::span<const double> grad, double lr) {
  auto theta = params.flat();
  if (grad.size() != theta.size() || opt.m.size() != theta.size()) {
    throw InputError("optimizer state does not match parameter layout");
  }
  for (std::size_t k = 0; k < grad.size(); ++k) {
    if (!std::isfinite(grad[k])) {
      throw NumericError("non-finite gradient at coordinate " + std::to_string(k) + "; step aborted");
    }
  }
  ++opt.step;
  const auto& c = opt.cfg;
  const double bc1 = 1.0 - std::pow(c.beta1, static_cast<double>(opt.step));
  const double bc2 = 1.0 - std::pow(c.beta2, static_cast<double>(opt.step));
  for (std::size_t k = 0; k < theta.size(); ++k) {
    theta[k] *= 1.0 - lr * c.weight_decay;
    opt.m[k] = c.beta1 * opt.m[k] + (1.0 - c.beta1) * grad[k];
    opt.v[k] = c.beta2 * opt.v[k] + (1.0 - c.beta2) * grad[k] * grad[k];
    const double m_hat = opt.m[k] / bc1;
    const double v_hat = opt.v[k] / bc2;
    theta[k] -= lr * m_hat / (std::sqrt(v_hat) + c.eps);
  }
}

enum class Schedule { kCosine, kConstant };

inline Schedule parse_schedule(const std::string& s) {
  if (s == "cosine") return Schedule::kCosine;
  if (s == "constant") return Schedule::kConstant;
  throw InputError("unknown scheduler '" + s + "' (cosine|constant)");
}
inline std::string to_string(Schedule s) { return s == Schedule::kCosine ? "cosine" : "constant"; }

// Linear warmup from 0 over ceil(warmup_ratio * total) steps, then cosine
// decay to 0 (or constant).
inline double scheduled_lr(double base_lr, Schedule kind, double warmup_ratio, std::size_t step, std::size_t total) {
  const auto warmup = static_cast<std::size_t>(std::ceil(warmup_ratio * static_cast<double>(total)));
  if (step < warmup) return base_lr * static_cast<double>(step) / static_cast<double>(warmup);
  if (kind == Schedule::kConstant) return base_lr;
  const double span = static_cast<double>(std::max<std::size_t>(1, total - warmup));
  const double progress = std::min(1.0, static_cast<double>(step - warmup) / span);
  return base_lr * 0.5 * (1.0 + std::cos(std::numbers::pi * progress));
}

// ---------------------------------------------------------------------------
// configuration

enum class Method { kSft, kDft, kDft2, kDpo, kSimpo, kSpin };

inline std::string to_string(Method m) {
  switch (m) {
    case Method::kSft: return "SFT";
    case Method::kDft: return "DFT";
    case Method::kDft2: return "DFT2";
    case Method::kDpo: return "DPO";
    case Method::kSimpo: return "SimPO";
    case Method::kSpin: return "SPIN";
  }
  return "SFT";
}

inline Method parse_method(const std::string& s) {
  for (auto m : {Method::kSft, Method::kDft, Method::kDft2, Method::kDpo, Method::kSimpo, Method::kSpin}) {
    if (s == to_string(m)) return m;
  }
  throw InputError("unknown method '" + s + "' (SFT|DFT|DFT2|DPO|SimPO|SPIN)");
}

inline bool uses_pool(Method m) {
  return m == Method::kDft || m == Method::kDft2 || m == Method::kSimpo || m == Method::kSpin;
}

struct TrainConfig {
  Method method = Method::kDft;
  double tau = 1.0;
  double gamma = 0.85;
  std::size_t B = 2;
  std::size_t epochs = 2;
  std::size_t batch_size = 16;
  double lr = 1e-3;
  double warmup_ratio = 0.1;
  Schedule schedule = Schedule::kCosine;
  ScoringMode mode = ScoringMode::kUnnormalized;
  AdamWConfig adamw;
  double clip_norm = 0.0;  // 0 disables clipping
  double beta = 0.1;       // DPO / SPIN / SimPO inverse temperature
  double margin = 0.0;     // SimPO reward margin
  bool recycle_pool = false;
  std::uint64_t seed = 0;

  Variant variant() const { return method == Method::kDft2 ? Variant::kDft2 : Variant::kDft; }

  // Default tau / gamma / scoring pairing of each discriminative variant,
  // with desk-scale batch size and learning rate.
  static TrainConfig dft_defaults() {
    TrainConfig c;
    c.method = Method::kDft;
    c.tau = 1.0;
    c.gamma = 0.85;
    c.mode = ScoringMode::kUnnormalized;
    return c;
  }
  static TrainConfig dft2_defaults() {
    TrainConfig c;
    c.method = Method::kDft2;
    c.tau = 0.3;
    c.gamma = 0.90;
    c.mode = ScoringMode::kLengthNormalized;
    return c;
  }

  void validate() const {
    if (!(tau > 0.0)) throw InputError("tau must be positive");
    if (!(gamma > 0.0 && gamma <= 1.0)) throw InputError("gamma must lie in (0, 1]");
    if (B < 1) throw InputError("B must be at least 1");
    if (epochs < 1) throw InputError("epochs must be at least 1");
    if (batch_size < 1) throw InputError("batch_size must be at least 1");
    if (!(lr >= 0.0)) throw InputError("lr must be non-negative");
    if (!(warmup_ratio >= 0.0 && warmup_ratio <= 1.0)) throw InputError("warmup_ratio must lie in [0, 1]");
    if (!(clip_norm >= 0.0)) throw InputError("clip_norm must be non-negative");
    if ((method == Method::kDpo || method == Method::kSimpo || method == Method::kSpin) && !(beta > 0.0)) {
      throw InputError("beta must be positive for " + to_string(method));
    }
    if (!(margin >= 0.0)) throw InputError("margin must be non-negative");
  }
};

// ---------------------------------------------------------------------------
// per-step estimates

struct MinibatchItem {
  std::size_t example_id = 0;
  std::vector<Candidate> negatives;
};

struct GradientEstimate {
  Gradient gradient;
  double loss_proxy = 0.0;
  double pos_loglik_mean = 0.0;
  double neg_loglik_mean = 0.0;
  std::size_t num_negatives = 0;
  // coefficients[j][c] = exp(log w - log u_i - log B) for item j, candidate c
  std::vector<std::vector<double>> coefficients;
};

namespace detail {

inline void check_minibatch(std::span<const Example> data, std::span<const MinibatchItem> items,
                            const EstimatorState& state) {
  if (items.empty()) throw InputError("minibatch must be non-empty");
  if (state.size() != data.size()) throw InputError("estimator state does not match dataset size");
  for (const auto& it : items) {
    if (it.example_id >= data.size()) throw InputError("minibatch example id out of range");
    if (it.negatives.empty()) throw InputError("every minibatch item needs at least one negative");
  }
}

inline std::vector<double> candidate_log_weights(const ModelParams& params, const Example& ex,
                                                 std::span<const Candidate> negatives, double tau, ScoringMode mode,
                                                 Variant variant) {
  std::vector<double> lw(negatives.size());
  for (std::size_t c = 0; c < negatives.size(); ++c) lw[c] = inner_weight(params, ex.x, negatives[c], tau, mode, variant);
  return lw;
}

}  // namespace detail

// Moves log u_i one step for every item at the current parameters.
inline void refresh_estimators(const ModelParams& params, std::span<const Example> data,
                               std::span<const MinibatchItem> items, EstimatorState& state, double tau,
                               ScoringMode mode, Variant variant) {
  detail::check_minibatch(data, items, state);
  std::vector<std::vector<double>> lw(items.size());
  parallel_for(items.size(), [&](std::size_t j) {
    lw[j] = detail::candidate_log_weights(params, data[items[j].example_id], items[j].negatives, tau, mode, variant);
  });
  for (std::size_t j = 0; j < items.size(); ++j) state.update(items[j].example_id, lw[j]);
}

// G = -(1/|S|) sum_i grad s(y_i, x_i)
//     + (1/|S|) sum_i sum_{y'} exp(log w(y') - log u_i - log B) grad s(y', x_i)
// using the already refreshed log u_i.
inline GradientEstimate gradient_estimate(const ModelParams& params, std::span<const Example> data,
                                          std::span<const MinibatchItem> items, const EstimatorState& state,
                                          double tau, ScoringMode mode, Variant variant) {
  detail::check_minibatch(data, items, state);
  const double inv_s = 1.0 / static_cast<double>(items.size());

  struct Partial {
    Gradient grad;
    double s_pos = 0.0;
    double pos_loglik = 0.0;
    double neg_loglik_sum = 0.0;
    std::vector<double> coeff;
  };
  std::vector<Partial> parts(items.size());
  parallel_for(items.size(), [&](std::size_t j) {
    const auto& item = items[j];
    const auto& ex = data[item.example_id];
    auto& p = parts[j];
    p.grad = params.zero_gradient();
    p.s_pos = accumulate_score_grad(params, ex.x, ex.y, mode, -inv_s, p.grad);
    p.pos_loglik = p.s_pos / score_scale(ex.y, mode);
    const double u_log = state.u_log[item.example_id];
    const double log_b = std::log(static_cast<double>(item.negatives.size()));
    auto lw = detail::candidate_log_weights(params, ex, item.negatives, tau, mode, variant);
    p.coeff.resize(item.negatives.size());
    for (std::size_t c = 0; c < item.negatives.size(); ++c) {
      const auto& neg = item.negatives[c];
      p.coeff[c] = std::exp(lw[c] - u_log - log_b);
      const double s = accumulate_score_grad(params, ex.x, neg.y, mode, inv_s * p.coeff[c], p.grad);
      p.neg_loglik_sum += s / score_scale(neg.y, mode);
    }
  });

  GradientEstimate out;
  out.gradient = params.zero_gradient();
  std::size_t negs = 0;
  for (std::size_t j = 0; j < items.size(); ++j) {
    const auto& p = parts[j];
    for (std::size_t k = 0; k < out.gradient.size(); ++k) out.gradient[k] += p.grad[k];
    out.loss_proxy += inv_s * (-p.s_pos + tau * state.u_log[items[j].example_id]);
    out.pos_loglik_mean += inv_s * p.pos_loglik;
    out.neg_loglik_mean += p.neg_loglik_sum;
    negs += items[j].negatives.size();
    out.coefficients.push_back(p.coeff);
  }
  out.num_negatives = negs;
  out.neg_loglik_mean /= static_cast<double>(negs);
  return out;
}

// ---------------------------------------------------------------------------
// training loop

struct MetricsRow {
  std::size_t step = 0;
  std::size_t epoch = 0;
  double lr = 0.0;
  double loss_proxy = 0.0;
  double pos_loglik_mean = 0.0;
  double neg_loglik_mean = 0.0;
  double u_log_mean = 0.0;
  double u_log_min = 0.0;
  double u_log_max = 0.0;
  double grad_norm = 0.0;
  std::size_t candidates_per_item = 0;
};

inline constexpr const char* kMetricsHeader =
    "step,epoch,lr,loss_proxy,pos_loglik_mean,neg_loglik_mean,u_log_mean,u_log_min,u_log_max,grad_norm,candidates";

inline void write_metrics_csv(std::ostream& os, std::span<const MetricsRow> rows) {
  os << kMetricsHeader << '\n';
  char buf[512];
  for (const auto& r : rows) {
    std::snprintf(buf, sizeof(buf), "%zu,%zu,%.17g,%.17g,%.17g,%.17g,%.17g,%.17g,%.17g,%.17g,%zu\n", r.step, r.epoch, r.lr,
                  r.loss_proxy, r.pos_loglik_mean, r.neg_loglik_mean, r.u_log_mean, r.u_log_min, r.u_log_max,
                  r.grad_norm, r.candidates_per_item);
    os << buf;
  }
}

struct TrainResult {
  ModelParams params;
  std::vector<MetricsRow> metrics;
  EstimatorState state;
  std::size_t steps = 0;
};

struct TrainInputs {
  std::span<const Example> data;
  const Pool* pool = nullptr;                    // required by DFT, DFT2, SimPO, SPIN
  const ModelParams* base = nullptr;             // reference policy for DPO / SPIN
  std::span<const TokenSequence> rejected = {};  // labeled losing answers for DPO
};

using StepCallback = std::function<void(std::size_t step, const ModelParams& params)>;

inline std::size_t steps_per_epoch(std::size_t n, std::size_t batch_size) { return (n + batch_size - 1) / batch_size; }

namespace detail {

struct PairwiseParts {
  Gradient grad;
  double loss = 0.0;
  double pos_loglik = 0.0;
  double neg_loglik_sum = 0.0;
};

inline double l2_norm(std::span<const double> g) {
  double acc = 0.0;
  for (double v : g) acc += v * v;
  return std::sqrt(acc);
}

}  // namespace detail

// Runs `epochs` passes over the data. Every example is visited once per epoch
// in a seeded order; each visit consumes the next B candidates of that
// example's seeded pool permutation.
inline TrainResult train(const ModelParams& init, const TrainInputs& in, const TrainConfig& cfg,
                         const StepCallback& on_step = {}) {
  cfg.validate();
  const std::size_t n = in.data.size();
  if (n == 0) throw InputError("training set is empty");
  const bool need_pool = uses_pool(cfg.method);
  if (need_pool && in.pool == nullptr) throw InputError(to_string(cfg.method) + " needs a negative pool");
  if (in.pool) {
    if (in.pool->num_examples() < n) throw InputError("pool covers fewer examples than the training set");
    if (!cfg.recycle_pool && cfg.B * cfg.epochs > in.pool->m) {
      throw PoolExhausted("pool depth m=" + std::to_string(in.pool->m) + " is below B*E=" +
                          std::to_string(cfg.B * cfg.epochs));
    }
    if (cfg.B > in.pool->m) throw InputError("B exceeds pool depth");
  }
  if ((cfg.method == Method::kDpo || cfg.method == Method::kSpin) && in.base == nullptr) {
    throw InputError(to_string(cfg.method) + " needs base parameters");
  }
  if (cfg.method == Method::kDpo && in.rejected.size() != n) {
    throw InputError("DPO needs one rejected answer per training example");
  }

  TrainResult res{init, {}, EstimatorState(n, cfg.gamma), 0};
  OptState opt(init.size(), cfg.adamw);
  const std::size_t per_epoch = steps_per_epoch(n, cfg.batch_size);
  const std::size_t total = per_epoch * cfg.epochs;
  const std::uint64_t order_seed = mix_seed(cfg.seed, 0x6f72646572ULL);
  const std::uint64_t pool_seed = mix_seed(cfg.seed, 0x706f6f6cULL);
  std::vector<std::size_t> visits(n, 0);

  std::size_t step = 0;
  for (std::size_t epoch = 0; epoch < cfg.epochs; ++epoch) {
    std::vector<std::size_t> order(n);
    for (std::size_t i = 0; i < n; ++i) order[i] = i;
    std::mt19937_64 eng(mix_seed(order_seed, epoch));
    shuffle(order, eng);

    for (std::size_t start = 0; start < n; start += cfg.batch_size, ++step) {
      const std::size_t stop = std::min(n, start + cfg.batch_size);
      std::vector<MinibatchItem> items;
      for (std::size_t r = start; r < stop; ++r) {
        MinibatchItem item{order[r], {}};
        if (in.pool) {
          auto drawn = cfg.recycle_pool ? draw_negatives_cycled(*in.pool, item.example_id, cfg.B,
                                                                visits[item.example_id], pool_seed)
                                        : draw_negatives(*in.pool, item.example_id, cfg.B, visits[item.example_id],
                                                         pool_seed);
          for (const auto& e : drawn) item.negatives.push_back(e.candidate());
        }
        ++visits[item.example_id];
        items.push_back(std::move(item));
      }

      const auto& params = res.params;
      MetricsRow row;
      row.step = step;
      row.epoch = epoch;
      row.lr = scheduled_lr(cfg.lr, cfg.schedule, cfg.warmup_ratio, step, total);
      row.candidates_per_item = in.pool ? cfg.B : 0;
      Gradient grad;
      const double inv_s = 1.0 / static_cast<double>(items.size());

      if (cfg.method == Method::kDft || cfg.method == Method::kDft2) {
        refresh_estimators(params, in.data, items, res.state, cfg.tau, cfg.mode, cfg.variant());
        auto est = gradient_estimate(params, in.data, items, res.state, cfg.tau, cfg.mode, cfg.variant());
        grad = std::move(est.gradient);
        row.loss_proxy = est.loss_proxy;
        row.pos_loglik_mean = est.pos_loglik_mean;
        row.neg_loglik_mean = est.neg_loglik_mean;
      } else {
        std::vector<detail::PairwiseParts> parts(items.size());
        parallel_for(items.size(), [&](std::size_t j) {
          const auto& item = items[j];
          const auto& ex = in.data[item.example_id];
          auto& p = parts[j];
          p.grad = params.zero_gradient();
          const double inv_b = item.negatives.empty() ? 0.0 : 1.0 / static_cast<double>(item.negatives.size());
          for (const auto& neg : item.negatives) p.neg_loglik_sum += sequence_logprob(params, ex.x, neg.y);
          if (cfg.method == Method::kSft) {
            p.pos_loglik = accumulate_logprob_grad(params, ex.x, ex.y, -inv_s, p.grad);
            p.loss = -p.pos_loglik;
            return;
          }
          p.pos_loglik = sequence_logprob(params, ex.x, ex.y);
          auto add = [&](const LossValue& lv, double w) {
            p.loss += w * lv.value;
            for (std::size_t k = 0; k < p.grad.size(); ++k) p.grad[k] += inv_s * w * lv.gradient[k];
          };
          if (cfg.method == Method::kDpo) {
            add(dpo_loss(params, *in.base, ex.x, ex.y, in.rejected[item.example_id], cfg.beta), 1.0);
          } else {
            for (const auto& neg : item.negatives) {
              add(cfg.method == Method::kSimpo ? simpo_loss(params, ex.x, ex.y, neg.y, cfg.beta, cfg.margin)
                                               : spin_loss(params, *in.base, ex.x, ex.y, neg.y, cfg.beta),
                  inv_b);
            }
          }
        });
        grad = params.zero_gradient();
        std::size_t negs = 0;
        for (std::size_t j = 0; j < items.size(); ++j) {
          for (std::size_t k = 0; k < grad.size(); ++k) grad[k] += parts[j].grad[k];
          row.loss_proxy += inv_s * parts[j].loss;
          row.pos_loglik_mean += inv_s * parts[j].pos_loglik;
          row.neg_loglik_mean += parts[j].neg_loglik_sum;
          negs += items[j].negatives.size();
        }
        row.neg_loglik_mean = negs ? row.neg_loglik_mean / static_cast<double>(negs) : 0.0;
      }

      if (!all_finite(grad)) throw NumericError("non-finite gradient estimate at step " + std::to_string(step));
      row.grad_norm = detail::l2_norm(grad);
      if (cfg.clip_norm > 0.0 && row.grad_norm > cfg.clip_norm) {
        const double s = cfg.clip_norm / row.grad_norm;
        for (double& g : grad) g *= s;
      }
      adamw_step(res.params, opt, grad, row.lr);
      if (!all_finite(res.params.flat())) throw NumericError("non-finite parameters after step " + std::to_string(step));

      const auto& u = res.state.u_log;
      row.u_log_min = *std::min_element(u.begin(), u.end());
      row.u_log_max = *std::max_element(u.begin(), u.end());
      double sum = 0.0;
      for (double v : u) sum += v;
      row.u_log_mean = sum / static_cast<double>(u.size());
      if (!std::isfinite(row.u_log_mean)) throw NumericError("non-finite estimator state at step " + std::to_string(step));
      res.metrics.push_back(row);
      if (on_step) on_step(step, res.params);
    }
  }
  res.steps = step;
  return res;
}

}  // namespace dft
