#pragma once

// Scoring functions and the training losses built on them: SFT, the
// discriminative log-sum-exp objective on an explicit candidate set (DFT and
// DFT2 weightings), and the pairwise logistic baselines DPO, SimPO and SPIN.

#include <cmath>
#include <span>
#include <string>
#include <vector>

#include "dft/core.hpp"
#include "dft/model.hpp"

namespace dft {

enum class ScoringMode { kUnnormalized, kLengthNormalized };

// DFT divides by the sampling probability of each candidate; DFT2 does not.
enum class Variant { kDft, kDft2 };

inline std::string to_string(ScoringMode m) {
  return m == ScoringMode::kUnnormalized ? "unnormalized" : "length-normalized";
}
inline std::string to_string(Variant v) { return v == Variant::kDft ? "DFT" : "DFT2"; }

inline ScoringMode parse_scoring_mode(const std::string& s) {
  if (s == "unnormalized" || s == "Unnormalized") return ScoringMode::kUnnormalized;
  if (s == "length-normalized" || s == "normalized" || s == "LengthNormalized") {
    return ScoringMode::kLengthNormalized;
  }
  throw InputError("unknown scoring mode '" + s + "'");
}

struct Candidate {
  TokenSequence y;
  double logp_base = 0.0;  // log P0(y | augmented prompt), nats
  std::size_t pool_index = 0;
};

struct LossValue {
  double value = 0.0;
  Gradient gradient;
};

inline double score_scale(const TokenSequence& y, ScoringMode mode) {
  if (y.empty()) throw InputError("cannot score an empty answer");
  return mode == ScoringMode::kUnnormalized ? 1.0 : 1.0 / static_cast<double>(y.size());
}

inline double score(const ModelParams& params, const TokenSequence& x, const TokenSequence& y, ScoringMode mode) {
  const double scale = score_scale(y, mode);
  return scale * sequence_logprob(params, x, y);
}

// Adds `weight` * grad s(y, x) into `grad`; returns s(y, x).
inline double accumulate_score_grad(const ModelParams& params, const TokenSequence& x, const TokenSequence& y,
                                    ScoringMode mode, double weight, Gradient& grad) {
  const double scale = score_scale(y, mode);
  return scale * accumulate_logprob_grad(params, x, y, weight * scale, grad);
}

struct Example {
  TokenSequence x;
  TokenSequence y;
};

// Mean negative log-likelihood of the answers.
inline LossValue sft_loss(const ModelParams& params, std::span<const Example> batch) {
  if (batch.empty()) throw InputError("SFT batch must be non-empty");
  LossValue out{0.0, params.zero_gradient()};
  const double inv_n = 1.0 / static_cast<double>(batch.size());
  for (const auto& ex : batch) out.value -= inv_n * accumulate_logprob_grad(params, ex.x, ex.y, -inv_n, out.gradient);
  return out;
}

// Log-domain candidate weight: s/tau - log P0 for DFT, s/tau for DFT2.
inline double log_weight_from_score(double s, double logp_base, double tau, Variant variant) {
  return variant == Variant::kDft ? s / tau - logp_base : s / tau;
}

inline double inner_weight(const ModelParams& params, const TokenSequence& x, const Candidate& cand, double tau,
                           ScoringMode mode, Variant variant) {
  if (!(tau > 0.0)) throw InputError("temperature tau must be positive");
  return log_weight_from_score(score(params, x, cand.y, mode), cand.logp_base, tau, variant);
}

// -s(y_pos) + tau * log( (1/m) sum_c weight_c ), log-sum-exp stabilized.
// The gradient weights each candidate's score gradient by softmax(log weights).
inline LossValue dft_exact_loss(const ModelParams& params, const TokenSequence& x, const TokenSequence& y_pos,
                                std::span<const Candidate> candidates, double tau, ScoringMode mode,
                                Variant variant) {
  if (candidates.empty()) throw InputError("candidate list must be non-empty");
  if (!(tau > 0.0)) throw InputError("temperature tau must be positive");
  LossValue out{0.0, params.zero_gradient()};
  const double s_pos = accumulate_score_grad(params, x, y_pos, mode, -1.0, out.gradient);

  std::vector<double> scores(candidates.size());
  std::vector<double> log_w(candidates.size());
  for (std::size_t c = 0; c < candidates.size(); ++c) {
    scores[c] = score(params, x, candidates[c].y, mode);
    log_w[c] = log_weight_from_score(scores[c], candidates[c].logp_base, tau, variant);
  }
  const double lse = log_sum_exp(log_w);
  out.value = -s_pos + tau * (lse - std::log(static_cast<double>(candidates.size())));
  for (std::size_t c = 0; c < candidates.size(); ++c) {
    const double coeff = std::exp(log_w[c] - lse);
    if (coeff == 0.0) continue;
    accumulate_score_grad(params, x, candidates[c].y, mode, coeff, out.gradient);
  }
  return out;
}

namespace detail {

// -log sigmoid(margin_value) with d/d(margin_value) = -sigmoid(-margin_value).
struct Logistic {
  double loss;
  double dloss_dz;
};

inline Logistic logistic(double z) { return {softplus(-z), -sigmoid(-z)}; }

}  // namespace detail

// r = beta * (log P(y|x) - log P0(y|x)); loss = -log sigmoid(r_win - r_lose).
inline LossValue dpo_loss(const ModelParams& params, const ModelParams& base_params, const TokenSequence& x,
                          const TokenSequence& y_win, const TokenSequence& y_lose, double beta) {
  if (!(beta > 0.0)) throw InputError("beta must be positive");
  Gradient g_win = params.zero_gradient();
  Gradient g_lose = params.zero_gradient();
  const double lp_win = accumulate_logprob_grad(params, x, y_win, 1.0, g_win);
  const double lp_lose = accumulate_logprob_grad(params, x, y_lose, 1.0, g_lose);
  const double r_win = beta * (lp_win - sequence_logprob(base_params, x, y_win));
  const double r_lose = beta * (lp_lose - sequence_logprob(base_params, x, y_lose));
  const auto lg = detail::logistic(r_win - r_lose);
  LossValue out{lg.loss, params.zero_gradient()};
  for (std::size_t k = 0; k < out.gradient.size(); ++k) out.gradient[k] = lg.dloss_dz * beta * (g_win[k] - g_lose[k]);
  return out;
}

// r = (beta/|y|) log P(y|x); loss = -log sigmoid(r_win - r_lose - margin).
inline LossValue simpo_loss(const ModelParams& params, const TokenSequence& x, const TokenSequence& y_win,
                            const TokenSequence& y_lose, double beta, double margin) {
  if (!(beta > 0.0)) throw InputError("beta must be positive");
  if (!(margin >= 0.0)) throw InputError("margin must be non-negative");
  Gradient g_win = params.zero_gradient();
  Gradient g_lose = params.zero_gradient();
  const double r_win = beta * accumulate_score_grad(params, x, y_win, ScoringMode::kLengthNormalized, 1.0, g_win);
  const double r_lose = beta * accumulate_score_grad(params, x, y_lose, ScoringMode::kLengthNormalized, 1.0, g_lose);
  const auto lg = detail::logistic(r_win - r_lose - margin);
  LossValue out{lg.loss, params.zero_gradient()};
  for (std::size_t k = 0; k < out.gradient.size(); ++k) out.gradient[k] = lg.dloss_dz * beta * (g_win[k] - g_lose[k]);
  return out;
}

// SPIN is DPO with the losing answer generated by the base model.
inline LossValue spin_loss(const ModelParams& params, const ModelParams& base_params, const TokenSequence& x,
                           const TokenSequence& y_pos, const TokenSequence& y_generated, double beta) {
  return dpo_loss(params, base_params, x, y_pos, y_generated, beta);
}

}  // namespace dft
