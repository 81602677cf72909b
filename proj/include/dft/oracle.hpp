#pragma once

// Ground truth on enumerable output spaces: every terminated answer up to a
// length bound, the exact discriminative likelihood and objective over that
// space, and central finite-difference gradients.

#include <algorithm>
#include <cmath>
#include <functional>
#include <span>
#include <string>
#include <vector>

#include "dft/core.hpp"
#include "dft/model.hpp"
#include "dft/objectives.hpp"

namespace dft {

inline constexpr double kEnumerationGuard = 1e6;

// All answers of at most `max_len` tokens whose last token is the terminator,
// over content tokens 1..K-1.
struct OutputSpace {
  std::size_t vocab = 1;
  std::size_t max_len = 1;
  std::vector<TokenSequence> answers;

  std::size_t size() const { return answers.size(); }

  // Index of `y`, or size() when absent. Answers are kept in lexicographic order.
  std::size_t find(const TokenSequence& y) const {
    auto it = std::lower_bound(answers.begin(), answers.end(), y,
                               [](const TokenSequence& a, const TokenSequence& b) { return a.ids < b.ids; });
    if (it != answers.end() && it->ids == y.ids) return static_cast<std::size_t>(it - answers.begin());
    return answers.size();
  }
  bool contains(const TokenSequence& y) const { return find(y) < answers.size(); }

  // log(1/|Y|): the per-candidate log-probability of drawing uniformly from the space.
  double uniform_logp() const { return -std::log(static_cast<double>(answers.size())); }

  // Every answer as a candidate carrying `logp_base`.
  std::vector<Candidate> as_candidates(double logp_base) const {
    std::vector<Candidate> out;
    out.reserve(answers.size());
    for (std::size_t i = 0; i < answers.size(); ++i) out.push_back({answers[i], logp_base, i});
    return out;
  }
};

inline std::size_t output_space_size(std::size_t vocab, std::size_t max_len) {
  const std::size_t k_eff = vocab - 1;
  std::size_t total = 0;
  std::size_t term = 1;
  for (std::size_t len = 1; len <= max_len; ++len) {
    total += term;
    term *= k_eff;
  }
  return total;
}

inline OutputSpace enumerate_outputs(std::size_t vocab, std::size_t max_len) {
  if (vocab < 1) throw InputError("vocabulary must be non-empty");
  if (max_len < 1) throw InputError("max answer length must be at least 1");
  const double k_eff = static_cast<double>(vocab - 1);
  if (std::pow(k_eff, static_cast<double>(max_len)) > kEnumerationGuard) {
    throw InputError("output space too large to enumerate: (K-1)^L = " + std::to_string(vocab - 1) + "^" +
                     std::to_string(max_len) + " exceeds 1e6");
  }
  OutputSpace space{vocab, max_len, {}};
  space.answers.reserve(output_space_size(vocab, max_len));
  // Depth-first in token order with the terminator (id 0) first yields
  // lexicographic order of the full terminated sequences.
  Tokens prefix;
  std::function<void()> walk = [&]() {
    Tokens done = prefix;
    done.push_back(kEos);
    space.answers.push_back(answer(std::move(done)));
    if (prefix.size() + 1 >= max_len) return;
    for (TokenId t = 1; t < vocab; ++t) {
      prefix.push_back(t);
      walk();
      prefix.pop_back();
    }
  };
  walk();
  return space;
}

inline std::vector<double> space_scores(const ModelParams& params, const TokenSequence& x, const OutputSpace& space,
                                        ScoringMode mode) {
  std::vector<double> s(space.size());
  for (std::size_t i = 0; i < space.size(); ++i) s[i] = score(params, x, space.answers[i], mode);
  return s;
}

// log of sum_{y' in Y} exp(s(y', x) / tau).
inline double log_partition(const ModelParams& params, const TokenSequence& x, const OutputSpace& space, double tau,
                            ScoringMode mode) {
  auto s = space_scores(params, x, space, mode);
  for (double& v : s) v /= tau;
  return log_sum_exp(s);
}

// P_d(y|x) = exp(s(y)/tau) / sum_{y'} exp(s(y')/tau) over the space.
inline double exact_discriminative_likelihood(const ModelParams& params, const TokenSequence& x,
                                              const TokenSequence& y, const OutputSpace& space, double tau,
                                              ScoringMode mode) {
  if (!(tau > 0.0)) throw InputError("temperature tau must be positive");
  const std::size_t idx = space.find(y);
  if (idx == space.size()) throw InputError("answer is not a member of the output space");
  auto s = space_scores(params, x, space, mode);
  for (double& v : s) v /= tau;
  return std::exp(s[idx] - log_sum_exp(s));
}

// Full distribution P_d(.|x) over the space, in space order.
inline std::vector<double> discriminative_distribution(const ModelParams& params, const TokenSequence& x,
                                                       const OutputSpace& space, double tau, ScoringMode mode) {
  auto s = space_scores(params, x, space, mode);
  for (double& v : s) v /= tau;
  softmax_inplace(s);
  return s;
}

// Per-example terms -s(y_i, x_i) + tau * log sum_{y'} exp(s(y', x_i)/tau).
inline std::vector<double> exact_objective_terms(const ModelParams& params, std::span<const Example> data,
                                                 const OutputSpace& space, double tau, ScoringMode mode) {
  if (!(tau > 0.0)) throw InputError("temperature tau must be positive");
  std::vector<double> terms;
  terms.reserve(data.size());
  for (const auto& ex : data) {
    const std::size_t idx = space.find(ex.y);
    if (idx == space.size()) throw InputError("training answer is not a member of the output space");
    auto s = space_scores(params, ex.x, space, mode);
    std::vector<double> scaled(s.size());
    for (std::size_t i = 0; i < s.size(); ++i) scaled[i] = s[i] / tau;
    terms.push_back(-s[idx] + tau * log_sum_exp(scaled));
  }
  return terms;
}

// F(theta) = -(1/n) sum_i tau log P_d(y_i | x_i).
inline double exact_objective(const ModelParams& params, std::span<const Example> data, const OutputSpace& space,
                              double tau, ScoringMode mode) {
  if (data.empty()) throw InputError("dataset must be non-empty");
  auto terms = exact_objective_terms(params, data, space, tau, mode);
  double total = 0.0;
  for (double t : terms) total += t;
  const double out = total / static_cast<double>(data.size());
  if (!std::isfinite(out)) throw NumericError("exact objective is not finite");
  return out;
}

// Analytic gradient of F via the exact loss with the whole space as candidates
// and the uniform proposal, which makes the importance-weighted mean equal the
// plain sum over the space.
inline LossValue exact_objective_with_grad(const ModelParams& params, std::span<const Example> data,
                                           const OutputSpace& space, double tau, ScoringMode mode) {
  if (data.empty()) throw InputError("dataset must be non-empty");
  const auto cands = space.as_candidates(space.uniform_logp());
  LossValue out{0.0, params.zero_gradient()};
  const double inv_n = 1.0 / static_cast<double>(data.size());
  for (const auto& ex : data) {
    auto term = dft_exact_loss(params, ex.x, ex.y, cands, tau, mode, Variant::kDft);
    out.value += inv_n * term.value;
    for (std::size_t k = 0; k < out.gradient.size(); ++k) out.gradient[k] += inv_n * term.gradient[k];
  }
  return out;
}

using ParamFunction = std::function<double(const ModelParams&)>;

// Central differences on the listed coordinates (all when `coords` is empty).
inline Gradient finite_difference_grad(const ParamFunction& f, const ModelParams& params, double step,
                                       std::span<const std::size_t> coords = {}) {
  if (!(step > 0.0)) throw InputError("finite-difference step must be positive");
  ModelParams probe = params;
  Gradient g(params.size(), 0.0);
  auto eval = [&](std::size_t k) {
    const double orig = probe.flat()[k];
    probe.flat()[k] = orig + step;
    const double up = f(probe);
    probe.flat()[k] = orig - step;
    const double down = f(probe);
    probe.flat()[k] = orig;
    if (!std::isfinite(up) || !std::isfinite(down)) {
      throw NumericError("non-finite function value at coordinate " + std::to_string(k));
    }
    g[k] = (up - down) / (2.0 * step);
  };
  if (coords.empty()) {
    for (std::size_t k = 0; k < params.size(); ++k) eval(k);
  } else {
    for (auto k : coords) eval(k);
  }
  return g;
}

// max_k |a_k - b_k| / max(|a_k|, |b_k|, floor) over the listed coordinates.
inline double max_relative_error(std::span<const double> a, std::span<const double> b, double floor = 1e-6,
                                 std::span<const std::size_t> coords = {}) {
  if (a.size() != b.size()) throw InputError("gradient length mismatch");
  double worst = 0.0;
  auto one = [&](std::size_t k) {
    const double denom = std::max({std::abs(a[k]), std::abs(b[k]), floor});
    worst = std::max(worst, std::abs(a[k] - b[k]) / denom);
  };
  if (coords.empty()) {
    for (std::size_t k = 0; k < a.size(); ++k) one(k);
  } else {
    for (auto k : coords) one(k);
  }
  return worst;
}

}  // namespace dft
