#pragma once

// Shared vocabulary, token sequences, error types and log-domain numerics.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <limits>
#include <span>
#include <stdexcept>
#include <string>
#include <string_view>
#include <unordered_map>
#include <vector>

namespace dft {

class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

// Malformed arguments: bad token ids, empty sequences, bad hyper-parameters.
class InputError : public Error {
 public:
  using Error::Error;
};

// NaN/Inf produced during evaluation or training.
class NumericError : public Error {
 public:
  using Error::Error;
};

// Unreadable or inconsistent files.
class FormatError : public Error {
 public:
  using Error::Error;
};

using TokenId = std::uint32_t;
using Tokens = std::vector<TokenId>;

inline constexpr TokenId kEos = 0;

enum class Role { kPrompt, kAnswer };

struct TokenSequence {
  Tokens ids;
  Role role = Role::kPrompt;

  std::size_t size() const { return ids.size(); }
  bool empty() const { return ids.empty(); }
  bool terminated() const { return !ids.empty() && ids.back() == kEos; }

  friend bool operator==(const TokenSequence&, const TokenSequence&) = default;
};

inline TokenSequence prompt(Tokens ids) { return {std::move(ids), Role::kPrompt}; }
inline TokenSequence answer(Tokens ids) { return {std::move(ids), Role::kAnswer}; }

// Token 0 is always the end-of-sequence marker.
class Vocab {
 public:
  explicit Vocab(std::vector<std::string> names) : names_(std::move(names)) {
    if (names_.empty()) throw InputError("vocabulary must contain the end-of-sequence token");
    for (std::size_t i = 0; i < names_.size(); ++i) index_.emplace(names_[i], static_cast<TokenId>(i));
  }

  // Anonymous vocabulary of `size` tokens: "</s>", "t1", "t2", ...
  static Vocab anonymous(std::size_t size) {
    std::vector<std::string> names{"</s>"};
    for (std::size_t i = 1; i < size; ++i) names.push_back("t" + std::to_string(i));
    return Vocab(std::move(names));
  }

  std::size_t size() const { return names_.size(); }
  const std::string& name(TokenId id) const { return names_.at(id); }
  const std::vector<std::string>& names() const { return names_; }

  bool contains(std::string_view word) const { return index_.contains(std::string(word)); }
  TokenId id(std::string_view word) const {
    auto it = index_.find(std::string(word));
    if (it == index_.end()) throw InputError("token '" + std::string(word) + "' not in vocabulary");
    return it->second;
  }

  // Whitespace tokenization; unknown words map to "<unk>" when the vocabulary has one.
  Tokens encode(std::string_view text) const {
    Tokens out;
    std::size_t pos = 0;
    while (pos < text.size()) {
      while (pos < text.size() && text[pos] == ' ') ++pos;
      std::size_t end = pos;
      while (end < text.size() && text[end] != ' ') ++end;
      if (end > pos) {
        auto word = text.substr(pos, end - pos);
        if (!contains(word) && contains("<unk>")) {
          out.push_back(id("<unk>"));
        } else {
          out.push_back(id(word));
        }
      }
      pos = end;
    }
    return out;
  }

  std::string decode(std::span<const TokenId> ids) const {
    std::string out;
    for (auto t : ids) {
      if (!out.empty()) out += ' ';
      out += name(t);
    }
    return out;
  }

 private:
  std::vector<std::string> names_;
  std::unordered_map<std::string, TokenId> index_;
};

inline void check_tokens(std::span<const TokenId> ids, std::size_t vocab) {
  for (std::size_t i = 0; i < ids.size(); ++i) {
    if (ids[i] >= vocab) {
      throw InputError("token id " + std::to_string(ids[i]) + " at position " + std::to_string(i) +
                       " outside vocabulary of size " + std::to_string(vocab));
    }
  }
}

// ---------------------------------------------------------------------------
// log-domain numerics

inline constexpr double kNegInf = -std::numeric_limits<double>::infinity();

inline double log_sum_exp(std::span<const double> xs) {
  if (xs.empty()) return kNegInf;
  double hi = *std::max_element(xs.begin(), xs.end());
  if (!std::isfinite(hi)) return hi;
  double acc = 0.0;
  for (double x : xs) acc += std::exp(x - hi);
  return hi + std::log(acc);
}

inline double log_mean_exp(std::span<const double> xs) {
  return log_sum_exp(xs) - std::log(static_cast<double>(xs.size()));
}

// log(1 + e^x) without overflow.
inline double softplus(double x) { return std::max(x, 0.0) + std::log1p(std::exp(-std::abs(x))); }

inline double log_sigmoid(double x) { return -softplus(-x); }

inline double sigmoid(double x) {
  if (x >= 0) return 1.0 / (1.0 + std::exp(-x));
  double e = std::exp(x);
  return e / (1.0 + e);
}

// softmax of `xs` in place, max-subtracted.
inline void softmax_inplace(std::span<double> xs) {
  if (xs.empty()) return;
  double hi = *std::max_element(xs.begin(), xs.end());
  double total = 0.0;
  for (double& x : xs) {
    x = std::exp(x - hi);
    total += x;
  }
  for (double& x : xs) x /= total;
}

inline bool all_finite(std::span<const double> xs) {
  return std::all_of(xs.begin(), xs.end(), [](double x) { return std::isfinite(x); });
}

// ---------------------------------------------------------------------------
// deterministic randomness

inline std::uint64_t splitmix64(std::uint64_t x) {
  x += 0x9e3779b97f4a7c15ULL;
  x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ULL;
  x = (x ^ (x >> 27)) * 0x94d049bb133111ebULL;
  return x ^ (x >> 31);
}

inline std::uint64_t mix_seed(std::uint64_t a, std::uint64_t b) { return splitmix64(a ^ splitmix64(b)); }

template <typename... Rest>
std::uint64_t mix_seed(std::uint64_t a, std::uint64_t b, Rest... rest) {
  return mix_seed(mix_seed(a, b), static_cast<std::uint64_t>(rest)...);
}

// uniform double in [0, 1) from a 64-bit engine; identical on every standard library.
template <typename Engine>
double uniform01(Engine& eng) {
  return static_cast<double>(eng() >> 11) * 0x1.0p-53;
}

// Box-Muller normal, again library-independent.
template <typename Engine>
double standard_normal(Engine& eng) {
  double u1 = uniform01(eng);
  double u2 = uniform01(eng);
  if (u1 < 1e-300) u1 = 1e-300;
  return std::sqrt(-2.0 * std::log(u1)) * std::cos(2.0 * 3.14159265358979323846 * u2);
}

// Fisher-Yates with a library-independent index draw.
template <typename T, typename Engine>
void shuffle(std::vector<T>& xs, Engine& eng) {
  for (std::size_t i = xs.size(); i > 1; --i) {
    auto j = static_cast<std::size_t>(uniform01(eng) * static_cast<double>(i));
    if (j >= i) j = i - 1;
    std::swap(xs[i - 1], xs[j]);
  }
}

}  // namespace dft
