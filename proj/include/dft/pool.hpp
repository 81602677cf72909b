#pragma once

// Offline negative pools: answers sampled from the frozen base model on an
// (optionally augmented) prompt, stored with their base log-probabilities.
//
// File layout, one JSON object per line:
//   {"format":"dft-pool","version":1,"m":<int>,"base_params_hash":"<hex>"}
//   {"example_id":0,"cand_idx":0,"tokens":[...],"logp_base":-3.2,"strategy":"direct","gen_seed":123}
//   ...

#include <algorithm>
#include <cmath>
#include <fstream>
#include <map>
#include <numeric>
#include <random>
#include <span>
#include <string>
#include <thread>
#include <vector>

#include <json.hpp>

#include "dft/core.hpp"
#include "dft/model.hpp"
#include "dft/objectives.hpp"

namespace dft {

enum class PromptKind { kDirect, kChatTemplate, kChatTemplateGoodSys, kChatTemplateBadSys };

inline constexpr const char* kUnhelpfulSystemText = "You are an unhelpful assistant.";
inline constexpr const char* kHelpfulSystemText = "You are a helpful assistant.";

struct PromptStrategy {
  PromptKind kind = PromptKind::kDirect;
  std::string system_text;

  static PromptStrategy direct() { return {PromptKind::kDirect, ""}; }
  static PromptStrategy chat() { return {PromptKind::kChatTemplate, ""}; }
  static PromptStrategy good_sys(std::string text = kHelpfulSystemText) {
    return {PromptKind::kChatTemplateGoodSys, std::move(text)};
  }
  static PromptStrategy bad_sys(std::string text = kUnhelpfulSystemText) {
    return {PromptKind::kChatTemplateBadSys, std::move(text)};
  }

  friend bool operator==(const PromptStrategy&, const PromptStrategy&) = default;
};

inline std::string to_string(PromptKind k) {
  switch (k) {
    case PromptKind::kDirect: return "direct";
    case PromptKind::kChatTemplate: return "chat";
    case PromptKind::kChatTemplateGoodSys: return "chat-good-sys";
    case PromptKind::kChatTemplateBadSys: return "chat-bad-sys";
  }
  return "direct";
}

inline PromptStrategy parse_strategy(const std::string& s) {
  if (s == "direct") return PromptStrategy::direct();
  if (s == "chat") return PromptStrategy::chat();
  if (s == "chat-good-sys") return PromptStrategy::good_sys();
  if (s == "chat-bad-sys") return PromptStrategy::bad_sys();
  throw InputError("unknown prompt strategy '" + s + "' (direct|chat|chat-good-sys|chat-bad-sys)");
}

// Mirrors the chat layout
//   <|system|> TEXT </s> <|user|> PROMPT </s> <|assistant|>
// where the system segment is present only for the system-message variants.
inline TokenSequence build_prompt(const Vocab& vocab, const TokenSequence& x, const PromptStrategy& strategy) {
  if (strategy.kind == PromptKind::kDirect) return x;
  Tokens out;
  if (strategy.kind == PromptKind::kChatTemplateGoodSys || strategy.kind == PromptKind::kChatTemplateBadSys) {
    if (strategy.system_text.empty()) throw InputError("system-message strategy needs a system text");
    out.push_back(vocab.id("<|system|>"));
    auto sys = vocab.encode(strategy.system_text);
    out.insert(out.end(), sys.begin(), sys.end());
    out.push_back(kEos);
  }
  out.push_back(vocab.id("<|user|>"));
  out.insert(out.end(), x.ids.begin(), x.ids.end());
  out.push_back(kEos);
  out.push_back(vocab.id("<|assistant|>"));
  return prompt(std::move(out));
}

struct PoolEntry {
  std::size_t example_id = 0;
  std::size_t cand_idx = 0;
  TokenSequence tokens;
  double logp_base = 0.0;
  PromptKind strategy = PromptKind::kDirect;
  std::uint64_t gen_seed = 0;

  Candidate candidate() const { return {tokens, logp_base, cand_idx}; }

  friend bool operator==(const PoolEntry&, const PoolEntry&) = default;
};

class PoolExhausted : public InputError {
 public:
  using InputError::InputError;
};

struct Pool {
  std::size_t m = 0;
  std::string base_params_hash;
  std::vector<std::vector<PoolEntry>> by_example;  // by_example[i][c] has cand_idx c

  std::size_t num_examples() const { return by_example.size(); }
  const std::vector<PoolEntry>& entries(std::size_t example_id) const {
    if (example_id >= by_example.size()) throw InputError("example id " + std::to_string(example_id) + " not in pool");
    return by_example[example_id];
  }

  friend bool operator==(const Pool&, const Pool&) = default;
};

// Runs body(i) for i in [0, n) on up to hardware_concurrency threads. Each
// index must write only its own output slot.
template <typename Body>
void parallel_for(std::size_t n, Body&& body, std::size_t threads = 0) {
  if (threads == 0) threads = std::max<std::size_t>(1, std::thread::hardware_concurrency());
  threads = std::min(threads, n);
  if (threads <= 1) {
    for (std::size_t i = 0; i < n; ++i) body(i);
    return;
  }
  std::vector<std::thread> workers;
  std::vector<std::exception_ptr> errors(threads);
  for (std::size_t w = 0; w < threads; ++w) {
    workers.emplace_back([&, w] {
      try {
        for (std::size_t i = w; i < n; i += threads) body(i);
      } catch (...) {
        errors[w] = std::current_exception();
      }
    });
  }
  for (auto& t : workers) t.join();
  for (auto& e : errors)
    if (e) std::rethrow_exception(e);
}

inline std::uint64_t candidate_seed(std::uint64_t seed, std::size_t example_id, std::size_t cand_idx) {
  return mix_seed(seed, example_id, cand_idx);
}

// m samples per prompt from the base model on the augmented prompt. Each
// candidate depends only on (gen_cfg.seed, example id, candidate index).
inline Pool generate_pool(const ModelParams& base, const Vocab& vocab, std::span<const TokenSequence> prompts,
                          std::size_t m, const GenConfig& gen_cfg, const PromptStrategy& strategy) {
  if (m < 1) throw InputError("pool depth m must be at least 1");
  gen_cfg.validate();
  Pool pool;
  pool.m = m;
  pool.base_params_hash = params_hash(base);
  pool.by_example.resize(prompts.size());
  parallel_for(prompts.size(), [&](std::size_t i) {
    const TokenSequence augmented = build_prompt(vocab, prompts[i], strategy);
    auto& slot = pool.by_example[i];
    slot.reserve(m);
    for (std::size_t c = 0; c < m; ++c) {
      GenConfig cfg = gen_cfg;
      cfg.seed = candidate_seed(gen_cfg.seed, i, c);
      TokenSequence y = sample(base, augmented, cfg);
      if (y.size() == 1) {  // only the terminator: retry once with a derived seed
        cfg.seed = mix_seed(cfg.seed, 1);
        y = sample(base, augmented, cfg);
      }
      const double lp = sequence_logprob(base, augmented, y);
      slot.push_back({i, c, std::move(y), lp, strategy.kind, cfg.seed});
    }
  });
  return pool;
}

// Largest |stored - recomputed| base log-probability over the listed entries.
inline double max_rescoring_error(const Pool& pool, const ModelParams& base, const Vocab& vocab,
                                  std::span<const TokenSequence> prompts, const PromptStrategy& strategy,
                                  std::span<const std::pair<std::size_t, std::size_t>> which) {
  double worst = 0.0;
  for (auto [i, c] : which) {
    const auto& e = pool.entries(i).at(c);
    if (e.strategy != strategy.kind) throw InputError("pool entry was generated with a different strategy");
    const auto augmented = build_prompt(vocab, prompts[i], strategy);
    worst = std::max(worst, std::abs(sequence_logprob(base, augmented, e.tokens) - e.logp_base));
  }
  return worst;
}

// Permutation of the m candidates of one example, fixed by (seed, example id, round).
inline std::vector<std::size_t> draw_order(std::size_t m, std::size_t example_id, std::uint64_t seed,
                                           std::size_t round = 0) {
  std::vector<std::size_t> order(m);
  std::iota(order.begin(), order.end(), std::size_t{0});
  std::mt19937_64 eng(round == 0 ? mix_seed(seed, example_id) : mix_seed(seed, example_id, round));
  shuffle(order, eng);
  return order;
}

// The visit_index-th block of B candidates of a seeded per-example
// permutation; no candidate repeats across visits.
inline std::vector<PoolEntry> draw_negatives(const Pool& pool, std::size_t example_id, std::size_t B,
                                             std::size_t visit_index, std::uint64_t seed) {
  if (B < 1) throw InputError("B must be at least 1");
  const auto& all = pool.entries(example_id);
  if ((visit_index + 1) * B > all.size()) {
    throw PoolExhausted("pool exhausted for example " + std::to_string(example_id) + ": visit " +
                        std::to_string(visit_index) + " needs " + std::to_string((visit_index + 1) * B) +
                        " candidates, pool depth is " + std::to_string(all.size()));
  }
  const auto order = draw_order(all.size(), example_id, seed);
  std::vector<PoolEntry> out;
  out.reserve(B);
  for (std::size_t r = visit_index * B; r < (visit_index + 1) * B; ++r) out.push_back(all[order[r]]);
  return out;
}

// As draw_negatives, but once the pool is used up a fresh permutation starts
// a new round. Round 0 coincides with draw_negatives.
inline std::vector<PoolEntry> draw_negatives_cycled(const Pool& pool, std::size_t example_id, std::size_t B,
                                                    std::size_t visit_index, std::uint64_t seed) {
  const auto& all = pool.entries(example_id);
  if (B < 1 || B > all.size()) throw InputError("B must lie in [1, m]");
  const std::size_t per_round = all.size() / B;
  const std::size_t round = visit_index / per_round;
  const std::size_t within = visit_index % per_round;
  const auto order = draw_order(all.size(), example_id, seed, round);
  std::vector<PoolEntry> out;
  out.reserve(B);
  for (std::size_t r = within * B; r < (within + 1) * B; ++r) out.push_back(all[order[r]]);
  return out;
}

// ---------------------------------------------------------------------------
// persistence

inline void save_pool(const Pool& pool, const std::string& path) {
  std::ofstream os(path, std::ios::trunc);
  if (!os) throw Error("cannot open " + path + " for writing");
  nlohmann::ordered_json header = {
      {"format", "dft-pool"}, {"version", 1}, {"m", pool.m}, {"base_params_hash", pool.base_params_hash}};
  os << header.dump() << '\n';
  for (const auto& slot : pool.by_example) {
    for (const auto& e : slot) {
      nlohmann::ordered_json rec = {{"example_id", e.example_id},
                            {"cand_idx", e.cand_idx},
                            {"tokens", e.tokens.ids},
                            {"logp_base", e.logp_base},
                            {"strategy", to_string(e.strategy)},
                            {"gen_seed", e.gen_seed}};
      os << rec.dump() << '\n';
    }
  }
  if (!os) throw Error("write failed for " + path);
}

inline Pool load_pool(const std::string& path) {
  std::ifstream is(path);
  if (!is) throw Error("cannot open " + path);
  std::string line;
  if (!std::getline(is, line) || line.empty()) throw FormatError(path + ": empty pool file");
  Pool pool;
  try {
    auto header = nlohmann::json::parse(line);
    if (header.value("format", "") != "dft-pool") throw FormatError(path + ": not a dft-pool file");
    if (header.value("version", 0) != 1) throw FormatError(path + ": unsupported pool version");
    pool.m = header.at("m").get<std::size_t>();
    pool.base_params_hash = header.at("base_params_hash").get<std::string>();
  } catch (const nlohmann::json::exception& e) {
    throw FormatError(path + ": bad header: " + e.what());
  }
  if (pool.m < 1) throw FormatError(path + ": m must be positive");

  std::map<std::size_t, std::vector<PoolEntry>> grouped;
  std::size_t lineno = 1;
  while (std::getline(is, line)) {
    ++lineno;
    if (line.empty()) continue;
    try {
      auto rec = nlohmann::json::parse(line);
      PoolEntry e;
      e.example_id = rec.at("example_id").get<std::size_t>();
      e.cand_idx = rec.at("cand_idx").get<std::size_t>();
      e.tokens = answer(rec.at("tokens").get<Tokens>());
      e.logp_base = rec.at("logp_base").get<double>();
      e.strategy = parse_strategy(rec.at("strategy").get<std::string>()).kind;
      e.gen_seed = rec.at("gen_seed").get<std::uint64_t>();
      if (!e.tokens.terminated()) throw FormatError("answer is not terminated");
      if (!(e.logp_base <= 0.0) || !std::isfinite(e.logp_base)) throw FormatError("logp_base must be finite and <= 0");
      grouped[e.example_id].push_back(std::move(e));
    } catch (const FormatError& e) {
      throw FormatError(path + ":" + std::to_string(lineno) + ": " + e.what());
    } catch (const std::exception& e) {
      throw FormatError(path + ":" + std::to_string(lineno) + ": " + e.what());
    }
  }
  const std::size_t n = grouped.empty() ? 0 : grouped.rbegin()->first + 1;
  pool.by_example.resize(n);
  for (auto& [id, entries] : grouped) {
    if (entries.size() != pool.m) {
      throw FormatError(path + ": example " + std::to_string(id) + " has " + std::to_string(entries.size()) +
                        " entries, header says m=" + std::to_string(pool.m));
    }
    std::sort(entries.begin(), entries.end(),
              [](const PoolEntry& a, const PoolEntry& b) { return a.cand_idx < b.cand_idx; });
    for (std::size_t c = 0; c < entries.size(); ++c) {
      if (entries[c].cand_idx != c) throw FormatError(path + ": example " + std::to_string(id) + " candidate indices are not 0..m-1");
    }
    pool.by_example[id] = std::move(entries);
  }
  for (std::size_t i = 0; i < n; ++i) {
    if (pool.by_example[i].empty()) throw FormatError(path + ": example " + std::to_string(i) + " missing");
  }
  return pool;
}

}  // namespace dft
