#pragma once

// Experiment harness: configuration files, base-model fitting, end-to-end
// runs with reports, evaluation, ablations and the oracle check table.

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <limits>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include <json.hpp>

#include "dft/core.hpp"
#include "dft/fcco.hpp"
#include "dft/model.hpp"
#include "dft/objectives.hpp"
#include "dft/oracle.hpp"
#include "dft/pool.hpp"
#include "dft/tasks.hpp"

namespace dft {

// ---------------------------------------------------------------------------
// configuration

struct ExperimentConfig {
  // data
  TaskName task = TaskName::kCompareNumbers;
  std::string task_file;  // overrides task/task_size/task_seed when set
  std::size_t task_size = 500;
  std::uint64_t task_seed = 1;

  // models
  std::size_t width = 32;
  std::size_t layers = 1;
  std::string base;             // params file; fitted from noisy labels when empty
  std::size_t base_epochs = 20;
  double base_lr = 3e-3;
  std::uint64_t base_seed = 7;
  std::string init = "base";    // base | random

  // negatives
  std::string pool;             // pool file; generated when empty
  std::size_t pool_m = 0;       // 0 means B * epochs
  std::string strategy;         // required when a pool is generated
  GenConfig gen;

  // training
  TrainConfig train;

  // reporting
  std::string out_dir = "run";
  std::size_t oracle_L = 0;     // > 0 adds the exact objective on answers up to this length
  std::size_t neg_eval = 8;     // pool candidates per example in the summary's negative log-lik
  std::vector<std::uint64_t> seeds{1};

  std::size_t effective_pool_m() const { return pool_m ? pool_m : train.B * train.epochs; }

  void validate() const {
    train.validate();
    gen.validate();
    if (width < 1 || layers < 1) throw InputError("width and layers must be positive");
    if (init != "base" && init != "random") throw InputError("init must be 'base' or 'random'");
    if (uses_pool(train.method) && pool.empty() && strategy.empty()) {
      throw InputError("strategy must be given explicitly when the pool is generated (direct|chat|chat-good-sys|chat-bad-sys)");
    }
    if (!strategy.empty()) parse_strategy(strategy);
    if (seeds.empty()) throw InputError("seeds must be non-empty");
  }
};

namespace detail {

inline std::string trim(const std::string& s) {
  const auto b = s.find_first_not_of(" \t\r");
  if (b == std::string::npos) return "";
  const auto e = s.find_last_not_of(" \t\r");
  return s.substr(b, e - b + 1);
}

inline double to_double(const std::string& key, const std::string& v) {
  try {
    std::size_t used = 0;
    const double out = std::stod(v, &used);
    if (used != v.size()) throw std::invalid_argument(v);
    return out;
  } catch (const std::exception&) {
    throw InputError("key '" + key + "': expected a number, got '" + v + "'");
  }
}

inline std::uint64_t to_uint(const std::string& key, const std::string& v) {
  try {
    std::size_t used = 0;
    if (!v.empty() && v[0] == '-') throw std::invalid_argument(v);
    const auto out = std::stoull(v, &used);
    if (used != v.size()) throw std::invalid_argument(v);
    return out;
  } catch (const std::exception&) {
    throw InputError("key '" + key + "': expected a non-negative integer, got '" + v + "'");
  }
}

inline bool to_bool(const std::string& key, const std::string& v) {
  if (v == "true" || v == "1") return true;
  if (v == "false" || v == "0") return false;
  throw InputError("key '" + key + "': expected true or false, got '" + v + "'");
}

inline std::vector<std::string> split_csv(const std::string& s) {
  std::vector<std::string> out;
  std::stringstream ss(s);
  std::string item;
  while (std::getline(ss, item, ',')) {
    item = trim(item);
    if (!item.empty()) out.push_back(item);
  }
  return out;
}

}  // namespace detail

// Applies one key=value setting. Unknown keys are errors.
inline void set_config_value(ExperimentConfig& c, const std::string& key, const std::string& v) {
  using namespace detail;
  auto& t = c.train;
  if (key == "task") c.task = parse_task_name(v);
  else if (key == "task_file") c.task_file = v;
  else if (key == "task_size") c.task_size = to_uint(key, v);
  else if (key == "task_seed") c.task_seed = to_uint(key, v);
  else if (key == "width") c.width = to_uint(key, v);
  else if (key == "layers") c.layers = to_uint(key, v);
  else if (key == "base") c.base = v;
  else if (key == "base_epochs") c.base_epochs = to_uint(key, v);
  else if (key == "base_lr") c.base_lr = to_double(key, v);
  else if (key == "base_seed") c.base_seed = to_uint(key, v);
  else if (key == "init") c.init = v;
  else if (key == "pool") c.pool = v;
  else if (key == "pool_m") c.pool_m = to_uint(key, v);
  else if (key == "strategy") c.strategy = v;
  else if (key == "gen_temperature") c.gen.temperature = to_double(key, v);
  else if (key == "gen_top_k") c.gen.top_k = to_uint(key, v);
  else if (key == "gen_top_p") c.gen.top_p = to_double(key, v);
  else if (key == "gen_max_tokens") c.gen.max_tokens = to_uint(key, v);
  else if (key == "gen_seed") c.gen.seed = to_uint(key, v);
  else if (key == "method") {
    // switching to a discriminative variant picks up its tau / gamma / scoring defaults
    const Method m = parse_method(v);
    if (m == Method::kDft || m == Method::kDft2) {
      TrainConfig d = m == Method::kDft ? TrainConfig::dft_defaults() : TrainConfig::dft2_defaults();
      t.tau = d.tau;
      t.gamma = d.gamma;
      t.mode = d.mode;
    }
    t.method = m;
  }
  else if (key == "tau") t.tau = to_double(key, v);
  else if (key == "gamma") t.gamma = to_double(key, v);
  else if (key == "B") t.B = to_uint(key, v);
  else if (key == "epochs") t.epochs = to_uint(key, v);
  else if (key == "batch_size") t.batch_size = to_uint(key, v);
  else if (key == "lr") t.lr = to_double(key, v);
  else if (key == "warmup_ratio") t.warmup_ratio = to_double(key, v);
  else if (key == "schedule") t.schedule = parse_schedule(v);
  else if (key == "mode") t.mode = parse_scoring_mode(v);
  else if (key == "weight_decay") t.adamw.weight_decay = to_double(key, v);
  else if (key == "beta1") t.adamw.beta1 = to_double(key, v);
  else if (key == "beta2") t.adamw.beta2 = to_double(key, v);
  else if (key == "eps") t.adamw.eps = to_double(key, v);
  else if (key == "clip_norm") t.clip_norm = to_double(key, v);
  else if (key == "beta") t.beta = to_double(key, v);
  else if (key == "margin") t.margin = to_double(key, v);
  else if (key == "recycle_pool") t.recycle_pool = to_bool(key, v);
  else if (key == "seed") t.seed = to_uint(key, v);
  else if (key == "out_dir") c.out_dir = v;
  else if (key == "oracle_L") c.oracle_L = to_uint(key, v);
  else if (key == "neg_eval") c.neg_eval = to_uint(key, v);
  else if (key == "seeds") {
    c.seeds.clear();
    for (const auto& s : split_csv(v)) c.seeds.push_back(to_uint(key, s));
  }
  else throw InputError("unknown config key '" + key + "'");
}

// Flat key=value text; '#' starts a comment. Later keys override earlier ones.
inline ExperimentConfig parse_config(std::istream& is, const std::string& origin = "<config>") {
  ExperimentConfig c;
  std::string line;
  std::size_t lineno = 0;
  while (std::getline(is, line)) {
    ++lineno;
    if (auto hash = line.find('#'); hash != std::string::npos) line.resize(hash);
    line = detail::trim(line);
    if (line.empty()) continue;
    const auto eq = line.find('=');
    if (eq == std::string::npos) throw InputError(origin + ":" + std::to_string(lineno) + ": expected key=value");
    try {
      set_config_value(c, detail::trim(line.substr(0, eq)), detail::trim(line.substr(eq + 1)));
    } catch (const InputError& e) {
      throw InputError(origin + ":" + std::to_string(lineno) + ": " + e.what());
    }
  }
  return c;
}

inline ExperimentConfig load_config(const std::string& path) {
  std::ifstream is(path);
  if (!is) throw Error("cannot open " + path);
  return parse_config(is, path);
}

// ---------------------------------------------------------------------------
// evaluation

struct EvalReport {
  std::size_t n = 0;
  double accuracy = 0.0;           // greedy exact match
  double pos_loglik = 0.0;         // mean log P(y_pos | x)
  double bad_loglik = 0.0;         // mean log P(y_bad | x)
  double pairwise_accuracy = 0.0;  // fraction with log P(y_bad) < log P(y_pos)
};

inline EvalReport evaluate(const ModelParams& params, std::span<const Example> data,
                           std::span<const TokenSequence> bad) {
  if (data.empty()) throw InputError("evaluation set is empty");
  if (bad.size() != data.size()) throw InputError("need one bad answer per evaluation example");
  std::size_t max_len = 1;
  for (const auto& ex : data) max_len = std::max(max_len, ex.y.size());
  GenConfig greedy;
  greedy.temperature = 0.0;
  greedy.max_tokens = max_len;

  std::vector<double> hit(data.size()), pos(data.size()), neg(data.size());
  parallel_for(data.size(), [&](std::size_t i) {
    hit[i] = sample(params, data[i].x, greedy) == data[i].y ? 1.0 : 0.0;
    pos[i] = sequence_logprob(params, data[i].x, data[i].y);
    neg[i] = sequence_logprob(params, data[i].x, bad[i]);
  });
  EvalReport r;
  r.n = data.size();
  for (std::size_t i = 0; i < data.size(); ++i) {
    r.accuracy += hit[i];
    r.pos_loglik += pos[i];
    r.bad_loglik += neg[i];
    r.pairwise_accuracy += neg[i] < pos[i] ? 1.0 : 0.0;
  }
  const double inv = 1.0 / static_cast<double>(data.size());
  r.accuracy *= inv;
  r.pos_loglik *= inv;
  r.bad_loglik *= inv;
  r.pairwise_accuracy *= inv;
  return r;
}

inline EvalReport evaluate(const ModelParams& params, const SyntheticTask& task) {
  return evaluate(params, task.test, task.test_bad);
}

// Mean log P(y' | x) over the first `per_example` candidates of every example.
inline double mean_pool_loglik(const ModelParams& params, std::span<const Example> data, const Pool& pool,
                               std::size_t per_example) {
  if (pool.num_examples() < data.size()) throw InputError("pool covers fewer examples than the data");
  const std::size_t k = std::min(per_example, pool.m);
  if (k == 0) throw InputError("need at least one candidate per example");
  std::vector<double> sums(data.size(), 0.0);
  parallel_for(data.size(), [&](std::size_t i) {
    const auto& entries = pool.entries(i);
    for (std::size_t c = 0; c < k; ++c) sums[i] += sequence_logprob(params, data[i].x, entries[c].tokens);
  });
  double total = 0.0;
  for (double s : sums) total += s;
  return total / static_cast<double>(data.size() * k);
}

// ---------------------------------------------------------------------------
// models and data for a run

inline SyntheticTask load_or_make_task(const ExperimentConfig& c) {
  return c.task_file.empty() ? make_task(c.task, c.task_size, c.task_seed) : load_task(c.task_file);
}

// Training pairs with each answer swapped for the known-bad one with probability 1/2.
inline std::vector<Example> noisy_labels(const SyntheticTask& task, std::uint64_t seed) {
  std::mt19937_64 eng(mix_seed(seed, 0x6e6f697379ULL));
  std::vector<Example> out;
  out.reserve(task.train.size());
  for (std::size_t i = 0; i < task.train.size(); ++i) {
    const bool swap = uniform01(eng) < 0.5;
    out.push_back({task.train[i].x, swap ? task.train_bad[i] : task.train[i].y});
  }
  return out;
}

// A base model that knows the answer format but not the rule: SFT from a
// random init on noisy labels.
inline ModelParams make_base_model(const SyntheticTask& task, std::size_t width, std::size_t layers,
                                   std::size_t epochs, double lr, std::uint64_t seed) {
  const ModelConfig mc{task.vocab.size(), width, layers};
  ModelParams init = ModelParams::random(mc, seed);
  if (epochs == 0) return init;
  const auto data = noisy_labels(task, seed);
  TrainConfig tc;
  tc.method = Method::kSft;
  tc.epochs = epochs;
  tc.lr = lr;
  tc.seed = seed;
  return train(init, TrainInputs{data, nullptr, nullptr, {}}, tc).params;
}

inline ModelParams resolve_base(const ExperimentConfig& c, const SyntheticTask& task) {
  if (!c.base.empty()) {
    return load_params(c.base, ModelConfig{task.vocab.size(), c.width, c.layers});
  }
  return make_base_model(task, c.width, c.layers, c.base_epochs, c.base_lr, c.base_seed);
}

inline Pool resolve_pool(const ExperimentConfig& c, const SyntheticTask& task, const ModelParams& base) {
  if (!c.pool.empty()) {
    Pool p = load_pool(c.pool);
    if (p.base_params_hash != params_hash(base)) {
      throw InputError("pool " + c.pool + " was generated from a different base model");
    }
    return p;
  }
  GenConfig g = c.gen;
  g.max_tokens = std::max<std::size_t>(g.max_tokens, 1);
  return generate_pool(base, task.vocab, task.train_prompts(), c.effective_pool_m(), g, parse_strategy(c.strategy));
}

// A pool holding every answer of the space for each of n examples, each
// tagged with the uniform proposal log(1/|Y|). With B = |Y| a draw is the
// whole space and the importance-weighted mean equals the plain sum.
inline Pool exhaustive_pool(const OutputSpace& space, std::size_t n) {
  Pool pool;
  pool.m = space.size();
  pool.base_params_hash = "uniform";
  pool.by_example.resize(n);
  for (std::size_t i = 0; i < n; ++i) {
    for (std::size_t c = 0; c < space.size(); ++c) {
      pool.by_example[i].push_back({i, c, space.answers[c], space.uniform_logp(), PromptKind::kDirect, 0});
    }
  }
  return pool;
}

// ---------------------------------------------------------------------------
// runs

struct RunReport {
  std::string method;
  std::uint64_t seed = 0;
  std::size_t steps = 0;
  EvalReport test;
  double pool_neg_loglik = 0.0;  // mean over pool candidates, NaN when no pool
  double exact_F = std::numeric_limits<double>::quiet_NaN();
  std::vector<MetricsRow> metrics;
  ModelParams params;
  std::string params_hash;

  nlohmann::json summary() const {
    auto num = [](double v) { return std::isfinite(v) ? nlohmann::json(v) : nlohmann::json(nullptr); };
    return {{"method", method},
            {"seed", seed},
            {"steps", steps},
            {"test_size", test.n},
            {"test_accuracy", test.accuracy},
            {"test_pos_loglik", test.pos_loglik},
            {"test_bad_loglik", test.bad_loglik},
            {"test_pairwise_accuracy", test.pairwise_accuracy},
            {"pool_neg_loglik", num(pool_neg_loglik)},
            {"exact_F", num(exact_F)},
            {"params_hash", params_hash}};
  }
};

// Shared inputs of runs that differ only in training settings.
struct RunContext {
  SyntheticTask task;
  ModelParams base;
  std::optional<Pool> pool;
};

inline RunContext prepare(const ExperimentConfig& c) {
  c.validate();
  RunContext ctx{load_or_make_task(c), ModelParams(), std::nullopt};
  ctx.base = resolve_base(c, ctx.task);
  if (uses_pool(c.train.method) || !c.pool.empty() || !c.strategy.empty()) ctx.pool = resolve_pool(c, ctx.task, ctx.base);
  return ctx;
}

inline RunReport run(const ExperimentConfig& c, const RunContext& ctx, const StepCallback& on_step = {}) {
  c.validate();
  const auto& task = ctx.task;
  const ModelParams init =
      c.init == "base" ? ctx.base : ModelParams::random(ctx.base.config(), mix_seed(c.train.seed, 0x696e6974ULL));
  TrainInputs in{task.train, ctx.pool ? &*ctx.pool : nullptr, &ctx.base, task.train_bad};
  auto res = train(init, in, c.train, on_step);

  RunReport r;
  r.method = to_string(c.train.method);
  r.seed = c.train.seed;
  r.steps = res.steps;
  r.test = evaluate(res.params, task);
  r.pool_neg_loglik =
      ctx.pool ? mean_pool_loglik(res.params, task.train, *ctx.pool, c.neg_eval) : std::numeric_limits<double>::quiet_NaN();
  if (c.oracle_L > 0) {
    const auto space = enumerate_outputs(task.vocab.size(), c.oracle_L);
    r.exact_F = exact_objective(res.params, task.train, space, c.train.tau, c.train.mode);
  }
  r.metrics = std::move(res.metrics);
  r.params = std::move(res.params);
  r.params_hash = params_hash(r.params);
  return r;
}

inline void write_report(const RunReport& r, const std::string& dir) {
  std::filesystem::create_directories(dir);
  {
    std::ofstream os(dir + "/metrics.csv", std::ios::trunc);
    if (!os) throw Error("cannot write " + dir + "/metrics.csv");
    write_metrics_csv(os, r.metrics);
  }
  save_params(r.params, dir + "/params.bin");
  std::ofstream os(dir + "/summary.json", std::ios::trunc);
  if (!os) throw Error("cannot write " + dir + "/summary.json");
  os << r.summary().dump(2) << '\n';
}

// Prepares, trains and writes metrics.csv, params.bin and summary.json under
// out_dir. A generated pool is saved next to them as pool.jsonl.
inline RunReport run(const ExperimentConfig& c) {
  auto ctx = prepare(c);
  std::filesystem::create_directories(c.out_dir);
  if (ctx.pool && c.pool.empty()) save_pool(*ctx.pool, c.out_dir + "/pool.jsonl");
  if (c.base.empty()) save_params(ctx.base, c.out_dir + "/base.bin");
  auto r = run(c, ctx);
  write_report(r, c.out_dir);
  return r;
}

// ---------------------------------------------------------------------------
// ablations

enum class AblationAxis { kGamma, kB, kGenTemperature };

inline AblationAxis parse_axis(const std::string& s) {
  if (s == "gamma") return AblationAxis::kGamma;
  if (s == "B") return AblationAxis::kB;
  if (s == "gen_temperature") return AblationAxis::kGenTemperature;
  throw InputError("unknown ablation axis '" + s + "' (gamma|B|gen_temperature)");
}

inline std::string to_string(AblationAxis a) {
  switch (a) {
    case AblationAxis::kGamma: return "gamma";
    case AblationAxis::kB: return "B";
    case AblationAxis::kGenTemperature: return "gen_temperature";
  }
  return "gamma";
}

struct AblationRow {
  double value = 0.0;
  std::size_t runs = 0;
  double median_exact_F = 0.0;  // NaN without an oracle length
  double median_pairwise_accuracy = 0.0;
  double median_accuracy = 0.0;
  double median_pool_neg_loglik = 0.0;
  std::size_t candidates_per_step = 0;
};

inline double median(std::vector<double> xs) {
  if (xs.empty()) throw InputError("median of an empty list");
  std::sort(xs.begin(), xs.end());
  const std::size_t n = xs.size();
  return n % 2 ? xs[n / 2] : 0.5 * (xs[n / 2 - 1] + xs[n / 2]);
}

// One row per value: every seed of c.seeds is run with the value applied.
// Each (value, seed) run depends only on that pair, so the value order does
// not change any row.
inline std::vector<AblationRow> ablate(const ExperimentConfig& c, AblationAxis axis, std::span<const double> values) {
  if (values.empty()) throw InputError("ablation values must be non-empty");
  c.validate();
  const auto task = load_or_make_task(c);
  const auto base = resolve_base(c, task);
  std::vector<AblationRow> rows;
  for (double v : values) {
    ExperimentConfig cv = c;
    switch (axis) {
      case AblationAxis::kGamma: cv.train.gamma = v; break;
      case AblationAxis::kB:
        if (v < 1 || v != std::floor(v)) throw InputError("B values must be positive integers");
        cv.train.B = static_cast<std::size_t>(v);
        break;
      case AblationAxis::kGenTemperature: cv.gen.temperature = v; break;
    }
    std::vector<double> F, pair, acc, neg;
    AblationRow row;
    row.value = v;
    for (auto seed : c.seeds) {
      ExperimentConfig cs = cv;
      cs.train.seed = seed;
      cs.gen.seed = seed;
      RunContext ctx{task, base, std::nullopt};
      if (uses_pool(cs.train.method)) ctx.pool = resolve_pool(cs, task, base);
      auto r = run(cs, ctx);
      F.push_back(r.exact_F);
      pair.push_back(r.test.pairwise_accuracy);
      acc.push_back(r.test.accuracy);
      neg.push_back(r.pool_neg_loglik);
      if (!r.metrics.empty()) row.candidates_per_step = r.metrics.front().candidates_per_item;
      ++row.runs;
    }
    row.median_exact_F = c.oracle_L > 0 ? median(F) : std::numeric_limits<double>::quiet_NaN();
    row.median_pairwise_accuracy = median(pair);
    row.median_accuracy = median(acc);
    row.median_pool_neg_loglik = std::isnan(neg.front()) ? std::numeric_limits<double>::quiet_NaN() : median(neg);
    rows.push_back(row);
  }
  return rows;
}

inline void write_ablation_csv(std::ostream& os, AblationAxis axis, std::span<const AblationRow> rows) {
  os << to_string(axis) << ",runs,median_exact_F,median_pairwise_accuracy,median_accuracy,median_pool_neg_loglik,"
     << "candidates_per_step\n";
  char buf[512];
  for (const auto& r : rows) {
    std::snprintf(buf, sizeof(buf), "%.17g,%zu,%.17g,%.17g,%.17g,%.17g,%zu\n", r.value, r.runs, r.median_exact_F,
                  r.median_pairwise_accuracy, r.median_accuracy, r.median_pool_neg_loglik, r.candidates_per_step);
    os << buf;
  }
}

// ---------------------------------------------------------------------------
// oracle check

struct CheckResult {
  std::string name;
  bool pass = false;
  std::string detail;
};

// Fixed probe prompts of two content tokens.
inline std::vector<TokenSequence> probe_prompts(std::size_t vocab, std::size_t count = 3) {
  std::vector<TokenSequence> out;
  const std::size_t k_eff = std::max<std::size_t>(vocab - 1, 1);
  for (std::size_t i = 0; i < count; ++i) {
    const auto a = static_cast<TokenId>(vocab > 1 ? 1 + (i % k_eff) : 0);
    const auto b = static_cast<TokenId>(vocab > 1 ? 1 + ((2 * i + 1) % k_eff) : 0);
    out.push_back(prompt({a, b}));
  }
  return out;
}

// The oracle invariant suite against one checkpoint. Non-finite parameters
// fail the first check with the offending coordinate and skip the rest.
inline std::vector<CheckResult> oracle_check(const ModelParams& params, std::size_t L, double tau, ScoringMode mode,
                                             std::size_t fd_coords = 24) {
  std::vector<CheckResult> out;
  const auto flat = params.flat();
  for (std::size_t k = 0; k < flat.size(); ++k) {
    if (!std::isfinite(flat[k])) {
      out.push_back({"finite parameters", false, "non-finite value at coordinate " + std::to_string(k)});
      return out;
    }
  }
  out.push_back({"finite parameters", true, std::to_string(flat.size()) + " coordinates"});
  if (!(tau > 0.0)) throw InputError("tau must be positive");

  const std::size_t K = params.config().vocab;
  const auto space = enumerate_outputs(K, L);
  const auto prompts = probe_prompts(K);
  char buf[256];

  double worst_norm = 0.0;
  bool argmax_ok = true;
  for (const auto& x : prompts) {
    const auto p = discriminative_distribution(params, x, space, tau, mode);
    double total = 0.0;
    for (double v : p) total += v;
    worst_norm = std::max(worst_norm, std::abs(total - 1.0));
    const auto s = space_scores(params, x, space, mode);
    argmax_ok = argmax_ok && std::max_element(p.begin(), p.end()) - p.begin() ==
                                 std::max_element(s.begin(), s.end()) - s.begin();
  }
  std::snprintf(buf, sizeof(buf), "max |sum P_d - 1| = %.3g over %zu answers", worst_norm, space.size());
  out.push_back({"normalization", worst_norm <= 1e-12, buf});
  out.push_back({"argmax invariance", argmax_ok, "argmax P_d equals argmax score"});

  // Targets are spread over the space in a fixed pattern.
  std::vector<Example> data;
  for (std::size_t i = 0; i < prompts.size(); ++i) data.push_back({prompts[i], space.answers[(7 * i + 1) % space.size()]});
  const auto terms = exact_objective_terms(params, data, space, tau, mode);
  const auto cands = space.as_candidates(space.uniform_logp());
  double worst_terms = 0.0;
  for (std::size_t i = 0; i < data.size(); ++i) {
    const auto lv = dft_exact_loss(params, data[i].x, data[i].y, cands, tau, mode, Variant::kDft);
    worst_terms = std::max(worst_terms, std::abs(lv.value - terms[i]));
  }
  std::snprintf(buf, sizeof(buf), "max |loss - F term| = %.3g", worst_terms);
  out.push_back({"exact loss equals objective", worst_terms <= 1e-10, buf});

  const auto analytic = exact_objective_with_grad(params, data, space, tau, mode);
  std::vector<std::size_t> coords;
  std::mt19937_64 eng(0x636f6f726473ULL);
  for (std::size_t j = 0; j < std::min(fd_coords, params.size()); ++j) {
    coords.push_back(static_cast<std::size_t>(uniform01(eng) * static_cast<double>(params.size())));
  }
  const auto fd = finite_difference_grad(
      [&](const ModelParams& p) { return exact_objective(p, data, space, tau, mode); }, params, 1e-5, coords);
  const double rel = max_relative_error(analytic.gradient, fd, 1e-6, coords);
  std::snprintf(buf, sizeof(buf), "max rel. error %.3g on %zu coordinates", rel, coords.size());
  out.push_back({"gradient vs finite differences", rel < 1e-4, buf});
  return out;
}

}  // namespace dft
