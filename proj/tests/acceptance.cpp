// One PASS/FAIL line per acceptance criterion. Exit status is nonzero when any
// criterion fails.

#include <chrono>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <functional>
#include <limits>
#include <numeric>
#include <random>
#include <string>

#include "dft/experiment.hpp"
#include "reference_model.hpp"

namespace {

using namespace dft;
namespace fs = std::filesystem;

using Clock = std::chrono::steady_clock;

double seconds_since(Clock::time_point t0) { return std::chrono::duration<double>(Clock::now() - t0).count(); }

struct Outcome {
  bool pass = false;
  std::string detail;
};

std::string fmt(const char* f, auto... args) {
  char buf[512];
  std::snprintf(buf, sizeof(buf), f, args...);
  return buf;
}

std::string slurp(const std::string& path) {
  std::ifstream is(path, std::ios::binary);
  return {std::istreambuf_iterator<char>(is), std::istreambuf_iterator<char>()};
}

// ---------------------------------------------------------------------------
// 1. exact loss over all of Y equals the objective's per-example terms

Outcome oracle_equivalence() {
  const auto t0 = Clock::now();
  const auto space = enumerate_outputs(3, 2);  // K_eff = 2
  std::vector<Example> data{{prompt({1, 2}), answer({2, kEos})},
                            {prompt({2}), answer({kEos})},
                            {prompt({1, 1, 2}), answer({1, kEos})}};
  const auto cands = space.as_candidates(space.uniform_logp());
  double worst = 0.0;
  std::size_t checked = 0;
  for (std::uint64_t seed = 0; seed < 10; ++seed) {
    const auto p = testing::fully_random({3, 8, 1}, seed);
    for (double tau : {1.0, 0.3}) {
      for (auto mode : {ScoringMode::kUnnormalized, ScoringMode::kLengthNormalized}) {
        const auto terms = exact_objective_terms(p, data, space, tau, mode);
        for (std::size_t i = 0; i < data.size(); ++i) {
          const auto lv = dft_exact_loss(p, data[i].x, data[i].y, cands, tau, mode, Variant::kDft);
          worst = std::max(worst, std::abs(lv.value - terms[i]));
          ++checked;
        }
      }
    }
  }
  const double t = seconds_since(t0);
  return {worst <= 1e-10 && t < 5.0, fmt("max |diff| %.2e over %zu terms, %.2f s", worst, checked, t)};
}

// ---------------------------------------------------------------------------
// 2. analytic gradients of every loss against central differences

Outcome gradient_fidelity() {
  const auto t0 = Clock::now();
  const ModelConfig cfg{4, 8, 1};
  const auto space = enumerate_outputs(4, 2);
  const auto x = prompt({1, 3, 2});
  const auto y_win = answer({2, kEos});
  const auto y_lose = answer({3, 1, kEos});
  double worst = 0.0;
  std::string worst_name = "none";
  auto check = [&](const std::string& name, const LossValue& lv, const ParamFunction& f, const ModelParams& p) {
    const auto num = finite_difference_grad(f, p, 1e-5);
    const double e = max_relative_error(lv.gradient, num);
    if (e > worst) {
      worst = e;
      worst_name = name;
    }
  };
  const std::size_t seeds = 20;
  for (std::uint64_t seed = 0; seed < seeds; ++seed) {
    const auto p = testing::fully_random(cfg, 100 + seed);
    const auto ref = testing::fully_random(cfg, 500 + seed);
    std::vector<Candidate> cands;
    for (std::size_t i = 0; i < space.size(); ++i) {
      cands.push_back({space.answers[i], sequence_logprob(ref, x, space.answers[i]), i});
    }
    std::vector<Example> batch{{x, y_win}, {prompt({2}), y_lose}};
    check("sft", sft_loss(p, batch), [&](const ModelParams& q) { return sft_loss(q, batch).value; }, p);
    for (auto variant : {Variant::kDft, Variant::kDft2}) {
      for (auto mode : {ScoringMode::kUnnormalized, ScoringMode::kLengthNormalized}) {
        const double tau = variant == Variant::kDft ? 1.0 : 0.3;
        check(to_string(variant) + "/" + to_string(mode), dft_exact_loss(p, x, y_win, cands, tau, mode, variant),
              [&](const ModelParams& q) { return dft_exact_loss(q, x, y_win, cands, tau, mode, variant).value; }, p);
      }
    }
    check("dpo", dpo_loss(p, ref, x, y_win, y_lose, 0.5),
          [&](const ModelParams& q) { return dpo_loss(q, ref, x, y_win, y_lose, 0.5).value; }, p);
    check("simpo", simpo_loss(p, x, y_win, y_lose, 2.0, 1.0),
          [&](const ModelParams& q) { return simpo_loss(q, x, y_win, y_lose, 2.0, 1.0).value; }, p);
    check("spin", spin_loss(p, ref, x, y_win, y_lose, 0.5),
          [&](const ModelParams& q) { return spin_loss(q, ref, x, y_win, y_lose, 0.5).value; }, p);
  }
  const double t = seconds_since(t0);
  return {worst < 1e-4 && t < 120.0,
          fmt("max rel. error %.2e (%s) over %zu seeds x 8 losses, %.1f s", worst, worst_name.c_str(), seeds, t)};
}

// ---------------------------------------------------------------------------
// 3. log-domain estimator against the linear one, extremes and fuzz

Outcome estimator_correctness() {
  const auto t0 = Clock::now();
  std::mt19937_64 eng(2024);
  std::uniform_real_distribution<double> lw_dist(-30.0, 30.0), gamma_dist(0.01, 1.0);
  double worst = 0.0;
  for (int trial = 0; trial < 5000; ++trial) {
    const double gamma = trial % 10 == 0 ? 1.0 : gamma_dist(eng);
    const double u_log = lw_dist(eng);
    std::vector<double> lw(1 + trial % 7);
    for (double& v : lw) v = lw_dist(eng);
    double mean = 0.0;
    for (double v : lw) mean += std::exp(v);
    mean /= static_cast<double>(lw.size());
    const double want = update_u_linear(std::exp(u_log), mean, gamma);
    const double got = std::exp(update_u_log(u_log, lw, gamma));
    worst = std::max(worst, std::abs(got - want) / std::abs(want));
  }

  bool finite = true;
  for (double mag : {1e3, 1e5, 1e6}) {
    for (double u_sign : {-1.0, 1.0}) {
      for (double w_sign : {-1.0, 1.0}) {
        std::vector<double> lw{w_sign * mag, w_sign * mag * 0.5, -w_sign * mag};
        for (double gamma : {0.85, 0.9, 1.0}) finite = finite && std::isfinite(update_u_log(u_sign * mag, lw, gamma));
      }
    }
  }

  std::uniform_real_distribution<double> wild(-1e6, 1e6);
  std::vector<double> state(16, 0.0);
  std::size_t bad_steps = 0;
  for (int step = 0; step < 10000; ++step) {
    const auto i = static_cast<std::size_t>(step) % state.size();
    std::vector<double> lw(1 + step % 4);
    for (double& v : lw) v = step % 3 == 0 ? wild(eng) : lw_dist(eng);
    state[i] = update_u_log(state[i], lw, step % 5 == 0 ? 1.0 : gamma_dist(eng));
    if (!std::isfinite(state[i])) ++bad_steps;
  }
  const double t = seconds_since(t0);
  return {worst < 1e-10 && finite && bad_steps == 0 && t < 30.0,
          fmt("log vs linear max rel. error %.2e; finite at 1e6: %s; fuzz non-finite steps %zu/10000; %.2f s", worst,
              finite ? "yes" : "no", bad_steps, t)};
}

// ---------------------------------------------------------------------------
// 4. G_t in the exact regime against differences of exact F

Outcome exact_regime_estimator() {
  const auto space = enumerate_outputs(3, 2);
  std::vector<Example> data{{prompt({1, 2}), answer({2, kEos})}, {prompt({2}), answer({kEos})}};
  double worst = 0.0;
  for (std::uint64_t seed = 0; seed < 5; ++seed) {
    const auto p = testing::fully_random({3, 8, 1}, 40 + seed);
    for (auto variant : {Variant::kDft, Variant::kDft2}) {
      for (auto mode : {ScoringMode::kUnnormalized, ScoringMode::kLengthNormalized}) {
        const double tau = variant == Variant::kDft ? 1.0 : 0.3;
        std::vector<MinibatchItem> items;
        for (std::size_t i = 0; i < data.size(); ++i) items.push_back({i, space.as_candidates(space.uniform_logp())});
        EstimatorState st(data.size(), 1.0);
        refresh_estimators(p, data, items, st, tau, mode, variant);
        const auto est = gradient_estimate(p, data, items, st, tau, mode, variant);
        const auto num = finite_difference_grad(
            [&](const ModelParams& q) { return exact_objective(q, data, space, tau, mode); }, p, 1e-5);
        worst = std::max(worst, max_relative_error(est.gradient, num));
      }
    }
  }
  return {worst < 1e-4, fmt("max rel. error %.2e over 5 seeds x 2 variants x 2 modes", worst)};
}

// ---------------------------------------------------------------------------
// 5 and 6. paired runs on CompareNumbers

ExperimentConfig compare_config(Method method, std::uint64_t seed) {
  ExperimentConfig c;
  c.task = TaskName::kCompareNumbers;
  c.task_size = 500;
  c.width = 32;
  c.layers = 1;
  c.strategy = "direct";
  c.gen.max_tokens = 3;
  set_config_value(c, "method", to_string(method));
  c.train.epochs = 63;  // 32 steps per epoch, 2016 steps
  c.train.seed = seed;
  c.gen.seed = seed;
  c.base_seed = seed;
  return c;
}

struct Window {
  double start = 0.0;
  double end = 0.0;
};

// Means over the first and last epoch of logged steps.
Window window(const std::vector<MetricsRow>& m, double MetricsRow::*field) {
  const std::size_t w = std::min<std::size_t>(32, m.size());
  Window out;
  for (std::size_t i = 0; i < w; ++i) {
    out.start += m[i].*field / static_cast<double>(w);
    out.end += m[m.size() - w + i].*field / static_cast<double>(w);
  }
  return out;
}

struct CompareRuns {
  std::vector<double> sft_pairwise, dft_pairwise;
  Window dft_pos, dft_neg, sft_pos, simpo_pos;
  double mechanism_seconds = 0.0;
};

CompareRuns compare_runs() {
  CompareRuns out;
  for (std::uint64_t seed = 1; seed <= 5; ++seed) {
    const auto t0 = Clock::now();
    const auto dft_cfg = compare_config(Method::kDft, seed);
    const auto ctx = prepare(dft_cfg);
    const auto dft = run(dft_cfg, ctx);
    const auto sft = run(compare_config(Method::kSft, seed), RunContext{ctx.task, ctx.base, std::nullopt});
    out.dft_pairwise.push_back(dft.test.pairwise_accuracy);
    out.sft_pairwise.push_back(sft.test.pairwise_accuracy);
    std::printf("  seed %llu: pairwise DFT %.2f SFT %.2f | accuracy DFT %.2f SFT %.2f\n",
                static_cast<unsigned long long>(seed), dft.test.pairwise_accuracy, sft.test.pairwise_accuracy,
                dft.test.accuracy, sft.test.accuracy);
    std::fflush(stdout);
    if (seed == 1) {
      out.dft_pos = window(dft.metrics, &MetricsRow::pos_loglik_mean);
      out.dft_neg = window(dft.metrics, &MetricsRow::neg_loglik_mean);
      out.sft_pos = window(sft.metrics, &MetricsRow::pos_loglik_mean);
      const auto simpo = run(compare_config(Method::kSimpo, seed), ctx);
      out.simpo_pos = window(simpo.metrics, &MetricsRow::pos_loglik_mean);
      out.mechanism_seconds = seconds_since(t0);
    }
  }
  return out;
}

Outcome mechanism(const CompareRuns& r) {
  const bool neg_down = r.dft_neg.end < r.dft_neg.start;
  const double gap = std::abs(r.dft_pos.end - r.sft_pos.end);
  const bool simpo_down = r.simpo_pos.end < r.simpo_pos.start;
  return {neg_down && gap <= 1.0 && simpo_down && r.mechanism_seconds < 600.0,
          fmt("DFT negatives %.2f -> %.2f; final positives DFT %.2f vs SFT %.2f (gap %.2f nat); SimPO positives %.2f "
              "-> %.2f; %.0f s",
              r.dft_neg.start, r.dft_neg.end, r.dft_pos.end, r.sft_pos.end, gap, r.simpo_pos.start, r.simpo_pos.end,
              r.mechanism_seconds)};
}

Outcome motivating_example(const CompareRuns& r) {
  const double dft = median(r.dft_pairwise), sft = median(r.sft_pairwise);
  return {dft >= 0.95 && sft < dft, fmt("median y_bad < y_pos rate: DFT %.2f, SFT %.2f over 5 seeds", dft, sft)};
}

// ---------------------------------------------------------------------------
// 7. gamma ablation and estimator variance

ExperimentConfig gamma_config() {
  ExperimentConfig c;
  c.task_size = 200;
  c.width = 16;
  c.strategy = "direct";
  c.gen.max_tokens = 3;
  set_config_value(c, "method", "DFT");
  c.train.epochs = 16;
  c.train.B = 2;
  c.oracle_L = 3;
  c.seeds = {1, 2, 3, 4, 5};
  return c;
}

// Mean per-coordinate variance of G_t over resampled minibatches, every
// resample starting from the same estimator state.
double estimator_variance(const ModelParams& params, const RunContext& ctx, const EstimatorState& state,
                          const TrainConfig& cfg, double gamma, std::size_t resamples) {
  const auto& data = ctx.task.train;
  std::vector<Gradient> gs;
  for (std::size_t r = 0; r < resamples; ++r) {
    std::mt19937_64 eng(mix_seed(0x7661726961ULL, r));
    std::vector<std::size_t> order(data.size());
    std::iota(order.begin(), order.end(), 0);
    shuffle(order, eng);
    std::vector<MinibatchItem> items;
    for (std::size_t j = 0; j < cfg.batch_size; ++j) {
      const std::size_t i = order[j];
      std::vector<std::size_t> idx(ctx.pool->m);
      std::iota(idx.begin(), idx.end(), 0);
      shuffle(idx, eng);
      MinibatchItem item{i, {}};
      for (std::size_t c = 0; c < cfg.B; ++c) {
        const auto& e = ctx.pool->entries(i)[idx[c]];
        item.negatives.push_back({e.tokens, e.logp_base, e.cand_idx});
      }
      items.push_back(std::move(item));
    }
    EstimatorState st = state;
    st.gamma = gamma;
    refresh_estimators(params, data, items, st, cfg.tau, cfg.mode, cfg.variant());
    gs.push_back(gradient_estimate(params, data, items, st, cfg.tau, cfg.mode, cfg.variant()).gradient);
  }
  const std::size_t n = params.size();
  double total = 0.0;
  for (std::size_t k = 0; k < n; ++k) {
    double mean = 0.0;
    for (const auto& g : gs) mean += g[k];
    mean /= static_cast<double>(gs.size());
    double var = 0.0;
    for (const auto& g : gs) var += (g[k] - mean) * (g[k] - mean);
    total += var / static_cast<double>(gs.size() - 1);
  }
  return total / static_cast<double>(n);
}

Outcome gamma_ablation() {
  const auto c = gamma_config();
  const std::vector<double> gammas{0.85, 1.0};
  const auto rows = ablate(c, AblationAxis::kGamma, gammas);
  const double f85 = rows[0].median_exact_F, f100 = rows[1].median_exact_F;

  // frozen checkpoint: the end of a seed-1 run at gamma 0.85
  auto one = c;
  one.train.seed = 1;
  one.gen.seed = 1;
  const auto ctx = prepare(one);
  const auto res = train(ctx.base, TrainInputs{ctx.task.train, &*ctx.pool, &ctx.base, ctx.task.train_bad}, one.train);
  const double v85 = estimator_variance(res.params, ctx, res.state, one.train, 0.85, 32);
  const double v100 = estimator_variance(res.params, ctx, res.state, one.train, 1.0, 32);
  return {f85 <= f100 && v100 > v85,
          fmt("median exact F %.4f (0.85) vs %.4f (1.0); G_t variance %.3e (0.85) vs %.3e (1.0)", f85, f100, v85, v100)};
}

// ---------------------------------------------------------------------------
// 8. full-batch descent on the exact objective

Outcome descent() {
  const auto space = enumerate_outputs(3, 2);
  std::vector<Example> data{{prompt({1, 2}), answer({2, kEos})},
                            {prompt({2, 1}), answer({1, kEos})},
                            {prompt({1}), answer({kEos})}};
  const auto init = ModelParams::random({3, 8, 1}, 9);
  const auto pool = exhaustive_pool(space, data.size());
  TrainConfig cfg = TrainConfig::dft_defaults();
  cfg.gamma = 1.0;
  cfg.B = space.size();
  cfg.batch_size = data.size();
  cfg.epochs = 200;
  cfg.recycle_pool = true;
  cfg.lr = 1e-4;
  cfg.schedule = Schedule::kConstant;
  cfg.warmup_ratio = 0.0;
  std::vector<double> F{exact_objective(init, data, space, cfg.tau, cfg.mode)};
  train(init, TrainInputs{data, &pool, nullptr, {}}, cfg,
        [&](std::size_t, const ModelParams& p) { F.push_back(exact_objective(p, data, space, cfg.tau, cfg.mode)); });
  double worst_rise = -std::numeric_limits<double>::infinity();
  for (std::size_t s = 1; s < F.size(); ++s) worst_rise = std::max(worst_rise, F[s] - F[s - 1]);
  return {F.size() == 201 && worst_rise <= 1e-9,
          fmt("%zu steps, F %.6f -> %.6f, largest per-step change %+.2e", F.size() - 1, F.front(), F.back(), worst_rise)};
}

// ---------------------------------------------------------------------------
// 9. determinism and pool round trip

Outcome determinism_and_formats() {
  const auto root = fs::temp_directory_path() / "dft_acceptance";
  fs::remove_all(root);
  ExperimentConfig c;
  c.task_size = 60;
  c.width = 8;
  c.base_epochs = 3;
  c.strategy = "chat-bad-sys";
  c.gen.max_tokens = 3;
  set_config_value(c, "method", "DFT");
  c.train.epochs = 3;
  c.train.seed = 5;
  c.out_dir = (root / "a").string();
  run(c);
  c.out_dir = (root / "b").string();
  run(c);
  const auto a = slurp((root / "a/metrics.csv").string());
  const bool identical = !a.empty() && a == slurp((root / "b/metrics.csv").string());

  const auto pool_path = (root / "a/pool.jsonl").string();
  const auto pool = load_pool(pool_path);
  save_pool(pool, (root / "copy.jsonl").string());
  const auto back = load_pool((root / "copy.jsonl").string());
  const bool round_trip = back == pool && slurp(pool_path) == slurp((root / "copy.jsonl").string());

  const auto task = load_or_make_task(c);
  const auto base = load_params((root / "a/base.bin").string());
  std::vector<TokenSequence> prompts;
  for (const auto& ex : task.train) prompts.push_back(ex.x);
  std::mt19937_64 eng(99);
  std::vector<std::pair<std::size_t, std::size_t>> sampled;
  for (int k = 0; k < 100; ++k) {
    sampled.emplace_back(static_cast<std::size_t>(eng() % back.num_examples()), static_cast<std::size_t>(eng() % back.m));
  }
  const double err = max_rescoring_error(back, base, task.vocab, prompts, parse_strategy(c.strategy), sampled);
  fs::remove_all(root);
  return {identical && round_trip && err <= 1e-10,
          fmt("metrics CSVs identical: %s; pool round trip equal: %s; logp_base max error %.2e on 100 entries",
              identical ? "yes" : "no", round_trip ? "yes" : "no", err)};
}

}  // namespace

int main() {
  int failures = 0;
  auto report = [&](int id, const char* name, const std::function<Outcome()>& f) {
    Outcome o;
    try {
      o = f();
    } catch (const std::exception& e) {
      o = {false, std::string("exception: ") + e.what()};
    }
    if (!o.pass) ++failures;
    std::printf("%s criterion %d (%s): %s\n", o.pass ? "PASS" : "FAIL", id, name, o.detail.c_str());
    std::fflush(stdout);
  };

  report(1, "oracle equivalence", oracle_equivalence);
  report(2, "gradient fidelity", gradient_fidelity);
  report(3, "estimator correctness", estimator_correctness);
  report(4, "exact-regime estimator", exact_regime_estimator);

  CompareRuns runs;
  std::string compare_error;
  try {
    runs = compare_runs();
  } catch (const std::exception& e) {
    compare_error = e.what();
  }
  auto guarded = [&](auto f) {
    return [&, f]() -> Outcome {
      if (!compare_error.empty()) return {false, "exception: " + compare_error};
      return f(runs);
    };
  };
  report(5, "mechanism reproduction", guarded(mechanism));
  report(6, "motivating example", guarded(motivating_example));
  report(7, "gamma ablation", gamma_ablation);
  report(8, "descent sanity", descent);
  report(9, "determinism and formats", determinism_and_formats);

  std::printf("%d of 9 criteria failed\n", failures);
  return failures == 0 ? 0 : 1;
}
