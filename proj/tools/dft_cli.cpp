#include <cstdio>
#include <fstream>
#include <iostream>

#include <CLI11.hpp>

#include "dft/experiment.hpp"

namespace {

using namespace dft;

std::vector<double> parse_values(const std::string& csv) {
  std::vector<double> out;
  for (const auto& v : detail::split_csv(csv)) out.push_back(detail::to_double("values", v));
  if (out.empty()) throw InputError("--values must list at least one number");
  return out;
}

ExperimentConfig config_with_overrides(const std::string& path, const std::vector<std::string>& sets) {
  auto c = load_config(path);
  for (const auto& kv : sets) {
    const auto eq = kv.find('=');
    if (eq == std::string::npos) throw InputError("--set expects key=value, got '" + kv + "'");
    set_config_value(c, detail::trim(kv.substr(0, eq)), detail::trim(kv.substr(eq + 1)));
  }
  return c;
}

int generate_pool_cmd(const std::string& data, const std::string& base_path, std::size_t m, const std::string& strategy,
                      const GenConfig& gen, const std::string& out) {
  auto task = load_task(data);
  auto base = load_params(base_path);
  std::vector<TokenSequence> prompts;
  for (const auto& ex : task.train) prompts.push_back(ex.x);
  auto pool = generate_pool(base, task.vocab, prompts, m, gen, parse_strategy(strategy));
  save_pool(pool, out);
  std::printf("wrote %zu x %zu candidates to %s\n", pool.num_examples(), pool.m, out.c_str());
  return 0;
}

int train_cmd(const ExperimentConfig& c) {
  auto r = run(c);
  std::cout << r.summary().dump(2) << '\n';
  return 0;
}

int evaluate_cmd(const std::string& params_path, const std::string& task_path) {
  auto params = load_params(params_path);
  auto task = load_task(task_path);
  auto e = evaluate(params, task);
  nlohmann::ordered_json j = {{"test_size", e.n},
                              {"test_accuracy", e.accuracy},
                              {"test_pos_loglik", e.pos_loglik},
                              {"test_bad_loglik", e.bad_loglik},
                              {"test_pairwise_accuracy", e.pairwise_accuracy},
                              {"params_hash", params_hash(params)}};
  std::cout << j.dump(2) << '\n';
  return 0;
}

int oracle_check_cmd(const std::string& params_path, std::size_t K, std::size_t L, double tau, const std::string& mode) {
  auto params = load_params(params_path);
  if (params.config().vocab != K) {
    throw InputError("--K " + std::to_string(K) + " does not match the checkpoint vocabulary " +
                     std::to_string(params.config().vocab));
  }
  bool ok = true;
  for (const auto& r : oracle_check(params, L, tau, parse_scoring_mode(mode))) {
    std::printf("%-4s %-32s %s\n", r.pass ? "PASS" : "FAIL", r.name.c_str(), r.detail.c_str());
    ok = ok && r.pass;
  }
  return ok ? 0 : 1;
}

int ablate_cmd(const ExperimentConfig& c, const std::string& axis, const std::string& values, const std::string& out) {
  const auto a = parse_axis(axis);
  const auto vs = parse_values(values);
  auto rows = ablate(c, a, vs);
  if (out.empty()) {
    write_ablation_csv(std::cout, a, rows);
  } else {
    std::ofstream os(out, std::ios::trunc);
    if (!os) throw Error("cannot write " + out);
    write_ablation_csv(os, a, rows);
  }
  return 0;
}

int make_task_cmd(const std::string& name, std::size_t size, std::uint64_t seed, const std::string& out) {
  auto t = make_task(parse_task_name(name), size, seed);
  save_task(t, out);
  std::printf("wrote %s: %zu train, %zu test to %s\n", name.c_str(), t.train.size(), t.test.size(), out.c_str());
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Discriminative fine-tuning laboratory"};
  app.require_subcommand(1);

  std::string data, base, strategy, out, config, params, task, mode = "unnormalized", axis, values, name = "CompareNumbers";
  std::vector<std::string> sets;
  std::size_t m = 0, K = 0, L = 0, size = 500;
  std::uint64_t seed = 0;
  double tau = 1.0;
  GenConfig gen;

  auto* gp = app.add_subcommand("generate-pool", "sample an offline negative pool from a base model");
  gp->add_option("--data", data, "task file (train prompts are used)")->required();
  gp->add_option("--base", base, "base params file")->required();
  gp->add_option("--m", m, "candidates per example")->required();
  gp->add_option("--strategy", strategy, "direct | chat | chat-good-sys | chat-bad-sys")->required();
  gp->add_option("--temperature", gen.temperature, "sampling temperature")->capture_default_str();
  gp->add_option("--top-k", gen.top_k, "top-k cutoff, 0 disables")->capture_default_str();
  gp->add_option("--top-p", gen.top_p, "nucleus mass")->capture_default_str();
  gp->add_option("--max-tokens", gen.max_tokens, "answer length cap including the terminator")->capture_default_str();
  gp->add_option("--seed", gen.seed, "sampling seed")->capture_default_str();
  gp->add_option("--out", out, "pool file to write")->required();

  auto* tr = app.add_subcommand("train", "run one configured training job");
  tr->add_option("--config", config, "key = value config file")->required()->check(CLI::ExistingFile);
  tr->add_option("--set", sets, "override a config key (key=value), repeatable");

  auto* ev = app.add_subcommand("evaluate", "score a checkpoint on a task's test split");
  ev->add_option("--params", params, "params file")->required()->check(CLI::ExistingFile);
  ev->add_option("--task", task, "task file")->required()->check(CLI::ExistingFile);

  auto* oc = app.add_subcommand("oracle-check", "run the exact-enumeration checks on a checkpoint");
  oc->add_option("--params", params, "params file")->required()->check(CLI::ExistingFile);
  oc->add_option("--K", K, "vocabulary size, terminator included")->required();
  oc->add_option("--L", L, "maximum answer length")->required();
  oc->add_option("--tau", tau, "temperature")->required();
  oc->add_option("--mode", mode, "unnormalized | length-normalized")->capture_default_str();

  auto* ab = app.add_subcommand("ablate", "sweep one axis over shared seeds");
  ab->add_option("--config", config, "key = value config file")->required()->check(CLI::ExistingFile);
  ab->add_option("--axis", axis, "gamma | B | gen_temperature")->required();
  ab->add_option("--values", values, "comma separated values")->required();
  ab->add_option("--set", sets, "override a config key (key=value), repeatable");
  ab->add_option("--out", out, "CSV file, stdout when omitted");

  auto* mt = app.add_subcommand("make-task", "write a synthetic task file");
  mt->add_option("--name", name, "CompareNumbers | CopyPattern | KeyValueRecall")->capture_default_str();
  mt->add_option("--size", size, "train pairs")->capture_default_str();
  mt->add_option("--seed", seed, "dataset seed")->capture_default_str();
  mt->add_option("--out", out, "task file to write")->required();

  CLI11_PARSE(app, argc, argv);

  try {
    if (*gp) return generate_pool_cmd(data, base, m, strategy, gen, out);
    if (*tr) return train_cmd(config_with_overrides(config, sets));
    if (*ev) return evaluate_cmd(params, task);
    if (*oc) return oracle_check_cmd(params, K, L, tau, mode);
    if (*ab) return ablate_cmd(config_with_overrides(config, sets), axis, values, out);
    if (*mt) return make_task_cmd(name, size, seed, out);
  } catch (const dft::Error& e) {
    std::fprintf(stderr, "error: %s\n", e.what());
    return 2;
  }
  return 0;
}
