#pragma once

/**
 * Command-line front end.
 *
 * Subcommands:
 *   gen-data         generate a dataset JSONL from a generator config
 *   se-profile       warm-start a policy, profile semantic entropy, and write
 *                    profiles + the sorted training order + the policy
 *   train            run staged training with the configured objective mode
 *   eval             Pass@K / Avg@K / Len@K on a dataset with a saved policy
 *   verify-dynamics  closed-form entropy-dynamics verification sweep
 *
 * Every subcommand takes --seed (runs are deterministic) and --out; the
 * SENTLAB_OUTPUT_DIR environment variable overrides the output directory.
 * Config files are JSON; unknown keys are rejected. Key schemas are
 * documented in docs/formats.md.
 */

#include <cstdlib>
#include <filesystem>
#include <iostream>
#include <string>
#include <vector>

#include <CLI11.hpp>

#include "sentlab/dynamics.hpp"
#include "sentlab/harness.hpp"
#include "sentlab/io.hpp"

namespace sentlab {

namespace cli_detail {

inline void ensure_keys(const json& j, std::initializer_list<const char*> allowed,
                        const std::string& what) {
  for (auto it = j.begin(); it != j.end(); ++it) {
    bool ok = false;
    for (const char* k : allowed)
      if (it.key() == k) ok = true;
    if (!ok)
      throw std::invalid_argument("unknown key '" + it.key() + "' in " + what);
  }
}

inline Vocabulary parse_vocab(const json& j) {
  ensure_keys(j, {"size", "eos", "answer_delim"}, "vocab");
  Vocabulary v;
  v.size = j.value("size", v.size);
  v.eos = j.value("eos", v.eos);
  v.answer_delim = j.value("answer_delim", v.answer_delim);
  return v;
}

inline GeneratorSpec parse_generator_spec(const json& j) {
  ensure_keys(j,
              {"count", "min_steps", "max_steps", "operand_max", "modulus_min",
               "modulus_max", "vocab"},
              "generator config");
  GeneratorSpec g;
  g.count = j.value("count", g.count);
  g.min_steps = j.value("min_steps", g.min_steps);
  g.max_steps = j.value("max_steps", g.max_steps);
  g.operand_max = j.value("operand_max", g.operand_max);
  g.modulus_min = j.value("modulus_min", g.modulus_min);
  g.modulus_max = j.value("modulus_max", g.modulus_max);
  if (j.contains("vocab")) g.vocab = parse_vocab(j.at("vocab"));
  g.validate();
  return g;
}

inline ObjectiveMode parse_mode(const std::string& name) {
  if (name == "grpo") return ObjectiveMode::kGrpo;
  if (name == "en") return ObjectiveMode::kEntropyBonus;
  if (name == "adv") return ObjectiveMode::kShapedAdvantage;
  if (name == "mask") return ObjectiveMode::kEntropyMask;
  if (name == "clip") return ObjectiveMode::kCovarianceClip;
  if (name == "cov") return ObjectiveMode::kCovarianceKl;
  if (name == "high_en") return ObjectiveMode::kHighEntropyReward;
  if (name == "sent") return ObjectiveMode::kSent;
  throw std::invalid_argument("unknown objective mode '" + name + "'");
}

inline ThresholdSpec parse_thresholds(const json& j) {
  ensure_keys(j, {"entropy_mode", "entropy_value", "cov_mode", "cov_value"},
              "thresholds");
  ThresholdSpec t;
  if (j.contains("entropy_mode")) {
    const std::string m = j.at("entropy_mode").get<std::string>();
    if (m == "absolute")
      t.entropy_mode = EntropyThresholdMode::kAbsolute;
    else if (m == "percentile")
      t.entropy_mode = EntropyThresholdMode::kPercentile;
    else
      throw std::invalid_argument("entropy_mode must be absolute|percentile");
  }
  t.entropy_value = j.value("entropy_value", t.entropy_value);
  if (j.contains("cov_mode")) {
    const std::string m = j.at("cov_mode").get<std::string>();
    if (m == "absolute")
      t.cov_mode = CovThresholdMode::kAbsolute;
    else if (m == "top_fraction")
      t.cov_mode = CovThresholdMode::kTopFraction;
    else
      throw std::invalid_argument("cov_mode must be absolute|top_fraction");
  }
  t.cov_value = j.value("cov_value", t.cov_value);
  t.validate();
  return t;
}

inline WarmStartConfig parse_warm_start(const json& j) {
  ensure_keys(j,
              {"enabled", "demos_per_query", "passes", "step_size",
               "correct_prob_by_steps"},
              "warm_start");
  WarmStartConfig w;
  w.enabled = j.value("enabled", w.enabled);
  w.demos_per_query = j.value("demos_per_query", w.demos_per_query);
  w.passes = j.value("passes", w.passes);
  w.step_size = j.value("step_size", w.step_size);
  if (j.contains("correct_prob_by_steps"))
    w.correct_prob_by_steps =
        j.at("correct_prob_by_steps").get<std::vector<double>>();
  return w;
}

inline TrainConfig parse_train_config(const json& j) {
  ensure_keys(
      j, {"learning_rate", "clip_epsilon", "group_size",   "se_samples",
          "curriculum_stages", "beta_low",  "beta_high",   "thresholds",
          "mode",          "kl_beta",      "lambda",       "alpha",
          "kappa",         "rho",          "r_clip",       "omega_low",
          "omega_high",    "k_cov",        "cov_kl_beta",  "tau_he",
          "max_response_length",           "total_steps",  "queries_per_step",
          "passes_per_batch",              "temperature",  "seed",
          "checkpoint_interval",           "log_forecasts", "vocab",
          "context_window",                "warm_start"},
      "train config");
  TrainConfig c;
  if (j.contains("mode"))
    c.objective = BaselineConfig::defaults_for(parse_mode(j.at("mode").get<std::string>()));
  c.learning_rate = j.value("learning_rate", c.learning_rate);
  c.objective.clip_epsilon = j.value("clip_epsilon", c.objective.clip_epsilon);
  c.group_size = j.value("group_size", c.group_size);
  c.se_samples = j.value("se_samples", c.se_samples);
  c.curriculum_stages = j.value("curriculum_stages", c.curriculum_stages);
  c.beta_low = j.value("beta_low", c.beta_low);
  c.beta_high = j.value("beta_high", c.beta_high);
  if (j.contains("thresholds")) c.thresholds = parse_thresholds(j.at("thresholds"));
  c.objective.kl_beta = j.value("kl_beta", c.objective.kl_beta);
  c.objective.lambda = j.value("lambda", c.objective.lambda);
  c.objective.alpha = j.value("alpha", c.objective.alpha);
  c.objective.kappa = j.value("kappa", c.objective.kappa);
  c.objective.rho = j.value("rho", c.objective.rho);
  c.objective.r_clip = j.value("r_clip", c.objective.r_clip);
  c.objective.omega_low = j.value("omega_low", c.objective.omega_low);
  c.objective.omega_high = j.value("omega_high", c.objective.omega_high);
  c.objective.k_cov = j.value("k_cov", c.objective.k_cov);
  c.objective.cov_kl_beta = j.value("cov_kl_beta", c.objective.cov_kl_beta);
  c.objective.tau_he = j.value("tau_he", c.objective.tau_he);
  c.max_response_length = j.value("max_response_length", c.max_response_length);
  c.total_steps = j.value("total_steps", c.total_steps);
  c.queries_per_step = j.value("queries_per_step", c.queries_per_step);
  c.passes_per_batch = j.value("passes_per_batch", c.passes_per_batch);
  c.temperature = j.value("temperature", c.temperature);
  c.seed = j.value("seed", c.seed);
  c.checkpoint_interval = j.value("checkpoint_interval", c.checkpoint_interval);
  c.log_forecasts = j.value("log_forecasts", c.log_forecasts);
  if (j.contains("vocab")) c.vocab = parse_vocab(j.at("vocab"));
  c.context_window = j.value("context_window", c.context_window);
  if (j.contains("warm_start")) c.warm_start = parse_warm_start(j.at("warm_start"));
  return c;
}

inline json load_json(const std::string& path) {
  std::ifstream f = detail::open_in(path);
  json j;
  f >> j;
  return j;
}

/// Guards against corrupted dataset files: every stored answer must survive
/// re-evaluation of its own prompt.
inline void validate_dataset(const std::vector<Query>& dataset) {
  for (const Query& q : dataset) {
    const auto v = evaluate_prompt(q);
    if (!v.has_value() || *v != q.answer)
      throw std::runtime_error("dataset query " + std::to_string(q.id) +
                               " fails arithmetic re-evaluation");
  }
}

inline std::string resolve_out_dir(const std::string& flag_value) {
  const char* env = std::getenv("SENTLAB_OUTPUT_DIR");
  std::string dir = (env != nullptr && *env != '\0') ? env : flag_value;
  if (dir.empty()) dir = ".";
  std::filesystem::create_directories(dir);
  return dir;
}

inline std::vector<int> parse_k_list(const std::string& text) {
  std::vector<int> ks;
  std::string cur;
  for (char ch : text + ",") {
    if (ch == ',') {
      if (!cur.empty()) ks.push_back(std::stoi(cur));
      cur.clear();
    } else {
      cur += ch;
    }
  }
  if (ks.empty()) throw std::invalid_argument("--k needs at least one value");
  return ks;
}

/// Dynamics verification sweep shared by the CLI and the acceptance suite.
/// Returns true when every instance passes the order-of-accuracy check and
/// the logit-update identity.
inline bool run_dynamics_verification(std::uint64_t seed, int instances,
                                      std::ostream& csv, std::ostream& log) {
  csv << "instance,eta,term1,term2,predicted,actual,error\n";
  bool all_ok = true;
  int identity_checked = 0;
  double identity_worst = 0.0;
  for (int i = 0; i < instances; ++i) {
    auto rng = derive_rng(seed, 0xD1CE, static_cast<std::uint64_t>(i));
    BanditInstance inst = make_random_bandit_instance(rng, /*with_beta=*/true);

    for (const WeightedState& ws : inst.states) {
      identity_worst = std::max(
          identity_worst, verify_logit_update_identity(inst.policy, ws.state, ws.advantages,
                                           1e-3));
      ++identity_checked;
    }

    const double eta_hi = 2e-3, eta_lo = 1e-3;
    const EntropyForecast hi =
        predict_entropy_change_sent(inst.policy, inst.ref, inst.states, eta_hi);
    const EntropyForecast lo =
        predict_entropy_change_sent(inst.policy, inst.ref, inst.states, eta_lo);
    for (const EntropyForecast& f : {hi, lo}) {
      csv << i << "," << format_double(f.eta) << "," << format_double(f.term1)
          << "," << format_double(f.term2) << ","
          << format_double(f.predicted_delta) << ","
          << format_double(f.actual_delta) << ","
          << format_double(std::abs(f.actual_delta - f.predicted_delta)) << "\n";
    }
    const double err_hi = std::abs(hi.actual_delta - hi.predicted_delta);
    const double err_lo = std::abs(lo.actual_delta - lo.predicted_delta);
    if (err_hi < 1e-12) continue;  // curvature-free instance, nothing to rate
    const double ratio = err_hi / std::max(err_lo, 1e-300);
    if (!(ratio >= 3.5 && ratio <= 4.5)) {
      log << "instance " << i << ": error ratio " << ratio
          << " outside [3.5, 4.5]\n";
      all_ok = false;
    }
  }
  if (identity_worst > 1e-10) {
    log << "logit-update identity discrepancy " << identity_worst << " > 1e-10\n";
    all_ok = false;
  }
  log << (all_ok ? "PASS" : "FAIL") << " order-of-accuracy sweep (" << instances
      << " instances, " << identity_checked << " logit-update checks, worst "
      << format_double(identity_worst) << ")\n";
  return all_ok;
}

}  // namespace cli_detail

inline int run_cli(const std::vector<std::string>& args) {
  CLI::App app{"desk-scale curriculum + token-selective KL training lab"};
  app.require_subcommand(1);

  std::string config_path, dataset_path, out_flag, order_path, policy_path;
  std::string k_spec = "8";
  std::uint64_t seed = 0;
  double holdout_fraction = 0.0;
  int instances = 24;

  auto* gen = app.add_subcommand("gen-data", "generate a dataset");
  gen->add_option("--config", config_path, "generator config JSON")->required();
  gen->add_option("--seed", seed, "master seed")->required();
  gen->add_option("--out", out_flag, "output directory");

  auto* prof = app.add_subcommand("se-profile", "semantic-entropy profiling");
  prof->add_option("--config", config_path, "train config JSON")->required();
  prof->add_option("--dataset", dataset_path, "dataset JSONL")->required();
  prof->add_option("--seed", seed, "master seed")->required();
  prof->add_option("--out", out_flag, "output directory");

  auto* tr = app.add_subcommand("train", "run training");
  tr->add_option("--config", config_path, "train config JSON")->required();
  tr->add_option("--dataset", dataset_path, "dataset JSONL")->required();
  tr->add_option("--seed", seed, "master seed")->required();
  tr->add_option("--out", out_flag, "output directory");
  tr->add_option("--order", order_path, "query order file from se-profile");
  tr->add_option("--policy", policy_path, "warm policy snapshot to start from");
  tr->add_option("--holdout-fraction", holdout_fraction,
                 "withhold this tail fraction of the order from training");

  auto* ev = app.add_subcommand("eval", "evaluate a saved policy");
  ev->add_option("--config", config_path, "train config JSON")->required();
  ev->add_option("--dataset", dataset_path, "eval dataset JSONL")->required();
  ev->add_option("--policy", policy_path, "policy snapshot")->required();
  ev->add_option("--seed", seed, "master seed")->required();
  ev->add_option("--k", k_spec, "comma-separated K values (default 8)");
  ev->add_option("--out", out_flag, "output directory");

  auto* dyn = app.add_subcommand("verify-dynamics", "entropy-dynamics checks");
  dyn->add_option("--seed", seed, "master seed")->required();
  dyn->add_option("--instances", instances, "number of random instances");
  dyn->add_option("--out", out_flag, "output directory");

  std::vector<std::string> reversed(args.rbegin(), args.rend());
  try {
    app.parse(reversed);
  } catch (const CLI::ParseError& e) {
    return app.exit(e);
  }

  try {
    const std::string out_dir = cli_detail::resolve_out_dir(out_flag);

    if (gen->parsed()) {
      const GeneratorSpec spec =
          cli_detail::parse_generator_spec(cli_detail::load_json(config_path));
      const std::vector<Query> dataset = generate_dataset(spec, seed);
      save_dataset_jsonl(out_dir + "/dataset.jsonl", dataset);
      std::cout << "wrote " << dataset.size() << " queries to " << out_dir
                << "/dataset.jsonl\n";
      return 0;
    }

    if (prof->parsed()) {
      TrainConfig config =
          cli_detail::parse_train_config(cli_detail::load_json(config_path));
      config.seed = seed;
      config.validate();
      const std::vector<Query> dataset = load_dataset_jsonl(dataset_path);
      cli_detail::validate_dataset(dataset);
      TabularPolicy policy(config.vocab, config.context_window);
      warm_start(policy, dataset, config.warm_start, config.seed);
      const std::vector<SemanticProfile> profiles =
          profile_dataset(policy, dataset, config);
      const CurriculumPlan plan =
          build_curriculum(dataset, profiles, /*stages=*/1);
      save_profiles_jsonl(out_dir + "/profiles.jsonl", profiles);
      save_order(out_dir + "/order.txt", plan.ordered_ids);
      save_policy(out_dir + "/warm_policy.txt", policy);
      std::cout << "profiled " << profiles.size() << " queries; order and warm "
                << "policy written to " << out_dir << "\n";
      return 0;
    }

    if (tr->parsed()) {
      TrainConfig config =
          cli_detail::parse_train_config(cli_detail::load_json(config_path));
      config.seed = seed;
      config.validate();
      const std::vector<Query> dataset = load_dataset_jsonl(dataset_path);
      cli_detail::validate_dataset(dataset);

      std::vector<int> order;
      if (!order_path.empty()) {
        order = load_order(order_path);
      } else if (config.objective.mode == ObjectiveMode::kSent) {
        std::cerr << "train: SENT mode needs the semantic-entropy order; run "
                     "se-profile first and pass --order\n";
        return 2;
      } else {
        for (const Query& q : dataset) order.push_back(q.id);
      }

      std::vector<int> holdout;
      if (holdout_fraction > 0.0) {
        if (!(holdout_fraction < 1.0))
          throw std::invalid_argument("holdout fraction must lie in [0, 1)");
        const auto keep = order.size() -
                          static_cast<std::size_t>(std::ceil(
                              holdout_fraction * static_cast<double>(order.size())));
        holdout.assign(order.begin() + static_cast<std::ptrdiff_t>(keep),
                       order.end());
        order.resize(keep);
      }

      TabularPolicy policy =
          policy_path.empty()
              ? TabularPolicy(config.vocab, config.context_window)
              : load_policy(policy_path);
      if (policy_path.empty())
        warm_start(policy, dataset, config.warm_start, config.seed);

      CurriculumPlan plan;
      plan.ordered_ids = order;
      plan.stages = config.curriculum_stages;
      const std::size_t base = order.size() /
                               static_cast<std::size_t>(config.curriculum_stages);
      if (base == 0)
        throw std::invalid_argument("more curriculum stages than training queries");
      for (int n = 1; n < config.curriculum_stages; ++n)
        plan.stage_boundaries.push_back(base * static_cast<std::size_t>(n));

      config.checkpoint_path = out_dir + "/checkpoint.txt";
      const TrainResult result = train(policy, dataset, plan, config);
      write_metrics_csv(out_dir + "/metrics.csv", result.metrics);
      save_policy(out_dir + "/policy.txt", policy);
      if (!holdout.empty()) save_order(out_dir + "/holdout.txt", holdout);
      std::cout << "trained " << result.completed_steps << " steps; metrics in "
                << out_dir << "/metrics.csv\n";
      return result.aborted_non_finite ? 3 : 0;
    }

    if (ev->parsed()) {
      TrainConfig config =
          cli_detail::parse_train_config(cli_detail::load_json(config_path));
      config.seed = seed;
      const std::vector<Query> dataset = load_dataset_jsonl(dataset_path);
      TabularPolicy policy = load_policy(policy_path);
      const std::vector<int> ks = cli_detail::parse_k_list(k_spec);
      EvalReport report;
      report.splits.push_back(evaluate(policy, dataset, ks, seed,
                                       config.max_response_length,
                                       config.temperature));
      save_eval_report(out_dir + "/eval_report.json", report);
      for (int k : ks) {
        std::cout << "pass@" << k << " " << report.splits[0].pass_at_k.at(k)
                  << "  avg@" << k << " " << report.splits[0].avg_at_k.at(k)
                  << "  len@" << k << " " << report.splits[0].len_at_k.at(k)
                  << "\n";
      }
      return 0;
    }

    if (dyn->parsed()) {
      std::ofstream csv = detail::open_out(out_dir + "/dynamics.csv");
      const bool ok =
          cli_detail::run_dynamics_verification(seed, instances, csv, std::cout);
      return ok ? 0 : 1;
    }
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  }
  return 0;
}

}  // namespace sentlab
