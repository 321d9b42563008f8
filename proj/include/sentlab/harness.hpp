#pragma once

/**
 * End-to-end training harness: warm start, curriculum-staged optimization,
 * per-step metrics, and Pass@K / Avg@K / Len@K evaluation.
 *
 * The policy is warm-started from noisy demonstrations whose correctness
 * degrades with task difficulty, standing in for the SFT model the reference
 * policy would normally be: it teaches the answer format everywhere and the
 * correct answer mostly on easy queries, which is what creates the semantic
 * entropy spread the curriculum sorts on. The reference policy is frozen at
 * the start of training (after warm start).
 *
 * Determinism contract: identical (config, seed) produce byte-identical
 * metrics. Every sampling site draws from its own (seed, purpose, step, slot)
 * derived stream and rollouts run in a fixed sequential order.
 */

#include <cmath>
#include <cstdint>
#include <map>
#include <optional>
#include <stdexcept>
#include <string>
#include <vector>

#include "sentlab/baselines.hpp"
#include "sentlab/common.hpp"
#include "sentlab/grpo.hpp"
#include "sentlab/io.hpp"
#include "sentlab/policy.hpp"
#include "sentlab/semantic.hpp"
#include "sentlab/sent.hpp"
#include "sentlab/task_env.hpp"

namespace sentlab {

namespace rng_tag {
// purpose tags for derived streams
inline constexpr std::uint64_t kWarmStart = 0xA1;
inline constexpr std::uint64_t kProfile = 0xB2;
inline constexpr std::uint64_t kRollout = 0xC3;
inline constexpr std::uint64_t kEval = 0xD4;
inline constexpr std::uint64_t kObjective = 0xE5;
}  // namespace rng_tag

struct WarmStartConfig {
  bool enabled = true;
  int demos_per_query = 8;
  int passes = 20;
  double step_size = 0.5;
  // demo correctness by chain length (1-step, 2-step, ...); the last entry
  // covers all longer chains
  std::vector<double> correct_prob_by_steps = {0.9, 0.6, 0.35};
};

struct TrainConfig {
  double learning_rate = 1.0;  // desk default for direct logits
  int group_size = 8;           // rollouts per query
  int se_samples = 8;           // samples per query when profiling
  int curriculum_stages = 2;
  double beta_low = 0.5;
  double beta_high = 2.0;
  ThresholdSpec thresholds;
  BaselineConfig objective;
  int max_response_length = 32;
  int total_steps = 400;
  int queries_per_step = 4;
  int passes_per_batch = 1;
  double temperature = 1.0;
  std::uint64_t seed = 0;
  int checkpoint_interval = 0;  // steps between retained checkpoints; 0 = start only
  std::string checkpoint_path;  // optional on-disk checkpoint target
  bool log_forecasts = true;
  Vocabulary vocab;
  int context_window = 2;
  WarmStartConfig warm_start;

  void validate() const {
    vocab.validate();
    objective.validate();
    thresholds.validate();
    validate_beta_pair(beta_low, beta_high);
    if (!(learning_rate > 0.0)) throw std::invalid_argument("learning_rate must be > 0");
    if (group_size < 2) throw std::invalid_argument("group_size must be >= 2");
    if (se_samples < 2) throw std::invalid_argument("se_samples must be >= 2");
    if (curriculum_stages < 1) throw std::invalid_argument("stages must be >= 1");
    if (max_response_length < 1) throw std::invalid_argument("max_response_length must be >= 1");
    if (total_steps < 0) throw std::invalid_argument("total_steps must be >= 0");
    if (queries_per_step < 1) throw std::invalid_argument("queries_per_step must be >= 1");
    if (passes_per_batch < 1) throw std::invalid_argument("passes_per_batch must be >= 1");
    if (!(temperature > 0.0)) throw std::invalid_argument("temperature must be > 0");
  }
};

struct MetricsRow {
  int step = 0;
  int stage = 0;
  double mean_entropy = 0.0;
  double mean_reward = 0.0;
  double mean_resp_len = 0.0;
  double objective = 0.0;
  std::size_t low_count = 0;
  std::size_t high_cov_count = 0;
  double mean_low_entropy = 0.0;
  double mean_high_cov = 0.0;
  double term1 = 0.0;
  double term2 = 0.0;
};

inline constexpr const char* kMetricsSchemaLine = "# sentlab-metrics v1";
inline constexpr const char* kMetricsHeaderLine =
    "step,stage,mean_entropy,mean_reward,mean_resp_len,objective,low_count,"
    "high_cov_count,mean_low_entropy,mean_high_cov,term1,term2";

inline std::string metrics_row_to_csv(const MetricsRow& r) {
  std::string s;
  s += std::to_string(r.step) + "," + std::to_string(r.stage) + ",";
  s += format_double(r.mean_entropy) + "," + format_double(r.mean_reward) + ",";
  s += format_double(r.mean_resp_len) + "," + format_double(r.objective) + ",";
  s += std::to_string(r.low_count) + "," + std::to_string(r.high_cov_count) + ",";
  s += format_double(r.mean_low_entropy) + "," + format_double(r.mean_high_cov) + ",";
  s += format_double(r.term1) + "," + format_double(r.term2);
  return s;
}

inline void write_metrics_csv(const std::string& path,
                              const std::vector<MetricsRow>& rows) {
  std::ofstream f = detail::open_out(path);
  f << kMetricsSchemaLine << "\n" << kMetricsHeaderLine << "\n";
  for (const MetricsRow& r : rows) f << metrics_row_to_csv(r) << "\n";
}

/// Supervised warm start from noisy demonstrations: each query gets
/// demos_per_query [delim, answer digits, eos] sequences whose answer is
/// correct with a difficulty-dependent probability, and the policy takes
/// cross-entropy ascent steps on them.
inline void warm_start(TabularPolicy& policy, const std::vector<Query>& dataset,
                       const WarmStartConfig& config, std::uint64_t seed) {
  if (!config.enabled || config.demos_per_query <= 0) return;
  if (config.correct_prob_by_steps.empty())
    throw std::invalid_argument("warm start needs a correctness schedule");
  for (const Query& q : dataset) {
    auto rng = derive_rng(seed, rng_tag::kWarmStart,
                          static_cast<std::uint64_t>(q.id));
    const std::size_t bucket =
        std::min(static_cast<std::size_t>(std::max(0, q.difficulty_meta.steps - 1)),
                 config.correct_prob_by_steps.size() - 1);
    const double p_correct = config.correct_prob_by_steps[bucket];
    const long long modulus = std::max(2, q.difficulty_meta.modulus);

    std::vector<std::vector<TokenId>> demos;
    for (int d = 0; d < config.demos_per_query; ++d) {
      long long value = q.answer;
      if (uniform01(rng) >= p_correct && modulus > 1) {
        // uniform wrong answer from the task's residue range
        value = static_cast<long long>(
            uniform_index(rng, static_cast<std::size_t>(modulus - 1)));
        if (value >= q.answer) ++value;
      }
      std::vector<TokenId> demo;
      demo.push_back(policy.vocab().answer_delim);
      detail::append_number(demo, value);
      demo.push_back(policy.vocab().eos);
      demos.push_back(std::move(demo));
    }
    for (int pass = 0; pass < config.passes; ++pass) {
      LogitGradient grad;
      for (const auto& demo : demos) {
        std::vector<TokenId> prefix;
        for (TokenId tok : demo) {
          const int s = policy.state_index(q, prefix);
          const TokenDistribution dist = policy.token_distribution(s);
          for (std::size_t v = 0; v < dist.probs.size(); ++v) {
            const double ind = (static_cast<TokenId>(v) == tok) ? 1.0 : 0.0;
            grad.add(s, static_cast<TokenId>(v), ind - dist.probs[v]);
          }
          prefix.push_back(tok);
        }
      }
      policy.apply_gradient(grad, config.step_size);
    }
  }
}

/// Profiles every query with the current (initial) policy. Profiling order
/// and per-query streams are fixed, so results do not depend on scheduling.
inline std::vector<SemanticProfile> profile_dataset(
    TabularPolicy& policy, const std::vector<Query>& dataset,
    const TrainConfig& config) {
  std::vector<SemanticProfile> out;
  out.reserve(dataset.size());
  for (const Query& q : dataset) {
    auto rng = derive_rng(config.seed, rng_tag::kProfile,
                          static_cast<std::uint64_t>(q.id));
    out.push_back(profile_query(policy, q, config.se_samples,
                                config.max_response_length, rng,
                                config.temperature));
  }
  return out;
}

/// Single-stage plan preserving the given order (no curriculum).
inline CurriculumPlan identity_plan(const std::vector<Query>& dataset) {
  CurriculumPlan plan;
  for (const Query& q : dataset) plan.ordered_ids.push_back(q.id);
  plan.stages = 1;
  return plan;
}

struct TrainResult {
  std::vector<MetricsRow> metrics;
  ReferencePolicy reference;
  bool aborted_non_finite = false;
  int completed_steps = 0;
};

namespace detail {

/// Empirical (batch Monte Carlo) versions of the two forecast terms, logged
/// per step for monitoring; the closed-form counterparts live in dynamics.hpp.
inline std::pair<double, double> empirical_forecast_terms(
    const TabularPolicy& policy, const ReferencePolicy& ref,
    const TokenBatch& batch, double eta) {
  const std::size_t n = batch.size();
  std::vector<double> logp(n), decay(n), preserve(n);
  std::unordered_map<int, double> kl_by_state;
  for (std::size_t i = 0; i < n; ++i) {
    const TokenRecord& t = batch.tokens[i];
    logp[i] = t.logprob_new;
    decay[i] = std::exp(t.logprob_new) * t.advantage;
    if (t.beta_con != 0.0) {
      auto it = kl_by_state.find(t.state);
      if (it == kl_by_state.end())
        it = kl_by_state.emplace(t.state, kl_exact(policy, ref, t.state)).first;
      const double ref_lp =
          ref.log_probs(t.state)[static_cast<std::size_t>(t.token)];
      const double g_kl =
          std::exp(t.logprob_new) * ((t.logprob_new - ref_lp) - it->second);
      preserve[i] = t.beta_con * g_kl;
    }
  }
  const double term1 = -eta * population_covariance(logp, decay);
  const double term2 = eta * population_covariance(logp, preserve);
  return {term1, term2};
}

}  // namespace detail

/// Curriculum-staged training. Walks the plan's stages in order with an equal
/// step budget per stage (remainder to the last stage), sampling rollout
/// groups for queries_per_step queries per step, running the token-selection
/// pre-pass, and updating through the configured objective. The reference
/// policy is snapshotted once at entry. A non-finite objective or gradient
/// aborts training and restores the last retained checkpoint.
inline TrainResult train(TabularPolicy& policy, const std::vector<Query>& dataset,
                         const CurriculumPlan& plan, const TrainConfig& config) {
  config.validate();
  if (plan.stages < 1 || plan.ordered_ids.empty())
    throw std::invalid_argument("train: empty curriculum plan");
  std::map<int, const Query*> by_id;
  for (const Query& q : dataset) by_id[q.id] = &q;
  for (int id : plan.ordered_ids) {
    if (by_id.find(id) == by_id.end())
      throw std::invalid_argument("train: plan references unknown query id");
  }

  TrainResult result;
  result.reference = policy.snapshot();
  TabularPolicy checkpoint = policy;
  int checkpoint_step = 0;

  const int stages = plan.stages;
  const int base_steps = config.total_steps / stages;
  int step = 0;
  for (int stage = 0; stage < stages; ++stage) {
    const auto [begin, end] = plan.stage_range(stage);
    const std::size_t stage_size = end - begin;
    if (stage_size == 0)
      throw std::invalid_argument("train: empty curriculum stage");
    int stage_steps = base_steps;
    if (stage == stages - 1) stage_steps = config.total_steps - base_steps * (stages - 1);
    std::size_t cursor = 0;
    for (int s = 0; s < stage_steps; ++s, ++step) {
      // rollouts, sequential fixed order
      std::vector<RolloutGroup> groups;
      groups.reserve(static_cast<std::size_t>(config.queries_per_step));
      for (int slot = 0; slot < config.queries_per_step; ++slot) {
        const int qid = plan.ordered_ids[begin + (cursor % stage_size)];
        ++cursor;
        auto rng = derive_rng(config.seed, rng_tag::kRollout,
                              static_cast<std::uint64_t>(step),
                              static_cast<std::uint64_t>(slot));
        groups.push_back(rollout_group(policy, *by_id.at(qid), config.group_size,
                                       config.max_response_length, rng,
                                       config.temperature));
      }
      TokenBatch batch = build_token_batch(policy, groups);
      if (batch.empty()) continue;
      apply_token_selection(batch, config.thresholds, config.beta_low,
                            config.beta_high);

      ReferencePolicy rollout_snapshot;
      if (config.objective.mode == ObjectiveMode::kCovarianceKl)
        rollout_snapshot = policy.snapshot();

      MetricsRow row;
      row.step = step;
      row.stage = stage;
      double reward_sum = 0.0, len_sum = 0.0;
      int resp_count = 0;
      for (const RolloutGroup& g : groups) {
        for (double r : g.rewards) reward_sum += r;
        for (const Response& resp : g.responses)
          len_sum += static_cast<double>(resp.tokens.size());
        resp_count += g.group_size;
      }
      row.mean_reward = reward_sum / static_cast<double>(resp_count);
      row.mean_resp_len = len_sum / static_cast<double>(resp_count);
      double entropy_sum = 0.0;
      for (const TokenRecord& t : batch.tokens) entropy_sum += t.entropy;
      row.mean_entropy = entropy_sum / static_cast<double>(batch.size());
      const SelectionSummary sel = summarize_selection(batch);
      row.low_count = sel.low_count;
      row.high_cov_count = sel.high_cov_count;
      row.mean_low_entropy = sel.mean_low_entropy;
      row.mean_high_cov = sel.mean_high_cov;
      if (config.log_forecasts) {
        const auto [t1, t2] = detail::empirical_forecast_terms(
            policy, result.reference, batch, config.learning_rate);
        row.term1 = t1;
        row.term2 = t2;
      }

      try {
        for (int pass = 0; pass < config.passes_per_batch; ++pass) {
          auto obj_rng = derive_rng(config.seed, rng_tag::kObjective,
                                    static_cast<std::uint64_t>(step),
                                    static_cast<std::uint64_t>(pass));
          const ObjectiveEval eval =
              evaluate_objective(policy, batch, result.reference,
                                 rollout_snapshot, config.objective, obj_rng);
          if (pass == 0) row.objective = eval.value;
          policy.apply_gradient(eval.gradient, config.learning_rate);
        }
      } catch (const std::exception& e) {
        std::fprintf(stderr,
                     "train: aborting at step %d (%s); restoring checkpoint "
                     "from step %d\n",
                     step, e.what(), checkpoint_step);
        policy = checkpoint;
        result.aborted_non_finite = true;
        return result;
      }

      result.metrics.push_back(row);
      ++result.completed_steps;
      if (config.checkpoint_interval > 0 &&
          (step + 1) % config.checkpoint_interval == 0) {
        checkpoint = policy;
        checkpoint_step = step + 1;
        if (!config.checkpoint_path.empty())
          save_policy(config.checkpoint_path, policy);
      }
    }
  }
  return result;
}

// ------------------------------------------------------------- evaluation

struct EvalSplit {
  std::string name;
  std::vector<int> ks;
  std::map<int, double> pass_at_k;
  std::map<int, double> avg_at_k;
  std::map<int, double> len_at_k;
};

struct EvalReport {
  std::vector<EvalSplit> splits;
};

/// Samples max(K) responses per query once, then reads every requested K off
/// the same sample prefix: pass@K is the at-least-one-success rate, avg@K the
/// mean success rate, len@K the mean token count.
inline EvalSplit evaluate(TabularPolicy& policy, const std::vector<Query>& eval_set,
                          const std::vector<int>& k_list, std::uint64_t seed,
                          int max_len, double temperature = 1.0,
                          std::string name = "eval") {
  if (k_list.empty()) throw std::invalid_argument("evaluate: empty K list");
  for (int k : k_list)
    if (k < 1) throw std::invalid_argument("evaluate: K must be >= 1");
  int k_max = 0;
  for (int k : k_list) k_max = std::max(k_max, k);

  EvalSplit split;
  split.name = std::move(name);
  split.ks = k_list;
  std::vector<std::vector<double>> outcomes;
  std::vector<std::vector<double>> lengths;
  for (const Query& q : eval_set) {
    auto rng = derive_rng(seed, rng_tag::kEval, static_cast<std::uint64_t>(q.id));
    std::vector<double> o, l;
    for (int i = 0; i < k_max; ++i) {
      const Response r = policy.sample_response(q, max_len, temperature, rng);
      o.push_back(verify(q, r, policy.vocab()));
      l.push_back(static_cast<double>(r.tokens.size()));
    }
    outcomes.push_back(std::move(o));
    lengths.push_back(std::move(l));
  }
  const double nq = static_cast<double>(eval_set.size());
  for (int k : k_list) {
    double pass = 0.0, avg = 0.0, len = 0.0;
    for (std::size_t qi = 0; qi < outcomes.size(); ++qi) {
      bool any = false;
      double hits = 0.0, tok = 0.0;
      for (int i = 0; i < k; ++i) {
        any = any || outcomes[qi][static_cast<std::size_t>(i)] > 0.5;
        hits += outcomes[qi][static_cast<std::size_t>(i)];
        tok += lengths[qi][static_cast<std::size_t>(i)];
      }
      pass += any ? 1.0 : 0.0;
      avg += hits / static_cast<double>(k);
      len += tok / static_cast<double>(k);
    }
    split.pass_at_k[k] = eval_set.empty() ? 0.0 : pass / nq;
    split.avg_at_k[k] = eval_set.empty() ? 0.0 : avg / nq;
    split.len_at_k[k] = eval_set.empty() ? 0.0 : len / nq;
  }
  return split;
}

inline json eval_report_to_json(const EvalReport& report) {
  json j;
  j["splits"] = json::array();
  for (const EvalSplit& s : report.splits) {
    json js;
    js["name"] = s.name;
    js["k"] = s.ks;
    json p, a, l;
    for (int k : s.ks) {
      const std::string key = std::to_string(k);
      p[key] = s.pass_at_k.at(k);
      a[key] = s.avg_at_k.at(k);
      l[key] = s.len_at_k.at(k);
    }
    js["pass_at_k"] = p;
    js["avg_at_k"] = a;
    js["len_at_k"] = l;
    j["splits"].push_back(js);
  }
  return j;
}

inline void save_eval_report(const std::string& path, const EvalReport& report) {
  std::ofstream f = detail::open_out(path);
  f << eval_report_to_json(report).dump(2) << "\n";
}

}  // namespace sentlab
