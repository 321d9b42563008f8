#pragma once

// Shared test fixtures: randomized rollout batches with guaranteed reward
// variance, plus the central finite-difference gradient check used by every
// objective-mode suite and the acceptance gate.

#include <cmath>
#include <vector>

#include "sentlab/baselines.hpp"
#include "sentlab/grpo.hpp"
#include "sentlab/harness.hpp"
#include "sentlab/sent.hpp"
#include "sentlab/task_env.hpp"

namespace sentlab::testfix {

struct BatchFixture {
  TabularPolicy policy;
  ReferencePolicy ref;      // snapshot taken before the post-rollout jitter
  ReferencePolicy rollout;  // the sampling policy (pi_old rows)
  std::vector<RolloutGroup> groups;
  TokenBatch batch;
};

/// Rollout batch over a tiny dataset. The policy is warm-started so responses
/// are well-formed, every group's rewards are re-rigged to a mixed pattern so
/// advantages are non-degenerate, and the policy is jittered after rollout so
/// likelihood ratios move off 1. Selection flags / covariances are populated
/// and frozen before the jitter is applied.
inline BatchFixture make_fd_batch(std::uint64_t seed, int n_queries = 2,
                                  int group_size = 4, double jitter = 0.15,
                                  int max_len = 12, double beta_low = 0.5,
                                  double beta_high = 2.0) {
  GeneratorSpec gen;
  gen.count = n_queries;
  gen.modulus_max = 9;
  const std::vector<Query> dataset = generate_dataset(gen, seed);

  TabularPolicy policy(gen.vocab, 2);
  WarmStartConfig warm;
  warm.demos_per_query = 4;
  warm.passes = 2;
  warm.step_size = 0.5;
  warm.correct_prob_by_steps = {0.6, 0.5, 0.4};
  warm_start(policy, dataset, warm, seed);

  auto rng = derive_rng(seed, 0xF17);
  std::vector<RolloutGroup> groups;
  for (const Query& q : dataset) {
    RolloutGroup g = rollout_group(policy, q, group_size, max_len, rng);
    // force mixed outcomes so the group-normalized advantages are non-zero
    // and the group passes the 0 < correct < G mask filter
    for (int i = 0; i < g.group_size; ++i)
      g.rewards[static_cast<std::size_t>(i)] =
          (static_cast<std::size_t>(i) < uniform_index(rng, static_cast<std::size_t>(g.group_size - 1)) + 1)
              ? 1.0
              : 0.0;
    g.advantages = group_advantages(g.rewards);
    groups.push_back(std::move(g));
  }

  TokenBatch batch = build_token_batch(policy, groups);
  apply_token_selection(batch,
                        {EntropyThresholdMode::kPercentile, 0.8,
                         CovThresholdMode::kTopFraction, 0.25},
                        beta_low, beta_high);

  ReferencePolicy rollout = policy.snapshot();
  ReferencePolicy ref = policy.snapshot();
  if (jitter > 0.0) {
    for (int s = 0; s < policy.num_states(); ++s) {
      const auto row = policy.logits_row(s);
      for (std::size_t v = 0; v < row.size(); ++v)
        policy.set_logit(s, static_cast<TokenId>(v),
                         row[v] + jitter * gaussian(rng));
    }
  }
  return {std::move(policy), std::move(ref), std::move(rollout),
          std::move(groups), std::move(batch)};
}

/// Central finite-difference check of an objective's analytic gradient over
/// every logit of every state the batch touches. Returns the worst relative
/// error, with |a - fd| measured against max(|a|, |fd|, 1e-4). The default
/// step balances truncation against cancellation noise for objectives whose
/// value is a few orders of magnitude above their per-logit gradients.
template <typename EvalFn>
double max_gradient_rel_error(TabularPolicy& policy, const TokenBatch& batch,
                              EvalFn eval, double h = 5e-5) {
  const ObjectiveEval base = eval(policy);
  std::vector<int> states;
  for (const TokenRecord& t : batch.tokens) {
    bool seen = false;
    for (int s : states) seen = seen || (s == t.state);
    if (!seen) states.push_back(t.state);
  }
  double worst = 0.0;
  const int vocab = policy.vocab().size;
  for (int s : states) {
    for (TokenId v = 0; v < vocab; ++v) {
      const double orig = policy.logits_row(s)[static_cast<std::size_t>(v)];
      policy.set_logit(s, v, orig + h);
      const double up = eval(policy).value;
      policy.set_logit(s, v, orig - h);
      const double down = eval(policy).value;
      policy.set_logit(s, v, orig);
      const double fd = (up - down) / (2 * h);
      const double analytic = base.gradient.at(s, v);
      const double denom = std::max({std::abs(analytic), std::abs(fd), 1e-4});
      worst = std::max(worst, std::abs(analytic - fd) / denom);
    }
  }
  return worst;
}

}  // namespace sentlab::testfix
