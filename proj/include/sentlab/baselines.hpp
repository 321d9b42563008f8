#pragma once

/**
 * Entropy-intervention baselines, implemented as interchangeable objective
 * modes over the same token batches:
 *
 *   EN       - entropy bonus: GRPO plus lambda times token-mean entropy.
 *   ADV      - advantage shaping: A + min(alpha * H, |A| / kappa), H frozen.
 *   MASK     - optimize only the top-rho high-entropy tokens, normalized by
 *              selected count; all-correct / all-wrong groups are excluded.
 *   CLIP     - zero out a random floor(r * N) subset of the tokens whose
 *              covariance lies in [omega_low, omega_high]; plain ratio form.
 *   COV      - reverse-KL penalty D(pi_old || pi_theta) on the top-k_cov
 *              fraction of tokens by covariance; plain ratio form.
 *   HIGH_EN  - GRPO plus lambda times the summed entropy of tokens whose
 *              frozen entropy clears tau_he (indicator held constant).
 *
 * GRPO and SENT complete the eight modes handled by evaluate_objective.
 * CLIP and COV require token_covariance() to have been run on the batch.
 */

#include <algorithm>
#include <cmath>
#include <numeric>
#include <stdexcept>
#include <vector>

#include "sentlab/grpo.hpp"
#include "sentlab/sent.hpp"

namespace sentlab {

enum class ObjectiveMode {
  kGrpo,
  kEntropyBonus,      // w/ En
  kShapedAdvantage,   // w/ Adv
  kEntropyMask,       // w/ Mask
  kCovarianceClip,    // w/ Clip
  kCovarianceKl,      // w/ Cov
  kHighEntropyReward, // w/ High_En
  kSent,
};

struct BaselineConfig {
  ObjectiveMode mode = ObjectiveMode::kGrpo;
  double clip_epsilon = 0.2;
  double kl_beta = 0.001;    // uniform forward-KL coefficient of the GRPO base
  double lambda = 0.001;     // entropy coefficient (EN / HIGH_EN)
  double alpha = 0.4;        // advantage shaping scale
  double kappa = 2.0;        // advantage shaping cap divisor
  double rho = 0.2;          // mask: fraction of high-entropy tokens kept
  double r_clip = 2e-4;      // clip: fraction of tokens zeroed
  double omega_low = 1.0;    // clip: covariance band
  double omega_high = 5.0;
  double k_cov = 0.0002;     // cov: fraction of tokens penalized
  double cov_kl_beta = 1.0;  // cov: reverse-KL coefficient
  double tau_he = 1.0;       // high-entropy reward threshold, nats

  void validate() const {
    if (!(clip_epsilon > 0.0 && clip_epsilon < 1.0))
      throw std::invalid_argument("clip epsilon must lie in (0, 1)");
    if (lambda < 0.0 || alpha < 0.0)
      throw std::invalid_argument("lambda and alpha must be >= 0");
    if (!(kappa > 0.0)) throw std::invalid_argument("kappa must be > 0");
    if (!(rho > 0.0 && rho <= 1.0))
      throw std::invalid_argument("mask fraction must lie in (0, 1]");
    if (r_clip < 0.0 || r_clip >= 1.0)
      throw std::invalid_argument("clip fraction must lie in [0, 1)");
    if (!(k_cov > 0.0 && k_cov <= 1.0))
      throw std::invalid_argument("cov fraction must lie in (0, 1]");
    if (!(omega_low < omega_high))
      throw std::invalid_argument("covariance bounds must satisfy low < high");
  }

  /// Per-mode coefficient presets; everything not listed keeps its default.
  static BaselineConfig defaults_for(ObjectiveMode mode) {
    BaselineConfig c;
    c.mode = mode;
    switch (mode) {
      case ObjectiveMode::kGrpo: c.kl_beta = 0.001; break;
      case ObjectiveMode::kCovarianceKl:
        c.kl_beta = 0.0;
        c.cov_kl_beta = 1.0;
        break;
      case ObjectiveMode::kSent: c.kl_beta = 0.0; break;
      default: c.kl_beta = 0.0; break;  // modes without a uniform KL term
    }
    return c;
  }
};

/// A + min(alpha * H, |A| / kappa), with the entropy treated as a constant.
inline double shaped_advantage(double entropy, double advantage, double alpha,
                               double kappa) {
  if (alpha < 0.0 || !(kappa > 0.0))
    throw std::invalid_argument("shaped_advantage: bad alpha/kappa");
  return advantage + std::min(alpha * entropy, std::abs(advantage) / kappa);
}

/// GRPO plus lambda times the batch token-mean entropy (entropy gradient
/// included).
inline ObjectiveEval entropy_bonus_objective(const TabularPolicy& policy,
                                             const TokenBatch& batch,
                                             const ReferencePolicy& ref,
                                             const BaselineConfig& config) {
  config.validate();
  ObjectiveEval out = grpo_objective(policy, batch, ref,
                                     {config.clip_epsilon, config.kl_beta});
  if (config.lambda == 0.0) return out;
  detail::RowCache rows(policy);
  const double coef = config.lambda / static_cast<double>(batch.size());
  for (const TokenRecord& t : batch.tokens) {
    const double h = detail::add_entropy_bonus(out.gradient, t.state,
                                               rows.get(t.state), coef);
    out.value += coef * h;
  }
  detail::check_finite(out.value, "entropy_bonus_objective");
  return out;
}

/// GRPO with shaped advantages; the shaping term reads the frozen rollout
/// entropy, so no gradient flows through it.
inline ObjectiveEval shaped_advantage_objective(const TabularPolicy& policy,
                                                const TokenBatch& batch,
                                                const ReferencePolicy& ref,
                                                const BaselineConfig& config) {
  config.validate();
  TokenBatch shaped = batch;
  for (TokenRecord& t : shaped.tokens)
    t.advantage = shaped_advantage(t.entropy, t.advantage, config.alpha,
                                   config.kappa);
  return grpo_objective(policy, shaped, ref,
                        {config.clip_epsilon, config.kl_beta});
}

/// Clipped surrogate over only the top-rho high-entropy tokens, normalized by
/// the selected-token count. Groups that are all-correct or all-wrong are
/// excluded before selection. An empty selection contributes zero.
inline ObjectiveEval entropy_mask_objective(const TabularPolicy& policy,
                                            const TokenBatch& batch,
                                            const ReferencePolicy& /*ref*/,
                                            const BaselineConfig& config) {
  config.validate();
  if (batch.empty())
    throw std::invalid_argument("entropy_mask_objective: empty batch");
  std::vector<std::size_t> eligible;
  for (std::size_t i = 0; i < batch.size(); ++i) {
    const GroupMeta& g = batch.groups[static_cast<std::size_t>(batch.tokens[i].group)];
    if (g.correct_count > 0 && g.correct_count < g.group_size)
      eligible.push_back(i);
  }
  ObjectiveEval out;
  if (eligible.empty()) {
    std::fprintf(stderr,
                 "entropy_mask_objective: no eligible tokens after group "
                 "filtering; contributing 0\n");
    return out;
  }
  const auto count = std::min(
      eligible.size(),
      static_cast<std::size_t>(
          std::ceil(config.rho * static_cast<double>(eligible.size()))));
  std::stable_sort(eligible.begin(), eligible.end(),
                   [&](std::size_t a, std::size_t b) {
                     return batch.tokens[a].entropy > batch.tokens[b].entropy;
                   });
  eligible.resize(count);
  detail::RowCache rows(policy);
  const double w = 1.0 / static_cast<double>(count);
  for (std::size_t i : eligible) {
    const TokenRecord& t = batch.tokens[i];
    const auto& cur = rows.get(t.state);
    const double lp_new = cur.logp[static_cast<std::size_t>(t.token)];
    out.value += detail::add_clipped_surrogate(
        out.gradient, t.state, t.token, cur.prob, lp_new, t.logprob_old,
        t.advantage, config.clip_epsilon, w, &out.ratio_overflows);
  }
  detail::check_finite(out.value, "entropy_mask_objective");
  return out;
}

/// Plain ratio*A objective with a uniformly sampled floor(r_clip * N) subset
/// of in-band covariance tokens zeroed out. Requires token_covariance().
inline ObjectiveEval covariance_clip_objective(const TabularPolicy& policy,
                                               const TokenBatch& batch,
                                               const BaselineConfig& config,
                                               std::mt19937_64& rng) {
  config.validate();
  if (batch.empty())
    throw std::invalid_argument("covariance_clip_objective: empty batch");
  std::vector<std::size_t> candidates;
  for (std::size_t i = 0; i < batch.size(); ++i) {
    const double c = batch.tokens[i].covariance;
    if (c >= config.omega_low && c <= config.omega_high) candidates.push_back(i);
  }
  const auto want = static_cast<std::size_t>(
      std::floor(config.r_clip * static_cast<double>(batch.size())));
  const std::size_t n_clip = std::min(want, candidates.size());
  // partial Fisher-Yates: the first n_clip entries are the clipped sample
  for (std::size_t i = 0; i < n_clip; ++i) {
    const std::size_t j = i + uniform_index(rng, candidates.size() - i);
    std::swap(candidates[i], candidates[j]);
  }
  std::vector<bool> clipped(batch.size(), false);
  for (std::size_t i = 0; i < n_clip; ++i) clipped[candidates[i]] = true;

  ObjectiveEval out;
  detail::RowCache rows(policy);
  for (std::size_t i = 0; i < batch.size(); ++i) {
    if (clipped[i]) continue;
    const TokenRecord& t = batch.tokens[i];
    const auto& cur = rows.get(t.state);
    const double lp_new = cur.logp[static_cast<std::size_t>(t.token)];
    out.value += detail::add_plain_ratio(out.gradient, t.state, t.token,
                                         cur.prob, lp_new, t.logprob_old,
                                         t.advantage, t.grpo_weight,
                                         &out.ratio_overflows);
  }
  detail::check_finite(out.value, "covariance_clip_objective");
  return out;
}

/// Plain ratio*A objective with a reverse-KL penalty D(pi_old || pi_theta) on
/// the top ceil(k_cov * N) tokens by covariance. Requires token_covariance().
/// The ceiling keeps the penalty non-vacuous on small batches.
inline ObjectiveEval covariance_kl_objective(const TabularPolicy& policy,
                                             const TokenBatch& batch,
                                             const ReferencePolicy& rollout_policy,
                                             const BaselineConfig& config) {
  config.validate();
  if (batch.empty())
    throw std::invalid_argument("covariance_kl_objective: empty batch");
  std::vector<std::size_t> order(batch.size());
  std::iota(order.begin(), order.end(), 0);
  std::stable_sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) {
    return batch.tokens[a].covariance > batch.tokens[b].covariance;
  });
  const auto count = std::min(
      order.size(), static_cast<std::size_t>(std::ceil(
                        config.k_cov * static_cast<double>(order.size()))));
  std::vector<bool> penalized(batch.size(), false);
  for (std::size_t i = 0; i < count; ++i) penalized[order[i]] = true;

  ObjectiveEval out;
  detail::RowCache rows(policy);
  std::unordered_map<int, std::vector<double>> old_prob;
  for (std::size_t i = 0; i < batch.size(); ++i) {
    const TokenRecord& t = batch.tokens[i];
    const auto& cur = rows.get(t.state);
    const double lp_new = cur.logp[static_cast<std::size_t>(t.token)];
    out.value += detail::add_plain_ratio(out.gradient, t.state, t.token,
                                         cur.prob, lp_new, t.logprob_old,
                                         t.advantage, t.grpo_weight,
                                         &out.ratio_overflows);
    if (penalized[i] && config.cov_kl_beta != 0.0) {
      auto it = old_prob.find(t.state);
      if (it == old_prob.end()) {
        const std::vector<double> old_logp = rollout_policy.log_probs(t.state);
        std::vector<double> q(old_logp.size());
        for (std::size_t v = 0; v < q.size(); ++v) q[v] = std::exp(old_logp[v]);
        it = old_prob.emplace(t.state, std::move(q)).first;
      }
      const std::vector<double>& q = it->second;
      // D(q || pi): value and its logit gradient d/d theta_v = pi_v - q_v
      double kl = 0.0;
      for (std::size_t v = 0; v < q.size(); ++v) {
        if (q[v] > 0.0) kl += q[v] * (std::log(q[v]) - cur.logp[v]);
      }
      const double coef = t.grpo_weight * config.cov_kl_beta;
      out.value -= coef * kl;
      for (std::size_t v = 0; v < q.size(); ++v)
        out.gradient.add(t.state, static_cast<TokenId>(v),
                         -coef * (cur.prob[v] - q[v]));
    }
    detail::check_finite(out.value, "covariance_kl_objective", t);
  }
  return out;
}

/// GRPO plus lambda times the summed entropy of tokens whose frozen rollout
/// entropy is at least tau_he; the indicator is constant, the entropy itself
/// is recomputed and carries gradient.
inline ObjectiveEval high_entropy_reward_objective(const TabularPolicy& policy,
                                                   const TokenBatch& batch,
                                                   const ReferencePolicy& ref,
                                                   const BaselineConfig& config) {
  config.validate();
  ObjectiveEval out = grpo_objective(policy, batch, ref,
                                     {config.clip_epsilon, config.kl_beta});
  if (config.lambda == 0.0) return out;
  detail::RowCache rows(policy);
  for (const TokenRecord& t : batch.tokens) {
    if (t.entropy < config.tau_he) continue;
    const double h = detail::add_entropy_bonus(out.gradient, t.state,
                                               rows.get(t.state), config.lambda);
    out.value += config.lambda * h;
  }
  detail::check_finite(out.value, "high_entropy_reward_objective");
  return out;
}

/// Dispatch over the eight objective modes. `rollout_policy` is the policy
/// snapshot taken when the batch was sampled (reverse-KL baseline);
/// `rng` drives the random clipping baseline.
inline ObjectiveEval evaluate_objective(const TabularPolicy& policy,
                                        const TokenBatch& batch,
                                        const ReferencePolicy& ref,
                                        const ReferencePolicy& rollout_policy,
                                        const BaselineConfig& config,
                                        std::mt19937_64& rng) {
  switch (config.mode) {
    case ObjectiveMode::kGrpo:
      return grpo_objective(policy, batch, ref,
                            {config.clip_epsilon, config.kl_beta});
    case ObjectiveMode::kEntropyBonus:
      return entropy_bonus_objective(policy, batch, ref, config);
    case ObjectiveMode::kShapedAdvantage:
      return shaped_advantage_objective(policy, batch, ref, config);
    case ObjectiveMode::kEntropyMask:
      return entropy_mask_objective(policy, batch, ref, config);
    case ObjectiveMode::kCovarianceClip:
      return covariance_clip_objective(policy, batch, config, rng);
    case ObjectiveMode::kCovarianceKl:
      return covariance_kl_objective(policy, batch, rollout_policy, config);
    case ObjectiveMode::kHighEntropyReward:
      return high_entropy_reward_objective(policy, batch, ref, config);
    case ObjectiveMode::kSent:
      return sent_objective(policy, batch, ref, {config.clip_epsilon});
  }
  throw std::logic_error("unknown objective mode");
}

}  // namespace sentlab
