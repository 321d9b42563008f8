#pragma once

/**
 * Token-selective KL machinery.
 *
 * A rollout batch is scanned once before optimization: low-entropy tokens are
 * flagged, a per-token covariance between (centered) current-policy log-prob
 * and (centered) advantage is computed over the whole batch, the
 * high-covariance subset of the low-entropy tokens is flagged, and each token
 * receives its hierarchical KL coefficient beta_con in {0, beta_low,
 * beta_high}. Selection flags and covariances are frozen for every optimizer
 * pass over that batch; the objective differs from plain GRPO only in using
 * the per-token coefficient for the KL penalty.
 */

#include <algorithm>
#include <cmath>
#include <numeric>
#include <stdexcept>
#include <vector>

#include "sentlab/grpo.hpp"

namespace sentlab {

enum class EntropyThresholdMode { kAbsolute, kPercentile };
enum class CovThresholdMode { kAbsolute, kTopFraction };

struct ThresholdSpec {
  EntropyThresholdMode entropy_mode = EntropyThresholdMode::kPercentile;
  double entropy_value = 0.80;  // tau_H in absolute mode, fraction otherwise
  CovThresholdMode cov_mode = CovThresholdMode::kTopFraction;
  double cov_value = 0.0002;  // tau_cov in absolute mode, fraction otherwise

  void validate() const {
    if (entropy_mode == EntropyThresholdMode::kPercentile &&
        !(entropy_value > 0.0 && entropy_value < 1.0))
      throw std::invalid_argument("entropy percentile must lie in (0, 1)");
    if (cov_mode == CovThresholdMode::kTopFraction &&
        !(cov_value > 0.0 && cov_value <= 1.0))
      throw std::invalid_argument("covariance top-fraction must lie in (0, 1]");
  }
};

/// Flags the low-entropy token set. Absolute mode flags H_t < tau_H;
/// percentile mode flags exactly floor(fraction * N) tokens, lowest first,
/// ties broken by batch position.
inline void select_low_entropy(TokenBatch& batch, const ThresholdSpec& spec) {
  if (batch.empty())
    throw std::invalid_argument("select_low_entropy: empty batch");
  spec.validate();
  if (spec.entropy_mode == EntropyThresholdMode::kAbsolute) {
    for (TokenRecord& t : batch.tokens) t.in_low = t.entropy < spec.entropy_value;
    return;
  }
  const std::size_t n = batch.size();
  const auto count = static_cast<std::size_t>(
      std::floor(spec.entropy_value * static_cast<double>(n)));
  std::vector<std::size_t> order(n);
  std::iota(order.begin(), order.end(), 0);
  std::stable_sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) {
    return batch.tokens[a].entropy < batch.tokens[b].entropy;
  });
  for (TokenRecord& t : batch.tokens) t.in_low = false;
  for (std::size_t i = 0; i < count; ++i) batch.tokens[order[i]].in_low = true;
}

/// Per-token covariance between centered log-prob and centered advantage,
/// with both means taken over the whole rollout token batch. Log-probs are
/// the current-policy values captured at batch build (detached).
inline void token_covariance(TokenBatch& batch) {
  if (batch.empty()) throw std::invalid_argument("token_covariance: empty batch");
  const double n = static_cast<double>(batch.size());
  double mean_lp = 0.0, mean_adv = 0.0;
  for (const TokenRecord& t : batch.tokens) {
    mean_lp += t.logprob_new;
    mean_adv += t.advantage;
  }
  mean_lp /= n;
  mean_adv /= n;
  for (TokenRecord& t : batch.tokens)
    t.covariance = (t.logprob_new - mean_lp) * (t.advantage - mean_adv);
}

/// Flags the high-covariance subset of the low-entropy tokens. Absolute mode
/// flags Cov_t > tau_cov; top-fraction mode flags the ceil(fraction * |low|)
/// largest covariances, ties broken by batch position.
inline void select_high_cov(TokenBatch& batch, const ThresholdSpec& spec) {
  spec.validate();
  for (TokenRecord& t : batch.tokens) t.in_high_cov = false;
  if (spec.cov_mode == CovThresholdMode::kAbsolute) {
    for (TokenRecord& t : batch.tokens)
      t.in_high_cov = t.in_low && t.covariance > spec.cov_value;
    return;
  }
  std::vector<std::size_t> low;
  for (std::size_t i = 0; i < batch.size(); ++i)
    if (batch.tokens[i].in_low) low.push_back(i);
  if (low.empty()) return;
  const auto count = static_cast<std::size_t>(
      std::ceil(spec.cov_value * static_cast<double>(low.size())));
  std::stable_sort(low.begin(), low.end(), [&](std::size_t a, std::size_t b) {
    return batch.tokens[a].covariance > batch.tokens[b].covariance;
  });
  for (std::size_t i = 0; i < std::min(count, low.size()); ++i)
    batch.tokens[low[i]].in_high_cov = true;
}

inline void validate_beta_pair(double beta_low, double beta_high) {
  // The all-zero pair is the sanctioned way to switch the KL term off
  // entirely; any other configuration must be strictly ordered and positive.
  if (beta_low == 0.0 && beta_high == 0.0) return;
  if (!(beta_high > beta_low && beta_low > 0.0))
    throw std::invalid_argument(
        "KL coefficients must satisfy beta_high > beta_low > 0");
}

/// Hierarchical KL coefficient for one token: beta_high on the
/// high-covariance subset, beta_low on the rest of the low-entropy set,
/// zero elsewhere.
inline double assign_beta(TokenRecord& record, double beta_low,
                          double beta_high) {
  validate_beta_pair(beta_low, beta_high);
  if (record.in_high_cov)
    record.beta_con = beta_high;
  else if (record.in_low)
    record.beta_con = beta_low;
  else
    record.beta_con = 0.0;
  return record.beta_con;
}

/// Full selection pre-pass over a rollout batch: low-entropy flags,
/// covariances, high-covariance flags, and beta assignment.
inline void apply_token_selection(TokenBatch& batch, const ThresholdSpec& spec,
                                  double beta_low, double beta_high) {
  select_low_entropy(batch, spec);
  token_covariance(batch);
  select_high_cov(batch, spec);
  for (TokenRecord& t : batch.tokens) assign_beta(t, beta_low, beta_high);
}

struct SelectionSummary {
  std::size_t low_count = 0;
  std::size_t high_cov_count = 0;
  double mean_low_entropy = 0.0;
  double mean_high_cov = 0.0;
};

inline SelectionSummary summarize_selection(const TokenBatch& batch) {
  SelectionSummary s;
  for (const TokenRecord& t : batch.tokens) {
    if (t.in_low) {
      ++s.low_count;
      s.mean_low_entropy += t.entropy;
    }
    if (t.in_high_cov) {
      ++s.high_cov_count;
      s.mean_high_cov += t.covariance;
    }
  }
  if (s.low_count > 0) s.mean_low_entropy /= static_cast<double>(s.low_count);
  if (s.high_cov_count > 0)
    s.mean_high_cov /= static_cast<double>(s.high_cov_count);
  return s;
}

struct SentConfig {
  double clip_epsilon = 0.2;
};

/// GRPO objective with the uniform KL coefficient replaced by each token's
/// beta_con. Selection flags and covariances are constants of the gradient.
inline ObjectiveEval sent_objective(const TabularPolicy& policy,
                                    const TokenBatch& batch,
                                    const ReferencePolicy& ref,
                                    const SentConfig& config) {
  if (batch.empty()) throw std::invalid_argument("sent_objective: empty batch");
  ObjectiveEval out;
  detail::RowCache rows(policy);
  std::unordered_map<int, std::vector<double>> ref_logp;
  for (const TokenRecord& t : batch.tokens) {
    const auto& cur = rows.get(t.state);
    const double lp_new = cur.logp[static_cast<std::size_t>(t.token)];
    out.value += detail::add_clipped_surrogate(
        out.gradient, t.state, t.token, cur.prob, lp_new, t.logprob_old,
        t.advantage, config.clip_epsilon, t.grpo_weight, &out.ratio_overflows);
    if (t.beta_con != 0.0) {
      auto it = ref_logp.find(t.state);
      if (it == ref_logp.end())
        it = ref_logp.emplace(t.state, ref.log_probs(t.state)).first;
      const double kl = detail::add_forward_kl_penalty(
          out.gradient, t.state, cur, it->second, t.grpo_weight * t.beta_con);
      out.value -= t.grpo_weight * t.beta_con * kl;
    }
    detail::check_finite(out.value, "sent_objective", t);
  }
  return out;
}

}  // namespace sentlab
