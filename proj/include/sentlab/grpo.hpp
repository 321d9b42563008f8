#pragma once

/**
 * GRPO objective machinery.
 *
 * Covers group rollouts with verifiable rewards, group-normalized advantages,
 * likelihood ratios, the clipped surrogate, exact per-token KL to a reference
 * policy, and the assembled objective with its analytic logit-space gradient.
 * Rollout-time log-probs, advantages, and clip-region membership are treated
 * as constants of the gradient; only the current policy's log-probs carry
 * derivatives.
 */

#include <algorithm>
#include <cmath>
#include <span>
#include <stdexcept>
#include <unordered_map>
#include <vector>

#include "sentlab/common.hpp"
#include "sentlab/policy.hpp"
#include "sentlab/task_env.hpp"

namespace sentlab {

struct RolloutGroup {
  Query query;
  std::vector<Response> responses;
  std::vector<double> rewards;     // each in {0, 1}
  std::vector<double> advantages;  // group-normalized, constant per response
  int group_size = 0;
};

struct TokenRecord {
  int group = 0;
  int response = 0;
  int position = 0;
  int state = 0;
  TokenId token = 0;
  double logprob_old = 0.0;  // fixed at rollout time
  double logprob_new = 0.0;  // under the policy at batch-build time
  double advantage = 0.0;
  double entropy = 0.0;      // next-token entropy at batch-build time
  double covariance = 0.0;
  double beta_con = 0.0;     // per-token KL coefficient (0, beta_low or beta_high)
  bool in_low = false;
  bool in_high_cov = false;
  double grpo_weight = 0.0;  // 1 / (num_groups * G * |o|)
};

struct GroupMeta {
  int query_id = 0;
  int group_size = 0;
  int correct_count = 0;
  std::vector<int> lengths;
};

struct TokenBatch {
  std::vector<TokenRecord> tokens;
  std::vector<GroupMeta> groups;

  std::size_t size() const { return tokens.size(); }
  bool empty() const { return tokens.empty(); }
};

struct ObjectiveEval {
  double value = 0.0;
  LogitGradient gradient;
  int ratio_overflows = 0;  // tokens whose likelihood ratio was clamped
};

/// Group-normalized advantages (population std). Groups with (near) zero
/// reward variance produce all-zero advantages instead of being resampled.
inline std::vector<double> group_advantages(std::span<const double> rewards) {
  if (rewards.size() < 2)
    throw std::invalid_argument("group_advantages needs G >= 2");
  const double n = static_cast<double>(rewards.size());
  double mean = 0.0;
  for (double r : rewards) mean += r;
  mean /= n;
  double var = 0.0;
  for (double r : rewards) var += (r - mean) * (r - mean);
  const double std_pop = std::sqrt(var / n);
  std::vector<double> adv(rewards.size(), 0.0);
  if (std_pop < 1e-8) return adv;
  for (std::size_t i = 0; i < rewards.size(); ++i)
    adv[i] = (rewards[i] - mean) / std_pop;
  return adv;
}

inline constexpr double kRatioLogMax = 700.0;
inline constexpr double kRatioSentinel = 1e300;

inline bool likelihood_ratio_overflows(double logprob_new, double logprob_old) {
  return logprob_new - logprob_old > kRatioLogMax;
}

/// exp(logprob_new - logprob_old), clamped to a large finite sentinel on
/// overflow (callers count and log clamped tokens).
inline double likelihood_ratio(double logprob_new, double logprob_old) {
  if (!std::isfinite(logprob_new) || !std::isfinite(logprob_old))
    throw std::invalid_argument("likelihood_ratio: non-finite log-prob");
  if (likelihood_ratio_overflows(logprob_new, logprob_old)) return kRatioSentinel;
  return std::exp(logprob_new - logprob_old);
}

/// min(r*A, clip(r, 1-eps, 1+eps)*A) -- the per-token PPO/GRPO contribution.
inline double clipped_surrogate(double ratio, double advantage, double eps) {
  if (!(eps > 0.0 && eps < 1.0))
    throw std::invalid_argument("clip epsilon must lie in (0, 1)");
  const double clipped = std::clamp(ratio, 1.0 - eps, 1.0 + eps);
  return std::min(ratio * advantage, clipped * advantage);
}

/// Samples G responses, rewards them through verify, and fills
/// group-normalized advantages.
inline RolloutGroup rollout_group(TabularPolicy& policy, const Query& query,
                                  int group_size, int max_len,
                                  std::mt19937_64& rng,
                                  double temperature = 1.0) {
  if (group_size < 2) throw std::invalid_argument("rollout group needs G >= 2");
  RolloutGroup g;
  g.query = query;
  g.group_size = group_size;
  g.responses.reserve(static_cast<std::size_t>(group_size));
  g.rewards.reserve(static_cast<std::size_t>(group_size));
  for (int i = 0; i < group_size; ++i) {
    Response r = policy.sample_response(query, max_len, temperature, rng);
    g.rewards.push_back(verify(query, r, policy.vocab()));
    g.responses.push_back(std::move(r));
  }
  g.advantages = group_advantages(g.rewards);
  return g;
}

/// Flattens rollout groups into per-token records. State ids are recomputed
/// from the response prefixes; logprob_new and entropy are evaluated under
/// the current policy, everything else is frozen rollout data.
inline TokenBatch build_token_batch(TabularPolicy& policy,
                                    std::span<const RolloutGroup> groups) {
  TokenBatch batch;
  const double num_groups = static_cast<double>(groups.size());
  for (std::size_t gi = 0; gi < groups.size(); ++gi) {
    const RolloutGroup& g = groups[gi];
    GroupMeta meta;
    meta.query_id = g.query.id;
    meta.group_size = g.group_size;
    for (double r : g.rewards) meta.correct_count += (r > 0.5) ? 1 : 0;
    for (std::size_t ri = 0; ri < g.responses.size(); ++ri) {
      const Response& resp = g.responses[ri];
      meta.lengths.push_back(static_cast<int>(resp.tokens.size()));
      const double w =
          1.0 / (num_groups * static_cast<double>(g.group_size) *
                 static_cast<double>(std::max<std::size_t>(1, resp.tokens.size())));
      std::vector<TokenId> prefix;
      prefix.reserve(resp.tokens.size());
      for (std::size_t t = 0; t < resp.tokens.size(); ++t) {
        TokenRecord rec;
        rec.group = static_cast<int>(gi);
        rec.response = static_cast<int>(ri);
        rec.position = static_cast<int>(t);
        rec.state = policy.state_index(g.query, prefix);
        rec.token = resp.tokens[t];
        rec.logprob_old = resp.logprobs_old[t];
        rec.logprob_new =
            policy.log_probs(rec.state)[static_cast<std::size_t>(rec.token)];
        rec.advantage = g.advantages[ri];
        rec.entropy = token_entropy(policy.token_distribution(rec.state));
        rec.grpo_weight = w;
        batch.tokens.push_back(std::move(rec));
        prefix.push_back(resp.tokens[t]);
      }
    }
    batch.groups.push_back(std::move(meta));
  }
  return batch;
}

namespace detail {

/// Per-state softmax rows memoized across one objective evaluation.
class RowCache {
 public:
  explicit RowCache(const TabularPolicy& policy) : policy_(policy) {}

  struct Entry {
    std::vector<double> logp;
    std::vector<double> prob;
  };

  const Entry& get(int state) {
    auto it = cache_.find(state);
    if (it != cache_.end()) return it->second;
    Entry e;
    e.logp = policy_.log_probs(state);
    e.prob.resize(e.logp.size());
    for (std::size_t i = 0; i < e.logp.size(); ++i)
      e.prob[i] = std::exp(e.logp[i]);
    return cache_.emplace(state, std::move(e)).first->second;
  }

 private:
  const TabularPolicy& policy_;
  std::unordered_map<int, Entry> cache_;
};

/// Adds coef * d(log pi(token|state))/d(theta_{state,v}) for all v.
/// The softmax identity: d log pi(a|s)/d theta_{s,v} = 1{a=v} - pi(v|s).
inline void add_logprob_gradient(LogitGradient& grad, int state, TokenId token,
                                 const std::vector<double>& prob, double coef) {
  if (coef == 0.0) return;
  for (std::size_t v = 0; v < prob.size(); ++v) {
    const double ind = (static_cast<TokenId>(v) == token) ? 1.0 : 0.0;
    grad.add(state, static_cast<TokenId>(v), coef * (ind - prob[v]));
  }
}

/// Clipped-surrogate token: value plus gradient. The unclipped branch is
/// taken whenever r*A <= clip(r)*A (ties resolve to the unclipped branch).
inline double add_clipped_surrogate(LogitGradient& grad, int state,
                                    TokenId token,
                                    const std::vector<double>& prob,
                                    double lp_new, double lp_old,
                                    double advantage, double eps, double weight,
                                    int* overflows) {
  const double r = likelihood_ratio(lp_new, lp_old);
  if (overflows != nullptr && likelihood_ratio_overflows(lp_new, lp_old))
    ++*overflows;
  const double clipped = std::clamp(r, 1.0 - eps, 1.0 + eps);
  const double unclipped_val = r * advantage;
  const double clipped_val = clipped * advantage;
  if (unclipped_val <= clipped_val) {
    add_logprob_gradient(grad, state, token, prob, weight * advantage * r);
    return weight * unclipped_val;
  }
  return weight * clipped_val;  // clipped branch: constant wrt theta
}

/// Plain ratio*A token (no PPO clipping), as in the covariance baselines.
inline double add_plain_ratio(LogitGradient& grad, int state, TokenId token,
                              const std::vector<double>& prob, double lp_new,
                              double lp_old, double advantage, double weight,
                              int* overflows) {
  const double r = likelihood_ratio(lp_new, lp_old);
  if (overflows != nullptr && likelihood_ratio_overflows(lp_new, lp_old))
    ++*overflows;
  add_logprob_gradient(grad, state, token, prob, weight * advantage * r);
  return weight * r * advantage;
}

/// Forward KL D(pi || ref) at a state, with gradient scaled by -coef (the
/// penalty enters objectives with a minus sign).
/// d D/d theta_{s,v} = pi_v * ((log pi_v - log ref_v) - D).
inline double add_forward_kl_penalty(LogitGradient& grad, int state,
                                     const RowCache::Entry& cur,
                                     const std::vector<double>& ref_logp,
                                     double coef) {
  double kl = 0.0;
  for (std::size_t v = 0; v < cur.prob.size(); ++v)
    kl += cur.prob[v] * (cur.logp[v] - ref_logp[v]);
  if (coef != 0.0) {
    for (std::size_t v = 0; v < cur.prob.size(); ++v) {
      const double d = cur.prob[v] * ((cur.logp[v] - ref_logp[v]) - kl);
      grad.add(state, static_cast<TokenId>(v), -coef * d);
    }
  }
  return kl;
}

/// Policy entropy at a state, with gradient scaled by coef.
/// d H/d theta_{s,v} = -pi_v * (log pi_v + H).
inline double add_entropy_bonus(LogitGradient& grad, int state,
                                const RowCache::Entry& cur, double coef) {
  double h = 0.0;
  for (std::size_t v = 0; v < cur.prob.size(); ++v)
    h -= cur.prob[v] * cur.logp[v];
  if (coef != 0.0) {
    for (std::size_t v = 0; v < cur.prob.size(); ++v)
      grad.add(state, static_cast<TokenId>(v),
               coef * (-cur.prob[v] * (cur.logp[v] + h)));
  }
  return h;
}

inline void check_finite(double v, const char* what) {
  if (!std::isfinite(v)) {
    throw std::runtime_error(std::string("non-finite intermediate in ") + what);
  }
}

inline void check_finite(double v, const char* what, const TokenRecord& t) {
  if (!std::isfinite(v)) {
    throw std::runtime_error(std::string("non-finite intermediate in ") + what +
                             " at token (group " + std::to_string(t.group) +
                             ", response " + std::to_string(t.response) +
                             ", position " + std::to_string(t.position) + ")");
  }
}

}  // namespace detail

/// Exact categorical D_KL(pi_theta(.|s) || pi_ref(.|s)) over the vocabulary.
inline double kl_exact(const TabularPolicy& policy, const ReferencePolicy& ref,
                       int state) {
  const std::vector<double> logp = policy.log_probs(state);
  const std::vector<double> ref_logp = ref.log_probs(state);
  double kl = 0.0;
  for (std::size_t v = 0; v < logp.size(); ++v)
    kl += std::exp(logp[v]) * (logp[v] - ref_logp[v]);
  return kl;
}

/// Monte Carlo k3 estimator of D_KL(pi || ref): mean over x ~ pi of
/// (r - 1 - log r) with r = ref(x)/pi(x). Fidelity-experiment utility only;
/// the objectives always integrate the KL exactly over the vocabulary.
inline double kl_sampled_k3(const TabularPolicy& policy,
                            const ReferencePolicy& ref, int state, int samples,
                            std::mt19937_64& rng) {
  if (samples < 1) throw std::invalid_argument("kl_sampled_k3: samples >= 1");
  const std::vector<double> logp = policy.log_probs(state);
  const std::vector<double> ref_logp = ref.log_probs(state);
  double acc = 0.0;
  for (int i = 0; i < samples; ++i) {
    const double u = uniform01(rng);
    double cum = 0.0;
    std::size_t x = logp.size() - 1;
    for (std::size_t v = 0; v < logp.size(); ++v) {
      cum += std::exp(logp[v]);
      if (u < cum) {
        x = v;
        break;
      }
    }
    const double log_r = ref_logp[x] - logp[x];
    acc += std::exp(log_r) - 1.0 - log_r;
  }
  return acc / static_cast<double>(samples);
}

struct GrpoConfig {
  double clip_epsilon = 0.2;
  double kl_beta = 0.001;
};

/// Assembled GRPO objective: mean over groups of length-normalized sums of
/// the clipped surrogate minus beta times the exact per-token KL penalty.
inline ObjectiveEval grpo_objective(const TabularPolicy& policy,
                                    const TokenBatch& batch,
                                    const ReferencePolicy& ref,
                                    const GrpoConfig& config) {
  if (batch.empty()) throw std::invalid_argument("grpo_objective: empty batch");
  ObjectiveEval out;
  detail::RowCache rows(policy);
  std::unordered_map<int, std::vector<double>> ref_logp;
  for (const TokenRecord& t : batch.tokens) {
    const auto& cur = rows.get(t.state);
    const double lp_new = cur.logp[static_cast<std::size_t>(t.token)];
    out.value += detail::add_clipped_surrogate(
        out.gradient, t.state, t.token, cur.prob, lp_new, t.logprob_old,
        t.advantage, config.clip_epsilon, t.grpo_weight, &out.ratio_overflows);
    if (config.kl_beta != 0.0) {
      auto it = ref_logp.find(t.state);
      if (it == ref_logp.end())
        it = ref_logp.emplace(t.state, ref.log_probs(t.state)).first;
      const double kl = detail::add_forward_kl_penalty(
          out.gradient, t.state, cur, it->second,
          t.grpo_weight * config.kl_beta);
      out.value -= t.grpo_weight * config.kl_beta * kl;
    }
    detail::check_finite(out.value, "grpo_objective", t);
  }
  return out;
}

}  // namespace sentlab
