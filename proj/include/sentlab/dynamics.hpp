#pragma once

/**
 * Numerical verifier for the first-order entropy dynamics of tabular softmax
 * policies.
 *
 * Works on contextual-bandit instances: a weighted set of single-step states
 * with a per-token advantage vector (and optionally a per-token KL
 * coefficient) at each state. All expectations are closed-form sums over the
 * vocabulary, so the forecasts carry no Monte Carlo noise and the "actual"
 * entropy change can be recomputed exactly after applying the logit update.
 *
 * The first-order identity being exercised: for a softmax row, the gradient
 * of entropy in logit space is -pi_v (log pi_v + H), hence the leading-order
 * entropy change under a logit update dtheta is -Cov_pi(log pi, dtheta).
 */

#include <cmath>
#include <span>
#include <stdexcept>
#include <vector>

#include "sentlab/common.hpp"
#include "sentlab/policy.hpp"

namespace sentlab {

/// One bandit state: its weight in the entropy expectation, a per-token
/// advantage vector, and (optionally) a per-token KL coefficient map.
/// An empty beta vector means beta_con = 0 everywhere.
struct WeightedState {
  int state = 0;
  double weight = 0.0;
  std::vector<double> advantages;
  std::vector<double> beta;
};

struct EntropyForecast {
  double term1 = 0.0;           // vanilla entropy-decay component
  double term2 = 0.0;           // KL-induced preservation component
  double predicted_delta = 0.0; // term1 + term2, exactly as computed
  double actual_delta = 0.0;    // recomputed after applying the update
  double eta = 0.0;
};

/// State-weighted expected policy entropy, sum_s w_s H(pi(.|s)).
inline double expected_policy_entropy(const TabularPolicy& policy,
                                      std::span<const WeightedState> states) {
  double h = 0.0;
  for (const WeightedState& s : states)
    h += s.weight * token_entropy(policy.token_distribution(s.state));
  return h;
}

/// Expected policy-gradient logit update at one state:
/// dtheta_v = eta * pi(v|s) * (A_v - E_{v'~pi}[A_{v'}]).
inline std::vector<double> expected_pg_logit_update(
    const TabularPolicy& policy, int state, std::span<const double> advantages,
    double eta) {
  const TokenDistribution dist = policy.token_distribution(state);
  if (advantages.size() != dist.probs.size())
    throw std::invalid_argument("advantages must cover the vocabulary");
  double mean_adv = 0.0;
  for (std::size_t v = 0; v < dist.probs.size(); ++v)
    mean_adv += dist.probs[v] * advantages[v];
  std::vector<double> delta(dist.probs.size());
  for (std::size_t v = 0; v < dist.probs.size(); ++v)
    delta[v] = eta * dist.probs[v] * (advantages[v] - mean_adv);
  return delta;
}

/// Logit-space gradient of D_KL(pi_theta(.|s) || pi_ref(.|s)):
/// g_v = pi_v * ((log pi_v - log ref_v) - D_KL).
inline std::vector<double> kl_logit_gradient(const TabularPolicy& policy,
                                             const ReferencePolicy& ref,
                                             int state) {
  const std::vector<double> logp = policy.log_probs(state);
  const std::vector<double> ref_logp = ref.log_probs(state);
  std::vector<double> prob(logp.size());
  double kl = 0.0;
  for (std::size_t v = 0; v < logp.size(); ++v) {
    prob[v] = std::exp(logp[v]);
    kl += prob[v] * (logp[v] - ref_logp[v]);
  }
  std::vector<double> g(logp.size());
  for (std::size_t v = 0; v < logp.size(); ++v)
    g[v] = prob[v] * ((logp[v] - ref_logp[v]) - kl);
  return g;
}

namespace detail {

/// -eta * Cov_{o~pi}(log pi(o|s), pi(o|s) * A_o) for one state.
inline double vanilla_decay_term(const TabularPolicy& policy,
                                 const WeightedState& s, double eta) {
  const std::vector<double> logp = policy.log_probs(s.state);
  if (s.advantages.size() != logp.size())
    throw std::invalid_argument("advantages must cover the vocabulary");
  std::vector<double> prob(logp.size());
  std::vector<double> y(logp.size());
  for (std::size_t v = 0; v < logp.size(); ++v) {
    prob[v] = std::exp(logp[v]);
    y[v] = prob[v] * s.advantages[v];
  }
  return -eta * weighted_covariance(prob, logp, y);
}

}  // namespace detail

/// First-order entropy-change forecast for vanilla policy gradient:
/// -eta * sum_s w_s Cov_{o~pi}(log pi(o|s), pi(o|s) A_o).
inline double predict_entropy_change_vanilla(
    const TabularPolicy& policy, std::span<const WeightedState> states,
    double eta) {
  double total = 0.0;
  for (const WeightedState& s : states)
    total += s.weight * detail::vanilla_decay_term(policy, s, eta);
  return total;
}

/// Forecast under the token-selective KL update. Term 1 is the vanilla decay;
/// term 2 adds +eta * sum_s w_s Cov_{o~pi}(log pi, beta_con(o) * g_KL(o)).
/// The actual delta applies the full logit update
///   dtheta_{s,v} = eta * (pi(v|s) A_v - beta_v g_KL(v))
/// to a copy of the policy and recomputes the expected entropy from scratch.
inline EntropyForecast predict_entropy_change_sent(
    const TabularPolicy& policy, const ReferencePolicy& ref,
    std::span<const WeightedState> states, double eta) {
  EntropyForecast f;
  f.eta = eta;
  TabularPolicy updated = policy;
  for (const WeightedState& s : states) {
    f.term1 += s.weight * detail::vanilla_decay_term(policy, s, eta);

    const std::vector<double> logp = policy.log_probs(s.state);
    std::vector<double> prob(logp.size());
    for (std::size_t v = 0; v < logp.size(); ++v) prob[v] = std::exp(logp[v]);
    std::vector<double> beta = s.beta;
    if (beta.empty()) beta.assign(logp.size(), 0.0);
    if (beta.size() != logp.size())
      throw std::invalid_argument("beta map must cover the vocabulary");

    const std::vector<double> g_kl = kl_logit_gradient(policy, ref, s.state);
    std::vector<double> y(logp.size());
    for (std::size_t v = 0; v < logp.size(); ++v) y[v] = beta[v] * g_kl[v];
    f.term2 += s.weight * eta * weighted_covariance(prob, logp, y);

    const auto row = policy.logits_row(s.state);
    for (std::size_t v = 0; v < logp.size(); ++v) {
      const double delta =
          eta * (prob[v] * s.advantages[v] - beta[v] * g_kl[v]);
      updated.set_logit(s.state, static_cast<TokenId>(v), row[v] + delta);
    }
  }
  f.predicted_delta = f.term1 + f.term2;
  f.actual_delta = expected_policy_entropy(updated, states) -
                   expected_policy_entropy(policy, states);
  return f;
}

/// Randomized contextual-bandit instance used by the dynamics verifier:
/// 1-4 single-step states over a 2-16 token action space, standard-normal
/// logits, a perturbed reference, normalized state weights, and per-token
/// advantages. With `with_beta`, each token draws its KL coefficient from
/// {0, beta_low, beta_high}.
struct BanditInstance {
  TabularPolicy policy;
  ReferencePolicy ref;
  std::vector<WeightedState> states;
};

inline BanditInstance make_random_bandit_instance(std::mt19937_64& rng,
                                                  bool with_beta,
                                                  double beta_low = 0.5,
                                                  double beta_high = 2.0,
                                                  int min_vocab = 2,
                                                  int max_vocab = 16) {
  Vocabulary v;
  v.size = min_vocab + static_cast<int>(uniform_index(
                           rng, static_cast<std::size_t>(max_vocab - min_vocab + 1)));
  v.eos = v.size - 1;
  v.answer_delim = v.size - 2;
  TabularPolicy policy(v, 0);
  const int n_states = 1 + static_cast<int>(uniform_index(rng, 4));
  std::vector<std::vector<double>> ref_rows;
  std::vector<WeightedState> states;
  double weight_sum = 0.0;
  for (int s = 0; s < n_states; ++s) {
    WeightedState ws;
    ws.state = policy.state_index(s, {});
    ws.weight = 0.05 + uniform01(rng);
    weight_sum += ws.weight;
    std::vector<double> ref_row(static_cast<std::size_t>(v.size));
    for (int t = 0; t < v.size; ++t) {
      policy.set_logit(ws.state, t, gaussian(rng));
      ref_row[static_cast<std::size_t>(t)] = gaussian(rng);
      ws.advantages.push_back(gaussian(rng));
      if (with_beta) {
        const std::size_t pick = uniform_index(rng, 3);
        ws.beta.push_back(pick == 0 ? 0.0 : (pick == 1 ? beta_low : beta_high));
      }
    }
    ref_rows.push_back(std::move(ref_row));
    states.push_back(std::move(ws));
  }
  for (WeightedState& ws : states) ws.weight /= weight_sum;
  return {std::move(policy), ReferencePolicy(std::move(ref_rows), v.size),
          std::move(states)};
}

/// Cross-checks the closed-form expected-PG logit update against applying the
/// literal policy-gradient expectation sum through apply_gradient. Returns
/// the maximum absolute discrepancy over the state's logits; for a tabular
/// softmax the two routes are algebraically identical.
inline double verify_logit_update_identity(const TabularPolicy& policy, int state,
                                  std::span<const double> advantages,
                                  double eta) {
  const TokenDistribution dist = policy.token_distribution(state);
  const std::size_t vocab = dist.probs.size();
  if (advantages.size() != vocab)
    throw std::invalid_argument("advantages must cover the vocabulary");

  // route 1: literal expectation sum_o pi(o) * d log pi(o)/d theta_v * A_o,
  // applied as a gradient-ascent step
  LogitGradient grad;
  for (std::size_t o = 0; o < vocab; ++o) {
    for (std::size_t v = 0; v < vocab; ++v) {
      const double ind = (o == v) ? 1.0 : 0.0;
      grad.add(state, static_cast<TokenId>(v),
               dist.probs[o] * (ind - dist.probs[v]) * advantages[o]);
    }
  }
  TabularPolicy updated = policy;
  updated.apply_gradient(grad, eta);

  // route 2: closed form eta * pi_v * (A_v - E[A])
  const std::vector<double> closed =
      expected_pg_logit_update(policy, state, advantages, eta);

  const auto before = policy.logits_row(state);
  const auto after = updated.logits_row(state);
  double max_diff = 0.0;
  for (std::size_t v = 0; v < vocab; ++v)
    max_diff = std::max(max_diff, std::abs((after[v] - before[v]) - closed[v]));
  return max_diff;
}

}  // namespace sentlab
