#pragma once

/**
 * Tabular softmax sequence policy with direct logit parameterization.
 *
 * States are (query id, last-k response tokens) keys mapped to dense rows of
 * logits, grown on demand; a freshly allocated state reads all-zero logits
 * (uniform distribution). Keeping the parameterization tabular makes the
 * first-order entropy analysis exact: logit gradients are available in closed
 * form and the softmax identities hold as equalities, not approximations.
 *
 * Concurrency contract: single writer, multiple readers. The training
 * harness serializes all updates and state growth.
 */

#include <cmath>
#include <cstdint>
#include <optional>
#include <span>
#include <stdexcept>
#include <unordered_map>
#include <vector>

#include "sentlab/common.hpp"
#include "sentlab/task_env.hpp"

namespace sentlab {

struct TokenDistribution {
  std::vector<double> probs;
};

/// Entropy in nats of a next-token distribution. Always in [0, ln |V|].
inline double token_entropy(const TokenDistribution& dist) {
  return shannon_entropy(dist.probs);
}

struct StateKey {
  int query_id = 0;
  std::vector<TokenId> window;

  bool operator==(const StateKey& o) const {
    return query_id == o.query_id && window == o.window;
  }
};

struct StateKeyHash {
  std::size_t operator()(const StateKey& k) const {
    std::uint64_t h = splitmix64(static_cast<std::uint64_t>(k.query_id) + 0x51ED);
    for (TokenId t : k.window)
      h = splitmix64(h ^ (static_cast<std::uint64_t>(t) + 0x9E37));
    return static_cast<std::size_t>(h);
  }
};

/// Sparse accumulator for logit-space gradients.
struct LogitGradient {
  // key = state << 20 | token; vocabularies are far below 2^20 tokens
  std::unordered_map<std::int64_t, double> entries;

  static std::int64_t key(int state, TokenId token) {
    return (static_cast<std::int64_t>(state) << 20) |
           static_cast<std::int64_t>(token);
  }
  void add(int state, TokenId token, double v) {
    if (v != 0.0) entries[key(state, token)] += v;
  }
  void scale(double c) {
    for (auto& [k, v] : entries) v *= c;
  }
  double at(int state, TokenId token) const {
    auto it = entries.find(key(state, token));
    return it == entries.end() ? 0.0 : it->second;
  }
};

/// Frozen copy of the policy's logits, taken at a declared snapshot point.
/// States allocated after the snapshot read zero logits here.
class ReferencePolicy {
 public:
  ReferencePolicy() = default;
  ReferencePolicy(std::vector<std::vector<double>> logits, int vocab_size)
      : logits_(std::move(logits)), vocab_size_(vocab_size) {}

  int vocab_size() const { return vocab_size_; }
  std::size_t num_states() const { return logits_.size(); }

  /// Logit row for a state; all zeros when the state postdates the snapshot.
  std::vector<double> row(int state) const {
    if (state >= 0 && static_cast<std::size_t>(state) < logits_.size())
      return logits_[static_cast<std::size_t>(state)];
    return std::vector<double>(static_cast<std::size_t>(vocab_size_), 0.0);
  }

  std::vector<double> log_probs(int state) const {
    std::vector<double> r = row(state);
    double m = kNegInf;
    for (double x : r) m = std::max(m, x);
    double z = 0.0;
    for (double x : r) z += std::exp(x - m);
    const double lz = m + std::log(z);
    for (double& x : r) x -= lz;
    return r;
  }

 private:
  std::vector<std::vector<double>> logits_;
  int vocab_size_ = 0;
};

class TabularPolicy {
 public:
  // Accepts action spaces down to size 2: the stricter size >= 4 invariant
  // applies to task vocabularies (see GeneratorSpec), not to bandit rows.
  explicit TabularPolicy(Vocabulary vocab, int context_window = 2)
      : vocab_(vocab), context_window_(context_window) {
    if (vocab_.size < 2)
      throw std::invalid_argument("policy needs at least 2 tokens");
    if (vocab_.eos == vocab_.answer_delim || vocab_.eos < 0 ||
        vocab_.eos >= vocab_.size || vocab_.answer_delim < 0 ||
        vocab_.answer_delim >= vocab_.size)
      throw std::invalid_argument("bad eos/answer_delim ids");
    if (context_window_ < 0)
      throw std::invalid_argument("context_window must be >= 0");
  }

  const Vocabulary& vocab() const { return vocab_; }
  int context_window() const { return context_window_; }
  int num_states() const { return static_cast<int>(logits_.size()); }

  /// Deterministic state id for (query, response prefix). Only the last
  /// context_window tokens of the prefix participate in the key; new keys
  /// allocate fresh ids with zero logits.
  int state_index(int query_id, std::span<const TokenId> prefix) {
    StateKey key;
    key.query_id = query_id;
    const std::size_t k = std::min(prefix.size(),
                                   static_cast<std::size_t>(context_window_));
    key.window.assign(prefix.end() - static_cast<std::ptrdiff_t>(k), prefix.end());
    auto it = table_.find(key);
    if (it != table_.end()) return it->second;
    const int id = static_cast<int>(logits_.size());
    logits_.emplace_back(static_cast<std::size_t>(vocab_.size), 0.0);
    keys_.push_back(key);
    table_.emplace(std::move(key), id);
    return id;
  }

  int state_index(const Query& query, std::span<const TokenId> prefix) {
    return state_index(query.id, prefix);
  }

  int state_index(int query_id, std::initializer_list<TokenId> prefix) {
    return state_index(query_id, std::span<const TokenId>(prefix.begin(), prefix.size()));
  }

  int state_index(const Query& query, std::initializer_list<TokenId> prefix) {
    return state_index(query.id, prefix);
  }

  std::span<const double> logits_row(int state) const {
    return logits_.at(static_cast<std::size_t>(state));
  }

  const StateKey& state_key(int state) const {
    return keys_.at(static_cast<std::size_t>(state));
  }

  void set_logit(int state, TokenId token, double v) {
    logits_.at(static_cast<std::size_t>(state)).at(static_cast<std::size_t>(token)) = v;
  }

  /// Softmax of the state's logit row at the given temperature.
  TokenDistribution token_distribution(int state, double temperature = 1.0) const {
    std::vector<double> lp = log_probs(state, temperature);
    TokenDistribution d;
    d.probs.resize(lp.size());
    for (std::size_t i = 0; i < lp.size(); ++i) d.probs[i] = std::exp(lp[i]);
    return d;
  }

  /// Log-softmax of the state's logit row (numerically stable).
  std::vector<double> log_probs(int state, double temperature = 1.0) const {
    if (temperature <= 0.0)
      throw std::invalid_argument("temperature must be > 0");
    const auto& row = logits_.at(static_cast<std::size_t>(state));
    std::vector<double> x(row.size());
    double m = kNegInf;
    for (std::size_t i = 0; i < row.size(); ++i) {
      x[i] = row[i] / temperature;
      m = std::max(m, x[i]);
    }
    double z = 0.0;
    for (double v : x) z += std::exp(v - m);
    const double lz = m + std::log(z);
    for (double& v : x) v -= lz;
    return x;
  }

  /// Autoregressive sampling until eos or max_len. Stored log-probs are taken
  /// at the sampling temperature; the truncated flag is set when eos was not
  /// emitted within max_len tokens.
  Response sample_response(const Query& query, int max_len, double temperature,
                           std::mt19937_64& rng) {
    if (max_len <= 0) throw std::invalid_argument("max_len must be > 0");
    if (temperature <= 0.0)
      throw std::invalid_argument("temperature must be > 0");
    Response r;
    r.truncated = true;
    for (int t = 0; t < max_len; ++t) {
      const int s = state_index(query, r.tokens);
      const std::vector<double> lp = log_probs(s, temperature);
      const TokenId tok = sample_from_logprobs(lp, rng);
      r.tokens.push_back(tok);
      r.logprobs_old.push_back(lp[static_cast<std::size_t>(tok)]);
      if (tok == vocab_.eos) {
        r.truncated = false;
        break;
      }
    }
    r.extracted_answer = extract_answer(r, vocab_);
    return r;
  }

  /// Sum of per-token log-probs of the response under the current policy at
  /// temperature 1. An empty response has log-probability 0.
  double sequence_log_prob(const Query& query, const Response& response,
                           bool length_normalized = false) {
    double total = 0.0;
    std::vector<TokenId> prefix;
    prefix.reserve(response.tokens.size());
    for (TokenId tok : response.tokens) {
      if (tok < 0 || tok >= vocab_.size)
        throw std::invalid_argument("response token out of vocabulary");
      const int s = state_index(query, prefix);
      total += log_probs(s)[static_cast<std::size_t>(tok)];
      prefix.push_back(tok);
    }
    if (length_normalized && !response.tokens.empty())
      total /= static_cast<double>(response.tokens.size());
    return total;
  }

  /// Gradient-ascent update: logits[s,v] += eta * gradient[s,v]. The whole
  /// update is rejected if any entry is non-finite.
  void apply_gradient(const LogitGradient& gradient, double eta) {
    if (!(eta > 0.0) || !std::isfinite(eta))
      throw std::invalid_argument("learning rate must be finite and > 0");
    for (const auto& [k, v] : gradient.entries) {
      if (!std::isfinite(v))
        throw std::invalid_argument("non-finite gradient entry; update aborted");
    }
    for (const auto& [k, v] : gradient.entries) {
      const int state = static_cast<int>(k >> 20);
      const auto token = static_cast<std::size_t>(k & ((1 << 20) - 1));
      if (state < 0 || token >= static_cast<std::size_t>(vocab_.size))
        throw std::invalid_argument("gradient entry out of range");
      while (static_cast<std::size_t>(state) >= logits_.size()) {
        logits_.emplace_back(static_cast<std::size_t>(vocab_.size), 0.0);
        keys_.emplace_back();
      }
      logits_[static_cast<std::size_t>(state)][token] += eta * v;
    }
  }

  ReferencePolicy snapshot() const { return {logits_, vocab_.size}; }

  /// Restores logits from a snapshot-compatible table (used by load paths).
  void restore(std::vector<StateKey> keys, std::vector<std::vector<double>> logits) {
    if (keys.size() != logits.size())
      throw std::invalid_argument("restore: keys/logits size mismatch");
    table_.clear();
    keys_ = std::move(keys);
    logits_ = std::move(logits);
    for (std::size_t i = 0; i < keys_.size(); ++i)
      table_.emplace(keys_[i], static_cast<int>(i));
  }

 private:
  static TokenId sample_from_logprobs(const std::vector<double>& lp,
                                      std::mt19937_64& rng) {
    const double u = uniform01(rng);
    double cum = 0.0;
    for (std::size_t v = 0; v < lp.size(); ++v) {
      cum += std::exp(lp[v]);
      if (u < cum) return static_cast<TokenId>(v);
    }
    return static_cast<TokenId>(lp.size() - 1);  // float residue fallback
  }

  Vocabulary vocab_;
  int context_window_;
  std::unordered_map<StateKey, int, StateKeyHash> table_;
  std::vector<StateKey> keys_;
  std::vector<std::vector<double>> logits_;
};

}  // namespace sentlab
