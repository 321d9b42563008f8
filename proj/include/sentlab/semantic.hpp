#pragma once

/**
 * Semantic-entropy profiling and curriculum construction.
 *
 * Each query is profiled by sampling M responses from the current policy,
 * clustering them by extracted canonical answer (unparseable responses form
 * one shared cluster), summing sequence probabilities per cluster in the log
 * domain, normalizing, and taking the entropy of the resulting meaning
 * distribution. Queries are then sorted by ascending semantic entropy and cut
 * into contiguous stages; training walks the stages in order.
 *
 * Identical sampled token sequences are deduplicated before probability
 * summation so a twice-drawn sequence does not double its cluster's mass; a
 * count-duplicates mode is kept for sensitivity runs.
 */

#include <algorithm>
#include <cmath>
#include <map>
#include <optional>
#include <stdexcept>
#include <vector>

#include "sentlab/common.hpp"
#include "sentlab/policy.hpp"
#include "sentlab/task_env.hpp"

namespace sentlab {

struct SeSample {
  Response response;
  double seq_logprob = 0.0;
};

struct SemanticCluster {
  std::optional<long long> answer;  // nullopt is the unparseable cluster
  std::vector<int> members;         // representative indices into the samples
};

struct SemanticProfile {
  int query_id = 0;
  int sample_count = 0;
  std::vector<SemanticCluster> clusters;
  std::vector<double> cluster_logprobs;
  std::vector<double> normalized_probs;
  double se = 0.0;
};

struct CurriculumPlan {
  std::vector<int> ordered_ids;               // ascending semantic entropy
  std::vector<std::size_t> stage_boundaries;  // N-1 split positions
  int stages = 1;

  std::pair<std::size_t, std::size_t> stage_range(int stage) const {
    const std::size_t begin =
        stage == 0 ? 0 : stage_boundaries[static_cast<std::size_t>(stage - 1)];
    const std::size_t end = stage == stages - 1
                                ? ordered_ids.size()
                                : stage_boundaries[static_cast<std::size_t>(stage)];
    return {begin, end};
  }
};

/// M independent draws from the policy with their sequence log-probs.
inline std::vector<SeSample> sample_for_se(TabularPolicy& policy,
                                           const Query& query, int m,
                                           int max_len, std::mt19937_64& rng,
                                           double temperature = 1.0) {
  if (m < 2) throw std::invalid_argument("sample_for_se needs M >= 2");
  std::vector<SeSample> out;
  out.reserve(static_cast<std::size_t>(m));
  for (int i = 0; i < m; ++i) {
    SeSample s;
    s.response = policy.sample_response(query, max_len, temperature, rng);
    s.seq_logprob = policy.sequence_log_prob(query, s.response);
    out.push_back(std::move(s));
  }
  return out;
}

/// Groups responses into answer-equivalence classes after deduplicating
/// identical token sequences. Clusters are ordered by answer value with the
/// unparseable cluster last, so the partition is independent of sample order.
inline std::vector<SemanticCluster> cluster_by_answer(
    const std::vector<SeSample>& samples, const Vocabulary& vocab,
    bool count_duplicates = false) {
  std::vector<int> reps;
  for (std::size_t i = 0; i < samples.size(); ++i) {
    bool dup = false;
    if (!count_duplicates) {
      for (int r : reps) {
        if (samples[static_cast<std::size_t>(r)].response.tokens ==
            samples[i].response.tokens) {
          dup = true;
          break;
        }
      }
    }
    if (!dup) reps.push_back(static_cast<int>(i));
  }
  std::map<std::optional<long long>, SemanticCluster> by_answer;
  for (int r : reps) {
    const auto key =
        extract_answer(samples[static_cast<std::size_t>(r)].response, vocab);
    auto& c = by_answer[key];
    c.answer = key;
    c.members.push_back(r);
  }
  std::vector<SemanticCluster> out;
  out.reserve(by_answer.size());
  for (auto& [key, cluster] : by_answer) {
    if (key.has_value()) out.push_back(std::move(cluster));
  }
  auto none = by_answer.find(std::nullopt);
  if (none != by_answer.end()) out.push_back(std::move(none->second));
  return out;
}

/// log P(C|q): log-sum-exp of the cluster members' sequence log-probs.
inline double cluster_probability(const SemanticCluster& cluster,
                                  const std::vector<SeSample>& samples) {
  std::vector<double> lps;
  lps.reserve(cluster.members.size());
  for (int r : cluster.members)
    lps.push_back(samples[static_cast<std::size_t>(r)].seq_logprob);
  return log_sum_exp(lps);
}

/// Normalizes raw cluster probabilities into a proper distribution, staying
/// in the log domain until the final exponentiation.
inline std::vector<double> normalize_clusters(
    std::span<const double> cluster_logprobs) {
  if (cluster_logprobs.empty())
    throw std::invalid_argument("normalize_clusters: no clusters");
  const double lz = log_sum_exp(cluster_logprobs);
  std::vector<double> out(cluster_logprobs.size());
  for (std::size_t i = 0; i < out.size(); ++i)
    out[i] = std::exp(cluster_logprobs[i] - lz);
  return out;
}

/// Entropy in nats of the normalized meaning distribution.
inline double semantic_entropy(std::span<const double> normalized_probs) {
  return shannon_entropy(normalized_probs);
}

/// Full profile of one query under the given policy.
inline SemanticProfile profile_query(TabularPolicy& policy, const Query& query,
                                     int m, int max_len, std::mt19937_64& rng,
                                     double temperature = 1.0,
                                     bool count_duplicates = false) {
  SemanticProfile p;
  p.query_id = query.id;
  p.sample_count = m;
  const auto samples = sample_for_se(policy, query, m, max_len, rng, temperature);
  p.clusters = cluster_by_answer(samples, policy.vocab(), count_duplicates);
  p.cluster_logprobs.reserve(p.clusters.size());
  for (const auto& c : p.clusters)
    p.cluster_logprobs.push_back(cluster_probability(c, samples));
  p.normalized_probs = normalize_clusters(p.cluster_logprobs);
  p.se = semantic_entropy(p.normalized_probs);
  return p;
}

/// Stable ascending sort by (semantic entropy, query id), then a contiguous
/// split into N stages of floor(|D|/N) queries with the remainder appended to
/// the final (hardest) stage.
inline CurriculumPlan build_curriculum(const std::vector<Query>& dataset,
                                       const std::vector<SemanticProfile>& profiles,
                                       int stages) {
  if (stages < 1) throw std::invalid_argument("curriculum needs N >= 1");
  if (static_cast<std::size_t>(stages) > dataset.size())
    throw std::invalid_argument("more curriculum stages than queries");
  if (profiles.size() != dataset.size())
    throw std::invalid_argument("need exactly one profile per query");
  std::map<int, double> se_by_id;
  for (const auto& p : profiles) se_by_id[p.query_id] = p.se;
  std::vector<int> ids;
  ids.reserve(dataset.size());
  for (const Query& q : dataset) {
    if (se_by_id.find(q.id) == se_by_id.end())
      throw std::invalid_argument("missing profile for query");
    ids.push_back(q.id);
  }
  std::stable_sort(ids.begin(), ids.end(), [&](int a, int b) {
    const double sa = se_by_id[a], sb = se_by_id[b];
    if (sa != sb) return sa < sb;
    return a < b;
  });
  CurriculumPlan plan;
  plan.ordered_ids = std::move(ids);
  plan.stages = stages;
  const std::size_t base = plan.ordered_ids.size() / static_cast<std::size_t>(stages);
  for (int n = 1; n < stages; ++n)
    plan.stage_boundaries.push_back(base * static_cast<std::size_t>(n));
  return plan;
}

/// Mean semantic entropy of one curriculum stage (used by monotonicity checks).
inline double stage_mean_se(const CurriculumPlan& plan,
                            const std::vector<SemanticProfile>& profiles,
                            int stage) {
  std::map<int, double> se_by_id;
  for (const auto& p : profiles) se_by_id[p.query_id] = p.se;
  const auto [begin, end] = plan.stage_range(stage);
  double sum = 0.0;
  for (std::size_t i = begin; i < end; ++i) sum += se_by_id[plan.ordered_ids[i]];
  return sum / static_cast<double>(end - begin);
}

}  // namespace sentlab
