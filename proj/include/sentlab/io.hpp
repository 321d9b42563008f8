#pragma once

/**
 * File formats: JSON-lines datasets and semantic profiles, the plain-text
 * policy snapshot, and query-order files. Field names and layouts are
 * documented in docs/formats.md; changing them breaks golden tests.
 */

#include <fstream>
#include <sstream>
#include <stdexcept>
#include <string>
#include <vector>

#include <json.hpp>

#include "sentlab/grpo.hpp"
#include "sentlab/policy.hpp"
#include "sentlab/semantic.hpp"
#include "sentlab/task_env.hpp"

namespace sentlab {

using nlohmann::json;

namespace detail {

inline std::ofstream open_out(const std::string& path) {
  std::ofstream f(path);
  if (!f) throw std::runtime_error("cannot open for writing: " + path);
  return f;
}

inline std::ifstream open_in(const std::string& path) {
  std::ifstream f(path);
  if (!f) throw std::runtime_error("cannot open for reading: " + path);
  return f;
}

}  // namespace detail

// ---------------------------------------------------------------- datasets

inline void save_dataset_jsonl(const std::string& path,
                               const std::vector<Query>& dataset) {
  std::ofstream f = detail::open_out(path);
  for (const Query& q : dataset) {
    json j;
    j["id"] = q.id;
    j["prompt_tokens"] = q.prompt_tokens;
    j["answer"] = q.answer;
    j["difficulty_meta"] = {{"steps", q.difficulty_meta.steps},
                            {"operand_max", q.difficulty_meta.operand_max},
                            {"modulus", q.difficulty_meta.modulus}};
    f << j.dump() << "\n";
  }
}

inline std::vector<Query> load_dataset_jsonl(const std::string& path) {
  std::ifstream f = detail::open_in(path);
  std::vector<Query> out;
  std::string line;
  while (std::getline(f, line)) {
    if (line.empty()) continue;
    const json j = json::parse(line);
    Query q;
    q.id = j.at("id").get<int>();
    q.prompt_tokens = j.at("prompt_tokens").get<std::vector<TokenId>>();
    q.answer = j.at("answer").get<long long>();
    const json& m = j.at("difficulty_meta");
    q.difficulty_meta.steps = m.at("steps").get<int>();
    q.difficulty_meta.operand_max = m.at("operand_max").get<int>();
    q.difficulty_meta.modulus = m.at("modulus").get<int>();
    out.push_back(std::move(q));
  }
  return out;
}

// ---------------------------------------------------------------- profiles

struct ProfileRecord {
  int id = 0;
  double se = 0.0;
  int clusters = 0;
  std::vector<int> cluster_sizes;
};

inline void save_profiles_jsonl(const std::string& path,
                                const std::vector<SemanticProfile>& profiles) {
  std::ofstream f = detail::open_out(path);
  for (const SemanticProfile& p : profiles) {
    json j;
    j["id"] = p.query_id;
    j["se"] = p.se;
    j["clusters"] = static_cast<int>(p.clusters.size());
    std::vector<int> sizes;
    for (const auto& c : p.clusters)
      sizes.push_back(static_cast<int>(c.members.size()));
    j["cluster_sizes"] = sizes;
    f << j.dump() << "\n";
  }
}

inline std::vector<ProfileRecord> load_profiles_jsonl(const std::string& path) {
  std::ifstream f = detail::open_in(path);
  std::vector<ProfileRecord> out;
  std::string line;
  while (std::getline(f, line)) {
    if (line.empty()) continue;
    const json j = json::parse(line);
    ProfileRecord r;
    r.id = j.at("id").get<int>();
    r.se = j.at("se").get<double>();
    r.clusters = j.at("clusters").get<int>();
    r.cluster_sizes = j.at("cluster_sizes").get<std::vector<int>>();
    out.push_back(std::move(r));
  }
  return out;
}

// -------------------------------------------------------------- order files

inline void save_order(const std::string& path, std::span<const int> ids) {
  std::ofstream f = detail::open_out(path);
  for (int id : ids) f << id << "\n";
}

inline std::vector<int> load_order(const std::string& path) {
  std::ifstream f = detail::open_in(path);
  std::vector<int> out;
  std::string line;
  while (std::getline(f, line)) {
    if (line.empty()) continue;
    out.push_back(std::stoi(line));
  }
  return out;
}

// ------------------------------------------------------------- batch dumps

inline constexpr const char* kBatchCsvHeader =
    "group,response,position,state,token,logprob_old,logprob_new,advantage,"
    "entropy,covariance,beta_con,in_low,in_high_cov,grpo_weight";

/// Debug dump of a flattened token batch (columns documented in
/// docs/formats.md).
inline void write_batch_csv(const std::string& path, const TokenBatch& batch) {
  std::ofstream f = detail::open_out(path);
  f << kBatchCsvHeader << "\n";
  for (const TokenRecord& t : batch.tokens) {
    f << t.group << "," << t.response << "," << t.position << "," << t.state
      << "," << t.token << "," << format_double(t.logprob_old) << ","
      << format_double(t.logprob_new) << "," << format_double(t.advantage)
      << "," << format_double(t.entropy) << "," << format_double(t.covariance)
      << "," << format_double(t.beta_con) << "," << (t.in_low ? 1 : 0) << ","
      << (t.in_high_cov ? 1 : 0) << "," << format_double(t.grpo_weight)
      << "\n";
  }
}

// ---------------------------------------------------------- policy snapshots

/// Text snapshot: header, then one line per state key, then one line per
/// non-zero logit entry (absent entries are exactly zero).
inline void save_policy(const std::string& path, const TabularPolicy& policy) {
  std::ofstream f = detail::open_out(path);
  const Vocabulary& v = policy.vocab();
  f << "policy-snapshot v1\n";
  f << "vocab " << v.size << " " << v.eos << " " << v.answer_delim << "\n";
  f << "window " << policy.context_window() << "\n";
  f << "states " << policy.num_states() << "\n";
  for (int s = 0; s < policy.num_states(); ++s) {
    const StateKey& key = policy.state_key(s);
    f << "state " << s << " " << key.query_id;
    for (TokenId t : key.window) f << " " << t;
    f << "\n";
  }
  for (int s = 0; s < policy.num_states(); ++s) {
    const auto row = policy.logits_row(s);
    for (std::size_t t = 0; t < row.size(); ++t) {
      if (row[t] != 0.0)
        f << "logit " << s << " " << t << " " << format_double(row[t]) << "\n";
    }
  }
}

inline TabularPolicy load_policy(const std::string& path) {
  std::ifstream f = detail::open_in(path);
  std::string line;
  if (!std::getline(f, line) || line != "policy-snapshot v1")
    throw std::runtime_error("not a policy snapshot: " + path);
  Vocabulary vocab;
  int window = 2;
  int num_states = 0;
  {
    std::string tag;
    f >> tag >> vocab.size >> vocab.eos >> vocab.answer_delim;
    if (tag != "vocab") throw std::runtime_error("snapshot: missing vocab line");
    f >> tag >> window;
    if (tag != "window") throw std::runtime_error("snapshot: missing window line");
    f >> tag >> num_states;
    if (tag != "states") throw std::runtime_error("snapshot: missing states line");
    std::getline(f, line);
  }
  std::vector<StateKey> keys(static_cast<std::size_t>(num_states));
  std::vector<std::vector<double>> logits(
      static_cast<std::size_t>(num_states),
      std::vector<double>(static_cast<std::size_t>(vocab.size), 0.0));
  while (std::getline(f, line)) {
    if (line.empty()) continue;
    std::istringstream ss(line);
    std::string tag;
    ss >> tag;
    if (tag == "state") {
      int id = 0, qid = 0;
      ss >> id >> qid;
      StateKey key;
      key.query_id = qid;
      TokenId t = 0;
      while (ss >> t) key.window.push_back(t);
      keys.at(static_cast<std::size_t>(id)) = std::move(key);
    } else if (tag == "logit") {
      int s = 0, t = 0;
      double val = 0.0;
      ss >> s >> t >> val;
      logits.at(static_cast<std::size_t>(s)).at(static_cast<std::size_t>(t)) = val;
    } else {
      throw std::runtime_error("snapshot: unknown line tag '" + tag + "'");
    }
  }
  TabularPolicy policy(vocab, window);
  policy.restore(std::move(keys), std::move(logits));
  return policy;
}

}  // namespace sentlab
