#pragma once

/**
 * Synthetic verifiable task environment.
 *
 * Tasks are modular-arithmetic chains ("a op b op c mod m") rendered over a
 * small token vocabulary. Correctness is exactly verifiable: a response is
 * rewarded 1.0 iff the digits it emits between the answer delimiter and eos
 * decode to the canonical answer. Difficulty is tuned through the number of
 * chained operations and operand magnitude.
 *
 * Token layout: ids 0..9 are digits, 10..13 are the operators + - * mod,
 * then answer_delim and eos. Vocabularies larger than the core layout carry
 * unused filler tokens.
 */

#include <cstdint>
#include <optional>
#include <stdexcept>
#include <string>
#include <vector>

#include "sentlab/common.hpp"

namespace sentlab {

struct Vocabulary {
  int size = 16;
  TokenId eos = 15;
  TokenId answer_delim = 14;

  // arithmetic rendering tokens
  static constexpr TokenId kDigitBase = 0;  // ids 0..9
  static constexpr TokenId kPlus = 10;
  static constexpr TokenId kMinus = 11;
  static constexpr TokenId kTimes = 12;
  static constexpr TokenId kMod = 13;
  static constexpr int kCoreSize = 16;

  void validate() const {
    if (size < 4) throw std::invalid_argument("vocabulary size must be >= 4");
    if (eos == answer_delim)
      throw std::invalid_argument("eos and answer_delim must differ");
    if (eos < 0 || eos >= size || answer_delim < 0 || answer_delim >= size)
      throw std::invalid_argument("eos/answer_delim out of range");
  }

  bool is_digit(TokenId t) const { return t >= kDigitBase && t < kDigitBase + 10; }
};

struct DifficultyMeta {
  int steps = 1;         // number of binary operations in the chain
  int operand_max = 9;   // magnitude bound the operands were drawn from
  int modulus = 7;
};

struct Query {
  int id = 0;
  std::vector<TokenId> prompt_tokens;
  long long answer = 0;
  DifficultyMeta difficulty_meta;
};

struct Response {
  std::vector<TokenId> tokens;
  std::vector<double> logprobs_old;  // per token, at the sampling temperature
  bool truncated = false;
  std::optional<long long> extracted_answer;
};

struct GeneratorSpec {
  int count = 200;
  int min_steps = 1;
  int max_steps = 3;
  int operand_max = 9;
  int modulus_min = 5;
  int modulus_max = 10;
  Vocabulary vocab;

  void validate() const {
    vocab.validate();
    if (count <= 0) throw std::invalid_argument("generator count must be > 0");
    if (min_steps < 1 || max_steps < min_steps)
      throw std::invalid_argument("generator step range is empty");
    if (operand_max < 0) throw std::invalid_argument("operand_max must be >= 0");
    if (modulus_min < 2 || modulus_max < modulus_min)
      throw std::invalid_argument("modulus range is empty");
    if (vocab.size < Vocabulary::kCoreSize)
      throw std::invalid_argument("arithmetic tasks need the 16 core tokens");
  }
};

namespace detail {

inline void append_number(std::vector<TokenId>& out, long long v) {
  std::string s = std::to_string(v);
  for (char c : s) out.push_back(Vocabulary::kDigitBase + (c - '0'));
}

inline long long apply_op(long long acc, TokenId op, long long operand) {
  switch (op) {
    case Vocabulary::kPlus: return acc + operand;
    case Vocabulary::kMinus: return acc - operand;
    case Vocabulary::kTimes: return acc * operand;
    default: throw std::logic_error("not an operator token");
  }
}

inline long long canonical_mod(long long v, long long m) {
  long long r = v % m;
  return r < 0 ? r + m : r;
}

}  // namespace detail

/// Deterministic dataset generation. Step counts cycle through the requested
/// range so the generated difficulties always span it.
inline std::vector<Query> generate_dataset(const GeneratorSpec& spec,
                                           std::uint64_t seed) {
  spec.validate();
  std::vector<Query> out;
  out.reserve(static_cast<std::size_t>(spec.count));
  const int step_span = spec.max_steps - spec.min_steps + 1;
  for (int i = 0; i < spec.count; ++i) {
    auto rng = derive_rng(seed, 0xDA7A, static_cast<std::uint64_t>(i));
    Query q;
    q.id = i;
    const int steps = spec.min_steps + (i % step_span);
    const long long modulus =
        spec.modulus_min +
        static_cast<long long>(
            uniform_index(rng, static_cast<std::size_t>(spec.modulus_max -
                                                        spec.modulus_min + 1)));
    long long acc = static_cast<long long>(
        uniform_index(rng, static_cast<std::size_t>(spec.operand_max + 1)));
    int actual_max = static_cast<int>(acc);
    detail::append_number(q.prompt_tokens, acc);
    for (int s = 0; s < steps; ++s) {
      static constexpr TokenId kOps[3] = {Vocabulary::kPlus, Vocabulary::kMinus,
                                          Vocabulary::kTimes};
      const TokenId op = kOps[uniform_index(rng, 3)];
      const long long operand = static_cast<long long>(
          uniform_index(rng, static_cast<std::size_t>(spec.operand_max + 1)));
      actual_max = std::max(actual_max, static_cast<int>(operand));
      q.prompt_tokens.push_back(op);
      detail::append_number(q.prompt_tokens, operand);
      acc = detail::apply_op(acc, op, operand);
    }
    q.prompt_tokens.push_back(Vocabulary::kMod);
    detail::append_number(q.prompt_tokens, modulus);
    q.answer = detail::canonical_mod(acc, modulus);
    q.difficulty_meta = {steps, actual_max, static_cast<int>(modulus)};
    out.push_back(std::move(q));
  }
  return out;
}

/// Decodes the canonical value between the last answer_delim and the eos that
/// follows it. Missing delimiter, missing eos, empty span, or non-digit
/// tokens in the span all yield no value.
inline std::optional<long long> extract_answer(const Response& response,
                                               const Vocabulary& vocab) {
  const auto& ts = response.tokens;
  std::ptrdiff_t delim = -1;
  for (std::ptrdiff_t i = static_cast<std::ptrdiff_t>(ts.size()) - 1; i >= 0; --i) {
    if (ts[static_cast<std::size_t>(i)] == vocab.answer_delim) {
      delim = i;
      break;
    }
  }
  if (delim < 0) return std::nullopt;
  long long value = 0;
  int digits = 0;
  for (std::size_t i = static_cast<std::size_t>(delim) + 1; i < ts.size(); ++i) {
    const TokenId t = ts[i];
    if (t == vocab.eos) {
      if (digits == 0) return std::nullopt;
      return value;
    }
    if (!vocab.is_digit(t) || digits >= 18) return std::nullopt;
    value = value * 10 + (t - Vocabulary::kDigitBase);
    ++digits;
  }
  return std::nullopt;  // ran out of tokens before eos (truncated)
}

/// Binary outcome reward: 1.0 iff the extracted answer exists and equals the
/// query's canonical answer.
inline double verify(const Query& query, const Response& response,
                     const Vocabulary& vocab) {
  const auto got = extract_answer(response, vocab);
  return (got.has_value() && *got == query.answer) ? 1.0 : 0.0;
}

/// Re-evaluates a query's arithmetic directly from its prompt tokens.
/// Used by tests as an oracle independent of the generator internals; returns
/// nullopt on malformed prompts.
inline std::optional<long long> evaluate_prompt(const Query& query) {
  const auto& ts = query.prompt_tokens;
  std::size_t i = 0;
  auto read_number = [&](long long& out) -> bool {
    long long v = 0;
    int digits = 0;
    while (i < ts.size() && ts[i] >= Vocabulary::kDigitBase &&
           ts[i] < Vocabulary::kDigitBase + 10) {
      v = v * 10 + (ts[i] - Vocabulary::kDigitBase);
      ++digits;
      ++i;
    }
    if (digits == 0) return false;
    out = v;
    return true;
  };
  long long acc = 0;
  if (!read_number(acc)) return std::nullopt;
  while (i < ts.size() && ts[i] != Vocabulary::kMod) {
    const TokenId op = ts[i];
    if (op != Vocabulary::kPlus && op != Vocabulary::kMinus &&
        op != Vocabulary::kTimes)
      return std::nullopt;
    ++i;
    long long operand = 0;
    if (!read_number(operand)) return std::nullopt;
    acc = detail::apply_op(acc, op, operand);
  }
  if (i >= ts.size() || ts[i] != Vocabulary::kMod) return std::nullopt;
  ++i;
  long long modulus = 0;
  if (!read_number(modulus) || modulus < 1 || i != ts.size()) return std::nullopt;
  return detail::canonical_mod(acc, modulus);
}

}  // namespace sentlab
