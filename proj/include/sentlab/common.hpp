#pragma once

/**
 * Shared numeric and RNG utilities.
 *
 * All probability arithmetic in this library happens in the log domain;
 * log_sum_exp is the one primitive everything leans on. Random streams are
 * derived from a master seed with splitmix64 so that every sampling site
 * (per query, per step, per worker) owns an independent, reproducible stream.
 */

#include <cmath>
#include <cstdint>
#include <cstdio>
#include <limits>
#include <random>
#include <span>
#include <string>
#include <vector>

namespace sentlab {

using TokenId = int;

inline constexpr double kNegInf = -std::numeric_limits<double>::infinity();

// splitmix64: used only to mix seeds, not as the sampling generator.
inline std::uint64_t splitmix64(std::uint64_t x) {
  x += 0x9e3779b97f4a7c15ULL;
  x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ULL;
  x = (x ^ (x >> 27)) * 0x94d049bb133111ebULL;
  return x ^ (x >> 31);
}

/// Deterministic sub-stream of a master seed. Streams with distinct
/// (a, b, c) tags are independent for practical purposes.
inline std::mt19937_64 derive_rng(std::uint64_t seed, std::uint64_t a = 0,
                                  std::uint64_t b = 0, std::uint64_t c = 0) {
  std::uint64_t s = splitmix64(seed ^ splitmix64(a));
  s = splitmix64(s ^ splitmix64(b));
  s = splitmix64(s ^ splitmix64(c));
  return std::mt19937_64(s);
}

/// Uniform double in [0, 1) with 53 random bits. Hand-rolled so results do
/// not depend on the standard library's distribution implementation.
inline double uniform01(std::mt19937_64& gen) {
  return static_cast<double>(gen() >> 11) * 0x1.0p-53;
}

/// Uniform integer in [0, n). n must be positive.
inline std::size_t uniform_index(std::mt19937_64& gen, std::size_t n) {
  return static_cast<std::size_t>(uniform01(gen) * static_cast<double>(n)) % n;
}

/// Standard normal draw via Box-Muller, implementation-independent.
inline double gaussian(std::mt19937_64& gen) {
  double u1 = uniform01(gen);
  while (u1 <= 0.0) u1 = uniform01(gen);
  const double u2 = uniform01(gen);
  return std::sqrt(-2.0 * std::log(u1)) * std::cos(6.283185307179586 * u2);
}

inline double log_sum_exp(std::span<const double> xs) {
  double m = kNegInf;
  for (double x : xs) m = std::max(m, x);
  if (!std::isfinite(m)) return m;
  double s = 0.0;
  for (double x : xs) s += std::exp(x - m);
  return m + std::log(s);
}

/// Shannon entropy in nats of a probability vector, with 0*log(0) == 0.
inline double shannon_entropy(std::span<const double> probs) {
  double h = 0.0;
  for (double p : probs) {
    if (p > 0.0) h -= p * std::log(p);
  }
  return h;
}

/// Shortest round-trip formatting for doubles; used anywhere output must be
/// byte-identical across runs.
inline std::string format_double(double v) {
  char buf[40];
  std::snprintf(buf, sizeof(buf), "%.17g", v);
  return std::string(buf);
}

/// Population covariance of two equally weighted samples.
inline double population_covariance(std::span<const double> xs,
                                    std::span<const double> ys) {
  const std::size_t n = xs.size();
  if (n == 0) return 0.0;
  double mx = 0.0, my = 0.0;
  for (std::size_t i = 0; i < n; ++i) {
    mx += xs[i];
    my += ys[i];
  }
  mx /= static_cast<double>(n);
  my /= static_cast<double>(n);
  double c = 0.0;
  for (std::size_t i = 0; i < n; ++i) c += (xs[i] - mx) * (ys[i] - my);
  return c / static_cast<double>(n);
}

/// Covariance of (x, y) under an explicit probability weighting.
inline double weighted_covariance(std::span<const double> w,
                                  std::span<const double> xs,
                                  std::span<const double> ys) {
  double mx = 0.0, my = 0.0;
  for (std::size_t i = 0; i < w.size(); ++i) {
    mx += w[i] * xs[i];
    my += w[i] * ys[i];
  }
  double c = 0.0;
  for (std::size_t i = 0; i < w.size(); ++i) {
    c += w[i] * (xs[i] - mx) * (ys[i] - my);
  }
  return c;
}

}  // namespace sentlab
