#pragma once

#include <cstdint>
#include <optional>
#include <span>
#include <vector>

#include "sundae/data.hpp"
#include "sundae/errors.hpp"
#include "sundae/rng.hpp"

namespace sundae {

/// One draw from the corruption distribution q(x^c | x).
struct CorruptionSample {
  TokenSeq corrupted;
  double alpha = 0.0;               // corruption proportion
  std::vector<std::uint8_t> mask;   // 1 = replaced position
  TokenSeq noise;                   // uniform replacement tokens
};

/// Overrides for the random stages of `corrupt`, used by tests.
struct CorruptionOverrides {
  std::optional<double> alpha;
  std::optional<std::vector<std::uint8_t>> mask;
  std::optional<TokenSeq> noise;
};

/// Samples alpha ~ U[0,1], mask_i ~ Bernoulli(alpha) and noise_i ~ U{0..v-1}
/// independently per position, then x^c = (1-m) x + m noise.
///
/// Every position, PAD included, can be corrupted. The draws never look at
/// token values, so identical rng states give identical (alpha, mask, noise)
/// for any input.
inline CorruptionSample corrupt(std::span<const TokenId> x, std::size_t v, Rng& rng,
                                const CorruptionOverrides& force = {}) {
  if (v < 2) throw ArgumentError("corrupt: vocabulary size must be >= 2");
  for (auto t : x)
    if (t < 0 || static_cast<std::size_t>(t) >= v)
      throw ArgumentError("corrupt: token id out of range");
  const std::size_t n = x.size();
  CorruptionSample s;
  const double drawn_alpha = rng.uniform();
  s.alpha = force.alpha.value_or(drawn_alpha);
  if (s.alpha < 0.0 || s.alpha > 1.0) throw ArgumentError("corrupt: alpha outside [0,1]");
  s.mask.resize(n);
  s.noise.resize(n);
  for (std::size_t i = 0; i < n; ++i) {
    s.mask[i] = rng.uniform() < s.alpha ? 1 : 0;
    s.noise[i] = static_cast<TokenId>(rng.uniform_int(v));
  }
  if (force.mask) {
    if (force.mask->size() != n) throw ArgumentError("corrupt: mask length mismatch");
    s.mask = *force.mask;
  }
  if (force.noise) {
    if (force.noise->size() != n) throw ArgumentError("corrupt: noise length mismatch");
    s.noise = *force.noise;
  }
  s.corrupted.resize(n);
  for (std::size_t i = 0; i < n; ++i) s.corrupted[i] = s.mask[i] ? s.noise[i] : x[i];
  return s;
}

/// Per-token transition matrix Q = (1-p) I + p V, V = all 1/v, row-major v*v.
/// Entry [a*v + b] is the probability that token a becomes b.
inline std::vector<double> corruption_matrix(double corrupt_prob, std::size_t v) {
  if (corrupt_prob < 0.0 || corrupt_prob > 1.0)
    throw ArgumentError("corruption_matrix: probability outside [0,1]");
  if (v < 2) throw ArgumentError("corruption_matrix: v must be >= 2");
  std::vector<double> q(v * v, corrupt_prob / static_cast<double>(v));
  for (std::size_t a = 0; a < v; ++a) q[a * v + a] += 1.0 - corrupt_prob;
  return q;
}

}  // namespace sundae
