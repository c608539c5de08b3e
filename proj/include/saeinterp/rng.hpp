// Copyright (c) 2026 The saeinterp Authors
// SPDX-License-Identifier: Apache-2.0
//
// Portable random helpers. The standard distributions are implementation
// defined, so anything that feeds a checkpoint or an output file draws through
// these instead to stay bit-identical across standard libraries.

#pragma once

#include <cmath>
#include <cstdint>
#include <numbers>
#include <random>
#include <utility>
#include <vector>

namespace saeinterp {

using Rng = std::mt19937_64;

/// Independent stream seed for (seed, stream) via the splitmix64 finaliser,
/// so per-item draws do not depend on processing order.
inline std::uint64_t derive_seed(std::uint64_t seed, std::uint64_t stream) {
  std::uint64_t z = seed + 0x9E3779B97F4A7C15ull * (stream + 1);
  z = (z ^ (z >> 30)) * 0xBF58476D1CE4E5B9ull;
  z = (z ^ (z >> 27)) * 0x94D049BB133111EBull;
  return z ^ (z >> 31);
}

/// Uniform integer in [0, bound) by rejection; bound must be positive.
inline std::uint64_t uniform_index(Rng& rng, std::uint64_t bound) {
  // Draws below 2^64 mod bound are rejected so the remainder is unbiased.
  const std::uint64_t reject_below = (0 - bound) % bound;
  std::uint64_t draw = rng();
  while (draw < reject_below) {
    draw = rng();
  }
  return draw % bound;
}

/// Uniform double in [0, 1) with 53 random bits.
inline double uniform01(Rng& rng) {
  return static_cast<double>(rng() >> 11) * 0x1.0p-53;
}

inline double uniform_real(Rng& rng, double lo, double hi) {
  return lo + (hi - lo) * uniform01(rng);
}

/// Standard normal via Box-Muller (one value per call).
inline double standard_normal(Rng& rng) {
  double u1 = uniform01(rng);
  while (u1 <= 0.0) {
    u1 = uniform01(rng);
  }
  const double u2 = uniform01(rng);
  return std::sqrt(-2.0 * std::log(u1)) * std::cos(2.0 * std::numbers::pi * u2);
}

/// Box-Muller sampler that keeps the second value of each pair.
class NormalSampler {
 public:
  double operator()(Rng& rng) {
    if (has_spare_) {
      has_spare_ = false;
      return spare_;
    }
    double u1 = uniform01(rng);
    while (u1 <= 0.0) {
      u1 = uniform01(rng);
    }
    const double u2 = uniform01(rng);
    const double radius = std::sqrt(-2.0 * std::log(u1));
    const double angle = 2.0 * std::numbers::pi * u2;
    spare_ = radius * std::sin(angle);
    has_spare_ = true;
    return radius * std::cos(angle);
  }

 private:
  double spare_ = 0.0;
  bool has_spare_ = false;
};

template <typename T>
void shuffle(std::vector<T>& items, Rng& rng) {
  for (std::size_t i = items.size(); i > 1; --i) {
    const auto j = static_cast<std::size_t>(uniform_index(rng, i));
    std::swap(items[i - 1], items[j]);
  }
}

/// First `count` elements of a uniform random permutation (partial Fisher-Yates).
template <typename T>
std::vector<T> sample_without_replacement(std::vector<T> items, std::size_t count, Rng& rng) {
  for (std::size_t i = 0; i < count; ++i) {
    const auto j = i + static_cast<std::size_t>(uniform_index(rng, items.size() - i));
    std::swap(items[i], items[j]);
  }
  items.resize(count);
  return items;
}

}  // namespace saeinterp
