// Copyright (c) 2026 The saeinterp Authors
// SPDX-License-Identifier: Apache-2.0
//
// Planted-dictionary data: x = D z + noise with k-sparse non-negative z.
// Used for recovery benchmarks and for offline pipeline fixtures.

#pragma once

#include <cstdint>

#include "saeinterp/activation_source.hpp"
#include "saeinterp/rng.hpp"

namespace saeinterp {

struct PlantedDictionaryConfig {
  std::size_t n = 64;
  std::size_t atoms = 256;
  std::uint32_t k = 4;
  double value_lo = 0.5;
  double value_hi = 2.0;
  double noise_sigma = 0.01;
  std::uint64_t rows = 100000;
  std::uint64_t seed = 0;
};

/// Unit-norm Gaussian atoms as the columns of an [n x atoms] matrix.
ColMatrix random_unit_dictionary(std::size_t n, std::size_t atoms, std::uint64_t seed);

class PlantedDictionarySource final : public ActivationSource {
 public:
  explicit PlantedDictionarySource(PlantedDictionaryConfig cfg);

  std::size_t dim() const override { return cfg_.n; }
  std::uint64_t row_count() const override { return cfg_.rows; }
  /// Every epoch replays the same rows.
  void rewind(std::uint64_t epoch) override;
  std::size_t read(RowMatrix& out) override;

  const ColMatrix& dictionary() const { return dictionary_; }
  const PlantedDictionaryConfig& config() const { return cfg_; }

 private:
  PlantedDictionaryConfig cfg_;
  ColMatrix dictionary_;
  Rng rng_;
  NormalSampler normal_;
  std::uint64_t cursor_ = 0;
};

/// Mean over the columns of `truth` of the best cosine similarity with any column of `learned`.
double mean_max_cosine(const ColMatrix& truth, const ColMatrix& learned);

}  // namespace saeinterp
