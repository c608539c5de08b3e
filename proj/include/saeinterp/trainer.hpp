// Copyright (c) 2026 The saeinterp Authors
// SPDX-License-Identifier: Apache-2.0
//
// Adam training loop for the SAE: input normalisation, dead-feature
// tracking, the EMA inference threshold, metrics and checkpoints.

#pragma once

#include <cstdint>
#include <filesystem>
#include <functional>
#include <optional>
#include <string>
#include <vector>

#include "json.hpp"
#include "saeinterp/activation_source.hpp"
#include "saeinterp/sae.hpp"

namespace saeinterp {

struct TrainConfig {
  Architecture arch = Architecture::MatryoshkaBatchTopK;
  std::uint32_t batch_size = 8192;
  std::uint32_t epochs = 1;
  std::optional<double> lr;  // nullopt selects auto_lr(m)
  double aux_alpha = 0.03125;
  std::optional<std::uint32_t> aux_k;  // default min(2k, dead count)
  double threshold_beta = 0.999;
  std::uint64_t threshold_start_step = 1000;
  std::uint64_t dead_tokens_threshold = 100000;
  std::uint32_t k = 256;
  std::uint32_t expansion_factor = 4;
  std::vector<double> group_fractions{0.5, 0.25, 0.125, 0.0625, 0.0625};
  bool reversed_groups = false;
  bool normalize = true;
  std::uint64_t seed = 0;
  double adam_beta1 = 0.9;
  double adam_beta2 = 0.999;
  double adam_eps = 1e-8;
  std::uint64_t log_every = 10;
  std::optional<std::uint64_t> max_steps;
  bool shuffle_shards = false;

  /// Throws ConfigError on any out-of-range field.
  void validate() const;
};

/// Reads TrainConfig fields from JSON; group fractions may be numbers or
/// strings such as "1/16". Unknown keys are rejected.
TrainConfig train_config_from_json(const nlohmann::json& j, TrainConfig base = {});
nlohmann::json to_json(const TrainConfig& cfg);

/// Nested prefix sizes m_1 < ... < m for the given group fractions. Group
/// sizes use largest-remainder rounding so they sum to m exactly.
std::vector<std::uint32_t> prefixes_from_fractions(std::uint32_t m, const std::vector<double>& fractions,
                                                   bool reversed = false);

/// (mean row l2 norm) / sqrt(n) over the whole source.
double compute_norm_factor(ActivationSource& source);

/// 2e-4 * sqrt(2^14 / m).
double auto_lr(std::uint32_t m);

/// EMA of the smallest selected activation; untouched before the start step
/// and seeded directly from `batch_min_selected` when `current` is 0.
double update_threshold(double current, double batch_min_selected, std::uint64_t step, const TrainConfig& cfg);

class DeadFeatureTracker {
 public:
  explicit DeadFeatureTracker(std::size_t m = 0) : tokens_since_fire_(m, 0) {}

  /// Counts `rows` more tokens for every feature, resetting those that fired.
  void observe(std::span<const SparseCode> codes);
  DeadMask dead_mask(std::uint64_t dead_tokens_threshold) const;
  std::size_t dead_count(std::uint64_t dead_tokens_threshold) const;
  const std::vector<std::uint64_t>& tokens_since_fire() const { return tokens_since_fire_; }

 private:
  std::vector<std::uint64_t> tokens_since_fire_;
};

struct MetricsRecord {
  std::uint64_t step = 0;
  double total_loss = 0.0;
  std::vector<double> per_prefix_mse;
  double aux_loss = 0.0;
  double fvu = 0.0;
  std::size_t dead_count = 0;
  double threshold = 0.0;
  double lr = 0.0;
};
nlohmann::json to_json(const MetricsRecord& rec);

struct TrainOptions {
  std::optional<std::filesystem::path> metrics_path;
  std::optional<std::filesystem::path> checkpoint_path;
  /// Called after every optimiser step with the step index and current params.
  std::function<void(std::uint64_t, const SaeParams&)> on_step;
  std::size_t prefetch_depth = 2;
};

struct TrainResult {
  SaeParams params;
  std::vector<MetricsRecord> metrics;
  double norm_factor = 1.0;
  double lr = 0.0;
  std::uint64_t steps = 0;
  DeadFeatureTracker tracker;
};

/// Runs epochs * floor(rows / batch_size) Adam steps (or max_steps) on the
/// Matryoshka loss. Throws DataError on dimension problems and
/// NumericalError (with step, lr and gradient norms) on a non-finite loss.
TrainResult train(const TrainConfig& cfg, ActivationSource& data, const TrainOptions& options = {});

}  // namespace saeinterp
