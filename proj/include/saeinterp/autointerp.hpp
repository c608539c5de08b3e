// Copyright (c) 2026 The saeinterp Authors
// SPDX-License-Identifier: Apache-2.0
//
// Automatic feature interpretation: activation index over a row pool,
// exemplar selection, explanation and detection scoring through the LLM
// client, and per-feature activation statistics.

#pragma once

#include <cstdint>
#include <optional>
#include <span>
#include <string>
#include <unordered_map>
#include <unordered_set>
#include <vector>

#include "json.hpp"
#include "saeinterp/activation_store.hpp"
#include "saeinterp/llm_client.hpp"
#include "saeinterp/prompts.hpp"
#include "saeinterp/sae.hpp"

namespace saeinterp {

struct ActivationEntry {
  std::uint64_t row = 0;
  double value = 0.0;
};

/// Strictly positive activations per feature over a fixed pool of rows.
/// Rows of the pool absent from a feature's list have activation 0.
class FeatureActivationIndex {
 public:
  FeatureActivationIndex() = default;
  /// `pool` must be sorted and unique; entries must reference pool rows.
  FeatureActivationIndex(std::vector<std::uint64_t> pool, std::vector<std::vector<ActivationEntry>> per_feature);

  /// Encodes the pool rows (divided by `norm_factor`) with the inference rule.
  static FeatureActivationIndex build(const SaeParams& params, const ActivationStore& store,
                                      std::vector<std::uint64_t> pool, double norm_factor,
                                      std::size_t chunk_rows = 4096);

  std::size_t feature_count() const { return features_.size(); }
  const std::vector<std::uint64_t>& pool() const { return pool_; }
  /// Positive entries ordered by value descending, ties by row ascending.
  const std::vector<ActivationEntry>& ranked(std::uint32_t feature) const;
  double density(std::uint32_t feature) const;
  double max_activation(std::uint32_t feature) const;
  double activation(std::uint32_t feature, std::uint64_t row) const;
  /// Rows of the pool where the feature is zero, ascending.
  std::vector<std::uint64_t> zero_rows(std::uint32_t feature) const;

 private:
  std::vector<std::uint64_t> pool_;
  std::vector<std::vector<ActivationEntry>> features_;
};

/// Linear-interpolation quantiles (q in [0, 1]) of the positive activations;
/// empty when the feature never fires.
std::vector<double> positive_quantiles(const FeatureActivationIndex& index, std::uint32_t feature,
                                       const std::vector<double>& qs);

/// floor(10 a / (max_a (1 + eps))) in [0, 9]; positive activations map to at
/// least 1 so that the scaled value is 0 exactly when a is 0.
int scale_activation(double a, double max_a, double eps = 1e-6);

struct Exemplar {
  std::uint64_t row = 0;
  std::string context_text;
  std::string current_token;
  std::string continuation;
  double activation = 0.0;
  int activation_scaled = 0;
  std::string image_description;

  /// context + "[[token]]" + continuation.
  std::string render() const;
};

struct ExemplarOptions {
  std::size_t continuation_chars = 100;
  std::string image_literal = "<image>";
  /// Optional per-sequence description text prefixed to each sample.
  const std::unordered_map<std::string, std::string>* image_descriptions = nullptr;
};

Exemplar make_exemplar(const ActivationStore& store, std::uint64_t row, double activation, double max_activation,
                       const ExemplarOptions& opts = {});

struct ExemplarSelection {
  std::vector<std::uint64_t> positive_rows;
  std::vector<std::uint64_t> negative_rows;
  bool no_positives = false;
};

/// Up to `per_side` rows from the top decile of positive activations
/// (widened to the top min(per_side, P) when the decile is smaller) and as
/// many zero-activation rows; both sides get min(available) rows.
ExemplarSelection select_interpretation_rows(const FeatureActivationIndex& index, std::uint32_t feature,
                                             std::uint64_t seed, std::size_t per_side = 25);

struct ScoringSelection {
  std::vector<std::uint64_t> positive_rows;
  std::vector<std::uint64_t> negative_rows;
  bool imbalanced = false;
  bool unscoreable = false;
};

/// Up to `max_positives` rows from the top quintile of positives not used
/// for interpretation (widened likewise), then zero-activation rows (also
/// unused) up to `total` rows overall.
ScoringSelection select_scoring_rows(const FeatureActivationIndex& index, std::uint32_t feature, std::uint64_t seed,
                                     const std::unordered_set<std::uint64_t>& interp_rows,
                                     std::size_t max_positives = 100, std::size_t total = 200);

/// Exemplars for the interpretation prompt in a seeded interleaved order.
std::vector<Exemplar> select_interpretation_exemplars(const FeatureActivationIndex& index, const ActivationStore& store,
                                                      std::uint32_t feature, std::uint64_t seed,
                                                      const ExemplarOptions& opts = {}, std::size_t per_side = 25);

std::vector<ChatMessage> build_interpretation_prompt(const PromptLibrary& lib, const std::vector<Exemplar>& exemplars);

struct DetectionMetrics {
  std::size_t tp = 0, fp = 0, fn = 0, tn = 0;
  double precision = 0.0, recall = 0.0, f1 = 0.0;
};

/// Confusion counts over labelled predictions; missing predictions are skipped.
DetectionMetrics detection_metrics(const std::vector<int>& labels, const std::vector<std::optional<int>>& predictions);

struct LabelledSample {
  std::uint64_t row = 0;
  std::string text;
  int label = 0;
};

struct ScoreResult {
  DetectionMetrics metrics;
  std::vector<std::optional<int>> predictions;
  std::size_t abstentions = 0;
};

/// One LLM query per sample; replies must be [0] / [1] (or a bare 0 / 1).
/// Anything else is an abstention and excluded from the confusion matrix.
ScoreResult score_interpretation(const LlmClient& client, const PromptLibrary& lib, const std::string& explanation,
                                 const std::vector<LabelledSample>& samples);

enum class InterpretationStatus { Ok, NoPositives, Failed, Unscoreable };
std::string_view to_string(InterpretationStatus s);
InterpretationStatus parse_interpretation_status(std::string_view s);

struct FeatureInterpretation {
  std::uint32_t feature_id = 0;
  InterpretationStatus status = InterpretationStatus::Ok;
  std::string explanation;
  std::string rationale;
  std::optional<double> f1, precision, recall;
  std::size_t n_pos = 0, n_neg = 0;
  std::size_t abstentions = 0;
  bool imbalanced = false;
  std::string error;
};

nlohmann::json to_json(const FeatureInterpretation& f);
FeatureInterpretation feature_interpretation_from_json(const nlohmann::json& j);

struct InterpretabilitySummary {
  std::size_t features = 0;
  std::size_t scored = 0;
  std::vector<std::pair<double, std::size_t>> above;  // (threshold, count with f1 > threshold)
};

struct InterpretOptions {
  std::size_t per_side = 25;
  std::size_t max_scoring_positives = 100;
  std::size_t scoring_total = 200;
  ExemplarOptions exemplar;
};

/// Asks for an explanation of one feature from its exemplars. LLM failures
/// are reported in the result (status Failed), not thrown.
FeatureInterpretation explain_feature(const FeatureActivationIndex& index, const ActivationStore& store,
                                      const LlmClient& client, const PromptLibrary& lib, std::uint32_t feature,
                                      std::uint64_t seed, const InterpretOptions& opts = {});

/// Scores an explained feature (status Ok) on rows not shown during
/// explanation; the same seed must be used for both halves.
void score_feature(const FeatureActivationIndex& index, const ActivationStore& store, const LlmClient& client,
                   const PromptLibrary& lib, FeatureInterpretation& item, std::uint64_t seed,
                   const InterpretOptions& opts = {});

/// explain_feature followed by score_feature.
FeatureInterpretation interpret_feature(const FeatureActivationIndex& index, const ActivationStore& store,
                                        const LlmClient& client, const PromptLibrary& lib, std::uint32_t feature,
                                        std::uint64_t seed, const InterpretOptions& opts = {});

InterpretabilitySummary summarize_interpretability(const std::vector<FeatureInterpretation>& items,
                                                   const std::vector<double>& thresholds = {0.5, 0.75, 0.85});
nlohmann::json to_json(const InterpretabilitySummary& s);

struct FeatureStats {
  std::uint32_t feature_id = 0;
  std::size_t active_rows = 0;
  double density = 0.0;
  double max_activation = 0.0;
  std::vector<double> deciles;  // 10%..90% of positive activations
};

std::vector<FeatureStats> feature_stats(const FeatureActivationIndex& index);
nlohmann::json to_json(const FeatureStats& s);

struct DensityBin {
  double lower = 0.0;  // log10 edges; the first bin holds features that never fire
  double upper = 0.0;
  std::size_t count = 0;
};

/// Histogram of log10(density) with `per_decade` bins per decade down to
/// 10^-min_decades, plus a leading bin for zero density.
std::vector<DensityBin> density_histogram(const std::vector<FeatureStats>& stats, int min_decades = 8,
                                          int per_decade = 4);
std::string density_histogram_csv(const std::vector<DensityBin>& bins);

}  // namespace saeinterp
