// Copyright (c) 2026 The saeinterp Authors
// SPDX-License-Identifier: Apache-2.0
//
// Decoder-column steering through a pluggable generator, LLM-judge scoring
// of steered generations, four-way stratification and rank correlations.

#pragma once

#include <cstdint>
#include <functional>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include "json.hpp"
#include "saeinterp/autointerp.hpp"
#include "saeinterp/llm_client.hpp"
#include "saeinterp/prompts.hpp"
#include "saeinterp/sae.hpp"

namespace saeinterp {

struct SteeringSpec {
  std::uint32_t feature_id = 0;
  double steer_alpha = 10.0;
  std::string target;  // informational; placement belongs to the generator

  /// Throws ParameterError unless feature_id < m and alpha is finite and nonzero.
  void validate(std::size_t m) const;
  SteeringDirection direction() const {
    return steer_alpha > 0 ? SteeringDirection::Positive : SteeringDirection::Negative;
  }
};

/// Column `feature` of the decoder.
Vector steering_vector(const SaeParams& params, std::uint32_t feature);

/// Receives the hidden states of all current positions [tokens x n] and
/// returns a matrix of the same shape.
using HiddenTransform = std::function<RowMatrix(const RowMatrix&)>;

struct StepObservation {
  std::size_t step = 0;
  const std::vector<std::size_t>* context = nullptr;  // token ids fed at this step
  const Vector* logits = nullptr;
  std::size_t token = 0;  // chosen id
};
using StepObserver = std::function<void(const StepObservation&)>;

class Generator {
 public:
  virtual ~Generator() = default;
  virtual std::size_t hidden_dim() const = 0;
  virtual std::string backend_id() const = 0;
  /// Greedy continuation of `prompt`; `transform` (if set) is applied once per
  /// decoding step to the hidden states of every position.
  virtual std::string generate(const std::string& prompt, const HiddenTransform& transform = {},
                               const StepObserver& observer = {}) const = 0;
};

/// Deterministic autoregressive toy: the hidden state at position t is the
/// mean of the embeddings of tokens 0..t, logits are R·h at the last position,
/// decoding is greedy (ties to the lower id) and stops at the stop token.
class ToyLinearGenerator final : public Generator {
 public:
  ToyLinearGenerator(std::vector<std::string> vocab, RowMatrix embeddings, RowMatrix readout,
                     std::size_t max_new_tokens = 16, std::string stop_token = "</s>");
  /// Vocabulary "<unk>", "</s>", "t2", ...; Gaussian embeddings and unit-norm
  /// readout rows.
  static ToyLinearGenerator random(std::size_t vocab_size, std::size_t n, std::uint64_t seed,
                                   std::size_t max_new_tokens = 16);

  std::size_t hidden_dim() const override { return static_cast<std::size_t>(embeddings_.cols()); }
  std::string backend_id() const override { return "toy-linear"; }
  std::string generate(const std::string& prompt, const HiddenTransform& transform = {},
                       const StepObserver& observer = {}) const override;

  /// Whitespace tokenisation; unknown words map to "<unk>" when present.
  std::vector<std::size_t> tokenize(const std::string& text) const;
  const std::vector<std::string>& vocab() const { return vocab_; }
  const RowMatrix& embeddings() const { return embeddings_; }
  const RowMatrix& readout() const { return readout_; }
  std::size_t stop_id() const { return stop_id_; }

 private:
  std::vector<std::string> vocab_;
  std::map<std::string, std::size_t> ids_;
  RowMatrix embeddings_;  // [V x n]
  RowMatrix readout_;     // [V x n]
  std::size_t max_new_tokens_;
  std::size_t stop_id_;
};

/// Generation with h <- h + alpha·vec at every position and step.
std::string apply_steering(const Generator& generator, const std::string& prompt, const Vector& vec, double steer_alpha,
                           const StepObserver& observer = {});

enum class SteeringCategory { OnOnly, Both, OffOnly, None };
std::string_view to_string(SteeringCategory c);
SteeringCategory parse_steering_category(std::string_view s);
/// Scores are binarised with a strict `> threshold`.
SteeringCategory categorize(double on_target, double off_target, double threshold = 0.1);

struct JudgeVerdict {
  double on_target = 0.0;
  double off_target = 0.0;
  std::string on_rationale;
  std::string off_rationale;
  bool failed = false;
  std::string error;
};

/// Identical texts short-circuit to (0, 0) without a request.
JudgeVerdict judge_steering(const LlmClient& client, const PromptLibrary& lib, const std::string& original,
                            const std::string& steered, const std::string& concept_text, SteeringDirection direction);

struct SteeringPrompt {
  std::string id;
  std::string text;
};

struct SteeringGeneration {
  std::string sample_id;
  std::uint32_t feature_id = 0;
  double steer_alpha = 0.0;
  std::string prompt;
  std::string original_text;
  std::string steered_text;
};

nlohmann::json to_json(const SteeringGeneration& g);
SteeringGeneration steering_generation_from_json(const nlohmann::json& j);

/// Every (spec, prompt) pair, specs outermost; unsteered text is generated once per prompt.
std::vector<SteeringGeneration> generate_steered(const Generator& generator, const SaeParams& params,
                                                 const std::vector<SteeringSpec>& specs,
                                                 const std::vector<SteeringPrompt>& prompts);

struct SteeringOutcome {
  std::string sample_id;
  std::uint32_t feature_id = 0;
  double steer_alpha = 0.0;
  std::string original_text;
  std::string steered_text;
  double on_target = 0.0;
  double off_target = 0.0;
  std::string on_rationale;
  std::string off_rationale;
  SteeringCategory category = SteeringCategory::None;
  bool judge_failed = false;
  std::string error;
};

nlohmann::json to_json(const SteeringOutcome& o);
SteeringOutcome steering_outcome_from_json(const nlohmann::json& j);

/// Judges generations concurrently (bounded by the client's in-flight cap);
/// outcomes keep the input order. Features without a concept are judge-failed.
std::vector<SteeringOutcome> judge_generations(const LlmClient& client, const PromptLibrary& lib,
                                               const std::vector<SteeringGeneration>& generations,
                                               const std::map<std::uint32_t, std::string>& concepts,
                                               double threshold = 0.1);

struct Stratification {
  std::size_t total = 0;  // judged outcomes; judge failures are excluded
  std::size_t judge_failed = 0;
  std::map<SteeringCategory, std::size_t> counts;
  double proportion(SteeringCategory c) const;
};

Stratification stratify(const std::vector<SteeringOutcome>& outcomes);

struct FeatureStratification {
  std::uint32_t feature_id = 0;
  double steer_alpha = 0.0;
  Stratification strata;
  double mean_on_target = 0.0;
  double mean_off_target = 0.0;
};

/// Grouped by (feature, alpha), ordered by feature then alpha.
std::vector<FeatureStratification> stratify_by_feature(const std::vector<SteeringOutcome>& outcomes);
nlohmann::json stratification_json(const std::vector<SteeringOutcome>& outcomes);
std::string stratification_csv(const std::vector<FeatureStratification>& rows);

/// Average ranks (1-based), ties share the mean of their positions.
std::vector<double> average_ranks(const std::vector<double>& xs);
/// Pearson correlation of the average ranks; DataError if either input is constant.
double spearman_rho(const std::vector<double>& xs, const std::vector<double>& ys);

struct CorrelationResult {
  double rho = 0.0;
  double p_value = 1.0;
  std::size_t n = 0;
};

/// Two-sided permutation test: p = (1 + #{|rho_perm| >= |rho|}) / (n_perm + 1).
CorrelationResult spearman_permutation(const std::vector<double>& xs, const std::vector<double>& ys,
                                       std::size_t n_perm = 9999, std::uint64_t seed = 0);

/// Per-feature mean on/off-target scores correlated between steering
/// directions and against activation density (manual additions excluded).
nlohmann::json steering_correlations(const std::vector<FeatureStratification>& rows,
                                     const std::map<std::uint32_t, double>& density,
                                     const std::vector<std::uint32_t>& exclude_from_density, std::size_t n_perm,
                                     std::uint64_t seed);

struct FeatureSelectionConfig {
  double f1_threshold = 0.85;
  std::vector<std::uint32_t> manual_add;
  std::vector<std::uint32_t> exclusions;
  double min_density = 0.0;
};

FeatureSelectionConfig feature_selection_from_json(const nlohmann::json& j);
nlohmann::json to_json(const FeatureSelectionConfig& c);

/// Features with F1 > threshold (and density >= min_density when stats are
/// given), plus manual additions, minus exclusions; ascending ids.
std::vector<std::uint32_t> select_steering_features(const std::vector<FeatureInterpretation>& interpretations,
                                                    const std::vector<FeatureStats>* stats,
                                                    const FeatureSelectionConfig& cfg);

}  // namespace saeinterp
