// Copyright (c) 2026 The saeinterp Authors
// SPDX-License-Identifier: Apache-2.0
//
// Pipeline configuration and the stage commands behind the CLI. Every stage
// reads and writes files under the output directory; only run_manifest.json
// carries timestamps.

#pragma once

#include <cstdint>
#include <filesystem>
#include <optional>
#include <string>
#include <vector>

#include "json.hpp"
#include "saeinterp/llm_client.hpp"
#include "saeinterp/steering.hpp"
#include "saeinterp/synthetic.hpp"
#include "saeinterp/trainer.hpp"

namespace saeinterp {

struct AutointerpConfig {
  std::size_t pool_size = 500000;
  std::size_t continuation_chars = 100;
  std::size_t per_side = 25;
  std::size_t max_scoring_positives = 100;
  std::size_t scoring_total = 200;
  std::size_t chunk_rows = 4096;
  std::string image_literal = "<image>";
  std::optional<std::vector<std::uint32_t>> features;  // default: all
};

struct GeneratorConfig {
  std::string backend = "toy-linear";
  std::size_t vocab_size = 64;
  std::uint64_t seed = 0;
  std::size_t max_new_tokens = 16;
};

struct SteeringConfig {
  /// Explicit (feature, alpha) pairs; when empty, features come from
  /// `selection` applied to the scored interpretations, each with every alpha.
  std::vector<SteeringSpec> features;
  FeatureSelectionConfig selection;
  std::vector<double> alphas{10.0, -10.0};
  std::vector<SteeringPrompt> prompts;  // default: seeded random prompts
  std::size_t prompt_count = 8;
  std::size_t prompt_length = 4;
  std::string target = "hidden";
  GeneratorConfig generator;
};

struct EvaluateConfig {
  double threshold = 0.1;
  std::size_t n_permutations = 9999;
};

/// Synthetic raw dump: templated sequences whose activations are sums of
/// word-specific atoms of a planted dictionary.
struct SynthConfig {
  std::size_t sequences = 200;
  std::size_t n = 16;
  std::size_t atoms = 64;
  std::size_t atoms_per_word = 2;
  std::size_t words_min = 6;
  std::size_t words_max = 16;
  std::size_t image_tokens = 4;
  double noise_sigma = 0.01;
  std::size_t sequences_per_shard = 100;
};

struct PipelineConfig {
  std::filesystem::path out_dir = "out";
  std::optional<std::filesystem::path> raw_dir;     // default <out>/raw
  std::optional<std::filesystem::path> shards_dir;  // default <out>/shards
  std::optional<std::filesystem::path> checkpoint;  // default <out>/sae.ckpt
  std::filesystem::path template_path;
  std::filesystem::path prompts_dir;
  std::optional<std::filesystem::path> mock_llm;
  std::uint64_t seed = 0;
  TrainConfig train;
  std::optional<PlantedDictionaryConfig> planted;  // train on a planted dictionary instead of shards
  AutointerpConfig autointerp;
  LlmClientConfig llm;
  SteeringConfig steering;
  EvaluateConfig evaluate;
  SynthConfig synth;

  PipelineConfig();
  std::filesystem::path raw() const { return raw_dir.value_or(out_dir / "raw"); }
  std::filesystem::path shards() const { return shards_dir.value_or(out_dir / "shards"); }
  std::filesystem::path checkpoint_path() const { return checkpoint.value_or(out_dir / "sae.ckpt"); }
  std::filesystem::path out(const std::string& name) const { return out_dir / name; }
};

/// Replaces ${NAME} in every string value with the environment variable;
/// an unset variable is a ConfigError.
nlohmann::json interpolate_env(const nlohmann::json& j);

/// Unknown keys are ConfigErrors. Relative paths resolve against `base_dir`.
/// A top-level "seed" also seeds training unless "train" sets its own.
PipelineConfig pipeline_config_from_json(const nlohmann::json& j, const std::filesystem::path& base_dir = {});
PipelineConfig load_pipeline_config(const std::filesystem::path& path);
/// The effective configuration (API keys are never part of it).
nlohmann::json to_json(const PipelineConfig& cfg);

/// Temp file + rename, so readers never see a partial file.
void write_file_atomic(const std::filesystem::path& path, const std::string& content);
std::vector<nlohmann::json> read_jsonl(const std::filesystem::path& path);
std::string to_jsonl(const std::vector<nlohmann::json>& rows);

struct FilterReport {
  std::size_t shards = 0;
  std::size_t sequences = 0;
  std::uint64_t tokens_in = 0;
  std::uint64_t tokens_kept = 0;
};

struct TrainReport {
  std::uint64_t steps = 0;
  double norm_factor = 1.0;
  double final_loss = 0.0;
  std::size_t dead = 0;
  std::optional<double> recovery;  // mean max cosine against a planted dictionary
};

struct InterpretReport {
  std::size_t features = 0;
  std::size_t explained = 0;
  std::size_t no_positives = 0;
  std::size_t failed = 0;
};

struct ScoreReport {
  InterpretabilitySummary summary;
  std::size_t failed = 0;
  std::size_t unscoreable = 0;
};

struct SteerReport {
  std::size_t features = 0;
  std::size_t generations = 0;
  std::size_t unchanged = 0;
};

struct EvaluateReport {
  Stratification overall;
};

void cmd_synth(const PipelineConfig& cfg);
FilterReport cmd_filter(const PipelineConfig& cfg);
TrainReport cmd_train(const PipelineConfig& cfg);
InterpretReport cmd_interpret(const PipelineConfig& cfg);
ScoreReport cmd_score(const PipelineConfig& cfg);
std::vector<FeatureStats> cmd_stats(const PipelineConfig& cfg);
SteerReport cmd_steer(const PipelineConfig& cfg);
/// Judges `generations` (default <out>/steering_generations.jsonl) against the
/// explanations in <out>/explanations.jsonl.
EvaluateReport cmd_evaluate(const PipelineConfig& cfg,
                            const std::optional<std::filesystem::path>& generations = std::nullopt);

/// Appends a record of one command to <out>/run_manifest.json.
void record_run(const PipelineConfig& cfg, const std::string& command, const std::vector<std::string>& argv,
                const std::string& started_at, const std::string& finished_at, int exit_code);

}  // namespace saeinterp
