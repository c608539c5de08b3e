// Copyright (c) 2026 The saeinterp Authors
// SPDX-License-Identifier: Apache-2.0
//
// Prompt text and few-shot examples, loaded from data files, and the
// message builders for interpretation, detection scoring and judging.

#pragma once

#include <filesystem>
#include <string>
#include <vector>

#include "json.hpp"
#include "saeinterp/llm_client.hpp"

namespace saeinterp {

struct InterpretationSample {
  std::string text;  // already contains the [[current token]] marker
  int activation = 0;
  std::string image_description;  // rendered only when non-empty
};

struct InterpretationFewShot {
  std::vector<InterpretationSample> samples;
  nlohmann::json output;
};

struct ScoringFewShot {
  std::string explanation;
  std::vector<std::string> samples;
  std::vector<int> output;
};

struct JudgeFewShot {
  std::string original;
  std::string modified;
  std::string concept_text;
  nlohmann::json output;
};

enum class SteeringDirection { Positive, Negative };

struct PromptLibrary {
  std::string interpretation_system;
  std::vector<InterpretationFewShot> interpretation_fewshots;
  std::string scoring_system;
  std::vector<ScoringFewShot> scoring_fewshots;
  std::string judge_system;  // contains {{MODIFIER}}
  std::vector<JudgeFewShot> judge_positive;
  std::vector<JudgeFewShot> judge_negative;

  static std::filesystem::path default_dir();
  /// Throws ConfigError on missing files or malformed few-shots.
  static PromptLibrary load(const std::filesystem::path& dir = default_dir());
};

/// "Example 1: ...\nActivation: 8\n..." (1-based numbering).
std::string render_interpretation_samples(const std::vector<InterpretationSample>& samples);

/// System message, few-shot turns, then the numbered samples.
std::vector<ChatMessage> build_interpretation_messages(const PromptLibrary& lib,
                                                       const std::vector<InterpretationSample>& samples);

/// One sample per query, numbered from 0 like the few-shots.
std::vector<ChatMessage> build_scoring_messages(const PromptLibrary& lib, const std::string& explanation,
                                                const std::string& sample);

std::string judge_modifier(SteeringDirection d);
std::vector<ChatMessage> build_judge_messages(const PromptLibrary& lib, const std::string& original,
                                              const std::string& modified, const std::string& concept_text,
                                              SteeringDirection direction);

}  // namespace saeinterp
