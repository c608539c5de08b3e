// Copyright (c) 2026 The saeinterp Authors
// SPDX-License-Identifier: Apache-2.0

#include "saeinterp/prompts.hpp"

#include <fstream>
#include <sstream>

#include "saeinterp/errors.hpp"

namespace saeinterp {

namespace fs = std::filesystem;

namespace {

std::string read_text(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  if (!in) throw ConfigError("cannot open prompt file " + p.string());
  std::ostringstream s;
  s << in.rdbuf();
  std::string text = s.str();
  while (!text.empty() && (text.back() == '\n' || text.back() == '\r')) text.pop_back();
  return text;
}

nlohmann::json read_json(const fs::path& p) {
  std::ifstream in(p);
  if (!in) throw ConfigError("cannot open prompt file " + p.string());
  try {
    return nlohmann::json::parse(in);
  } catch (const nlohmann::json::parse_error& e) {
    throw ConfigError(p.string() + ": " + e.what());
  }
}

std::vector<JudgeFewShot> judge_shots(const nlohmann::json& j) {
  std::vector<JudgeFewShot> out;
  for (const auto& e : j.at("examples")) {
    out.push_back({e.at("original"), e.at("modified"), e.at("concept"), e.at("output")});
  }
  return out;
}

const char* const kModifierSlot = "{{MODIFIER}}";

}  // namespace

fs::path PromptLibrary::default_dir() { return fs::path(SAEINTERP_DATA_DIR) / "prompts"; }

PromptLibrary PromptLibrary::load(const fs::path& dir) {
  PromptLibrary lib;
  lib.interpretation_system = read_text(dir / "interpretation_system.txt");
  lib.scoring_system = read_text(dir / "scoring_system.txt");
  lib.judge_system = read_text(dir / "judge_system.txt");
  if (lib.judge_system.find(kModifierSlot) == std::string::npos) {
    throw ConfigError("judge_system.txt lacks the {{MODIFIER}} slot");
  }
  try {
    const auto interp = read_json(dir / "interpretation_fewshots.json");
    for (const auto& e : interp.at("examples")) {
      InterpretationFewShot shot;
      for (const auto& s : e.at("samples")) shot.samples.push_back({s.at("text"), s.at("activation"), ""});
      shot.output = e.at("output");
      lib.interpretation_fewshots.push_back(std::move(shot));
    }
    const auto scoring = read_json(dir / "scoring_fewshots.json");
    for (const auto& e : scoring.at("examples")) {
      ScoringFewShot shot{e.at("explanation"), e.at("samples"), e.at("output")};
      if (shot.samples.size() != shot.output.size()) throw ConfigError("scoring few-shot label count mismatch");
      lib.scoring_fewshots.push_back(std::move(shot));
    }
    lib.judge_positive = judge_shots(read_json(dir / "judge_fewshots_positive.json"));
    lib.judge_negative = judge_shots(read_json(dir / "judge_fewshots_negative.json"));
  } catch (const nlohmann::json::exception& e) {
    throw ConfigError(std::string("malformed few-shot file in ") + dir.string() + ": " + e.what());
  }
  return lib;
}

std::string render_interpretation_samples(const std::vector<InterpretationSample>& samples) {
  std::string out;
  for (std::size_t i = 0; i < samples.size(); ++i) {
    const auto& s = samples[i];
    out += "Example " + std::to_string(i + 1) + ": ";
    if (!s.image_description.empty()) out += "<IMAGE_DESCRIPTION> " + s.image_description + " </IMAGE_DESCRIPTION> ";
    out += s.text + "\nActivation: " + std::to_string(s.activation) + "\n";
  }
  return out;
}

std::vector<ChatMessage> build_interpretation_messages(const PromptLibrary& lib,
                                                       const std::vector<InterpretationSample>& samples) {
  std::vector<ChatMessage> msgs{{"system", lib.interpretation_system}};
  for (const auto& shot : lib.interpretation_fewshots) {
    msgs.push_back({"user", "Input:\n\n" + render_interpretation_samples(shot.samples)});
    msgs.push_back({"assistant", shot.output.dump(4)});
  }
  msgs.push_back({"user", "Input:\n\n" + render_interpretation_samples(samples)});
  return msgs;
}

namespace {

std::string scoring_input(const std::string& explanation, const std::vector<std::string>& samples) {
  std::string out = "Latent explanation: " + explanation + "\n\nTest examples:\n\n";
  for (std::size_t i = 0; i < samples.size(); ++i) out += "Example " + std::to_string(i) + ": " + samples[i] + "\n";
  return out;
}

std::string judge_input(const std::string& original, const std::string& modified, const std::string& concept_text) {
  return "Original report: " + original + "\n\nModified report: " + modified + "\n\nConcept: " + concept_text;
}

}  // namespace

std::vector<ChatMessage> build_scoring_messages(const PromptLibrary& lib, const std::string& explanation,
                                                const std::string& sample) {
  std::vector<ChatMessage> msgs{{"system", lib.scoring_system}};
  for (const auto& shot : lib.scoring_fewshots) {
    msgs.push_back({"user", scoring_input(shot.explanation, shot.samples)});
    msgs.push_back({"assistant", nlohmann::json(shot.output).dump()});
  }
  msgs.push_back({"user", scoring_input(explanation, {sample})});
  return msgs;
}

std::string judge_modifier(SteeringDirection d) {
  return d == SteeringDirection::Positive ? "better represents" : "SUPPRESS";
}

std::vector<ChatMessage> build_judge_messages(const PromptLibrary& lib, const std::string& original,
                                              const std::string& modified, const std::string& concept_text,
                                              SteeringDirection direction) {
  std::string system = lib.judge_system;
  const std::string modifier = judge_modifier(direction);
  for (auto at = system.find(kModifierSlot); at != std::string::npos; at = system.find(kModifierSlot, at + modifier.size())) {
    system.replace(at, std::string(kModifierSlot).size(), modifier);
  }
  std::vector<ChatMessage> msgs{{"system", system}};
  const auto& shots = direction == SteeringDirection::Positive ? lib.judge_positive : lib.judge_negative;
  for (const auto& shot : shots) {
    msgs.push_back({"user", judge_input(shot.original, shot.modified, shot.concept_text)});
    msgs.push_back({"assistant", shot.output.dump(4)});
  }
  msgs.push_back({"user", judge_input(original, modified, concept_text)});
  return msgs;
}

}  // namespace saeinterp
