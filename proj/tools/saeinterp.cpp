// Copyright (c) 2026 The saeinterp Authors
// SPDX-License-Identifier: Apache-2.0
//
// saeinterp: command-line front end for the pipeline stages.

#include <spdlog/sinks/stdout_color_sinks.h>
#include <spdlog/spdlog.h>

#include <chrono>
#include <ctime>
#include <iostream>

#include "CLI11.hpp"
#include "saeinterp/errors.hpp"
#include "saeinterp/pipeline.hpp"

namespace fs = std::filesystem;
using namespace saeinterp;

namespace {

std::string utc_now() {
  const auto t = std::chrono::system_clock::to_time_t(std::chrono::system_clock::now());
  std::tm tm{};
  gmtime_r(&t, &tm);
  char buf[32];
  std::strftime(buf, sizeof buf, "%Y-%m-%dT%H:%M:%SZ", &tm);
  return buf;
}

struct Overrides {
  std::string config;
  std::optional<std::uint64_t> seed;
  std::string mock_llm;
  std::string out_dir;
  std::string log_level = "info";
  // train
  std::string arch;
  bool reversed_groups = false;
  std::optional<std::uint64_t> max_steps;
  // filter
  std::string raw_dir;
  std::string template_path;
  // evaluate
  std::string generations;
};

PipelineConfig make_config(const Overrides& o) {
  PipelineConfig cfg = o.config.empty() ? PipelineConfig{} : load_pipeline_config(o.config);
  if (!o.out_dir.empty()) cfg.out_dir = o.out_dir;
  if (o.seed) {
    cfg.seed = *o.seed;
    cfg.train.seed = *o.seed;
  }
  if (!o.mock_llm.empty()) cfg.mock_llm = fs::path(o.mock_llm);
  if (!o.arch.empty()) cfg.train.arch = parse_architecture(o.arch);
  if (o.reversed_groups) cfg.train.reversed_groups = true;
  if (o.max_steps) cfg.train.max_steps = *o.max_steps;
  if (!o.raw_dir.empty()) cfg.raw_dir = fs::path(o.raw_dir);
  if (!o.template_path.empty()) cfg.template_path = o.template_path;
  return cfg;
}

void run_stage(const std::string& name, const PipelineConfig& cfg, const Overrides& o) {
  if (name == "synth") {
    cmd_synth(cfg);
    std::cout << "synth: " << cfg.synth.sequences << " sequences written to " << cfg.raw().string() << "\n";
  } else if (name == "filter") {
    const auto r = cmd_filter(cfg);
    std::cout << "filter: " << r.shards << " shards, " << r.sequences << " sequences, kept " << r.tokens_kept << " of "
              << r.tokens_in << " tokens (" << r.tokens_in - r.tokens_kept << " dropped)\n";
  } else if (name == "train") {
    const auto r = cmd_train(cfg);
    std::cout << "train: " << r.steps << " steps, final loss " << r.final_loss << ", " << r.dead << " dead features";
    if (r.recovery) std::cout << ", planted-dictionary recovery (mean max cosine) " << *r.recovery;
    std::cout << "\n";
  } else if (name == "interpret") {
    const auto r = cmd_interpret(cfg);
    std::cout << "interpret: " << r.explained << " of " << r.features << " features explained, " << r.no_positives
              << " never active, " << r.failed << " failed\n";
  } else if (name == "score") {
    const auto r = cmd_score(cfg);
    std::cout << "score: " << r.summary.scored << " scored, " << r.unscoreable << " unscoreable, " << r.failed << " failed";
    for (const auto& [t, n] : r.summary.above) std::cout << "; F1 > " << t << ": " << n;
    std::cout << "\n";
  } else if (name == "stats") {
    const auto s = cmd_stats(cfg);
    std::size_t silent = 0;
    for (const auto& f : s) silent += f.active_rows == 0;
    std::cout << "stats: " << s.size() << " features, " << silent << " never active\n";
  } else if (name == "steer") {
    const auto r = cmd_steer(cfg);
    std::cout << "steer: " << r.generations << " generations for " << r.features << " features (" << r.unchanged
              << " unchanged)\n";
  } else if (name == "evaluate") {
    const auto r = cmd_evaluate(cfg, o.generations.empty() ? std::nullopt : std::optional<fs::path>(o.generations));
    const auto& s = r.overall;
    std::cout << "evaluate: " << s.total << " judged, " << s.judge_failed << " judge failures";
    for (const auto c : {SteeringCategory::OnOnly, SteeringCategory::Both, SteeringCategory::OffOnly, SteeringCategory::None}) {
      std::cout << "; " << to_string(c) << " " << s.counts.at(c);
    }
    std::cout << "\n";
  } else {
    throw ConfigError("unknown stage " + name);
  }
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Sparse-autoencoder training, automatic interpretation and steering evaluation"};
  app.require_subcommand(1);
  Overrides o;
  app.add_option("--config", o.config, "JSON pipeline configuration")->check(CLI::ExistingFile);
  app.add_option("--seed", o.seed, "Seed for every stochastic stage (overrides the config)");
  app.add_option("--mock-llm", o.mock_llm, "Answer LLM requests from a canned JSON map")->check(CLI::ExistingFile);
  app.add_option("--out-dir", o.out_dir, "Directory for all outputs (overrides the config)");
  app.add_option("--log-level", o.log_level, "trace|debug|info|warn|error|off")
      ->check(CLI::IsMember({"trace", "debug", "info", "warn", "error", "off"}));

  const std::vector<std::pair<std::string, std::string>> stages{
      {"synth", "Write a synthetic raw activation dump"},
      {"filter", "Drop template boilerplate and write activation shards"},
      {"train", "Train the sparse autoencoder"},
      {"interpret", "Explain features with the LLM"},
      {"score", "Score explanations by detection F1"},
      {"stats", "Per-feature activation statistics and density histogram"},
      {"steer", "Generate with decoder-column steering"},
      {"evaluate", "Judge steered generations, stratify and correlate"},
      {"run", "filter, train, interpret, score, stats, steer and evaluate in order"}};
  std::map<std::string, CLI::App*> subs;
  for (const auto& [name, help] : stages) {
    auto* sub = app.add_subcommand(name, help);
    sub->fallthrough();
    subs[name] = sub;
  }
  for (auto* sub : {subs["train"], subs["run"]}) {
    sub->add_option("--arch", o.arch, "topk|batchtopk|matryoshka");
    sub->add_flag("--reversed-groups", o.reversed_groups, "Reverse the Matryoshka group order");
    sub->add_option("--max-steps", o.max_steps, "Stop after this many optimiser steps");
  }
  for (auto* sub : {subs["filter"], subs["synth"], subs["run"]}) {
    sub->add_option("--raw-dir", o.raw_dir, "Raw dumps: <name>.sae plus <name>.tokens.jsonl");
    sub->add_option("--template", o.template_path, "Boilerplate template JSON")->check(CLI::ExistingFile);
  }
  subs["evaluate"]->add_option("--generations", o.generations, "Steering generations JSONL")->check(CLI::ExistingFile);

  CLI11_PARSE(app, argc, argv);
  spdlog::set_default_logger(spdlog::stderr_color_mt("saeinterp"));
  spdlog::set_level(spdlog::level::from_str(o.log_level));

  const std::string command = app.get_subcommands().front()->get_name();
  const std::vector<std::string> args(argv + 1, argv + argc);
  const auto started = utc_now();
  std::optional<PipelineConfig> cfg;
  int code = 0;
  try {
    cfg = make_config(o);
    fs::create_directories(cfg->out_dir);
    if (command == "run") {
      for (const auto* stage : {"filter", "train", "interpret", "score", "stats", "steer", "evaluate"}) run_stage(stage, *cfg, o);
    } else {
      run_stage(command, *cfg, o);
    }
  } catch (const ConfigError& e) {
    std::cerr << "configuration error: " << e.what() << "\n";
    code = 2;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    code = 1;
  }
  if (cfg) {
    try {
      record_run(*cfg, command, args, started, utc_now(), code);
    } catch (const std::exception& e) {
      std::cerr << "warning: could not update the run manifest: " << e.what() << "\n";
    }
  }
  return code;
}
