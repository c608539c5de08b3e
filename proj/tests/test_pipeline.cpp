// Copyright (c) 2026 The saeinterp Authors
// SPDX-License-Identifier: Apache-2.0

#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <iterator>
#include <map>
#include <string>

#include "doctest.h"
#include "saeinterp/activation_store.hpp"
#include "saeinterp/autointerp.hpp"
#include "saeinterp/checkpoint.hpp"
#include "saeinterp/errors.hpp"
#include "saeinterp/pipeline.hpp"

using namespace saeinterp;
namespace fs = std::filesystem;
using nlohmann::json;

namespace {

struct TempDir {
  fs::path path;
  explicit TempDir(const std::string& name) : path(fs::temp_directory_path() / name) {
    fs::remove_all(path);
    fs::create_directories(path);
  }
  ~TempDir() { fs::remove_all(path); }
};

std::string bytes_of(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  return {std::istreambuf_iterator<char>(in), {}};
}

void write_text(const fs::path& p, const std::string& s) {
  std::ofstream out(p, std::ios::binary);
  out << s;
}

PipelineConfig small_config(const fs::path& out) {
  PipelineConfig cfg;
  cfg.out_dir = out;
  cfg.seed = 3;
  cfg.synth.sequences = 24;
  cfg.synth.n = 8;
  cfg.synth.atoms = 16;
  cfg.synth.sequences_per_shard = 10;
  cfg.train.arch = Architecture::TopK;
  cfg.train.k = 2;
  cfg.train.expansion_factor = 2;
  cfg.train.batch_size = 32;
  cfg.train.group_fractions = {1.0};
  cfg.train.threshold_start_step = 0;
  cfg.train.log_every = 100;
  cfg.train.seed = 3;
  return cfg;
}

}  // namespace

TEST_SUITE("pipeline") {
  TEST_CASE("environment interpolation") {
    ::setenv("SAEINTERP_TEST_VAR", "abc", 1);
    const auto j = interpolate_env(json{{"a", "x-${SAEINTERP_TEST_VAR}-y"}, {"b", {1, "${SAEINTERP_TEST_VAR}"}}, {"c", 4}});
    CHECK(j["a"] == "x-abc-y");
    CHECK(j["b"][1] == "abc");
    CHECK(j["c"] == 4);
    ::unsetenv("SAEINTERP_TEST_UNSET");
    CHECK_THROWS_AS(interpolate_env(json{{"a", "${SAEINTERP_TEST_UNSET}"}}), ConfigError);
  }

  TEST_CASE("config parsing: paths, seeds and rejected input") {
    const fs::path base = "/configs/here";
    const auto cfg = pipeline_config_from_json(
        json{{"out_dir", "run"}, {"mock_llm", "/abs/mock.json"}, {"seed", 9}, {"train", {{"group_fractions", {"1/2", "1/2"}}}}},
        base);
    CHECK(cfg.out_dir == base / "run");
    CHECK(*cfg.mock_llm == fs::path("/abs/mock.json"));
    CHECK(cfg.shards() == base / "run" / "shards");
    CHECK(cfg.train.seed == 9);
    CHECK(cfg.train.group_fractions == std::vector<double>{0.5, 0.5});

    const auto own_seed = pipeline_config_from_json(json{{"seed", 9}, {"train", {{"seed", 2}}}});
    CHECK(own_seed.train.seed == 2);

    CHECK_THROWS_AS(pipeline_config_from_json(json{{"out_dri", "x"}}), ConfigError);
    CHECK_THROWS_AS(pipeline_config_from_json(json{{"train", {{"group_fractions", {"1/2", "1/4"}}}}}), ConfigError);
    CHECK_THROWS_AS(pipeline_config_from_json(json{{"steering", {{"alphas", {10, 0}}}}}), ConfigError);
    CHECK_THROWS_AS(pipeline_config_from_json(json{{"synth", {{"words_min", 5}, {"words_max", 2}}}}), ConfigError);
    CHECK_THROWS_AS(load_pipeline_config("/nonexistent/config.json"), ConfigError);
  }

  TEST_CASE("steering manifest files are merged relative to themselves") {
    TempDir dir("saeinterp_pipeline_manifest");
    fs::create_directories(dir.path / "sub");
    write_text(dir.path / "sub" / "steer.json",
               R"({"features": [{"id": 3, "alpha": -10}], "checkpoint": "model.ckpt", "prompts": ["a b"]})");
    write_text(dir.path / "config.json", R"({"steering": {"manifest": "sub/steer.json", "prompt_count": 2}})");
    const auto cfg = load_pipeline_config(dir.path / "config.json");
    REQUIRE(cfg.steering.features.size() == 1);
    CHECK(cfg.steering.features[0].feature_id == 3);
    CHECK(cfg.steering.features[0].steer_alpha == -10.0);
    CHECK(cfg.checkpoint_path() == dir.path / "sub" / "model.ckpt");
    CHECK(cfg.steering.prompts.size() == 1);
    CHECK(cfg.steering.prompt_count == 2);
  }

  TEST_CASE("filter: missing or empty raw input is a data error") {
    TempDir dir("saeinterp_pipeline_empty");
    auto cfg = small_config(dir.path / "out");
    cfg.raw_dir = dir.path / "nothing_here";
    CHECK_THROWS_AS(cmd_filter(cfg), DataError);
    fs::create_directories(*cfg.raw_dir);
    CHECK_THROWS_AS(cmd_filter(cfg), DataError);
  }

  TEST_CASE("filter output is byte-identical on rerun; mismatched token files are rejected") {
    TempDir dir("saeinterp_pipeline_filter");
    const auto cfg = small_config(dir.path / "out");
    cmd_synth(cfg);
    const auto first = cmd_filter(cfg);
    CHECK(first.shards == 3);
    CHECK(first.sequences == 24);
    CHECK(first.tokens_kept > 0);
    CHECK(first.tokens_kept < first.tokens_in);
    std::map<fs::path, std::string> before;
    for (const auto& e : fs::directory_iterator(cfg.shards())) before[e.path()] = bytes_of(e.path());
    cmd_filter(cfg);
    for (const auto& [path, bytes] : before) CHECK(bytes_of(path) == bytes);

    const ActivationStore store = ActivationStore::open(cfg.shards());
    CHECK(store.row_count() == first.tokens_kept);
    CHECK(store.dim() == 8);

    // Drop the last sequence from one token file.
    const auto tokens = cfg.raw() / "raw0000.tokens.jsonl";
    auto lines = read_jsonl(tokens);
    lines.pop_back();
    write_text(tokens, to_jsonl(lines));
    CHECK_THROWS_AS(cmd_filter(cfg), DataError);
  }

  TEST_CASE("stats: densities equal a direct count over every row") {
    TempDir dir("saeinterp_pipeline_stats");
    auto cfg = small_config(dir.path / "out");
    cfg.autointerp.pool_size = 1000000;  // the whole store
    cmd_synth(cfg);
    cmd_filter(cfg);
    const auto tr = cmd_train(cfg);
    const auto stats = cmd_stats(cfg);

    const auto params = load_checkpoint(cfg.checkpoint_path());
    const ActivationStore store = ActivationStore::open(cfg.shards());
    std::vector<std::uint64_t> all(store.row_count());
    for (std::uint64_t r = 0; r < all.size(); ++r) all[r] = r;
    const RowMatrix x = store.gather(all) / tr.norm_factor;
    std::vector<std::size_t> active(params.dict_size(), 0);
    for (const auto& code : encode(params, x))
      for (const auto i : code.indices) ++active[i];

    REQUIRE(stats.size() == params.dict_size());
    for (std::size_t f = 0; f < stats.size(); ++f) {
      CAPTURE(f);
      CHECK(stats[f].active_rows == active[f]);
      CHECK(stats[f].density == doctest::Approx(static_cast<double>(active[f]) / static_cast<double>(all.size())));
    }
    const auto js = json::parse(bytes_of(cfg.out("feature_stats.json")));
    CHECK(js["pool_rows"] == all.size());
    const auto csv = bytes_of(cfg.out("density_histogram.csv"));
    CHECK(csv.rfind("log10_density_lower,log10_density_upper,features\n", 0) == 0);
  }

  TEST_CASE("evaluate reproduces stored judge scores and categories") {
    TempDir dir("saeinterp_pipeline_evaluate");
    auto cfg = small_config(dir.path);
    cfg.evaluate.n_permutations = 99;
    const std::vector<std::tuple<std::uint32_t, double, double, std::string>> cases{
        {1599, 1.0, 0.0, "OnOnly"}, {6412, 1.0, 0.2, "Both"}, {10643, 0.1, 0.7, "OffOnly"}};
    json mock{{"rules", json::array()}};
    std::vector<json> explanations, gens;
    for (const auto& [id, on, off, _] : cases) {
      FeatureInterpretation f;
      f.feature_id = id;
      f.explanation = "concept " + std::to_string(id);
      explanations.push_back(to_json(f));
      const std::string steered = "steered " + std::to_string(id);
      gens.push_back(to_json(SteeringGeneration{"s0", id, 10.0, "prompt", "original", steered}));
      mock["rules"].push_back({{"kind", "judge"},
                               {"contains", "Modified report: " + steered},
                               {"response", json{{"on_target_score", on}, {"off_target_score", off}}.dump()}});
    }
    write_text(dir.path / "explanations.jsonl", to_jsonl(explanations));
    write_text(dir.path / "steering_generations.jsonl", to_jsonl(gens));
    write_text(dir.path / "mock.json", mock.dump());
    cfg.mock_llm = dir.path / "mock.json";

    const auto report = cmd_evaluate(cfg);
    CHECK(report.overall.total == 3);
    CHECK(report.overall.judge_failed == 0);
    const auto outcomes = read_jsonl(dir.path / "steering_outcomes.jsonl");
    REQUIRE(outcomes.size() == 3);
    for (std::size_t i = 0; i < 3; ++i) {
      CHECK(outcomes[i]["on_target"] == std::get<1>(cases[i]));
      CHECK(outcomes[i]["off_target"] == std::get<2>(cases[i]));
      CHECK(outcomes[i]["category"] == std::get<3>(cases[i]));
    }
    CHECK(fs::exists(dir.path / "stratification.csv"));
    CHECK(json::parse(bytes_of(dir.path / "correlations.json")).contains("on_target_positive_vs_negative"));

    fs::remove(dir.path / "steering_generations.jsonl");
    CHECK_THROWS_AS(cmd_evaluate(cfg), DataError);
  }

  TEST_CASE("run manifest appends one record per command") {
    TempDir dir("saeinterp_pipeline_manifest_runs");
    const auto cfg = small_config(dir.path);
    record_run(cfg, "filter", {"filter"}, "t0", "t1", 0);
    record_run(cfg, "train", {"train", "--max-steps", "3"}, "t2", "t3", 2);
    const auto j = json::parse(bytes_of(dir.path / "run_manifest.json"));
    REQUIRE(j["runs"].size() == 2);
    CHECK(j["runs"][0]["command"] == "filter");
    CHECK(j["runs"][1]["exit_code"] == 2);
    CHECK(j["runs"][1]["argv"].size() == 3);
    CHECK(j["runs"][1]["config"]["seed"] == 3);
  }
}
