// Copyright (c) 2026 The saeinterp Authors
// SPDX-License-Identifier: Apache-2.0

#include <algorithm>
#include <cmath>
#include <fstream>
#include <numeric>

#include "doctest.h"
#include "saeinterp/errors.hpp"
#include "saeinterp/rng.hpp"
#include "saeinterp/steering.hpp"

using namespace saeinterp;

namespace {

nlohmann::json load_fixture(const std::string& name) {
  std::ifstream in(std::string(SAEINTERP_FIXTURES_DIR) + "/" + name);
  REQUIRE(in);
  return nlohmann::json::parse(in);
}

Vector random_unit(std::size_t n, Rng& rng) {
  NormalSampler normal;
  Vector v(static_cast<Eigen::Index>(n));
  for (auto& x : v) x = normal(rng);
  return v.normalized();
}

// Hidden state at the last position, recomputed from the token history.
Vector causal_mean_last(const ToyLinearGenerator& g, const std::vector<std::size_t>& ctx) {
  Vector h = Vector::Zero(static_cast<Eigen::Index>(g.hidden_dim()));
  for (const auto id : ctx) h += g.embeddings().row(static_cast<Eigen::Index>(id)).transpose();
  return h / static_cast<double>(ctx.size());
}

// 1 - 6 sum d^2 / (n (n^2 - 1)) for tie-free data.
double rho_no_ties(const std::vector<double>& x, const std::vector<double>& y) {
  const auto rank = [](const std::vector<double>& v) {
    std::vector<double> r(v.size());
    for (std::size_t i = 0; i < v.size(); ++i) {
      r[i] = 1.0 + static_cast<double>(std::count_if(v.begin(), v.end(), [&](double o) { return o < v[i]; }));
    }
    return r;
  };
  const auto rx = rank(x), ry = rank(y);
  double d2 = 0;
  for (std::size_t i = 0; i < x.size(); ++i) d2 += (rx[i] - ry[i]) * (rx[i] - ry[i]);
  const double n = static_cast<double>(x.size());
  return 1.0 - 6.0 * d2 / (n * (n * n - 1.0));
}

std::vector<std::string> prompts_for(const ToyLinearGenerator& g, std::size_t count, Rng& rng) {
  std::vector<std::string> out;
  for (std::size_t p = 0; p < count; ++p) {
    std::string text;
    const auto len = 1 + uniform_index(rng, 6);
    for (std::uint64_t i = 0; i < len; ++i) {
      text += (i ? " " : "") + g.vocab()[2 + uniform_index(rng, g.vocab().size() - 2)];
    }
    out.push_back(text);
  }
  return out;
}

FeatureInterpretation scored(std::uint32_t id, double f1) {
  FeatureInterpretation f;
  f.feature_id = id;
  f.f1 = f1;
  return f;
}

}  // namespace

TEST_SUITE("steering") {
  TEST_CASE("steering vector is the decoder column") {
    SaeParams p = SaeParams::initialize(4, 4, Architecture::TopK, 1, {4}, 0.0, 1);
    p.w_dec = ColMatrix::Identity(4, 4);
    for (std::uint32_t i = 0; i < 4; ++i) CHECK(steering_vector(p, i) == Vector::Unit(4, i));
    CHECK_THROWS_AS(steering_vector(p, 4), ParameterError);

    const auto q = SaeParams::initialize(16, 64, Architecture::BatchTopK, 4, {64}, 0.0, 3);
    for (std::uint32_t i = 0; i < 64; ++i) CHECK(steering_vector(q, i).norm() == doctest::Approx(1.0).epsilon(1e-6));

    SteeringSpec spec{3, 10.0, "layer-15"};
    CHECK_NOTHROW(spec.validate(64));
    CHECK(spec.direction() == SteeringDirection::Positive);
    CHECK_THROWS_AS((SteeringSpec{64, 10.0, ""}.validate(64)), ParameterError);
    CHECK_THROWS_AS((SteeringSpec{1, 0.0, ""}.validate(64)), ParameterError);
    CHECK_THROWS_AS((SteeringSpec{1, std::nan(""), ""}.validate(64)), ParameterError);
  }

  TEST_CASE("toy generator logits shift by alpha R v at every step") {
    Rng rng(17);
    const auto gen = ToyLinearGenerator::random(40, 12, 5, 12);
    for (const double alpha : {-10.0, -0.5, 3.0, 10.0}) {
      const Vector v = random_unit(12, rng);
      const Vector expected_shift = alpha * (gen.readout() * v);
      std::size_t steps = 0;
      for (const auto& prompt : prompts_for(gen, 5, rng)) {
        apply_steering(gen, prompt, v, alpha, [&](const StepObservation& obs) {
          const Vector base = gen.readout() * causal_mean_last(gen, *obs.context);
          CHECK((*obs.logits - base - expected_shift).cwiseAbs().maxCoeff() <= 1e-10);
          ++steps;
        });
      }
      CHECK(steps > 5);
    }
  }

  TEST_CASE("zero alpha reproduces the unsteered text byte for byte") {
    Rng rng(4);
    const auto gen = ToyLinearGenerator::random(30, 8, 9, 20);
    const Vector v = random_unit(8, rng);
    for (const auto& prompt : prompts_for(gen, 50, rng)) {
      const auto plain = gen.generate(prompt);
      CHECK(apply_steering(gen, prompt, v, 0.0) == plain);
      CHECK(gen.generate(prompt) == plain);
    }
  }

  TEST_CASE("large alpha along a readout row forces that token") {
    const auto gen = ToyLinearGenerator::random(25, 10, 2, 8);
    for (const std::size_t t : {2u, 7u, 24u}) {
      const Vector v = gen.readout().row(static_cast<Eigen::Index>(t)).transpose();
      std::vector<std::size_t> chosen;
      const auto text = apply_steering(gen, "t3 t4", v, 1e4, [&](const StepObservation& o) { chosen.push_back(o.token); });
      CHECK(chosen == std::vector<std::size_t>(8, t));
      std::string expected;
      for (int i = 0; i < 8; ++i) expected += (i ? " t" : "t") + std::to_string(t);
      CHECK(text == expected);
    }
    // Forcing the stop token ends generation immediately.
    const Vector stop = gen.readout().row(static_cast<Eigen::Index>(gen.stop_id())).transpose();
    CHECK(apply_steering(gen, "t3", stop, 1e4).empty());
  }

  TEST_CASE("generator input validation") {
    const auto gen = ToyLinearGenerator::random(10, 4, 1);
    CHECK_THROWS_AS(apply_steering(gen, "t2", Vector::Zero(5), 1.0), ShapeError);
    CHECK_THROWS_AS(gen.generate("   "), DataError);
    CHECK(gen.tokenize("t2 unknown t3") == std::vector<std::size_t>{2, 0, 3});
    CHECK_THROWS_AS(gen.generate("t2", [](const RowMatrix& h) { return RowMatrix(h.rows() + 1, h.cols()); }), ShapeError);
    CHECK_THROWS_AS(ToyLinearGenerator({"a", "b"}, RowMatrix::Zero(2, 3), RowMatrix::Zero(2, 3)), ParameterError);
    CHECK_THROWS_AS(ToyLinearGenerator({"a", "</s>"}, RowMatrix::Zero(2, 3), RowMatrix::Zero(3, 3)), ShapeError);
  }

  TEST_CASE("published example scores classify under the 0.1 binarisation") {
    const auto fx = load_fixture("steering_score_examples.json");
    for (const auto& e : fx.at("examples")) {
      CHECK(to_string(categorize(e.at("on_target"), e.at("off_target"), fx.at("threshold"))) ==
            e.at("expected").get<std::string>());
    }
    CHECK(categorize(0.05, 0.05) == SteeringCategory::None);
    CHECK(categorize(0.1, 0.1) == SteeringCategory::None);
    CHECK(parse_steering_category("Both") == SteeringCategory::Both);
    CHECK_THROWS_AS(parse_steering_category("both"), FormatError);
  }

  TEST_CASE("stratification is disjoint and exhaustive") {
    Rng rng(8);
    for (int trial = 0; trial < 50; ++trial) {
      std::vector<SteeringOutcome> outcomes(1 + uniform_index(rng, 40));
      std::size_t failed = 0;
      for (auto& o : outcomes) {
        o.on_target = std::round(uniform01(rng) * 10) / 10;
        o.off_target = std::round(uniform01(rng) * 10) / 10;
        o.category = categorize(o.on_target, o.off_target);
        o.judge_failed = uniform_index(rng, 10) == 0;
        failed += o.judge_failed;
      }
      const auto s = stratify(outcomes);
      std::size_t sum = 0;
      double props = 0;
      for (const auto& [c, n] : s.counts) {
        sum += n;
        props += s.proportion(c);
      }
      CHECK(s.counts.size() == 4);
      CHECK(sum == outcomes.size() - failed);
      CHECK(s.total == sum);
      CHECK(s.judge_failed == failed);
      if (s.total) CHECK(props == doctest::Approx(1.0));
    }
  }

  TEST_CASE("judge: identical texts skip the request; scores are stored verbatim") {
    nlohmann::json map;
    map["rules"] = nlohmann::json::array(
        {{{"kind", "judge"}, {"contains", "Modified report: bad"}, {"response", R"({"on_target_score": 1.5, "off_target_score": 0})"}},
         {{"kind", "judge"}, {"contains", "Modified report: junk"}, {"response", "no json"}}});
    map["defaults"]["judge"] =
        R"({"on_target_score_reasoning": "on", "off_target_score_reasoning": "off", "on_target_score": 0.7, "off_target_score": 0.2})";
    auto mock = std::make_shared<MockTransport>(map);
    LlmClientConfig cfg;
    cfg.max_parse_retries = 0;
    LlmClient client(mock, cfg);
    const auto lib = PromptLibrary::load();

    const auto same = judge_steering(client, lib, "No effusion.", "No effusion.", "effusion", SteeringDirection::Positive);
    CHECK(same.on_target == 0.0);
    CHECK(same.off_target == 0.0);
    CHECK(same.on_rationale == "identical texts");
    CHECK_FALSE(same.failed);
    CHECK(mock->calls() == 0);

    const auto v = judge_steering(client, lib, "No effusion.", "Small effusion.", "effusion", SteeringDirection::Positive);
    CHECK(v.on_target == 0.7);
    CHECK(v.off_target == 0.2);
    CHECK(v.on_rationale == "on");
    CHECK(v.off_rationale == "off");
    CHECK(categorize(v.on_target, v.off_target) == SteeringCategory::Both);

    CHECK(judge_steering(client, lib, "a", "bad", "c", SteeringDirection::Negative).failed);
    CHECK(judge_steering(client, lib, "a", "junk", "c", SteeringDirection::Negative).failed);

    const auto r1 = client.make_request("judge", build_judge_messages(lib, "a", "b", "c", SteeringDirection::Negative));
    const auto r2 = client.make_request("judge", build_judge_messages(lib, "a", "b", "c", SteeringDirection::Negative));
    CHECK(to_json(r1).dump() == to_json(r2).dump());
  }

  TEST_CASE("generation and judging keep order; missing concepts fail") {
    const auto gen = ToyLinearGenerator::random(30, 16, 4, 6);
    const auto params = SaeParams::initialize(16, 64, Architecture::TopK, 4, {64}, 0.0, 3);
    const std::vector<SteeringSpec> specs{{5, 10.0, ""}, {5, -10.0, ""}, {9, 10.0, ""}};
    const std::vector<SteeringPrompt> prompts{{"p0", "t2 t3"}, {"p1", "t4"}};
    const auto gens = generate_steered(gen, params, specs, prompts);
    REQUIRE(gens.size() == 6);
    CHECK(gens[0].sample_id == "p0");
    CHECK(gens[3].steer_alpha == -10.0);
    CHECK(gens[0].original_text == gens[2].original_text);
    CHECK(steering_generation_from_json(to_json(gens[4])).steered_text == gens[4].steered_text);
    CHECK_THROWS_AS(generate_steered(gen, params, {{64, 1.0, ""}}, prompts), ParameterError);

    nlohmann::json map;
    map["defaults"]["judge"] = R"({"on_target_score": 0.5, "off_target_score": 0.0})";
    LlmClientConfig cfg;
    cfg.max_in_flight = 3;
    LlmClient client(std::make_shared<MockTransport>(map), cfg);
    const auto outcomes = judge_generations(client, PromptLibrary::load(), gens, {{5, "concept five"}});
    REQUIRE(outcomes.size() == 6);
    for (std::size_t i = 0; i < 6; ++i) {
      CHECK(outcomes[i].sample_id == gens[i].sample_id);
      CHECK(outcomes[i].feature_id == gens[i].feature_id);
      CHECK(outcomes[i].judge_failed == (gens[i].feature_id == 9));
    }
    const auto back = steering_outcome_from_json(to_json(outcomes[1]));
    CHECK(to_json(back) == to_json(outcomes[1]));

    const auto rows = stratify_by_feature(outcomes);
    REQUIRE(rows.size() == 3);
    CHECK(rows[0].feature_id == 5);
    CHECK(rows[0].steer_alpha == -10.0);
    CHECK(rows[2].strata.judge_failed == 2);
    const auto csv = stratification_csv(rows);
    CHECK(std::count(csv.begin(), csv.end(), '\n') == 4);
    const auto js = stratification_json(outcomes);
    CHECK(js["overall"]["judge_failed"] == 2);
    CHECK(js["features"].size() == 3);
  }

  TEST_CASE("spearman: average ranks and monotone cases") {
    CHECK(average_ranks({10, 20, 20, 30}) == std::vector<double>{1, 2.5, 2.5, 4});
    CHECK(average_ranks({3, 1, 2}) == std::vector<double>{3, 1, 2});
    const std::vector<double> xs{0.3, 1.2, -4, 8, 2.5, 0.31};
    std::vector<double> rev = xs;
    for (auto& v : rev) v = -v;
    CHECK(spearman_rho(xs, xs) == doctest::Approx(1.0));
    CHECK(spearman_rho(xs, rev) == doctest::Approx(-1.0));
    CHECK(spearman_permutation(xs, xs, 999, 1).rho == doctest::Approx(1.0));
    CHECK_THROWS_AS(spearman_rho({1, 1, 1}, {1, 2, 3}), DataError);
    CHECK_THROWS_AS(spearman_rho({1, 2}, {1, 2}), DataError);
    CHECK_THROWS_AS(spearman_rho({1, 2, 3}, {1, 2}), ShapeError);
  }

  TEST_CASE("spearman is invariant under strictly monotone transforms") {
    Rng rng(12);
    for (int trial = 0; trial < 100; ++trial) {
      std::vector<double> x, y;
      const auto n = 3 + uniform_index(rng, 20);
      for (std::uint64_t i = 0; i < n; ++i) {
        x.push_back(std::round(uniform_real(rng, -3, 3) * 4) / 4);  // with ties
        y.push_back(uniform_real(rng, -3, 3));
      }
      if (std::adjacent_find(x.begin(), x.end(), std::not_equal_to<>()) == x.end()) continue;
      auto tx = x, ty = y;
      for (auto& v : tx) v = std::exp(v);
      for (auto& v : ty) v = v * v * v + 2;
      CHECK(spearman_rho(tx, ty) == doctest::Approx(spearman_rho(x, y)).epsilon(1e-12));
    }
  }

  TEST_CASE("permutation p-value agrees with exhaustive enumeration") {
    const std::vector<double> x{1, 2, 3, 4, 5};
    for (const auto& y : std::vector<std::vector<double>>{{2, 1, 4, 3, 5}, {1, 3, 2, 5, 4}, {5, 1, 4, 2, 3}}) {
      const double obs = rho_no_ties(x, y);
      std::vector<double> perm = y;
      std::sort(perm.begin(), perm.end());
      std::size_t extreme = 0, total = 0;
      do {
        ++total;
        extreme += std::abs(rho_no_ties(x, perm)) >= std::abs(obs) - 1e-12;
      } while (std::next_permutation(perm.begin(), perm.end()));
      REQUIRE(total == 120);
      const double p_exact = static_cast<double>(extreme) / 120.0;
      const std::size_t n_perm = 9999;
      const auto res = spearman_permutation(x, y, n_perm, 77);
      CHECK(res.rho == doctest::Approx(obs));
      const double sigma = std::sqrt(p_exact * (1 - p_exact) / n_perm);
      CHECK(std::abs(res.p_value - p_exact) <= 3 * sigma + 1.0 / (n_perm + 1));
    }
  }

  TEST_CASE("steering correlations report each comparison") {
    std::vector<FeatureStratification> rows;
    std::map<std::uint32_t, double> density;
    for (std::uint32_t f = 0; f < 8; ++f) {
      FeatureStratification p, n;
      p.feature_id = n.feature_id = f;
      p.steer_alpha = 10;
      n.steer_alpha = -10;
      p.strata.total = n.strata.total = 4;
      p.mean_on_target = 0.1 * f;
      n.mean_on_target = 0.05 * f + 0.01;
      p.mean_off_target = f % 2 ? 0.3 : 0.1 + 0.01 * f;
      n.mean_off_target = 0.2;
      rows.push_back(p);
      rows.push_back(n);
      density[f] = std::pow(10.0, -static_cast<double>(f));
    }
    const auto j = steering_correlations(rows, density, {0}, 999, 3);
    CHECK(j["on_target_positive_vs_negative"]["rho"] == doctest::Approx(1.0));
    CHECK(j["on_target_positive_vs_negative"]["n"] == 8);
    CHECK(j["off_target_positive_vs_negative"].contains("error"));  // constant negative off-target scores
    CHECK(j["density_vs_on_target"]["n"] == 7);
    CHECK(j["density_vs_on_target"]["rho"] == doctest::Approx(-1.0));
    CHECK(j["density_vs_on_target"]["p_value"].get<double>() < 0.05);
  }

  TEST_CASE("feature selection: threshold, additions, exclusions") {
    std::vector<FeatureInterpretation> items;
    for (std::uint32_t f = 0; f < 100; ++f) items.push_back(scored(f, f < 74 ? 0.9 : 0.85));
    items.push_back(scored(100, 0.99));
    items.back().status = InterpretationStatus::Failed;
    const auto pure = select_steering_features(items, nullptr, {});
    CHECK(pure.size() == 74);
    CHECK(std::is_sorted(pure.begin(), pure.end()));

    FeatureSelectionConfig cfg;
    cfg.exclusions = {0, 1, 2, 3, 4, 5, 6};
    CHECK(select_steering_features(items, nullptr, cfg).size() == 67);
    cfg.manual_add = {90, 91, 3};
    cfg.exclusions = {3};
    const auto mixed = select_steering_features(items, nullptr, cfg);
    CHECK(mixed.size() == 75);
    CHECK(std::binary_search(mixed.begin(), mixed.end(), 91u));
    CHECK_FALSE(std::binary_search(mixed.begin(), mixed.end(), 3u));

    std::vector<FeatureStats> stats;
    for (std::uint32_t f = 0; f < 100; ++f) stats.push_back({f, 1, f < 10 ? 1e-3 : 1e-6, 1.0, {}});
    FeatureSelectionConfig dense;
    dense.min_density = 1e-4;
    CHECK(select_steering_features(items, &stats, dense).size() == 10);

    const auto parsed = feature_selection_from_json(nlohmann::json::parse(R"({"f1_threshold": 0.5, "manual_add": [7]})"));
    CHECK(parsed.f1_threshold == 0.5);
    CHECK(parsed.manual_add == std::vector<std::uint32_t>{7});
    CHECK(to_json(feature_selection_from_json(to_json(parsed))) == to_json(parsed));
    CHECK_THROWS_AS(feature_selection_from_json(nlohmann::json::parse(R"({"threshold": 1})")), ConfigError);
  }
}
