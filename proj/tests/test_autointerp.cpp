// Copyright (c) 2026 The saeinterp Authors
// SPDX-License-Identifier: Apache-2.0

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <set>

#include "doctest.h"
#include "oracles.hpp"
#include "saeinterp/autointerp.hpp"
#include "saeinterp/errors.hpp"
#include "saeinterp/rng.hpp"

using namespace saeinterp;
namespace fs = std::filesystem;

namespace {

struct TempDir {
  fs::path path;
  explicit TempDir(const std::string& name) : path(fs::temp_directory_path() / name) {
    fs::remove_all(path);
    fs::create_directories(path);
  }
  ~TempDir() { fs::remove_all(path); }
};

// `rows` tokens in sequences of `seq_len`; token i of sequence s reads " w<s>_<i>".
ActivationStore word_store(const fs::path& dir, std::size_t rows, std::size_t seq_len = 10, std::size_t dim = 4) {
  std::vector<TokenRecord> records;
  for (std::size_t r = 0; r < rows; ++r) {
    const auto s = r / seq_len, i = r % seq_len;
    records.push_back({"s" + std::to_string(s), i, " w" + std::to_string(s) + "_" + std::to_string(i),
                       MessageType::Assistant, ContentType::Str, 0});
  }
  Rng rng(5);
  write_shard(dir / "a.sae", oracle::random_matrix(rows, dim, rng).cast<float>().cast<double>(), records);
  return ActivationStore::open(dir);
}

// Pool 0..pool-1; feature 0 fires on the first `positives` rows with value
// positives - i, so row order equals rank order.
FeatureActivationIndex ladder_index(std::size_t pool, std::size_t positives) {
  std::vector<std::uint64_t> rows(pool);
  for (std::size_t i = 0; i < pool; ++i) rows[i] = i;
  std::vector<ActivationEntry> f0;
  for (std::size_t i = 0; i < positives; ++i) f0.push_back({i, static_cast<double>(positives - i)});
  return FeatureActivationIndex(rows, {f0});
}

std::unordered_set<std::uint64_t> as_set(const std::vector<std::uint64_t>& v) { return {v.begin(), v.end()}; }

PromptLibrary library() { return PromptLibrary::load(); }

}  // namespace

TEST_SUITE("autointerp") {
  TEST_CASE("interpretation rows come from the top decile and zero rows") {
    const auto index = ladder_index(3000, 1000);
    for (std::uint64_t seed = 0; seed < 20; ++seed) {
      const auto sel = select_interpretation_rows(index, 0, seed);
      REQUIRE(sel.positive_rows.size() == 25);
      REQUIRE(sel.negative_rows.size() == 25);
      CHECK_FALSE(sel.no_positives);
      for (const auto r : sel.positive_rows) CHECK(r < 100);
      for (const auto r : sel.negative_rows) CHECK(index.activation(0, r) == 0.0);
      CHECK(as_set(sel.positive_rows).size() == 25);
      CHECK(as_set(sel.negative_rows).size() == 25);
    }
    CHECK(select_interpretation_rows(index, 0, 1).positive_rows == select_interpretation_rows(index, 0, 1).positive_rows);
    CHECK(select_interpretation_rows(index, 0, 1).positive_rows != select_interpretation_rows(index, 0, 2).positive_rows);
  }

  TEST_CASE("sparse features widen the candidate set") {
    const auto three = select_interpretation_rows(ladder_index(50, 3), 0, 7);
    CHECK(as_set(three.positive_rows) == std::unordered_set<std::uint64_t>{0, 1, 2});
    CHECK(three.negative_rows.size() == 3);

    // 120 positives: decile is 12, widened to the top 25.
    const auto wide = select_interpretation_rows(ladder_index(500, 120), 0, 7);
    CHECK(as_set(wide.positive_rows).size() == 25);
    for (const auto r : wide.positive_rows) CHECK(r < 25);

    const auto none = select_interpretation_rows(ladder_index(50, 0), 0, 7);
    CHECK(none.no_positives);
    CHECK(none.positive_rows.empty());
    CHECK(none.negative_rows.empty());
  }

  TEST_CASE("scoring rows are balanced, disjoint from interpretation rows, top quintile") {
    const auto index = ladder_index(5000, 1000);
    const auto interp = select_interpretation_rows(index, 0, 3);
    auto used = as_set(interp.positive_rows);
    used.insert(interp.negative_rows.begin(), interp.negative_rows.end());
    const auto sel = select_scoring_rows(index, 0, 3, used);
    CHECK(sel.positive_rows.size() == 100);
    CHECK(sel.negative_rows.size() == 100);
    CHECK_FALSE(sel.imbalanced);
    CHECK_FALSE(sel.unscoreable);
    for (const auto r : sel.positive_rows) {
      CHECK_FALSE(used.contains(r));
      CHECK(r < 225);  // top fifth of the 975 eligible, which skip at most 25 rows
    }
    for (const auto r : sel.negative_rows) {
      CHECK_FALSE(used.contains(r));
      CHECK(index.activation(0, r) == 0.0);
    }
    CHECK(as_set(sel.positive_rows).size() == 100);
  }

  TEST_CASE("scarce positives are back-filled with negatives") {
    const auto index = ladder_index(1000, 65);
    const auto interp = select_interpretation_rows(index, 0, 9);
    auto used = as_set(interp.positive_rows);
    used.insert(interp.negative_rows.begin(), interp.negative_rows.end());
    const auto sel = select_scoring_rows(index, 0, 9, used);
    CHECK(sel.positive_rows.size() == 40);
    CHECK(sel.negative_rows.size() == 160);
    CHECK(sel.imbalanced);
    CHECK_FALSE(sel.unscoreable);

    const auto few = ladder_index(30, 3);
    const auto all_used = as_set({0, 1, 2});
    const auto empty = select_scoring_rows(few, 0, 9, all_used);
    CHECK(empty.unscoreable);
    CHECK(empty.negative_rows.size() == 27);
  }

  TEST_CASE("scaled activation is zero exactly when the raw activation is") {
    Rng rng(11);
    for (int trial = 0; trial < 5000; ++trial) {
      const double max_a = uniform_real(rng, 1e-6, 100.0);
      const double a = trial % 5 == 0 ? 0.0 : uniform_real(rng, 0.0, 1.0) * max_a;
      const int s = scale_activation(a, max_a);
      CHECK((s == 0) == (a == 0.0));
      CHECK(s >= 0);
      CHECK(s <= 9);
      if (a > 0.0) CHECK(s == std::clamp(static_cast<int>(std::floor(10 * a / (max_a * (1 + 1e-6)))), 1, 9));
    }
    CHECK(scale_activation(5.0, 5.0) == 9);
    CHECK(scale_activation(1e-12, 5.0) == 1);
    CHECK(scale_activation(2.5, 5.0) == 4);
  }

  TEST_CASE("detection metrics match a brute-force count") {
    Rng rng(3);
    for (int trial = 0; trial < 200; ++trial) {
      const auto n = 1 + uniform_index(rng, 60);
      std::vector<int> labels;
      std::vector<std::optional<int>> preds;
      double tp = 0, fp = 0, fn = 0;
      for (std::uint64_t i = 0; i < n; ++i) {
        labels.push_back(static_cast<int>(uniform_index(rng, 2)));
        const auto p = uniform_index(rng, 3);
        preds.push_back(p == 2 ? std::nullopt : std::optional<int>(static_cast<int>(p)));
        if (!preds.back()) continue;
        tp += labels.back() && *preds.back();
        fp += !labels.back() && *preds.back();
        fn += labels.back() && !*preds.back();
      }
      const auto m = detection_metrics(labels, preds);
      const double p = tp + fp > 0 ? tp / (tp + fp) : 0.0, r = tp + fn > 0 ? tp / (tp + fn) : 0.0;
      CHECK(m.precision == doctest::Approx(p));
      CHECK(m.recall == doctest::Approx(r));
      CHECK(m.f1 == doctest::Approx(p + r > 0 ? 2 * p * r / (p + r) : 0.0));
      CHECK(m.tp + m.fp + m.fn + m.tn == static_cast<std::size_t>(std::count_if(preds.begin(), preds.end(), [](auto x) { return x.has_value(); })));
    }
    // Saying "yes" to everything on a balanced set.
    std::vector<int> labels(200, 0);
    std::fill(labels.begin(), labels.begin() + 100, 1);
    const auto m = detection_metrics(labels, std::vector<std::optional<int>>(200, 1));
    CHECK(m.precision == doctest::Approx(0.5));
    CHECK(m.recall == doctest::Approx(1.0));
    CHECK(m.f1 == doctest::Approx(2.0 / 3.0));
    CHECK_THROWS_AS(detection_metrics({1}, {}), ShapeError);
  }

  TEST_CASE("exemplar text: context, marked token, bounded continuation") {
    TempDir dir("saeinterp_exemplar");
    std::vector<TokenRecord> records{{"a", 0, "The", MessageType::Human, ContentType::Str, 0},
                                     {"a", 1, "<img>", MessageType::Human, ContentType::Image, 0},
                                     {"a", 2, " heart", MessageType::Assistant, ContentType::Str, 1},
                                     {"a", 3, " is", MessageType::Assistant, ContentType::Str, 1},
                                     {"a", 4, " normal", MessageType::Assistant, ContentType::Str, 1}};
    write_shard(dir.path / "a.sae", RowMatrix::Zero(5, 2), records);
    const auto store = ActivationStore::open(dir.path);

    const auto mid = make_exemplar(store, 2, 3.0, 6.0);
    CHECK(mid.render() == "The<image>[[ heart]] is normal");
    CHECK(mid.activation_scaled == 4);
    const auto img = make_exemplar(store, 1, 0.0, 6.0);
    CHECK(img.current_token == "<image>");
    CHECK(img.activation_scaled == 0);
    const auto last = make_exemplar(store, 4, 6.0, 6.0);
    CHECK(last.continuation.empty());
    CHECK(last.render() == "The<image> heart is[[ normal]]");

    ExemplarOptions opts;
    opts.continuation_chars = 4;
    CHECK(make_exemplar(store, 0, 1.0, 6.0, opts).continuation == "<ima");
    const std::unordered_map<std::string, std::string> descriptions{{"a", "frontal chest film"}};
    opts.image_descriptions = &descriptions;
    CHECK(make_exemplar(store, 0, 1.0, 6.0, opts).image_description == "frontal chest film");
  }

  TEST_CASE("continuation truncation counts code points, not bytes") {
    TempDir dir("saeinterp_utf8");
    std::vector<TokenRecord> records{{"u", 0, "x", MessageType::Human, ContentType::Str, 0},
                                     {"u", 1, "\xC3\xA9\xC3\xA9\xE2\x80\x94z", MessageType::Human, ContentType::Str, 0}};
    write_shard(dir.path / "u.sae", RowMatrix::Zero(2, 1), records);
    const auto store = ActivationStore::open(dir.path);
    ExemplarOptions opts;
    opts.continuation_chars = 3;
    CHECK(make_exemplar(store, 0, 1.0, 1.0, opts).continuation == "\xC3\xA9\xC3\xA9\xE2\x80\x94");
  }

  TEST_CASE("interpretation prompt layout") {
    TempDir dir("saeinterp_prompt");
    std::vector<TokenRecord> records{{"p", 0, "No", MessageType::Assistant, ContentType::Str, 0},
                                     {"p", 1, " effusion", MessageType::Assistant, ContentType::Str, 0},
                                     {"p", 2, ".", MessageType::Assistant, ContentType::Str, 0}};
    write_shard(dir.path / "p.sae", RowMatrix::Zero(3, 1), records);
    const auto store = ActivationStore::open(dir.path);
    const auto lib = library();
    const std::vector<Exemplar> ex{make_exemplar(store, 1, 2.0, 2.0), make_exemplar(store, 2, 0.0, 2.0)};
    const auto msgs = build_interpretation_prompt(lib, ex);
    REQUIRE(msgs.size() == 2 + 2 * lib.interpretation_fewshots.size());
    CHECK(msgs.front().role == "system");
    CHECK(msgs.front().content == lib.interpretation_system);
    for (std::size_t i = 1; i + 1 < msgs.size(); i += 2) {
      CHECK(msgs[i].role == "user");
      CHECK(msgs[i].content.rfind("Input:\n\nExample 1: ", 0) == 0);
      CHECK(msgs[i + 1].role == "assistant");
      const auto out = nlohmann::json::parse(msgs[i + 1].content);
      CHECK(out.contains("rationale"));
      CHECK(out.contains("explanation"));
    }
    CHECK(msgs.back().role == "user");
    CHECK(msgs.back().content ==
          "Input:\n\nExample 1: No[[ effusion]].\nActivation: 9\nExample 2: No effusion[[.]]\nActivation: 0\n");

    InterpretationSample with_image{"a [[b]]", 3, "lateral view"};
    CHECK(render_interpretation_samples({with_image}) ==
          "Example 1: <IMAGE_DESCRIPTION> lateral view </IMAGE_DESCRIPTION> a [[b]]\nActivation: 3\n");
  }

  TEST_CASE("exemplar order is seeded and covers both sides") {
    TempDir dir("saeinterp_order");
    const auto store = word_store(dir.path, 300);
    const auto index = ladder_index(300, 60);
    const auto a = select_interpretation_exemplars(index, store, 0, 4);
    const auto b = select_interpretation_exemplars(index, store, 0, 4);
    REQUIRE(a.size() == 50);
    CHECK(std::count_if(a.begin(), a.end(), [](const Exemplar& e) { return e.activation > 0; }) == 25);
    std::vector<std::uint64_t> ra, rb;
    for (const auto& e : a) ra.push_back(e.row);
    for (const auto& e : b) rb.push_back(e.row);
    CHECK(ra == rb);
    CHECK_FALSE(std::is_sorted(ra.begin(), ra.end()));
  }

  TEST_CASE("index build agrees with direct encoding") {
    TempDir dir("saeinterp_index");
    const auto store = word_store(dir.path, 120, 10, 6);
    const auto params = SaeParams::initialize(6, 24, Architecture::TopK, 3, {24}, 1.0 / 32, 2);
    std::vector<std::uint64_t> pool{5, 1, 77, 1, 119, 40, 41, 42, 0};
    const double norm = 0.7;
    const auto index = FeatureActivationIndex::build(params, store, pool, norm, 4);
    CHECK(index.pool() == std::vector<std::uint64_t>{0, 1, 5, 40, 41, 42, 77, 119});
    for (const auto row : index.pool()) {
      const std::vector<std::uint64_t> one{row};
      const RowMatrix x = store.gather(one) / norm;
      const auto code = encode(params, x)[0];
      // Products may round differently between batch shapes.
      for (std::uint32_t f = 0; f < 24; ++f) CHECK(index.activation(f, row) == doctest::Approx(code.value_of(f)).epsilon(1e-12));
    }
    for (std::uint32_t f = 0; f < 24; ++f) {
      const auto& r = index.ranked(f);
      for (std::size_t i = 1; i < r.size(); ++i) {
        CHECK((r[i - 1].value > r[i].value || (r[i - 1].value == r[i].value && r[i - 1].row < r[i].row)));
      }
      CHECK(index.zero_rows(f).size() + r.size() == index.pool().size());
    }
    CHECK_THROWS_AS(FeatureActivationIndex::build(SaeParams::initialize(5, 8, Architecture::TopK, 2, {8}, 0.0, 1), store,
                                                  pool, 1.0),
                    ShapeError);
    CHECK_THROWS_AS(index.ranked(24), ParameterError);
  }

  TEST_CASE("density, quantiles and the density histogram") {
    std::vector<std::uint64_t> pool(500000);
    for (std::size_t i = 0; i < pool.size(); ++i) pool[i] = i;
    std::vector<std::vector<ActivationEntry>> feats(3);
    for (std::uint64_t i = 0; i < 159; ++i) feats[0].push_back({i * 3000, 1.0 + static_cast<double>(i)});
    for (std::uint64_t i = 0; i < pool.size(); ++i) feats[1].push_back({i, 2.0});
    const FeatureActivationIndex index(pool, feats);
    CHECK(index.density(0) == doctest::Approx(3.18e-4));
    CHECK(index.density(1) == 1.0);
    CHECK(index.density(2) == 0.0);
    CHECK(index.max_activation(0) == 159.0);

    // values 1..159: type-7 quantile q is 1 + 158 q
    const auto q = positive_quantiles(index, 0, {0.0, 0.1, 0.5, 0.95, 1.0});
    REQUIRE(q.size() == 5);
    for (std::size_t i = 0; i < 5; ++i) CHECK(q[i] == doctest::Approx(1.0 + 158.0 * std::vector<double>{0, 0.1, 0.5, 0.95, 1}[i]));
    CHECK(positive_quantiles(index, 2, {0.5}).empty());

    const auto stats = feature_stats(index);
    REQUIRE(stats.size() == 3);
    CHECK(stats[0].deciles.size() == 9);
    CHECK(stats[0].active_rows == 159);
    const auto bins = density_histogram(stats);
    REQUIRE(bins.size() == 1 + 32);
    CHECK(bins[0].count == 1);
    CHECK(bins.back().count == 1);  // density 1.0 lands in the top bin
    const auto hit = std::find_if(bins.begin() + 1, bins.end(), [](const DensityBin& b) {
      return b.lower <= std::log10(3.18e-4) && std::log10(3.18e-4) < b.upper;
    });
    REQUIRE(hit != bins.end());
    CHECK(hit->count == 1);
    CHECK(hit->lower == doctest::Approx(-3.5));
    const auto csv = density_histogram_csv(bins);
    CHECK(csv.rfind("log10_density_lower,log10_density_upper,features\nzero,zero,1\n", 0) == 0);
    std::size_t total = 0;
    for (const auto& b : bins) total += b.count;
    CHECK(total == 3);
  }

  TEST_CASE("interpretability summary counts strict exceedances of scored features") {
    std::vector<FeatureInterpretation> items(6);
    const std::vector<std::optional<double>> f1s{0.9, 0.85, 0.5, 0.76, std::nullopt, 0.95};
    for (std::size_t i = 0; i < items.size(); ++i) {
      items[i].feature_id = static_cast<std::uint32_t>(i);
      items[i].f1 = f1s[i];
      if (!f1s[i]) items[i].status = InterpretationStatus::NoPositives;
    }
    items[5].status = InterpretationStatus::Failed;  // a stale score is ignored
    const auto s = summarize_interpretability(items);
    CHECK(s.features == 6);
    CHECK(s.scored == 4);
    CHECK(s.above == std::vector<std::pair<double, std::size_t>>{{0.5, 3}, {0.75, 3}, {0.85, 1}});
    CHECK(to_json(s)["f1_above"][0]["fraction_of_scored"] == 0.75);
  }

  TEST_CASE("interpretation records round-trip through json") {
    FeatureInterpretation f;
    f.feature_id = 12;
    f.explanation = "mentions of pleural effusion";
    f.rationale = "r";
    f.f1 = 0.8;
    f.precision = 0.75;
    f.recall = std::nullopt;
    f.n_pos = 100;
    f.n_neg = 100;
    f.abstentions = 2;
    const auto back = feature_interpretation_from_json(to_json(f));
    CHECK(to_json(back) == to_json(f));
    CHECK_FALSE(back.recall);
    CHECK_THROWS_AS(parse_interpretation_status("great"), FormatError);
    CHECK_THROWS_AS(feature_interpretation_from_json(nlohmann::json::object()), FormatError);
  }

  TEST_CASE("scoring through the mock client with abstentions") {
    nlohmann::json map;
    map["rules"] = nlohmann::json::array({{{"kind", "score"}, {"contains", "[[effusion]]"}, {"response", "[1]"}},
                                          {{"kind", "score"}, {"contains", "[[maybe]]"}, {"response", "[0, 1]"}},
                                          {{"kind", "score"}, {"contains", "[[bare]]"}, {"response", "1"}}});
    map["defaults"]["score"] = "[0]";
    auto mock = std::make_shared<MockTransport>(map);
    LlmClient client(mock, LlmClientConfig{});
    const std::vector<LabelledSample> samples{{0, "small [[effusion]]", 1}, {1, "[[effusion]] noted", 0},
                                              {2, "clear [[lungs]]", 1},    {3, "[[maybe]]", 1},
                                              {4, "normal [[heart]]", 0},   {5, "[[bare]] yes", 1}};
    const auto res = score_interpretation(client, library(), "pleural effusion", samples);
    CHECK(res.abstentions == 1);
    CHECK_FALSE(res.predictions[3]);
    CHECK(res.metrics.tp == 2);
    CHECK(res.metrics.fp == 1);
    CHECK(res.metrics.fn == 1);
    CHECK(res.metrics.tn == 1);
    CHECK(mock->calls() == 6);
  }

  TEST_CASE("interpret_feature end to end with the mock") {
    TempDir dir("saeinterp_interpret");
    const auto store = word_store(dir.path, 1000);
    const auto index = ladder_index(1000, 300);
    nlohmann::json map;
    map["defaults"]["interpret"] = R"({"rationale": "fires early", "explanation": "early words"})";
    map["defaults"]["score"] = "[1]";
    LlmClient client(std::make_shared<MockTransport>(map), LlmClientConfig{});
    const auto lib = library();
    const auto f = interpret_feature(index, store, client, lib, 0, 21);
    CHECK(f.status == InterpretationStatus::Ok);
    CHECK(f.explanation == "early words");
    CHECK(f.rationale == "fires early");
    CHECK(f.n_pos == 100);
    CHECK(f.n_neg == 100);
    REQUIRE(f.f1);
    CHECK(*f.f1 == doctest::Approx(2.0 / 3.0));
    CHECK(to_json(interpret_feature(index, store, client, lib, 0, 21)) == to_json(f));

    const auto silent = interpret_feature(ladder_index(1000, 0), store, client, lib, 0, 21);
    CHECK(silent.status == InterpretationStatus::NoPositives);

    nlohmann::json broken;
    broken["defaults"]["interpret"] = R"({"summary": "no explanation key"})";
    LlmClient bad(std::make_shared<MockTransport>(broken), LlmClientConfig{});
    const auto failed = interpret_feature(index, store, bad, lib, 0, 21);
    CHECK(failed.status == InterpretationStatus::Failed);
    CHECK_FALSE(failed.error.empty());
  }
}

TEST_SUITE("prompts") {
  TEST_CASE("prompt library loads every file") {
    const auto lib = library();
    CHECK(lib.interpretation_fewshots.size() == 6);
    CHECK(lib.scoring_fewshots.size() == 4);
    CHECK(lib.judge_positive.size() == 10);
    CHECK(lib.judge_negative.size() == 10);
    CHECK_FALSE(lib.interpretation_system.empty());
    CHECK(lib.interpretation_system.back() != '\n');
    CHECK_THROWS_AS(PromptLibrary::load(fs::temp_directory_path() / "saeinterp_no_prompts"), ConfigError);
  }

  TEST_CASE("scoring messages number samples from zero") {
    const auto lib = library();
    const auto msgs = build_scoring_messages(lib, "pleural effusion", "small [[effusion]]");
    REQUIRE(msgs.size() == 2 + 2 * lib.scoring_fewshots.size());
    CHECK(msgs.back().content == "Latent explanation: pleural effusion\n\nTest examples:\n\nExample 0: small [[effusion]]\n");
    for (std::size_t i = 2; i + 1 < msgs.size(); i += 2) {
      const auto labels = nlohmann::json::parse(msgs[i].content);
      CHECK(labels.is_array());
      for (const auto& l : labels) CHECK((l == 0 || l == 1));
    }
  }

  TEST_CASE("judge prompt substitutes the direction modifier") {
    const auto lib = library();
    const auto pos = build_judge_messages(lib, "orig", "mod", "cardiomegaly", SteeringDirection::Positive);
    const auto neg = build_judge_messages(lib, "orig", "mod", "cardiomegaly", SteeringDirection::Negative);
    CHECK(pos.front().content.find("{{MODIFIER}}") == std::string::npos);
    CHECK(pos.front().content.find("better represents") != std::string::npos);
    CHECK(neg.front().content.find("SUPPRESS") != std::string::npos);
    CHECK(pos.size() == 2 + 2 * lib.judge_positive.size());
    CHECK(pos.back().content == "Original report: orig\n\nModified report: mod\n\nConcept: cardiomegaly");
    CHECK(pos[1].content != neg[1].content);
    for (std::size_t i = 2; i + 1 < pos.size(); i += 2) {
      const auto out = nlohmann::json::parse(pos[i].content);
      CHECK(out.size() == 4);
    }
  }
}
