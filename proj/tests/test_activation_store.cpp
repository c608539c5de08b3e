// Copyright (c) 2026 The saeinterp Authors
// SPDX-License-Identifier: Apache-2.0

#include <cmath>
#include <filesystem>
#include <fstream>
#include <iterator>
#include <set>
#include <string>
#include <vector>

#include "doctest.h"
#include "oracles.hpp"
#include "saeinterp/activation_store.hpp"
#include "saeinterp/errors.hpp"

using namespace saeinterp;
namespace fs = std::filesystem;

namespace {

FilterTemplate findings_template() {
  return FilterTemplate::load(fs::path(SAEINTERP_DATA_DIR) / "templates" / "findings_generation.json");
}

nlohmann::json load_fixture(const std::string& name) {
  std::ifstream in(fs::path(SAEINTERP_FIXTURES_DIR) / name);
  REQUIRE(in);
  return nlohmann::json::parse(in);
}

TokenSequence seq_of(const std::vector<std::string>& texts, std::size_t assistant_from = SIZE_MAX) {
  TokenSequence s{"s", {}};
  for (std::size_t i = 0; i < texts.size(); ++i) {
    s.tokens.push_back({texts[i], false, i >= assistant_from ? MessageType::Assistant : MessageType::Human});
  }
  return s;
}

std::string bytes_of(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  return {std::istreambuf_iterator<char>(in), {}};
}

struct TempDir {
  fs::path path;
  explicit TempDir(const std::string& name) : path(fs::temp_directory_path() / name) {
    fs::remove_all(path);
    fs::create_directories(path);
  }
  ~TempDir() { fs::remove_all(path); }
};

std::vector<TokenRecord> records_for(std::size_t rows, const std::string& seq) {
  std::vector<TokenRecord> out;
  for (std::size_t i = 0; i < rows; ++i) {
    out.push_back({seq, i, "_t" + std::to_string(i), i % 3 ? MessageType::Human : MessageType::Assistant,
                   ContentType::Str, static_cast<std::uint32_t>(i / 2)});
  }
  return out;
}

}  // namespace

TEST_SUITE("activation_store") {
  TEST_CASE("worked report sequence filters to the published span structure") {
    const auto seq = token_sequence_from_json(load_fixture("report_sequence.json"));
    const auto expected = load_fixture("report_sequence_expected.json");
    REQUIRE(seq.tokens.size() == expected.at("total_tokens").get<std::size_t>());

    const auto result = filter_tokens(seq, findings_template());
    const auto& spans = expected.at("spans");
    REQUIRE(result.spans.size() == spans.size());
    for (std::size_t i = 0; i < spans.size(); ++i) {
      CAPTURE(i);
      CHECK(to_json(result.spans[i]) == spans[i]);
    }
    std::size_t images = 0;
    for (const auto& r : result.records) images += r.content_type == ContentType::Image;
    CHECK(images == 3);
    CHECK(result.kept.size() == result.records.size());
  }

  TEST_CASE("records carry provenance and ascending span ids") {
    const auto seq = token_sequence_from_json(load_fixture("report_sequence.json"));
    const auto result = filter_tokens(seq, findings_template());
    for (std::size_t i = 0; i < result.records.size(); ++i) {
      const auto& r = result.records[i];
      CHECK(r.sequence_id == "report_sequence");
      CHECK(r.token_index == result.kept[i]);
      CHECK(r.token_text == seq.tokens[r.token_index].text);
      if (i > 0) {
        CHECK(r.token_index > result.records[i - 1].token_index);
        CHECK(r.span_id >= result.records[i - 1].span_id);
      }
      const auto& span = result.spans[r.span_id];
      CHECK(r.token_index >= span.start);
      CHECK(r.token_index < span.end);
    }
  }

  TEST_CASE("an all-boilerplate sequence filters to nothing") {
    const auto t = findings_template();
    CHECK(filter_tokens(seq_of({"_", "_A", "SS", "IST", "ANT", ":"}), t).kept.empty());
    CHECK(filter_tokens(seq_of({"<s>"}), t).kept.empty());
  }

  TEST_CASE("only the last token of an image run survives") {
    FilterTemplate t;
    t.image_token_literals = {"<image>"};
    const auto r = filter_tokens(seq_of({"_a", "<image>", "<image>", "<image>", "<image>", "<image>", "_b"}), t);
    CHECK(r.kept == std::vector<std::uint64_t>{0, 5, 6});
    REQUIRE(r.spans.size() == 3);
    CHECK(r.spans[1].content_type == ContentType::Image);

    // Adjacent images with different placeholders keep one token each.
    t.image_token_literals.insert("<lat_image>");
    const auto two = filter_tokens(seq_of({"<image>", "<image>", "<lat_image>", "<lat_image>"}), t);
    CHECK(two.kept == std::vector<std::uint64_t>{1, 3});
  }

  TEST_CASE("missing required segment is a template mismatch naming it") {
    const auto t = findings_template();
    auto seq = seq_of({"<s>", "_", "_US", "ER", ":", "_hello", "_", "_A", "SS", "IST", "ANT", ":", "_world"}, 12);
    try {
      filter_tokens(seq, t);
      FAIL("expected TemplateMismatchError");
    } catch (const TemplateMismatchError& e) {
      CHECK(std::string(e.what()).find("system-prompt") != std::string::npos);
    }
  }

  TEST_CASE("spans split on message type and section headers") {
    FilterTemplate t;
    t.section_markers = {{"_IN", "D", "ICATION", ":"}};
    const auto r = filter_tokens(seq_of({"_x", "_IN", "D", "ICATION", ":", "_y", "_z"}, 6), t);
    REQUIRE(r.spans.size() == 3);
    CHECK(r.spans[0].tokens == std::vector<std::string>{"_x"});
    CHECK(r.spans[1].start == 1);
    CHECK(r.spans[1].end == 6);
    CHECK(r.spans[2].message_type == MessageType::Assistant);
  }

  TEST_CASE("refiltering filtered output without segments is the identity") {
    const auto full = findings_template();
    const auto seq = token_sequence_from_json(load_fixture("report_sequence.json"));
    const auto once = filter_tokens(seq, full);

    TokenSequence again{seq.sequence_id, {}};
    for (const auto idx : once.kept) again.tokens.push_back(seq.tokens[idx]);
    FilterTemplate bare = full;
    bare.fixed_segments.clear();
    const auto twice = filter_tokens(again, bare);
    REQUIRE(twice.kept.size() == again.tokens.size());
    for (std::size_t i = 0; i < twice.kept.size(); ++i) CHECK(twice.kept[i] == i);
  }

  TEST_CASE("template validation") {
    CHECK_THROWS_AS(FilterTemplate::from_json(nlohmann::json::parse(
                        R"({"fixed_segments": [{"name": "x", "tokens": []}], "image_token_literals": []})")),
                    ConfigError);
    CHECK_THROWS_AS(FilterTemplate::from_json(nlohmann::json::parse(R"({"image_token_literals": []})")), ConfigError);
    CHECK_THROWS_AS(FilterTemplate::load("/nonexistent/template.json"), ConfigError);
  }

  TEST_CASE("shard round trip is exact") {
    TempDir dir("saeinterp_shard_rt");
    Rng rng(1);
    RowMatrix rows = oracle::random_matrix(3, 4, rng);
    rows = rows.cast<float>().cast<double>();  // representable in f32
    const auto records = records_for(3, "seq");
    const auto path = dir.path / "a.sae";
    write_shard(path, rows, records);
    const auto shard = read_shard(path);
    CHECK(shard.rows == rows);
    CHECK(shard.records == records);
    CHECK(fs::file_size(path) == kShardHeaderBytes + 3 * 4 * 4);

    const auto copy = dir.path / "b.sae";
    write_shard(copy, shard.rows, shard.records);
    CHECK(bytes_of(copy) == bytes_of(path));
    CHECK(bytes_of(sidecar_path(copy)) == bytes_of(sidecar_path(path)));
  }

  TEST_CASE("empty shard is valid") {
    TempDir dir("saeinterp_shard_empty");
    const auto path = dir.path / "e.sae";
    write_shard(path, RowMatrix(0, 5), {});
    const auto shard = read_shard(path);
    CHECK(shard.rows.rows() == 0);
    CHECK(shard.rows.cols() == 5);
    CHECK(shard.records.empty());
  }

  TEST_CASE("corrupt shards are rejected") {
    TempDir dir("saeinterp_shard_bad");
    Rng rng(2);
    const auto path = dir.path / "a.sae";
    write_shard(path, oracle::random_matrix(3, 4, rng), records_for(3, "s"));
    const auto good = bytes_of(path);

    auto rewrite = [&](const std::string& bytes) {
      std::ofstream out(path, std::ios::binary | std::ios::trunc);
      out << bytes;
    };
    rewrite(good.substr(0, good.size() - 1));
    CHECK_THROWS_WITH_AS(read_shard(path), doctest::Contains("truncated"), FormatError);
    rewrite(good + "x");
    CHECK_THROWS_WITH_AS(read_shard(path), doctest::Contains("trailing"), FormatError);
    rewrite("SAEACT02" + good.substr(8));
    CHECK_THROWS_WITH_AS(read_shard(path), doctest::Contains("magic"), FormatError);

    // A header claiming 2^40 rows must fail before any allocation.
    std::string huge = good;
    huge[12 + 5] = 1;
    rewrite(huge);
    CHECK_THROWS_AS(read_shard_rows(path), FormatError);

    rewrite(good);
    {
      std::ofstream meta(sidecar_path(path), std::ios::app);
      meta << to_json(records_for(1, "s")[0]).dump() << '\n';
    }
    CHECK_THROWS_WITH_AS(read_shard(path), doctest::Contains("sidecar"), FormatError);
    CHECK_THROWS_AS(write_shard(path, oracle::random_matrix(2, 4, rng), records_for(3, "s")), FormatError);

    RowMatrix nan_rows = oracle::random_matrix(2, 4, rng);
    nan_rows(1, 1) = std::nan("");
    CHECK_THROWS_AS(write_shard(path, nan_rows, records_for(2, "s")), DataError);
  }

  TEST_CASE("store addresses rows across shards") {
    TempDir dir("saeinterp_store");
    Rng rng(3);
    RowMatrix all = oracle::random_matrix(10, 6, rng).cast<float>().cast<double>();
    auto rec = records_for(10, "q");
    write_shard(dir.path / "00.sae", all.topRows(4), {rec.begin(), rec.begin() + 4});
    write_shard(dir.path / "01.sae", all.bottomRows(6), {rec.begin() + 4, rec.end()});
    const auto store = ActivationStore::open(dir.path);
    CHECK(store.row_count() == 10);
    CHECK(store.dim() == 6);

    RowMatrix mid(5, 6);
    store.read_range(2, mid);
    CHECK(mid == all.middleRows(2, 5));
    const std::vector<std::uint64_t> ids{9, 0, 4, 3};
    const auto g = store.gather(ids);
    for (std::size_t i = 0; i < ids.size(); ++i) CHECK(g.row(static_cast<Eigen::Index>(i)) == all.row(static_cast<Eigen::Index>(ids[i])));
    CHECK(store.sequence_rows("q").size() == 10);
    CHECK_THROWS_AS(store.sequence_rows("nope"), DataError);

    ShardSource plain(store);
    RowMatrix batch(7, 6);
    CHECK(plain.read(batch) == 7);
    CHECK(batch == all.topRows(7));
    CHECK(plain.read(batch) == 3);

    ShardSource shuffled(store, true, 5);
    std::multiset<double> seen;
    RowMatrix one(10, 6);
    CHECK(shuffled.read(one) == 10);
    for (Eigen::Index r = 0; r < 10; ++r) seen.insert(one(r, 0));
    std::multiset<double> expect;
    for (Eigen::Index r = 0; r < 10; ++r) expect.insert(all(r, 0));
    CHECK(seen == expect);
  }

  TEST_CASE("sampling rows") {
    TempDir dir("saeinterp_sample");
    Rng rng(4);
    write_shard(dir.path / "a.sae", oracle::random_matrix(10, 2, rng), records_for(10, "s"));
    const auto store = ActivationStore::open(dir.path);

    const auto all = sample_rows(store, 10, 7);
    std::set<std::uint64_t> distinct;
    for (const auto& s : all) distinct.insert(s.row);
    CHECK(distinct.size() == 10);

    const auto a = sample_rows(store, 4, 99);
    const auto b = sample_rows(store, 4, 99);
    for (std::size_t i = 0; i < 4; ++i) CHECK(a[i].row == b[i].row);

    const auto assistant = [](const TokenRecord& r) { return r.message_type == MessageType::Assistant; };
    for (const auto& s : sample_rows(store, 4, 1, assistant)) CHECK(s.record->message_type == MessageType::Assistant);
    CHECK_THROWS_WITH_AS(sample_rows(store, 5, 1, assistant), doctest::Contains("only 4"), DataError);

    // Binomial oracle: 10,000 single draws over 10 rows, each count within 3 sigma of 1000.
    std::vector<int> counts(10, 0);
    for (std::uint64_t s = 0; s < 10000; ++s) ++counts[sample_rows(store, 1, s)[0].row];
    const double sigma = std::sqrt(10000 * 0.1 * 0.9);
    for (const int c : counts) CHECK(std::abs(c - 1000) < 3 * sigma);
  }
}
