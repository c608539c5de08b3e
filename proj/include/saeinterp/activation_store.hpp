// Copyright (c) 2026 The saeinterp Authors
// SPDX-License-Identifier: Apache-2.0
//
// On-disk activation shards, their JSON-lines token sidecars, boilerplate
// filtering of token sequences, and random-access sampling over a store.

#pragma once

#include <cstdint>
#include <filesystem>
#include <functional>
#include <set>
#include <span>
#include <string>
#include <string_view>
#include <unordered_map>
#include <vector>

#include "json.hpp"
#include "saeinterp/activation_source.hpp"
#include "saeinterp/rng.hpp"

namespace saeinterp {

enum class MessageType : std::uint8_t { Human, Assistant };
enum class ContentType : std::uint8_t { Str, Image };

std::string_view to_string(MessageType t);
std::string_view to_string(ContentType t);
MessageType parse_message_type(std::string_view s);
ContentType parse_content_type(std::string_view s);

struct TokenRecord {
  std::string sequence_id;
  std::uint64_t token_index = 0;
  std::string token_text;
  MessageType message_type = MessageType::Human;
  ContentType content_type = ContentType::Str;
  std::uint32_t span_id = 0;

  bool operator==(const TokenRecord&) const = default;
};

nlohmann::json to_json(const TokenRecord& r);
TokenRecord token_record_from_json(const nlohmann::json& j);

struct TemplateSegment {
  std::string name;
  std::vector<std::string> tokens;
  bool required = false;
};

struct FilterTemplate {
  std::string name;
  std::vector<TemplateSegment> fixed_segments;
  std::set<std::string> image_token_literals;
  /// Token sequences that open a new kept span (report section headers).
  std::vector<std::vector<std::string>> section_markers;

  void validate() const;
  static FilterTemplate from_json(const nlohmann::json& j);
  static FilterTemplate load(const std::filesystem::path& path);
};

struct InputToken {
  std::string text;
  bool is_image = false;
  MessageType message_type = MessageType::Human;
};

struct TokenSequence {
  std::string sequence_id;
  std::vector<InputToken> tokens;
};

/// Accepts {sequence_id, tokens, is_image?, message_type? | assistant_start?}.
/// message_type may be a per-token array or absent, in which case tokens from
/// `assistant_start` onwards (default: none) are assistant tokens.
TokenSequence token_sequence_from_json(const nlohmann::json& j);

struct KeptSpan {
  std::uint64_t start = 0;  // original index of the first kept token
  std::uint64_t end = 0;    // one past the last
  MessageType message_type = MessageType::Human;
  ContentType content_type = ContentType::Str;
  std::vector<std::string> tokens;
};

nlohmann::json to_json(const KeptSpan& s);

struct FilterResult {
  std::vector<std::uint64_t> kept;
  std::vector<TokenRecord> records;
  std::vector<KeptSpan> spans;
};

/// Drops template boilerplate (longest segment first), keeps only the last
/// token of each run of identical image placeholders, and groups the rest
/// into contiguous spans. Throws TemplateMismatchError when the sequence has
/// content but a required segment never occurs.
FilterResult filter_tokens(const TokenSequence& seq, const FilterTemplate& tmpl);

// ---------------------------------------------------------------------------
// Shards: "SAEACT01", u32 n, u64 row_count, u8 dtype (0 = f32), then rows
// row-major little-endian. The sidecar lives at `<shard>.meta.jsonl`.

inline constexpr std::string_view kShardMagic = "SAEACT01";
inline constexpr std::uint64_t kShardHeaderBytes = 8 + 4 + 8 + 1;

struct ShardHeader {
  std::uint32_t n = 0;
  std::uint64_t row_count = 0;
};

struct ActivationShard {
  RowMatrix rows;
  std::vector<TokenRecord> records;
};

std::filesystem::path sidecar_path(const std::filesystem::path& shard);

/// Writes the shard and its sidecar, each atomically. write_shard_rows omits
/// the sidecar (raw dumps awaiting filtering).
void write_shard(const std::filesystem::path& path, const RowMatrix& rows, const std::vector<TokenRecord>& sidecar);
void write_shard_rows(const std::filesystem::path& path, const RowMatrix& rows);

ShardHeader read_shard_header(const std::filesystem::path& path);
RowMatrix read_shard_rows(const std::filesystem::path& path);
ActivationShard read_shard(const std::filesystem::path& path);
std::vector<TokenRecord> read_sidecar(const std::filesystem::path& path);

/// A directory of shards (all `*.sae` files, in name order) addressed by a
/// single global row index. Metadata is held in memory; rows are read on demand.
class ActivationStore {
 public:
  struct ShardInfo {
    std::filesystem::path path;
    std::uint64_t first_row = 0;
    std::uint64_t rows = 0;
  };

  static ActivationStore open(const std::filesystem::path& dir);

  std::size_t dim() const { return dim_; }
  std::uint64_t row_count() const { return records_.size(); }
  const std::vector<ShardInfo>& shards() const { return shards_; }
  const std::vector<TokenRecord>& records() const { return records_; }
  const TokenRecord& record(std::uint64_t row) const;

  /// Contiguous global rows [begin, begin + out.rows()); may cross shards.
  void read_range(std::uint64_t begin, RowMatrix& out) const;
  RowMatrix gather(std::span<const std::uint64_t> rows) const;

  /// Sequence ids in order of first appearance, and each sequence's rows in
  /// token order.
  const std::vector<std::string>& sequence_ids() const { return sequence_order_; }
  const std::vector<std::uint64_t>& sequence_rows(const std::string& id) const;

 private:
  std::size_t dim_ = 0;
  std::vector<ShardInfo> shards_;
  std::vector<TokenRecord> records_;
  std::vector<std::string> sequence_order_;
  std::unordered_map<std::string, std::vector<std::uint64_t>> sequences_;
};

/// Streams a store shard by shard; with `shuffle` the shard order is
/// permuted per epoch from `seed`.
class ShardSource final : public ActivationSource {
 public:
  ShardSource(const ActivationStore& store, bool shuffle = false, std::uint64_t seed = 0);

  std::size_t dim() const override { return store_.dim(); }
  std::uint64_t row_count() const override { return store_.row_count(); }
  void rewind(std::uint64_t epoch) override;
  std::size_t read(RowMatrix& out) override;

 private:
  const ActivationStore& store_;
  bool shuffle_;
  std::uint64_t seed_;
  std::vector<std::size_t> order_;
  std::size_t shard_pos_ = 0;
  std::uint64_t row_pos_ = 0;
};

struct SampledRow {
  std::uint64_t row = 0;
  const TokenRecord* record = nullptr;
};

/// `count` rows drawn uniformly without replacement among those satisfying
/// `predicate`, in draw order. Throws DataError when too few rows match.
std::vector<SampledRow> sample_rows(const ActivationStore& store, std::size_t count, std::uint64_t seed,
                                    const std::function<bool(const TokenRecord&)>& predicate = {});

}  // namespace saeinterp
