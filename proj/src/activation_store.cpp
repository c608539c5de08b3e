// Copyright (c) 2026 The saeinterp Authors
// SPDX-License-Identifier: Apache-2.0

#include "saeinterp/activation_store.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>

#include "saeinterp/binary_io.hpp"
#include "saeinterp/errors.hpp"

namespace saeinterp {

namespace fs = std::filesystem;

namespace {

constexpr std::uint8_t kDtypeF32 = 0;
constexpr std::uint32_t kMaxShardDim = 1u << 24;

bool matches_at(const std::vector<InputToken>& tokens, std::size_t i, const std::vector<std::string>& pattern,
                const std::set<std::string>& image_literals) {
  if (i + pattern.size() > tokens.size()) return false;
  for (std::size_t j = 0; j < pattern.size(); ++j) {
    const auto& t = tokens[i + j];
    if (t.is_image || image_literals.count(t.text) || t.text != pattern[j]) return false;
  }
  return true;
}

void write_rows(std::ostream& out, const RowMatrix& rows) {
  for (Eigen::Index r = 0; r < rows.rows(); ++r)
    for (Eigen::Index c = 0; c < rows.cols(); ++c) binary::put_f32(out, static_cast<float>(rows(r, c)));
}

void check_rows(const RowMatrix& rows, const fs::path& path) {
  if (rows.cols() == 0 || static_cast<std::uint64_t>(rows.cols()) > kMaxShardDim) {
    throw ShapeError("shard " + path.string() + ": row width " + std::to_string(rows.cols()) + " out of range");
  }
  if (!rows.allFinite()) throw DataError("shard " + path.string() + ": rows contain non-finite values");
}

void write_header(std::ostream& out, std::uint32_t n, std::uint64_t rows) {
  out.write(kShardMagic.data(), static_cast<std::streamsize>(kShardMagic.size()));
  binary::put_uint<std::uint32_t>(out, n);
  binary::put_uint<std::uint64_t>(out, rows);
  binary::put_uint<std::uint8_t>(out, kDtypeF32);
}

// Opens the shard, validates the header and that the file is exactly as
// long as the header says. Leaves the stream positioned at the first row.
ShardHeader open_shard(std::ifstream& in, const fs::path& path) {
  in.open(path, std::ios::binary);
  if (!in) throw DataError("cannot open shard " + path.string());
  try {
    binary::expect_magic(in, kShardMagic);
    ShardHeader h;
    h.n = binary::get_uint<std::uint32_t>(in, "n");
    h.row_count = binary::get_uint<std::uint64_t>(in, "row_count");
    const auto dtype = binary::get_uint<std::uint8_t>(in, "dtype");
    if (dtype != kDtypeF32) throw FormatError("unsupported dtype code " + std::to_string(dtype));
    if (h.n == 0 || h.n > kMaxShardDim) throw FormatError("implausible row width " + std::to_string(h.n));
    const auto size = fs::file_size(path);
    const auto body = size - kShardHeaderBytes;
    if (h.row_count > body / (4ull * h.n) || body != h.row_count * 4ull * h.n) {
      const bool short_file = h.row_count > body / (4ull * h.n) || body < h.row_count * 4ull * h.n;
      throw FormatError(std::string(short_file ? "truncated body" : "trailing bytes") + ": header declares " +
                        std::to_string(h.row_count) + " rows of " + std::to_string(h.n) + ", file body has " +
                        std::to_string(body) + " bytes");
    }
    return h;
  } catch (const FormatError& e) {
    throw FormatError("shard " + path.string() + ": " + e.what());
  }
}

void read_rows(std::istream& in, RowMatrix& out, Eigen::Index first, Eigen::Index count, const fs::path& path) {
  std::vector<std::uint32_t> buf(static_cast<std::size_t>(out.cols()));
  for (Eigen::Index r = first; r < first + count; ++r) {
    if (!in.read(reinterpret_cast<char*>(buf.data()), static_cast<std::streamsize>(buf.size() * 4))) {
      throw FormatError("shard " + path.string() + ": truncated while reading rows");
    }
    for (Eigen::Index c = 0; c < out.cols(); ++c) {
      const auto* b = reinterpret_cast<const unsigned char*>(&buf[static_cast<std::size_t>(c)]);
      const std::uint32_t bits = std::uint32_t{b[0]} | std::uint32_t{b[1]} << 8 | std::uint32_t{b[2]} << 16 |
                                 std::uint32_t{b[3]} << 24;
      const double v = std::bit_cast<float>(bits);
      if (!std::isfinite(v)) throw FormatError("shard " + path.string() + ": non-finite value in row " + std::to_string(r));
      out(r, c) = v;
    }
  }
}

}  // namespace

std::string_view to_string(MessageType t) { return t == MessageType::Human ? "human" : "assistant"; }
std::string_view to_string(ContentType t) { return t == ContentType::Str ? "str" : "image"; }

MessageType parse_message_type(std::string_view s) {
  if (s == "human") return MessageType::Human;
  if (s == "assistant") return MessageType::Assistant;
  throw FormatError("unknown message type '" + std::string(s) + "'");
}

ContentType parse_content_type(std::string_view s) {
  if (s == "str") return ContentType::Str;
  if (s == "image") return ContentType::Image;
  throw FormatError("unknown content type '" + std::string(s) + "'");
}

nlohmann::json to_json(const TokenRecord& r) {
  return nlohmann::json{{"sequence_id", r.sequence_id},
                        {"token_index", r.token_index},
                        {"token_text", r.token_text},
                        {"message_type", to_string(r.message_type)},
                        {"content_type", to_string(r.content_type)},
                        {"span_id", r.span_id}};
}

TokenRecord token_record_from_json(const nlohmann::json& j) {
  try {
    TokenRecord r;
    r.sequence_id = j.at("sequence_id").get<std::string>();
    r.token_index = j.at("token_index").get<std::uint64_t>();
    r.token_text = j.at("token_text").get<std::string>();
    r.message_type = parse_message_type(j.at("message_type").get<std::string>());
    r.content_type = parse_content_type(j.at("content_type").get<std::string>());
    r.span_id = j.at("span_id").get<std::uint32_t>();
    return r;
  } catch (const nlohmann::json::exception& e) {
    throw FormatError(std::string("bad token record: ") + e.what());
  }
}

nlohmann::json to_json(const KeptSpan& s) {
  return nlohmann::json{{"start", s.start},
                        {"end", s.end},
                        {"message_type", to_string(s.message_type)},
                        {"content_type", to_string(s.content_type)},
                        {"tokens", s.tokens}};
}

void FilterTemplate::validate() const {
  for (const auto& seg : fixed_segments) {
    if (seg.tokens.empty()) throw ConfigError("template segment '" + seg.name + "' is empty");
  }
  for (const auto& marker : section_markers) {
    if (marker.empty()) throw ConfigError("template has an empty section marker");
  }
}

FilterTemplate FilterTemplate::from_json(const nlohmann::json& j) {
  try {
    FilterTemplate t;
    t.name = j.value("name", "");
    for (const auto& s : j.at("fixed_segments")) {
      t.fixed_segments.push_back(
          {s.at("name").get<std::string>(), s.at("tokens").get<std::vector<std::string>>(), s.value("required", false)});
    }
    for (const auto& lit : j.value("image_token_literals", nlohmann::json::array())) {
      t.image_token_literals.insert(lit.get<std::string>());
    }
    for (const auto& m : j.value("section_markers", nlohmann::json::array())) {
      t.section_markers.push_back(m.get<std::vector<std::string>>());
    }
    t.validate();
    return t;
  } catch (const nlohmann::json::exception& e) {
    throw ConfigError(std::string("bad filter template: ") + e.what());
  }
}

FilterTemplate FilterTemplate::load(const fs::path& path) {
  std::ifstream in(path);
  if (!in) throw ConfigError("cannot open filter template " + path.string());
  try {
    return from_json(nlohmann::json::parse(in));
  } catch (const nlohmann::json::parse_error& e) {
    throw ConfigError("filter template " + path.string() + ": " + e.what());
  }
}

TokenSequence token_sequence_from_json(const nlohmann::json& j) {
  try {
    TokenSequence seq;
    seq.sequence_id = j.at("sequence_id").get<std::string>();
    const auto texts = j.at("tokens").get<std::vector<std::string>>();
    seq.tokens.resize(texts.size());
    const auto is_image = j.value("is_image", std::vector<bool>{});
    const auto types = j.value("message_type", std::vector<std::string>{});
    const auto assistant_start = j.value("assistant_start", static_cast<std::uint64_t>(texts.size()));
    if (!is_image.empty() && is_image.size() != texts.size()) throw FormatError("is_image length mismatch");
    if (!types.empty() && types.size() != texts.size()) throw FormatError("message_type length mismatch");
    for (std::size_t i = 0; i < texts.size(); ++i) {
      auto& t = seq.tokens[i];
      t.text = texts[i];
      t.is_image = !is_image.empty() && is_image[i];
      t.message_type = !types.empty() ? parse_message_type(types[i])
                                      : (i >= assistant_start ? MessageType::Assistant : MessageType::Human);
    }
    return seq;
  } catch (const nlohmann::json::exception& e) {
    throw FormatError(std::string("bad token sequence: ") + e.what());
  }
}

FilterResult filter_tokens(const TokenSequence& seq, const FilterTemplate& tmpl) {
  // Longest segments first so e.g. the with-prior instruction wins over its prefix.
  std::vector<const TemplateSegment*> segments;
  for (const auto& s : tmpl.fixed_segments) segments.push_back(&s);
  std::stable_sort(segments.begin(), segments.end(),
                   [](const auto* a, const auto* b) { return a->tokens.size() > b->tokens.size(); });

  const auto& toks = seq.tokens;
  auto is_image = [&](std::size_t i) { return toks[i].is_image || tmpl.image_token_literals.count(toks[i].text) > 0; };

  FilterResult out;
  std::set<std::string> seen;
  std::size_t i = 0;
  auto keep = [&](std::size_t idx, ContentType ct) {
    const bool marker = ct == ContentType::Str &&
                        std::any_of(tmpl.section_markers.begin(), tmpl.section_markers.end(), [&](const auto& m) {
                          return matches_at(toks, idx, m, tmpl.image_token_literals);
                        });
    const bool fresh = out.spans.empty() || out.spans.back().end != idx ||
                       out.spans.back().message_type != toks[idx].message_type ||
                       out.spans.back().content_type != ct || marker;
    if (fresh) out.spans.push_back({idx, idx, toks[idx].message_type, ct, {}});
    auto& span = out.spans.back();
    span.end = idx + 1;
    span.tokens.push_back(toks[idx].text);
    out.kept.push_back(idx);
    out.records.push_back({seq.sequence_id, idx, toks[idx].text, toks[idx].message_type, ct,
                           static_cast<std::uint32_t>(out.spans.size() - 1)});
  };

  while (i < toks.size()) {
    if (is_image(i)) {
      // One placeholder per image: a run ends where the literal changes.
      std::size_t j = i;
      while (j + 1 < toks.size() && is_image(j + 1) && toks[j + 1].text == toks[i].text) ++j;
      keep(j, ContentType::Image);
      i = j + 1;
      continue;
    }
    const TemplateSegment* hit = nullptr;
    for (const auto* s : segments) {
      if (matches_at(toks, i, s->tokens, tmpl.image_token_literals)) {
        hit = s;
        break;
      }
    }
    if (hit) {
      seen.insert(hit->name);
      i += hit->tokens.size();
      continue;
    }
    keep(i, ContentType::Str);
    ++i;
  }

  if (!out.kept.empty()) {
    for (const auto& s : tmpl.fixed_segments) {
      if (s.required && !seen.count(s.name)) {
        throw TemplateMismatchError("sequence '" + seq.sequence_id + "': required template segment '" + s.name +
                                    "' not found");
      }
    }
  }
  return out;
}

fs::path sidecar_path(const fs::path& shard) {
  auto p = shard;
  p += ".meta.jsonl";
  return p;
}

void write_shard_rows(const fs::path& path, const RowMatrix& rows) {
  check_rows(rows, path);
  binary::write_atomically(path, [&](std::ostream& out) {
    write_header(out, static_cast<std::uint32_t>(rows.cols()), static_cast<std::uint64_t>(rows.rows()));
    write_rows(out, rows);
  });
}

void write_shard(const fs::path& path, const RowMatrix& rows, const std::vector<TokenRecord>& sidecar) {
  if (sidecar.size() != static_cast<std::size_t>(rows.rows())) {
    throw FormatError("shard " + path.string() + ": sidecar has " + std::to_string(sidecar.size()) +
                      " records for " + std::to_string(rows.rows()) + " rows");
  }
  write_shard_rows(path, rows);
  binary::write_atomically(sidecar_path(path), [&](std::ostream& out) {
    for (const auto& r : sidecar) out << to_json(r).dump() << '\n';
  });
}

ShardHeader read_shard_header(const fs::path& path) {
  std::ifstream in;
  return open_shard(in, path);
}

RowMatrix read_shard_rows(const fs::path& path) {
  std::ifstream in;
  const auto h = open_shard(in, path);
  RowMatrix rows(static_cast<Eigen::Index>(h.row_count), static_cast<Eigen::Index>(h.n));
  read_rows(in, rows, 0, rows.rows(), path);
  return rows;
}

std::vector<TokenRecord> read_sidecar(const fs::path& path) {
  const auto meta = sidecar_path(path);
  std::ifstream in(meta);
  if (!in) throw FormatError("missing sidecar " + meta.string());
  std::vector<TokenRecord> records;
  std::size_t line_no = 0;
  for (std::string line; std::getline(in, line);) {
    ++line_no;
    if (line.empty()) continue;
    try {
      records.push_back(token_record_from_json(nlohmann::json::parse(line)));
    } catch (const nlohmann::json::exception& e) {
      throw FormatError(meta.string() + ":" + std::to_string(line_no) + ": " + e.what());
    }
  }
  return records;
}

ActivationShard read_shard(const fs::path& path) {
  ActivationShard shard;
  const auto h = read_shard_header(path);
  shard.records = read_sidecar(path);
  if (shard.records.size() != h.row_count) {
    throw FormatError("shard " + path.string() + ": sidecar has " + std::to_string(shard.records.size()) +
                      " records for " + std::to_string(h.row_count) + " rows");
  }
  shard.rows = read_shard_rows(path);
  return shard;
}

ActivationStore ActivationStore::open(const fs::path& dir) {
  if (!fs::is_directory(dir)) throw DataError("activation store " + dir.string() + " is not a directory");
  std::vector<fs::path> paths;
  for (const auto& entry : fs::directory_iterator(dir)) {
    if (entry.is_regular_file() && entry.path().extension() == ".sae") paths.push_back(entry.path());
  }
  std::sort(paths.begin(), paths.end());
  if (paths.empty()) throw DataError("activation store " + dir.string() + " contains no .sae shards");

  ActivationStore store;
  for (const auto& p : paths) {
    const auto h = read_shard_header(p);
    if (store.dim_ == 0) store.dim_ = h.n;
    if (h.n != store.dim_) {
      throw DataError("shard " + p.string() + " has width " + std::to_string(h.n) + ", store has " +
                      std::to_string(store.dim_));
    }
    auto records = read_sidecar(p);
    if (records.size() != h.row_count) {
      throw FormatError("shard " + p.string() + ": sidecar has " + std::to_string(records.size()) + " records for " +
                        std::to_string(h.row_count) + " rows");
    }
    store.shards_.push_back({p, store.records_.size(), h.row_count});
    for (auto& r : records) {
      auto [it, inserted] = store.sequences_.try_emplace(r.sequence_id);
      if (inserted) store.sequence_order_.push_back(r.sequence_id);
      it->second.push_back(store.records_.size());
      store.records_.push_back(std::move(r));
    }
  }
  for (auto& [id, rows] : store.sequences_) {
    std::stable_sort(rows.begin(), rows.end(), [&](std::uint64_t a, std::uint64_t b) {
      return store.records_[a].token_index < store.records_[b].token_index;
    });
    for (std::size_t i = 1; i < rows.size(); ++i) {
      if (store.records_[rows[i]].token_index == store.records_[rows[i - 1]].token_index) {
        throw DataError("sequence '" + id + "' repeats token index " +
                        std::to_string(store.records_[rows[i]].token_index));
      }
    }
  }
  return store;
}

const TokenRecord& ActivationStore::record(std::uint64_t row) const {
  if (row >= records_.size()) throw DataError("row " + std::to_string(row) + " out of range");
  return records_[row];
}

const std::vector<std::uint64_t>& ActivationStore::sequence_rows(const std::string& id) const {
  const auto it = sequences_.find(id);
  if (it == sequences_.end()) throw DataError("unknown sequence '" + id + "'");
  return it->second;
}

void ActivationStore::read_range(std::uint64_t begin, RowMatrix& out) const {
  const auto count = static_cast<std::uint64_t>(out.rows());
  if (begin + count > row_count()) throw DataError("row range past the end of the store");
  if (out.cols() != static_cast<Eigen::Index>(dim_)) throw ShapeError("read_range: output width mismatch");
  std::uint64_t done = 0;
  for (const auto& s : shards_) {
    if (done == count) break;
    const auto at = begin + done;
    if (at >= s.first_row + s.rows) continue;
    const auto local = at - s.first_row;
    const auto take = std::min(count - done, s.rows - local);
    std::ifstream in;
    open_shard(in, s.path);
    in.seekg(static_cast<std::streamoff>(kShardHeaderBytes + local * 4ull * dim_));
    read_rows(in, out, static_cast<Eigen::Index>(done), static_cast<Eigen::Index>(take), s.path);
    done += take;
  }
}

RowMatrix ActivationStore::gather(std::span<const std::uint64_t> rows) const {
  RowMatrix out(static_cast<Eigen::Index>(rows.size()), static_cast<Eigen::Index>(dim_));
  RowMatrix one(1, static_cast<Eigen::Index>(dim_));
  // Visit in row order so each shard is opened once per contiguous run.
  std::vector<std::size_t> order(rows.size());
  for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;
  std::sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) { return rows[a] < rows[b]; });
  std::ifstream in;
  std::size_t open_shard_index = shards_.size();
  for (const auto i : order) {
    const auto row = rows[i];
    if (row >= row_count()) throw DataError("row " + std::to_string(row) + " out of range");
    const auto it = std::upper_bound(shards_.begin(), shards_.end(), row,
                                     [](std::uint64_t r, const ShardInfo& s) { return r < s.first_row; });
    const auto si = static_cast<std::size_t>(std::distance(shards_.begin(), it) - 1);
    if (si != open_shard_index) {
      in.close();
      open_shard(in, shards_[si].path);
      open_shard_index = si;
    }
    in.seekg(static_cast<std::streamoff>(kShardHeaderBytes + (row - shards_[si].first_row) * 4ull * dim_));
    read_rows(in, one, 0, 1, shards_[si].path);
    out.row(static_cast<Eigen::Index>(i)) = one.row(0);
  }
  return out;
}

ShardSource::ShardSource(const ActivationStore& store, bool shuffle, std::uint64_t seed)
    : store_(store), shuffle_(shuffle), seed_(seed) {
  rewind(0);
}

void ShardSource::rewind(std::uint64_t epoch) {
  order_.resize(store_.shards().size());
  for (std::size_t i = 0; i < order_.size(); ++i) order_[i] = i;
  if (shuffle_) {
    Rng rng(seed_ ^ (0x9E3779B97F4A7C15ull * (epoch + 1)));
    shuffle(order_, rng);
  }
  shard_pos_ = 0;
  row_pos_ = 0;
}

std::size_t ShardSource::read(RowMatrix& out) {
  std::size_t filled = 0;
  const auto want = static_cast<std::size_t>(out.rows());
  while (filled < want && shard_pos_ < order_.size()) {
    const auto& s = store_.shards()[order_[shard_pos_]];
    const auto take = std::min<std::uint64_t>(want - filled, s.rows - row_pos_);
    if (take > 0) {
      RowMatrix chunk(static_cast<Eigen::Index>(take), out.cols());
      store_.read_range(s.first_row + row_pos_, chunk);
      out.middleRows(static_cast<Eigen::Index>(filled), static_cast<Eigen::Index>(take)) = chunk;
      filled += take;
      row_pos_ += take;
    }
    if (row_pos_ == s.rows) {
      ++shard_pos_;
      row_pos_ = 0;
    }
  }
  return filled;
}

std::vector<SampledRow> sample_rows(const ActivationStore& store, std::size_t count, std::uint64_t seed,
                                    const std::function<bool(const TokenRecord&)>& predicate) {
  std::vector<std::uint64_t> candidates;
  for (std::uint64_t r = 0; r < store.row_count(); ++r) {
    if (!predicate || predicate(store.records()[r])) candidates.push_back(r);
  }
  if (count > candidates.size()) {
    throw DataError("requested " + std::to_string(count) + " rows but only " + std::to_string(candidates.size()) +
                    " match");
  }
  Rng rng(seed);
  const auto picked = sample_without_replacement(std::move(candidates), count, rng);
  std::vector<SampledRow> out;
  out.reserve(picked.size());
  for (const auto r : picked) out.push_back({r, &store.records()[r]});
  return out;
}

}  // namespace saeinterp
