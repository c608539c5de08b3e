// Copyright (c) 2026 The saeinterp Authors
// SPDX-License-Identifier: Apache-2.0

#include "saeinterp/checkpoint.hpp"

#include <fstream>
#include <limits>

#include "saeinterp/binary_io.hpp"
#include "saeinterp/errors.hpp"

namespace saeinterp {

namespace {

constexpr std::uint32_t kMaxDim = 1u << 24;
constexpr std::uint32_t kMaxPrefixes = 1u << 16;

}  // namespace

void write_checkpoint(std::ostream& out, const SaeParams& params) {
  params.validate();
  const auto n = static_cast<std::uint32_t>(params.input_dim());
  const auto m = static_cast<std::uint32_t>(params.dict_size());
  out.write(kCheckpointMagic.data(), static_cast<std::streamsize>(kCheckpointMagic.size()));
  binary::put_uint<std::uint32_t>(out, n);
  binary::put_uint<std::uint32_t>(out, m);
  binary::put_uint<std::uint32_t>(out, params.k);
  binary::put_uint<std::uint8_t>(out, static_cast<std::uint8_t>(params.arch));
  binary::put_uint<std::uint32_t>(out, static_cast<std::uint32_t>(params.prefixes.size()));
  for (const auto p : params.prefixes) binary::put_uint<std::uint32_t>(out, p);
  binary::put_f32(out, static_cast<float>(params.aux_alpha));
  binary::put_f32(out, static_cast<float>(params.inference_threshold));
  for (Eigen::Index r = 0; r < params.w_enc.rows(); ++r)
    for (Eigen::Index c = 0; c < params.w_enc.cols(); ++c) binary::put_f32(out, static_cast<float>(params.w_enc(r, c)));
  for (Eigen::Index i = 0; i < params.b_enc.size(); ++i) binary::put_f32(out, static_cast<float>(params.b_enc(i)));
  for (Eigen::Index r = 0; r < params.w_dec.rows(); ++r)
    for (Eigen::Index c = 0; c < params.w_dec.cols(); ++c) binary::put_f32(out, static_cast<float>(params.w_dec(r, c)));
  for (Eigen::Index i = 0; i < params.b_dec.size(); ++i) binary::put_f32(out, static_cast<float>(params.b_dec(i)));
}

SaeParams read_checkpoint(std::istream& in) {
  binary::expect_magic(in, kCheckpointMagic);
  const auto n = binary::get_uint<std::uint32_t>(in, "n");
  const auto m = binary::get_uint<std::uint32_t>(in, "m");
  const auto k = binary::get_uint<std::uint32_t>(in, "k");
  const auto arch = binary::get_uint<std::uint8_t>(in, "arch");
  const auto count = binary::get_uint<std::uint32_t>(in, "prefix count");
  if (n == 0 || m == 0 || n > kMaxDim || m > kMaxDim || count == 0 || count > kMaxPrefixes) {
    throw FormatError("checkpoint header declares implausible sizes");
  }
  if (arch > static_cast<std::uint8_t>(Architecture::MatryoshkaBatchTopK)) {
    throw FormatError("checkpoint has unknown architecture code " + std::to_string(arch));
  }
  // Refuse to allocate more than the stream can hold.
  const auto here = in.tellg();
  if (here != std::streampos(-1)) {
    in.seekg(0, std::ios::end);
    const auto remaining = static_cast<std::uint64_t>(in.tellg() - here);
    in.seekg(here);
    const std::uint64_t body = 4ull * count + 8ull + 4ull * (2ull * n * m + n + m);
    if (remaining < body) {
      throw FormatError("truncated checkpoint: header declares " + std::to_string(body) + " body bytes, " +
                        std::to_string(remaining) + " present");
    }
  }
  SaeParams p;
  p.arch = static_cast<Architecture>(arch);
  p.k = k;
  p.prefixes.resize(count);
  for (auto& v : p.prefixes) v = binary::get_uint<std::uint32_t>(in, "prefix");
  p.aux_alpha = binary::get_f32(in, "aux_alpha");
  p.inference_threshold = binary::get_f32(in, "inference_threshold");
  p.w_enc.resize(m, n);
  for (Eigen::Index r = 0; r < p.w_enc.rows(); ++r)
    for (Eigen::Index c = 0; c < p.w_enc.cols(); ++c) p.w_enc(r, c) = binary::get_f32(in, "w_enc");
  p.b_enc.resize(m);
  for (Eigen::Index i = 0; i < p.b_enc.size(); ++i) p.b_enc(i) = binary::get_f32(in, "b_enc");
  p.w_dec.resize(n, m);
  for (Eigen::Index r = 0; r < p.w_dec.rows(); ++r)
    for (Eigen::Index c = 0; c < p.w_dec.cols(); ++c) p.w_dec(r, c) = binary::get_f32(in, "w_dec");
  p.b_dec.resize(n);
  for (Eigen::Index i = 0; i < p.b_dec.size(); ++i) p.b_dec(i) = binary::get_f32(in, "b_dec");
  if (in.peek() != std::char_traits<char>::eof()) {
    throw FormatError("trailing bytes after checkpoint body");
  }
  try {
    p.validate();
  } catch (const Error& e) {
    throw FormatError(std::string("checkpoint failed validation: ") + e.what());
  }
  return p;
}

void save_checkpoint(const std::filesystem::path& path, const SaeParams& params) {
  binary::write_atomically(path, [&](std::ostream& out) { write_checkpoint(out, params); });
}

SaeParams load_checkpoint(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) {
    throw DataError("cannot open checkpoint " + path.string());
  }
  return read_checkpoint(in);
}

}  // namespace saeinterp
