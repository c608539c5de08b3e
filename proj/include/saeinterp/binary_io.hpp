// Copyright (c) 2026 The saeinterp Authors
// SPDX-License-Identifier: Apache-2.0
//
// Little-endian primitives for the shard and checkpoint formats.

#pragma once

#include <array>
#include <bit>
#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <istream>
#include <ostream>
#include <string>
#include <string_view>

#include "saeinterp/errors.hpp"

namespace saeinterp::binary {

template <typename U>
void put_uint(std::ostream& out, U value) {
  std::array<char, sizeof(U)> bytes{};
  for (std::size_t i = 0; i < sizeof(U); ++i) {
    bytes[i] = static_cast<char>((value >> (8 * i)) & 0xFF);
  }
  out.write(bytes.data(), bytes.size());
}

inline void put_f32(std::ostream& out, float value) { put_uint(out, std::bit_cast<std::uint32_t>(value)); }

template <typename U>
U get_uint(std::istream& in, std::string_view what) {
  std::array<unsigned char, sizeof(U)> bytes{};
  if (!in.read(reinterpret_cast<char*>(bytes.data()), bytes.size())) {
    throw FormatError("truncated file while reading " + std::string(what));
  }
  U value = 0;
  for (std::size_t i = 0; i < sizeof(U); ++i) {
    value |= static_cast<U>(bytes[i]) << (8 * i);
  }
  return value;
}

inline float get_f32(std::istream& in, std::string_view what) {
  return std::bit_cast<float>(get_uint<std::uint32_t>(in, what));
}

inline void expect_magic(std::istream& in, std::string_view magic) {
  std::string got(magic.size(), '\0');
  if (!in.read(got.data(), static_cast<std::streamsize>(got.size()))) {
    throw FormatError("truncated file while reading magic");
  }
  if (got != magic) {
    throw FormatError("bad magic: expected '" + std::string(magic) + "'");
  }
}

/// Writes via `<path>.tmp` and renames into place.
template <typename Writer>
void write_atomically(const std::filesystem::path& path, Writer&& writer) {
  auto tmp = path;
  tmp += ".tmp";
  {
    std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
    if (!out) {
      throw DataError("cannot open " + tmp.string() + " for writing");
    }
    writer(out);
    out.flush();
    if (!out) {
      throw DataError("failed writing " + tmp.string());
    }
  }
  std::filesystem::rename(tmp, path);
}

}  // namespace saeinterp::binary
