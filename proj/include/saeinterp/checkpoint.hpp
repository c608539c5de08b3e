// Copyright (c) 2026 The saeinterp Authors
// SPDX-License-Identifier: Apache-2.0
//
// SAEPRM01 parameter checkpoints: little-endian header followed by
// w_enc, b_enc, w_dec, b_dec as row-major f32.

#pragma once

#include <filesystem>
#include <iosfwd>

#include "saeinterp/sae.hpp"

namespace saeinterp {

inline constexpr std::string_view kCheckpointMagic = "SAEPRM01";

void write_checkpoint(std::ostream& out, const SaeParams& params);
SaeParams read_checkpoint(std::istream& in);

/// Atomic write (temp file + rename).
void save_checkpoint(const std::filesystem::path& path, const SaeParams& params);
SaeParams load_checkpoint(const std::filesystem::path& path);

}  // namespace saeinterp
