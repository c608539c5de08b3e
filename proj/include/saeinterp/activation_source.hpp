// Copyright (c) 2026 The saeinterp Authors
// SPDX-License-Identifier: Apache-2.0
//
// Sequential row streams consumed by the trainer.

#pragma once

#include <cstdint>

#include "saeinterp/sae.hpp"

namespace saeinterp {

class ActivationSource {
 public:
  virtual ~ActivationSource() = default;

  virtual std::size_t dim() const = 0;
  virtual std::uint64_t row_count() const = 0;

  /// Restart the stream at the first row of `epoch`.
  virtual void rewind(std::uint64_t epoch) = 0;

  /// Fill the rows of `out` in stream order. Returns the number written, which
  /// is smaller than out.rows() only when the epoch runs out.
  virtual std::size_t read(RowMatrix& out) = 0;
};

/// In-memory rows, mostly for tests and small experiments.
class MatrixSource final : public ActivationSource {
 public:
  explicit MatrixSource(RowMatrix rows) : rows_(std::move(rows)) {}

  std::size_t dim() const override { return static_cast<std::size_t>(rows_.cols()); }
  std::uint64_t row_count() const override { return static_cast<std::uint64_t>(rows_.rows()); }
  void rewind(std::uint64_t /*epoch*/) override { cursor_ = 0; }

  std::size_t read(RowMatrix& out) override {
    const auto take = std::min<Eigen::Index>(out.rows(), rows_.rows() - cursor_);
    out.topRows(take) = rows_.middleRows(cursor_, take);
    cursor_ += take;
    return static_cast<std::size_t>(take);
  }

 private:
  RowMatrix rows_;
  Eigen::Index cursor_ = 0;
};

}  // namespace saeinterp
