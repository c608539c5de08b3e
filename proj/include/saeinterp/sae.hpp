// Copyright (c) 2026 The saeinterp Authors
// SPDX-License-Identifier: Apache-2.0
//
// Sparse autoencoder parameterisation, activation rules, Matryoshka loss and
// its analytic gradients.

#pragma once

#include <Eigen/Dense>

#include <cstdint>
#include <optional>
#include <span>
#include <string>
#include <string_view>
#include <vector>

namespace saeinterp {

/// Row-major dense matrix; batches are [rows x n], the encoder is [m x n].
using RowMatrix = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
/// Column-major dense matrix; the decoder is [n x m] so each atom is contiguous.
using ColMatrix = Eigen::MatrixXd;
using Vector = Eigen::VectorXd;

enum class Architecture : std::uint8_t {
  TopK = 0,
  BatchTopK = 1,
  MatryoshkaBatchTopK = 2,
};

std::string_view to_string(Architecture arch);
/// Accepts "topk", "batchtopk", "matryoshka" (and the long form "matryoshka_batch_topk").
Architecture parse_architecture(std::string_view name);

/// Per-sample sparse activations. Indices ascend, values are strictly positive.
struct SparseCode {
  std::vector<std::uint32_t> indices;
  std::vector<double> values;
  std::uint32_t n_total = 0;

  std::size_t size() const { return indices.size(); }
  bool empty() const { return indices.empty(); }
  /// Activation of `feature`, or 0 when it is not in the code.
  double value_of(std::uint32_t feature) const;
  /// Checks the ordering/positivity invariants; throws ParameterError.
  void validate() const;
};

struct SaeParams {
  RowMatrix w_enc;  // [m x n]
  Vector b_enc;     // [m]
  ColMatrix w_dec;  // [n x m]
  Vector b_dec;     // [n]
  Architecture arch = Architecture::MatryoshkaBatchTopK;
  std::uint32_t k = 1;
  std::vector<std::uint32_t> prefixes;  // ascending, last == m
  double aux_alpha = 0.03125;
  double inference_threshold = 0.0;

  std::size_t input_dim() const { return static_cast<std::size_t>(w_dec.rows()); }
  std::size_t dict_size() const { return static_cast<std::size_t>(w_enc.rows()); }

  /// Throws ShapeError / ParameterError when any invariant is broken.
  void validate() const;

  /// Random unit-norm decoder atoms, encoder initialised to the decoder
  /// transpose, zero biases.
  static SaeParams initialize(std::size_t n, std::size_t m, Architecture arch, std::uint32_t k,
                              std::vector<std::uint32_t> prefixes, double aux_alpha,
                              std::uint64_t seed);
};

/// W_enc x + b_enc for every row of `batch`.
RowMatrix encode_preacts(const SaeParams& params, const RowMatrix& batch);

/// Per-row ReLU then keep the k largest entries (ties: lower index).
std::vector<SparseCode> apply_topk(const RowMatrix& preacts, std::uint32_t k);

/// ReLU, then keep the rows*k largest positive entries across the whole
/// matrix. Ties go to the lower row-major flat index.
std::vector<SparseCode> apply_batch_topk(const RowMatrix& preacts, std::uint32_t k);

/// Keep entries whose ReLU exceeds `threshold`; no coupling between rows.
std::vector<SparseCode> apply_threshold(const RowMatrix& preacts, double threshold);

/// The training-time rule of `params.arch` (TopK or BatchTopK).
std::vector<SparseCode> select_active(const SaeParams& params, const RowMatrix& preacts);

/// The inference rule: TopK archs use TopK, BatchTopK archs use the learned
/// threshold once it is positive and fall back to BatchTopK before that.
std::vector<SparseCode> encode(const SaeParams& params, const RowMatrix& batch);

/// W_dec[:, :prefix] f[:prefix] + b_dec. `prefix` must be one of params.prefixes.
Vector decode_prefix(const SaeParams& params, const SparseCode& code, std::uint32_t prefix);

/// Smallest value kept across a set of codes; nullopt when all are empty.
std::optional<double> min_selected(std::span<const SparseCode> codes);

/// Dead-feature flags, one per dictionary atom.
using DeadMask = std::vector<bool>;

/// Top-k_aux dead latents per row by pre-activation (positive ones only).
/// k_aux defaults to min(2k, number of dead latents).
std::vector<SparseCode> select_aux(const RowMatrix& preacts, const DeadMask& dead_mask,
                                   std::uint32_t k, std::optional<std::uint32_t> aux_k = {});

struct LossReport {
  double total = 0.0;
  std::vector<double> per_prefix_mse;  // batch-mean squared error per prefix
  double aux = 0.0;                    // unweighted auxiliary loss
  double fvu = 0.0;                    // fraction of variance unexplained at the full width
};

/// Sum over prefixes of batch-mean squared reconstruction error, plus
/// aux_alpha times the auxiliary dead-latent loss on the full-width residual.
LossReport matryoshka_loss(const SaeParams& params, const RowMatrix& batch,
                           std::span<const SparseCode> codes, const DeadMask& dead_mask,
                           std::optional<std::uint32_t> aux_k = {});

struct Gradients {
  RowMatrix w_enc;
  Vector b_enc;
  ColMatrix w_dec;
  Vector b_dec;

  static Gradients zeros_like(const SaeParams& params);
  double squared_norm() const;
};

/// Everything one optimisation step needs from a batch.
struct ForwardBackward {
  LossReport loss;
  Gradients grads;
  std::vector<SparseCode> codes;
  std::vector<SparseCode> aux_codes;
};

/// Loss and gradients with the selection pattern held fixed (straight-through
/// on the support). An empty dead mask means no feature is dead.
ForwardBackward forward_backward(const SaeParams& params, const RowMatrix& batch,
                                 const DeadMask& dead_mask = {},
                                 std::optional<std::uint32_t> aux_k = {});

Gradients loss_gradients(const SaeParams& params, const RowMatrix& batch,
                         const DeadMask& dead_mask = {},
                         std::optional<std::uint32_t> aux_k = {});

}  // namespace saeinterp
