// Copyright (c) 2026 The saeinterp Authors
// SPDX-License-Identifier: Apache-2.0

#include "saeinterp/sae.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <sstream>
#include <utility>

#include "saeinterp/errors.hpp"
#include "saeinterp/rng.hpp"

namespace saeinterp {

namespace {

std::string dims(std::size_t a, std::size_t b) {
  std::ostringstream out;
  out << a << " vs " << b;
  return out.str();
}

void require_finite(const RowMatrix& m, const char* what) {
  if (!m.allFinite()) {
    throw DataError(std::string(what) + " contains non-finite values");
  }
}

// Selected (row, col) pairs -> one sorted SparseCode per row.
std::vector<SparseCode> gather_codes(const RowMatrix& preacts,
                                     std::vector<std::pair<Eigen::Index, Eigen::Index>>& picks) {
  const auto rows = static_cast<std::size_t>(preacts.rows());
  const auto m = static_cast<std::uint32_t>(preacts.cols());
  std::sort(picks.begin(), picks.end());
  std::vector<SparseCode> codes(rows);
  for (auto& c : codes) {
    c.n_total = m;
  }
  for (const auto& [r, c] : picks) {
    auto& code = codes[static_cast<std::size_t>(r)];
    code.indices.push_back(static_cast<std::uint32_t>(c));
    code.values.push_back(preacts(r, c));
  }
  return codes;
}

// Index into prefixes of the group that owns `feature`.
std::size_t group_of(std::span<const std::uint32_t> prefixes, std::uint32_t feature) {
  return static_cast<std::size_t>(
      std::upper_bound(prefixes.begin(), prefixes.end(), feature) - prefixes.begin());
}

// Shared forward (and optionally backward) pass over fixed supports.
LossReport accumulate(const SaeParams& params, const RowMatrix& batch,
                      std::span<const SparseCode> codes, std::span<const SparseCode> aux_codes,
                      Gradients* grads) {
  const auto rows = static_cast<std::size_t>(batch.rows());
  const auto n = params.input_dim();
  const auto& prefixes = params.prefixes;
  const std::size_t groups = prefixes.size();
  const double inv_b = 1.0 / static_cast<double>(rows);

  LossReport report;
  report.per_prefix_mse.assign(groups, 0.0);

  std::vector<Vector> residual(groups, Vector::Zero(static_cast<Eigen::Index>(n)));
  std::vector<Vector> suffix(groups, Vector::Zero(static_cast<Eigen::Index>(n)));
  Vector recon(static_cast<Eigen::Index>(n));
  Vector aux_diff(static_cast<Eigen::Index>(n));
  double full_sq = 0.0;

  for (std::size_t r = 0; r < rows; ++r) {
    const auto x = batch.row(static_cast<Eigen::Index>(r)).transpose();
    const SparseCode& code = codes[r];

    recon = params.b_dec;
    std::size_t pos = 0;
    for (std::size_t j = 0; j < groups; ++j) {
      while (pos < code.indices.size() && code.indices[pos] < prefixes[j]) {
        recon.noalias() += params.w_dec.col(code.indices[pos]) * code.values[pos];
        ++pos;
      }
      residual[j] = recon - x;
      report.per_prefix_mse[j] += residual[j].squaredNorm() * inv_b;
    }
    full_sq += residual[groups - 1].squaredNorm();

    // e = x - x_hat(m); e_hat from dead latents; aux_diff = e_hat - e.
    aux_diff = residual[groups - 1];
    const bool has_aux = !aux_codes.empty() && !aux_codes[r].empty();
    if (has_aux) {
      const SparseCode& aux = aux_codes[r];
      for (std::size_t a = 0; a < aux.indices.size(); ++a) {
        aux_diff.noalias() += params.w_dec.col(aux.indices[a]) * aux.values[a];
      }
      report.aux += aux_diff.squaredNorm() * inv_b;
    }

    if (grads == nullptr) {
      continue;
    }

    // Gradient of the loss w.r.t. each prefix reconstruction, then suffix sums
    // so a feature in group q sees the sum over every prefix that contains it.
    for (std::size_t j = 0; j < groups; ++j) {
      suffix[j] = residual[j] * (2.0 * inv_b);
    }
    if (has_aux) {
      suffix[groups - 1].noalias() += aux_diff * (2.0 * inv_b * params.aux_alpha);
    }
    for (std::size_t j = groups - 1; j > 0; --j) {
      suffix[j - 1] += suffix[j];
    }
    grads->b_dec += suffix[0];

    for (std::size_t p = 0; p < code.indices.size(); ++p) {
      const std::uint32_t i = code.indices[p];
      const Vector& g = suffix[group_of(prefixes, i)];
      const double d_act = params.w_dec.col(i).dot(g);
      grads->w_dec.col(i).noalias() += g * code.values[p];
      grads->w_enc.row(i).noalias() += d_act * x.transpose();
      grads->b_enc(i) += d_act;
    }
    if (has_aux) {
      const SparseCode& aux = aux_codes[r];
      const Vector g_aux = aux_diff * (2.0 * inv_b * params.aux_alpha);
      for (std::size_t a = 0; a < aux.indices.size(); ++a) {
        const std::uint32_t i = aux.indices[a];
        const double d_act = params.w_dec.col(i).dot(g_aux);
        grads->w_dec.col(i).noalias() += g_aux * aux.values[a];
        grads->w_enc.row(i).noalias() += d_act * x.transpose();
        grads->b_enc(i) += d_act;
      }
    }
  }

  report.total = std::accumulate(report.per_prefix_mse.begin(), report.per_prefix_mse.end(), 0.0) +
                 params.aux_alpha * report.aux;

  const Vector mean = batch.colwise().mean().transpose();
  const double variance = (batch.rowwise() - mean.transpose()).squaredNorm();
  report.fvu = variance > 0.0 ? full_sq / variance : (full_sq > 0.0 ? INFINITY : 0.0);
  return report;
}

void check_batch(const SaeParams& params, const RowMatrix& batch) {
  if (static_cast<std::size_t>(batch.cols()) != params.input_dim()) {
    throw ShapeError("batch has " + std::to_string(batch.cols()) + " columns but the SAE input dim is " +
                     std::to_string(params.input_dim()));
  }
  if (batch.rows() < 1) {
    throw ShapeError("batch must contain at least one row");
  }
}

}  // namespace

std::string_view to_string(Architecture arch) {
  switch (arch) {
    case Architecture::TopK:
      return "topk";
    case Architecture::BatchTopK:
      return "batchtopk";
    case Architecture::MatryoshkaBatchTopK:
      return "matryoshka";
  }
  return "unknown";
}

Architecture parse_architecture(std::string_view name) {
  if (name == "topk") return Architecture::TopK;
  if (name == "batchtopk" || name == "batch_topk") return Architecture::BatchTopK;
  if (name == "matryoshka" || name == "matryoshka_batch_topk") return Architecture::MatryoshkaBatchTopK;
  throw ParameterError("unknown SAE architecture '" + std::string(name) + "'");
}

double SparseCode::value_of(std::uint32_t feature) const {
  const auto it = std::lower_bound(indices.begin(), indices.end(), feature);
  if (it == indices.end() || *it != feature) {
    return 0.0;
  }
  return values[static_cast<std::size_t>(it - indices.begin())];
}

void SparseCode::validate() const {
  if (indices.size() != values.size()) {
    throw ParameterError("sparse code has mismatched index/value counts");
  }
  if (indices.size() > n_total) {
    throw ParameterError("sparse code has more entries than the dictionary size");
  }
  for (std::size_t i = 0; i < indices.size(); ++i) {
    if (indices[i] >= n_total) throw ParameterError("sparse code index out of range");
    if (i > 0 && indices[i] <= indices[i - 1]) throw ParameterError("sparse code indices not strictly ascending");
    if (!(values[i] > 0.0)) throw ParameterError("sparse code value is not strictly positive");
  }
}

void SaeParams::validate() const {
  const auto m = dict_size();
  const auto n = input_dim();
  if (static_cast<std::size_t>(w_enc.cols()) != n) {
    throw ShapeError("w_enc has " + std::to_string(w_enc.cols()) + " columns, expected n = " + std::to_string(n));
  }
  if (static_cast<std::size_t>(w_dec.cols()) != m) {
    throw ShapeError("w_dec has " + std::to_string(w_dec.cols()) + " columns, expected m = " + std::to_string(m));
  }
  if (static_cast<std::size_t>(b_enc.size()) != m) throw ShapeError("b_enc length " + dims(b_enc.size(), m));
  if (static_cast<std::size_t>(b_dec.size()) != n) throw ShapeError("b_dec length " + dims(b_dec.size(), n));
  if (prefixes.empty() || prefixes.back() != m) {
    throw ParameterError("prefixes must end with the dictionary size m = " + std::to_string(m));
  }
  for (std::size_t j = 0; j < prefixes.size(); ++j) {
    if (prefixes[j] == 0 || (j > 0 && prefixes[j] <= prefixes[j - 1])) {
      throw ParameterError("prefixes must be strictly ascending positive integers");
    }
  }
  if (k == 0 || k > m) {
    throw ParameterError("k must be in [1, m]; got k = " + std::to_string(k));
  }
  if (!(aux_alpha >= 0.0) || !std::isfinite(aux_alpha)) throw ParameterError("aux_alpha must be finite and >= 0");
  if (!(inference_threshold >= 0.0) || !std::isfinite(inference_threshold)) {
    throw ParameterError("inference_threshold must be finite and >= 0");
  }
}

SaeParams SaeParams::initialize(std::size_t n, std::size_t m, Architecture arch, std::uint32_t k,
                                std::vector<std::uint32_t> prefixes, double aux_alpha,
                                std::uint64_t seed) {
  SaeParams p;
  p.arch = arch;
  p.k = k;
  p.prefixes = prefixes.empty() ? std::vector<std::uint32_t>{static_cast<std::uint32_t>(m)} : std::move(prefixes);
  p.aux_alpha = aux_alpha;
  const auto rows = static_cast<Eigen::Index>(n);
  const auto cols = static_cast<Eigen::Index>(m);
  Rng rng(seed);
  p.w_dec.resize(rows, cols);
  for (Eigen::Index c = 0; c < cols; ++c) {
    for (Eigen::Index r = 0; r < rows; ++r) {
      p.w_dec(r, c) = standard_normal(rng);
    }
    p.w_dec.col(c).normalize();
  }
  p.w_enc = p.w_dec.transpose();
  p.b_enc = Vector::Zero(cols);
  p.b_dec = Vector::Zero(rows);
  p.validate();
  return p;
}

RowMatrix encode_preacts(const SaeParams& params, const RowMatrix& batch) {
  check_batch(params, batch);
  RowMatrix pre = batch * params.w_enc.transpose();
  pre.rowwise() += params.b_enc.transpose();
  return pre;
}

std::vector<SparseCode> apply_topk(const RowMatrix& preacts, std::uint32_t k) {
  if (k == 0) throw ParameterError("apply_topk: k must be positive");
  if (k > preacts.cols()) throw ParameterError("apply_topk: k exceeds the dictionary size");
  require_finite(preacts, "pre-activations");
  std::vector<std::pair<Eigen::Index, Eigen::Index>> picks;
  std::vector<Eigen::Index> order;
  for (Eigen::Index r = 0; r < preacts.rows(); ++r) {
    order.clear();
    for (Eigen::Index c = 0; c < preacts.cols(); ++c) {
      if (preacts(r, c) > 0.0) order.push_back(c);
    }
    const auto keep = std::min<std::size_t>(k, order.size());
    auto better = [&](Eigen::Index a, Eigen::Index b) {
      return preacts(r, a) > preacts(r, b) || (preacts(r, a) == preacts(r, b) && a < b);
    };
    std::partial_sort(order.begin(), order.begin() + static_cast<std::ptrdiff_t>(keep), order.end(), better);
    for (std::size_t i = 0; i < keep; ++i) picks.emplace_back(r, order[i]);
  }
  return gather_codes(preacts, picks);
}

std::vector<SparseCode> apply_batch_topk(const RowMatrix& preacts, std::uint32_t k) {
  if (k == 0) throw ParameterError("apply_batch_topk: k must be positive");
  if (k > preacts.cols()) throw ParameterError("apply_batch_topk: k exceeds the dictionary size");
  require_finite(preacts, "pre-activations");
  const Eigen::Index cols = preacts.cols();
  const double* data = preacts.data();
  std::vector<Eigen::Index> flat;
  for (Eigen::Index f = 0; f < preacts.size(); ++f) {
    if (data[f] > 0.0) flat.push_back(f);
  }
  const auto budget = static_cast<std::size_t>(preacts.rows()) * k;
  if (flat.size() > budget) {
    auto better = [&](Eigen::Index a, Eigen::Index b) {
      return data[a] > data[b] || (data[a] == data[b] && a < b);
    };
    std::nth_element(flat.begin(), flat.begin() + static_cast<std::ptrdiff_t>(budget), flat.end(), better);
    flat.resize(budget);
  }
  std::vector<std::pair<Eigen::Index, Eigen::Index>> picks;
  picks.reserve(flat.size());
  for (const auto f : flat) picks.emplace_back(f / cols, f % cols);
  return gather_codes(preacts, picks);
}

std::vector<SparseCode> apply_threshold(const RowMatrix& preacts, double threshold) {
  if (!std::isfinite(threshold) || threshold < 0.0) {
    throw ParameterError("apply_threshold: threshold must be finite and non-negative");
  }
  require_finite(preacts, "pre-activations");
  std::vector<std::pair<Eigen::Index, Eigen::Index>> picks;
  for (Eigen::Index r = 0; r < preacts.rows(); ++r) {
    for (Eigen::Index c = 0; c < preacts.cols(); ++c) {
      const double v = preacts(r, c);
      if (v > 0.0 && v > threshold) picks.emplace_back(r, c);
    }
  }
  return gather_codes(preacts, picks);
}

std::vector<SparseCode> select_active(const SaeParams& params, const RowMatrix& preacts) {
  if (params.arch == Architecture::TopK) {
    return apply_topk(preacts, params.k);
  }
  return apply_batch_topk(preacts, params.k);
}

std::vector<SparseCode> encode(const SaeParams& params, const RowMatrix& batch) {
  const RowMatrix pre = encode_preacts(params, batch);
  if (params.arch == Architecture::TopK) {
    return apply_topk(pre, params.k);
  }
  if (params.inference_threshold > 0.0) {
    return apply_threshold(pre, params.inference_threshold);
  }
  return apply_batch_topk(pre, params.k);
}

Vector decode_prefix(const SaeParams& params, const SparseCode& code, std::uint32_t prefix) {
  if (std::find(params.prefixes.begin(), params.prefixes.end(), prefix) == params.prefixes.end()) {
    throw ParameterError("decode_prefix: " + std::to_string(prefix) + " is not one of the SAE prefixes");
  }
  Vector out = params.b_dec;
  for (std::size_t p = 0; p < code.indices.size() && code.indices[p] < prefix; ++p) {
    out.noalias() += params.w_dec.col(code.indices[p]) * code.values[p];
  }
  return out;
}

std::optional<double> min_selected(std::span<const SparseCode> codes) {
  std::optional<double> best;
  for (const auto& c : codes) {
    for (const double v : c.values) {
      if (!best || v < *best) best = v;
    }
  }
  return best;
}

std::vector<SparseCode> select_aux(const RowMatrix& preacts, const DeadMask& dead_mask, std::uint32_t k,
                                   std::optional<std::uint32_t> aux_k) {
  if (dead_mask.size() != static_cast<std::size_t>(preacts.cols())) {
    throw ShapeError("dead mask length " + dims(dead_mask.size(), static_cast<std::size_t>(preacts.cols())) +
                     " (dictionary size)");
  }
  const auto dead_count = static_cast<std::uint32_t>(std::count(dead_mask.begin(), dead_mask.end(), true));
  const std::uint32_t k_aux = std::min(aux_k.value_or(2 * k), dead_count);
  std::vector<std::pair<Eigen::Index, Eigen::Index>> picks;
  if (k_aux > 0) {
    std::vector<Eigen::Index> order;
    for (Eigen::Index r = 0; r < preacts.rows(); ++r) {
      order.clear();
      for (Eigen::Index c = 0; c < preacts.cols(); ++c) {
        if (dead_mask[static_cast<std::size_t>(c)] && preacts(r, c) > 0.0) order.push_back(c);
      }
      const auto keep = std::min<std::size_t>(k_aux, order.size());
      std::partial_sort(order.begin(), order.begin() + static_cast<std::ptrdiff_t>(keep), order.end(),
                        [&](Eigen::Index a, Eigen::Index b) {
                          return preacts(r, a) > preacts(r, b) || (preacts(r, a) == preacts(r, b) && a < b);
                        });
      for (std::size_t i = 0; i < keep; ++i) picks.emplace_back(r, order[i]);
    }
  }
  return gather_codes(preacts, picks);
}

LossReport matryoshka_loss(const SaeParams& params, const RowMatrix& batch, std::span<const SparseCode> codes,
                           const DeadMask& dead_mask, std::optional<std::uint32_t> aux_k) {
  check_batch(params, batch);
  if (dead_mask.size() != params.dict_size()) {
    throw ShapeError("dead mask length " + dims(dead_mask.size(), params.dict_size()) + " (dictionary size)");
  }
  if (codes.size() != static_cast<std::size_t>(batch.rows())) {
    throw ShapeError("got " + std::to_string(codes.size()) + " codes for " + std::to_string(batch.rows()) +
                     " batch rows");
  }
  std::vector<SparseCode> aux_codes;
  if (std::find(dead_mask.begin(), dead_mask.end(), true) != dead_mask.end()) {
    aux_codes = select_aux(encode_preacts(params, batch), dead_mask, params.k, aux_k);
  }
  return accumulate(params, batch, codes, aux_codes, nullptr);
}

Gradients Gradients::zeros_like(const SaeParams& params) {
  Gradients g;
  g.w_enc = RowMatrix::Zero(params.w_enc.rows(), params.w_enc.cols());
  g.b_enc = Vector::Zero(params.b_enc.size());
  g.w_dec = ColMatrix::Zero(params.w_dec.rows(), params.w_dec.cols());
  g.b_dec = Vector::Zero(params.b_dec.size());
  return g;
}

double Gradients::squared_norm() const {
  return w_enc.squaredNorm() + b_enc.squaredNorm() + w_dec.squaredNorm() + b_dec.squaredNorm();
}

ForwardBackward forward_backward(const SaeParams& params, const RowMatrix& batch, const DeadMask& dead_mask,
                                 std::optional<std::uint32_t> aux_k) {
  check_batch(params, batch);
  require_finite(batch, "batch");
  const RowMatrix pre = encode_preacts(params, batch);
  if (!pre.allFinite()) {
    throw NumericalError("non-finite pre-activations from finite inputs");
  }
  ForwardBackward out;
  out.codes = select_active(params, pre);
  if (!dead_mask.empty()) {
    if (dead_mask.size() != params.dict_size()) {
      throw ShapeError("dead mask length " + dims(dead_mask.size(), params.dict_size()) + " (dictionary size)");
    }
    if (std::find(dead_mask.begin(), dead_mask.end(), true) != dead_mask.end()) {
      out.aux_codes = select_aux(pre, dead_mask, params.k, aux_k);
    }
  }
  out.grads = Gradients::zeros_like(params);
  out.loss = accumulate(params, batch, out.codes, out.aux_codes, &out.grads);
  if (!std::isfinite(out.loss.total)) {
    throw NumericalError("non-finite loss in forward pass");
  }
  return out;
}

Gradients loss_gradients(const SaeParams& params, const RowMatrix& batch, const DeadMask& dead_mask,
                         std::optional<std::uint32_t> aux_k) {
  return forward_backward(params, batch, dead_mask, aux_k).grads;
}

}  // namespace saeinterp
