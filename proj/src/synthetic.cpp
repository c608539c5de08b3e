// Copyright (c) 2026 The saeinterp Authors
// SPDX-License-Identifier: Apache-2.0

#include "saeinterp/synthetic.hpp"

#include <algorithm>

#include "saeinterp/errors.hpp"

namespace saeinterp {

ColMatrix random_unit_dictionary(std::size_t n, std::size_t atoms, std::uint64_t seed) {
  Rng rng(seed);
  NormalSampler normal;
  ColMatrix d(static_cast<Eigen::Index>(n), static_cast<Eigen::Index>(atoms));
  for (Eigen::Index c = 0; c < d.cols(); ++c) {
    for (Eigen::Index r = 0; r < d.rows(); ++r) d(r, c) = normal(rng);
    d.col(c).normalize();
  }
  return d;
}

PlantedDictionarySource::PlantedDictionarySource(PlantedDictionaryConfig cfg) : cfg_(cfg) {
  if (cfg_.n == 0 || cfg_.atoms == 0 || cfg_.k == 0 || cfg_.k > cfg_.atoms) {
    throw ParameterError("planted dictionary needs n, atoms > 0 and 0 < k <= atoms");
  }
  dictionary_ = random_unit_dictionary(cfg_.n, cfg_.atoms, cfg_.seed);
  rewind(0);
}

void PlantedDictionarySource::rewind(std::uint64_t /*epoch*/) {
  rng_.seed(cfg_.seed ^ 0x9E3779B97F4A7C15ull);
  normal_ = NormalSampler{};
  cursor_ = 0;
}

std::size_t PlantedDictionarySource::read(RowMatrix& out) {
  const auto take = static_cast<Eigen::Index>(std::min<std::uint64_t>(out.rows(), cfg_.rows - cursor_));
  std::vector<std::uint32_t> support;
  for (Eigen::Index r = 0; r < take; ++r) {
    support.clear();
    while (support.size() < cfg_.k) {
      const auto atom = static_cast<std::uint32_t>(uniform_index(rng_, cfg_.atoms));
      if (std::find(support.begin(), support.end(), atom) == support.end()) support.push_back(atom);
    }
    auto row = out.row(r);
    for (Eigen::Index c = 0; c < row.size(); ++c) row(c) = cfg_.noise_sigma * normal_(rng_);
    for (const auto atom : support) {
      row.noalias() += uniform_real(rng_, cfg_.value_lo, cfg_.value_hi) * dictionary_.col(atom).transpose();
    }
  }
  cursor_ += static_cast<std::uint64_t>(take);
  return static_cast<std::size_t>(take);
}

double mean_max_cosine(const ColMatrix& truth, const ColMatrix& learned) {
  if (truth.rows() != learned.rows()) {
    throw ShapeError("dictionaries have different input dims");
  }
  const ColMatrix t = truth.colwise().normalized();
  const ColMatrix l = learned.colwise().normalized();
  const Eigen::MatrixXd cos = t.transpose() * l;
  return cos.rowwise().maxCoeff().mean();
}

}  // namespace saeinterp
