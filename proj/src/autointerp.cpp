// Copyright (c) 2026 The saeinterp Authors
// SPDX-License-Identifier: Apache-2.0

#include "saeinterp/autointerp.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <sstream>

#include "saeinterp/errors.hpp"
#include "saeinterp/rng.hpp"

namespace saeinterp {

namespace {

// Distinct random streams per feature and purpose.
constexpr std::uint64_t kInterpStream = 1;
constexpr std::uint64_t kOrderStream = 2;
constexpr std::uint64_t kScoringStream = 3;

Rng feature_rng(std::uint64_t seed, std::uint32_t feature, std::uint64_t stream) {
  return Rng(derive_seed(derive_seed(seed, feature), stream));
}

std::size_t ceil_div(std::size_t a, std::size_t b) { return (a + b - 1) / b; }

std::string truncate_code_points(const std::string& s, std::size_t max_points) {
  std::size_t points = 0;
  for (std::size_t i = 0; i < s.size(); ++i) {
    if ((static_cast<unsigned char>(s[i]) & 0xC0) != 0x80) {
      if (points == max_points) return s.substr(0, i);
      ++points;
    }
  }
  return s;
}

std::string token_text(const TokenRecord& r, const std::string& image_literal) {
  return r.content_type == ContentType::Image ? image_literal : r.token_text;
}

// Top `count` rows of the ranking.
std::vector<std::uint64_t> top_rows(const std::vector<ActivationEntry>& ranked, std::size_t count) {
  std::vector<std::uint64_t> rows;
  rows.reserve(count);
  for (std::size_t i = 0; i < count && i < ranked.size(); ++i) rows.push_back(ranked[i].row);
  return rows;
}

std::optional<int> parse_prediction(const nlohmann::json& v) {
  const nlohmann::json* x = &v;
  if (v.is_array()) {
    if (v.size() != 1) return std::nullopt;
    x = &v[0];
  }
  if (x->is_number_integer() || x->is_number_unsigned()) {
    const auto i = x->get<long long>();
    if (i == 0 || i == 1) return static_cast<int>(i);
  }
  return std::nullopt;
}

double quantile_sorted(const std::vector<double>& xs, double q) {
  const double h = (static_cast<double>(xs.size()) - 1.0) * q;
  const auto lo = static_cast<std::size_t>(std::floor(h));
  if (lo + 1 >= xs.size()) return xs.back();
  return xs[lo] + (h - static_cast<double>(lo)) * (xs[lo + 1] - xs[lo]);
}

}  // namespace

FeatureActivationIndex::FeatureActivationIndex(std::vector<std::uint64_t> pool,
                                               std::vector<std::vector<ActivationEntry>> per_feature)
    : pool_(std::move(pool)), features_(std::move(per_feature)) {
  if (!std::is_sorted(pool_.begin(), pool_.end()) ||
      std::adjacent_find(pool_.begin(), pool_.end()) != pool_.end()) {
    throw ParameterError("activation index pool must be sorted and unique");
  }
  for (auto& entries : features_) {
    for (const auto& e : entries) {
      if (!(e.value > 0.0)) throw ParameterError("activation index entries must be strictly positive");
      if (!std::binary_search(pool_.begin(), pool_.end(), e.row)) {
        throw ParameterError("activation index entry references row " + std::to_string(e.row) + " outside the pool");
      }
    }
    std::sort(entries.begin(), entries.end(), [](const ActivationEntry& a, const ActivationEntry& b) {
      return a.value != b.value ? a.value > b.value : a.row < b.row;
    });
  }
}

FeatureActivationIndex FeatureActivationIndex::build(const SaeParams& params, const ActivationStore& store,
                                                     std::vector<std::uint64_t> pool, double norm_factor,
                                                     std::size_t chunk_rows) {
  if (static_cast<std::size_t>(params.w_enc.cols()) != store.dim()) {
    throw ShapeError("sae input width " + std::to_string(params.w_enc.cols()) + " does not match store width " +
                     std::to_string(store.dim()));
  }
  if (!(norm_factor > 0.0) || !std::isfinite(norm_factor)) throw ParameterError("norm factor must be positive");
  if (chunk_rows == 0) throw ParameterError("chunk_rows must be positive");
  std::sort(pool.begin(), pool.end());
  pool.erase(std::unique(pool.begin(), pool.end()), pool.end());
  std::vector<std::vector<ActivationEntry>> features(static_cast<std::size_t>(params.w_enc.rows()));
  for (std::size_t begin = 0; begin < pool.size(); begin += chunk_rows) {
    const auto count = std::min(chunk_rows, pool.size() - begin);
    RowMatrix batch = store.gather(std::span<const std::uint64_t>(pool.data() + begin, count));
    batch /= norm_factor;
    const auto codes = encode(params, batch);
    for (std::size_t r = 0; r < codes.size(); ++r) {
      for (std::size_t i = 0; i < codes[r].size(); ++i) {
        features[codes[r].indices[i]].push_back({pool[begin + r], codes[r].values[i]});
      }
    }
  }
  return FeatureActivationIndex(std::move(pool), std::move(features));
}

const std::vector<ActivationEntry>& FeatureActivationIndex::ranked(std::uint32_t feature) const {
  if (feature >= features_.size()) {
    throw ParameterError("feature " + std::to_string(feature) + " out of range (" +
                         std::to_string(features_.size()) + " features)");
  }
  return features_[feature];
}

double FeatureActivationIndex::density(std::uint32_t feature) const {
  const auto& r = ranked(feature);
  return pool_.empty() ? 0.0 : static_cast<double>(r.size()) / static_cast<double>(pool_.size());
}

double FeatureActivationIndex::max_activation(std::uint32_t feature) const {
  const auto& r = ranked(feature);
  return r.empty() ? 0.0 : r.front().value;
}

double FeatureActivationIndex::activation(std::uint32_t feature, std::uint64_t row) const {
  for (const auto& e : ranked(feature))
    if (e.row == row) return e.value;
  return 0.0;
}

std::vector<std::uint64_t> FeatureActivationIndex::zero_rows(std::uint32_t feature) const {
  std::vector<std::uint64_t> active;
  for (const auto& e : ranked(feature)) active.push_back(e.row);
  std::sort(active.begin(), active.end());
  std::vector<std::uint64_t> out;
  out.reserve(pool_.size() - active.size());
  std::set_difference(pool_.begin(), pool_.end(), active.begin(), active.end(), std::back_inserter(out));
  return out;
}

std::vector<double> positive_quantiles(const FeatureActivationIndex& index, std::uint32_t feature,
                                       const std::vector<double>& qs) {
  const auto& ranked = index.ranked(feature);
  if (ranked.empty()) return {};
  std::vector<double> xs;
  xs.reserve(ranked.size());
  for (auto it = ranked.rbegin(); it != ranked.rend(); ++it) xs.push_back(it->value);
  std::sort(xs.begin(), xs.end());  // ties broken by row, so re-sort by value only
  std::vector<double> out;
  for (const double q : qs) {
    if (!(q >= 0.0 && q <= 1.0)) throw ParameterError("quantile must lie in [0, 1]");
    out.push_back(quantile_sorted(xs, q));
  }
  return out;
}

int scale_activation(double a, double max_a, double eps) {
  if (!(a > 0.0)) return 0;
  if (!(max_a > 0.0)) throw ParameterError("positive activation with non-positive maximum");
  const double s = std::floor(10.0 * a / (max_a * (1.0 + eps)));
  return static_cast<int>(std::clamp(s, 1.0, 9.0));
}

std::string Exemplar::render() const { return context_text + "[[" + current_token + "]]" + continuation; }

Exemplar make_exemplar(const ActivationStore& store, std::uint64_t row, double activation, double max_activation,
                       const ExemplarOptions& opts) {
  const auto& rec = store.record(row);
  const auto& rows = store.sequence_rows(rec.sequence_id);
  Exemplar ex;
  ex.row = row;
  ex.activation = activation;
  ex.activation_scaled = scale_activation(activation, max_activation);
  const auto at = std::find(rows.begin(), rows.end(), row);
  for (auto it = rows.begin(); it != at; ++it) ex.context_text += token_text(store.record(*it), opts.image_literal);
  ex.current_token = token_text(rec, opts.image_literal);
  std::string after;
  for (auto it = at + 1; it < rows.end(); ++it) {
    after += token_text(store.record(*it), opts.image_literal);
    if (after.size() > 4 * opts.continuation_chars) break;  // enough bytes for any UTF-8 text
  }
  ex.continuation = truncate_code_points(after, opts.continuation_chars);
  if (opts.image_descriptions) {
    if (const auto it = opts.image_descriptions->find(rec.sequence_id); it != opts.image_descriptions->end()) {
      ex.image_description = it->second;
    }
  }
  return ex;
}

ExemplarSelection select_interpretation_rows(const FeatureActivationIndex& index, std::uint32_t feature,
                                             std::uint64_t seed, std::size_t per_side) {
  ExemplarSelection sel;
  const auto& ranked = index.ranked(feature);
  if (ranked.empty()) {
    sel.no_positives = true;
    return sel;
  }
  const auto candidates = top_rows(ranked, std::max(ceil_div(ranked.size(), 10), std::min(per_side, ranked.size())));
  const auto zeros = index.zero_rows(feature);
  const auto n = std::min({per_side, candidates.size(), zeros.size()});
  Rng rng = feature_rng(seed, feature, kInterpStream);
  sel.positive_rows = sample_without_replacement(candidates, n, rng);
  sel.negative_rows = sample_without_replacement(zeros, n, rng);
  return sel;
}

ScoringSelection select_scoring_rows(const FeatureActivationIndex& index, std::uint32_t feature, std::uint64_t seed,
                                     const std::unordered_set<std::uint64_t>& interp_rows,
                                     std::size_t max_positives, std::size_t total) {
  ScoringSelection sel;
  std::vector<ActivationEntry> eligible;
  for (const auto& e : index.ranked(feature))
    if (!interp_rows.contains(e.row)) eligible.push_back(e);
  std::vector<std::uint64_t> zeros;
  for (const auto r : index.zero_rows(feature))
    if (!interp_rows.contains(r)) zeros.push_back(r);

  const auto n_pos = std::min({max_positives, eligible.size(), total});
  const auto candidates = top_rows(eligible, std::max(ceil_div(eligible.size(), 5), n_pos));
  const auto n_neg = std::min(total - n_pos, zeros.size());
  Rng rng = feature_rng(seed, feature, kScoringStream);
  sel.positive_rows = sample_without_replacement(candidates, n_pos, rng);
  sel.negative_rows = sample_without_replacement(zeros, n_neg, rng);
  sel.imbalanced = n_pos != n_neg;
  sel.unscoreable = n_pos == 0;
  return sel;
}

std::vector<Exemplar> select_interpretation_exemplars(const FeatureActivationIndex& index, const ActivationStore& store,
                                                      std::uint32_t feature, std::uint64_t seed,
                                                      const ExemplarOptions& opts, std::size_t per_side) {
  const auto sel = select_interpretation_rows(index, feature, seed, per_side);
  const double max_a = index.max_activation(feature);
  std::vector<Exemplar> out;
  for (const auto r : sel.positive_rows) out.push_back(make_exemplar(store, r, index.activation(feature, r), max_a, opts));
  for (const auto r : sel.negative_rows) out.push_back(make_exemplar(store, r, 0.0, max_a, opts));
  Rng rng = feature_rng(seed, feature, kOrderStream);
  shuffle(out, rng);
  return out;
}

std::vector<ChatMessage> build_interpretation_prompt(const PromptLibrary& lib, const std::vector<Exemplar>& exemplars) {
  std::vector<InterpretationSample> samples;
  samples.reserve(exemplars.size());
  for (const auto& e : exemplars) samples.push_back({e.render(), e.activation_scaled, e.image_description});
  return build_interpretation_messages(lib, samples);
}

DetectionMetrics detection_metrics(const std::vector<int>& labels, const std::vector<std::optional<int>>& predictions) {
  if (labels.size() != predictions.size()) throw ShapeError("labels and predictions differ in length");
  DetectionMetrics m;
  for (std::size_t i = 0; i < labels.size(); ++i) {
    if (!predictions[i]) continue;
    const bool truth = labels[i] != 0, pred = *predictions[i] != 0;
    if (truth && pred) ++m.tp;
    else if (!truth && pred) ++m.fp;
    else if (truth) ++m.fn;
    else ++m.tn;
  }
  const auto ratio = [](std::size_t a, std::size_t b) { return b == 0 ? 0.0 : static_cast<double>(a) / static_cast<double>(b); };
  m.precision = ratio(m.tp, m.tp + m.fp);
  m.recall = ratio(m.tp, m.tp + m.fn);
  m.f1 = m.precision + m.recall > 0.0 ? 2.0 * m.precision * m.recall / (m.precision + m.recall) : 0.0;
  return m;
}

ScoreResult score_interpretation(const LlmClient& client, const PromptLibrary& lib, const std::string& explanation,
                                 const std::vector<LabelledSample>& samples) {
  ScoreResult out;
  out.predictions.resize(samples.size());
  parallel_for(samples.size(), client.config().max_in_flight, [&](std::size_t i) {
    const auto res = client.complete(client.make_request("score", build_scoring_messages(lib, explanation, samples[i].text)));
    if (res.value) out.predictions[i] = parse_prediction(*res.value);
  });
  std::vector<int> labels;
  for (const auto& s : samples) labels.push_back(s.label);
  out.abstentions = static_cast<std::size_t>(std::count(out.predictions.begin(), out.predictions.end(), std::nullopt));
  out.metrics = detection_metrics(labels, out.predictions);
  return out;
}

std::string_view to_string(InterpretationStatus s) {
  switch (s) {
    case InterpretationStatus::Ok: return "ok";
    case InterpretationStatus::NoPositives: return "no_positives";
    case InterpretationStatus::Failed: return "failed";
    case InterpretationStatus::Unscoreable: return "unscoreable";
  }
  return "?";
}

InterpretationStatus parse_interpretation_status(std::string_view s) {
  for (const auto v : {InterpretationStatus::Ok, InterpretationStatus::NoPositives, InterpretationStatus::Failed,
                       InterpretationStatus::Unscoreable}) {
    if (to_string(v) == s) return v;
  }
  throw FormatError("unknown interpretation status '" + std::string(s) + "'");
}

nlohmann::json to_json(const FeatureInterpretation& f) {
  const auto opt = [](const std::optional<double>& v) { return v ? nlohmann::json(*v) : nlohmann::json(nullptr); };
  nlohmann::json j;
  j["feature_id"] = f.feature_id;
  j["status"] = to_string(f.status);
  j["explanation"] = f.explanation;
  j["rationale"] = f.rationale;
  j["f1"] = opt(f.f1);
  j["precision"] = opt(f.precision);
  j["recall"] = opt(f.recall);
  j["n_pos"] = f.n_pos;
  j["n_neg"] = f.n_neg;
  j["abstentions"] = f.abstentions;
  j["imbalanced"] = f.imbalanced;
  j["error"] = f.error;
  return j;
}

FeatureInterpretation feature_interpretation_from_json(const nlohmann::json& j) {
  const auto opt = [&](const char* key) {
    return j.contains(key) && !j[key].is_null() ? std::optional<double>(j[key].get<double>()) : std::nullopt;
  };
  try {
    FeatureInterpretation f;
    f.feature_id = j.at("feature_id").get<std::uint32_t>();
    f.status = parse_interpretation_status(j.at("status").get<std::string>());
    f.explanation = j.value("explanation", "");
    f.rationale = j.value("rationale", "");
    f.f1 = opt("f1");
    f.precision = opt("precision");
    f.recall = opt("recall");
    f.n_pos = j.value("n_pos", std::size_t{0});
    f.n_neg = j.value("n_neg", std::size_t{0});
    f.abstentions = j.value("abstentions", std::size_t{0});
    f.imbalanced = j.value("imbalanced", false);
    f.error = j.value("error", "");
    return f;
  } catch (const nlohmann::json::exception& e) {
    throw FormatError(std::string("malformed interpretation record: ") + e.what());
  }
}

FeatureInterpretation explain_feature(const FeatureActivationIndex& index, const ActivationStore& store,
                                      const LlmClient& client, const PromptLibrary& lib, std::uint32_t feature,
                                      std::uint64_t seed, const InterpretOptions& opts) {
  FeatureInterpretation out;
  out.feature_id = feature;
  if (index.ranked(feature).empty()) {
    out.status = InterpretationStatus::NoPositives;
    return out;
  }
  const auto exemplars = select_interpretation_exemplars(index, store, feature, seed, opts.exemplar, opts.per_side);
  const auto reply = client.complete(client.make_request("interpret", build_interpretation_prompt(lib, exemplars)));
  if (!reply.value || !reply.value->is_object() || !reply.value->contains("explanation") ||
      !(*reply.value)["explanation"].is_string()) {
    out.status = InterpretationStatus::Failed;
    out.error = reply.value ? "reply lacks a string 'explanation'" : reply.error;
    return out;
  }
  out.explanation = (*reply.value)["explanation"].get<std::string>();
  if (const auto it = reply.value->find("rationale"); it != reply.value->end() && it->is_string()) {
    out.rationale = it->get<std::string>();
  }
  return out;
}

void score_feature(const FeatureActivationIndex& index, const ActivationStore& store, const LlmClient& client,
                   const PromptLibrary& lib, FeatureInterpretation& item, std::uint64_t seed,
                   const InterpretOptions& opts) {
  if (item.status != InterpretationStatus::Ok) return;
  const auto feature = item.feature_id;
  const auto sel = select_interpretation_rows(index, feature, seed, opts.per_side);
  std::unordered_set<std::uint64_t> used(sel.positive_rows.begin(), sel.positive_rows.end());
  used.insert(sel.negative_rows.begin(), sel.negative_rows.end());
  const auto scoring = select_scoring_rows(index, feature, seed, used, opts.max_scoring_positives, opts.scoring_total);
  item.n_pos = scoring.positive_rows.size();
  item.n_neg = scoring.negative_rows.size();
  item.imbalanced = scoring.imbalanced;
  if (scoring.unscoreable) {
    item.status = InterpretationStatus::Unscoreable;
    return;
  }
  const double max_a = index.max_activation(feature);
  std::vector<LabelledSample> samples;
  for (const auto r : scoring.positive_rows) {
    samples.push_back({r, make_exemplar(store, r, index.activation(feature, r), max_a, opts.exemplar).render(), 1});
  }
  for (const auto r : scoring.negative_rows) samples.push_back({r, make_exemplar(store, r, 0.0, max_a, opts.exemplar).render(), 0});
  Rng rng = feature_rng(seed, feature, kOrderStream + kScoringStream);
  shuffle(samples, rng);

  const auto score = score_interpretation(client, lib, item.explanation, samples);
  item.abstentions = score.abstentions;
  if (score.abstentions == samples.size()) {
    item.status = InterpretationStatus::Failed;
    item.error = "every scoring reply abstained";
    return;
  }
  item.f1 = score.metrics.f1;
  item.precision = score.metrics.precision;
  item.recall = score.metrics.recall;
}

FeatureInterpretation interpret_feature(const FeatureActivationIndex& index, const ActivationStore& store,
                                        const LlmClient& client, const PromptLibrary& lib, std::uint32_t feature,
                                        std::uint64_t seed, const InterpretOptions& opts) {
  auto out = explain_feature(index, store, client, lib, feature, seed, opts);
  score_feature(index, store, client, lib, out, seed, opts);
  return out;
}

InterpretabilitySummary summarize_interpretability(const std::vector<FeatureInterpretation>& items,
                                                   const std::vector<double>& thresholds) {
  InterpretabilitySummary s;
  s.features = items.size();
  for (const double t : thresholds) s.above.emplace_back(t, 0);
  for (const auto& f : items) {
    if (f.status != InterpretationStatus::Ok || !f.f1) continue;
    ++s.scored;
    for (auto& [t, count] : s.above)
      if (*f.f1 > t) ++count;
  }
  return s;
}

nlohmann::json to_json(const InterpretabilitySummary& s) {
  nlohmann::json above = nlohmann::json::array();
  for (const auto& [t, count] : s.above) {
    above.push_back({{"threshold", t},
                     {"count", count},
                     {"fraction_of_scored", s.scored ? static_cast<double>(count) / static_cast<double>(s.scored) : 0.0}});
  }
  return nlohmann::json{{"features", s.features}, {"scored", s.scored}, {"f1_above", above}};
}

std::vector<FeatureStats> feature_stats(const FeatureActivationIndex& index) {
  static const std::vector<double> kDeciles{0.1, 0.2, 0.3, 0.4, 0.5, 0.6, 0.7, 0.8, 0.9};
  std::vector<FeatureStats> out;
  out.reserve(index.feature_count());
  for (std::uint32_t f = 0; f < index.feature_count(); ++f) {
    out.push_back({f, index.ranked(f).size(), index.density(f), index.max_activation(f), positive_quantiles(index, f, kDeciles)});
  }
  return out;
}

nlohmann::json to_json(const FeatureStats& s) {
  return nlohmann::json{{"feature_id", s.feature_id},
                        {"active_rows", s.active_rows},
                        {"density", s.density},
                        {"max_activation", s.max_activation},
                        {"deciles", s.deciles}};
}

std::vector<DensityBin> density_histogram(const std::vector<FeatureStats>& stats, int min_decades, int per_decade) {
  if (min_decades <= 0 || per_decade <= 0) throw ParameterError("density histogram needs positive bin settings");
  const auto nbins = static_cast<std::size_t>(min_decades) * static_cast<std::size_t>(per_decade);
  const double inf = std::numeric_limits<double>::infinity();
  std::vector<DensityBin> bins{{-inf, -inf, 0}};
  for (std::size_t i = 0; i < nbins; ++i) {
    bins.push_back({-min_decades + static_cast<double>(i) / per_decade,
                    -min_decades + static_cast<double>(i + 1) / per_decade, 0});
  }
  for (const auto& s : stats) {
    if (!(s.density > 0.0)) {
      ++bins[0].count;
      continue;
    }
    const double pos = (std::log10(s.density) + min_decades) * per_decade;
    const auto i = static_cast<std::size_t>(std::clamp(std::floor(pos), 0.0, static_cast<double>(nbins - 1)));
    ++bins[1 + i].count;
  }
  return bins;
}

std::string density_histogram_csv(const std::vector<DensityBin>& bins) {
  std::ostringstream out;
  out << "log10_density_lower,log10_density_upper,features\n";
  for (const auto& b : bins) {
    if (std::isinf(b.lower)) {
      out << "zero,zero," << b.count << "\n";
    } else {
      out << b.lower << "," << b.upper << "," << b.count << "\n";
    }
  }
  return out.str();
}

}  // namespace saeinterp
