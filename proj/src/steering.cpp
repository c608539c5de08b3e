// Copyright (c) 2026 The saeinterp Authors
// SPDX-License-Identifier: Apache-2.0

#include "saeinterp/steering.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <set>
#include <sstream>

#include "saeinterp/errors.hpp"
#include "saeinterp/rng.hpp"

namespace saeinterp {

void SteeringSpec::validate(std::size_t m) const {
  if (feature_id >= m) {
    throw ParameterError("steering feature " + std::to_string(feature_id) + " out of range (m = " + std::to_string(m) + ")");
  }
  if (!std::isfinite(steer_alpha) || steer_alpha == 0.0) throw ParameterError("steer_alpha must be finite and nonzero");
}

Vector steering_vector(const SaeParams& params, std::uint32_t feature) {
  if (feature >= static_cast<std::size_t>(params.w_dec.cols())) {
    throw ParameterError("feature " + std::to_string(feature) + " out of range (m = " +
                         std::to_string(params.w_dec.cols()) + ")");
  }
  return params.w_dec.col(feature);
}

ToyLinearGenerator::ToyLinearGenerator(std::vector<std::string> vocab, RowMatrix embeddings, RowMatrix readout,
                                       std::size_t max_new_tokens, std::string stop_token)
    : vocab_(std::move(vocab)),
      embeddings_(std::move(embeddings)),
      readout_(std::move(readout)),
      max_new_tokens_(max_new_tokens) {
  const auto v = vocab_.size();
  if (v == 0) throw ParameterError("toy generator needs a vocabulary");
  if (static_cast<std::size_t>(embeddings_.rows()) != v || static_cast<std::size_t>(readout_.rows()) != v ||
      embeddings_.cols() != readout_.cols() || embeddings_.cols() == 0) {
    throw ShapeError("toy generator: embeddings and readout must both be [vocab x n]");
  }
  for (std::size_t i = 0; i < v; ++i) {
    if (!ids_.emplace(vocab_[i], i).second) throw ParameterError("duplicate vocabulary entry '" + vocab_[i] + "'");
    if (vocab_[i].empty() || vocab_[i].find_first_of(" \t\r\n") != std::string::npos) {
      throw ParameterError("vocabulary entries must be non-empty and free of whitespace");
    }
  }
  const auto stop = ids_.find(stop_token);
  if (stop == ids_.end()) throw ParameterError("stop token '" + stop_token + "' is not in the vocabulary");
  stop_id_ = stop->second;
}

ToyLinearGenerator ToyLinearGenerator::random(std::size_t vocab_size, std::size_t n, std::uint64_t seed,
                                              std::size_t max_new_tokens) {
  if (vocab_size < 3 || n == 0) throw ParameterError("toy generator needs vocab_size >= 3 and n >= 1");
  std::vector<std::string> vocab{"<unk>", "</s>"};
  for (std::size_t i = 2; i < vocab_size; ++i) vocab.push_back("t" + std::to_string(i));
  Rng rng(seed);
  NormalSampler normal;
  RowMatrix emb(vocab_size, n), readout(vocab_size, n);
  for (Eigen::Index i = 0; i < emb.size(); ++i) emb.data()[i] = normal(rng);
  for (Eigen::Index i = 0; i < readout.size(); ++i) readout.data()[i] = normal(rng);
  readout.rowwise().normalize();
  return ToyLinearGenerator(std::move(vocab), std::move(emb), std::move(readout), max_new_tokens);
}

std::vector<std::size_t> ToyLinearGenerator::tokenize(const std::string& text) const {
  std::vector<std::size_t> out;
  std::istringstream in(text);
  const auto unk = ids_.find("<unk>");
  for (std::string word; in >> word;) {
    if (const auto it = ids_.find(word); it != ids_.end()) {
      out.push_back(it->second);
    } else if (unk != ids_.end()) {
      out.push_back(unk->second);
    } else {
      throw DataError("word '" + word + "' is not in the toy vocabulary");
    }
  }
  return out;
}

std::string ToyLinearGenerator::generate(const std::string& prompt, const HiddenTransform& transform,
                                         const StepObserver& observer) const {
  auto context = tokenize(prompt);
  if (context.empty()) throw DataError("cannot generate from an empty prompt");
  const auto n = embeddings_.cols();
  std::string out;
  for (std::size_t step = 0; step < max_new_tokens_; ++step) {
    RowMatrix hidden(static_cast<Eigen::Index>(context.size()), n);
    Eigen::RowVectorXd sum = Eigen::RowVectorXd::Zero(n);
    for (std::size_t t = 0; t < context.size(); ++t) {
      sum += embeddings_.row(static_cast<Eigen::Index>(context[t]));
      hidden.row(static_cast<Eigen::Index>(t)) = sum / static_cast<double>(t + 1);
    }
    if (transform) {
      RowMatrix changed = transform(hidden);
      if (changed.rows() != hidden.rows() || changed.cols() != hidden.cols()) {
        throw ShapeError("hidden-state transform changed the shape");
      }
      hidden = std::move(changed);
    }
    const Vector logits = readout_ * hidden.row(hidden.rows() - 1).transpose();
    Eigen::Index best = 0;
    for (Eigen::Index i = 1; i < logits.size(); ++i)
      if (logits[i] > logits[best]) best = i;  // strict: ties keep the lower id
    const auto token = static_cast<std::size_t>(best);
    if (observer) observer(StepObservation{step, &context, &logits, token});
    if (token == stop_id_) break;
    if (!out.empty()) out += ' ';
    out += vocab_[token];
    context.push_back(token);
  }
  return out;
}

std::string apply_steering(const Generator& generator, const std::string& prompt, const Vector& vec, double steer_alpha,
                           const StepObserver& observer) {
  if (static_cast<std::size_t>(vec.size()) != generator.hidden_dim()) {
    throw ShapeError("steering vector width " + std::to_string(vec.size()) + " does not match generator width " +
                     std::to_string(generator.hidden_dim()));
  }
  const Eigen::RowVectorXd shift = steer_alpha * vec.transpose();
  return generator.generate(
      prompt, [&](const RowMatrix& h) -> RowMatrix { return h.rowwise() + shift; }, observer);
}

std::string_view to_string(SteeringCategory c) {
  switch (c) {
    case SteeringCategory::OnOnly: return "OnOnly";
    case SteeringCategory::Both: return "Both";
    case SteeringCategory::OffOnly: return "OffOnly";
    case SteeringCategory::None: return "None";
  }
  return "?";
}

SteeringCategory parse_steering_category(std::string_view s) {
  for (const auto c : {SteeringCategory::OnOnly, SteeringCategory::Both, SteeringCategory::OffOnly, SteeringCategory::None}) {
    if (to_string(c) == s) return c;
  }
  throw FormatError("unknown steering category '" + std::string(s) + "'");
}

SteeringCategory categorize(double on_target, double off_target, double threshold) {
  const bool on = on_target > threshold, off = off_target > threshold;
  if (on && off) return SteeringCategory::Both;
  if (on) return SteeringCategory::OnOnly;
  if (off) return SteeringCategory::OffOnly;
  return SteeringCategory::None;
}

JudgeVerdict judge_steering(const LlmClient& client, const PromptLibrary& lib, const std::string& original,
                            const std::string& steered, const std::string& concept_text, SteeringDirection direction) {
  JudgeVerdict v;
  if (original == steered) {
    v.on_rationale = v.off_rationale = "identical texts";
    return v;
  }
  const auto res =
      client.complete(client.make_request("judge", build_judge_messages(lib, original, steered, concept_text, direction)));
  if (!res.value) {
    v.failed = true;
    v.error = res.error;
    return v;
  }
  const auto& j = *res.value;
  const auto score = [&](const char* key) -> std::optional<double> {
    if (!j.is_object() || !j.contains(key) || !j[key].is_number()) return std::nullopt;
    const double x = j[key].get<double>();
    if (!(x >= 0.0 && x <= 1.0)) return std::nullopt;
    return x;
  };
  const auto on = score("on_target_score"), off = score("off_target_score");
  if (!on || !off) {
    v.failed = true;
    v.error = "judge reply lacks scores in [0, 1]: " + j.dump().substr(0, 200);
    return v;
  }
  v.on_target = *on;
  v.off_target = *off;
  const auto text = [&](const char* key) {
    return j.contains(key) && j[key].is_string() ? j[key].get<std::string>() : std::string();
  };
  v.on_rationale = text("on_target_score_reasoning");
  v.off_rationale = text("off_target_score_reasoning");
  return v;
}

nlohmann::json to_json(const SteeringGeneration& g) {
  return nlohmann::json{{"sample_id", g.sample_id},         {"feature_id", g.feature_id},
                        {"steer_alpha", g.steer_alpha},     {"prompt", g.prompt},
                        {"original_text", g.original_text}, {"steered_text", g.steered_text}};
}

SteeringGeneration steering_generation_from_json(const nlohmann::json& j) {
  try {
    return SteeringGeneration{j.at("sample_id"),     j.at("feature_id"),    j.at("steer_alpha"),
                              j.at("prompt"),        j.at("original_text"), j.at("steered_text")};
  } catch (const nlohmann::json::exception& e) {
    throw FormatError(std::string("malformed steering generation: ") + e.what());
  }
}

std::vector<SteeringGeneration> generate_steered(const Generator& generator, const SaeParams& params,
                                                 const std::vector<SteeringSpec>& specs,
                                                 const std::vector<SteeringPrompt>& prompts) {
  const auto m = static_cast<std::size_t>(params.w_dec.cols());
  for (const auto& s : specs) s.validate(m);
  std::vector<std::string> originals;
  originals.reserve(prompts.size());
  for (const auto& p : prompts) originals.push_back(generator.generate(p.text));
  std::vector<SteeringGeneration> out;
  for (const auto& s : specs) {
    const Vector vec = steering_vector(params, s.feature_id);
    for (std::size_t i = 0; i < prompts.size(); ++i) {
      out.push_back({prompts[i].id, s.feature_id, s.steer_alpha, prompts[i].text, originals[i],
                     apply_steering(generator, prompts[i].text, vec, s.steer_alpha)});
    }
  }
  return out;
}

nlohmann::json to_json(const SteeringOutcome& o) {
  return nlohmann::json{{"sample_id", o.sample_id},
                        {"feature_id", o.feature_id},
                        {"steer_alpha", o.steer_alpha},
                        {"original_text", o.original_text},
                        {"steered_text", o.steered_text},
                        {"on_target", o.on_target},
                        {"off_target", o.off_target},
                        {"on_target_rationale", o.on_rationale},
                        {"off_target_rationale", o.off_rationale},
                        {"category", to_string(o.category)},
                        {"judge_failed", o.judge_failed},
                        {"error", o.error}};
}

SteeringOutcome steering_outcome_from_json(const nlohmann::json& j) {
  try {
    SteeringOutcome o;
    o.sample_id = j.at("sample_id");
    o.feature_id = j.at("feature_id");
    o.steer_alpha = j.at("steer_alpha");
    o.original_text = j.at("original_text");
    o.steered_text = j.at("steered_text");
    o.on_target = j.at("on_target");
    o.off_target = j.at("off_target");
    o.on_rationale = j.value("on_target_rationale", "");
    o.off_rationale = j.value("off_target_rationale", "");
    o.category = parse_steering_category(j.at("category").get<std::string>());
    o.judge_failed = j.value("judge_failed", false);
    o.error = j.value("error", "");
    return o;
  } catch (const nlohmann::json::exception& e) {
    throw FormatError(std::string("malformed steering outcome: ") + e.what());
  }
}

std::vector<SteeringOutcome> judge_generations(const LlmClient& client, const PromptLibrary& lib,
                                               const std::vector<SteeringGeneration>& generations,
                                               const std::map<std::uint32_t, std::string>& concepts, double threshold) {
  std::vector<SteeringOutcome> out(generations.size());
  parallel_for(generations.size(), client.config().max_in_flight, [&](std::size_t i) {
    const auto& g = generations[i];
    auto& o = out[i];
    o.sample_id = g.sample_id;
    o.feature_id = g.feature_id;
    o.steer_alpha = g.steer_alpha;
    o.original_text = g.original_text;
    o.steered_text = g.steered_text;
    const auto concept_it = concepts.find(g.feature_id);
    if (concept_it == concepts.end() || concept_it->second.empty()) {
      o.judge_failed = true;
      o.error = "no explanation for feature " + std::to_string(g.feature_id);
      return;
    }
    const auto dir = g.steer_alpha > 0 ? SteeringDirection::Positive : SteeringDirection::Negative;
    const auto v = judge_steering(client, lib, g.original_text, g.steered_text, concept_it->second, dir);
    o.on_target = v.on_target;
    o.off_target = v.off_target;
    o.on_rationale = v.on_rationale;
    o.off_rationale = v.off_rationale;
    o.judge_failed = v.failed;
    o.error = v.error;
    o.category = categorize(v.on_target, v.off_target, threshold);
  });
  return out;
}

double Stratification::proportion(SteeringCategory c) const {
  if (total == 0) return 0.0;
  const auto it = counts.find(c);
  return it == counts.end() ? 0.0 : static_cast<double>(it->second) / static_cast<double>(total);
}

Stratification stratify(const std::vector<SteeringOutcome>& outcomes) {
  Stratification s;
  for (const auto c : {SteeringCategory::OnOnly, SteeringCategory::Both, SteeringCategory::OffOnly, SteeringCategory::None}) {
    s.counts[c] = 0;
  }
  for (const auto& o : outcomes) {
    if (o.judge_failed) {
      ++s.judge_failed;
      continue;
    }
    ++s.counts[o.category];
    ++s.total;
  }
  return s;
}

std::vector<FeatureStratification> stratify_by_feature(const std::vector<SteeringOutcome>& outcomes) {
  std::map<std::pair<std::uint32_t, double>, std::vector<SteeringOutcome>> groups;
  for (const auto& o : outcomes) groups[{o.feature_id, o.steer_alpha}].push_back(o);
  std::vector<FeatureStratification> rows;
  for (const auto& [key, group] : groups) {
    FeatureStratification r;
    r.feature_id = key.first;
    r.steer_alpha = key.second;
    r.strata = stratify(group);
    for (const auto& o : group) {
      if (o.judge_failed) continue;
      r.mean_on_target += o.on_target;
      r.mean_off_target += o.off_target;
    }
    if (r.strata.total > 0) {
      r.mean_on_target /= static_cast<double>(r.strata.total);
      r.mean_off_target /= static_cast<double>(r.strata.total);
    }
    rows.push_back(r);
  }
  return rows;
}

namespace {

constexpr SteeringCategory kCategories[] = {SteeringCategory::OnOnly, SteeringCategory::Both, SteeringCategory::OffOnly,
                                            SteeringCategory::None};

nlohmann::json strata_json(const Stratification& s) {
  nlohmann::json counts, props;
  for (const auto c : kCategories) {
    counts[std::string(to_string(c))] = s.counts.at(c);
    props[std::string(to_string(c))] = s.proportion(c);
  }
  return nlohmann::json{{"total", s.total}, {"judge_failed", s.judge_failed}, {"counts", counts}, {"proportions", props}};
}

double pearson(const std::vector<double>& a, const std::vector<double>& b) {
  const auto n = static_cast<double>(a.size());
  const double ma = std::accumulate(a.begin(), a.end(), 0.0) / n, mb = std::accumulate(b.begin(), b.end(), 0.0) / n;
  double sab = 0, saa = 0, sbb = 0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    sab += (a[i] - ma) * (b[i] - mb);
    saa += (a[i] - ma) * (a[i] - ma);
    sbb += (b[i] - mb) * (b[i] - mb);
  }
  if (saa == 0.0 || sbb == 0.0) throw DataError("rank correlation is undefined for a constant input");
  return sab / std::sqrt(saa * sbb);
}

}  // namespace

nlohmann::json stratification_json(const std::vector<SteeringOutcome>& outcomes) {
  nlohmann::json features = nlohmann::json::array();
  for (const auto& r : stratify_by_feature(outcomes)) {
    auto j = strata_json(r.strata);
    j["feature_id"] = r.feature_id;
    j["steer_alpha"] = r.steer_alpha;
    j["mean_on_target"] = r.mean_on_target;
    j["mean_off_target"] = r.mean_off_target;
    features.push_back(j);
  }
  return nlohmann::json{{"overall", strata_json(stratify(outcomes))}, {"features", features}};
}

std::string stratification_csv(const std::vector<FeatureStratification>& rows) {
  std::ostringstream out;
  out.precision(17);
  out << "feature_id,steer_alpha,samples,judge_failed,on_only,both,off_only,none,mean_on_target,mean_off_target\n";
  for (const auto& r : rows) {
    out << r.feature_id << ',' << r.steer_alpha << ',' << r.strata.total << ',' << r.strata.judge_failed;
    for (const auto c : kCategories) out << ',' << r.strata.proportion(c);
    out << ',' << r.mean_on_target << ',' << r.mean_off_target << '\n';
  }
  return out.str();
}

std::vector<double> average_ranks(const std::vector<double>& xs) {
  std::vector<std::size_t> order(xs.size());
  std::iota(order.begin(), order.end(), 0);
  std::stable_sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) { return xs[a] < xs[b]; });
  std::vector<double> ranks(xs.size());
  for (std::size_t i = 0; i < order.size();) {
    std::size_t j = i;
    while (j + 1 < order.size() && xs[order[j + 1]] == xs[order[i]]) ++j;
    const double r = (static_cast<double>(i) + static_cast<double>(j)) / 2.0 + 1.0;
    for (std::size_t k = i; k <= j; ++k) ranks[order[k]] = r;
    i = j + 1;
  }
  return ranks;
}

double spearman_rho(const std::vector<double>& xs, const std::vector<double>& ys) {
  if (xs.size() != ys.size()) throw ShapeError("correlation inputs differ in length");
  if (xs.size() < 3) throw DataError("rank correlation needs at least 3 pairs");
  for (const auto* v : {&xs, &ys})
    for (const double x : *v)
      if (!std::isfinite(x)) throw DataError("rank correlation input is not finite");
  return pearson(average_ranks(xs), average_ranks(ys));
}

CorrelationResult spearman_permutation(const std::vector<double>& xs, const std::vector<double>& ys, std::size_t n_perm,
                                       std::uint64_t seed) {
  CorrelationResult r;
  r.rho = spearman_rho(xs, ys);
  r.n = xs.size();
  const auto rx = average_ranks(xs);
  auto ry = average_ranks(ys);
  Rng rng(seed);
  // Permuted statistics equal to the observed one up to rounding must count.
  const double bar = std::abs(r.rho) - 1e-12;
  std::size_t extreme = 0;
  for (std::size_t p = 0; p < n_perm; ++p) {
    shuffle(ry, rng);
    if (std::abs(pearson(rx, ry)) >= bar) ++extreme;
  }
  r.p_value = static_cast<double>(1 + extreme) / static_cast<double>(n_perm + 1);
  return r;
}

nlohmann::json steering_correlations(const std::vector<FeatureStratification>& rows,
                                     const std::map<std::uint32_t, double>& density,
                                     const std::vector<std::uint32_t>& exclude_from_density, std::size_t n_perm,
                                     std::uint64_t seed) {
  std::map<std::uint32_t, const FeatureStratification*> pos, neg;
  for (const auto& r : rows) {
    if (r.strata.total == 0) continue;
    (r.steer_alpha > 0 ? pos : neg)[r.feature_id] = &r;
  }
  const auto test = [&](const std::vector<double>& a, const std::vector<double>& b) {
    nlohmann::json j{{"n", a.size()}};
    try {
      const auto res = spearman_permutation(a, b, n_perm, seed);
      j["rho"] = res.rho;
      j["p_value"] = res.p_value;
    } catch (const DataError& e) {
      j["rho"] = nullptr;
      j["p_value"] = nullptr;
      j["error"] = e.what();
    }
    return j;
  };
  std::vector<double> on_p, on_n, off_p, off_n;
  for (const auto& [f, r] : pos) {
    if (const auto it = neg.find(f); it != neg.end()) {
      on_p.push_back(r->mean_on_target);
      on_n.push_back(it->second->mean_on_target);
      off_p.push_back(r->mean_off_target);
      off_n.push_back(it->second->mean_off_target);
    }
  }
  const std::set<std::uint32_t> excluded(exclude_from_density.begin(), exclude_from_density.end());
  std::vector<double> dens, d_on, d_off;
  for (const auto& [f, r] : pos) {
    const auto d = density.find(f);
    if (excluded.contains(f) || d == density.end()) continue;
    dens.push_back(d->second);
    d_on.push_back(r->mean_on_target);
    d_off.push_back(r->mean_off_target);
  }
  return nlohmann::json{{"n_permutations", n_perm},
                        {"seed", seed},
                        {"on_target_positive_vs_negative", test(on_p, on_n)},
                        {"off_target_positive_vs_negative", test(off_p, off_n)},
                        {"density_vs_on_target", test(dens, d_on)},
                        {"density_vs_off_target", test(dens, d_off)}};
}

FeatureSelectionConfig feature_selection_from_json(const nlohmann::json& j) {
  if (!j.is_object()) throw ConfigError("feature selection config must be a JSON object");
  FeatureSelectionConfig c;
  for (const auto& [key, v] : j.items()) {
    try {
      if (key == "f1_threshold") c.f1_threshold = v.get<double>();
      else if (key == "manual_add") c.manual_add = v.get<std::vector<std::uint32_t>>();
      else if (key == "exclusions") c.exclusions = v.get<std::vector<std::uint32_t>>();
      else if (key == "min_density") c.min_density = v.get<double>();
      else throw ConfigError("unknown feature selection key '" + key + "'");
    } catch (const nlohmann::json::exception& e) {
      throw ConfigError("feature selection key '" + key + "': " + e.what());
    }
  }
  return c;
}

nlohmann::json to_json(const FeatureSelectionConfig& c) {
  return nlohmann::json{{"f1_threshold", c.f1_threshold},
                        {"manual_add", c.manual_add},
                        {"exclusions", c.exclusions},
                        {"min_density", c.min_density}};
}

std::vector<std::uint32_t> select_steering_features(const std::vector<FeatureInterpretation>& interpretations,
                                                    const std::vector<FeatureStats>* stats,
                                                    const FeatureSelectionConfig& cfg) {
  std::map<std::uint32_t, double> density;
  if (stats)
    for (const auto& s : *stats) density[s.feature_id] = s.density;
  std::set<std::uint32_t> out;
  for (const auto& f : interpretations) {
    if (f.status != InterpretationStatus::Ok || !f.f1 || !(*f.f1 > cfg.f1_threshold)) continue;
    if (stats) {
      const auto d = density.find(f.feature_id);
      if (d == density.end() || d->second < cfg.min_density) continue;
    }
    out.insert(f.feature_id);
  }
  out.insert(cfg.manual_add.begin(), cfg.manual_add.end());
  for (const auto e : cfg.exclusions) out.erase(e);
  return {out.begin(), out.end()};
}

}  // namespace saeinterp
