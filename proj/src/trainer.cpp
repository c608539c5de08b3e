// Copyright (c) 2026 The saeinterp Authors
// SPDX-License-Identifier: Apache-2.0

#include "saeinterp/trainer.hpp"

#include <algorithm>
#include <cmath>
#include <condition_variable>
#include <deque>
#include <exception>
#include <fstream>
#include <mutex>
#include <numeric>
#include <sstream>
#include <thread>

#include "saeinterp/checkpoint.hpp"
#include "saeinterp/errors.hpp"

namespace saeinterp {

namespace {

double parse_fraction(const nlohmann::json& v) {
  if (v.is_number()) return v.get<double>();
  if (v.is_string()) {
    const auto s = v.get<std::string>();
    const auto slash = s.find('/');
    try {
      if (slash == std::string::npos) return std::stod(s);
      return std::stod(s.substr(0, slash)) / std::stod(s.substr(slash + 1));
    } catch (const std::exception&) {
      throw ConfigError("cannot parse group fraction '" + s + "'");
    }
  }
  throw ConfigError("group fractions must be numbers or strings like \"1/16\"");
}

// Bounded producer/consumer queue of normalised batches. The producer walks
// epochs in order, so consumption order equals stream order.
class BatchPrefetcher {
 public:
  BatchPrefetcher(ActivationSource& source, std::uint32_t batch_size, std::uint64_t steps_per_epoch,
                  std::uint64_t total_steps, double scale, std::size_t depth)
      : depth_(std::max<std::size_t>(depth, 1)) {
    worker_ = std::jthread([=, this, &source](std::stop_token stop) {
      try {
        std::uint64_t produced = 0;
        for (std::uint64_t epoch = 0; produced < total_steps; ++epoch) {
          source.rewind(epoch);
          for (std::uint64_t s = 0; s < steps_per_epoch && produced < total_steps; ++s, ++produced) {
            RowMatrix batch(batch_size, static_cast<Eigen::Index>(source.dim()));
            if (source.read(batch) != batch_size) {
              throw DataError("activation source ended early in epoch " + std::to_string(epoch));
            }
            if (scale != 1.0) batch /= scale;
            std::unique_lock lock(mu_);
            cv_.wait(lock, stop, [this] { return queue_.size() < depth_; });
            if (stop.stop_requested()) return;
            queue_.push_back(std::move(batch));
            cv_.notify_all();
          }
        }
      } catch (...) {
        std::lock_guard lock(mu_);
        error_ = std::current_exception();
        cv_.notify_all();
      }
    });
  }

  RowMatrix next() {
    std::unique_lock lock(mu_);
    cv_.wait(lock, [this] { return !queue_.empty() || error_; });
    if (queue_.empty() && error_) std::rethrow_exception(error_);
    RowMatrix batch = std::move(queue_.front());
    queue_.pop_front();
    cv_.notify_all();
    return batch;
  }

 private:
  std::size_t depth_;
  std::mutex mu_;
  std::condition_variable_any cv_;
  std::deque<RowMatrix> queue_;
  std::exception_ptr error_;
  std::jthread worker_;  // last: joined before the queue is destroyed
};

struct AdamState {
  Gradients m;
  Gradients v;
  std::uint64_t t = 0;
};

template <typename Param, typename Grad>
void adam_update(Param& p, const Grad& g, Grad& m, Grad& v, double lr, double b1, double b2, double eps,
                 double bias1, double bias2) {
  m = b1 * m + (1.0 - b1) * g;
  v = b2 * v + (1.0 - b2) * g.cwiseProduct(g);
  p.array() -= lr * (m.array() / bias1) / ((v.array() / bias2).sqrt() + eps);
}

void adam_step(SaeParams& params, Gradients& g, AdamState& state, const TrainConfig& cfg, double lr) {
  // Remove the component of each decoder gradient along its (unit) atom so
  // the step stays tangent to the unit sphere before renormalisation.
  for (Eigen::Index i = 0; i < params.w_dec.cols(); ++i) {
    g.w_dec.col(i) -= params.w_dec.col(i).dot(g.w_dec.col(i)) * params.w_dec.col(i);
  }
  ++state.t;
  const double bias1 = 1.0 - std::pow(cfg.adam_beta1, static_cast<double>(state.t));
  const double bias2 = 1.0 - std::pow(cfg.adam_beta2, static_cast<double>(state.t));
  const double b1 = cfg.adam_beta1, b2 = cfg.adam_beta2, eps = cfg.adam_eps;
  adam_update(params.w_enc, g.w_enc, state.m.w_enc, state.v.w_enc, lr, b1, b2, eps, bias1, bias2);
  adam_update(params.b_enc, g.b_enc, state.m.b_enc, state.v.b_enc, lr, b1, b2, eps, bias1, bias2);
  adam_update(params.w_dec, g.w_dec, state.m.w_dec, state.v.w_dec, lr, b1, b2, eps, bias1, bias2);
  adam_update(params.b_dec, g.b_dec, state.m.b_dec, state.v.b_dec, lr, b1, b2, eps, bias1, bias2);
  for (Eigen::Index i = 0; i < params.w_dec.cols(); ++i) {
    const double norm = params.w_dec.col(i).norm();
    if (norm > 0.0) params.w_dec.col(i) /= norm;
  }
}

std::string grad_diagnostics(const Gradients& g) {
  std::ostringstream out;
  out << "|dW_enc|=" << g.w_enc.norm() << " |db_enc|=" << g.b_enc.norm() << " |dW_dec|=" << g.w_dec.norm()
      << " |db_dec|=" << g.b_dec.norm();
  return out.str();
}

}  // namespace

void TrainConfig::validate() const {
  if (batch_size == 0) throw ConfigError("batch_size must be positive");
  if (epochs == 0) throw ConfigError("epochs must be positive");
  if (lr && (!std::isfinite(*lr) || *lr < 0.0)) throw ConfigError("lr must be 'auto' or a non-negative number");
  if (!std::isfinite(aux_alpha) || aux_alpha < 0.0) throw ConfigError("aux_alpha must be non-negative");
  if (!(threshold_beta > 0.0 && threshold_beta < 1.0)) throw ConfigError("threshold_beta must lie in (0, 1)");
  if (dead_tokens_threshold == 0) throw ConfigError("dead_tokens_threshold must be positive");
  if (k == 0) throw ConfigError("k must be positive");
  if (expansion_factor == 0) throw ConfigError("expansion_factor must be positive");
  if (log_every == 0) throw ConfigError("log_every must be positive");
  if (group_fractions.empty()) throw ConfigError("group_fractions must not be empty");
  double sum = 0.0;
  for (const double f : group_fractions) {
    if (!(f > 0.0)) throw ConfigError("group fractions must be positive");
    sum += f;
  }
  if (std::abs(sum - 1.0) > 1e-12) {
    std::ostringstream out;
    out.precision(17);
    out << "group fractions must sum to 1 (got " << sum << ")";
    throw ConfigError(out.str());
  }
}

TrainConfig train_config_from_json(const nlohmann::json& j, TrainConfig cfg) {
  if (!j.is_object()) throw ConfigError("train config must be a JSON object");
  for (const auto& [key, v] : j.items()) {
    try {
      if (key == "arch") cfg.arch = parse_architecture(v.get<std::string>());
      else if (key == "batch_size") cfg.batch_size = v.get<std::uint32_t>();
      else if (key == "epochs") cfg.epochs = v.get<std::uint32_t>();
      else if (key == "lr") {
        if (v.is_string() && v.get<std::string>() == "auto") cfg.lr.reset();
        else cfg.lr = v.get<double>();
      } else if (key == "aux_alpha") cfg.aux_alpha = v.get<double>();
      else if (key == "aux_k") cfg.aux_k = v.is_null() ? std::nullopt : std::optional(v.get<std::uint32_t>());
      else if (key == "threshold_beta") cfg.threshold_beta = v.get<double>();
      else if (key == "threshold_start_step") cfg.threshold_start_step = v.get<std::uint64_t>();
      else if (key == "dead_tokens_threshold") cfg.dead_tokens_threshold = v.get<std::uint64_t>();
      else if (key == "k") cfg.k = v.get<std::uint32_t>();
      else if (key == "expansion_factor") cfg.expansion_factor = v.get<std::uint32_t>();
      else if (key == "group_fractions") {
        cfg.group_fractions.clear();
        for (const auto& f : v) cfg.group_fractions.push_back(parse_fraction(f));
      } else if (key == "reversed_groups") cfg.reversed_groups = v.get<bool>();
      else if (key == "normalize") cfg.normalize = v.get<bool>();
      else if (key == "seed") cfg.seed = v.get<std::uint64_t>();
      else if (key == "adam_beta1") cfg.adam_beta1 = v.get<double>();
      else if (key == "adam_beta2") cfg.adam_beta2 = v.get<double>();
      else if (key == "adam_eps") cfg.adam_eps = v.get<double>();
      else if (key == "log_every") cfg.log_every = v.get<std::uint64_t>();
      else if (key == "max_steps") cfg.max_steps = v.is_null() ? std::nullopt : std::optional(v.get<std::uint64_t>());
      else if (key == "shuffle_shards") cfg.shuffle_shards = v.get<bool>();
      else throw ConfigError("unknown train config key '" + key + "'");
    } catch (const nlohmann::json::exception& e) {
      throw ConfigError("train config key '" + key + "': " + e.what());
    }
  }
  return cfg;
}

nlohmann::json to_json(const TrainConfig& cfg) {
  nlohmann::json j;
  j["arch"] = std::string(to_string(cfg.arch));
  j["batch_size"] = cfg.batch_size;
  j["epochs"] = cfg.epochs;
  j["lr"] = cfg.lr ? nlohmann::json(*cfg.lr) : nlohmann::json("auto");
  j["aux_alpha"] = cfg.aux_alpha;
  j["aux_k"] = cfg.aux_k ? nlohmann::json(*cfg.aux_k) : nlohmann::json(nullptr);
  j["threshold_beta"] = cfg.threshold_beta;
  j["threshold_start_step"] = cfg.threshold_start_step;
  j["dead_tokens_threshold"] = cfg.dead_tokens_threshold;
  j["k"] = cfg.k;
  j["expansion_factor"] = cfg.expansion_factor;
  j["group_fractions"] = cfg.group_fractions;
  j["reversed_groups"] = cfg.reversed_groups;
  j["normalize"] = cfg.normalize;
  j["seed"] = cfg.seed;
  j["adam_beta1"] = cfg.adam_beta1;
  j["adam_beta2"] = cfg.adam_beta2;
  j["adam_eps"] = cfg.adam_eps;
  j["log_every"] = cfg.log_every;
  j["max_steps"] = cfg.max_steps ? nlohmann::json(*cfg.max_steps) : nlohmann::json(nullptr);
  j["shuffle_shards"] = cfg.shuffle_shards;
  return j;
}

std::vector<std::uint32_t> prefixes_from_fractions(std::uint32_t m, const std::vector<double>& fractions,
                                                   bool reversed) {
  if (fractions.empty()) throw ConfigError("group_fractions must not be empty");
  std::vector<std::uint32_t> sizes(fractions.size());
  std::vector<double> remainder(fractions.size());
  std::uint64_t assigned = 0;
  for (std::size_t g = 0; g < fractions.size(); ++g) {
    const double exact = fractions[g] * m;
    sizes[g] = static_cast<std::uint32_t>(std::floor(exact));
    remainder[g] = exact - sizes[g];
    assigned += sizes[g];
  }
  std::vector<std::size_t> order(fractions.size());
  std::iota(order.begin(), order.end(), 0);
  std::stable_sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) { return remainder[a] > remainder[b]; });
  for (std::size_t i = 0; assigned < m; ++i, ++assigned) ++sizes[order[i % order.size()]];
  while (assigned > m) {
    // Only reachable through rounding noise in fractions summing to slightly over 1.
    auto& last = sizes.back();
    if (last == 0) break;
    --last;
    --assigned;
  }
  if (std::any_of(sizes.begin(), sizes.end(), [](std::uint32_t s) { return s == 0; })) {
    throw ConfigError("a Matryoshka group rounds to zero features for m = " + std::to_string(m));
  }
  if (reversed) std::reverse(sizes.begin(), sizes.end());
  std::vector<std::uint32_t> prefixes;
  std::uint32_t total = 0;
  for (const auto s : sizes) prefixes.push_back(total += s);
  return prefixes;
}

double compute_norm_factor(ActivationSource& source) {
  const auto n = source.dim();
  source.rewind(0);
  RowMatrix chunk(4096, static_cast<Eigen::Index>(n));
  double sum = 0.0;
  std::uint64_t count = 0;
  while (true) {
    const auto got = source.read(chunk);
    for (std::size_t r = 0; r < got; ++r) sum += chunk.row(static_cast<Eigen::Index>(r)).norm();
    count += got;
    if (got < static_cast<std::size_t>(chunk.rows())) break;
  }
  source.rewind(0);
  if (count == 0) throw DataError("cannot compute a normalisation factor from an empty source");
  const double factor = (sum / static_cast<double>(count)) / std::sqrt(static_cast<double>(n));
  if (!(factor > 0.0) || !std::isfinite(factor)) throw DataError("activation norms are zero or non-finite");
  return factor;
}

double auto_lr(std::uint32_t m) {
  return 2e-4 * std::sqrt(16384.0 / static_cast<double>(std::max<std::uint32_t>(m, 1)));
}

double update_threshold(double current, double batch_min_selected, std::uint64_t step, const TrainConfig& cfg) {
  if (step < cfg.threshold_start_step) return current;
  if (current <= 0.0) return batch_min_selected;
  return cfg.threshold_beta * current + (1.0 - cfg.threshold_beta) * batch_min_selected;
}

void DeadFeatureTracker::observe(std::span<const SparseCode> codes) {
  const auto rows = static_cast<std::uint64_t>(codes.size());
  for (auto& c : tokens_since_fire_) c += rows;
  for (const auto& code : codes) {
    for (const auto i : code.indices) tokens_since_fire_[i] = 0;
  }
}

DeadMask DeadFeatureTracker::dead_mask(std::uint64_t dead_tokens_threshold) const {
  DeadMask mask(tokens_since_fire_.size());
  for (std::size_t i = 0; i < mask.size(); ++i) mask[i] = tokens_since_fire_[i] > dead_tokens_threshold;
  return mask;
}

std::size_t DeadFeatureTracker::dead_count(std::uint64_t dead_tokens_threshold) const {
  return static_cast<std::size_t>(std::count_if(tokens_since_fire_.begin(), tokens_since_fire_.end(),
                                                [&](std::uint64_t c) { return c > dead_tokens_threshold; }));
}

nlohmann::json to_json(const MetricsRecord& rec) {
  return nlohmann::json{{"step", rec.step},
                        {"total_loss", rec.total_loss},
                        {"per_prefix_mse", rec.per_prefix_mse},
                        {"aux_loss", rec.aux_loss},
                        {"fvu", rec.fvu},
                        {"dead_count", rec.dead_count},
                        {"threshold", rec.threshold},
                        {"lr", rec.lr}};
}

TrainResult train(const TrainConfig& cfg, ActivationSource& data, const TrainOptions& options) {
  cfg.validate();
  const std::size_t n = data.dim();
  if (n == 0) throw DataError("activation source has zero dimensionality");
  const auto m = static_cast<std::uint32_t>(n * cfg.expansion_factor);
  if (cfg.k > m) throw ConfigError("k = " + std::to_string(cfg.k) + " exceeds m = " + std::to_string(m));

  const std::uint64_t steps_per_epoch = data.row_count() / cfg.batch_size;
  if (steps_per_epoch == 0) {
    throw DataError("source has " + std::to_string(data.row_count()) + " rows, fewer than one batch of " +
                    std::to_string(cfg.batch_size));
  }
  std::uint64_t total_steps = steps_per_epoch * cfg.epochs;
  if (cfg.max_steps) total_steps = std::min(total_steps, *cfg.max_steps);

  std::vector<std::uint32_t> prefixes{m};
  if (cfg.arch == Architecture::MatryoshkaBatchTopK) {
    prefixes = prefixes_from_fractions(m, cfg.group_fractions, cfg.reversed_groups);
  }

  TrainResult result;
  result.params = SaeParams::initialize(n, m, cfg.arch, cfg.k, prefixes, cfg.aux_alpha, cfg.seed);
  result.norm_factor = cfg.normalize ? compute_norm_factor(data) : 1.0;
  result.lr = cfg.lr.value_or(auto_lr(m));
  result.tracker = DeadFeatureTracker(m);
  SaeParams& params = result.params;

  std::ofstream metrics_out;
  if (options.metrics_path) {
    metrics_out.open(*options.metrics_path, std::ios::trunc);
    if (!metrics_out) throw DataError("cannot open metrics log " + options.metrics_path->string());
  }

  AdamState adam{Gradients::zeros_like(params), Gradients::zeros_like(params), 0};
  BatchPrefetcher prefetch(data, cfg.batch_size, steps_per_epoch, total_steps, result.norm_factor,
                           options.prefetch_depth);

  std::string last_grads = "none";
  for (std::uint64_t step = 0; step < total_steps; ++step) {
    const RowMatrix batch = prefetch.next();
    const DeadMask dead = result.tracker.dead_mask(cfg.dead_tokens_threshold);

    ForwardBackward fb;
    try {
      fb = forward_backward(params, batch, dead, cfg.aux_k);
      if (!std::isfinite(fb.grads.squared_norm())) throw NumericalError("non-finite gradients");
    } catch (const NumericalError& e) {
      throw NumericalError(std::string(e.what()) + " at step " + std::to_string(step) + " (lr " +
                           std::to_string(result.lr) + "; previous step " + last_grads + ")");
    }
    last_grads = grad_diagnostics(fb.grads);

    result.tracker.observe(fb.codes);
    if (cfg.arch != Architecture::TopK) {
      if (const auto lowest = min_selected(fb.codes)) {
        params.inference_threshold = update_threshold(params.inference_threshold, *lowest, step, cfg);
      }
    }

    if (result.lr > 0.0) adam_step(params, fb.grads, adam, cfg, result.lr);

    const bool last = step + 1 == total_steps;
    if (step % cfg.log_every == 0 || last) {
      MetricsRecord rec{step,
                        fb.loss.total,
                        fb.loss.per_prefix_mse,
                        fb.loss.aux,
                        fb.loss.fvu,
                        result.tracker.dead_count(cfg.dead_tokens_threshold),
                        params.inference_threshold,
                        result.lr};
      if (metrics_out.is_open()) metrics_out << to_json(rec).dump() << '\n';
      result.metrics.push_back(std::move(rec));
    }
    if (options.on_step) options.on_step(step, params);
  }
  result.steps = total_steps;

  if (options.checkpoint_path) save_checkpoint(*options.checkpoint_path, params);
  return result;
}

}  // namespace saeinterp
