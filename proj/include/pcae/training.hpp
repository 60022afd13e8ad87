#pragma once

// Adam, KL annealing and the training / evaluation loops.

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <functional>
#include <limits>
#include <numbers>
#include <numeric>
#include <optional>
#include <ostream>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "pcae/errors.hpp"
#include "pcae/geometry.hpp"
#include "pcae/models.hpp"
#include "pcae/parallel.hpp"
#include "pcae/random.hpp"
#include "pcae/tensor.hpp"

namespace pcae {

struct AdamConfig {
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
};

struct AdamState {
  AdamConfig config;
  std::vector<std::vector<double>> m;
  std::vector<std::vector<double>> v;
  std::uint64_t step = 0;
};

/// One bias-corrected Adam update of every tensor in `params` from its
/// accumulated gradient. A parameter without a gradient is treated as having
/// a zero gradient.
inline void adam_step(std::span<Tensor> params, AdamState& state, double lr) {
  if (!(lr > 0.0)) throw ConfigError("learning rate must be positive");
  if (state.m.empty()) {
    for (const auto& p : params) {
      state.m.emplace_back(p.numel(), 0.0);
      state.v.emplace_back(p.numel(), 0.0);
    }
  }
  if (state.m.size() != params.size()) throw UsageError("adam_step: parameter count changed between steps");
  for (std::size_t k = 0; k < params.size(); ++k) {
    if (state.m[k].size() != params[k].numel() ||
        (params[k].has_grad() && params[k].grad().size() != params[k].numel()))
      throw UsageError("adam_step: shape mismatch for parameter " + std::to_string(k));
  }
  ++state.step;
  const auto& c = state.config;
  const double t = static_cast<double>(state.step);
  const double corr1 = 1.0 - std::pow(c.beta1, t);
  const double corr2 = 1.0 - std::pow(c.beta2, t);
  for (std::size_t k = 0; k < params.size(); ++k) {
    auto w = params[k].mutable_values();
    const bool has = params[k].has_grad();
    auto g = params[k].grad();
    auto& m = state.m[k];
    auto& v = state.v[k];
    for (std::size_t i = 0; i < w.size(); ++i) {
      const double gi = has ? g[i] : 0.0;
      m[i] = c.beta1 * m[i] + (1.0 - c.beta1) * gi;
      v[i] = c.beta2 * v[i] + (1.0 - c.beta2) * gi * gi;
      const double mhat = m[i] / corr1;
      const double vhat = v[i] / corr2;
      w[i] -= lr * mhat / (std::sqrt(vhat) + c.eps);
    }
  }
}

enum class LrSchedule { Constant, Cosine };

inline LrSchedule parse_lr_schedule(std::string_view s) {
  if (s == "constant") return LrSchedule::Constant;
  if (s == "cosine") return LrSchedule::Cosine;
  throw ConfigError("unknown lr schedule '" + std::string(s) + "' (expected constant or cosine)");
}

inline std::string_view lr_schedule_name(LrSchedule s) { return s == LrSchedule::Cosine ? "cosine" : "constant"; }

struct TrainConfig {
  Variant variant = Variant::AE;
  double learning_rate = 5e-4;  ///< initial step size
  LrSchedule lr_schedule = LrSchedule::Cosine;
  std::size_t batch_size = 16;
  std::size_t epochs = 100;
  double beta_max = 0.1;
  double anneal_fraction = 0.5;
  std::uint64_t seed = 0;
  bool augment = true;
  AugmentParams augmentation;
  bool weighted_matching = false;
  // Early stop when the smoothed monitored loss has not improved by
  // min_delta for `patience` epochs; patience 0 disables it.
  std::size_t patience = 20;
  double min_delta = 1e-5;
  std::size_t smoothing = 10;
  // Replace the running batch-norm statistics, which track recent augmented
  // batches, with exact averages over the un-augmented training set.
  bool recalibrate_bn = true;

  void validate() const {
    if (!(learning_rate > 0.0)) throw ConfigError("learning_rate must be > 0");
    if (!(anneal_fraction >= 0.0 && anneal_fraction <= 1.0)) throw ConfigError("anneal_fraction must lie in [0, 1]");
    if (!(beta_max >= 0.0)) throw ConfigError("beta_max must be >= 0");
    if (batch_size < 2) throw ConfigError("batch_size must be >= 2 (batch norm needs two clouds per batch)");
    if (epochs == 0) throw ConfigError("epochs must be >= 1");
    if (smoothing == 0) throw ConfigError("smoothing must be >= 1");
    if (!(augmentation.jitter_sigma >= 0.0 && augmentation.max_angle_deg >= 0.0))
      throw ConfigError("augmentation parameters must be non-negative");
  }
};

/// Step size for an epoch. Cosine decays from learning_rate towards 0 at the epoch budget.
inline double learning_rate_at(std::size_t epoch, const TrainConfig& config) {
  if (config.lr_schedule == LrSchedule::Constant) return config.learning_rate;
  const double t = static_cast<double>(epoch) / static_cast<double>(config.epochs);
  return config.learning_rate * 0.5 * (1.0 + std::cos(std::numbers::pi * t));
}

/// Linear ramp from 0 at epoch 0 to beta_max at anneal_fraction * epochs.
inline double beta_schedule(std::size_t epoch, const TrainConfig& config) {
  const double end = config.anneal_fraction * static_cast<double>(config.epochs);
  if (end <= 0.0) return config.beta_max;
  return config.beta_max * std::min(1.0, static_cast<double>(epoch) / end);
}

struct EpochRecord {
  std::size_t epoch = 0;
  double recon = 0.0;  ///< mean per-cloud reconstruction loss over the epoch
  double kl = 0.0;     ///< mean per-cloud KL
  double beta = 0.0;
  double seconds = 0.0;
  double monitored = std::numeric_limits<double>::quiet_NaN();  ///< validation recon, if any
};

struct TrainLog {
  std::vector<EpochRecord> records;
  bool early_stopped = false;
  std::uint64_t steps = 0;

  void write_csv(std::ostream& os) const {
    os << "epoch,recon,kl,beta,seconds\n";
    char buf[160];
    for (const auto& r : records) {
      std::snprintf(buf, sizeof buf, "%zu,%.17g,%.17g,%.17g,%.6f\n", r.epoch, r.recon, r.kl, r.beta, r.seconds);
      os << buf;
    }
  }
};

/// Splits a shuffled order into batches. A trailing batch of one is merged
/// into its predecessor because train-mode batch norm needs at least two rows
/// on the latent branch.
inline std::vector<std::vector<std::size_t>> make_batches(const std::vector<std::size_t>& order, std::size_t batch) {
  std::vector<std::vector<std::size_t>> out;
  for (std::size_t i = 0; i < order.size(); i += batch)
    out.emplace_back(order.begin() + i, order.begin() + std::min(order.size(), i + batch));
  if (out.size() > 1 && out.back().size() == 1) {
    out[out.size() - 2].push_back(out.back().front());
    out.pop_back();
  }
  return out;
}

struct CloudEvaluation {
  std::vector<double> recon_error;     ///< per-point-mean Chamfer
  std::vector<double> log_likelihood;  ///< per-point mean, variance variants only
  double error_mean = 0.0, error_std = 0.0;
  double ll_mean = 0.0, ll_std = 0.0;
};

namespace detail {

inline std::pair<double, double> mean_std(const std::vector<double>& v) {
  if (v.empty()) return {0.0, 0.0};
  const double mean = std::accumulate(v.begin(), v.end(), 0.0) / static_cast<double>(v.size());
  double ss = 0.0;
  for (double x : v) ss += (x - mean) * (x - mean);
  return {mean, std::sqrt(ss / static_cast<double>(v.size()))};
}

}  // namespace detail

/// Per-cloud reconstruction error (and log-likelihood for variance variants).
/// Results do not depend on batch_size or on the order of `clouds`.
inline CloudEvaluation evaluate(PointCloudAutoencoder& model, std::span<const PointCloud> clouds,
                                std::size_t batch_size = 16, std::size_t threads = 1) {
  if (model.mode() != Mode::Eval) throw UsageError("evaluate() needs an eval-mode model");
  if (batch_size == 0) throw ConfigError("batch_size must be >= 1");
  const bool sigma = has_variance_head(model.variant());
  CloudEvaluation out;
  out.recon_error.resize(clouds.size());
  if (sigma) out.log_likelihood.resize(clouds.size());
  const std::size_t chunks = (clouds.size() + batch_size - 1) / batch_size;
  // Eval-mode inference only reads the model, so chunks can run concurrently.
  parallel_for(chunks, threads, [&](std::size_t c) {
    const std::size_t i = c * batch_size;
    auto chunk = clouds.subspan(i, std::min(batch_size, clouds.size() - i));
    auto recon = model.reconstruct_batch(chunk);
    for (std::size_t b = 0; b < chunk.size(); ++b) {
      out.recon_error[i + b] = chamfer_distance(chunk[b], recon[b].mean, ChamferReduction::PerPointMean);
      if (sigma) out.log_likelihood[i + b] = recon_log_likelihood(chunk[b], recon[b]).per_point_mean;
    }
  });
  std::tie(out.error_mean, out.error_std) = detail::mean_std(out.recon_error);
  std::tie(out.ll_mean, out.ll_std) = detail::mean_std(out.log_likelihood);
  return out;
}

/// Replaces every batch-norm running estimate with the exact average of the
/// train-mode batch statistics over `clouds` (taken in order, in batches of
/// `batch_size`). Parameters are untouched; the model is left in eval mode.
inline void recalibrate_batch_norm(PointCloudAutoencoder& model, std::span<const PointCloud> clouds,
                                   std::size_t batch_size) {
  if (clouds.size() < 2) throw UsageError("recalibrate_batch_norm: needs at least two clouds");
  std::vector<std::size_t> order(clouds.size());
  std::iota(order.begin(), order.end(), std::size_t{0});
  const auto batches = make_batches(order, std::max<std::size_t>(batch_size, 2));
  auto stats = model.batch_norm_stats();
  std::vector<double> saved;
  for (auto* st : stats) saved.push_back(st->momentum);
  NoGradGuard guard;
  model.set_mode(Mode::Train);
  for (std::size_t k = 0; k < batches.size(); ++k) {
    // Cumulative average: the k-th batch gets weight 1/(k+1).
    for (auto* st : stats) st->momentum = static_cast<double>(k) / static_cast<double>(k + 1);
    std::vector<PointCloud> xs;
    for (std::size_t i : batches[k]) xs.push_back(clouds[i]);
    model.forward(stack_clouds(xs), xs.size(), nullptr);
  }
  for (std::size_t i = 0; i < stats.size(); ++i) stats[i]->momentum = saved[i];
  model.set_mode(Mode::Eval);
}

struct TrainResult {
  PointCloudAutoencoder model;
  TrainLog log;
};

/// Called after every completed epoch; the model is in train mode.
using EpochCallback = std::function<void(const EpochRecord&, PointCloudAutoencoder&)>;

/// Trains a fresh model on healthy clouds. When `validation` is non-empty its
/// mean reconstruction error drives early stopping, otherwise the training
/// loss does. Deterministic in (config, model_config, data).
inline TrainResult train(std::span<const PointCloud> data, const TrainConfig& config, const ModelConfig& model_config,
                         std::span<const PointCloud> validation = {}, const EpochCallback& on_epoch = {}) {
  config.validate();
  model_config.validate();
  if (data.empty()) throw UsageError("train: empty dataset");
  for (std::size_t i = 0; i < data.size(); ++i)
    if (data[i].size() != model_config.num_points)
      throw DimensionError("train: cloud " + std::to_string(i) + " has " + std::to_string(data[i].size()) +
                           " points, model expects " + std::to_string(model_config.num_points));
  if (data.size() < 2) throw UsageError("train: batch norm needs at least two clouds per batch");

  PointCloudAutoencoder model(config.variant, model_config, derive_seed(config.seed, "init"));
  auto params = model.parameters();
  AdamState adam;
  TrainLog log;

  std::vector<double> history;
  double best = std::numeric_limits<double>::infinity();
  std::size_t since_best = 0;

  for (std::size_t epoch = 0; epoch < config.epochs; ++epoch) {
    const auto start = std::chrono::steady_clock::now();
    model.set_mode(Mode::Train);
    const double beta = beta_schedule(epoch, config);
    const double lr = learning_rate_at(epoch, config);

    std::vector<std::size_t> order(data.size());
    std::iota(order.begin(), order.end(), std::size_t{0});
    Rng shuffle_rng = make_rng(config.seed, "shuffle", {epoch});
    std::shuffle(order.begin(), order.end(), shuffle_rng);
    Rng sampler = make_rng(config.seed, "sampling", {epoch});

    double recon_sum = 0.0, kl_sum = 0.0;
    const auto batches = make_batches(order, config.batch_size);
    for (std::size_t bi = 0; bi < batches.size(); ++bi) {
      const auto& idx = batches[bi];
      std::vector<PointCloud> clouds;
      clouds.reserve(idx.size());
      for (std::size_t i : idx)
        clouds.push_back(config.augment
                             ? augment(data[i], derive_seed(config.seed, "augment", {epoch, i}), config.augmentation)
                             : data[i]);
      const std::size_t b = clouds.size();
      Tensor x = stack_clouds(clouds);
      auto fwd = model.forward(x, b, has_latent_gaussian(config.variant) ? &sampler : nullptr);
      const EncoderOutput* latent = has_latent_gaussian(config.variant) ? &fwd.encoded : nullptr;
      LossTerms loss = model_loss(config.variant, x, fwd.decoded, latent, beta, b, config.weighted_matching);
      const double inv_b = 1.0 / static_cast<double>(b);
      Tensor objective = scale(loss.total, inv_b);
      if (!std::isfinite(objective.item()))
        throw NumericError("non-finite loss at epoch " + std::to_string(epoch) + ", batch " + std::to_string(bi) +
                           ": recon=" + std::to_string(loss.recon) + " kl=" + std::to_string(loss.kl) +
                           " beta=" + std::to_string(beta));
      model.zero_grad();
      backward(objective);
      adam_step(params, adam, lr);
      ++log.steps;
      recon_sum += loss.recon;
      kl_sum += loss.kl;
    }

    EpochRecord rec;
    rec.epoch = epoch;
    rec.recon = recon_sum / static_cast<double>(data.size());
    rec.kl = kl_sum / static_cast<double>(data.size());
    rec.beta = beta;
    double monitored = rec.recon;
    if (!validation.empty()) {
      model.set_mode(Mode::Eval);
      rec.monitored = evaluate(model, validation, config.batch_size).error_mean;
      monitored = rec.monitored;
      model.set_mode(Mode::Train);
    }
    rec.seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
    log.records.push_back(rec);
    if (on_epoch) on_epoch(rec, model);

    history.push_back(monitored);
    const std::size_t w = std::min(config.smoothing, history.size());
    const double smoothed = std::accumulate(history.end() - static_cast<std::ptrdiff_t>(w), history.end(), 0.0) /
                            static_cast<double>(w);
    if (smoothed < best - config.min_delta) {
      best = smoothed;
      since_best = 0;
    } else if (config.patience > 0 && ++since_best >= config.patience) {
      log.early_stopped = true;
      break;
    }
  }
  if (config.recalibrate_bn) recalibrate_batch_norm(model, data, config.batch_size);
  model.set_mode(Mode::Eval);
  return {std::move(model), std::move(log)};
}

}  // namespace pcae
