#pragma once

#include <chrono>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <functional>
#include <string>
#include <vector>

#include "facseq/config.hpp"
#include "facseq/data.hpp"
#include "facseq/elbo.hpp"
#include "facseq/model.hpp"
#include "facseq/params.hpp"
#include "facseq/rng.hpp"

namespace facseq {

struct TrainConfig {
  double learning_rate = 3e-4;
  std::size_t batch_size = 32;
  std::size_t epochs = 50;
  std::uint64_t seed = 0;
  double adam_beta1 = 0.9;
  double adam_beta2 = 0.999;
  double adam_eps = 1e-8;
  std::size_t checkpoint_every = 0;  // epochs; 0 writes no intermediate checkpoints
  double max_grad_norm = 0.0;        // 0 disables clipping

  void validate() const {
    if (!(learning_rate >= 0.0) || !std::isfinite(learning_rate)) throw ConfigError("learning_rate must be >= 0");
    if (!(adam_beta1 > 0.0 && adam_beta1 < 1.0)) throw ConfigError("adam_beta1 must lie in (0, 1)");
    if (!(adam_beta2 > 0.0 && adam_beta2 < 1.0)) throw ConfigError("adam_beta2 must lie in (0, 1)");
    if (!(adam_eps > 0.0)) throw ConfigError("adam_eps must be positive");
    if (batch_size == 0) throw ConfigError("batch_size must be positive");
    if (max_grad_norm < 0.0) throw ConfigError("max_grad_norm must be >= 0");
  }

  KeyValueDoc to_doc() const {
    KeyValueDoc d;
    d.set("train.learning_rate", learning_rate);
    d.set("train.batch_size", batch_size);
    d.set("train.epochs", epochs);
    d.set("train.seed", seed);
    d.set("train.adam_beta1", adam_beta1);
    d.set("train.adam_beta2", adam_beta2);
    d.set("train.adam_eps", adam_eps);
    d.set("train.checkpoint_every", checkpoint_every);
    d.set("train.max_grad_norm", max_grad_norm);
    return d;
  }

  static TrainConfig from_doc(const KeyValueDoc& d) { return from_doc(d, TrainConfig()); }

  static TrainConfig from_doc(const KeyValueDoc& d, TrainConfig c) {
    c.learning_rate = d.get("train.learning_rate", c.learning_rate);
    c.batch_size = d.get("train.batch_size", c.batch_size);
    c.epochs = d.get("train.epochs", c.epochs);
    c.seed = d.get("train.seed", c.seed);
    c.adam_beta1 = d.get("train.adam_beta1", c.adam_beta1);
    c.adam_beta2 = d.get("train.adam_beta2", c.adam_beta2);
    c.adam_eps = d.get("train.adam_eps", c.adam_eps);
    c.checkpoint_every = d.get("train.checkpoint_every", c.checkpoint_every);
    c.max_grad_norm = d.get("train.max_grad_norm", c.max_grad_norm);
    return c;
  }
};

template <class S>
struct AdamState {
  Vector<S> first_moment;
  Vector<S> second_moment;
  std::uint64_t step_count = 0;

  AdamState() = default;
  explicit AdamState(std::size_t n)
      : first_moment(Vector<S>::Zero(static_cast<Eigen::Index>(n))),
        second_moment(Vector<S>::Zero(static_cast<Eigen::Index>(n))) {}
};

/// One bias-corrected ADAM step that ascends the objective whose gradient is
/// `grads`.
template <class S>
void adam_step(ParamVector<S>& params, const ParamVector<S>& grads, AdamState<S>& state, const TrainConfig& cfg) {
  if (grads.values.size() != params.values.size() || state.first_moment.size() != params.values.size() ||
      state.second_moment.size() != params.values.size()) {
    throw StructuralError("adam_step: parameter, gradient and state sizes differ");
  }
  const S b1 = static_cast<S>(cfg.adam_beta1);
  const S b2 = static_cast<S>(cfg.adam_beta2);
  ++state.step_count;
  const auto t = static_cast<double>(state.step_count);
  const S c1 = static_cast<S>(1.0 - std::pow(cfg.adam_beta1, t));
  const S c2 = static_cast<S>(1.0 - std::pow(cfg.adam_beta2, t));
  const S lr = static_cast<S>(cfg.learning_rate);
  const S eps = static_cast<S>(cfg.adam_eps);
  auto& m = state.first_moment;
  auto& v = state.second_moment;
  const auto& g = grads.values;
  m = b1 * m + (S(1) - b1) * g;
  v = b2 * v + (S(1) - b2) * g.cwiseProduct(g);
  params.values.array() += lr * (m.array() / c1) / ((v.array() / c2).sqrt() + eps);
}

struct EpochRecord {
  std::size_t epoch = 0;
  double mean_elbo = 0;
  double mean_recon = 0;
  double mean_kl = 0;
  double wall_seconds = 0;
};

enum class TrainStatus { Completed, AbortedNonFinite };

template <class S>
struct TrainResult {
  ModelBundle<S> bundle;  // last parameters with a finite objective and gradient
  std::vector<EpochRecord> log;
  TrainStatus status = TrainStatus::Completed;
  std::string message;
};

inline std::string train_log_header(const ModelConfig& m) {
  return "# facseq training log\n# k_factors=" + std::to_string(m.k_factors) +
         " factor_dim=" + std::to_string(m.factor_dim) + " latent_dim=" + std::to_string(m.latent_dim()) +
         " entangled=" + (m.entangled ? std::string("1") : std::string("0")) +
         "\nepoch,mean_elbo,mean_recon,mean_kl,wall_seconds\n";
}

inline std::string format_epoch(const EpochRecord& r) {
  char buf[256];
  std::snprintf(buf, sizeof buf, "%zu,%.6f,%.6f,%.6f,%.3f\n", r.epoch, r.mean_elbo, r.mean_recon, r.mean_kl,
                r.wall_seconds);
  return buf;
}

/// Output locations for `train`. Empty paths disable the corresponding file.
struct TrainOutputs {
  std::filesystem::path log_path;        // per-epoch CSV, rewritten from the header at start
  std::filesystem::path checkpoint_dir;  // written every cfg.checkpoint_every epochs
  std::function<void(const EpochRecord&)> on_epoch;
  bool record_wall_time = true;          // false logs 0 seconds, making reruns byte-identical
};

/// Epochs of shuffled minibatches; each step is one ELBO gradient followed by
/// one ADAM step. The shuffle and the reparameterization noise come from a
/// single stream seeded with cfg.seed, so (seed, data, config) fix the result.
template <class S>
TrainResult<S> train(ModelBundle<S> bundle, const VideoDataset& data, const TrainConfig& cfg,
                     const TrainOutputs& outputs = {}) {
  cfg.validate();
  TrainResult<S> result{std::move(bundle), {}, TrainStatus::Completed, {}};
  if (cfg.epochs == 0) return result;
  if (data.empty()) throw PreconditionError("training needs a non-empty dataset");
  auto& b = result.bundle;
  if (data.channels != b.config.channels || data.height != b.config.height || data.width != b.config.width) {
    throw StructuralError("dataset frame shape does not match the model");
  }

  std::ofstream log;
  if (!outputs.log_path.empty()) {
    log.open(outputs.log_path, std::ios::binary | std::ios::trunc);
    if (!log) throw IoError("cannot write " + outputs.log_path.string());
    log << train_log_header(b.config) << std::flush;
  }

  RngStream rng(cfg.seed);
  AdamState<S> adam(b.params.size());
  std::vector<const VideoSequence*> batch;
  for (std::size_t epoch = 1; epoch <= cfg.epochs; ++epoch) {
    const auto start = std::chrono::steady_clock::now();
    const auto order = rng.permutation(data.size());
    double sum_elbo = 0, sum_recon = 0, sum_kl = 0;
    std::size_t count = 0;
    for (std::size_t at = 0; at < order.size(); at += cfg.batch_size) {
      batch.clear();
      for (std::size_t i = at; i < std::min(order.size(), at + cfg.batch_size); ++i) {
        batch.push_back(&data.sequences[order[i]]);
      }
      const auto noise = detail::draw_batch_noise<S>(b.config, batch, rng);
      ElboGradient<S> step;
      try {
        step = elbo_value_and_gradient<S>(b, batch, noise);
      } catch (const NumericalError& e) {
        result.status = TrainStatus::AbortedNonFinite;
        result.message = std::string("epoch ") + std::to_string(epoch) + ": " + e.what();
        return result;
      }
      for (const auto& t : step.terms) {
        sum_elbo += t.elbo;
        sum_recon += t.recon_total;
        sum_kl += t.kl_total();
      }
      count += step.terms.size();
      if (cfg.max_grad_norm > 0.0) {
        const double norm = static_cast<double>(step.gradient.values.norm());
        if (norm > cfg.max_grad_norm) step.gradient.values *= static_cast<S>(cfg.max_grad_norm / norm);
      }
      const Vector<S> previous = b.params.values;
      adam_step(b.params, step.gradient, adam, cfg);
      if (!b.params.values.allFinite()) {
        b.params.values = previous;
        result.status = TrainStatus::AbortedNonFinite;
        result.message = "epoch " + std::to_string(epoch) + ": parameters became non-finite";
        return result;
      }
    }
    EpochRecord rec;
    rec.epoch = epoch;
    rec.mean_elbo = sum_elbo / static_cast<double>(count);
    rec.mean_recon = sum_recon / static_cast<double>(count);
    rec.mean_kl = sum_kl / static_cast<double>(count);
    if (outputs.record_wall_time) {
      rec.wall_seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
    }
    result.log.push_back(rec);
    if (log.is_open()) log << format_epoch(rec) << std::flush;
    if (outputs.on_epoch) outputs.on_epoch(rec);
    if (cfg.checkpoint_every > 0 && !outputs.checkpoint_dir.empty() && epoch % cfg.checkpoint_every == 0) {
      save_checkpoint(b, outputs.checkpoint_dir);
    }
  }
  return result;
}

}  // namespace facseq
