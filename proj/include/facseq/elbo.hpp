#pragma once

// Filtering rollout and the single-sample ELBO estimator
//
//   L = sum_t log p(x_t | Z_t) - KL(q(Z_1|x_1) || p(Z_1))
//       - sum_{t>=2} KL(q(Z_t|Z_{t-1}, x_t) || p(Z_t|Z_{t-1}))
//
// with Z_t drawn from q by reparameterization along one trajectory. The
// estimator is written against the FilteringModel concept so that the neural
// model and the linear-Gaussian oracle share this code path.

#include <cmath>
#include <concepts>
#include <span>
#include <vector>

#include "facseq/autodiff.hpp"
#include "facseq/data.hpp"
#include "facseq/gaussian.hpp"
#include "facseq/model.hpp"
#include "facseq/params.hpp"
#include "facseq/rng.hpp"

namespace facseq {

template <class M, class S>
concept FilteringModel = requires(const M& m, ad::Var<S> v, const GaussianVar<S>& g, Eigen::Index batch,
                                  std::size_t t) {
  { m.tape() } -> std::same_as<ad::Tape<S>&>;
  { m.latent_dim() } -> std::convertible_to<std::size_t>;
  { m.observation_dim() } -> std::convertible_to<std::size_t>;
  { m.initial_prior(batch) } -> std::same_as<GaussianVar<S>>;
  { m.transition(v) } -> std::same_as<GaussianVar<S>>;
  { m.emission(v) } -> std::same_as<GaussianVar<S>>;
  { m.encode(v) } -> std::same_as<ad::Var<S>>;
  { m.posterior(g, v, true, t) } -> std::same_as<GaussianVar<S>>;
};

/// Knobs of the estimator. `kl_scale` multiplies every KL term; it exists so
/// that tests and `verify --inject-fault` can corrupt the objective on purpose.
struct EstimatorOptions {
  double kl_scale = 1.0;
};

/// Rollout recorded on a tape; every node covers a batch of B sequences.
template <class S>
struct TapedRollout {
  std::vector<GaussianVar<S>> priors;
  std::vector<GaussianVar<S>> posteriors;
  std::vector<ad::Var<S>> samples;
  GaussianVar<S> recon;          // obs x (n * B), timestep-major column blocks
  std::vector<ad::Var<S>> recon_loglik;  // n entries, each 1 x B
  std::vector<ad::Var<S>> kl;            // n entries, each 1 x B
  ad::Var<S> elbo;                       // 1 x B
  ad::Var<S> objective;                  // 1 x 1, mean over the batch
};

/// Runs inference forward in time. `frames[t]` and `noise[t]` hold column b
/// for sequence b.
template <class S, FilteringModel<S> M>
TapedRollout<S> rollout_on_tape(const M& model, std::span<const Matrix<S>> frames, std::span<const Matrix<S>> noise,
                                const EstimatorOptions& opts = {}) {
  if (frames.empty()) throw StructuralError("rollout: empty sequence");
  if (noise.size() != frames.size()) throw StructuralError("rollout: noise length differs from sequence length");
  const std::size_t n = frames.size();
  const Eigen::Index batch = frames.front().cols();
  const auto z = static_cast<Eigen::Index>(model.latent_dim());
  for (std::size_t t = 0; t < n; ++t) {
    if (frames[t].rows() != static_cast<Eigen::Index>(model.observation_dim()) || frames[t].cols() != batch) {
      throw StructuralError("rollout: frame shape mismatch at t=" + std::to_string(t));
    }
    if (noise[t].rows() != z || noise[t].cols() != batch) {
      throw StructuralError("rollout: noise shape mismatch at t=" + std::to_string(t));
    }
  }
  ad::Tape<S>& tape = model.tape();

  Matrix<S> all_frames(frames.front().rows(), batch * static_cast<Eigen::Index>(n));
  for (std::size_t t = 0; t < n; ++t) all_frames.middleCols(static_cast<Eigen::Index>(t) * batch, batch) = frames[t];
  ad::Var<S> x_all = tape.constant(std::move(all_frames));
  ad::Var<S> features = model.encode(x_all);

  TapedRollout<S> r;
  for (std::size_t t = 0; t < n; ++t) {
    GaussianVar<S> prior = t == 0 ? model.initial_prior(batch) : model.transition(r.samples.back());
    auto feat_t = ad::slice_cols(features, static_cast<Eigen::Index>(t) * batch, batch);
    GaussianVar<S> post = model.posterior(prior, feat_t, t == 0, t);
    r.samples.push_back(ad::reparameterize(post, noise[t]));
    auto kl = ad::gaussian_kl(post, prior);
    if (opts.kl_scale != 1.0) kl = ad::scale(kl, static_cast<S>(opts.kl_scale));
    r.kl.push_back(kl);
    r.priors.push_back(prior);
    r.posteriors.push_back(post);
  }
  r.recon = model.emission(ad::concat_cols<S>(r.samples));
  ad::Var<S> loglik = ad::gaussian_log_pdf(r.recon, x_all);
  ad::Var<S> elbo;
  for (std::size_t t = 0; t < n; ++t) {
    auto lt = ad::slice_cols(loglik, static_cast<Eigen::Index>(t) * batch, batch);
    r.recon_loglik.push_back(lt);
    auto term = ad::sub(lt, r.kl[t]);
    elbo = t == 0 ? term : ad::add(elbo, term);
  }
  r.elbo = elbo;
  r.objective = ad::mean(elbo);
  return r;
}

template <class S>
struct RolloutTrace {
  std::vector<DiagonalGaussian<S>> priors;
  std::vector<DiagonalGaussian<S>> posteriors;
  std::vector<FactoredLatentState<S>> samples;
  std::vector<DiagonalGaussian<S>> recons;

  std::size_t size() const noexcept { return samples.size(); }
};

struct ElboBreakdown {
  double recon_total = 0;
  std::vector<double> kl_terms;
  double elbo = 0;

  double kl_total() const {
    double s = 0;
    for (double k : kl_terms) s += k;
    return s;
  }
};

/// latent_dim x n standard normal draws; column t feeds timestep t.
template <class S>
Matrix<S> draw_noise(std::size_t latent_dim, std::size_t n, RngStream& rng) {
  Matrix<S> eps(static_cast<Eigen::Index>(latent_dim), static_cast<Eigen::Index>(n));
  for (Eigen::Index t = 0; t < eps.cols(); ++t) {
    for (Eigen::Index j = 0; j < eps.rows(); ++j) eps(j, t) = static_cast<S>(rng.normal());
  }
  return eps;
}

namespace detail {

template <class S>
void check_sequence(const ModelConfig& cfg, const VideoSequence& seq) {
  if (seq.channels != cfg.channels || seq.height != cfg.height || seq.width != cfg.width) {
    throw StructuralError("sequence frames are " + std::to_string(seq.channels) + "x" + std::to_string(seq.height) +
                          "x" + std::to_string(seq.width) + " but the model expects " +
                          std::to_string(cfg.channels) + "x" + std::to_string(cfg.height) + "x" +
                          std::to_string(cfg.width));
  }
  if (seq.frames == 0) throw StructuralError("empty sequence");
}

/// Per-timestep frame and noise matrices for a batch of equal-length sequences.
template <class S>
void batch_inputs(const ModelConfig& cfg, std::span<const VideoSequence* const> batch,
                  std::span<const Matrix<S>> noise, std::vector<Matrix<S>>& frames, std::vector<Matrix<S>>& eps) {
  if (batch.empty()) throw PreconditionError("empty batch");
  if (noise.size() != batch.size()) throw StructuralError("one noise matrix per sequence is required");
  const std::size_t n = batch.front()->frames;
  const auto B = static_cast<Eigen::Index>(batch.size());
  const auto obs = static_cast<Eigen::Index>(cfg.frame_size());
  const auto z = static_cast<Eigen::Index>(cfg.latent_dim());
  frames.assign(n, Matrix<S>(obs, B));
  eps.assign(n, Matrix<S>(z, B));
  for (Eigen::Index b = 0; b < B; ++b) {
    const VideoSequence& seq = *batch[static_cast<std::size_t>(b)];
    check_sequence<S>(cfg, seq);
    if (seq.frames != n) throw StructuralError("sequences in a batch must share a length");
    const Matrix<S>& nb = noise[static_cast<std::size_t>(b)];
    if (nb.rows() != z || nb.cols() != static_cast<Eigen::Index>(n)) throw StructuralError("noise shape mismatch");
    for (std::size_t t = 0; t < n; ++t) {
      const auto f = seq.frame(t);
      for (Eigen::Index i = 0; i < obs; ++i) frames[t](i, b) = static_cast<S>(f[static_cast<std::size_t>(i)]);
      eps[t].col(b) = nb.col(static_cast<Eigen::Index>(t));
    }
  }
}

template <class S>
std::vector<ElboBreakdown> breakdowns(const TapedRollout<S>& r) {
  const Eigen::Index B = r.elbo.cols();
  std::vector<ElboBreakdown> out(static_cast<std::size_t>(B));
  for (Eigen::Index b = 0; b < B; ++b) {
    auto& e = out[static_cast<std::size_t>(b)];
    for (std::size_t t = 0; t < r.kl.size(); ++t) {
      e.recon_total += static_cast<double>(r.recon_loglik[t].value()(0, b));
      e.kl_terms.push_back(static_cast<double>(r.kl[t].value()(0, b)));
    }
    e.elbo = e.recon_total - e.kl_total();
    if (!std::isfinite(e.elbo)) throw NumericalError("ELBO is not finite", "elbo");
  }
  return out;
}

template <class S>
std::vector<Matrix<S>> draw_batch_noise(const ModelConfig& cfg, std::span<const VideoSequence* const> batch,
                                        RngStream& rng) {
  std::vector<Matrix<S>> noise;
  noise.reserve(batch.size());
  for (const auto* seq : batch) noise.push_back(draw_noise<S>(cfg.latent_dim(), seq->frames, rng));
  return noise;
}

}  // namespace detail

/// Value-type traces for a batch of sequences with explicit noise.
template <class S>
std::vector<RolloutTrace<S>> filter_rollout_batch(const ModelBundle<S>& b, std::span<const VideoSequence* const> batch,
                                                  std::span<const Matrix<S>> noise) {
  std::vector<Matrix<S>> frames, eps;
  detail::batch_inputs<S>(b.config, batch, noise, frames, eps);
  ad::Tape<S> tape;
  ParamLeaves<S> leaves(tape, b.params);
  NeuralModel<S> model(b, leaves);
  auto r = rollout_on_tape<S>(model, frames, eps);
  const Eigen::Index B = static_cast<Eigen::Index>(batch.size());
  std::vector<RolloutTrace<S>> out(batch.size());
  for (Eigen::Index col = 0; col < B; ++col) {
    auto& tr = out[static_cast<std::size_t>(col)];
    for (std::size_t t = 0; t < frames.size(); ++t) {
      tr.priors.push_back(column(r.priors[t], col));
      tr.posteriors.push_back(column(r.posteriors[t], col));
      tr.samples.push_back(FactoredLatentState<S>::from_flat(b.config, r.samples[t].value().col(col)));
      const Eigen::Index rc = static_cast<Eigen::Index>(t) * B + col;
      tr.recons.push_back(column(r.recon, rc));
    }
  }
  return out;
}

template <class S>
RolloutTrace<S> filter_rollout(const ModelBundle<S>& b, const VideoSequence& seq, RngStream& rng) {
  detail::check_sequence<S>(b.config, seq);
  const VideoSequence* ptr = &seq;
  std::vector<Matrix<S>> noise{draw_noise<S>(b.config.latent_dim(), seq.frames, rng)};
  return filter_rollout_batch<S>(b, std::span<const VideoSequence* const>(&ptr, 1), noise).front();
}

/// Per-sequence ELBO terms with explicit noise.
template <class S>
std::vector<ElboBreakdown> elbo_evaluate_batch(const ModelBundle<S>& b, std::span<const VideoSequence* const> batch,
                                               std::span<const Matrix<S>> noise, const EstimatorOptions& opts = {}) {
  std::vector<Matrix<S>> frames, eps;
  detail::batch_inputs<S>(b.config, batch, noise, frames, eps);
  ad::Tape<S> tape;
  ParamLeaves<S> leaves(tape, b.params);
  NeuralModel<S> model(b, leaves);
  return detail::breakdowns(rollout_on_tape<S>(model, frames, eps, opts));
}

template <class S>
std::vector<ElboBreakdown> elbo_evaluate_batch(const ModelBundle<S>& b, std::span<const VideoSequence* const> batch,
                                               RngStream& rng, const EstimatorOptions& opts = {}) {
  const auto noise = detail::draw_batch_noise<S>(b.config, batch, rng);
  return elbo_evaluate_batch<S>(b, batch, noise, opts);
}

template <class S>
ElboBreakdown elbo_evaluate(const ModelBundle<S>& b, const VideoSequence& seq, RngStream& rng,
                            const EstimatorOptions& opts = {}) {
  const VideoSequence* ptr = &seq;
  return elbo_evaluate_batch<S>(b, std::span<const VideoSequence* const>(&ptr, 1), rng, opts).front();
}

template <class S>
struct ElboGradient {
  ParamVector<S> gradient;  // of the batch-mean ELBO
  std::vector<ElboBreakdown> terms;
};

/// Gradient of the batch-mean ELBO with the given noise held fixed.
template <class S>
ElboGradient<S> elbo_value_and_gradient(const ModelBundle<S>& b, std::span<const VideoSequence* const> batch,
                                        std::span<const Matrix<S>> noise, const EstimatorOptions& opts = {}) {
  std::vector<Matrix<S>> frames, eps;
  detail::batch_inputs<S>(b.config, batch, noise, frames, eps);
  ad::Tape<S> tape;
  ParamLeaves<S> leaves(tape, b.params);
  NeuralModel<S> model(b, leaves);
  auto r = rollout_on_tape<S>(model, frames, eps, opts);
  ElboGradient<S> out{{}, detail::breakdowns(r)};
  tape.backward(r.objective);
  out.gradient = leaves.gradient();
  out.gradient.require_finite("ELBO gradient");
  return out;
}

template <class S>
ParamVector<S> elbo_gradient(const ModelBundle<S>& b, std::span<const VideoSequence* const> batch,
                             std::span<const Matrix<S>> noise) {
  return elbo_value_and_gradient<S>(b, batch, noise).gradient;
}

/// Noise is drawn from `rng` sequence by sequence, timestep by timestep.
template <class S>
ParamVector<S> elbo_gradient(const ModelBundle<S>& b, std::span<const VideoSequence* const> batch, RngStream& rng) {
  const auto noise = detail::draw_batch_noise<S>(b.config, batch, rng);
  return elbo_gradient<S>(b, batch, noise);
}

}  // namespace facseq
