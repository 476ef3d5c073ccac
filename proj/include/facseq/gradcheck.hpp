#pragma once

// Central finite-difference checks of reverse-mode gradients, used by the
// `verify` command and the tests.

#include <algorithm>
#include <cmath>
#include <string>
#include <vector>

#include "facseq/data.hpp"
#include "facseq/elbo.hpp"
#include "facseq/model.hpp"
#include "facseq/params.hpp"
#include "facseq/rng.hpp"

namespace facseq {

struct GradCheckResult {
  double max_rel_error = 0;
  std::size_t worst_index = 0;
  std::string worst_tensor;
  double analytic = 0;  // at worst_index
  double numeric = 0;
  std::size_t parameters = 0;
};

/// |a - f| / max(|a|, |f|, floor). The floor keeps entries whose true value is
/// zero from dominating through rounding noise.
inline double relative_error(double a, double f, double floor = 1e-6) {
  return std::abs(a - f) / std::max({std::abs(a), std::abs(f), floor});
}

/// Compares `analytic` against central differences of `objective` over every
/// parameter.
template <class Objective>
GradCheckResult check_gradient(Objective&& objective, const ParamVector<double>& params,
                               const ParamVector<double>& analytic, double h = 1e-5, double floor = 1e-6) {
  if (analytic.values.size() != params.values.size()) throw StructuralError("gradient size differs from parameters");
  GradCheckResult r;
  r.parameters = static_cast<std::size_t>(params.values.size());
  ParamVector<double> p = params;
  for (Eigen::Index i = 0; i < p.values.size(); ++i) {
    const double orig = p.values[i];
    p.values[i] = orig + h;
    const double up = objective(p);
    p.values[i] = orig - h;
    const double down = objective(p);
    p.values[i] = orig;
    const double fd = (up - down) / (2 * h);
    const double err = relative_error(analytic.values[i], fd, floor);
    if (i == 0 || err > r.max_rel_error) {
      r.max_rel_error = err;
      r.worst_index = static_cast<std::size_t>(i);
      r.analytic = analytic.values[i];
      r.numeric = fd;
    }
  }
  for (const auto& s : params.layout.slots()) {
    if (r.worst_index >= s.offset && r.worst_index < s.offset + s.rows * s.cols) r.worst_tensor = s.name;
  }
  return r;
}

/// Small double-precision model: 2x2x1 frames, k=2, factor_dim=2, width-8 nets.
inline ModelConfig tiny_model_config() {
  ModelConfig c;
  c.k_factors = 2;
  c.factor_dim = 2;
  c.channels = 1;
  c.height = 2;
  c.width = 2;
  c.encoder_hidden = {8};
  c.encoder_features = 8;
  c.decoder_hidden = {8};
  c.transition_hidden = {8, 8};
  return c;
}

/// Full-ELBO gradient of a freshly initialized model on random frames, with
/// the reparameterization noise frozen.
inline GradCheckResult elbo_gradient_check(const ModelConfig& cfg, std::size_t frames, std::size_t batch_size,
                                           RngStream rng) {
  auto init = rng.split(0);
  const auto b = build_bundle<double>(cfg, init);
  auto data_rng = rng.split(1);
  std::vector<VideoSequence> seqs;
  for (std::size_t q = 0; q < batch_size; ++q) {
    VideoSequence s(frames, cfg.channels, cfg.height, cfg.width);
    for (auto& v : s.pixels) v = static_cast<float>(data_rng.uniform());
    seqs.push_back(std::move(s));
  }
  std::vector<const VideoSequence*> batch;
  for (const auto& s : seqs) batch.push_back(&s);
  auto noise_rng = rng.split(2);
  const auto noise = detail::draw_batch_noise<double>(cfg, batch, noise_rng);
  const auto analytic = elbo_gradient<double>(b, batch, noise);
  auto objective = [&](const ParamVector<double>& p) {
    ModelBundle<double> probe{b.config, b.structure, p};
    double total = 0;
    for (const auto& e : elbo_evaluate_batch<double>(probe, batch, noise)) total += e.elbo;
    return total / static_cast<double>(batch.size());
  };
  return check_gradient(objective, b.params, analytic);
}

}  // namespace facseq
