#pragma once

// Generative model (prior, per-factor transitions, decoder) and the filtering
// inference network, in factored and entangled configurations.

#include <cmath>
#include <filesystem>
#include <string>
#include <vector>

#include "facseq/config.hpp"
#include "facseq/gaussian.hpp"
#include "facseq/mlp.hpp"
#include "facseq/params.hpp"
#include "facseq/rng.hpp"

namespace facseq {

struct ModelConfig {
  std::size_t k_factors = 2;
  std::size_t factor_dim = 8;
  std::size_t channels = 2;
  std::size_t height = 32;
  std::size_t width = 32;
  double obs_variance = 0.25;
  std::vector<std::size_t> encoder_hidden = {256};
  std::size_t encoder_features = 32;
  std::vector<std::size_t> decoder_hidden = {256};
  std::vector<std::size_t> transition_hidden = {64, 64, 64, 64};
  bool entangled = false;
  /// Entangled models only: factor count of the factored model this one
  /// mirrors. Evaluation partitions the latent units into this many groups.
  std::size_t twin_factors = 0;

  std::size_t latent_dim() const noexcept { return k_factors * factor_dim; }
  std::size_t frame_size() const noexcept { return channels * height * width; }

  /// Number of groups evaluation should split the latent units into.
  std::size_t evaluation_groups() const noexcept {
    return entangled ? (twin_factors ? twin_factors : 1) : k_factors;
  }

  void validate() const {
    if (k_factors == 0 || factor_dim == 0) throw ConfigError("k_factors and factor_dim must be positive");
    if (channels == 0 || height == 0 || width == 0) throw ConfigError("frame dimensions must be positive");
    if (!(obs_variance > 0.0) || !std::isfinite(obs_variance)) throw ConfigError("obs_variance must be positive");
    if (encoder_features == 0) throw ConfigError("encoder_features must be positive");
    if (entangled && k_factors != 1) throw ConfigError("an entangled model has exactly one factor");
    for (auto h : encoder_hidden) if (h == 0) throw ConfigError("zero encoder width");
    for (auto h : decoder_hidden) if (h == 0) throw ConfigError("zero decoder width");
    for (auto h : transition_hidden) if (h == 0) throw ConfigError("zero transition width");
  }

  KeyValueDoc to_doc() const {
    KeyValueDoc d;
    d.set("model.k_factors", k_factors);
    d.set("model.factor_dim", factor_dim);
    d.set("model.channels", channels);
    d.set("model.height", height);
    d.set("model.width", width);
    d.set("model.obs_variance", obs_variance);
    d.set("model.encoder_hidden", encoder_hidden);
    d.set("model.encoder_features", encoder_features);
    d.set("model.decoder_hidden", decoder_hidden);
    d.set("model.transition_hidden", transition_hidden);
    d.set("model.entangled", entangled);
    d.set("model.twin_factors", twin_factors);
    return d;
  }

  /// Reads `model.*` keys, keeping defaults for absent ones.
  static ModelConfig from_doc(const KeyValueDoc& d) { return from_doc(d, ModelConfig()); }

  static ModelConfig from_doc(const KeyValueDoc& d, ModelConfig base) {
    ModelConfig c = base;
    c.k_factors = d.get("model.k_factors", c.k_factors);
    c.factor_dim = d.get("model.factor_dim", c.factor_dim);
    c.channels = d.get("model.channels", c.channels);
    c.height = d.get("model.height", c.height);
    c.width = d.get("model.width", c.width);
    c.obs_variance = d.get("model.obs_variance", c.obs_variance);
    c.encoder_hidden = d.get_list("model.encoder_hidden", c.encoder_hidden);
    c.encoder_features = d.get("model.encoder_features", c.encoder_features);
    c.decoder_hidden = d.get_list("model.decoder_hidden", c.decoder_hidden);
    c.transition_hidden = d.get_list("model.transition_hidden", c.transition_hidden);
    c.entangled = d.get_bool("model.entangled", c.entangled);
    c.twin_factors = d.get("model.twin_factors", c.twin_factors);
    return c;
  }

  friend bool operator==(const ModelConfig&, const ModelConfig&) = default;
};

/// Same model with a single factor spanning the whole latent space.
inline ModelConfig entangled_twin(const ModelConfig& factored) {
  ModelConfig c = factored;
  c.twin_factors = factored.entangled ? factored.twin_factors : factored.k_factors;
  c.factor_dim = factored.latent_dim();
  c.k_factors = 1;
  c.entangled = true;
  return c;
}

/// The k latent factor vectors at one timestep.
template <class S>
struct FactoredLatentState {
  std::vector<Vector<S>> factors;

  static FactoredLatentState from_flat(const ModelConfig& cfg, const Vector<S>& flat) {
    if (static_cast<std::size_t>(flat.size()) != cfg.latent_dim()) {
      throw StructuralError("latent vector has " + std::to_string(flat.size()) + " entries, expected " +
                            std::to_string(cfg.latent_dim()));
    }
    FactoredLatentState s;
    const auto d = static_cast<Eigen::Index>(cfg.factor_dim);
    for (std::size_t i = 0; i < cfg.k_factors; ++i) {
      s.factors.push_back(flat.segment(static_cast<Eigen::Index>(i) * d, d));
    }
    return s;
  }

  Vector<S> flat() const {
    Eigen::Index n = 0;
    for (const auto& f : factors) n += f.size();
    Vector<S> out(n);
    Eigen::Index at = 0;
    for (const auto& f : factors) {
      out.segment(at, f.size()) = f;
      at += f.size();
    }
    return out;
  }

  void validate(const ModelConfig& cfg) const {
    if (factors.size() != cfg.k_factors) {
      throw StructuralError("state has " + std::to_string(factors.size()) + " factors, expected " +
                            std::to_string(cfg.k_factors));
    }
    for (const auto& f : factors) {
      if (static_cast<std::size_t>(f.size()) != cfg.factor_dim) {
        throw StructuralError("factor has " + std::to_string(f.size()) + " entries, expected " +
                              std::to_string(cfg.factor_dim));
      }
    }
  }
};

/// Linear maps that merge the frame features with the transition prediction.
struct Combiner {
  Mlp transformed_x;
  Mlp transformed_mu;
  Mlp transformed_sigma;
  Mlp latent;
  Mlp output_mu;
  Mlp output_sigma;
};

/// Network descriptors and parameter layout implied by a ModelConfig.
struct ModelStructure {
  ParamLayout layout;
  std::vector<Mlp> transitions;
  Mlp decoder;
  Mlp encoder;
  Combiner combiner;
};

inline ModelStructure build_structure(const ModelConfig& cfg) {
  cfg.validate();
  ModelStructure st;
  const std::size_t d = cfg.factor_dim;
  const std::size_t z = cfg.latent_dim();
  const auto leaky = Activation::leaky_relu();
  for (std::size_t i = 0; i < cfg.k_factors; ++i) {
    std::vector<std::size_t> dims{d};
    dims.insert(dims.end(), cfg.transition_hidden.begin(), cfg.transition_hidden.end());
    dims.push_back(2 * d);
    // The SELU follows hidden layers only; the last layer emits raw mean and log-variance.
    st.transitions.push_back(register_mlp(st.layout, "transition" + std::to_string(i), dims,
                                          Activation::selu(), Activation::identity()));
  }
  {
    std::vector<std::size_t> dims{z};
    dims.insert(dims.end(), cfg.decoder_hidden.begin(), cfg.decoder_hidden.end());
    dims.push_back(cfg.frame_size());
    st.decoder = register_mlp(st.layout, "decoder", dims, Activation::relu(), Activation::identity());
  }
  {
    std::vector<std::size_t> dims{cfg.frame_size()};
    dims.insert(dims.end(), cfg.encoder_hidden.begin(), cfg.encoder_hidden.end());
    dims.push_back(cfg.encoder_features);
    st.encoder = register_mlp(st.layout, "encoder", dims, leaky, leaky);
  }
  auto& c = st.combiner;
  c.transformed_x = register_mlp(st.layout, "combiner.transformed_x", {cfg.encoder_features, z}, leaky, leaky);
  c.transformed_mu = register_mlp(st.layout, "combiner.transformed_mu", {z, z}, leaky, leaky);
  c.transformed_sigma = register_mlp(st.layout, "combiner.transformed_sigma", {z, z}, leaky, leaky);
  c.latent = register_mlp(st.layout, "combiner.latent", {3 * z, z}, leaky, leaky);
  c.output_mu = register_mlp(st.layout, "combiner.output_mu", {z, z}, leaky, Activation::identity());
  c.output_sigma = register_mlp(st.layout, "combiner.output_sigma", {z, z}, leaky, Activation::identity());
  return st;
}

template <class S>
struct ModelBundle {
  ModelConfig config;
  ModelStructure structure;
  ParamVector<S> params;

  const ParamLayout& layout() const noexcept { return structure.layout; }
};

/// Allocates every network and initializes it from `rng`. Entangled configs get
/// a single transition network over the whole latent space.
template <class S>
ModelBundle<S> build_bundle(const ModelConfig& cfg, RngStream& rng) {
  ModelBundle<S> b{cfg, build_structure(cfg), {}};
  b.params = ParamVector<S>(b.structure.layout);
  for (const auto& t : b.structure.transitions) init_mlp(t, b.params, rng);
  init_mlp(b.structure.decoder, b.params, rng);
  init_mlp(b.structure.encoder, b.params, rng);
  const auto& c = b.structure.combiner;
  for (const Mlp* m : {&c.transformed_x, &c.transformed_mu, &c.transformed_sigma, &c.latent, &c.output_mu,
                       &c.output_sigma}) {
    init_mlp(*m, b.params, rng);
  }
  return b;
}

/// Taped view of a bundle: the generative and inference sides used by the
/// filtering rollout. Inputs and outputs are features x batch.
template <class S>
class NeuralModel {
 public:
  NeuralModel(const ModelBundle<S>& bundle, ParamLeaves<S>& leaves) : b_(&bundle), leaves_(&leaves) {}

  const ModelConfig& config() const noexcept { return b_->config; }
  std::size_t latent_dim() const noexcept { return b_->config.latent_dim(); }
  std::size_t observation_dim() const noexcept { return b_->config.frame_size(); }
  ad::Tape<S>& tape() const noexcept { return leaves_->tape(); }

  /// N(0, I) for every column.
  GaussianVar<S> initial_prior(Eigen::Index batch) const {
    const auto z = static_cast<Eigen::Index>(latent_dim());
    return {tape().constant(Matrix<S>::Zero(z, batch)), tape().constant(Matrix<S>::Zero(z, batch))};
  }

  /// Each factor's network sees only its own slice of `prev`.
  GaussianVar<S> transition(ad::Var<S> prev) const {
    const auto& cfg = b_->config;
    if (static_cast<std::size_t>(prev.rows()) != cfg.latent_dim()) {
      throw StructuralError("transition: state has " + std::to_string(prev.rows()) + " rows, expected " +
                            std::to_string(cfg.latent_dim()));
    }
    const auto d = static_cast<Eigen::Index>(cfg.factor_dim);
    std::vector<ad::Var<S>> means, log_vars;
    for (std::size_t i = 0; i < cfg.k_factors; ++i) {
      auto in = ad::slice_rows(prev, static_cast<Eigen::Index>(i) * d, d);
      auto out = mlp_forward(b_->structure.transitions[i], *leaves_, in);
      means.push_back(ad::slice_rows(out, 0, d));
      log_vars.push_back(clamp_log_var(ad::slice_rows(out, d, d)));
    }
    if (cfg.k_factors == 1) return {means.front(), log_vars.front()};
    return {ad::concat_rows<S>(means), ad::concat_rows<S>(log_vars)};
  }

  /// Pixel means squashed to [0, 1]; fixed observation variance.
  GaussianVar<S> emission(ad::Var<S> latents) const {
    if (static_cast<std::size_t>(latents.rows()) != latent_dim()) {
      throw StructuralError("decode: state has " + std::to_string(latents.rows()) + " rows, expected " +
                            std::to_string(latent_dim()));
    }
    auto mean = ad::sigmoid(mlp_forward(b_->structure.decoder, *leaves_, latents));
    auto lv = tape().constant(Matrix<S>::Constant(static_cast<Eigen::Index>(observation_dim()), latents.cols(),
                                                  static_cast<S>(std::log(b_->config.obs_variance))));
    return {mean, lv};
  }

  /// Frame features, computed once per frame ahead of the recurrence.
  ad::Var<S> encode(ad::Var<S> frames) const {
    if (static_cast<std::size_t>(frames.rows()) != observation_dim()) {
      throw StructuralError("encode: frame has " + std::to_string(frames.rows()) + " values, expected " +
                            std::to_string(observation_dim()));
    }
    return mlp_forward(b_->structure.encoder, *leaves_, frames);
  }

  /// Approximate posterior from the predicted prior and frame features. On the
  /// first step the prediction inputs are replaced by zeros.
  GaussianVar<S> posterior(const GaussianVar<S>& prediction, ad::Var<S> features, bool first_step,
                           std::size_t /*t*/ = 0) const {
    const auto& c = b_->structure.combiner;
    const auto z = static_cast<Eigen::Index>(latent_dim());
    if (prediction.mean.rows() != z || prediction.log_var.rows() != z) {
      throw StructuralError("posterior: prediction has " + std::to_string(prediction.mean.rows()) +
                            " rows, expected " + std::to_string(z));
    }
    if (static_cast<std::size_t>(features.rows()) != b_->config.encoder_features) {
      throw StructuralError("posterior: feature size mismatch");
    }
    ad::Var<S> pm = prediction.mean;
    ad::Var<S> pl = prediction.log_var;
    if (first_step) {
      pm = tape().constant(Matrix<S>::Zero(z, features.cols()));
      pl = tape().constant(Matrix<S>::Zero(z, features.cols()));
    }
    auto tx = mlp_forward(c.transformed_x, *leaves_, features);
    auto tm = mlp_forward(c.transformed_mu, *leaves_, pm);
    auto ts = mlp_forward(c.transformed_sigma, *leaves_, pl);
    auto latent = mlp_forward(c.latent, *leaves_, ad::concat_rows<S>({tx, tm, ts}));
    auto mean = mlp_forward(c.output_mu, *leaves_, latent);
    auto lv = clamp_log_var(mlp_forward(c.output_sigma, *leaves_, latent));
    return {mean, lv};
  }

 private:
  static ad::Var<S> clamp_log_var(ad::Var<S> v) { return ad::clamp(v, S(kLogVarMin), S(kLogVarMax)); }

  const ModelBundle<S>* b_;
  ParamLeaves<S>* leaves_;
};

template <class S>
DiagonalGaussian<S> prior_initial(const ModelConfig& cfg) {
  return DiagonalGaussian<S>::standard(cfg.latent_dim());
}

namespace detail {

template <class S>
DiagonalGaussian<S> single(const GaussianVar<S>& g) {
  return column(g, 0);
}

template <class S>
ad::Var<S> column_constant(ad::Tape<S>& t, const Vector<S>& v) {
  return t.constant(Matrix<S>(v));
}

}  // namespace detail

template <class S>
DiagonalGaussian<S> transition_predict(const ModelBundle<S>& b, const FactoredLatentState<S>& prev) {
  prev.validate(b.config);
  ad::Tape<S> tape;
  ParamLeaves<S> leaves(tape, b.params);
  NeuralModel<S> m(b, leaves);
  return detail::single(m.transition(detail::column_constant(tape, prev.flat())));
}

template <class S>
DiagonalGaussian<S> decode(const ModelBundle<S>& b, const FactoredLatentState<S>& state) {
  state.validate(b.config);
  ad::Tape<S> tape;
  ParamLeaves<S> leaves(tape, b.params);
  NeuralModel<S> m(b, leaves);
  return detail::single(m.emission(detail::column_constant(tape, state.flat())));
}

template <class S>
DiagonalGaussian<S> infer_posterior(const ModelBundle<S>& b, const DiagonalGaussian<S>& prediction,
                                    const Vector<S>& frame, bool first_step) {
  if (static_cast<std::size_t>(frame.size()) != b.config.frame_size()) {
    throw StructuralError("infer_posterior: frame has " + std::to_string(frame.size()) + " values, expected " +
                          std::to_string(b.config.frame_size()));
  }
  if (prediction.dim() != b.config.latent_dim()) {
    throw StructuralError("infer_posterior: prediction dimension mismatch");
  }
  ad::Tape<S> tape;
  ParamLeaves<S> leaves(tape, b.params);
  NeuralModel<S> m(b, leaves);
  GaussianVar<S> pred{detail::column_constant(tape, prediction.mean()),
                      detail::column_constant(tape, prediction.log_var())};
  auto features = m.encode(detail::column_constant(tape, frame));
  return detail::single(m.posterior(pred, features, first_step));
}

// Checkpoint: <dir>/model.txt (config) + <dir>/params.{txt,bin}.

template <class S>
void save_checkpoint(const ModelBundle<S>& b, const std::filesystem::path& dir) {
  std::filesystem::create_directories(dir);
  b.config.to_doc().save(dir / "model.txt");
  save_params(b.params, dir / "params");
}

template <class S>
ModelBundle<S> load_checkpoint(const std::filesystem::path& dir) {
  const auto cfg = ModelConfig::from_doc(KeyValueDoc::load(dir / "model.txt"));
  ModelBundle<S> b{cfg, build_structure(cfg), {}};
  b.params = load_params<S>(dir / "params");
  if (!(b.params.layout == b.structure.layout)) {
    throw StructuralError("checkpoint parameters do not match the structure described by model.txt");
  }
  return b;
}

}  // namespace facseq
