#pragma once

// Linear-Gaussian state-space model with an exact Kalman log-likelihood, and
// a check that the filtering ELBO estimator stays below it.

#include <cmath>
#include <numbers>
#include <sstream>
#include <string>
#include <vector>

#include <Eigen/Dense>

#include "facseq/autodiff.hpp"
#include "facseq/elbo.hpp"
#include "facseq/errors.hpp"
#include "facseq/gaussian.hpp"
#include "facseq/rng.hpp"

namespace facseq {

/// z_1 ~ N(m0, diag v0);  z_t = A z_{t-1} + N(0, diag Q);  x_t = C z_t + N(0, diag R).
struct LinearGaussianModel {
  Eigen::MatrixXd A;
  Eigen::VectorXd Q;
  Eigen::MatrixXd C;
  Eigen::VectorXd R;
  DiagonalGaussian<double> initial;

  Eigen::Index state_dim() const noexcept { return A.rows(); }
  Eigen::Index obs_dim() const noexcept { return C.rows(); }

  void validate() const {
    const auto z = A.rows();
    if (A.cols() != z || Q.size() != z || C.cols() != z || R.size() != C.rows() ||
        static_cast<Eigen::Index>(initial.dim()) != z) {
      throw StructuralError("linear-Gaussian model dimensions are inconsistent");
    }
    if (z == 0 || C.rows() == 0) throw StructuralError("linear-Gaussian model needs non-empty state and observation");
    if ((Q.array() <= 0).any() || (R.array() <= 0).any()) {
      throw PreconditionError("transition and emission variances must be positive");
    }
  }
};

/// Exact log p(x_1..x_n) by the prediction-error decomposition.
inline double kalman_loglik(const LinearGaussianModel& m, const std::vector<Eigen::VectorXd>& xs) {
  m.validate();
  Eigen::VectorXd mean = m.initial.mean();
  Eigen::MatrixXd cov = m.initial.variance().asDiagonal();
  double ll = 0;
  for (std::size_t t = 0; t < xs.size(); ++t) {
    if (xs[t].size() != m.obs_dim()) throw StructuralError("observation dimension does not match C");
    if (t > 0) {
      mean = m.A * mean;
      cov = m.A * cov * m.A.transpose();
      cov.diagonal() += m.Q;
    }
    Eigen::MatrixXd S = m.C * cov * m.C.transpose();
    S.diagonal() += m.R;
    if (!S.allFinite()) throw NumericalError("innovation covariance is not finite", "S");
    Eigen::LLT<Eigen::MatrixXd> llt(S);
    if (llt.info() != Eigen::Success) throw NumericalError("innovation covariance is not positive definite", "S");
    const Eigen::VectorXd innov = xs[t] - m.C * mean;
    const Eigen::VectorXd w = llt.solve(innov);
    const double logdet = 2.0 * llt.matrixL().toDenseMatrix().diagonal().array().log().sum();
    ll += -0.5 * (static_cast<double>(innov.size()) * std::log(2.0 * std::numbers::pi) + logdet + innov.dot(w));
    const Eigen::MatrixXd gain = cov * m.C.transpose() * llt.solve(Eigen::MatrixXd::Identity(S.rows(), S.cols()));
    mean += gain * innov;
    cov -= gain * m.C * cov;
    cov = 0.5 * (cov + cov.transpose());
  }
  return ll;
}

inline std::vector<Eigen::VectorXd> sample_observations(const LinearGaussianModel& m, std::size_t n, RngStream& rng) {
  m.validate();
  const auto normals = [&rng](Eigen::Index k) {
    Eigen::VectorXd v(k);
    for (Eigen::Index i = 0; i < k; ++i) v[i] = rng.normal();
    return v;
  };
  std::vector<Eigen::VectorXd> xs;
  Eigen::VectorXd z = sample(m.initial, rng);
  for (std::size_t t = 0; t < n; ++t) {
    if (t > 0) z = m.A * z + (m.Q.array().sqrt() * normals(m.state_dim()).array()).matrix();
    xs.push_back(m.C * z + (m.R.array().sqrt() * normals(m.obs_dim()).array()).matrix());
  }
  return xs;
}

/// Affine filtering posterior for one step:
///   q(z_t | z_{t-1}, x_t) = N(K x_t + L m_t + c, diag exp(log_var))
/// where m_t is the predicted prior mean (A z_{t-1}, or the initial mean).
struct LinearQStep {
  Eigen::MatrixXd K;
  Eigen::MatrixXd L;
  Eigen::VectorXd c;
  Eigen::VectorXd log_var;
};

using LinearQ = std::vector<LinearQStep>;

/// q_t equal to p(z_t | z_{t-1}, x_t) exactly. Requires that this conditional
/// has diagonal covariance, i.e. C^T R^{-1} C is diagonal.
inline LinearQ one_step_posterior_q(const LinearGaussianModel& m, std::size_t n) {
  m.validate();
  const Eigen::MatrixXd info = m.C.transpose() * m.R.cwiseInverse().asDiagonal() * m.C;
  const Eigen::MatrixXd off = info - Eigen::MatrixXd(info.diagonal().asDiagonal());
  if (off.cwiseAbs().maxCoeff() > 1e-12 * (1.0 + info.cwiseAbs().maxCoeff())) {
    throw PreconditionError("one-step posterior is not diagonal for this emission");
  }
  LinearQ q;
  for (std::size_t t = 0; t < n; ++t) {
    const Eigen::VectorXd prior_var = t == 0 ? m.initial.variance() : m.Q;
    const Eigen::VectorXd post_var = (prior_var.cwiseInverse() + info.diagonal()).cwiseInverse();
    LinearQStep s;
    s.K = post_var.asDiagonal() * m.C.transpose() * m.R.cwiseInverse().asDiagonal();
    s.L = Eigen::MatrixXd(post_var.cwiseQuotient(prior_var).asDiagonal());
    s.c = Eigen::VectorXd::Zero(m.state_dim());
    s.log_var = post_var.array().log().matrix();
    q.push_back(std::move(s));
  }
  return q;
}

/// The linear-Gaussian model and an affine q presented through the
/// FilteringModel interface, so the production estimator evaluates them.
class LinearGaussianSide {
 public:
  LinearGaussianSide(const LinearGaussianModel& m, const LinearQ& q, ad::Tape<double>& tape)
      : m_(&m), q_(&q), tape_(&tape) {}

  ad::Tape<double>& tape() const noexcept { return *tape_; }
  std::size_t latent_dim() const noexcept { return static_cast<std::size_t>(m_->state_dim()); }
  std::size_t observation_dim() const noexcept { return static_cast<std::size_t>(m_->obs_dim()); }

  GaussianVar<double> initial_prior(Eigen::Index batch) const {
    return {tape_->constant(m_->initial.mean().replicate(1, batch)),
            tape_->constant(m_->initial.log_var().replicate(1, batch))};
  }
  GaussianVar<double> transition(ad::Var<double> prev) const {
    return {ad::matmul(tape_->constant(m_->A), prev),
            tape_->constant(m_->Q.array().log().matrix().replicate(1, prev.cols()))};
  }
  GaussianVar<double> emission(ad::Var<double> z) const {
    return {ad::matmul(tape_->constant(m_->C), z),
            tape_->constant(m_->R.array().log().matrix().replicate(1, z.cols()))};
  }
  ad::Var<double> encode(ad::Var<double> frames) const { return frames; }
  GaussianVar<double> posterior(const GaussianVar<double>& prediction, ad::Var<double> x, bool /*first_step*/,
                                std::size_t t) const {
    const auto& s = q_->at(t);
    auto mean = ad::add_bias(
        ad::add(ad::matmul(tape_->constant(s.K), x), ad::matmul(tape_->constant(s.L), prediction.mean)),
        tape_->constant(s.c));
    return {mean, tape_->constant(s.log_var.replicate(1, x.cols()))};
  }

 private:
  const LinearGaussianModel* m_;
  const LinearQ* q_;
  ad::Tape<double>* tape_;
};

struct BoundReport {
  double elbo_mean = 0;
  double elbo_se = 0;
  double exact_loglik = 0;
  bool pass = false;

  std::string line() const {
    std::ostringstream os;
    os.precision(10);
    os << elbo_mean << ", " << elbo_se << ", " << exact_loglik << ", " << (pass ? "pass" : "fail");
    return os.str();
  }
};

/// Monte-Carlo ELBO for fixed observations, compared against the Kalman
/// log-likelihood: passes when mean ELBO <= loglik + 3 SE.
inline BoundReport verify_bound(const LinearGaussianModel& m, const LinearQ& q, const std::vector<Eigen::VectorXd>& xs,
                                std::size_t n_mc, RngStream& rng, const EstimatorOptions& opts = {}) {
  m.validate();
  if (n_mc < 2) throw PreconditionError("verify_bound needs at least two Monte-Carlo samples");
  if (q.size() < xs.size()) throw StructuralError("q has fewer steps than the observation sequence");
  for (const auto& s : q) {
    if (s.K.rows() != m.state_dim() || s.K.cols() != m.obs_dim() || s.L.rows() != m.state_dim() ||
        s.L.cols() != m.state_dim() || s.c.size() != m.state_dim() || s.log_var.size() != m.state_dim()) {
      throw StructuralError("q step dimensions do not match the model");
    }
  }
  const auto B = static_cast<Eigen::Index>(n_mc);
  std::vector<Eigen::MatrixXd> frames, noise;
  for (const auto& x : xs) {
    frames.push_back(x.replicate(1, B));
    noise.push_back(draw_noise<double>(static_cast<std::size_t>(m.state_dim()), n_mc, rng));
  }
  ad::Tape<double> tape;
  LinearGaussianSide side(m, q, tape);
  const auto r = rollout_on_tape<double>(side, frames, noise, opts);
  const Eigen::RowVectorXd e = r.elbo.value();
  BoundReport rep;
  rep.elbo_mean = e.mean();
  rep.elbo_se = std::sqrt((e.array() - rep.elbo_mean).square().sum() / static_cast<double>(B - 1) / static_cast<double>(B));
  rep.exact_loglik = kalman_loglik(m, xs);
  rep.pass = rep.elbo_mean <= rep.exact_loglik + 3.0 * rep.elbo_se;
  return rep;
}

/// Draws a length-n observation sequence from the model, then checks the bound on it.
inline BoundReport verify_bound(const LinearGaussianModel& m, const LinearQ& q, std::size_t n, std::size_t n_mc,
                                RngStream& rng, const EstimatorOptions& opts = {}) {
  auto xs = sample_observations(m, n, rng);
  return verify_bound(m, q, xs, n_mc, rng, opts);
}

/// Random stable instance: |eigenvalues of A| < 1 is not enforced, entries are
/// kept small instead.
inline LinearGaussianModel random_linear_model(Eigen::Index state_dim, Eigen::Index obs_dim, RngStream& rng) {
  LinearGaussianModel m;
  m.A = Eigen::MatrixXd(state_dim, state_dim);
  m.C = Eigen::MatrixXd(obs_dim, state_dim);
  m.Q = Eigen::VectorXd(state_dim);
  m.R = Eigen::VectorXd(obs_dim);
  for (Eigen::Index i = 0; i < m.A.size(); ++i) m.A.data()[i] = rng.uniform(-0.9, 0.9);
  for (Eigen::Index i = 0; i < m.C.size(); ++i) m.C.data()[i] = rng.uniform(-1.5, 1.5);
  for (Eigen::Index i = 0; i < state_dim; ++i) m.Q[i] = rng.uniform(0.1, 1.0);
  for (Eigen::Index i = 0; i < obs_dim; ++i) m.R[i] = rng.uniform(0.1, 1.0);
  Eigen::VectorXd m0(state_dim), lv0(state_dim);
  for (Eigen::Index i = 0; i < state_dim; ++i) {
    m0[i] = rng.normal();
    lv0[i] = std::log(rng.uniform(0.5, 2.0));
  }
  m.initial = DiagonalGaussian<double>(m0, lv0);
  return m;
}

/// Arbitrary affine q for n steps.
inline LinearQ random_q(const LinearGaussianModel& m, std::size_t n, RngStream& rng) {
  LinearQ q;
  const auto z = m.state_dim(), o = m.obs_dim();
  for (std::size_t t = 0; t < n; ++t) {
    LinearQStep s{Eigen::MatrixXd(z, o), Eigen::MatrixXd(z, z), Eigen::VectorXd(z), Eigen::VectorXd(z)};
    for (Eigen::Index i = 0; i < s.K.size(); ++i) s.K.data()[i] = 0.5 * rng.normal();
    for (Eigen::Index i = 0; i < s.L.size(); ++i) s.L.data()[i] = 0.5 * rng.normal();
    for (Eigen::Index i = 0; i < z; ++i) {
      s.c[i] = 0.5 * rng.normal();
      s.log_var[i] = rng.uniform(-2.0, 1.0);
    }
    q.push_back(std::move(s));
  }
  return q;
}

}  // namespace facseq
