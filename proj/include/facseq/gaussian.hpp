#pragma once

#include <cmath>
#include <numbers>
#include <span>

#include "facseq/autodiff.hpp"
#include "facseq/errors.hpp"
#include "facseq/rng.hpp"

namespace facseq {

inline constexpr double kLogVarMin = -12.0;
inline constexpr double kLogVarMax = 12.0;
inline constexpr double kLog2Pi = 1.8378770664093454836;  // log(2 pi)

/// Gaussian with diagonal covariance, stored as mean and log-variance.
/// Log-variances are clamped to [kLogVarMin, kLogVarMax] on construction.
template <class S>
class DiagonalGaussian {
 public:
  DiagonalGaussian() = default;
  DiagonalGaussian(Vector<S> mean, Vector<S> log_var) : mean_(std::move(mean)), log_var_(std::move(log_var)) {
    if (mean_.size() != log_var_.size()) {
      throw StructuralError("DiagonalGaussian: mean has " + std::to_string(mean_.size()) +
                            " entries but log_var has " + std::to_string(log_var_.size()));
    }
    log_var_ = log_var_.cwiseMax(S(kLogVarMin)).cwiseMin(S(kLogVarMax));
  }

  static DiagonalGaussian standard(std::size_t dim) {
    return {Vector<S>::Zero(static_cast<Eigen::Index>(dim)), Vector<S>::Zero(static_cast<Eigen::Index>(dim))};
  }

  const Vector<S>& mean() const noexcept { return mean_; }
  const Vector<S>& log_var() const noexcept { return log_var_; }
  std::size_t dim() const noexcept { return static_cast<std::size_t>(mean_.size()); }
  Vector<S> variance() const { return log_var_.array().exp().matrix(); }

  friend bool operator==(const DiagonalGaussian& a, const DiagonalGaussian& b) {
    return a.mean_ == b.mean_ && a.log_var_ == b.log_var_;
  }

 private:
  Vector<S> mean_;
  Vector<S> log_var_;
};

// Elementwise kernels shared by the value API and the taped ops.
namespace kernel {

template <class S>
S log_pdf(S mean, S log_var, S x) {
  const S d = x - mean;
  return S(-0.5 * kLog2Pi) - S(0.5) * log_var - d * d * std::exp(-log_var) * S(0.5);
}

template <class S>
S kl(S q_mean, S q_log_var, S p_mean, S p_log_var) {
  const S d = q_mean - p_mean;
  return S(0.5) * (p_log_var - q_log_var) + (std::exp(q_log_var) + d * d) * S(0.5) * std::exp(-p_log_var) -
         S(0.5);
}

}  // namespace kernel

template <class S>
S log_pdf(const DiagonalGaussian<S>& dist, const Vector<S>& x) {
  if (static_cast<std::size_t>(x.size()) != dist.dim()) {
    throw StructuralError("log_pdf: point has " + std::to_string(x.size()) + " entries, distribution " +
                          std::to_string(dist.dim()));
  }
  S total = 0;
  for (Eigen::Index j = 0; j < x.size(); ++j) total += kernel::log_pdf(dist.mean()[j], dist.log_var()[j], x[j]);
  return total;
}

/// KL(q || p) in closed form.
template <class S>
S kl_divergence(const DiagonalGaussian<S>& q, const DiagonalGaussian<S>& p) {
  if (q.dim() != p.dim()) {
    throw StructuralError("kl_divergence: dimensions " + std::to_string(q.dim()) + " and " +
                          std::to_string(p.dim()) + " differ");
  }
  S total = 0;
  for (Eigen::Index j = 0; j < q.mean().size(); ++j) {
    total += kernel::kl(q.mean()[j], q.log_var()[j], p.mean()[j], p.log_var()[j]);
  }
  return total;
}

/// mean + sigma * eps for a caller-supplied eps.
template <class S>
Vector<S> sample_with_noise(const DiagonalGaussian<S>& dist, const Vector<S>& eps) {
  if (static_cast<std::size_t>(eps.size()) != dist.dim()) throw StructuralError("sample: noise length mismatch");
  return dist.mean() + ((dist.log_var() * S(0.5)).array().exp() * eps.array()).matrix();
}

template <class S>
Vector<S> standard_normal(std::size_t dim, RngStream& rng) {
  Vector<S> eps(static_cast<Eigen::Index>(dim));
  for (auto& e : eps) e = static_cast<S>(rng.normal());
  return eps;
}

/// Reparameterized draw.
template <class S>
Vector<S> sample(const DiagonalGaussian<S>& dist, RngStream& rng) {
  return sample_with_noise(dist, standard_normal<S>(dist.dim(), rng));
}

// Taped counterparts. A batch of diagonal Gaussians is a pair of dim x batch
// nodes.

template <class S>
struct GaussianVar {
  ad::Var<S> mean;
  ad::Var<S> log_var;
};

/// Extracts column `col` of a taped batch as a value-type Gaussian.
template <class S>
DiagonalGaussian<S> column(const GaussianVar<S>& g, Eigen::Index col) {
  return {g.mean.value().col(col), g.log_var.value().col(col)};
}

namespace ad {

/// Per-column log-density, 1 x batch.
template <class S>
Var<S> gaussian_log_pdf(const GaussianVar<S>& dist, Var<S> x) {
  const auto& m = dist.mean.value();
  const auto& lv = dist.log_var.value();
  const auto& xv = x.value();
  detail::require_same_shape(m, lv, "gaussian_log_pdf");
  detail::require_same_shape(m, xv, "gaussian_log_pdf");
  Matrix<S> out(1, m.cols());
  for (Eigen::Index c = 0; c < m.cols(); ++c) {
    S acc = 0;
    for (Eigen::Index r = 0; r < m.rows(); ++r) acc += kernel::log_pdf(m(r, c), lv(r, c), xv(r, c));
    out(0, c) = acc;
  }
  Tape<S>& t = *x.tape;
  const bool rg = detail::any_grad({dist.mean, dist.log_var, x});
  return t.push(std::move(out), rg,
                [mi = dist.mean.index, li = dist.log_var.index, xi = x.index](Tape<S>& tp, std::size_t self) {
                  const auto g = tp.grad_ref(self).row(0);
                  const auto& m = tp.value(mi);
                  const auto& lv = tp.value(li);
                  const auto& xv = tp.value(xi);
                  // d/dmean = (x - mean) / var; d/dlog_var = -1/2 + (x - mean)^2 / (2 var)
                  const Matrix<S> z = ((xv - m).array() * (-lv).array().exp()).matrix();
                  const Matrix<S> gmean = (z.array().rowwise() * g.array()).matrix();
                  if (tp.requires_grad(mi)) tp.accumulate(mi, gmean);
                  if (tp.requires_grad(xi)) tp.accumulate(xi, -gmean);
                  if (tp.requires_grad(li)) {
                    const Matrix<S> dl = ((S(-0.5) + S(0.5) * z.array() * (xv - m).array()).rowwise() *
                                          g.array())
                                             .matrix();
                    tp.accumulate(li, dl);
                  }
                });
}

/// Per-column KL(q || p), 1 x batch.
template <class S>
Var<S> gaussian_kl(const GaussianVar<S>& q, const GaussianVar<S>& p) {
  const auto& qm = q.mean.value();
  const auto& ql = q.log_var.value();
  const auto& pm = p.mean.value();
  const auto& pl = p.log_var.value();
  detail::require_same_shape(qm, pm, "gaussian_kl");
  detail::require_same_shape(ql, pl, "gaussian_kl");
  detail::require_same_shape(qm, ql, "gaussian_kl");
  Matrix<S> out(1, qm.cols());
  for (Eigen::Index c = 0; c < qm.cols(); ++c) {
    S acc = 0;
    for (Eigen::Index r = 0; r < qm.rows(); ++r) acc += kernel::kl(qm(r, c), ql(r, c), pm(r, c), pl(r, c));
    out(0, c) = acc;
  }
  Tape<S>& t = *q.mean.tape;
  const bool rg = detail::any_grad({q.mean, q.log_var, p.mean, p.log_var});
  return t.push(std::move(out), rg,
                [qmi = q.mean.index, qli = q.log_var.index, pmi = p.mean.index, pli = p.log_var.index](
                    Tape<S>& tp, std::size_t self) {
                  const auto g = tp.grad_ref(self).row(0);
                  const auto& qm = tp.value(qmi);
                  const auto& ql = tp.value(qli);
                  const auto& pm = tp.value(pmi);
                  const auto& pl = tp.value(pli);
                  const auto inv_pvar = (-pl).array().exp();
                  const auto d = (qm - pm).array();
                  const Matrix<S> dmean = ((d * inv_pvar).rowwise() * g.array()).matrix();
                  if (tp.requires_grad(qmi)) tp.accumulate(qmi, dmean);
                  if (tp.requires_grad(pmi)) tp.accumulate(pmi, -dmean);
                  if (tp.requires_grad(qli)) {
                    const Matrix<S> dq =
                        ((S(-0.5) + S(0.5) * ql.array().exp() * inv_pvar).rowwise() * g.array()).matrix();
                    tp.accumulate(qli, dq);
                  }
                  if (tp.requires_grad(pli)) {
                    const Matrix<S> dp =
                        ((S(0.5) - S(0.5) * (ql.array().exp() + d * d) * inv_pvar).rowwise() * g.array())
                            .matrix();
                    tp.accumulate(pli, dp);
                  }
                });
}

/// mean + exp(log_var / 2) * eps with eps held constant.
template <class S>
Var<S> reparameterize(const GaussianVar<S>& dist, const Matrix<S>& eps) {
  const auto& m = dist.mean.value();
  const auto& lv = dist.log_var.value();
  detail::require_same_shape(m, eps, "reparameterize");
  const Matrix<S> sd = (lv * S(0.5)).array().exp().matrix();
  Matrix<S> out = m + sd.cwiseProduct(eps);
  Tape<S>& t = *dist.mean.tape;
  const bool rg = detail::any_grad({dist.mean, dist.log_var});
  return t.push(std::move(out), rg,
                [mi = dist.mean.index, li = dist.log_var.index, sde = Matrix<S>(sd.cwiseProduct(eps))](
                    Tape<S>& tp, std::size_t self) {
                  const Matrix<S>& g = tp.grad_ref(self);
                  tp.accumulate(mi, g);
                  if (tp.requires_grad(li)) tp.accumulate(li, (g.cwiseProduct(sde) * S(0.5)));
                });
}

}  // namespace ad
}  // namespace facseq
