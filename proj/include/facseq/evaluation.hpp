#pragma once

// Latent-structure evaluation: KSG mutual information, lag-one correlation,
// random partition search for entangled models, and the summary table.

#include <algorithm>
#include <cmath>
#include <numeric>
#include <sstream>
#include <string>
#include <vector>

#include <Eigen/Dense>

#include "facseq/data.hpp"
#include "facseq/elbo.hpp"
#include "facseq/errors.hpp"
#include "facseq/model.hpp"
#include "facseq/rng.hpp"

namespace facseq {

/// Digamma by upward recurrence to x >= 6 followed by the asymptotic series.
inline double digamma(double x) {
  if (!(x > 0.0) || !std::isfinite(x)) throw DomainError("digamma: argument must be positive and finite");
  double acc = 0.0;
  while (x < 6.0) {
    acc -= 1.0 / x;
    x += 1.0;
  }
  const double inv = 1.0 / x;
  const double inv2 = inv * inv;
  // B_2k / (2k x^2k) for k = 1..6
  const double series =
      inv2 * (1.0 / 12 - inv2 * (1.0 / 120 - inv2 * (1.0 / 252 - inv2 * (1.0 / 240 - inv2 * (1.0 / 132 - inv2 * 691.0 / 32760)))));
  return acc + std::log(x) - 0.5 * inv - series;
}

namespace detail {

/// Row-major copy of an N x d matrix.
inline std::vector<double> row_major(const Eigen::MatrixXd& m) {
  std::vector<double> out(static_cast<std::size_t>(m.size()));
  for (Eigen::Index i = 0; i < m.rows(); ++i) {
    for (Eigen::Index j = 0; j < m.cols(); ++j) out[static_cast<std::size_t>(i * m.cols() + j)] = m(i, j);
  }
  return out;
}

inline bool has_ties(const Eigen::MatrixXd& m) {
  std::vector<double> col(static_cast<std::size_t>(m.rows()));
  for (Eigen::Index j = 0; j < m.cols(); ++j) {
    for (Eigen::Index i = 0; i < m.rows(); ++i) col[static_cast<std::size_t>(i)] = m(i, j);
    std::sort(col.begin(), col.end());
    if (std::adjacent_find(col.begin(), col.end()) != col.end()) return true;
  }
  return false;
}

/// Adds uniform noise of magnitude 1e-10 (relative to the column's largest
/// absolute value when that exceeds 1).
inline void jitter(Eigen::MatrixXd& m, RngStream& rng) {
  for (Eigen::Index j = 0; j < m.cols(); ++j) {
    const double scale = 1e-10 * std::max(1.0, m.col(j).cwiseAbs().maxCoeff());
    for (Eigen::Index i = 0; i < m.rows(); ++i) m(i, j) += rng.uniform(-scale, scale);
  }
}

inline double chebyshev(const double* a, const double* b, std::size_t d) {
  double m = 0.0;
  for (std::size_t k = 0; k < d; ++k) m = std::max(m, std::abs(a[k] - b[k]));
  return m;
}

}  // namespace detail

/// Kraskov-Stogbauer-Grassberger estimator (first variant), in nats. Rows are
/// samples. Distances are max-norms within each space, joined by max. Exact
/// brute-force neighbour search. When any marginal coordinate contains
/// repeated values, every coordinate is jittered from `rng` first.
inline double ksg_mi(const Eigen::MatrixXd& x, const Eigen::MatrixXd& y, int k, RngStream rng = RngStream(0)) {
  const Eigen::Index n = x.rows();
  if (y.rows() != n) throw StructuralError("ksg_mi: x and y have different sample counts");
  if (k < 1 || n <= k) throw PreconditionError("ksg_mi: need N > k >= 1");
  if (x.cols() == 0 || y.cols() == 0) throw StructuralError("ksg_mi: empty coordinate block");
  Eigen::MatrixXd xs = x, ys = y;
  if (detail::has_ties(xs) || detail::has_ties(ys)) {
    detail::jitter(xs, rng);
    detail::jitter(ys, rng);
  }
  const auto dx = static_cast<std::size_t>(xs.cols());
  const auto dy = static_cast<std::size_t>(ys.cols());
  const auto N = static_cast<std::size_t>(n);
  const auto xr = detail::row_major(xs);
  const auto yr = detail::row_major(ys);

  std::vector<double> psi(N + 1);
  for (std::size_t i = 1; i <= N; ++i) psi[i] = digamma(static_cast<double>(i));

  std::vector<double> distx(N), disty(N), joint(N - 1);
  double acc = 0.0;
  for (std::size_t i = 0; i < N; ++i) {
    std::size_t m = 0;
    for (std::size_t j = 0; j < N; ++j) {
      distx[j] = detail::chebyshev(&xr[i * dx], &xr[j * dx], dx);
      disty[j] = detail::chebyshev(&yr[i * dy], &yr[j * dy], dy);
      if (j != i) joint[m++] = std::max(distx[j], disty[j]);
    }
    std::nth_element(joint.begin(), joint.begin() + (k - 1), joint.end());
    const double eps = joint[static_cast<std::size_t>(k - 1)];
    std::size_t nx = 0, ny = 0;
    for (std::size_t j = 0; j < N; ++j) {
      if (j == i) continue;
      nx += distx[j] < eps;
      ny += disty[j] < eps;
    }
    acc += psi[nx + 1] + psi[ny + 1];
  }
  return digamma(static_cast<double>(k)) + psi[N] - acc / static_cast<double>(N);
}

/// Posterior samples at consecutive timesteps: row r of `current` is u_t and
/// row r of `next` is u_{t+1} for the same sequence.
struct LatentPairSamples {
  Eigen::MatrixXd current;
  Eigen::MatrixXd next;

  Eigen::Index size() const noexcept { return current.rows(); }
  Eigen::Index dim() const noexcept { return current.cols(); }

  void validate() const {
    if (current.rows() != next.rows() || current.cols() != next.cols()) {
      throw StructuralError("latent pair blocks differ in shape");
    }
    if (current.rows() < 2) throw PreconditionError("need at least two latent pairs");
  }
};

/// Pearson correlation of unit a at time t (row) with unit b at time t+1
/// (column). Units with zero variance give zero entries.
inline Eigen::MatrixXd corr_matrix(const LatentPairSamples& s) {
  s.validate();
  const auto center = [](const Eigen::MatrixXd& m) {
    return Eigen::MatrixXd(m.rowwise() - m.colwise().mean());
  };
  const Eigen::MatrixXd a = center(s.current);
  const Eigen::MatrixXd b = center(s.next);
  const Eigen::VectorXd na = a.colwise().norm();
  const Eigen::VectorXd nb = b.colwise().norm();
  Eigen::MatrixXd c = a.transpose() * b;
  for (Eigen::Index i = 0; i < c.rows(); ++i) {
    for (Eigen::Index j = 0; j < c.cols(); ++j) {
      const double den = na[i] * nb[j];
      c(i, j) = den > 0.0 ? std::clamp(c(i, j) / den, -1.0, 1.0) : 0.0;
    }
  }
  return c;
}

/// Assignment of latent units to groups; each group lists unit indices in
/// ascending order.
struct Partition {
  std::vector<std::vector<std::size_t>> groups;

  std::size_t units() const {
    std::size_t n = 0;
    for (const auto& g : groups) n += g.size();
    return n;
  }

  /// Contiguous blocks of `size` units, as used by a factored model.
  static Partition contiguous(std::size_t k, std::size_t size) {
    Partition p;
    for (std::size_t i = 0; i < k; ++i) {
      p.groups.emplace_back(size);
      std::iota(p.groups.back().begin(), p.groups.back().end(), i * size);
    }
    return p;
  }

  /// Uniformly random assignment into k groups whose sizes differ by at most one.
  static Partition random(std::size_t units, std::size_t k, RngStream& rng) {
    if (k == 0 || k > units) throw PreconditionError("partition needs 1 <= k <= units");
    const auto perm = rng.permutation(units);
    Partition p;
    p.groups.resize(k);
    for (std::size_t i = 0; i < units; ++i) p.groups[i % k].push_back(perm[i]);
    for (auto& g : p.groups) std::sort(g.begin(), g.end());
    return p;
  }

  std::string str() const {
    std::ostringstream os;
    for (std::size_t i = 0; i < groups.size(); ++i) {
      os << (i ? " | " : "");
      for (std::size_t j = 0; j < groups[i].size(); ++j) os << (j ? " " : "") << groups[i][j];
    }
    return os.str();
  }

  friend bool operator==(const Partition&, const Partition&) = default;
};

struct MiTable {
  double same_factor_mi = 0;   // mean over i of I(z_{t+1}^i; z_t^i)
  double cross_factor_mi = 0;  // mean over ordered i != j of I(z_{t+1}^i; z_t^j); 0 with one group
  double elbo = 0;

  double separation() const noexcept { return same_factor_mi - cross_factor_mi; }
};

namespace detail {

inline Eigen::MatrixXd columns(const Eigen::MatrixXd& m, const std::vector<std::size_t>& idx) {
  Eigen::MatrixXd out(m.rows(), static_cast<Eigen::Index>(idx.size()));
  for (std::size_t j = 0; j < idx.size(); ++j) out.col(static_cast<Eigen::Index>(j)) = m.col(static_cast<Eigen::Index>(idx[j]));
  return out;
}

}  // namespace detail

/// Same- and cross-group MI for one partition. The ELBO field is left at 0.
inline MiTable partition_mi(const LatentPairSamples& s, const Partition& p, int ksg_k, const RngStream& rng) {
  s.validate();
  const std::size_t k = p.groups.size();
  std::vector<Eigen::MatrixXd> cur, nxt;
  for (const auto& g : p.groups) {
    cur.push_back(detail::columns(s.current, g));
    nxt.push_back(detail::columns(s.next, g));
  }
  MiTable t;
  double cross = 0;
  for (std::size_t i = 0; i < k; ++i) {
    for (std::size_t j = 0; j < k; ++j) {
      const double mi = ksg_mi(nxt[i], cur[j], ksg_k, rng.split(i * k + j));
      if (i == j) {
        t.same_factor_mi += mi;
      } else {
        cross += mi;
      }
    }
  }
  t.same_factor_mi /= static_cast<double>(k);
  t.cross_factor_mi = k > 1 ? cross / static_cast<double>(k * (k - 1)) : 0.0;
  return t;
}

struct PartitionSearch {
  Partition partition;
  MiTable table;
  std::vector<double> trial_separations;  // same - cross for every sampled trial
};

/// Samples `trials` random near-equal partitions into k groups and keeps the
/// one with the largest same-minus-cross MI (first wins ties).
inline PartitionSearch best_partition(const LatentPairSamples& s, std::size_t k, std::size_t trials, int ksg_k,
                                      RngStream& rng) {
  if (trials == 0) throw PreconditionError("best_partition needs at least one trial");
  PartitionSearch best;
  for (std::size_t trial = 0; trial < trials; ++trial) {
    Partition p = Partition::random(static_cast<std::size_t>(s.dim()), k, rng);
    const MiTable t = partition_mi(s, p, ksg_k, rng.fork());
    best.trial_separations.push_back(t.separation());
    if (trial == 0 || t.separation() > best.table.separation()) {
      best.partition = std::move(p);
      best.table = t;
    }
  }
  return best;
}

/// Runs filtering rollouts over `data` and keeps up to `max_pairs` uniformly
/// chosen (u_t, u_{t+1}) posterior-sample pairs.
template <class S>
LatentPairSamples collect_latent_pairs(const ModelBundle<S>& b, const VideoDataset& data, std::size_t max_pairs,
                                       RngStream& rng, std::size_t chunk = 64) {
  const std::size_t z = b.config.latent_dim();
  std::vector<Vector<S>> cur, nxt;
  std::vector<const VideoSequence*> batch;
  for (std::size_t at = 0; at < data.size(); at += chunk) {
    batch.clear();
    for (std::size_t i = at; i < std::min(data.size(), at + chunk); ++i) batch.push_back(&data.sequences[i]);
    const auto noise = detail::draw_batch_noise<S>(b.config, batch, rng);
    const auto traces = filter_rollout_batch<S>(b, batch, noise);
    for (const auto& tr : traces) {
      for (std::size_t t = 0; t + 1 < tr.size(); ++t) {
        cur.push_back(tr.samples[t].flat());
        nxt.push_back(tr.samples[t + 1].flat());
      }
    }
  }
  std::vector<std::size_t> keep(cur.size());
  std::iota(keep.begin(), keep.end(), std::size_t{0});
  if (max_pairs > 0 && keep.size() > max_pairs) {
    auto perm = rng.permutation(keep.size());
    perm.resize(max_pairs);
    std::sort(perm.begin(), perm.end());
    keep = std::move(perm);
  }
  LatentPairSamples s{Eigen::MatrixXd(static_cast<Eigen::Index>(keep.size()), static_cast<Eigen::Index>(z)),
                      Eigen::MatrixXd(static_cast<Eigen::Index>(keep.size()), static_cast<Eigen::Index>(z))};
  for (std::size_t r = 0; r < keep.size(); ++r) {
    s.current.row(static_cast<Eigen::Index>(r)) = cur[keep[r]].template cast<double>().transpose();
    s.next.row(static_cast<Eigen::Index>(r)) = nxt[keep[r]].template cast<double>().transpose();
  }
  return s;
}

template <class S>
double mean_elbo(const ModelBundle<S>& b, const VideoDataset& data, RngStream& rng, std::size_t chunk = 64) {
  if (data.empty()) throw PreconditionError("mean_elbo needs a non-empty dataset");
  double total = 0;
  std::vector<const VideoSequence*> batch;
  for (std::size_t at = 0; at < data.size(); at += chunk) {
    batch.clear();
    for (std::size_t i = at; i < std::min(data.size(), at + chunk); ++i) batch.push_back(&data.sequences[i]);
    for (const auto& e : elbo_evaluate_batch<S>(b, batch, rng)) total += e.elbo;
  }
  return total / static_cast<double>(data.size());
}

struct MiSettings {
  int ksg_k = 3;
  std::size_t mi_pairs = 2000;
  std::size_t partition_trials = 20;
  std::size_t groups = 0;  // 0: the model's own evaluation_groups()
};

struct MiReport {
  MiTable table;
  Partition partition;
  LatentPairSamples samples;
  std::vector<double> unit_mi;             // I(u_{t+1}[a]; u_t[a]) per latent unit
  std::vector<double> trial_separations;   // empty for factored models
};

/// Factored models are scored on their own factors; entangled models on the
/// best of `partition_trials` random partitions.
template <class S>
MiReport mi_table(const ModelBundle<S>& b, const VideoDataset& data, const MiSettings& settings, RngStream& rng) {
  if (data.empty()) throw PreconditionError("mi_table needs a non-empty dataset");
  MiReport rep;
  rep.samples = collect_latent_pairs(b, data, settings.mi_pairs, rng);
  const std::size_t groups = settings.groups ? settings.groups : b.config.evaluation_groups();
  if (!b.config.entangled && groups == b.config.k_factors) {
    rep.partition = Partition::contiguous(b.config.k_factors, b.config.factor_dim);
    rep.table = partition_mi(rep.samples, rep.partition, settings.ksg_k, rng.fork());
  } else {
    auto search = best_partition(rep.samples, groups, settings.partition_trials, settings.ksg_k, rng);
    rep.partition = std::move(search.partition);
    rep.table = search.table;
    rep.trial_separations = std::move(search.trial_separations);
  }
  for (Eigen::Index a = 0; a < rep.samples.dim(); ++a) {
    rep.unit_mi.push_back(ksg_mi(rep.samples.next.col(a), rep.samples.current.col(a), settings.ksg_k,
                                 rng.split(static_cast<std::uint64_t>(a))));
  }
  rep.table.elbo = mean_elbo(b, data, rng);
  return rep;
}

/// Mean |entry| of within-group blocks and of cross-group blocks of a
/// correlation matrix.
struct BlockContrast {
  double within = 0;
  double cross = 0;
};

inline BlockContrast block_contrast(const Eigen::MatrixXd& corr, const Partition& p) {
  std::vector<std::size_t> owner(static_cast<std::size_t>(corr.rows()));
  for (std::size_t g = 0; g < p.groups.size(); ++g) {
    for (auto u : p.groups[g]) owner.at(u) = g;
  }
  BlockContrast c;
  std::size_t nw = 0, nc = 0;
  for (Eigen::Index i = 0; i < corr.rows(); ++i) {
    for (Eigen::Index j = 0; j < corr.cols(); ++j) {
      if (owner[static_cast<std::size_t>(i)] == owner[static_cast<std::size_t>(j)]) {
        c.within += std::abs(corr(i, j));
        ++nw;
      } else {
        c.cross += std::abs(corr(i, j));
        ++nc;
      }
    }
  }
  if (nw) c.within /= static_cast<double>(nw);
  if (nc) c.cross /= static_cast<double>(nc);
  return c;
}

inline std::string mi_table_csv(const std::vector<std::pair<std::string, MiTable>>& rows) {
  std::ostringstream os;
  os.precision(10);
  os << "model,same_factor_mi,cross_factor_mi,elbo\n";
  for (const auto& [name, t] : rows) os << name << "," << t.same_factor_mi << "," << t.cross_factor_mi << "," << t.elbo << "\n";
  return os.str();
}

inline std::string matrix_csv(const Eigen::MatrixXd& m) {
  std::ostringstream os;
  os.precision(10);
  os << "unit";
  for (Eigen::Index j = 0; j < m.cols(); ++j) os << ",u" << j;
  os << "\n";
  for (Eigen::Index i = 0; i < m.rows(); ++i) {
    os << "u" << i;
    for (Eigen::Index j = 0; j < m.cols(); ++j) os << "," << m(i, j);
    os << "\n";
  }
  return os.str();
}

}  // namespace facseq
