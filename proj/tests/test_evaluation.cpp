#include <gtest/gtest.h>

#include <cmath>
#include <numbers>

#include "facseq/evaluation.hpp"
#include "support/oracles.hpp"

using namespace facseq;

namespace {

Eigen::MatrixXd gaussian_column(Eigen::Index n, RngStream& rng) {
  Eigen::MatrixXd m(n, 1);
  for (Eigen::Index i = 0; i < n; ++i) m(i, 0) = rng.normal();
  return m;
}

std::pair<Eigen::MatrixXd, Eigen::MatrixXd> correlated_pair(double rho, Eigen::Index n, RngStream& rng) {
  Eigen::MatrixXd x = gaussian_column(n, rng);
  Eigen::MatrixXd e = gaussian_column(n, rng);
  Eigen::MatrixXd y = rho * x + std::sqrt(1 - rho * rho) * e;
  return {x, y};
}

double gaussian_mi(double rho) { return -0.5 * std::log(1 - rho * rho); }

ModelConfig small_config() {
  ModelConfig c;
  c.k_factors = 2;
  c.factor_dim = 2;
  c.channels = 1;
  c.height = 6;
  c.width = 6;
  c.encoder_hidden = {16};
  c.encoder_features = 8;
  c.decoder_hidden = {16};
  c.transition_hidden = {12, 12};
  return c;
}

VideoDataset small_data(std::size_t n, double speed_lo, double speed_hi, std::uint64_t seed) {
  SpriteWorldConfig w;
  w.channels = 1;
  w.n_sprites = 1;
  w.height = 6;
  w.width = 6;
  w.sprite_size = 2;
  w.seq_len = 5;
  w.speed_min = speed_lo;
  w.speed_max = speed_hi;
  return make_dataset(w, n, RngStream(seed));
}

}  // namespace

TEST(Digamma, KnownValuesAndBoostAgreement) {
  EXPECT_NEAR(digamma(1.0), -0.5772157, 1e-7);
  EXPECT_NEAR(digamma(2.0), 0.4227843, 1e-7);
  EXPECT_NEAR(digamma(0.5), -1.9635100, 1e-7);
  for (double x : {1e-3, 0.1, 0.5, 1.0, 2.5, 5.999, 6.0, 7.3, 42.0, 1234.5, 1e6}) {
    EXPECT_NEAR(digamma(x), oracles::digamma(x), 1e-10 * std::max(1.0, std::abs(oracles::digamma(x)))) << x;
  }
}

TEST(Digamma, NonPositiveArgumentIsDomainError) {
  EXPECT_THROW(digamma(0.0), DomainError);
  EXPECT_THROW(digamma(-1.5), DomainError);
  EXPECT_THROW(digamma(std::nan("")), DomainError);
}

TEST(Ksg, IndependentUniformsNearZero) {
  RngStream rng(1);
  Eigen::MatrixXd x(1000, 1), y(1000, 1);
  for (Eigen::Index i = 0; i < 1000; ++i) {
    x(i, 0) = rng.uniform();
    y(i, 0) = rng.uniform();
  }
  EXPECT_LE(std::abs(ksg_mi(x, y, 3)), 0.05);
}

TEST(Ksg, BivariateGaussianMatchesClosedForm) {
  RngStream rng(2);
  {
    const auto [x, y] = correlated_pair(0.9, 2000, rng);
    EXPECT_NEAR(ksg_mi(x, y, 3), gaussian_mi(0.9), 0.1);
  }
  {
    const auto [x, y] = correlated_pair(0.5, 2000, rng);
    EXPECT_NEAR(gaussian_mi(0.5), 0.1438, 1e-4);
    EXPECT_NEAR(ksg_mi(x, y, 3), gaussian_mi(0.5), 0.05);
  }
}

TEST(Ksg, MultivariateBlocksMatchClosedForm) {
  // Two independent correlated pairs stacked: MI adds.
  RngStream rng(3);
  const auto [x1, y1] = correlated_pair(0.8, 2000, rng);
  const auto [x2, y2] = correlated_pair(0.6, 2000, rng);
  Eigen::MatrixXd x(2000, 2), y(2000, 2);
  x << x1, x2;
  y << y1, y2;
  EXPECT_NEAR(ksg_mi(x, y, 3), gaussian_mi(0.8) + gaussian_mi(0.6), 0.1);
}

TEST(Ksg, SymmetricExactly) {
  RngStream rng(4);
  const auto [x, y] = correlated_pair(0.7, 500, rng);
  EXPECT_EQ(ksg_mi(x, y, 3), ksg_mi(y, x, 3));
}

TEST(Ksg, InvariantUnderCommonPowerOfTwoScaling) {
  RngStream rng(5);
  const auto [x, y] = correlated_pair(0.7, 500, rng);
  const double base = ksg_mi(x, y, 3);
  for (double s : {0.125, 4.0, 1024.0}) {
    EXPECT_EQ(ksg_mi(s * x, s * y, 3), base) << s;
  }
}

TEST(Ksg, DuplicatePointsAreJitteredNotFatal) {
  Eigen::MatrixXd x(200, 1), y(200, 1);
  for (Eigen::Index i = 0; i < 200; ++i) {
    x(i, 0) = static_cast<double>(i % 5);
    y(i, 0) = static_cast<double>(i % 5);
  }
  const double a = ksg_mi(x, y, 3, RngStream(9));
  EXPECT_TRUE(std::isfinite(a));
  EXPECT_EQ(a, ksg_mi(x, y, 3, RngStream(9)));
  Eigen::MatrixXd c = Eigen::MatrixXd::Zero(50, 2);
  EXPECT_TRUE(std::isfinite(ksg_mi(c, c, 3)));
}

TEST(Ksg, PreconditionsChecked) {
  Eigen::MatrixXd a = Eigen::MatrixXd::Random(10, 1), b = Eigen::MatrixXd::Random(9, 1);
  EXPECT_THROW(ksg_mi(a, b, 3), StructuralError);
  EXPECT_THROW(ksg_mi(a, a, 0), PreconditionError);
  EXPECT_THROW(ksg_mi(a, a, 10), PreconditionError);
}

TEST(CorrMatrix, CopiedUnitsGiveUnitDiagonal) {
  RngStream rng(6);
  Eigen::MatrixXd u(300, 4);
  for (Eigen::Index i = 0; i < u.size(); ++i) u.data()[i] = rng.normal();
  const auto c = corr_matrix({u, u});
  ASSERT_EQ(c.rows(), 4);
  ASSERT_EQ(c.cols(), 4);
  for (Eigen::Index a = 0; a < 4; ++a) EXPECT_NEAR(c(a, a), 1.0, 1e-12);
  EXPECT_EQ(c, c.transpose());
}

TEST(CorrMatrix, IndependentNoiseIsSmallAndBounded) {
  RngStream rng(7);
  Eigen::MatrixXd a(5000, 6), b(5000, 6);
  for (Eigen::Index i = 0; i < a.size(); ++i) {
    a.data()[i] = rng.normal();
    b.data()[i] = rng.uniform();
  }
  const auto c = corr_matrix({a, b});
  EXPECT_LE(c.cwiseAbs().maxCoeff(), 0.05);
}

TEST(CorrMatrix, ConstantUnitsGiveZeroEntries) {
  Eigen::MatrixXd a = Eigen::MatrixXd::Ones(10, 2);
  Eigen::MatrixXd b = Eigen::MatrixXd::Random(10, 2);
  const auto c = corr_matrix({a, b});
  EXPECT_EQ(c.cwiseAbs().maxCoeff(), 0.0);
  EXPECT_THROW(corr_matrix({Eigen::MatrixXd(1, 2), Eigen::MatrixXd(1, 2)}), PreconditionError);
  EXPECT_THROW(corr_matrix({Eigen::MatrixXd(3, 2), Eigen::MatrixXd(3, 3)}), StructuralError);
}

TEST(Partition, RandomPartitionsAreNearEqualAndCover) {
  RngStream rng(8);
  for (int trial = 0; trial < 50; ++trial) {
    const auto p = Partition::random(7, 3, rng);
    std::vector<int> seen(7, 0);
    for (const auto& g : p.groups) {
      EXPECT_TRUE(g.size() == 2 || g.size() == 3);
      EXPECT_TRUE(std::is_sorted(g.begin(), g.end()));
      for (auto u : g) ++seen[u];
    }
    EXPECT_EQ(seen, std::vector<int>(7, 1));
  }
  EXPECT_THROW(Partition::random(2, 3, rng), PreconditionError);
}

namespace {

/// Block {0,1} at t+1 copies block {0,1} at t and {2,3} copies {2,3}, plus
/// small noise. The copy swaps units inside each block so that only the
/// grouping, not a unit-by-unit match, carries the dependence.
LatentPairSamples block_copy(std::size_t n, RngStream& rng) {
  Eigen::MatrixXd cur(static_cast<Eigen::Index>(n), 4);
  for (Eigen::Index i = 0; i < cur.size(); ++i) cur.data()[i] = rng.normal();
  Eigen::MatrixXd nxt(cur.rows(), 4);
  nxt << cur.col(1), cur.col(0), cur.col(3), cur.col(2);
  for (Eigen::Index i = 0; i < nxt.size(); ++i) nxt.data()[i] += 0.05 * rng.normal();
  return {cur, nxt};
}

}  // namespace

TEST(BestPartition, RecoversConstructedGroups) {
  RngStream rng(9);
  const auto s = block_copy(600, rng);
  RngStream search(10);
  const auto r = best_partition(s, 2, 20, 3, search);
  ASSERT_EQ(r.partition.groups.size(), 2u);
  const Partition truth{{{0, 1}, {2, 3}}};
  const Partition swapped{{{2, 3}, {0, 1}}};
  EXPECT_TRUE(r.partition == truth || r.partition == swapped) << r.partition.str();
  EXPECT_GT(r.table.same_factor_mi, r.table.cross_factor_mi + 1.0);
}

TEST(BestPartition, SingleTrialReturnsThatPartitionsTable) {
  RngStream rng(11);
  const auto s = block_copy(300, rng);
  RngStream a(12), b(12);
  const auto r = best_partition(s, 2, 1, 3, a);
  const auto p = Partition::random(4, 2, b);
  EXPECT_EQ(r.partition, p);
  const auto t = partition_mi(s, p, 3, b.fork());
  EXPECT_EQ(r.table.same_factor_mi, t.same_factor_mi);
  EXPECT_EQ(r.table.cross_factor_mi, t.cross_factor_mi);
  EXPECT_THROW(best_partition(s, 2, 0, 3, a), PreconditionError);
}

TEST(BestPartition, DeterministicAndDominatesEveryTrial) {
  RngStream rng(13);
  const auto s = block_copy(300, rng);
  RngStream a(14), b(14);
  const auto r1 = best_partition(s, 2, 6, 3, a);
  const auto r2 = best_partition(s, 2, 6, 3, b);
  EXPECT_EQ(r1.partition, r2.partition);
  EXPECT_EQ(r1.table.separation(), r2.table.separation());
  ASSERT_EQ(r1.trial_separations.size(), 6u);
  for (double sep : r1.trial_separations) EXPECT_GE(r1.table.separation(), sep);
}

TEST(PartitionMi, SingleGroupHasZeroCrossTerm) {
  RngStream rng(15);
  const auto s = block_copy(200, rng);
  const auto t = partition_mi(s, Partition::contiguous(1, 4), 3, RngStream(1));
  EXPECT_EQ(t.cross_factor_mi, 0.0);
  EXPECT_GT(t.same_factor_mi, 0.0);
}

TEST(MiTable, UntrainedBundleGivesFiniteEntries) {
  RngStream init(16);
  const auto b = build_bundle<float>(small_config(), init);
  const auto data = small_data(20, 1, 2, 17);
  MiSettings st;
  st.mi_pairs = 60;
  RngStream rng(18);
  const auto r = mi_table(b, data, st, rng);
  EXPECT_TRUE(std::isfinite(r.table.same_factor_mi));
  EXPECT_TRUE(std::isfinite(r.table.cross_factor_mi));
  EXPECT_TRUE(std::isfinite(r.table.elbo));
  EXPECT_EQ(r.samples.size(), 60);
  EXPECT_EQ(r.partition, Partition::contiguous(2, 2));
  EXPECT_EQ(r.unit_mi.size(), 4u);
  EXPECT_TRUE(r.trial_separations.empty());
}

TEST(MiTable, EntangledBundleSearchesPartitions) {
  RngStream init(19);
  const auto b = build_bundle<float>(entangled_twin(small_config()), init);
  MiSettings st;
  st.mi_pairs = 40;
  st.partition_trials = 3;
  RngStream rng(20);
  const auto r = mi_table(b, small_data(10, 1, 2, 21), st, rng);
  EXPECT_EQ(r.trial_separations.size(), 3u);
  EXPECT_EQ(r.partition.groups.size(), 2u);
  EXPECT_TRUE(std::isfinite(r.table.separation()));
}

TEST(MiTable, FrozenSequencesWithStatelessPriorGiveSmallMi) {
  // Identical static sequences and a transition that ignores its input: each
  // posterior sample is fresh noise around the same mean, so consecutive
  // samples carry no information about each other.
  RngStream init(22);
  auto b = build_bundle<double>(small_config(), init);
  const auto& layout = b.layout();
  for (std::size_t i = 0; i < b.config.k_factors; ++i) {
    const std::string last = "transition" + std::to_string(i) + ".l2.";
    b.params.tensor(*layout.find(last + "weight")).setZero();
    b.params.tensor(*layout.find(last + "bias")).setZero();
  }
  const auto one = small_data(1, 0, 0, 23);
  VideoDataset data;
  for (int i = 0; i < 400; ++i) data.sequences.push_back(one.sequences[0]);
  MiSettings st;
  st.mi_pairs = 1500;
  RngStream rng(24);
  const auto r = mi_table(b, data, st, rng);
  EXPECT_LE(std::abs(r.table.same_factor_mi), 0.05);
  EXPECT_LE(std::abs(r.table.cross_factor_mi), 0.05);
}

TEST(BlockContrast, SeparatesWithinAndCrossBlocks) {
  Eigen::MatrixXd c(4, 4);
  c << 1, 0.5, 0.1, -0.1,  //
      0.5, 1, 0.1, 0.1,    //
      -0.1, 0.1, 1, -0.5,  //
      0.1, 0.1, 0.5, 1;
  const auto bc = block_contrast(c, Partition::contiguous(2, 2));
  EXPECT_NEAR(bc.within, 0.75, 1e-15);
  EXPECT_NEAR(bc.cross, 0.1, 1e-15);
}

TEST(Csv, HeadersAndRows) {
  MiTable t{1.5, 0.25, -10};
  const auto csv = mi_table_csv({{"factored", t}});
  EXPECT_EQ(csv, "model,same_factor_mi,cross_factor_mi,elbo\nfactored,1.5,0.25,-10\n");
  Eigen::MatrixXd m(2, 2);
  m << 1, 0.5, -0.25, 0;
  EXPECT_EQ(matrix_csv(m), "unit,u0,u1\nu0,1,0.5\nu1,-0.25,0\n");
}
