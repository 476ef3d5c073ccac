#include <gtest/gtest.h>

#include <cmath>
#include <numbers>

#include "facseq/elbo.hpp"
#include "facseq/gradcheck.hpp"

using namespace facseq;

namespace {

template <class S>
ModelBundle<S> zero_bundle(const ModelConfig& c) {
  ModelBundle<S> b{c, build_structure(c), {}};
  b.params = ParamVector<S>(b.structure.layout);
  return b;
}

ModelConfig frame_config(std::size_t c, std::size_t h, std::size_t w) {
  auto cfg = tiny_model_config();
  cfg.channels = c;
  cfg.height = h;
  cfg.width = w;
  return cfg;
}

VideoSequence random_sequence(std::size_t n, const ModelConfig& c, RngStream& rng) {
  VideoSequence s(n, c.channels, c.height, c.width);
  for (auto& v : s.pixels) v = static_cast<float>(rng.uniform());
  return s;
}

template <class S>
ModelBundle<S> random_bundle(const ModelConfig& c, std::uint64_t seed) {
  RngStream rng(seed);
  return build_bundle<S>(c, rng);
}

}  // namespace

TEST(Elbo, ZeroBundleZeroFrameValue) {
  // 2x2x1 zero frame, N(0, I) posterior equal to the prior, decoder mean 0.5:
  // each pixel contributes log N(0; 0.5, 0.25) = -ln(pi/2)/2 - 1/2.
  const auto b = zero_bundle<double>(frame_config(1, 2, 2));
  VideoSequence s(1, 1, 2, 2);
  RngStream rng(1);
  const auto e = elbo_evaluate(b, s, rng);
  const double expected = 4 * (-0.5 * std::log(std::numbers::pi / 2) - 0.5);
  EXPECT_NEAR(expected, -2.903165, 1e-6);
  EXPECT_NEAR(e.recon_total, expected, 1e-12);
  ASSERT_EQ(e.kl_terms.size(), 1u);
  EXPECT_EQ(e.kl_terms[0], 0.0);
  EXPECT_EQ(e.elbo, e.recon_total);
}

TEST(Rollout, SingleFrameUsesStandardPrior) {
  const auto b = random_bundle<double>(tiny_model_config(), 2);
  RngStream rng(3);
  const auto s = random_sequence(1, b.config, rng);
  const auto tr = filter_rollout(b, s, rng);
  ASSERT_EQ(tr.size(), 1u);
  EXPECT_EQ(tr.priors[0], DiagonalGaussian<double>::standard(4));
}

TEST(Rollout, ZeroBundleGivesStandardPosteriorsAndHalfMeans) {
  const auto b = zero_bundle<float>(frame_config(2, 3, 3));
  RngStream rng(4);
  const auto s = random_sequence(5, b.config, rng);
  const auto tr = filter_rollout(b, s, rng);
  ASSERT_EQ(tr.size(), 5u);
  for (std::size_t t = 0; t < 5; ++t) {
    EXPECT_EQ(tr.posteriors[t], DiagonalGaussian<float>::standard(4));
    EXPECT_TRUE((tr.recons[t].mean().array() == 0.5f).all());
  }
}

TEST(Rollout, PriorsFollowTheSampledTrajectory) {
  const auto b = random_bundle<double>(tiny_model_config(), 5);
  RngStream rng(6);
  const auto s = random_sequence(4, b.config, rng);
  const auto tr = filter_rollout(b, s, rng);
  for (std::size_t t = 1; t < tr.size(); ++t) {
    const auto p = transition_predict(b, tr.samples[t - 1]);
    EXPECT_LT((p.mean() - tr.priors[t].mean()).cwiseAbs().maxCoeff(), 1e-12);
    EXPECT_LT((p.log_var() - tr.priors[t].log_var()).cwiseAbs().maxCoeff(), 1e-12);
    const auto q = infer_posterior(b, tr.priors[t], Vector<double>(Eigen::Map<const Eigen::VectorXf>(s.frame(t).data(), 4).cast<double>()), false);
    EXPECT_LT((q.mean() - tr.posteriors[t].mean()).cwiseAbs().maxCoeff(), 1e-12);
  }
}

TEST(Rollout, FixedSeedIsDeterministic) {
  const auto b = random_bundle<float>(tiny_model_config(), 7);
  RngStream data(8);
  const auto s = random_sequence(6, b.config, data);
  RngStream r1(9), r2(9);
  const auto a = filter_rollout(b, s, r1);
  const auto c = filter_rollout(b, s, r2);
  for (std::size_t t = 0; t < a.size(); ++t) {
    EXPECT_EQ(a.samples[t].flat(), c.samples[t].flat());
    EXPECT_EQ(a.posteriors[t], c.posteriors[t]);
    EXPECT_EQ(a.recons[t], c.recons[t]);
  }
}

TEST(Rollout, ShapeMismatchIsStructural) {
  const auto b = random_bundle<float>(tiny_model_config(), 1);
  VideoSequence wrong(3, 1, 3, 2);
  RngStream rng(1);
  EXPECT_THROW(filter_rollout(b, wrong, rng), StructuralError);
  EXPECT_THROW(elbo_evaluate(b, wrong, rng), StructuralError);
}

TEST(Elbo, BreakdownInvariantsOnRandomBundles) {
  RngStream rng(10);
  for (std::uint64_t seed = 0; seed < 10; ++seed) {
    const auto b = random_bundle<double>(tiny_model_config(), seed);
    const auto s = random_sequence(1 + rng.below(6), b.config, rng);
    const auto e = elbo_evaluate(b, s, rng);
    EXPECT_EQ(e.kl_terms.size(), s.frames);
    for (double k : e.kl_terms) EXPECT_GE(k, 0.0);
    EXPECT_LE(e.elbo, e.recon_total);
    EXPECT_EQ(e.elbo, e.recon_total - e.kl_total());
  }
}

TEST(Elbo, NonFiniteInputIsNumericalError) {
  const auto b = random_bundle<double>(tiny_model_config(), 1);
  VideoSequence s(2, 1, 2, 2);
  s.pixels[3] = std::numeric_limits<float>::quiet_NaN();
  RngStream rng(1);
  EXPECT_THROW(elbo_evaluate(b, s, rng), NumericalError);
  const VideoSequence* batch[] = {&s};
  EXPECT_THROW(elbo_gradient<double>(b, batch, rng), NumericalError);
}

TEST(Elbo, SeedPartitioningDoesNotShiftTheMean) {
  const auto b = random_bundle<double>(tiny_model_config(), 11);
  RngStream data(12);
  const auto s = random_sequence(4, b.config, data);
  auto stats = [&](std::uint64_t seed) {
    RngStream r(seed);
    const int n = 4000;
    double sum = 0, sum2 = 0;
    for (int i = 0; i < n; ++i) {
      const double e = elbo_evaluate(b, s, r).elbo;
      sum += e;
      sum2 += e * e;
    }
    const double m = sum / n;
    return std::pair{m, (sum2 / n - m * m) / n};
  };
  const auto [m1, v1] = stats(100);
  const auto [m2, v2] = stats(200);
  EXPECT_LE(std::abs(m1 - m2), 3 * std::sqrt(v1 + v2));
}

TEST(ElboGradient, MatchesFiniteDifferencesOnTinyModel) {
  for (std::uint64_t seed = 0; seed < 5; ++seed) {
    const auto r = elbo_gradient_check(tiny_model_config(), 3, 2, RngStream(seed));
    EXPECT_LT(r.max_rel_error, 1e-4) << "seed " << seed << " worst " << r.worst_tensor << " analytic " << r.analytic
                                     << " numeric " << r.numeric;
    EXPECT_LE(r.parameters, 2000u);
  }
}

TEST(ElboGradient, EntangledTinyModelMatchesFiniteDifferences) {
  const auto r = elbo_gradient_check(entangled_twin(tiny_model_config()), 3, 2, RngStream(77));
  EXPECT_LT(r.max_rel_error, 1e-4) << r.worst_tensor;
}

TEST(ElboGradient, DuplicatedBatchEqualsSingleSequence) {
  const auto b = random_bundle<double>(tiny_model_config(), 13);
  RngStream rng(14);
  const auto s = random_sequence(3, b.config, rng);
  const auto eps = draw_noise<double>(4, 3, rng);
  const VideoSequence* one[] = {&s};
  const VideoSequence* two[] = {&s, &s};
  const std::vector<Matrix<double>> n1{eps}, n2{eps, eps};
  const auto g1 = elbo_gradient<double>(b, one, n1);
  const auto g2 = elbo_gradient<double>(b, two, n2);
  EXPECT_LT((g1.values - g2.values).cwiseAbs().maxCoeff(), 1e-12 * (1 + g1.values.cwiseAbs().maxCoeff()));
}

TEST(ElboGradient, FlatBiasesHaveZeroGradient) {
  // All-zero bundle: the decoder's hidden ReLU units sit at the kink with zero
  // input weights, so the first decoder bias cannot move the output. With
  // frames equal to the constant decoder mean 0.5 the final bias is at a
  // stationary point too.
  const auto b = zero_bundle<double>(tiny_model_config());
  VideoSequence s(3, 1, 2, 2);
  std::fill(s.pixels.begin(), s.pixels.end(), 0.5f);
  RngStream rng(15);
  const VideoSequence* batch[] = {&s};
  const auto g = elbo_gradient<double>(b, batch, rng);
  const auto& layout = b.layout();
  EXPECT_EQ(g.tensor(*layout.find("decoder.l0.bias")).cwiseAbs().maxCoeff(), 0.0);
  EXPECT_NEAR(g.tensor(*layout.find("decoder.l1.bias")).cwiseAbs().maxCoeff(), 0.0, 1e-15);
}

TEST(ElboGradient, EmptyBatchRejected) {
  const auto b = random_bundle<double>(tiny_model_config(), 1);
  RngStream rng(1);
  std::vector<const VideoSequence*> none;
  EXPECT_THROW(elbo_gradient<double>(b, none, rng), PreconditionError);
}

TEST(ElboGradient, GradientPathThroughSamplesIsLive) {
  // Scaling the KL terms changes the objective but the reconstruction
  // gradient alone must still reach the posterior network via the samples.
  const auto b = random_bundle<double>(tiny_model_config(), 16);
  RngStream rng(17);
  const auto s = random_sequence(2, b.config, rng);
  const VideoSequence* batch[] = {&s};
  const auto noise = detail::draw_batch_noise<double>(b.config, batch, rng);
  const auto g = elbo_value_and_gradient<double>(b, batch, noise, EstimatorOptions{0.0}).gradient;
  EXPECT_GT(g.tensor(*b.layout().find("combiner.output_mu.l0.weight")).cwiseAbs().maxCoeff(), 0.0);
  EXPECT_GT(g.tensor(*b.layout().find("encoder.l0.weight")).cwiseAbs().maxCoeff(), 0.0);
}
