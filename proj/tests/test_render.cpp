#include <gtest/gtest.h>

#include <cmath>
#include <filesystem>
#include <fstream>
#include <sstream>

#include "facseq/render.hpp"

using namespace facseq;

namespace {

std::string read_file(const std::filesystem::path& p) {
  std::ifstream in(p, std::ios::binary);
  return {std::istreambuf_iterator<char>(in), {}};
}

std::filesystem::path scratch_dir(const std::string& name) {
  auto d = std::filesystem::temp_directory_path() / ("facseq_render_" + name);
  std::filesystem::remove_all(d);
  std::filesystem::create_directories(d);
  return d;
}

ModelConfig small_config(std::size_t k = 2) {
  ModelConfig c;
  c.k_factors = k;
  c.factor_dim = 2;
  c.channels = 2;
  c.height = 6;
  c.width = 6;
  c.encoder_hidden = {16};
  c.encoder_features = 8;
  c.decoder_hidden = {16};
  c.transition_hidden = {12, 12};
  return c;
}

VideoSequence sprite_sequence(std::size_t frames, double speed, std::uint64_t seed) {
  SpriteWorldConfig w;
  w.height = 6;
  w.width = 6;
  w.sprite_size = 2;
  w.seq_len = frames;
  w.speed_min = speed;
  w.speed_max = speed;
  return make_dataset(w, 1, RngStream(seed)).sequences[0];
}

double mean_abs_diff(const Frame& a, const Frame& b) {
  double s = 0;
  for (std::size_t i = 0; i < a.pixels.size(); ++i) s += std::abs(a.pixels[i] - b.pixels[i]);
  return s / static_cast<double>(a.pixels.size());
}

}  // namespace

TEST(Pnm, ZeroGrayFrameBytes) {
  const Frame f(1, 2, 2);
  EXPECT_EQ(encode_pnm(f), std::string("P5\n2 2\n255\n") + std::string(4, '\0'));
}

TEST(Pnm, QuantizationRuleOnSweep) {
  EXPECT_EQ(quantize_pixel(1.0), 255);
  EXPECT_EQ(quantize_pixel(0.5), 128);
  EXPECT_EQ(quantize_pixel(-3.0), 0);
  EXPECT_EQ(quantize_pixel(7.0), 255);
  Frame f(1, 1, 1001);
  for (std::size_t i = 0; i < 1001; ++i) f.pixels[i] = static_cast<float>(-0.1 + 1.2 * static_cast<double>(i) / 1000);
  const auto bytes = encode_pnm(f);
  const std::string header = "P5\n1001 1\n255\n";
  ASSERT_EQ(bytes.size(), header.size() + 1001);
  for (std::size_t i = 0; i < 1001; ++i) {
    const double v = std::clamp(static_cast<double>(f.pixels[i]), 0.0, 1.0);
    const auto expected = static_cast<unsigned char>(std::floor(v * 255 + 0.5));
    EXPECT_EQ(static_cast<unsigned char>(bytes[header.size() + i]), expected) << f.pixels[i];
  }
}

TEST(Pnm, TwoChannelsBecomeRgbWithEmptyBlue) {
  Frame f(2, 1, 2);
  f.at(0, 0, 0) = 1.0f;
  f.at(1, 0, 1) = 0.5f;
  const auto bytes = encode_pnm(f);
  const std::string header = "P6\n2 1\n255\n";
  ASSERT_EQ(bytes.substr(0, header.size()), header);
  const std::string payload = bytes.substr(header.size());
  EXPECT_EQ(payload, std::string("\xff\x00\x00\x00\x80\x00", 6));
}

TEST(Pnm, HeaderRoundTripAndDeterminism) {
  const auto dir = scratch_dir("header");
  Frame f(3, 5, 7, 0.25f);
  write_image(f, dir / "a.ppm");
  write_image(f, dir / "b.ppm");
  const auto a = read_file(dir / "a.ppm");
  EXPECT_EQ(a, read_file(dir / "b.ppm"));
  std::istringstream in(a);
  std::string magic;
  int w = 0, h = 0, maxval = 0;
  in >> magic >> w >> h >> maxval;
  EXPECT_EQ(magic, "P6");
  EXPECT_EQ(w, 7);
  EXPECT_EQ(h, 5);
  EXPECT_EQ(maxval, 255);
  EXPECT_EQ(a.size(), std::string("P6\n7 5\n255\n").size() + 3 * 35);
}

TEST(Pnm, ErrorsAreTyped) {
  EXPECT_THROW(encode_pnm(Frame(4, 1, 1)), StructuralError);
  EXPECT_THROW(write_image(Frame(1, 1, 1), "/nonexistent-dir/x.pgm"), IoError);
  ImageGrid g{1, 2, {Frame(1, 2, 2), Frame(1, 3, 2)}, {}};
  EXPECT_THROW(g.compose(), StructuralError);
}

TEST(ImageGrid, ComposeTilesCells) {
  ImageGrid g{2, 2, {Frame(1, 1, 2, 0.1f), Frame(1, 1, 2, 0.2f), Frame(1, 1, 2, 0.3f), Frame(1, 1, 2, 0.4f)}, {}};
  const auto f = g.compose();
  EXPECT_EQ(f.height, 2u);
  EXPECT_EQ(f.width, 4u);
  EXPECT_EQ(f.at(0, 0, 3), 0.2f);
  EXPECT_EQ(f.at(0, 1, 0), 0.3f);
}

TEST(Heatmap, IdentityAndZeroColours) {
  const auto f = heatmap_frame(Eigen::MatrixXd::Identity(2, 2), 3);
  EXPECT_EQ(f.height, 6u);
  EXPECT_EQ(f.width, 6u);
  // positive extreme: red; zero: white
  EXPECT_EQ(f.at(0, 1, 1), 1.0f);
  EXPECT_EQ(f.at(1, 1, 1), 0.0f);
  EXPECT_EQ(f.at(2, 1, 1), 0.0f);
  for (std::size_t c = 0; c < 3; ++c) EXPECT_EQ(f.at(c, 4, 1), 1.0f);
  const auto z = heatmap_frame(Eigen::MatrixXd::Zero(3, 3), 2);
  for (float v : z.pixels) EXPECT_EQ(v, 1.0f);
  const auto n = heatmap_frame(-Eigen::MatrixXd::Identity(1, 1), 1);
  EXPECT_EQ(n.pixels, (std::vector<float>{0.0f, 0.0f, 1.0f}));
}

TEST(Heatmap, WritesImageAndCsv) {
  const auto dir = scratch_dir("heatmap");
  Eigen::MatrixXd m(2, 2);
  m << 1, 0.5, -0.5, 0;
  heatmap(m, dir / "corr.ppm", 4);
  EXPECT_EQ(read_file(dir / "corr.csv"), matrix_csv(m));
  EXPECT_EQ(read_file(dir / "corr.ppm"), encode_pnm(heatmap_frame(m, 4)));
  EXPECT_THROW(heatmap_frame(Eigen::MatrixXd::Constant(1, 1, std::nan("")), 1), PreconditionError);
}

TEST(IndependentGeneration, LayoutByFactorSelection) {
  RngStream init(1);
  const auto b = build_bundle<float>(small_config(), init);
  const auto seq = sprite_sequence(5, 1, 2);
  RngStream rng(3);
  const auto all = independent_generation(b, seq, FactorSelection::all(), rng);
  EXPECT_EQ(all.rows, 3u);
  EXPECT_EQ(all.cols, 4u);
  EXPECT_EQ(all.row_labels.size(), 3u);
  const auto one = independent_generation(b, seq, FactorSelection::only(1), rng);
  EXPECT_EQ(one.rows, 2u);
  EXPECT_THROW(independent_generation(b, seq, FactorSelection::only(2), rng), PreconditionError);
  EXPECT_THROW(independent_generation(b, sprite_sequence(2, 1, 2), FactorSelection::all(), rng), PreconditionError);
}

TEST(IndependentGeneration, SingleFactorReproducesReconstruction) {
  RngStream init(4);
  const auto b = build_bundle<float>(entangled_twin(small_config()), init);
  ASSERT_EQ(b.config.k_factors, 1u);
  const auto seq = sprite_sequence(6, 2, 5);
  RngStream rng(6);
  const auto g = independent_generation(b, seq, FactorSelection::only(0), rng);
  ASSERT_EQ(g.rows, 2u);
  // Same latents, decoded in different batch columns.
  for (std::size_t t = 0; t < g.cols; ++t) EXPECT_LE(mean_abs_diff(g.cell(0, t), g.cell(1, t)), 1e-6);
}

TEST(IndependentGeneration, NoVariedFactorGivesConstantRow) {
  RngStream init(7);
  const auto b = build_bundle<float>(small_config(), init);
  const auto seq = sprite_sequence(5, 2, 8);
  RngStream rng(9);
  const auto g = independent_generation(b, seq, FactorSelection::none(), rng);
  ASSERT_EQ(g.rows, 2u);
  EXPECT_LE(mean_abs_diff(g.cell(1, 0), g.cell(0, 0)), 1e-6);
  for (std::size_t t = 1; t < g.cols; ++t) EXPECT_LE(mean_abs_diff(g.cell(1, t), g.cell(1, 0)), 1e-6);
}

TEST(IndependentGeneration, DeterministicUnderFixedSeed) {
  RngStream init(10);
  const auto b = build_bundle<float>(small_config(), init);
  const auto seq = sprite_sequence(4, 2, 11);
  RngStream r1(12), r2(12);
  const auto a = independent_generation(b, seq, FactorSelection::all(), r1);
  const auto c = independent_generation(b, seq, FactorSelection::all(), r2);
  EXPECT_EQ(a.cells, c.cells);
}

TEST(IndependentGeneration, FrozenInputGivesStaticRows) {
  // Static sprites, a transition that ignores its input and a near
  // deterministic posterior: every frame has the same posterior, so varying a
  // factor over time must not change the picture.
  RngStream init(13);
  auto b = build_bundle<float>(small_config(), init);
  const auto& layout = b.layout();
  for (std::size_t i = 0; i < 2; ++i) {
    const std::string last = "transition" + std::to_string(i) + ".l2.";
    b.params.tensor(*layout.find(last + "weight")).setZero();
    b.params.tensor(*layout.find(last + "bias")).setZero();
  }
  b.params.tensor(*layout.find("combiner.output_sigma.l0.weight")).setZero();
  b.params.tensor(*layout.find("combiner.output_sigma.l0.bias")).setConstant(-12.0f);
  const auto seq = sprite_sequence(6, 0, 14);
  RngStream rng(15);
  const auto g = independent_generation(b, seq, FactorSelection::all(), rng);
  for (std::size_t r = 1; r < g.rows; ++r) {
    for (std::size_t t = 1; t < g.cols; ++t) EXPECT_LE(mean_abs_diff(g.cell(r, t), g.cell(r, 0)), 0.05);
  }
}

TEST(ChannelSelectivity, RatiosAndDominantChannel) {
  ChannelSelectivity s{Eigen::MatrixXd(2, 2)};
  s.change << 0.4, 0.1, 0.05, 0.3;
  EXPECT_DOUBLE_EQ(s.ratio(0), 4.0);
  EXPECT_DOUBLE_EQ(s.ratio(1), 6.0);
  EXPECT_DOUBLE_EQ(s.min_ratio(), 4.0);
  EXPECT_EQ(s.dominant_channel(0), 0);
  EXPECT_EQ(s.dominant_channel(1), 1);
}

TEST(ChannelSelectivity, MeasuresEachFactorRow) {
  RngStream init(16);
  const auto b = build_bundle<float>(small_config(), init);
  SpriteWorldConfig w;
  w.height = 6;
  w.width = 6;
  w.sprite_size = 2;
  w.seq_len = 4;
  const auto data = make_dataset(w, 3, RngStream(17));
  RngStream rng(18);
  const auto s = channel_selectivity(b, data, rng);
  EXPECT_EQ(s.change.rows(), 2);
  EXPECT_EQ(s.change.cols(), 2);
  EXPECT_TRUE((s.change.array() >= 0).all());
  EXPECT_TRUE(s.change.allFinite());
  EXPECT_THROW(channel_selectivity(b, VideoDataset{}, rng), PreconditionError);
}
