#include <gtest/gtest.h>

#include <cmath>
#include <cstdint>
#include <filesystem>
#include <fstream>

#include "facseq/data.hpp"
#include "support/oracles.hpp"

using namespace facseq;

namespace {

std::filesystem::path temp_path(const std::string& name) {
  const auto dir = std::filesystem::temp_directory_path() / "facseq_data";
  std::filesystem::create_directories(dir);
  return dir / name;
}

std::string read_file(const std::filesystem::path& p) {
  std::ifstream in(p, std::ios::binary);
  return {std::istreambuf_iterator<char>(in), {}};
}

void write_file(const std::filesystem::path& p, const std::string& bytes) {
  std::ofstream(p, std::ios::binary | std::ios::trunc).write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
}

void put_be32(std::string& s, std::uint32_t v) {
  for (int shift = 24; shift >= 0; shift -= 8) s.push_back(static_cast<char>((v >> shift) & 0xFF));
}

}  // namespace

TEST(Step, MovesFreelyInsideTheBox) {
  const Box box{{0, 0}, {10, 10}};
  auto [p, v] = step_sprite({5, 5}, {1, 0}, box);
  EXPECT_EQ(p, (Vec2{6, 5}));
  EXPECT_EQ(v, (Vec2{1, 0}));
}

TEST(Step, MirrorsAtTheWall) {
  const Box box{{0, 0}, {10, 10}};
  auto [p, v] = step_sprite({9.5, 5}, {1, 0}, box);
  EXPECT_DOUBLE_EQ(p.x, 9.5);
  EXPECT_EQ(p.y, 5);
  EXPECT_EQ(v, (Vec2{-1, 0}));
  auto [q, w] = step_sprite({0.25, 0.5}, {-1, -2}, box);
  EXPECT_DOUBLE_EQ(q.x, 0.75);
  EXPECT_DOUBLE_EQ(q.y, 1.5);
  EXPECT_EQ(w, (Vec2{1, 2}));
}

TEST(Step, LongTrajectoriesStayInBoundsAndMatchTheUnfoldedPath) {
  RngStream rng(31);
  for (int trial = 0; trial < 50; ++trial) {
    const Box box{{0, 0}, {rng.uniform(2, 30), rng.uniform(2, 30)}};
    const Vec2 p0{rng.uniform(0, box.hi.x), rng.uniform(0, box.hi.y)};
    const Vec2 v0{rng.uniform(-7, 7), rng.uniform(-7, 7)};
    Vec2 p = p0, v = v0;
    for (int t = 1; t <= 1000; ++t) {
      std::tie(p, v) = step_sprite(p, v, box);
      ASSERT_GE(p.x, box.lo.x);
      ASSERT_LE(p.x, box.hi.x);
      ASSERT_GE(p.y, box.lo.y);
      ASSERT_LE(p.y, box.hi.y);
      if (t % 97 == 0) {
        EXPECT_NEAR(p.x, oracles::folded_position(p0.x, v0.x, box.lo.x, box.hi.x, t), 1e-7);
        EXPECT_NEAR(p.y, oracles::folded_position(p0.y, v0.y, box.lo.y, box.hi.y, t), 1e-7);
      }
    }
  }
}

TEST(Step, VelocityLargerThanTheBoxFoldsRepeatedly) {
  const Box box{{0, 0}, {3, 3}};
  auto [p, v] = step_sprite({1, 1}, {8.5, 0}, box);
  EXPECT_NEAR(p.x, oracles::folded_position(1, 8.5, 0, 3, 1), 1e-12);
  EXPECT_EQ(v.x, oracles::folded_velocity(1, 8.5, 0, 3, 1));
}

TEST(Dataset, SameSeedIsByteIdenticalAndPixelsInRange) {
  SpriteWorldConfig cfg;
  const auto a = make_dataset(cfg, 20, RngStream(5));
  const auto b = make_dataset(cfg, 20, RngStream(5));
  const auto c = make_dataset(cfg, 20, RngStream(6));
  EXPECT_EQ(a, b);
  EXPECT_NE(a, c);
  for (const auto& s : a.sequences) {
    EXPECT_NO_THROW(s.validate());
    EXPECT_EQ(s.frames, cfg.seq_len);
  }
}

TEST(Dataset, EachSpriteStaysWhollyInsideTheFrame) {
  SpriteWorldConfig cfg;
  cfg.seq_len = 40;
  cfg.speed_max = 6;
  const auto ds = make_dataset(cfg, 30, RngStream(7));
  const double glyph_mass[2] = {100, 51};  // filled 10x10 square, cross of bar 3
  for (const auto& s : ds.sequences) {
    for (std::size_t t = 0; t < s.frames; ++t) {
      for (std::size_t c = 0; c < 2; ++c) {
        double mass = 0;
        for (std::size_t y = 0; y < s.height; ++y) {
          for (std::size_t x = 0; x < s.width; ++x) mass += s.at(t, c, y, x);
        }
        ASSERT_EQ(mass, glyph_mass[c]) << "no clipping at the border";
      }
    }
  }
}

TEST(Dataset, RemovingASpriteOnlyChangesItsChannel) {
  SpriteWorldConfig two;
  SpriteWorldConfig one = two;
  one.n_sprites = 1;
  const auto a = make_dataset(two, 10, RngStream(8));
  const auto b = make_dataset(one, 10, RngStream(8));
  for (std::size_t q = 0; q < 10; ++q) {
    const auto& sa = a.sequences[q];
    const auto& sb = b.sequences[q];
    bool channel1_differs = false;
    for (std::size_t t = 0; t < sa.frames; ++t) {
      for (std::size_t y = 0; y < sa.height; ++y) {
        for (std::size_t x = 0; x < sa.width; ++x) {
          ASSERT_EQ(sa.at(t, 0, y, x), sb.at(t, 0, y, x));
          EXPECT_EQ(sb.at(t, 1, y, x), 0.0f);
          channel1_differs = channel1_differs || sa.at(t, 1, y, x) != 0.0f;
        }
      }
    }
    EXPECT_TRUE(channel1_differs);
  }
}

TEST(Dataset, ZeroVelocityFramesAreIdentical) {
  SpriteWorldConfig cfg;
  cfg.speed_min = cfg.speed_max = 0;
  for (const auto& s : make_dataset(cfg, 5, RngStream(9)).sequences) {
    for (std::size_t t = 1; t < s.frames; ++t) {
      EXPECT_TRUE(std::equal(s.frame(t).begin(), s.frame(t).end(), s.frame(0).begin()));
    }
  }
}

TEST(Dataset, InvalidConfigsRejected) {
  SpriteWorldConfig c;
  c.sprite_size = 40;
  EXPECT_THROW(make_dataset(c, 1, RngStream(1)), ConfigError);
  c = SpriteWorldConfig{};
  c.n_sprites = 3;
  EXPECT_THROW(make_dataset(c, 1, RngStream(1)), ConfigError);
  c = SpriteWorldConfig{};
  c.speed_max = 0.5;
  EXPECT_THROW(make_dataset(c, 1, RngStream(1)), ConfigError);
  std::vector<Glyph> big{Glyph{12, 12, std::vector<float>(144, 1.0f)}};
  EXPECT_THROW(make_dataset(SpriteWorldConfig{}, 1, RngStream(1), &big), ConfigError);
}

TEST(Container, RoundTripIsBitExact) {
  SpriteWorldConfig cfg;
  const auto ds = make_dataset(cfg, 7, RngStream(10));
  const auto p = temp_path("roundtrip.dvip");
  save_container(ds, p);
  const auto back = load_container(p);
  EXPECT_EQ(back, ds);
  const auto p2 = temp_path("roundtrip2.dvip");
  save_container(back, p2);
  EXPECT_EQ(read_file(p), read_file(p2));
  EXPECT_EQ(read_file(p).size(), 4 + 24 + 7 * 8 * 2 * 32 * 32 * 4u);
}

TEST(Container, HeaderLayout) {
  VideoDataset ds{3, 1, 2, 2, {}};
  VideoSequence s(3, 1, 2, 2);
  s.pixels[0] = 1.0f;
  ds.sequences.push_back(s);
  const auto p = temp_path("layout.dvip");
  save_container(ds, p);
  const auto bytes = read_file(p);
  ASSERT_EQ(bytes.size(), 28u + 12 * 4);
  EXPECT_EQ(bytes.substr(0, 4), "DVIP");
  const unsigned char expected_header[24] = {1, 0, 0, 0, 1, 0, 0, 0, 3, 0, 0, 0, 1, 0, 0, 0, 2, 0, 0, 0, 2, 0, 0, 0};
  EXPECT_EQ(bytes.substr(4, 24), std::string(reinterpret_cast<const char*>(expected_header), 24));
  const unsigned char one_le[4] = {0x00, 0x00, 0x80, 0x3F};
  EXPECT_EQ(bytes.substr(28, 4), std::string(reinterpret_cast<const char*>(one_le), 4));
}

TEST(Container, EmptyCollectionIsValid) {
  const VideoDataset empty{8, 2, 32, 32, {}};
  const auto p = temp_path("empty.dvip");
  save_container(empty, p);
  const auto back = load_container(p);
  EXPECT_TRUE(back.empty());
  EXPECT_EQ(back, empty);
}

TEST(Container, CorruptionIsFormatError) {
  SpriteWorldConfig cfg;
  cfg.seq_len = 2;
  const auto p = temp_path("corrupt.dvip");
  save_container(make_dataset(cfg, 2, RngStream(11)), p);
  const auto good = read_file(p);
  const auto q = temp_path("bad.dvip");

  auto bad = good;
  bad[0] = 'X';
  write_file(q, bad);
  EXPECT_THROW(load_container(q), FormatError);

  write_file(q, good.substr(0, good.size() - 3));
  EXPECT_THROW(load_container(q), FormatError);

  write_file(q, good.substr(0, 10));
  EXPECT_THROW(load_container(q), FormatError);

  write_file(q, good + "extra");
  EXPECT_THROW(load_container(q), FormatError);

  bad = good;
  bad[4] = 2;  // version
  write_file(q, bad);
  EXPECT_THROW(load_container(q), FormatError);

  bad = good;
  for (int i = 0; i < 4; ++i) bad[8 + i] = static_cast<char>(0xFF);  // absurd sequence count
  write_file(q, bad);
  EXPECT_THROW(load_container(q), FormatError);

  EXPECT_THROW(load_container(temp_path("does_not_exist.dvip")), IoError);
}

namespace {

void write_idx(const std::filesystem::path& images, const std::filesystem::path& labels, std::uint32_t count,
               std::uint32_t label_count, std::uint32_t image_magic = 0x803) {
  std::string img, lab;
  put_be32(img, image_magic);
  put_be32(img, count);
  put_be32(img, 3);
  put_be32(img, 2);
  for (std::uint32_t i = 0; i < count * 6; ++i) img.push_back(static_cast<char>(i % 2 ? 255 : 51 * (i % 5)));
  put_be32(lab, 0x801);
  put_be32(lab, label_count);
  for (std::uint32_t i = 0; i < label_count; ++i) lab.push_back(static_cast<char>(i % 10));
  write_file(images, img);
  write_file(labels, lab);
}

}  // namespace

TEST(Idx, ReadsHeaderPixelsAndLabels) {
  const auto im = temp_path("img.idx"), lb = temp_path("lab.idx");
  write_idx(im, lb, 4, 4);
  const auto d = load_idx_digits(im, lb);
  ASSERT_EQ(d.glyphs.size(), 4u);
  EXPECT_EQ(d.glyphs[0].height, 3u);
  EXPECT_EQ(d.glyphs[0].width, 2u);
  EXPECT_EQ(d.glyphs[0].at(0, 1), 1.0f);  // byte 255
  EXPECT_FLOAT_EQ(d.glyphs[0].at(1, 0), 102.0f / 255.0f);
  EXPECT_EQ(d.labels, (std::vector<std::uint8_t>{0, 1, 2, 3}));
}

TEST(Idx, ErrorsAreFormatErrors) {
  const auto im = temp_path("img_bad.idx"), lb = temp_path("lab_bad.idx");
  write_idx(im, lb, 4, 5);
  EXPECT_THROW(load_idx_digits(im, lb), FormatError);
  write_idx(im, lb, 4, 4, 0x801);
  EXPECT_THROW(load_idx_digits(im, lb), FormatError);
  write_idx(im, lb, 4, 4);
  write_file(im, read_file(im).substr(0, 30));
  EXPECT_THROW(load_idx_digits(im, lb), FormatError);
  EXPECT_THROW(load_idx_digits(temp_path("missing.idx"), lb), IoError);
}

TEST(Idx, GlyphsCanDriveTheGenerator) {
  const auto im = temp_path("img_gen.idx"), lb = temp_path("lab_gen.idx");
  write_idx(im, lb, 4, 4);
  const auto d = load_idx_digits(im, lb);
  SpriteWorldConfig cfg;
  cfg.sprite_size = 3;
  const auto ds = make_dataset(cfg, 3, RngStream(12), &d.glyphs);
  for (const auto& s : ds.sequences) EXPECT_NO_THROW(s.validate());
}
