#pragma once

// Bouncing-sprite videos, the DVIP sequence container and the IDX digit reader.

#include <array>
#include <bit>
#include <cmath>
#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <limits>
#include <numbers>
#include <tuple>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "facseq/errors.hpp"
#include "facseq/params.hpp"
#include "facseq/rng.hpp"

namespace facseq {

/// n frames of channels x height x width pixels in [0, 1], stored in time,
/// channel, row, column order.
struct VideoSequence {
  std::size_t frames = 0;
  std::size_t channels = 0;
  std::size_t height = 0;
  std::size_t width = 0;
  std::vector<float> pixels;

  VideoSequence() = default;
  VideoSequence(std::size_t n, std::size_t c, std::size_t h, std::size_t w)
      : frames(n), channels(c), height(h), width(w), pixels(n * c * h * w, 0.0f) {}

  std::size_t frame_size() const noexcept { return channels * height * width; }

  std::span<float> frame(std::size_t t) { return {pixels.data() + t * frame_size(), frame_size()}; }
  std::span<const float> frame(std::size_t t) const { return {pixels.data() + t * frame_size(), frame_size()}; }

  float& at(std::size_t t, std::size_t c, std::size_t y, std::size_t x) {
    return pixels[((t * channels + c) * height + y) * width + x];
  }
  float at(std::size_t t, std::size_t c, std::size_t y, std::size_t x) const {
    return pixels[((t * channels + c) * height + y) * width + x];
  }

  void validate() const {
    if (frames == 0) throw StructuralError("a sequence needs at least one frame");
    if (pixels.size() != frames * frame_size()) throw StructuralError("pixel buffer size mismatch");
    for (float v : pixels) {
      if (!(v >= 0.0f && v <= 1.0f)) throw StructuralError("pixel outside [0, 1]");
    }
  }

  friend bool operator==(const VideoSequence&, const VideoSequence&) = default;
};

struct VideoDataset {
  std::size_t seq_len = 0;
  std::size_t channels = 0;
  std::size_t height = 0;
  std::size_t width = 0;
  std::vector<VideoSequence> sequences;

  std::size_t size() const noexcept { return sequences.size(); }
  bool empty() const noexcept { return sequences.empty(); }

  friend bool operator==(const VideoDataset&, const VideoDataset&) = default;
};

/// A grayscale bitmap in [0, 1] used as a sprite.
struct Glyph {
  std::size_t height = 0;
  std::size_t width = 0;
  std::vector<float> pixels;  // row-major

  float at(std::size_t y, std::size_t x) const { return pixels[y * width + x]; }
};

/// Filled square and a plus-shaped cross, both size x size.
inline std::vector<Glyph> default_glyphs(std::size_t size) {
  Glyph square{size, size, std::vector<float>(size * size, 1.0f)};
  Glyph cross{size, size, std::vector<float>(size * size, 0.0f)};
  const std::size_t bar = std::max<std::size_t>(1, size / 3);
  const std::size_t lo = (size - bar) / 2;
  for (std::size_t y = 0; y < size; ++y) {
    for (std::size_t x = 0; x < size; ++x) {
      if ((y >= lo && y < lo + bar) || (x >= lo && x < lo + bar)) cross.pixels[y * size + x] = 1.0f;
    }
  }
  return {square, cross};
}

struct SpriteWorldConfig {
  std::size_t n_sprites = 2;
  std::size_t sprite_size = 10;
  std::size_t channels = 2;
  std::size_t height = 32;
  std::size_t width = 32;
  std::size_t seq_len = 8;
  double speed_min = 1.0;  // pixels per frame
  double speed_max = 3.0;
  bool one_sprite_per_channel = true;

  void validate() const {
    if (seq_len == 0) throw ConfigError("seq_len must be positive");
    if (channels == 0 || height == 0 || width == 0) throw ConfigError("frame dimensions must be positive");
    if (sprite_size == 0 || sprite_size > height || sprite_size > width) {
      throw ConfigError("sprite does not fit inside the frame");
    }
    if (one_sprite_per_channel && n_sprites > channels) {
      throw ConfigError("one sprite per channel needs n_sprites <= channels");
    }
    if (speed_min < 0 || speed_max < speed_min) throw ConfigError("invalid speed range");
  }
};

struct Vec2 {
  double x = 0;
  double y = 0;
  friend bool operator==(const Vec2&, const Vec2&) = default;
};

/// Axis-aligned closed box [lo, hi] per axis.
struct Box {
  Vec2 lo;
  Vec2 hi;
};

namespace detail {

inline void bounce_axis(double& p, double& v, double lo, double hi) {
  p += v;
  if (hi <= lo) {
    p = lo;
    return;
  }
  // Fold until inside; each wall crossing mirrors the position and flips v.
  while (p < lo || p > hi) {
    if (p > hi) {
      p = 2 * hi - p;
    } else {
      p = 2 * lo - p;
    }
    v = -v;
  }
}

}  // namespace detail

/// Advances one frame with mirror reflection at the walls.
inline std::pair<Vec2, Vec2> step_sprite(Vec2 pos, Vec2 vel, const Box& bounds) {
  detail::bounce_axis(pos.x, vel.x, bounds.lo.x, bounds.hi.x);
  detail::bounce_axis(pos.y, vel.y, bounds.lo.y, bounds.hi.y);
  return {pos, vel};
}

namespace detail {

/// Adds the glyph with its top-left corner at the rounded position, saturating
/// at 1.
inline void stamp(VideoSequence& seq, std::size_t t, std::size_t channel, const Glyph& g, Vec2 pos) {
  const auto x0 = static_cast<long>(std::floor(pos.x + 0.5));
  const auto y0 = static_cast<long>(std::floor(pos.y + 0.5));
  for (std::size_t gy = 0; gy < g.height; ++gy) {
    for (std::size_t gx = 0; gx < g.width; ++gx) {
      const long y = y0 + static_cast<long>(gy);
      const long x = x0 + static_cast<long>(gx);
      if (y < 0 || x < 0 || y >= static_cast<long>(seq.height) || x >= static_cast<long>(seq.width)) continue;
      float& px = seq.at(t, channel, static_cast<std::size_t>(y), static_cast<std::size_t>(x));
      px = std::min(1.0f, px + g.at(gy, gx));
    }
  }
}

}  // namespace detail

/// Generates `n_sequences` videos. Sequence q draws from rng.split(q) and
/// sprite s within it from a further split(s), so sprites never share
/// randomness and each can be removed without disturbing the others.
/// `glyphs` defaults to the procedural square/cross pair; glyphs larger than
/// sprite_size are not allowed.
inline VideoDataset make_dataset(const SpriteWorldConfig& cfg, std::size_t n_sequences, const RngStream& rng,
                                 const std::vector<Glyph>* glyphs = nullptr) {
  cfg.validate();
  const std::vector<Glyph> fallback = default_glyphs(cfg.sprite_size);
  const std::vector<Glyph>& pool = glyphs ? *glyphs : fallback;
  if (pool.empty()) throw ConfigError("empty glyph set");
  for (const auto& g : pool) {
    if (g.height > cfg.sprite_size || g.width > cfg.sprite_size) throw ConfigError("glyph larger than sprite_size");
  }
  VideoDataset ds{cfg.seq_len, cfg.channels, cfg.height, cfg.width, {}};
  ds.sequences.reserve(n_sequences);
  const Box bounds{{0.0, 0.0},
                   {static_cast<double>(cfg.width - cfg.sprite_size), static_cast<double>(cfg.height - cfg.sprite_size)}};
  for (std::size_t q = 0; q < n_sequences; ++q) {
    VideoSequence seq(cfg.seq_len, cfg.channels, cfg.height, cfg.width);
    const RngStream seq_rng = rng.split(q);
    for (std::size_t s = 0; s < cfg.n_sprites; ++s) {
      RngStream r = seq_rng.split(s);
      const Glyph& glyph = glyphs ? pool[r.below(pool.size())] : pool[s % pool.size()];
      Vec2 pos{r.uniform(bounds.lo.x, bounds.hi.x), r.uniform(bounds.lo.y, bounds.hi.y)};
      const double speed = r.uniform(cfg.speed_min, cfg.speed_max);
      const double angle = r.uniform(0.0, 2.0 * std::numbers::pi);
      Vec2 vel{speed * std::cos(angle), speed * std::sin(angle)};
      const std::size_t channel = cfg.one_sprite_per_channel ? s : static_cast<std::size_t>(r.below(cfg.channels));
      for (std::size_t t = 0; t < cfg.seq_len; ++t) {
        if (t > 0) std::tie(pos, vel) = step_sprite(pos, vel, bounds);
        detail::stamp(seq, t, channel, glyph, pos);
      }
    }
    ds.sequences.push_back(std::move(seq));
  }
  return ds;
}

// DVIP container: "DVIP", u32 version=1, n_sequences, seq_len, channels,
// height, width, then float32 pixels; all little-endian.

inline constexpr std::array<char, 4> kDvipMagic{'D', 'V', 'I', 'P'};
inline constexpr std::uint32_t kDvipVersion = 1;

inline void save_container(const VideoDataset& ds, const std::filesystem::path& path) {
  const auto max32 = std::numeric_limits<std::uint32_t>::max();
  if (ds.size() > max32 || ds.seq_len > max32 || ds.channels > max32 || ds.height > max32 || ds.width > max32) {
    throw FormatError("dataset dimensions exceed the container's 32-bit fields");
  }
  std::ofstream out(path, std::ios::binary);
  if (!out) throw IoError("cannot write " + path.string());
  out.write(kDvipMagic.data(), 4);
  for (std::size_t v : {std::size_t{kDvipVersion}, ds.size(), ds.seq_len, ds.channels, ds.height, ds.width}) {
    detail::write_le<std::uint32_t>(out, static_cast<std::uint32_t>(v));
  }
  const std::size_t per = ds.seq_len * ds.channels * ds.height * ds.width;
  for (const auto& seq : ds.sequences) {
    if (seq.frames != ds.seq_len || seq.channels != ds.channels || seq.height != ds.height ||
        seq.width != ds.width || seq.pixels.size() != per) {
      throw StructuralError("sequence shape differs from dataset shape");
    }
    for (float v : seq.pixels) detail::write_le<float>(out, v);
  }
  if (!out) throw IoError("write failed for " + path.string());
}

inline VideoDataset load_container(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot read " + path.string());
  std::array<char, 4> magic{};
  if (!in.read(magic.data(), 4) || magic != kDvipMagic) throw FormatError(path.string() + ": bad magic");
  std::array<std::uint32_t, 6> hdr{};
  for (auto& h : hdr) {
    if (!detail::read_le(in, h)) throw FormatError(path.string() + ": truncated header");
  }
  if (hdr[0] != kDvipVersion) throw FormatError(path.string() + ": unsupported version " + std::to_string(hdr[0]));
  VideoDataset ds{hdr[2], hdr[3], hdr[4], hdr[5], {}};
  const std::uint64_t per = std::uint64_t{ds.seq_len} * ds.channels * ds.height * ds.width;
  const std::uint64_t total = per * hdr[1];
  // Compare the declared payload with the actual file size before allocating.
  const auto here = in.tellg();
  in.seekg(0, std::ios::end);
  const auto remaining = static_cast<std::uint64_t>(in.tellg() - here);
  in.seekg(here);
  if (per != 0 && total / per != hdr[1]) throw FormatError(path.string() + ": dimension overflow");
  if (total > std::numeric_limits<std::uint64_t>::max() / 4 || total * 4 != remaining) {
    throw FormatError(path.string() + ": payload size does not match header (truncated or oversized)");
  }
  ds.sequences.reserve(hdr[1]);
  for (std::uint32_t q = 0; q < hdr[1]; ++q) {
    VideoSequence seq(ds.seq_len, ds.channels, ds.height, ds.width);
    for (auto& v : seq.pixels) {
      if (!detail::read_le(in, v)) throw FormatError(path.string() + ": truncated payload");
    }
    ds.sequences.push_back(std::move(seq));
  }
  return ds;
}

// IDX digit files (big-endian).

namespace detail {

inline std::uint32_t read_be32(std::istream& in, const std::string& what) {
  unsigned char b[4];
  if (!in.read(reinterpret_cast<char*>(b), 4)) throw FormatError(what + ": truncated header");
  return (std::uint32_t{b[0]} << 24) | (std::uint32_t{b[1]} << 16) | (std::uint32_t{b[2]} << 8) | b[3];
}

}  // namespace detail

struct DigitSet {
  std::vector<Glyph> glyphs;
  std::vector<std::uint8_t> labels;
};

/// Reads an IDX image file (magic 0x00000803) and label file (0x00000801).
/// Pixels are scaled by 1/255.
inline DigitSet load_idx_digits(const std::filesystem::path& images_path, const std::filesystem::path& labels_path) {
  std::ifstream img(images_path, std::ios::binary);
  if (!img) throw IoError("cannot read " + images_path.string());
  std::ifstream lab(labels_path, std::ios::binary);
  if (!lab) throw IoError("cannot read " + labels_path.string());
  const std::string in = images_path.string();
  const std::string ln = labels_path.string();
  if (detail::read_be32(img, in) != 0x00000803u) throw FormatError(in + ": not an IDX image file");
  if (detail::read_be32(lab, ln) != 0x00000801u) throw FormatError(ln + ": not an IDX label file");
  const std::uint32_t count = detail::read_be32(img, in);
  const std::uint32_t rows = detail::read_be32(img, in);
  const std::uint32_t cols = detail::read_be32(img, in);
  const std::uint32_t label_count = detail::read_be32(lab, ln);
  if (count != label_count) {
    throw FormatError("image count " + std::to_string(count) + " differs from label count " +
                      std::to_string(label_count));
  }
  if (rows == 0 || cols == 0 || rows > 4096 || cols > 4096) throw FormatError(in + ": implausible image size");
  DigitSet out;
  out.glyphs.reserve(count);
  out.labels.resize(count);
  std::vector<unsigned char> buf(std::size_t{rows} * cols);
  for (std::uint32_t i = 0; i < count; ++i) {
    if (!img.read(reinterpret_cast<char*>(buf.data()), static_cast<std::streamsize>(buf.size()))) {
      throw FormatError(in + ": truncated image data");
    }
    Glyph g{rows, cols, std::vector<float>(buf.size())};
    for (std::size_t k = 0; k < buf.size(); ++k) g.pixels[k] = static_cast<float>(buf[k]) / 255.0f;
    out.glyphs.push_back(std::move(g));
  }
  if (!lab.read(reinterpret_cast<char*>(out.labels.data()), static_cast<std::streamsize>(count))) {
    throw FormatError(ln + ": truncated label data");
  }
  return out;
}

}  // namespace facseq
