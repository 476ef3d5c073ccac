#pragma once

// Image output: reconstructions, independent generations and correlation heatmaps
// as binary portable graymaps/pixmaps.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <limits>
#include <string>
#include <vector>

#include <Eigen/Dense>

#include "facseq/data.hpp"
#include "facseq/elbo.hpp"
#include "facseq/errors.hpp"
#include "facseq/evaluation.hpp"
#include "facseq/model.hpp"

namespace facseq {

/// One channels x height x width frame, channel-major like VideoSequence.
struct Frame {
  std::size_t channels = 0, height = 0, width = 0;
  std::vector<float> pixels;

  Frame() = default;
  Frame(std::size_t c, std::size_t h, std::size_t w, float fill = 0.0f)
      : channels(c), height(h), width(w), pixels(c * h * w, fill) {}

  float& at(std::size_t c, std::size_t y, std::size_t x) { return pixels[(c * height + y) * width + x]; }
  float at(std::size_t c, std::size_t y, std::size_t x) const { return pixels[(c * height + y) * width + x]; }

  friend bool operator==(const Frame&, const Frame&) = default;
};

/// rows x cols cells of equally shaped frames.
struct ImageGrid {
  std::size_t rows = 0, cols = 0;
  std::vector<Frame> cells;  // row-major
  std::vector<std::string> row_labels;

  const Frame& cell(std::size_t r, std::size_t c) const { return cells.at(r * cols + c); }

  void validate() const {
    if (cells.size() != rows * cols) throw StructuralError("image grid cell count does not match its shape");
    for (const auto& f : cells) {
      if (f.channels != cells.front().channels || f.height != cells.front().height || f.width != cells.front().width) {
        throw StructuralError("image grid cells differ in shape");
      }
    }
  }

  /// Tiles all cells into one frame.
  Frame compose() const {
    validate();
    if (cells.empty()) return {};
    const auto& f0 = cells.front();
    Frame out(f0.channels, rows * f0.height, cols * f0.width);
    for (std::size_t r = 0; r < rows; ++r) {
      for (std::size_t c = 0; c < cols; ++c) {
        const auto& f = cell(r, c);
        for (std::size_t ch = 0; ch < f.channels; ++ch) {
          for (std::size_t y = 0; y < f.height; ++y) {
            for (std::size_t x = 0; x < f.width; ++x) out.at(ch, r * f.height + y, c * f.width + x) = f.at(ch, y, x);
          }
        }
      }
    }
    return out;
  }
};

inline std::uint8_t quantize_pixel(double v) {
  const double c = std::clamp(std::isnan(v) ? 0.0 : v, 0.0, 1.0);
  return static_cast<std::uint8_t>(std::floor(c * 255.0 + 0.5));
}

/// P5 for one channel, P6 for two (blue = 0) or three channels.
inline std::string encode_pnm(const Frame& f) {
  if (f.channels < 1 || f.channels > 3) throw StructuralError("images need 1, 2 or 3 channels");
  if (f.pixels.size() != f.channels * f.height * f.width) throw StructuralError("frame pixel count mismatch");
  std::string out = (f.channels == 1 ? "P5\n" : "P6\n") + std::to_string(f.width) + " " + std::to_string(f.height) +
                    "\n255\n";
  const std::size_t planes = f.channels == 1 ? 1 : 3;
  const std::size_t header = out.size();
  out.resize(header + planes * f.height * f.width, '\0');
  std::size_t at = header;
  for (std::size_t y = 0; y < f.height; ++y) {
    for (std::size_t x = 0; x < f.width; ++x) {
      for (std::size_t c = 0; c < planes; ++c) {
        out[at++] = static_cast<char>(c < f.channels ? quantize_pixel(f.at(c, y, x)) : 0);
      }
    }
  }
  return out;
}

inline void write_bytes(const std::filesystem::path& path, const std::string& bytes) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw IoError("cannot write " + path.string());
  out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
  if (!out) throw IoError("write failed for " + path.string());
}

inline void write_image(const Frame& f, const std::filesystem::path& path) { write_bytes(path, encode_pnm(f)); }
inline void write_image(const ImageGrid& g, const std::filesystem::path& path) { write_image(g.compose(), path); }

inline Frame frame_of(const VideoSequence& seq, std::size_t t) {
  Frame f(seq.channels, seq.height, seq.width);
  const auto src = seq.frame(t);
  std::copy(src.begin(), src.end(), f.pixels.begin());
  return f;
}

/// Diverging colour ramp: -1 blue, 0 white, +1 red; each entry a block x block square.
inline Frame heatmap_frame(const Eigen::MatrixXd& m, std::size_t block = 8) {
  if (!m.allFinite()) throw PreconditionError("heatmap entries must be finite");
  if (block == 0) throw PreconditionError("heatmap block size must be positive");
  Frame f(3, static_cast<std::size_t>(m.rows()) * block, static_cast<std::size_t>(m.cols()) * block);
  for (Eigen::Index i = 0; i < m.rows(); ++i) {
    for (Eigen::Index j = 0; j < m.cols(); ++j) {
      const double v = std::clamp(m(i, j), -1.0, 1.0);
      const float rgb[3] = {static_cast<float>(v < 0 ? 1 + v : 1.0), static_cast<float>(1 - std::abs(v)),
                            static_cast<float>(v > 0 ? 1 - v : 1.0)};
      for (std::size_t y = 0; y < block; ++y) {
        for (std::size_t x = 0; x < block; ++x) {
          for (std::size_t c = 0; c < 3; ++c) {
            f.at(c, static_cast<std::size_t>(i) * block + y, static_cast<std::size_t>(j) * block + x) = rgb[c];
          }
        }
      }
    }
  }
  return f;
}

/// Writes the heatmap image and the matrix as CSV next to it (same stem, .csv).
inline void heatmap(const Eigen::MatrixXd& m, const std::filesystem::path& path, std::size_t block = 8) {
  write_image(heatmap_frame(m, block), path);
  auto csv = path;
  csv.replace_extension(".csv");
  write_bytes(csv, matrix_csv(m));
}

namespace detail {

/// Emission means for each latent column, decoded in one batch.
template <class S>
std::vector<Frame> decode_means(const ModelBundle<S>& b, const Matrix<S>& latents) {
  ad::Tape<S> tape;
  ParamLeaves<S> leaves(tape, b.params);
  NeuralModel<S> m(b, leaves);
  const auto g = m.emission(tape.constant(latents));
  const Matrix<S>& mean = tape.value(g.mean);
  std::vector<Frame> out;
  for (Eigen::Index c = 0; c < mean.cols(); ++c) {
    Frame f(b.config.channels, b.config.height, b.config.width);
    for (std::size_t p = 0; p < f.pixels.size(); ++p) f.pixels[p] = static_cast<float>(mean(static_cast<Eigen::Index>(p), c));
    out.push_back(std::move(f));
  }
  return out;
}

}  // namespace detail

/// Which factors get their own independent-generation row.
struct FactorSelection {
  enum class Kind { All, None, One } kind = Kind::All;
  std::size_t index = 0;

  static FactorSelection all() { return {Kind::All, 0}; }
  static FactorSelection none() { return {Kind::None, 0}; }
  static FactorSelection only(std::size_t i) { return {Kind::One, i}; }
};

/// Rows: the reconstruction of frames 2..n (1-based), then one row per
/// selected factor i in which every factor except i is frozen at its frame-2
/// posterior sample. Selecting no factor gives a single fully frozen row.
/// Decoding uses the emission mean.
template <class S>
ImageGrid independent_generation(const ModelBundle<S>& b, const VideoSequence& seq, FactorSelection sel,
                                 RngStream& rng) {
  if (seq.frames < 3) throw PreconditionError("independent generation needs at least 3 frames");
  if (sel.kind == FactorSelection::Kind::One && sel.index >= b.config.k_factors) {
    throw PreconditionError("factor index " + std::to_string(sel.index) + " out of range");
  }
  const auto trace = filter_rollout(b, seq, rng);
  // Each row varies a set of factors; the frozen row varies none.
  std::vector<std::vector<std::size_t>> rows;
  std::vector<std::string> labels{"reconstruction"};
  switch (sel.kind) {
    case FactorSelection::Kind::All:
      for (std::size_t i = 0; i < b.config.k_factors; ++i) {
        rows.push_back({i});
        labels.push_back("factor " + std::to_string(i));
      }
      break;
    case FactorSelection::Kind::One:
      rows.push_back({sel.index});
      labels.push_back("factor " + std::to_string(sel.index));
      break;
    case FactorSelection::Kind::None:
      rows.emplace_back();
      labels.push_back("frozen");
      break;
  }
  const std::size_t cols = seq.frames - 1;
  const auto z = static_cast<Eigen::Index>(b.config.latent_dim());
  Matrix<S> latents(z, static_cast<Eigen::Index>(cols * (1 + rows.size())));
  const auto& frozen = trace.samples[1];
  for (std::size_t t = 1; t < seq.frames; ++t) {
    latents.col(static_cast<Eigen::Index>(t - 1)) = trace.samples[t].flat();
    for (std::size_t r = 0; r < rows.size(); ++r) {
      auto state = frozen;
      for (auto i : rows[r]) state.factors[i] = trace.samples[t].factors[i];
      latents.col(static_cast<Eigen::Index>((r + 1) * cols + t - 1)) = state.flat();
    }
  }
  ImageGrid g;
  g.rows = 1 + rows.size();
  g.cols = cols;
  g.cells = detail::decode_means(b, latents);
  g.row_labels = std::move(labels);
  return g;
}

/// Per factor and channel: mean |x_t - x_2| over frames 3..n and pixels of
/// the factor's independent-generation row, averaged over sequences.
struct ChannelSelectivity {
  Eigen::MatrixXd change;  // k x channels

  /// Largest over smallest channel change for one factor (inf when the
  /// smallest is zero and the largest is not).
  double ratio(std::size_t factor) const {
    const auto row = change.row(static_cast<Eigen::Index>(factor));
    const double lo = row.minCoeff(), hi = row.maxCoeff();
    if (lo <= 0) return hi > 0 ? std::numeric_limits<double>::infinity() : 1.0;
    return hi / lo;
  }
  double min_ratio() const {
    double r = std::numeric_limits<double>::infinity();
    for (Eigen::Index i = 0; i < change.rows(); ++i) r = std::min(r, ratio(static_cast<std::size_t>(i)));
    return r;
  }
  Eigen::Index dominant_channel(std::size_t factor) const {
    Eigen::Index c;
    change.row(static_cast<Eigen::Index>(factor)).maxCoeff(&c);
    return c;
  }
};

template <class S>
ChannelSelectivity channel_selectivity(const ModelBundle<S>& b, const VideoDataset& data, RngStream& rng) {
  if (data.empty()) throw PreconditionError("channel selectivity needs sequences");
  const std::size_t k = b.config.k_factors, C = b.config.channels;
  const std::size_t plane = b.config.height * b.config.width;
  ChannelSelectivity out{Eigen::MatrixXd::Zero(static_cast<Eigen::Index>(k), static_cast<Eigen::Index>(C))};
  for (const auto& seq : data.sequences) {
    const auto g = independent_generation(b, seq, FactorSelection::all(), rng);
    for (std::size_t i = 0; i < k; ++i) {
      const auto& base = g.cell(i + 1, 0);
      for (std::size_t t = 1; t < g.cols; ++t) {
        const auto& f = g.cell(i + 1, t);
        for (std::size_t c = 0; c < C; ++c) {
          double s = 0;
          for (std::size_t p = 0; p < plane; ++p) s += std::abs(f.pixels[c * plane + p] - base.pixels[c * plane + p]);
          out.change(static_cast<Eigen::Index>(i), static_cast<Eigen::Index>(c)) +=
              s / static_cast<double>(plane * (g.cols - 1));
        }
      }
    }
  }
  out.change /= static_cast<double>(data.size());
  return out;
}

}  // namespace facseq
