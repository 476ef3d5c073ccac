#pragma once

#include <bit>
#include <cmath>
#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <optional>
#include <sstream>
#include <string>
#include <type_traits>
#include <vector>

#include "facseq/autodiff.hpp"
#include "facseq/errors.hpp"

namespace facseq {

/// One named tensor inside a flat parameter vector. Storage is column-major.
struct TensorSlot {
  std::string name;
  std::size_t rows = 0;
  std::size_t cols = 0;
  std::size_t offset = 0;

  std::size_t size() const noexcept { return rows * cols; }
  friend bool operator==(const TensorSlot&, const TensorSlot&) = default;
};

/// Ordered registry of tensors. Registration order is the storage order.
class ParamLayout {
 public:
  std::size_t add(std::string name, std::size_t rows, std::size_t cols) {
    for (const auto& s : slots_) {
      if (s.name == name) throw StructuralError("duplicate tensor name '" + name + "'");
    }
    slots_.push_back(TensorSlot{std::move(name), rows, cols, total_});
    total_ += rows * cols;
    return slots_.size() - 1;
  }

  const std::vector<TensorSlot>& slots() const noexcept { return slots_; }
  const TensorSlot& slot(std::size_t i) const { return slots_.at(i); }
  std::size_t total_size() const noexcept { return total_; }

  std::optional<std::size_t> find(const std::string& name) const {
    for (std::size_t i = 0; i < slots_.size(); ++i) {
      if (slots_[i].name == name) return i;
    }
    return std::nullopt;
  }

  friend bool operator==(const ParamLayout&, const ParamLayout&) = default;

 private:
  std::vector<TensorSlot> slots_;
  std::size_t total_ = 0;
};

template <class S>
struct ParamVector {
  ParamLayout layout;
  Vector<S> values;

  ParamVector() = default;
  explicit ParamVector(ParamLayout l)
      : layout(std::move(l)), values(Vector<S>::Zero(static_cast<Eigen::Index>(layout.total_size()))) {}

  std::size_t size() const noexcept { return static_cast<std::size_t>(values.size()); }

  Eigen::Map<Matrix<S>> tensor(std::size_t slot) {
    const auto& s = layout.slot(slot);
    return {values.data() + s.offset, static_cast<Eigen::Index>(s.rows),
            static_cast<Eigen::Index>(s.cols)};
  }
  Eigen::Map<const Matrix<S>> tensor(std::size_t slot) const {
    const auto& s = layout.slot(slot);
    return {values.data() + s.offset, static_cast<Eigen::Index>(s.rows),
            static_cast<Eigen::Index>(s.cols)};
  }

  ParamVector zeros_like() const {
    ParamVector out(layout);
    return out;
  }

  /// Throws NumericalError naming the first tensor holding a non-finite value.
  void require_finite(const std::string& what) const {
    for (const auto& s : layout.slots()) {
      for (std::size_t i = 0; i < s.size(); ++i) {
        if (!std::isfinite(static_cast<double>(values[static_cast<Eigen::Index>(s.offset + i)]))) {
          throw NumericalError(what + " is not finite", s.name);
        }
      }
    }
  }
};

template <class S>
constexpr const char* precision_name() {
  if constexpr (std::is_same_v<S, float>) {
    return "float32";
  } else {
    static_assert(std::is_same_v<S, double>);
    return "float64";
  }
}

/// Per-tape leaves for the tensors of a ParamVector. Each tensor becomes one
/// leaf the first time it is requested, so repeated use across timesteps
/// accumulates into a single gradient.
template <class S>
class ParamLeaves {
 public:
  ParamLeaves(ad::Tape<S>& tape, const ParamVector<S>& params)
      : tape_(&tape), params_(&params), cache_(params.layout.slots().size()) {}

  ad::Var<S> operator()(std::size_t slot) {
    auto& c = cache_.at(slot);
    if (!c) c = tape_->variable(Matrix<S>(params_->tensor(slot)));
    return *c;
  }

  ad::Tape<S>& tape() const noexcept { return *tape_; }
  const ParamVector<S>& params() const noexcept { return *params_; }

  /// Gradient of the last backward pass, laid out like the parameters.
  ParamVector<S> gradient() const {
    ParamVector<S> g = params_->zeros_like();
    for (std::size_t i = 0; i < cache_.size(); ++i) {
      if (!cache_[i]) continue;
      const Matrix<S>& gi = tape_->grad_ref(cache_[i]->index);
      if (gi.size() == 0) continue;
      g.tensor(i) = gi;
    }
    return g;
  }

 private:
  ad::Tape<S>* tape_;
  const ParamVector<S>* params_;
  std::vector<std::optional<ad::Var<S>>> cache_;
};

/// Exact gradient of a scalar objective. `objective(leaves)` must build its
/// graph on `leaves.tape()` and return a 1x1 node. Any stochastic inputs must
/// be fixed by the caller so that repeated evaluations are the same function.
template <class S, class Objective>
ParamVector<S> gradient(Objective&& objective, const ParamVector<S>& params) {
  ad::Tape<S> tape;
  ParamLeaves<S> leaves(tape, params);
  ad::Var<S> root = objective(leaves);
  const S v = root.value()(0, 0);
  if (!std::isfinite(static_cast<double>(v))) {
    throw NumericalError("objective is not finite", "objective");
  }
  tape.backward(root);
  ParamVector<S> g = leaves.gradient();
  g.require_finite("gradient");
  return g;
}

// Serialization: a text metadata document plus a raw little-endian blob.

namespace detail {

template <class T>
void write_le(std::ostream& os, T v) {
  static_assert(std::is_trivially_copyable_v<T>);
  unsigned char bytes[sizeof(T)];
  std::memcpy(bytes, &v, sizeof(T));
  if constexpr (std::endian::native == std::endian::big) {
    for (std::size_t i = 0; i < sizeof(T) / 2; ++i) std::swap(bytes[i], bytes[sizeof(T) - 1 - i]);
  }
  os.write(reinterpret_cast<const char*>(bytes), sizeof(T));
}

template <class T>
bool read_le(std::istream& is, T& v) {
  unsigned char bytes[sizeof(T)];
  if (!is.read(reinterpret_cast<char*>(bytes), sizeof(T))) return false;
  if constexpr (std::endian::native == std::endian::big) {
    for (std::size_t i = 0; i < sizeof(T) / 2; ++i) std::swap(bytes[i], bytes[sizeof(T) - 1 - i]);
  }
  std::memcpy(&v, bytes, sizeof(T));
  return true;
}

}  // namespace detail

template <class S>
std::string params_metadata(const ParamVector<S>& p) {
  std::ostringstream os;
  os << "facseq-params 1\n";
  os << "precision " << precision_name<S>() << "\n";
  os << "order column-major\n";
  os << "count " << p.size() << "\n";
  os << "tensors " << p.layout.slots().size() << "\n";
  for (const auto& s : p.layout.slots()) {
    os << "tensor " << s.name << " " << s.rows << " " << s.cols << " " << s.offset << "\n";
  }
  return os.str();
}

/// Writes `<stem>.txt` (metadata) and `<stem>.bin` (values).
template <class S>
void save_params(const ParamVector<S>& p, const std::filesystem::path& stem) {
  auto meta_path = stem;
  meta_path += ".txt";
  auto blob_path = stem;
  blob_path += ".bin";
  std::ofstream meta(meta_path, std::ios::binary);
  if (!meta) throw IoError("cannot write " + meta_path.string());
  meta << params_metadata(p);
  std::ofstream blob(blob_path, std::ios::binary);
  if (!blob) throw IoError("cannot write " + blob_path.string());
  for (Eigen::Index i = 0; i < p.values.size(); ++i) detail::write_le<S>(blob, p.values[i]);
  if (!meta || !blob) throw IoError("write failed for " + stem.string());
}

/// Reads a parameter pair written by save_params. The stored precision must
/// match S.
template <class S>
ParamVector<S> load_params(const std::filesystem::path& stem) {
  auto meta_path = stem;
  meta_path += ".txt";
  auto blob_path = stem;
  blob_path += ".bin";
  std::ifstream meta(meta_path);
  if (!meta) throw IoError("cannot read " + meta_path.string());
  std::string tag;
  int version = 0;
  if (!(meta >> tag >> version) || tag != "facseq-params" || version != 1) {
    throw FormatError(meta_path.string() + ": not a parameter metadata file");
  }
  std::string key, precision, order;
  std::size_t count = 0, n_tensors = 0;
  meta >> key >> precision;
  if (key != "precision") throw FormatError("missing precision");
  if (precision != precision_name<S>()) {
    throw FormatError("stored precision " + precision + " does not match " + precision_name<S>());
  }
  meta >> key >> order;
  if (key != "order" || order != "column-major") throw FormatError("missing or unknown order");
  meta >> key >> count;
  if (key != "count") throw FormatError("missing count");
  meta >> key >> n_tensors;
  if (key != "tensors") throw FormatError("missing tensors");
  ParamLayout layout;
  for (std::size_t i = 0; i < n_tensors; ++i) {
    std::string name;
    std::size_t rows = 0, cols = 0, offset = 0;
    if (!(meta >> key >> name >> rows >> cols >> offset) || key != "tensor") {
      throw FormatError("truncated tensor list");
    }
    layout.add(name, rows, cols);
    if (layout.slots().back().offset != offset) throw FormatError("tensor offsets out of order");
  }
  if (layout.total_size() != count) throw FormatError("tensor sizes do not sum to count");
  ParamVector<S> p(std::move(layout));
  std::ifstream blob(blob_path, std::ios::binary);
  if (!blob) throw IoError("cannot read " + blob_path.string());
  for (Eigen::Index i = 0; i < p.values.size(); ++i) {
    if (!detail::read_le<S>(blob, p.values[i])) throw FormatError("parameter blob truncated");
  }
  if (blob.peek() != std::char_traits<char>::eof()) throw FormatError("parameter blob has trailing bytes");
  return p;
}

}  // namespace facseq
