#pragma once

// Reverse-mode differentiation over dense matrices.
//
// Values are column-major Eigen matrices laid out features x batch. Every op
// records its output on a Tape together with a closure that pushes the output
// gradient back to its inputs. Nodes that do not depend on a leaf created with
// `Tape::variable` never receive gradients.

#include <Eigen/Dense>
#include <cmath>
#include <functional>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include "facseq/activation.hpp"
#include "facseq/errors.hpp"

namespace facseq {

template <class S>
using Matrix = Eigen::Matrix<S, Eigen::Dynamic, Eigen::Dynamic>;
template <class S>
using Vector = Eigen::Matrix<S, Eigen::Dynamic, 1>;

namespace ad {

template <class S>
class Tape;

/// Handle to a node on a tape.
template <class S>
struct Var {
  Tape<S>* tape = nullptr;
  std::size_t index = 0;

  const Matrix<S>& value() const { return tape->value(*this); }
  Eigen::Index rows() const { return value().rows(); }
  Eigen::Index cols() const { return value().cols(); }
};

template <class S>
class Tape {
 public:
  using Backward = std::function<void(Tape&, std::size_t)>;

  Tape() = default;
  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;

  Var<S> constant(Matrix<S> v) { return push(std::move(v), false, {}); }

  /// Leaf that accumulates a gradient.
  Var<S> variable(Matrix<S> v) { return push(std::move(v), true, {}); }

  Var<S> push(Matrix<S> v, bool requires_grad, Backward bw) {
    nodes_.push_back(Node{std::move(v), {}, requires_grad, std::move(bw)});
    return Var<S>{this, nodes_.size() - 1};
  }

  const Matrix<S>& value(Var<S> v) const { return nodes_[v.index].value; }
  const Matrix<S>& value(std::size_t i) const { return nodes_[i].value; }
  bool requires_grad(Var<S> v) const { return nodes_[v.index].requires_grad; }
  bool requires_grad(std::size_t i) const { return nodes_[i].requires_grad; }

  /// Gradient of the last backward root with respect to `v`; zeros if the node
  /// was never reached.
  Matrix<S> grad(Var<S> v) const {
    const Node& n = nodes_[v.index];
    if (n.grad.size() == 0) return Matrix<S>::Zero(n.value.rows(), n.value.cols());
    return n.grad;
  }
  const Matrix<S>& grad_ref(std::size_t i) const { return nodes_[i].grad; }

  template <class Derived>
  void accumulate(std::size_t i, const Eigen::MatrixBase<Derived>& g) {
    Node& n = nodes_[i];
    if (!n.requires_grad) return;
    if (n.grad.size() == 0) {
      n.grad = g;
    } else {
      n.grad += g;
    }
  }

  /// Backpropagates from a 1x1 node.
  void backward(Var<S> root) {
    if (value(root).size() != 1) {
      throw StructuralError("backward root must be a scalar node");
    }
    for (auto& n : nodes_) n.grad.resize(0, 0);
    nodes_[root.index].grad = Matrix<S>::Ones(1, 1);
    for (std::size_t i = root.index + 1; i-- > 0;) {
      Node& n = nodes_[i];
      if (n.grad.size() == 0 || !n.backward) continue;
      n.backward(*this, i);
    }
  }

  std::size_t size() const noexcept { return nodes_.size(); }

 private:
  struct Node {
    Matrix<S> value;
    Matrix<S> grad;
    bool requires_grad = false;
    Backward backward;
  };
  std::vector<Node> nodes_;
};

namespace detail {

template <class S>
bool any_grad(std::initializer_list<Var<S>> vs) {
  for (const auto& v : vs) {
    if (v.tape->requires_grad(v)) return true;
  }
  return false;
}

template <class S>
void require_same_shape(const Matrix<S>& a, const Matrix<S>& b, const char* op) {
  if (a.rows() != b.rows() || a.cols() != b.cols()) {
    throw StructuralError(std::string(op) + ": shape mismatch (" +
                          std::to_string(a.rows()) + "x" + std::to_string(a.cols()) +
                          " vs " + std::to_string(b.rows()) + "x" +
                          std::to_string(b.cols()) + ")");
  }
}

}  // namespace detail

template <class S>
Var<S> matmul(Var<S> a, Var<S> b) {
  Tape<S>& t = *a.tape;
  const auto& av = a.value();
  const auto& bv = b.value();
  if (av.cols() != bv.rows()) {
    throw StructuralError("matmul: inner dimensions " + std::to_string(av.cols()) +
                          " and " + std::to_string(bv.rows()) + " differ");
  }
  Matrix<S> out = av * bv;
  const bool rg = detail::any_grad({a, b});
  return t.push(std::move(out), rg, [ai = a.index, bi = b.index](Tape<S>& tp, std::size_t self) {
    const Matrix<S>& g = tp.grad_ref(self);
    if (tp.requires_grad(ai)) tp.accumulate(ai, g * tp.value(bi).transpose());
    if (tp.requires_grad(bi)) tp.accumulate(bi, tp.value(ai).transpose() * g);
  });
}

/// x + b broadcast across columns; b is rows x 1.
template <class S>
Var<S> add_bias(Var<S> x, Var<S> b) {
  Tape<S>& t = *x.tape;
  const auto& xv = x.value();
  const auto& bv = b.value();
  if (bv.cols() != 1 || bv.rows() != xv.rows()) {
    throw StructuralError("add_bias: bias must be a column of length " +
                          std::to_string(xv.rows()));
  }
  Matrix<S> out = xv.colwise() + bv.col(0);
  return t.push(std::move(out), detail::any_grad({x, b}),
                [xi = x.index, bi = b.index](Tape<S>& tp, std::size_t self) {
                  const Matrix<S>& g = tp.grad_ref(self);
                  tp.accumulate(xi, g);
                  if (tp.requires_grad(bi)) tp.accumulate(bi, g.rowwise().sum());
                });
}

template <class S>
Var<S> add(Var<S> a, Var<S> b) {
  detail::require_same_shape(a.value(), b.value(), "add");
  Matrix<S> out = a.value() + b.value();
  return a.tape->push(std::move(out), detail::any_grad({a, b}),
                      [ai = a.index, bi = b.index](Tape<S>& tp, std::size_t self) {
                        const Matrix<S>& g = tp.grad_ref(self);
                        tp.accumulate(ai, g);
                        tp.accumulate(bi, g);
                      });
}

template <class S>
Var<S> sub(Var<S> a, Var<S> b) {
  detail::require_same_shape(a.value(), b.value(), "sub");
  Matrix<S> out = a.value() - b.value();
  return a.tape->push(std::move(out), detail::any_grad({a, b}),
                      [ai = a.index, bi = b.index](Tape<S>& tp, std::size_t self) {
                        const Matrix<S>& g = tp.grad_ref(self);
                        tp.accumulate(ai, g);
                        if (tp.requires_grad(bi)) tp.accumulate(bi, -g);
                      });
}

/// Elementwise product.
template <class S>
Var<S> hadamard(Var<S> a, Var<S> b) {
  detail::require_same_shape(a.value(), b.value(), "hadamard");
  Matrix<S> out = a.value().cwiseProduct(b.value());
  return a.tape->push(std::move(out), detail::any_grad({a, b}),
                      [ai = a.index, bi = b.index](Tape<S>& tp, std::size_t self) {
                        const Matrix<S>& g = tp.grad_ref(self);
                        if (tp.requires_grad(ai)) tp.accumulate(ai, g.cwiseProduct(tp.value(bi)));
                        if (tp.requires_grad(bi)) tp.accumulate(bi, g.cwiseProduct(tp.value(ai)));
                      });
}

template <class S>
Var<S> scale(Var<S> a, S s) {
  Matrix<S> out = a.value() * s;
  return a.tape->push(std::move(out), detail::any_grad({a}),
                      [ai = a.index, s](Tape<S>& tp, std::size_t self) {
                        tp.accumulate(ai, tp.grad_ref(self) * s);
                      });
}

template <class S>
Var<S> square(Var<S> a) {
  Matrix<S> out = a.value().array().square().matrix();
  return a.tape->push(std::move(out), detail::any_grad({a}),
                      [ai = a.index](Tape<S>& tp, std::size_t self) {
                        tp.accumulate(ai, (tp.grad_ref(self).array() * S(2) *
                                           tp.value(ai).array()).matrix());
                      });
}

template <class S>
Var<S> exp(Var<S> a) {
  Matrix<S> out = a.value().array().exp().matrix();
  return a.tape->push(std::move(out), detail::any_grad({a}),
                      [ai = a.index](Tape<S>& tp, std::size_t self) {
                        tp.accumulate(ai, tp.grad_ref(self).cwiseProduct(tp.value(self)));
                      });
}

/// Logistic function 1 / (1 + e^-x).
template <class S>
Var<S> sigmoid(Var<S> a) {
  Matrix<S> out = a.value().unaryExpr([](S x) {
    return x >= S(0) ? S(1) / (S(1) + std::exp(-x)) : std::exp(x) / (S(1) + std::exp(x));
  });
  return a.tape->push(std::move(out), detail::any_grad({a}),
                      [ai = a.index](Tape<S>& tp, std::size_t self) {
                        const auto y = tp.value(self).array();
                        tp.accumulate(ai, (tp.grad_ref(self).array() * y * (S(1) - y)).matrix());
                      });
}

/// Clamp to [lo, hi]; gradient is passed only where the input lies inside.
template <class S>
Var<S> clamp(Var<S> a, S lo, S hi) {
  Matrix<S> out = a.value().cwiseMax(lo).cwiseMin(hi);
  return a.tape->push(std::move(out), detail::any_grad({a}),
                      [ai = a.index, lo, hi](Tape<S>& tp, std::size_t self) {
                        const auto& x = tp.value(ai).array();
                        const auto mask = ((x >= lo) && (x <= hi)).template cast<S>();
                        tp.accumulate(ai, (tp.grad_ref(self).array() * mask).matrix());
                      });
}

template <class S>
Var<S> activate(Var<S> a, const Activation& act) {
  if (act.kind == ActivationKind::Identity) return a;
  Matrix<S> out = a.value().unaryExpr([act](S x) { return apply_activation(act, x); });
  return a.tape->push(std::move(out), detail::any_grad({a}),
                      [ai = a.index, act](Tape<S>& tp, std::size_t self) {
                        const Matrix<S> d = tp.value(ai).unaryExpr(
                            [act](S x) { return activation_derivative(act, x); });
                        tp.accumulate(ai, tp.grad_ref(self).cwiseProduct(d));
                      });
}

/// Stacks blocks vertically; all must have the same column count.
template <class S>
Var<S> concat_rows(std::span<const Var<S>> parts) {
  if (parts.empty()) throw StructuralError("concat_rows: no inputs");
  Tape<S>& t = *parts.front().tape;
  const Eigen::Index cols = parts.front().cols();
  Eigen::Index rows = 0;
  bool rg = false;
  for (const auto& p : parts) {
    if (p.cols() != cols) throw StructuralError("concat_rows: column mismatch");
    rows += p.rows();
    rg = rg || t.requires_grad(p);
  }
  Matrix<S> out(rows, cols);
  std::vector<std::pair<std::size_t, Eigen::Index>> spans;
  Eigen::Index r = 0;
  for (const auto& p : parts) {
    out.middleRows(r, p.rows()) = p.value();
    spans.emplace_back(p.index, r);
    r += p.rows();
  }
  return t.push(std::move(out), rg, [spans](Tape<S>& tp, std::size_t self) {
    const Matrix<S>& g = tp.grad_ref(self);
    for (const auto& [idx, start] : spans) {
      if (tp.requires_grad(idx)) tp.accumulate(idx, g.middleRows(start, tp.value(idx).rows()));
    }
  });
}

template <class S>
Var<S> concat_rows(std::initializer_list<Var<S>> parts) {
  return concat_rows(std::span<const Var<S>>(parts.begin(), parts.size()));
}

/// Places blocks side by side; all must have the same row count.
template <class S>
Var<S> concat_cols(std::span<const Var<S>> parts) {
  if (parts.empty()) throw StructuralError("concat_cols: no inputs");
  Tape<S>& t = *parts.front().tape;
  const Eigen::Index rows = parts.front().rows();
  Eigen::Index cols = 0;
  bool rg = false;
  for (const auto& p : parts) {
    if (p.rows() != rows) throw StructuralError("concat_cols: row mismatch");
    cols += p.cols();
    rg = rg || t.requires_grad(p);
  }
  Matrix<S> out(rows, cols);
  std::vector<std::pair<std::size_t, Eigen::Index>> spans;
  Eigen::Index c = 0;
  for (const auto& p : parts) {
    out.middleCols(c, p.cols()) = p.value();
    spans.emplace_back(p.index, c);
    c += p.cols();
  }
  return t.push(std::move(out), rg, [spans](Tape<S>& tp, std::size_t self) {
    const Matrix<S>& g = tp.grad_ref(self);
    for (const auto& [idx, start] : spans) {
      if (tp.requires_grad(idx)) tp.accumulate(idx, g.middleCols(start, tp.value(idx).cols()));
    }
  });
}

template <class S>
Var<S> slice_rows(Var<S> a, Eigen::Index start, Eigen::Index count) {
  if (start < 0 || count < 0 || start + count > a.rows()) {
    throw StructuralError("slice_rows: range out of bounds");
  }
  Matrix<S> out = a.value().middleRows(start, count);
  return a.tape->push(std::move(out), detail::any_grad({a}),
                      [ai = a.index, start](Tape<S>& tp, std::size_t self) {
                        const Matrix<S>& g = tp.grad_ref(self);
                        Matrix<S> full = Matrix<S>::Zero(tp.value(ai).rows(), tp.value(ai).cols());
                        full.middleRows(start, g.rows()) = g;
                        tp.accumulate(ai, full);
                      });
}

template <class S>
Var<S> slice_cols(Var<S> a, Eigen::Index start, Eigen::Index count) {
  if (start < 0 || count < 0 || start + count > a.cols()) {
    throw StructuralError("slice_cols: range out of bounds");
  }
  Matrix<S> out = a.value().middleCols(start, count);
  return a.tape->push(std::move(out), detail::any_grad({a}),
                      [ai = a.index, start](Tape<S>& tp, std::size_t self) {
                        const Matrix<S>& g = tp.grad_ref(self);
                        Matrix<S> full = Matrix<S>::Zero(tp.value(ai).rows(), tp.value(ai).cols());
                        full.middleCols(start, g.cols()) = g;
                        tp.accumulate(ai, full);
                      });
}

/// Sum of all entries, as a 1x1 node.
template <class S>
Var<S> sum(Var<S> a) {
  Matrix<S> out(1, 1);
  out(0, 0) = a.value().sum();
  return a.tape->push(std::move(out), detail::any_grad({a}),
                      [ai = a.index](Tape<S>& tp, std::size_t self) {
                        const S g = tp.grad_ref(self)(0, 0);
                        tp.accumulate(ai, Matrix<S>::Constant(tp.value(ai).rows(),
                                                              tp.value(ai).cols(), g));
                      });
}

/// Column sums as a 1 x cols node.
template <class S>
Var<S> colwise_sum(Var<S> a) {
  Matrix<S> out = a.value().colwise().sum();
  return a.tape->push(std::move(out), detail::any_grad({a}),
                      [ai = a.index](Tape<S>& tp, std::size_t self) {
                        const Matrix<S>& g = tp.grad_ref(self);
                        tp.accumulate(ai, g.replicate(tp.value(ai).rows(), 1));
                      });
}

/// Mean of all entries, as a 1x1 node.
template <class S>
Var<S> mean(Var<S> a) {
  return scale(sum(a), S(1) / static_cast<S>(a.value().size()));
}

}  // namespace ad
}  // namespace facseq
