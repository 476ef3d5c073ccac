#pragma once

#include <cmath>
#include <string>
#include <vector>

#include "facseq/activation.hpp"
#include "facseq/autodiff.hpp"
#include "facseq/params.hpp"
#include "facseq/rng.hpp"

namespace facseq {

/// Weight (out x in) and bias (out x 1) slots of one dense layer.
struct DenseLayer {
  std::size_t weight = 0;
  std::size_t bias = 0;
  std::size_t in = 0;
  std::size_t out = 0;
};

/// Fully connected network. The weights live in a ParamVector; the Mlp records
/// where. `hidden` follows every layer but the last, `output` follows the last.
struct Mlp {
  std::vector<DenseLayer> layers;
  Activation hidden = Activation::identity();
  Activation output = Activation::identity();

  std::size_t input_dim() const { return layers.empty() ? 0 : layers.front().in; }
  std::size_t output_dim() const { return layers.empty() ? 0 : layers.back().out; }
};

/// Registers a network with layer sizes dims[0] -> dims[1] -> ... -> dims.back().
inline Mlp register_mlp(ParamLayout& layout, const std::string& prefix,
                        const std::vector<std::size_t>& dims, Activation hidden,
                        Activation output) {
  if (dims.size() < 2) throw StructuralError(prefix + ": an MLP needs at least two sizes");
  Mlp net;
  net.hidden = hidden;
  net.output = output;
  for (std::size_t i = 0; i + 1 < dims.size(); ++i) {
    if (dims[i] == 0 || dims[i + 1] == 0) throw ConfigError(prefix + ": zero layer width");
    DenseLayer l;
    l.in = dims[i];
    l.out = dims[i + 1];
    l.weight = layout.add(prefix + ".l" + std::to_string(i) + ".weight", l.out, l.in);
    l.bias = layout.add(prefix + ".l" + std::to_string(i) + ".bias", l.out, 1);
    net.layers.push_back(l);
  }
  return net;
}

/// Uniform in [-1/sqrt(fan_in), 1/sqrt(fan_in)] for weights and biases.
template <class S>
void init_mlp(const Mlp& net, ParamVector<S>& params, RngStream& rng) {
  for (const auto& l : net.layers) {
    const double bound = 1.0 / std::sqrt(static_cast<double>(l.in));
    auto w = params.tensor(l.weight);
    for (Eigen::Index j = 0; j < w.cols(); ++j) {
      for (Eigen::Index i = 0; i < w.rows(); ++i) w(i, j) = static_cast<S>(rng.uniform(-bound, bound));
    }
    auto b = params.tensor(l.bias);
    for (Eigen::Index i = 0; i < b.rows(); ++i) b(i, 0) = static_cast<S>(rng.uniform(-bound, bound));
  }
}

/// Plain evaluation on a single input vector.
template <class S>
Vector<S> mlp_forward(const Mlp& net, const ParamVector<S>& params, const Vector<S>& input) {
  if (static_cast<std::size_t>(input.size()) != net.input_dim()) {
    throw StructuralError("mlp_forward: input length " + std::to_string(input.size()) +
                          " but network expects " + std::to_string(net.input_dim()));
  }
  Vector<S> x = input;
  for (std::size_t i = 0; i < net.layers.size(); ++i) {
    const auto& l = net.layers[i];
    Vector<S> y = params.tensor(l.weight) * x + params.tensor(l.bias);
    const Activation& act = (i + 1 == net.layers.size()) ? net.output : net.hidden;
    x = y.unaryExpr([&act](S v) { return apply_activation(act, v); });
  }
  return x;
}

/// Taped evaluation over a features x batch input.
template <class S>
ad::Var<S> mlp_forward(const Mlp& net, ParamLeaves<S>& leaves, ad::Var<S> input) {
  if (static_cast<std::size_t>(input.rows()) != net.input_dim()) {
    throw StructuralError("mlp_forward: input rows " + std::to_string(input.rows()) +
                          " but network expects " + std::to_string(net.input_dim()));
  }
  ad::Var<S> x = input;
  for (std::size_t i = 0; i < net.layers.size(); ++i) {
    const auto& l = net.layers[i];
    x = ad::add_bias(ad::matmul(leaves(l.weight), x), leaves(l.bias));
    x = ad::activate(x, (i + 1 == net.layers.size()) ? net.output : net.hidden);
  }
  return x;
}

}  // namespace facseq
