#pragma once

#include <cmath>
#include <string>
#include <string_view>

#include "facseq/errors.hpp"

namespace facseq {

inline constexpr double kSeluAlpha = 1.6732632423543772;
inline constexpr double kSeluLambda = 1.0507009873554805;
inline constexpr double kLeakySlope = 0.2;

enum class ActivationKind { Identity, ReLU, LeakyReLU, SELU };

struct Activation {
  ActivationKind kind = ActivationKind::Identity;
  double slope = kLeakySlope;  // LeakyReLU only

  static constexpr Activation identity() { return {ActivationKind::Identity}; }
  static constexpr Activation relu() { return {ActivationKind::ReLU}; }
  static constexpr Activation leaky_relu(double s = kLeakySlope) {
    return {ActivationKind::LeakyReLU, s};
  }
  static constexpr Activation selu() { return {ActivationKind::SELU}; }

  friend bool operator==(const Activation&, const Activation&) = default;
};

template <class T>
T selu(T x) {
  return x > T(0) ? T(kSeluLambda) * x
                  : T(kSeluLambda * kSeluAlpha) * std::expm1(x);
}

template <class T>
T selu_derivative(T x) {
  return x > T(0) ? T(kSeluLambda) : T(kSeluLambda * kSeluAlpha) * std::exp(x);
}

template <class T>
T leaky_relu(T x, T slope) {
  return x >= T(0) ? x : slope * x;
}

template <class T>
T apply_activation(const Activation& a, T x) {
  switch (a.kind) {
    case ActivationKind::Identity: return x;
    case ActivationKind::ReLU: return x > T(0) ? x : T(0);
    case ActivationKind::LeakyReLU: return leaky_relu(x, T(a.slope));
    case ActivationKind::SELU: return selu(x);
  }
  return x;
}

/// Derivative with respect to the pre-activation. ReLU-family kinks take the
/// right-hand derivative at 0 for x > 0 only.
template <class T>
T activation_derivative(const Activation& a, T x) {
  switch (a.kind) {
    case ActivationKind::Identity: return T(1);
    case ActivationKind::ReLU: return x > T(0) ? T(1) : T(0);
    case ActivationKind::LeakyReLU: return x >= T(0) ? T(1) : T(a.slope);
    case ActivationKind::SELU: return selu_derivative(x);
  }
  return T(1);
}

inline std::string to_string(const Activation& a) {
  switch (a.kind) {
    case ActivationKind::Identity: return "identity";
    case ActivationKind::ReLU: return "relu";
    case ActivationKind::LeakyReLU: return "leaky_relu:" + std::to_string(a.slope);
    case ActivationKind::SELU: return "selu";
  }
  return "identity";
}

inline Activation parse_activation(std::string_view s) {
  if (s == "identity") return Activation::identity();
  if (s == "relu") return Activation::relu();
  if (s == "selu") return Activation::selu();
  if (s == "leaky_relu") return Activation::leaky_relu();
  if (s.starts_with("leaky_relu:")) {
    return Activation::leaky_relu(std::stod(std::string(s.substr(11))));
  }
  throw ConfigError("unknown activation '" + std::string(s) + "'");
}

}  // namespace facseq
