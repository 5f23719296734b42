#pragma once

#include <cmath>
#include <optional>
#include <random>
#include <string>
#include <utility>
#include <vector>

#include "dmseg/conv.hpp"
#include "dmseg/norm.hpp"
#include "dmseg/ops.hpp"

// Parameterized building blocks shared by the encoder and decoder.
namespace dmseg {

using Rng = std::mt19937_64;

template <typename T>
using NamedParams = std::vector<std::pair<std::string, Tensor<T>>>;

template <typename T>
Tensor<T> uniform_param(Shape shape, double bound, Rng& rng) {
  std::uniform_real_distribution<double> dist(-bound, bound);
  Tensor<T> t(std::move(shape));
  for (auto& v : t.values()) v = static_cast<T>(dist(rng));
  t.set_requires_grad(true);
  return t;
}

template <typename T>
Tensor<T> constant_param(Shape shape, double value) {
  Tensor<T> t(std::move(shape), static_cast<T>(value));
  t.set_requires_grad(true);
  return t;
}

template <typename T>
void zero_fill(Tensor<T>& t) {
  std::fill(t.values().begin(), t.values().end(), T{0});
}

template <typename T>
struct Conv3d {
  ConvSpec spec;
  Tensor<T> weight;
  std::optional<Tensor<T>> bias;

  Conv3d() = default;
  // He-uniform weights, zero bias.
  Conv3d(index_t in, index_t out, ConvSpec s, Rng& rng, bool with_bias = true) : spec(s) {
    const index_t fan_in = in / s.groups * s.kernel_volume();
    weight = uniform_param<T>(Shape{out, in / s.groups, s.kernel[0], s.kernel[1], s.kernel[2]},
                              std::sqrt(6.0 / static_cast<double>(fan_in)), rng);
    if (with_bias) bias = constant_param<T>(Shape{out}, 0.0);
  }

  index_t out_channels() const { return weight.dim(0); }
  Tensor<T> operator()(const Tensor<T>& x) const { return conv3d(x, weight, bias ? &*bias : nullptr, spec); }
  void collect(const std::string& prefix, NamedParams<T>& out) const {
    out.emplace_back(prefix + ".weight", weight);
    if (bias) out.emplace_back(prefix + ".bias", *bias);
  }
  void zero() {
    zero_fill(weight);
    if (bias) zero_fill(*bias);
  }
};

template <typename T>
struct ConvTranspose3d {
  ConvSpec spec;
  Tensor<T> weight;
  Tensor<T> bias;

  ConvTranspose3d() = default;
  ConvTranspose3d(index_t in, index_t out, ConvSpec s, Rng& rng) : spec(s) {
    const index_t fan_in = in * s.kernel_volume() / (s.stride[0] * s.stride[1] * s.stride[2]);
    weight = uniform_param<T>(Shape{in, out, s.kernel[0], s.kernel[1], s.kernel[2]},
                              std::sqrt(6.0 / static_cast<double>(std::max<index_t>(fan_in, 1))), rng);
    bias = constant_param<T>(Shape{out}, 0.0);
  }

  Tensor<T> operator()(const Tensor<T>& x) const { return conv_transpose3d(x, weight, &bias, spec); }
  void collect(const std::string& prefix, NamedParams<T>& out) const {
    out.emplace_back(prefix + ".weight", weight);
    out.emplace_back(prefix + ".bias", bias);
  }
  void zero() {
    zero_fill(weight);
    zero_fill(bias);
  }
};

// Instance norm with learnable per-channel scale (init 1) and shift (init 0).
template <typename T>
struct InstanceNorm {
  Tensor<T> scale;
  Tensor<T> shift;

  InstanceNorm() = default;
  explicit InstanceNorm(index_t channels)
      : scale(constant_param<T>(Shape{channels}, 1.0)), shift(constant_param<T>(Shape{channels}, 0.0)) {}

  Tensor<T> operator()(const Tensor<T>& x) const { return instance_norm(x, T(kInstanceNormEps), &scale, &shift); }
  void collect(const std::string& prefix, NamedParams<T>& out) const {
    out.emplace_back(prefix + ".scale", scale);
    out.emplace_back(prefix + ".shift", shift);
  }
};

// conv -> instance norm -> ReLU
template <typename T>
struct ConvNormRelu {
  Conv3d<T> conv;
  InstanceNorm<T> norm;

  ConvNormRelu() = default;
  ConvNormRelu(index_t in, index_t out, ConvSpec s, Rng& rng) : conv(in, out, s, rng), norm(out) {}

  Tensor<T> operator()(const Tensor<T>& x) const { return relu(norm(conv(x))); }
  void collect(const std::string& prefix, NamedParams<T>& out) const {
    conv.collect(prefix + ".conv", out);
    norm.collect(prefix + ".norm", out);
  }
};

template <typename T>
struct Linear {
  Tensor<T> weight;
  std::optional<Tensor<T>> bias;

  Linear() = default;
  Linear(index_t in, index_t out, Rng& rng, bool with_bias = true) {
    const double bound = 1.0 / std::sqrt(static_cast<double>(in));
    weight = uniform_param<T>(Shape{out, in}, bound, rng);
    if (with_bias) bias = uniform_param<T>(Shape{out}, bound, rng);
  }

  Tensor<T> operator()(const Tensor<T>& x) const { return linear(x, weight, bias ? &*bias : nullptr); }
  void collect(const std::string& prefix, NamedParams<T>& out) const {
    out.emplace_back(prefix + ".weight", weight);
    if (bias) out.emplace_back(prefix + ".bias", *bias);
  }
};

template <typename T>
index_t parameter_count(const NamedParams<T>& params) {
  index_t n = 0;
  for (const auto& [name, t] : params) n += t.numel();
  return n;
}

}  // namespace dmseg
