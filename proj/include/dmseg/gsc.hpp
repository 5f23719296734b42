#pragma once

#include <string>

#include "dmseg/layers.hpp"

namespace dmseg {

struct GscConfig {
  // Reuse the first 1x1x1 convolution for the second one.
  bool tied_g_weights = false;
  // One 3x3x3 conv in the spatial branch instead of two.
  bool single_conv = false;
};

// Gated spatial convolution:
//   G1 = ReLU(IN(conv1x1(z)))         G2 = ReLU(IN(conv1x1'(G1)))
//   C  = ReLU(IN(conv3x3x3'(ReLU(IN(conv3x3x3(z))))))
//   out = z + C * G2
// Every convolution keeps the channel count and spatial size.
template <typename T>
struct Gsc {
  GscConfig config;
  Conv3d<T> g1, g2;
  InstanceNorm<T> g1_norm, g2_norm;
  Conv3d<T> c1, c2;
  InstanceNorm<T> c1_norm, c2_norm;

  Gsc() = default;
  Gsc(index_t channels, const GscConfig& cfg, Rng& rng)
      : config(cfg),
        g1(channels, channels, ConvSpec::cube(1), rng),
        g1_norm(channels),
        g2_norm(channels),
        c1(channels, channels, ConvSpec::cube(3, 1, 1), rng),
        c1_norm(channels) {
    if (!cfg.tied_g_weights) g2 = Conv3d<T>(channels, channels, ConvSpec::cube(1), rng);
    if (!cfg.single_conv) {
      c2 = Conv3d<T>(channels, channels, ConvSpec::cube(3, 1, 1), rng);
      c2_norm = InstanceNorm<T>(channels);
    }
  }

  const Conv3d<T>& second_pointwise() const { return config.tied_g_weights ? g1 : g2; }

  Tensor<T> gate(const Tensor<T>& z) const {
    const auto first = relu(g1_norm(g1(z)));
    return relu(g2_norm(second_pointwise()(first)));
  }

  Tensor<T> spatial(const Tensor<T>& z) const {
    const auto first = relu(c1_norm(c1(z)));
    if (config.single_conv) return first;
    return relu(c2_norm(c2(first)));
  }

  Tensor<T> operator()(const Tensor<T>& z) const { return add(z, mul(spatial(z), gate(z))); }

  void zero_convs() {
    g1.zero();
    if (!config.tied_g_weights) g2.zero();
    c1.zero();
    if (!config.single_conv) c2.zero();
  }

  void collect(const std::string& prefix, NamedParams<T>& out) const {
    g1.collect(prefix + ".g1", out);
    g1_norm.collect(prefix + ".g1_norm", out);
    if (!config.tied_g_weights) g2.collect(prefix + ".g2", out);
    g2_norm.collect(prefix + ".g2_norm", out);
    c1.collect(prefix + ".c1", out);
    c1_norm.collect(prefix + ".c1_norm", out);
    if (!config.single_conv) {
      c2.collect(prefix + ".c2", out);
      c2_norm.collect(prefix + ".c2_norm", out);
    }
  }
};

}  // namespace dmseg
