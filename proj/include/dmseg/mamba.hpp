#pragma once

#include <cmath>
#include <string>

#include "dmseg/layers.hpp"
#include "dmseg/norm.hpp"
#include "dmseg/ssm.hpp"

namespace dmseg {

struct MambaConfig {
  index_t state_dim = 16;  // S
  index_t expand = 2;      // E = expand * C
  index_t conv_width = 4;
};

// Mamba block over a [N, L, C] sequence:
//   RMS pre-norm -> in_proj splits (value, gate) -> causal depthwise conv ->
//   SiLU -> selective scan (delta, B, C derived from the conv output) ->
//   gate with SiLU(gate) -> out_proj -> residual add.
template <typename T>
struct MambaBlock {
  Tensor<T> norm_weight;
  Linear<T> in_proj;
  Tensor<T> conv_weight;
  Tensor<T> conv_bias;
  Linear<T> delta_proj;
  Linear<T> b_proj;
  Linear<T> c_proj;
  Tensor<T> a_log;
  Tensor<T> d_skip;
  Linear<T> out_proj;

  MambaBlock() = default;
  MambaBlock(index_t channels, const MambaConfig& cfg, Rng& rng) {
    const index_t E = cfg.expand * channels, S = cfg.state_dim;
    norm_weight = constant_param<T>(Shape{channels}, 1.0);
    in_proj = Linear<T>(channels, 2 * E, rng, false);
    conv_weight = uniform_param<T>(Shape{E, cfg.conv_width}, 1.0 / std::sqrt(double(cfg.conv_width)), rng);
    conv_bias = constant_param<T>(Shape{E}, 0.0);
    delta_proj = Linear<T>(E, E, rng, true);
    // Step sizes start log-uniform in [1e-3, 1e-1]; the bias holds softplus^-1(dt).
    std::uniform_real_distribution<double> log_dt(std::log(1e-3), std::log(1e-1));
    for (auto& w : delta_proj.weight.values()) w = static_cast<T>(w * 0.1);
    for (auto& b : delta_proj.bias->values()) {
      const double dt = std::exp(log_dt(rng));
      b = static_cast<T>(dt + std::log(-std::expm1(-dt)));
    }
    b_proj = Linear<T>(E, S, rng, false);
    c_proj = Linear<T>(E, S, rng, false);
    a_log = Tensor<T>(Shape{E, S});
    for (index_t e = 0; e < E; ++e)
      for (index_t s = 0; s < S; ++s) a_log[e * S + s] = static_cast<T>(std::log(double(s + 1)));
    a_log.set_requires_grad(true);
    d_skip = constant_param<T>(Shape{E}, 1.0);
    out_proj = Linear<T>(E, channels, rng, false);
  }

  index_t inner_dim() const { return d_skip.dim(0); }
  index_t channels() const { return norm_weight.dim(0); }

  Tensor<T> operator()(const Tensor<T>& seq) const {
    if (seq.rank() != 3 || seq.dim(2) != channels()) {
      throw InvalidInput("mamba_block: expected [N,L," + std::to_string(channels()) + "], got " + to_string(seq.shape()));
    }
    const index_t E = inner_dim();
    const auto u = rms_norm(seq, norm_weight);
    const auto xz = in_proj(u);
    const auto value = narrow(xz, 2, 0, E);
    const auto gate = narrow(xz, 2, E, E);
    const auto xc = silu(causal_depthwise_conv1d(value, conv_weight, conv_bias));
    const auto delta = softplus(delta_proj(xc));
    const auto b = b_proj(xc);
    const auto c = c_proj(xc);
    const auto a = neg(exp(a_log));
    const auto y = mul(selective_scan(xc, delta, a, b, c, d_skip), silu(gate));
    return add(seq, out_proj(y));
  }

  void collect(const std::string& prefix, NamedParams<T>& out) const {
    out.emplace_back(prefix + ".norm_weight", norm_weight);
    in_proj.collect(prefix + ".in_proj", out);
    out.emplace_back(prefix + ".conv_weight", conv_weight);
    out.emplace_back(prefix + ".conv_bias", conv_bias);
    delta_proj.collect(prefix + ".delta_proj", out);
    b_proj.collect(prefix + ".b_proj", out);
    c_proj.collect(prefix + ".c_proj", out);
    out.emplace_back(prefix + ".a_log", a_log);
    out.emplace_back(prefix + ".d_skip", d_skip);
    out_proj.collect(prefix + ".out_proj", out);
  }
};

}  // namespace dmseg
