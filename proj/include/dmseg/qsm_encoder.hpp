#pragma once

#include <array>
#include <optional>
#include <string>
#include <utility>
#include <vector>

#include "dmseg/gsc.hpp"
#include "dmseg/mamba.hpp"
#include "dmseg/scan_order.hpp"

namespace dmseg {

enum class QsmFusion { Sum, ConcatGate };

struct QsmConfig {
  // false runs only the Forward branch (single-direction ablation).
  bool quad_directional = true;
  QsmFusion fusion = QsmFusion::Sum;
  MambaConfig mamba;
};

// Quadri-directional spatial Mamba: one Mamba block per scan order, each run
// on the volume flattened in its order and scattered back, then fused.
template <typename T>
struct QsmBlock {
  QsmConfig config;
  std::vector<std::pair<ScanOrder, MambaBlock<T>>> branches;
  std::optional<Conv3d<T>> fuse;  // ConcatGate only: 4C -> 2C, value * silu(gate)

  QsmBlock() = default;
  QsmBlock(index_t channels, const QsmConfig& cfg, Rng& rng) : config(cfg) {
    if (cfg.quad_directional) {
      for (auto order : kAllScanOrders) branches.emplace_back(order, MambaBlock<T>(channels, cfg.mamba, rng));
    } else {
      branches.emplace_back(ScanOrder::Forward, MambaBlock<T>(channels, cfg.mamba, rng));
    }
    if (cfg.fusion == QsmFusion::ConcatGate) {
      const auto n = static_cast<index_t>(branches.size());
      fuse = Conv3d<T>(n * channels, 2 * channels, ConvSpec::cube(1), rng);
    }
  }

  // unflatten(mamba_o(flatten(z, o)), o) for branch i.
  Tensor<T> branch(std::size_t i, const Tensor<T>& z) const {
    const auto& [order, block] = branches.at(i);
    return unflatten(block(flatten(z, order)), order, volume_dims(z));
  }

  Tensor<T> operator()(const Tensor<T>& z) const {
    if (config.fusion == QsmFusion::Sum) {
      Tensor<T> out = branch(0, z);
      for (std::size_t i = 1; i < branches.size(); ++i) out = add(out, branch(i, z));
      return out;
    }
    std::vector<Tensor<T>> parts;
    for (std::size_t i = 0; i < branches.size(); ++i) parts.push_back(branch(i, z));
    const auto fused = (*fuse)(concat(parts, 1));
    const index_t C = z.dim(1);
    return mul(narrow(fused, 1, 0, C), silu(narrow(fused, 1, C, C)));
  }

  void collect(const std::string& prefix, NamedParams<T>& out) const {
    for (const auto& [order, block] : branches) block.collect(prefix + "." + std::string(to_string(order)), out);
    if (fuse) fuse->collect(prefix + ".fuse", out);
  }
};

struct EncoderConfig {
  index_t in_channels = 1;
  index_t base_channels = 24;
  std::vector<index_t> blocks_per_stage{1, 1, 1, 1};
  bool gsc_enabled = true;
  GscConfig gsc;
  QsmConfig qsm;

  index_t stages() const { return static_cast<index_t>(blocks_per_stage.size()); }
  index_t stage_channels(index_t s) const { return base_channels << s; }
  index_t divisor() const { return index_t{1} << stages(); }
};

// stem at full resolution; levels[s] (E1..E4) at 1/2^(s+1) with C0*2^(s+1) channels.
template <typename T>
struct FeaturePyramid {
  Tensor<T> stem;
  std::vector<Tensor<T>> levels;
};

// GSC -> QSMamba x k (the skip output), then a stride-2 conv doubling
// channels with IN + ReLU (the downsampled output).
template <typename T>
struct EncoderStage {
  std::optional<Gsc<T>> gsc;
  std::vector<QsmBlock<T>> blocks;
  ConvNormRelu<T> down;

  EncoderStage() = default;
  EncoderStage(index_t channels, index_t num_blocks, const EncoderConfig& cfg, Rng& rng) {
    if (cfg.gsc_enabled) gsc = Gsc<T>(channels, cfg.gsc, rng);
    for (index_t b = 0; b < num_blocks; ++b) blocks.emplace_back(channels, cfg.qsm, rng);
    down = ConvNormRelu<T>(channels, 2 * channels, ConvSpec::cube(3, 2, 1), rng);
  }

  std::pair<Tensor<T>, Tensor<T>> operator()(const Tensor<T>& x) const {
    if (x.rank() != 5 || x.dim(2) % 2 || x.dim(3) % 2 || x.dim(4) % 2) {
      throw InvalidInput("encoder_stage: spatial dims must be even, got " + to_string(x.shape()));
    }
    Tensor<T> skip = gsc ? (*gsc)(x) : x;
    for (const auto& block : blocks) skip = block(skip);
    auto lowered = down(skip);
    return {skip, lowered};
  }

  void collect(const std::string& prefix, NamedParams<T>& out) const {
    if (gsc) gsc->collect(prefix + ".gsc", out);
    for (std::size_t b = 0; b < blocks.size(); ++b) blocks[b].collect(prefix + ".qsm" + std::to_string(b), out);
    down.collect(prefix + ".down", out);
  }
};

template <typename T>
struct Encoder {
  EncoderConfig config;
  ConvNormRelu<T> stem;
  std::vector<EncoderStage<T>> stages;

  Encoder() = default;
  Encoder(const EncoderConfig& cfg, Rng& rng) : config(cfg) {
    if (cfg.in_channels <= 0 || cfg.base_channels <= 0 || cfg.blocks_per_stage.empty()) {
      throw InvalidInput("encoder: channels and stage list must be positive/non-empty");
    }
    stem = ConvNormRelu<T>(cfg.in_channels, cfg.base_channels, ConvSpec::cube(3, 1, 1), rng);
    for (index_t s = 0; s < cfg.stages(); ++s) {
      stages.emplace_back(cfg.stage_channels(s), cfg.blocks_per_stage[static_cast<std::size_t>(s)], cfg, rng);
    }
  }

  void check_input(const Tensor<T>& volume) const {
    if (volume.rank() != 5 || volume.dim(1) != config.in_channels) {
      throw InvalidInput("encoder: expected [N," + std::to_string(config.in_channels) + ",D,H,W], got " +
                         to_string(volume.shape()));
    }
    const index_t div = config.divisor();
    for (std::size_t a = 2; a < 5; ++a) {
      if (volume.dim(a) % div) {
        const index_t padded = (volume.dim(a) + div - 1) / div * div;
        throw InvalidInput("encoder: spatial dim " + std::to_string(volume.dim(a)) + " is not divisible by " +
                           std::to_string(div) + "; pad to " + std::to_string(padded));
      }
    }
  }

  FeaturePyramid<T> operator()(const Tensor<T>& volume) const {
    check_input(volume);
    FeaturePyramid<T> pyramid;
    pyramid.stem = stem(volume);
    Tensor<T> x = pyramid.stem;
    for (const auto& stage : stages) {
      x = stage(x).second;
      pyramid.levels.push_back(x);
    }
    return pyramid;
  }

  void collect(const std::string& prefix, NamedParams<T>& out) const {
    stem.collect(prefix + ".stem", out);
    for (std::size_t s = 0; s < stages.size(); ++s) stages[s].collect(prefix + ".stage" + std::to_string(s), out);
  }
};

}  // namespace dmseg
