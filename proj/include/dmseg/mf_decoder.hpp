#pragma once

#include <string>
#include <vector>

#include "dmseg/qsm_encoder.hpp"
#include "dmseg/resample.hpp"

// Multi-scale fusion Mamba decoder and the assembled segmentation network.
//
// Scales (relative to the input): F2 = 1/2, F3 = 1/4, F4 = 1/8. E4 (1/16)
// only enters through build_f4. Up-resampling to the F2 grid expands
// channels with a 1x1x1 projection and rearranges with depth_to_space;
// down-resampling to the F4 grid rearranges with space_to_depth and then
// projects back to C_d channels.
namespace dmseg {

struct DecoderConfig {
  index_t channels = 48;  // C_d
  index_t num_classes = 2;
  // Adds the fused context back onto F2/F3/F4 (disable for path ablation).
  bool inject_context = true;
};

template <typename T>
struct FusionTensors {
  Tensor<T> f2, f3, f4;
  Tensor<T> up2, up3, up4;
  Tensor<T> down2, down3, down4;
  Tensor<T> fu, fd;
  Tensor<T> fu1, fu2;
  Tensor<T> ff;
  Tensor<T> logits;
};

template <typename T>
struct Decoder {
  DecoderConfig config;
  ConvNormRelu<T> f2_proj, f3_proj;
  ConvTranspose3d<T> f4_up;
  ConvNormRelu<T> f4_fuse;

  Conv3d<T> up2, up3, up4;
  Conv3d<T> down2, down3, down4;
  ConvNormRelu<T> fuse_u, fuse_d;

  ConvNormRelu<T> u1_first, u1_second;  // two stride-2 3x3x3 convs
  ConvNormRelu<T> u2_down;               // stride-2 conv before rearrangement
  Conv3d<T> u2_proj;
  ConvNormRelu<T> mix;
  QsmBlock<T> context;
  ConvTranspose3d<T> ff_up;
  InstanceNorm<T> ff_up_norm;
  ConvTranspose3d<T> ff_out;

  Conv3d<T> inject2, inject3, inject4;

  Conv3d<T> pred_up3, pred_up4;
  ConvNormRelu<T> pred_fuse;
  ConvTranspose3d<T> final_up;
  InstanceNorm<T> final_norm;
  Conv3d<T> head;

  Decoder() = default;
  Decoder(const DecoderConfig& cfg, const EncoderConfig& enc, Rng& rng) : config(cfg) {
    if (enc.stages() != 4) throw InvalidInput("decoder: needs a four-stage encoder");
    const index_t dc = cfg.channels, c0 = enc.base_channels;
    const auto pw = ConvSpec::cube(1);
    const auto up_spec = ConvSpec::cube(2, 2, 0);
    const auto down_spec = ConvSpec::cube(3, 2, 1);
    f2_proj = ConvNormRelu<T>(2 * c0, dc, pw, rng);
    f3_proj = ConvNormRelu<T>(4 * c0, dc, pw, rng);
    f4_up = ConvTranspose3d<T>(16 * c0, 8 * c0, up_spec, rng);
    f4_fuse = ConvNormRelu<T>(16 * c0, dc, pw, rng);

    up2 = Conv3d<T>(dc, dc, pw, rng);
    up3 = Conv3d<T>(dc, 8 * dc, pw, rng);
    up4 = Conv3d<T>(dc, 64 * dc, pw, rng);
    down2 = Conv3d<T>(64 * dc, dc, pw, rng);
    down3 = Conv3d<T>(8 * dc, dc, pw, rng);
    down4 = Conv3d<T>(dc, dc, pw, rng);
    fuse_u = ConvNormRelu<T>(3 * dc, dc, pw, rng);
    fuse_d = ConvNormRelu<T>(3 * dc, dc, pw, rng);

    u1_first = ConvNormRelu<T>(dc, dc, down_spec, rng);
    u1_second = ConvNormRelu<T>(dc, dc, down_spec, rng);
    u2_down = ConvNormRelu<T>(dc, dc, down_spec, rng);
    u2_proj = Conv3d<T>(8 * dc, dc, pw, rng);
    mix = ConvNormRelu<T>(3 * dc, dc, pw, rng);
    context = QsmBlock<T>(dc, enc.qsm, rng);
    ff_up = ConvTranspose3d<T>(dc, dc, up_spec, rng);
    ff_up_norm = InstanceNorm<T>(dc);
    ff_out = ConvTranspose3d<T>(dc, dc, up_spec, rng);

    inject2 = Conv3d<T>(dc, dc, pw, rng, false);
    inject3 = Conv3d<T>(8 * dc, dc, pw, rng, false);
    inject4 = Conv3d<T>(64 * dc, dc, pw, rng, false);

    pred_up3 = Conv3d<T>(dc, 8 * dc, pw, rng);
    pred_up4 = Conv3d<T>(dc, 64 * dc, pw, rng);
    pred_fuse = ConvNormRelu<T>(4 * dc, dc, ConvSpec::cube(3, 1, 1), rng);
    final_up = ConvTranspose3d<T>(dc, dc, up_spec, rng);
    final_norm = InstanceNorm<T>(dc);
    // Zero-initialized classifier: the untrained network predicts a uniform
    // distribution, so the first loss is exactly ln K.
    head = Conv3d<T>(dc + c0, cfg.num_classes, pw, rng);
    head.zero();
  }

  // E4 upsampled x2, concatenated with E3, fused to C_d channels at 1/8.
  Tensor<T> build_f4(const Tensor<T>& e3, const Tensor<T>& e4) const {
    if (e3.rank() != 5 || e4.rank() != 5 || e3.dim(2) != 2 * e4.dim(2) || e3.dim(3) != 2 * e4.dim(3) ||
        e3.dim(4) != 2 * e4.dim(4)) {
      throw InvalidInput("build_f4: E4 " + to_string(e4.shape()) + " must be half of E3 " + to_string(e3.shape()));
    }
    return f4_fuse(concat<T>({e3, f4_up(e4)}, 1));
  }

  // F_u (F2 grid) and F_d (F4 grid) from the three projected scales.
  void resample_all(FusionTensors<T>& t) const {
    const auto& f2 = t.f2;
    if (f2.dim(2) != 2 * t.f3.dim(2) || f2.dim(2) != 4 * t.f4.dim(2) || f2.dim(3) != 4 * t.f4.dim(3) ||
        f2.dim(4) != 4 * t.f4.dim(4) || f2.dim(3) != 2 * t.f3.dim(3) || f2.dim(4) != 2 * t.f3.dim(4)) {
      throw InvalidInput("resample_all: F2/F3/F4 must sit at 1x, 1/2x, 1/4x of F2");
    }
    t.up2 = up2(f2);
    t.up3 = depth_to_space_3d(up3(t.f3), 2);
    t.up4 = depth_to_space_3d(up4(t.f4), 4);
    t.down2 = down2(space_to_depth_3d(f2, 4));
    t.down3 = down3(space_to_depth_3d(t.f3, 2));
    t.down4 = down4(t.f4);
    t.fu = fuse_u(concat<T>({t.up2, t.up3, t.up4}, 1));
    t.fd = fuse_d(concat<T>({t.down2, t.down3, t.down4}, 1));
  }

  // F_u1: two stride-2 convs; F_u2: one stride-2 conv + space_to_depth + projection.
  // Both join F_d at 1/4 of F_u's resolution, go through a QSMamba block and
  // are restored to F_u's resolution by two stride-2 transposed convs.
  void mmsfue(FusionTensors<T>& t) const {
    if (t.fu.dim(2) != 4 * t.fd.dim(2) || t.fu.dim(3) != 4 * t.fd.dim(3) || t.fu.dim(4) != 4 * t.fd.dim(4)) {
      throw InvalidInput("mmsfue: F_d must be a quarter of F_u's resolution");
    }
    t.fu1 = u1_second(u1_first(t.fu));
    t.fu2 = u2_proj(space_to_depth_3d(u2_down(t.fu), 2));
    const auto mixed = mix(concat<T>({t.fd, t.fu1, t.fu2}, 1));
    const auto ctx = context(mixed);
    t.ff = ff_out(relu(ff_up_norm(ff_up(ctx))));
  }

  FusionTensors<T> forward_detailed(const FeaturePyramid<T>& pyramid) const {
    if (pyramid.levels.size() != 4) throw InvalidInput("decoder: pyramid must have four levels");
    FusionTensors<T> t;
    t.f2 = f2_proj(pyramid.levels[0]);
    t.f3 = f3_proj(pyramid.levels[1]);
    t.f4 = build_f4(pyramid.levels[2], pyramid.levels[3]);
    resample_all(t);
    mmsfue(t);

    Tensor<T> f2c = t.f2, f3c = t.f3, f4c = t.f4;
    if (config.inject_context) {
      f2c = add(t.f2, inject2(t.ff));
      f3c = add(t.f3, inject3(space_to_depth_3d(t.ff, 2)));
      f4c = add(t.f4, inject4(space_to_depth_3d(t.ff, 4)));
    }
    const auto u3 = depth_to_space_3d(pred_up3(f3c), 2);
    const auto u4 = depth_to_space_3d(pred_up4(f4c), 4);
    const auto fused = pred_fuse(concat<T>({f2c, u3, u4, t.ff}, 1));
    const auto full = relu(final_norm(final_up(fused)));
    t.logits = head(concat<T>({full, pyramid.stem}, 1));
    return t;
  }

  Tensor<T> operator()(const FeaturePyramid<T>& pyramid) const { return forward_detailed(pyramid).logits; }

  void collect(const std::string& prefix, NamedParams<T>& out) const {
    f2_proj.collect(prefix + ".f2_proj", out);
    f3_proj.collect(prefix + ".f3_proj", out);
    f4_up.collect(prefix + ".f4_up", out);
    f4_fuse.collect(prefix + ".f4_fuse", out);
    up2.collect(prefix + ".up2", out);
    up3.collect(prefix + ".up3", out);
    up4.collect(prefix + ".up4", out);
    down2.collect(prefix + ".down2", out);
    down3.collect(prefix + ".down3", out);
    down4.collect(prefix + ".down4", out);
    fuse_u.collect(prefix + ".fuse_u", out);
    fuse_d.collect(prefix + ".fuse_d", out);
    u1_first.collect(prefix + ".u1_first", out);
    u1_second.collect(prefix + ".u1_second", out);
    u2_down.collect(prefix + ".u2_down", out);
    u2_proj.collect(prefix + ".u2_proj", out);
    mix.collect(prefix + ".mix", out);
    context.collect(prefix + ".context", out);
    ff_up.collect(prefix + ".ff_up", out);
    ff_up_norm.collect(prefix + ".ff_up_norm", out);
    ff_out.collect(prefix + ".ff_out", out);
    inject2.collect(prefix + ".inject2", out);
    inject3.collect(prefix + ".inject3", out);
    inject4.collect(prefix + ".inject4", out);
    pred_up3.collect(prefix + ".pred_up3", out);
    pred_up4.collect(prefix + ".pred_up4", out);
    pred_fuse.collect(prefix + ".pred_fuse", out);
    final_up.collect(prefix + ".final_up", out);
    final_norm.collect(prefix + ".final_norm", out);
    head.collect(prefix + ".head", out);
  }
};

struct ModelConfig {
  EncoderConfig encoder;
  DecoderConfig decoder;
};

template <typename T>
struct DmSegNet {
  ModelConfig config;
  Encoder<T> encoder;
  Decoder<T> decoder;

  DmSegNet() = default;
  DmSegNet(const ModelConfig& cfg, Rng& rng)
      : config(cfg), encoder(cfg.encoder, rng), decoder(cfg.decoder, cfg.encoder, rng) {}
  DmSegNet(const ModelConfig& cfg, std::uint64_t seed) : DmSegNet(init_with_seed(cfg, seed)) {}

  Tensor<T> operator()(const Tensor<T>& volume) const { return decoder(encoder(volume)); }
  FusionTensors<T> forward_detailed(const Tensor<T>& volume) const {
    return decoder.forward_detailed(encoder(volume));
  }

  NamedParams<T> parameters() const {
    NamedParams<T> out;
    encoder.collect("encoder", out);
    decoder.collect("decoder", out);
    return out;
  }

 private:
  static DmSegNet init_with_seed(const ModelConfig& cfg, std::uint64_t seed) {
    Rng rng(seed);
    return DmSegNet(cfg, rng);
  }
};

}  // namespace dmseg
