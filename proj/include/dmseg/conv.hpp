#pragma once

#include <algorithm>
#include <array>
#include <string>
#include <utility>
#include <vector>

#include "dmseg/gemm.hpp"
#include "dmseg/tensor.hpp"

namespace dmseg {

using Triple = std::array<index_t, 3>;

struct ConvSpec {
  Triple kernel{1, 1, 1};
  Triple stride{1, 1, 1};
  Triple padding{0, 0, 0};
  index_t groups = 1;

  static ConvSpec cube(index_t k, index_t stride = 1, index_t padding = 0, index_t groups = 1) {
    return ConvSpec{{k, k, k}, {stride, stride, stride}, {padding, padding, padding}, groups};
  }
  index_t kernel_volume() const { return kernel[0] * kernel[1] * kernel[2]; }
  bool is_pointwise() const {
    return kernel == Triple{1, 1, 1} && stride == Triple{1, 1, 1} && padding == Triple{0, 0, 0};
  }
};

// floor((in + 2p - k)/s) + 1, rejecting specs that leave no output.
inline Triple conv_output_dims(const Triple& in, const ConvSpec& spec) {
  Triple out{};
  for (int a = 0; a < 3; ++a) {
    if (spec.kernel[a] <= 0 || spec.stride[a] <= 0 || spec.padding[a] < 0) {
      throw InvalidSpec("conv: kernel and stride must be positive, padding non-negative");
    }
    const index_t span = in[a] + 2 * spec.padding[a] - spec.kernel[a];
    if (span < 0) throw InvalidSpec("conv: padded input smaller than kernel on axis " + std::to_string(a));
    out[a] = span / spec.stride[a] + 1;
  }
  return out;
}

// (in - 1)s - 2p + k
inline Triple conv_transpose_output_dims(const Triple& in, const ConvSpec& spec) {
  Triple out{};
  for (int a = 0; a < 3; ++a) {
    if (spec.kernel[a] <= 0 || spec.stride[a] <= 0 || spec.padding[a] < 0) {
      throw InvalidSpec("transposed conv: kernel and stride must be positive, padding non-negative");
    }
    out[a] = (in[a] - 1) * spec.stride[a] - 2 * spec.padding[a] + spec.kernel[a];
    if (out[a] < 1) throw InvalidSpec("transposed conv: non-positive output dim on axis " + std::to_string(a));
  }
  return out;
}

namespace detail {

// Sliding-window geometry of a regular convolution from a "big" grid of
// `channels` x `in` onto the `out` grid.
struct ConvGeometry {
  index_t channels;
  Triple in;
  Triple out;
  ConvSpec spec;

  index_t in_volume() const { return in[0] * in[1] * in[2]; }
  index_t out_volume() const { return out[0] * out[1] * out[2]; }
  index_t rows() const { return channels * spec.kernel_volume(); }
};

// Output positions [lo, hi) along w whose tap kw lands inside [0, W).
inline std::pair<index_t, index_t> valid_w_range(index_t OW, index_t W, index_t sw, index_t pw, index_t kw) {
  index_t lo = 0;
  if (pw - kw > 0) lo = (pw - kw + sw - 1) / sw;
  index_t hi = W - 1 + pw - kw < 0 ? 0 : (W - 1 + pw - kw) / sw + 1;
  hi = std::min(hi, OW);
  return {std::min(lo, hi), hi};
}

// Visits the output columns [p0, p1) of every (c, kd, kh, kw) row as runs
// along w: fn(row, column offset, src row pointer or null, ow_begin, ow_end, id/ih-valid).
template <typename Fn>
void for_each_run(const ConvGeometry& g, index_t p0, index_t p1, Fn&& fn) {
  const auto& [kd_n, kh_n, kw_n] = g.spec.kernel;
  const auto& [sd, sh, sw] = g.spec.stride;
  const auto& [pd, ph, pw] = g.spec.padding;
  const auto& [D, H, W] = g.in;
  const auto& [OD, OH, OW] = g.out;
  (void)OD;
  index_t row = 0;
  for (index_t c = 0; c < g.channels; ++c)
    for (index_t kd = 0; kd < kd_n; ++kd)
      for (index_t kh = 0; kh < kh_n; ++kh)
        for (index_t kw = 0; kw < kw_n; ++kw, ++row) {
          index_t p = p0;
          while (p < p1) {
            const index_t ow0 = p % OW;
            const index_t oh = (p / OW) % OH;
            const index_t od = p / (OW * OH);
            const index_t ow1 = std::min(OW, ow0 + (p1 - p));
            const index_t id = od * sd - pd + kd;
            const index_t ih = oh * sh - ph + kh;
            const bool inside = id >= 0 && id < D && ih >= 0 && ih < H;
            const index_t offset = (c * D + (inside ? id : 0)) * H * W + (inside ? ih : 0) * W;
            fn(row, p - p0 - ow0, offset, ow0, ow1, inside, kw);
            p += ow1 - ow0;
          }
        }
}

// col[(c,kd,kh,kw), p - p0] = src[c, od*s-p+kd, ...] (0 outside the grid) for
// output positions p in [p0, p1); `ld` is the column stride of `col`.
template <typename T>
void im2col_range(const T* src, const ConvGeometry& g, index_t p0, index_t p1, T* col, index_t ld) {
  const index_t sw = g.spec.stride[2], pw = g.spec.padding[2], W = g.in[2], OW = g.out[2];
  for_each_run(g, p0, p1, [&](index_t row, index_t base, index_t offset, index_t ow0, index_t ow1, bool inside,
                              index_t kw) {
    T* d = col + row * ld + base;
    if (!inside) {
      std::fill(d + ow0, d + ow1, T{0});
      return;
    }
    const T* s = src + offset;
    auto [lo, hi] = valid_w_range(OW, W, sw, pw, kw);
    lo = std::clamp(lo, ow0, ow1);
    hi = std::clamp(hi, lo, ow1);
    std::fill(d + ow0, d + lo, T{0});
    if (sw == 1) {
      std::copy(s + lo - pw + kw, s + hi - pw + kw, d + lo);
    } else {
      for (index_t ow = lo; ow < hi; ++ow) d[ow] = s[ow * sw - pw + kw];
    }
    std::fill(d + hi, d + ow1, T{0});
  });
}

// Adjoint of im2col_range: scatter-adds the columns back onto the grid.
template <typename T>
void col2im_range_add(const T* col, index_t ld, const ConvGeometry& g, index_t p0, index_t p1, T* dst) {
  const index_t sw = g.spec.stride[2], pw = g.spec.padding[2], W = g.in[2], OW = g.out[2];
  for_each_run(g, p0, p1, [&](index_t row, index_t base, index_t offset, index_t ow0, index_t ow1, bool inside,
                              index_t kw) {
    if (!inside) return;
    const T* s = col + row * ld + base;
    T* d = dst + offset;
    auto [lo, hi] = valid_w_range(OW, W, sw, pw, kw);
    lo = std::clamp(lo, ow0, ow1);
    hi = std::clamp(hi, lo, ow1);
    if (sw == 1) {
      T* dd = d - pw + kw;
#pragma GCC ivdep
      for (index_t ow = lo; ow < hi; ++ow) dd[ow] += s[ow];
    } else {
      for (index_t ow = lo; ow < hi; ++ow) d[ow * sw - pw + kw] += s[ow];
    }
  });
}

template <typename T>
void im2col(const T* src, const ConvGeometry& g, T* col) {
  im2col_range(src, g, 0, g.out_volume(), col, g.out_volume());
}

template <typename T>
void col2im_add(const T* col, const ConvGeometry& g, T* dst) {
  col2im_range_add(col, g.out_volume(), g, 0, g.out_volume(), dst);
}

// Columns per block so that a rows x block scratch matrix stays in L2.
template <typename T>
index_t column_block(index_t rows, index_t total) {
  constexpr index_t NR = 2 * gemm::detail::kLanes<T>;
  const index_t budget = (index_t{512} << 10) / static_cast<index_t>(sizeof(T));
  const index_t block = std::max(NR, budget / std::max<index_t>(rows, 1) / NR * NR);
  return std::min(block, total);
}

template <typename T>
void require_volume(const Tensor<T>& x, const char* op) {
  if (x.rank() != 5) throw InvalidInput(std::string(op) + ": expected [N,C,D,H,W], got " + to_string(x.shape()));
}

}  // namespace detail

// Direct cross-correlation (no kernel flip). weight: [outC, inC/groups, kd, kh, kw].
template <typename T>
Tensor<T> conv3d(const Tensor<T>& input, const Tensor<T>& weight, const Tensor<T>* bias, const ConvSpec& spec) {
  detail::require_volume(input, "conv3d");
  const index_t N = input.dim(0), C = input.dim(1);
  if (spec.groups <= 0) throw InvalidSpec("conv3d: groups must be positive");
  if (weight.rank() != 5 || weight.dim(2) != spec.kernel[0] || weight.dim(3) != spec.kernel[1] ||
      weight.dim(4) != spec.kernel[2]) {
    throw InvalidInput("conv3d: weight " + to_string(weight.shape()) + " does not match kernel spec");
  }
  const index_t OC = weight.dim(0), G = spec.groups;
  if (C % G != 0 || OC % G != 0) throw InvalidSpec("conv3d: groups must divide input and output channels");
  const index_t Cg = C / G, OCg = OC / G;
  if (weight.dim(1) != Cg) {
    throw InvalidInput("conv3d: weight expects " + std::to_string(weight.dim(1)) + " input channels per group, input has " +
                       std::to_string(Cg));
  }
  if (bias && (bias->rank() != 1 || bias->dim(0) != OC)) throw InvalidInput("conv3d: bias shape");
  const Triple in{input.dim(2), input.dim(3), input.dim(4)};
  const Triple out = conv_output_dims(in, spec);
  const detail::ConvGeometry geom{Cg, in, out, spec};
  const index_t P = geom.out_volume(), Pin = geom.in_volume(), K = geom.rows();
  const bool pointwise = spec.is_pointwise();

  const index_t NB = detail::column_block<T>(K, P);
  std::vector<T> result(static_cast<std::size_t>(N * OC * P), T{0});
  std::vector<T> col(pointwise ? 0 : static_cast<std::size_t>(K * NB));
  const T* x = input.values().data();
  const T* w = weight.values().data();
  for (index_t n = 0; n < N; ++n)
    for (index_t g = 0; g < G; ++g) {
      const T* xg = x + (n * C + g * Cg) * Pin;
      T* yg = result.data() + (n * OC + g * OCg) * P;
      if (bias)
        for (index_t oc = 0; oc < OCg; ++oc) std::fill_n(yg + oc * P, P, (*bias)[g * OCg + oc]);
      if (pointwise) {
        gemm::gemm_nn_acc(OCg, P, K, w + g * OCg * K, K, xg, P, yg, P);
        continue;
      }
      for (index_t p0 = 0; p0 < P; p0 += NB) {
        const index_t p1 = std::min(P, p0 + NB);
        detail::im2col_range(xg, geom, p0, p1, col.data(), NB);
        gemm::gemm_nn_acc(OCg, p1 - p0, K, w + g * OCg * K, K, col.data(), NB, yg + p0, P);
      }
    }

  auto xi = input.impl_ptr(), wi = weight.impl_ptr();
  auto bi = bias ? bias->impl_ptr() : nullptr;
  auto backward = [xi, wi, bi, geom, N, C, OC, G, Cg, OCg, P, Pin, K, NB, pointwise](const std::vector<T>& gy) {
    auto* gx = detail::grad_of(xi);
    auto* gw = detail::grad_of(wi);
    std::vector<T> col(pointwise ? 0 : static_cast<std::size_t>(K * NB));
    std::vector<T> dcol(pointwise ? 0 : static_cast<std::size_t>(K * NB));
    std::vector<T> colt(pointwise || !gw ? 0 : static_cast<std::size_t>(K * NB));
    for (index_t g = 0; g < G; ++g) {
      const T* wg = wi->data.data() + g * OCg * K;
      const auto wt = gemm::transpose(wg, OCg, K);
      for (index_t n = 0; n < N; ++n) {
        const T* xg = xi->data.data() + (n * C + g * Cg) * Pin;
        const T* gyg = gy.data() + (n * OC + g * OCg) * P;
        T* gxg = gx ? gx->data() + (n * C + g * Cg) * Pin : nullptr;
        if (pointwise) {
          if (gw) gemm::gemm_nt_acc(OCg, K, P, gyg, P, xg, P, gw->data() + g * OCg * K, K);
          if (gx) gemm::gemm_nn_acc(K, P, OCg, wt.data(), OCg, gyg, P, gxg, P);
          continue;
        }
        for (index_t p0 = 0; p0 < P; p0 += NB) {
          const index_t p1 = std::min(P, p0 + NB), len = p1 - p0;
          if (gw) {
            detail::im2col_range(xg, geom, p0, p1, col.data(), NB);
            gemm::transpose_into(col.data(), K, len, NB, colt.data(), K);
            gemm::gemm_nn_acc(OCg, K, len, gyg + p0, P, colt.data(), K, gw->data() + g * OCg * K, K);
          }
          if (gx) {
            std::fill(dcol.begin(), dcol.end(), T{0});
            gemm::gemm_nn_acc(K, len, OCg, wt.data(), OCg, gyg + p0, P, dcol.data(), NB);
            detail::col2im_range_add(dcol.data(), NB, geom, p0, p1, gxg);
          }
        }
      }
    }
    if (bi) {
      if (auto* gb = detail::grad_of(bi))
        for (index_t n = 0; n < N; ++n)
          for (index_t oc = 0; oc < OC; ++oc) {
            T s{0};
            const T* row = gy.data() + (n * OC + oc) * P;
            for (index_t p = 0; p < P; ++p) s += row[p];
            (*gb)[oc] += s;
          }
    }
  };
  Shape shape{N, OC, out[0], out[1], out[2]};
  if (bias) return detail::make_result(shape, std::move(result), "conv3d", {&input, &weight, bias}, backward);
  return detail::make_result(shape, std::move(result), "conv3d", {&input, &weight}, backward);
}

// Adjoint of conv3d: each input voxel scatters input * kernel into the
// output grid. weight: [inC, outC/groups, kd, kh, kw].
template <typename T>
Tensor<T> conv_transpose3d(const Tensor<T>& input, const Tensor<T>& weight, const Tensor<T>* bias,
                           const ConvSpec& spec) {
  detail::require_volume(input, "conv_transpose3d");
  const index_t N = input.dim(0), C = input.dim(1), G = spec.groups;
  if (G <= 0) throw InvalidSpec("conv_transpose3d: groups must be positive");
  if (weight.rank() != 5 || weight.dim(0) != C || weight.dim(2) != spec.kernel[0] ||
      weight.dim(3) != spec.kernel[1] || weight.dim(4) != spec.kernel[2]) {
    throw InvalidInput("conv_transpose3d: weight " + to_string(weight.shape()) + " does not match input " +
                       to_string(input.shape()) + " and kernel spec");
  }
  if (C % G != 0) throw InvalidSpec("conv_transpose3d: groups must divide input channels");
  const index_t Cg = C / G, OCg = weight.dim(1), OC = OCg * G;
  if (bias && (bias->rank() != 1 || bias->dim(0) != OC)) throw InvalidInput("conv_transpose3d: bias shape");
  const Triple in{input.dim(2), input.dim(3), input.dim(4)};
  const Triple out = conv_transpose_output_dims(in, spec);
  // Regular-conv geometry mapping the (large) output grid onto the input grid.
  const detail::ConvGeometry geom{OCg, out, in, spec};
  const index_t Pin = geom.out_volume(), Pout = geom.in_volume(), R = geom.rows();

  const index_t NB = detail::column_block<T>(R, Pin);
  std::vector<T> result(static_cast<std::size_t>(N * OC * Pout), T{0});
  std::vector<T> col(static_cast<std::size_t>(R * NB));
  const T* x = input.values().data();
  for (index_t g = 0; g < G; ++g) {
    const auto wt = gemm::transpose(weight.values().data() + g * Cg * R, Cg, R);
    for (index_t n = 0; n < N; ++n) {
      const T* xg = x + (n * C + g * Cg) * Pin;
      T* yg = result.data() + (n * OC + g * OCg) * Pout;
      for (index_t p0 = 0; p0 < Pin; p0 += NB) {
        const index_t p1 = std::min(Pin, p0 + NB);
        std::fill(col.begin(), col.end(), T{0});
        gemm::gemm_nn_acc(R, p1 - p0, Cg, wt.data(), Cg, xg + p0, Pin, col.data(), NB);
        detail::col2im_range_add(col.data(), NB, geom, p0, p1, yg);
      }
    }
  }
  if (bias)
    for (index_t n = 0; n < N; ++n)
      for (index_t oc = 0; oc < OC; ++oc) {
        T* row = result.data() + (n * OC + oc) * Pout;
        for (index_t p = 0; p < Pout; ++p) row[p] += (*bias)[oc];
      }

  auto xi = input.impl_ptr(), wi = weight.impl_ptr();
  auto bi = bias ? bias->impl_ptr() : nullptr;
  auto backward = [xi, wi, bi, geom, N, C, OC, G, Cg, OCg, Pin, Pout, R, NB](const std::vector<T>& gy) {
    auto* gx = detail::grad_of(xi);
    auto* gw = detail::grad_of(wi);
    std::vector<T> dcol(static_cast<std::size_t>(R * NB));
    std::vector<T> colt(gw ? static_cast<std::size_t>(R * NB) : 0);
    for (index_t g = 0; g < G; ++g) {
      const T* wg = wi->data.data() + g * Cg * R;
      for (index_t n = 0; n < N; ++n) {
        const T* gyg = gy.data() + (n * OC + g * OCg) * Pout;
        const T* xg = xi->data.data() + (n * C + g * Cg) * Pin;
        for (index_t p0 = 0; p0 < Pin; p0 += NB) {
          const index_t p1 = std::min(Pin, p0 + NB), len = p1 - p0;
          detail::im2col_range(gyg, geom, p0, p1, dcol.data(), NB);
          if (gx) gemm::gemm_nn_acc(Cg, len, R, wg, R, dcol.data(), NB, gx->data() + (n * C + g * Cg) * Pin + p0, Pin);
          if (gw) {
            gemm::transpose_into(dcol.data(), R, len, NB, colt.data(), R);
            gemm::gemm_nn_acc(Cg, R, len, xg + p0, Pin, colt.data(), R, gw->data() + g * Cg * R, R);
          }
        }
      }
    }
    if (bi) {
      if (auto* gb = detail::grad_of(bi))
        for (index_t n = 0; n < N; ++n)
          for (index_t oc = 0; oc < OC; ++oc) {
            T s{0};
            const T* row = gy.data() + (n * OC + oc) * Pout;
            for (index_t p = 0; p < Pout; ++p) s += row[p];
            (*gb)[oc] += s;
          }
    }
  };
  Shape shape{N, OC, out[0], out[1], out[2]};
  if (bias) return detail::make_result(shape, std::move(result), "conv_transpose3d", {&input, &weight, bias}, backward);
  return detail::make_result(shape, std::move(result), "conv_transpose3d", {&input, &weight}, backward);
}

}  // namespace dmseg
