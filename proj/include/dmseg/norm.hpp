#pragma once

#include <cmath>
#include <memory>
#include <vector>

#include "dmseg/tensor.hpp"

namespace dmseg {

inline constexpr double kInstanceNormEps = 1e-5;

// Per-(sample, channel) standardization over all voxels with population
// variance, then an optional per-channel affine map.
template <typename T>
Tensor<T> instance_norm(const Tensor<T>& input, T eps = T(kInstanceNormEps), const Tensor<T>* scale = nullptr,
                        const Tensor<T>* shift = nullptr) {
  if (input.rank() < 3) throw InvalidInput("instance_norm: expected [N,C,spatial...], got " + to_string(input.shape()));
  const index_t N = input.dim(0), C = input.dim(1), S = input.numel() / (N * C);
  if (scale && (scale->rank() != 1 || scale->dim(0) != C)) throw InvalidInput("instance_norm: scale shape");
  if (shift && (shift->rank() != 1 || shift->dim(0) != C)) throw InvalidInput("instance_norm: shift shape");
  auto xhat = std::make_shared<std::vector<T>>(input.values().size());
  auto inv_std = std::make_shared<std::vector<T>>(static_cast<std::size_t>(N * C));
  std::vector<T> out(input.values().size());
  const T* x = input.values().data();
  for (index_t nc = 0; nc < N * C; ++nc) {
    const index_t c = nc % C;
    const T* xs = x + nc * S;
    T total{0};
    for (index_t i = 0; i < S; ++i) total += xs[i];
    const T mu = total / static_cast<T>(S);
    T sq{0};
    for (index_t i = 0; i < S; ++i) sq += (xs[i] - mu) * (xs[i] - mu);
    const T inv = T{1} / std::sqrt(sq / static_cast<T>(S) + eps);
    (*inv_std)[nc] = inv;
    T* h = xhat->data() + nc * S;
    T* y = out.data() + nc * S;
    const T a = scale ? (*scale)[c] : T{1};
    const T b = shift ? (*shift)[c] : T{0};
    for (index_t i = 0; i < S; ++i) {
      h[i] = (xs[i] - mu) * inv;
      y[i] = scale || shift ? h[i] * a + b : h[i];
    }
  }
  auto xi = input.impl_ptr();
  auto si = scale ? scale->impl_ptr() : nullptr;
  auto ti = shift ? shift->impl_ptr() : nullptr;
  auto backward = [xi, si, ti, xhat, inv_std, N, C, S](const std::vector<T>& g) {
    auto* gx = detail::grad_of(xi);
    auto* gs = si ? detail::grad_of(si) : nullptr;
    auto* gt = ti ? detail::grad_of(ti) : nullptr;
    for (index_t nc = 0; nc < N * C; ++nc) {
      const index_t c = nc % C;
      const T* gy = g.data() + nc * S;
      const T* h = xhat->data() + nc * S;
      T sum_g{0}, sum_gh{0};
      for (index_t i = 0; i < S; ++i) {
        sum_g += gy[i];
        sum_gh += gy[i] * h[i];
      }
      if (gs) (*gs)[c] += sum_gh;
      if (gt) (*gt)[c] += sum_g;
      if (!gx) continue;
      const T a = si ? si->data[c] : T{1};
      const T inv = (*inv_std)[nc];
      const T mean_g = a * sum_g / static_cast<T>(S);
      const T mean_gh = a * sum_gh / static_cast<T>(S);
      T* dx = gx->data() + nc * S;
      for (index_t i = 0; i < S; ++i) dx[i] += inv * (a * gy[i] - mean_g - h[i] * mean_gh);
    }
  };
  if (scale && shift) return detail::make_result(input.shape(), std::move(out), "instance_norm", {&input, scale, shift}, backward);
  if (scale) return detail::make_result(input.shape(), std::move(out), "instance_norm", {&input, scale}, backward);
  if (shift) return detail::make_result(input.shape(), std::move(out), "instance_norm", {&input, shift}, backward);
  return detail::make_result(input.shape(), std::move(out), "instance_norm", {&input}, backward);
}

// x / sqrt(mean(x^2) + eps) * weight over the last dimension.
template <typename T>
Tensor<T> rms_norm(const Tensor<T>& input, const Tensor<T>& weight, T eps = T(1e-5)) {
  const index_t F = input.dim(input.rank() - 1);
  if (weight.rank() != 1 || weight.dim(0) != F) throw InvalidInput("rms_norm: weight shape");
  const index_t rows = input.numel() / F;
  auto inv = std::make_shared<std::vector<T>>(static_cast<std::size_t>(rows));
  std::vector<T> out(input.values().size());
  const T* x = input.values().data();
  const T* w = weight.values().data();
  for (index_t r = 0; r < rows; ++r) {
    T sq{0};
    for (index_t f = 0; f < F; ++f) sq += x[r * F + f] * x[r * F + f];
    const T s = T{1} / std::sqrt(sq / static_cast<T>(F) + eps);
    (*inv)[r] = s;
    for (index_t f = 0; f < F; ++f) out[r * F + f] = x[r * F + f] * s * w[f];
  }
  auto xi = input.impl_ptr(), wi = weight.impl_ptr();
  return detail::make_result(input.shape(), std::move(out), "rms_norm", {&input, &weight},
                             [xi, wi, inv, rows, F](const std::vector<T>& g) {
                               auto* gx = detail::grad_of(xi);
                               auto* gw = detail::grad_of(wi);
                               const T* x = xi->data.data();
                               const T* w = wi->data.data();
                               for (index_t r = 0; r < rows; ++r) {
                                 const T s = (*inv)[r];
                                 const T* xr = x + r * F;
                                 const T* gr = g.data() + r * F;
                                 T dot{0};
                                 for (index_t f = 0; f < F; ++f) {
                                   if (gw) (*gw)[f] += gr[f] * xr[f] * s;
                                   dot += gr[f] * w[f] * xr[f];
                                 }
                                 if (!gx) continue;
                                 const T k = dot * s * s * s / static_cast<T>(F);
                                 for (index_t f = 0; f < F; ++f) (*gx)[r * F + f] += gr[f] * w[f] * s - xr[f] * k;
                               }
                             });
}

}  // namespace dmseg
