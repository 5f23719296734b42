#pragma once

#include <bit>
#include <cmath>
#include <cstdint>
#include <type_traits>

namespace dmseg::math {

#define DMSEG_INLINE inline __attribute__((always_inline))

// Branch-free single-precision exp (Cephes polynomial), written so the
// compiler can vectorize loops that call it. Max relative error ~2 ulp.
DMSEG_INLINE float exp_fast(float x) {
  x = x < -87.3f ? -87.3f : x;
  x = x > 88.7f ? 88.7f : x;
  const float fx = std::floor(x * 1.44269504088896341f + 0.5f);
  float r = x - fx * 0.693359375f;
  r = r - fx * -2.12194440e-4f;
  float p = 1.9875691500e-4f;
  p = p * r + 1.3981999507e-3f;
  p = p * r + 8.3334519073e-3f;
  p = p * r + 4.1665795894e-2f;
  p = p * r + 1.6666665459e-1f;
  p = p * r + 5.0000001201e-1f;
  const float y = p * r * r + r + 1.0f;
  const std::int32_t n = static_cast<std::int32_t>(fx);
  const float scale = std::bit_cast<float>((n + 127) << 23);
  return y * scale;
}

// exp used inside kernels: the vectorizable approximation in single
// precision, libm in double (verification) precision.
template <typename T>
DMSEG_INLINE T exp(T x) {
  if constexpr (std::is_same_v<T, float>) {
    return exp_fast(x);
  } else {
    return std::exp(x);
  }
}

template <typename T>
DMSEG_INLINE T sigmoid(T x) {
  return T{1} / (T{1} + math::exp(-x));
}

template <typename T>
DMSEG_INLINE T silu(T x) {
  return x * sigmoid(x);
}

// log(1 + e^x) without overflow for large x.
template <typename T>
inline T softplus(T x) {
  return (x > T{0} ? x : T{0}) + std::log1p(std::exp(-std::fabs(x)));
}

}  // namespace dmseg::math
