#pragma once

#include <algorithm>
#include <vector>

#include "dmseg/tensor.hpp"

// Dense kernels behind convolution and linear layers. Every output element
// of gemm_nn_acc accumulates its K products in ascending k order, which keeps
// results bit-identical to a naive triple loop that starts from the same value.
namespace dmseg::gemm {

namespace detail {

template <typename T>
struct VecOf;
template <>
struct VecOf<float> {
  typedef float type __attribute__((vector_size(64)));
};
template <>
struct VecOf<double> {
  typedef double type __attribute__((vector_size(64)));
};
template <typename T>
using Vec = typename VecOf<T>::type;

template <typename T>
constexpr index_t kLanes = 64 / static_cast<index_t>(sizeof(T));

template <typename T>
inline Vec<T> load(const T* p) {
  Vec<T> v;
  __builtin_memcpy(&v, p, sizeof(v));
  return v;
}

template <typename T>
inline void store(T* p, const Vec<T>& v) {
  __builtin_memcpy(p, &v, sizeof(v));
}

// Rows x (2 vectors) tile of C, updated over the whole K range in registers.
template <typename T, int Rows>
void tile_nn(index_t K, const T* A, index_t lda, const T* B, index_t ldb, T* C, index_t ldc) {
  constexpr index_t V = kLanes<T>;
  Vec<T> acc0[Rows], acc1[Rows];
  for (int i = 0; i < Rows; ++i) {
    acc0[i] = load(C + i * ldc);
    acc1[i] = load(C + i * ldc + V);
  }
  for (index_t k = 0; k < K; ++k) {
    const Vec<T> b0 = load(B + k * ldb);
    const Vec<T> b1 = load(B + k * ldb + V);
    for (int i = 0; i < Rows; ++i) {
      const T a = A[i * lda + k];
      acc0[i] += a * b0;
      acc1[i] += a * b1;
    }
  }
  for (int i = 0; i < Rows; ++i) {
    store(C + i * ldc, acc0[i]);
    store(C + i * ldc + V, acc1[i]);
  }
}

template <typename T, int Rows>
void tile_rows(index_t rows, index_t K, const T* A, index_t lda, const T* B, index_t ldb, T* C, index_t ldc) {
  if constexpr (Rows > 1) {
    if (rows < Rows) return tile_rows<T, Rows - 1>(rows, K, A, lda, B, ldb, C, ldc);
  }
  tile_nn<T, Rows>(K, A, lda, B, ldb, C, ldc);
}

}  // namespace detail

// C[M,N] += A[M,K] * B[K,N], row-major with leading dimensions.
// With a long K the rows of B are far apart; a block of B columns is first
// copied into contiguous K x NR panels so the tile kernel streams through it.
template <typename T>
void gemm_nn_acc(index_t M, index_t N, index_t K, const T* A, index_t lda, const T* B, index_t ldb, T* C,
                 index_t ldc) {
  constexpr int MR = 8;
  constexpr index_t NR = 2 * detail::kLanes<T>;
  constexpr index_t NB = 16 * NR;
  const index_t full = N / NR * NR;
  if (K >= 32 && ldb > NB && full > 0) {
    std::vector<T> packed(static_cast<std::size_t>(K * std::min(NB, full)));
    for (index_t nb0 = 0; nb0 < full; nb0 += NB) {
      const index_t panels = std::min(NB, full - nb0) / NR;
      for (index_t k = 0; k < K; ++k)
        for (index_t j = 0; j < panels; ++j)
          std::copy_n(B + k * ldb + nb0 + j * NR, NR, packed.data() + (j * K + k) * NR);
      for (index_t j = 0; j < panels; ++j)
        for (index_t m0 = 0; m0 < M; m0 += MR) {
          detail::tile_rows<T, MR>(std::min<index_t>(MR, M - m0), K, A + m0 * lda, lda, packed.data() + j * K * NR,
                                   NR, C + m0 * ldc + nb0 + j * NR, ldc);
        }
    }
  } else {
    for (index_t n0 = 0; n0 < full; n0 += NR)
      for (index_t m0 = 0; m0 < M; m0 += MR) {
        detail::tile_rows<T, MR>(std::min<index_t>(MR, M - m0), K, A + m0 * lda, lda, B + n0, ldb,
                                 C + m0 * ldc + n0, ldc);
      }
  }
  const index_t n0 = full;
  if (n0 < N) {
    for (index_t m = 0; m < M; ++m) {
      T* c = C + m * ldc;
      for (index_t k = 0; k < K; ++k) {
        const T a = A[m * lda + k];
        const T* b = B + k * ldb;
#pragma GCC ivdep
        for (index_t n = n0; n < N; ++n) c[n] += a * b[n];
      }
    }
  }
}

template <typename T>
T dot(const T* a, const T* b, index_t n) {
  constexpr index_t L = 128 / static_cast<index_t>(sizeof(T));
  T acc[L] = {};
  index_t i = 0;
  for (; i + L <= n; i += L)
    for (index_t j = 0; j < L; ++j) acc[j] += a[i + j] * b[i + j];
  T s{0};
  for (index_t j = 0; j < L; ++j) s += acc[j];
  for (; i < n; ++i) s += a[i] * b[i];
  return s;
}

// C[M,N] += A[M,K] * B[N,K]^T. The reduction runs over K in chunks so both
// operands stay cache resident when K is long.
template <typename T>
void gemm_nt_acc(index_t M, index_t N, index_t K, const T* A, index_t lda, const T* B, index_t ldb, T* C,
                 index_t ldc) {
  constexpr index_t chunk = 1024;
  for (index_t k0 = 0; k0 < K; k0 += chunk) {
    const index_t len = std::min(chunk, K - k0);
    for (index_t m = 0; m < M; ++m)
      for (index_t n = 0; n < N; ++n) C[m * ldc + n] += dot(A + m * lda + k0, B + n * ldb + k0, len);
  }
}

// C[M,N] += A[K,M]^T * B[K,N]. Meant for small M x N (weight gradients of
// linear layers) and long K: C stays in L1 while rows of A and B stream by.
template <typename T>
void gemm_tn_acc(index_t M, index_t N, index_t K, const T* A, index_t lda, const T* B, index_t ldb, T* C,
                 index_t ldc) {
  for (index_t k = 0; k < K; ++k) {
    const T* a = A + k * lda;
    const T* b = B + k * ldb;
    for (index_t m = 0; m < M; ++m) {
      const T am = a[m];
      T* c = C + m * ldc;
#pragma GCC ivdep
      for (index_t n = 0; n < N; ++n) c[n] += am * b[n];
    }
  }
}

// out[c * ldo + r] = in[r * ldi + c] for a rows x cols block, tiled so both
// sides stay in cache.
template <typename T>
void transpose_into(const T* in, index_t rows, index_t cols, index_t ldi, T* out, index_t ldo) {
  constexpr index_t tile = 16;
  for (index_t r0 = 0; r0 < rows; r0 += tile)
    for (index_t c0 = 0; c0 < cols; c0 += tile) {
      const index_t r1 = std::min(rows, r0 + tile), c1 = std::min(cols, c0 + tile);
      for (index_t r = r0; r < r1; ++r)
        for (index_t c = c0; c < c1; ++c) out[c * ldo + r] = in[r * ldi + c];
    }
}

// out[cols, rows] = in[rows, cols]^T
template <typename T>
std::vector<T> transpose(const T* in, index_t rows, index_t cols) {
  std::vector<T> out(static_cast<std::size_t>(rows * cols));
  for (index_t r = 0; r < rows; ++r)
    for (index_t c = 0; c < cols; ++c) out[c * rows + r] = in[r * cols + c];
  return out;
}

}  // namespace dmseg::gemm
