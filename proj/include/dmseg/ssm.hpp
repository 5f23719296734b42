#pragma once

#include <memory>
#include <utility>
#include <vector>

#include "dmseg/math.hpp"
#include "dmseg/ops.hpp"

// Selective state-space recurrence (diagonal A, input-dependent delta, B, C):
//   h_t = exp(delta_t * A) . h_{t-1} + (delta_t * B_t) x_t
//   y_t = <C_t, h_t> + D . x_t
namespace dmseg {

// Zero-order hold on A, Euler step on B: Abar = exp(delta*A), Bbar = delta*B.
// delta [L, E], A [E, S], B [L, S] -> Abar, Bbar [L, E, S].
template <typename T>
std::pair<Tensor<T>, Tensor<T>> discretize(const Tensor<T>& delta, const Tensor<T>& A, const Tensor<T>& B) {
  if (delta.rank() != 2 || A.rank() != 2 || B.rank() != 2 || delta.dim(1) != A.dim(0) || B.dim(0) != delta.dim(0) ||
      B.dim(1) != A.dim(1)) {
    throw InvalidInput("discretize: expected delta [L,E], A [E,S], B [L,S]");
  }
  const index_t L = delta.dim(0), E = delta.dim(1), S = A.dim(1);
  Tensor<T> abar(Shape{L, E, S}), bbar(Shape{L, E, S});
  for (index_t t = 0; t < L; ++t)
    for (index_t e = 0; e < E; ++e) {
      const T dt = delta[t * E + e];
      if (!(dt > T{0})) throw InvalidInput("discretize: delta must be positive");
      for (index_t s = 0; s < S; ++s) {
        abar[(t * E + e) * S + s] = std::exp(dt * A[e * S + s]);
        bbar[(t * E + e) * S + s] = dt * B[t * S + s];
      }
    }
  return {abar, bbar};
}

namespace detail {

// Inner loops run over E in fixed-width blocks so the compiler emits
// full-width vector code; Block = 1 is the generic fallback.
template <typename T>
constexpr index_t kScanBlock = 64 / static_cast<index_t>(sizeof(T));

// One sequence, production layout: the state is held as [S][E] so the
// inner loops run over E. `history` receives h_t for every t ([L][S][E]).
template <typename T, index_t Block>
void scan_sequence_blocked(index_t L, index_t E, index_t S, const T* x, const T* delta, const T* a_t,
                           const T* B, const T* C, const T* D, T* y, T* history) {
  std::vector<T> state(static_cast<std::size_t>(S * E), T{0});
  std::vector<T> sum(static_cast<std::size_t>(E));
  T* __restrict h = state.data();
  T* __restrict acc = sum.data();
  for (index_t t = 0; t < L; ++t) {
    const T* __restrict xt = x + t * E;
    const T* __restrict dt = delta + t * E;
    const T* bt = B + t * S;
    const T* ct = C + t * S;
    for (index_t e = 0; e < E; ++e) acc[e] = T{0};
    for (index_t s = 0; s < S; ++s) {
      const T bs = bt[s], cs = ct[s];
      for (index_t e0 = 0; e0 < E; e0 += Block) {
        T* __restrict hs = h + s * E + e0;
        const T* __restrict as = a_t + s * E + e0;
#pragma GCC ivdep
        for (index_t j = 0; j < Block; ++j) {
          const T d = dt[e0 + j];
          const T v = math::exp(d * as[j]) * hs[j] + (d * bs) * xt[e0 + j];
          hs[j] = v;
          acc[e0 + j] += cs * v;
        }
      }
    }
    T* __restrict yt = y + t * E;
    for (index_t e = 0; e < E; ++e) yt[e] = acc[e] + D[e] * xt[e];
    if (history) std::copy(h, h + S * E, history + t * S * E);
  }
}

template <typename T>
void scan_sequence(index_t L, index_t E, index_t S, const T* x, const T* delta, const T* a_t /*[S][E]*/,
                   const T* B, const T* C, const T* D, T* y, T* history) {
  if (E % kScanBlock<T> == 0) {
    scan_sequence_blocked<T, kScanBlock<T>>(L, E, S, x, delta, a_t, B, C, D, y, history);
  } else {
    scan_sequence_blocked<T, 1>(L, E, S, x, delta, a_t, B, C, D, y, history);
  }
}

template <typename T>
struct ScanGrads {
  T* x;
  T* delta;
  T* a_t;  // [S][E]
  T* B;
  T* C;
  T* D;
};

template <typename T, index_t Block>
void scan_sequence_backward_blocked(index_t L, index_t E, index_t S, const T* x, const T* delta, const T* a_t,
                                    const T* B, const T* C, const T* D, const T* history, const T* gy,
                                    ScanGrads<T> g) {
  std::vector<T> gh_buf(static_cast<std::size_t>(S * E), T{0});
  std::vector<T> zero_buf(static_cast<std::size_t>(S * E), T{0});
  std::vector<T> gdt_buf(static_cast<std::size_t>(E)), gxt_buf(static_cast<std::size_t>(E));
  T* __restrict gh = gh_buf.data();
  T* __restrict gdt = gdt_buf.data();
  T* __restrict gxt = gxt_buf.data();
  T* __restrict ga = g.a_t;
  for (index_t t = L - 1; t >= 0; --t) {
    const T* __restrict xt = x + t * E;
    const T* __restrict dt = delta + t * E;
    const T* bt = B + t * S;
    const T* ct = C + t * S;
    const T* __restrict gyt = gy + t * E;
    const T* __restrict ht = history + t * S * E;
    const T* __restrict hp = t > 0 ? history + (t - 1) * S * E : zero_buf.data();
    for (index_t e = 0; e < E; ++e) {
      gdt[e] = T{0};
      gxt[e] = gyt[e] * D[e];
      g.D[e] += gyt[e] * xt[e];
    }
    for (index_t s = 0; s < S; ++s) {
      const T bs = bt[s], cs = ct[s];
      T gc_lane[Block] = {}, gb_lane[Block] = {};
      for (index_t e0 = 0; e0 < E; e0 += Block) {
        T* __restrict ghs = gh + s * E + e0;
        T* __restrict gas = ga + s * E + e0;
        const T* __restrict as = a_t + s * E + e0;
        const T* __restrict hts = ht + s * E + e0;
        const T* __restrict hps = hp + s * E + e0;
#pragma GCC ivdep
        for (index_t j = 0; j < Block; ++j) {
          const T d = dt[e0 + j], xv = xt[e0 + j], gyv = gyt[e0 + j];
          gc_lane[j] += gyv * hts[j];
          const T gv = ghs[j] + gyv * cs;
          const T da = math::exp(d * as[j]);
          const T g_da = gv * hps[j] * da;
          gdt[e0 + j] += g_da * as[j] + gv * bs * xv;
          gas[j] += g_da * d;
          gb_lane[j] += gv * d * xv;
          gxt[e0 + j] += gv * d * bs;
          ghs[j] = gv * da;
        }
      }
      T gc{0}, gb{0};
      for (index_t j = 0; j < Block; ++j) {
        gc += gc_lane[j];
        gb += gb_lane[j];
      }
      g.C[t * S + s] += gc;
      g.B[t * S + s] += gb;
    }
    for (index_t e = 0; e < E; ++e) {
      g.delta[t * E + e] += gdt[e];
      g.x[t * E + e] += gxt[e];
    }
  }
}

template <typename T>
void scan_sequence_backward(index_t L, index_t E, index_t S, const T* x, const T* delta, const T* a_t, const T* B,
                            const T* C, const T* D, const T* history, const T* gy, ScanGrads<T> g) {
  if (E % kScanBlock<T> == 0) {
    scan_sequence_backward_blocked<T, kScanBlock<T>>(L, E, S, x, delta, a_t, B, C, D, history, gy, g);
  } else {
    scan_sequence_backward_blocked<T, 1>(L, E, S, x, delta, a_t, B, C, D, history, gy, g);
  }
}

}  // namespace detail

// Batched selective scan. x, delta: [N, L, E] (or [L, E]); A: [E, S];
// B, C: [N, L, S] (or [L, S]); D: [E]. Returns y shaped like x.
// One sequential pass per sequence, O(L*E*S) work.
template <typename T>
Tensor<T> selective_scan(const Tensor<T>& x, const Tensor<T>& delta, const Tensor<T>& A, const Tensor<T>& B,
                         const Tensor<T>& C, const Tensor<T>& D) {
  const bool batched = x.rank() == 3;
  if (!batched && x.rank() != 2) throw InvalidInput("selective_scan: x must be [N,L,E] or [L,E]");
  const index_t N = batched ? x.dim(0) : 1;
  const index_t L = x.dim(x.rank() - 2), E = x.dim(x.rank() - 1);
  if (A.rank() != 2 || A.dim(0) != E) throw InvalidInput("selective_scan: A must be [E,S]");
  const index_t S = A.dim(1);
  const Shape seq_state = batched ? Shape{N, L, S} : Shape{L, S};
  if (delta.shape() != x.shape() || B.shape() != seq_state || C.shape() != seq_state ||
      D.shape() != Shape{E}) {
    throw InvalidInput("selective_scan: inconsistent dims (x " + to_string(x.shape()) + ", delta " +
                       to_string(delta.shape()) + ", A " + to_string(A.shape()) + ", B " + to_string(B.shape()) +
                       ", C " + to_string(C.shape()) + ", D " + to_string(D.shape()) + ")");
  }
  const auto a_t = gemm::transpose(A.values().data(), E, S);
  const bool tracked = grad_enabled() && (x.requires_grad() || delta.requires_grad() || A.requires_grad() ||
                                          B.requires_grad() || C.requires_grad() || D.requires_grad());
  auto history = std::make_shared<std::vector<T>>(tracked ? static_cast<std::size_t>(N * L * S * E) : 0);
  std::vector<T> y(x.values().size());
  for (index_t n = 0; n < N; ++n) {
    detail::scan_sequence(L, E, S, x.values().data() + n * L * E, delta.values().data() + n * L * E, a_t.data(),
                          B.values().data() + n * L * S, C.values().data() + n * L * S, D.values().data(),
                          y.data() + n * L * E, tracked ? history->data() + n * L * S * E : nullptr);
  }
  auto xi = x.impl_ptr(), di = delta.impl_ptr(), ai = A.impl_ptr(), bi = B.impl_ptr(), ci = C.impl_ptr(),
       skip = D.impl_ptr();
  return detail::make_result(
      x.shape(), std::move(y), "selective_scan", {&x, &delta, &A, &B, &C, &D},
      [xi, di, ai, bi, ci, skip, history, N, L, E, S](const std::vector<T>& gy) {
        std::vector<T> gx(xi->data.size(), T{0}), gd(di->data.size(), T{0}), gat(static_cast<std::size_t>(S * E), T{0}),
            gb(bi->data.size(), T{0}), gc(ci->data.size(), T{0}), gskip(static_cast<std::size_t>(E), T{0});
        const auto a_t = gemm::transpose(ai->data.data(), E, S);
        for (index_t n = 0; n < N; ++n) {
          detail::ScanGrads<T> g{gx.data() + n * L * E, gd.data() + n * L * E, gat.data(), gb.data() + n * L * S,
                                 gc.data() + n * L * S, gskip.data()};
          detail::scan_sequence_backward(L, E, S, xi->data.data() + n * L * E, di->data.data() + n * L * E,
                                         a_t.data(), bi->data.data() + n * L * S, ci->data.data() + n * L * S,
                                         skip->data.data(), history->data() + n * L * S * E, gy.data() + n * L * E, g);
        }
        auto accumulate = [](std::vector<T>* dst, const std::vector<T>& src) {
          if (dst)
            for (std::size_t i = 0; i < src.size(); ++i) (*dst)[i] += src[i];
        };
        accumulate(detail::grad_of(xi), gx);
        accumulate(detail::grad_of(di), gd);
        accumulate(detail::grad_of(ai), gemm::transpose(gat.data(), S, E));
        accumulate(detail::grad_of(bi), gb);
        accumulate(detail::grad_of(ci), gc);
        accumulate(detail::grad_of(skip), gskip);
      });
}

// Depthwise causal convolution along the sequence axis with left zero
// padding of width-1: y[t, e] = b[e] + sum_j w[e, j] x[t - (width-1) + j, e].
template <typename T>
Tensor<T> causal_depthwise_conv1d(const Tensor<T>& x, const Tensor<T>& weight, const Tensor<T>& bias) {
  if (x.rank() != 3) throw InvalidInput("causal_depthwise_conv1d: expected [N,L,E]");
  const index_t N = x.dim(0), L = x.dim(1), E = x.dim(2);
  if (weight.rank() != 2 || weight.dim(0) != E || bias.shape() != Shape{E}) {
    throw InvalidInput("causal_depthwise_conv1d: weight must be [E,width], bias [E]");
  }
  const index_t K = weight.dim(1);
  const auto wt = gemm::transpose(weight.values().data(), E, K);  // [K][E]
  std::vector<T> y(x.values().size());
  const T* xv = x.values().data();
  for (index_t n = 0; n < N; ++n)
    for (index_t t = 0; t < L; ++t) {
      T* yt = y.data() + (n * L + t) * E;
      for (index_t e = 0; e < E; ++e) yt[e] = bias[e];
      for (index_t j = 0; j < K; ++j) {
        const index_t src = t - (K - 1) + j;
        if (src < 0) continue;
        const T* xs = xv + (n * L + src) * E;
        const T* wj = wt.data() + j * E;
        for (index_t e = 0; e < E; ++e) yt[e] += wj[e] * xs[e];
      }
    }
  auto xi = x.impl_ptr(), wi = weight.impl_ptr(), bi = bias.impl_ptr();
  return detail::make_result(x.shape(), std::move(y), "causal_depthwise_conv1d", {&x, &weight, &bias},
                             [xi, wi, bi, N, L, E, K](const std::vector<T>& g) {
                               auto* gx = detail::grad_of(xi);
                               auto* gw = detail::grad_of(wi);
                               auto* gb = detail::grad_of(bi);
                               const T* xv = xi->data.data();
                               const T* wv = wi->data.data();
                               for (index_t n = 0; n < N; ++n)
                                 for (index_t t = 0; t < L; ++t) {
                                   const T* gt = g.data() + (n * L + t) * E;
                                   if (gb)
                                     for (index_t e = 0; e < E; ++e) (*gb)[e] += gt[e];
                                   for (index_t j = 0; j < K; ++j) {
                                     const index_t src = t - (K - 1) + j;
                                     if (src < 0) continue;
                                     for (index_t e = 0; e < E; ++e) {
                                       if (gw) (*gw)[e * K + j] += gt[e] * xv[(n * L + src) * E + e];
                                       if (gx) (*gx)[(n * L + src) * E + e] += gt[e] * wv[e * K + j];
                                     }
                                   }
                                 }
                             });
}

}  // namespace dmseg
