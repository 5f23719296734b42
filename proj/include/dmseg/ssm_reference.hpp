#pragma once

#include "dmseg/ssm.hpp"

namespace dmseg {

// Literal per-timestep evaluation of the selective scan for one sequence,
// kept apart from the production kernel so the two can be cross-checked.
// x, delta: [L, E]; A: [E, S]; B, C: [L, S]; D: [E].
template <typename T>
Tensor<T> selective_scan_reference(const Tensor<T>& x, const Tensor<T>& delta, const Tensor<T>& A,
                                   const Tensor<T>& B, const Tensor<T>& C, const Tensor<T>& D) {
  if (x.rank() != 2 || delta.shape() != x.shape() || C.shape() != B.shape() || D.shape() != Shape{x.dim(1)}) {
    throw InvalidInput("selective_scan_reference: inconsistent dims");
  }
  const auto [abar, bbar] = discretize(delta, A, B);
  const index_t L = x.dim(0), E = x.dim(1), S = A.dim(1);
  Tensor<T> y(Shape{L, E});
  std::vector<T> h(static_cast<std::size_t>(E * S), T{0});
  for (index_t t = 0; t < L; ++t) {
    for (index_t e = 0; e < E; ++e) {
      T out{0};
      for (index_t s = 0; s < S; ++s) {
        T& state = h[static_cast<std::size_t>(e * S + s)];
        state = abar[(t * E + e) * S + s] * state + bbar[(t * E + e) * S + s] * x[t * E + e];
        out += C[t * S + s] * state;
      }
      y[t * E + e] = out + D[e] * x[t * E + e];
    }
  }
  return y;
}

}  // namespace dmseg
