#pragma once

#include <cmath>
#include <memory>
#include <vector>

#include "dmseg/label_volume.hpp"
#include "dmseg/tensor.hpp"

namespace dmseg {

// Mean over voxels of -log softmax(logits)[label], max-subtracted.
template <typename T>
Tensor<T> softmax_cross_entropy(const Tensor<T>& logits, const LabelVolume& labels) {
  if (logits.rank() != 5) throw InvalidInput("softmax_cross_entropy: logits must be [N,K,D,H,W]");
  const index_t N = logits.dim(0), K = logits.dim(1);
  if (labels.shape != Shape{N, logits.dim(2), logits.dim(3), logits.dim(4)}) {
    throw InvalidInput("softmax_cross_entropy: labels " + to_string(labels.shape) + " vs logits " +
                       to_string(logits.shape()));
  }
  const index_t S = labels.voxels_per_case();
  for (auto l : labels.data)
    if (l < 0 || l >= K) throw InvalidInput("softmax_cross_entropy: label " + std::to_string(l) + " outside [0, K)");
  const auto& x = logits.values();
  auto probs = std::make_shared<std::vector<T>>(x.size());
  double total = 0.0;  // float sums over 10^5 voxels drift by ~1e-3
  for (index_t n = 0; n < N; ++n)
    for (index_t s = 0; s < S; ++s) {
      const T* base = x.data() + n * K * S + s;
      T mx = base[0];
      for (index_t k = 1; k < K; ++k) mx = std::max(mx, base[k * S]);
      T z{0};
      for (index_t k = 0; k < K; ++k) z += std::exp(base[k * S] - mx);
      const index_t label = labels.data[static_cast<std::size_t>(n * S + s)];
      total += static_cast<double>(std::log(z) - (base[label * S] - mx));
      for (index_t k = 0; k < K; ++k) (*probs)[n * K * S + k * S + s] = std::exp(base[k * S] - mx) / z;
    }
  const T count = static_cast<T>(N * S);
  auto li = logits.impl_ptr();
  auto label_data = std::make_shared<std::vector<std::int32_t>>(labels.data);
  return detail::make_result(Shape{1}, std::vector<T>{static_cast<T>(total / static_cast<double>(N * S))}, "softmax_cross_entropy", {&logits},
                             [li, probs, label_data, N, K, S, count](const std::vector<T>& g) {
                               auto* gl = detail::grad_of(li);
                               if (!gl) return;
                               const T scale = g[0] / count;
                               for (index_t n = 0; n < N; ++n)
                                 for (index_t s = 0; s < S; ++s) {
                                   const index_t label = (*label_data)[static_cast<std::size_t>(n * S + s)];
                                   for (index_t k = 0; k < K; ++k) {
                                     const index_t i = n * K * S + k * S + s;
                                     (*gl)[i] += scale * ((*probs)[i] - (k == label ? T{1} : T{0}));
                                   }
                                 }
                             });
}

}  // namespace dmseg
