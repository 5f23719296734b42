#pragma once

#include <cstdint>
#include <vector>

#include "dmseg/tensor.hpp"

namespace dmseg {

// Integer class map [N, D, H, W]; ground truth and predictions.
struct LabelVolume {
  Shape shape;
  std::vector<std::int32_t> data;

  LabelVolume() = default;
  explicit LabelVolume(Shape s, std::int32_t fill = 0) : shape(std::move(s)) {
    if (shape.size() != 4) throw InvalidInput("LabelVolume must be [N,D,H,W], got " + to_string(shape));
    for (auto d : shape)
      if (d <= 0) throw InvalidInput("LabelVolume dims must be positive");
    data.assign(static_cast<std::size_t>(numel(shape)), fill);
  }
  LabelVolume(Shape s, std::vector<std::int32_t> values) : LabelVolume(std::move(s)) {
    if (values.size() != data.size()) throw InvalidInput("LabelVolume value count mismatch");
    data = std::move(values);
  }

  index_t size() const { return static_cast<index_t>(data.size()); }
  index_t voxels_per_case() const { return shape[1] * shape[2] * shape[3]; }
  std::int32_t& at(index_t n, index_t d, index_t h, index_t w) {
    return data[static_cast<std::size_t>(((n * shape[1] + d) * shape[2] + h) * shape[3] + w)];
  }
  std::int32_t at(index_t n, index_t d, index_t h, index_t w) const {
    return data[static_cast<std::size_t>(((n * shape[1] + d) * shape[2] + h) * shape[3] + w)];
  }
  friend bool operator==(const LabelVolume&, const LabelVolume&) = default;
};

// Per-voxel argmax over the class axis of [N, K, D, H, W] scores.
template <typename T>
LabelVolume argmax_labels(const Tensor<T>& logits) {
  if (logits.rank() != 5) throw InvalidInput("argmax_labels: expected [N,K,D,H,W]");
  const index_t N = logits.dim(0), K = logits.dim(1);
  const index_t S = logits.dim(2) * logits.dim(3) * logits.dim(4);
  LabelVolume out(Shape{N, logits.dim(2), logits.dim(3), logits.dim(4)});
  const auto& v = logits.values();
  for (index_t n = 0; n < N; ++n)
    for (index_t s = 0; s < S; ++s) {
      index_t best = 0;
      for (index_t k = 1; k < K; ++k)
        if (v[(n * K + k) * S + s] > v[(n * K + best) * S + s]) best = k;
      out.data[static_cast<std::size_t>(n * S + s)] = static_cast<std::int32_t>(best);
    }
  return out;
}

}  // namespace dmseg
