#pragma once

#include <array>
#include <memory>
#include <string_view>
#include <vector>

#include "dmseg/ops.hpp"

// The four 3D -> 1D traversals of a [D, H, W] grid used by the
// quadri-directional block. Axis order is [N, C, D, H, W] throughout.
namespace dmseg {

enum class ScanOrder { Forward, Reverse, InterSlice, ReverseInterSlice };

inline constexpr std::array<ScanOrder, 4> kAllScanOrders{ScanOrder::Forward, ScanOrder::Reverse, ScanOrder::InterSlice,
                                                         ScanOrder::ReverseInterSlice};

inline std::string_view to_string(ScanOrder o) {
  switch (o) {
    case ScanOrder::Forward: return "forward";
    case ScanOrder::Reverse: return "reverse";
    case ScanOrder::InterSlice: return "inter_slice";
    case ScanOrder::ReverseInterSlice: return "reverse_inter_slice";
  }
  return "?";
}

struct VolumeDims {
  index_t d = 1, h = 1, w = 1;

  index_t volume() const { return d * h * w; }
  friend bool operator==(const VolumeDims&, const VolumeDims&) = default;
};

struct VoxelPos {
  index_t d = 0, h = 0, w = 0;
};

// Position of voxel `pos` in the sequence produced by `order`.
//   Forward:    slices in depth order, row-major inside a slice.
//   InterSlice: depth varies fastest (walks across slices first).
//   Reverse*:   L - 1 - (the non-reversed index).
inline index_t linear_index(ScanOrder order, VoxelPos pos, VolumeDims dims) {
  if (dims.d <= 0 || dims.h <= 0 || dims.w <= 0) throw InvalidInput("linear_index: dims must be positive");
  if (pos.d < 0 || pos.d >= dims.d || pos.h < 0 || pos.h >= dims.h || pos.w < 0 || pos.w >= dims.w) {
    throw InvalidInput("linear_index: position outside the volume");
  }
  const index_t L = dims.volume();
  const index_t forward = (pos.d * dims.h + pos.h) * dims.w + pos.w;
  const index_t inter = (pos.h * dims.w + pos.w) * dims.d + pos.d;
  switch (order) {
    case ScanOrder::Forward: return forward;
    case ScanOrder::Reverse: return L - 1 - forward;
    case ScanOrder::InterSlice: return inter;
    case ScanOrder::ReverseInterSlice: return L - 1 - inter;
  }
  return forward;
}

// seq_pos[v] for every voxel v in row-major (d, h, w) order.
inline std::vector<index_t> scan_permutation(ScanOrder order, VolumeDims dims) {
  std::vector<index_t> perm(static_cast<std::size_t>(dims.volume()));
  index_t v = 0;
  for (index_t d = 0; d < dims.d; ++d)
    for (index_t h = 0; h < dims.h; ++h)
      for (index_t w = 0; w < dims.w; ++w) perm[static_cast<std::size_t>(v++)] = linear_index(order, {d, h, w}, dims);
  return perm;
}

namespace detail {

// Gather map for [N, C, D, H, W] -> [N, L, C].
inline std::shared_ptr<const std::vector<index_t>> flatten_map(ScanOrder order, index_t N, index_t C, VolumeDims dims) {
  const auto perm = scan_permutation(order, dims);
  const index_t L = dims.volume();
  auto map = std::make_shared<std::vector<index_t>>(static_cast<std::size_t>(N * L * C));
  for (index_t n = 0; n < N; ++n)
    for (index_t c = 0; c < C; ++c)
      for (index_t v = 0; v < L; ++v)
        (*map)[static_cast<std::size_t>((n * L + perm[static_cast<std::size_t>(v)]) * C + c)] = (n * C + c) * L + v;
  return map;
}

// Gather map for [N, L, C] -> [N, C, D, H, W].
inline std::shared_ptr<const std::vector<index_t>> unflatten_map(ScanOrder order, index_t N, index_t C,
                                                                 VolumeDims dims) {
  const auto perm = scan_permutation(order, dims);
  const index_t L = dims.volume();
  auto map = std::make_shared<std::vector<index_t>>(static_cast<std::size_t>(N * L * C));
  for (index_t n = 0; n < N; ++n)
    for (index_t c = 0; c < C; ++c)
      for (index_t v = 0; v < L; ++v)
        (*map)[static_cast<std::size_t>((n * C + c) * L + v)] = (n * L + perm[static_cast<std::size_t>(v)]) * C + c;
  return map;
}

}  // namespace detail

template <typename T>
VolumeDims volume_dims(const Tensor<T>& z) {
  if (z.rank() != 5) throw InvalidInput("expected [N,C,D,H,W], got " + to_string(z.shape()));
  return {z.dim(2), z.dim(3), z.dim(4)};
}

// [N, C, D, H, W] -> [N, L, C]; sequence slot linear_index(order, v) holds voxel v.
template <typename T>
Tensor<T> flatten(const Tensor<T>& z, ScanOrder order) {
  const VolumeDims dims = volume_dims(z);
  const index_t N = z.dim(0), C = z.dim(1);
  return gather(z, Shape{N, dims.volume(), C}, detail::flatten_map(order, N, C, dims), "flatten");
}

// Inverse of flatten for the same order.
template <typename T>
Tensor<T> unflatten(const Tensor<T>& seq, ScanOrder order, VolumeDims dims) {
  if (seq.rank() != 3) throw InvalidInput("unflatten: expected [N,L,C], got " + to_string(seq.shape()));
  if (seq.dim(1) != dims.volume()) {
    throw InvalidInput("unflatten: sequence length " + std::to_string(seq.dim(1)) + " != D*H*W = " +
                       std::to_string(dims.volume()));
  }
  const index_t N = seq.dim(0), C = seq.dim(2);
  return gather(seq, Shape{N, C, dims.d, dims.h, dims.w}, detail::unflatten_map(order, N, C, dims), "unflatten");
}

}  // namespace dmseg
