#pragma once

#include <memory>
#include <vector>

#include "dmseg/ops.hpp"

namespace dmseg {

namespace detail {

// Index map for space-to-depth: entry i of the [N, C*r^3, D/r, H/r, W/r]
// output names its source offset in the [N, C, D, H, W] input.
inline std::shared_ptr<const std::vector<index_t>> space_to_depth_map(const Shape& in, index_t r) {
  const index_t N = in[0], C = in[1], D = in[2], H = in[3], W = in[4];
  const index_t od = D / r, oh = H / r, ow = W / r;
  auto map = std::make_shared<std::vector<index_t>>(static_cast<std::size_t>(numel(in)));
  index_t i = 0;
  for (index_t n = 0; n < N; ++n)
    for (index_t c = 0; c < C; ++c)
      for (index_t bd = 0; bd < r; ++bd)
        for (index_t bh = 0; bh < r; ++bh)
          for (index_t bw = 0; bw < r; ++bw)
            for (index_t d = 0; d < od; ++d)
              for (index_t h = 0; h < oh; ++h)
                for (index_t w = 0; w < ow; ++w)
                  (*map)[i++] = (((n * C + c) * D + d * r + bd) * H + h * r + bh) * W + w * r + bw;
  return map;
}

}  // namespace detail

// Lossless r x r x r block -> channel rearrangement. Output channel
// c*r^3 + (bd*r + bh)*r + bw carries block offset (bd, bh, bw) of channel c.
template <typename T>
Tensor<T> space_to_depth_3d(const Tensor<T>& input, index_t r) {
  if (input.rank() != 5) throw InvalidInput("space_to_depth_3d: expected [N,C,D,H,W]");
  if (r <= 0) throw InvalidInput("space_to_depth_3d: factor must be positive");
  const auto& s = input.shape();
  if (s[2] % r || s[3] % r || s[4] % r) {
    throw InvalidInput("space_to_depth_3d: spatial dims " + to_string(s) + " not divisible by " + std::to_string(r));
  }
  Shape out{s[0], s[1] * r * r * r, s[2] / r, s[3] / r, s[4] / r};
  return gather(input, out, detail::space_to_depth_map(s, r), "space_to_depth_3d");
}

// Exact inverse of space_to_depth_3d.
template <typename T>
Tensor<T> depth_to_space_3d(const Tensor<T>& input, index_t r) {
  if (input.rank() != 5) throw InvalidInput("depth_to_space_3d: expected [N,C,D,H,W]");
  if (r <= 0) throw InvalidInput("depth_to_space_3d: factor must be positive");
  const auto& s = input.shape();
  const index_t r3 = r * r * r;
  if (s[1] % r3) throw InvalidInput("depth_to_space_3d: channels not divisible by r^3");
  Shape out{s[0], s[1] / r3, s[2] * r, s[3] * r, s[4] * r};
  auto forward = detail::space_to_depth_map(out, r);
  auto inverse = std::make_shared<std::vector<index_t>>(forward->size());
  for (std::size_t i = 0; i < forward->size(); ++i) (*inverse)[static_cast<std::size_t>((*forward)[i])] = static_cast<index_t>(i);
  return gather(input, out, std::move(inverse), "depth_to_space_3d");
}

}  // namespace dmseg
