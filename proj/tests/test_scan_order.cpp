#include <gtest/gtest.h>

#include <algorithm>
#include <numeric>
#include <random>

#include "dmseg/scan_order.hpp"
#include "support/gradcheck.hpp"

using namespace dmseg;
using dmseg::testing::random_tensor;

namespace {

index_t pick(std::mt19937_64& rng, index_t lo, index_t hi) {
  return std::uniform_int_distribution<index_t>(lo, hi)(rng);
}

}  // namespace

TEST(LinearIndex, Examples) {
  for (auto order : kAllScanOrders) EXPECT_EQ(linear_index(order, {0, 0, 0}, {1, 1, 1}), 0);
  EXPECT_EQ(linear_index(ScanOrder::Forward, {1, 0, 1}, {2, 2, 2}), 5);
  EXPECT_EQ(linear_index(ScanOrder::InterSlice, {1, 0, 1}, {2, 2, 2}), 3);
  EXPECT_EQ(linear_index(ScanOrder::Reverse, {1, 0, 1}, {2, 2, 2}), 2);
  EXPECT_EQ(linear_index(ScanOrder::ReverseInterSlice, {1, 0, 1}, {2, 2, 2}), 4);
}

TEST(LinearIndex, ReverseVariantsMirrorTheirBase) {
  const VolumeDims dims{3, 4, 5};
  const index_t L = dims.volume();
  for (index_t d = 0; d < 3; ++d)
    for (index_t h = 0; h < 4; ++h)
      for (index_t w = 0; w < 5; ++w) {
        const VoxelPos p{d, h, w};
        EXPECT_EQ(linear_index(ScanOrder::Reverse, p, dims), L - 1 - linear_index(ScanOrder::Forward, p, dims));
        EXPECT_EQ(linear_index(ScanOrder::ReverseInterSlice, p, dims),
                  L - 1 - linear_index(ScanOrder::InterSlice, p, dims));
        EXPECT_EQ(linear_index(ScanOrder::InterSlice, p, dims), (h * 5 + w) * 3 + d);
      }
}

TEST(LinearIndex, OutOfRangeRejected) {
  EXPECT_THROW(linear_index(ScanOrder::Forward, {2, 0, 0}, {2, 2, 2}), InvalidInput);
  EXPECT_THROW(linear_index(ScanOrder::InterSlice, {0, -1, 0}, {2, 2, 2}), InvalidInput);
}

TEST(ScanPermutation, IsBijectionForRandomDims) {
  std::mt19937_64 rng(1);
  for (int trial = 0; trial < 200; ++trial) {
    const VolumeDims dims{pick(rng, 1, 8), pick(rng, 1, 8), pick(rng, 1, 8)};
    for (auto order : kAllScanOrders) {
      auto perm = scan_permutation(order, dims);
      std::sort(perm.begin(), perm.end());
      std::vector<index_t> expect(static_cast<std::size_t>(dims.volume()));
      std::iota(expect.begin(), expect.end(), 0);
      ASSERT_EQ(perm, expect);
    }
  }
}

TEST(Flatten, SingleVoxelKeepsValues) {
  std::mt19937_64 rng(2);
  auto z = random_tensor(Shape{2, 3, 1, 1, 1}, rng, -1, 1, false);
  for (auto order : kAllScanOrders) {
    const auto seq = flatten(z, order);
    EXPECT_EQ(seq.shape(), (Shape{2, 1, 3}));
    EXPECT_EQ(seq.values(), z.values());
  }
}

TEST(Flatten, AgreesWithPerVoxelIndex) {
  std::mt19937_64 rng(3);
  const index_t N = 2, C = 3, D = 2, H = 3, W = 4;
  auto z = random_tensor(Shape{N, C, D, H, W}, rng, -1, 1, false);
  for (auto order : kAllScanOrders) {
    const auto seq = flatten(z, order);
    for (index_t n = 0; n < N; ++n)
      for (index_t c = 0; c < C; ++c)
        for (index_t d = 0; d < D; ++d)
          for (index_t h = 0; h < H; ++h)
            for (index_t w = 0; w < W; ++w) {
              const index_t l = linear_index(order, {d, h, w}, {D, H, W});
              ASSERT_EQ(seq[(n * D * H * W + l) * C + c], z[(((n * C + c) * D + d) * H + h) * W + w]);
            }
  }
}

TEST(Flatten, ForwardAndReverseAreSequenceReversals) {
  std::mt19937_64 rng(4);
  auto z = random_tensor(Shape{1, 2, 3, 2, 4}, rng, -1, 1, false);
  const auto f = flatten(z, ScanOrder::Forward), r = flatten(z, ScanOrder::Reverse);
  const index_t L = 24, C = 2;
  for (index_t l = 0; l < L; ++l)
    for (index_t c = 0; c < C; ++c) EXPECT_EQ(f[l * C + c], r[(L - 1 - l) * C + c]);
}

TEST(Unflatten, RoundTripsAndConstants) {
  std::mt19937_64 rng(5);
  for (int trial = 0; trial < 100; ++trial) {
    const VolumeDims dims{pick(rng, 1, 8), pick(rng, 1, 8), pick(rng, 1, 8)};
    const index_t N = pick(rng, 1, 2), C = pick(rng, 1, 3);
    auto z = random_tensor(Shape{N, C, dims.d, dims.h, dims.w}, rng, -1, 1, false);
    auto s = random_tensor(Shape{N, dims.volume(), C}, rng, -1, 1, false);
    for (auto order : kAllScanOrders) {
      ASSERT_EQ(unflatten(flatten(z, order), order, dims).values(), z.values());
      ASSERT_EQ(flatten(unflatten(s, order, dims), order).values(), s.values());
    }
  }
  Tensor<double> k(Shape{1, 2, 3, 3, 3}, 4.25);
  for (auto order : kAllScanOrders) {
    const auto back = unflatten(flatten(k, order), order, {3, 3, 3});
    for (double v : back.values()) EXPECT_EQ(v, 4.25);
  }
}

TEST(Unflatten, ForwardThenReverseFlipsTraversal) {
  std::mt19937_64 rng(6);
  auto z = random_tensor(Shape{1, 2, 2, 3, 4}, rng, -1, 1, false);
  const VolumeDims dims{2, 3, 4};
  const auto flipped = unflatten(flatten(z, ScanOrder::Forward), ScanOrder::Reverse, dims);
  const auto a = flatten(flipped, ScanOrder::Forward), b = flatten(z, ScanOrder::Forward);
  const index_t L = 24, C = 2;
  for (index_t l = 0; l < L; ++l)
    for (index_t c = 0; c < C; ++c) EXPECT_EQ(a[l * C + c], b[(L - 1 - l) * C + c]);
}

TEST(Unflatten, LengthMismatchRejected) {
  Tensor<double> s(Shape{1, 7, 2});
  EXPECT_THROW(unflatten(s, ScanOrder::Forward, {2, 2, 2}), InvalidInput);
}

TEST(Flatten, GradientIsInversePermutation) {
  std::mt19937_64 rng(7);
  for (auto order : kAllScanOrders) {
    auto z = random_tensor(Shape{2, 3, 2, 3, 4}, rng);
    backward(sum(flatten(z, order)));
    for (double g : z.grad()) EXPECT_EQ(g, 1.0);

    // weighted: the gradient reaching voxel v is the weight at its slot
    auto y = random_tensor(Shape{1, 1, 2, 3, 4}, rng);
    auto wts = random_tensor(Shape{1, 24, 1}, rng, -1, 1, false);
    backward(sum(mul(flatten(y, order), wts)));
    const auto perm = scan_permutation(order, {2, 3, 4});
    for (index_t v = 0; v < 24; ++v) EXPECT_EQ(y.grad()[v], wts[perm[v]]);
  }
}
