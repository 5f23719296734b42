#include <gtest/gtest.h>

#include <cmath>
#include <random>

#include "dmseg/gsc.hpp"
#include "support/gradcheck.hpp"

using namespace dmseg;
using dmseg::testing::random_tensor;

namespace {

// Instance norm over two values followed by the affine map and ReLU.
std::array<double, 2> in_relu(std::array<double, 2> y, double scale, double shift) {
  const double mu = (y[0] + y[1]) / 2;
  const double var = ((y[0] - mu) * (y[0] - mu) + (y[1] - mu) * (y[1] - mu)) / 2;
  const double inv = 1.0 / std::sqrt(var + kInstanceNormEps);
  std::array<double, 2> out{};
  for (int i = 0; i < 2; ++i) out[i] = std::max(0.0, (y[i] - mu) * inv * scale + shift);
  return out;
}

void randomize(const NamedParams<double>& params, std::mt19937_64& rng, double lo, double hi) {
  std::uniform_real_distribution<double> u(lo, hi);
  for (const auto& [name, p] : params) {
    auto t = p;
    for (auto& v : t.values()) v = u(rng);
  }
}

}  // namespace

TEST(Gsc, ZeroConvolutionsGiveIdentity) {
  Rng rng(1);
  std::mt19937_64 r(1);
  for (bool tied : {false, true})
    for (bool single : {false, true}) {
      Gsc<double> gsc(3, GscConfig{tied, single}, rng);
      gsc.zero_convs();
      auto z = random_tensor(Shape{2, 3, 4, 3, 5}, r, -3, 3, false);
      EXPECT_EQ(gsc(z).values(), z.values());
    }
}

TEST(Gsc, ZeroSecondGateConvGivesIdentity) {
  Rng rng(2);
  std::mt19937_64 r(2);
  Gsc<double> gsc(4, GscConfig{}, rng);
  gsc.g2.zero();
  auto z = random_tensor(Shape{1, 4, 4, 4, 4}, r, -3, 3, false);
  EXPECT_EQ(gsc(z).values(), z.values());
}

TEST(Gsc, TwoVoxelHandEvaluation) {
  Rng rng(3);
  std::mt19937_64 r(3);
  Gsc<double> gsc(1, GscConfig{}, rng);
  NamedParams<double> params;
  gsc.collect("gsc", params);
  randomize(params, r, -1.5, 1.5);
  auto z = random_tensor(Shape{1, 1, 1, 1, 2}, r, -2, 2, false);
  const auto out = gsc(z);

  auto pw = [](const Conv3d<double>& c, std::array<double, 2> x) {
    return std::array<double, 2>{c.weight[0] * x[0] + (*c.bias)[0], c.weight[0] * x[1] + (*c.bias)[0]};
  };
  // With padding 1 on a 1x1x2 grid only the middle row of the kernel sees data.
  auto cube = [](const Conv3d<double>& c, std::array<double, 2> x) {
    const auto& k = c.weight;
    const double b = (*c.bias)[0];
    return std::array<double, 2>{k[13] * x[0] + k[14] * x[1] + b, k[12] * x[0] + k[13] * x[1] + b};
  };
  auto norm = [](const InstanceNorm<double>& n, std::array<double, 2> y) { return in_relu(y, n.scale[0], n.shift[0]); };

  const std::array<double, 2> x{z[0], z[1]};
  const auto g1 = norm(gsc.g1_norm, pw(gsc.g1, x));
  const auto g2 = norm(gsc.g2_norm, pw(gsc.g2, g1));
  const auto c1 = norm(gsc.c1_norm, cube(gsc.c1, x));
  const auto c2 = norm(gsc.c2_norm, cube(gsc.c2, c1));
  for (int i = 0; i < 2; ++i) EXPECT_NEAR(out[i], x[i] + c2[i] * g2[i], 1e-12);
}

TEST(Gsc, ShapePreservedAndGatedTermNonNegative) {
  Rng rng(4);
  std::mt19937_64 r(4);
  Gsc<double> gsc(3, GscConfig{}, rng);
  NamedParams<double> params;
  gsc.collect("gsc", params);
  randomize(params, r, -1, 1);
  for (int trial = 0; trial < 10; ++trial) {
    std::uniform_int_distribution<index_t> dim(1, 6);
    const Shape s{1, 3, dim(r), dim(r), dim(r)};
    auto z = random_tensor(s, r, -2, 2, false);
    const auto out = gsc(z);
    ASSERT_EQ(out.shape(), s);
    const auto gated = mul(gsc.spatial(z), gsc.gate(z));
    for (double v : gated.values()) EXPECT_GE(v, 0.0);
    for (index_t i = 0; i < z.numel(); ++i) EXPECT_GE(out[i] - z[i], 0.0);
  }
}

TEST(Gsc, VariantsChangeOnlyTheirParameters) {
  const index_t C = 5;
  auto count = [&](GscConfig cfg) {
    Rng rng(5);
    Gsc<double> gsc(C, cfg, rng);
    NamedParams<double> p;
    gsc.collect("g", p);
    return parameter_count(p);
  };
  const index_t full = count({});
  EXPECT_EQ(full, 2 * (C * C + C) + 2 * (27 * C * C + C) + 4 * 2 * C);
  EXPECT_EQ(count({true, false}), full - (C * C + C));
  EXPECT_EQ(count({false, true}), full - (27 * C * C + C) - 2 * C);
}

TEST(Gsc, TiedGateReusesFirstConvolution) {
  Rng rng(6);
  std::mt19937_64 r(6);
  Gsc<double> gsc(2, GscConfig{true, false}, rng);
  EXPECT_EQ(&gsc.second_pointwise(), &gsc.g1);
  auto z = random_tensor(Shape{1, 2, 3, 3, 3}, r, -1, 1, false);
  const auto first = relu(gsc.g1_norm(gsc.g1(z)));
  const auto expect = relu(gsc.g2_norm(gsc.g1(first)));
  EXPECT_EQ(gsc.gate(z).values(), expect.values());
}

TEST(Gsc, SingleConvSpatialBranch) {
  Rng rng(7);
  std::mt19937_64 r(7);
  Gsc<double> gsc(2, GscConfig{false, true}, rng);
  auto z = random_tensor(Shape{1, 2, 3, 3, 3}, r, -1, 1, false);
  EXPECT_EQ(gsc.spatial(z).values(), relu(gsc.c1_norm(gsc.c1(z))).values());
}

TEST(Gsc, GradientMatchesFiniteDifferences) {
  Rng rng(8);
  std::mt19937_64 r(8);
  for (bool single : {false, true}) {
    Gsc<double> gsc(2, GscConfig{false, single}, rng);
    NamedParams<double> params;
    gsc.collect("gsc", params);
    randomize(params, r, -1, 1);
    std::vector<Tensor<double>> inputs{random_tensor(Shape{1, 2, 3, 3, 2}, r)};
    for (auto& [name, p] : params) inputs.push_back(p);
    dmseg::testing::Projector proj;
    // Conv biases feeding instance norm have exactly zero gradient; the floor
    // keeps their finite-difference noise from reading as relative error.
    const double err = dmseg::testing::gradient_error(
        inputs, [&](const std::vector<Tensor<double>>& v) { return proj(gsc(v[0]), r); }, 1e-5, 1e-6);
    EXPECT_LT(err, 1e-4);
  }
}
