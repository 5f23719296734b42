#include <gtest/gtest.h>

#include <algorithm>
#include <cmath>
#include <random>
#include <sstream>

#include "dmseg/metrics.hpp"

using namespace dmseg;

namespace {

LabelVolume volume(index_t d, index_t h, index_t w, std::vector<std::array<index_t, 3>> ones, std::int32_t cls = 1) {
  LabelVolume v(Shape{1, d, h, w});
  for (const auto& p : ones) v.data[static_cast<std::size_t>((p[0] * h + p[1]) * w + p[2])] = cls;
  return v;
}

LabelVolume random_labels(std::mt19937_64& rng, index_t n, index_t s, std::int32_t k, double fg) {
  LabelVolume v(Shape{n, s, s, s});
  std::bernoulli_distribution on(fg);
  std::uniform_int_distribution<std::int32_t> cls(1, k - 1);
  for (auto& x : v.data) x = on(rng) ? cls(rng) : 0;
  return v;
}

// Exhaustive pairwise distances, pooled over both directions.
std::optional<double> brute_hd95(const LabelVolume& a, const LabelVolume& b, std::int32_t cls, const Spacing& sp) {
  const index_t N = a.shape[0], D = a.shape[1], H = a.shape[2], W = a.shape[3];
  std::vector<double> pooled;
  bool any_a = false, any_b = false;
  for (index_t n = 0; n < N; ++n) {
    std::vector<std::array<index_t, 3>> pa, pb;
    for (index_t d = 0; d < D; ++d)
      for (index_t h = 0; h < H; ++h)
        for (index_t w = 0; w < W; ++w) {
          const auto i = static_cast<std::size_t>(((n * D + d) * H + h) * W + w);
          if (a.data[i] == cls) pa.push_back({d, h, w});
          if (b.data[i] == cls) pb.push_back({d, h, w});
        }
    any_a |= !pa.empty();
    any_b |= !pb.empty();
    if (pa.empty() != pb.empty()) return std::nullopt;
    auto directed = [&](const auto& from, const auto& to) {
      for (const auto& p : from) {
        double best = INFINITY;
        for (const auto& q : to) {
          const double dd = (p[0] - q[0]) * sp[0], dh = (p[1] - q[1]) * sp[1], dw = (p[2] - q[2]) * sp[2];
          best = std::min(best, std::sqrt(dd * dd + dh * dh + dw * dw));
        }
        pooled.push_back(best);
      }
    };
    directed(pa, pb);
    directed(pb, pa);
  }
  if (!any_a && !any_b) return 0.0;
  std::sort(pooled.begin(), pooled.end());
  const auto n = pooled.size();
  const std::size_t rank = std::max<std::size_t>(1, static_cast<std::size_t>(std::ceil(0.95 * double(n) - 1e-9)));
  return pooled[rank - 1];
}

}  // namespace

TEST(Dice, Examples) {
  const auto g = volume(1, 2, 2, {{0, 0, 0}, {0, 0, 1}, {0, 1, 0}, {0, 1, 1}});
  const auto p = volume(1, 2, 2, {{0, 0, 0}, {0, 1, 1}});
  EXPECT_DOUBLE_EQ(dice(p, g, 1), 4.0 / 6.0);
  EXPECT_EQ(dice(g, g, 1), 1.0);
  EXPECT_EQ(dice(volume(1, 1, 4, {{0, 0, 0}}), volume(1, 1, 4, {{0, 0, 3}}), 1), 0.0);
  EXPECT_EQ(dice(volume(1, 1, 4, {}), volume(1, 1, 4, {}), 1), 1.0);
  EXPECT_THROW(dice(p, volume(1, 2, 3, {}), 1), InvalidInput);
}

TEST(Dice, SymmetricAndMonotone) {
  std::mt19937_64 rng(1);
  for (int trial = 0; trial < 50; ++trial) {
    const auto a = random_labels(rng, 1, 6, 3, 0.4), b = random_labels(rng, 1, 6, 3, 0.4);
    for (std::int32_t c = 1; c < 3; ++c) {
      ASSERT_EQ(dice(a, b, c), dice(b, a, c));
      // drop one correctly predicted voxel
      for (std::size_t i = 0; i < a.data.size(); ++i)
        if (a.data[i] == c && b.data[i] == c) {
          auto fewer = a;
          fewer.data[i] = 0;
          ASSERT_LE(dice(fewer, b, c), dice(a, b, c));
          break;
        }
    }
  }
}

TEST(Hd95, Examples) {
  const Spacing unit{1, 1, 1};
  const auto a = volume(1, 1, 5, {{0, 0, 0}}), b = volume(1, 1, 5, {{0, 0, 3}});
  EXPECT_EQ(hd95(a, b, 1, unit), 3.0);
  EXPECT_EQ(hd95(a, a, 1, unit), 0.0);
  EXPECT_EQ(hd95(volume(1, 1, 5, {}), volume(1, 1, 5, {}), 1, unit), 0.0);
  EXPECT_FALSE(hd95(a, volume(1, 1, 5, {}), 1, unit).has_value());
  EXPECT_EQ(hd95(a, b, 1, Spacing{1, 1, 0.5}), 1.5);
  EXPECT_THROW(hd95(a, b, 1, Spacing{1, 0, 1}), InvalidInput);
  EXPECT_THROW(hd95(a, volume(1, 1, 4, {}), 1, unit), InvalidInput);
}

TEST(Hd95, MatchesBruteForceAndIsSymmetric) {
  std::mt19937_64 rng(2);
  std::uniform_real_distribution<double> sp(0.5, 2.0);
  for (int trial = 0; trial < 30; ++trial) {
    const index_t n = trial % 3 == 0 ? 2 : 1;
    const auto a = random_labels(rng, n, 8, 3, 0.1), b = random_labels(rng, n, 8, 3, 0.1);
    const Spacing s{sp(rng), sp(rng), sp(rng)};
    for (std::int32_t c = 1; c < 3; ++c) {
      const auto got = hd95(a, b, c, s), expect = brute_hd95(a, b, c, s);
      ASSERT_EQ(got.has_value(), expect.has_value());
      if (got) ASSERT_NEAR(*got, *expect, 1e-9);
      ASSERT_EQ(got, hd95(b, a, c, s));
    }
  }
}

TEST(Hd95, BatchItemsAreMeasuredSeparately) {
  // class present in both volumes overall, but only in the prediction of item 0
  LabelVolume p(Shape{2, 1, 1, 4}), g(Shape{2, 1, 1, 4});
  p.data[0] = 1;
  g.data[7] = 1;
  EXPECT_FALSE(hd95(p, g, 1, Spacing{1, 1, 1}).has_value());
  p.data[4] = 1;
  g.data[3] = 1;
  EXPECT_EQ(hd95(p, g, 1, Spacing{1, 1, 1}), 3.0);
}

TEST(Percentile, NearestRank) {
  std::vector<double> v;
  for (int n = 1; n <= 19; ++n) {
    v.push_back(n);
    EXPECT_EQ(nearest_rank_percentile(v, 95), n) << n;
  }
  v.push_back(20);
  EXPECT_EQ(nearest_rank_percentile(v, 95), 19.0);
  std::vector<double> hundred(100);
  for (int i = 0; i < 100; ++i) hundred[static_cast<std::size_t>(i)] = 99 - i;
  EXPECT_EQ(nearest_rank_percentile(hundred, 95), 94.0);
  EXPECT_THROW(nearest_rank_percentile({}, 95), InvalidInput);
}

TEST(Evaluate, Conventions) {
  std::mt19937_64 rng(3);
  auto gt = random_labels(rng, 1, 6, 4, 0.6);
  const auto same = evaluate(gt, gt, 4, Spacing{1, 1, 1});
  EXPECT_EQ(same.classes, (std::vector<std::int32_t>{1, 2, 3}));
  for (double d : same.dice) EXPECT_EQ(d, 1.0);
  for (const auto& h : same.hd95) EXPECT_EQ(h, 0.0);
  EXPECT_EQ(same.mean_dice, 1.0);
  EXPECT_EQ(same.mean_hd95, 0.0);

  // class 4 absent from both: dice 1, hd95 0, included in the means
  const auto absent = evaluate(gt, gt, 5, Spacing{1, 1, 1});
  EXPECT_EQ(absent.dice.back(), 1.0);
  EXPECT_EQ(absent.hd95.back(), 0.0);

  // class only in ground truth: hd95 undefined and excluded from the mean
  auto pred = gt;
  for (auto& x : pred.data)
    if (x == 3) x = 0;
  const auto missing = evaluate(pred, gt, 4, Spacing{1, 1, 1});
  EXPECT_EQ(missing.dice[2], 0.0);
  EXPECT_FALSE(missing.hd95[2].has_value());
  EXPECT_EQ(missing.mean_hd95, 0.0);
  EXPECT_DOUBLE_EQ(missing.mean_dice, 2.0 / 3.0);

  EXPECT_THROW(evaluate(gt, gt, 1, Spacing{1, 1, 1}), InvalidInput);
}

TEST(Evaluate, MatchesBruteForce) {
  std::mt19937_64 rng(4);
  for (int trial = 0; trial < 10; ++trial) {
    const auto a = random_labels(rng, 1, 8, 4, 0.3), b = random_labels(rng, 1, 8, 4, 0.3);
    const Spacing s{1.5, 0.8, 0.8};
    const auto r = evaluate(a, b, 4, s);
    double hd_sum = 0;
    int hd_n = 0;
    for (std::int32_t c = 1; c < 4; ++c) {
      std::int64_t p = 0, g = 0, both = 0;
      for (std::size_t i = 0; i < a.data.size(); ++i) {
        p += a.data[i] == c;
        g += b.data[i] == c;
        both += a.data[i] == c && b.data[i] == c;
      }
      // integer counts, one correctly rounded division
      ASSERT_EQ(r.dice[static_cast<std::size_t>(c - 1)], double(2 * both) / double(p + g));
      const auto h = brute_hd95(a, b, c, s);
      ASSERT_NEAR(*r.hd95[static_cast<std::size_t>(c - 1)], *h, 1e-9);
      hd_sum += *h;
      ++hd_n;
    }
    ASSERT_NEAR(*r.mean_hd95, hd_sum / hd_n, 1e-9);
  }
}

TEST(Report, CsvFormat) {
  MetricReport r;
  r.classes = {1, 2};
  r.dice = {0.5, 1.0};
  r.hd95 = {std::optional<double>(2.25), std::nullopt};
  std::ostringstream os;
  write_report_csv(os, {{"case_0", r}});
  EXPECT_EQ(os.str(), "case,class,dice,hd95\ncase_0,1,0.5,2.25\ncase_0,2,1,undefined\n");
  EXPECT_EQ(format_hd95(std::nullopt), "undefined");
}
