#pragma once

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdint>
#include <limits>
#include <optional>
#include <ostream>
#include <sstream>
#include <string>
#include <vector>

#include "dmseg/label_volume.hpp"

namespace dmseg {

using Spacing = std::array<double, 3>;  // (sd, sh, sw) in mm per voxel

namespace detail {

inline void require_same_shape(const LabelVolume& a, const LabelVolume& b, const char* op) {
  if (a.shape != b.shape) {
    throw InvalidInput(std::string(op) + ": shape mismatch " + to_string(a.shape) + " vs " + to_string(b.shape));
  }
}

inline void require_spacing(const Spacing& spacing) {
  for (double s : spacing)
    if (!(s > 0.0)) throw InvalidInput("spacing must be positive");
}

// 1-D squared distance transform under weight w (lower envelope of
// parabolas): out[p] = min_q f[q] + (w * (p - q))^2.
inline void edt_1d(const double* f, index_t n, double w, double* out, std::vector<index_t>& v,
                   std::vector<double>& z) {
  constexpr double inf = std::numeric_limits<double>::infinity();
  const double w2 = w * w;
  index_t k = -1;
  for (index_t q = 0; q < n; ++q) {
    if (f[q] == inf) continue;
    while (k >= 0) {
      const index_t r = v[static_cast<std::size_t>(k)];
      const double s = ((f[q] + w2 * double(q * q)) - (f[r] + w2 * double(r * r))) / (2.0 * w2 * double(q - r));
      if (s > z[static_cast<std::size_t>(k)]) break;
      --k;
    }
    ++k;
    v[static_cast<std::size_t>(k)] = q;
    z[static_cast<std::size_t>(k)] = k == 0 ? -inf : [&] {
      const index_t r = v[static_cast<std::size_t>(k - 1)];
      return ((f[q] + w2 * double(q * q)) - (f[r] + w2 * double(r * r))) / (2.0 * w2 * double(q - r));
    }();
  }
  if (k < 0) {
    std::fill(out, out + n, inf);
    return;
  }
  index_t j = 0;
  for (index_t p = 0; p < n; ++p) {
    while (j < k && z[static_cast<std::size_t>(j + 1)] < double(p)) ++j;
    const index_t q = v[static_cast<std::size_t>(j)];
    const double d = w * double(p - q);
    out[p] = f[q] + d * d;
  }
}

}  // namespace detail

// Squared Euclidean distance (mm^2) from every voxel of a D x H x W grid to
// the nearest voxel where `target` is true; +inf when target is empty.
inline std::vector<double> squared_distance_to(const std::vector<bool>& target, index_t D, index_t H, index_t W,
                                               const Spacing& spacing) {
  constexpr double inf = std::numeric_limits<double>::infinity();
  std::vector<double> dist(target.size());
  for (std::size_t i = 0; i < target.size(); ++i) dist[i] = target[i] ? 0.0 : inf;
  const index_t longest = std::max({D, H, W});
  std::vector<double> line(static_cast<std::size_t>(longest)), out(static_cast<std::size_t>(longest));
  std::vector<index_t> v(static_cast<std::size_t>(longest));
  std::vector<double> z(static_cast<std::size_t>(longest) + 1);
  const std::array<index_t, 3> dims{D, H, W};
  const std::array<index_t, 3> strides{H * W, W, 1};
  for (int axis = 2; axis >= 0; --axis) {
    const index_t n = dims[static_cast<std::size_t>(axis)];
    const index_t stride = strides[static_cast<std::size_t>(axis)];
    for (index_t base = 0; base < D * H * W; ++base) {
      // visit each line once, from its first element
      if ((base / stride) % n != 0) continue;
      for (index_t i = 0; i < n; ++i) line[static_cast<std::size_t>(i)] = dist[static_cast<std::size_t>(base + i * stride)];
      detail::edt_1d(line.data(), n, spacing[static_cast<std::size_t>(axis)], out.data(), v, z);
      for (index_t i = 0; i < n; ++i) dist[static_cast<std::size_t>(base + i * stride)] = out[static_cast<std::size_t>(i)];
    }
  }
  return dist;
}

// 2|P∩G| / (|P|+|G|) for class `cls`; 1 when both masks are empty.
inline double dice(const LabelVolume& pred, const LabelVolume& gt, std::int32_t cls) {
  detail::require_same_shape(pred, gt, "dice");
  std::int64_t p = 0, g = 0, both = 0;
  for (std::size_t i = 0; i < pred.data.size(); ++i) {
    const bool a = pred.data[i] == cls, b = gt.data[i] == cls;
    p += a;
    g += b;
    both += a && b;
  }
  if (p + g == 0) return 1.0;
  return 2.0 * double(both) / double(p + g);
}

// Nearest-rank percentile: the ceil(q/100 * n)-th smallest value.
inline double nearest_rank_percentile(std::vector<double> values, int q) {
  if (values.empty()) throw InvalidInput("percentile of an empty set");
  const auto n = static_cast<std::int64_t>(values.size());
  const std::int64_t rank = std::max<std::int64_t>(1, (q * n + 99) / 100);
  std::nth_element(values.begin(), values.begin() + (rank - 1), values.end());
  return values[static_cast<std::size_t>(rank - 1)];
}

// Directed distances from every voxel of `from` to the nearest voxel of
// `to`, each case of the batch measured separately, appended to `out`.
inline void directed_distances(const LabelVolume& from, const LabelVolume& to, std::int32_t cls,
                               const Spacing& spacing, std::vector<double>& out) {
  const index_t N = from.shape[0], D = from.shape[1], H = from.shape[2], W = from.shape[3];
  const index_t V = D * H * W;
  for (index_t n = 0; n < N; ++n) {
    std::vector<bool> target(static_cast<std::size_t>(V));
    bool any_source = false;
    for (index_t i = 0; i < V; ++i) {
      target[static_cast<std::size_t>(i)] = to.data[static_cast<std::size_t>(n * V + i)] == cls;
      any_source = any_source || from.data[static_cast<std::size_t>(n * V + i)] == cls;
    }
    if (!any_source) continue;
    const auto sq = squared_distance_to(target, D, H, W, spacing);
    for (index_t i = 0; i < V; ++i)
      if (from.data[static_cast<std::size_t>(n * V + i)] == cls) out.push_back(std::sqrt(sq[static_cast<std::size_t>(i)]));
  }
}

// 95th percentile (nearest rank) of the pooled directed point-set distances
// between the class masks. Both empty -> 0; exactly one empty -> nullopt.
// Distances never cross batch items; a batch item holding only one of the
// two masks also makes the result nullopt.
inline std::optional<double> hd95(const LabelVolume& pred, const LabelVolume& gt, std::int32_t cls,
                                  const Spacing& spacing) {
  detail::require_same_shape(pred, gt, "hd95");
  detail::require_spacing(spacing);
  std::int64_t p = 0, g = 0;
  for (std::size_t i = 0; i < pred.data.size(); ++i) {
    p += pred.data[i] == cls;
    g += gt.data[i] == cls;
  }
  if (p == 0 && g == 0) return 0.0;
  if (p == 0 || g == 0) return std::nullopt;
  const index_t V = pred.voxels_per_case();
  for (index_t n = 0; n < pred.shape[0]; ++n) {
    bool in_p = false, in_g = false;
    for (index_t i = n * V; i < (n + 1) * V; ++i) {
      in_p = in_p || pred.data[static_cast<std::size_t>(i)] == cls;
      in_g = in_g || gt.data[static_cast<std::size_t>(i)] == cls;
    }
    if (in_p != in_g) return std::nullopt;
  }
  std::vector<double> pooled;
  pooled.reserve(static_cast<std::size_t>(p + g));
  directed_distances(pred, gt, cls, spacing, pooled);
  directed_distances(gt, pred, cls, spacing, pooled);
  return nearest_rank_percentile(std::move(pooled), 95);
}

struct MetricReport {
  std::vector<std::int32_t> classes;              // 1..K-1
  std::vector<double> dice;                       // per class
  std::vector<std::optional<double>> hd95;        // per class; nullopt = undefined
  double mean_dice = 0.0;
  std::optional<double> mean_hd95;                // over defined entries only
};

inline MetricReport evaluate(const LabelVolume& pred, const LabelVolume& gt, std::int32_t num_classes,
                             const Spacing& spacing) {
  detail::require_same_shape(pred, gt, "evaluate");
  detail::require_spacing(spacing);
  if (num_classes < 2) throw InvalidInput("evaluate: need at least 2 classes");
  MetricReport r;
  double hd_sum = 0.0;
  int hd_count = 0;
  for (std::int32_t c = 1; c < num_classes; ++c) {
    r.classes.push_back(c);
    r.dice.push_back(dice(pred, gt, c));
    r.hd95.push_back(hd95(pred, gt, c, spacing));
    if (r.hd95.back()) {
      hd_sum += *r.hd95.back();
      ++hd_count;
    }
  }
  double dice_sum = 0.0;
  for (double d : r.dice) dice_sum += d;
  r.mean_dice = dice_sum / double(r.dice.size());
  if (hd_count) r.mean_hd95 = hd_sum / hd_count;
  return r;
}

inline std::string format_hd95(const std::optional<double>& v) {
  if (!v) return "undefined";
  std::ostringstream os;
  os.precision(17);
  os << *v;
  return os.str();
}

// Header `case,class,dice,hd95`, one row per (case, class).
inline void write_report_csv(std::ostream& os, const std::vector<std::pair<std::string, MetricReport>>& reports) {
  os << "case,class,dice,hd95\n";
  std::ostringstream num;
  for (const auto& [id, r] : reports) {
    for (std::size_t i = 0; i < r.classes.size(); ++i) {
      num.str("");
      num.precision(17);
      num << r.dice[i];
      os << id << ',' << r.classes[i] << ',' << num.str() << ',' << format_hd95(r.hd95[i]) << '\n';
    }
  }
}

}  // namespace dmseg
