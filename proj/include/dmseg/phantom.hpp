#pragma once

#include <algorithm>
#include <cstdio>
#include <filesystem>
#include <random>
#include <string>
#include <utility>
#include <vector>

#include "dmseg/data.hpp"

// Synthetic labeled volumes: non-overlapping random ellipsoids per class.
namespace dmseg {

struct PhantomSpec {
  index_t size = 32;
  std::int32_t num_classes = 3;
  int min_shapes = 1;  // ellipsoids per foreground class
  int max_shapes = 2;
  double noise_sigma = 0.1;
  double band_halfwidth = 0.15;  // per-ellipsoid offset around the class level
  std::uint64_t seed = 7;

  void validate() const {
    if (size <= 0 || size % 16 != 0) throw InvalidSpec("phantom size must be a positive multiple of 16");
    if (num_classes < 2) throw InvalidSpec("phantom needs at least 2 classes");
    if (min_shapes < 1 || max_shapes < min_shapes) throw InvalidSpec("phantom shape count range is invalid");
    if (noise_sigma < 0) throw InvalidSpec("phantom noise sigma must be non-negative");
    if (band_halfwidth < 0 || band_halfwidth >= 0.5) throw InvalidSpec("phantom band half-width must lie in [0, 0.5)");
  }
};

template <typename T>
struct Phantom {
  Tensor<T> image;    // [1, S, S, S]
  LabelVolume label;  // [1, S, S, S]
};

// Class c ellipsoids sit at intensity c + offset with |offset| <= band_halfwidth,
// background at 0, then Gaussian noise is added. With sigma 0 rounding the
// intensity recovers the label.
template <typename T = float>
Phantom<T> generate_phantom(const PhantomSpec& spec, Rng& rng) {
  spec.validate();
  const index_t S = spec.size;
  Phantom<T> ph{Tensor<T>(Shape{1, S, S, S}), LabelVolume(Shape{1, S, S, S})};
  auto& lab = ph.label.data;
  std::vector<double> level(static_cast<std::size_t>(S * S * S), 0.0);
  std::uniform_real_distribution<double> unit(0.0, 1.0);
  std::uniform_int_distribution<int> count(spec.min_shapes, spec.max_shapes);

  for (std::int32_t cls = 1; cls < spec.num_classes; ++cls) {
    const int shapes = count(rng);
    int placed = 0;
    double rmax = double(S) / 4.0;
    for (int attempt = 0; placed < shapes; ++attempt) {
      if (attempt > 0 && attempt % 50 == 0) rmax = std::max(1.0, rmax * 0.75);
      if (attempt > 1000) {
        if (placed > 0) break;
        throw InvalidSpec("phantom: could not place a shape for every class");
      }
      const double rmin = std::max(1.0, rmax / 2.0);
      double r[3], c[3];
      for (int a = 0; a < 3; ++a) {
        r[a] = rmin + (rmax - rmin) * unit(rng);
        c[a] = r[a] + 0.5 + (double(S) - 1.0 - 2.0 * r[a] - 1.0) * unit(rng);
      }
      std::vector<index_t> voxels;
      bool clash = false;
      for (index_t d = 0; d < S && !clash; ++d)
        for (index_t h = 0; h < S && !clash; ++h)
          for (index_t w = 0; w < S; ++w) {
            const double x = (double(d) - c[0]) / r[0], y = (double(h) - c[1]) / r[1], z = (double(w) - c[2]) / r[2];
            const double q = x * x + y * y + z * z;
            // one-voxel margin keeps shapes visibly separated
            const double xm = (double(d) - c[0]) / (r[0] + 1.0), ym = (double(h) - c[1]) / (r[1] + 1.0),
                         zm = (double(w) - c[2]) / (r[2] + 1.0);
            const index_t i = (d * S + h) * S + w;
            if (xm * xm + ym * ym + zm * zm <= 1.0 && lab[static_cast<std::size_t>(i)] != 0) {
              clash = true;
              break;
            }
            if (q <= 1.0) voxels.push_back(i);
          }
      if (clash || voxels.empty()) continue;
      const double offset = spec.band_halfwidth * (2.0 * unit(rng) - 1.0);
      for (index_t i : voxels) {
        lab[static_cast<std::size_t>(i)] = cls;
        level[static_cast<std::size_t>(i)] = double(cls) + offset;
      }
      ++placed;
    }
  }
  std::normal_distribution<double> noise(0.0, spec.noise_sigma);
  for (index_t i = 0; i < S * S * S; ++i) {
    ph.image[i] = static_cast<T>(level[static_cast<std::size_t>(i)] + (spec.noise_sigma > 0 ? noise(rng) : 0.0));
  }
  return ph;
}

// Writes `count` phantoms as case_NNN_image.nii.gz / case_NNN_label.nii.gz
// plus manifest.csv into `dir`; returns the manifest path.
inline std::string write_phantom_dataset(const std::string& dir, int count, const PhantomSpec& spec) {
  if (count < 1) throw InvalidInput("phantom count must be positive");
  spec.validate();
  std::filesystem::create_directories(dir);
  Rng rng(spec.seed);
  std::vector<CaseRecord> records;
  const Spacing spacing{1.0, 1.0, 1.0};
  for (int n = 0; n < count; ++n) {
    char id[32];
    std::snprintf(id, sizeof id, "case_%03d", n);
    const auto ph = generate_phantom<float>(spec, rng);
    const std::string image = std::string(id) + "_image.nii.gz", label = std::string(id) + "_label.nii.gz";
    const index_t S = spec.size;
    write_nifti((std::filesystem::path(dir) / image).string(),
                make_nifti(Tensor<float>(Shape{S, S, S}, ph.image.values()), spacing, NiftiType::Float32));
    write_nifti((std::filesystem::path(dir) / label).string(), labels_to_nifti(ph.label, spacing));
    records.push_back(CaseRecord{id, {image}, label, spacing});
  }
  const auto manifest = (std::filesystem::path(dir) / "manifest.csv").string();
  write_manifest(manifest, records);
  return manifest;
}

}  // namespace dmseg
