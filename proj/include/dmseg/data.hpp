#pragma once

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <random>
#include <sstream>
#include <string>
#include <utility>
#include <vector>

#include "dmseg/label_volume.hpp"
#include "dmseg/layers.hpp"
#include "dmseg/metrics.hpp"
#include "dmseg/nifti.hpp"

namespace dmseg {

struct CaseRecord {
  std::string id;
  std::vector<std::string> images;  // one path per modality
  std::string label;
  Spacing spacing{1.0, 1.0, 1.0};
};

// One loaded case: image [C, D, H, W], label [1, D, H, W].
template <typename T>
struct Case {
  std::string id;
  Tensor<T> image;
  LabelVolume label;
  Spacing spacing{1.0, 1.0, 1.0};
};

namespace detail {

inline std::string trim(const std::string& s) {
  const auto b = s.find_first_not_of(" \t\r\n");
  if (b == std::string::npos) return "";
  const auto e = s.find_last_not_of(" \t\r\n");
  return s.substr(b, e - b + 1);
}

inline std::vector<std::string> split(const std::string& s, char sep) {
  std::vector<std::string> parts;
  std::string cur;
  std::istringstream is(s);
  while (std::getline(is, cur, sep)) parts.push_back(trim(cur));
  if (!s.empty() && s.back() == sep) parts.emplace_back();
  return parts;
}

inline double parse_double(const std::string& s, const std::string& what) {
  std::size_t used = 0;
  double v = 0.0;
  try {
    v = std::stod(s, &used);
  } catch (const std::exception&) {
    throw InvalidInput("cannot parse " + what + " '" + s + "'");
  }
  if (used != s.size()) throw InvalidInput("cannot parse " + what + " '" + s + "'");
  return v;
}

}  // namespace detail

// Manifest lines: `id,image_path[;image_path...],label_path,sd,sh,sw`.
// Blank lines and lines starting with '#' are skipped; relative paths are
// resolved against the manifest's directory.
inline std::vector<CaseRecord> read_manifest(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw InvalidInput("cannot open manifest " + path);
  const auto base = std::filesystem::path(path).parent_path();
  auto resolve = [&](const std::string& p) {
    const std::filesystem::path fp(p);
    return fp.is_absolute() ? fp.string() : (base / fp).string();
  };
  std::vector<CaseRecord> cases;
  std::string line;
  int lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    line = detail::trim(line);
    if (line.empty() || line[0] == '#') continue;
    const auto f = detail::split(line, ',');
    if (f.size() != 6) {
      throw InvalidInput(path + ":" + std::to_string(lineno) + ": expected 6 comma-separated fields, got " +
                         std::to_string(f.size()));
    }
    CaseRecord rec;
    rec.id = f[0];
    for (const auto& img : detail::split(f[1], ';'))
      if (!img.empty()) rec.images.push_back(resolve(img));
    if (rec.id.empty() || rec.images.empty() || f[2].empty()) {
      throw InvalidInput(path + ":" + std::to_string(lineno) + ": empty id or path");
    }
    rec.label = resolve(f[2]);
    for (int a = 0; a < 3; ++a) {
      rec.spacing[static_cast<std::size_t>(a)] = detail::parse_double(f[static_cast<std::size_t>(3 + a)], "spacing");
      if (!(rec.spacing[static_cast<std::size_t>(a)] > 0)) {
        throw InvalidInput(path + ":" + std::to_string(lineno) + ": spacing must be positive");
      }
    }
    cases.push_back(std::move(rec));
  }
  return cases;
}

inline void write_manifest(const std::string& path, const std::vector<CaseRecord>& cases) {
  std::ofstream out(path);
  if (!out) throw InvalidInput("cannot write manifest " + path);
  out.precision(17);
  for (const auto& c : cases) {
    out << c.id << ',';
    for (std::size_t i = 0; i < c.images.size(); ++i) out << (i ? ";" : "") << c.images[i];
    out << ',' << c.label << ',' << c.spacing[0] << ',' << c.spacing[1] << ',' << c.spacing[2] << '\n';
  }
}

// Label volume from a NIfTI holding integer class indices.
inline LabelVolume labels_from_nifti(const NiftiImage& img) {
  if (img.dims.size() != 3) throw InvalidInput("label volume must be 3-D");
  LabelVolume out(Shape{1, img.dims[0], img.dims[1], img.dims[2]});
  for (index_t i = 0; i < img.voxels(); ++i) {
    const double v = img.value(i);
    if (v != std::floor(v) || v < 0) throw InvalidInput("label volume holds a non-class value");
    out.data[static_cast<std::size_t>(i)] = static_cast<std::int32_t>(v);
  }
  return out;
}

inline NiftiImage labels_to_nifti(const LabelVolume& labels, const Spacing& spacing) {
  if (labels.shape[0] != 1) throw InvalidInput("labels_to_nifti: one case at a time");
  Tensor<double> v(Shape{labels.shape[1], labels.shape[2], labels.shape[3]});
  std::int32_t top = 0;
  for (index_t i = 0; i < labels.size(); ++i) {
    v[i] = labels.data[static_cast<std::size_t>(i)];
    top = std::max(top, labels.data[static_cast<std::size_t>(i)]);
  }
  return make_nifti(v, spacing, top <= 255 ? NiftiType::UInt8 : NiftiType::Int16);
}

template <typename T = float>
Case<T> load_case(const CaseRecord& rec) {
  Case<T> c;
  c.id = rec.id;
  c.spacing = rec.spacing;
  std::vector<T> values;
  Shape spatial;
  index_t channels = 0;
  for (const auto& path : rec.images) {
    const auto img = read_nifti(path);
    const Shape s = img.dims.size() == 4 ? Shape{img.dims[1], img.dims[2], img.dims[3]} : img.dims;
    if (!spatial.empty() && s != spatial) throw InvalidInput(rec.id + ": modalities differ in spatial dims");
    spatial = s;
    channels += img.dims.size() == 4 ? img.dims[0] : 1;
    const auto t = img.to_tensor<T>();
    values.insert(values.end(), t.values().begin(), t.values().end());
  }
  c.image = Tensor<T>(Shape{channels, spatial[0], spatial[1], spatial[2]}, std::move(values));
  c.label = labels_from_nifti(read_nifti(rec.label));
  if (Shape{c.label.shape[1], c.label.shape[2], c.label.shape[3]} != spatial) {
    throw InvalidInput(rec.id + ": label dims differ from image dims");
  }
  return c;
}

struct NormalizeScheme {
  enum class Kind { None, ZScore, Window } kind = Kind::ZScore;
  double lo = -175.0;  // window bounds (CT default)
  double hi = 250.0;

  static NormalizeScheme none() { return {Kind::None, 0, 0}; }
  static NormalizeScheme zscore() { return {Kind::ZScore, 0, 0}; }
  static NormalizeScheme window(double lo, double hi) { return {Kind::Window, lo, hi}; }
};

// zscore: (x - mean) / std per modality over the whole volume (std 0 -> 1).
// window: clip to [lo, hi], rescale to [0, 1]. Input [C,D,H,W] or [D,H,W].
template <typename T>
Tensor<T> intensity_normalize(const Tensor<T>& volume, const NormalizeScheme& scheme) {
  Tensor<T> out = volume.clone();
  if (scheme.kind == NormalizeScheme::Kind::None) return out;
  if (scheme.kind == NormalizeScheme::Kind::Window) {
    if (!(scheme.hi > scheme.lo)) throw InvalidInput("window: hi must exceed lo");
    for (auto& v : out.values()) {
      const double c = std::clamp(static_cast<double>(v), scheme.lo, scheme.hi);
      v = static_cast<T>((c - scheme.lo) / (scheme.hi - scheme.lo));
    }
    return out;
  }
  const index_t C = volume.rank() == 4 ? volume.dim(0) : 1;
  const index_t V = volume.numel() / C;
  for (index_t c = 0; c < C; ++c) {
    T* p = out.values().data() + c * V;
    double mean = 0.0;
    for (index_t i = 0; i < V; ++i) mean += p[i];
    mean /= double(V);
    double var = 0.0;
    for (index_t i = 0; i < V; ++i) var += (p[i] - mean) * (p[i] - mean);
    var /= double(V);
    const double sd = var > 0.0 ? std::sqrt(var) : 1.0;
    for (index_t i = 0; i < V; ++i) p[i] = static_cast<T>((p[i] - mean) / sd);
  }
  return out;
}

// Mirror index without edge repetition (period 2n - 2); n == 1 maps to 0.
inline index_t reflect_index(index_t i, index_t n) {
  if (n == 1) return 0;
  const index_t period = 2 * n - 2;
  i %= period;
  if (i < 0) i += period;
  return i < n ? i : period - i;
}

template <typename T>
struct Crop {
  Tensor<T> image;
  LabelVolume label;
  Triple corner{};
};

// Reflect-pads each axis symmetrically up to `size` when it is shorter.
template <typename T>
std::pair<Tensor<T>, LabelVolume> pad_reflect(const Tensor<T>& image, const LabelVolume& label, const Triple& size) {
  const index_t C = image.dim(0);
  const Triple in{image.dim(1), image.dim(2), image.dim(3)};
  Triple out{}, before{};
  for (int a = 0; a < 3; ++a) {
    out[a] = std::max(in[a], size[a]);
    before[a] = (out[a] - in[a]) / 2;
  }
  if (out == in) return {image, label};
  Tensor<T> img(Shape{C, out[0], out[1], out[2]});
  LabelVolume lab(Shape{1, out[0], out[1], out[2]});
  for (index_t d = 0; d < out[0]; ++d)
    for (index_t h = 0; h < out[1]; ++h)
      for (index_t w = 0; w < out[2]; ++w) {
        const index_t sd = reflect_index(d - before[0], in[0]);
        const index_t sh = reflect_index(h - before[1], in[1]);
        const index_t sw = reflect_index(w - before[2], in[2]);
        const index_t src = (sd * in[1] + sh) * in[2] + sw;
        const index_t dst = (d * out[1] + h) * out[2] + w;
        for (index_t c = 0; c < C; ++c) img[c * out[0] * out[1] * out[2] + dst] = image[c * in[0] * in[1] * in[2] + src];
        lab.data[static_cast<std::size_t>(dst)] = label.data[static_cast<std::size_t>(src)];
      }
  return {img, lab};
}

// Same uniformly random window from image [C,D,H,W] and label [1,D,H,W];
// axes shorter than the crop are reflect-padded first.
template <typename T, typename Engine>
Crop<T> random_crop(const Tensor<T>& image, const LabelVolume& label, const Triple& size, Engine& rng) {
  if (image.rank() != 4 || label.shape.size() != 4 || label.shape[0] != 1 ||
      Shape{label.shape[1], label.shape[2], label.shape[3]} != Shape{image.dim(1), image.dim(2), image.dim(3)}) {
    throw InvalidInput("random_crop: expected image [C,D,H,W] and label [1,D,H,W] with matching dims");
  }
  for (auto s : size)
    if (s <= 0) throw InvalidInput("random_crop: crop size must be positive");
  const auto [img, lab] = pad_reflect(image, label, size);
  const index_t C = img.dim(0);
  const Triple dims{img.dim(1), img.dim(2), img.dim(3)};
  Crop<T> crop;
  for (int a = 0; a < 3; ++a) {
    std::uniform_int_distribution<index_t> pick(0, dims[a] - size[a]);
    crop.corner[a] = pick(rng);
  }
  crop.image = Tensor<T>(Shape{C, size[0], size[1], size[2]});
  crop.label = LabelVolume(Shape{1, size[0], size[1], size[2]});
  const index_t V = dims[0] * dims[1] * dims[2], CV = size[0] * size[1] * size[2];
  for (index_t d = 0; d < size[0]; ++d)
    for (index_t h = 0; h < size[1]; ++h) {
      const index_t src = ((d + crop.corner[0]) * dims[1] + h + crop.corner[1]) * dims[2] + crop.corner[2];
      const index_t dst = (d * size[1] + h) * size[2];
      for (index_t c = 0; c < C; ++c)
        std::copy_n(img.values().begin() + c * V + src, size[2], crop.image.values().begin() + c * CV + dst);
      std::copy_n(lab.data.begin() + src, size[2], crop.label.data.begin() + dst);
    }
  return crop;
}

// Seeded shuffle, then floor(f * n) cases per part; the leftover cases go
// one at a time to train, val, test, train, ...
template <typename Item>
std::array<std::vector<Item>, 3> split_dataset(std::vector<Item> cases, const std::array<double, 3>& fractions,
                                               std::uint64_t seed) {
  const double total = fractions[0] + fractions[1] + fractions[2];
  for (double f : fractions)
    if (f < 0) throw InvalidInput("split_dataset: fractions must be non-negative");
  if (std::fabs(total - 1.0) > 1e-9) throw InvalidInput("split_dataset: fractions must sum to 1");
  if (cases.size() < 3) throw InvalidInput("split_dataset: need at least 3 cases");
  Rng rng(seed);
  for (std::size_t i = cases.size() - 1; i > 0; --i) {
    std::uniform_int_distribution<std::size_t> pick(0, i);
    std::swap(cases[i], cases[pick(rng)]);
  }
  const auto n = static_cast<double>(cases.size());
  std::array<std::size_t, 3> count{};
  std::size_t assigned = 0;
  for (int k = 0; k < 3; ++k) {
    count[static_cast<std::size_t>(k)] = static_cast<std::size_t>(std::floor(fractions[static_cast<std::size_t>(k)] * n + 1e-9));
    assigned += count[static_cast<std::size_t>(k)];
  }
  for (std::size_t k = 0; assigned < cases.size(); k = (k + 1) % 3, ++assigned) ++count[k];
  std::array<std::vector<Item>, 3> parts;
  std::size_t at = 0;
  for (std::size_t k = 0; k < 3; ++k) {
    parts[k].assign(cases.begin() + static_cast<std::ptrdiff_t>(at), cases.begin() + static_cast<std::ptrdiff_t>(at + count[k]));
    at += count[k];
  }
  return parts;
}

}  // namespace dmseg
