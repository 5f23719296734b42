#pragma once

#include <zlib.h>

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdint>
#include <cstdio>
#include <cstring>
#include <string>
#include <vector>

#include "dmseg/error.hpp"
#include "dmseg/metrics.hpp"
#include "dmseg/tensor.hpp"

// Minimal NIfTI-1 single-file support (.nii and .nii.gz): uint8, int16 and
// float32 voxels, 3-D volumes or 4-D stacks of 3-D volumes.
namespace dmseg {

enum class NiftiType : std::int16_t { UInt8 = 2, Int16 = 4, Float32 = 16 };

inline int nifti_type_size(NiftiType t) {
  switch (t) {
    case NiftiType::UInt8: return 1;
    case NiftiType::Int16: return 2;
    case NiftiType::Float32: return 4;
  }
  return 0;
}

// Decoded file. `dims` is [D,H,W] or [C,D,H,W] (NIfTI dim[1] = W is the
// fastest axis, so the payload is already in row-major [.., D, H, W] order).
struct NiftiImage {
  Shape dims;
  Spacing spacing{1.0, 1.0, 1.0};
  NiftiType type = NiftiType::Float32;
  double slope = 1.0;   // 0 in the header means "no scaling"
  double inter = 0.0;
  std::vector<std::uint8_t> payload;  // little-endian voxel bytes as stored

  index_t voxels() const { return numel(dims); }

  // Stored value times slope plus intercept.
  double value(index_t i) const {
    double raw = 0.0;
    const std::uint8_t* p = payload.data() + i * nifti_type_size(type);
    switch (type) {
      case NiftiType::UInt8: raw = *p; break;
      case NiftiType::Int16: {
        std::int16_t v;
        std::memcpy(&v, p, 2);
        raw = v;
        break;
      }
      case NiftiType::Float32: {
        float v;
        std::memcpy(&v, p, 4);
        raw = v;
        break;
      }
    }
    return raw * slope + inter;
  }

  template <typename T = float>
  Tensor<T> to_tensor() const {
    std::vector<T> v(static_cast<std::size_t>(voxels()));
    for (index_t i = 0; i < voxels(); ++i) v[static_cast<std::size_t>(i)] = static_cast<T>(value(i));
    return Tensor<T>(dims, std::move(v));
  }
};

namespace detail {

constexpr int kNiftiHeaderSize = 348;

template <typename V>
V read_field(const std::uint8_t* hdr, int offset, bool swap) {
  std::array<std::uint8_t, sizeof(V)> b;
  std::memcpy(b.data(), hdr + offset, sizeof(V));
  if (swap) std::reverse(b.begin(), b.end());
  V v;
  std::memcpy(&v, b.data(), sizeof(V));
  return v;
}

template <typename V>
void write_field(std::uint8_t* hdr, int offset, V v) {
  std::memcpy(hdr + offset, &v, sizeof(V));
}

class GzFile {
 public:
  GzFile(const std::string& path, const char* mode) : f_(gzopen(path.c_str(), mode)) {
    if (!f_) throw FormatError("cannot open " + path);
  }
  ~GzFile() {
    if (f_) gzclose(f_);
  }
  GzFile(const GzFile&) = delete;
  GzFile& operator=(const GzFile&) = delete;

  std::size_t read(void* dst, std::size_t n) {
    std::size_t done = 0;
    while (done < n) {
      const unsigned chunk = static_cast<unsigned>(std::min<std::size_t>(n - done, 1u << 30));
      const int got = gzread(f_, static_cast<std::uint8_t*>(dst) + done, chunk);
      if (got < 0) throw FormatError("decompression failed");
      if (got == 0) break;
      done += static_cast<std::size_t>(got);
    }
    return done;
  }
  void write(const void* src, std::size_t n) {
    std::size_t done = 0;
    while (done < n) {
      const unsigned chunk = static_cast<unsigned>(std::min<std::size_t>(n - done, 1u << 30));
      const int put = gzwrite(f_, static_cast<const std::uint8_t*>(src) + done, chunk);
      if (put <= 0) throw FormatError("write failed");
      done += static_cast<std::size_t>(put);
    }
  }
  void close() {
    const int rc = gzclose(f_);
    f_ = nullptr;
    if (rc != Z_OK) throw FormatError("closing file failed");
  }

 private:
  gzFile f_;
};

inline bool ends_with(const std::string& s, const std::string& suffix) {
  return s.size() >= suffix.size() && s.compare(s.size() - suffix.size(), suffix.size(), suffix) == 0;
}

}  // namespace detail

inline NiftiImage read_nifti(const std::string& path) {
  detail::GzFile file(path, "rb");
  std::array<std::uint8_t, detail::kNiftiHeaderSize> hdr{};
  if (file.read(hdr.data(), hdr.size()) != hdr.size()) throw FormatError(path + ": truncated NIfTI header");
  bool swap = false;
  const auto sizeof_hdr = detail::read_field<std::int32_t>(hdr.data(), 0, false);
  if (sizeof_hdr != detail::kNiftiHeaderSize) {
    if (detail::read_field<std::int32_t>(hdr.data(), 0, true) != detail::kNiftiHeaderSize) {
      throw FormatError(path + ": not a NIfTI-1 header (sizeof_hdr " + std::to_string(sizeof_hdr) + ")");
    }
    swap = true;
  }
  if (std::memcmp(hdr.data() + 344, "n+1\0", 4) != 0) {
    if (std::memcmp(hdr.data() + 344, "ni1\0", 4) == 0) {
      throw UnsupportedFeature(path + ": two-file NIfTI (.hdr/.img) is not supported");
    }
    throw FormatError(path + ": bad NIfTI magic");
  }
  std::array<std::int16_t, 8> dim{};
  for (int i = 0; i < 8; ++i) dim[static_cast<std::size_t>(i)] = detail::read_field<std::int16_t>(hdr.data(), 40 + 2 * i, swap);
  const int ndim = dim[0];
  if (ndim < 3 || ndim > 4) throw UnsupportedFeature(path + ": only 3-D and 4-D images are supported");
  for (int i = 1; i <= ndim; ++i)
    if (dim[static_cast<std::size_t>(i)] <= 0) throw FormatError(path + ": non-positive dimension");
  const auto datatype = detail::read_field<std::int16_t>(hdr.data(), 70, swap);
  NiftiImage img;
  switch (datatype) {
    case 2: img.type = NiftiType::UInt8; break;
    case 4: img.type = NiftiType::Int16; break;
    case 16: img.type = NiftiType::Float32; break;
    default: throw UnsupportedFeature(path + ": unsupported datatype " + std::to_string(datatype));
  }
  const auto bitpix = detail::read_field<std::int16_t>(hdr.data(), 72, swap);
  if (bitpix != 8 * nifti_type_size(img.type)) throw FormatError(path + ": bitpix does not match datatype");
  for (int a = 0; a < 3; ++a) {
    const float p = detail::read_field<float>(hdr.data(), 76 + 4 * (3 - a), swap);  // pixdim[3], [2], [1]
    img.spacing[static_cast<std::size_t>(a)] = p > 0.0f ? double(p) : 1.0;
  }
  const float vox_offset = detail::read_field<float>(hdr.data(), 108, swap);
  const float slope = detail::read_field<float>(hdr.data(), 112, swap);
  const float inter = detail::read_field<float>(hdr.data(), 116, swap);
  if (slope != 0.0f && std::isfinite(slope)) {
    img.slope = slope;
    img.inter = std::isfinite(inter) ? double(inter) : 0.0;
  }
  img.dims = ndim == 4 ? Shape{dim[4], dim[3], dim[2], dim[1]} : Shape{dim[3], dim[2], dim[1]};
  const auto offset = static_cast<std::size_t>(vox_offset);
  if (offset < static_cast<std::size_t>(detail::kNiftiHeaderSize)) throw FormatError(path + ": vox_offset inside header");
  std::vector<std::uint8_t> skip(offset - detail::kNiftiHeaderSize);
  if (file.read(skip.data(), skip.size()) != skip.size()) throw FormatError(path + ": truncated before voxel data");
  const int bytes = nifti_type_size(img.type);
  img.payload.resize(static_cast<std::size_t>(img.voxels() * bytes));
  if (file.read(img.payload.data(), img.payload.size()) != img.payload.size()) {
    throw FormatError(path + ": truncated voxel data");
  }
  if (swap && bytes > 1) {
    for (std::size_t i = 0; i < img.payload.size(); i += static_cast<std::size_t>(bytes)) {
      std::reverse(img.payload.begin() + static_cast<std::ptrdiff_t>(i),
                   img.payload.begin() + static_cast<std::ptrdiff_t>(i) + bytes);
    }
  }
  return img;
}

// Writes little-endian NIfTI-1; gzip-compressed when the path ends in ".gz".
inline void write_nifti(const std::string& path, const NiftiImage& img) {
  if (img.dims.size() != 3 && img.dims.size() != 4) throw InvalidInput("write_nifti: dims must be [D,H,W] or [C,D,H,W]");
  for (auto d : img.dims)
    if (d <= 0 || d > 32767) throw InvalidInput("write_nifti: dimension out of range");
  if (static_cast<index_t>(img.payload.size()) != img.voxels() * nifti_type_size(img.type)) {
    throw InvalidInput("write_nifti: payload size does not match dims and type");
  }
  std::array<std::uint8_t, 352> hdr{};
  detail::write_field<std::int32_t>(hdr.data(), 0, detail::kNiftiHeaderSize);
  const bool four = img.dims.size() == 4;
  const index_t off = four ? 1 : 0;
  std::array<std::int16_t, 8> dim{};
  dim[0] = static_cast<std::int16_t>(four ? 4 : 3);
  dim[1] = static_cast<std::int16_t>(img.dims[static_cast<std::size_t>(off + 2)]);
  dim[2] = static_cast<std::int16_t>(img.dims[static_cast<std::size_t>(off + 1)]);
  dim[3] = static_cast<std::int16_t>(img.dims[static_cast<std::size_t>(off)]);
  dim[4] = static_cast<std::int16_t>(four ? img.dims[0] : 1);
  for (int i = 5; i < 8; ++i) dim[static_cast<std::size_t>(i)] = 1;
  for (int i = 0; i < 8; ++i) detail::write_field<std::int16_t>(hdr.data(), 40 + 2 * i, dim[static_cast<std::size_t>(i)]);
  detail::write_field<std::int16_t>(hdr.data(), 70, static_cast<std::int16_t>(img.type));
  detail::write_field<std::int16_t>(hdr.data(), 72, static_cast<std::int16_t>(8 * nifti_type_size(img.type)));
  detail::write_field<float>(hdr.data(), 76, 1.0f);  // qfac
  detail::write_field<float>(hdr.data(), 80, static_cast<float>(img.spacing[2]));
  detail::write_field<float>(hdr.data(), 84, static_cast<float>(img.spacing[1]));
  detail::write_field<float>(hdr.data(), 88, static_cast<float>(img.spacing[0]));
  detail::write_field<float>(hdr.data(), 92, 1.0f);
  detail::write_field<float>(hdr.data(), 108, 352.0f);
  detail::write_field<float>(hdr.data(), 112, static_cast<float>(img.slope));
  detail::write_field<float>(hdr.data(), 116, static_cast<float>(img.inter));
  hdr[123] = 2 | 8;  // xyzt_units: mm, sec
  std::memcpy(hdr.data() + 344, "n+1\0", 4);
  const std::string tmp = path + ".tmp";
  {
    detail::GzFile file(tmp, detail::ends_with(path, ".gz") ? "wb6" : "wbT");
    file.write(hdr.data(), hdr.size());
    file.write(img.payload.data(), img.payload.size());
    file.close();
  }
  if (std::rename(tmp.c_str(), path.c_str()) != 0) throw FormatError("cannot move " + tmp + " to " + path);
}

// Encodes values into `type`, rejecting values the type cannot hold exactly.
template <typename T>
NiftiImage make_nifti(const Tensor<T>& volume, const Spacing& spacing, NiftiType type) {
  NiftiImage img;
  img.dims = volume.shape();
  img.spacing = spacing;
  img.type = type;
  const int bytes = nifti_type_size(type);
  img.payload.resize(static_cast<std::size_t>(volume.numel() * bytes));
  for (index_t i = 0; i < volume.numel(); ++i) {
    const double v = static_cast<double>(volume[i]);
    std::uint8_t* p = img.payload.data() + i * bytes;
    switch (type) {
      case NiftiType::UInt8: {
        if (v != std::floor(v) || v < 0 || v > 255) throw InvalidInput("make_nifti: value not representable as uint8");
        *p = static_cast<std::uint8_t>(v);
        break;
      }
      case NiftiType::Int16: {
        if (v != std::floor(v) || v < -32768 || v > 32767) {
          throw InvalidInput("make_nifti: value not representable as int16");
        }
        const auto s = static_cast<std::int16_t>(v);
        std::memcpy(p, &s, 2);
        break;
      }
      case NiftiType::Float32: {
        const auto f = static_cast<float>(v);
        std::memcpy(p, &f, 4);
        break;
      }
    }
  }
  return img;
}

}  // namespace dmseg
