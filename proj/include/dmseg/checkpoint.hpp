#pragma once

#include <zlib.h>

#include <algorithm>
#include <cstdint>
#include <cstdio>
#include <cstring>
#include <fstream>
#include <iterator>
#include <string>
#include <type_traits>
#include <vector>

#include "dmseg/tensor.hpp"

// Binary checkpoint:
//   "DMSG" | u32 version | u32 len + config text | u64 step | u32 len + rng text
//   | u32 count | count x (u32 len + name, u8 dtype, u32 rank, rank x u64 dim,
//   u64 offset, u64 nbytes, u32 crc32) | payloads
// Integers and payloads are little-endian; offsets are relative to the start
// of the payload area.
namespace dmseg {

inline constexpr std::uint32_t kCheckpointVersion = 1;

enum class DType : std::uint8_t { Float32 = 1, Float64 = 2 };

struct CheckpointTensor {
  std::string name;
  DType dtype = DType::Float32;
  Shape shape;
  std::vector<unsigned char> bytes;  // little-endian payload
};

struct CheckpointData {
  std::string config;
  std::uint64_t step = 0;
  std::string rng_state;
  std::vector<CheckpointTensor> tensors;

  const CheckpointTensor* find(const std::string& name) const {
    for (const auto& t : tensors)
      if (t.name == name) return &t;
    return nullptr;
  }
};

namespace detail {

template <typename U>
void put_le(std::vector<unsigned char>& out, U v) {
  for (std::size_t i = 0; i < sizeof(U); ++i) out.push_back(static_cast<unsigned char>((v >> (8 * i)) & 0xff));
}

inline void put_string(std::vector<unsigned char>& out, const std::string& s) {
  put_le<std::uint32_t>(out, static_cast<std::uint32_t>(s.size()));
  out.insert(out.end(), s.begin(), s.end());
}

struct Reader {
  const std::vector<unsigned char>& buf;
  std::size_t at = 0;

  void need(std::size_t n) const {
    if (n > buf.size() - at) throw FormatError("checkpoint truncated");
  }
  template <typename U>
  U get() {
    need(sizeof(U));
    U v = 0;
    for (std::size_t i = 0; i < sizeof(U); ++i) v |= static_cast<U>(U(buf[at + i]) << (8 * i));
    at += sizeof(U);
    return v;
  }
  std::string get_string() {
    const auto n = get<std::uint32_t>();
    need(n);
    std::string s(buf.begin() + static_cast<std::ptrdiff_t>(at), buf.begin() + static_cast<std::ptrdiff_t>(at + n));
    at += n;
    return s;
  }
};

inline std::uint32_t crc32_of(const std::vector<unsigned char>& bytes) {
  uLong crc = crc32(0L, Z_NULL, 0);
  std::size_t at = 0;
  while (at < bytes.size()) {
    const auto chunk = static_cast<uInt>(std::min<std::size_t>(bytes.size() - at, 1u << 30));
    crc = crc32(crc, bytes.data() + at, chunk);
    at += chunk;
  }
  return static_cast<std::uint32_t>(crc);
}

inline std::size_t dtype_size(DType t) {
  switch (t) {
    case DType::Float32: return 4;
    case DType::Float64: return 8;
  }
  throw FormatError("checkpoint: unknown dtype tag");
}

}  // namespace detail

template <typename T>
CheckpointTensor to_checkpoint_tensor(const std::string& name, const Tensor<T>& t) {
  static_assert(std::is_same_v<T, float> || std::is_same_v<T, double>);
  using Bits = std::conditional_t<std::is_same_v<T, float>, std::uint32_t, std::uint64_t>;
  CheckpointTensor out{name, std::is_same_v<T, float> ? DType::Float32 : DType::Float64, t.shape(), {}};
  out.bytes.reserve(static_cast<std::size_t>(t.numel()) * sizeof(T));
  for (T v : t.values()) {
    Bits b;
    std::memcpy(&b, &v, sizeof b);
    detail::put_le<Bits>(out.bytes, b);
  }
  return out;
}

// Values of a stored tensor as T; the stored shape must equal `shape`.
template <typename T>
std::vector<T> from_checkpoint_tensor(const CheckpointTensor& c, const Shape& shape) {
  if (c.shape != shape) {
    throw InvalidInput("checkpoint tensor " + c.name + " has shape " + to_string(c.shape) + ", expected " +
                       to_string(shape));
  }
  const index_t n = numel(shape);
  std::vector<T> out(static_cast<std::size_t>(n));
  detail::Reader r{c.bytes};
  for (auto& v : out) {
    if (c.dtype == DType::Float32) {
      const auto b = r.get<std::uint32_t>();
      float f;
      std::memcpy(&f, &b, sizeof f);
      v = static_cast<T>(f);
    } else {
      const auto b = r.get<std::uint64_t>();
      double d;
      std::memcpy(&d, &b, sizeof d);
      v = static_cast<T>(d);
    }
  }
  return out;
}

inline std::vector<unsigned char> serialize_checkpoint(const CheckpointData& ck) {
  std::vector<unsigned char> out{'D', 'M', 'S', 'G'};
  detail::put_le<std::uint32_t>(out, kCheckpointVersion);
  detail::put_string(out, ck.config);
  detail::put_le<std::uint64_t>(out, ck.step);
  detail::put_string(out, ck.rng_state);
  detail::put_le<std::uint32_t>(out, static_cast<std::uint32_t>(ck.tensors.size()));
  std::uint64_t offset = 0;
  for (const auto& t : ck.tensors) {
    if (static_cast<index_t>(t.bytes.size()) != numel(t.shape) * static_cast<index_t>(detail::dtype_size(t.dtype))) {
      throw InvalidInput("checkpoint tensor " + t.name + ": payload size does not match shape");
    }
    detail::put_string(out, t.name);
    out.push_back(static_cast<unsigned char>(t.dtype));
    detail::put_le<std::uint32_t>(out, static_cast<std::uint32_t>(t.shape.size()));
    for (auto d : t.shape) detail::put_le<std::uint64_t>(out, static_cast<std::uint64_t>(d));
    detail::put_le<std::uint64_t>(out, offset);
    detail::put_le<std::uint64_t>(out, t.bytes.size());
    detail::put_le<std::uint32_t>(out, detail::crc32_of(t.bytes));
    offset += t.bytes.size();
  }
  for (const auto& t : ck.tensors) out.insert(out.end(), t.bytes.begin(), t.bytes.end());
  return out;
}

inline CheckpointData deserialize_checkpoint(const std::vector<unsigned char>& buf) {
  detail::Reader r{buf};
  r.need(4);
  if (std::memcmp(buf.data(), "DMSG", 4) != 0) throw FormatError("not a checkpoint (bad magic)");
  r.at = 4;
  const auto version = r.get<std::uint32_t>();
  if (version != kCheckpointVersion) {
    throw VersionMismatch("checkpoint format version " + std::to_string(version) + " needs migration to version " +
                          std::to_string(kCheckpointVersion));
  }
  CheckpointData ck;
  ck.config = r.get_string();
  ck.step = r.get<std::uint64_t>();
  ck.rng_state = r.get_string();
  const auto count = r.get<std::uint32_t>();
  struct Entry {
    std::uint64_t offset, nbytes;
    std::uint32_t crc;
  };
  std::vector<Entry> entries;
  for (std::uint32_t i = 0; i < count; ++i) {
    CheckpointTensor t;
    t.name = r.get_string();
    const auto tag = r.get<std::uint8_t>();
    if (tag != 1 && tag != 2) throw FormatError("checkpoint tensor " + t.name + ": unknown dtype tag");
    t.dtype = static_cast<DType>(tag);
    const auto rank = r.get<std::uint32_t>();
    if (rank > 8) throw FormatError("checkpoint tensor " + t.name + ": implausible rank");
    for (std::uint32_t a = 0; a < rank; ++a) t.shape.push_back(static_cast<index_t>(r.get<std::uint64_t>()));
    Entry e{r.get<std::uint64_t>(), r.get<std::uint64_t>(), r.get<std::uint32_t>()};
    if (e.nbytes != static_cast<std::uint64_t>(numel(t.shape)) * detail::dtype_size(t.dtype)) {
      throw FormatError("checkpoint tensor " + t.name + ": size does not match shape");
    }
    entries.push_back(e);
    ck.tensors.push_back(std::move(t));
  }
  const std::size_t base = r.at;
  const std::uint64_t payload = buf.size() - base;
  std::uint64_t expected = 0;
  for (std::size_t i = 0; i < entries.size(); ++i) {
    const auto& e = entries[i];
    // tables are written back to back; anything else overlaps or leaves gaps
    if (e.offset != expected || e.nbytes > payload - e.offset) throw FormatError("checkpoint truncated");
    expected += e.nbytes;
    auto& t = ck.tensors[i];
    t.bytes.assign(buf.begin() + static_cast<std::ptrdiff_t>(base + e.offset),
                   buf.begin() + static_cast<std::ptrdiff_t>(base + e.offset + e.nbytes));
    if (detail::crc32_of(t.bytes) != e.crc) throw FormatError("checkpoint tensor " + t.name + ": checksum mismatch");
  }
  if (expected != payload) throw FormatError("checkpoint has trailing bytes");
  return ck;
}

// Written to `path`.tmp, then renamed over `path`.
inline void save_checkpoint(const CheckpointData& ck, const std::string& path) {
  const auto bytes = serialize_checkpoint(ck);
  const std::string tmp = path + ".tmp";
  {
    std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
    if (!out) throw InvalidInput("cannot write checkpoint " + tmp);
    out.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
    out.flush();
    if (!out) throw InvalidInput("cannot write checkpoint " + tmp);
  }
  if (std::rename(tmp.c_str(), path.c_str()) != 0) {
    std::remove(tmp.c_str());
    throw InvalidInput("cannot move checkpoint into place at " + path);
  }
}

inline CheckpointData load_checkpoint(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw InvalidInput("cannot open checkpoint " + path);
  const std::vector<unsigned char> bytes((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
  return deserialize_checkpoint(bytes);
}

}  // namespace dmseg
