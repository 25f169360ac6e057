#pragma once

// NSRT raster container (little-endian).
//
//   offset  size  field
//   0       4     magic "NSRT"
//   4       1     version (1)
//   5       1     dtype (0 = u8, 1 = f32, 2 = f64)
//   6       1     semantic tag (0 = image, 1 = labels, 2 = mask, 3 = checkpoint)
//   7       1     reserved (0)
//   8       12    H, W, C as u32
//   20      8     reserved (0)
//   28      ...   row-major payload, H·W·C elements
//
// A checkpoint file is a u32 record count followed by that many
// (u32 name length, name bytes, NSRT record) entries.

#include <algorithm>
#include <array>
#include <bit>
#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <istream>
#include <ostream>
#include <span>
#include <string>
#include <type_traits>
#include <vector>

#include "xres/errors.hpp"
#include "xres/raster.hpp"

namespace xres {

enum class DType : std::uint8_t { u8 = 0, f32 = 1, f64 = 2 };
enum class SemanticTag : std::uint8_t { image = 0, labels = 1, mask = 2, checkpoint = 3 };

inline constexpr std::size_t kNsrtHeaderBytes = 28;
inline constexpr std::uint8_t kNsrtVersion = 1;

inline std::size_t dtype_size(DType d) {
  switch (d) {
    case DType::u8: return 1;
    case DType::f32: return 4;
    case DType::f64: return 8;
  }
  throw FormatError("unknown dtype");
}

struct RasterTensor {
  std::uint32_t height = 0, width = 0, channels = 0;
  DType dtype = DType::u8;
  SemanticTag tag = SemanticTag::image;
  std::vector<std::uint8_t> payload;  // little-endian element bytes

  std::size_t elements() const { return std::size_t{height} * width * channels; }
  bool operator==(const RasterTensor&) const = default;

  template <class V>
  static RasterTensor from_values(std::uint32_t h, std::uint32_t w, std::uint32_t c, std::span<const V> values,
                                  SemanticTag tag) {
    static_assert(std::is_same_v<V, std::uint8_t> || std::is_same_v<V, float> || std::is_same_v<V, double>);
    RasterTensor r{h, w, c, dtype_of<V>(), tag, {}};
    if (values.size() != r.elements())
      throw DimensionError("raster " + std::to_string(h) + "x" + std::to_string(w) + "x" + std::to_string(c) +
                           " vs " + std::to_string(values.size()) + " values");
    r.payload.resize(values.size() * sizeof(V));
    for (std::size_t i = 0; i < values.size(); ++i) store_le(values[i], r.payload.data() + i * sizeof(V));
    return r;
  }

  template <class V>
  std::vector<V> values() const {
    if (dtype != dtype_of<V>()) throw FormatError("raster dtype does not match requested element type");
    std::vector<V> out(elements());
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = load_le<V>(payload.data() + i * sizeof(V));
    return out;
  }

  template <class V>
  static constexpr DType dtype_of() {
    if constexpr (std::is_same_v<V, std::uint8_t>) return DType::u8;
    else if constexpr (std::is_same_v<V, float>) return DType::f32;
    else return DType::f64;
  }

 private:
  template <class V>
  static void store_le(V v, std::uint8_t* dst) {
    std::array<std::uint8_t, sizeof(V)> b;
    std::memcpy(b.data(), &v, sizeof(V));
    if constexpr (std::endian::native == std::endian::big) std::reverse(b.begin(), b.end());
    std::memcpy(dst, b.data(), sizeof(V));
  }
  template <class V>
  static V load_le(const std::uint8_t* src) {
    std::array<std::uint8_t, sizeof(V)> b;
    std::memcpy(b.data(), src, sizeof(V));
    if constexpr (std::endian::native == std::endian::big) std::reverse(b.begin(), b.end());
    V v;
    std::memcpy(&v, b.data(), sizeof(V));
    return v;
  }
};

namespace detail {

inline void put_u32(std::ostream& os, std::uint32_t v) {
  const std::array<char, 4> b{static_cast<char>(v & 0xff), static_cast<char>((v >> 8) & 0xff),
                              static_cast<char>((v >> 16) & 0xff), static_cast<char>((v >> 24) & 0xff)};
  os.write(b.data(), 4);
}

inline std::uint32_t get_u32(const std::uint8_t* p) {
  return std::uint32_t{p[0]} | (std::uint32_t{p[1]} << 8) | (std::uint32_t{p[2]} << 16) | (std::uint32_t{p[3]} << 24);
}

inline void read_exact(std::istream& is, std::uint8_t* dst, std::size_t n, const char* what) {
  is.read(reinterpret_cast<char*>(dst), static_cast<std::streamsize>(n));
  if (static_cast<std::size_t>(is.gcount()) != n) throw FormatError(std::string("truncated NSRT ") + what);
}

}  // namespace detail

inline void write_raster(std::ostream& os, const RasterTensor& r) {
  if (r.payload.size() != r.elements() * dtype_size(r.dtype))
    throw DimensionError("raster payload does not match its header shape");
  os.write("NSRT", 4);
  const std::array<char, 4> meta{static_cast<char>(kNsrtVersion), static_cast<char>(r.dtype),
                                 static_cast<char>(r.tag), 0};
  os.write(meta.data(), 4);
  detail::put_u32(os, r.height);
  detail::put_u32(os, r.width);
  detail::put_u32(os, r.channels);
  const std::array<char, 8> reserved{};
  os.write(reserved.data(), 8);
  os.write(reinterpret_cast<const char*>(r.payload.data()), static_cast<std::streamsize>(r.payload.size()));
  if (!os) throw FormatError("failed writing NSRT record");
}

inline RasterTensor read_raster(std::istream& is) {
  std::array<std::uint8_t, kNsrtHeaderBytes> h{};
  detail::read_exact(is, h.data(), h.size(), "header");
  if (std::memcmp(h.data(), "NSRT", 4) != 0) throw FormatError("bad NSRT magic");
  if (h[4] != kNsrtVersion) throw FormatError("unsupported NSRT version " + std::to_string(h[4]));
  if (h[5] > 2) throw FormatError("unknown NSRT dtype " + std::to_string(h[5]));
  if (h[6] > 3) throw FormatError("unknown NSRT semantic tag " + std::to_string(h[6]));
  RasterTensor r;
  r.dtype = static_cast<DType>(h[5]);
  r.tag = static_cast<SemanticTag>(h[6]);
  r.height = detail::get_u32(h.data() + 8);
  r.width = detail::get_u32(h.data() + 12);
  r.channels = detail::get_u32(h.data() + 16);
  r.payload.resize(r.elements() * dtype_size(r.dtype));
  detail::read_exact(is, r.payload.data(), r.payload.size(), "payload");
  return r;
}

inline void write_raster_file(const std::filesystem::path& path, const RasterTensor& r) {
  std::ofstream os(path, std::ios::binary);
  if (!os) throw FormatError("cannot open " + path.string() + " for writing");
  write_raster(os, r);
}

inline RasterTensor read_raster_file(const std::filesystem::path& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw FormatError("cannot open " + path.string());
  auto r = read_raster(is);
  if (is.peek() != std::char_traits<char>::eof()) throw FormatError("trailing bytes after NSRT record in " + path.string());
  return r;
}

// ------------------------------------------------------------ typed helpers

inline RasterTensor to_raster(const LabelRaster& l, SemanticTag tag = SemanticTag::labels) {
  return RasterTensor::from_values<std::uint8_t>(static_cast<std::uint32_t>(l.height),
                                                 static_cast<std::uint32_t>(l.width), 1, l.labels, tag);
}

inline RasterTensor to_raster(const ImageRaster& im) {
  return RasterTensor::from_values<float>(static_cast<std::uint32_t>(im.height), static_cast<std::uint32_t>(im.width),
                                          static_cast<std::uint32_t>(im.channels), im.pixels, SemanticTag::image);
}

inline LabelRaster labels_from_raster(const RasterTensor& r) {
  if (r.channels != 1 || r.dtype != DType::u8) throw FormatError("label raster must be single-channel u8");
  LabelRaster l;
  l.height = r.height;
  l.width = r.width;
  l.labels = r.values<std::uint8_t>();
  return l;
}

inline ImageRaster image_from_raster(const RasterTensor& r) {
  if (r.dtype != DType::f32) throw FormatError("image raster must be f32");
  ImageRaster im;
  im.height = r.height;
  im.width = r.width;
  im.channels = r.channels;
  im.pixels = r.values<float>();
  return im;
}

// ---------------------------------------------------------------- checkpoints

struct NamedRecord {
  std::string name;
  RasterTensor raster;
  bool operator==(const NamedRecord&) const = default;
};

inline void write_records(std::ostream& os, std::span<const NamedRecord> records) {
  detail::put_u32(os, static_cast<std::uint32_t>(records.size()));
  for (const auto& r : records) {
    detail::put_u32(os, static_cast<std::uint32_t>(r.name.size()));
    os.write(r.name.data(), static_cast<std::streamsize>(r.name.size()));
    write_raster(os, r.raster);
  }
}

inline std::vector<NamedRecord> read_records(std::istream& is) {
  std::array<std::uint8_t, 4> b{};
  detail::read_exact(is, b.data(), 4, "record count");
  const std::uint32_t n = detail::get_u32(b.data());
  std::vector<NamedRecord> out;
  for (std::uint32_t i = 0; i < n; ++i) {
    detail::read_exact(is, b.data(), 4, "record name length");
    const std::uint32_t len = detail::get_u32(b.data());
    if (len > 4096) throw FormatError("implausible record name length");
    std::string name(len, '\0');
    detail::read_exact(is, reinterpret_cast<std::uint8_t*>(name.data()), len, "record name");
    out.push_back({std::move(name), read_raster(is)});
  }
  return out;
}

}  // namespace xres
