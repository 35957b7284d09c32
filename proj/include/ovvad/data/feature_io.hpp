#pragma once

// OVFF feature files.
//
//   offset  size  field
//   0       4     magic "OVFF"
//   4       4     u32 version (= 1)
//   8       4     u32 n (rows, sampled frames)
//   12      4     u32 c (feature dim)
//   16      4·n·c float32 payload, row-major
//
// All integers and floats are little-endian. Values are widened to double in
// memory; writing narrows back to float32.

#include <array>
#include <bit>
#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <limits>
#include <string>
#include <vector>

#include "ovvad/error.hpp"
#include "ovvad/matrix.hpp"

namespace ovvad::data {

inline constexpr std::array<char, 4> kFeatureMagic{'O', 'V', 'F', 'F'};
inline constexpr std::uint32_t kFeatureVersion = 1;
inline constexpr std::uint32_t kDefaultStride = 16;

struct FeatureSequence {
  Matrix features;  // n sampled frames × c
  std::uint32_t stride = kDefaultStride;
  std::size_t original_frame_count = 0;

  std::size_t length() const noexcept { return features.rows(); }
  std::size_t dim() const noexcept { return features.cols(); }
};

inline FeatureSequence make_sequence(Matrix features, std::uint32_t stride = kDefaultStride,
                                     std::size_t original_frame_count = 0) {
  if (features.rows() == 0) throw DataError("feature sequence must have at least one frame");
  if (stride == 0) throw ConfigError("stride must be >= 1");
  const std::size_t orig = original_frame_count ? original_frame_count : features.rows() * stride;
  return FeatureSequence{std::move(features), stride, orig};
}

namespace detail {

inline void put_u32(std::vector<unsigned char>& out, std::uint32_t v) {
  for (int i = 0; i < 4; ++i) out.push_back(static_cast<unsigned char>((v >> (8 * i)) & 0xFFu));
}

inline std::uint32_t get_u32(const unsigned char* p) {
  return static_cast<std::uint32_t>(p[0]) | (static_cast<std::uint32_t>(p[1]) << 8) |
         (static_cast<std::uint32_t>(p[2]) << 16) | (static_cast<std::uint32_t>(p[3]) << 24);
}

inline std::vector<unsigned char> read_all(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw DataError("cannot open " + path.string());
  return std::vector<unsigned char>(std::istreambuf_iterator<char>(in), {});
}

inline void write_all(const std::filesystem::path& path, const std::vector<unsigned char>& bytes) {
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw DataError("cannot write " + path.string());
  out.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
  if (!out) throw DataError("short write to " + path.string());
}

}  // namespace detail

// Encodes a matrix as an OVFF byte buffer (entries narrowed to float32).
inline std::vector<unsigned char> encode_features(const Matrix& m) {
  if (m.rows() > std::numeric_limits<std::uint32_t>::max() || m.cols() > std::numeric_limits<std::uint32_t>::max()) {
    throw DataError("matrix too large for OVFF: " + m.shape_str());
  }
  std::vector<unsigned char> out;
  out.reserve(16 + 4 * m.size());
  out.insert(out.end(), kFeatureMagic.begin(), kFeatureMagic.end());
  detail::put_u32(out, kFeatureVersion);
  detail::put_u32(out, static_cast<std::uint32_t>(m.rows()));
  detail::put_u32(out, static_cast<std::uint32_t>(m.cols()));
  for (double v : m.data()) detail::put_u32(out, std::bit_cast<std::uint32_t>(static_cast<float>(v)));
  return out;
}

inline Matrix decode_features(const std::vector<unsigned char>& bytes, const std::string& source) {
  if (bytes.size() < 16) throw DataError(source + ": truncated header (" + std::to_string(bytes.size()) + " bytes)");
  if (std::memcmp(bytes.data(), kFeatureMagic.data(), 4) != 0) throw DataError(source + ": bad magic, expected OVFF");
  const std::uint32_t version = detail::get_u32(bytes.data() + 4);
  if (version != kFeatureVersion) throw DataError(source + ": unsupported OVFF version " + std::to_string(version));
  const std::uint64_t n = detail::get_u32(bytes.data() + 8);
  const std::uint64_t c = detail::get_u32(bytes.data() + 12);
  // n, c < 2^32 so n*c fits in 64 bits; the byte count needs a check.
  const std::uint64_t count = n * c;
  if (count > (std::numeric_limits<std::uint64_t>::max() - 16) / 4) throw DataError(source + ": n*c overflows");
  const std::uint64_t need = 16 + 4 * count;
  if (bytes.size() < need) {
    throw DataError(source + ": truncated payload (" + std::to_string(bytes.size()) + " of " + std::to_string(need) +
                    " bytes)");
  }
  if (bytes.size() > need) throw DataError(source + ": trailing bytes after payload");
  std::vector<double> data(count);
  for (std::uint64_t i = 0; i < count; ++i) {
    const float f = std::bit_cast<float>(detail::get_u32(bytes.data() + 16 + 4 * i));
    if (!std::isfinite(f)) throw DataError(source + ": non-finite value at entry " + std::to_string(i));
    data[i] = static_cast<double>(f);
  }
  return Matrix(static_cast<std::size_t>(n), static_cast<std::size_t>(c), std::move(data));
}

inline void write_matrix(const Matrix& m, const std::filesystem::path& path) {
  detail::write_all(path, encode_features(m));
}

inline Matrix read_matrix(const std::filesystem::path& path) {
  return decode_features(detail::read_all(path), path.string());
}

inline void write_features(const FeatureSequence& seq, const std::filesystem::path& path) {
  write_matrix(seq.features, path);
}

inline FeatureSequence read_features(const std::filesystem::path& path, std::uint32_t stride = kDefaultStride,
                                     std::size_t original_frame_count = 0) {
  Matrix m = read_matrix(path);
  if (m.rows() == 0) throw DataError(path.string() + ": feature file has zero frames");
  return make_sequence(std::move(m), stride, original_frame_count);
}

}  // namespace ovvad::data
