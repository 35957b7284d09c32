#pragma once

// OVCK checkpoints:
//
//   "OVCK"  u32 entry_count
//   per entry: u16 name_len, name (UTF-8), u8 rank, u32 dims[rank],
//              float32 payload (row-major)
//
// Little-endian throughout. ModelParams entries are written in visit order
// with rank 2.

#include <bit>
#include <cstdint>
#include <cstring>
#include <filesystem>
#include <map>
#include <string>
#include <vector>

#include "ovvad/data/feature_io.hpp"
#include "ovvad/error.hpp"
#include "ovvad/model/params.hpp"

namespace ovvad::model {

inline constexpr char kCheckpointMagic[4] = {'O', 'V', 'C', 'K'};

inline std::vector<unsigned char> encode_checkpoint(const ModelParams& p) {
  std::vector<unsigned char> out(kCheckpointMagic, kCheckpointMagic + 4);
  std::uint32_t count = 0;
  p.visit([&](std::string_view, const Matrix&) { ++count; });
  data::detail::put_u32(out, count);
  p.visit([&](std::string_view name, const Matrix& m) {
    out.push_back(static_cast<unsigned char>(name.size() & 0xFF));
    out.push_back(static_cast<unsigned char>((name.size() >> 8) & 0xFF));
    out.insert(out.end(), name.begin(), name.end());
    out.push_back(2);
    data::detail::put_u32(out, static_cast<std::uint32_t>(m.rows()));
    data::detail::put_u32(out, static_cast<std::uint32_t>(m.cols()));
    for (double v : m.data()) data::detail::put_u32(out, std::bit_cast<std::uint32_t>(static_cast<float>(v)));
  });
  return out;
}

// Named tensors in file order. Rank-0/1 entries load as 1×n rows.
inline std::vector<std::pair<std::string, Matrix>> decode_checkpoint(const std::vector<unsigned char>& b,
                                                                     const std::string& source) {
  std::size_t pos = 0;
  auto need = [&](std::size_t n) {
    if (b.size() - pos < n) throw DataError(source + ": truncated checkpoint");
  };
  need(8);
  if (std::memcmp(b.data(), kCheckpointMagic, 4) != 0) throw DataError(source + ": bad magic, expected OVCK");
  const std::uint32_t count = data::detail::get_u32(b.data() + 4);
  pos = 8;
  std::vector<std::pair<std::string, Matrix>> out;
  for (std::uint32_t e = 0; e < count; ++e) {
    need(2);
    const std::size_t len = b[pos] | (static_cast<std::size_t>(b[pos + 1]) << 8);
    pos += 2;
    need(len + 1);
    std::string name(reinterpret_cast<const char*>(b.data() + pos), len);
    pos += len;
    const unsigned rank = b[pos++];
    if (rank > 2) throw DataError(source + ": entry " + name + " has unsupported rank " + std::to_string(rank));
    std::uint64_t dims[2] = {1, 1};
    need(4 * rank);
    for (unsigned r = 0; r < rank; ++r, pos += 4) dims[2 - rank + r] = data::detail::get_u32(b.data() + pos);
    const std::uint64_t n = dims[0] * dims[1];
    need(4 * n);
    std::vector<double> vals(n);
    for (std::uint64_t i = 0; i < n; ++i, pos += 4) {
      const float f = std::bit_cast<float>(data::detail::get_u32(b.data() + pos));
      if (!std::isfinite(f)) throw DataError(source + ": non-finite value in " + name);
      vals[i] = f;
    }
    out.emplace_back(std::move(name), Matrix(dims[0], dims[1], std::move(vals)));
  }
  if (pos != b.size()) throw DataError(source + ": trailing bytes after checkpoint");
  return out;
}

inline void save_checkpoint(const ModelParams& p, const std::filesystem::path& path) {
  data::detail::write_all(path, encode_checkpoint(p));
}

inline ModelParams load_checkpoint(const std::filesystem::path& path) {
  if (!std::filesystem::exists(path)) throw DataError("checkpoint not found: " + path.string());
  auto entries = decode_checkpoint(data::detail::read_all(path), path.string());
  std::map<std::string, Matrix> by_name;
  for (auto& [n, m] : entries) by_name[n] = std::move(m);
  ModelParams p;
  p.visit([&](std::string_view name, Matrix& m) {
    auto it = by_name.find(std::string(name));
    if (it == by_name.end()) throw DataError(path.string() + ": missing entry " + std::string(name));
    m = std::move(it->second);
  });
  try {
    p.validate();
  } catch (const Error& e) {
    throw DataError(path.string() + ": " + e.what());
  }
  return p;
}

}  // namespace ovvad::model
