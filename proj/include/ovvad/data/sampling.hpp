#pragma once

#include <algorithm>
#include <cstdint>
#include <random>
#include <vector>

#include "ovvad/data/feature_io.hpp"
#include "ovvad/error.hpp"

namespace ovvad {

// Every stochastic step takes this generator explicitly.
using Rng = std::mt19937_64;

}  // namespace ovvad

namespace ovvad::data {

inline constexpr std::size_t kMaxTrainLength = 256;

// Indices kept when reducing n frames to at most max_len: [0, n) is split into
// max_len equal bins and one index is drawn uniformly from each bin. Returns
// 0..n-1 unchanged when n <= max_len.
inline std::vector<std::size_t> sample_indices(std::size_t n, std::size_t max_len, Rng& rng) {
  if (max_len == 0) throw ConfigError("max_len must be >= 1");
  std::vector<std::size_t> idx;
  if (n <= max_len) {
    idx.resize(n);
    for (std::size_t i = 0; i < n; ++i) idx[i] = i;
    return idx;
  }
  idx.reserve(max_len);
  for (std::size_t b = 0; b < max_len; ++b) {
    const std::size_t lo = b * n / max_len;
    const std::size_t hi = (b + 1) * n / max_len;  // exclusive, hi > lo since n > max_len
    std::uniform_int_distribution<std::size_t> pick(lo, hi - 1);
    idx.push_back(pick(rng));
  }
  return idx;
}

inline Matrix gather_rows(const Matrix& m, const std::vector<std::size_t>& idx) {
  Matrix out(idx.size(), m.cols());
  for (std::size_t r = 0; r < idx.size(); ++r) std::copy(m.row(idx[r]).begin(), m.row(idx[r]).end(), out.row(r).begin());
  return out;
}

template <class T>
std::vector<T> gather(const std::vector<T>& v, const std::vector<std::size_t>& idx) {
  std::vector<T> out;
  out.reserve(idx.size());
  for (std::size_t i : idx) out.push_back(v.at(i));
  return out;
}

inline FeatureSequence sample_frames(const FeatureSequence& seq, std::size_t max_len, Rng& rng,
                                     std::vector<std::size_t>* kept = nullptr) {
  auto idx = sample_indices(seq.length(), max_len, rng);
  FeatureSequence out{idx.size() == seq.length() ? seq.features : gather_rows(seq.features, idx), seq.stride,
                      seq.original_frame_count};
  if (kept) *kept = std::move(idx);
  return out;
}

}  // namespace ovvad::data
