#pragma once

#include <algorithm>
#include <vector>

#include "ovvad/data/manifest.hpp"
#include "ovvad/data/sampling.hpp"
#include "ovvad/error.hpp"

namespace ovvad::data {

// Class-balanced batches over the train split: each batch holds batch_size/2
// normal and batch_size/2 abnormal videos, drawn without replacement within
// an epoch. Leftover videos that cannot fill a balanced batch are dropped for
// that epoch.
class BalancedBatcher {
 public:
  BalancedBatcher(const Manifest& m, std::size_t batch_size) : half_(batch_size / 2) {
    if (batch_size == 0 || batch_size % 2 != 0) {
      throw ConfigError("batch size must be a positive even number, got " + std::to_string(batch_size));
    }
    for (std::size_t i : m.indices(Split::kTrain)) (m.videos[i].is_normal() ? normal_ : abnormal_).push_back(i);
    if (normal_.size() < half_ || abnormal_.size() < half_) {
      throw ConfigError("batch of " + std::to_string(batch_size) + " needs " + std::to_string(half_) +
                        " normal and abnormal train videos; have " + std::to_string(normal_.size()) + " and " +
                        std::to_string(abnormal_.size()));
    }
  }

  std::size_t batches_per_epoch() const { return std::min(normal_.size(), abnormal_.size()) / half_; }

  // Manifest indices per batch for one epoch; normals first within a batch.
  std::vector<std::vector<std::size_t>> epoch(Rng& rng) const {
    auto n = normal_;
    auto a = abnormal_;
    std::shuffle(n.begin(), n.end(), rng);
    std::shuffle(a.begin(), a.end(), rng);
    std::vector<std::vector<std::size_t>> out(batches_per_epoch());
    for (std::size_t b = 0; b < out.size(); ++b) {
      out[b].insert(out[b].end(), n.begin() + static_cast<std::ptrdiff_t>(b * half_),
                    n.begin() + static_cast<std::ptrdiff_t>((b + 1) * half_));
      out[b].insert(out[b].end(), a.begin() + static_cast<std::ptrdiff_t>(b * half_),
                    a.begin() + static_cast<std::ptrdiff_t>((b + 1) * half_));
    }
    return out;
  }

 private:
  std::size_t half_;
  std::vector<std::size_t> normal_;
  std::vector<std::size_t> abnormal_;
};

// A single balanced batch (the first batch of a fresh epoch).
inline std::vector<VideoRecord> make_batch(const Manifest& m, std::size_t batch_size, Rng& rng) {
  BalancedBatcher batcher(m, batch_size);
  std::vector<VideoRecord> out;
  const auto batches = batcher.epoch(rng);
  for (std::size_t i : batches.front()) out.push_back(m.videos[i]);
  return out;
}

}  // namespace ovvad::data
