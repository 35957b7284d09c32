#pragma once

// Desk-scale synthetic corpus.
//
// Normal frames are isotropic Gaussian noise around a normal mean. Anomaly
// class k owns a unit direction mu_k (orthonormal to the other classes and to
// the normal mean). An abnormal video is a normal sequence whose frames inside
// one contiguous segment are shifted by separation * mu_k; frame_gt marks
// exactly that segment. Class-catalog and knowledge-bank embeddings are
// unit-normalized noisy copies of the matching directions. Novel-class videos
// only appear in the test split. Snippets for novel classes stand in for
// generated anomaly clips.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

#include "json.hpp"
#include "ovvad/data/feature_io.hpp"
#include "ovvad/data/manifest.hpp"
#include "ovvad/data/sampling.hpp"
#include "ovvad/error.hpp"
#include "ovvad/model/catalog.hpp"

namespace ovvad::data {

struct LengthRange {
  std::size_t min = 1;
  std::size_t max = 1;
};

struct SyntheticConfig {
  std::size_t feature_dim = 64;
  std::size_t base_classes = 3;
  std::size_t novel_classes = 2;
  std::size_t train_videos_per_class = 24;  // base classes only
  std::size_t test_videos_per_class = 8;
  std::size_t normal_train = 72;
  std::size_t normal_test = 24;
  double separation = 3.0;
  double noise = 1.0;
  double normal_mean_norm = 1.0;
  LengthRange video_length{32, 96};
  LengthRange segment_length{6, 24};
  // Noise added to the unit class direction before normalizing a text embedding.
  double text_noise = 1.0;
  std::size_t phrases_per_group = 8;
  // Uninformative banks draw phrase embeddings from directions unrelated to the data.
  bool informative_knowledge = true;
  std::size_t snippets_per_novel_class = 6;
  LengthRange snippet_length{8, 24};
  std::uint32_t stride = kDefaultStride;
  std::uint64_t seed = 7;

  void validate() const {
    if (feature_dim < 2) throw ConfigError("feature_dim must be >= 2");
    if (base_classes == 0) throw ConfigError("need at least one base class");
    if (base_classes + novel_classes + 1 > feature_dim) {
      throw ConfigError("feature_dim too small for the requested number of orthogonal class directions");
    }
    if (!(separation >= 0.0) || !(noise > 0.0)) throw ConfigError("separation must be >= 0 and noise > 0");
    for (const auto& r : {video_length, segment_length, snippet_length}) {
      if (r.min == 0 || r.min > r.max) throw ConfigError("invalid length range");
      if (r.max > kMaxTrainLength) throw ConfigError("lengths must be <= 256");
    }
    if (segment_length.max >= video_length.min) throw ConfigError("segments must be shorter than videos");
    if (phrases_per_group == 0) throw ConfigError("phrases_per_group must be >= 1");
    if (stride == 0) throw ConfigError("stride must be >= 1");
  }
};

struct SyntheticCorpus {
  std::filesystem::path manifest_path;
  std::filesystem::path snippet_dir;
  Manifest manifest;
  model::ClassCatalog catalog;
  model::KnowledgeBank knowledge;
  Matrix class_directions;  // k × c, exact mu_k
  Matrix normal_mean;       // 1 × c
};

inline std::string synthetic_class_name(std::size_t k, bool base) {
  return (base ? "base_" : "novel_") + std::to_string(k);
}

namespace detail {

inline std::vector<double> gaussian(std::size_t c, double scale, Rng& rng) {
  std::normal_distribution<double> nd(0.0, scale);
  std::vector<double> v(c);
  for (double& x : v) x = nd(rng);
  return v;
}

// Rows of a count × c matrix with orthonormal rows (Gram-Schmidt on Gaussians).
inline Matrix orthonormal_rows(std::size_t count, std::size_t c, Rng& rng) {
  Matrix q(count, c);
  for (std::size_t r = 0; r < count; ++r) {
    for (;;) {
      auto v = gaussian(c, 1.0, rng);
      for (std::size_t p = 0; p < r; ++p) {
        double d = 0.0;
        for (std::size_t j = 0; j < c; ++j) d += v[j] * q(p, j);
        for (std::size_t j = 0; j < c; ++j) v[j] -= d * q(p, j);
      }
      const double n = l2_norm(v);
      if (n < 1e-6) continue;
      for (std::size_t j = 0; j < c; ++j) q(r, j) = v[j] / n;
      break;
    }
  }
  return q;
}

inline std::vector<double> noisy_unit(std::span<const double> dir, double text_noise, Rng& rng) {
  const std::size_t c = dir.size();
  auto g = gaussian(c, text_noise / std::sqrt(static_cast<double>(c)), rng);
  for (std::size_t j = 0; j < c; ++j) g[j] += dir[j];
  const double n = l2_norm(g);
  for (double& x : g) x /= n;
  return g;
}

inline std::size_t draw(LengthRange r, Rng& rng) {
  std::uniform_int_distribution<std::size_t> d(r.min, r.max);
  return d(rng);
}

}  // namespace detail

// Generates the corpus into `out_dir` and returns its in-memory description.
inline SyntheticCorpus gen_synthetic(const SyntheticConfig& cfg, const std::filesystem::path& out_dir) {
  cfg.validate();
  namespace fs = std::filesystem;
  Rng rng(cfg.seed);
  const std::size_t c = cfg.feature_dim;
  const std::size_t k = cfg.base_classes + cfg.novel_classes;

  // Row 0 is the normal direction, rows 1..k the class directions.
  Matrix dirs = detail::orthonormal_rows(k + 1, c, rng);
  SyntheticCorpus corpus;
  corpus.normal_mean = Matrix(1, c);
  for (std::size_t j = 0; j < c; ++j) corpus.normal_mean(0, j) = cfg.normal_mean_norm * dirs(0, j);
  corpus.class_directions = Matrix(k, c);
  for (std::size_t i = 0; i < k; ++i)
    for (std::size_t j = 0; j < c; ++j) corpus.class_directions(i, j) = dirs(i + 1, j);

  // Catalog.
  auto& cat = corpus.catalog;
  cat.embeddings = Matrix(k, c);
  for (std::size_t i = 0; i < k; ++i) {
    const bool base = i < cfg.base_classes;
    cat.class_names.push_back(synthetic_class_name(base ? i : i - cfg.base_classes, base));
    cat.is_base.push_back(base);
    auto e = detail::noisy_unit(corpus.class_directions.row(i), cfg.text_noise, rng);
    std::copy(e.begin(), e.end(), cat.embeddings.row(i).begin());
  }

  // Knowledge bank: normal phrases around the normal direction, abnormal
  // phrases cycling over every anomaly direction.
  auto& kb = corpus.knowledge;
  Matrix unrelated = detail::orthonormal_rows(2, c, rng);
  kb.embeddings = Matrix(2 * cfg.phrases_per_group, c);
  for (std::size_t p = 0; p < 2 * cfg.phrases_per_group; ++p) {
    const bool normal = p < cfg.phrases_per_group;
    const std::size_t q = normal ? p : p - cfg.phrases_per_group;
    std::span<const double> dir = normal ? dirs.row(0) : corpus.class_directions.row(q % k);
    if (!cfg.informative_knowledge) dir = unrelated.row(normal ? 0 : 1);
    auto e = detail::noisy_unit(dir, cfg.text_noise, rng);
    std::copy(e.begin(), e.end(), kb.embeddings.row(p).begin());
    kb.groups.push_back(normal ? model::KnowledgeGroup::kNormal : model::KnowledgeGroup::kAbnormal);
    kb.phrases.push_back(normal ? "normal scene " + std::to_string(q)
                                : "anomaly cue " + std::to_string(q) + " (" + cat.class_names[q % k] + ")");
  }

  fs::create_directories(out_dir / "features");
  auto normal_frames = [&](std::size_t n) {
    Matrix m(n, c);
    std::normal_distribution<double> nd(0.0, cfg.noise);
    for (std::size_t i = 0; i < n; ++i)
      for (std::size_t j = 0; j < c; ++j) m(i, j) = corpus.normal_mean(0, j) + nd(rng);
    return m;
  };
  auto shift = [&](Matrix& m, std::size_t from, std::size_t len, std::size_t cls) {
    for (std::size_t i = from; i < from + len; ++i)
      for (std::size_t j = 0; j < c; ++j) m(i, j) += cfg.separation * corpus.class_directions(cls, j);
  };

  auto& man = corpus.manifest;
  man.feature_dim = c;
  man.class_catalog_path = fs::absolute(out_dir / "catalog.json");
  man.knowledge_bank_path = fs::absolute(out_dir / "knowledge.json");
  std::uniform_int_distribution<std::uint32_t> partial(0, cfg.stride - 1);

  auto emit = [&](const std::string& id, const std::string& label, Split split, std::optional<std::size_t> cls) {
    const std::size_t n = detail::draw(cfg.video_length, rng);
    Matrix feats = normal_frames(n);
    std::vector<std::uint8_t> gt(n, 0);
    if (cls) {
      const std::size_t len = detail::draw(cfg.segment_length, rng);
      std::uniform_int_distribution<std::size_t> start(0, n - len);
      const std::size_t s = start(rng);
      shift(feats, s, len, *cls);
      std::fill(gt.begin() + static_cast<std::ptrdiff_t>(s), gt.begin() + static_cast<std::ptrdiff_t>(s + len), 1);
    }
    VideoRecord v;
    v.id = id;
    v.feature_path = fs::absolute(out_dir / "features" / (id + ".ovff"));
    v.label = label;
    v.split = split;
    v.frame_gt = std::move(gt);
    v.stride = cfg.stride;
    v.original_frame_count = n * cfg.stride - partial(rng);
    write_matrix(feats, v.feature_path);
    man.videos.push_back(std::move(v));
  };

  for (std::size_t i = 0; i < cfg.normal_train; ++i) emit("train_normal_" + std::to_string(i), kNormalLabel, Split::kTrain, {});
  for (std::size_t cls = 0; cls < cfg.base_classes; ++cls)
    for (std::size_t i = 0; i < cfg.train_videos_per_class; ++i)
      emit("train_" + cat.class_names[cls] + "_" + std::to_string(i), cat.class_names[cls], Split::kTrain, cls);
  for (std::size_t i = 0; i < cfg.normal_test; ++i) emit("test_normal_" + std::to_string(i), kNormalLabel, Split::kTest, {});
  for (std::size_t cls = 0; cls < k; ++cls)
    for (std::size_t i = 0; i < cfg.test_videos_per_class; ++i)
      emit("test_" + cat.class_names[cls] + "_" + std::to_string(i), cat.class_names[cls], Split::kTest, cls);

  // Snippets for the novel classes: pure anomaly frames.
  corpus.snippet_dir = fs::absolute(out_dir / "snippets");
  fs::create_directories(corpus.snippet_dir);
  for (std::size_t cls = cfg.base_classes; cls < k; ++cls) {
    for (std::size_t i = 0; i < cfg.snippets_per_novel_class; ++i) {
      const std::size_t len = detail::draw(cfg.snippet_length, rng);
      Matrix feats = normal_frames(len);
      shift(feats, 0, len, cls);
      const std::string stem = cat.class_names[cls] + "_" + std::to_string(i);
      write_matrix(feats, corpus.snippet_dir / (stem + ".ovff"));
      model::detail::write_json(corpus.snippet_dir / (stem + ".json"),
                                {{"category", cat.class_names[cls]}, {"source", "synthetic-fixture"}});
    }
  }

  model::save_catalog(cat, man.class_catalog_path);
  model::save_knowledge(kb, man.knowledge_bank_path);
  // Reload so the returned embeddings carry the same float32 rounding as the files.
  corpus.catalog = model::load_catalog(man.class_catalog_path);
  corpus.knowledge = model::load_knowledge(man.knowledge_bank_path);
  corpus.manifest_path = fs::absolute(out_dir / "manifest.json");
  save_manifest(man, corpus.manifest_path);
  return corpus;
}

}  // namespace ovvad::data
