#pragma once

// Novel-anomaly synthesis in feature space: snippet features for potential
// novel categories are spliced into normal videos at a random position,
// giving pseudo anomalies with exact frame labels.
//
// Snippet bank layout: a directory of <stem>.ovff feature files, each with a
// <stem>.json sidecar {"category": <class name>, "source": <source tag>}.

#include <algorithm>
#include <cstdint>
#include <filesystem>
#include <map>
#include <random>
#include <string>
#include <vector>

#include "ovvad/data/feature_io.hpp"
#include "ovvad/data/manifest.hpp"
#include "ovvad/data/sampling.hpp"
#include "ovvad/error.hpp"
#include "ovvad/model/catalog.hpp"

namespace ovvad::nas {

enum class SnippetSource { kGeneratedImage, kGeneratedVideo, kSyntheticFixture };

inline const char* to_string(SnippetSource s) {
  switch (s) {
    case SnippetSource::kGeneratedImage: return "generated-image";
    case SnippetSource::kGeneratedVideo: return "generated-video";
    case SnippetSource::kSyntheticFixture: return "synthetic-fixture";
  }
  return "?";
}

inline SnippetSource parse_source(const std::string& s) {
  if (s == "generated-image") return SnippetSource::kGeneratedImage;
  if (s == "generated-video") return SnippetSource::kGeneratedVideo;
  if (s == "synthetic-fixture") return SnippetSource::kSyntheticFixture;
  throw DataError("unknown snippet source '" + s + "'");
}

struct Snippet {
  std::string id;
  Matrix features;
  std::string category;
  SnippetSource source = SnippetSource::kSyntheticFixture;
};

struct SnippetBank {
  std::vector<Snippet> snippets;

  std::vector<std::size_t> of(const std::string& category) const {
    std::vector<std::size_t> out;
    for (std::size_t i = 0; i < snippets.size(); ++i)
      if (snippets[i].category == category) out.push_back(i);
    return out;
  }

  // Sorted, de-duplicated categories present in the bank.
  std::vector<std::string> categories() const {
    std::vector<std::string> out;
    for (const auto& s : snippets) out.push_back(s.category);
    std::sort(out.begin(), out.end());
    out.erase(std::unique(out.begin(), out.end()), out.end());
    return out;
  }

  void validate(const model::ClassCatalog& catalog) const {
    for (const auto& s : snippets) {
      if (s.features.rows() == 0) throw DataError("snippet " + s.id + " is empty");
      if (s.features.cols() != catalog.dim()) {
        throw DataError("snippet " + s.id + " has dim " + std::to_string(s.features.cols()) + ", catalog has " +
                        std::to_string(catalog.dim()));
      }
      auto k = catalog.index_of(s.category);
      if (!k) throw DataError("snippet " + s.id + ": category '" + s.category + "' is not in the catalog");
      if (catalog.is_base[*k]) {
        throw DataError("snippet " + s.id + ": category '" + s.category + "' is a base class, not a novel one");
      }
    }
  }
};

inline SnippetBank load_snippet_bank(const std::filesystem::path& dir) {
  namespace fs = std::filesystem;
  if (!fs::is_directory(dir)) throw DataError("snippet directory not found: " + dir.string());
  std::vector<fs::path> files;
  for (const auto& e : fs::directory_iterator(dir))
    if (e.is_regular_file() && e.path().extension() == ".ovff") files.push_back(e.path());
  std::sort(files.begin(), files.end());
  SnippetBank bank;
  for (const auto& f : files) {
    fs::path sidecar = f;
    sidecar.replace_extension(".json");
    if (!fs::exists(sidecar)) throw DataError("snippet " + f.string() + " has no JSON sidecar");
    const auto j = model::detail::read_json(sidecar);
    Snippet s;
    s.id = f.stem().string();
    s.features = data::read_matrix(f);
    try {
      s.category = j.at("category").get<std::string>();
      s.source = parse_source(j.at("source").get<std::string>());
    } catch (const nlohmann::json::exception& e) {
      throw DataError(sidecar.string() + ": " + e.what());
    }
    bank.snippets.push_back(std::move(s));
  }
  if (bank.snippets.empty()) throw DataError("snippet directory " + dir.string() + " holds no .ovff files");
  return bank;
}

inline void save_snippet(const Snippet& s, const std::filesystem::path& dir) {
  data::write_matrix(s.features, dir / (s.id + ".ovff"));
  model::detail::write_json(dir / (s.id + ".json"), {{"category", s.category}, {"source", to_string(s.source)}});
}

// ---------------------------------------------------------------------------

struct Provenance {
  std::string normal_id;
  std::string snippet_id;
  std::size_t insertion = 0;  // u: snippet occupies [u, u + m) before sub-sampling

  bool operator==(const Provenance&) const = default;
};

struct PseudoVideo {
  data::FeatureSequence features;
  std::vector<std::uint8_t> frame_gt;
  std::string category;
  Provenance provenance;
};

struct NormalSource {
  std::string id;
  const data::FeatureSequence* sequence = nullptr;
};

// normal[0:u] ++ snippet ++ normal[u:], with gt 0^u 1^m 0^(n-u).
inline PseudoVideo splice_at(const NormalSource& normal, const Snippet& snippet, std::size_t u) {
  const Matrix& a = normal.sequence->features;
  const Matrix& s = snippet.features;
  if (a.cols() != s.cols()) {
    throw ShapeError("splice: normal " + normal.id + " has dim " + std::to_string(a.cols()) + ", snippet " +
                     snippet.id + " has " + std::to_string(s.cols()));
  }
  if (u > a.rows()) throw ConfigError("insertion index " + std::to_string(u) + " beyond " + std::to_string(a.rows()));
  const std::size_t n = a.rows(), m = s.rows(), c = a.cols();
  Matrix out(n + m, c);
  std::vector<std::uint8_t> gt(n + m, 0);
  for (std::size_t i = 0; i < n + m; ++i) {
    const bool inserted = i >= u && i < u + m;
    const auto src = inserted ? s.row(i - u) : a.row(i < u ? i : i - m);
    std::copy(src.begin(), src.end(), out.row(i).begin());
    gt[i] = inserted;
  }
  const auto stride = normal.sequence->stride;
  return PseudoVideo{data::make_sequence(std::move(out), stride), std::move(gt), snippet.category,
                     Provenance{normal.id, snippet.id, u}};
}

inline PseudoVideo splice_insert(const NormalSource& normal, const Snippet& snippet, Rng& rng) {
  std::uniform_int_distribution<std::size_t> pick(0, normal.sequence->length());
  return splice_at(normal, snippet, pick(rng));
}

// per_category pseudo videos for each category, each from an independent
// (normal, snippet, u) draw, capped at max_len frames with labels sampled at
// the same indices as the features.
inline std::vector<PseudoVideo> build_pseudo_set(const std::vector<NormalSource>& normals, const SnippetBank& bank,
                                                 const std::vector<std::string>& categories, std::size_t per_category,
                                                 Rng& rng, std::size_t max_len = data::kMaxTrainLength) {
  if (per_category == 0) throw ConfigError("per_category must be >= 1");
  if (normals.empty()) throw DataError("no normal videos to splice into");
  std::vector<PseudoVideo> out;
  out.reserve(categories.size() * per_category);
  std::uniform_int_distribution<std::size_t> pick_normal(0, normals.size() - 1);
  for (const auto& cat : categories) {
    const auto pool = bank.of(cat);
    if (pool.empty()) throw DataError("snippet bank has no snippets for category '" + cat + "'");
    std::uniform_int_distribution<std::size_t> pick_snippet(0, pool.size() - 1);
    for (std::size_t i = 0; i < per_category; ++i) {
      const NormalSource& normal = normals[pick_normal(rng)];
      const Snippet& snippet = bank.snippets[pool[pick_snippet(rng)]];
      PseudoVideo v = splice_insert(normal, snippet, rng);
      if (v.features.length() > max_len) {
        std::vector<std::size_t> kept;
        v.features = data::sample_frames(v.features, max_len, rng, &kept);
        v.frame_gt = data::gather(v.frame_gt, kept);
      }
      out.push_back(std::move(v));
    }
  }
  return out;
}

// Normal train videos of a manifest, loaded.
struct NormalPool {
  std::vector<data::FeatureSequence> sequences;
  std::vector<NormalSource> sources;
};

inline NormalPool load_normal_pool(const data::Manifest& m) {
  NormalPool pool;
  const auto idx = m.indices(data::Split::kTrain);
  for (std::size_t i : idx)
    if (m.videos[i].label == data::kNormalLabel) pool.sequences.push_back(data::load_sequence(m.videos[i]));
  std::size_t j = 0;
  for (std::size_t i : idx)
    if (m.videos[i].label == data::kNormalLabel) pool.sources.push_back({m.videos[i].id, &pool.sequences[j++]});
  if (pool.sources.empty()) throw DataError("manifest has no normal training videos");
  return pool;
}

// ---------------------------------------------------------------------------
// Persistence: pseudo.json lists every video with its labels and provenance;
// features live next to it as pseudo_<i>.ovff.

inline void save_pseudo_set(const std::vector<PseudoVideo>& set, const std::filesystem::path& dir) {
  std::filesystem::create_directories(dir);
  nlohmann::json videos = nlohmann::json::array();
  for (std::size_t i = 0; i < set.size(); ++i) {
    const auto& v = set[i];
    const std::string file = "pseudo_" + std::to_string(i) + ".ovff";
    data::write_matrix(v.features.features, dir / file);
    std::vector<int> gt(v.frame_gt.begin(), v.frame_gt.end());
    videos.push_back({{"features", file},
                      {"category", v.category},
                      {"frame_gt", gt},
                      {"stride", v.features.stride},
                      {"provenance",
                       {{"normal_id", v.provenance.normal_id},
                        {"snippet_id", v.provenance.snippet_id},
                        {"insertion", v.provenance.insertion}}}});
  }
  model::detail::write_json(dir / "pseudo.json", {{"videos", videos}});
}

inline std::vector<PseudoVideo> load_pseudo_set(const std::filesystem::path& dir) {
  const auto path = dir / "pseudo.json";
  if (!std::filesystem::exists(path)) throw DataError("pseudo set not found: " + path.string());
  const auto j = model::detail::read_json(path);
  std::vector<PseudoVideo> out;
  try {
    for (const auto& e : j.at("videos")) {
      PseudoVideo v;
      const auto stride = e.value("stride", data::kDefaultStride);
      v.features = data::make_sequence(data::read_matrix(dir / e.at("features").get<std::string>()), stride);
      for (int g : e.at("frame_gt").get<std::vector<int>>()) {
        if (g != 0 && g != 1) throw DataError(path.string() + ": frame labels must be 0 or 1");
        v.frame_gt.push_back(static_cast<std::uint8_t>(g));
      }
      if (v.frame_gt.size() != v.features.length()) {
        throw DataError(path.string() + ": frame_gt length does not match features");
      }
      v.category = e.at("category").get<std::string>();
      const auto& p = e.at("provenance");
      v.provenance = {p.at("normal_id").get<std::string>(), p.at("snippet_id").get<std::string>(),
                      p.at("insertion").get<std::size_t>()};
      out.push_back(std::move(v));
    }
  } catch (const nlohmann::json::exception& e) {
    throw DataError(path.string() + ": " + e.what());
  }
  if (out.empty()) throw DataError(path.string() + ": empty pseudo set");
  return out;
}

}  // namespace ovvad::nas
