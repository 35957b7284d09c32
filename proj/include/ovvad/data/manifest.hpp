#pragma once

// manifest.json:
//   {"feature_dim": 512,
//    "class_catalog_path": "catalog.json",
//    "knowledge_bank_path": "knowledge.json",
//    "videos": [{"id": "v0", "feature_path": "features/v0.ovff",
//                "label": "normal" | "<class name>", "split": "train" | "test",
//                "frame_gt": [0, 1, ...],          // optional, per sampled frame
//                "stride": 16,                      // optional
//                "original_frame_count": 160}]}     // optional
//
// Relative paths resolve against the manifest's directory.

#include <cstdint>
#include <filesystem>
#include <optional>
#include <set>
#include <string>
#include <vector>

#include "json.hpp"
#include "ovvad/data/feature_io.hpp"
#include "ovvad/error.hpp"
#include "ovvad/model/catalog.hpp"

namespace ovvad::data {

using json = nlohmann::json;

inline constexpr const char* kNormalLabel = "normal";

enum class Split { kTrain, kTest };

inline const char* to_string(Split s) { return s == Split::kTrain ? "train" : "test"; }

inline Split parse_split(const std::string& s) {
  if (s == "train") return Split::kTrain;
  if (s == "test") return Split::kTest;
  throw DataError("unknown split '" + s + "'");
}

struct VideoRecord {
  std::string id;
  std::filesystem::path feature_path;  // absolute after loading
  std::string label;                   // "normal" or a catalog class name
  Split split = Split::kTrain;
  std::optional<std::vector<std::uint8_t>> frame_gt;
  std::uint32_t stride = kDefaultStride;
  std::optional<std::size_t> original_frame_count;

  bool is_normal() const { return label == kNormalLabel; }
  bool is_abnormal() const { return !is_normal(); }
};

struct Manifest {
  std::vector<VideoRecord> videos;
  std::size_t feature_dim = 0;
  std::filesystem::path class_catalog_path;
  std::filesystem::path knowledge_bank_path;

  std::vector<std::size_t> indices(Split split) const {
    std::vector<std::size_t> out;
    for (std::size_t i = 0; i < videos.size(); ++i)
      if (videos[i].split == split) out.push_back(i);
    return out;
  }

  // Checks labels against a catalog; throws DataError on the first violation.
  void validate_labels(const model::ClassCatalog& catalog) const {
    for (const auto& v : videos) {
      if (v.is_normal()) continue;
      if (!catalog.index_of(v.label)) {
        throw DataError("video " + v.id + ": label '" + v.label + "' is not in the class catalog");
      }
    }
  }
};

inline FeatureSequence load_sequence(const VideoRecord& v) {
  return read_features(v.feature_path, v.stride, v.original_frame_count.value_or(0));
}

inline void validate_record(const VideoRecord& v) {
  if (v.id.empty()) throw DataError("video with empty id");
  if (v.label.empty()) throw DataError("video " + v.id + ": empty label");
  if (v.stride == 0) throw DataError("video " + v.id + ": stride must be >= 1");
  if (v.frame_gt && v.is_normal()) {
    for (auto g : *v.frame_gt)
      if (g != 0) throw DataError("video " + v.id + ": normal video has positive frame_gt");
  }
  if (v.frame_gt) {
    for (auto g : *v.frame_gt)
      if (g > 1) throw DataError("video " + v.id + ": frame_gt entries must be 0 or 1");
  }
}

inline Manifest load_manifest(const std::filesystem::path& path, bool check_files = true) {
  const json j = model::detail::read_json(path);
  Manifest m;
  std::set<std::string> seen;
  try {
    m.feature_dim = j.at("feature_dim").get<std::size_t>();
    m.class_catalog_path = model::detail::resolve(path, j.at("class_catalog_path").get<std::string>());
    m.knowledge_bank_path = model::detail::resolve(path, j.at("knowledge_bank_path").get<std::string>());
    for (const auto& e : j.at("videos")) {
      VideoRecord v;
      v.id = e.at("id").get<std::string>();
      v.feature_path = model::detail::resolve(path, e.at("feature_path").get<std::string>());
      v.label = e.at("label").get<std::string>();
      v.split = parse_split(e.at("split").get<std::string>());
      if (e.contains("frame_gt") && !e.at("frame_gt").is_null())
        v.frame_gt = e.at("frame_gt").get<std::vector<std::uint8_t>>();
      if (e.contains("stride")) v.stride = e.at("stride").get<std::uint32_t>();
      if (e.contains("original_frame_count")) v.original_frame_count = e.at("original_frame_count").get<std::size_t>();
      validate_record(v);
      if (!seen.insert(v.id).second) throw DataError("duplicate video id " + v.id);
      m.videos.push_back(std::move(v));
    }
  } catch (const json::exception& e) {
    throw DataError(path.string() + ": " + e.what());
  }
  if (check_files) {
    for (const auto& p : {m.class_catalog_path, m.knowledge_bank_path})
      if (!std::filesystem::exists(p)) throw DataError("missing file " + p.string());
    for (const auto& v : m.videos)
      if (!std::filesystem::exists(v.feature_path)) throw DataError("missing feature file " + v.feature_path.string());
  }
  return m;
}

// Writes paths relative to the manifest directory when they live beneath it.
inline void save_manifest(const Manifest& m, const std::filesystem::path& path) {
  const auto base = path.has_parent_path() ? path.parent_path() : std::filesystem::path(".");
  auto rel = [&](const std::filesystem::path& p) {
    auto r = p.lexically_relative(base);
    return (r.empty() || *r.begin() == "..") ? p.generic_string() : r.generic_string();
  };
  json videos = json::array();
  for (const auto& v : m.videos) {
    json e{{"id", v.id}, {"feature_path", rel(v.feature_path)}, {"label", v.label}, {"split", to_string(v.split)}};
    if (v.frame_gt) e["frame_gt"] = *v.frame_gt;
    if (v.stride != kDefaultStride) e["stride"] = v.stride;
    if (v.original_frame_count) e["original_frame_count"] = *v.original_frame_count;
    videos.push_back(std::move(e));
  }
  model::detail::write_json(path, {{"feature_dim", m.feature_dim},
                                   {"class_catalog_path", rel(m.class_catalog_path)},
                                   {"knowledge_bank_path", rel(m.knowledge_bank_path)},
                                   {"videos", videos}});
}

}  // namespace ovvad::data
