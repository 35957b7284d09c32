#pragma once

// Text-side inputs: the anomaly class catalog and the semantic knowledge bank.
// Both are stored as an OVFF embedding matrix plus a JSON sidecar:
//
//   catalog.json   {"embeddings": "catalog.ovff",
//                   "classes": [{"name": "Abuse", "base": true}, ...]}
//   knowledge.json {"embeddings": "knowledge.ovff",
//                   "phrases": [{"text": "street", "group": "normal"}, ...]}
//
// Embedding paths are relative to the sidecar's directory.

#include <algorithm>
#include <filesystem>
#include <fstream>
#include <optional>
#include <string>
#include <vector>

#include "json.hpp"
#include "ovvad/data/feature_io.hpp"
#include "ovvad/error.hpp"
#include "ovvad/matrix.hpp"

namespace ovvad::model {

using json = nlohmann::json;

enum class KnowledgeGroup { kNormal, kAbnormal };

inline const char* to_string(KnowledgeGroup g) { return g == KnowledgeGroup::kNormal ? "normal" : "abnormal"; }

inline KnowledgeGroup parse_group(const std::string& s) {
  if (s == "normal") return KnowledgeGroup::kNormal;
  if (s == "abnormal") return KnowledgeGroup::kAbnormal;
  throw DataError("unknown knowledge group '" + s + "'");
}

struct KnowledgeBank {
  Matrix embeddings;  // l × c, initial value of the trainable F_text
  std::vector<KnowledgeGroup> groups;
  std::vector<std::string> phrases;

  std::size_t size() const noexcept { return groups.size(); }

  std::vector<std::size_t> rows_of(KnowledgeGroup g) const {
    std::vector<std::size_t> out;
    for (std::size_t i = 0; i < groups.size(); ++i)
      if (groups[i] == g) out.push_back(i);
    return out;
  }

  void validate() const {
    if (embeddings.rows() != groups.size() || phrases.size() != groups.size()) {
      throw DataError("knowledge bank: " + std::to_string(groups.size()) + " phrases vs " +
                      std::to_string(embeddings.rows()) + " embedding rows");
    }
    if (groups.size() < 2) throw DataError("knowledge bank needs at least two phrases");
    if (rows_of(KnowledgeGroup::kNormal).empty() || rows_of(KnowledgeGroup::kAbnormal).empty()) {
      throw DataError("knowledge bank needs both normal and abnormal phrases");
    }
  }
};

inline constexpr double kDefaultLogitScale = 1.0 / 0.07;

struct ClassCatalog {
  std::vector<std::string> class_names;
  Matrix embeddings;  // k × c, frozen, unit-norm rows
  std::vector<bool> is_base;
  double logit_scale = kDefaultLogitScale;

  std::size_t size() const noexcept { return class_names.size(); }
  std::size_t dim() const noexcept { return embeddings.cols(); }

  std::optional<std::size_t> index_of(const std::string& name) const {
    auto it = std::find(class_names.begin(), class_names.end(), name);
    if (it == class_names.end()) return std::nullopt;
    return static_cast<std::size_t>(it - class_names.begin());
  }

  std::vector<std::size_t> base_indices() const {
    std::vector<std::size_t> out;
    for (std::size_t i = 0; i < is_base.size(); ++i)
      if (is_base[i]) out.push_back(i);
    return out;
  }
  std::vector<std::size_t> novel_indices() const {
    std::vector<std::size_t> out;
    for (std::size_t i = 0; i < is_base.size(); ++i)
      if (!is_base[i]) out.push_back(i);
    return out;
  }
  std::vector<std::size_t> all_indices() const {
    std::vector<std::size_t> out(size());
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = i;
    return out;
  }

  // Rescales every embedding row to unit length.
  void normalize_rows() {
    for (std::size_t i = 0; i < embeddings.rows(); ++i) {
      const double n = l2_norm(embeddings.row(i));
      if (!(n > 0.0)) throw DataError("class catalog: zero embedding for " + class_names.at(i));
      for (double& v : embeddings.row(i)) v /= n;
    }
  }

  void validate() const {
    if (class_names.size() != embeddings.rows() || is_base.size() != class_names.size()) {
      throw DataError("class catalog: " + std::to_string(class_names.size()) + " names vs " +
                      std::to_string(embeddings.rows()) + " embedding rows");
    }
    if (base_indices().empty()) throw DataError("class catalog needs at least one base class");
    for (std::size_t i = 0; i < class_names.size(); ++i) {
      if (class_names[i] == "normal") throw DataError("class catalog: 'normal' is reserved");
      if (std::count(class_names.begin(), class_names.end(), class_names[i]) > 1) {
        throw DataError("class catalog: duplicate class " + class_names[i]);
      }
    }
  }
};

namespace detail {

inline json read_json(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw DataError("cannot open " + path.string());
  try {
    return json::parse(in);
  } catch (const json::exception& e) {
    throw DataError(path.string() + ": " + e.what());
  }
}

inline void write_json(const std::filesystem::path& path, const json& j) {
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  std::ofstream out(path, std::ios::trunc);
  if (!out) throw DataError("cannot write " + path.string());
  out << j.dump(2) << '\n';
}

inline std::filesystem::path resolve(const std::filesystem::path& base_file, const std::string& rel) {
  std::filesystem::path p(rel);
  return p.is_absolute() ? p : base_file.parent_path() / p;
}

}  // namespace detail

inline ClassCatalog load_catalog(const std::filesystem::path& sidecar) {
  const json j = detail::read_json(sidecar);
  ClassCatalog cat;
  try {
    for (const auto& c : j.at("classes")) {
      cat.class_names.push_back(c.at("name").get<std::string>());
      cat.is_base.push_back(c.at("base").get<bool>());
    }
    cat.embeddings = data::read_matrix(detail::resolve(sidecar, j.at("embeddings").get<std::string>()));
    if (j.contains("logit_scale")) cat.logit_scale = j.at("logit_scale").get<double>();
  } catch (const json::exception& e) {
    throw DataError(sidecar.string() + ": " + e.what());
  }
  cat.validate();
  cat.normalize_rows();
  return cat;
}

inline void save_catalog(const ClassCatalog& cat, const std::filesystem::path& sidecar,
                         const std::string& embeddings_name = "catalog.ovff") {
  json classes = json::array();
  for (std::size_t i = 0; i < cat.size(); ++i)
    classes.push_back({{"name", cat.class_names[i]}, {"base", static_cast<bool>(cat.is_base[i])}});
  data::write_matrix(cat.embeddings, detail::resolve(sidecar, embeddings_name));
  detail::write_json(sidecar, {{"embeddings", embeddings_name}, {"classes", classes}});
}

inline KnowledgeBank load_knowledge(const std::filesystem::path& sidecar) {
  const json j = detail::read_json(sidecar);
  KnowledgeBank bank;
  try {
    for (const auto& p : j.at("phrases")) {
      bank.phrases.push_back(p.at("text").get<std::string>());
      bank.groups.push_back(parse_group(p.at("group").get<std::string>()));
    }
    bank.embeddings = data::read_matrix(detail::resolve(sidecar, j.at("embeddings").get<std::string>()));
  } catch (const json::exception& e) {
    throw DataError(sidecar.string() + ": " + e.what());
  }
  bank.validate();
  return bank;
}

inline void save_knowledge(const KnowledgeBank& bank, const std::filesystem::path& sidecar,
                           const std::string& embeddings_name = "knowledge.ovff") {
  json phrases = json::array();
  for (std::size_t i = 0; i < bank.size(); ++i)
    phrases.push_back({{"text", bank.phrases[i]}, {"group", to_string(bank.groups[i])}});
  data::write_matrix(bank.embeddings, detail::resolve(sidecar, embeddings_name));
  detail::write_json(sidecar, {{"embeddings", embeddings_name}, {"phrases", phrases}});
}

}  // namespace ovvad::model
