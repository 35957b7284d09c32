#pragma once

// Frame-level ROC-AUC / AP and video-level Top-1 accuracy.
//
// ROC-AUC is the rank statistic P(s+ > s-) + 0.5 P(s+ == s-). AP is the
// step-wise sum over distinct thresholds (descending), with tied scores
// entering together:  AP = sum_i (R_i - R_{i-1}) * P_i.
//
// Frame metrics run at the original frame rate: per-sample scores and labels
// are repeated `stride` times and cut to the original frame count. The base
// and novel subsets both contain every normal test video.

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <iomanip>
#include <limits>
#include <numeric>
#include <optional>
#include <span>
#include <sstream>
#include <string>
#include <vector>

#include "json.hpp"
#include "ovvad/data/manifest.hpp"
#include "ovvad/error.hpp"
#include "ovvad/model/catalog.hpp"
#include "ovvad/model/forward.hpp"
#include "ovvad/model/params.hpp"
#include "ovvad/parallel.hpp"

namespace ovvad::eval {

using json = nlohmann::json;

namespace detail {

// Distinct scores in descending order with per-group positive/negative counts.
struct TieGroup {
  double score;
  std::size_t pos = 0, neg = 0;
};

inline std::vector<TieGroup> tie_groups(std::span<const double> scores, std::span<const std::uint8_t> labels) {
  if (scores.size() != labels.size()) {
    throw ShapeError("metric: " + std::to_string(scores.size()) + " scores vs " + std::to_string(labels.size()) +
                     " labels");
  }
  std::vector<std::size_t> order(scores.size());
  std::iota(order.begin(), order.end(), 0);
  for (double s : scores)
    if (std::isnan(s)) throw NumericalError("metric: NaN score");
  std::sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) { return scores[a] > scores[b]; });
  std::vector<TieGroup> groups;
  for (std::size_t i : order) {
    if (groups.empty() || groups.back().score != scores[i]) groups.push_back({scores[i]});
    (labels[i] ? groups.back().pos : groups.back().neg)++;
  }
  return groups;
}

inline void count_classes(std::span<const std::uint8_t> labels, std::size_t& pos, std::size_t& neg) {
  pos = neg = 0;
  for (auto l : labels) {
    if (l > 1) throw DataError("labels must be 0 or 1");
    (l ? pos : neg)++;
  }
}

}  // namespace detail

inline double roc_auc(std::span<const double> scores, std::span<const std::uint8_t> labels) {
  std::size_t pos, neg;
  detail::count_classes(labels, pos, neg);
  if (pos == 0 || neg == 0) throw UndefinedMetricError("ROC-AUC needs both positive and negative frames");
  // Walk ascending; each positive beats the negatives strictly below it.
  auto groups = detail::tie_groups(scores, labels);
  double wins = 0.0;
  std::size_t neg_below = 0;
  for (auto it = groups.rbegin(); it != groups.rend(); ++it) {
    wins += static_cast<double>(it->pos) * (static_cast<double>(neg_below) + 0.5 * static_cast<double>(it->neg));
    neg_below += it->neg;
  }
  return wins / (static_cast<double>(pos) * static_cast<double>(neg));
}

inline double pr_auc(std::span<const double> scores, std::span<const std::uint8_t> labels) {
  std::size_t pos, neg;
  detail::count_classes(labels, pos, neg);
  if (pos == 0) throw UndefinedMetricError("AP needs at least one positive frame");
  double ap = 0.0;
  std::size_t tp = 0, fp = 0;
  for (const auto& g : detail::tie_groups(scores, labels)) {
    tp += g.pos;
    fp += g.neg;
    if (g.pos == 0) continue;
    const double recall_step = static_cast<double>(g.pos) / static_cast<double>(pos);
    ap += recall_step * (static_cast<double>(tp) / static_cast<double>(tp + fp));
  }
  return ap;
}

struct CurvePoint {
  double threshold, x, y;
};

// (threshold, fpr, tpr), starting from (+inf, 0, 0).
inline std::vector<CurvePoint> roc_curve(std::span<const double> scores, std::span<const std::uint8_t> labels) {
  std::size_t pos, neg;
  detail::count_classes(labels, pos, neg);
  if (pos == 0 || neg == 0) throw UndefinedMetricError("ROC curve needs both classes");
  std::vector<CurvePoint> out{{std::numeric_limits<double>::infinity(), 0.0, 0.0}};
  std::size_t tp = 0, fp = 0;
  for (const auto& g : detail::tie_groups(scores, labels)) {
    tp += g.pos;
    fp += g.neg;
    out.push_back({g.score, static_cast<double>(fp) / static_cast<double>(neg),
                   static_cast<double>(tp) / static_cast<double>(pos)});
  }
  return out;
}

// (threshold, recall, precision) per distinct threshold.
inline std::vector<CurvePoint> pr_curve(std::span<const double> scores, std::span<const std::uint8_t> labels) {
  std::size_t pos, neg;
  detail::count_classes(labels, pos, neg);
  if (pos == 0) throw UndefinedMetricError("PR curve needs at least one positive");
  std::vector<CurvePoint> out;
  std::size_t tp = 0, fp = 0;
  for (const auto& g : detail::tie_groups(scores, labels)) {
    tp += g.pos;
    fp += g.neg;
    out.push_back({g.score, static_cast<double>(tp) / static_cast<double>(pos),
                   static_cast<double>(tp) / static_cast<double>(tp + fp)});
  }
  return out;
}

// Repeats each per-sample value `stride` times and truncates to the original
// frame count, which must lie in ((n-1)*stride, n*stride].
template <class T>
std::vector<T> expand_scores(std::span<const T> values, std::size_t stride, std::size_t original_frame_count) {
  if (stride == 0) throw ConfigError("stride must be >= 1");
  const std::size_t n = values.size();
  if (original_frame_count < n) {
    throw DataError("original frame count " + std::to_string(original_frame_count) + " is shorter than " +
                    std::to_string(n) + " samples");
  }
  if (n == 0 || original_frame_count <= (n - 1) * stride || original_frame_count > n * stride) {
    throw DataError("original frame count " + std::to_string(original_frame_count) + " does not match " +
                    std::to_string(n) + " samples at stride " + std::to_string(stride));
  }
  std::vector<T> out;
  out.reserve(original_frame_count);
  for (std::size_t f = 0; f < original_frame_count; ++f) out.push_back(values[f / stride]);
  return out;
}

template <class T>
std::vector<T> expand_scores(const std::vector<T>& values, std::size_t stride, std::size_t original_frame_count) {
  return expand_scores(std::span<const T>(values), stride, original_frame_count);
}

// ---------------------------------------------------------------------------

struct EvalReport {
  std::optional<double> auc, auc_base, auc_novel;
  std::optional<double> ap, ap_base, ap_novel;
  std::optional<double> acc, acc_base, acc_novel;
  std::vector<std::string> class_names;
  std::vector<std::vector<std::size_t>> confusion;  // true × predicted, abnormal test videos
  std::vector<CurvePoint> roc, pr;                  // overall
  std::vector<std::string> excluded;                // test videos without frame labels
  std::size_t videos = 0, frames = 0;
};

// Model outputs for one test video.
struct VideoScores {
  std::vector<double> frame_scores;  // per sampled frame, in [0, 1]
  std::vector<double> class_logits;  // one per catalog class
};

namespace detail {

struct FrameSet {
  std::vector<double> scores;
  std::vector<std::uint8_t> labels;

  void append(const std::vector<double>& s, const std::vector<std::uint8_t>& l) {
    scores.insert(scores.end(), s.begin(), s.end());
    labels.insert(labels.end(), l.begin(), l.end());
  }
};

inline std::optional<double> try_metric(double (*fn)(std::span<const double>, std::span<const std::uint8_t>),
                                        const FrameSet& f) {
  try {
    return fn(f.scores, f.labels);
  } catch (const UndefinedMetricError&) {
    return std::nullopt;
  }
}

inline std::optional<double> ratio(std::size_t hit, std::size_t total) {
  if (total == 0) return std::nullopt;
  return static_cast<double>(hit) / static_cast<double>(total);
}

}  // namespace detail

// Report from precomputed per-video outputs, aligned with the manifest's
// test split order.
inline EvalReport evaluate_scores(const data::Manifest& manifest, const model::ClassCatalog& catalog,
                                  const std::vector<VideoScores>& outputs) {
  const auto test = manifest.indices(data::Split::kTest);
  if (test.empty()) throw DataError("manifest has no test videos");
  if (outputs.size() != test.size()) throw ShapeError("one output per test video expected");
  const std::size_t k = catalog.size();
  EvalReport r;
  r.class_names = catalog.class_names;
  r.confusion.assign(k, std::vector<std::size_t>(k, 0));
  r.videos = test.size();
  detail::FrameSet all, base, novel;
  std::size_t hit[2] = {0, 0}, total[2] = {0, 0};  // [base, novel]

  for (std::size_t t = 0; t < test.size(); ++t) {
    const auto& v = manifest.videos[test[t]];
    const auto& out = outputs[t];
    std::optional<std::size_t> cls;
    if (v.is_abnormal()) {
      cls = catalog.index_of(v.label);
      if (!cls) throw DataError("video " + v.id + ": label '" + v.label + "' is not in the class catalog");
      if (out.class_logits.size() != k) throw ShapeError("video " + v.id + ": class logits do not match catalog");
      const auto pred = static_cast<std::size_t>(
          std::max_element(out.class_logits.begin(), out.class_logits.end()) - out.class_logits.begin());
      const int side = catalog.is_base[*cls] ? 0 : 1;
      ++total[side];
      hit[side] += pred == *cls;
      ++r.confusion[*cls][pred];
    }
    if (!v.frame_gt) {
      r.excluded.push_back(v.id);
      continue;
    }
    if (v.frame_gt->size() != out.frame_scores.size()) {
      throw ShapeError("video " + v.id + ": " + std::to_string(out.frame_scores.size()) + " scores vs " +
                       std::to_string(v.frame_gt->size()) + " labels");
    }
    const std::size_t orig = v.original_frame_count.value_or(out.frame_scores.size() * v.stride);
    auto s = expand_scores(out.frame_scores, v.stride, orig);
    auto l = expand_scores(*v.frame_gt, v.stride, orig);
    all.append(s, l);
    if (!cls || catalog.is_base[*cls]) base.append(s, l);
    if (!cls || !catalog.is_base[*cls]) novel.append(s, l);
  }
  r.frames = all.scores.size();

  const bool has_novel_videos = total[1] > 0;
  r.auc = detail::try_metric(roc_auc, all);
  r.ap = detail::try_metric(pr_auc, all);
  r.auc_base = detail::try_metric(roc_auc, base);
  r.ap_base = detail::try_metric(pr_auc, base);
  if (has_novel_videos) {
    r.auc_novel = detail::try_metric(roc_auc, novel);
    r.ap_novel = detail::try_metric(pr_auc, novel);
  }
  r.acc = detail::ratio(hit[0] + hit[1], total[0] + total[1]);
  r.acc_base = detail::ratio(hit[0], total[0]);
  r.acc_novel = detail::ratio(hit[1], total[1]);
  if (r.auc) r.roc = roc_curve(all.scores, all.labels);
  if (r.ap) r.pr = pr_curve(all.scores, all.labels);
  return r;
}

// Runs the model over every test video (full length, no sub-sampling).
inline std::vector<VideoScores> score_test_videos(const model::ModelParams& params, const data::Manifest& manifest,
                                                  const model::ClassCatalog& catalog, const model::ModelConfig& cfg,
                                                  std::size_t threads = worker_count()) {
  const auto test = manifest.indices(data::Split::kTest);
  std::vector<VideoScores> out(test.size());
  parallel_for(
      test.size(),
      [&](std::size_t t) {
        const auto seq = data::load_sequence(manifest.videos[test[t]]);
        auto fwd = model::infer(seq.features, params, catalog, cfg);
        out[t].frame_scores.reserve(fwd.p.size());
        for (double p : fwd.p) out[t].frame_scores.push_back(sigmoid(p));
        out[t].class_logits = std::move(fwd.class_logits);
      },
      threads);
  return out;
}

inline EvalReport evaluate(const model::ModelParams& params, const data::Manifest& manifest,
                           const model::ClassCatalog& catalog, const model::ModelConfig& cfg,
                           std::size_t threads = worker_count()) {
  return evaluate_scores(manifest, catalog, score_test_videos(params, manifest, catalog, cfg, threads));
}

// ---------------------------------------------------------------------------
// Artifacts

inline json to_json(const EvalReport& r) {
  auto opt = [](const std::optional<double>& v) { return v ? json(*v) : json(nullptr); };
  return {{"auc", opt(r.auc)},
          {"auc_base", opt(r.auc_base)},
          {"auc_novel", opt(r.auc_novel)},
          {"ap", opt(r.ap)},
          {"ap_base", opt(r.ap_base)},
          {"ap_novel", opt(r.ap_novel)},
          {"acc", opt(r.acc)},
          {"acc_base", opt(r.acc_base)},
          {"acc_novel", opt(r.acc_novel)},
          {"videos", r.videos},
          {"frames", r.frames},
          {"excluded", r.excluded},
          {"confusion", {{"classes", r.class_names}, {"matrix", r.confusion}}}};
}

inline EvalReport report_from_json(const json& j) {
  EvalReport r;
  auto opt = [&](const char* key) -> std::optional<double> {
    if (!j.contains(key) || j.at(key).is_null()) return std::nullopt;
    return j.at(key).get<double>();
  };
  try {
    r.auc = opt("auc");
    r.auc_base = opt("auc_base");
    r.auc_novel = opt("auc_novel");
    r.ap = opt("ap");
    r.ap_base = opt("ap_base");
    r.ap_novel = opt("ap_novel");
    r.acc = opt("acc");
    r.acc_base = opt("acc_base");
    r.acc_novel = opt("acc_novel");
    r.videos = j.value("videos", std::size_t{0});
    r.frames = j.value("frames", std::size_t{0});
    r.excluded = j.value("excluded", std::vector<std::string>{});
    if (j.contains("confusion")) {
      r.class_names = j["confusion"].at("classes").get<std::vector<std::string>>();
      r.confusion = j["confusion"].at("matrix").get<std::vector<std::vector<std::size_t>>>();
    }
  } catch (const json::exception& e) {
    throw DataError(std::string("malformed report: ") + e.what());
  }
  return r;
}

inline void write_curve_csv(const std::vector<CurvePoint>& pts, const char* x, const char* y,
                            const std::filesystem::path& path) {
  std::ofstream out(path);
  if (!out) throw DataError("cannot write " + path.string());
  out.precision(17);
  out << "threshold," << x << ',' << y << '\n';
  for (const auto& p : pts) out << p.threshold << ',' << p.x << ',' << p.y << '\n';
}

inline void write_confusion_csv(const EvalReport& r, const std::filesystem::path& path) {
  std::ofstream out(path);
  if (!out) throw DataError("cannot write " + path.string());
  out << "true\\predicted";
  for (const auto& n : r.class_names) out << ',' << n;
  out << '\n';
  for (std::size_t i = 0; i < r.confusion.size(); ++i) {
    out << r.class_names[i];
    for (auto c : r.confusion[i]) out << ',' << c;
    out << '\n';
  }
}

// report.json, roc.csv, pr.csv, confusion.csv.
inline void write_report(const EvalReport& r, const std::filesystem::path& dir) {
  std::filesystem::create_directories(dir);
  model::detail::write_json(dir / "report.json", to_json(r));
  write_curve_csv(r.roc, "fpr", "tpr", dir / "roc.csv");
  write_curve_csv(r.pr, "recall", "precision", dir / "pr.csv");
  write_confusion_csv(r, dir / "confusion.csv");
}

// Plain-text table with overall / base / novel columns, one row per named run.
inline std::string render_table(const std::vector<std::pair<std::string, EvalReport>>& runs) {
  auto cell = [](const std::optional<double>& v) {
    std::ostringstream s;
    if (v)
      s << std::fixed << std::setprecision(2) << 100.0 * *v;
    else
      s << "-";
    return s.str();
  };
  std::size_t name_w = 3;
  for (const auto& [n, r] : runs) name_w = std::max(name_w, n.size());
  std::ostringstream out;
  const char* heads[] = {"AUC", "AUC_b", "AUC_n", "AP", "AP_b", "AP_n", "ACC", "ACC_b", "ACC_n"};
  out << std::left << std::setw(static_cast<int>(name_w)) << "run";
  for (const char* h : heads) out << "  " << std::right << std::setw(6) << h;
  out << '\n';
  for (const auto& [n, r] : runs) {
    out << std::left << std::setw(static_cast<int>(name_w)) << n;
    for (const auto* v : {&r.auc, &r.auc_base, &r.auc_novel, &r.ap, &r.ap_base, &r.ap_novel, &r.acc, &r.acc_base,
                          &r.acc_novel})
      out << "  " << std::right << std::setw(6) << cell(*v);
    out << '\n';
  }
  return out.str();
}

}  // namespace ovvad::eval
