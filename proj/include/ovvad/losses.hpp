#pragma once

// Training objectives.
//
// Stage 1 (weak labels):   total = L_bce + L_ce + L_sim_n + L_sim_a
// Stage 2 (pseudo + base): total = L_bce2 + L_ce2 + lambda * (L_bce + L_ce)
//
// Every term is an arithmetic mean over the videos that contribute to it.
// Gradients are computed per video on an independent tape and summed in
// sample order.

#include <algorithm>
#include <array>
#include <cmath>
#include <optional>
#include <span>
#include <vector>

#include "ovvad/autodiff.hpp"
#include "ovvad/error.hpp"
#include "ovvad/model/catalog.hpp"
#include "ovvad/model/forward.hpp"
#include "ovvad/model/params.hpp"
#include "ovvad/parallel.hpp"
#include "ovvad/params.hpp"

namespace ovvad::losses {

inline constexpr double kProbClamp = 1e-7;
inline constexpr double kSimScale = 1.0 / 0.07;
inline constexpr double kKnowledgeTopFraction = 0.1;
inline constexpr std::size_t kAbnormalTopkDivisor = 16;

// K for abnormal videos: ceil(n/16), at least 1.
inline std::size_t abnormal_topk(std::size_t n) {
  return std::max<std::size_t>(1, (n + kAbnormalTopkDivisor - 1) / kAbnormalTopkDivisor);
}

// Mean of the k largest entries of an n×1 logit column.
inline ad::Var topk_mean(ad::Var p, std::size_t k) {
  if (p.cols() != 1) throw ShapeError("topk_mean expects an n×1 column");
  return ad::topk_row_mean(ad::transpose(p), k);
}

// -log of a clamped probability.
inline ad::Var neg_log_prob(ad::Var prob) { return ad::affine(ad::log(ad::clamp(prob, kProbClamp, 1.0 - kProbClamp)), -1.0); }

// Video-level BCE on sigmoid(top-K mean). K = n for normal videos.
inline ad::Var video_bce(ad::Var p, bool abnormal) {
  if (p.rows() == 0) throw ShapeError("video_bce: empty logits");
  const std::size_t k = abnormal ? abnormal_topk(p.rows()) : p.rows();
  ad::Var s = ad::sigmoid(topk_mean(p, k));
  return abnormal ? neg_log_prob(s) : neg_log_prob(ad::affine(s, -1.0, 1.0));
}

// -log softmax(logits)[y] for a 1×k logit row.
inline ad::Var class_ce(ad::Var logits, std::size_t y) {
  if (logits.rows() != 1) throw ShapeError("class_ce expects a 1×k row");
  if (y >= logits.cols()) {
    throw ConfigError("class index " + std::to_string(y) + " out of range for " + std::to_string(logits.cols()) +
                      " classes");
  }
  return ad::affine(ad::pick(ad::log_softmax(logits), 0, y), -1.0);
}

// Mean frame-level BCE against 0/1 labels.
inline ad::Var frame_bce(ad::Var p, std::span<const std::uint8_t> gt) {
  if (p.cols() != 1 || p.rows() != gt.size()) {
    throw ShapeError("frame_bce: " + std::to_string(p.rows()) + " logits vs " + std::to_string(gt.size()) + " labels");
  }
  Matrix pos(gt.size(), 1), neg(gt.size(), 1);
  for (std::size_t i = 0; i < gt.size(); ++i) {
    if (gt[i] > 1) throw DataError("frame labels must be 0 or 1");
    pos(i, 0) = gt[i];
    neg(i, 0) = 1.0 - gt[i];
  }
  ad::Tape& t = p.tape();
  ad::Var s = ad::clamp(ad::sigmoid(p), kProbClamp, 1.0 - kProbClamp);
  ad::Var ll = ad::add(ad::hadamard(t.constant(std::move(pos)), ad::log(s)),
                       ad::hadamard(t.constant(std::move(neg)), ad::log(ad::affine(s, -1.0, 1.0))));
  return ad::affine(ad::mean(ll), -1.0);
}

// Frames whose knowledge similarity is supervised: all frames of a normal
// video, or the top-K frames by logit of an abnormal one.
inline std::vector<std::size_t> similarity_frames(std::span<const double> p, bool abnormal) {
  if (!abnormal) {
    std::vector<std::size_t> all(p.size());
    for (std::size_t i = 0; i < all.size(); ++i) all[i] = i;
    return all;
  }
  return ad::topk_indices(p, abnormal_topk(p.size()));
}

// Knowledge similarity loss. For each selected frame the similarity to each
// group is the mean of its top ceil(10%) dot products with that group's
// phrases; the two group scores, scaled by 1/0.07, form a 2-way softmax whose
// target is the video's own group.
inline ad::Var ski_sim_loss(ad::Var x_t, ad::Var bank, const model::KnowledgeBank& meta, std::span<const double> p,
                            bool abnormal, double scale = kSimScale) {
  if (p.size() != x_t.rows()) throw ShapeError("ski_sim_loss: logits and features disagree on n");
  if (bank.rows() != meta.size()) throw ShapeError("ski_sim_loss: bank rows and group tags disagree");
  const auto frames = similarity_frames(p, abnormal);
  ad::Var xs = ad::select_rows(x_t, frames);
  auto group_score = [&](model::KnowledgeGroup g) {
    const auto rows = meta.rows_of(g);
    if (rows.empty()) throw DataError(std::string("knowledge bank has no ") + model::to_string(g) + " phrases");
    const auto k = static_cast<std::size_t>(std::ceil(kKnowledgeTopFraction * static_cast<double>(rows.size())));
    ad::Var sims = ad::matmul(xs, ad::transpose(ad::select_rows(bank, rows)));
    return ad::topk_row_mean(sims, std::max<std::size_t>(1, k));
  };
  ad::Var scores = ad::scale(ad::concat_cols(group_score(model::KnowledgeGroup::kNormal),
                                             group_score(model::KnowledgeGroup::kAbnormal)),
                             scale);
  const std::size_t target = abnormal ? 1 : 0;
  const std::vector<std::size_t> col{target};
  return ad::affine(ad::mean(ad::select_cols(ad::log_softmax(scores), col)), -1.0);
}

// ---------------------------------------------------------------------------
// Batch objectives

enum Term : std::size_t { kBce, kCe, kSimN, kSimA, kBce2, kCe2, kTermCount };

inline constexpr std::array<const char*, kTermCount> kTermNames{"l_bce", "l_ce", "l_sim_n", "l_sim_a", "l_bce2",
                                                                "l_ce2"};

struct LossBreakdown {
  std::array<std::optional<double>, kTermCount> terms;
  double total = 0.0;

  std::optional<double> operator[](Term t) const { return terms[t]; }
};

// A weakly labelled video: binary label, plus class index when abnormal.
struct WeakSample {
  const Matrix* features = nullptr;
  bool abnormal = false;
  std::optional<std::size_t> class_index;
};

// A synthesized video with exact frame labels.
struct PseudoSample {
  const Matrix* features = nullptr;
  const std::vector<std::uint8_t>* frame_gt = nullptr;
  std::size_t class_index = 0;
};

struct LossContext {
  const model::ClassCatalog* catalog = nullptr;
  const model::KnowledgeBank* knowledge = nullptr;  // group tags only; embeddings come from params
  model::ModelConfig model;
  // Catalog indices forming the classification label space.
  std::vector<std::size_t> label_space;
  bool similarity_terms = true;
  std::size_t threads = 1;
};

struct LossResult {
  LossBreakdown breakdown;
  model::ModelParams grads;
};

namespace detail {

struct TermValue {
  Term term;
  ad::Var value;
  double weight;
};

struct VideoResult {
  std::array<double, kTermCount> value{};
  std::array<bool, kTermCount> present{};
  model::ModelParams grads;
};

inline std::size_t label_position(const LossContext& ctx, std::size_t class_index) {
  auto it = std::find(ctx.label_space.begin(), ctx.label_space.end(), class_index);
  if (it == ctx.label_space.end()) {
    throw ConfigError("class index " + std::to_string(class_index) + " is outside the label space");
  }
  return static_cast<std::size_t>(it - ctx.label_space.begin());
}

inline ad::Var restricted_ce(const LossContext& ctx, ad::Var logits, std::size_t class_index) {
  const std::size_t y = label_position(ctx, class_index);
  return class_ce(ad::select_cols(logits, ctx.label_space), y);
}

// Evaluates each video's weighted terms on its own tape and reduces the
// results in sample order.
template <class PerVideo>
LossResult run_batch(const model::ModelParams& params, std::size_t count, const LossContext& ctx, bool want_grads,
                     const std::array<double, kTermCount>& term_scale, PerVideo&& per_video) {
  std::vector<VideoResult> results(count);
  parallel_for(
      count,
      [&](std::size_t i) {
        ad::Tape tape;
        model::ParamVars pv = model::bind(tape, params, want_grads);
        std::vector<TermValue> terms = per_video(tape, pv, i);
        VideoResult& r = results[i];
        std::optional<ad::Var> total;
        for (const auto& t : terms) {
          r.value[t.term] = t.value.scalar();
          r.present[t.term] = true;
          ad::Var w = ad::scale(t.value, t.weight);
          total = total ? ad::add(*total, w) : w;
        }
        if (want_grads && total) {
          tape.backward(*total);
          r.grads = model::collect_grads(tape, pv);
        }
      },
      ctx.threads);

  LossResult out;
  if (want_grads) out.grads = zeros_like(params);
  std::array<double, kTermCount> sum{};
  std::array<std::size_t, kTermCount> n{};
  for (const auto& r : results) {
    for (std::size_t t = 0; t < kTermCount; ++t) {
      if (!r.present[t]) continue;
      if (!std::isfinite(r.value[t])) throw NumericalError(std::string(kTermNames[t]) + " is not finite");
      sum[t] += r.value[t];
      ++n[t];
    }
    if (want_grads && !r.grads.ln_gamma.empty()) accumulate(out.grads, r.grads);
  }
  for (std::size_t t = 0; t < kTermCount; ++t) {
    if (n[t] == 0) continue;
    const double m = sum[t] / static_cast<double>(n[t]);
    out.breakdown.terms[t] = m;
    out.breakdown.total += term_scale[t] * m;
  }
  return out;
}

}  // namespace detail

// Stage-1 objective over a batch of weakly labelled videos.
inline LossResult train_loss(const model::ModelParams& params, std::span<const WeakSample> batch,
                             const LossContext& ctx, bool want_grads = true) {
  if (!ctx.catalog || !ctx.knowledge) throw ConfigError("loss context needs a catalog and knowledge bank");
  std::size_t normals = 0, abnormals = 0;
  for (const auto& s : batch) (s.abnormal ? abnormals : normals)++;
  const double inv_b = batch.empty() ? 0.0 : 1.0 / static_cast<double>(batch.size());
  const double inv_a = abnormals ? 1.0 / static_cast<double>(abnormals) : 0.0;
  const double inv_n = normals ? 1.0 / static_cast<double>(normals) : 0.0;
  const bool sim = ctx.similarity_terms && ctx.model.use_knowledge;

  std::array<double, kTermCount> scale{1, 1, 1, 1, 1, 1};
  return detail::run_batch(params, batch.size(), ctx, want_grads, scale,
                           [&](ad::Tape& tape, const model::ParamVars& pv, std::size_t i) {
                             const WeakSample& s = batch[i];
                             auto fv = model::forward(tape, *s.features, pv, *ctx.catalog, ctx.model);
                             std::vector<detail::TermValue> terms;
                             terms.push_back({kBce, video_bce(fv.p, s.abnormal), inv_b});
                             if (s.abnormal) {
                               if (!s.class_index) throw DataError("abnormal sample without a class label");
                               terms.push_back({kCe, detail::restricted_ce(ctx, fv.class_logits, *s.class_index), inv_a});
                             }
                             if (sim) {
                               // Copy: tape values move when new nodes are recorded.
                               const auto pd = fv.p.value().data();
                               const std::vector<double> logits(pd.begin(), pd.end());
                               terms.push_back({s.abnormal ? kSimA : kSimN,
                                                ski_sim_loss(fv.x_t, pv.knowledge, *ctx.knowledge, logits, s.abnormal),
                                                s.abnormal ? inv_a : inv_n});
                             }
                             return terms;
                           });
}

// Stage-2 objective: fully supervised pseudo videos plus lambda-weighted weak
// base videos.
inline LossResult tune_loss(const model::ModelParams& params, std::span<const PseudoSample> pseudo,
                            std::span<const WeakSample> base, double lambda, const LossContext& ctx,
                            bool want_grads = true) {
  if (!ctx.catalog) throw ConfigError("loss context needs a catalog");
  if (lambda < 0.0) throw ConfigError("lambda must be >= 0");
  for (const auto& s : pseudo)
    if (!s.frame_gt) throw DataError("pseudo sample without frame-level labels");
  std::size_t base_abnormal = 0;
  for (const auto& s : base) base_abnormal += s.abnormal;
  const double inv_p = pseudo.empty() ? 0.0 : 1.0 / static_cast<double>(pseudo.size());
  const double inv_b = base.empty() ? 0.0 : lambda / static_cast<double>(base.size());
  const double inv_ba = base_abnormal ? lambda / static_cast<double>(base_abnormal) : 0.0;

  std::array<double, kTermCount> scale{lambda, lambda, 0, 0, 1, 1};
  return detail::run_batch(params, pseudo.size() + base.size(), ctx, want_grads, scale,
                           [&](ad::Tape& tape, const model::ParamVars& pv, std::size_t i) {
                             std::vector<detail::TermValue> terms;
                             if (i < pseudo.size()) {
                               const PseudoSample& s = pseudo[i];
                               auto fv = model::forward(tape, *s.features, pv, *ctx.catalog, ctx.model);
                               terms.push_back({kBce2, frame_bce(fv.p, *s.frame_gt), inv_p});
                               terms.push_back({kCe2, detail::restricted_ce(ctx, fv.class_logits, s.class_index), inv_p});
                             } else {
                               const WeakSample& s = base[i - pseudo.size()];
                               auto fv = model::forward(tape, *s.features, pv, *ctx.catalog, ctx.model);
                               terms.push_back({kBce, video_bce(fv.p, s.abnormal), inv_b});
                               if (s.abnormal) {
                                 if (!s.class_index) throw DataError("abnormal sample without a class label");
                                 terms.push_back(
                                     {kCe, detail::restricted_ce(ctx, fv.class_logits, *s.class_index), inv_ba});
                               }
                             }
                             return terms;
                           });
}

}  // namespace ovvad::losses
