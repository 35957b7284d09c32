#pragma once

// Two-stage optimization.
//
//   stage 1: balanced weak-label batches, train_loss, AdamW
//   stage 2: pseudo novel anomalies + base anomalies, tune_loss, AdamW
//
// One stage-2 epoch is one pass over the shuffled pseudo set; base videos are
// drawn with replacement. All randomness flows from TrainConfig::seed.

#include <cmath>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <functional>
#include <optional>
#include <random>
#include <string>
#include <vector>

#include "json.hpp"
#include "ovvad/adamw.hpp"
#include "ovvad/data/batch.hpp"
#include "ovvad/data/manifest.hpp"
#include "ovvad/data/sampling.hpp"
#include "ovvad/error.hpp"
#include "ovvad/losses.hpp"
#include "ovvad/model/catalog.hpp"
#include "ovvad/model/forward.hpp"
#include "ovvad/model/params.hpp"
#include "ovvad/nas.hpp"
#include "ovvad/parallel.hpp"

namespace ovvad::train {

using json = nlohmann::json;

struct Stage1Config {
  double lr = 1e-4;
  std::size_t epochs = 20;
  std::size_t batch = 64;
};

struct Stage2Config {
  double lr = 1e-5;
  std::size_t epochs = 10;
  std::size_t pseudo_per_batch = 10;
  std::size_t base_per_batch = 10;
  double lambda = 1.0;
};

struct TrainConfig {
  Stage1Config stage1;
  Stage2Config stage2;
  double sigma = model::kDefaultSigma;
  bool temporal_adapter = true;
  bool knowledge = true;
  bool similarity_terms = true;
  double weight_decay = 0.01;
  std::size_t max_length = data::kMaxTrainLength;
  std::uint64_t seed = 0;
  std::size_t threads = 0;  // 0 = worker_count()

  void validate() const {
    if (!(stage1.lr >= 0.0) || !(stage2.lr >= 0.0)) throw ConfigError("learning rates must be >= 0");
    if (stage1.epochs == 0 || stage2.epochs == 0) throw ConfigError("epochs must be >= 1");
    if (stage1.batch == 0 || stage1.batch % 2) throw ConfigError("stage1.batch must be a positive even number");
    if (stage2.pseudo_per_batch == 0) throw ConfigError("stage2.pseudo_per_batch must be >= 1");
    if (!(stage2.lambda >= 0.0)) throw ConfigError("stage2.lambda must be >= 0");
    if (!(sigma > 0.0)) throw ConfigError("sigma must be positive");
    if (!(weight_decay >= 0.0)) throw ConfigError("weight_decay must be >= 0");
    if (max_length == 0) throw ConfigError("max_length must be >= 1");
  }

  model::ModelConfig model_config() const {
    model::ModelConfig m;
    m.sigma = sigma;
    m.use_temporal_adapter = temporal_adapter;
    m.use_knowledge = knowledge;
    return m;
  }

  std::size_t thread_count() const { return threads ? threads : worker_count(); }
};

namespace detail {

// Reads obj[key] into out when present; rejects wrong types.
template <class T>
void read_field(const json& obj, const char* key, T& out, const std::string& where) {
  if (!obj.contains(key)) return;
  try {
    out = obj.at(key).get<T>();
  } catch (const json::exception&) {
    throw ConfigError(where + "." + key + " has the wrong type");
  }
}

inline void reject_unknown(const json& obj, std::initializer_list<const char*> known, const std::string& where) {
  if (!obj.is_object()) throw ConfigError(where + " must be a JSON object");
  for (const auto& [k, v] : obj.items()) {
    bool ok = false;
    for (const char* kk : known) ok |= k == kk;
    if (!ok) throw ConfigError("unknown key " + where + "." + k);
  }
}

}  // namespace detail

inline TrainConfig train_config_from_json(const json& j) {
  TrainConfig c;
  detail::reject_unknown(j,
                         {"stage1", "stage2", "sigma", "temporal_adapter", "knowledge", "similarity_terms",
                          "weight_decay", "max_length", "seed", "threads"},
                         "train");
  if (j.contains("stage1")) {
    const auto& s = j["stage1"];
    detail::reject_unknown(s, {"lr", "epochs", "batch"}, "train.stage1");
    detail::read_field(s, "lr", c.stage1.lr, "train.stage1");
    detail::read_field(s, "epochs", c.stage1.epochs, "train.stage1");
    detail::read_field(s, "batch", c.stage1.batch, "train.stage1");
  }
  if (j.contains("stage2")) {
    const auto& s = j["stage2"];
    detail::reject_unknown(s, {"lr", "epochs", "pseudo_per_batch", "base_per_batch", "lambda"}, "train.stage2");
    detail::read_field(s, "lr", c.stage2.lr, "train.stage2");
    detail::read_field(s, "epochs", c.stage2.epochs, "train.stage2");
    detail::read_field(s, "pseudo_per_batch", c.stage2.pseudo_per_batch, "train.stage2");
    detail::read_field(s, "base_per_batch", c.stage2.base_per_batch, "train.stage2");
    detail::read_field(s, "lambda", c.stage2.lambda, "train.stage2");
  }
  detail::read_field(j, "sigma", c.sigma, "train");
  detail::read_field(j, "temporal_adapter", c.temporal_adapter, "train");
  detail::read_field(j, "knowledge", c.knowledge, "train");
  detail::read_field(j, "similarity_terms", c.similarity_terms, "train");
  detail::read_field(j, "weight_decay", c.weight_decay, "train");
  detail::read_field(j, "max_length", c.max_length, "train");
  detail::read_field(j, "seed", c.seed, "train");
  detail::read_field(j, "threads", c.threads, "train");
  c.validate();
  return c;
}

inline json to_json(const TrainConfig& c) {
  return {{"stage1", {{"lr", c.stage1.lr}, {"epochs", c.stage1.epochs}, {"batch", c.stage1.batch}}},
          {"stage2",
           {{"lr", c.stage2.lr},
            {"epochs", c.stage2.epochs},
            {"pseudo_per_batch", c.stage2.pseudo_per_batch},
            {"base_per_batch", c.stage2.base_per_batch},
            {"lambda", c.stage2.lambda}}},
          {"sigma", c.sigma},
          {"temporal_adapter", c.temporal_adapter},
          {"knowledge", c.knowledge},
          {"similarity_terms", c.similarity_terms},
          {"weight_decay", c.weight_decay},
          {"max_length", c.max_length},
          {"seed", c.seed},
          {"threads", c.threads}};
}

// ---------------------------------------------------------------------------

// Thrown when a loss or parameter turns non-finite; carries the parameters
// from before the failing step.
class DivergenceError : public NumericalError {
 public:
  DivergenceError(const std::string& what, model::ModelParams last_finite)
      : NumericalError(what), last_finite_(std::move(last_finite)) {}
  const model::ModelParams& last_finite() const noexcept { return last_finite_; }

 private:
  model::ModelParams last_finite_;
};

struct EpochLog {
  std::size_t epoch = 0;  // 1-based
  losses::LossBreakdown mean;
};

using EpochCallback = std::function<void(const EpochLog&)>;

// Mean over steps of each present term and of the total.
class BreakdownAverager {
 public:
  void add(const losses::LossBreakdown& b) {
    for (std::size_t t = 0; t < losses::kTermCount; ++t)
      if (b.terms[t]) {
        sum_[t] += *b.terms[t];
        ++count_[t];
      }
    total_ += b.total;
    ++steps_;
  }
  losses::LossBreakdown mean() const {
    losses::LossBreakdown out;
    for (std::size_t t = 0; t < losses::kTermCount; ++t)
      if (count_[t]) out.terms[t] = sum_[t] / static_cast<double>(count_[t]);
    out.total = steps_ ? total_ / static_cast<double>(steps_) : 0.0;
    return out;
  }

 private:
  std::array<double, losses::kTermCount> sum_{};
  std::array<std::size_t, losses::kTermCount> count_{};
  double total_ = 0.0;
  std::size_t steps_ = 0;
};

// Train-split videos loaded once, keyed by manifest index.
struct TrainData {
  const data::Manifest* manifest = nullptr;
  std::vector<std::optional<Matrix>> features;
  std::vector<std::optional<std::size_t>> class_index;

  TrainData(const data::Manifest& m, const model::ClassCatalog& catalog) : manifest(&m) {
    m.validate_labels(catalog);
    features.resize(m.videos.size());
    class_index.resize(m.videos.size());
    for (std::size_t i : m.indices(data::Split::kTrain)) {
      features[i] = data::load_sequence(m.videos[i]).features;
      if (features[i]->cols() != catalog.dim()) {
        throw DataError("video " + m.videos[i].id + " has dim " + std::to_string(features[i]->cols()) +
                        ", catalog has " + std::to_string(catalog.dim()));
      }
      if (m.videos[i].is_abnormal()) class_index[i] = catalog.index_of(m.videos[i].label);
    }
  }

  std::vector<std::size_t> abnormal_indices() const {
    std::vector<std::size_t> out;
    for (std::size_t i = 0; i < features.size(); ++i)
      if (features[i] && class_index[i]) out.push_back(i);
    return out;
  }
};

namespace detail {

inline Rng stage_rng(std::uint64_t seed, std::uint64_t stage) {
  std::seed_seq seq{static_cast<std::uint32_t>(seed), static_cast<std::uint32_t>(seed >> 32),
                    static_cast<std::uint32_t>(stage)};
  return Rng(seq);
}

inline bool all_finite(const model::ModelParams& p) {
  bool ok = true;
  p.visit([&](std::string_view, const Matrix& m) { ok = ok && m.all_finite(); });
  return ok;
}

// Finite after narrowing to the float32 checkpoint format.
inline bool storable(const model::ModelParams& p) {
  bool ok = true;
  p.visit([&](std::string_view, const Matrix& m) {
    for (double v : m.data()) ok = ok && std::isfinite(static_cast<float>(v));
  });
  return ok;
}

// Loss + AdamW step with the divergence guard.
template <class LossFn>
losses::LossBreakdown guarded_step(model::ModelParams& params, OptimizerState<model::ModelParams>& opt,
                                   LossFn&& loss_fn, const std::string& where) {
  losses::LossResult r;
  try {
    r = loss_fn(params);
  } catch (const NumericalError& e) {
    throw DivergenceError(where + ": " + e.what(), params);
  }
  if (!std::isfinite(r.breakdown.total) || !all_finite(r.grads)) {
    throw DivergenceError(where + ": non-finite loss or gradient", params);
  }
  model::ModelParams before = params;
  adamw_step(params, r.grads, opt);
  if (!storable(params)) throw DivergenceError(where + ": parameters became non-finite", std::move(before));
  return r.breakdown;
}

inline AdamWConfig adamw_config(double lr, const TrainConfig& cfg) {
  AdamWConfig a;
  a.lr = lr;
  a.weight_decay = cfg.weight_decay;
  return a;
}

}  // namespace detail

// Stage-1 starting point; its random stream is separate from batching.
inline model::ModelParams initial_params(const model::KnowledgeBank& knowledge, const TrainConfig& cfg) {
  Rng rng = detail::stage_rng(cfg.seed, 0);
  return model::init_params(knowledge, rng);
}

struct Stage1Result {
  model::ModelParams params;
  std::vector<EpochLog> history;
};

// Weakly supervised training from freshly initialized parameters. Stage-1
// classification is over the base classes only.
inline Stage1Result train_stage1(const data::Manifest& manifest, const model::ClassCatalog& catalog,
                                 const model::KnowledgeBank& knowledge, const TrainConfig& cfg,
                                 const EpochCallback& on_epoch = {}) {
  cfg.validate();
  catalog.validate();
  knowledge.validate();
  if (knowledge.embeddings.cols() != catalog.dim()) throw DataError("knowledge bank and catalog dims differ");
  TrainData train(manifest, catalog);
  data::BalancedBatcher batcher(manifest, cfg.stage1.batch);

  Rng rng = detail::stage_rng(cfg.seed, 1);
  Stage1Result out;
  out.params = initial_params(knowledge, cfg);
  OptimizerState<model::ModelParams> opt(out.params, detail::adamw_config(cfg.stage1.lr, cfg));

  losses::LossContext ctx;
  ctx.catalog = &catalog;
  ctx.knowledge = &knowledge;
  ctx.model = cfg.model_config();
  ctx.label_space = catalog.base_indices();
  ctx.similarity_terms = cfg.similarity_terms;
  ctx.threads = cfg.thread_count();

  for (std::size_t epoch = 1; epoch <= cfg.stage1.epochs; ++epoch) {
    BreakdownAverager avg;
    for (const auto& batch : batcher.epoch(rng)) {
      std::vector<Matrix> feats;
      feats.reserve(batch.size());
      for (std::size_t i : batch) {
        feats.push_back(data::gather_rows(*train.features[i],
                                          data::sample_indices(train.features[i]->rows(), cfg.max_length, rng)));
      }
      std::vector<losses::WeakSample> samples;
      for (std::size_t b = 0; b < batch.size(); ++b) {
        const std::size_t i = batch[b];
        samples.push_back({&feats[b], manifest.videos[i].is_abnormal(), train.class_index[i]});
      }
      avg.add(detail::guarded_step(
          out.params, opt, [&](const model::ModelParams& p) { return losses::train_loss(p, samples, ctx); },
          "stage 1 epoch " + std::to_string(epoch)));
    }
    out.history.push_back({epoch, avg.mean()});
    if (on_epoch) on_epoch(out.history.back());
  }
  return out;
}

struct Stage2Result {
  model::ModelParams params;
  std::vector<EpochLog> history;
};

// Fine-tuning on pseudo novel anomalies plus base anomalies; the label space
// is the full catalog. base_per_batch = 0 gives the pseudo-only arm.
inline Stage2Result finetune_stage2(const model::ModelParams& init, const std::vector<nas::PseudoVideo>& pseudo_set,
                                    const data::Manifest& manifest, const model::ClassCatalog& catalog,
                                    const model::KnowledgeBank& knowledge, const TrainConfig& cfg,
                                    const EpochCallback& on_epoch = {}) {
  cfg.validate();
  catalog.validate();
  init.validate();
  if (pseudo_set.empty()) throw DataError("stage 2 needs a non-empty pseudo set");
  std::vector<std::size_t> pseudo_class(pseudo_set.size());
  for (std::size_t i = 0; i < pseudo_set.size(); ++i) {
    const auto& v = pseudo_set[i];
    if (v.frame_gt.size() != v.features.length()) throw DataError("pseudo video without matching frame labels");
    auto k = catalog.index_of(v.category);
    if (!k) throw DataError("pseudo category '" + v.category + "' is not in the catalog");
    pseudo_class[i] = *k;
  }
  std::optional<TrainData> train;
  std::vector<std::size_t> base_pool;
  if (cfg.stage2.base_per_batch > 0) {
    train.emplace(manifest, catalog);
    base_pool = train->abnormal_indices();
    if (base_pool.empty()) throw DataError("stage 2 needs base anomaly videos in the train split");
  }

  Rng rng = detail::stage_rng(cfg.seed, 2);
  Stage2Result out;
  out.params = init;
  OptimizerState<model::ModelParams> opt(out.params, detail::adamw_config(cfg.stage2.lr, cfg));

  losses::LossContext ctx;
  ctx.catalog = &catalog;
  ctx.knowledge = &knowledge;
  ctx.model = cfg.model_config();
  ctx.label_space = catalog.all_indices();
  ctx.threads = cfg.thread_count();

  std::vector<std::size_t> order(pseudo_set.size());
  for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;
  for (std::size_t epoch = 1; epoch <= cfg.stage2.epochs; ++epoch) {
    std::shuffle(order.begin(), order.end(), rng);
    BreakdownAverager avg;
    for (std::size_t start = 0; start < order.size(); start += cfg.stage2.pseudo_per_batch) {
      const std::size_t stop = std::min(order.size(), start + cfg.stage2.pseudo_per_batch);
      std::vector<losses::PseudoSample> pseudo;
      for (std::size_t j = start; j < stop; ++j) {
        const auto& v = pseudo_set[order[j]];
        pseudo.push_back({&v.features.features, &v.frame_gt, pseudo_class[order[j]]});
      }
      std::vector<Matrix> feats;
      std::vector<losses::WeakSample> base;
      if (!base_pool.empty()) {
        std::uniform_int_distribution<std::size_t> pick(0, base_pool.size() - 1);
        std::vector<std::size_t> chosen;
        for (std::size_t b = 0; b < cfg.stage2.base_per_batch; ++b) chosen.push_back(base_pool[pick(rng)]);
        for (std::size_t i : chosen) {
          feats.push_back(data::gather_rows(*train->features[i],
                                            data::sample_indices(train->features[i]->rows(), cfg.max_length, rng)));
        }
        for (std::size_t b = 0; b < chosen.size(); ++b) base.push_back({&feats[b], true, train->class_index[chosen[b]]});
      }
      avg.add(detail::guarded_step(
          out.params, opt,
          [&](const model::ModelParams& p) { return losses::tune_loss(p, pseudo, base, cfg.stage2.lambda, ctx); },
          "stage 2 epoch " + std::to_string(epoch)));
    }
    out.history.push_back({epoch, avg.mean()});
    if (on_epoch) on_epoch(out.history.back());
  }
  return out;
}

// Loss history CSV: epoch, l_bce, l_ce, l_sim_n, l_sim_a, total (+ stage-2
// terms when present). Absent terms are written as empty cells.
inline void write_history_csv(const std::vector<EpochLog>& history, const std::filesystem::path& path,
                              bool stage2 = false) {
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  std::ofstream out(path);
  if (!out) throw DataError("cannot write " + path.string());
  out.precision(17);
  const std::vector<losses::Term> cols =
      stage2 ? std::vector<losses::Term>{losses::kBce, losses::kCe, losses::kBce2, losses::kCe2}
             : std::vector<losses::Term>{losses::kBce, losses::kCe, losses::kSimN, losses::kSimA};
  out << "epoch";
  for (auto t : cols) out << ',' << losses::kTermNames[t];
  out << ",total\n";
  for (const auto& row : history) {
    out << row.epoch;
    for (auto t : cols) {
      out << ',';
      if (row.mean.terms[t]) out << *row.mean.terms[t];
    }
    out << ',' << row.mean.total << '\n';
  }
}

}  // namespace ovvad::train
