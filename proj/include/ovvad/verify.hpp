#pragma once

// Finite-difference verification: tape primitives on random inputs, model
// operations and loss terms on random micro-instances, and both composite
// losses. A micro-instance holds two weak videos (one normal, one abnormal)
// and two pseudo videos with frame labels.

#include <algorithm>
#include <cstdint>
#include <functional>
#include <random>
#include <string>
#include <vector>

#include "ovvad/autodiff.hpp"
#include "ovvad/data/sampling.hpp"
#include "ovvad/gradcheck.hpp"
#include "ovvad/losses.hpp"
#include "ovvad/model/forward.hpp"
#include "ovvad/model/params.hpp"
#include "ovvad/params.hpp"

namespace ovvad::verify {

struct MicroInstance {
  model::KnowledgeBank bank;
  model::ClassCatalog catalog;
  model::ModelParams params;
  std::vector<Matrix> features;
  std::vector<std::vector<std::uint8_t>> frame_gt;
  std::vector<losses::WeakSample> weak;
  std::vector<losses::PseudoSample> pseudo;
  losses::LossContext ctx;

  // Samples point into `features`; moving keeps the buffers, copying would not.
  MicroInstance() = default;
  MicroInstance(MicroInstance&&) = default;
  MicroInstance& operator=(MicroInstance&&) = default;
  MicroInstance(const MicroInstance&) = delete;
  MicroInstance& operator=(const MicroInstance&) = delete;
};

inline Matrix gaussian(std::size_t r, std::size_t c, Rng& rng, double scale = 1.0) {
  std::normal_distribution<double> nd(0.0, scale);
  Matrix m(r, c);
  for (double& v : m.data()) v = nd(rng);
  return m;
}

// Non-trivial LN affine, biases and prompt offset so that every parameter
// carries gradient.
inline MicroInstance make_micro(std::uint64_t seed, std::size_t c = 5) {
  Rng rng(seed);
  MicroInstance m;
  std::uniform_int_distribution<std::size_t> len(3, 9);
  const std::size_t l = 4 + seed % 3;
  m.bank.embeddings = gaussian(l, c, rng, 0.5);
  for (std::size_t i = 0; i < l; ++i) {
    m.bank.groups.push_back(i % 2 ? model::KnowledgeGroup::kAbnormal : model::KnowledgeGroup::kNormal);
    m.bank.phrases.push_back("phrase " + std::to_string(i));
  }
  m.catalog.embeddings = gaussian(4, c, rng);
  m.catalog.class_names = {"a", "b", "c", "d"};
  m.catalog.is_base = {true, true, false, false};
  m.catalog.normalize_rows();

  m.params = model::init_params(m.bank, rng);
  m.params.ln_gamma = gaussian(1, c, rng, 0.3);
  for (double& v : m.params.ln_gamma.data()) v += 1.0;
  m.params.ln_beta = gaussian(1, c, rng, 0.2);
  m.params.b1 = gaussian(1, m.params.hidden_dim(), rng, 0.2);
  m.params.b2 = gaussian(1, 1, rng, 0.2);
  m.params.prompt_offset = gaussian(1, c, rng, 0.2);

  for (int v = 0; v < 4; ++v) m.features.push_back(gaussian(len(rng), c, rng));
  m.frame_gt.assign(4, {});
  for (int v = 2; v < 4; ++v) {
    auto& gt = m.frame_gt[v];
    gt.assign(m.features[v].rows(), 0);
    for (std::size_t i = 1; i + 1 < gt.size(); ++i) gt[i] = 1;
  }
  m.weak = {{&m.features[0], false, std::nullopt}, {&m.features[1], true, std::size_t{1}}};
  m.pseudo = {{&m.features[2], &m.frame_gt[2], 2}, {&m.features[3], &m.frame_gt[3], 3}};

  m.ctx.catalog = &m.catalog;
  m.ctx.knowledge = &m.bank;
  m.ctx.model.sigma = 0.5 + 0.1 * static_cast<double>(seed % 5);
  m.ctx.label_space = {0, 1, 2, 3};
  m.ctx.threads = 1;
  return m;
}

struct LossCheck {
  GradCheckResult train, tune;
  double max_rel_error() const { return std::max(train.max_rel_error, tune.max_rel_error); }
};

inline LossCheck check_losses(const MicroInstance& m, double lambda = 0.5) {
  LossCheck out;
  auto train = losses::train_loss(m.params, m.weak, m.ctx).grads;
  out.train = grad_check(
      [&](const model::ModelParams& p) { return losses::train_loss(p, m.weak, m.ctx, false).breakdown.total; },
      m.params, train);
  auto tune = losses::tune_loss(m.params, m.pseudo, m.weak, lambda, m.ctx).grads;
  out.tune = grad_check(
      [&](const model::ModelParams& p) {
        return losses::tune_loss(p, m.pseudo, m.weak, lambda, m.ctx, false).breakdown.total;
      },
      m.params, tune);
  return out;
}

struct NamedError {
  std::string name;
  double error = 0.0;
};

inline double worst(const std::vector<NamedError>& errs) {
  double w = 0.0;
  for (const auto& e : errs) w = std::max(w, e.error);
  return w;
}

// Outputs are contracted with a fixed random weight matrix so that every
// output entry carries gradient.
inline ad::Var contract(ad::Var out, std::uint64_t seed) {
  Rng wrng(seed);
  return ad::sum(ad::hadamard(out, out.tape().constant(gaussian(out.rows(), out.cols(), wrng))));
}

using Build = std::function<ad::Var(ad::Tape&, std::vector<ad::Var>&)>;

inline double check_primitive(const TensorList& inputs, const Build& build, std::uint64_t seed = 99) {
  auto eval = [&](const TensorList& in, TensorList* grads) {
    ad::Tape tape;
    std::vector<ad::Var> vars;
    in.visit([&](std::string_view, const Matrix& m) { vars.push_back(tape.parameter(m)); });
    ad::Var loss = contract(build(tape, vars), seed);
    if (grads) {
      tape.backward(loss);
      std::size_t i = 0;
      grads->visit([&](std::string_view, Matrix& g) { g = tape.grad(vars[i++]); });
    }
    return loss.scalar();
  };
  TensorList grads = inputs;
  eval(inputs, &grads);
  return grad_check([&](const TensorList& p) { return eval(p, nullptr); }, inputs, grads).max_rel_error;
}

// Every tape primitive once, on inputs drawn from `seed`.
inline std::vector<NamedError> primitive_suite(std::uint64_t seed) {
  Rng rng(seed);
  std::uniform_int_distribution<std::size_t> dim(2, 6);
  const std::size_t r = dim(rng), c = dim(rng), k = dim(rng);
  auto one = [&](double scale = 1.0) { return TensorList{{{"a", gaussian(r, c, rng, scale)}}}; };
  auto two = [&](std::size_t r2, std::size_t c2) {
    return TensorList{{{"a", gaussian(r, c, rng)}, {"b", gaussian(r2, c2, rng)}}};
  };
  std::vector<NamedError> out;
  auto add = [&](const char* name, const TensorList& in, const Build& b) {
    out.push_back({name, check_primitive(in, b, seed + out.size())});
  };
  add("matmul", two(c, k), [](ad::Tape&, auto& v) { return ad::matmul(v[0], v[1]); });
  add("transpose", one(), [](ad::Tape&, auto& v) { return ad::transpose(v[0]); });
  add("add", two(r, c), [](ad::Tape&, auto& v) { return ad::add(v[0], v[1]); });
  add("sub", two(r, c), [](ad::Tape&, auto& v) { return ad::sub(v[0], v[1]); });
  add("hadamard", two(r, c), [](ad::Tape&, auto& v) { return ad::hadamard(v[0], v[1]); });
  add("affine", one(), [](ad::Tape&, auto& v) { return ad::affine(v[0], -2.5, 1.0); });
  add("add_row", two(1, c), [](ad::Tape&, auto& v) { return ad::add_row(v[0], v[1]); });
  add("row_softmax", one(2.0), [](ad::Tape&, auto& v) { return ad::row_softmax(v[0]); });
  add("log_softmax", one(2.0), [](ad::Tape&, auto& v) { return ad::log_softmax(v[0]); });
  add("sigmoid", one(2.0), [](ad::Tape&, auto& v) { return ad::sigmoid(v[0]); });
  add("gelu", one(2.0), [](ad::Tape&, auto& v) { return ad::gelu(v[0]); });
  add("log", one(), [](ad::Tape&, auto& v) { return ad::log(ad::sigmoid(v[0])); });
  add("clamp", one(), [](ad::Tape&, auto& v) { return ad::clamp(v[0], -0.7, 0.9); });
  add("layer_norm", TensorList{{{"x", gaussian(r, c, rng, 3.0)}, {"g", gaussian(1, c, rng)}, {"b", gaussian(1, c, rng)}}},
      [](ad::Tape&, auto& v) { return ad::layer_norm(v[0], v[1], v[2]); });
  add("concat_cols", two(r, k), [](ad::Tape&, auto& v) { return ad::concat_cols(v[0], v[1]); });
  const std::vector<std::size_t> rows{r - 1, 0, r - 1}, cols{c - 1, 0};
  add("select_rows", one(), [&](ad::Tape&, auto& v) { return ad::select_rows(v[0], rows); });
  add("select_cols", one(), [&](ad::Tape&, auto& v) { return ad::select_cols(v[0], cols); });
  add("topk_row_mean", one(), [&](ad::Tape&, auto& v) { return ad::topk_row_mean(v[0], (c + 1) / 2); });
  add("row_normalize", one(), [](ad::Tape&, auto& v) { return ad::row_normalize(v[0]); });
  add("sum", one(), [](ad::Tape&, auto& v) { return ad::sum(v[0]); });
  add("mean", one(), [](ad::Tape&, auto& v) { return ad::mean(v[0]); });
  add("pick", one(), [&](ad::Tape&, auto& v) { return ad::pick(v[0], r - 1, 0); });
  return out;
}

// Gradient of a contracted model-level expression with respect to all
// parameters of a micro-instance.
using ModelBuild = std::function<ad::Var(ad::Tape&, const model::ParamVars&)>;

inline double check_model_op(const MicroInstance& m, const ModelBuild& build, std::uint64_t seed) {
  auto eval = [&](const model::ModelParams& p, model::ModelParams* grads) {
    ad::Tape tape;
    const auto pv = model::bind(tape, p);
    ad::Var loss = contract(build(tape, pv), seed);
    if (grads) {
      tape.backward(loss);
      *grads = model::collect_grads(tape, pv);
    }
    return loss.scalar();
  };
  model::ModelParams g;
  eval(m.params, &g);
  return grad_check([&](const model::ModelParams& p) { return eval(p, nullptr); }, m.params, g).max_rel_error;
}

// Each model operation and loss term, evaluated on the instance's videos.
inline std::vector<NamedError> operation_suite(const MicroInstance& m, std::uint64_t seed) {
  const auto& cfg = m.ctx.model;
  const Matrix& xa = m.features[1];
  const Matrix& xp = m.features[2];
  auto fwd = [&](ad::Tape& t, const model::ParamVars& pv, const Matrix& x) {
    return model::forward(t, x, pv, m.catalog, cfg);
  };
  auto values = [](ad::Var v) { return v.value().data(); };
  std::vector<NamedError> out;
  auto add = [&](const char* name, const ModelBuild& b) {
    out.push_back({name, check_model_op(m, b, seed + out.size())});
  };
  add("temporal_adapt", [&](ad::Tape& t, const auto& pv) { return model::temporal_adapt(t, xa, pv, cfg); });
  add("inject_knowledge", [&](ad::Tape& t, const auto& pv) {
    return model::inject_knowledge(model::temporal_adapt(t, xa, pv, cfg), pv.knowledge);
  });
  add("detect", [&](ad::Tape& t, const auto& pv) { return fwd(t, pv, xa).p; });
  add("aggregate", [&](ad::Tape& t, const auto& pv) { return fwd(t, pv, xa).x_agg; });
  add("classify", [&](ad::Tape& t, const auto& pv) { return fwd(t, pv, xa).class_logits; });
  add("video_bce_normal", [&](ad::Tape& t, const auto& pv) { return losses::video_bce(fwd(t, pv, m.features[0]).p, false); });
  add("video_bce_abnormal", [&](ad::Tape& t, const auto& pv) { return losses::video_bce(fwd(t, pv, xa).p, true); });
  add("class_ce", [&](ad::Tape& t, const auto& pv) { return losses::class_ce(fwd(t, pv, xa).class_logits, 1); });
  add("frame_bce", [&](ad::Tape& t, const auto& pv) { return losses::frame_bce(fwd(t, pv, xp).p, m.frame_gt[2]); });
  for (bool abnormal : {false, true}) {
    add(abnormal ? "ski_sim_abnormal" : "ski_sim_normal", [&, abnormal](ad::Tape& t, const auto& pv) {
      auto f = fwd(t, pv, abnormal ? xa : m.features[0]);
      return losses::ski_sim_loss(f.x_t, pv.knowledge, m.bank, values(f.p), abnormal);
    });
  }
  return out;
}

// Full suite on one seed: primitives, operations and both composite losses.
inline std::vector<NamedError> full_suite(std::uint64_t seed, double lambda = 0.5) {
  auto out = primitive_suite(seed);
  const auto m = make_micro(seed);
  for (auto& e : operation_suite(m, seed)) out.push_back(std::move(e));
  const auto l = check_losses(m, lambda);
  out.push_back({"train_loss", l.train.max_rel_error});
  out.push_back({"tune_loss", l.tune.max_rel_error});
  return out;
}

}  // namespace ovvad::verify
