#pragma once

// Forward computation:
//
//   x_t    = LN(softmax(H) · x_f)                     temporal adapter
//   F_know = sigmoid(x_t · F_textᵀ) · F_text / l      knowledge injection
//   p      = FFN_gelu([x_t, F_know])                  per-frame logits
//   x_agg  = softmax(p)ᵀ · x_t                        soft-attention pooling
//   logits = scale · cos(x_agg, norm(E + offset))     text alignment
//
// with H(i, j) = -|i - j| / sigma.

#include <cmath>
#include <vector>

#include "ovvad/autodiff.hpp"
#include "ovvad/error.hpp"
#include "ovvad/matrix.hpp"
#include "ovvad/model/catalog.hpp"
#include "ovvad/model/params.hpp"

namespace ovvad::model {

inline constexpr double kDefaultSigma = 0.07;

struct ModelConfig {
  double sigma = kDefaultSigma;
  bool use_temporal_adapter = true;
  bool use_knowledge = true;
  double ln_eps = kLayerNormEps;
};

// Parameters bound as tape leaves.
struct ParamVars {
  ad::Var ln_gamma, ln_beta, w1, b1, w2, b2, prompt_offset, knowledge;
};

inline ParamVars bind(ad::Tape& tape, const ModelParams& p, bool trainable = true) {
  auto leaf = [&](const Matrix& m) { return trainable ? tape.parameter(m) : tape.constant(m); };
  return {leaf(p.ln_gamma), leaf(p.ln_beta), leaf(p.w1), leaf(p.b1),
          leaf(p.w2),       leaf(p.b2),      leaf(p.prompt_offset), leaf(p.knowledge)};
}

// Gradients of the tape's last backward target, laid out as ModelParams.
inline ModelParams collect_grads(const ad::Tape& tape, const ParamVars& v) {
  ModelParams g;
  g.ln_gamma = tape.grad(v.ln_gamma);
  g.ln_beta = tape.grad(v.ln_beta);
  g.w1 = tape.grad(v.w1);
  g.b1 = tape.grad(v.b1);
  g.w2 = tape.grad(v.w2);
  g.b2 = tape.grad(v.b2);
  g.prompt_offset = tape.grad(v.prompt_offset);
  g.knowledge = tape.grad(v.knowledge);
  return g;
}

inline Matrix build_adjacency(std::size_t n, double sigma) {
  if (n == 0) throw ConfigError("adjacency needs n >= 1");
  if (!(sigma > 0.0)) throw ConfigError("sigma must be positive, got " + std::to_string(sigma));
  Matrix h(n, n);
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t j = 0; j < n; ++j) {
      const double d = i > j ? static_cast<double>(i - j) : static_cast<double>(j - i);
      h(i, j) = -d / sigma;
    }
  return h;
}

// Row-normalized frame mixing weights softmax(H).
inline Matrix temporal_mixing(std::size_t n, double sigma) { return row_softmax(build_adjacency(n, sigma)); }

// The frame-mixing step has no trainable inputs, so it is folded into a constant.
inline ad::Var temporal_adapt(ad::Tape& tape, const Matrix& x_f, const ParamVars& pv, const ModelConfig& cfg) {
  if (x_f.rows() == 0) throw ShapeError("temporal_adapt: empty feature sequence");
  ad::Var mixed = tape.constant(cfg.use_temporal_adapter ? matmul(temporal_mixing(x_f.rows(), cfg.sigma), x_f) : x_f);
  return ad::layer_norm(mixed, pv.ln_gamma, pv.ln_beta, cfg.ln_eps);
}

inline ad::Var inject_knowledge(ad::Var x_t, ad::Var bank) {
  if (x_t.cols() != bank.cols()) {
    throw ShapeError("inject_knowledge: x_t " + x_t.value().shape_str() + " vs bank " + bank.value().shape_str());
  }
  ad::Var weights = ad::sigmoid(ad::matmul(x_t, ad::transpose(bank)));
  return ad::scale(ad::matmul(weights, bank), 1.0 / static_cast<double>(bank.rows()));
}

// Per-frame logits, n×1.
inline ad::Var detect(ad::Var x_t, ad::Var f_know, const ParamVars& pv) {
  ad::Var in = ad::concat_cols(x_t, f_know);
  if (in.cols() != pv.w1.rows()) {
    throw ShapeError("detect: input width " + std::to_string(in.cols()) + " vs w1 " + pv.w1.value().shape_str());
  }
  ad::Var hidden = ad::gelu(ad::add_row(ad::matmul(in, pv.w1), pv.b1));
  return ad::add_row(ad::matmul(hidden, pv.w2), pv.b2);
}

// 1×c convex combination of the rows of x_t weighted by softmax(p).
inline ad::Var aggregate(ad::Var p, ad::Var x_t) {
  if (p.rows() != x_t.rows() || p.cols() != 1) {
    throw ShapeError("aggregate: p " + p.value().shape_str() + " vs x_t " + x_t.value().shape_str());
  }
  return ad::matmul(ad::row_softmax(ad::transpose(p)), x_t);
}

// 1×k class logits.
inline ad::Var classify(ad::Var x_agg, const ClassCatalog& catalog, ad::Var prompt_offset) {
  if (x_agg.cols() != catalog.dim()) {
    throw ShapeError("classify: x_agg " + x_agg.value().shape_str() + " vs catalog dim " + std::to_string(catalog.dim()));
  }
  ad::Tape& tape = x_agg.tape();
  ad::Var text = ad::row_normalize(ad::add_row(tape.constant(catalog.embeddings), prompt_offset));
  ad::Var video = ad::row_normalize(x_agg);
  return ad::scale(ad::matmul(video, ad::transpose(text)), catalog.logit_scale);
}

struct ForwardVars {
  ad::Var x_t, f_know, p, x_agg, class_logits;
};

inline ForwardVars forward(ad::Tape& tape, const Matrix& x_f, const ParamVars& pv, const ClassCatalog& catalog,
                           const ModelConfig& cfg) {
  ForwardVars out;
  out.x_t = temporal_adapt(tape, x_f, pv, cfg);
  out.f_know = cfg.use_knowledge ? inject_knowledge(out.x_t, pv.knowledge)
                                 : tape.constant(Matrix(x_f.rows(), x_f.cols()));
  out.p = detect(out.x_t, out.f_know, pv);
  out.x_agg = aggregate(out.p, out.x_t);
  out.class_logits = classify(out.x_agg, catalog, pv.prompt_offset);
  return out;
}

// Plain-value results of one forward pass.
struct ForwardOutput {
  std::vector<double> p;  // per-frame logits
  Matrix x_t;
  Matrix f_know;
  Matrix x_agg;               // 1×c
  std::vector<double> class_logits;
};

inline ForwardOutput infer(const Matrix& x_f, const ModelParams& params, const ClassCatalog& catalog,
                           const ModelConfig& cfg) {
  ad::Tape tape;
  ParamVars pv = bind(tape, params, false);
  ForwardVars fv = forward(tape, x_f, pv, catalog, cfg);
  ForwardOutput out;
  const auto pd = fv.p.value().data();
  out.p.assign(pd.begin(), pd.end());
  out.x_t = fv.x_t.value();
  out.f_know = fv.f_know.value();
  out.x_agg = fv.x_agg.value();
  const auto ld = fv.class_logits.value().data();
  out.class_logits.assign(ld.begin(), ld.end());
  return out;
}

}  // namespace ovvad::model
