#pragma once

#include <cmath>
#include <string>
#include <string_view>

#include "ovvad/data/sampling.hpp"
#include "ovvad/matrix.hpp"
#include "ovvad/model/catalog.hpp"
#include "ovvad/params.hpp"

namespace ovvad::model {

// Every trainable tensor. Vectors are stored as 1×c rows.
struct ModelParams {
  Matrix ln_gamma;       // 1×c
  Matrix ln_beta;        // 1×c
  Matrix w1;             // 2c×h
  Matrix b1;             // 1×h
  Matrix w2;             // h×1
  Matrix b2;             // 1×1
  Matrix prompt_offset;  // 1×c
  Matrix knowledge;      // l×c, F_text

  std::size_t feature_dim() const noexcept { return ln_gamma.cols(); }
  std::size_t hidden_dim() const noexcept { return b1.cols(); }

  template <class F>
  void visit(F&& f) {
    f(std::string_view("ln_gamma"), ln_gamma);
    f(std::string_view("ln_beta"), ln_beta);
    f(std::string_view("detector.w1"), w1);
    f(std::string_view("detector.b1"), b1);
    f(std::string_view("detector.w2"), w2);
    f(std::string_view("detector.b2"), b2);
    f(std::string_view("prompt_offset"), prompt_offset);
    f(std::string_view("knowledge"), knowledge);
  }
  template <class F>
  void visit(F&& f) const {
    const_cast<ModelParams*>(this)->visit([&](std::string_view n, Matrix& m) { f(n, static_cast<const Matrix&>(m)); });
  }

  void validate() const {
    const std::size_t c = feature_dim(), h = hidden_dim();
    auto expect = [](const Matrix& m, std::size_t r, std::size_t cc, const char* name) {
      if (m.rows() != r || m.cols() != cc) {
        throw ShapeError(std::string(name) + " is " + m.shape_str() + ", expected " + std::to_string(r) + "x" +
                         std::to_string(cc));
      }
    };
    expect(ln_gamma, 1, c, "ln_gamma");
    expect(ln_beta, 1, c, "ln_beta");
    expect(w1, 2 * c, h, "detector.w1");
    expect(b1, 1, h, "detector.b1");
    expect(w2, h, 1, "detector.w2");
    expect(b2, 1, 1, "detector.b2");
    expect(prompt_offset, 1, c, "prompt_offset");
    if (knowledge.cols() != c || knowledge.rows() < 2) throw ShapeError("knowledge is " + knowledge.shape_str());
    visit([](std::string_view name, const Matrix& m) {
      if (!m.all_finite()) throw NumericalError(std::string(name) + " has non-finite entries");
    });
  }
};

static_assert(ParamSet<ModelParams>);

// Fresh parameters: identity layer-norm affine, zero biases and prompt offset,
// Gaussian detector weights scaled by 1/sqrt(fan_in), F_text from the bank.
// Hidden width defaults to the feature dimension.
inline ModelParams init_params(const KnowledgeBank& bank, Rng& rng, std::size_t hidden = 0) {
  const std::size_t c = bank.embeddings.cols();
  const std::size_t h = hidden ? hidden : c;
  ModelParams p;
  p.ln_gamma = Matrix(1, c, 1.0);
  p.ln_beta = Matrix(1, c);
  p.w1 = Matrix(2 * c, h);
  p.b1 = Matrix(1, h);
  p.w2 = Matrix(h, 1);
  p.b2 = Matrix(1, 1);
  p.prompt_offset = Matrix(1, c);
  p.knowledge = bank.embeddings;
  std::normal_distribution<double> n1(0.0, 1.0 / std::sqrt(static_cast<double>(2 * c)));
  for (double& v : p.w1.data()) v = n1(rng);
  std::normal_distribution<double> n2(0.0, 1.0 / std::sqrt(static_cast<double>(h)));
  for (double& v : p.w2.data()) v = n2(rng);
  return p;
}

}  // namespace ovvad::model
