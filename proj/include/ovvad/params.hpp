#pragma once

#include <concepts>
#include <string>
#include <string_view>
#include <utility>
#include <vector>

#include "ovvad/matrix.hpp"

namespace ovvad {

// A parameter set is anything that can enumerate its named tensors in a fixed
// order, mutably and immutably. Gradients use the same type as the params.
template <class P>
concept ParamSet = requires(P& p, const P& cp) {
  p.visit([](std::string_view, Matrix&) {});
  cp.visit([](std::string_view, const Matrix&) {});
};

// Ad-hoc ordered list of named tensors.
struct TensorList {
  std::vector<std::pair<std::string, Matrix>> tensors;

  template <class F>
  void visit(F&& f) {
    for (auto& [name, m] : tensors) f(std::string_view(name), m);
  }
  template <class F>
  void visit(F&& f) const {
    for (const auto& [name, m] : tensors) f(std::string_view(name), m);
  }
};

// Visits two parameter sets of identical layout in lockstep.
template <ParamSet P, class F>
void visit_pair(P& a, const P& b, F&& f) {
  std::vector<const Matrix*> bs;
  b.visit([&](std::string_view, const Matrix& m) { bs.push_back(&m); });
  std::size_t i = 0;
  a.visit([&](std::string_view name, Matrix& m) {
    const Matrix& other = *bs.at(i++);
    require_same_shape(m, other, std::string(name).c_str());
    f(name, m, other);
  });
}

template <ParamSet P>
P zeros_like(const P& p) {
  P z = p;
  z.visit([](std::string_view, Matrix& m) { m = Matrix(m.rows(), m.cols()); });
  return z;
}

template <ParamSet P>
std::size_t parameter_count(const P& p) {
  std::size_t n = 0;
  p.visit([&](std::string_view, const Matrix& m) { n += m.size(); });
  return n;
}

// dst += w * src, tensor by tensor.
template <ParamSet P>
void accumulate(P& dst, const P& src, double w = 1.0) {
  visit_pair(dst, src, [w](std::string_view, Matrix& d, const Matrix& s) {
    for (std::size_t i = 0; i < d.size(); ++i) d[i] += w * s[i];
  });
}

}  // namespace ovvad
