#pragma once

#include <cmath>
#include <cstdint>

#include "ovvad/error.hpp"
#include "ovvad/params.hpp"

namespace ovvad {

struct AdamWConfig {
  double lr = 1e-4;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
  double weight_decay = 0.01;
};

template <ParamSet P>
struct OptimizerState {
  AdamWConfig config;
  P first_moment;
  P second_moment;
  std::uint64_t step = 0;

  OptimizerState(const P& params, AdamWConfig cfg)
      : config(cfg), first_moment(zeros_like(params)), second_moment(zeros_like(params)) {}
};

// One AdamW update with decoupled weight decay:
//   p <- p - lr*wd*p - lr * m_hat / (sqrt(v_hat) + eps)
template <ParamSet P>
void adamw_step(P& params, const P& grads, OptimizerState<P>& state) {
  const AdamWConfig& c = state.config;
  ++state.step;
  const double t = static_cast<double>(state.step);
  const double bc1 = 1.0 - std::pow(c.beta1, t);
  const double bc2 = 1.0 - std::pow(c.beta2, t);

  std::vector<Matrix*> ms, vs;
  state.first_moment.visit([&](std::string_view, Matrix& m) { ms.push_back(&m); });
  state.second_moment.visit([&](std::string_view, Matrix& m) { vs.push_back(&m); });
  std::size_t k = 0;
  visit_pair(params, grads, [&](std::string_view name, Matrix& p, const Matrix& g) {
    Matrix& m = *ms.at(k);
    Matrix& v = *vs.at(k);
    ++k;
    require_same_shape(p, m, std::string(name).c_str());
    for (std::size_t i = 0; i < p.size(); ++i) {
      m[i] = c.beta1 * m[i] + (1.0 - c.beta1) * g[i];
      v[i] = c.beta2 * v[i] + (1.0 - c.beta2) * g[i] * g[i];
      const double mhat = m[i] / bc1;
      const double vhat = v[i] / bc2;
      p[i] -= c.lr * c.weight_decay * p[i];
      p[i] -= c.lr * mhat / (std::sqrt(vhat) + c.eps);
    }
  });
}

}  // namespace ovvad
