#pragma once

#include <algorithm>
#include <cmath>
#include <string>
#include <string_view>

#include "ovvad/error.hpp"
#include "ovvad/params.hpp"

namespace ovvad {

struct GradCheckResult {
  double max_rel_error = 0.0;
  std::string worst_param;
  std::size_t worst_index = 0;
  std::size_t entries_checked = 0;
};

// Compares an analytic gradient against central finite differences.
//
// `loss_fn(params)` must be deterministic and scalar. The error per entry is
// |analytic - numeric| / max(1, |numeric|); the maximum over all entries is
// returned together with where it occurred.
template <ParamSet P, class LossFn>
GradCheckResult grad_check(LossFn&& loss_fn, const P& params, const P& analytic, double eps = 1e-5) {
  GradCheckResult res;
  P probe = params;
  std::vector<const Matrix*> grads;
  analytic.visit([&](std::string_view, const Matrix& g) { grads.push_back(&g); });
  std::size_t t = 0;
  probe.visit([&](std::string_view name, Matrix& m) {
    const Matrix& g = *grads.at(t++);
    require_same_shape(m, g, "grad_check");
    for (std::size_t i = 0; i < m.size(); ++i) {
      const double orig = m[i];
      m[i] = orig + eps;
      const double up = loss_fn(static_cast<const P&>(probe));
      m[i] = orig - eps;
      const double down = loss_fn(static_cast<const P&>(probe));
      m[i] = orig;
      if (!std::isfinite(up) || !std::isfinite(down)) {
        throw NumericalError("non-finite loss while perturbing " + std::string(name) + "[" + std::to_string(i) + "]");
      }
      const double numeric = (up - down) / (2.0 * eps);
      const double err = std::abs(g[i] - numeric) / std::max(1.0, std::abs(numeric));
      ++res.entries_checked;
      if (err > res.max_rel_error || res.worst_param.empty()) {
        res.max_rel_error = err;
        res.worst_param = std::string(name);
        res.worst_index = i;
      }
    }
  });
  return res;
}

}  // namespace ovvad
