#pragma once

// Minimal reverse-mode differentiation over Matrix-valued nodes.
//
// A Tape owns every intermediate value. Nodes are appended in evaluation
// order, so walking the node list backwards is a valid reverse topological
// order. Leaves are either constants (never receive gradient) or parameters.

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <functional>
#include <numeric>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include "ovvad/error.hpp"
#include "ovvad/matrix.hpp"

namespace ovvad::ad {

class Tape;

// Lightweight handle to a tape node.
class Var {
 public:
  Var() = default;
  Tape& tape() const { return *tape_; }
  std::size_t id() const noexcept { return id_; }
  const Matrix& value() const;
  std::size_t rows() const { return value().rows(); }
  std::size_t cols() const { return value().cols(); }
  double scalar() const;

 private:
  friend class Tape;
  Var(Tape* t, std::size_t id) : tape_(t), id_(id) {}
  Tape* tape_ = nullptr;
  std::size_t id_ = 0;
};

class Tape {
 public:
  // Called once per node during backward. `self` is the node being processed.
  using Backward = std::function<void(Tape&, std::size_t self)>;

  Tape() = default;
  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;

  Var constant(Matrix m) { return push(std::move(m), {}, false, nullptr); }
  Var parameter(Matrix m) { return push(std::move(m), {}, true, nullptr); }

  // Records an operation. The node needs gradient iff any input does.
  Var record(Matrix value, std::initializer_list<Var> inputs, Backward backward) {
    bool needs = false;
    std::vector<std::size_t> ids;
    ids.reserve(inputs.size());
    for (const Var& v : inputs) {
      check_owner(v);
      ids.push_back(v.id());
      needs = needs || nodes_[v.id()].needs_grad;
    }
    return push(std::move(value), std::move(ids), needs, needs ? std::move(backward) : nullptr);
  }

  const Matrix& value(std::size_t id) const { return nodes_.at(id).value; }
  bool needs_grad(std::size_t id) const { return nodes_.at(id).needs_grad; }

  // Gradient of the last backward() target with respect to node `v`. Nodes
  // the loss does not depend on report an all-zero matrix of matching shape.
  Matrix grad(Var v) const {
    check_owner(v);
    const Node& n = nodes_[v.id()];
    if (n.grad.empty() && !n.value.empty()) return Matrix(n.value.rows(), n.value.cols());
    return n.grad;
  }

  // Accumulator for an input's gradient, or nullptr when it needs none.
  Matrix* grad_slot(std::size_t id) {
    Node& n = nodes_[id];
    if (!n.needs_grad) return nullptr;
    if (n.grad.empty()) n.grad = Matrix(n.value.rows(), n.value.cols());
    return &n.grad;
  }

  // Upstream gradient of a node currently being processed.
  const Matrix& upstream(std::size_t id) const { return nodes_[id].grad; }

  void backward(Var loss) {
    check_owner(loss);
    if (loss.value().rows() != 1 || loss.value().cols() != 1) {
      throw ShapeError("backward target must be 1x1, got " + loss.value().shape_str());
    }
    for (Node& n : nodes_) n.grad = Matrix();
    if (!nodes_[loss.id()].needs_grad) return;
    nodes_[loss.id()].grad = Matrix(1, 1, 1.0);
    for (std::size_t i = loss.id() + 1; i-- > 0;) {
      Node& n = nodes_[i];
      if (!n.backward || n.grad.empty()) continue;
      n.backward(*this, i);
    }
  }

  std::size_t size() const noexcept { return nodes_.size(); }

 private:
  struct Node {
    Matrix value;
    Matrix grad;
    std::vector<std::size_t> inputs;
    bool needs_grad = false;
    Backward backward;
  };

  Var push(Matrix m, std::vector<std::size_t> inputs, bool needs, Backward bw) {
    nodes_.push_back(Node{std::move(m), Matrix(), std::move(inputs), needs, std::move(bw)});
    return Var(this, nodes_.size() - 1);
  }

  void check_owner(const Var& v) const {
    if (v.tape_ != this) throw ShapeError("variable belongs to a different tape");
  }

  std::vector<Node> nodes_;
};

inline const Matrix& Var::value() const { return tape_->value(id_); }
inline double Var::scalar() const {
  const Matrix& m = value();
  if (m.size() != 1) throw ShapeError("scalar(): value is " + m.shape_str());
  return m[0];
}

// ---------------------------------------------------------------------------
// Primitives

inline Var matmul(Var a, Var b) {
  const std::size_t ia = a.id(), ib = b.id();
  return a.tape().record(ovvad::matmul(a.value(), b.value()), {a, b}, [ia, ib](Tape& t, std::size_t self) {
    const Matrix& g = t.upstream(self);
    if (Matrix* ga = t.grad_slot(ia)) {
      Matrix d = matmul_nt(g, t.value(ib));
      for (std::size_t i = 0; i < d.size(); ++i) (*ga)[i] += d[i];
    }
    if (Matrix* gb = t.grad_slot(ib)) {
      Matrix d = matmul_tn(t.value(ia), g);
      for (std::size_t i = 0; i < d.size(); ++i) (*gb)[i] += d[i];
    }
  });
}

inline Var transpose(Var a) {
  const std::size_t ia = a.id();
  return a.tape().record(ovvad::transpose(a.value()), {a}, [ia](Tape& t, std::size_t self) {
    Matrix* ga = t.grad_slot(ia);
    Matrix d = ovvad::transpose(t.upstream(self));
    for (std::size_t i = 0; i < d.size(); ++i) (*ga)[i] += d[i];
  });
}

inline Var add(Var a, Var b) {
  require_same_shape(a.value(), b.value(), "add");
  Matrix out = a.value();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] += b.value()[i];
  const std::size_t ia = a.id(), ib = b.id();
  return a.tape().record(std::move(out), {a, b}, [ia, ib](Tape& t, std::size_t self) {
    const Matrix& g = t.upstream(self);
    for (std::size_t id : {ia, ib}) {
      if (Matrix* gx = t.grad_slot(id))
        for (std::size_t i = 0; i < g.size(); ++i) (*gx)[i] += g[i];
    }
  });
}

inline Var sub(Var a, Var b) {
  require_same_shape(a.value(), b.value(), "sub");
  Matrix out = a.value();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] -= b.value()[i];
  const std::size_t ia = a.id(), ib = b.id();
  return a.tape().record(std::move(out), {a, b}, [ia, ib](Tape& t, std::size_t self) {
    const Matrix& g = t.upstream(self);
    if (Matrix* ga = t.grad_slot(ia))
      for (std::size_t i = 0; i < g.size(); ++i) (*ga)[i] += g[i];
    if (Matrix* gb = t.grad_slot(ib))
      for (std::size_t i = 0; i < g.size(); ++i) (*gb)[i] -= g[i];
  });
}

// Elementwise product.
inline Var hadamard(Var a, Var b) {
  require_same_shape(a.value(), b.value(), "hadamard");
  Matrix out = a.value();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] *= b.value()[i];
  const std::size_t ia = a.id(), ib = b.id();
  return a.tape().record(std::move(out), {a, b}, [ia, ib](Tape& t, std::size_t self) {
    const Matrix& g = t.upstream(self);
    if (Matrix* ga = t.grad_slot(ia))
      for (std::size_t i = 0; i < g.size(); ++i) (*ga)[i] += g[i] * t.value(ib)[i];
    if (Matrix* gb = t.grad_slot(ib))
      for (std::size_t i = 0; i < g.size(); ++i) (*gb)[i] += g[i] * t.value(ia)[i];
  });
}

// alpha * a + beta, elementwise.
inline Var affine(Var a, double alpha, double beta = 0.0) {
  Matrix out = a.value();
  for (double& v : out.data()) v = alpha * v + beta;
  const std::size_t ia = a.id();
  return a.tape().record(std::move(out), {a}, [ia, alpha](Tape& t, std::size_t self) {
    const Matrix& g = t.upstream(self);
    Matrix* ga = t.grad_slot(ia);
    for (std::size_t i = 0; i < g.size(); ++i) (*ga)[i] += alpha * g[i];
  });
}

inline Var scale(Var a, double alpha) { return affine(a, alpha, 0.0); }

// Adds a 1×c row to every row of an n×c matrix.
inline Var add_row(Var m, Var row) {
  if (row.value().rows() != 1 || row.value().cols() != m.value().cols()) {
    throw ShapeError("add_row: " + m.value().shape_str() + " + " + row.value().shape_str());
  }
  Matrix out = m.value();
  const std::size_t c = out.cols();
  for (std::size_t i = 0; i < out.rows(); ++i)
    for (std::size_t j = 0; j < c; ++j) out(i, j) += row.value()[j];
  const std::size_t im = m.id(), ir = row.id();
  return m.tape().record(std::move(out), {m, row}, [im, ir](Tape& t, std::size_t self) {
    const Matrix& g = t.upstream(self);
    if (Matrix* gm = t.grad_slot(im))
      for (std::size_t i = 0; i < g.size(); ++i) (*gm)[i] += g[i];
    if (Matrix* gr = t.grad_slot(ir))
      for (std::size_t i = 0; i < g.rows(); ++i)
        for (std::size_t j = 0; j < g.cols(); ++j) (*gr)[j] += g(i, j);
  });
}

inline Var row_softmax(Var a) {
  const std::size_t ia = a.id();
  return a.tape().record(ovvad::row_softmax(a.value()), {a}, [ia](Tape& t, std::size_t self) {
    const Matrix& g = t.upstream(self);
    const Matrix& s = t.value(self);
    Matrix* ga = t.grad_slot(ia);
    for (std::size_t i = 0; i < s.rows(); ++i) {
      double dot = 0.0;
      for (std::size_t j = 0; j < s.cols(); ++j) dot += g(i, j) * s(i, j);
      for (std::size_t j = 0; j < s.cols(); ++j) (*ga)(i, j) += s(i, j) * (g(i, j) - dot);
    }
  });
}

inline Var log_softmax(Var a) {
  const Matrix& x = a.value();
  Matrix out(x.rows(), x.cols());
  for (std::size_t i = 0; i < x.rows(); ++i) {
    auto r = x.row(i);
    const double mx = *std::max_element(r.begin(), r.end());
    double sum = 0.0;
    for (double v : r) sum += std::exp(v - mx);
    const double lse = mx + std::log(sum);
    for (std::size_t j = 0; j < r.size(); ++j) out(i, j) = r[j] - lse;
  }
  const std::size_t ia = a.id();
  return a.tape().record(std::move(out), {a}, [ia](Tape& t, std::size_t self) {
    const Matrix& g = t.upstream(self);
    const Matrix& y = t.value(self);
    Matrix* ga = t.grad_slot(ia);
    for (std::size_t i = 0; i < y.rows(); ++i) {
      double gsum = 0.0;
      for (std::size_t j = 0; j < y.cols(); ++j) gsum += g(i, j);
      for (std::size_t j = 0; j < y.cols(); ++j) (*ga)(i, j) += g(i, j) - std::exp(y(i, j)) * gsum;
    }
  });
}

inline Var sigmoid(Var a) {
  Matrix out = a.value();
  for (double& v : out.data()) v = ovvad::sigmoid(v);
  const std::size_t ia = a.id();
  return a.tape().record(std::move(out), {a}, [ia](Tape& t, std::size_t self) {
    const Matrix& g = t.upstream(self);
    const Matrix& s = t.value(self);
    Matrix* ga = t.grad_slot(ia);
    for (std::size_t i = 0; i < g.size(); ++i) (*ga)[i] += g[i] * s[i] * (1.0 - s[i]);
  });
}

inline Var gelu(Var a) {
  Matrix out = a.value();
  for (double& v : out.data()) v = ovvad::gelu(v);
  const std::size_t ia = a.id();
  return a.tape().record(std::move(out), {a}, [ia](Tape& t, std::size_t self) {
    const Matrix& g = t.upstream(self);
    const Matrix& x = t.value(ia);
    Matrix* ga = t.grad_slot(ia);
    for (std::size_t i = 0; i < g.size(); ++i) (*ga)[i] += g[i] * gelu_grad(x[i]);
  });
}

inline Var log(Var a) {
  Matrix out = a.value();
  for (double& v : out.data()) {
    if (!(v > 0.0)) throw NumericalError("log of non-positive value");
    v = std::log(v);
  }
  const std::size_t ia = a.id();
  return a.tape().record(std::move(out), {a}, [ia](Tape& t, std::size_t self) {
    const Matrix& g = t.upstream(self);
    const Matrix& x = t.value(ia);
    Matrix* ga = t.grad_slot(ia);
    for (std::size_t i = 0; i < g.size(); ++i) (*ga)[i] += g[i] / x[i];
  });
}

// Clamps into [lo, hi]; gradient flows only where the input was inside.
inline Var clamp(Var a, double lo, double hi) {
  Matrix out = a.value();
  for (double& v : out.data()) v = std::clamp(v, lo, hi);
  const std::size_t ia = a.id();
  return a.tape().record(std::move(out), {a}, [ia, lo, hi](Tape& t, std::size_t self) {
    const Matrix& g = t.upstream(self);
    const Matrix& x = t.value(ia);
    Matrix* ga = t.grad_slot(ia);
    for (std::size_t i = 0; i < g.size(); ++i)
      if (x[i] > lo && x[i] < hi) (*ga)[i] += g[i];
  });
}

// gamma, beta are 1×c rows.
inline Var layer_norm(Var x, Var gamma, Var beta, double eps = kLayerNormEps) {
  const Matrix& xv = x.value();
  const std::size_t n = xv.rows(), c = xv.cols();
  if (gamma.value().rows() != 1 || beta.value().rows() != 1) throw ShapeError("layer_norm: affine must be 1xc");
  Matrix out = ovvad::layer_norm(xv, gamma.value().data(), beta.value().data(), eps);
  // Cache normalized rows and inverse std for backward.
  Matrix xhat(n, c);
  std::vector<double> inv_std(n);
  for (std::size_t i = 0; i < n; ++i) {
    auto r = xv.row(i);
    double mean = std::accumulate(r.begin(), r.end(), 0.0) / static_cast<double>(c);
    double var = 0.0;
    for (double v : r) var += (v - mean) * (v - mean);
    var /= static_cast<double>(c);
    inv_std[i] = 1.0 / std::sqrt(var + eps);
    for (std::size_t j = 0; j < c; ++j) xhat(i, j) = (r[j] - mean) * inv_std[i];
  }
  const std::size_t ix = x.id(), ig = gamma.id(), ib = beta.id();
  return x.tape().record(
      std::move(out), {x, gamma, beta},
      [ix, ig, ib, xhat = std::move(xhat), inv_std = std::move(inv_std)](Tape& t, std::size_t self) {
        const Matrix& g = t.upstream(self);
        const Matrix& gam = t.value(ig);
        const std::size_t n = g.rows(), c = g.cols();
        if (Matrix* gg = t.grad_slot(ig))
          for (std::size_t i = 0; i < n; ++i)
            for (std::size_t j = 0; j < c; ++j) (*gg)[j] += g(i, j) * xhat(i, j);
        if (Matrix* gb = t.grad_slot(ib))
          for (std::size_t i = 0; i < n; ++i)
            for (std::size_t j = 0; j < c; ++j) (*gb)[j] += g(i, j);
        if (Matrix* gx = t.grad_slot(ix)) {
          for (std::size_t i = 0; i < n; ++i) {
            double mean_d = 0.0, mean_dx = 0.0;
            for (std::size_t j = 0; j < c; ++j) {
              const double d = g(i, j) * gam[j];
              mean_d += d;
              mean_dx += d * xhat(i, j);
            }
            mean_d /= static_cast<double>(c);
            mean_dx /= static_cast<double>(c);
            for (std::size_t j = 0; j < c; ++j) {
              const double d = g(i, j) * gam[j];
              (*gx)(i, j) += inv_std[i] * (d - mean_d - xhat(i, j) * mean_dx);
            }
          }
        }
      });
}

inline Var concat_cols(Var a, Var b) {
  const Matrix& av = a.value();
  const Matrix& bv = b.value();
  if (av.rows() != bv.rows()) throw ShapeError("concat_cols: " + av.shape_str() + " | " + bv.shape_str());
  Matrix out(av.rows(), av.cols() + bv.cols());
  for (std::size_t i = 0; i < av.rows(); ++i) {
    std::copy(av.row(i).begin(), av.row(i).end(), out.row(i).begin());
    std::copy(bv.row(i).begin(), bv.row(i).end(), out.row(i).begin() + static_cast<std::ptrdiff_t>(av.cols()));
  }
  const std::size_t ia = a.id(), ib = b.id(), ca = av.cols();
  return a.tape().record(std::move(out), {a, b}, [ia, ib, ca](Tape& t, std::size_t self) {
    const Matrix& g = t.upstream(self);
    Matrix* ga = t.grad_slot(ia);
    Matrix* gb = t.grad_slot(ib);
    for (std::size_t i = 0; i < g.rows(); ++i)
      for (std::size_t j = 0; j < g.cols(); ++j) {
        if (j < ca) {
          if (ga) (*ga)(i, j) += g(i, j);
        } else if (gb) {
          (*gb)(i, j - ca) += g(i, j);
        }
      }
  });
}

// Gathers rows in the given order (repeats allowed).
inline Var select_rows(Var a, std::span<const std::size_t> rows) {
  const Matrix& av = a.value();
  Matrix out(rows.size(), av.cols());
  for (std::size_t r = 0; r < rows.size(); ++r) {
    if (rows[r] >= av.rows()) throw ShapeError("select_rows: index out of range");
    std::copy(av.row(rows[r]).begin(), av.row(rows[r]).end(), out.row(r).begin());
  }
  const std::size_t ia = a.id();
  return a.tape().record(std::move(out), {a},
                         [ia, idx = std::vector<std::size_t>(rows.begin(), rows.end())](Tape& t, std::size_t self) {
                           const Matrix& g = t.upstream(self);
                           Matrix* ga = t.grad_slot(ia);
                           for (std::size_t r = 0; r < idx.size(); ++r)
                             for (std::size_t j = 0; j < g.cols(); ++j) (*ga)(idx[r], j) += g(r, j);
                         });
}

inline Var select_cols(Var a, std::span<const std::size_t> cols) {
  const Matrix& av = a.value();
  Matrix out(av.rows(), cols.size());
  for (std::size_t c = 0; c < cols.size(); ++c) {
    if (cols[c] >= av.cols()) throw ShapeError("select_cols: index out of range");
    for (std::size_t i = 0; i < av.rows(); ++i) out(i, c) = av(i, cols[c]);
  }
  const std::size_t ia = a.id();
  return a.tape().record(std::move(out), {a},
                         [ia, idx = std::vector<std::size_t>(cols.begin(), cols.end())](Tape& t, std::size_t self) {
                           const Matrix& g = t.upstream(self);
                           Matrix* ga = t.grad_slot(ia);
                           for (std::size_t i = 0; i < g.rows(); ++i)
                             for (std::size_t c = 0; c < idx.size(); ++c) (*ga)(i, idx[c]) += g(i, c);
                         });
}

// Indices of the k largest entries of `v`, ordered by value descending with
// ties broken by lower index first.
inline std::vector<std::size_t> topk_indices(std::span<const double> v, std::size_t k) {
  if (k == 0 || k > v.size()) {
    throw ConfigError("top-k: k=" + std::to_string(k) + " outside [1, " + std::to_string(v.size()) + "]");
  }
  std::vector<std::size_t> idx(v.size());
  std::iota(idx.begin(), idx.end(), std::size_t{0});
  std::partial_sort(idx.begin(), idx.begin() + static_cast<std::ptrdiff_t>(k), idx.end(),
                    [&](std::size_t a, std::size_t b) { return v[a] > v[b] || (v[a] == v[b] && a < b); });
  idx.resize(k);
  return idx;
}

// n×m → n×1: mean of the k largest entries in each row. The selection is
// treated as fixed for differentiation.
inline Var topk_row_mean(Var a, std::size_t k) {
  const Matrix& av = a.value();
  Matrix out(av.rows(), 1);
  std::vector<std::vector<std::size_t>> picks(av.rows());
  for (std::size_t i = 0; i < av.rows(); ++i) {
    picks[i] = topk_indices(av.row(i), k);
    double s = 0.0;
    for (std::size_t j : picks[i]) s += av(i, j);
    out(i, 0) = s / static_cast<double>(k);
  }
  const std::size_t ia = a.id();
  return a.tape().record(std::move(out), {a}, [ia, k, picks = std::move(picks)](Tape& t, std::size_t self) {
    const Matrix& g = t.upstream(self);
    Matrix* ga = t.grad_slot(ia);
    for (std::size_t i = 0; i < picks.size(); ++i)
      for (std::size_t j : picks[i]) (*ga)(i, j) += g(i, 0) / static_cast<double>(k);
  });
}

// Unit-normalizes every row. Zero rows are rejected.
inline Var row_normalize(Var a) {
  const Matrix& av = a.value();
  Matrix out = av;
  std::vector<double> norms(av.rows());
  for (std::size_t i = 0; i < av.rows(); ++i) {
    norms[i] = l2_norm(av.row(i));
    if (!(norms[i] > 0.0)) throw NumericalError("row_normalize: zero-norm row " + std::to_string(i));
    for (double& v : out.row(i)) v /= norms[i];
  }
  const std::size_t ia = a.id();
  return a.tape().record(std::move(out), {a}, [ia, norms = std::move(norms)](Tape& t, std::size_t self) {
    const Matrix& g = t.upstream(self);
    const Matrix& y = t.value(self);
    Matrix* ga = t.grad_slot(ia);
    for (std::size_t i = 0; i < y.rows(); ++i) {
      double dot = 0.0;
      for (std::size_t j = 0; j < y.cols(); ++j) dot += y(i, j) * g(i, j);
      for (std::size_t j = 0; j < y.cols(); ++j) (*ga)(i, j) += (g(i, j) - y(i, j) * dot) / norms[i];
    }
  });
}

inline Var sum(Var a) {
  double s = 0.0;
  for (double v : a.value().data()) s += v;
  const std::size_t ia = a.id();
  return a.tape().record(Matrix(1, 1, s), {a}, [ia](Tape& t, std::size_t self) {
    const double g = t.upstream(self)[0];
    Matrix* ga = t.grad_slot(ia);
    for (double& v : ga->data()) v += g;
  });
}

inline Var mean(Var a) {
  if (a.value().empty()) throw ShapeError("mean of empty matrix");
  return scale(sum(a), 1.0 / static_cast<double>(a.value().size()));
}

// Single entry as a 1×1 node.
inline Var pick(Var a, std::size_t r, std::size_t c) {
  const Matrix& av = a.value();
  if (r >= av.rows() || c >= av.cols()) throw ShapeError("pick: index out of range for " + av.shape_str());
  const std::size_t ia = a.id();
  return a.tape().record(Matrix(1, 1, av(r, c)), {a}, [ia, r, c](Tape& t, std::size_t self) {
    Matrix* ga = t.grad_slot(ia);
    (*ga)(r, c) += t.upstream(self)[0];
  });
}

}  // namespace ovvad::ad
