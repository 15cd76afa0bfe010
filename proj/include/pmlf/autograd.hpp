#pragma once

// Minimal reverse-mode automatic differentiation over dense 2-D matrices.
//
// Every value is an Eigen matrix (row = token/sample, column = feature). An op
// creates a node holding its value and a closure that pushes the node's
// gradient into its inputs. Graphs are built eagerly and released when the
// last `Var` referencing them goes away. Parameters are long-lived leaves.

#include <Eigen/Dense>

#include <cmath>
#include <functional>
#include <limits>
#include <memory>
#include <unordered_set>
#include <utility>
#include <vector>

#include "pmlf/core.hpp"

namespace pmlf::ag {

using Matrix = Eigen::MatrixXd;
using Index = Eigen::Index;

struct Node {
  Matrix value;
  Matrix grad;  // empty until something flows in
  bool requires_grad = false;
  std::vector<std::shared_ptr<Node>> inputs;
  std::function<void(Node&)> backward_fn;

  void accumulate(const Matrix& g) {
    if (grad.size() == 0)
      grad = g;
    else
      grad += g;
  }
};

namespace detail {
inline bool& grad_disabled() {
  thread_local bool disabled = false;
  return disabled;
}
}  // namespace detail

/// While alive, ops record no graph (inference mode).
class NoGradGuard {
 public:
  NoGradGuard() : prev_(detail::grad_disabled()) { detail::grad_disabled() = true; }
  ~NoGradGuard() { detail::grad_disabled() = prev_; }
  NoGradGuard(const NoGradGuard&) = delete;
  NoGradGuard& operator=(const NoGradGuard&) = delete;

 private:
  bool prev_;
};

class Var {
 public:
  Var() = default;
  explicit Var(Matrix value, bool requires_grad = false) : node_(std::make_shared<Node>()) {
    node_->value = std::move(value);
    node_->requires_grad = requires_grad;
  }
  explicit Var(std::shared_ptr<Node> n) : node_(std::move(n)) {}

  bool defined() const { return static_cast<bool>(node_); }
  const Matrix& value() const { return node_->value; }
  Matrix& mutable_value() { return node_->value; }
  const Matrix& grad() const { return node_->grad; }
  bool has_grad() const { return node_->grad.size() != 0; }
  void zero_grad() { node_->grad.resize(0, 0); }
  bool requires_grad() const { return node_->requires_grad; }
  Index rows() const { return node_->value.rows(); }
  Index cols() const { return node_->value.cols(); }
  double scalar() const { return node_->value(0, 0); }
  const std::shared_ptr<Node>& node() const { return node_; }

 private:
  std::shared_ptr<Node> node_;
};

inline Var constant(Matrix m) { return Var(std::move(m), false); }
inline Var leaf(Matrix m) { return Var(std::move(m), true); }

namespace detail {

template <class F>
Var make_op(Matrix value, std::vector<Var> inputs, F&& backward) {
  bool needs = false;
  if (!grad_disabled())
    for (const auto& v : inputs) needs = needs || v.requires_grad();
  auto n = std::make_shared<Node>();
  n->value = std::move(value);
  if (needs) {
    n->requires_grad = true;
    n->inputs.reserve(inputs.size());
    for (auto& v : inputs) n->inputs.push_back(v.node());
    n->backward_fn = std::forward<F>(backward);
  }
  return Var(std::move(n));
}

inline void push(Node& self, std::size_t i, const Matrix& g) {
  auto& in = self.inputs[i];
  if (in->requires_grad) in->accumulate(g);
}

inline bool wants(const Node& self, std::size_t i) { return self.inputs[i]->requires_grad; }

inline void check(bool ok, const char* what) {
  if (!ok) throw Error(Errc::DimMismatch, what);
}

}  // namespace detail

/// Runs reverse accumulation from `root`, seeded with `seed` (defaults to ones).
inline void backward(const Var& root, const Matrix* seed = nullptr) {
  if (!root.requires_grad()) return;
  std::vector<Node*> order;
  std::unordered_set<Node*> seen;
  // Iterative post-order DFS.
  std::vector<std::pair<Node*, std::size_t>> stack;
  stack.emplace_back(root.node().get(), 0);
  seen.insert(root.node().get());
  while (!stack.empty()) {
    auto& [n, i] = stack.back();
    if (i < n->inputs.size()) {
      Node* child = n->inputs[i++].get();
      if (child->requires_grad && !seen.count(child)) {
        seen.insert(child);
        stack.emplace_back(child, 0);
      }
    } else {
      order.push_back(n);
      stack.pop_back();
    }
  }
  Node* r = root.node().get();
  if (seed)
    r->accumulate(*seed);
  else
    r->accumulate(Matrix::Ones(r->value.rows(), r->value.cols()));
  for (auto it = order.rbegin(); it != order.rend(); ++it) {
    Node* n = *it;
    if (n->backward_fn && n->grad.size() != 0) n->backward_fn(*n);
  }
  // Interior gradients are no longer needed; leaves keep theirs.
  for (Node* n : order)
    if (n->backward_fn) n->grad.resize(0, 0);
}

// ---------------------------------------------------------------------------
// Linear algebra

inline Var matmul(const Var& a, const Var& b) {
  detail::check(a.cols() == b.rows(), "matmul: inner dimensions differ");
  Matrix out = a.value() * b.value();
  return detail::make_op(std::move(out), {a, b}, [](Node& s) {
    const Matrix& A = s.inputs[0]->value;
    const Matrix& B = s.inputs[1]->value;
    if (detail::wants(s, 0)) detail::push(s, 0, s.grad * B.transpose());
    if (detail::wants(s, 1)) detail::push(s, 1, A.transpose() * s.grad);
  });
}

/// a * b^T
inline Var matmul_nt(const Var& a, const Var& b) {
  detail::check(a.cols() == b.cols(), "matmul_nt: feature dimensions differ");
  Matrix out = a.value() * b.value().transpose();
  return detail::make_op(std::move(out), {a, b}, [](Node& s) {
    const Matrix& A = s.inputs[0]->value;
    const Matrix& B = s.inputs[1]->value;
    if (detail::wants(s, 0)) detail::push(s, 0, s.grad * B);
    if (detail::wants(s, 1)) detail::push(s, 1, s.grad.transpose() * A);
  });
}

inline Var transpose(const Var& a) {
  Matrix out = a.value().transpose();
  return detail::make_op(std::move(out), {a},
                         [](Node& s) { detail::push(s, 0, s.grad.transpose()); });
}

inline Var add(const Var& a, const Var& b) {
  detail::check(a.rows() == b.rows() && a.cols() == b.cols(), "add: shapes differ");
  Matrix out = a.value() + b.value();
  return detail::make_op(std::move(out), {a, b}, [](Node& s) {
    detail::push(s, 0, s.grad);
    detail::push(s, 1, s.grad);
  });
}

inline Var sub(const Var& a, const Var& b) {
  detail::check(a.rows() == b.rows() && a.cols() == b.cols(), "sub: shapes differ");
  Matrix out = a.value() - b.value();
  return detail::make_op(std::move(out), {a, b}, [](Node& s) {
    detail::push(s, 0, s.grad);
    if (detail::wants(s, 1)) detail::push(s, 1, -s.grad);
  });
}

/// Adds a 1 x n row to every row of `a`.
inline Var add_row(const Var& a, const Var& row) {
  detail::check(row.rows() == 1 && row.cols() == a.cols(), "add_row: bias shape");
  Matrix out = a.value().rowwise() + row.value().row(0);
  return detail::make_op(std::move(out), {a, row}, [](Node& s) {
    detail::push(s, 0, s.grad);
    if (detail::wants(s, 1)) detail::push(s, 1, s.grad.colwise().sum());
  });
}

inline Var hadamard(const Var& a, const Var& b) {
  detail::check(a.rows() == b.rows() && a.cols() == b.cols(), "hadamard: shapes differ");
  Matrix out = a.value().cwiseProduct(b.value());
  return detail::make_op(std::move(out), {a, b}, [](Node& s) {
    if (detail::wants(s, 0)) detail::push(s, 0, s.grad.cwiseProduct(s.inputs[1]->value));
    if (detail::wants(s, 1)) detail::push(s, 1, s.grad.cwiseProduct(s.inputs[0]->value));
  });
}

inline Var scale(const Var& a, double k) {
  Matrix out = a.value() * k;
  return detail::make_op(std::move(out), {a}, [k](Node& s) { detail::push(s, 0, s.grad * k); });
}

/// Sum of 1x1 terms.
inline Var sum_scalars(const std::vector<Var>& terms) {
  detail::check(!terms.empty(), "sum_scalars: no terms");
  double total = 0.0;
  for (const auto& t : terms) {
    detail::check(t.rows() == 1 && t.cols() == 1, "sum_scalars: non-scalar term");
    total += t.scalar();
  }
  Matrix out(1, 1);
  out(0, 0) = total;
  return detail::make_op(std::move(out), terms, [](Node& s) {
    for (std::size_t i = 0; i < s.inputs.size(); ++i) detail::push(s, i, s.grad);
  });
}

// ---------------------------------------------------------------------------
// Elementwise nonlinearities

inline Var relu(const Var& a) {
  Matrix out = a.value().cwiseMax(0.0);
  return detail::make_op(std::move(out), {a}, [](Node& s) {
    const Matrix& x = s.inputs[0]->value;
    detail::push(s, 0, (x.array() > 0.0).select(s.grad, 0.0));
  });
}

inline Var tanh(const Var& a) {
  Matrix out = a.value().array().tanh().matrix();
  return detail::make_op(out, {a}, [y = out](Node& s) {
    detail::push(s, 0, s.grad.cwiseProduct((1.0 - y.array().square()).matrix()));
  });
}

/// Inverted dropout; identity when `p == 0` or no graph is being recorded.
inline Var dropout(const Var& a, double p, Rng& rng) {
  if (p <= 0.0 || detail::grad_disabled()) return a;
  Matrix mask(a.rows(), a.cols());
  const double keep = 1.0 - p;
  for (Index j = 0; j < mask.cols(); ++j)
    for (Index i = 0; i < mask.rows(); ++i) mask(i, j) = rng.uniform() < keep ? 1.0 / keep : 0.0;
  Matrix out = a.value().cwiseProduct(mask);
  return detail::make_op(std::move(out), {a}, [mask = std::move(mask)](Node& s) {
    detail::push(s, 0, s.grad.cwiseProduct(mask));
  });
}

// ---------------------------------------------------------------------------
// Shape ops

inline Var slice_rows(const Var& a, Index start, Index n) {
  detail::check(start >= 0 && n >= 0 && start + n <= a.rows(), "slice_rows: out of range");
  Matrix out = a.value().middleRows(start, n);
  return detail::make_op(std::move(out), {a}, [start, n](Node& s) {
    const Matrix& x = s.inputs[0]->value;
    Matrix g = Matrix::Zero(x.rows(), x.cols());
    g.middleRows(start, n) = s.grad;
    detail::push(s, 0, g);
  });
}

inline Var slice_cols(const Var& a, Index start, Index n) {
  detail::check(start >= 0 && n >= 0 && start + n <= a.cols(), "slice_cols: out of range");
  Matrix out = a.value().middleCols(start, n);
  return detail::make_op(std::move(out), {a}, [start, n](Node& s) {
    const Matrix& x = s.inputs[0]->value;
    Matrix g = Matrix::Zero(x.rows(), x.cols());
    g.middleCols(start, n) = s.grad;
    detail::push(s, 0, g);
  });
}

inline Var concat_rows(const std::vector<Var>& parts) {
  detail::check(!parts.empty(), "concat_rows: no parts");
  const Index c = parts[0].cols();
  Index r = 0;
  for (const auto& p : parts) {
    detail::check(p.cols() == c, "concat_rows: column counts differ");
    r += p.rows();
  }
  Matrix out(r, c);
  Index at = 0;
  for (const auto& p : parts) {
    out.middleRows(at, p.rows()) = p.value();
    at += p.rows();
  }
  return detail::make_op(std::move(out), parts, [](Node& s) {
    Index at = 0;
    for (std::size_t i = 0; i < s.inputs.size(); ++i) {
      const Index n = s.inputs[i]->value.rows();
      if (detail::wants(s, i)) detail::push(s, i, s.grad.middleRows(at, n));
      at += n;
    }
  });
}

inline Var concat_cols(const std::vector<Var>& parts) {
  detail::check(!parts.empty(), "concat_cols: no parts");
  const Index r = parts[0].rows();
  Index c = 0;
  for (const auto& p : parts) {
    detail::check(p.rows() == r, "concat_cols: row counts differ");
    c += p.cols();
  }
  Matrix out(r, c);
  Index at = 0;
  for (const auto& p : parts) {
    out.middleCols(at, p.cols()) = p.value();
    at += p.cols();
  }
  return detail::make_op(std::move(out), parts, [](Node& s) {
    Index at = 0;
    for (std::size_t i = 0; i < s.inputs.size(); ++i) {
      const Index n = s.inputs[i]->value.cols();
      if (detail::wants(s, i)) detail::push(s, i, s.grad.middleCols(at, n));
      at += n;
    }
  });
}

/// T x d -> 1 x d
inline Var mean_rows(const Var& a) {
  detail::check(a.rows() > 0, "mean_rows: empty input");
  Matrix out = a.value().colwise().mean();
  return detail::make_op(std::move(out), {a}, [](Node& s) {
    const Index t = s.inputs[0]->value.rows();
    detail::push(s, 0, s.grad.replicate(t, 1) / static_cast<double>(t));
  });
}

/// Averages consecutive windows of `stride` rows; a short final window is
/// averaged over the rows it has.
inline Var avg_pool_rows(const Var& a, Index stride) {
  if (stride <= 1) return a;
  const Index t = a.rows();
  const Index out_t = (t + stride - 1) / stride;
  Matrix out(out_t, a.cols());
  for (Index w = 0; w < out_t; ++w) {
    const Index lo = w * stride;
    const Index n = std::min(stride, t - lo);
    out.row(w) = a.value().middleRows(lo, n).colwise().mean();
  }
  return detail::make_op(std::move(out), {a}, [stride](Node& s) {
    const Index t = s.inputs[0]->value.rows();
    Matrix g(t, s.grad.cols());
    for (Index r = 0; r < t; ++r) {
      const Index w = r / stride;
      const Index lo = w * stride;
      const Index n = std::min(stride, t - lo);
      g.row(r) = s.grad.row(w) / static_cast<double>(n);
    }
    detail::push(s, 0, g);
  });
}

// ---------------------------------------------------------------------------
// Normalization and softmax

inline Var layer_norm(const Var& x, const Var& gamma, const Var& beta, double eps = 1e-5) {
  const Index d = x.cols();
  detail::check(gamma.cols() == d && beta.cols() == d && gamma.rows() == 1 && beta.rows() == 1,
                "layer_norm: parameter shape");
  const Matrix& X = x.value();
  Matrix xhat(X.rows(), d);
  Eigen::VectorXd inv_std(X.rows());
  for (Index i = 0; i < X.rows(); ++i) {
    const double mu = X.row(i).mean();
    const double var = (X.row(i).array() - mu).square().mean();
    inv_std(i) = 1.0 / std::sqrt(var + eps);
    xhat.row(i) = (X.row(i).array() - mu) * inv_std(i);
  }
  Matrix out = (xhat.array().rowwise() * gamma.value().row(0).array()).rowwise() +
               beta.value().row(0).array();
  return detail::make_op(std::move(out), {x, gamma, beta},
                         [xhat = std::move(xhat), inv_std = std::move(inv_std)](Node& s) {
                           const Matrix& G = s.grad;
                           const Matrix& gm = s.inputs[1]->value;
                           const double d = static_cast<double>(G.cols());
                           if (detail::wants(s, 0)) {
                             Matrix dxhat = G.array().rowwise() * gm.row(0).array();
                             Matrix dx(G.rows(), G.cols());
                             for (Index i = 0; i < G.rows(); ++i) {
                               const double m1 = dxhat.row(i).sum() / d;
                               const double m2 = dxhat.row(i).dot(xhat.row(i)) / d;
                               dx.row(i) = (dxhat.row(i).array() - m1 - xhat.row(i).array() * m2) *
                                           inv_std(i);
                             }
                             detail::push(s, 0, dx);
                           }
                           if (detail::wants(s, 1))
                             detail::push(s, 1, G.cwiseProduct(xhat).colwise().sum());
                           if (detail::wants(s, 2)) detail::push(s, 2, G.colwise().sum());
                         });
}

inline Matrix softmax_rows_value(const Matrix& z) {
  Matrix y(z.rows(), z.cols());
  for (Index i = 0; i < z.rows(); ++i) {
    const double m = z.row(i).maxCoeff();
    y.row(i) = (z.row(i).array() - m).exp();
    y.row(i) /= y.row(i).sum();
  }
  return y;
}

inline Var softmax_rows(const Var& z) {
  Matrix y = softmax_rows_value(z.value());
  return detail::make_op(y, {z}, [y](Node& s) {
    Matrix g(y.rows(), y.cols());
    for (Index i = 0; i < y.rows(); ++i) {
      const double dot = s.grad.row(i).dot(y.row(i));
      g.row(i) = y.row(i).array() * (s.grad.row(i).array() - dot);
    }
    detail::push(s, 0, g);
  });
}

/// Row-wise L2 normalization. Rows with norm below 1e-12 are rejected.
inline Var l2_normalize_rows(const Var& x) {
  const Matrix& X = x.value();
  Eigen::VectorXd norms = X.rowwise().norm();
  for (Index i = 0; i < norms.size(); ++i)
    if (!(norms(i) > 1e-12)) throw Error(Errc::ZeroNorm, "cannot normalize a zero-norm vector");
  Matrix y = X.array().colwise() / norms.array();
  return detail::make_op(y, {x}, [y, norms = std::move(norms)](Node& s) {
    Matrix g(y.rows(), y.cols());
    for (Index i = 0; i < y.rows(); ++i) {
      const double dot = s.grad.row(i).dot(y.row(i));
      g.row(i) = (s.grad.row(i) - dot * y.row(i)) / norms(i);
    }
    detail::push(s, 0, g);
  });
}

// ---------------------------------------------------------------------------
// Convolution

/// Temporal 1-D convolution with zero "same" padding.
/// x: T x Cin, w: (K*Cin) x Cout laid out tap-major, b: 1 x Cout.
inline Var conv1d_same(const Var& x, const Var& w, const Var& b, Index kernel) {
  const Index t = x.rows();
  const Index cin = x.cols();
  detail::check(w.rows() == kernel * cin, "conv1d_same: weight rows != kernel*Cin");
  detail::check(b.rows() == 1 && b.cols() == w.cols(), "conv1d_same: bias shape");
  const Index pad = kernel / 2;
  Matrix patches = Matrix::Zero(t, kernel * cin);
  for (Index k = 0; k < kernel; ++k) {
    const Index shift = k - pad;
    const Index lo = std::max<Index>(0, -shift);
    const Index hi = std::min<Index>(t, t - shift);
    if (hi > lo) patches.block(lo, k * cin, hi - lo, cin) = x.value().middleRows(lo + shift, hi - lo);
  }
  Matrix out = (patches * w.value()).rowwise() + b.value().row(0);
  return detail::make_op(
      std::move(out), {x, w, b}, [patches = std::move(patches), kernel, pad](Node& s) {
        const Matrix& W = s.inputs[1]->value;
        const Index t = s.grad.rows();
        const Index cin = s.inputs[0]->value.cols();
        if (detail::wants(s, 0)) {
          Matrix dp = s.grad * W.transpose();
          Matrix dx = Matrix::Zero(t, cin);
          for (Index k = 0; k < kernel; ++k) {
            const Index shift = k - pad;
            const Index lo = std::max<Index>(0, -shift);
            const Index hi = std::min<Index>(t, t - shift);
            if (hi > lo) dx.middleRows(lo + shift, hi - lo) += dp.block(lo, k * cin, hi - lo, cin);
          }
          detail::push(s, 0, dx);
        }
        if (detail::wants(s, 1)) detail::push(s, 1, patches.transpose() * s.grad);
        if (detail::wants(s, 2)) detail::push(s, 2, s.grad.colwise().sum());
      });
}

// ---------------------------------------------------------------------------
// Losses

/// Mean softmax cross-entropy over rows of `logits` (B x C). Per row the loss is
/// -max(log p_label, log floor); when the floor is active the row contributes
/// no gradient. Optional per-class weights give a weighted mean.
inline Var softmax_cross_entropy(const Var& logits, const std::vector<int>& labels,
                                 double prob_floor, const std::vector<double>& class_weights = {}) {
  const Index b = logits.rows();
  const Index c = logits.cols();
  if (static_cast<Index>(labels.size()) != b)
    throw Error(Errc::DimMismatch, "softmax_cross_entropy: label count != rows");
  Matrix y = softmax_rows_value(logits.value());
  const double log_floor = std::log(prob_floor);
  double total = 0.0;
  double wsum = 0.0;
  std::vector<char> floored(b, 0);
  std::vector<double> w(b, 1.0);
  for (Index i = 0; i < b; ++i) {
    const int l = labels[i];
    if (l < 0 || l >= c) throw Error(Errc::LabelOutOfRange, "label index out of range");
    if (!class_weights.empty()) w[i] = class_weights.at(l);
    const Eigen::RowVectorXd zi = logits.value().row(i);
    const double m = zi.maxCoeff();
    const double lse = m + std::log((zi.array() - m).exp().sum());
    double logp = zi(l) - lse;
    if (logp < log_floor) {
      logp = log_floor;
      floored[i] = 1;
    }
    total += -w[i] * logp;
    wsum += w[i];
  }
  Matrix out(1, 1);
  out(0, 0) = total / wsum;
  return detail::make_op(std::move(out), {logits},
                         [y = std::move(y), labels, floored = std::move(floored), w = std::move(w),
                          wsum](Node& s) {
                           Matrix g = Matrix::Zero(y.rows(), y.cols());
                           const double go = s.grad(0, 0);
                           for (Index i = 0; i < y.rows(); ++i) {
                             if (floored[i]) continue;
                             g.row(i) = y.row(i);
                             g(i, labels[i]) -= 1.0;
                             g.row(i) *= go * w[i] / wsum;
                           }
                           detail::push(s, 0, g);
                         });
}

/// InfoNCE negative log-likelihood over a B x B logit matrix whose diagonal
/// holds the positive pairs; returns the mean over rows. With
/// `include_positive == false` the denominator sums over off-diagonal entries only.
inline Var contrastive_nll(const Var& logits, bool include_positive) {
  const Index b = logits.rows();
  if (logits.cols() != b) throw Error(Errc::DimMismatch, "contrastive_nll: logits must be square");
  if (b < 2) throw Error(Errc::BatchTooSmall, "contrastive loss needs at least two pairs");
  const Matrix& S = logits.value();
  Matrix p = Matrix::Zero(b, b);  // softmax over each row's denominator set
  double total = 0.0;
  for (Index k = 0; k < b; ++k) {
    double m = -std::numeric_limits<double>::infinity();
    for (Index j = 0; j < b; ++j)
      if (include_positive || j != k) m = std::max(m, S(k, j));
    double z = 0.0;
    for (Index j = 0; j < b; ++j)
      if (include_positive || j != k) {
        p(k, j) = std::exp(S(k, j) - m);
        z += p(k, j);
      }
    p.row(k) /= z;
    total += -S(k, k) + m + std::log(z);
  }
  Matrix out(1, 1);
  out(0, 0) = total / static_cast<double>(b);
  return detail::make_op(std::move(out), {logits}, [p = std::move(p)](Node& s) {
    const Index b = p.rows();
    Matrix g = p;
    for (Index k = 0; k < b; ++k) g(k, k) -= 1.0;
    g *= s.grad(0, 0) / static_cast<double>(b);
    detail::push(s, 0, g);
  });
}

}  // namespace pmlf::ag
