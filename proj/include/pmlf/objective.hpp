#pragma once

// Similarities and training objectives: cosine similarity, the cross-modality
// contrastive loss, cross-entropy on the class simplex, and the Stage-2 sum.

#include <algorithm>
#include <cmath>
#include <set>
#include <span>
#include <vector>

#include "pmlf/autograd.hpp"
#include "pmlf/core.hpp"

namespace pmlf {

struct LossConfig {
  double temperature = 0.2;
  bool symmetric = true;
  /// Standard InfoNCE keeps the positive pair in the denominator; `false`
  /// sums over the negatives only.
  bool positive_in_denominator = true;
  double prob_floor = 1e-12;

  void validate() const {
    if (!(temperature > 0.0)) throw Error(Errc::InvalidConfig, "temperature must be > 0");
    if (!(prob_floor > 0.0 && prob_floor <= 1e-6))
      throw Error(Errc::InvalidConfig, "prob_floor must lie in (0, 1e-6]");
  }
};

enum class Module : std::uint8_t { PT, CA, CL };

inline std::string to_string(Module m) {
  switch (m) {
    case Module::PT: return "PT";
    case Module::CA: return "CA";
    case Module::CL: return "CL";
  }
  return "?";
}

inline Module parse_module(std::string_view s) {
  for (auto m : {Module::PT, Module::CA, Module::CL})
    if (to_string(m) == s) return m;
  throw Error(Errc::ParseError, "unknown module '" + std::string(s) + "'");
}

struct LossBreakdown {
  double l_cls = 0.0;
  double l_ccl_va = 0.0;
  double l_ccl_ta = 0.0;
  double l_ccl_stage1 = 0.0;
  double total = 0.0;
};

inline double cosine_similarity(std::span<const double> a, std::span<const double> b) {
  if (a.size() != b.size()) throw Error(Errc::DimMismatch, "cosine_similarity: lengths differ");
  double dot = 0.0, na = 0.0, nb = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    dot += a[i] * b[i];
    na += a[i] * a[i];
    nb += b[i] * b[i];
  }
  na = std::sqrt(na);
  nb = std::sqrt(nb);
  if (!(na > 1e-12) || !(nb > 1e-12))
    throw Error(Errc::ZeroNorm, "cosine similarity of a zero-norm vector");
  return std::clamp(dot / (na * nb), -1.0, 1.0);
}

/// Contrastive loss on the graph. Rows of `anchors` pair with the same rows of
/// `positives`; every other positive row is a negative. Inputs need not be
/// normalized; cosine similarity is taken after row-wise L2 normalization.
inline ag::Var ccl_loss(const ag::Var& anchors, const ag::Var& positives, const LossConfig& cfg) {
  if (anchors.rows() != positives.rows())
    throw Error(Errc::DimMismatch, "ccl_loss: anchor and positive counts differ");
  if (anchors.cols() != positives.cols())
    throw Error(Errc::DimMismatch, "ccl_loss: embedding widths differ");
  if (anchors.rows() < 2) throw Error(Errc::BatchTooSmall, "ccl_loss needs a batch of at least 2");
  auto a = ag::l2_normalize_rows(anchors);
  auto p = ag::l2_normalize_rows(positives);
  auto logits = ag::scale(ag::matmul_nt(a, p), 1.0 / cfg.temperature);
  auto forward = ag::contrastive_nll(logits, cfg.positive_in_denominator);
  if (!cfg.symmetric) return forward;
  auto reverse = ag::contrastive_nll(ag::transpose(logits), cfg.positive_in_denominator);
  return ag::scale(ag::sum_scalars({forward, reverse}), 0.5);
}

struct CclResult {
  double loss = 0.0;
  ag::Matrix grad_anchors;
  ag::Matrix grad_positives;
};

/// Value and exact gradients of the contrastive loss with respect to the raw
/// (pre-normalization) anchor and positive rows.
inline CclResult ccl_loss_with_grad(const ag::Matrix& anchors, const ag::Matrix& positives,
                                    const LossConfig& cfg) {
  auto a = ag::leaf(anchors);
  auto p = ag::leaf(positives);
  auto l = ccl_loss(a, p, cfg);
  ag::backward(l);
  return {l.scalar(), a.grad(), p.grad()};
}

struct CrossEntropyResult {
  double loss = 0.0;
  std::vector<double> grad;  // d loss / d probs
};

/// -log(max(probs[label], floor)) for a probability vector.
inline CrossEntropyResult cross_entropy(std::span<const double> probs, int label,
                                        double prob_floor = 1e-12) {
  if (label < 0 || static_cast<std::size_t>(label) >= probs.size())
    throw Error(Errc::LabelOutOfRange, "label " + std::to_string(label) + " outside class set");
  double sum = 0.0;
  for (double v : probs) {
    if (!(v >= 0.0)) throw Error(Errc::InvalidSimplex, "negative or NaN probability");
    sum += v;
  }
  if (std::abs(sum - 1.0) > 1e-6) throw Error(Errc::InvalidSimplex, "probabilities do not sum to 1");
  CrossEntropyResult r;
  r.grad.assign(probs.size(), 0.0);
  const double p = probs[label];
  if (p > prob_floor) {
    r.loss = -std::log(p);
    r.grad[label] = -1.0 / p;
  } else {
    r.loss = -std::log(prob_floor);
  }
  return r;
}

/// Equal-weight Stage-2 objective. Disabling CL zeroes both contrastive terms.
inline LossBreakdown stage2_total(double l_cls, double l_va, double l_ta,
                                  const std::set<Module>& module_mask) {
  if (!std::isfinite(l_cls) || !std::isfinite(l_va) || !std::isfinite(l_ta))
    throw Error(Errc::NonFinite, "loss component is not finite");
  LossBreakdown b;
  b.l_cls = l_cls;
  if (module_mask.count(Module::CL)) {
    b.total = l_cls;
    return b;
  }
  b.l_ccl_va = l_va;
  b.l_ccl_ta = l_ta;
  b.total = l_cls + l_va + l_ta;
  return b;
}

}  // namespace pmlf
