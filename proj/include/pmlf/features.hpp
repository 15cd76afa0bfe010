#pragma once

// Per-dimension standardization with statistics from the training split.

#include <Eigen/Dense>

#include <algorithm>
#include <cmath>
#include <vector>

#include "pmlf/core.hpp"

namespace pmlf::featurizer {

struct FeatureStats {
  Eigen::RowVectorXd mean;
  Eigen::RowVectorXd std;

  Eigen::Index dim() const { return mean.size(); }
};

inline constexpr double kStdGuard = 1e-8;

/// Population moments over all rows of all sequences.
inline FeatureStats compute_stats(const std::vector<const Eigen::MatrixXd*>& seqs) {
  if (seqs.empty()) throw Error(Errc::EmptyInput, "no sequences to compute statistics from");
  const Eigen::Index d = seqs.front()->cols();
  Eigen::RowVectorXd sum = Eigen::RowVectorXd::Zero(d);
  double n = 0;
  for (const auto* s : seqs) {
    if (s->cols() != d) throw Error(Errc::DimMismatch, "sequences differ in width");
    sum += s->colwise().sum();
    n += static_cast<double>(s->rows());
  }
  if (n == 0) throw Error(Errc::EmptyInput, "sequences have no frames");
  FeatureStats st;
  st.mean = sum / n;
  Eigen::RowVectorXd sq = Eigen::RowVectorXd::Zero(d);
  for (const auto* s : seqs) sq += (s->rowwise() - st.mean).array().square().matrix().colwise().sum();
  st.std = (sq / n).array().sqrt().matrix();
  return st;
}

/// (x - mean) / max(std, 1e-8) per dimension.
inline Eigen::MatrixXd standardize_features(const Eigen::MatrixXd& seq, const FeatureStats& st) {
  if (seq.cols() != st.dim()) throw Error(Errc::DimMismatch, "sequence width does not match statistics");
  const Eigen::RowVectorXd denom = st.std.cwiseMax(kStdGuard);
  return (seq.rowwise() - st.mean).array().rowwise() / denom.array();
}

inline Eigen::MatrixXd destandardize_features(const Eigen::MatrixXd& z, const FeatureStats& st) {
  if (z.cols() != st.dim()) throw Error(Errc::DimMismatch, "sequence width does not match statistics");
  const Eigen::RowVectorXd denom = st.std.cwiseMax(kStdGuard);
  return (z.array().rowwise() * denom.array()).matrix().rowwise() + st.mean;
}

}  // namespace pmlf::featurizer
