#pragma once

// In-memory view of a manifest's features: per-sample, per-paradigm frame
// matrices for each modality, optionally standardized with train-split stats.

#include <Eigen/Dense>

#include <array>
#include <filesystem>
#include <map>
#include <set>
#include <string>
#include <vector>

#include "pmlf/core.hpp"
#include "pmlf/data.hpp"
#include "pmlf/feature_store.hpp"
#include "pmlf/features.hpp"

namespace pmlf {

using Matrix = Eigen::MatrixXd;

struct SampleTensors {
  std::string sample_id;
  DiagnosisLabel label = DiagnosisLabel::HC;
  /// [modality][paradigm] -> concatenation of that group's segments along time
  /// (empty matrix when the group has no segments).
  std::array<std::array<Matrix, 5>, 3> groups;

  const Matrix& group(Modality m, ParadigmId p) const { return groups[index_of(m)][index_of(p)]; }
};

namespace detail {
inline Matrix vstack(const std::vector<Matrix>& parts) {
  Eigen::Index rows = 0, cols = -1;
  for (const auto& p : parts) {
    if (p.size() == 0) continue;
    if (cols >= 0 && p.cols() != cols) throw Error(Errc::DimMismatch, "segments differ in feature width");
    cols = p.cols();
    rows += p.rows();
  }
  if (cols < 0) return {};
  Matrix out(rows, cols);
  Eigen::Index at = 0;
  for (const auto& p : parts) {
    if (p.size() == 0) continue;
    out.middleRows(at, p.rows()) = p;
    at += p.rows();
  }
  return out;
}
}  // namespace detail

class Dataset {
 public:
  Dataset() = default;

  /// Reads every segment referenced by `m`; feature_ref paths are relative to `root`.
  static Dataset load(const data::DatasetManifest& m, const std::filesystem::path& root) {
    Dataset ds;
    ds.manifest_ = m;
    for (const auto& s : m.samples) {
      SampleTensors t;
      t.sample_id = s.sample_id;
      t.label = s.label;
      for (auto mod : kAllModalities)
        for (auto p : kAllParadigms) {
          std::vector<Matrix> parts;
          for (const auto* g : s.select(p, mod)) parts.push_back(store::read_features(root / g->feature_ref));
          t.groups[index_of(mod)][index_of(p)] = detail::vstack(parts);
        }
      ds.index_[s.sample_id] = ds.samples_.size();
      ds.samples_.push_back(std::move(t));
    }
    return ds;
  }

  const data::DatasetManifest& manifest() const { return manifest_; }
  const std::vector<SampleTensors>& samples() const { return samples_; }
  const SampleTensors& sample(const std::string& id) const {
    auto it = index_.find(id);
    if (it == index_.end()) throw Error(Errc::NotFound, "sample " + id + " not in dataset");
    return samples_[it->second];
  }
  bool contains(const std::string& id) const { return index_.count(id) > 0; }

  /// Feature width of a modality (0 when no sample has that modality).
  int dim(Modality m) const {
    for (const auto& s : samples_)
      for (auto p : kAllParadigms)
        if (s.group(m, p).size()) return static_cast<int>(s.group(m, p).cols());
    return 0;
  }

  /// Per-modality statistics over all frames of the listed samples.
  std::map<Modality, featurizer::FeatureStats> compute_stats(const std::vector<std::string>& ids) const {
    std::map<Modality, featurizer::FeatureStats> out;
    for (auto mod : kAllModalities) {
      std::vector<const Matrix*> seqs;
      for (const auto& id : ids)
        for (auto p : kAllParadigms) {
          const auto& g = sample(id).group(mod, p);
          if (g.size()) seqs.push_back(&g);
        }
      if (!seqs.empty()) out[mod] = featurizer::compute_stats(seqs);
    }
    return out;
  }

  /// Copy with every group standardized by the matching modality stats.
  Dataset standardized(const std::map<Modality, featurizer::FeatureStats>& stats) const {
    Dataset out = *this;
    for (auto& s : out.samples_)
      for (auto mod : kAllModalities) {
        auto it = stats.find(mod);
        if (it == stats.end()) continue;
        for (auto p : kAllParadigms) {
          auto& g = s.groups[index_of(mod)][index_of(p)];
          if (g.size()) g = featurizer::standardize_features(g, it->second);
        }
      }
    return out;
  }

 private:
  data::DatasetManifest manifest_;
  std::vector<SampleTensors> samples_;
  std::map<std::string, std::size_t> index_;
};

/// Audio or text sequence of a sample: speech-paradigm groups in protocol order,
/// skipping dropped paradigms. Empty when nothing remains.
inline Matrix speech_sequence(const SampleTensors& s, Modality m, const std::set<ParadigmId>& dropped) {
  std::vector<Matrix> parts;
  for (auto p : kAllParadigms)
    if (!dropped.count(p)) parts.push_back(s.group(m, p));
  return detail::vstack(parts);
}

}  // namespace pmlf
