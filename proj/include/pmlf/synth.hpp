#pragma once

// Synthetic MMH-schema datasets with a known Gaussian mean-shift signal model,
// plus the Bayes-optimal accuracy of that model for bounding trained accuracy.
//
// Every feature frame is i.i.d. N(0, sigma^2 I). A SignalSpec adds
// `effect_delta` to the first `affected_dims` columns of every frame of the
// (paradigm, modality) segments of samples carrying its label.

#include <Eigen/Dense>

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <map>
#include <set>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "pmlf/core.hpp"
#include "pmlf/data.hpp"
#include "pmlf/feature_store.hpp"

namespace pmlf::synth {

using json = nlohmann::json;

struct SignalSpec {
  DiagnosisLabel label = DiagnosisLabel::MD;
  ParadigmId paradigm = ParadigmId::MS1;
  Modality modality = Modality::VIDEO;
  double effect_delta = 0.0;
  int affected_dims = 1;
};

struct SynthConfig {
  std::map<DiagnosisLabel, int> n_per_class = {
      {DiagnosisLabel::MD, 40}, {DiagnosisLabel::ANX, 40}, {DiagnosisLabel::SC, 40}, {DiagnosisLabel::HC, 40}};
  std::map<Modality, int> dims = {{Modality::VIDEO, 32}, {Modality::AUDIO, 13}, {Modality::TEXT, 32}};
  int frames_per_segment = 20;
  double noise_sigma = 1.0;
  std::vector<SignalSpec> signals;
  std::uint64_t seed = 0;
  std::map<ParadigmId, int> paradigm_video_counts = data::default_paradigm_video_counts();

  int total_samples() const {
    int n = 0;
    for (const auto& [l, c] : n_per_class) n += c;
    return n;
  }

  void validate() const {
    for (const auto& [l, c] : n_per_class)
      if (c < 0) throw Error(Errc::InvalidConfig, "negative sample count for " + to_string(l));
    if (total_samples() < 1) throw Error(Errc::InvalidConfig, "config generates no samples");
    for (auto m : kAllModalities)
      if (!dims.count(m) || dims.at(m) < 1) throw Error(Errc::InvalidConfig, "dims must be >= 1 for " + to_string(m));
    if (frames_per_segment < 1) throw Error(Errc::InvalidConfig, "frames_per_segment must be >= 1");
    if (!(noise_sigma > 0.0)) throw Error(Errc::InvalidConfig, "noise_sigma must be > 0");
    for (const auto& s : signals) {
      if (!(s.effect_delta >= 0.0)) throw Error(Errc::InvalidConfig, "effect_delta must be >= 0");
      if (s.affected_dims < 0 || s.affected_dims > dims.at(s.modality))
        throw Error(Errc::InvalidConfig, "affected_dims exceeds the modality's dimensionality");
      if (s.modality != Modality::VIDEO && !has_speech(s.paradigm))
        throw Error(Errc::InvalidConfig, to_string(s.modality) + " signal under " + to_string(s.paradigm) +
                                             ", which records no speech");
    }
  }
};

inline void to_json(json& j, const SignalSpec& s) {
  j = {{"label", to_string(s.label)},
       {"paradigm", to_string(s.paradigm)},
       {"modality", to_string(s.modality)},
       {"effect_delta", s.effect_delta},
       {"affected_dims", s.affected_dims}};
}

inline void from_json(const json& j, SignalSpec& s) {
  s.label = parse_label(j.at("label").get<std::string>());
  s.paradigm = parse_paradigm(j.at("paradigm").get<std::string>());
  s.modality = parse_modality(j.value("modality", std::string("VIDEO")));
  s.effect_delta = j.value("effect_delta", 0.0);
  s.affected_dims = j.value("affected_dims", 1);
}

inline void to_json(json& j, const SynthConfig& c) {
  json n = json::object(), d = json::object(), pv = json::object();
  for (const auto& [l, v] : c.n_per_class) n[to_string(l)] = v;
  for (const auto& [m, v] : c.dims) d[to_string(m)] = v;
  for (const auto& [p, v] : c.paradigm_video_counts) pv[to_string(p)] = v;
  j = {{"n_per_class", n},          {"dims", d},       {"frames_per_segment", c.frames_per_segment},
       {"noise_sigma", c.noise_sigma}, {"signals", c.signals}, {"seed", c.seed},
       {"paradigm_video_counts", pv}};
}

inline void from_json(const json& j, SynthConfig& c) {
  if (j.contains("n_per_class")) {
    c.n_per_class.clear();
    for (const auto& [k, v] : j.at("n_per_class").items()) c.n_per_class[parse_label(k)] = v.get<int>();
  }
  if (j.contains("dims"))
    for (const auto& [k, v] : j.at("dims").items()) c.dims[parse_modality(k)] = v.get<int>();
  c.frames_per_segment = j.value("frames_per_segment", c.frames_per_segment);
  c.noise_sigma = j.value("noise_sigma", c.noise_sigma);
  if (j.contains("signals")) c.signals = j.at("signals").get<std::vector<SignalSpec>>();
  c.seed = j.value("seed", c.seed);
  if (j.contains("paradigm_video_counts")) {
    c.paradigm_video_counts.clear();
    for (const auto& [k, v] : j.at("paradigm_video_counts").items())
      c.paradigm_video_counts[parse_paradigm(k)] = v.get<int>();
  }
}

/// Number of segments of one (paradigm, modality) per sample.
inline int segment_count(const SynthConfig& cfg, ParadigmId p, Modality m) {
  if (m == Modality::VIDEO) {
    auto it = cfg.paradigm_video_counts.find(p);
    return it == cfg.paradigm_video_counts.end() ? 0 : it->second;
  }
  const auto speech = data::default_speech_counts();
  auto it = speech.find(p);
  return it == speech.end() ? 0 : it->second;
}

/// Per-(paradigm, modality) mean offset for a label: a vector of length dims[m].
inline Eigen::RowVectorXd class_offset(const SynthConfig& cfg, DiagnosisLabel l, ParadigmId p, Modality m) {
  Eigen::RowVectorXd off = Eigen::RowVectorXd::Zero(cfg.dims.at(m));
  for (const auto& s : cfg.signals)
    if (s.label == l && s.paradigm == p && s.modality == m)
      off.head(s.affected_dims).array() += s.effect_delta;
  return off;
}

inline std::string segment_id(ParadigmId p, Modality m, int k) {
  return std::string(1, to_string(m)[0]) + "-" + to_string(p) + "-" + std::to_string(k);
}

inline std::string sample_id(int index) {
  char buf[16];
  std::snprintf(buf, sizeof buf, "S%04d", index);
  return buf;
}

/// Writes `manifest.jsonl` and `features/<sample>/<segment>.bin` under `out_dir`.
inline data::DatasetManifest generate_synthetic_dataset(const SynthConfig& cfg, const std::filesystem::path& out_dir) {
  cfg.validate();
  namespace fs = std::filesystem;
  std::error_code ec;
  fs::create_directories(out_dir, ec);
  if (ec) throw Error(Errc::IoError, "cannot create " + out_dir.string() + ": " + ec.message());

  data::DatasetManifest m;
  m.paradigm_video_counts = cfg.paradigm_video_counts;
  m.expected_video_per_sample = 0;
  for (const auto& [p, n] : cfg.paradigm_video_counts) m.expected_video_per_sample += n;
  m.expected_audiotext_per_sample = 0;
  for (const auto& [p, n] : data::default_speech_counts()) m.expected_audiotext_per_sample += n;

  const double frame_rate_hz = 10.0;
  int index = 0;
  for (auto label : kAllLabels) {
    auto it = cfg.n_per_class.find(label);
    const int n = it == cfg.n_per_class.end() ? 0 : it->second;
    for (int i = 0; i < n; ++i, ++index) {
      data::SampleRecord s;
      s.sample_id = sample_id(index);
      s.label = label;
      Rng rng(derive_seed(cfg.seed, static_cast<std::uint64_t>(index)));
      for (auto mod : kAllModalities) {
        for (auto p : kAllParadigms) {
          const int count = segment_count(cfg, p, mod);
          const Eigen::RowVectorXd off = class_offset(cfg, label, p, mod);
          for (int k = 0; k < count; ++k) {
            data::SegmentRecord g;
            g.segment_id = segment_id(p, mod, k);
            g.sample_id = s.sample_id;
            g.paradigm = p;
            g.modality = mod;
            g.order_index = k;
            g.duration_s = cfg.frames_per_segment / frame_rate_hz;
            g.feature_ref = "features/" + s.sample_id + "/" + g.segment_id + ".bin";
            Eigen::MatrixXd x(cfg.frames_per_segment, cfg.dims.at(mod));
            for (Eigen::Index r = 0; r < x.rows(); ++r)
              for (Eigen::Index c = 0; c < x.cols(); ++c) x(r, c) = cfg.noise_sigma * rng.normal() + off(c);
            store::write_features(out_dir / g.feature_ref, x);
            s.segments.push_back(std::move(g));
          }
        }
      }
      m.samples.push_back(std::move(s));
    }
  }
  data::save_manifest(m, out_dir / "manifest.jsonl");
  return m;
}

// ---------------------------------------------------------------------------
// Bayes oracle

/// Monte-Carlo accuracy of the Bayes-optimal classifier under `cfg`. Frames are
/// i.i.d. Gaussian around class means, so the per-(paradigm, modality)
/// frame-mean of the shifted columns is a sufficient statistic: its law is
/// N(mu_c, sigma^2 / N) with N the frames in that group.
inline double bayes_oracle_accuracy(const SynthConfig& cfg, int n_mc, std::uint64_t seed = 12345) {
  cfg.validate();
  if (n_mc < 1000) throw Error(Errc::InvalidConfig, "n_mc must be >= 1000");

  std::vector<DiagnosisLabel> classes;
  std::vector<double> log_prior;
  std::vector<double> cum;
  const double total = cfg.total_samples();
  double acc = 0.0;
  for (auto l : kAllLabels) {
    auto it = cfg.n_per_class.find(l);
    if (it == cfg.n_per_class.end() || it->second == 0) continue;
    classes.push_back(l);
    log_prior.push_back(std::log(it->second / total));
    acc += it->second / total;
    cum.push_back(acc);
  }

  struct Group {
    double precision;                   // N / sigma^2
    std::vector<Eigen::RowVectorXd> mu;  // per class, over the informative columns
  };
  std::vector<Group> groups;
  for (auto mod : kAllModalities)
    for (auto p : kAllParadigms) {
      int width = 0;
      for (const auto& s : cfg.signals)
        if (s.paradigm == p && s.modality == mod) width = std::max(width, s.affected_dims);
      const int count = segment_count(cfg, p, mod);
      if (width == 0 || count == 0) continue;
      Group g;
      g.precision = count * cfg.frames_per_segment / (cfg.noise_sigma * cfg.noise_sigma);
      for (auto l : classes) g.mu.push_back(class_offset(cfg, l, p, mod).head(width));
      groups.push_back(std::move(g));
    }

  Rng rng(seed);
  long correct = 0;
  std::vector<double> score(classes.size());
  std::vector<Eigen::RowVectorXd> stat(groups.size());
  for (int t = 0; t < n_mc; ++t) {
    const double u = rng.uniform();
    std::size_t truth = 0;
    while (truth + 1 < cum.size() && u >= cum[truth]) ++truth;
    for (std::size_t g = 0; g < groups.size(); ++g) {
      const auto& mu = groups[g].mu[truth];
      stat[g].resize(mu.size());
      const double sd = 1.0 / std::sqrt(groups[g].precision);
      for (Eigen::Index d = 0; d < mu.size(); ++d) stat[g](d) = mu(d) + sd * rng.normal();
    }
    std::size_t best = 0;
    for (std::size_t c = 0; c < classes.size(); ++c) {
      double s = log_prior[c];
      for (std::size_t g = 0; g < groups.size(); ++g)
        s -= 0.5 * groups[g].precision * (stat[g] - groups[g].mu[c]).squaredNorm();
      score[c] = s;
      if (s > score[best]) best = c;
    }
    correct += best == truth;
  }
  return static_cast<double>(correct) / n_mc;
}

// ---------------------------------------------------------------------------
// Presets used by the acceptance suite and shipped configs

/// 40 samples per class; each non-HC class carries a delta in its own paradigm
/// across all modalities that paradigm records.
inline SynthConfig strong_signal_config(std::uint64_t seed = 0, double delta = 3.0) {
  SynthConfig c;
  c.seed = seed;
  const std::vector<std::pair<DiagnosisLabel, ParadigmId>> placement = {
      {DiagnosisLabel::MD, ParadigmId::READING}, {DiagnosisLabel::ANX, ParadigmId::MS1}, {DiagnosisLabel::SC, ParadigmId::MS2}};
  for (const auto& [l, p] : placement) {
    c.signals.push_back({l, p, Modality::VIDEO, delta, 8});
    if (has_speech(p)) {
      c.signals.push_back({l, p, Modality::AUDIO, delta, 4});
      c.signals.push_back({l, p, Modality::TEXT, delta, 8});
    }
  }
  return c;
}

/// Class counts of the clinical cohort (MD 67, ANX 112, SC 49, HC 700) scaled
/// by `fraction` and rounded, at least one sample per class.
inline std::map<DiagnosisLabel, int> cohort_profile(double fraction) {
  const std::map<DiagnosisLabel, int> full = {
      {DiagnosisLabel::MD, 67}, {DiagnosisLabel::ANX, 112}, {DiagnosisLabel::SC, 49}, {DiagnosisLabel::HC, 700}};
  std::map<DiagnosisLabel, int> out;
  for (const auto& [l, n] : full) out[l] = std::max(1, static_cast<int>(std::lround(n * fraction)));
  return out;
}

/// No class-dependent signal at all. By default the class counts follow the
/// cohort's imbalance at 20% scale (13/22/10/140), so the no-leakage reference
/// is a well-defined majority rate.
inline SynthConfig null_signal_config(std::uint64_t seed = 0, std::map<DiagnosisLabel, int> counts = cohort_profile(0.2)) {
  SynthConfig c;
  c.seed = seed;
  c.n_per_class = std::move(counts);
  return c;
}

}  // namespace pmlf::synth
