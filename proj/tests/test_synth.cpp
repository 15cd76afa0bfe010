#include <gtest/gtest.h>

#include <cmath>

#include "pmlf/data.hpp"
#include "pmlf/feature_store.hpp"
#include "pmlf/synth.hpp"
#include "test_util.hpp"

using namespace pmlf;
using namespace pmlf::synth;
using pmlf::testing::scratch_dir;
using pmlf::testing::slurp;
using pmlf::testing::tiny_synth;

namespace fs = std::filesystem;

namespace {

// Mean over a class of the first `dims` columns of one (paradigm, modality) group.
double group_mean(const data::DatasetManifest& m, const fs::path& root, DiagnosisLabel l, ParadigmId p, Modality mod,
                  int dims, long* n_out = nullptr) {
  double s = 0;
  long n = 0;
  for (const auto& smp : m.samples) {
    if (smp.label != l) continue;
    for (const auto* g : smp.select(p, mod)) {
      const auto x = store::read_features(root / g->feature_ref);
      s += x.leftCols(dims).sum();
      n += x.rows() * dims;
    }
  }
  if (n_out) *n_out = n;
  return s / static_cast<double>(n);
}

}  // namespace

TEST(Synth, OutputConformsToSchema) {
  auto dir = scratch_dir("synth_schema");
  const auto m = generate_synthetic_dataset(tiny_synth(1, 3), dir);
  EXPECT_EQ(m.samples.size(), 12u);
  EXPECT_TRUE(data::validate_manifest(m).empty());
  EXPECT_EQ(data::load_manifest(dir / "manifest.jsonl"), m);
}

TEST(Synth, SameSeedIsBitIdentical) {
  auto a = scratch_dir("synth_a"), b = scratch_dir("synth_b"), c = scratch_dir("synth_c");
  const auto ma = generate_synthetic_dataset(tiny_synth(5, 2), a);
  generate_synthetic_dataset(tiny_synth(5, 2), b);
  generate_synthetic_dataset(tiny_synth(6, 2), c);
  EXPECT_EQ(slurp(a / "manifest.jsonl"), slurp(b / "manifest.jsonl"));
  bool any_diff = false;
  for (const auto& s : ma.samples)
    for (const auto& g : s.segments) {
      EXPECT_EQ(slurp(a / g.feature_ref), slurp(b / g.feature_ref));
      any_diff |= slurp(a / g.feature_ref) != slurp(c / g.feature_ref);
    }
  EXPECT_TRUE(any_diff);
}

TEST(Synth, InjectedDeltaShowsInClassMeans) {
  auto dir = scratch_dir("synth_delta");
  SynthConfig c = tiny_synth(2, 20, 0.0);
  c.signals = {{DiagnosisLabel::MD, ParadigmId::READING, Modality::VIDEO, 2.0, 3}};
  const auto m = generate_synthetic_dataset(c, dir);
  long n = 0;
  const double md = group_mean(m, dir, DiagnosisLabel::MD, ParadigmId::READING, Modality::VIDEO, 3, &n);
  const double hc = group_mean(m, dir, DiagnosisLabel::HC, ParadigmId::READING, Modality::VIDEO, 3);
  const double se = std::sqrt(2.0 / static_cast<double>(n));
  EXPECT_NEAR(md - hc, 2.0, 3 * se);
  // Unaffected columns and other paradigms carry nothing.
  const double md_rest = group_mean(m, dir, DiagnosisLabel::MD, ParadigmId::MS1, Modality::VIDEO, 8);
  const double hc_rest = group_mean(m, dir, DiagnosisLabel::HC, ParadigmId::MS1, Modality::VIDEO, 8);
  EXPECT_LT(std::abs(md_rest - hc_rest), 0.2);
}

TEST(Synth, ConfigValidation) {
  auto c = tiny_synth();
  c.noise_sigma = 0;
  EXPECT_THROW(c.validate(), Error);
  c = tiny_synth();
  c.signals = {{DiagnosisLabel::MD, ParadigmId::MS1, Modality::AUDIO, 1.0, 1}};
  EXPECT_THROW(c.validate(), Error);
  c = tiny_synth();
  c.signals = {{DiagnosisLabel::MD, ParadigmId::MS1, Modality::VIDEO, 1.0, 99}};
  EXPECT_THROW(c.validate(), Error);
  c = tiny_synth();
  c.n_per_class = {{DiagnosisLabel::MD, 0}};
  EXPECT_THROW(c.validate(), Error);
  json j = strong_signal_config(3);
  EXPECT_EQ(json(j.get<SynthConfig>()), j);
}

TEST(BayesOracle, ZeroSignalIsChance) {
  auto c = tiny_synth(0, 10, 0.0);
  c.signals.clear();
  const double acc = bayes_oracle_accuracy(c, 20000);
  EXPECT_NEAR(acc, 0.25, 3 * std::sqrt(0.25 * 0.75 / 20000));
}

TEST(BayesOracle, TwoGaussiansMatchClosedForm) {
  SynthConfig c;
  c.n_per_class = {{DiagnosisLabel::MD, 1}, {DiagnosisLabel::HC, 1}};
  c.frames_per_segment = 1;
  c.paradigm_video_counts = {{ParadigmId::MS1, 1}, {ParadigmId::US, 1}, {ParadigmId::READING, 1},
                             {ParadigmId::MS2, 1}, {ParadigmId::INTERVIEW, 1}};
  c.signals = {{DiagnosisLabel::MD, ParadigmId::MS1, Modality::VIDEO, 2.0, 1}};
  const int n = 200000;
  const double expect = 0.5 * std::erfc(-1.0 / std::sqrt(2.0));  // Phi(1)
  EXPECT_NEAR(expect, 0.8413, 1e-4);
  EXPECT_NEAR(bayes_oracle_accuracy(c, n), expect, 3 * std::sqrt(expect * (1 - expect) / n));
}

TEST(BayesOracle, StrongPresetIsSeparable) {
  EXPECT_GE(bayes_oracle_accuracy(strong_signal_config(), 5000), 0.99);
  EXPECT_THROW(bayes_oracle_accuracy(strong_signal_config(), 999), Error);
}

TEST(Presets, CohortProfileAndNullConfig) {
  const auto full = cohort_profile(1.0);
  EXPECT_EQ(full.at(DiagnosisLabel::MD), 67);
  EXPECT_EQ(full.at(DiagnosisLabel::HC), 700);
  const auto small = cohort_profile(0.2);
  EXPECT_EQ(small.at(DiagnosisLabel::MD), 13);
  EXPECT_EQ(small.at(DiagnosisLabel::ANX), 22);
  EXPECT_EQ(small.at(DiagnosisLabel::SC), 10);
  EXPECT_EQ(small.at(DiagnosisLabel::HC), 140);
  EXPECT_EQ(cohort_profile(0.001).at(DiagnosisLabel::SC), 1);
  const auto n = null_signal_config(4);
  EXPECT_TRUE(n.signals.empty());
  EXPECT_EQ(n.total_samples(), 185);
  EXPECT_EQ(n.seed, 4u);
}
