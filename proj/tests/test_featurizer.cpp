#include <gtest/gtest.h>

#include <cmath>

#include "pmlf/describe.hpp"
#include "pmlf/feature_store.hpp"
#include "pmlf/features.hpp"
#include "pmlf/mfcc.hpp"
#include "test_util.hpp"

using namespace pmlf;
using namespace pmlf::featurizer;
using pmlf::testing::random_matrix;
using pmlf::testing::scratch_dir;

namespace {

Errc code_of(const std::function<void()>& f) {
  try {
    f();
  } catch (const Error& e) {
    return e.code();
  }
  ADD_FAILURE() << "expected an exception";
  return Errc::NotFound;
}

std::vector<double> tone(std::size_t n, std::uint64_t seed) {
  Rng rng(seed);
  std::vector<double> w(n);
  for (std::size_t i = 0; i < n; ++i) w[i] = std::sin(0.03 * static_cast<double>(i)) + 0.1 * rng.normal();
  return w;
}

}  // namespace

// MFCC ------------------------------------------------------------------------

TEST(Mfcc, OneSecondGives98By13) {
  const auto out = compute_mfcc(tone(16000, 1), MfccConfig{});
  EXPECT_EQ(out.frames.rows(), 98);
  EXPECT_EQ(out.frames.cols(), 13);
  EXPECT_TRUE(out.frames.allFinite());
}

TEST(Mfcc, SilenceGivesConstantFloorFrames) {
  std::vector<double> silence(8000, 0.0);
  const auto out = compute_mfcc(silence, MfccConfig{});
  for (Eigen::Index t = 1; t < out.frames.rows(); ++t) EXPECT_EQ(out.frames.row(t), out.frames.row(0));
  // Every log energy is the floor, so only c0 is nonzero under an orthonormal DCT.
  EXPECT_NEAR(out.frames(0, 0), std::log(1e-10) * std::sqrt(26.0), 1e-9);
  for (Eigen::Index k = 1; k < 13; ++k) EXPECT_NEAR(out.frames(0, k), 0.0, 1e-9);
}

TEST(Mfcc, ShiftByOneHopShiftsFrames) {
  const auto w = tone(6000, 2);
  std::vector<double> shifted(w.begin() + 160, w.end());
  const auto a = compute_mfcc(w, MfccConfig{});
  const auto b = compute_mfcc(shifted, MfccConfig{});
  // Pre-emphasis reaches one sample back, so frame 0 of the shifted signal differs; compare the interior.
  for (Eigen::Index t = 1; t + 1 < b.frames.rows(); ++t)
    EXPECT_LT((a.frames.row(t + 1) - b.frames.row(t)).cwiseAbs().maxCoeff(), 1e-5) << t;
}

TEST(Mfcc, ErrorsAndConfig) {
  EXPECT_EQ(code_of([] { compute_mfcc(std::vector<double>(399, 0.1), MfccConfig{}); }), Errc::TooShort);
  MfccConfig bad;
  bad.sample_rate_hz = 0;
  EXPECT_EQ(code_of([&] { compute_mfcc(std::vector<double>(1000, 0.1), bad); }), Errc::InvalidConfig);
  bad = {};
  bad.n_coeffs = 40;
  EXPECT_EQ(code_of([&] { bad.validate(); }), Errc::InvalidConfig);
}

TEST(Mfcc, MelScaleRoundTripAndFilterbankShape) {
  for (double hz : {0.0, 300.0, 4000.0}) EXPECT_NEAR(mel_to_hz(hz_to_mel(hz)), hz, 1e-9);
  const auto fb = mel_filterbank(26, 512, 16000);
  EXPECT_EQ(fb.rows(), 26);
  EXPECT_EQ(fb.cols(), 257);
  EXPECT_GE(fb.minCoeff(), 0.0);
  EXPECT_LE(fb.maxCoeff(), 1.0 + 1e-12);
}

// Standardization ---------------------------------------------------------------

TEST(Standardize, TrainingCorpusHasZeroMeanUnitStd) {
  Eigen::MatrixXd a = random_matrix(30, 4, 3, 5.0).array() + 2.0;
  Eigen::MatrixXd b = random_matrix(20, 4, 4, 0.5);
  const auto st = compute_stats({&a, &b});
  Eigen::MatrixXd all(50, 4);
  all << standardize_features(a, st), standardize_features(b, st);
  EXPECT_LT(all.colwise().mean().cwiseAbs().maxCoeff(), 1e-5);
  const Eigen::RowVectorXd sd = ((all.rowwise() - all.colwise().mean()).array().square().colwise().sum() / 50).sqrt();
  EXPECT_LT((sd.array() - 1.0).abs().maxCoeff(), 1e-5);
}

TEST(Standardize, MeanMapsToZeroAndConstantDimsToZero) {
  Eigen::MatrixXd x = random_matrix(10, 3, 5);
  x.col(1).setConstant(7.0);
  const auto st = compute_stats({&x});
  Eigen::MatrixXd at_mean = st.mean.replicate(4, 1);
  EXPECT_LT(standardize_features(at_mean, st).cwiseAbs().maxCoeff(), 1e-12);
  EXPECT_LT(standardize_features(x, st).col(1).cwiseAbs().maxCoeff(), 1e-12);
}

TEST(Standardize, InverseRecoversInput) {
  Eigen::MatrixXd x = random_matrix(12, 5, 6, 3.0);
  const auto st = compute_stats({&x});
  EXPECT_LT((destandardize_features(standardize_features(x, st), st) - x).cwiseAbs().maxCoeff(), 1e-6);
}

TEST(Standardize, Errors) {
  Eigen::MatrixXd x = random_matrix(3, 2, 7), y = random_matrix(3, 3, 8);
  const auto st = compute_stats({&x});
  EXPECT_EQ(code_of([&] { standardize_features(y, st); }), Errc::DimMismatch);
  EXPECT_EQ(code_of([&] { compute_stats({&x, &y}); }), Errc::DimMismatch);
  EXPECT_EQ(code_of([] { compute_stats({}); }), Errc::EmptyInput);
}

// Feature store -------------------------------------------------------------------

TEST(FeatureStore, RoundTripIsFloat32Exact) {
  auto dir = scratch_dir("store");
  Eigen::MatrixXd m = random_matrix(5, 3, 9);
  store::write_features(dir / "a" / "x.bin", m);
  const auto back = store::read_features(dir / "a" / "x.bin");
  ASSERT_EQ(back.rows(), 5);
  ASSERT_EQ(back.cols(), 3);
  EXPECT_LT((back - m).cwiseAbs().maxCoeff(), 1e-6);
  EXPECT_EQ(store::decode(store::encode(back)), back);
  const auto blob = store::encode(m);
  EXPECT_EQ(blob.substr(0, 4), "PMLF");
  EXPECT_EQ(blob.size(), 16u + 15u * 4u);
}

TEST(FeatureStore, Errors) {
  auto dir = scratch_dir("store_err");
  EXPECT_EQ(code_of([&] { store::read_features(dir / "none.bin"); }), Errc::NotFound);
  EXPECT_EQ(code_of([] { store::decode("XXXX000000000000"); }), Errc::ParseError);
  auto blob = store::encode(Eigen::MatrixXd::Ones(2, 2));
  blob.pop_back();
  EXPECT_EQ(code_of([&] { store::decode(blob); }), Errc::ParseError);
}

// Descriptions ------------------------------------------------------------------

TEST(Describe, InterviewPromptFillsSlots) {
  const SummaryFields s{{"affect_summary", "blunted gaze activity"}};
  const auto d = render_description(default_prompt(ParadigmId::INTERVIEW), s, "S0001");
  EXPECT_NE(d.text.find("interview"), std::string::npos);
  EXPECT_NE(d.text.find("blunted gaze activity"), std::string::npos);
  EXPECT_EQ(d.sample_id, "S0001");
  EXPECT_EQ(d, render_description(default_prompt(ParadigmId::INTERVIEW), s, "S0001"));
}

TEST(Describe, MissingSlotAndUnknownParadigm) {
  EXPECT_EQ(code_of([] { render_description(default_prompt(ParadigmId::MS1), {}); }), Errc::MissingSlot);
  ParadigmPrompt bad{static_cast<ParadigmId>(7), "x {affect_summary}"};
  EXPECT_EQ(code_of([&] { render_description(bad, {{"affect_summary", "a"}}); }), Errc::UnknownParadigm);
  ParadigmPrompt unterminated{ParadigmId::US, "x {affect_summary"};
  EXPECT_EQ(code_of([&] { render_description(unterminated, {{"affect_summary", "a"}}); }), Errc::ParseError);
}

TEST(Describe, PromptFileOverridesSomeParadigms) {
  auto dir = scratch_dir("prompts");
  {
    std::ofstream os(dir / "p.txt");
    os << "# comment\n\nREADING: Reading: {affect_summary}.\n";
  }
  const auto ps = load_prompts(dir / "p.txt");
  EXPECT_EQ(ps.at(ParadigmId::READING).template_text, "Reading: {affect_summary}.");
  EXPECT_EQ(ps.at(ParadigmId::MS1).template_text, default_prompt(ParadigmId::MS1).template_text);
  {
    std::ofstream os(dir / "bad.txt");
    os << "no colon here\n";
  }
  EXPECT_EQ(code_of([&] { load_prompts(dir / "bad.txt"); }), Errc::ParseError);
  EXPECT_EQ(code_of([&] { load_prompts(dir / "none.txt"); }), Errc::NotFound);
}

TEST(Describe, JsonlRoundTrip) {
  auto dir = scratch_dir("descs");
  std::vector<DescriptionRecord> ds{{"S1", ParadigmId::MS2, "text \"quoted\""}, {"S2", ParadigmId::US, "more"}};
  save_descriptions(ds, dir / "d.jsonl");
  EXPECT_EQ(load_descriptions(dir / "d.jsonl"), ds);
  {
    std::ofstream os(dir / "bad.jsonl");
    os << "{\"sample_id\":\"S\"}\n";
  }
  EXPECT_EQ(code_of([&] { load_descriptions(dir / "bad.jsonl"); }), Errc::ParseError);
}

TEST(Describe, AffectSummaryReadsFacetLevels) {
  Eigen::MatrixXd f = Eigen::MatrixXd::Zero(5, 8);
  f.middleCols(0, 2).setConstant(2.0);   // landmark
  f.middleCols(4, 2).setConstant(-2.0);  // gaze
  EXPECT_EQ(summarize_affect(f),
            "heightened landmark activity, typical head-pose activity, blunted gaze activity, typical action-unit "
            "activity");
  EXPECT_EQ(summarize_affect(Eigen::MatrixXd(0, 4)), "no observable facial activity");
}

// Text embedding ----------------------------------------------------------------

TEST(TextEmbedding, DeterministicShapeAndEmptyText) {
  HashingTextEmbedder e(16);
  const auto a = embed_text("Heightened gaze activity.", e);
  const auto b = embed_text("Heightened gaze activity.", e);
  EXPECT_EQ(a.tokens, b.tokens);
  EXPECT_EQ(a.tokens.rows(), 3);
  EXPECT_EQ(a.tokens.cols(), 16);
  EXPECT_EQ(code_of([&] { embed_text("", e); }), Errc::EmptyText);
  EXPECT_EQ(code_of([&] { embed_text(" .,; ", e); }), Errc::EmptyText);
  EXPECT_THROW(HashingTextEmbedder(0), Error);
}

TEST(TextEmbedding, BigramsSeparateFacetPhrases) {
  HashingTextEmbedder e(32);
  const auto a = embed_text("heightened gaze", e).tokens;
  const auto b = embed_text("blunted gaze", e).tokens;
  EXPECT_GT((a.row(1) - b.row(1)).norm(), 1e-3);
}

namespace {

struct ThrowingProvider final : TextEmbeddingProvider {
  int dimension() const override { return 4; }
  std::string name() const override { return "throwing"; }
  Eigen::MatrixXd embed(std::string_view) const override { throw std::runtime_error("offline"); }
};

struct WrongWidthProvider final : TextEmbeddingProvider {
  int dimension() const override { return 4; }
  std::string name() const override { return "wrong"; }
  Eigen::MatrixXd embed(std::string_view) const override { return Eigen::MatrixXd::Ones(1, 3); }
};

}  // namespace

TEST(TextEmbedding, ProviderFailuresAreWrapped) {
  EXPECT_EQ(code_of([] { embed_text("hello", ThrowingProvider{}); }), Errc::ProviderFailure);
  EXPECT_EQ(code_of([] { embed_text("hello", WrongWidthProvider{}); }), Errc::ProviderFailure);
}
