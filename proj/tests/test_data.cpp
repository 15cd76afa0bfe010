#include <gtest/gtest.h>

#include <sstream>

#include "pmlf/data.hpp"
#include "pmlf/synth.hpp"
#include "test_util.hpp"

using namespace pmlf;
using namespace pmlf::data;
using pmlf::testing::scratch_dir;

namespace {

// A protocol-conforming sample: 26 video segments, 16 paired audio/text.
SampleRecord make_sample(const std::string& id, DiagnosisLabel label) {
  SampleRecord s;
  s.sample_id = id;
  s.label = label;
  s.age_years = 30;
  for (auto mod : kAllModalities)
    for (auto p : kAllParadigms) {
      const int n = synth::segment_count(synth::SynthConfig{}, p, mod);
      for (int k = 0; k < n; ++k)
        s.segments.push_back({synth::segment_id(p, mod, k), id, p, mod, 2.0, "f.bin", k});
    }
  return s;
}

DatasetManifest make_manifest(const std::map<DiagnosisLabel, int>& counts) {
  DatasetManifest m;
  int i = 0;
  for (const auto& [l, n] : counts)
    for (int k = 0; k < n; ++k) m.samples.push_back(make_sample(synth::sample_id(i++), l));
  return m;
}

Errc code_of(const std::function<void()>& f) {
  try {
    f();
  } catch (const Error& e) {
    return e.code();
  }
  ADD_FAILURE() << "expected an exception";
  return Errc::NotFound;
}

const std::map<DiagnosisLabel, int> kCohort = {
    {DiagnosisLabel::MD, 67}, {DiagnosisLabel::ANX, 112}, {DiagnosisLabel::SC, 49}, {DiagnosisLabel::HC, 700}};

}  // namespace

// Manifest I/O ------------------------------------------------------------------

TEST(Manifest, SerializeParseRoundTrip) {
  auto m = make_manifest({{DiagnosisLabel::MD, 1}, {DiagnosisLabel::HC, 1}});
  m.samples[1].age_years.reset();
  m.samples[1].gender = Gender::F;
  std::istringstream is(serialize_manifest(m));
  auto back = parse_manifest(is);
  EXPECT_EQ(back, m);
  EXPECT_EQ(back.samples.size(), 2u);
  EXPECT_EQ(back.samples[0].segments.size(), 26u + 32u);
}

TEST(Manifest, FileRoundTripAndNotFound) {
  auto dir = scratch_dir("manifest_io");
  auto m = make_manifest({{DiagnosisLabel::SC, 3}});
  save_manifest(m, dir / "m.jsonl");
  EXPECT_EQ(load_manifest(dir / "m.jsonl"), m);
  EXPECT_EQ(code_of([&] { load_manifest(dir / "missing.jsonl"); }), Errc::NotFound);
}

TEST(Manifest, ParseErrorsCarryLineNumber) {
  auto m = make_manifest({{DiagnosisLabel::MD, 2}});
  std::string text = serialize_manifest(m);
  text += "{\"sample_id\": \"X\", \"label\": \"BAD\", \"segments\": []}\n";
  std::istringstream is(text);
  try {
    parse_manifest(is);
    FAIL();
  } catch (const Error& e) {
    EXPECT_EQ(e.code(), Errc::ParseError);
    EXPECT_NE(std::string(e.what()).find("line 4"), std::string::npos) << e.what();
  }
  std::istringstream junk("{not json\n");
  EXPECT_EQ(code_of([&] { parse_manifest(junk); }), Errc::ParseError);
  std::istringstream empty("");
  EXPECT_EQ(code_of([&] { parse_manifest(empty); }), Errc::ParseError);
}

// Validation --------------------------------------------------------------------

TEST(Validate, ConformingManifestIsClean) {
  EXPECT_TRUE(validate_manifest(make_manifest({{DiagnosisLabel::MD, 2}, {DiagnosisLabel::HC, 2}})).empty());
}

TEST(Validate, TwentyFiveVideosGiveOneCountMismatch) {
  auto m = make_manifest({{DiagnosisLabel::MD, 1}});
  auto& segs = m.samples[0].segments;
  for (auto it = segs.begin(); it != segs.end(); ++it)
    if (it->modality == Modality::VIDEO && it->paradigm == ParadigmId::INTERVIEW) {
      segs.erase(it);
      break;
    }
  const auto r = validate_manifest(m);
  ASSERT_EQ(r.size(), 1u);
  EXPECT_EQ(r[0].kind, ViolationKind::COUNT_MISMATCH);
  EXPECT_EQ(r[0].sample_id, m.samples[0].sample_id);
}

TEST(Validate, DuplicateSegmentIdIsUniqueness) {
  auto m = make_manifest({{DiagnosisLabel::MD, 1}});
  m.samples[0].segments[1].segment_id = m.samples[0].segments[0].segment_id;
  bool found = false;
  for (const auto& v : validate_manifest(m)) found |= v.kind == ViolationKind::UNIQUENESS;
  EXPECT_TRUE(found);
}

TEST(Validate, OtherViolationKinds) {
  auto m = make_manifest({{DiagnosisLabel::MD, 2}});
  m.samples[1].sample_id = m.samples[0].sample_id;
  m.samples[0].age_years = 70;
  auto kinds = [](const ValidationReport& r) {
    std::set<ViolationKind> k;
    for (const auto& v : r) k.insert(v.kind);
    return k;
  };
  auto k = kinds(validate_manifest(m));
  EXPECT_TRUE(k.count(ViolationKind::UNIQUENESS));
  EXPECT_TRUE(k.count(ViolationKind::RANGE));

  auto p = make_manifest({{DiagnosisLabel::MD, 1}});
  for (auto& g : p.samples[0].segments)
    if (g.modality == Modality::AUDIO && g.paradigm == ParadigmId::INTERVIEW && g.order_index == 14) g.order_index = 20;
  EXPECT_TRUE(kinds(validate_manifest(p)).count(ViolationKind::PAIRING));

  auto o = make_manifest({{DiagnosisLabel::MD, 1}});
  for (auto& g : o.samples[0].segments)
    if (g.modality == Modality::VIDEO && g.paradigm == ParadigmId::MS1 && g.order_index == 2) g.order_index = 0;
  EXPECT_TRUE(kinds(validate_manifest(o)).count(ViolationKind::ORDER));

  auto mp = make_manifest({{DiagnosisLabel::MD, 1}});
  for (auto& g : mp.samples[0].segments)
    if (g.modality == Modality::AUDIO && g.paradigm == ParadigmId::READING) g.paradigm = ParadigmId::US;
  EXPECT_TRUE(kinds(validate_manifest(mp)).count(ViolationKind::MODALITY_PARADIGM));

  auto sc = make_manifest({{DiagnosisLabel::MD, 1}});
  sc.paradigm_video_counts[ParadigmId::US] = 4;
  EXPECT_TRUE(kinds(validate_manifest(sc)).count(ViolationKind::SCHEMA));
}

TEST(Validate, FilteringKeepsValidity) {
  auto m = make_manifest({{DiagnosisLabel::MD, 2}, {DiagnosisLabel::SC, 2}, {DiagnosisLabel::HC, 3}});
  ASSERT_TRUE(validate_manifest(m).empty());
  EXPECT_TRUE(validate_manifest(filter_task(m, {DiagnosisLabel::MD, DiagnosisLabel::SC})).empty());
}

// Split -------------------------------------------------------------------------

TEST(Split, CohortProfileGivesTableSizes) {
  const auto m = make_manifest(kCohort);
  ASSERT_EQ(m.samples.size(), 928u);
  const auto sa = stratified_split(m, {0.6, 0.2, 0.2}, 0);
  EXPECT_EQ(sa.count(Split::TRAIN), 557u);
  EXPECT_EQ(sa.count(Split::VAL), 186u);
  EXPECT_EQ(sa.count(Split::TEST), 185u);
}

TEST(Split, PerClassDeviationAtMostOne) {
  const auto m = make_manifest(kCohort);
  const std::array<double, 3> ratios{0.6, 0.2, 0.2};
  const auto sa = stratified_split(m, ratios, 7);
  for (const auto& [l, n] : kCohort)
    for (int k = 0; k < 3; ++k) {
      int got = 0;
      for (const auto& s : m.samples)
        got += s.label == l && sa.assignment.at(s.sample_id) == kAllSplits[k];
      EXPECT_LE(std::abs(got - ratios[k] * n), 1.0) << to_string(l) << " " << to_string(kAllSplits[k]);
    }
}

TEST(Split, RandomManifestsArePartitionsWithinBound) {
  Rng rng(42);
  for (int trial = 0; trial < 200; ++trial) {
    std::map<DiagnosisLabel, int> counts;
    for (auto l : kAllLabels) counts[l] = 3 + static_cast<int>(rng.below(40));
    const double a = 0.2 + 0.6 * rng.uniform();
    const double b = (1 - a) * (0.2 + 0.6 * rng.uniform());
    const std::array<double, 3> ratios{a, b, 1 - a - b};
    DatasetManifest m;
    int i = 0;
    for (const auto& [l, n] : counts)
      for (int k = 0; k < n; ++k) {
        SampleRecord s;
        s.sample_id = synth::sample_id(i++);
        s.label = l;
        m.samples.push_back(s);
      }
    const auto sa = stratified_split(m, ratios, trial);
    ASSERT_EQ(sa.assignment.size(), m.samples.size());
    const auto totals = detail::largest_remainder(static_cast<int>(m.samples.size()), ratios);
    for (int k = 0; k < 3; ++k) EXPECT_EQ(static_cast<int>(sa.count(kAllSplits[k])), totals[k]);
    for (const auto& [l, n] : counts)
      for (int k = 0; k < 3; ++k) {
        int got = 0;
        for (const auto& s : m.samples) got += s.label == l && sa.assignment.at(s.sample_id) == kAllSplits[k];
        EXPECT_LE(std::abs(got - ratios[k] * n), 1.0 + 1e-9) << "trial " << trial;
      }
  }
}

TEST(Split, UndersizedClassesGoToTrain) {
  const auto m = make_manifest({{DiagnosisLabel::MD, 1}, {DiagnosisLabel::ANX, 1}, {DiagnosisLabel::SC, 1},
                                {DiagnosisLabel::HC, 1}});
  const auto sa = stratified_split(m, {0.5, 0.25, 0.25}, 3);
  EXPECT_EQ(sa.count(Split::TRAIN), 4u);
}

TEST(Split, DeterministicPerSeed) {
  const auto m = make_manifest({{DiagnosisLabel::MD, 20}, {DiagnosisLabel::HC, 30}});
  const auto a = stratified_split(m, {0.6, 0.2, 0.2}, 5);
  const auto b = stratified_split(m, {0.6, 0.2, 0.2}, 5);
  const auto c = stratified_split(m, {0.6, 0.2, 0.2}, 6);
  EXPECT_EQ(a.assignment, b.assignment);
  EXPECT_NE(a.assignment, c.assignment);
}

TEST(Split, RejectsBadRatiosAndEmptyManifest) {
  const auto m = make_manifest({{DiagnosisLabel::MD, 5}});
  EXPECT_EQ(code_of([&] { stratified_split(m, {0.6, 0.2, 0.3}, 0); }), Errc::InvalidRatios);
  EXPECT_EQ(code_of([&] { stratified_split(m, {1.0, 0.0, 0.0}, 0); }), Errc::InvalidRatios);
  EXPECT_EQ(code_of([&] { stratified_split(DatasetManifest{}, {0.6, 0.2, 0.2}, 0); }), Errc::EmptyManifest);
  EXPECT_EQ(parse_split("val"), Split::VAL);
  EXPECT_THROW(parse_split("dev"), Error);
}

// Task filtering ----------------------------------------------------------------

TEST(FilterTask, KeepsOnlyRequestedClasses) {
  const auto m = make_manifest(kCohort);
  const auto f = filter_task(m, {DiagnosisLabel::MD, DiagnosisLabel::SC});
  EXPECT_EQ(f.samples.size(), 116u);
  EXPECT_EQ(f.paradigm_video_counts, m.paradigm_video_counts);
  EXPECT_EQ(filter_task(m, {kAllLabels.begin(), kAllLabels.end()}), m);
}

TEST(FilterTask, Errors) {
  const auto m = make_manifest({{DiagnosisLabel::HC, 3}});
  EXPECT_EQ(code_of([&] { filter_task(m, {}); }), Errc::EmptyClassSet);
  EXPECT_EQ(code_of([&] { filter_task(m, {DiagnosisLabel::MD}); }), Errc::ClassAbsent);
}
