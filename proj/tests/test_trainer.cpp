#include <gtest/gtest.h>

#include <cstdlib>

#include "pmlf/trainer.hpp"
#include "test_util.hpp"

using namespace pmlf;
using pmlf::testing::random_matrix;
using pmlf::testing::scratch_dir;
using pmlf::testing::slurp;
using pmlf::testing::tiny_run_config;
using pmlf::testing::tiny_synth;

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

// One tiny strong-signal dataset shared by every test in this file.
class TrainerTest : public ::testing::Test {
 protected:
  static void SetUpTestSuite() {
    root_ = new fs::path(scratch_dir("trainer_data"));
    synth::generate_synthetic_dataset(tiny_synth(0, 10), *root_);
  }
  static void TearDownTestSuite() { delete root_; }

  static fs::path manifest() { return *root_ / "manifest.jsonl"; }
  static PreparedData data(const RunConfig& cfg) { return prepare_data(manifest(), cfg); }

  static std::vector<featurizer::DescriptionRecord> descriptions(const PreparedData& d) {
    return generate_descriptions(d.raw, d.ids(data::Split::TRAIN));
  }

  static RunConfig no_pt(RunConfig c) {
    c.train.ablation.disabled_modules.insert(Module::PT);
    return c;
  }

  static fs::path* root_;
};

fs::path* TrainerTest::root_ = nullptr;

// Removes wall_s from every JSONL record.
std::string strip_wall(const std::string& jsonl) {
  std::istringstream is(jsonl);
  std::string line, out;
  while (std::getline(is, line)) {
    auto j = nlohmann::json::parse(line);
    j.erase("wall_s");
    out += j.dump() + "\n";
  }
  return out;
}

}  // namespace

// Optimizer and batching ----------------------------------------------------

TEST(AdamWStep, SmallStepDecreasesFrozenBatchLoss) {
  Rng rng(1);
  nets::EncoderConfig ec;
  ec.d_in = 4;
  ec.d_model = 8;
  ec.n_layers = 1;
  ec.n_heads = 2;
  ec.d_out = 3;
  nets::Backbone b(ec, rng);
  auto ps = b.params();
  std::vector<Matrix> xs;
  for (int i = 0; i < 6; ++i) xs.push_back(random_matrix(5, 4, 10 + i));
  const std::vector<int> labels{0, 1, 2, 0, 1, 2};
  auto loss = [&] {
    std::vector<Var> rows;
    for (const auto& x : xs) rows.push_back(b.forward(x));
    return ag::softmax_cross_entropy(ag::concat_rows(rows), labels, 1e-12);
  };
  AdamW opt(0.9, 0.999, 0.0, 1e-8, 5.0);
  auto l0 = loss();
  ag::backward(l0);
  const double norm = opt.step(ps, 1e-5);
  EXPECT_GT(norm, 0.0);
  EXPECT_LT(loss().scalar(), l0.scalar());
  for (const auto& [n, v] : ps) EXPECT_FALSE(v->has_grad() && v->grad().norm() > 0) << n;
}

TEST(AdamWStep, ClipsAndDecays) {
  auto w = ag::leaf(Matrix::Constant(1, 1, 1.0));
  nets::ParamList ps{{"w", &w}};
  AdamW opt(0.9, 0.999, 0.5, 1e-8, 1.0);
  ag::backward(ag::scale(w, 100.0));
  EXPECT_DOUBLE_EQ(opt.step(ps, 0.1), 100.0);
  // Decay multiplies by (1 - 0.05), then the first Adam step moves by ~lr.
  EXPECT_NEAR(w.value()(0, 0), nets::round_to_float(0.95 - 0.1), 1e-6);
}

TEST(Batching, TailOfOneJoinsPreviousBatch) {
  std::vector<int> v(13);
  auto b = make_batches(v, 12);
  ASSERT_EQ(b.size(), 1u);
  EXPECT_EQ(b[0].size(), 13u);
  v.resize(14);
  b = make_batches(v, 12);
  ASSERT_EQ(b.size(), 2u);
  EXPECT_EQ(b[1].size(), 2u);
  v.resize(1);
  EXPECT_EQ(make_batches(v, 12).size(), 1u);
}

TEST(Schedule, ConstantUnlessCosine) {
  TrainConfig t;
  EXPECT_DOUBLE_EQ(scheduled_lr(t, 1e-3, 5, 10), 1e-3);
  t.cosine_decay = true;
  EXPECT_DOUBLE_EQ(scheduled_lr(t, 1e-3, 0, 10), 1e-3);
  EXPECT_NEAR(scheduled_lr(t, 1e-3, 5, 10), 0.5e-3, 1e-15);
}

// Configuration ---------------------------------------------------------------

TEST(Config, DefaultsAreStable) {
  RunConfig c;
  EXPECT_EQ(c.train.epochs, 80);
  EXPECT_DOUBLE_EQ(c.train.learning_rate, 1e-3);
  EXPECT_EQ(c.train.batch_size, 12);
  EXPECT_DOUBLE_EQ(c.train.beta1, 0.9);
  EXPECT_DOUBLE_EQ(c.train.beta2, 0.999);
  EXPECT_DOUBLE_EQ(c.train.weight_decay, 1e-2);
  EXPECT_FALSE(c.train.cosine_decay);
  EXPECT_EQ(c.model.audio.d_in, 13);
  EXPECT_NO_THROW(c.validate());
}

TEST(Config, JsonRoundTripAndValidation) {
  auto c = tiny_run_config(3);
  c.train.ablation.dropped_paradigms = {ParadigmId::US};
  c.train.ablation.disabled_modules = {Module::CA};
  json j = c;
  EXPECT_EQ(json(config_from_json(j)), j);
  EXPECT_EQ(j["seed"], 3);
  auto bad = j;
  bad["train"]["batch_size"] = 1;
  EXPECT_EQ(code_of([&] { config_from_json(bad); }), Errc::ConfigError);
  c.train.ablation.dropped_modalities = {Modality::VIDEO, Modality::AUDIO, Modality::TEXT};
  EXPECT_THROW(c.validate(), Error);
}

TEST(Config, DottedOverridesAndSeedEnv) {
  auto dir = scratch_dir("cfg");
  {
    std::ofstream os(dir / "c.json");
    os << R"({"seed": 4, "train": {"epochs": 7}})";
  }
  unsetenv("PMLF_SEED");
  auto c = load_run_config(dir / "c.json", {"train.learning_rate=0.01", "model.aggregation=CONCAT"});
  EXPECT_EQ(c.train.seed, 4u);
  EXPECT_EQ(c.train.epochs, 7);
  EXPECT_DOUBLE_EQ(c.train.learning_rate, 0.01);
  EXPECT_EQ(c.model.aggregation, nets::Aggregation::CONCAT);
  EXPECT_EQ(code_of([&] { load_run_config(dir / "c.json", {"train.nope=1"}); }), Errc::ConfigError);
  EXPECT_EQ(code_of([&] { load_run_config(dir / "c.json", {"train.epochs"}); }), Errc::ConfigError);
  EXPECT_EQ(code_of([&] { load_run_config(dir / "missing.json"); }), Errc::NotFound);

  setenv("PMLF_SEED", "99", 1);
  EXPECT_EQ(load_run_config(dir / "c.json").train.seed, 99u);
  setenv("PMLF_SEED", "x1", 1);
  EXPECT_EQ(code_of([&] { load_run_config(dir / "c.json"); }), Errc::ConfigError);
  unsetenv("PMLF_SEED");
}

// Checkpoints -----------------------------------------------------------------

TEST(Checkpoint, RoundTripGivesIdenticalProbeOutputs) {
  auto cfg = tiny_run_config(1);
  Rng rng(2);
  Stage2Model a(cfg.model, cfg.classes, rng);
  Checkpoint c;
  c.stage = Stage::STAGE2;
  c.config = cfg;
  c.add_params("", a.params());
  auto dir = scratch_dir("ckpt");
  save_checkpoint(c, dir / "m.ckpt");
  const auto back = load_checkpoint(dir / "m.ckpt");
  EXPECT_EQ(back.config, c.config);
  Rng other(3);
  Stage2Model b(cfg.model, cfg.classes, other);
  back.restore_params("", b.params());

  SampleTensors s;
  for (auto m : kAllModalities)
    for (auto p : kAllParadigms) {
      if (m != Modality::VIDEO && !has_speech(p)) continue;
      const int d = m == Modality::AUDIO ? 4 : 8;
      s.groups[index_of(m)][index_of(p)] = random_matrix(6, d, 10 * index_of(m) + index_of(p));
    }
  const auto ya = a.forward(s, {}).logits.value();
  const auto yb = b.forward(s, {}).logits.value();
  EXPECT_LT((ya - yb).cwiseAbs().maxCoeff(), 1e-7);
}

TEST(Checkpoint, TamperedConfigAndVersion) {
  Checkpoint c;
  c.config = tiny_run_config(1);
  c.tensors.emplace_back("w", Matrix::Ones(2, 2));
  std::string blob = encode_checkpoint(c);
  EXPECT_EQ(decode_checkpoint(blob).tensor("w"), Matrix::Ones(2, 2));

  std::string tampered = blob;
  const auto at = tampered.find("\"epochs\":3");
  ASSERT_NE(at, std::string::npos);
  tampered[at + 9] = '4';
  EXPECT_EQ(code_of([&] { decode_checkpoint(tampered); }), Errc::HashMismatch);

  std::string versioned = blob;
  versioned[8] = 7;
  EXPECT_EQ(code_of([&] { decode_checkpoint(versioned); }), Errc::VersionMismatch);

  std::string magic = blob;
  magic[0] = 'X';
  EXPECT_EQ(code_of([&] { decode_checkpoint(magic); }), Errc::ParseError);
  EXPECT_EQ(code_of([&] { decode_checkpoint(blob.substr(0, blob.size() - 3)); }), Errc::ParseError);
  EXPECT_EQ(code_of([&] { c.tensor("missing"); }), Errc::NotFound);
  EXPECT_EQ(code_of([&] { load_checkpoint("/nonexistent/x.ckpt"); }), Errc::IoError);
}

// Stage preconditions ------------------------------------------------------------

TEST_F(TrainerTest, StageMismatchesAndMissingDescriptions) {
  const auto cfg = tiny_run_config(0, 1);
  const auto d = data(cfg);
  EXPECT_EQ(code_of([&] { run_stage2(d, nullptr, cfg); }), Errc::StageMismatch);
  const auto s1 = initial_stage1_checkpoint(cfg);
  EXPECT_EQ(code_of([&] { run_stage2(d, &s1, no_pt(cfg)); }), Errc::StageMismatch);
  const auto s2 = run_stage2(d, nullptr, no_pt(cfg));
  EXPECT_EQ(code_of([&] { run_stage2(d, &s2.checkpoint, cfg); }), Errc::StageMismatch);
  EXPECT_EQ(code_of([&] { load_stage2_model(s1); }), Errc::StageMismatch);

  EXPECT_EQ(code_of([&] { run_stage1(d, {}, cfg); }), Errc::MissingDescriptions);
  auto some = descriptions(d);
  some.pop_back();
  EXPECT_EQ(code_of([&] { run_stage1(d, some, cfg); }), Errc::MissingDescriptions);
  EXPECT_EQ(code_of([&] { run_stage1(d, descriptions(d), no_pt(cfg)); }), Errc::ConfigError);

  auto wide = cfg;
  wide.model.video.d_model = 16;
  EXPECT_EQ(code_of([&] { run_stage2(d, &s1, wide); }), Errc::ConfigError);
}

TEST_F(TrainerTest, PrepareDataChecks) {
  auto cfg = tiny_run_config(0, 1);
  cfg.model.audio.d_in = 13;
  EXPECT_EQ(code_of([&] { data(cfg); }), Errc::ConfigError);
  auto d = data(tiny_run_config(0, 1));
  EXPECT_EQ(d.ids(data::Split::TRAIN).size() + d.ids(data::Split::VAL).size() + d.ids(data::Split::TEST).size(), 40u);
  // TRAIN statistics standardize TRAIN to zero mean.
  std::vector<const Matrix*> seqs;
  for (const auto& id : d.ids(data::Split::TRAIN))
    for (auto p : kAllParadigms) seqs.push_back(&d.std.sample(id).group(Modality::VIDEO, p));
  const auto st = featurizer::compute_stats(seqs);
  EXPECT_LT(st.mean.cwiseAbs().maxCoeff(), 1e-9);
}

// Stage 1 ---------------------------------------------------------------------

TEST_F(TrainerTest, Stage1LossDecreasesAcrossSeeds) {
  double first = 0, last = 0;
  auto dir = scratch_dir("stage1_runs");
  for (std::uint64_t seed : {0, 1, 2}) {
    auto cfg = tiny_run_config(seed, 2);
    const auto d = data(cfg);
    const auto r = run_stage1(d, descriptions(d), cfg, dir / std::to_string(seed));
    ASSERT_EQ(r.epoch_loss.size(), 2u);
    first += r.epoch_loss.front() / 3;
    last += r.epoch_loss.back() / 3;
    EXPECT_TRUE(fs::exists(dir / std::to_string(seed) / "stage1.ckpt"));
    EXPECT_EQ(load_checkpoint(dir / std::to_string(seed) / "stage1.ckpt").stage, Stage::STAGE1);
  }
  EXPECT_LT(last, first);
}

TEST_F(TrainerTest, Stage1AlignsPositivePairs) {
  auto cfg = tiny_run_config(0, 15);
  cfg.train.ablation = {};
  const auto d = data(cfg);
  const auto descs = descriptions(d);
  const auto r = run_stage1(d, descs, cfg);

  Rng scratch(0);
  Stage1Model m(cfg.model, scratch);
  r.checkpoint.restore_params("", m.params());
  featurizer::HashingTextEmbedder emb(cfg.model.d_desc);
  std::vector<Matrix> zv, zd;
  ag::NoGradGuard ng;
  for (const auto& dr : descs) {
    zv.push_back(project(m.video_encoder.forward(d.std.sample(dr.sample_id).group(Modality::VIDEO, dr.paradigm)),
                         m.video_head)
                     .value());
    zd.push_back(encode_description(dr, emb, m.desc_head).value());
  }
  double pos = 0, neg = 0;
  long np = 0, nn = 0;
  for (std::size_t i = 0; i < zv.size(); ++i)
    for (std::size_t j = 0; j < zd.size(); ++j) {
      const double c = (zv[i] * zd[j].transpose())(0, 0);
      if (i == j) {
        pos += c;
        ++np;
      } else {
        neg += c;
        ++nn;
      }
    }
  const double gap = pos / np - neg / nn;
  RecordProperty("alignment_gap", std::to_string(gap));
  EXPECT_GE(gap, 0.2);
}

TEST_F(TrainerTest, Stage1IsBitIdentical) {
  auto cfg = tiny_run_config(5, 2);
  const auto d = data(cfg);
  auto a = scratch_dir("s1_det_a"), b = scratch_dir("s1_det_b");
  run_stage1(d, descriptions(d), cfg, a);
  run_stage1(d, descriptions(d), cfg, b);
  EXPECT_EQ(slurp(a / "stage1.ckpt"), slurp(b / "stage1.ckpt"));
  EXPECT_EQ(strip_wall(slurp(a / "stage1_log.jsonl")), strip_wall(slurp(b / "stage1_log.jsonl")));
}

// Stage 2 ---------------------------------------------------------------------

TEST_F(TrainerTest, Stage2IsBitIdenticalAndLogsEveryEpoch) {
  auto cfg = no_pt(tiny_run_config(2, 3));
  const auto d = data(cfg);
  auto a = scratch_dir("s2_det_a"), b = scratch_dir("s2_det_b");
  const auto ra = run_stage2(d, nullptr, cfg, a);
  run_stage2(d, nullptr, cfg, b);
  EXPECT_EQ(slurp(a / "stage2.ckpt"), slurp(b / "stage2.ckpt"));
  EXPECT_EQ(slurp(a / "metrics.json"), slurp(b / "metrics.json"));
  const auto log = slurp(a / "stage2_log.jsonl");
  EXPECT_EQ(strip_wall(log), strip_wall(slurp(b / "stage2_log.jsonl")));
  std::istringstream is(log);
  std::string line;
  int n = 0;
  while (std::getline(is, line)) {
    auto j = nlohmann::json::parse(line);
    for (const char* k : {"epoch", "l_cls", "l_ccl_va", "l_ccl_ta", "val_macro_f1", "wall_s"})
      EXPECT_TRUE(j.contains(k)) << k;
    ++n;
  }
  EXPECT_EQ(n, 3);
  EXPECT_EQ(ra.history.size(), 3u);
}

TEST_F(TrainerTest, BestEpochBookkeeping) {
  auto cfg = no_pt(tiny_run_config(3, 4));
  const auto d = data(cfg);
  const auto r = run_stage2(d, nullptr, cfg);
  int best = 0;
  for (std::size_t e = 1; e < r.history.size(); ++e)
    if (r.history[e].val_macro_f1 > r.history[best].val_macro_f1) best = static_cast<int>(e);
  EXPECT_EQ(r.best_epoch, best);
  EXPECT_DOUBLE_EQ(r.val.macro_f1, r.history[best].val_macro_f1);
  EXPECT_EQ(r.checkpoint.epoch, best);
  EXPECT_EQ(r.checkpoint.metrics["best_epoch"], best);

  // The checkpoint holds the selected weights: reloading reproduces test and val.
  const auto lm = load_stage2_model(r.checkpoint);
  const auto preds = predict(*lm.model, d.std, d.ids(data::Split::TEST), cfg.train.ablation);
  ASSERT_EQ(preds.size(), r.test_predictions.size());
  for (std::size_t i = 0; i < preds.size(); ++i)
    for (std::size_t k = 0; k < preds[i].probs.size(); ++k)
      EXPECT_NEAR(preds[i].probs[k], r.test_predictions[i].probs[k], 1e-7);
  const auto val = eval::compute_metrics(predict(*lm.model, d.std, d.ids(data::Split::VAL), cfg.train.ablation),
                                         cfg.classes);
  EXPECT_DOUBLE_EQ(val.macro_f1, r.val.macro_f1);
}

TEST_F(TrainerTest, WithoutPretrainingDiffersOnlyInInitialization) {
  const auto cfg = tiny_run_config(4, 2);
  const auto d = data(cfg);
  const auto control = initial_stage1_checkpoint(cfg);
  const auto with = run_stage2(d, &control, cfg);
  const auto without = run_stage2(d, nullptr, no_pt(cfg));
  ASSERT_EQ(with.checkpoint.tensors.size(), without.checkpoint.tensors.size());
  for (std::size_t i = 0; i < with.checkpoint.tensors.size(); ++i) {
    EXPECT_EQ(with.checkpoint.tensors[i].first, without.checkpoint.tensors[i].first);
    EXPECT_EQ(with.checkpoint.tensors[i].second, without.checkpoint.tensors[i].second)
        << with.checkpoint.tensors[i].first;
  }
  for (std::size_t e = 0; e < with.history.size(); ++e) EXPECT_EQ(with.history[e].l_cls, without.history[e].l_cls);
}

TEST_F(TrainerTest, PretrainedEncoderSeedsEveryExtractor) {
  auto cfg = tiny_run_config(6, 1);
  const auto d = data(cfg);
  const auto s1 = run_stage1(d, descriptions(d), cfg).checkpoint;
  Rng rng(0);
  Stage2Model m(cfg.model, cfg.classes, rng);
  Rng scratch(1);
  Stage1Model s(cfg.model, scratch);
  s1.restore_params("", s.params());
  m.load_stage1(s);
  const auto ref = s.video_encoder.params();
  for (auto& e : m.extractors) {
    const auto ps = e.params();
    for (std::size_t i = 0; i < ps.size(); ++i) EXPECT_EQ(ps[i].second->value(), ref[i].second->value());
  }
}

TEST_F(TrainerTest, AblationVariantsTrain) {
  auto base = no_pt(tiny_run_config(7, 1));
  const auto d = data(base);
  auto a = base;
  a.train.ablation.disabled_modules.insert(Module::CA);
  a.train.ablation.disabled_modules.insert(Module::CL);
  auto r = run_stage2(d, nullptr, a);
  EXPECT_EQ(r.history[0].l_ccl_va, 0.0);
  auto b = base;
  b.train.ablation.dropped_modalities = {Modality::AUDIO};
  r = run_stage2(d, nullptr, b);
  EXPECT_EQ(r.history[0].l_ccl_ta, 0.0);
  auto c = base;
  c.train.ablation.dropped_paradigms = {ParadigmId::READING, ParadigmId::INTERVIEW};
  r = run_stage2(d, nullptr, c);  // no speech left: audio and text vanish
  EXPECT_EQ(r.history[0].l_ccl_va, 0.0);
  auto w = base;
  w.train.class_weighting = true;
  w.model.aux_description_ccl = true;
  r = run_stage2(d, nullptr, w);
  EXPECT_GT(r.history[0].l_ccl_desc, 0.0);
}

TEST_F(TrainerTest, EvaluateCheckpointRebuildsTheSplit) {
  auto cfg = no_pt(tiny_run_config(8, 2));
  const auto d = data(cfg);
  const auto r = run_stage2(d, nullptr, cfg);
  const auto e = evaluate_checkpoint(r.checkpoint, manifest(), data::Split::TEST);
  EXPECT_DOUBLE_EQ(e.report.macro_f1, r.test.macro_f1);
  EXPECT_EQ(code_of([&] { evaluate_checkpoint(r.checkpoint, manifest(), data::Split::TEST, {DiagnosisLabel::MD, DiagnosisLabel::HC}); }),
            Errc::ConfigError);
}
