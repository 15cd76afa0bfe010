#pragma once

// Two-stage training.
//
// Stage 1 fits the shared video encoder plus two projection heads so that each
// (sample, paradigm) video embedding lands next to the embedding of its
// description. Stage 2 copies that encoder into five per-paradigm extractors and
// trains the whole multimodal model on CE + the two cross-modal contrastive terms,
// keeping the epoch with the best validation macro-F1.
//
// Everything is sequential and seeded, so identical inputs give identical bytes.

#include <chrono>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <map>
#include <memory>
#include <ostream>
#include <set>
#include <string>
#include <utility>
#include <vector>

#include <nlohmann/json.hpp>

#include "pmlf/autograd.hpp"
#include "pmlf/checkpoint.hpp"
#include "pmlf/config.hpp"
#include "pmlf/data.hpp"
#include "pmlf/dataset.hpp"
#include "pmlf/describe.hpp"
#include "pmlf/metrics.hpp"
#include "pmlf/model.hpp"
#include "pmlf/objective.hpp"

namespace pmlf {

namespace fs = std::filesystem;

// Seed streams.
inline constexpr std::uint64_t kStreamStage1Init = 1;
inline constexpr std::uint64_t kStreamStage2Init = 2;
inline constexpr std::uint64_t kStreamStage1Order = 3;
inline constexpr std::uint64_t kStreamStage2Order = 4;
inline constexpr std::uint64_t kStreamStage1Dropout = 5;
inline constexpr std::uint64_t kStreamStage2Dropout = 6;

// ---------------------------------------------------------------------------
// Optimizer

/// Adam with decoupled weight decay and optional global-norm clipping.
/// Parameters are rounded to float32 after each step so that checkpoints
/// (stored as float32) reload exactly.
class AdamW {
 public:
  AdamW(double beta1, double beta2, double weight_decay, double eps, double clip)
      : b1_(beta1), b2_(beta2), wd_(weight_decay), eps_(eps), clip_(clip) {}

  /// Returns the pre-clipping global gradient norm.
  double step(const ParamList& ps, double lr) {
    if (state_.empty()) state_.resize(ps.size());
    if (state_.size() != ps.size()) throw Error(Errc::InvalidConfig, "optimizer parameter list changed");
    double sq = 0.0;
    for (const auto& [n, v] : ps)
      if (v->has_grad()) sq += v->grad().squaredNorm();
    const double norm = std::sqrt(sq);
    const double k = (clip_ > 0.0 && norm > clip_) ? clip_ / norm : 1.0;
    ++t_;
    const double c1 = 1.0 - std::pow(b1_, t_);
    const double c2 = 1.0 - std::pow(b2_, t_);
    for (std::size_t i = 0; i < ps.size(); ++i) {
      Var& p = *ps[i].second;
      if (!p.has_grad()) continue;
      auto& s = state_[i];
      if (s.m.size() == 0) {
        s.m = Matrix::Zero(p.rows(), p.cols());
        s.v = Matrix::Zero(p.rows(), p.cols());
      }
      const Matrix g = p.grad() * k;
      s.m = b1_ * s.m + (1.0 - b1_) * g;
      s.v = b2_ * s.v + (1.0 - b2_) * g.cwiseProduct(g);
      Matrix& w = p.mutable_value();
      w *= (1.0 - lr * wd_);
      w.array() -= lr * (s.m.array() / c1) / ((s.v.array() / c2).sqrt() + eps_);
      w = w.unaryExpr([](double x) { return nets::round_to_float(x); });
      p.zero_grad();
    }
    return norm;
  }

  static void zero_grad(const ParamList& ps) {
    for (const auto& [n, v] : ps) v->zero_grad();
  }

 private:
  struct Slot {
    Matrix m, v;
  };
  double b1_, b2_, wd_, eps_, clip_;
  int t_ = 0;
  std::vector<Slot> state_;
};

inline double scheduled_lr(const TrainConfig& t, double base, int epoch, int epochs) {
  if (!t.cosine_decay) return base;
  return base * 0.5 * (1.0 + std::cos(3.14159265358979323846 * epoch / std::max(1, epochs)));
}

/// Consecutive chunks of `batch`; a trailing chunk of one joins the previous chunk
/// (contrastive terms need two pairs).
template <class T>
std::vector<std::vector<T>> make_batches(const std::vector<T>& items, int batch) {
  std::vector<std::vector<T>> out;
  for (std::size_t i = 0; i < items.size(); i += static_cast<std::size_t>(batch))
    out.emplace_back(items.begin() + static_cast<std::ptrdiff_t>(i),
                     items.begin() + static_cast<std::ptrdiff_t>(std::min(items.size(), i + batch)));
  if (out.size() > 1 && out.back().size() == 1) {
    out[out.size() - 2].push_back(out.back().front());
    out.pop_back();
  }
  return out;
}

// ---------------------------------------------------------------------------
// Data preparation

struct PreparedData {
  Dataset raw;  // as stored
  Dataset std;  // standardized with TRAIN statistics
  data::SplitAssignment split;
  std::map<Modality, featurizer::FeatureStats> stats;

  std::vector<std::string> ids(data::Split s) const { return split.ids(s); }
};

/// Validates `m`, restricts it to the configured classes, splits it, loads
/// features (paths relative to `root`) and standardizes with TRAIN stats.
inline PreparedData prepare_data(const data::DatasetManifest& m, const fs::path& root, const RunConfig& cfg) {
  const auto report = data::validate_manifest(m);
  if (!report.empty())
    throw Error(Errc::ValidationFailed, "manifest invalid (" + std::to_string(report.size()) +
                                            " violations), first: " + report.front().describe());
  const auto task = data::filter_task(m, std::set<DiagnosisLabel>(cfg.classes.begin(), cfg.classes.end()));
  PreparedData d;
  d.split = data::stratified_split(task, cfg.split_ratios, cfg.train.seed);
  d.raw = Dataset::load(task, root);
  const auto train = d.split.ids(data::Split::TRAIN);
  if (train.size() < 2) throw Error(Errc::EmptySplit, "TRAIN split needs at least two samples");
  d.stats = d.raw.compute_stats(train);
  d.std = d.raw.standardized(d.stats);
  for (auto mod : kAllModalities) {
    const int have = d.raw.dim(mod);
    const auto& ec = mod == Modality::VIDEO ? cfg.model.video : mod == Modality::AUDIO ? cfg.model.audio : cfg.model.text;
    if (have != 0 && have != ec.d_in)
      throw Error(Errc::ConfigError, to_string(mod) + " features have width " + std::to_string(have) +
                                         " but model." + (mod == Modality::VIDEO ? "video" : mod == Modality::AUDIO ? "audio" : "text") +
                                         ".d_in is " + std::to_string(ec.d_in));
  }
  return d;
}

inline PreparedData prepare_data(const fs::path& manifest_path, const RunConfig& cfg) {
  return prepare_data(data::load_manifest(manifest_path), manifest_path.parent_path(), cfg);
}

inline void add_stats(Checkpoint& c, const std::map<Modality, featurizer::FeatureStats>& stats) {
  for (const auto& [mod, st] : stats) {
    c.tensors.emplace_back("stats." + to_string(mod) + ".mean", Matrix(st.mean));
    c.tensors.emplace_back("stats." + to_string(mod) + ".std", Matrix(st.std));
  }
}

inline std::map<Modality, featurizer::FeatureStats> read_stats(const Checkpoint& c) {
  std::map<Modality, featurizer::FeatureStats> out;
  for (auto mod : kAllModalities) {
    const std::string k = "stats." + to_string(mod);
    if (!c.has(k + ".mean")) continue;
    out[mod] = {c.tensor(k + ".mean").row(0), c.tensor(k + ".std").row(0)};
  }
  return out;
}

// ---------------------------------------------------------------------------
// Descriptions

/// Template descriptions for every (sample, paradigm) with video frames. The
/// affect slot summarizes the raw facial frames of that paradigm.
inline std::vector<featurizer::DescriptionRecord> generate_descriptions(
    const Dataset& raw, const std::vector<std::string>& ids,
    const std::map<ParadigmId, featurizer::ParadigmPrompt>& prompts = {},
    featurizer::DescriptionProvider* provider = nullptr) {
  featurizer::TemplateDescriptionProvider fallback;
  if (!provider) provider = &fallback;
  std::vector<featurizer::DescriptionRecord> out;
  for (const auto& id : ids) {
    const auto& s = raw.sample(id);
    for (auto p : kAllParadigms) {
      const auto& g = s.group(Modality::VIDEO, p);
      if (g.rows() == 0) continue;
      auto it = prompts.find(p);
      const auto prompt = it != prompts.end() ? it->second : featurizer::default_prompt(p);
      out.push_back(provider->describe(id, prompt, {{"affect_summary", featurizer::summarize_affect(g)}}));
    }
  }
  return out;
}

// ---------------------------------------------------------------------------
// Run log

struct EpochRecord {
  int epoch = 0;
  double l_cls = 0.0;
  double l_ccl_va = 0.0;
  double l_ccl_ta = 0.0;
  double l_ccl_desc = 0.0;
  double val_macro_f1 = 0.0;
  double wall_s = 0.0;
};

inline nlohmann::json stage2_log_json(const EpochRecord& r, bool with_desc) {
  nlohmann::json j = {{"epoch", r.epoch},       {"l_cls", r.l_cls},
                      {"l_ccl_va", r.l_ccl_va}, {"l_ccl_ta", r.l_ccl_ta},
                      {"val_macro_f1", r.val_macro_f1}, {"wall_s", r.wall_s}};
  if (with_desc) j["l_ccl_desc"] = r.l_ccl_desc;
  return j;
}

class RunLog {
 public:
  explicit RunLog(const fs::path& path) {
    if (path.empty()) return;
    if (path.has_parent_path()) fs::create_directories(path.parent_path());
    os_.open(path, std::ios::binary | std::ios::trunc);
    if (!os_) throw Error(Errc::IoError, "cannot write " + path.string());
  }
  void write(const nlohmann::json& j) {
    if (os_.is_open()) os_ << j.dump() << '\n' << std::flush;
  }

 private:
  std::ofstream os_;
};

struct RunOptions {
  std::ostream* progress = nullptr;  // human-readable per-epoch lines
};

inline double seconds_since(std::chrono::steady_clock::time_point t0) {
  return std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
}

// ---------------------------------------------------------------------------
// Stage 1

struct Stage1Result {
  Checkpoint checkpoint;
  std::vector<double> epoch_loss;  // mean train CCL per epoch
};

inline Checkpoint make_stage1_checkpoint(Stage1Model& model, const RunConfig& cfg,
                                         const std::map<Modality, featurizer::FeatureStats>& stats, int epoch,
                                         nlohmann::json metrics, std::string rng_state) {
  Checkpoint c;
  c.stage = Stage::STAGE1;
  c.config = cfg;
  c.epoch = epoch;
  c.metrics = std::move(metrics);
  c.rng_state = std::move(rng_state);
  c.add_params("", model.params());
  add_stats(c, stats);
  return c;
}

inline Stage1Result run_stage1(const PreparedData& data, const std::vector<featurizer::DescriptionRecord>& descriptions,
                               const RunConfig& cfg, const fs::path& out_dir = {}, const RunOptions& opt = {}) {
  cfg.validate();
  const auto& mask = cfg.train.ablation;
  if (mask.disabled(Module::PT)) throw Error(Errc::ConfigError, "pretraining is disabled in this configuration");
  if (mask.dropped(Modality::VIDEO)) throw Error(Errc::ConfigError, "pretraining needs the VIDEO modality");

  std::map<std::pair<std::string, ParadigmId>, const featurizer::DescriptionRecord*> by_key;
  for (const auto& d : descriptions) by_key[{d.sample_id, d.paradigm}] = &d;

  // (sample, paradigm) pairs of the TRAIN split with their frozen description features.
  struct Pair {
    const Matrix* frames;
    Matrix desc;
  };
  featurizer::HashingTextEmbedder embedder(cfg.model.d_desc);
  std::vector<Pair> pairs;
  for (const auto& id : data.ids(data::Split::TRAIN)) {
    const auto& s = data.std.sample(id);
    for (auto p : kAllParadigms) {
      if (mask.dropped_paradigms.count(p) || s.group(Modality::VIDEO, p).rows() == 0) continue;
      auto it = by_key.find({id, p});
      if (it == by_key.end())
        throw Error(Errc::MissingDescriptions, "no description for (" + id + ", " + to_string(p) + ")");
      pairs.push_back({&s.group(Modality::VIDEO, p), description_features(*it->second, embedder)});
    }
  }
  if (pairs.size() < 2) throw Error(Errc::MissingDescriptions, "fewer than two (sample, paradigm) pairs to align");

  Rng init(derive_seed(cfg.train.seed, kStreamStage1Init));
  Stage1Model model(cfg.model, init);
  const auto params = model.params();
  AdamW opt_(cfg.train.beta1, cfg.train.beta2, cfg.train.weight_decay, cfg.train.adam_eps, cfg.train.grad_clip);
  Rng order(derive_seed(cfg.train.seed, kStreamStage1Order));
  Rng drop(derive_seed(cfg.train.seed, kStreamStage1Dropout));
  RunLog log(out_dir.empty() ? fs::path{} : out_dir / "stage1_log.jsonl");

  std::vector<std::size_t> idx(pairs.size());
  for (std::size_t i = 0; i < idx.size(); ++i) idx[i] = i;
  Stage1Result res;
  const int epochs = cfg.train.pretrain_epochs();
  const auto t0 = std::chrono::steady_clock::now();
  for (int epoch = 0; epoch < epochs; ++epoch) {
    order.shuffle(idx);
    const double lr = scheduled_lr(cfg.train, cfg.train.pretrain_lr(), epoch, epochs);
    double sum = 0.0;
    const auto batches = make_batches(idx, cfg.train.batch_size);
    for (const auto& b : batches) {
      std::vector<Var> zv, zd;
      for (auto i : b) {
        zv.push_back(project(model.video_encoder.forward(*pairs[i].frames, &drop), model.video_head));
        zd.push_back(project(ag::constant(pairs[i].desc), model.desc_head));
      }
      auto loss = ccl_loss(ag::concat_rows(zv), ag::concat_rows(zd), cfg.train.loss);
      if (!std::isfinite(loss.scalar())) throw Error(Errc::NonFinite, "stage-1 loss is not finite");
      ag::backward(loss);
      opt_.step(params, lr);
      sum += loss.scalar();
    }
    const double mean = sum / static_cast<double>(batches.size());
    res.epoch_loss.push_back(mean);
    log.write({{"epoch", epoch}, {"l_ccl_stage1", mean}, {"wall_s", seconds_since(t0)}});
    if (opt.progress) *opt.progress << "stage1 epoch " << epoch << " l_ccl=" << mean << '\n';
  }
  res.checkpoint = make_stage1_checkpoint(model, cfg, data.stats, epochs - 1,
                                          {{"final_l_ccl", res.epoch_loss.back()}}, order.state());
  if (!out_dir.empty()) save_checkpoint(res.checkpoint, out_dir / "stage1.ckpt");
  return res;
}

/// The Stage-1 checkpoint a Stage-2 run would use if it started from its own
/// random shared initialization. Feeding it to a PT-enabled run reproduces the
/// PT-disabled run exactly.
inline Checkpoint initial_stage1_checkpoint(const RunConfig& cfg) {
  Rng init2(derive_seed(cfg.train.seed, kStreamStage2Init));
  Stage2Model m2(cfg.model, cfg.classes, init2);
  Rng init1(derive_seed(cfg.train.seed, kStreamStage1Init));
  Stage1Model m1(cfg.model, init1);
  nets::copy_params(m2.extractors[0].params(), m1.video_encoder.params());
  return make_stage1_checkpoint(m1, cfg, {}, 0, nlohmann::json::object(), {});
}

// ---------------------------------------------------------------------------
// Stage 2

inline std::vector<fuse::PredictionRecord> predict(const Stage2Model& model, const Dataset& data,
                                                   const std::vector<std::string>& ids, const AblationMask& mask) {
  ag::NoGradGuard ng;
  std::vector<fuse::PredictionRecord> out;
  const auto& classes = model.classifier.class_set();
  for (const auto& id : ids) {
    const auto& s = data.sample(id);
    auto f = model.forward(s, mask);
    Matrix p = ag::softmax_rows_value(f.logits.value());
    fuse::PredictionRecord r;
    r.probs.assign(p.data(), p.data() + p.size());
    r.predicted = classes[fuse::argmax_first(r.probs)];
    r.truth = s.label;
    out.push_back(std::move(r));
  }
  return out;
}

struct Stage2Result {
  Checkpoint checkpoint;  // best-validation epoch
  eval::MetricsReport test;
  eval::MetricsReport val;
  int best_epoch = 0;
  std::vector<EpochRecord> history;
  std::vector<fuse::PredictionRecord> test_predictions;
};

inline void check_stage1_compatible(const Checkpoint& s1, const RunConfig& cfg) {
  if (s1.stage != Stage::STAGE1) throw Error(Errc::StageMismatch, "expected a STAGE1 checkpoint");
  const auto& m = s1.config.at("model");
  if (m.at("video") != nlohmann::json(cfg.model.video))
    throw Error(Errc::ConfigError, "stage-1 video encoder config differs from model.video");
  if (cfg.model.aux_description_ccl && (m.at("d_z") != cfg.model.d_z || m.at("d_desc") != cfg.model.d_desc))
    throw Error(Errc::ConfigError, "stage-1 projection heads differ from model.d_z / model.d_desc");
}

inline Stage2Result run_stage2(const PreparedData& data, const Checkpoint* stage1, const RunConfig& cfg,
                               const fs::path& out_dir = {}, const RunOptions& opt = {}) {
  cfg.validate();
  const auto& mask = cfg.train.ablation;
  const bool pt = !mask.disabled(Module::PT);
  const bool cl = !mask.disabled(Module::CL);
  if (pt && !stage1) throw Error(Errc::StageMismatch, "pretraining is enabled but no stage-1 checkpoint was given");
  if (!pt && stage1) throw Error(Errc::StageMismatch, "pretraining is disabled but a stage-1 checkpoint was given");
  const auto train_ids = data.ids(data::Split::TRAIN);
  const auto val_ids = data.ids(data::Split::VAL);
  const auto test_ids = data.ids(data::Split::TEST);
  if (val_ids.empty() || test_ids.empty()) throw Error(Errc::EmptySplit, "VAL and TEST splits must be nonempty");

  Rng init(derive_seed(cfg.train.seed, kStreamStage2Init));
  Stage2Model model(cfg.model, cfg.classes, init);
  if (stage1) {
    check_stage1_compatible(*stage1, cfg);
    Rng scratch(0);
    Stage1Model s1(cfg.model, scratch);
    stage1->restore_params("", s1.params());
    model.load_stage1(s1);
  }
  const auto params = model.params();

  std::map<DiagnosisLabel, int> class_index;
  for (std::size_t i = 0; i < cfg.classes.size(); ++i) class_index[cfg.classes[i]] = static_cast<int>(i);
  std::vector<double> weights;
  if (cfg.train.class_weighting) {
    std::vector<double> n(cfg.classes.size(), 0.0);
    for (const auto& id : train_ids) n[class_index.at(data.std.sample(id).label)] += 1.0;
    for (double c : n)
      weights.push_back(c > 0 ? static_cast<double>(train_ids.size()) / (cfg.classes.size() * c) : 0.0);
  }

  // Frozen description features for the optional auxiliary term.
  std::map<std::pair<std::string, ParadigmId>, Matrix> desc_feat;
  if (cfg.model.aux_description_ccl && cl) {
    featurizer::HashingTextEmbedder embedder(cfg.model.d_desc);
    for (const auto& d : generate_descriptions(data.raw, train_ids))
      desc_feat[{d.sample_id, d.paradigm}] = description_features(d, embedder);
  }

  AdamW optim(cfg.train.beta1, cfg.train.beta2, cfg.train.weight_decay, cfg.train.adam_eps, cfg.train.grad_clip);
  Rng order(derive_seed(cfg.train.seed, kStreamStage2Order));
  Rng drop(derive_seed(cfg.train.seed, kStreamStage2Dropout));
  RunLog log(out_dir.empty() ? fs::path{} : out_dir / "stage2_log.jsonl");

  Stage2Result res;
  double best_f1 = -1.0;
  std::vector<Matrix> best_values;
  std::string best_rng;
  std::vector<std::string> ids = train_ids;
  const auto t0 = std::chrono::steady_clock::now();
  for (int epoch = 0; epoch < cfg.train.epochs; ++epoch) {
    order.shuffle(ids);
    const double lr = scheduled_lr(cfg.train, cfg.train.learning_rate, epoch, cfg.train.epochs);
    EpochRecord rec;
    rec.epoch = epoch;
    const auto batches = make_batches(ids, cfg.train.batch_size);
    for (const auto& b : batches) {
      std::vector<Var> fv, fa, ft, logits, zv, zd;
      std::vector<int> labels;
      for (const auto& id : b) {
        const auto& s = data.std.sample(id);
        auto f = model.forward(s, mask, &drop);
        logits.push_back(f.logits);
        labels.push_back(class_index.at(s.label));
        if (f.f_video) fv.push_back(*f.f_video);
        if (f.f_audio) fa.push_back(*f.f_audio);
        if (f.f_text) ft.push_back(*f.f_text);
        if (!desc_feat.empty())
          for (const auto& [p, tf] : f.task_features) {
            auto it = desc_feat.find({id, p});
            if (it == desc_feat.end()) continue;
            zv.push_back(project(tf, model.video_head));
            zd.push_back(project(ag::constant(it->second), model.desc_head));
          }
      }
      const std::size_t n = b.size();
      auto l_cls = ag::softmax_cross_entropy(ag::concat_rows(logits), labels, cfg.train.loss.prob_floor, weights);
      std::vector<Var> terms{l_cls};
      double va = 0.0, ta = 0.0, dd = 0.0;
      if (cl && fv.size() == n && fa.size() == n) {
        auto l = ccl_loss(ag::concat_rows(fv), ag::concat_rows(fa), cfg.train.loss);
        va = l.scalar();
        terms.push_back(l);
      }
      if (cl && ft.size() == n && fa.size() == n) {
        auto l = ccl_loss(ag::concat_rows(ft), ag::concat_rows(fa), cfg.train.loss);
        ta = l.scalar();
        terms.push_back(l);
      }
      if (zv.size() >= 2) {
        auto l = ccl_loss(ag::concat_rows(zv), ag::concat_rows(zd), cfg.train.loss);
        dd = l.scalar();
        terms.push_back(l);
      }
      const auto parts = stage2_total(l_cls.scalar(), va, ta, mask.disabled_modules);  // throws NonFinite
      (void)parts;
      auto total = ag::sum_scalars(terms);
      if (!std::isfinite(total.scalar())) throw Error(Errc::NonFinite, "stage-2 loss is not finite");
      ag::backward(total);
      optim.step(params, lr);
      rec.l_cls += l_cls.scalar();
      rec.l_ccl_va += va;
      rec.l_ccl_ta += ta;
      rec.l_ccl_desc += dd;
    }
    const double nb = static_cast<double>(batches.size());
    rec.l_cls /= nb;
    rec.l_ccl_va /= nb;
    rec.l_ccl_ta /= nb;
    rec.l_ccl_desc /= nb;
    const auto val = eval::compute_metrics(predict(model, data.std, val_ids, mask), cfg.classes);
    rec.val_macro_f1 = val.macro_f1;
    rec.wall_s = seconds_since(t0);
    res.history.push_back(rec);
    log.write(stage2_log_json(rec, !desc_feat.empty()));
    if (opt.progress)
      *opt.progress << "stage2 epoch " << epoch << " l_cls=" << rec.l_cls << " l_va=" << rec.l_ccl_va
                    << " l_ta=" << rec.l_ccl_ta << " val_macro_f1=" << rec.val_macro_f1 << '\n';
    if (val.macro_f1 > best_f1) {
      best_f1 = val.macro_f1;
      res.best_epoch = epoch;
      res.val = val;
      best_values.clear();
      for (const auto& [nm, v] : params) best_values.push_back(v->value());
      best_rng = order.state();
    }
  }

  for (std::size_t i = 0; i < params.size(); ++i) params[i].second->mutable_value() = best_values[i];
  res.test_predictions = predict(model, data.std, test_ids, mask);
  res.test = eval::compute_metrics(res.test_predictions, cfg.classes);

  Checkpoint& c = res.checkpoint;
  c.stage = Stage::STAGE2;
  c.config = cfg;
  c.epoch = res.best_epoch;
  c.rng_state = best_rng;
  c.metrics = {{"best_epoch", res.best_epoch}, {"val", eval::to_json(res.val)}, {"test", eval::to_json(res.test)}};
  c.add_params("", params);
  add_stats(c, data.stats);
  if (!out_dir.empty()) {
    save_checkpoint(c, out_dir / "stage2.ckpt");
    std::ofstream os(out_dir / "metrics.json", std::ios::binary | std::ios::trunc);
    if (!os) throw Error(Errc::IoError, "cannot write " + (out_dir / "metrics.json").string());
    os << c.metrics.dump(2) << '\n';
  }
  return res;
}

// ---------------------------------------------------------------------------
// Reloading a trained model

struct LoadedModel {
  RunConfig cfg;
  std::map<Modality, featurizer::FeatureStats> stats;
  std::unique_ptr<Stage2Model> model;
};

inline LoadedModel load_stage2_model(const Checkpoint& c) {
  if (c.stage != Stage::STAGE2) throw Error(Errc::StageMismatch, "expected a STAGE2 checkpoint");
  LoadedModel out;
  out.cfg = config_from_json(c.config);
  Rng scratch(0);
  out.model = std::make_unique<Stage2Model>(out.cfg.model, out.cfg.classes, scratch);
  c.restore_params("", out.model->params());
  out.stats = read_stats(c);
  return out;
}

/// Rebuilds the checkpoint's split of `m` (same classes, ratios and seed) and
/// returns standardized data for it.
inline PreparedData prepare_for_checkpoint(const LoadedModel& lm, const data::DatasetManifest& m,
                                           const fs::path& root) {
  const auto report = data::validate_manifest(m);
  if (!report.empty()) throw Error(Errc::ValidationFailed, "manifest invalid, first: " + report.front().describe());
  const auto task =
      data::filter_task(m, std::set<DiagnosisLabel>(lm.cfg.classes.begin(), lm.cfg.classes.end()));
  PreparedData d;
  d.split = data::stratified_split(task, lm.cfg.split_ratios, lm.cfg.train.seed);
  d.raw = Dataset::load(task, root);
  d.stats = lm.stats;
  d.std = d.raw.standardized(d.stats);
  return d;
}

struct Evaluation {
  eval::MetricsReport report;
  std::vector<std::string> ids;
  std::vector<fuse::PredictionRecord> predictions;
};

inline Evaluation evaluate_checkpoint(const Checkpoint& c, const fs::path& manifest_path, data::Split split,
                                      const std::vector<DiagnosisLabel>& classes = {}) {
  auto lm = load_stage2_model(c);
  if (!classes.empty() &&
      std::set<DiagnosisLabel>(classes.begin(), classes.end()) !=
          std::set<DiagnosisLabel>(lm.cfg.classes.begin(), lm.cfg.classes.end()))
    throw Error(Errc::ConfigError, "requested classes " + join_labels(classes) + " differ from the model's " +
                                       join_labels(lm.cfg.classes));
  const auto d = prepare_for_checkpoint(lm, data::load_manifest(manifest_path), manifest_path.parent_path());
  Evaluation e;
  e.ids = d.ids(split);
  if (e.ids.empty()) throw Error(Errc::EmptySplit, to_string(split) + " split is empty");
  e.predictions = predict(*lm.model, d.std, e.ids, lm.cfg.train.ablation);
  e.report = eval::compute_metrics(e.predictions, lm.cfg.classes);
  return e;
}

}  // namespace pmlf
