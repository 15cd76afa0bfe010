#pragma once

// Run configuration: one JSON document covers data generation, splitting,
// model shape, and training. CLI overrides address keys by dotted path.

#include <array>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <set>
#include <sstream>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "pmlf/core.hpp"
#include "pmlf/fuse.hpp"
#include "pmlf/nets.hpp"
#include "pmlf/objective.hpp"
#include "pmlf/synth.hpp"

namespace pmlf {

using json = nlohmann::json;

struct AblationMask {
  std::set<ParadigmId> dropped_paradigms;
  std::set<Modality> dropped_modalities;
  std::set<Module> disabled_modules;

  bool disabled(Module m) const { return disabled_modules.count(m) > 0; }
  bool dropped(Modality m) const { return dropped_modalities.count(m) > 0; }

  void validate() const {
    if (dropped_paradigms.size() >= kAllParadigms.size())
      throw Error(Errc::InvalidConfig, "cannot drop every paradigm");
    if (dropped_modalities.size() >= kAllModalities.size())
      throw Error(Errc::InvalidConfig, "cannot drop every modality");
  }

  bool operator==(const AblationMask&) const = default;
};

inline void to_json(json& j, const AblationMask& a) {
  std::vector<std::string> p, m, d;
  for (auto x : a.dropped_paradigms) p.push_back(to_string(x));
  for (auto x : a.dropped_modalities) m.push_back(to_string(x));
  for (auto x : a.disabled_modules) d.push_back(to_string(x));
  j = {{"dropped_paradigms", p}, {"dropped_modalities", m}, {"disabled_modules", d}};
}

inline void from_json(const json& j, AblationMask& a) {
  a = {};
  for (const auto& s : j.value("dropped_paradigms", json::array()))
    a.dropped_paradigms.insert(parse_paradigm(s.get<std::string>()));
  for (const auto& s : j.value("dropped_modalities", json::array()))
    a.dropped_modalities.insert(parse_modality(s.get<std::string>()));
  for (const auto& s : j.value("disabled_modules", json::array()))
    a.disabled_modules.insert(parse_module(s.get<std::string>()));
}

inline void to_json(json& j, const LossConfig& c) {
  j = {{"temperature", c.temperature},
       {"symmetric", c.symmetric},
       {"positive_in_denominator", c.positive_in_denominator},
       {"prob_floor", c.prob_floor}};
}

inline void from_json(const json& j, LossConfig& c) {
  c.temperature = j.value("temperature", c.temperature);
  c.symmetric = j.value("symmetric", c.symmetric);
  c.positive_in_denominator = j.value("positive_in_denominator", c.positive_in_denominator);
  c.prob_floor = j.value("prob_floor", c.prob_floor);
}

struct ModelConfig {
  nets::EncoderConfig video;
  nets::EncoderConfig audio = [] {
    nets::EncoderConfig c;
    c.d_in = 13;
    return c;
  }();
  nets::EncoderConfig text;
  int d_z = 32;      // shared contrastive space
  int d_desc = 32;   // frozen description embedder width
  nets::Aggregation aggregation = nets::Aggregation::ATTENTION;
  fuse::FusionConfig fusion;
  /// Keeps the Stage-1 description alignment as an extra Stage-2 term.
  bool aux_description_ccl = false;

  void validate() const {
    video.validate();
    audio.validate();
    text.validate();
    fusion.validate();
    if (d_z < 1 || d_desc < 1) throw Error(Errc::InvalidConfig, "d_z and d_desc must be >= 1");
    if (video.d_out != audio.d_out || text.d_out != audio.d_out)
      throw Error(Errc::InvalidConfig, "video, audio and text encoders must share d_out for alignment");
  }
};

inline std::string to_string(nets::Aggregation a) { return a == nets::Aggregation::ATTENTION ? "ATTENTION" : "CONCAT"; }
inline nets::Aggregation parse_aggregation(std::string_view s) {
  if (s == "ATTENTION") return nets::Aggregation::ATTENTION;
  if (s == "CONCAT") return nets::Aggregation::CONCAT;
  throw Error(Errc::ParseError, "unknown aggregation '" + std::string(s) + "'");
}

inline void to_json(json& j, const ModelConfig& c) {
  j = {{"video", c.video},   {"audio", c.audio},   {"text", c.text},
       {"d_z", c.d_z},       {"d_desc", c.d_desc}, {"aggregation", to_string(c.aggregation)},
       {"fusion", c.fusion}, {"aux_description_ccl", c.aux_description_ccl}};
}

inline void from_json(const json& j, ModelConfig& c) {
  if (j.contains("video")) j.at("video").get_to(c.video);
  if (j.contains("audio")) j.at("audio").get_to(c.audio);
  if (j.contains("text")) j.at("text").get_to(c.text);
  c.d_z = j.value("d_z", c.d_z);
  c.d_desc = j.value("d_desc", c.d_desc);
  if (j.contains("aggregation")) c.aggregation = parse_aggregation(j.at("aggregation").get<std::string>());
  if (j.contains("fusion")) j.at("fusion").get_to(c.fusion);
  c.aux_description_ccl = j.value("aux_description_ccl", c.aux_description_ccl);
}

struct TrainConfig {
  int epochs = 80;
  double learning_rate = 1e-3;
  int batch_size = 12;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double weight_decay = 1e-2;
  double adam_eps = 1e-8;
  double grad_clip = 5.0;  // global L2 norm; <= 0 disables
  bool cosine_decay = false;
  bool class_weighting = false;
  /// 0 means "same as the Stage-2 value".
  int stage1_epochs = 0;
  double stage1_learning_rate = 0.0;
  std::uint64_t seed = 0;
  LossConfig loss;
  AblationMask ablation;

  int pretrain_epochs() const { return stage1_epochs > 0 ? stage1_epochs : epochs; }
  double pretrain_lr() const { return stage1_learning_rate > 0.0 ? stage1_learning_rate : learning_rate; }

  void validate() const {
    if (epochs < 1) throw Error(Errc::InvalidConfig, "epochs must be >= 1");
    if (batch_size < 2) throw Error(Errc::InvalidConfig, "batch_size must be >= 2");
    if (!(learning_rate > 0.0)) throw Error(Errc::InvalidConfig, "learning_rate must be > 0");
    if (!(beta1 >= 0.0 && beta1 < 1.0 && beta2 >= 0.0 && beta2 < 1.0))
      throw Error(Errc::InvalidConfig, "betas must lie in [0, 1)");
    if (weight_decay < 0.0 || stage1_epochs < 0 || stage1_learning_rate < 0.0)
      throw Error(Errc::InvalidConfig, "negative optimizer setting");
    loss.validate();
    ablation.validate();
  }
};

inline void to_json(json& j, const TrainConfig& c) {
  j = {{"epochs", c.epochs},
       {"learning_rate", c.learning_rate},
       {"batch_size", c.batch_size},
       {"beta1", c.beta1},
       {"beta2", c.beta2},
       {"weight_decay", c.weight_decay},
       {"adam_eps", c.adam_eps},
       {"grad_clip", c.grad_clip},
       {"cosine_decay", c.cosine_decay},
       {"class_weighting", c.class_weighting},
       {"stage1_epochs", c.stage1_epochs},
       {"stage1_learning_rate", c.stage1_learning_rate},
       {"loss", c.loss},
       {"ablation", c.ablation}};
}

inline void from_json(const json& j, TrainConfig& c) {
  c.epochs = j.value("epochs", c.epochs);
  c.learning_rate = j.value("learning_rate", c.learning_rate);
  c.batch_size = j.value("batch_size", c.batch_size);
  c.beta1 = j.value("beta1", c.beta1);
  c.beta2 = j.value("beta2", c.beta2);
  c.weight_decay = j.value("weight_decay", c.weight_decay);
  c.adam_eps = j.value("adam_eps", c.adam_eps);
  c.grad_clip = j.value("grad_clip", c.grad_clip);
  c.cosine_decay = j.value("cosine_decay", c.cosine_decay);
  c.class_weighting = j.value("class_weighting", c.class_weighting);
  c.stage1_epochs = j.value("stage1_epochs", c.stage1_epochs);
  c.stage1_learning_rate = j.value("stage1_learning_rate", c.stage1_learning_rate);
  if (j.contains("loss")) j.at("loss").get_to(c.loss);
  if (j.contains("ablation")) j.at("ablation").get_to(c.ablation);
}

/// Everything one `pmlf` invocation needs. `seed` lives at the top level of the
/// JSON and drives the split, initialization, shuffling and dropout streams.
struct RunConfig {
  synth::SynthConfig synth;
  std::array<double, 3> split_ratios{0.6, 0.2, 0.2};
  std::vector<DiagnosisLabel> classes = kDefaultClassSet;
  ModelConfig model;
  TrainConfig train;

  void validate() const {
    model.validate();
    train.validate();
    if (classes.size() < 2) throw Error(Errc::InvalidConfig, "need at least 2 classes");
    std::set<DiagnosisLabel> uniq(classes.begin(), classes.end());
    if (uniq.size() != classes.size()) throw Error(Errc::InvalidConfig, "duplicate class in class set");
  }
};

inline void to_json(json& j, const RunConfig& c) {
  std::vector<std::string> cls;
  for (auto l : c.classes) cls.push_back(to_string(l));
  j = {{"seed", c.train.seed},
       {"classes", cls},
       {"split", {{"ratios", c.split_ratios}}},
       {"synth", c.synth},
       {"model", c.model},
       {"train", c.train}};
}

inline void from_json(const json& j, RunConfig& c) {
  if (j.contains("synth")) j.at("synth").get_to(c.synth);
  if (j.contains("split")) c.split_ratios = j.at("split").value("ratios", c.split_ratios);
  if (j.contains("classes")) {
    c.classes.clear();
    for (const auto& s : j.at("classes")) c.classes.push_back(parse_label(s.get<std::string>()));
  }
  if (j.contains("model")) j.at("model").get_to(c.model);
  if (j.contains("train")) j.at("train").get_to(c.train);
  c.train.seed = j.value("seed", c.train.seed);
}

/// Parses a config document, wrapping every failure as ConfigError.
inline RunConfig config_from_json(const json& j) {
  RunConfig c;
  try {
    c = j.get<RunConfig>();
  } catch (const Error& e) {
    throw Error(Errc::ConfigError, std::string("config: ") + e.what());
  } catch (const std::exception& e) {
    throw Error(Errc::ConfigError, std::string("config: ") + e.what());
  }
  try {
    c.validate();
  } catch (const Error& e) {
    throw Error(Errc::ConfigError, std::string("config: ") + e.what());
  }
  return c;
}

inline json read_json_file(const std::filesystem::path& path) {
  std::ifstream is(path);
  if (!is) throw Error(Errc::NotFound, "config file not found: " + path.string());
  try {
    return json::parse(is);
  } catch (const std::exception& e) {
    throw Error(Errc::ParseError, path.string() + ": " + e.what());
  }
}

/// `a.b.c=value`: the path must already exist in `doc` (after defaults are
/// filled in). The value is parsed as JSON when possible, else taken as a string.
inline void apply_override(json& doc, const std::string& assignment) {
  const auto eq = assignment.find('=');
  if (eq == std::string::npos || eq == 0)
    throw Error(Errc::ConfigError, "override '" + assignment + "' is not key=value");
  const std::string key = assignment.substr(0, eq);
  const std::string raw = assignment.substr(eq + 1);
  json* node = &doc;
  std::stringstream ks(key);
  std::string part;
  while (std::getline(ks, part, '.')) {
    if (!node->is_object() || !node->contains(part))
      throw Error(Errc::ConfigError, "override key '" + key + "' does not exist");
    node = &(*node)[part];
  }
  json value = json::parse(raw, nullptr, false);
  if (value.is_discarded()) value = raw;
  *node = value;
}

/// PMLF_SEED, when set to an integer, replaces the config seed.
inline void apply_env_seed(RunConfig& c) {
  const char* s = std::getenv("PMLF_SEED");
  if (!s || !*s) return;
  char* end = nullptr;
  const unsigned long long v = std::strtoull(s, &end, 10);
  if (*end != '\0') throw Error(Errc::ConfigError, std::string("PMLF_SEED is not an integer: ") + s);
  c.train.seed = v;
}

/// Defaults, then the file (if any), then overrides, then PMLF_SEED.
inline RunConfig load_run_config(const std::filesystem::path& path, const std::vector<std::string>& overrides = {}) {
  json doc = RunConfig{};
  if (!path.empty()) doc.merge_patch(read_json_file(path));
  for (const auto& o : overrides) apply_override(doc, o);
  RunConfig c = config_from_json(doc);
  apply_env_seed(c);
  return c;
}

}  // namespace pmlf
