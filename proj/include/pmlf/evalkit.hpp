#pragma once

// Ablation harness, comparison tables and embedding export.

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <map>
#include <optional>
#include <set>
#include <sstream>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "pmlf/metrics.hpp"
#include "pmlf/trainer.hpp"

namespace pmlf::eval {

namespace fs = std::filesystem;
using json = nlohmann::json;

enum class AblationKind : std::uint8_t { PARADIGM, MODALITY, MODULE, BACKBONE, TASK };

inline std::string to_string(AblationKind k) {
  switch (k) {
    case AblationKind::PARADIGM: return "PARADIGM";
    case AblationKind::MODALITY: return "MODALITY";
    case AblationKind::MODULE: return "MODULE";
    case AblationKind::BACKBONE: return "BACKBONE";
    case AblationKind::TASK: return "TASK";
  }
  return "?";
}

inline AblationKind parse_ablation_kind(std::string_view s) {
  std::string u(s);
  std::transform(u.begin(), u.end(), u.begin(), [](unsigned char c) { return std::toupper(c); });
  for (auto k : {AblationKind::PARADIGM, AblationKind::MODALITY, AblationKind::MODULE, AblationKind::BACKBONE,
                 AblationKind::TASK})
    if (u == to_string(k)) return k;
  throw Error(Errc::InvalidSpec, "unknown ablation kind '" + std::string(s) + "'");
}

/// One row of a comparison: a mask applied on top of the base config, and for
/// TASK / BACKBONE kinds a class set or backbone override.
struct AblationVariant {
  std::string name;
  AblationMask mask;
  std::vector<DiagnosisLabel> classes;  // empty = base config's classes
  std::optional<nets::BackboneKind> backbone;
};

struct AblationSpec {
  AblationKind kind = AblationKind::MODULE;
  std::vector<AblationVariant> variants;
  std::vector<std::uint64_t> seeds;

  void validate() const {
    if (variants.empty()) throw Error(Errc::InvalidSpec, "ablation spec has no variants");
    if (seeds.empty()) throw Error(Errc::InvalidSpec, "ablation spec has no seeds");
    std::set<std::string> names;
    for (const auto& v : variants) {
      if (v.name.empty() || !names.insert(v.name).second)
        throw Error(Errc::InvalidSpec, "variant names must be nonempty and unique");
      try {
        v.mask.validate();
      } catch (const Error& e) {
        throw Error(Errc::InvalidSpec, v.name + ": " + e.what());
      }
      const bool has_classes = !v.classes.empty();
      const bool has_backbone = v.backbone.has_value();
      if (has_classes && kind != AblationKind::TASK)
        throw Error(Errc::InvalidSpec, v.name + ": class sets are only valid for TASK specs");
      if (has_backbone && kind != AblationKind::BACKBONE)
        throw Error(Errc::InvalidSpec, v.name + ": backbone overrides are only valid for BACKBONE specs");
      if (kind == AblationKind::TASK && !has_classes) throw Error(Errc::InvalidSpec, v.name + ": TASK variant needs classes");
      if (kind == AblationKind::BACKBONE && !has_backbone)
        throw Error(Errc::InvalidSpec, v.name + ": BACKBONE variant needs a backbone");
      if (has_classes && v.classes.size() < 2) throw Error(Errc::InvalidSpec, v.name + ": needs at least 2 classes");
      if (kind == AblationKind::PARADIGM && (!v.mask.dropped_modalities.empty() || !v.mask.disabled_modules.empty()))
        throw Error(Errc::InvalidSpec, v.name + ": PARADIGM variants may only drop paradigms");
      if (kind == AblationKind::MODALITY && (!v.mask.dropped_paradigms.empty() || !v.mask.disabled_modules.empty()))
        throw Error(Errc::InvalidSpec, v.name + ": MODALITY variants may only drop modalities");
      if (kind == AblationKind::MODULE && (!v.mask.dropped_paradigms.empty() || !v.mask.dropped_modalities.empty()))
        throw Error(Errc::InvalidSpec, v.name + ": MODULE variants may only disable modules");
    }
  }
};

inline std::string paradigm_title(ParadigmId p) {
  switch (p) {
    case ParadigmId::MS1: return "MS1";
    case ParadigmId::US: return "US";
    case ParadigmId::READING: return "Reading";
    case ParadigmId::MS2: return "MS2";
    case ParadigmId::INTERVIEW: return "Interview";
  }
  return "?";
}

/// Built-in grids: `w/o <paradigm>` rows, modality subsets, module removals,
/// backbone swaps, and the 4/3/2-class tasks.
inline AblationSpec preset_spec(AblationKind kind, std::vector<std::uint64_t> seeds,
                                const std::vector<DiagnosisLabel>& base_classes = kDefaultClassSet) {
  AblationSpec s;
  s.kind = kind;
  s.seeds = std::move(seeds);
  switch (kind) {
    case AblationKind::PARADIGM:
      s.variants.push_back({"Full", {}, {}, {}});
      for (auto p : kAllParadigms) {
        AblationMask m;
        m.dropped_paradigms = {p};
        s.variants.push_back({"w/o " + paradigm_title(p), m, {}, {}});
      }
      break;
    case AblationKind::MODALITY: {
      const std::vector<std::pair<std::string, std::set<Modality>>> combos = {
          {"V", {Modality::AUDIO, Modality::TEXT}},
          {"A", {Modality::VIDEO, Modality::TEXT}},
          {"T", {Modality::VIDEO, Modality::AUDIO}},
          {"V+A", {Modality::TEXT}},
          {"V+T", {Modality::AUDIO}},
          {"A+T", {Modality::VIDEO}},
          {"V+A+T", {}}};
      for (const auto& [name, drop] : combos) {
        AblationMask m;
        m.dropped_modalities = drop;
        s.variants.push_back({name, m, {}, {}});
      }
      break;
    }
    case AblationKind::MODULE: {
      const std::vector<std::pair<std::string, std::set<Module>>> rows = {
          {"Full", {}}, {"w/o PT", {Module::PT}}, {"w/o CA", {Module::CA}}, {"w/o CL", {Module::CL}},
          {"w/o CA+CL", {Module::CA, Module::CL}}};
      for (const auto& [name, mods] : rows) {
        AblationMask m;
        m.disabled_modules = mods;
        s.variants.push_back({name, m, {}, {}});
      }
      break;
    }
    case AblationKind::BACKBONE:
      for (auto k : {nets::BackboneKind::RESIDUAL_CONV, nets::BackboneKind::TRANSFORMER, nets::BackboneKind::HYBRID})
        s.variants.push_back({nets::to_string(k), {}, {}, k});
      break;
    case AblationKind::TASK: {
      using L = DiagnosisLabel;
      s.variants.push_back({join_labels(base_classes, "/"), {}, base_classes, {}});
      const std::vector<std::vector<L>> sets = {{L::MD, L::ANX, L::SC}, {L::MD, L::ANX}, {L::MD, L::SC}, {L::ANX, L::SC}};
      for (const auto& cs : sets) s.variants.push_back({join_labels(cs, "/"), {}, cs, {}});
      break;
    }
  }
  return s;
}

/// `{"kind": "MODULE", "seeds": [0,1], "variants": [{"name": "...",
///   "dropped_paradigms": [...], "dropped_modalities": [...], "disabled_modules": [...],
///   "classes": [...], "backbone": "HYBRID"}]}`. Omitting `variants` uses the preset grid.
inline AblationSpec spec_from_json(const json& j, const std::vector<DiagnosisLabel>& base_classes = kDefaultClassSet) {
  try {
    const auto kind = parse_ablation_kind(j.at("kind").get<std::string>());
    auto seeds = j.value("seeds", std::vector<std::uint64_t>{0});
    if (!j.contains("variants")) return preset_spec(kind, seeds, base_classes);
    AblationSpec s;
    s.kind = kind;
    s.seeds = seeds;
    for (const auto& v : j.at("variants")) {
      AblationVariant av;
      av.name = v.at("name").get<std::string>();
      av.mask = v.get<AblationMask>();
      for (const auto& c : v.value("classes", json::array())) av.classes.push_back(parse_label(c.get<std::string>()));
      if (v.contains("backbone")) av.backbone = nets::parse_backbone(v.at("backbone").get<std::string>());
      s.variants.push_back(std::move(av));
    }
    return s;
  } catch (const Error& e) {
    if (e.code() == Errc::InvalidSpec) throw;
    throw Error(Errc::InvalidSpec, std::string("ablation spec: ") + e.what());
  } catch (const std::exception& e) {
    throw Error(Errc::InvalidSpec, std::string("ablation spec: ") + e.what());
  }
}

// ---------------------------------------------------------------------------
// Tables

struct AblationRow {
  std::string variant;
  std::uint64_t seed = 0;
  MetricsReport report;
  int best_epoch = 0;
};

struct Summary {
  double mean = 0.0;
  double std = 0.0;  // population std over seeds
};

struct AblationTable {
  AblationKind kind = AblationKind::MODULE;
  std::vector<std::string> variants;  // display order
  std::vector<AblationRow> rows;

  std::vector<const AblationRow*> rows_for(const std::string& v) const {
    std::vector<const AblationRow*> out;
    for (const auto& r : rows)
      if (r.variant == v) out.push_back(&r);
    return out;
  }

  Summary summarize(const std::string& v, double MetricsReport::*field) const {
    const auto rs = rows_for(v);
    if (rs.empty()) throw Error(Errc::NotFound, "no rows for variant '" + v + "'");
    Summary s;
    for (const auto* r : rs) s.mean += r->report.*field;
    s.mean /= static_cast<double>(rs.size());
    for (const auto* r : rs) s.std += (r->report.*field - s.mean) * (r->report.*field - s.mean);
    s.std = std::sqrt(s.std / static_cast<double>(rs.size()));
    return s;
  }
};

struct TableColumn {
  const char* title;
  double MetricsReport::*field;
};

inline const std::vector<TableColumn>& table_columns() {
  static const std::vector<TableColumn> cols = {
      {"ACC", &MetricsReport::accuracy},       {"P(macro)", &MetricsReport::macro_p},
      {"R(macro)", &MetricsReport::macro_r},   {"F1(macro)", &MetricsReport::macro_f1},
      {"P(wtd)", &MetricsReport::weighted_p},  {"R(wtd)", &MetricsReport::weighted_r},
      {"F1(wtd)", &MetricsReport::weighted_f1}};
  return cols;
}

/// Mean ± std over seeds, two decimals, columns padded to a common width.
inline std::string table_to_text(const AblationTable& t) {
  std::vector<std::vector<std::string>> cells;
  std::vector<std::string> head = {"Variant", "Seeds"};
  for (const auto& c : table_columns()) head.push_back(c.title);
  cells.push_back(head);
  char buf[64];
  for (const auto& v : t.variants) {
    std::vector<std::string> row = {v, std::to_string(t.rows_for(v).size())};
    for (const auto& c : table_columns()) {
      const auto s = t.summarize(v, c.field);
      std::snprintf(buf, sizeof buf, "%.2f±%.2f", s.mean, s.std);
      row.push_back(buf);
    }
    cells.push_back(row);
  }
  auto width = [](const std::string& s) {
    std::size_t w = 0;  // count code points, not bytes
    for (unsigned char ch : s) w += (ch & 0xC0) != 0x80;
    return w;
  };
  std::vector<std::size_t> w(head.size(), 0);
  for (const auto& r : cells)
    for (std::size_t i = 0; i < r.size(); ++i) w[i] = std::max(w[i], width(r[i]));
  std::ostringstream os;
  os << "# " << to_string(t.kind) << " ablation (mean±std over seeds, percent)\n";
  for (std::size_t k = 0; k < cells.size(); ++k) {
    for (std::size_t i = 0; i < cells[k].size(); ++i) {
      const auto pad = w[i] - width(cells[k][i]);
      if (i == 0)
        os << cells[k][i] << std::string(pad, ' ');
      else
        os << "  " << std::string(pad, ' ') << cells[k][i];
    }
    os << '\n';
    if (k == 0) {
      std::size_t total = 0;
      for (auto x : w) total += x + 2;
      os << std::string(total - 2, '-') << '\n';
    }
  }
  return os.str();
}

/// One line per (variant, seed) run, then one summary line per variant.
inline std::string table_to_jsonl(const AblationTable& t) {
  std::string out;
  for (const auto& r : t.rows)
    out += json{{"kind", to_string(t.kind)}, {"variant", r.variant}, {"seed", r.seed},
                {"best_epoch", r.best_epoch}, {"metrics", to_json(r.report)}}
               .dump() +
           "\n";
  for (const auto& v : t.variants) {
    json s = json::object();
    for (const auto& c : table_columns()) {
      const auto m = t.summarize(v, c.field);
      s[c.title] = {{"mean", round2(m.mean)}, {"std", round2(m.std)}};
    }
    out += json{{"kind", to_string(t.kind)}, {"variant", v}, {"summary", s}}.dump() + "\n";
  }
  return out;
}

// ---------------------------------------------------------------------------
// Harness

inline std::string slug(const std::string& s) {
  std::string out;
  for (unsigned char c : s) out.push_back(std::isalnum(c) ? static_cast<char>(std::tolower(c)) : '_');
  return out;
}

inline RunConfig variant_config(const RunConfig& base, const AblationVariant& v, std::uint64_t seed) {
  RunConfig c = base;
  c.train.seed = seed;
  c.train.ablation = v.mask;
  if (!v.classes.empty()) c.classes = v.classes;
  if (v.backbone) {
    for (auto* e : {&c.model.video, &c.model.audio, &c.model.text}) {
      e->kind = *v.backbone;
      if (*v.backbone != nets::BackboneKind::TRANSFORMER) e->pooling = nets::Pooling::MEAN;
    }
  }
  c.validate();
  return c;
}

/// What a Stage-1 run depends on; variants sharing it share the checkpoint.
inline std::string stage1_key(const RunConfig& c) {
  json t = c.train;
  t.erase("ablation");
  std::vector<std::string> dropped;
  for (auto p : c.train.ablation.dropped_paradigms) dropped.push_back(to_string(p));
  json k = {{"seed", c.train.seed},          {"classes", json(c).at("classes")},
            {"split", c.split_ratios},       {"video", c.model.video},
            {"d_z", c.model.d_z},            {"d_desc", c.model.d_desc},
            {"train", t},                    {"dropped_paradigms", dropped}};
  return k.dump();
}

/// Trains and tests every variant under every seed. Results (and, when `out_dir`
/// is given, per-run checkpoints/logs plus table.txt / table.jsonl) are ordered
/// by the spec, independent of execution order.
inline AblationTable run_ablation(const AblationSpec& spec, const RunConfig& base, const fs::path& manifest_path,
                                  const fs::path& out_dir = {}, const RunOptions& opt = {}) {
  spec.validate();
  const auto manifest = data::load_manifest(manifest_path);
  const auto root = manifest_path.parent_path();
  AblationTable table;
  table.kind = spec.kind;
  for (const auto& v : spec.variants) table.variants.push_back(v.name);

  std::map<std::string, PreparedData> data_cache;  // key: classes + seed
  std::map<std::string, Checkpoint> stage1_cache;
  for (const auto& v : spec.variants) {
    for (auto seed : spec.seeds) {
      const RunConfig cfg = variant_config(base, v, seed);
      const std::string dkey = join_labels(cfg.classes) + "#" + std::to_string(seed);
      auto dit = data_cache.find(dkey);
      if (dit == data_cache.end()) dit = data_cache.emplace(dkey, prepare_data(manifest, root, cfg)).first;
      const PreparedData& data = dit->second;
      const fs::path run_dir = out_dir.empty() ? fs::path{} : out_dir / slug(v.name) / ("seed" + std::to_string(seed));
      if (opt.progress) *opt.progress << "ablate " << v.name << " seed " << seed << '\n';

      const Checkpoint* s1 = nullptr;
      if (!cfg.train.ablation.disabled(Module::PT)) {
        const auto key = stage1_key(cfg);
        auto it = stage1_cache.find(key);
        if (it == stage1_cache.end()) {
          const auto descs = generate_descriptions(data.raw, data.ids(data::Split::TRAIN));
          it = stage1_cache.emplace(key, run_stage1(data, descs, cfg, run_dir, opt).checkpoint).first;
        }
        s1 = &it->second;
      }
      auto res = run_stage2(data, s1, cfg, run_dir, opt);
      table.rows.push_back({v.name, seed, res.test, res.best_epoch});
    }
  }
  if (!out_dir.empty()) {
    fs::create_directories(out_dir);
    std::ofstream txt(out_dir / "table.txt", std::ios::binary | std::ios::trunc);
    std::ofstream jl(out_dir / "table.jsonl", std::ios::binary | std::ios::trunc);
    if (!txt || !jl) throw Error(Errc::IoError, "cannot write tables under " + out_dir.string());
    txt << table_to_text(table);
    jl << table_to_jsonl(table);
  }
  return table;
}

// ---------------------------------------------------------------------------
// Embedding export

/// Writes `d=<dim>` then one `sample_id<TAB>label<TAB>v1..vd` line per sample of
/// the split (fused representation, `%.9g`). Returns the number of rows.
inline std::size_t export_embeddings(const Checkpoint& c, const fs::path& manifest_path, data::Split split,
                                     const fs::path& out) {
  if (c.stage != Stage::STAGE2) throw Error(Errc::StageMismatch, "embedding export needs a STAGE2 checkpoint");
  auto lm = load_stage2_model(c);
  const auto d = prepare_for_checkpoint(lm, data::load_manifest(manifest_path), manifest_path.parent_path());
  const auto ids = d.ids(split);
  if (ids.empty()) throw Error(Errc::EmptySplit, to_string(split) + " split is empty");
  std::ostringstream os;
  os << "d=" << lm.cfg.model.fusion.d_fused << '\n';
  ag::NoGradGuard ng;
  char buf[32];
  for (const auto& id : ids) {
    const auto& s = d.std.sample(id);
    const auto f = lm.model->forward(s, lm.cfg.train.ablation);
    os << id << '\t' << to_string(s.label);
    const Matrix& v = f.fused.value();
    for (Eigen::Index j = 0; j < v.cols(); ++j) {
      std::snprintf(buf, sizeof buf, "%.9g", v(0, j));
      os << '\t' << buf;
    }
    os << '\n';
  }
  if (out.has_parent_path()) fs::create_directories(out.parent_path());
  std::ofstream f(out, std::ios::binary | std::ios::trunc);
  if (!f) throw Error(Errc::IoError, "cannot write " + out.string());
  f << os.str();
  return ids.size();
}

}  // namespace pmlf::eval
