// pmlf: generate synthetic data, pretrain, train, evaluate, ablate, export.
//
// Exit status: 0 ok, 1 usage error, 2 runtime failure (one-line diagnostic).

#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <string>
#include <vector>

#include <CLI11.hpp>

#include "pmlf/config.hpp"
#include "pmlf/data.hpp"
#include "pmlf/describe.hpp"
#include "pmlf/evalkit.hpp"
#include "pmlf/synth.hpp"
#include "pmlf/trainer.hpp"

namespace fs = std::filesystem;
using namespace pmlf;

namespace {

const char* kCommands = "generate, pretrain, train, evaluate, ablate, export-embeddings, validate";

// Accepts a manifest file or a directory holding manifest.jsonl.
fs::path manifest_path(const std::string& data) {
  fs::path p(data);
  if (fs::is_directory(p)) p /= "manifest.jsonl";
  return p;
}

void write_text(const fs::path& path, const std::string& text) {
  if (path.has_parent_path()) fs::create_directories(path.parent_path());
  std::ofstream os(path, std::ios::binary | std::ios::trunc);
  if (!os) throw Error(Errc::IoError, "cannot write " + path.string());
  os << text;
}

struct Common {
  std::string config;
  std::vector<std::string> overrides;

  void attach(CLI::App* app, bool config_required) {
    auto* opt = app->add_option("--config", config, "run configuration (JSON)");
    if (config_required) opt->required();
    app->add_option("--set", overrides, "override a config key, e.g. train.epochs=20 (repeatable)");
  }
  RunConfig load() const { return load_run_config(config, overrides); }
};

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"pmlf: paradigm-aware multimodal screening pipeline"};
  app.name("pmlf");
  app.require_subcommand(1);
  app.footer(std::string("commands: ") + kCommands + "\nenv: PMLF_SEED=<int> overrides the config seed");

  std::string running = "pmlf";
  RunOptions ropt{&std::cerr};

  // generate ------------------------------------------------------------------
  auto* gen = app.add_subcommand("generate", "write a synthetic manifest and feature store");
  Common gen_c;
  std::string gen_out, gen_preset;
  gen_c.attach(gen, false);
  gen->add_option("--out", gen_out, "output directory")->required();
  gen->add_option("--preset", gen_preset, "start from a built-in data profile instead of defaults")
      ->check(CLI::IsMember({"strong", "null"}));

  // validate ------------------------------------------------------------------
  auto* val = app.add_subcommand("validate", "check a manifest against the collection protocol");
  std::string val_data;
  val->add_option("--data", val_data, "manifest file or directory")->required();

  // pretrain ------------------------------------------------------------------
  auto* pre = app.add_subcommand("pretrain", "stage 1: align video and description embeddings");
  Common pre_c;
  std::string pre_data, pre_out, pre_desc, pre_prompts;
  pre_c.attach(pre, true);
  pre->add_option("--data", pre_data, "manifest file or directory")->required();
  pre->add_option("--out", pre_out, "output directory")->required();
  pre->add_option("--descriptions", pre_desc, "description JSONL to use instead of generating one");
  pre->add_option("--prompts", pre_prompts, "prompt template file (PARADIGM: template per line)");

  // train ---------------------------------------------------------------------
  auto* tr = app.add_subcommand("train", "stage 2: multimodal training; reports test metrics");
  Common tr_c;
  std::string tr_data, tr_out, tr_stage1;
  tr_c.attach(tr, true);
  tr->add_option("--data", tr_data, "manifest file or directory")->required();
  tr->add_option("--stage1", tr_stage1, "stage-1 checkpoint, or 'none' when PT is disabled")->required();
  tr->add_option("--out", tr_out, "output directory")->required();

  // evaluate ------------------------------------------------------------------
  auto* ev = app.add_subcommand("evaluate", "score a stage-2 checkpoint on one split");
  std::string ev_ckpt, ev_data, ev_split = "TEST", ev_classes, ev_out;
  ev->add_option("--ckpt", ev_ckpt, "stage-2 checkpoint")->required();
  ev->add_option("--data", ev_data, "manifest file or directory")->required();
  ev->add_option("--split", ev_split, "TRAIN, VAL or TEST")->capture_default_str();
  ev->add_option("--classes", ev_classes, "comma-separated class set; must match the model (default: model's)");
  ev->add_option("--out", ev_out, "also write the metrics JSON here");

  // ablate --------------------------------------------------------------------
  auto* ab = app.add_subcommand("ablate", "train and test a grid of variants over several seeds");
  Common ab_c;
  std::string ab_spec, ab_data, ab_out;
  std::vector<std::uint64_t> ab_seeds;
  ab_c.attach(ab, false);
  ab->add_option("--spec", ab_spec, "paradigm|modality|module|backbone|task, or a JSON spec file")->required();
  ab->add_option("--data", ab_data, "manifest file or directory")->required();
  ab->add_option("--out", ab_out, "output directory (table.txt, table.jsonl, per-run artifacts)")->required();
  ab->add_option("--seeds", ab_seeds, "seeds (default: the config seed)")->delimiter(',');

  // export-embeddings ---------------------------------------------------------
  auto* ex = app.add_subcommand("export-embeddings", "write fused representations of one split");
  std::string ex_ckpt, ex_data, ex_split = "TEST", ex_out;
  ex->add_option("--ckpt", ex_ckpt, "stage-2 checkpoint")->required();
  ex->add_option("--data", ex_data, "manifest file or directory")->required();
  ex->add_option("--split", ex_split, "TRAIN, VAL or TEST")->capture_default_str();
  ex->add_option("--out", ex_out, "output file")->required();

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e);
  } catch (const CLI::CallForAllHelp& e) {
    return app.exit(e);
  } catch (const CLI::ParseError& e) {
    std::cerr << "pmlf: " << e.what() << "\n"
              << "usage: pmlf <command> [options]   (pmlf <command> --help for details)\n"
              << "commands: " << kCommands << "\n";
    return 1;
  }

  try {
    if (*gen) {
      running = "generate";
      synth::SynthConfig sc;
      if (gen_preset == "strong") sc = synth::strong_signal_config();
      if (gen_preset == "null") sc = synth::null_signal_config();
      if (!gen_c.config.empty() || !gen_c.overrides.empty()) {
        json doc = RunConfig{};
        doc["synth"] = sc;
        if (!gen_c.config.empty()) doc.merge_patch(read_json_file(gen_c.config));
        for (const auto& o : gen_c.overrides) apply_override(doc, o);
        sc = config_from_json(doc).synth;
      }
      const auto m = synth::generate_synthetic_dataset(sc, gen_out);
      std::cerr << "generate: " << m.samples.size() << " samples written to " << gen_out << "\n";
    } else if (*val) {
      running = "validate";
      const auto m = data::load_manifest(manifest_path(val_data));
      const auto report = data::validate_manifest(m);
      for (const auto& v : report) std::cout << v.describe() << "\n";
      if (!report.empty())
        throw Error(Errc::ValidationFailed, std::to_string(report.size()) + " violations, first: " + report.front().describe());
      std::cout << "valid: " << m.samples.size() << " samples\n";
    } else if (*pre) {
      running = "pretrain";
      const auto cfg = pre_c.load();
      const auto data = prepare_data(manifest_path(pre_data), cfg);
      std::vector<featurizer::DescriptionRecord> descs;
      if (!pre_desc.empty()) {
        descs = featurizer::load_descriptions(pre_desc);
      } else {
        std::map<ParadigmId, featurizer::ParadigmPrompt> prompts;
        if (!pre_prompts.empty()) prompts = featurizer::load_prompts(pre_prompts);
        descs = generate_descriptions(data.raw, data.ids(data::Split::TRAIN), prompts);
      }
      fs::create_directories(pre_out);
      featurizer::save_descriptions(descs, fs::path(pre_out) / "descriptions.jsonl");
      const auto res = run_stage1(data, descs, cfg, pre_out, ropt);
      std::cout << json{{"stage", "STAGE1"}, {"final_l_ccl", res.epoch_loss.back()}}.dump() << "\n";
    } else if (*tr) {
      running = "train";
      const auto cfg = tr_c.load();
      const auto data = prepare_data(manifest_path(tr_data), cfg);
      std::optional<Checkpoint> s1;
      if (tr_stage1 != "none") s1 = load_checkpoint(tr_stage1);
      const auto res = run_stage2(data, s1 ? &*s1 : nullptr, cfg, tr_out, ropt);
      std::cout << res.checkpoint.metrics.dump() << "\n";
    } else if (*ev) {
      running = "evaluate";
      const auto ck = load_checkpoint(ev_ckpt);
      std::vector<DiagnosisLabel> classes;
      if (!ev_classes.empty()) classes = parse_label_list(ev_classes);
      const auto e = evaluate_checkpoint(ck, manifest_path(ev_data), data::parse_split(ev_split), classes);
      const auto j = eval::to_json(e.report).dump();
      if (!ev_out.empty()) write_text(ev_out, j + "\n");
      std::cout << j << "\n";
    } else if (*ab) {
      running = "ablate";
      auto cfg = ab_c.load();
      if (ab_seeds.empty()) ab_seeds = {cfg.train.seed};
      eval::AblationSpec spec;
      if (fs::is_regular_file(ab_spec)) {
        auto j = read_json_file(ab_spec);
        if (!j.contains("seeds")) j["seeds"] = ab_seeds;
        spec = eval::spec_from_json(j, cfg.classes);
      } else {
        spec = eval::preset_spec(eval::parse_ablation_kind(ab_spec), ab_seeds, cfg.classes);
      }
      const auto table = eval::run_ablation(spec, cfg, manifest_path(ab_data), ab_out, ropt);
      std::cout << eval::table_to_text(table);
    } else if (*ex) {
      running = "export-embeddings";
      const auto ck = load_checkpoint(ex_ckpt);
      const auto n = eval::export_embeddings(ck, manifest_path(ex_data), data::parse_split(ex_split), ex_out);
      std::cerr << "export-embeddings: " << n << " rows written to " << ex_out << "\n";
    }
  } catch (const std::exception& e) {  // pmlf::Error messages lead with the error code
    std::cerr << "pmlf " << running << ": " << e.what() << "\n";
    return 2;
  }
  return 0;
}
