#pragma once

// The two trainable networks. Stage 1 aligns a shared video encoder with
// description embeddings; Stage 2 clones that encoder into one extractor per
// paradigm and adds audio/text branches, fusion and the classifier.

#include <array>
#include <map>
#include <optional>
#include <set>
#include <string>
#include <vector>

#include "pmlf/autograd.hpp"
#include "pmlf/config.hpp"
#include "pmlf/dataset.hpp"
#include "pmlf/describe.hpp"
#include "pmlf/fuse.hpp"
#include "pmlf/nets.hpp"

namespace pmlf {

using ag::Var;
using nets::ParamList;

// ---------------------------------------------------------------------------
// Encoder-level operations

/// F_{i,j}: one paradigm's frames through that paradigm's extractor.
inline Var encode_video_task(const Matrix& seq, ParadigmId paradigm,
                             const std::array<nets::Backbone, 5>& extractors, Rng* rng = nullptr) {
  return extractors[index_of(paradigm)].forward(seq, rng);
}

inline nets::VideoAggregator::Result aggregate_video(const std::map<ParadigmId, Var>& task_features,
                                                     const std::set<ParadigmId>& mask,
                                                     const nets::VideoAggregator& aggregator) {
  return aggregator(task_features, mask);
}

inline Var encode_audio(const Matrix& seq, const nets::Backbone& encoder, Rng* rng = nullptr) {
  return encoder.forward(seq, rng);
}

inline Var encode_text(const Matrix& seq, const nets::Backbone& encoder, Rng* rng = nullptr) {
  return encoder.forward(seq, rng);
}

/// Frozen description features: mean over the embedder's token rows (1 x d_desc).
inline Matrix description_features(const featurizer::DescriptionRecord& desc,
                                   const featurizer::TextEmbeddingProvider& provider) {
  return featurizer::embed_text(desc.text, provider).tokens.colwise().mean();
}

inline Var project(const Var& feature, const nets::ProjectionHead& head) { return head(feature); }

inline Var encode_description(const featurizer::DescriptionRecord& desc,
                              const featurizer::TextEmbeddingProvider& provider, const nets::ProjectionHead& head) {
  return project(ag::constant(description_features(desc, provider)), head);
}

// ---------------------------------------------------------------------------

struct Stage1Model {
  nets::Backbone video_encoder;
  nets::ProjectionHead video_head;
  nets::ProjectionHead desc_head;

  Stage1Model(const ModelConfig& mc, Rng& rng)
      : video_encoder(mc.video, rng),
        video_head(mc.video.d_out, mc.video.d_out, mc.d_z, rng),
        desc_head(mc.d_desc, mc.d_desc, mc.d_z, rng) {}

  ParamList params() {
    ParamList p;
    nets::append(p, "video_encoder.", video_encoder.params());
    nets::append(p, "video_head.", video_head.params());
    nets::append(p, "desc_head.", desc_head.params());
    return p;
  }
};

/// Per-sample Stage-2 forward results.
struct SampleForward {
  std::map<ParadigmId, Var> task_features;
  std::optional<Var> f_video, f_audio, f_text;
  Var fused;
  Var logits;
  std::vector<double> paradigm_weights;
};

class Stage2Model {
 public:
  /// All five extractors start from one shared initialization so that a
  /// Stage-1 encoder and a random one enter Stage 2 the same way.
  Stage2Model(const ModelConfig& mc, const std::vector<DiagnosisLabel>& classes, Rng& rng) : cfg_(mc) {
    nets::Backbone shared(mc.video, rng);
    for (auto& e : extractors) {
      e = nets::Backbone(mc.video, rng);
      nets::copy_params(shared.params(), e.params());
    }
    aggregator = nets::VideoAggregator(mc.video.d_out, mc.aggregation, rng);
    audio_encoder = nets::Backbone(mc.audio, rng);
    text_encoder = nets::Backbone(mc.text, rng);
    const int d = mc.video.d_out;
    fusion = fuse::FusionModule(mc.fusion, {{Modality::VIDEO, d}, {Modality::AUDIO, d}, {Modality::TEXT, d}}, rng);
    classifier = fuse::Classifier(mc.fusion.d_fused, classes, rng);
    if (mc.aux_description_ccl) {
      video_head = nets::ProjectionHead(d, d, mc.d_z, rng);
      desc_head = nets::ProjectionHead(mc.d_desc, mc.d_desc, mc.d_z, rng);
    }
  }

  Stage2Model(const Stage2Model&) = delete;
  Stage2Model& operator=(const Stage2Model&) = delete;

  const ModelConfig& config() const { return cfg_; }

  /// Copies a Stage-1 encoder into every extractor (and the heads, if kept).
  void load_stage1(Stage1Model& s1) {
    for (auto& e : extractors) nets::copy_params(s1.video_encoder.params(), e.params());
    if (cfg_.aux_description_ccl) {
      nets::copy_params(s1.video_head.params(), video_head.params());
      nets::copy_params(s1.desc_head.params(), desc_head.params());
    }
  }

  SampleForward forward(const SampleTensors& s, const AblationMask& mask, Rng* rng = nullptr) const {
    SampleForward out;
    fuse::ModalityInputs in;
    if (!mask.dropped(Modality::VIDEO)) {
      for (auto p : kAllParadigms) {
        if (mask.dropped_paradigms.count(p)) continue;
        const auto& g = s.group(Modality::VIDEO, p);
        if (g.rows() == 0) continue;
        out.task_features[p] = encode_video_task(g, p, extractors, rng);
      }
      if (!out.task_features.empty()) {
        auto r = aggregate_video(out.task_features, mask.dropped_paradigms, aggregator);
        out.f_video = r.pooled;
        out.paradigm_weights = std::move(r.weights);
        in.features[Modality::VIDEO] = r.pooled;
      }
    }
    if (!mask.dropped(Modality::AUDIO)) {
      Matrix seq = speech_sequence(s, Modality::AUDIO, mask.dropped_paradigms);
      if (seq.rows() > 0) {
        out.f_audio = encode_audio(seq, audio_encoder, rng);
        in.features[Modality::AUDIO] = *out.f_audio;
      }
    }
    if (!mask.dropped(Modality::TEXT)) {
      Matrix seq = speech_sequence(s, Modality::TEXT, mask.dropped_paradigms);
      if (seq.rows() > 0) {
        out.f_text = encode_text(seq, text_encoder, rng);
        in.features[Modality::TEXT] = *out.f_text;
      }
    }
    out.fused = fusion(in, mask.dropped_modalities, !mask.disabled(Module::CA));
    out.logits = classifier.logits(out.fused);
    return out;
  }

  ParamList params() {
    ParamList p;
    for (auto q : kAllParadigms) nets::append(p, "extractor." + to_string(q) + ".", extractors[index_of(q)].params());
    nets::append(p, "aggregator.", aggregator.params());
    nets::append(p, "audio_encoder.", audio_encoder.params());
    nets::append(p, "text_encoder.", text_encoder.params());
    nets::append(p, "fusion.", fusion.params());
    nets::append(p, "classifier.", classifier.params());
    if (cfg_.aux_description_ccl) {
      nets::append(p, "video_head.", video_head.params());
      nets::append(p, "desc_head.", desc_head.params());
    }
    return p;
  }

  std::array<nets::Backbone, 5> extractors;
  nets::VideoAggregator aggregator;
  nets::Backbone audio_encoder;
  nets::Backbone text_encoder;
  fuse::FusionModule fusion;
  fuse::Classifier classifier;
  nets::ProjectionHead video_head;
  nets::ProjectionHead desc_head;

 private:
  ModelConfig cfg_;
};

}  // namespace pmlf
