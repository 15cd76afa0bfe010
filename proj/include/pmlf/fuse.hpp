#pragma once

// Modality interaction and fusion. Each available modality vector becomes one
// token; query tokens attend over the token set through a stack of
// cross-attention blocks, and the result is pooled into F^ALL.

#include <algorithm>
#include <map>
#include <set>
#include <vector>

#include <nlohmann/json.hpp>

#include "pmlf/autograd.hpp"
#include "pmlf/nets.hpp"

namespace pmlf::fuse {

using ag::Matrix;
using ag::Var;
using nets::ParamList;

struct FusionConfig {
  int n_heads = 4;
  int n_blocks = 1;
  int d_fused = 64;
  bool residual = true;
  std::vector<Modality> query_order = {Modality::VIDEO, Modality::AUDIO, Modality::TEXT};

  void validate() const {
    if (n_heads < 1 || d_fused < 1 || d_fused % n_heads != 0)
      throw Error(Errc::InvalidConfig, "d_fused must be divisible by n_heads");
    if (n_blocks < 0) throw Error(Errc::InvalidConfig, "n_blocks must be >= 0");
    if (query_order.empty()) throw Error(Errc::InvalidConfig, "query_order is empty");
  }
};

inline void to_json(nlohmann::json& j, const FusionConfig& c) {
  std::vector<std::string> q;
  for (auto m : c.query_order) q.push_back(to_string(m));
  j = {{"n_heads", c.n_heads},
       {"n_blocks", c.n_blocks},
       {"d_fused", c.d_fused},
       {"residual", c.residual},
       {"query_order", q}};
}

inline void from_json(const nlohmann::json& j, FusionConfig& c) {
  c.n_heads = j.value("n_heads", c.n_heads);
  c.n_blocks = j.value("n_blocks", c.n_blocks);
  c.d_fused = j.value("d_fused", c.d_fused);
  c.residual = j.value("residual", c.residual);
  if (j.contains("query_order")) {
    c.query_order.clear();
    for (const auto& s : j.at("query_order")) c.query_order.push_back(parse_modality(s.get<std::string>()));
  }
}

/// One cross-attention block: LN(q + MHA(q, kv)) when residual, else LN(MHA(q, kv)).
struct CrossAttentionBlock {
  nets::MultiHeadAttention attn;
  nets::LayerNorm norm;
  bool residual = true;

  CrossAttentionBlock() = default;
  CrossAttentionBlock(ag::Index d, int heads, bool res, Rng& rng)
      : attn(d, heads, rng), norm(d), residual(res) {}

  Var operator()(const Var& queries, const Var& kv, std::vector<Matrix>* weights = nullptr) const {
    auto a = attn(queries, kv, weights);
    return norm(residual ? ag::add(queries, a) : a);
  }

  ParamList params() {
    ParamList p;
    nets::append(p, "attn.", attn.params());
    nets::append(p, "norm.", norm.params());
    return p;
  }
};

/// Standalone cross-attention op: n query tokens over m key/value tokens.
inline Var cross_attention(const Var& queries, const Var& keys_values, const CrossAttentionBlock& block,
                           std::vector<Matrix>* weights = nullptr) {
  if (keys_values.rows() == 0) throw Error(Errc::EmptyKV, "no key/value tokens");
  return block(queries, keys_values, weights);
}

struct ModalityInputs {
  std::map<Modality, Var> features;  // each 1 x d_modality
};

class FusionModule {
 public:
  FusionModule() = default;
  FusionModule(const FusionConfig& cfg, const std::map<Modality, int>& dims, Rng& rng) : cfg_(cfg) {
    cfg.validate();
    for (auto m : kAllModalities) {
      dims_[m] = dims.at(m);
      token_proj_[m] = nets::Linear(dims.at(m), cfg.d_fused, rng);
    }
    for (int b = 0; b < cfg.n_blocks; ++b) blocks_.emplace_back(cfg.d_fused, cfg.n_heads, cfg.residual, rng);
    out_proj_ = nets::Linear(cfg.d_fused, cfg.d_fused, rng);
    int total = 0;
    for (auto m : kAllModalities) total += dims.at(m);
    concat_proj_ = nets::Linear(total, cfg.d_fused, rng);
  }

  const FusionConfig& config() const { return cfg_; }

  /// `cross_attention == false` is the no-attention ablation: zero-filled
  /// concatenation of the modality vectors followed by one linear map.
  Var operator()(const ModalityInputs& in, const std::set<Modality>& mask, bool cross_attention = true,
                 std::vector<Matrix>* weights = nullptr) const {
    std::vector<Modality> present;
    for (auto m : kAllModalities)
      if (!mask.count(m) && in.features.count(m)) present.push_back(m);
    if (present.empty()) throw Error(Errc::AllMasked, "every modality is masked");
    for (auto m : present) {
      const auto& f = in.features.at(m);
      if (f.rows() != 1 || f.cols() != dims_.at(m))
        throw Error(Errc::DimMismatch, "fusion input width mismatch for " + to_string(m));
    }

    if (!cross_attention) {
      std::vector<Var> parts;
      for (auto m : kAllModalities) {
        if (std::find(present.begin(), present.end(), m) != present.end())
          parts.push_back(in.features.at(m));
        else
          parts.push_back(ag::constant(Matrix::Zero(1, dims_.at(m))));
      }
      return concat_proj_(ag::concat_cols(parts));
    }

    std::vector<Var> tokens;
    for (auto m : present) tokens.push_back(token_proj_.at(m)(in.features.at(m)));
    auto kv = ag::concat_rows(tokens);
    // Query tokens: query_order restricted to present modalities.
    std::vector<Var> qparts;
    for (auto m : cfg_.query_order) {
      auto it = std::find(present.begin(), present.end(), m);
      if (it != present.end()) qparts.push_back(tokens[static_cast<std::size_t>(it - present.begin())]);
    }
    if (qparts.empty()) qparts = tokens;
    auto q = ag::concat_rows(qparts);
    for (const auto& b : blocks_) {
      q = b(q, kv, weights);
      // Later blocks attend over the refined tokens when the query set covers them.
      if (q.rows() == kv.rows()) kv = q;
    }
    return out_proj_(ag::mean_rows(q));
  }

  ParamList params() {
    ParamList p;
    for (auto m : kAllModalities) nets::append(p, "token_proj." + to_string(m) + ".", token_proj_.at(m).params());
    for (std::size_t i = 0; i < blocks_.size(); ++i)
      nets::append(p, "block" + std::to_string(i) + ".", blocks_[i].params());
    nets::append(p, "out_proj.", out_proj_.params());
    nets::append(p, "concat_proj.", concat_proj_.params());
    return p;
  }

 private:
  FusionConfig cfg_;
  std::map<Modality, int> dims_;
  std::map<Modality, nets::Linear> token_proj_;
  std::vector<CrossAttentionBlock> blocks_;
  nets::Linear out_proj_;
  nets::Linear concat_proj_;
};

struct PredictionRecord {
  std::vector<double> probs;
  DiagnosisLabel predicted = DiagnosisLabel::HC;
  std::optional<DiagnosisLabel> truth;
};

/// argmax with the lowest index winning ties.
inline std::size_t argmax_first(const std::vector<double>& v) {
  std::size_t best = 0;
  for (std::size_t i = 1; i < v.size(); ++i)
    if (v[i] > v[best]) best = i;
  return best;
}

class Classifier {
 public:
  Classifier() = default;
  Classifier(ag::Index d_fused, std::vector<DiagnosisLabel> class_set, Rng& rng)
      : classes_(std::move(class_set)) {
    if (classes_.size() < 2) throw Error(Errc::InvalidConfig, "class set needs at least 2 labels");
    head_ = nets::Linear(d_fused, static_cast<ag::Index>(classes_.size()), rng);
  }

  const std::vector<DiagnosisLabel>& class_set() const { return classes_; }

  Var logits(const Var& fused) const {
    if (fused.cols() != head_.in_dim()) throw Error(Errc::DimMismatch, "classifier input width");
    return head_(fused);
  }

  PredictionRecord predict(const Var& fused, std::optional<DiagnosisLabel> truth = std::nullopt) const {
    auto z = logits(fused).value();
    Matrix p = ag::softmax_rows_value(z);
    PredictionRecord r;
    r.probs.assign(p.data(), p.data() + p.size());
    r.predicted = classes_[argmax_first(r.probs)];
    r.truth = truth;
    return r;
  }

  ParamList params() { return head_.params(); }

 private:
  std::vector<DiagnosisLabel> classes_;
  nets::Linear head_;
};

}  // namespace pmlf::fuse
