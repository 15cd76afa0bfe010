#pragma once

// Encoder zoo: sequence backbones (residual-conv, transformer, hybrid), the
// projection head into the contrastive space, and pooling of per-paradigm
// video features into a single video representation.

#include <cmath>
#include <map>
#include <set>
#include <string>
#include <utility>
#include <vector>

#include <nlohmann/json.hpp>

#include "pmlf/autograd.hpp"
#include "pmlf/core.hpp"

namespace pmlf::nets {

using ag::Matrix;
using ag::Var;

/// Named references to the trainable leaves of a module tree.
using ParamList = std::vector<std::pair<std::string, Var*>>;

inline std::size_t count_params(const ParamList& ps) {
  std::size_t n = 0;
  for (const auto& [name, v] : ps) n += static_cast<std::size_t>(v->value().size());
  return n;
}

/// Parameters live as float32-representable doubles so checkpoints are exact.
inline double round_to_float(double x) { return static_cast<double>(static_cast<float>(x)); }

inline Var uniform_param(ag::Index rows, ag::Index cols, double bound, Rng& rng) {
  Matrix m(rows, cols);
  for (ag::Index j = 0; j < cols; ++j)
    for (ag::Index i = 0; i < rows; ++i) m(i, j) = round_to_float(rng.uniform(-bound, bound));
  return ag::leaf(std::move(m));
}

inline Var constant_param(ag::Index rows, ag::Index cols, double v) {
  return ag::leaf(Matrix::Constant(rows, cols, v));
}

/// Copies values between two parameter lists of identical structure.
inline void copy_params(const ParamList& from, const ParamList& to) {
  if (from.size() != to.size()) throw Error(Errc::DimMismatch, "copy_params: structure differs");
  for (std::size_t i = 0; i < from.size(); ++i) {
    const auto& src = from[i].second->value();
    auto& dst = to[i].second->mutable_value();
    if (src.rows() != dst.rows() || src.cols() != dst.cols())
      throw Error(Errc::DimMismatch, "copy_params: shape differs at " + to[i].first);
    dst = src;
  }
}

inline void append(ParamList& out, const std::string& prefix, ParamList sub) {
  for (auto& [n, v] : sub) out.emplace_back(prefix + n, v);
}

// ---------------------------------------------------------------------------
// Layers

struct Linear {
  Var weight;  // in x out
  Var bias;    // 1 x out

  Linear() = default;
  Linear(ag::Index in, ag::Index out, Rng& rng) {
    const double bound = 1.0 / std::sqrt(static_cast<double>(in));
    weight = uniform_param(in, out, bound, rng);
    bias = uniform_param(1, out, bound, rng);
  }
  ag::Index in_dim() const { return weight.rows(); }
  ag::Index out_dim() const { return weight.cols(); }

  Var operator()(const Var& x) const {
    if (x.cols() != weight.rows()) throw Error(Errc::DimMismatch, "linear: input width mismatch");
    return ag::add_row(ag::matmul(x, weight), bias);
  }
  ParamList params() { return {{"weight", &weight}, {"bias", &bias}}; }
};

struct LayerNorm {
  Var gamma;
  Var beta;

  LayerNorm() = default;
  explicit LayerNorm(ag::Index d) : gamma(constant_param(1, d, 1.0)), beta(constant_param(1, d, 0.0)) {}
  Var operator()(const Var& x) const { return ag::layer_norm(x, gamma, beta); }
  ParamList params() { return {{"gamma", &gamma}, {"beta", &beta}}; }
};

/// Multi-head scaled dot-product attention. Queries attend over `kv`.
struct MultiHeadAttention {
  Linear q, k, v, o;
  int n_heads = 1;

  MultiHeadAttention() = default;
  MultiHeadAttention(ag::Index d, int heads, Rng& rng)
      : q(d, d, rng), k(d, d, rng), v(d, d, rng), o(d, d, rng), n_heads(heads) {}

  /// When `weights_out` is given, receives one (n x m) attention matrix per head.
  Var operator()(const Var& queries, const Var& kv, std::vector<Matrix>* weights_out = nullptr) const {
    if (kv.rows() < 1) throw Error(Errc::EmptyKV, "attention over an empty key/value set");
    const ag::Index d = q.in_dim();
    if (queries.cols() != d || kv.cols() != d)
      throw Error(Errc::DimMismatch, "attention: token width mismatch");
    const ag::Index dh = d / n_heads;
    auto Q = q(queries);
    auto K = k(kv);
    auto V = v(kv);
    std::vector<Var> heads;
    heads.reserve(static_cast<std::size_t>(n_heads));
    const double inv = 1.0 / std::sqrt(static_cast<double>(dh));
    for (int h = 0; h < n_heads; ++h) {
      auto qh = ag::slice_cols(Q, h * dh, dh);
      auto kh = ag::slice_cols(K, h * dh, dh);
      auto vh = ag::slice_cols(V, h * dh, dh);
      auto att = ag::softmax_rows(ag::scale(ag::matmul_nt(qh, kh), inv));
      if (weights_out) weights_out->push_back(att.value());
      heads.push_back(ag::matmul(att, vh));
    }
    auto merged = n_heads == 1 ? heads[0] : ag::concat_cols(heads);
    return o(merged);
  }

  ParamList params() {
    ParamList p;
    append(p, "q.", q.params());
    append(p, "k.", k.params());
    append(p, "v.", v.params());
    append(p, "o.", o.params());
    return p;
  }
};

/// y = relu(x + conv(relu(conv(x)))), kernel-3 "same" convolutions over time.
struct ResidualConvBlock {
  Var w1, b1, w2, b2;
  ag::Index kernel = 3;
  double dropout = 0.0;

  ResidualConvBlock() = default;
  ResidualConvBlock(ag::Index d, ag::Index k, double p, Rng& rng) : kernel(k), dropout(p) {
    const double bound = 1.0 / std::sqrt(static_cast<double>(k * d));
    w1 = uniform_param(k * d, d, bound, rng);
    b1 = uniform_param(1, d, bound, rng);
    w2 = uniform_param(k * d, d, bound, rng);
    b2 = uniform_param(1, d, bound, rng);
  }

  Var operator()(const Var& x, Rng* rng) const {
    auto h = ag::relu(ag::conv1d_same(x, w1, b1, kernel));
    if (rng) h = ag::dropout(h, dropout, *rng);
    return ag::relu(ag::add(x, ag::conv1d_same(h, w2, b2, kernel)));
  }
  ParamList params() { return {{"w1", &w1}, {"b1", &b1}, {"w2", &w2}, {"b2", &b2}}; }
};

/// Pre-norm transformer encoder block.
struct TransformerBlock {
  LayerNorm ln1, ln2;
  MultiHeadAttention attn;
  Linear ff1, ff2;
  double dropout = 0.0;

  TransformerBlock() = default;
  TransformerBlock(ag::Index d, int heads, ag::Index d_ff, double p, Rng& rng)
      : ln1(d), ln2(d), attn(d, heads, rng), ff1(d, d_ff, rng), ff2(d_ff, d, rng), dropout(p) {}

  Var operator()(const Var& x, Rng* rng) const {
    auto n1 = ln1(x);
    auto a = attn(n1, n1);
    if (rng) a = ag::dropout(a, dropout, *rng);
    auto h = ag::add(x, a);
    auto f = ff2(ag::relu(ff1(ln2(h))));
    if (rng) f = ag::dropout(f, dropout, *rng);
    return ag::add(h, f);
  }
  ParamList params() {
    ParamList p;
    append(p, "ln1.", ln1.params());
    append(p, "attn.", attn.params());
    append(p, "ln2.", ln2.params());
    append(p, "ff1.", ff1.params());
    append(p, "ff2.", ff2.params());
    return p;
  }
};

// ---------------------------------------------------------------------------
// Backbones

enum class BackboneKind : std::uint8_t { RESIDUAL_CONV, TRANSFORMER, HYBRID };
enum class Pooling : std::uint8_t { MEAN, CLS };

inline std::string to_string(BackboneKind k) {
  switch (k) {
    case BackboneKind::RESIDUAL_CONV: return "RESIDUAL_CONV";
    case BackboneKind::TRANSFORMER: return "TRANSFORMER";
    case BackboneKind::HYBRID: return "HYBRID";
  }
  return "?";
}

inline BackboneKind parse_backbone(std::string_view s) {
  for (auto k : {BackboneKind::RESIDUAL_CONV, BackboneKind::TRANSFORMER, BackboneKind::HYBRID})
    if (to_string(k) == s) return k;
  throw Error(Errc::ParseError, "unknown backbone kind '" + std::string(s) + "'");
}

struct EncoderConfig {
  BackboneKind kind = BackboneKind::HYBRID;
  int d_in = 32;
  int d_model = 64;
  int n_layers = 2;
  int n_heads = 4;
  int d_out = 64;
  double dropout = 0.1;
  Pooling pooling = Pooling::MEAN;
  int kernel = 3;
  int ffn_mult = 2;
  /// HYBRID only: temporal average-pool stride between the conv front end and
  /// the transformer blocks.
  int pool_stride = 2;

  bool uses_conv() const { return kind != BackboneKind::TRANSFORMER; }
  bool uses_attention() const { return kind != BackboneKind::RESIDUAL_CONV; }

  void validate() const {
    if (d_in < 1 || d_model < 1 || d_out < 1 || n_layers < 0)
      throw Error(Errc::InvalidConfig, "encoder dimensions must be positive");
    if (!(dropout >= 0.0 && dropout < 1.0))
      throw Error(Errc::InvalidConfig, "dropout must lie in [0, 1)");
    if (uses_attention() && (n_heads < 1 || d_model % n_heads != 0))
      throw Error(Errc::InvalidConfig, "d_model must be divisible by n_heads");
    if (pooling == Pooling::CLS && kind != BackboneKind::TRANSFORMER)
      throw Error(Errc::InvalidConfig, "CLS pooling requires the TRANSFORMER kind");
    if (kernel < 1 || kernel % 2 == 0) throw Error(Errc::InvalidConfig, "kernel must be odd");
    if (pool_stride < 1 || ffn_mult < 1) throw Error(Errc::InvalidConfig, "stride/ffn_mult must be >= 1");
  }
};

inline void to_json(nlohmann::json& j, const EncoderConfig& c) {
  j = {{"kind", to_string(c.kind)},   {"d_in", c.d_in},
       {"d_model", c.d_model},        {"n_layers", c.n_layers},
       {"n_heads", c.n_heads},        {"d_out", c.d_out},
       {"dropout", c.dropout},        {"pooling", c.pooling == Pooling::CLS ? "CLS" : "MEAN"},
       {"kernel", c.kernel},          {"ffn_mult", c.ffn_mult},
       {"pool_stride", c.pool_stride}};
}

inline void from_json(const nlohmann::json& j, EncoderConfig& c) {
  if (j.contains("kind")) c.kind = parse_backbone(j.at("kind").get<std::string>());
  c.d_in = j.value("d_in", c.d_in);
  c.d_model = j.value("d_model", c.d_model);
  c.n_layers = j.value("n_layers", c.n_layers);
  c.n_heads = j.value("n_heads", c.n_heads);
  c.d_out = j.value("d_out", c.d_out);
  c.dropout = j.value("dropout", c.dropout);
  if (j.contains("pooling")) {
    const auto p = j.at("pooling").get<std::string>();
    if (p == "CLS")
      c.pooling = Pooling::CLS;
    else if (p == "MEAN")
      c.pooling = Pooling::MEAN;
    else
      throw Error(Errc::ParseError, "unknown pooling '" + p + "'");
  }
  c.kernel = j.value("kernel", c.kernel);
  c.ffn_mult = j.value("ffn_mult", c.ffn_mult);
  c.pool_stride = j.value("pool_stride", c.pool_stride);
}

/// Sequence encoder: input projection, backbone blocks, final norm, temporal
/// pooling, output projection. Maps a T x d_in sequence to a 1 x d_out vector.
class Backbone {
 public:
  Backbone() = default;
  Backbone(const EncoderConfig& cfg, Rng& rng) : cfg_(cfg) {
    cfg.validate();
    in_proj_ = Linear(cfg.d_in, cfg.d_model, rng);
    if (cfg.uses_conv())
      for (int i = 0; i < cfg.n_layers; ++i)
        conv_.emplace_back(cfg.d_model, cfg.kernel, cfg.dropout, rng);
    if (cfg.uses_attention())
      for (int i = 0; i < cfg.n_layers; ++i)
        attn_.emplace_back(cfg.d_model, cfg.n_heads, cfg.ffn_mult * cfg.d_model, cfg.dropout, rng);
    if (cfg.pooling == Pooling::CLS)
      cls_ = uniform_param(1, cfg.d_model, 1.0 / std::sqrt(static_cast<double>(cfg.d_model)), rng);
    final_norm_ = LayerNorm(cfg.d_model);
    out_proj_ = Linear(cfg.d_model, cfg.d_out, rng);
  }

  const EncoderConfig& config() const { return cfg_; }

  /// `rng` enables training-mode dropout; pass nullptr for inference.
  Var forward(const Var& seq, Rng* rng = nullptr) const {
    if (seq.rows() == 0) throw Error(Errc::EmptySequence, "encoder input has no frames");
    if (seq.cols() != cfg_.d_in)
      throw Error(Errc::DimMismatch, "encoder expects width " + std::to_string(cfg_.d_in) +
                                         ", got " + std::to_string(seq.cols()));
    auto h = in_proj_(seq);
    for (const auto& b : conv_) h = b(h, rng);
    if (cfg_.kind == BackboneKind::HYBRID) h = ag::avg_pool_rows(h, cfg_.pool_stride);
    if (cfg_.pooling == Pooling::CLS) h = ag::concat_rows({cls_, h});
    for (const auto& b : attn_) h = b(h, rng);
    h = final_norm_(h);
    auto pooled = cfg_.pooling == Pooling::CLS ? ag::slice_rows(h, 0, 1) : ag::mean_rows(h);
    return out_proj_(pooled);
  }

  Var forward(const Matrix& seq, Rng* rng = nullptr) const { return forward(ag::constant(seq), rng); }

  ParamList params() {
    ParamList p;
    append(p, "in_proj.", in_proj_.params());
    for (std::size_t i = 0; i < conv_.size(); ++i)
      append(p, "conv" + std::to_string(i) + ".", conv_[i].params());
    if (cfg_.pooling == Pooling::CLS) p.emplace_back("cls", &cls_);
    for (std::size_t i = 0; i < attn_.size(); ++i)
      append(p, "block" + std::to_string(i) + ".", attn_[i].params());
    append(p, "final_norm.", final_norm_.params());
    append(p, "out_proj.", out_proj_.params());
    return p;
  }

 private:
  EncoderConfig cfg_;
  Linear in_proj_;
  std::vector<ResidualConvBlock> conv_;
  std::vector<TransformerBlock> attn_;
  Var cls_;
  LayerNorm final_norm_;
  Linear out_proj_;
};

// ---------------------------------------------------------------------------
// Projection into the shared contrastive space

/// affine -> relu -> affine -> L2 normalize.
struct ProjectionHead {
  Linear fc1, fc2;

  ProjectionHead() = default;
  ProjectionHead(ag::Index d_in, ag::Index d_hidden, ag::Index d_z, Rng& rng)
      : fc1(d_in, d_hidden, rng), fc2(d_hidden, d_z, rng) {}

  ag::Index in_dim() const { return fc1.in_dim(); }
  ag::Index out_dim() const { return fc2.out_dim(); }

  /// Un-normalized head output; rows are normalized by the caller or `operator()`.
  Var raw(const Var& x) const {
    if (x.cols() != fc1.in_dim()) throw Error(Errc::DimMismatch, "projection head input width");
    return fc2(ag::relu(fc1(x)));
  }
  Var operator()(const Var& x) const { return ag::l2_normalize_rows(raw(x)); }

  ParamList params() {
    ParamList p;
    append(p, "fc1.", fc1.params());
    append(p, "fc2.", fc2.params());
    return p;
  }
};

// ---------------------------------------------------------------------------
// Per-paradigm aggregation into the video representation

enum class Aggregation : std::uint8_t { ATTENTION, CONCAT };

/// Pools per-paradigm task features (each 1 x d) into one 1 x d video feature.
/// ATTENTION: softmax over scores v^T tanh(W f + b), restricted to unmasked
/// paradigms. CONCAT: masked slots are zero-filled, then a linear map.
class VideoAggregator {
 public:
  VideoAggregator() = default;
  VideoAggregator(ag::Index d, Aggregation mode, Rng& rng) : mode_(mode), d_(d) {
    if (mode == Aggregation::ATTENTION) {
      score_hidden_ = Linear(d, d, rng);
      score_out_ = uniform_param(d, 1, 1.0 / std::sqrt(static_cast<double>(d)), rng);
    } else {
      concat_proj_ = Linear(d * static_cast<ag::Index>(kAllParadigms.size()), d, rng);
    }
  }

  Aggregation mode() const { return mode_; }

  struct Result {
    Var pooled;
    std::vector<double> weights;  // ATTENTION mode: one per unmasked paradigm, in order
  };

  Result operator()(const std::map<ParadigmId, Var>& task_features,
                    const std::set<ParadigmId>& mask) const {
    std::vector<Var> kept;
    for (auto p : kAllParadigms) {
      if (mask.count(p)) continue;
      auto it = task_features.find(p);
      if (it == task_features.end()) continue;
      if (it->second.rows() != 1 || it->second.cols() != d_)
        throw Error(Errc::DimMismatch, "task feature width mismatch");
      kept.push_back(it->second);
    }
    if (kept.empty()) throw Error(Errc::AllMasked, "every paradigm is masked");
    if (mode_ == Aggregation::CONCAT) {
      std::vector<Var> slots;
      for (auto p : kAllParadigms) {
        auto it = task_features.find(p);
        if (mask.count(p) || it == task_features.end())
          slots.push_back(ag::constant(Matrix::Zero(1, d_)));
        else
          slots.push_back(it->second);
      }
      return {concat_proj_(ag::concat_cols(slots)), {}};
    }
    auto stacked = ag::concat_rows(kept);                                     // n x d
    auto scores = ag::matmul(ag::tanh(score_hidden_(stacked)), score_out_);  // n x 1
    auto alpha = ag::softmax_rows(ag::transpose(scores));                    // 1 x n
    Result r{ag::matmul(alpha, stacked), {}};
    for (ag::Index i = 0; i < alpha.cols(); ++i) r.weights.push_back(alpha.value()(0, i));
    return r;
  }

  ParamList params() {
    ParamList p;
    if (mode_ == Aggregation::ATTENTION) {
      append(p, "score_hidden.", score_hidden_.params());
      p.emplace_back("score_out", &score_out_);
    } else {
      append(p, "concat_proj.", concat_proj_.params());
    }
    return p;
  }

 private:
  Aggregation mode_ = Aggregation::ATTENTION;
  ag::Index d_ = 0;
  Linear score_hidden_;
  Var score_out_;
  Linear concat_proj_;
};

}  // namespace pmlf::nets
