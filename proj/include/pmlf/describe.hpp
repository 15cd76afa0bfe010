#pragma once

// Paradigm-aware descriptions and text embedding.
//
// A description is a short text per (sample, paradigm) that characterizes the
// task context and the participant's observed facial behavior. The default
// provider fills a per-paradigm template from segment statistics; a remote
// multimodal model can sit behind the same `DescriptionProvider` interface.

#include <Eigen/Dense>

#include <cctype>
#include <filesystem>
#include <fstream>
#include <map>
#include <memory>
#include <sstream>
#include <string>
#include <string_view>
#include <vector>

#include <nlohmann/json.hpp>

#include "pmlf/core.hpp"

namespace pmlf::featurizer {

struct ParadigmPrompt {
  ParadigmId paradigm = ParadigmId::MS1;
  std::string template_text;
};

/// Slot values keyed by slot name (affect_summary, interaction_summary, task_name).
using SummaryFields = std::map<std::string, std::string>;

struct DescriptionRecord {
  std::string sample_id;
  ParadigmId paradigm = ParadigmId::MS1;
  std::string text;

  bool operator==(const DescriptionRecord&) const = default;
};

inline std::string task_name(ParadigmId p) {
  switch (p) {
    case ParadigmId::MS1: return "multimodal stimulation I";
    case ParadigmId::US: return "unimodal auditory stimulation";
    case ParadigmId::READING: return "text reading";
    case ParadigmId::MS2: return "multimodal stimulation II";
    case ParadigmId::INTERVIEW: return "human-computer interview";
  }
  throw Error(Errc::UnknownParadigm, "paradigm id " + std::to_string(static_cast<int>(p)) + " is not defined");
}

/// Stimulus context per task (intended emotion categories where the protocol has them).
inline std::string interaction_context(ParadigmId p) {
  switch (p) {
    case ParadigmId::MS1: return "paired images and sounds in happy, neutral, sad and scared clips";
    case ParadigmId::US: return "audio-only emotional clips in low, middle and high frequency groups";
    case ParadigmId::READING: return "reading a negatively toned paragraph aloud";
    case ParadigmId::MS2: return "positive, neutral and negative video clips";
    case ParadigmId::INTERVIEW:
      return "fifteen questions on emotional state, self-perception, behavioral intention and anxiety";
  }
  throw Error(Errc::UnknownParadigm, "paradigm id " + std::to_string(static_cast<int>(p)) + " is not defined");
}

inline ParadigmPrompt default_prompt(ParadigmId p) {
  switch (p) {
    case ParadigmId::MS1:
    case ParadigmId::MS2:
      return {p, "During {task_name}, while viewing {interaction_summary}, the participant shows {affect_summary}."};
    case ParadigmId::US:
      return {p, "During {task_name}, while listening to {interaction_summary}, the participant shows {affect_summary}."};
    case ParadigmId::READING:
      return {p, "During {task_name}, {interaction_summary}, the participant shows {affect_summary}."};
    case ParadigmId::INTERVIEW:
      return {p, "During the {task_name} interview covering {interaction_summary}, the participant shows {affect_summary}."};
  }
  throw Error(Errc::UnknownParadigm, "paradigm id " + std::to_string(static_cast<int>(p)) + " is not defined");
}

/// Fills `{slot}` placeholders. `task_name` and `interaction_summary` default
/// to the paradigm's own values when not supplied.
inline DescriptionRecord render_description(const ParadigmPrompt& prompt, const SummaryFields& summary,
                                            const std::string& sample_id = {}) {
  const std::string tname = task_name(prompt.paradigm);  // throws UnknownParadigm
  const std::string& t = prompt.template_text;
  std::string out;
  out.reserve(t.size() + 64);
  for (std::size_t i = 0; i < t.size();) {
    if (t[i] == '{') {
      const auto close = t.find('}', i);
      if (close == std::string::npos) throw Error(Errc::ParseError, "unterminated slot in template");
      const std::string slot = t.substr(i + 1, close - i - 1);
      auto it = summary.find(slot);
      if (it != summary.end())
        out += it->second;
      else if (slot == "task_name")
        out += tname;
      else if (slot == "interaction_summary")
        out += interaction_context(prompt.paradigm);
      else
        throw Error(Errc::MissingSlot, "no value for slot '" + slot + "'");
      i = close + 1;
    } else {
      out += t[i++];
    }
  }
  if (out.empty()) throw Error(Errc::EmptyText, "rendered description is empty");
  return {sample_id, prompt.paradigm, out};
}

/// Prompt file: one `PARADIGM: template` per line; blank and `#` lines ignored.
/// Paradigms absent from the file keep their default templates.
inline std::map<ParadigmId, ParadigmPrompt> load_prompts(const std::filesystem::path& path) {
  std::ifstream is(path);
  if (!is) throw Error(Errc::NotFound, "prompt file not found: " + path.string());
  std::map<ParadigmId, ParadigmPrompt> out;
  for (auto p : kAllParadigms) out[p] = default_prompt(p);
  std::string line;
  int lineno = 0;
  while (std::getline(is, line)) {
    ++lineno;
    if (line.empty() || line[0] == '#') continue;
    const auto colon = line.find(':');
    if (colon == std::string::npos)
      throw Error(Errc::ParseError, "prompt line " + std::to_string(lineno) + " lacks 'PARADIGM:'");
    std::string name = line.substr(0, colon);
    std::string body = line.substr(colon + 1);
    while (!body.empty() && body.front() == ' ') body.erase(body.begin());
    const auto p = parse_paradigm(name);
    out[p] = {p, body};
  }
  return out;
}

// ---------------------------------------------------------------------------
// Observed-behavior summary from a paradigm's facial feature frames

/// Descriptor families in the order they occupy the facial feature vector.
inline const std::vector<std::string>& facet_names() {
  static const std::vector<std::string> names = {"landmark", "head-pose", "gaze", "action-unit"};
  return names;
}

/// Each facet covers a contiguous quarter of the feature columns; its mean
/// over frames and columns is reported as heightened / typical / blunted.
inline std::string summarize_affect(const Eigen::MatrixXd& frames, double threshold = 0.5) {
  if (frames.rows() == 0 || frames.cols() == 0) return "no observable facial activity";
  const auto& names = facet_names();
  const Eigen::Index d = frames.cols();
  const Eigen::Index n_facets = std::min<Eigen::Index>(static_cast<Eigen::Index>(names.size()), d);
  std::string out;
  for (Eigen::Index f = 0; f < n_facets; ++f) {
    const Eigen::Index lo = f * d / n_facets;
    const Eigen::Index hi = (f + 1) * d / n_facets;
    const double m = frames.middleCols(lo, hi - lo).mean();
    const char* level = m > threshold ? "heightened" : (m < -threshold ? "blunted" : "typical");
    if (f) out += ", ";
    out += std::string(level) + " " + names[static_cast<std::size_t>(f)] + " activity";
  }
  return out;
}

class DescriptionProvider {
 public:
  virtual ~DescriptionProvider() = default;
  virtual DescriptionRecord describe(const std::string& sample_id, const ParadigmPrompt& prompt,
                                     const SummaryFields& summary) = 0;
};

/// Deterministic offline provider.
class TemplateDescriptionProvider final : public DescriptionProvider {
 public:
  DescriptionRecord describe(const std::string& sample_id, const ParadigmPrompt& prompt,
                             const SummaryFields& summary) override {
    return render_description(prompt, summary, sample_id);
  }
};

inline std::string descriptions_to_jsonl(const std::vector<DescriptionRecord>& ds) {
  std::string out;
  for (const auto& d : ds)
    out += nlohmann::json{{"sample_id", d.sample_id}, {"paradigm", to_string(d.paradigm)}, {"text", d.text}}.dump() +
           "\n";
  return out;
}

inline void save_descriptions(const std::vector<DescriptionRecord>& ds, const std::filesystem::path& path) {
  std::ofstream os(path, std::ios::binary | std::ios::trunc);
  if (!os) throw Error(Errc::IoError, "cannot write " + path.string());
  os << descriptions_to_jsonl(ds);
}

inline std::vector<DescriptionRecord> load_descriptions(const std::filesystem::path& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw Error(Errc::NotFound, "descriptions file not found: " + path.string());
  std::vector<DescriptionRecord> out;
  std::string line;
  int lineno = 0;
  while (std::getline(is, line)) {
    ++lineno;
    if (line.empty()) continue;
    try {
      auto j = nlohmann::json::parse(line);
      out.push_back({j.at("sample_id").get<std::string>(), parse_paradigm(j.at("paradigm").get<std::string>()),
                     j.at("text").get<std::string>()});
    } catch (const std::exception& e) {
      throw Error(Errc::ParseError, "descriptions line " + std::to_string(lineno) + ": " + e.what());
    }
  }
  return out;
}

// ---------------------------------------------------------------------------
// Text embedding

struct TextFeatureSequence {
  Eigen::MatrixXd tokens;  // T_t x d_text
};

class TextEmbeddingProvider {
 public:
  virtual ~TextEmbeddingProvider() = default;
  virtual int dimension() const = 0;
  virtual std::string name() const = 0;
  /// One row per token.
  virtual Eigen::MatrixXd embed(std::string_view text) const = 0;
};

inline std::vector<std::string> tokenize(std::string_view text) {
  std::vector<std::string> out;
  std::string cur;
  for (char ch : text) {
    const auto c = static_cast<unsigned char>(ch);
    if (std::isalnum(c) || ch == '-' || c >= 0x80) {
      cur.push_back(static_cast<char>(std::tolower(c)));
    } else if (!cur.empty()) {
      out.push_back(std::move(cur));
      cur.clear();
    }
  }
  if (!cur.empty()) out.push_back(std::move(cur));
  return out;
}

/// Frozen hashed-token embedder. Row t is the sum of fixed pseudo-random
/// Gaussian vectors seeded by the hashes of token t and of the bigram
/// (token t-1, token t), scaled by 1/sqrt(dim); the bigram term keeps
/// "heightened gaze" distinct from "heightened landmark".
class HashingTextEmbedder final : public TextEmbeddingProvider {
 public:
  explicit HashingTextEmbedder(int dim = 32, std::uint64_t salt = 0) : dim_(dim), salt_(salt) {
    if (dim < 1) throw Error(Errc::InvalidConfig, "embedding dimension must be >= 1");
  }
  int dimension() const override { return dim_; }
  std::string name() const override { return "hashing-" + std::to_string(dim_); }

  Eigen::MatrixXd embed(std::string_view text) const override {
    const auto toks = tokenize(text);
    Eigen::MatrixXd out(static_cast<Eigen::Index>(toks.size()), dim_);
    const double s = 1.0 / std::sqrt(static_cast<double>(dim_));
    for (std::size_t t = 0; t < toks.size(); ++t) {
      Rng uni(splitmix64(fnv1a64(toks[t]) ^ salt_));
      Rng bi(splitmix64(fnv1a64((t ? toks[t - 1] : std::string("<s>")) + " " + toks[t]) ^ ~salt_));
      for (int j = 0; j < dim_; ++j) out(static_cast<Eigen::Index>(t), j) = s * (uni.normal() + bi.normal());
    }
    return out;
  }

 private:
  int dim_;
  std::uint64_t salt_;
};

inline TextFeatureSequence embed_text(std::string_view text, const TextEmbeddingProvider& provider) {
  if (tokenize(text).empty()) throw Error(Errc::EmptyText, "text has no tokens");
  Eigen::MatrixXd m;
  try {
    m = provider.embed(text);
  } catch (const Error&) {
    throw;
  } catch (const std::exception& e) {
    throw Error(Errc::ProviderFailure, provider.name() + ": " + e.what());
  }
  if (m.cols() != provider.dimension() || m.rows() < 1)
    throw Error(Errc::ProviderFailure, provider.name() + " returned a malformed embedding");
  return {std::move(m)};
}

}  // namespace pmlf::featurizer
