#pragma once

// Shared vocabulary: error type, domain enums, and the deterministic RNG used
// everywhere a seed must reproduce bit-identical results.

#include <array>
#include <cmath>
#include <cstdint>
#include <optional>
#include <random>
#include <stdexcept>
#include <string>
#include <string_view>
#include <vector>

namespace pmlf {

enum class Errc {
  NotFound,
  ParseError,
  IoError,
  InvalidRatios,
  EmptyManifest,
  EmptyClassSet,
  ClassAbsent,
  InvalidConfig,
  TooShort,
  DimMismatch,
  UnknownParadigm,
  MissingSlot,
  EmptyText,
  ProviderFailure,
  EmptySequence,
  AllMasked,
  ZeroNorm,
  BatchTooSmall,
  InvalidSimplex,
  LabelOutOfRange,
  NonFinite,
  EmptyKV,
  MissingDescriptions,
  ConfigError,
  StageMismatch,
  VersionMismatch,
  HashMismatch,
  EmptyInput,
  UnknownClass,
  InvalidSpec,
  EmptySplit,
  ValidationFailed,
};

inline std::string_view errc_name(Errc c) {
  switch (c) {
    case Errc::NotFound: return "NotFound";
    case Errc::ParseError: return "ParseError";
    case Errc::IoError: return "IoError";
    case Errc::InvalidRatios: return "InvalidRatios";
    case Errc::EmptyManifest: return "EmptyManifest";
    case Errc::EmptyClassSet: return "EmptyClassSet";
    case Errc::ClassAbsent: return "ClassAbsent";
    case Errc::InvalidConfig: return "InvalidConfig";
    case Errc::TooShort: return "TooShort";
    case Errc::DimMismatch: return "DimMismatch";
    case Errc::UnknownParadigm: return "UnknownParadigm";
    case Errc::MissingSlot: return "MissingSlot";
    case Errc::EmptyText: return "EmptyText";
    case Errc::ProviderFailure: return "ProviderFailure";
    case Errc::EmptySequence: return "EmptySequence";
    case Errc::AllMasked: return "AllMasked";
    case Errc::ZeroNorm: return "ZeroNorm";
    case Errc::BatchTooSmall: return "BatchTooSmall";
    case Errc::InvalidSimplex: return "InvalidSimplex";
    case Errc::LabelOutOfRange: return "LabelOutOfRange";
    case Errc::NonFinite: return "NonFinite";
    case Errc::EmptyKV: return "EmptyKV";
    case Errc::MissingDescriptions: return "MissingDescriptions";
    case Errc::ConfigError: return "ConfigError";
    case Errc::StageMismatch: return "StageMismatch";
    case Errc::VersionMismatch: return "VersionMismatch";
    case Errc::HashMismatch: return "HashMismatch";
    case Errc::EmptyInput: return "EmptyInput";
    case Errc::UnknownClass: return "UnknownClass";
    case Errc::InvalidSpec: return "InvalidSpec";
    case Errc::EmptySplit: return "EmptySplit";
    case Errc::ValidationFailed: return "ValidationFailed";
  }
  return "Unknown";
}

/// Every failure the library reports carries one of the `Errc` codes so callers
/// (the CLI in particular) can map it to an exit status without string matching.
class Error : public std::runtime_error {
 public:
  Error(Errc code, const std::string& what)
      : std::runtime_error(std::string(errc_name(code)) + ": " + what), code_(code) {}
  Errc code() const noexcept { return code_; }

 private:
  Errc code_;
};

// ---------------------------------------------------------------------------
// Domain enums

enum class DiagnosisLabel : std::uint8_t { MD, ANX, SC, HC };
enum class ParadigmId : std::uint8_t { MS1, US, READING, MS2, INTERVIEW };
enum class Modality : std::uint8_t { VIDEO, AUDIO, TEXT };
enum class Gender : std::uint8_t { M, F, UNKNOWN };

inline constexpr std::array<DiagnosisLabel, 4> kAllLabels = {
    DiagnosisLabel::MD, DiagnosisLabel::ANX, DiagnosisLabel::SC, DiagnosisLabel::HC};
/// Acquisition order, Part 1 through Part 5.
inline constexpr std::array<ParadigmId, 5> kAllParadigms = {
    ParadigmId::MS1, ParadigmId::US, ParadigmId::READING, ParadigmId::MS2,
    ParadigmId::INTERVIEW};
inline constexpr std::array<Modality, 3> kAllModalities = {Modality::VIDEO, Modality::AUDIO,
                                                           Modality::TEXT};
/// Class order used by the four-way task tables.
inline const std::vector<DiagnosisLabel> kDefaultClassSet = {
    DiagnosisLabel::HC, DiagnosisLabel::MD, DiagnosisLabel::SC, DiagnosisLabel::ANX};

inline std::string to_string(DiagnosisLabel l) {
  switch (l) {
    case DiagnosisLabel::MD: return "MD";
    case DiagnosisLabel::ANX: return "ANX";
    case DiagnosisLabel::SC: return "SC";
    case DiagnosisLabel::HC: return "HC";
  }
  throw Error(Errc::ParseError, "invalid DiagnosisLabel value");
}

inline std::string to_string(ParadigmId p) {
  switch (p) {
    case ParadigmId::MS1: return "MS1";
    case ParadigmId::US: return "US";
    case ParadigmId::READING: return "READING";
    case ParadigmId::MS2: return "MS2";
    case ParadigmId::INTERVIEW: return "INTERVIEW";
  }
  throw Error(Errc::UnknownParadigm,
              "paradigm id " + std::to_string(static_cast<int>(p)) + " is not defined");
}

inline std::string to_string(Modality m) {
  switch (m) {
    case Modality::VIDEO: return "VIDEO";
    case Modality::AUDIO: return "AUDIO";
    case Modality::TEXT: return "TEXT";
  }
  throw Error(Errc::ParseError, "invalid Modality value");
}

inline std::string to_string(Gender g) {
  switch (g) {
    case Gender::M: return "M";
    case Gender::F: return "F";
    case Gender::UNKNOWN: return "UNKNOWN";
  }
  throw Error(Errc::ParseError, "invalid Gender value");
}

// Parsing is case-sensitive on purpose: serialized names are uppercase.
inline DiagnosisLabel parse_label(std::string_view s) {
  for (auto l : kAllLabels)
    if (to_string(l) == s) return l;
  throw Error(Errc::ParseError, "unknown diagnosis label '" + std::string(s) + "'");
}

inline ParadigmId parse_paradigm(std::string_view s) {
  for (auto p : kAllParadigms)
    if (to_string(p) == s) return p;
  throw Error(Errc::UnknownParadigm, "unknown paradigm '" + std::string(s) + "'");
}

inline Modality parse_modality(std::string_view s) {
  for (auto m : kAllModalities)
    if (to_string(m) == s) return m;
  throw Error(Errc::ParseError, "unknown modality '" + std::string(s) + "'");
}

inline Gender parse_gender(std::string_view s) {
  for (auto g : {Gender::M, Gender::F, Gender::UNKNOWN})
    if (to_string(g) == s) return g;
  throw Error(Errc::ParseError, "unknown gender '" + std::string(s) + "'");
}

inline std::size_t index_of(ParadigmId p) { return static_cast<std::size_t>(p); }
inline std::size_t index_of(Modality m) { return static_cast<std::size_t>(m); }
inline std::size_t index_of(DiagnosisLabel l) { return static_cast<std::size_t>(l); }

/// Paradigms whose recordings carry speech (and therefore audio and transcript segments).
inline bool has_speech(ParadigmId p) {
  return p == ParadigmId::READING || p == ParadigmId::INTERVIEW;
}

/// Comma separated labels, e.g. "HC,MD,SC,ANX".
inline std::vector<DiagnosisLabel> parse_label_list(std::string_view csv) {
  std::vector<DiagnosisLabel> out;
  std::size_t start = 0;
  while (start <= csv.size()) {
    auto end = csv.find(',', start);
    if (end == std::string_view::npos) end = csv.size();
    auto tok = csv.substr(start, end - start);
    if (!tok.empty()) out.push_back(parse_label(tok));
    start = end + 1;
  }
  return out;
}

inline std::string join_labels(const std::vector<DiagnosisLabel>& ls, std::string_view sep = ",") {
  std::string s;
  for (std::size_t i = 0; i < ls.size(); ++i) {
    if (i) s += sep;
    s += to_string(ls[i]);
  }
  return s;
}

// ---------------------------------------------------------------------------
// Deterministic randomness

inline std::uint64_t splitmix64(std::uint64_t x) {
  x += 0x9e3779b97f4a7c15ULL;
  x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ULL;
  x = (x ^ (x >> 27)) * 0x94d049bb133111ebULL;
  return x ^ (x >> 31);
}

inline std::uint64_t fnv1a64(std::string_view s) {
  std::uint64_t h = 0xcbf29ce484222325ULL;
  for (unsigned char c : s) {
    h ^= c;
    h *= 0x100000001b3ULL;
  }
  return h;
}

/// Derives an independent stream seed from a base seed and a stream counter.
inline std::uint64_t derive_seed(std::uint64_t base, std::uint64_t stream) {
  return splitmix64(base ^ splitmix64(stream + 0x632be59bd9b4e019ULL));
}

/// mt19937_64 is specified bit-exactly by the standard; the distributions are
/// not, so uniform/normal draws are implemented here.
class Rng {
 public:
  explicit Rng(std::uint64_t seed = 0) : engine_(seed) {}

  std::uint64_t next_u64() { return engine_(); }

  /// Uniform in [0, 1) with 53 bits of mantissa.
  double uniform() { return static_cast<double>(engine_() >> 11) * 0x1.0p-53; }

  double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }

  /// Unbiased integer in [0, n).
  std::uint64_t below(std::uint64_t n) {
    if (n == 0) return 0;
    const std::uint64_t limit = ~std::uint64_t{0} - (~std::uint64_t{0} % n);
    std::uint64_t x;
    do {
      x = engine_();
    } while (x >= limit);
    return x % n;
  }

  /// Standard normal via Box-Muller; the spare value is cached.
  double normal() {
    if (has_spare_) {
      has_spare_ = false;
      return spare_;
    }
    double u1;
    do {
      u1 = uniform();
    } while (u1 <= 0.0);
    const double u2 = uniform();
    const double r = std::sqrt(-2.0 * std::log(u1));
    const double theta = 2.0 * 3.14159265358979323846 * u2;
    spare_ = r * std::sin(theta);
    has_spare_ = true;
    return r * std::cos(theta);
  }

  template <class T>
  void shuffle(std::vector<T>& v) {
    for (std::size_t i = v.size(); i > 1; --i) {
      std::size_t j = static_cast<std::size_t>(below(i));
      std::swap(v[i - 1], v[j]);
    }
  }

  std::mt19937_64& engine() { return engine_; }

  /// Text form of the full generator state (used in checkpoints).
  std::string state() const;
  void set_state(const std::string& s);

 private:
  std::mt19937_64 engine_;
  bool has_spare_ = false;
  double spare_ = 0.0;
};

}  // namespace pmlf

#include <sstream>

namespace pmlf {

inline std::string Rng::state() const {
  std::ostringstream os;
  os << engine_ << ' ' << (has_spare_ ? 1 : 0) << ' ';
  os.precision(17);
  os << spare_;
  return os.str();
}

inline void Rng::set_state(const std::string& s) {
  std::istringstream is(s);
  int spare_flag = 0;
  is >> engine_ >> spare_flag >> spare_;
  if (!is) throw Error(Errc::ParseError, "malformed RNG state");
  has_spare_ = spare_flag != 0;
}

}  // namespace pmlf
