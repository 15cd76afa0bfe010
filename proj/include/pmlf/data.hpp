#pragma once

// MMH-shaped data model: segment/sample records, the line-delimited JSON
// manifest, schema validation, stratified splitting and task filtering.

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <map>
#include <numeric>
#include <optional>
#include <set>
#include <sstream>
#include <string>
#include <tuple>
#include <vector>

#include <nlohmann/json.hpp>

#include "pmlf/core.hpp"

namespace pmlf::data {

using json = nlohmann::json;

struct SegmentRecord {
  std::string segment_id;
  std::string sample_id;
  ParadigmId paradigm = ParadigmId::MS1;
  Modality modality = Modality::VIDEO;
  double duration_s = 0.0;
  std::string feature_ref;
  int order_index = 0;

  bool operator==(const SegmentRecord&) const = default;
};

struct SampleRecord {
  std::string sample_id;
  DiagnosisLabel label = DiagnosisLabel::HC;
  Gender gender = Gender::UNKNOWN;
  std::optional<int> age_years;  // nullopt = UNKNOWN
  std::vector<SegmentRecord> segments;

  bool operator==(const SampleRecord&) const = default;

  /// Segments of one (paradigm, modality) in listed order.
  std::vector<const SegmentRecord*> select(ParadigmId p, Modality m) const {
    std::vector<const SegmentRecord*> out;
    for (const auto& s : segments)
      if (s.paradigm == p && s.modality == m) out.push_back(&s);
    return out;
  }
};

inline std::map<ParadigmId, int> default_paradigm_video_counts() {
  return {{ParadigmId::MS1, 4},
          {ParadigmId::US, 3},
          {ParadigmId::READING, 1},
          {ParadigmId::MS2, 3},
          {ParadigmId::INTERVIEW, 15}};
}

/// Audio/transcript segments per speech paradigm: one reading, fifteen answers.
inline std::map<ParadigmId, int> default_speech_counts() {
  return {{ParadigmId::READING, 1}, {ParadigmId::INTERVIEW, 15}};
}

inline constexpr const char* kSchemaVersion = "pmlf-mmh/1";

struct DatasetManifest {
  std::string schema_version = kSchemaVersion;
  std::vector<SampleRecord> samples;
  int expected_video_per_sample = 26;
  int expected_audiotext_per_sample = 16;
  std::map<ParadigmId, int> paradigm_video_counts = default_paradigm_video_counts();

  bool operator==(const DatasetManifest&) const = default;

  std::map<DiagnosisLabel, int> class_counts() const {
    std::map<DiagnosisLabel, int> c;
    for (const auto& s : samples) ++c[s.label];
    return c;
  }

  const SampleRecord* find(const std::string& id) const {
    for (const auto& s : samples)
      if (s.sample_id == id) return &s;
    return nullptr;
  }
};

// ---------------------------------------------------------------------------
// Serialization

inline json header_to_json(const DatasetManifest& m) {
  json counts = json::object();
  for (const auto& [p, n] : m.paradigm_video_counts) counts[to_string(p)] = n;
  return {{"schema_version", m.schema_version},
          {"expected_video_per_sample", m.expected_video_per_sample},
          {"expected_audiotext_per_sample", m.expected_audiotext_per_sample},
          {"paradigm_video_counts", counts}};
}

inline json sample_to_json(const SampleRecord& s) {
  json segs = json::array();
  for (const auto& g : s.segments)
    segs.push_back({{"segment_id", g.segment_id},
                    {"paradigm", to_string(g.paradigm)},
                    {"modality", to_string(g.modality)},
                    {"duration_s", g.duration_s},
                    {"feature_ref", g.feature_ref},
                    {"order_index", g.order_index}});
  json age = s.age_years ? json(*s.age_years) : json("UNKNOWN");
  return {{"sample_id", s.sample_id},
          {"label", to_string(s.label)},
          {"gender", to_string(s.gender)},
          {"age_years", age},
          {"segments", segs}};
}

inline std::string serialize_manifest(const DatasetManifest& m) {
  std::string out = header_to_json(m).dump() + "\n";
  for (const auto& s : m.samples) out += sample_to_json(s).dump() + "\n";
  return out;
}

inline void save_manifest(const DatasetManifest& m, const std::filesystem::path& path) {
  std::ofstream os(path, std::ios::binary | std::ios::trunc);
  if (!os) throw Error(Errc::IoError, "cannot write manifest " + path.string());
  os << serialize_manifest(m);
  if (!os) throw Error(Errc::IoError, "failed writing manifest " + path.string());
}

namespace detail {

template <class F>
auto at_line(std::size_t line, F&& f) -> decltype(f()) {
  try {
    return f();
  } catch (const json::exception& e) {
    throw Error(Errc::ParseError, "line " + std::to_string(line) + ": " + e.what());
  } catch (const Error& e) {
    if (e.code() == Errc::ParseError || e.code() == Errc::UnknownParadigm)
      throw Error(Errc::ParseError, "line " + std::to_string(line) + ": " + e.what());
    throw;
  }
}

inline SampleRecord sample_from_json(const json& j) {
  SampleRecord s;
  s.sample_id = j.at("sample_id").get<std::string>();
  s.label = parse_label(j.at("label").get<std::string>());
  s.gender = j.contains("gender") ? parse_gender(j.at("gender").get<std::string>()) : Gender::UNKNOWN;
  if (j.contains("age_years")) {
    const auto& a = j.at("age_years");
    if (a.is_number_integer())
      s.age_years = a.get<int>();
    else if (!(a.is_string() && a.get<std::string>() == "UNKNOWN") && !a.is_null())
      throw Error(Errc::ParseError, "age_years must be an integer or \"UNKNOWN\"");
  }
  for (const auto& g : j.at("segments")) {
    SegmentRecord r;
    r.segment_id = g.at("segment_id").get<std::string>();
    r.sample_id = s.sample_id;
    r.paradigm = parse_paradigm(g.at("paradigm").get<std::string>());
    r.modality = parse_modality(g.at("modality").get<std::string>());
    r.duration_s = g.value("duration_s", 0.0);
    r.feature_ref = g.value("feature_ref", std::string{});
    r.order_index = g.at("order_index").get<int>();
    s.segments.push_back(std::move(r));
  }
  return s;
}

}  // namespace detail

/// Parses manifest text. Only syntax is checked; see `validate_manifest`.
inline DatasetManifest parse_manifest(std::istream& is) {
  DatasetManifest m;
  std::string line;
  std::size_t lineno = 0;
  bool have_header = false;
  while (std::getline(is, line)) {
    ++lineno;
    if (!line.empty() && line.back() == '\r') line.pop_back();
    if (line.find_first_not_of(" \t") == std::string::npos) continue;
    detail::at_line(lineno, [&] {
      const json j = json::parse(line);
      if (!j.is_object()) throw Error(Errc::ParseError, "record is not a JSON object");
      if (!have_header) {
        if (!j.contains("schema_version"))
          throw Error(Errc::ParseError, "first record must be the schema header");
        m.schema_version = j.at("schema_version").get<std::string>();
        m.expected_video_per_sample = j.value("expected_video_per_sample", 26);
        m.expected_audiotext_per_sample = j.value("expected_audiotext_per_sample", 16);
        if (j.contains("paradigm_video_counts")) {
          m.paradigm_video_counts.clear();
          for (const auto& [k, v] : j.at("paradigm_video_counts").items())
            m.paradigm_video_counts[parse_paradigm(k)] = v.get<int>();
        }
        have_header = true;
      } else {
        m.samples.push_back(detail::sample_from_json(j));
      }
      return 0;
    });
  }
  if (!have_header) throw Error(Errc::ParseError, "manifest has no header record");
  return m;
}

inline DatasetManifest load_manifest(const std::filesystem::path& path) {
  if (!std::filesystem::is_regular_file(path))
    throw Error(Errc::NotFound, "manifest not found: " + path.string());
  std::ifstream is(path, std::ios::binary);
  if (!is) throw Error(Errc::NotFound, "cannot open manifest: " + path.string());
  return parse_manifest(is);
}

// ---------------------------------------------------------------------------
// Validation

enum class ViolationKind { COUNT_MISMATCH, UNIQUENESS, PAIRING, ORDER, MODALITY_PARADIGM, RANGE, SCHEMA };

inline std::string to_string(ViolationKind k) {
  switch (k) {
    case ViolationKind::COUNT_MISMATCH: return "COUNT_MISMATCH";
    case ViolationKind::UNIQUENESS: return "UNIQUENESS";
    case ViolationKind::PAIRING: return "PAIRING";
    case ViolationKind::ORDER: return "ORDER";
    case ViolationKind::MODALITY_PARADIGM: return "MODALITY_PARADIGM";
    case ViolationKind::RANGE: return "RANGE";
    case ViolationKind::SCHEMA: return "SCHEMA";
  }
  return "?";
}

struct Violation {
  ViolationKind kind;
  std::string sample_id;  // empty for header-level violations
  std::string message;

  std::string describe() const {
    return to_string(kind) + (sample_id.empty() ? "" : " [" + sample_id + "]") + ": " + message;
  }
};

using ValidationReport = std::vector<Violation>;

inline ValidationReport validate_manifest(const DatasetManifest& m) {
  ValidationReport out;
  auto add = [&](ViolationKind k, const std::string& id, std::string msg) {
    out.push_back({k, id, std::move(msg)});
  };

  int paradigm_sum = 0;
  for (const auto& [p, n] : m.paradigm_video_counts) paradigm_sum += n;
  if (paradigm_sum != m.expected_video_per_sample)
    add(ViolationKind::SCHEMA, "",
        "paradigm video counts sum to " + std::to_string(paradigm_sum) + ", expected " +
            std::to_string(m.expected_video_per_sample));

  std::set<std::string> sample_ids;
  for (const auto& s : m.samples) {
    const std::string& id = s.sample_id;
    if (!sample_ids.insert(id).second) add(ViolationKind::UNIQUENESS, id, "duplicate sample_id");
    if (s.age_years && (*s.age_years < 10 || *s.age_years > 59))
      add(ViolationKind::RANGE, id, "age " + std::to_string(*s.age_years) + " outside [10, 59]");

    std::set<std::string> seg_ids;
    std::map<Modality, int> per_modality;
    std::map<ParadigmId, int> video_per_paradigm;
    std::map<std::tuple<ParadigmId, Modality>, int> last_order;
    std::map<std::tuple<ParadigmId, Modality>, std::set<int>> orders;
    for (const auto& g : s.segments) {
      if (!seg_ids.insert(g.segment_id).second)
        add(ViolationKind::UNIQUENESS, id, "duplicate segment_id '" + g.segment_id + "'");
      if (!(g.duration_s >= 0.0)) add(ViolationKind::RANGE, id, "negative duration in " + g.segment_id);
      if (g.order_index < 0) add(ViolationKind::RANGE, id, "negative order_index in " + g.segment_id);
      if (g.modality != Modality::VIDEO && !has_speech(g.paradigm))
        add(ViolationKind::MODALITY_PARADIGM, id,
            to_string(g.modality) + " segment '" + g.segment_id + "' under " + to_string(g.paradigm));
      ++per_modality[g.modality];
      if (g.modality == Modality::VIDEO) ++video_per_paradigm[g.paradigm];
      const auto key = std::make_tuple(g.paradigm, g.modality);
      auto it = last_order.find(key);
      if (it != last_order.end() && g.order_index <= it->second)
        add(ViolationKind::ORDER, id,
            "order_index not strictly increasing at '" + g.segment_id + "'");
      last_order[key] = g.order_index;
      orders[key].insert(g.order_index);
    }

    const int nv = per_modality[Modality::VIDEO];
    if (nv != m.expected_video_per_sample) {
      add(ViolationKind::COUNT_MISMATCH, id,
          std::to_string(nv) + " video segments, expected " + std::to_string(m.expected_video_per_sample));
    } else {
      for (const auto& [p, expected] : m.paradigm_video_counts) {
        const int got = video_per_paradigm[p];
        if (got != expected)
          add(ViolationKind::COUNT_MISMATCH, id,
              std::to_string(got) + " " + to_string(p) + " video segments, expected " +
                  std::to_string(expected));
      }
    }
    for (auto mod : {Modality::AUDIO, Modality::TEXT}) {
      const int n = per_modality[mod];
      if (n != m.expected_audiotext_per_sample)
        add(ViolationKind::COUNT_MISMATCH, id,
            std::to_string(n) + " " + to_string(mod) + " segments, expected " +
                std::to_string(m.expected_audiotext_per_sample));
    }
    for (auto p : kAllParadigms) {
      if (!has_speech(p)) continue;
      const auto& a = orders[{p, Modality::AUDIO}];
      const auto& t = orders[{p, Modality::TEXT}];
      if (a != t)
        add(ViolationKind::PAIRING, id,
            "AUDIO and TEXT segments of " + to_string(p) + " are not paired by order_index");
    }
  }
  return out;
}

// ---------------------------------------------------------------------------
// Splitting

enum class Split : std::uint8_t { TRAIN, VAL, TEST };
inline constexpr std::array<Split, 3> kAllSplits = {Split::TRAIN, Split::VAL, Split::TEST};

inline std::string to_string(Split s) {
  switch (s) {
    case Split::TRAIN: return "TRAIN";
    case Split::VAL: return "VAL";
    case Split::TEST: return "TEST";
  }
  return "?";
}

inline Split parse_split(std::string_view s) {
  std::string up(s);
  std::transform(up.begin(), up.end(), up.begin(), [](unsigned char c) { return std::toupper(c); });
  for (auto x : kAllSplits)
    if (to_string(x) == up) return x;
  throw Error(Errc::ParseError, "unknown split '" + std::string(s) + "'");
}

struct SplitAssignment {
  std::map<std::string, Split> assignment;
  std::array<double, 3> ratios{0.6, 0.2, 0.2};
  std::uint64_t seed = 0;

  std::vector<std::string> ids(Split s) const {
    std::vector<std::string> out;
    for (const auto& [id, x] : assignment)
      if (x == s) out.push_back(id);
    return out;
  }
  std::size_t count(Split s) const {
    std::size_t n = 0;
    for (const auto& [id, x] : assignment) n += x == s;
    return n;
  }
};

namespace detail {

/// Integer split totals by largest remainder (ties -> earlier split).
inline std::array<int, 3> largest_remainder(int n, const std::array<double, 3>& ratios) {
  std::array<int, 3> out{};
  std::array<double, 3> rem{};
  int used = 0;
  for (int k = 0; k < 3; ++k) {
    const double exact = n * ratios[k];
    out[k] = static_cast<int>(std::floor(exact + 1e-9));
    rem[k] = exact - out[k];
    used += out[k];
  }
  std::array<int, 3> order{0, 1, 2};
  std::stable_sort(order.begin(), order.end(), [&](int a, int b) { return rem[a] > rem[b] + 1e-12; });
  for (int i = 0; used < n; ++i, ++used) ++out[order[i % 3]];
  return out;
}

}  // namespace detail

/// Stratified split with per-class counts rounded so that (a) every class's
/// counts are within 1 of its exact proportional share and (b) the split
/// totals equal the largest-remainder rounding of the overall proportions.
/// Classes with fewer samples than splits go entirely to TRAIN.
inline SplitAssignment stratified_split(const DatasetManifest& m, const std::array<double, 3>& ratios,
                                        std::uint64_t seed) {
  for (double r : ratios)
    if (!(r > 0.0)) throw Error(Errc::InvalidRatios, "split ratios must be positive");
  if (std::abs(ratios[0] + ratios[1] + ratios[2] - 1.0) > 1e-9)
    throw Error(Errc::InvalidRatios, "split ratios must sum to 1");
  if (m.samples.empty()) throw Error(Errc::EmptyManifest, "manifest has no samples");

  SplitAssignment sa;
  sa.ratios = ratios;
  sa.seed = seed;

  std::map<DiagnosisLabel, std::vector<std::string>> by_class;
  for (const auto& s : m.samples) by_class[s.label].push_back(s.sample_id);

  std::vector<DiagnosisLabel> regular;
  int regular_total = 0;
  for (auto& [label, ids] : by_class) {
    std::sort(ids.begin(), ids.end());
    if (ids.size() < kAllSplits.size()) {
      for (const auto& id : ids) sa.assignment[id] = Split::TRAIN;
    } else {
      regular.push_back(label);
      regular_total += static_cast<int>(ids.size());
    }
  }

  // Controlled rounding: floors per cell, then +1 increments chosen by
  // descending remainder subject to row (class) and column (split) deficits,
  // with augmenting paths when the greedy pass gets stuck.
  const std::size_t nc = regular.size();
  std::vector<std::array<int, 3>> cells(nc);
  std::vector<std::array<double, 3>> rem(nc);
  std::vector<int> row_need(nc, 0);
  std::array<int, 3> col_need = detail::largest_remainder(regular_total, ratios);
  for (std::size_t c = 0; c < nc; ++c) {
    const int n = static_cast<int>(by_class[regular[c]].size());
    int used = 0;
    for (int k = 0; k < 3; ++k) {
      const double exact = n * ratios[k];
      cells[c][k] = static_cast<int>(std::floor(exact + 1e-9));
      rem[c][k] = exact - cells[c][k];
      used += cells[c][k];
      col_need[k] -= cells[c][k];
    }
    row_need[c] = n - used;
  }
  std::vector<std::array<bool, 3>> bumped(nc, {false, false, false});
  struct Cand {
    double rem;
    std::size_t c;
    int k;
  };
  std::vector<Cand> cands;
  for (std::size_t c = 0; c < nc; ++c)
    for (int k = 0; k < 3; ++k)
      if (rem[c][k] > 1e-9) cands.push_back({rem[c][k], c, k});
  std::stable_sort(cands.begin(), cands.end(), [](const Cand& a, const Cand& b) { return a.rem > b.rem + 1e-12; });
  for (const auto& cd : cands) {
    if (row_need[cd.c] > 0 && col_need[cd.k] > 0) {
      bumped[cd.c][cd.k] = true;
      --row_need[cd.c];
      --col_need[cd.k];
    }
  }
  // Augmenting paths over the bipartite (class, split) graph of fractional cells.
  auto augment = [&](std::size_t start) -> bool {
    // BFS from a class with unmet need to a split with unmet need, alternating
    // unbumped (class->split) and bumped (split->class) edges.
    std::vector<int> prev_class_of_split(3, -1);
    std::vector<int> prev_split_of_class(nc, -2);
    std::vector<std::size_t> queue{start};
    prev_split_of_class[start] = -1;
    for (std::size_t qi = 0; qi < queue.size(); ++qi) {
      const std::size_t c = queue[qi];
      for (int k = 0; k < 3; ++k) {
        if (bumped[c][k] || rem[c][k] <= 1e-9 || prev_class_of_split[k] != -1) continue;
        prev_class_of_split[k] = static_cast<int>(c);
        if (col_need[k] > 0) {
          // Flip the path.
          int kk = k;
          while (true) {
            const std::size_t cc = static_cast<std::size_t>(prev_class_of_split[kk]);
            bumped[cc][kk] = true;
            const int back = prev_split_of_class[cc];
            if (back < 0) break;
            bumped[cc][back] = false;
            kk = back;
          }
          --row_need[start];
          --col_need[k];
          return true;
        }
        for (std::size_t c2 = 0; c2 < nc; ++c2)
          if (bumped[c2][k] && prev_split_of_class[c2] == -2) {
            prev_split_of_class[c2] = k;
            queue.push_back(c2);
          }
      }
    }
    return false;
  };
  for (std::size_t c = 0; c < nc; ++c)
    while (row_need[c] > 0)
      if (!augment(c)) break;
  // Any remaining need (not expected) falls back to per-class largest remainder.
  for (std::size_t c = 0; c < nc; ++c) {
    while (row_need[c] > 0) {
      int best = -1;
      for (int k = 0; k < 3; ++k)
        if (!bumped[c][k] && (best < 0 || rem[c][k] > rem[c][best])) best = k;
      bumped[c][best] = true;
      --row_need[c];
    }
  }

  for (std::size_t c = 0; c < nc; ++c) {
    auto ids = by_class[regular[c]];
    Rng class_rng(derive_seed(seed, static_cast<std::uint64_t>(index_of(regular[c]))));
    class_rng.shuffle(ids);
    std::size_t at = 0;
    for (int k = 0; k < 3; ++k) {
      const int n = cells[c][k] + (bumped[c][k] ? 1 : 0);
      for (int i = 0; i < n; ++i) sa.assignment[ids[at++]] = kAllSplits[k];
    }
  }
  return sa;
}

// ---------------------------------------------------------------------------
// Task filtering

inline DatasetManifest filter_task(const DatasetManifest& m, const std::set<DiagnosisLabel>& classes) {
  if (classes.empty()) throw Error(Errc::EmptyClassSet, "class set is empty");
  const auto counts = m.class_counts();
  for (auto c : classes)
    if (!counts.count(c)) throw Error(Errc::ClassAbsent, "no samples with label " + to_string(c));
  DatasetManifest out = m;
  out.samples.clear();
  for (const auto& s : m.samples)
    if (classes.count(s.label)) out.samples.push_back(s);
  return out;
}

/// Sub-manifest restricted to the given split.
inline DatasetManifest subset(const DatasetManifest& m, const SplitAssignment& sa, Split which) {
  DatasetManifest out = m;
  out.samples.clear();
  for (const auto& s : m.samples) {
    auto it = sa.assignment.find(s.sample_id);
    if (it != sa.assignment.end() && it->second == which) out.samples.push_back(s);
  }
  return out;
}

}  // namespace pmlf::data
