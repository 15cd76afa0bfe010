#pragma once

// Classification metrics in percent: accuracy, per-class and macro/weighted
// precision, recall, F1, and the confusion matrix (rows = truth).

#include <map>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "pmlf/core.hpp"
#include "pmlf/fuse.hpp"

namespace pmlf::eval {

struct ClassScores {
  double precision = 0.0;
  double recall = 0.0;
  double f1 = 0.0;
};

struct MetricsReport {
  std::vector<DiagnosisLabel> class_set;
  double accuracy = 0.0;
  std::map<DiagnosisLabel, ClassScores> per_class;
  double macro_p = 0.0, macro_r = 0.0, macro_f1 = 0.0;
  double weighted_p = 0.0, weighted_r = 0.0, weighted_f1 = 0.0;
  std::vector<std::vector<long>> confusion;
  std::map<DiagnosisLabel, long> support;
};

inline double ratio_or_zero(double num, double den) { return den > 0.0 ? num / den : 0.0; }

/// Zero-division yields 0. Macro averages run over the whole class set,
/// including classes with no support.
inline MetricsReport compute_metrics(const std::vector<fuse::PredictionRecord>& preds,
                                     const std::vector<DiagnosisLabel>& class_set) {
  if (preds.empty()) throw Error(Errc::EmptyInput, "no predictions");
  if (class_set.empty()) throw Error(Errc::EmptyInput, "empty class set");
  std::map<DiagnosisLabel, std::size_t> pos;
  for (std::size_t i = 0; i < class_set.size(); ++i) pos[class_set[i]] = i;
  const std::size_t c = class_set.size();
  MetricsReport r;
  r.class_set = class_set;
  r.confusion.assign(c, std::vector<long>(c, 0));
  for (const auto& p : preds) {
    if (!p.truth) throw Error(Errc::UnknownClass, "prediction without ground truth");
    auto t = pos.find(*p.truth);
    auto q = pos.find(p.predicted);
    if (t == pos.end() || q == pos.end()) throw Error(Errc::UnknownClass, "label outside class set");
    ++r.confusion[t->second][q->second];
  }
  const double n = static_cast<double>(preds.size());
  long trace = 0;
  for (std::size_t i = 0; i < c; ++i) {
    long tp = r.confusion[i][i], row = 0, col = 0;
    for (std::size_t j = 0; j < c; ++j) {
      row += r.confusion[i][j];
      col += r.confusion[j][i];
    }
    trace += tp;
    ClassScores s;
    s.precision = ratio_or_zero(tp, col);
    s.recall = ratio_or_zero(tp, row);
    s.f1 = ratio_or_zero(2.0 * s.precision * s.recall, s.precision + s.recall);
    r.per_class[class_set[i]] = {100.0 * s.precision, 100.0 * s.recall, 100.0 * s.f1};
    r.support[class_set[i]] = row;
    r.macro_p += s.precision / c;
    r.macro_r += s.recall / c;
    r.macro_f1 += s.f1 / c;
    r.weighted_p += s.precision * row / n;
    r.weighted_r += s.recall * row / n;
    r.weighted_f1 += s.f1 * row / n;
  }
  r.accuracy = 100.0 * trace / n;
  r.macro_p *= 100.0;
  r.macro_r *= 100.0;
  r.macro_f1 *= 100.0;
  r.weighted_p *= 100.0;
  r.weighted_r *= 100.0;
  r.weighted_f1 *= 100.0;
  return r;
}

inline double round2(double x) { return std::round(x * 100.0) / 100.0; }

inline nlohmann::json to_json(const MetricsReport& r) {
  nlohmann::json per = nlohmann::json::object();
  for (const auto& [l, s] : r.per_class)
    per[to_string(l)] = {{"precision", round2(s.precision)}, {"recall", round2(s.recall)}, {"f1", round2(s.f1)},
                         {"support", r.support.at(l)}};
  std::vector<std::string> cls;
  for (auto l : r.class_set) cls.push_back(to_string(l));
  return {{"class_set", cls},
          {"accuracy", round2(r.accuracy)},
          {"macro_p", round2(r.macro_p)},
          {"macro_r", round2(r.macro_r)},
          {"macro_f1", round2(r.macro_f1)},
          {"weighted_p", round2(r.weighted_p)},
          {"weighted_r", round2(r.weighted_r)},
          {"weighted_f1", round2(r.weighted_f1)},
          {"per_class", per},
          {"confusion", r.confusion}};
}

}  // namespace pmlf::eval
