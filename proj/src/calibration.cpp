#include "drgrade/calibration.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <vector>

#include "drgrade/errors.hpp"

namespace drgrade {

std::string to_string(CalibrationObjective objective) {
  return objective == CalibrationObjective::kF1 ? "f1" : "youden";
}

CalibrationObjective parse_objective(const std::string& name) {
  if (name == "f1") return CalibrationObjective::kF1;
  if (name == "youden") return CalibrationObjective::kYouden;
  throw ValidationError("unknown calibration objective '" + name + "' (expected f1 or youden)");
}

ThresholdSet ThresholdSet::uniform(double value) {
  ThresholdSet t;
  t.tau.fill(value);
  return t;
}

nlohmann::json to_json(const ThresholdSet& t) {
  nlohmann::json j;
  j["tau"] = t.tau;
  j["objective"] = to_string(t.objective);
  j["score_kind"] = t.kind == ScoreKind::kProbability ? "probability" : "raw";
  j["calibrated_on"] = t.calibrated_on;
  j["defaulted"] = t.defaulted;
  j["objective_value"] = t.objective_value;
  return j;
}

ThresholdSet thresholds_from_json(const nlohmann::json& j) {
  ThresholdSet t;
  try {
    t.tau = j.at("tau").get<std::array<double, kNumGrades>>();
    t.objective = parse_objective(j.at("objective").get<std::string>());
    t.kind = j.value("score_kind", std::string("probability")) == "raw" ? ScoreKind::kRawScore
                                                                       : ScoreKind::kProbability;
    t.calibrated_on = j.value("calibrated_on", std::size_t{0});
    if (j.contains("defaulted")) t.defaulted = j.at("defaulted").get<std::array<bool, kNumGrades>>();
    if (j.contains("objective_value")) {
      t.objective_value = j.at("objective_value").get<std::array<double, kNumGrades>>();
    }
  } catch (const nlohmann::json::exception& e) {
    throw ValidationError(std::string("thresholds JSON: ") + e.what());
  }
  if (t.kind == ScoreKind::kProbability) {
    for (double v : t.tau) {
      if (!(v >= 0 && v <= 1)) throw ValidationError("thresholds JSON: tau must lie in [0, 1]");
    }
  }
  return t;
}

namespace {

void check_probability_row(const GradeRow<double>& row, Eigen::Index i) {
  if (!(std::abs(row.sum() - 1.0) <= 1e-6) || row.minCoeff() < 0.0 || !row.allFinite()) {
    throw ValidationError("probability row " + std::to_string(i) +
                          " is not a distribution (sum must be 1 within 1e-6)");
  }
}

double objective_at(CalibrationObjective objective, double tp, double fp, double positives,
                    double negatives) {
  const double fn = positives - tp;
  if (objective == CalibrationObjective::kF1) {
    const double denom = 2.0 * tp + fp + fn;
    return denom > 0 ? 2.0 * tp / denom : 0.0;
  }
  const double tpr = positives > 0 ? tp / positives : 0.0;
  const double fpr = negatives > 0 ? fp / negatives : 0.0;
  return tpr - fpr;
}

}  // namespace

ThresholdSet calibrate_thresholds(const GradeLogits<double>& scores, std::span<const int> labels,
                                  CalibrationObjective objective, ScoreKind kind) {
  const Eigen::Index n = scores.rows();
  if (n < 1) throw ValidationError("calibrate_thresholds: no validation samples");
  if (static_cast<std::size_t>(n) != labels.size()) {
    throw ValidationError("calibrate_thresholds: score rows and labels differ in length");
  }
  for (Eigen::Index i = 0; i < n; ++i) {
    if (!valid_grade(labels[static_cast<std::size_t>(i)])) {
      throw ValidationError("calibrate_thresholds: label out of range at row " + std::to_string(i));
    }
    if (kind == ScoreKind::kProbability) check_probability_row(scores.row(i), i);
  }

  ThresholdSet out;
  out.objective = objective;
  out.kind = kind;
  out.calibrated_on = static_cast<std::size_t>(n);
  std::vector<std::pair<double, bool>> sorted(static_cast<std::size_t>(n));
  for (int c = 0; c < kNumGrades; ++c) {
    double positives = 0.0;
    for (Eigen::Index i = 0; i < n; ++i) {
      const bool pos = labels[static_cast<std::size_t>(i)] == c;
      sorted[static_cast<std::size_t>(i)] = {scores(i, c), pos};
      positives += pos;
    }
    if (positives == 0.0) {
      out.tau[c] = 0.5;
      out.defaulted[c] = true;
      out.objective_value[c] = 0.0;
      continue;
    }
    const double negatives = static_cast<double>(n) - positives;
    std::sort(sorted.begin(), sorted.end());

    std::vector<double> candidates;
    candidates.push_back(kind == ScoreKind::kProbability ? 0.0 : sorted.front().first);
    for (std::size_t i = 1; i < sorted.size(); ++i) {
      if (sorted[i].first != sorted[i - 1].first) {
        candidates.push_back(sorted[i - 1].first + (sorted[i].first - sorted[i - 1].first) / 2.0);
      }
    }
    candidates.push_back(kind == ScoreKind::kProbability
                             ? 1.0
                             : std::nextafter(sorted.back().first,
                                              std::numeric_limits<double>::infinity()));
    std::sort(candidates.begin(), candidates.end());

    // Ascending sweep: `below` counts samples with score < tau.
    std::size_t below = 0;
    double tp_below = 0.0;
    double best_value = -std::numeric_limits<double>::infinity();
    double best_tau = candidates.front();
    for (double tau : candidates) {
      while (below < sorted.size() && sorted[below].first < tau) {
        tp_below += sorted[below].second;
        ++below;
      }
      const double tp = positives - tp_below;
      const double fp = static_cast<double>(sorted.size() - below) - tp;
      const double value = objective_at(objective, tp, fp, positives, negatives);
      if (value > best_value) {
        best_value = value;
        best_tau = tau;
      }
    }
    out.tau[c] = best_tau;
    out.objective_value[c] = best_value;
  }
  return out;
}

int decide(const GradeRow<double>& scores, const ThresholdSet& thresholds) {
  if (!scores.allFinite()) throw ValidationError("decide: non-finite score");
  if (thresholds.kind == ScoreKind::kProbability) check_probability_row(scores, 0);
  for (int c = kNumGrades - 1; c >= 0; --c) {
    if (scores(c) >= thresholds.tau[c]) return c;
  }
  return argmax_grade(scores);
}

}  // namespace drgrade
