#pragma once

#include <array>
#include <cstddef>
#include <span>
#include <string>

#include "json.hpp"

#include "drgrade/grades.hpp"

namespace drgrade {

enum class CalibrationObjective { kF1, kYouden };

/// Whether thresholds apply to softmax probabilities (rows sum to 1) or to
/// raw per-grade scores.
enum class ScoreKind { kProbability, kRawScore };

std::string to_string(CalibrationObjective objective);
CalibrationObjective parse_objective(const std::string& name);

/// Per-grade one-vs-rest decision thresholds.
struct ThresholdSet {
  std::array<double, kNumGrades> tau{0.5, 0.5, 0.5, 0.5, 0.5};
  CalibrationObjective objective = CalibrationObjective::kF1;
  ScoreKind kind = ScoreKind::kProbability;
  std::size_t calibrated_on = 0;
  // Grades with no validation positive keep tau = 0.5.
  std::array<bool, kNumGrades> defaulted{};
  // Objective value reached by each tau on the calibration data.
  std::array<double, kNumGrades> objective_value{};

  /// tau[g] = value for every grade; with value > 1 decide() is argmax.
  static ThresholdSet uniform(double value);
};

nlohmann::json to_json(const ThresholdSet& t);
ThresholdSet thresholds_from_json(const nlohmann::json& j);

/// For each grade, the candidate threshold (midpoints between consecutive
/// distinct scores, plus the range ends) maximizing the objective; ties go
/// to the lower threshold.
ThresholdSet calibrate_thresholds(const GradeLogits<double>& scores, std::span<const int> labels,
                                  CalibrationObjective objective = CalibrationObjective::kF1,
                                  ScoreKind kind = ScoreKind::kProbability);

/// Most severe grade whose score reaches its threshold; argmax (ties to the
/// higher grade) when none does.
int decide(const GradeRow<double>& scores, const ThresholdSet& thresholds);

}  // namespace drgrade
