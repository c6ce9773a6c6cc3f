#pragma once

#include <array>
#include <cstddef>
#include <filesystem>
#include <iosfwd>
#include <optional>
#include <span>
#include <vector>

#include "json.hpp"

#include "drgrade/grades.hpp"

namespace drgrade {

/// counts[true][predicted].
struct ConfusionMatrix {
  std::array<std::array<std::size_t, kNumGrades>, kNumGrades> counts{};

  std::size_t total() const;
  std::size_t trace() const;
};

ConfusionMatrix confusion(std::span<const int> preds, std::span<const int> labels);

struct ClassRates {
  std::array<double, kNumGrades> precision{};
  std::array<double, kNumGrades> recall{};
  std::array<double, kNumGrades> f1{};
  // Set where the denominator was zero and the rate was reported as 0.
  std::array<bool, kNumGrades> precision_undefined{};
  std::array<bool, kNumGrades> recall_undefined{};
  double accuracy = 0.0;
  double macro_precision = 0.0;
  double macro_recall = 0.0;
  double macro_f1 = 0.0;
};

ClassRates prf_and_accuracy(const ConfusionMatrix& cm);

struct RocPoint {
  double fpr = 0.0;
  double tpr = 0.0;
  bool operator==(const RocPoint&) const = default;
};

/// ROC staircase from (0,0) to (1,1), one vertex per distinct score
/// threshold (descending). Tied scores move diagonally. Throws
/// ValidationError if either class is absent.
std::vector<RocPoint> roc_points(std::span<const double> scores, const std::vector<bool>& positives);

/// Trapezoidal area under a polyline of ROC points.
double trapezoid_area(const std::vector<RocPoint>& points);

/// Binary AUROC with ties counted as one half; nullopt if degenerate.
std::optional<double> auroc_binary(std::span<const double> scores,
                                   const std::vector<bool>& positives);

struct AurocResult {
  std::array<double, kNumGrades> per_class{};
  std::array<bool, kNumGrades> defined{};
  double macro_mean = 0.0;  // unweighted mean over defined classes; NaN if none
  double micro = 0.0;       // pooled one-hot AUROC; NaN if degenerate
};

AurocResult auroc_ovr(const GradeLogits<double>& scores, std::span<const int> labels);

struct ErrorMargins {
  double exact = 0.0;
  double off_by_one = 0.0;
  double off_by_two_plus = 0.0;
};

ErrorMargins error_margin(std::span<const int> preds, std::span<const int> labels);

struct MetricsReport {
  std::size_t samples = 0;
  ConfusionMatrix confusion;
  ClassRates rates;
  AurocResult auroc;
  ErrorMargins margins;
};

MetricsReport evaluate_predictions(std::span<const int> preds, std::span<const int> labels,
                                   const GradeLogits<double>& scores);

nlohmann::json to_json(const MetricsReport& report);

void write_confusion_csv(std::ostream& out, const ConfusionMatrix& cm);
ConfusionMatrix read_confusion_csv(const std::filesystem::path& path);

/// Columns class,fpr,tpr for every defined class.
void write_roc_csv(std::ostream& out, const GradeLogits<double>& scores, std::span<const int> labels);

}  // namespace drgrade
