#include "drgrade/metrics.hpp"

#include <algorithm>
#include <cmath>
#include <cstdlib>
#include <limits>
#include <numeric>
#include <ostream>

#include "drgrade/csv.hpp"
#include "drgrade/errors.hpp"

namespace drgrade {

namespace {

void check_pair(std::span<const int> preds, std::span<const int> labels, const char* what) {
  if (preds.size() != labels.size()) {
    throw ValidationError(std::string(what) + ": " + std::to_string(preds.size()) +
                          " predictions vs " + std::to_string(labels.size()) + " labels");
  }
  if (preds.empty()) throw ValidationError(std::string(what) + ": no samples");
  for (std::size_t i = 0; i < preds.size(); ++i) {
    if (!valid_grade(preds[i]) || !valid_grade(labels[i])) {
      throw ValidationError(std::string(what) + ": grade out of range at sample " + std::to_string(i));
    }
  }
}

double nan() { return std::numeric_limits<double>::quiet_NaN(); }

nlohmann::json number_or_null(double v) { return std::isfinite(v) ? nlohmann::json(v) : nlohmann::json(); }

// Integer (fp, tp) vertices of the ROC staircase.
struct CountCurve {
  std::vector<std::pair<std::size_t, std::size_t>> vertices;
  std::size_t positives = 0;
  std::size_t negatives = 0;
};

CountCurve count_curve(std::span<const double> scores, const std::vector<bool>& positives) {
  if (scores.size() != positives.size()) {
    throw ValidationError("roc: " + std::to_string(scores.size()) + " scores vs " +
                          std::to_string(positives.size()) + " labels");
  }
  CountCurve c;
  for (bool p : positives) (p ? c.positives : c.negatives)++;
  std::vector<std::size_t> order(scores.size());
  std::iota(order.begin(), order.end(), std::size_t{0});
  std::stable_sort(order.begin(), order.end(),
                   [&](std::size_t a, std::size_t b) { return scores[a] > scores[b]; });
  c.vertices.emplace_back(0, 0);
  std::size_t fp = 0, tp = 0;
  for (std::size_t i = 0; i < order.size();) {
    std::size_t j = i;
    while (j < order.size() && scores[order[j]] == scores[order[i]]) {
      (positives[order[j]] ? tp : fp)++;
      ++j;
    }
    c.vertices.emplace_back(fp, tp);
    i = j;
  }
  return c;
}

}  // namespace

std::size_t ConfusionMatrix::total() const {
  std::size_t s = 0;
  for (const auto& row : counts) s += std::accumulate(row.begin(), row.end(), std::size_t{0});
  return s;
}

std::size_t ConfusionMatrix::trace() const {
  std::size_t s = 0;
  for (int g = 0; g < kNumGrades; ++g) s += counts[g][g];
  return s;
}

ConfusionMatrix confusion(std::span<const int> preds, std::span<const int> labels) {
  check_pair(preds, labels, "confusion");
  ConfusionMatrix cm;
  for (std::size_t i = 0; i < preds.size(); ++i) {
    ++cm.counts[static_cast<std::size_t>(labels[i])][static_cast<std::size_t>(preds[i])];
  }
  return cm;
}

ClassRates prf_and_accuracy(const ConfusionMatrix& cm) {
  const std::size_t total = cm.total();
  if (total == 0) throw ValidationError("prf_and_accuracy: empty confusion matrix");
  ClassRates r;
  for (int c = 0; c < kNumGrades; ++c) {
    const double tp = static_cast<double>(cm.counts[c][c]);
    double predicted = 0.0, actual = 0.0;
    for (int k = 0; k < kNumGrades; ++k) {
      predicted += static_cast<double>(cm.counts[k][c]);
      actual += static_cast<double>(cm.counts[c][k]);
    }
    r.precision_undefined[c] = predicted == 0.0;
    r.recall_undefined[c] = actual == 0.0;
    r.precision[c] = predicted > 0 ? tp / predicted : 0.0;
    r.recall[c] = actual > 0 ? tp / actual : 0.0;
    const double pr = r.precision[c] + r.recall[c];
    r.f1[c] = pr > 0 ? 2.0 * r.precision[c] * r.recall[c] / pr : 0.0;
  }
  const auto mean = [](const std::array<double, kNumGrades>& a) {
    return std::accumulate(a.begin(), a.end(), 0.0) / kNumGrades;
  };
  r.macro_precision = mean(r.precision);
  r.macro_recall = mean(r.recall);
  r.macro_f1 = mean(r.f1);
  r.accuracy = static_cast<double>(cm.trace()) / static_cast<double>(total);
  return r;
}

std::vector<RocPoint> roc_points(std::span<const double> scores, const std::vector<bool>& positives) {
  const CountCurve c = count_curve(scores, positives);
  if (c.positives == 0 || c.negatives == 0) {
    throw ValidationError("roc_points: need at least one positive and one negative sample");
  }
  std::vector<RocPoint> pts;
  pts.reserve(c.vertices.size());
  for (const auto& [fp, tp] : c.vertices) {
    pts.push_back({static_cast<double>(fp) / static_cast<double>(c.negatives),
                   static_cast<double>(tp) / static_cast<double>(c.positives)});
  }
  return pts;
}

double trapezoid_area(const std::vector<RocPoint>& points) {
  double area = 0.0;
  for (std::size_t i = 1; i < points.size(); ++i) {
    area += (points[i].fpr - points[i - 1].fpr) * (points[i].tpr + points[i - 1].tpr) / 2.0;
  }
  return area;
}

std::optional<double> auroc_binary(std::span<const double> scores,
                                   const std::vector<bool>& positives) {
  const CountCurve c = count_curve(scores, positives);
  if (c.positives == 0 || c.negatives == 0) return std::nullopt;
  // Twice the trapezoid area in count units: sum of dFP * (TP_i + TP_{i-1}).
  unsigned long long twice = 0;
  for (std::size_t i = 1; i < c.vertices.size(); ++i) {
    twice += static_cast<unsigned long long>(c.vertices[i].first - c.vertices[i - 1].first) *
             (c.vertices[i].second + c.vertices[i - 1].second);
  }
  return static_cast<double>(twice) /
         (2.0 * static_cast<double>(c.positives) * static_cast<double>(c.negatives));
}

AurocResult auroc_ovr(const GradeLogits<double>& scores, std::span<const int> labels) {
  if (static_cast<std::size_t>(scores.rows()) != labels.size()) {
    throw ValidationError("auroc_ovr: score rows and labels differ in length");
  }
  AurocResult r;
  double sum = 0.0;
  int defined = 0;
  std::vector<double> column(labels.size());
  std::vector<bool> positives(labels.size());
  std::vector<double> pooled;
  std::vector<bool> pooled_pos;
  pooled.reserve(labels.size() * kNumGrades);
  pooled_pos.reserve(labels.size() * kNumGrades);
  for (int c = 0; c < kNumGrades; ++c) {
    for (std::size_t i = 0; i < labels.size(); ++i) {
      column[i] = scores(static_cast<Eigen::Index>(i), c);
      positives[i] = labels[i] == c;
      pooled.push_back(column[i]);
      pooled_pos.push_back(positives[i]);
    }
    const auto auc = auroc_binary(column, positives);
    r.defined[c] = auc.has_value();
    r.per_class[c] = auc.value_or(nan());
    if (auc) {
      sum += *auc;
      ++defined;
    }
  }
  r.macro_mean = defined ? sum / defined : nan();
  r.micro = auroc_binary(pooled, pooled_pos).value_or(nan());
  return r;
}

ErrorMargins error_margin(std::span<const int> preds, std::span<const int> labels) {
  check_pair(preds, labels, "error_margin");
  std::size_t exact = 0, one = 0, more = 0;
  for (std::size_t i = 0; i < preds.size(); ++i) {
    const int d = std::abs(preds[i] - labels[i]);
    (d == 0 ? exact : (d == 1 ? one : more))++;
  }
  const double n = static_cast<double>(preds.size());
  return {static_cast<double>(exact) / n, static_cast<double>(one) / n, static_cast<double>(more) / n};
}

MetricsReport evaluate_predictions(std::span<const int> preds, std::span<const int> labels,
                                   const GradeLogits<double>& scores) {
  MetricsReport r;
  r.samples = preds.size();
  r.confusion = confusion(preds, labels);
  r.rates = prf_and_accuracy(r.confusion);
  r.auroc = auroc_ovr(scores, labels);
  r.margins = error_margin(preds, labels);
  return r;
}

nlohmann::json to_json(const MetricsReport& report) {
  nlohmann::json j;
  j["samples"] = report.samples;
  j["accuracy"] = report.rates.accuracy;
  j["macro_precision"] = report.rates.macro_precision;
  j["macro_recall"] = report.rates.macro_recall;
  j["macro_f1"] = report.rates.macro_f1;
  j["auroc_macro_mean"] = number_or_null(report.auroc.macro_mean);
  j["auroc_micro"] = number_or_null(report.auroc.micro);
  j["error_margin"] = {{"exact", report.margins.exact},
                       {"off_by_one", report.margins.off_by_one},
                       {"off_by_two_plus", report.margins.off_by_two_plus}};
  for (int c = 0; c < kNumGrades; ++c) {
    nlohmann::json k;
    k["grade"] = c;
    k["name"] = std::string(kGradeNames[c]);
    k["precision"] = report.rates.precision[c];
    k["recall"] = report.rates.recall[c];
    k["f1"] = report.rates.f1[c];
    k["precision_undefined"] = report.rates.precision_undefined[c];
    k["recall_undefined"] = report.rates.recall_undefined[c];
    k["auroc"] = number_or_null(report.auroc.per_class[c]);
    k["auroc_undefined"] = !report.auroc.defined[c];
    j["per_class"].push_back(k);
  }
  for (const auto& row : report.confusion.counts) {
    j["confusion"].push_back(std::vector<std::size_t>(row.begin(), row.end()));
  }
  return j;
}

void write_confusion_csv(std::ostream& out, const ConfusionMatrix& cm) {
  out << "true";
  for (int p = 0; p < kNumGrades; ++p) out << ",pred_" << p;
  out << '\n';
  for (int t = 0; t < kNumGrades; ++t) {
    out << t;
    for (int p = 0; p < kNumGrades; ++p) out << ',' << cm.counts[t][p];
    out << '\n';
  }
}

ConfusionMatrix read_confusion_csv(const std::filesystem::path& path) {
  const csv::Table table = csv::read_file(path);
  const std::string origin = path.string();
  if (table.header.size() != kNumGrades + 1) {
    throw ValidationError(origin + ":1: expected " + std::to_string(kNumGrades + 1) + " columns");
  }
  if (table.rows.size() != kNumGrades) {
    throw ValidationError(origin + ": expected " + std::to_string(kNumGrades) + " rows, got " +
                          std::to_string(table.rows.size()));
  }
  ConfusionMatrix cm;
  for (const auto& row : table.rows) {
    const auto t = csv::parse_int(row.fields[0], row.line, origin, "true");
    if (!valid_grade(static_cast<int>(t))) {
      throw ValidationError(origin + ":" + std::to_string(row.line) + ": grade out of range");
    }
    for (int p = 0; p < kNumGrades; ++p) {
      const auto v = csv::parse_int(row.fields[static_cast<std::size_t>(p + 1)], row.line, origin,
                                    table.header[static_cast<std::size_t>(p + 1)]);
      if (v < 0) throw ValidationError(origin + ":" + std::to_string(row.line) + ": negative count");
      cm.counts[static_cast<std::size_t>(t)][static_cast<std::size_t>(p)] = static_cast<std::size_t>(v);
    }
  }
  return cm;
}

void write_roc_csv(std::ostream& out, const GradeLogits<double>& scores, std::span<const int> labels) {
  out << "class,fpr,tpr\n";
  std::vector<double> column(labels.size());
  std::vector<bool> positives(labels.size());
  for (int c = 0; c < kNumGrades; ++c) {
    std::size_t pos = 0;
    for (std::size_t i = 0; i < labels.size(); ++i) {
      column[i] = scores(static_cast<Eigen::Index>(i), c);
      positives[i] = labels[i] == c;
      pos += positives[i];
    }
    if (pos == 0 || pos == labels.size()) continue;
    for (const auto& p : roc_points(column, positives)) {
      out << c << ',' << csv::format_real(p.fpr) << ',' << csv::format_real(p.tpr) << '\n';
    }
  }
}

}  // namespace drgrade
