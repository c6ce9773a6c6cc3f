#pragma once

#include <array>
#include <cmath>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include "drgrade/errors.hpp"
#include "drgrade/grades.hpp"

namespace drgrade {

/// Per-grade multipliers on the per-sample loss.
struct ClassWeights {
  std::array<double, kNumGrades> w{1.0, 1.0, 1.0, 1.0, 1.0};

  static ClassWeights uniform() { return {}; }

  /// 1/count per grade, rescaled so the present grades average 1. Absent
  /// grades get weight 0.
  static ClassWeights inverse_frequency(const std::array<std::size_t, kNumGrades>& counts) {
    ClassWeights cw;
    double sum = 0.0;
    int present = 0;
    for (int g = 0; g < kNumGrades; ++g) {
      cw.w[g] = counts[g] > 0 ? 1.0 / static_cast<double>(counts[g]) : 0.0;
      sum += cw.w[g];
      present += counts[g] > 0;
    }
    if (present == 0) throw ValidationError("class weights: all class counts are zero");
    for (double& v : cw.w) v *= present / sum;
    return cw;
  }

  void validate() const {
    bool any = false;
    for (double v : w) {
      if (!(v >= 0) || !std::isfinite(v)) {
        throw ValidationError("class weights: weights must be finite and >= 0");
      }
      any = any || v > 0;
    }
    if (!any) throw ValidationError("class weights: at least one weight must be > 0");
  }
};

template <typename Scalar>
struct LossValue {
  Scalar value = 0;
  GradeLogits<Scalar> d_logits;
};

namespace detail {

template <typename Scalar>
void check_loss_inputs(const GradeLogits<Scalar>& logits, std::span<const int> targets,
                       const char* what) {
  if (logits.rows() == 0) throw ValidationError(std::string(what) + ": empty batch");
  if (static_cast<Eigen::Index>(targets.size()) != logits.rows()) {
    throw ValidationError(std::string(what) + ": " + std::to_string(targets.size()) +
                          " targets for " + std::to_string(logits.rows()) + " rows");
  }
  for (std::size_t i = 0; i < targets.size(); ++i) {
    if (!valid_grade(targets[i])) {
      throw ValidationError(std::string(what) + ": target " + std::to_string(targets[i]) +
                            " at row " + std::to_string(i) + " is not a grade in 0..4");
    }
  }
}

template <typename Scalar>
Scalar log_sum_exp(const GradeRow<Scalar>& row) {
  const Scalar m = row.maxCoeff();
  return m + std::log((row.array() - m).exp().sum());
}

}  // namespace detail

/// mean_i w[y_i] * -log softmax(logits_i)[y_i]
template <typename Scalar>
LossValue<Scalar> weighted_cross_entropy(const GradeLogits<Scalar>& logits,
                                         std::span<const int> targets,
                                         const ClassWeights& weights = {}) {
  detail::check_loss_inputs(logits, targets, "weighted_cross_entropy");
  weights.validate();
  const Eigen::Index n = logits.rows();
  const Scalar inv_n = Scalar(1) / static_cast<Scalar>(n);
  LossValue<Scalar> out;
  out.d_logits.resize(n, kNumGrades);
  for (Eigen::Index i = 0; i < n; ++i) {
    const int y = targets[static_cast<std::size_t>(i)];
    const GradeRow<Scalar> row = logits.row(i);
    const Scalar lse = detail::log_sum_exp(row);
    const auto w = static_cast<Scalar>(weights.w[y]);
    out.value += w * (lse - row(y));
    GradeRow<Scalar> grad = (row.array() - lse).exp();
    grad(y) -= Scalar(1);
    out.d_logits.row(i) = grad * (w * inv_n);
  }
  out.value *= inv_n;
  return out;
}

/// mean_i w[y_i] * (1 - p_y)^gamma * -log p_y with p = softmax(logits_i).
template <typename Scalar>
LossValue<Scalar> focal_loss(const GradeLogits<Scalar>& logits, std::span<const int> targets,
                             double gamma = 2.0, const ClassWeights& weights = {}) {
  detail::check_loss_inputs(logits, targets, "focal_loss");
  if (!(gamma >= 0)) throw ValidationError("focal_loss: gamma must be >= 0");
  weights.validate();
  const auto g = static_cast<Scalar>(gamma);
  const Eigen::Index n = logits.rows();
  const Scalar inv_n = Scalar(1) / static_cast<Scalar>(n);
  LossValue<Scalar> out;
  out.d_logits.resize(n, kNumGrades);
  for (Eigen::Index i = 0; i < n; ++i) {
    const int y = targets[static_cast<std::size_t>(i)];
    const GradeRow<Scalar> row = logits.row(i);
    const Scalar lse = detail::log_sum_exp(row);
    const GradeRow<Scalar> probs = (row.array() - lse).exp();
    const Scalar log_p = row(y) - lse;
    const Scalar p = std::exp(log_p);
    const Scalar q = -std::expm1(log_p);
    const Scalar q_pow = std::pow(q, g);
    const auto w = static_cast<Scalar>(weights.w[y]);
    out.value += w * q_pow * -log_p;
    // p * d/dp [-(1-p)^g log p] = g p (1-p)^(g-1) log p - (1-p)^g
    const Scalar focus = (g == Scalar(0) || q == Scalar(0)) ? Scalar(0)
                                                            : g * p * std::pow(q, g - 1) * log_p;
    const Scalar coef = focus - q_pow;
    GradeRow<Scalar> grad = -probs;
    grad(y) += Scalar(1);
    out.d_logits.row(i) = grad * (coef * w * inv_n);
  }
  out.value *= inv_n;
  return out;
}

/// Which grade pairs the ranking hinge constrains.
enum class RankingPairs {
  /// (a, b) whenever |a - y| < |b - y|: scores decay away from the truth.
  kUnimodal,
  /// The truth outranks everything, and among the rest the more severe
  /// grade outranks the less severe one.
  kMonotone,
};

/// Ordered (higher, lower) pairs for true grade y.
inline std::vector<std::pair<int, int>> ranking_pairs(int y, RankingPairs mode) {
  std::vector<std::pair<int, int>> pairs;
  for (int a = 0; a < kNumGrades; ++a) {
    for (int b = 0; b < kNumGrades; ++b) {
      if (a == b) continue;
      bool keep = false;
      if (mode == RankingPairs::kUnimodal) {
        keep = std::abs(a - y) < std::abs(b - y);
      } else {
        keep = (a == y) || (b != y && a > b);
      }
      if (keep) pairs.emplace_back(a, b);
    }
  }
  return pairs;
}

/// Mean over samples of the mean pairwise hinge max(0, margin - (s_a - s_b)).
template <typename Scalar>
LossValue<Scalar> ranking_loss(const GradeLogits<Scalar>& scores, std::span<const int> targets,
                               double margin = 0.05,
                               RankingPairs mode = RankingPairs::kUnimodal) {
  detail::check_loss_inputs(scores, targets, "ranking_loss");
  if (!(margin >= 0)) throw ValidationError("ranking_loss: margin must be >= 0");
  std::array<std::vector<std::pair<int, int>>, kNumGrades> table;
  for (int y = 0; y < kNumGrades; ++y) table[y] = ranking_pairs(y, mode);

  const auto m = static_cast<Scalar>(margin);
  const Eigen::Index n = scores.rows();
  LossValue<Scalar> out;
  out.d_logits = GradeLogits<Scalar>::Zero(n, kNumGrades);
  for (Eigen::Index i = 0; i < n; ++i) {
    const auto& pairs = table[targets[static_cast<std::size_t>(i)]];
    const Scalar scale = Scalar(1) / static_cast<Scalar>(pairs.size() * static_cast<std::size_t>(n));
    Scalar sample = 0;
    for (const auto& [a, b] : pairs) {
      const Scalar slack = m - (scores(i, a) - scores(i, b));
      if (slack > Scalar(0)) {
        sample += slack;
        out.d_logits(i, a) -= scale;
        out.d_logits(i, b) += scale;
      }
    }
    out.value += sample / static_cast<Scalar>(pairs.size());
  }
  out.value /= static_cast<Scalar>(n);
  return out;
}

struct CombinedLossConfig {
  double alpha = 0.7;
  // Focusing parameter for the classification term; 0 means plain weighted
  // cross-entropy.
  double gamma = 0.0;
  ClassWeights weights;
  double margin = 0.05;
  RankingPairs pairs = RankingPairs::kUnimodal;
  // When false, alpha multiplies the ranking term instead.
  bool alpha_on_cross_entropy = true;
  // Ranking scores are logits * score_scale. With temperature-scaled logits
  // pass the temperature to hinge in similarity units.
  double score_scale = 1.0;
};

/// alpha * CE(logits) + (1 - alpha) * ranking(logits * score_scale).
template <typename Scalar>
LossValue<Scalar> combined_loss(const GradeLogits<Scalar>& logits, std::span<const int> targets,
                                const CombinedLossConfig& config = {}) {
  if (!(config.alpha >= 0 && config.alpha <= 1)) {
    throw ValidationError("combined_loss: alpha must be in [0, 1]");
  }
  if (!(config.score_scale > 0)) throw ValidationError("combined_loss: score_scale must be > 0");
  const double ce_weight = config.alpha_on_cross_entropy ? config.alpha : 1.0 - config.alpha;
  const double rank_weight = 1.0 - ce_weight;

  LossValue<Scalar> ce = config.gamma == 0.0
                             ? weighted_cross_entropy(logits, targets, config.weights)
                             : focal_loss(logits, targets, config.gamma, config.weights);
  const auto scale = static_cast<Scalar>(config.score_scale);
  const GradeLogits<Scalar> scores = config.score_scale == 1.0 ? logits : GradeLogits<Scalar>(logits * scale);
  LossValue<Scalar> rank = ranking_loss(scores, targets, config.margin, config.pairs);

  if (rank_weight == 0.0) return ce;
  if (ce_weight == 0.0) {
    rank.d_logits *= scale;
    return rank;
  }
  LossValue<Scalar> out;
  out.value = static_cast<Scalar>(ce_weight) * ce.value + static_cast<Scalar>(rank_weight) * rank.value;
  out.d_logits = static_cast<Scalar>(ce_weight) * ce.d_logits +
                 static_cast<Scalar>(rank_weight) * scale * rank.d_logits;
  return out;
}

}  // namespace drgrade
