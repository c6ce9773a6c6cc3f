#pragma once

#include <Eigen/Dense>

#include <array>
#include <string_view>

namespace drgrade {

/// Severity grades 0..4: No DR, Mild, Moderate, Severe, Proliferative.
inline constexpr int kNumGrades = 5;

inline constexpr std::array<std::string_view, kNumGrades> kGradeNames = {
    "No DR", "Mild", "Moderate", "Severe", "Proliferative"};

inline constexpr bool valid_grade(int g) { return g >= 0 && g < kNumGrades; }

/// N x 5 score matrix; column g belongs to grade g.
template <typename Scalar>
using GradeLogits = Eigen::Matrix<Scalar, Eigen::Dynamic, kNumGrades, Eigen::RowMajor>;

template <typename Scalar>
using GradeRow = Eigen::Matrix<Scalar, 1, kNumGrades>;

/// Index of the largest entry; ties go to the higher grade.
template <typename Derived>
int argmax_grade(const Eigen::DenseBase<Derived>& row) {
  int best = 0;
  for (int g = 1; g < kNumGrades; ++g) {
    if (row(g) >= row(best)) best = g;
  }
  return best;
}

/// Row-wise numerically stable softmax.
template <typename Scalar>
GradeLogits<Scalar> softmax_rows(const GradeLogits<Scalar>& logits) {
  GradeLogits<Scalar> out(logits.rows(), kNumGrades);
  for (Eigen::Index i = 0; i < logits.rows(); ++i) {
    const auto shifted = (logits.row(i).array() - logits.row(i).maxCoeff()).exp();
    out.row(i) = shifted / shifted.sum();
  }
  return out;
}

}  // namespace drgrade
