#pragma once

// Central-difference gradient checks shared by the unit tests and the
// acceptance runner.

#include <algorithm>
#include <cmath>
#include <functional>
#include <limits>
#include <map>
#include <random>
#include <string>
#include <vector>

#include "drgrade/losses.hpp"
#include "drgrade/models.hpp"
#include "drgrade/tensor.hpp"

namespace gradcheck {

using drgrade::Index;
using T = drgrade::Tensor<double>;

inline constexpr double kStep = 1e-5;

struct Report {
  double error = 0.0;
  std::string worst;

  void merge(const std::string& name, double e) {
    if (e >= error) {
      error = e;
      worst = name;
    }
  }
};

inline T random_tensor(drgrade::Shape shape, std::mt19937_64& rng, double scale = 1.0) {
  std::normal_distribution<double> d(0.0, scale);
  T t(std::move(shape));
  for (Index i = 0; i < t.size(); ++i) t[i] = d(rng);
  return t;
}

/// Values bounded away from zero, for inputs to kinked ops.
inline T random_away_from_zero(drgrade::Shape shape, std::mt19937_64& rng, double gap = 0.05) {
  T t = random_tensor(std::move(shape), rng);
  for (Index i = 0; i < t.size(); ++i) {
    if (std::abs(t[i]) < gap) t[i] = t[i] < 0 ? -gap - std::abs(t[i]) : gap + std::abs(t[i]);
  }
  return t;
}

inline double dot(const T& a, const T& b) { return a.flat().dot(b.flat()); }

/// max|a - n| / max(max|a|, max|n|) over the checked coordinates, where n
/// is the central difference of f with respect to x. Checks at most
/// `max_coords` coordinates (all when 0), chosen from the rng. The
/// denominator is at least kScaleFloor, so a gradient that vanishes
/// identically (a conv bias feeding batch norm) compares absolutely.
inline constexpr double kScaleFloor = 1e-6;

inline double relative_error(T& x, const T& analytic, const std::function<double()>& f,
                             std::mt19937_64& rng, std::size_t max_coords = 0) {
  std::vector<Index> coords(static_cast<std::size_t>(x.size()));
  for (Index i = 0; i < x.size(); ++i) coords[static_cast<std::size_t>(i)] = i;
  if (max_coords > 0 && coords.size() > max_coords) {
    std::shuffle(coords.begin(), coords.end(), rng);
    coords.resize(max_coords);
  }
  double diff = 0.0, scale = 0.0;
  for (Index i : coords) {
    const double saved = x[i];
    x[i] = saved + kStep;
    const double up = f();
    x[i] = saved - kStep;
    const double down = f();
    x[i] = saved;
    const double numeric = (up - down) / (2 * kStep);
    diff = std::max(diff, std::abs(numeric - analytic[i]));
    scale = std::max({scale, std::abs(numeric), std::abs(analytic[i])});
  }
  return diff / std::max(scale, kScaleFloor);
}

// ---------------------------------------------------------------------------
// Layers
// ---------------------------------------------------------------------------

inline Report conv2d(std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  auto pick = [&](Index lo, Index hi) { return std::uniform_int_distribution<Index>(lo, hi)(rng); };
  const Index n = pick(1, 2), in = pick(1, 3), out = pick(1, 3), h = pick(3, 6), w = pick(3, 6);
  const Index k = pick(0, 1) ? 3 : 1, stride = pick(1, 2), pad = pick(0, 1);
  T x = random_tensor({n, in, h, w}, rng);
  T wt = random_tensor({out, in, k, k}, rng);
  T b = random_tensor({out}, rng);
  const T y = drgrade::conv2d(x, wt, b, stride, pad);
  const T r = random_tensor(y.shape(), rng);
  auto f = [&] { return dot(drgrade::conv2d(x, wt, b, stride, pad), r); };
  const auto g = drgrade::conv2d_backward(x, wt, b, r, stride, pad);
  Report rep;
  rep.merge("input", relative_error(x, g.d_input, f, rng));
  rep.merge("weight", relative_error(wt, g.d_params.at("weight"), f, rng));
  rep.merge("bias", relative_error(b, g.d_params.at("bias"), f, rng));
  return rep;
}

inline Report batchnorm(std::uint64_t seed, drgrade::Mode mode) {
  std::mt19937_64 rng(seed);
  auto pick = [&](Index lo, Index hi) { return std::uniform_int_distribution<Index>(lo, hi)(rng); };
  const Index n = pick(2, 3), c = pick(1, 3), h = pick(1, 3), w = pick(1, 3);
  T x = random_tensor({n, c, h, w}, rng);
  T gamma = random_tensor({c}, rng);
  T beta = random_tensor({c}, rng);
  drgrade::BatchNormStats<double> running{drgrade::Vector<double>::Random(c),
                                          drgrade::Vector<double>::Random(c).array().abs() + 0.5};
  const T r = random_tensor(x.shape(), rng);
  auto f = [&] {
    return dot(drgrade::batchnorm2d_forward(x, gamma, beta, mode, running, 1e-5).output, r);
  };
  const auto g = drgrade::batchnorm2d_backward(x, gamma, beta, mode, running, r, 1e-5);
  Report rep;
  rep.merge("input", relative_error(x, g.d_input, f, rng));
  rep.merge("gamma", relative_error(gamma, g.d_params.at("gamma"), f, rng));
  rep.merge("beta", relative_error(beta, g.d_params.at("beta"), f, rng));
  return rep;
}

inline drgrade::Shape random_map_shape(std::mt19937_64& rng) {
  auto pick = [&](Index lo, Index hi) { return std::uniform_int_distribution<Index>(lo, hi)(rng); };
  return {pick(1, 3), pick(1, 4), pick(1, 4), pick(1, 4)};
}

inline Report relu(std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  T x = random_away_from_zero(random_map_shape(rng), rng);
  const T r = random_tensor(x.shape(), rng);
  auto f = [&] { return dot(drgrade::relu(x), r); };
  Report rep;
  rep.merge("input", relative_error(x, drgrade::relu_backward(x, r), f, rng));
  return rep;
}

inline Report sigmoid(std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  T x = random_tensor(random_map_shape(rng), rng, 2.0);
  const T r = random_tensor(x.shape(), rng);
  auto f = [&] { return dot(drgrade::sigmoid(x), r); };
  Report rep;
  rep.merge("input", relative_error(x, drgrade::sigmoid_backward(drgrade::sigmoid(x), r), f, rng));
  return rep;
}

inline Report mul_broadcast(std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  const drgrade::Shape s = random_map_shape(rng);
  // Channel gate, spatial gate, or full-shape gate.
  const int kind = std::uniform_int_distribution<int>(0, 2)(rng);
  drgrade::Shape gs = s;
  if (kind == 0) gs = {s[0], s[1], 1, 1};
  if (kind == 1) gs = {s[0], 1, s[2], s[3]};
  T x = random_tensor(s, rng);
  T gate = random_tensor(gs, rng);
  const T r = random_tensor(s, rng);
  auto f = [&] { return dot(drgrade::mul_broadcast(x, gate), r); };
  const auto g = drgrade::mul_broadcast_backward(x, gate, r);
  Report rep;
  rep.merge("input", relative_error(x, g.d_input, f, rng));
  rep.merge("gate", relative_error(gate, g.d_gate, f, rng));
  return rep;
}

inline Report pools(std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  T x = random_tensor(random_map_shape(rng), rng);
  const T r1 = random_tensor({x.dim(0), x.dim(1), 1, 1}, rng);
  const T r2 = random_tensor({x.dim(0), x.dim(1)}, rng);
  Report rep;
  rep.merge("adaptive_avg_pool_1x1",
            relative_error(x, drgrade::adaptive_avg_pool_1x1_backward(x, r1),
                           [&] { return dot(drgrade::adaptive_avg_pool_1x1(x), r1); }, rng));
  rep.merge("global_avg_pool",
            relative_error(x, drgrade::global_avg_pool_backward(x, r2),
                           [&] { return dot(drgrade::global_avg_pool(x), r2); }, rng));
  return rep;
}

inline Report linear(std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  auto pick = [&](Index lo, Index hi) { return std::uniform_int_distribution<Index>(lo, hi)(rng); };
  const Index n = pick(1, 4), d = pick(1, 6), m = pick(1, 6);
  T x = random_tensor({n, d}, rng);
  T w = random_tensor({d, m}, rng);
  T b = random_tensor({m}, rng);
  const T r = random_tensor({n, m}, rng);
  auto f = [&] { return dot(drgrade::linear(x, w, b), r); };
  const auto g = drgrade::linear_backward(x, w, b, r);
  Report rep;
  rep.merge("input", relative_error(x, g.d_input, f, rng));
  rep.merge("weight", relative_error(w, g.d_params.at("weight"), f, rng));
  rep.merge("bias", relative_error(b, g.d_params.at("bias"), f, rng));
  return rep;
}

// ---------------------------------------------------------------------------
// Models
// ---------------------------------------------------------------------------

/// CBAM on N x C x H x W: even seeds use C = 16, r = 16 (one bottleneck
/// channel), odd seeds a random ratio and multiple.
inline Report cbam(std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  auto pick = [&](Index lo, Index hi) { return std::uniform_int_distribution<Index>(lo, hi)(rng); };
  Index c = 16, ratio = 16;
  if (seed % 2 == 1) {
    ratio = pick(1, 4);
    c = ratio * pick(1, 3);
  }
  const Index n = pick(1, 2), h = pick(2, 5), w = pick(2, 5);
  auto p = drgrade::CbamParams<double>::random(c, ratio, rng);
  p.reduce_bias = random_tensor(p.reduce_bias.shape(), rng, 0.5);
  p.expand_bias = random_tensor(p.expand_bias.shape(), rng, 0.5);
  p.spatial_bias = random_tensor(p.spatial_bias.shape(), rng, 0.5);
  T x = random_tensor({n, c, h, w}, rng);
  const T r = random_tensor(x.shape(), rng);
  auto f = [&] { return dot(drgrade::cbam_forward(x, p), r); };
  const auto g = drgrade::cbam_backward(drgrade::cbam_forward_traced(x, p), p, r);
  Report rep;
  rep.merge("input", relative_error(x, g.d_input, f, rng));
  p.visit([&](const char* name, T& t) { rep.merge(name, relative_error(t, g.d_params.at(name), f, rng, 60)); });
  return rep;
}

inline double min_relu_margin(const drgrade::FcnForward<double>& fwd) {
  double m = std::numeric_limits<double>::infinity();
  for (const auto& t : fwd.blocks) {
    m = std::min(m, t.bn_out.flat().cwiseAbs().minCoeff());
    if (t.cbam) m = std::min(m, t.cbam->reduced.flat().cwiseAbs().minCoeff());
  }
  return m;
}

/// Tiny head: C = 16 -> 8 -> 4, 4x4 maps, CBAM after every block (r = 4),
/// train-mode batch norm.
inline Report fcn_head(std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  auto config = drgrade::FcnHeadConfig::halving(16, 4);
  auto p = drgrade::FcnHeadParams<double>::init(config, seed);
  for (auto& block : p.blocks) {
    block.bn_gamma = random_tensor(block.bn_gamma.shape(), rng, 1.0);
    block.bn_beta = random_tensor(block.bn_beta.shape(), rng, 0.5);
  }
  p.classifier_bias = random_tensor(p.classifier_bias.shape(), rng);
  const Index n = std::uniform_int_distribution<Index>(2, 3)(rng);
  // Redraw inputs whose ReLUs sit within 1e-3 of their kink; a difference
  // step across a kink measures the jump, not the derivative.
  T x;
  for (int attempt = 0; attempt < 50; ++attempt) {
    x = random_tensor({n, 16, 4, 4}, rng);
    if (min_relu_margin(drgrade::fcn_head_forward(x, p, drgrade::Mode::kTrain)) > 1e-3) break;
  }
  const drgrade::GradeLogits<double> r = drgrade::GradeLogits<double>::Random(n, drgrade::kNumGrades);
  auto f = [&] {
    return drgrade::fcn_head_forward(x, p, drgrade::Mode::kTrain).logits.cwiseProduct(r).sum();
  };
  const auto fwd = drgrade::fcn_head_forward(x, p, drgrade::Mode::kTrain);
  const auto g = drgrade::fcn_head_backward(fwd, p, r);
  Report rep;
  rep.merge("input", relative_error(x, g.d_input, f, rng, 40));
  p.visit_parameters([&](const std::string& name, T& t) {
    rep.merge(name, relative_error(t, g.d_params.at(name), f, rng, 24));
  });
  return rep;
}

inline Report ranking_head(std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  const Index n = std::uniform_int_distribution<Index>(1, 5)(rng);
  const Index d = std::uniform_int_distribution<Index>(2, 8)(rng);
  auto bank = drgrade::PromptBank<double>::random(d, 1.0, seed + 1);
  bank.temperature = std::uniform_real_distribution<double>(0.1, 1.0)(rng);
  bank.similarity = seed % 3 == 2 ? drgrade::Similarity::kInnerProduct : drgrade::Similarity::kCosine;
  T x = random_tensor({n, d}, rng);
  T prompts({drgrade::kNumGrades, d});
  prompts.matrix() = bank.embeddings;
  const drgrade::GradeLogits<double> r = drgrade::GradeLogits<double>::Random(n, drgrade::kNumGrades);
  auto f = [&] {
    bank.embeddings = prompts.matrix();
    return drgrade::ranking_head_forward(drgrade::RowMatrix<double>(x.matrix()), bank).cwiseProduct(r).sum();
  };
  const auto g = drgrade::ranking_head_backward(drgrade::RowMatrix<double>(x.matrix()), bank, r);
  T dp({drgrade::kNumGrades, d}), dx({n, d});
  dp.matrix() = g.d_prompts;
  dx.matrix() = g.d_embeddings;
  Report rep;
  rep.merge("prompts", relative_error(prompts, dp, f, rng));
  rep.merge("embeddings", relative_error(x, dx, f, rng));
  return rep;
}

// ---------------------------------------------------------------------------
// Losses
// ---------------------------------------------------------------------------

struct LossCase {
  T logits;
  std::vector<int> targets;
  drgrade::ClassWeights weights;
};

inline LossCase random_loss_case(std::mt19937_64& rng, double scale = 2.0) {
  LossCase c;
  const Index n = std::uniform_int_distribution<Index>(1, 6)(rng);
  c.logits = random_tensor({n, drgrade::kNumGrades}, rng, scale);
  std::uniform_int_distribution<int> grade(0, drgrade::kNumGrades - 1);
  for (Index i = 0; i < n; ++i) c.targets.push_back(grade(rng));
  std::uniform_real_distribution<double> w(0.2, 3.0);
  for (double& v : c.weights.w) v = w(rng);
  return c;
}

inline drgrade::GradeLogits<double> as_logits(const T& t) { return t.matrix(); }

inline T as_tensor(const drgrade::GradeLogits<double>& m) {
  T t({m.rows(), Index{drgrade::kNumGrades}});
  t.matrix() = m;
  return t;
}

/// Nudges scores so no hinge sits within `gap` of its kink.
inline void clear_hinge_kinks(LossCase& c, double margin, drgrade::RankingPairs mode, double gap = 1e-3) {
  for (Index i = 0; i < c.logits.dim(0); ++i) {
    for (int attempt = 0; attempt < 100; ++attempt) {
      bool near = false;
      for (auto [a, b] : drgrade::ranking_pairs(c.targets[static_cast<std::size_t>(i)], mode)) {
        near = near || std::abs(margin - (c.logits.at(i, a) - c.logits.at(i, b))) < gap;
      }
      if (!near) break;
      for (int g = 0; g < drgrade::kNumGrades; ++g) c.logits.at(i, g) += 0.01 * (g + 1) * (attempt + 1);
    }
  }
}

template <typename LossFn>
double loss_error(LossCase& c, LossFn&& loss, std::mt19937_64& rng) {
  const auto lv = loss(as_logits(c.logits));
  return relative_error(c.logits, as_tensor(lv.d_logits), [&] { return double(loss(as_logits(c.logits)).value); },
                        rng);
}

inline Report losses(std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  Report rep;
  {
    LossCase c = random_loss_case(rng);
    rep.merge("weighted_cross_entropy", loss_error(c, [&](const auto& l) {
      return drgrade::weighted_cross_entropy(l, std::span<const int>(c.targets), c.weights);
    }, rng));
  }
  {
    LossCase c = random_loss_case(rng);
    const double gamma = std::uniform_real_distribution<double>(0.0, 3.0)(rng);
    rep.merge("focal_loss", loss_error(c, [&](const auto& l) {
      return drgrade::focal_loss(l, std::span<const int>(c.targets), gamma, c.weights);
    }, rng));
  }
  {
    LossCase c = random_loss_case(rng);
    const auto mode = seed % 2 ? drgrade::RankingPairs::kMonotone : drgrade::RankingPairs::kUnimodal;
    const double margin = std::uniform_real_distribution<double>(0.0, 0.5)(rng);
    clear_hinge_kinks(c, margin, mode);
    rep.merge("ranking_loss", loss_error(c, [&](const auto& l) {
      return drgrade::ranking_loss(l, std::span<const int>(c.targets), margin, mode);
    }, rng));
  }
  {
    LossCase c = random_loss_case(rng);
    drgrade::CombinedLossConfig cfg;
    cfg.alpha = std::uniform_real_distribution<double>(0.0, 1.0)(rng);
    cfg.gamma = seed % 2 ? 2.0 : 0.0;
    cfg.weights = c.weights;
    cfg.score_scale = seed % 3 ? 0.2 : 1.0;
    cfg.alpha_on_cross_entropy = seed % 5 != 0;
    // Hinges see logits * score_scale.
    T scaled = c.logits;
    scaled.flat() *= cfg.score_scale;
    LossCase probe{scaled, c.targets, c.weights};
    clear_hinge_kinks(probe, cfg.margin, cfg.pairs);
    c.logits.flat() = probe.logits.flat() / cfg.score_scale;
    rep.merge("combined_loss", loss_error(c, [&](const auto& l) {
      return drgrade::combined_loss(l, std::span<const int>(c.targets), cfg);
    }, rng));
  }
  return rep;
}

struct Check {
  std::string name;
  std::function<Report(std::uint64_t)> run;
  double tolerance;
};

inline std::vector<Check> all_checks() {
  return {
      {"conv2d", conv2d, 1e-4},
      {"batchnorm2d(train)", [](std::uint64_t s) { return batchnorm(s, drgrade::Mode::kTrain); }, 1e-4},
      {"batchnorm2d(eval)", [](std::uint64_t s) { return batchnorm(s, drgrade::Mode::kEval); }, 1e-4},
      {"relu", relu, 1e-4},
      {"sigmoid", sigmoid, 1e-4},
      {"mul_broadcast", mul_broadcast, 1e-4},
      {"avg_pools", pools, 1e-4},
      {"linear", linear, 1e-4},
      {"cbam", cbam, 1e-4},
      {"ranking_head", ranking_head, 1e-4},
      {"losses", losses, 1e-4},
      {"fcn_head", fcn_head, 1e-3},
  };
}

}  // namespace gradcheck
