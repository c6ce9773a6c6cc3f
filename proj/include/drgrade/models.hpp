#pragma once

#include <algorithm>
#include <cstdint>
#include <optional>
#include <random>
#include <string>
#include <vector>

#include "drgrade/grades.hpp"
#include "drgrade/tensor.hpp"

namespace drgrade {

namespace detail {

template <typename Scalar>
Tensor<Scalar> random_normal(Shape shape, double stddev, std::mt19937_64& rng) {
  std::normal_distribution<double> dist(0.0, stddev);
  Tensor<Scalar> t(std::move(shape));
  for (Index i = 0; i < t.size(); ++i) t[i] = static_cast<Scalar>(dist(rng));
  return t;
}

}  // namespace detail

// ===========================================================================
// CBAM
// ===========================================================================

inline constexpr Index kSpatialKernel = 7;
inline constexpr Index kSpatialPadding = 3;

/// Channel gate (pooled 1x1 bottleneck) followed by a 7x7 spatial gate.
template <typename Scalar>
struct CbamParams {
  Tensor<Scalar> reduce_weight;   // (C/r) x C x 1 x 1
  Tensor<Scalar> reduce_bias;     // C/r
  Tensor<Scalar> expand_weight;   // C x (C/r) x 1 x 1
  Tensor<Scalar> expand_bias;     // C
  Tensor<Scalar> spatial_weight;  // 1 x C x 7 x 7
  Tensor<Scalar> spatial_bias;    // 1
  Index reduction_ratio = 16;

  Index channels() const { return expand_bias.dim(0); }

  static CbamParams zeros(Index channels, Index reduction_ratio = 16) {
    check_ratio(channels, reduction_ratio);
    const Index hidden = channels / reduction_ratio;
    return {Tensor<Scalar>({hidden, channels, 1, 1}),
            Tensor<Scalar>({hidden}),
            Tensor<Scalar>({channels, hidden, 1, 1}),
            Tensor<Scalar>({channels}),
            Tensor<Scalar>({1, channels, kSpatialKernel, kSpatialKernel}),
            Tensor<Scalar>({1}),
            reduction_ratio};
  }

  /// He-style normal init for the three convolutions, zero biases.
  static CbamParams random(Index channels, Index reduction_ratio, std::mt19937_64& rng) {
    CbamParams p = zeros(channels, reduction_ratio);
    const Index hidden = channels / reduction_ratio;
    p.reduce_weight = detail::random_normal<Scalar>(p.reduce_weight.shape(),
                                                    std::sqrt(2.0 / double(channels)), rng);
    p.expand_weight = detail::random_normal<Scalar>(p.expand_weight.shape(),
                                                    std::sqrt(1.0 / double(hidden)), rng);
    p.spatial_weight = detail::random_normal<Scalar>(
        p.spatial_weight.shape(), std::sqrt(1.0 / double(channels * 49)), rng);
    return p;
  }

  static void check_ratio(Index channels, Index reduction_ratio) {
    if (reduction_ratio < 1 || channels % reduction_ratio != 0) {
      throw ValidationError("cbam: reduction ratio " + std::to_string(reduction_ratio) +
                            " does not divide channel count " + std::to_string(channels));
    }
  }

  template <typename Fn>
  void visit(Fn&& fn) {
    fn("reduce_weight", reduce_weight);
    fn("reduce_bias", reduce_bias);
    fn("expand_weight", expand_weight);
    fn("expand_bias", expand_bias);
    fn("spatial_weight", spatial_weight);
    fn("spatial_bias", spatial_bias);
  }
};

/// Every intermediate of one CBAM application, kept for the backward pass.
template <typename Scalar>
struct CbamTape {
  Tensor<Scalar> input;
  Tensor<Scalar> pooled;        // N x C x 1 x 1
  Tensor<Scalar> reduced;       // pre-ReLU bottleneck
  Tensor<Scalar> hidden;        // post-ReLU bottleneck
  Tensor<Scalar> channel_gate;  // N x C x 1 x 1, in (0,1)
  Tensor<Scalar> channel_gated;
  Tensor<Scalar> spatial_gate;  // N x 1 x H x W, in (0,1)
  Tensor<Scalar> output;
};

template <typename Scalar>
CbamTape<Scalar> cbam_forward_traced(const Tensor<Scalar>& x, const CbamParams<Scalar>& p) {
  detail::require_rank(x, 4, "cbam input");
  detail::require_dim(x.dim(1), p.channels(), "cbam", "input channel count");
  CbamTape<Scalar> t;
  t.input = x;
  t.pooled = adaptive_avg_pool_1x1(x);
  t.reduced = conv2d(t.pooled, p.reduce_weight, p.reduce_bias);
  t.hidden = relu(t.reduced);
  t.channel_gate = sigmoid(conv2d(t.hidden, p.expand_weight, p.expand_bias));
  t.channel_gated = mul_broadcast(x, t.channel_gate);
  t.spatial_gate = sigmoid(
      conv2d(t.channel_gated, p.spatial_weight, p.spatial_bias, 1, kSpatialPadding));
  t.output = mul_broadcast(t.channel_gated, t.spatial_gate);
  return t;
}

template <typename Scalar>
Tensor<Scalar> cbam_forward(const Tensor<Scalar>& x, const CbamParams<Scalar>& p) {
  return std::move(cbam_forward_traced(x, p).output);
}

/// The spatial attention map sigma(conv7x7(channel-gated x)), N x 1 x H x W.
template <typename Scalar>
Tensor<Scalar> export_spatial_gate(const Tensor<Scalar>& x, const CbamParams<Scalar>& p) {
  return std::move(cbam_forward_traced(x, p).spatial_gate);
}

/// d_params keys match CbamParams::visit names.
template <typename Scalar>
LayerGrads<Scalar> cbam_backward(const CbamTape<Scalar>& t, const CbamParams<Scalar>& p,
                                 const Tensor<Scalar>& d_out) {
  LayerGrads<Scalar> grads;
  auto spatial = mul_broadcast_backward(t.channel_gated, t.spatial_gate, d_out);
  auto spatial_conv =
      conv2d_backward(t.channel_gated, p.spatial_weight, p.spatial_bias,
                      sigmoid_backward(t.spatial_gate, spatial.d_gate), 1, kSpatialPadding);
  Tensor<Scalar> d_gated = std::move(spatial.d_input);
  d_gated.flat() += spatial_conv.d_input.flat();

  auto channel = mul_broadcast_backward(t.input, t.channel_gate, d_gated);
  auto expand = conv2d_backward(t.hidden, p.expand_weight, p.expand_bias,
                                sigmoid_backward(t.channel_gate, channel.d_gate));
  auto reduce = conv2d_backward(t.pooled, p.reduce_weight, p.reduce_bias,
                                relu_backward(t.reduced, expand.d_input));
  grads.d_input = std::move(channel.d_input);
  grads.d_input.flat() += adaptive_avg_pool_1x1_backward(t.input, reduce.d_input).flat();

  grads.d_params.emplace("reduce_weight", std::move(reduce.d_params.at("weight")));
  grads.d_params.emplace("reduce_bias", std::move(reduce.d_params.at("bias")));
  grads.d_params.emplace("expand_weight", std::move(expand.d_params.at("weight")));
  grads.d_params.emplace("expand_bias", std::move(expand.d_params.at("bias")));
  grads.d_params.emplace("spatial_weight", std::move(spatial_conv.d_params.at("weight")));
  grads.d_params.emplace("spatial_bias", std::move(spatial_conv.d_params.at("bias")));
  return grads;
}

// ===========================================================================
// FCN decoder head
// ===========================================================================

struct FcnHeadConfig {
  Index in_channels = 64;
  std::vector<Index> widths = {64, 32, 16};
  Index kernel = 3;
  Index reduction_ratio = 16;
  // Block indices followed by a CBAM module.
  std::vector<int> cbam_after = {0, 1, 2};
  BatchNormConfig batchnorm;

  /// Widths C, C/2, C/4 for an encoder map with C channels.
  static FcnHeadConfig halving(Index in_channels, Index reduction_ratio = 16) {
    FcnHeadConfig c;
    c.in_channels = in_channels;
    c.widths = {in_channels, std::max<Index>(1, in_channels / 2),
                std::max<Index>(1, in_channels / 4)};
    c.reduction_ratio = reduction_ratio;
    return c;
  }

  bool has_cbam(int block) const {
    return std::find(cbam_after.begin(), cbam_after.end(), block) != cbam_after.end();
  }

  void validate() const {
    if (in_channels < 1) throw ValidationError("fcn head: in_channels must be >= 1");
    if (widths.size() != 3) throw ValidationError("fcn head: exactly three conv blocks required");
    for (std::size_t i = 0; i < widths.size(); ++i) {
      if (widths[i] < 1) throw ValidationError("fcn head: block widths must be >= 1");
      if (i > 0 && widths[i] > widths[i - 1]) {
        throw ValidationError("fcn head: block widths must be non-increasing");
      }
    }
    if (kernel < 1 || kernel % 2 == 0) throw ValidationError("fcn head: kernel must be odd");
    for (int b : cbam_after) {
      if (b < 0 || b >= static_cast<int>(widths.size())) {
        throw ValidationError("fcn head: CBAM insertion point " + std::to_string(b) +
                              " out of range");
      }
      CbamParams<double>::check_ratio(widths[static_cast<std::size_t>(b)], reduction_ratio);
    }
  }
};

template <typename Scalar>
struct ConvBlockParams {
  Tensor<Scalar> conv_weight;
  Tensor<Scalar> conv_bias;
  Tensor<Scalar> bn_gamma;
  Tensor<Scalar> bn_beta;
  BatchNormStats<Scalar> running;
  std::optional<CbamParams<Scalar>> cbam;
};

template <typename Scalar>
struct FcnHeadParams {
  FcnHeadConfig config;
  std::vector<ConvBlockParams<Scalar>> blocks;
  Tensor<Scalar> classifier_weight;  // widths.back() x 5
  Tensor<Scalar> classifier_bias;    // 5

  static FcnHeadParams init(const FcnHeadConfig& config, std::uint64_t seed) {
    config.validate();
    std::mt19937_64 rng(seed);
    FcnHeadParams p;
    p.config = config;
    Index in = config.in_channels;
    for (std::size_t b = 0; b < config.widths.size(); ++b) {
      const Index out = config.widths[b];
      const double fan_in = double(in * config.kernel * config.kernel);
      ConvBlockParams<Scalar> block;
      block.conv_weight = detail::random_normal<Scalar>({out, in, config.kernel, config.kernel},
                                                        std::sqrt(2.0 / fan_in), rng);
      block.conv_bias = Tensor<Scalar>({out});
      block.bn_gamma = Tensor<Scalar>({out}, Scalar(1));
      block.bn_beta = Tensor<Scalar>({out});
      block.running = BatchNormStats<Scalar>::fresh(out);
      if (config.has_cbam(static_cast<int>(b))) {
        block.cbam = CbamParams<Scalar>::random(out, config.reduction_ratio, rng);
      }
      p.blocks.push_back(std::move(block));
      in = out;
    }
    p.classifier_weight =
        detail::random_normal<Scalar>({in, kNumGrades}, std::sqrt(1.0 / double(in)), rng);
    p.classifier_bias = Tensor<Scalar>({kNumGrades});
    return p;
  }

  /// Visits every trainable tensor with a stable dotted name.
  template <typename Fn>
  void visit_parameters(Fn&& fn) {
    for (std::size_t b = 0; b < blocks.size(); ++b) {
      const std::string prefix = "block" + std::to_string(b) + ".";
      auto& block = blocks[b];
      fn(prefix + "conv.weight", block.conv_weight);
      fn(prefix + "conv.bias", block.conv_bias);
      fn(prefix + "bn.gamma", block.bn_gamma);
      fn(prefix + "bn.beta", block.bn_beta);
      if (block.cbam) {
        block.cbam->visit([&](const char* name, Tensor<Scalar>& t) {
          fn(prefix + "cbam." + name, t);
        });
      }
    }
    fn("classifier.weight", classifier_weight);
    fn("classifier.bias", classifier_bias);
  }
};

template <typename Scalar>
struct ConvBlockTape {
  Tensor<Scalar> input;
  Tensor<Scalar> conv_out;
  Tensor<Scalar> bn_out;
  Tensor<Scalar> relu_out;
  Vector<Scalar> batch_mean;
  Vector<Scalar> batch_var;
  std::optional<CbamTape<Scalar>> cbam;
};

template <typename Scalar>
struct FcnForward {
  GradeLogits<Scalar> logits;
  std::vector<ConvBlockTape<Scalar>> blocks;
  Tensor<Scalar> features;  // last block output, N x C x H x W
  Tensor<Scalar> pooled;    // N x C
  Mode mode = Mode::kEval;
};

template <typename Scalar>
FcnForward<Scalar> fcn_head_forward(const Tensor<Scalar>& featmap,
                                    const FcnHeadParams<Scalar>& p, Mode mode) {
  detail::require_rank(featmap, 4, "fcn head input");
  detail::require_dim(featmap.dim(1), p.config.in_channels, "fcn head", "input channel count");
  FcnForward<Scalar> fwd;
  fwd.mode = mode;
  const Index pad = p.config.kernel / 2;
  Tensor<Scalar> x = featmap;
  for (const auto& block : p.blocks) {
    ConvBlockTape<Scalar> t;
    t.input = x;
    t.conv_out = conv2d(x, block.conv_weight, block.conv_bias, 1, pad);
    auto bn = batchnorm2d_forward(t.conv_out, block.bn_gamma, block.bn_beta, mode, block.running,
                                  p.config.batchnorm.eps);
    t.bn_out = std::move(bn.output);
    t.batch_mean = std::move(bn.batch_mean);
    t.batch_var = std::move(bn.batch_var);
    t.relu_out = relu(t.bn_out);
    if (block.cbam) {
      t.cbam = cbam_forward_traced(t.relu_out, *block.cbam);
      x = t.cbam->output;
    } else {
      x = t.relu_out;
    }
    fwd.blocks.push_back(std::move(t));
  }
  fwd.features = x;
  fwd.pooled = global_avg_pool(x);
  const Tensor<Scalar> logits = linear(fwd.pooled, p.classifier_weight, p.classifier_bias);
  fwd.logits = logits.matrix();
  return fwd;
}

/// d_params keys match FcnHeadParams::visit_parameters names.
template <typename Scalar>
LayerGrads<Scalar> fcn_head_backward(const FcnForward<Scalar>& fwd,
                                     const FcnHeadParams<Scalar>& p,
                                     const GradeLogits<Scalar>& d_logits) {
  if (d_logits.rows() != fwd.logits.rows()) {
    throw ShapeError("fcn_head_backward: d_logits has " + std::to_string(d_logits.rows()) +
                     " rows, forward had " + std::to_string(fwd.logits.rows()));
  }
  LayerGrads<Scalar> grads;
  Tensor<Scalar> d_logits_t({d_logits.rows(), Index{kNumGrades}});
  d_logits_t.matrix() = d_logits;
  auto cls = linear_backward(fwd.pooled, p.classifier_weight, p.classifier_bias, d_logits_t);
  grads.d_params.emplace("classifier.weight", std::move(cls.d_params.at("weight")));
  grads.d_params.emplace("classifier.bias", std::move(cls.d_params.at("bias")));

  Tensor<Scalar> d_x = global_avg_pool_backward(fwd.features, cls.d_input);
  const Index pad = p.config.kernel / 2;
  for (std::size_t b = p.blocks.size(); b-- > 0;) {
    const auto& block = p.blocks[b];
    const auto& t = fwd.blocks[b];
    const std::string prefix = "block" + std::to_string(b) + ".";
    if (block.cbam) {
      auto cg = cbam_backward(*t.cbam, *block.cbam, d_x);
      for (auto& [name, g] : cg.d_params) grads.d_params.emplace(prefix + "cbam." + name, std::move(g));
      d_x = std::move(cg.d_input);
    }
    auto bn = batchnorm2d_backward(t.conv_out, block.bn_gamma, block.bn_beta, fwd.mode,
                                   block.running, relu_backward(t.bn_out, d_x),
                                   p.config.batchnorm.eps);
    grads.d_params.emplace(prefix + "bn.gamma", std::move(bn.d_params.at("gamma")));
    grads.d_params.emplace(prefix + "bn.beta", std::move(bn.d_params.at("beta")));
    auto conv = conv2d_backward(t.input, block.conv_weight, block.conv_bias, bn.d_input, 1, pad);
    grads.d_params.emplace(prefix + "conv.weight", std::move(conv.d_params.at("weight")));
    grads.d_params.emplace(prefix + "conv.bias", std::move(conv.d_params.at("bias")));
    d_x = std::move(conv.d_input);
  }
  grads.d_input = std::move(d_x);
  return grads;
}

/// Folds the batch statistics recorded by a train-mode forward into the
/// running averages.
template <typename Scalar>
void commit_running_stats(FcnHeadParams<Scalar>& p, const FcnForward<Scalar>& fwd) {
  if (fwd.mode != Mode::kTrain) return;
  for (std::size_t b = 0; b < p.blocks.size(); ++b) {
    update_running_stats(p.blocks[b].running, fwd.blocks[b].batch_mean, fwd.blocks[b].batch_var,
                         p.config.batchnorm.momentum);
  }
}

// ===========================================================================
// Prompt-similarity heads
// ===========================================================================

enum class Similarity { kCosine, kInnerProduct };

template <typename Scalar>
using PromptMatrix = Eigen::Matrix<Scalar, kNumGrades, Eigen::Dynamic, Eigen::RowMajor>;

/// One embedding per grade (row g = grade g) plus the logit temperature.
template <typename Scalar>
struct PromptBank {
  PromptMatrix<Scalar> embeddings;
  bool learnable = false;
  double temperature = 0.2;
  Similarity similarity = Similarity::kCosine;

  Index dim() const { return embeddings.cols(); }

  void validate() const {
    if (!(temperature > 0)) throw ValidationError("prompt bank: temperature must be > 0");
    if (embeddings.cols() < 1) throw ValidationError("prompt bank: embedding dim must be >= 1");
    for (int g = 0; g < kNumGrades; ++g) {
      if (!(embeddings.row(g).norm() > 0)) {
        throw ValidationError("prompt bank: row " + std::to_string(g) + " has zero norm");
      }
    }
  }

  static PromptBank random(Index dim, double stddev, std::uint64_t seed) {
    std::mt19937_64 rng(seed);
    std::normal_distribution<double> dist(0.0, stddev);
    PromptBank bank;
    bank.embeddings.resize(kNumGrades, dim);
    for (int g = 0; g < kNumGrades; ++g)
      for (Index d = 0; d < dim; ++d) bank.embeddings(g, d) = static_cast<Scalar>(dist(rng));
    bank.learnable = true;
    return bank;
  }
};

template <typename Scalar>
struct ZeroShotResult {
  int grade = 0;
  GradeRow<Scalar> similarities;
};

namespace detail {

template <typename Derived>
void require_nonzero(const Eigen::MatrixBase<Derived>& v, const char* what) {
  if (!(v.norm() > 0)) throw ValidationError(std::string(what) + ": zero-norm vector");
}

}  // namespace detail

/// Cosine similarity against each grade prompt; the best match wins, ties
/// toward the more severe grade.
template <typename Scalar>
ZeroShotResult<Scalar> zero_shot_classify(const Vector<Scalar>& image_emb,
                                          const PromptBank<Scalar>& prompts) {
  detail::require_dim(image_emb.size(), prompts.dim(), "zero_shot_classify", "embedding dim");
  detail::require_nonzero(image_emb, "zero_shot_classify image embedding");
  ZeroShotResult<Scalar> r;
  const Vector<Scalar> x = image_emb.normalized();
  for (int g = 0; g < kNumGrades; ++g) {
    detail::require_nonzero(prompts.embeddings.row(g), "zero_shot_classify prompt");
    const Scalar s = prompts.embeddings.row(g).normalized().dot(x);
    r.similarities(g) = std::clamp(s, Scalar(-1), Scalar(1));
  }
  r.grade = argmax_grade(r.similarities);
  return r;
}

/// Raw similarity matrix (N x 5) before temperature scaling.
template <typename Scalar>
GradeLogits<Scalar> similarity_scores(const RowMatrix<Scalar>& image_embs,
                                      const PromptBank<Scalar>& prompts) {
  detail::require_dim(image_embs.cols(), prompts.dim(), "ranking head", "embedding dim");
  if (prompts.similarity == Similarity::kInnerProduct) {
    return image_embs * prompts.embeddings.transpose();
  }
  const Vector<Scalar> x_norm = image_embs.rowwise().norm();
  const GradeRow<Scalar> p_norm = prompts.embeddings.rowwise().norm().transpose();
  if (!(x_norm.minCoeff() > 0)) throw ValidationError("ranking head: zero-norm image embedding");
  if (!(p_norm.minCoeff() > 0)) throw ValidationError("ranking head: zero-norm prompt");
  GradeLogits<Scalar> s = image_embs * prompts.embeddings.transpose();
  s.array().colwise() /= x_norm.array();
  s.array().rowwise() /= p_norm.array();
  return s;
}

/// similarity / temperature for every (image, grade) pair.
template <typename Scalar>
GradeLogits<Scalar> ranking_head_forward(const RowMatrix<Scalar>& image_embs,
                                         const PromptBank<Scalar>& prompts) {
  if (!(prompts.temperature > 0)) throw ValidationError("ranking head: temperature must be > 0");
  return similarity_scores(image_embs, prompts) / static_cast<Scalar>(prompts.temperature);
}

template <typename Scalar>
GradeRow<Scalar> ranking_head_forward(const Vector<Scalar>& image_emb,
                                      const PromptBank<Scalar>& prompts) {
  RowMatrix<Scalar> one = image_emb.transpose();
  return ranking_head_forward(one, prompts).row(0);
}

template <typename Scalar>
struct RankingHeadGrads {
  PromptMatrix<Scalar> d_prompts;
  RowMatrix<Scalar> d_embeddings;
};

/// Backward of ranking_head_forward given dL/dlogits.
template <typename Scalar>
RankingHeadGrads<Scalar> ranking_head_backward(const RowMatrix<Scalar>& image_embs,
                                               const PromptBank<Scalar>& prompts,
                                               const GradeLogits<Scalar>& d_logits) {
  detail::require_dim(d_logits.rows(), image_embs.rows(), "ranking_head_backward", "batch size");
  const GradeLogits<Scalar> d_sim = d_logits / static_cast<Scalar>(prompts.temperature);
  RankingHeadGrads<Scalar> grads;
  if (prompts.similarity == Similarity::kInnerProduct) {
    grads.d_prompts = d_sim.transpose() * image_embs;
    grads.d_embeddings = d_sim * prompts.embeddings;
    return grads;
  }
  // s_ig = x̂_i · p̂_g;  ds/dp_g = (x̂_i - s_ig p̂_g) / |p_g|,  ds/dx_i = (p̂_g - s_ig x̂_i) / |x_i|.
  const Vector<Scalar> x_norm = image_embs.rowwise().norm();
  const Vector<Scalar> p_norm = prompts.embeddings.rowwise().norm();
  const RowMatrix<Scalar> x_hat = x_norm.asDiagonal().inverse() * image_embs;
  const RowMatrix<Scalar> p_hat = p_norm.asDiagonal().inverse() * prompts.embeddings;
  const GradeLogits<Scalar> s = x_hat * p_hat.transpose();
  const GradeLogits<Scalar> w = d_sim.cwiseProduct(s);

  grads.d_prompts = d_sim.transpose() * x_hat;
  grads.d_prompts -= w.colwise().sum().transpose().asDiagonal() * p_hat;
  grads.d_prompts = p_norm.asDiagonal().inverse() * grads.d_prompts;

  grads.d_embeddings = d_sim * p_hat;
  grads.d_embeddings -= w.rowwise().sum().asDiagonal() * x_hat;
  grads.d_embeddings = x_norm.asDiagonal().inverse() * grads.d_embeddings;
  return grads;
}

}  // namespace drgrade
