#pragma once

#include <Eigen/Dense>

#include <array>
#include <cmath>
#include <cstddef>
#include <functional>
#include <limits>
#include <map>
#include <numeric>
#include <sstream>
#include <string>
#include <tuple>
#include <utility>
#include <vector>

#include "drgrade/errors.hpp"

namespace drgrade {

using Index = Eigen::Index;
using Shape = std::vector<Index>;

template <typename Scalar>
using RowMatrix = Eigen::Matrix<Scalar, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;

template <typename Scalar>
using Vector = Eigen::Matrix<Scalar, Eigen::Dynamic, 1>;

inline std::string shape_string(const Shape& shape) {
  std::ostringstream os;
  os << '[';
  for (std::size_t i = 0; i < shape.size(); ++i) {
    if (i) os << 'x';
    os << shape[i];
  }
  os << ']';
  return os.str();
}

inline Index shape_size(const Shape& shape) {
  return std::accumulate(shape.begin(), shape.end(), Index{1}, std::multiplies<>());
}

/// Dense row-major n-d array. Feature maps use NCHW.
///
/// A default-constructed tensor has rank 0 and holds nothing; it marks an
/// absent value (e.g. a gradient that was not requested). Every constructed
/// tensor has all dimensions >= 1.
template <typename Scalar_>
class Tensor {
 public:
  using Scalar = Scalar_;
  using Flat = Vector<Scalar>;

  Tensor() = default;

  explicit Tensor(Shape shape, Scalar fill = Scalar(0)) : shape_(std::move(shape)) {
    check_dims();
    flat_ = Flat::Constant(shape_size(shape_), fill);
  }

  Tensor(Shape shape, Flat values) : shape_(std::move(shape)), flat_(std::move(values)) {
    check_dims();
    if (flat_.size() != shape_size(shape_)) {
      throw ShapeError("tensor: shape " + shape_string(shape_) + " needs " +
                       std::to_string(shape_size(shape_)) + " values, got " +
                       std::to_string(flat_.size()));
    }
  }

  static Tensor zeros_like(const Tensor& other) { return Tensor(other.shape_); }

  const Shape& shape() const { return shape_; }
  Index rank() const { return static_cast<Index>(shape_.size()); }
  Index dim(Index i) const { return shape_[static_cast<std::size_t>(i)]; }
  Index size() const { return flat_.size(); }
  bool empty() const { return shape_.empty(); }

  Flat& flat() { return flat_; }
  const Flat& flat() const { return flat_; }
  Scalar* data() { return flat_.data(); }
  const Scalar* data() const { return flat_.data(); }

  Scalar& operator[](Index i) { return flat_[i]; }
  Scalar operator[](Index i) const { return flat_[i]; }

  Scalar& at(Index n, Index c, Index h, Index w) {
    return flat_[((n * shape_[1] + c) * shape_[2] + h) * shape_[3] + w];
  }
  Scalar at(Index n, Index c, Index h, Index w) const {
    return flat_[((n * shape_[1] + c) * shape_[2] + h) * shape_[3] + w];
  }
  Scalar& at(Index r, Index c) { return flat_[r * shape_[1] + c]; }
  Scalar at(Index r, Index c) const { return flat_[r * shape_[1] + c]; }

  /// Rank-2 view as a row-major matrix.
  Eigen::Map<RowMatrix<Scalar>> matrix() { return {flat_.data(), shape_[0], shape_[1]}; }
  Eigen::Map<const RowMatrix<Scalar>> matrix() const {
    return {flat_.data(), shape_[0], shape_[1]};
  }

  template <typename Other>
  Tensor<Other> cast() const {
    if (empty()) return {};
    return Tensor<Other>(shape_, flat_.template cast<Other>());
  }

  Tensor reshaped(Shape shape) const { return Tensor(std::move(shape), flat_); }

  bool same_shape(const Tensor& other) const { return shape_ == other.shape_; }

 private:
  void check_dims() const {
    for (std::size_t i = 0; i < shape_.size(); ++i) {
      if (shape_[i] < 1) {
        throw ShapeError("tensor: dimension " + std::to_string(i) + " of " +
                         shape_string(shape_) + " must be >= 1");
      }
    }
  }

  Shape shape_;
  Flat flat_;
};

/// Gradients of one layer application: w.r.t. its input and each parameter.
template <typename Scalar>
struct LayerGrads {
  Tensor<Scalar> d_input;
  std::map<std::string, Tensor<Scalar>> d_params;
};

enum class Mode { kTrain, kEval };

namespace detail {

template <typename Scalar>
void require_rank(const Tensor<Scalar>& t, Index rank, const char* what) {
  if (t.rank() != rank) {
    throw ShapeError(std::string(what) + ": expected rank " + std::to_string(rank) + ", got " +
                     shape_string(t.shape()));
  }
}

inline void require_dim(Index got, Index want, const char* what, const char* dim_name) {
  if (got != want) {
    throw ShapeError(std::string(what) + ": " + dim_name + " is " + std::to_string(got) +
                     ", expected " + std::to_string(want));
  }
}

}  // namespace detail

// ---------------------------------------------------------------------------
// conv2d
// ---------------------------------------------------------------------------

struct ConvGeometry {
  Index batch, in_channels, height, width;
  Index out_channels, kernel, stride, padding;
  Index out_height, out_width;

  Index patch_rows() const { return in_channels * kernel * kernel; }
  Index patch_cols() const { return out_height * out_width; }
};

template <typename Scalar>
ConvGeometry conv_geometry(const Tensor<Scalar>& input, const Tensor<Scalar>& weight,
                           const Tensor<Scalar>& bias, Index stride, Index padding) {
  detail::require_rank(input, 4, "conv2d input");
  detail::require_rank(weight, 4, "conv2d weight");
  detail::require_rank(bias, 1, "conv2d bias");
  if (stride < 1) throw ShapeError("conv2d: stride must be >= 1");
  if (padding < 0) throw ShapeError("conv2d: padding must be >= 0");
  ConvGeometry g{};
  g.batch = input.dim(0);
  g.in_channels = input.dim(1);
  g.height = input.dim(2);
  g.width = input.dim(3);
  g.out_channels = weight.dim(0);
  g.kernel = weight.dim(2);
  g.stride = stride;
  g.padding = padding;
  detail::require_dim(weight.dim(1), g.in_channels, "conv2d", "weight input-channel dim");
  detail::require_dim(weight.dim(3), g.kernel, "conv2d", "weight kernel width");
  detail::require_dim(bias.dim(0), g.out_channels, "conv2d", "bias length");
  if (g.kernel > g.height + 2 * padding || g.kernel > g.width + 2 * padding) {
    throw ShapeError("conv2d: kernel " + std::to_string(g.kernel) + " exceeds padded input " +
                     shape_string(input.shape()));
  }
  g.out_height = (g.height + 2 * padding - g.kernel) / stride + 1;
  g.out_width = (g.width + 2 * padding - g.kernel) / stride + 1;
  return g;
}

namespace detail {

// Unfolds sample n into a (I*K*K) x (H'*W') patch matrix.
template <typename Scalar>
void im2col(const Tensor<Scalar>& input, Index n, const ConvGeometry& g,
            RowMatrix<Scalar>& cols) {
  cols.setZero(g.patch_rows(), g.patch_cols());
  for (Index c = 0; c < g.in_channels; ++c) {
    for (Index kh = 0; kh < g.kernel; ++kh) {
      for (Index kw = 0; kw < g.kernel; ++kw) {
        const Index row = (c * g.kernel + kh) * g.kernel + kw;
        for (Index oh = 0; oh < g.out_height; ++oh) {
          const Index ih = oh * g.stride + kh - g.padding;
          if (ih < 0 || ih >= g.height) continue;
          for (Index ow = 0; ow < g.out_width; ++ow) {
            const Index iw = ow * g.stride + kw - g.padding;
            if (iw < 0 || iw >= g.width) continue;
            cols(row, oh * g.out_width + ow) = input.at(n, c, ih, iw);
          }
        }
      }
    }
  }
}

template <typename Scalar>
void col2im_add(const RowMatrix<Scalar>& cols, Index n, const ConvGeometry& g,
                Tensor<Scalar>& d_input) {
  for (Index c = 0; c < g.in_channels; ++c) {
    for (Index kh = 0; kh < g.kernel; ++kh) {
      for (Index kw = 0; kw < g.kernel; ++kw) {
        const Index row = (c * g.kernel + kh) * g.kernel + kw;
        for (Index oh = 0; oh < g.out_height; ++oh) {
          const Index ih = oh * g.stride + kh - g.padding;
          if (ih < 0 || ih >= g.height) continue;
          for (Index ow = 0; ow < g.out_width; ++ow) {
            const Index iw = ow * g.stride + kw - g.padding;
            if (iw < 0 || iw >= g.width) continue;
            d_input.at(n, c, ih, iw) += cols(row, oh * g.out_width + ow);
          }
        }
      }
    }
  }
}

}  // namespace detail

/// 2-D cross-correlation, NCHW input, OIKK weight, square kernel.
template <typename Scalar>
Tensor<Scalar> conv2d(const Tensor<Scalar>& input, const Tensor<Scalar>& weight,
                      const Tensor<Scalar>& bias, Index stride = 1, Index padding = 0) {
  const ConvGeometry g = conv_geometry(input, weight, bias, stride, padding);
  Tensor<Scalar> out({g.batch, g.out_channels, g.out_height, g.out_width});
  Eigen::Map<const RowMatrix<Scalar>> w(weight.data(), g.out_channels, g.patch_rows());
  RowMatrix<Scalar> cols;
  const Index plane = g.out_channels * g.patch_cols();
  for (Index n = 0; n < g.batch; ++n) {
    detail::im2col(input, n, g, cols);
    Eigen::Map<RowMatrix<Scalar>> o(out.data() + n * plane, g.out_channels, g.patch_cols());
    o.noalias() = w * cols;
    o.colwise() += bias.flat();
  }
  return out;
}

/// Returns d_input and d_params {"weight", "bias"}.
template <typename Scalar>
LayerGrads<Scalar> conv2d_backward(const Tensor<Scalar>& input, const Tensor<Scalar>& weight,
                                   const Tensor<Scalar>& bias, const Tensor<Scalar>& d_out,
                                   Index stride = 1, Index padding = 0) {
  const ConvGeometry g = conv_geometry(input, weight, bias, stride, padding);
  if (d_out.shape() != Shape{g.batch, g.out_channels, g.out_height, g.out_width}) {
    throw ShapeError("conv2d_backward: d_out shape " + shape_string(d_out.shape()) +
                     " does not match forward output");
  }
  LayerGrads<Scalar> grads;
  grads.d_input = Tensor<Scalar>::zeros_like(input);
  Tensor<Scalar> d_weight = Tensor<Scalar>::zeros_like(weight);
  Tensor<Scalar> d_bias = Tensor<Scalar>::zeros_like(bias);
  Eigen::Map<const RowMatrix<Scalar>> w(weight.data(), g.out_channels, g.patch_rows());
  Eigen::Map<RowMatrix<Scalar>> dw(d_weight.data(), g.out_channels, g.patch_rows());
  RowMatrix<Scalar> cols;
  RowMatrix<Scalar> d_cols;
  const Index plane = g.out_channels * g.patch_cols();
  for (Index n = 0; n < g.batch; ++n) {
    Eigen::Map<const RowMatrix<Scalar>> dy(d_out.data() + n * plane, g.out_channels,
                                           g.patch_cols());
    detail::im2col(input, n, g, cols);
    dw.noalias() += dy * cols.transpose();
    d_bias.flat() += dy.rowwise().sum();
    d_cols.noalias() = w.transpose() * dy;
    detail::col2im_add(d_cols, n, g, grads.d_input);
  }
  grads.d_params.emplace("weight", std::move(d_weight));
  grads.d_params.emplace("bias", std::move(d_bias));
  return grads;
}

// ---------------------------------------------------------------------------
// batchnorm2d
// ---------------------------------------------------------------------------

struct BatchNormConfig {
  double eps = 1e-5;
  double momentum = 0.1;
};

template <typename Scalar>
struct BatchNormStats {
  Vector<Scalar> mean;
  Vector<Scalar> var;

  static BatchNormStats fresh(Index channels) {
    return {Vector<Scalar>::Zero(channels), Vector<Scalar>::Ones(channels)};
  }
};

template <typename Scalar>
struct BatchNormOutput {
  Tensor<Scalar> output;
  // Batch statistics (train mode only); var is the unbiased estimate fed to
  // the running average.
  Vector<Scalar> batch_mean;
  Vector<Scalar> batch_var;
};

namespace detail {

template <typename Scalar>
void check_batchnorm(const Tensor<Scalar>& x, const Tensor<Scalar>& gamma,
                     const Tensor<Scalar>& beta, double eps) {
  require_rank(x, 4, "batchnorm2d input");
  require_rank(gamma, 1, "batchnorm2d gamma");
  require_rank(beta, 1, "batchnorm2d beta");
  require_dim(gamma.dim(0), x.dim(1), "batchnorm2d", "gamma length");
  require_dim(beta.dim(0), x.dim(1), "batchnorm2d", "beta length");
  if (!(eps > 0)) throw ValidationError("batchnorm2d: eps must be > 0");
}

// Per-channel mean and biased variance over N, H, W.
template <typename Scalar>
std::pair<Vector<Scalar>, Vector<Scalar>> channel_moments(const Tensor<Scalar>& x) {
  const Index n = x.dim(0), c = x.dim(1), hw = x.dim(2) * x.dim(3);
  Vector<Scalar> mean = Vector<Scalar>::Zero(c);
  Vector<Scalar> var = Vector<Scalar>::Zero(c);
  for (Index b = 0; b < n; ++b) {
    for (Index ch = 0; ch < c; ++ch) {
      mean[ch] += x.flat().segment((b * c + ch) * hw, hw).sum();
    }
  }
  const Scalar count = static_cast<Scalar>(n * hw);
  mean /= count;
  for (Index b = 0; b < n; ++b) {
    for (Index ch = 0; ch < c; ++ch) {
      var[ch] += (x.flat().segment((b * c + ch) * hw, hw).array() - mean[ch]).square().sum();
    }
  }
  var /= count;
  return {mean, var};
}

}  // namespace detail

/// Forward pass. Train mode normalizes with batch statistics and reports
/// them; eval mode reads `running`. Does not mutate running statistics.
template <typename Scalar>
BatchNormOutput<Scalar> batchnorm2d_forward(const Tensor<Scalar>& x, const Tensor<Scalar>& gamma,
                                            const Tensor<Scalar>& beta, Mode mode,
                                            const BatchNormStats<Scalar>& running,
                                            double eps = BatchNormConfig{}.eps) {
  detail::check_batchnorm(x, gamma, beta, eps);
  const Index n = x.dim(0), c = x.dim(1), hw = x.dim(2) * x.dim(3);
  BatchNormOutput<Scalar> result;
  Vector<Scalar> mean, var;
  if (mode == Mode::kTrain) {
    if (n * hw == 1) {
      throw ValidationError(
          "batchnorm2d: train mode needs more than one value per channel (batch 1, spatial 1x1)");
    }
    std::tie(mean, var) = detail::channel_moments(x);
    result.batch_mean = mean;
    result.batch_var = var * (static_cast<Scalar>(n * hw) / static_cast<Scalar>(n * hw - 1));
  } else {
    detail::require_dim(running.mean.size(), c, "batchnorm2d", "running mean length");
    detail::require_dim(running.var.size(), c, "batchnorm2d", "running var length");
    mean = running.mean;
    var = running.var;
  }
  const Vector<Scalar> inv_std = (var.array() + static_cast<Scalar>(eps)).rsqrt();
  result.output = Tensor<Scalar>(x.shape());
  for (Index b = 0; b < n; ++b) {
    for (Index ch = 0; ch < c; ++ch) {
      const Index off = (b * c + ch) * hw;
      result.output.flat().segment(off, hw) =
          ((x.flat().segment(off, hw).array() - mean[ch]) * (inv_std[ch] * gamma[ch]) + beta[ch])
              .matrix();
    }
  }
  return result;
}

template <typename Scalar>
void update_running_stats(BatchNormStats<Scalar>& running, const Vector<Scalar>& batch_mean,
                          const Vector<Scalar>& batch_var, double momentum) {
  const auto m = static_cast<Scalar>(momentum);
  running.mean = (Scalar(1) - m) * running.mean + m * batch_mean;
  running.var = (Scalar(1) - m) * running.var + m * batch_var;
}

/// Forward pass that also folds train-mode batch statistics into `running`.
template <typename Scalar>
Tensor<Scalar> batchnorm2d(const Tensor<Scalar>& x, const Tensor<Scalar>& gamma,
                           const Tensor<Scalar>& beta, Mode mode, BatchNormStats<Scalar>& running,
                           const BatchNormConfig& config = {}) {
  auto result = batchnorm2d_forward(x, gamma, beta, mode, running, config.eps);
  if (mode == Mode::kTrain) {
    update_running_stats(running, result.batch_mean, result.batch_var, config.momentum);
  }
  return std::move(result.output);
}

/// Returns d_input and d_params {"gamma", "beta"}.
template <typename Scalar>
LayerGrads<Scalar> batchnorm2d_backward(const Tensor<Scalar>& x, const Tensor<Scalar>& gamma,
                                        const Tensor<Scalar>& beta, Mode mode,
                                        const BatchNormStats<Scalar>& running,
                                        const Tensor<Scalar>& d_out,
                                        double eps = BatchNormConfig{}.eps) {
  detail::check_batchnorm(x, gamma, beta, eps);
  if (!d_out.same_shape(x)) throw ShapeError("batchnorm2d_backward: d_out shape mismatch");
  const Index n = x.dim(0), c = x.dim(1), hw = x.dim(2) * x.dim(3);
  Vector<Scalar> mean, var;
  if (mode == Mode::kTrain) {
    std::tie(mean, var) = detail::channel_moments(x);
  } else {
    mean = running.mean;
    var = running.var;
  }
  const Vector<Scalar> inv_std = (var.array() + static_cast<Scalar>(eps)).rsqrt();
  Tensor<Scalar> x_hat(x.shape());
  Vector<Scalar> d_gamma = Vector<Scalar>::Zero(c);
  Vector<Scalar> d_beta = Vector<Scalar>::Zero(c);
  for (Index b = 0; b < n; ++b) {
    for (Index ch = 0; ch < c; ++ch) {
      const Index off = (b * c + ch) * hw;
      x_hat.flat().segment(off, hw) =
          ((x.flat().segment(off, hw).array() - mean[ch]) * inv_std[ch]).matrix();
      d_gamma[ch] += d_out.flat().segment(off, hw).dot(x_hat.flat().segment(off, hw));
      d_beta[ch] += d_out.flat().segment(off, hw).sum();
    }
  }
  LayerGrads<Scalar> grads;
  grads.d_input = Tensor<Scalar>(x.shape());
  const Scalar count = static_cast<Scalar>(n * hw);
  for (Index b = 0; b < n; ++b) {
    for (Index ch = 0; ch < c; ++ch) {
      const Index off = (b * c + ch) * hw;
      auto dy = d_out.flat().segment(off, hw).array();
      if (mode == Mode::kTrain) {
        // d_gamma / d_beta double as the channel sums of dy*x_hat and dy.
        auto xh = x_hat.flat().segment(off, hw).array();
        grads.d_input.flat().segment(off, hw) =
            (gamma[ch] * inv_std[ch] / count * (count * dy - d_beta[ch] - xh * d_gamma[ch]))
                .matrix();
      } else {
        grads.d_input.flat().segment(off, hw) = (dy * (gamma[ch] * inv_std[ch])).matrix();
      }
    }
  }
  grads.d_params.emplace("gamma", Tensor<Scalar>({c}, d_gamma));
  grads.d_params.emplace("beta", Tensor<Scalar>({c}, d_beta));
  return grads;
}

// ---------------------------------------------------------------------------
// pointwise and pooling
// ---------------------------------------------------------------------------

template <typename Scalar>
Tensor<Scalar> relu(const Tensor<Scalar>& x) {
  return Tensor<Scalar>(x.shape(), x.flat().array().max(Scalar(0)).matrix());
}

template <typename Scalar>
Tensor<Scalar> relu_backward(const Tensor<Scalar>& x, const Tensor<Scalar>& d_out) {
  if (!d_out.same_shape(x)) throw ShapeError("relu_backward: d_out shape mismatch");
  return Tensor<Scalar>(x.shape(),
                        (x.flat().array() > Scalar(0)).select(d_out.flat().array(), Scalar(0)).matrix());
}

/// Logistic function, clamped so the result stays inside the open interval
/// (0, 1) even where the exact value rounds to 0 or 1.
template <typename Scalar>
Tensor<Scalar> sigmoid(const Tensor<Scalar>& x) {
  const Scalar lo = std::numeric_limits<Scalar>::min();
  const Scalar hi = std::nextafter(Scalar(1), Scalar(0));
  Vector<Scalar> y = (Scalar(1) / (Scalar(1) + (-x.flat().array()).exp())).max(lo).min(hi).matrix();
  return Tensor<Scalar>(x.shape(), std::move(y));
}

/// Takes the forward *output* y = sigmoid(x).
template <typename Scalar>
Tensor<Scalar> sigmoid_backward(const Tensor<Scalar>& y, const Tensor<Scalar>& d_out) {
  if (!d_out.same_shape(y)) throw ShapeError("sigmoid_backward: d_out shape mismatch");
  return Tensor<Scalar>(
      y.shape(), (d_out.flat().array() * y.flat().array() * (Scalar(1) - y.flat().array())).matrix());
}

namespace detail {

inline std::array<Index, 4> broadcast_strides(const Shape& x, const Shape& gate) {
  std::array<Index, 4> strides{};
  Index stride = 1;
  for (int d = 3; d >= 0; --d) {
    const auto du = static_cast<std::size_t>(d);
    if (gate[du] == x[du]) {
      strides[du] = stride;
    } else if (gate[du] == 1) {
      strides[du] = 0;
    } else {
      throw ShapeError("mul_broadcast: gate " + shape_string(gate) + " incompatible with " +
                       shape_string(x) + " at dimension " + std::to_string(d));
    }
    stride *= gate[du];
  }
  return strides;
}

template <typename Fn>
void for_each_broadcast(const Shape& x, const std::array<Index, 4>& gs, Fn&& fn) {
  Index i = 0;
  for (Index n = 0; n < x[0]; ++n)
    for (Index c = 0; c < x[1]; ++c)
      for (Index h = 0; h < x[2]; ++h)
        for (Index w = 0; w < x[3]; ++w, ++i) fn(i, n * gs[0] + c * gs[1] + h * gs[2] + w * gs[3]);
}

}  // namespace detail

/// x * gate where each gate dimension equals x's or is 1 (rank 4 only).
template <typename Scalar>
Tensor<Scalar> mul_broadcast(const Tensor<Scalar>& x, const Tensor<Scalar>& gate) {
  detail::require_rank(x, 4, "mul_broadcast input");
  detail::require_rank(gate, 4, "mul_broadcast gate");
  const auto gs = detail::broadcast_strides(x.shape(), gate.shape());
  Tensor<Scalar> out(x.shape());
  detail::for_each_broadcast(x.shape(), gs, [&](Index i, Index g) { out[i] = x[i] * gate[g]; });
  return out;
}

template <typename Scalar>
struct MulBroadcastGrads {
  Tensor<Scalar> d_input;
  Tensor<Scalar> d_gate;
};

template <typename Scalar>
MulBroadcastGrads<Scalar> mul_broadcast_backward(const Tensor<Scalar>& x,
                                                 const Tensor<Scalar>& gate,
                                                 const Tensor<Scalar>& d_out) {
  detail::require_rank(x, 4, "mul_broadcast input");
  detail::require_rank(gate, 4, "mul_broadcast gate");
  if (!d_out.same_shape(x)) throw ShapeError("mul_broadcast_backward: d_out shape mismatch");
  const auto gs = detail::broadcast_strides(x.shape(), gate.shape());
  MulBroadcastGrads<Scalar> grads{Tensor<Scalar>(x.shape()), Tensor<Scalar>(gate.shape())};
  detail::for_each_broadcast(x.shape(), gs, [&](Index i, Index g) {
    grads.d_input[i] = d_out[i] * gate[g];
    grads.d_gate[g] += d_out[i] * x[i];
  });
  return grads;
}

/// Per-channel spatial mean, N x C x 1 x 1.
template <typename Scalar>
Tensor<Scalar> adaptive_avg_pool_1x1(const Tensor<Scalar>& x) {
  detail::require_rank(x, 4, "adaptive_avg_pool_1x1 input");
  const Index nc = x.dim(0) * x.dim(1), hw = x.dim(2) * x.dim(3);
  Eigen::Map<const RowMatrix<Scalar>> planes(x.data(), nc, hw);
  return Tensor<Scalar>({x.dim(0), x.dim(1), 1, 1}, planes.rowwise().mean());
}

template <typename Scalar>
Tensor<Scalar> adaptive_avg_pool_1x1_backward(const Tensor<Scalar>& x,
                                              const Tensor<Scalar>& d_out) {
  detail::require_rank(x, 4, "adaptive_avg_pool_1x1 input");
  const Index nc = x.dim(0) * x.dim(1), hw = x.dim(2) * x.dim(3);
  if (d_out.size() != nc) throw ShapeError("adaptive_avg_pool_1x1_backward: d_out shape mismatch");
  Tensor<Scalar> dx(x.shape());
  Eigen::Map<RowMatrix<Scalar>> planes(dx.data(), nc, hw);
  planes = (d_out.flat() / static_cast<Scalar>(hw)).replicate(1, hw);
  return dx;
}

/// Per-channel spatial mean flattened to N x C.
template <typename Scalar>
Tensor<Scalar> global_avg_pool(const Tensor<Scalar>& x) {
  return adaptive_avg_pool_1x1(x).reshaped({x.dim(0), x.dim(1)});
}

template <typename Scalar>
Tensor<Scalar> global_avg_pool_backward(const Tensor<Scalar>& x, const Tensor<Scalar>& d_out) {
  return adaptive_avg_pool_1x1_backward(x, d_out);
}

// ---------------------------------------------------------------------------
// linear
// ---------------------------------------------------------------------------

template <typename Scalar>
void check_linear(const Tensor<Scalar>& input, const Tensor<Scalar>& weight,
                  const Tensor<Scalar>& bias) {
  detail::require_rank(input, 2, "linear input");
  detail::require_rank(weight, 2, "linear weight");
  detail::require_rank(bias, 1, "linear bias");
  detail::require_dim(weight.dim(0), input.dim(1), "linear", "weight rows");
  detail::require_dim(bias.dim(0), weight.dim(1), "linear", "bias length");
}

/// input (N x D) * weight (D x M) + bias (M).
template <typename Scalar>
Tensor<Scalar> linear(const Tensor<Scalar>& input, const Tensor<Scalar>& weight,
                      const Tensor<Scalar>& bias) {
  check_linear(input, weight, bias);
  Tensor<Scalar> out({input.dim(0), weight.dim(1)});
  out.matrix().noalias() = input.matrix() * weight.matrix();
  out.matrix().rowwise() += bias.flat().transpose();
  return out;
}

/// Returns d_input and d_params {"weight", "bias"}.
template <typename Scalar>
LayerGrads<Scalar> linear_backward(const Tensor<Scalar>& input, const Tensor<Scalar>& weight,
                                   const Tensor<Scalar>& bias, const Tensor<Scalar>& d_out) {
  check_linear(input, weight, bias);
  if (d_out.shape() != Shape{input.dim(0), weight.dim(1)}) {
    throw ShapeError("linear_backward: d_out shape mismatch");
  }
  LayerGrads<Scalar> grads;
  grads.d_input = Tensor<Scalar>(input.shape());
  grads.d_input.matrix().noalias() = d_out.matrix() * weight.matrix().transpose();
  Tensor<Scalar> d_weight(weight.shape());
  d_weight.matrix().noalias() = input.matrix().transpose() * d_out.matrix();
  grads.d_params.emplace("weight", std::move(d_weight));
  grads.d_params.emplace("bias", Tensor<Scalar>(bias.shape(), d_out.matrix().colwise().sum().transpose()));
  return grads;
}

}  // namespace drgrade
