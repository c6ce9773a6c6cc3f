#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <functional>
#include <map>
#include <numeric>
#include <optional>
#include <random>
#include <span>
#include <string>
#include <vector>

#include "drgrade/calibration.hpp"
#include "drgrade/errors.hpp"
#include "drgrade/grades.hpp"
#include "drgrade/losses.hpp"
#include "drgrade/models.hpp"
#include "drgrade/tensor.hpp"

namespace drgrade {

// ===========================================================================
// AdamW
// ===========================================================================

struct AdamWConfig {
  double learning_rate = 2e-4;
  double weight_decay = 1e-3;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;

  void validate() const {
    if (!(learning_rate >= 0)) throw ValidationError("adamw: learning rate must be >= 0");
    if (!(weight_decay >= 0)) throw ValidationError("adamw: weight decay must be >= 0");
    if (!(beta1 >= 0 && beta1 < 1) || !(beta2 >= 0 && beta2 < 1)) {
      throw ValidationError("adamw: betas must lie in [0, 1)");
    }
    if (!(eps > 0)) throw ValidationError("adamw: eps must be > 0");
  }
};

template <typename Scalar>
struct Moments {
  Vector<Scalar> m;
  Vector<Scalar> v;
};

template <typename Scalar>
struct OptimState {
  std::map<std::string, Moments<Scalar>> moments;
  std::int64_t step = 0;
};

/// One AdamW update of a single tensor at (1-based) step t:
///   p <- p (1 - lr wd);  p <- p - lr m_hat / (sqrt(v_hat) + eps).
template <typename Scalar>
void adamw_update(Tensor<Scalar>& param, const Tensor<Scalar>& grad, Moments<Scalar>& mom,
                  std::int64_t t, const AdamWConfig& cfg) {
  if (!param.same_shape(grad)) {
    throw ShapeError("adamw: gradient shape " + shape_string(grad.shape()) +
                     " differs from parameter shape " + shape_string(param.shape()));
  }
  if (mom.m.size() == 0) {
    mom.m = Vector<Scalar>::Zero(param.size());
    mom.v = Vector<Scalar>::Zero(param.size());
  }
  if (mom.m.size() != param.size()) throw ShapeError("adamw: moment size differs from parameter size");
  const auto b1 = static_cast<Scalar>(cfg.beta1);
  const auto b2 = static_cast<Scalar>(cfg.beta2);
  const auto lr = static_cast<Scalar>(cfg.learning_rate);
  const Scalar c1 = Scalar(1) - static_cast<Scalar>(std::pow(cfg.beta1, double(t)));
  const Scalar c2 = Scalar(1) - static_cast<Scalar>(std::pow(cfg.beta2, double(t)));
  const auto g = grad.flat().array();
  mom.m.array() = b1 * mom.m.array() + (Scalar(1) - b1) * g;
  mom.v.array() = b2 * mom.v.array() + (Scalar(1) - b2) * g.square();
  auto p = param.flat().array();
  if (cfg.weight_decay != 0.0) p *= Scalar(1) - lr * static_cast<Scalar>(cfg.weight_decay);
  p -= lr * (mom.m.array() / c1) / ((mom.v.array() / c2).sqrt() + static_cast<Scalar>(cfg.eps));
}

/// Advances the step counter once and updates every named parameter that
/// has a gradient. `model.visit_parameters(fn(name, Tensor&))` enumerates
/// the parameters.
template <typename Scalar, typename Model>
void adamw_step(Model& model, const std::map<std::string, Tensor<Scalar>>& grads,
                OptimState<Scalar>& state, const AdamWConfig& cfg) {
  cfg.validate();
  ++state.step;
  std::size_t used = 0;
  model.visit_parameters([&](const std::string& name, Tensor<Scalar>& p) {
    auto it = grads.find(name);
    if (it == grads.end()) return;
    adamw_update(p, it->second, state.moments[name], state.step, cfg);
    ++used;
  });
  if (used != grads.size()) throw ValidationError("adamw: gradient for an unknown parameter");
}

// ===========================================================================
// Trainable heads
// ===========================================================================

enum class HeadKind { kFcn, kRanking };

inline std::string to_string(HeadKind h) { return h == HeadKind::kFcn ? "fcn" : "ranking"; }

inline HeadKind parse_head(const std::string& s) {
  if (s == "fcn") return HeadKind::kFcn;
  if (s == "ranking") return HeadKind::kRanking;
  throw ValidationError("unknown head '" + s + "' (expected fcn or ranking)");
}

/// Learnable per-grade prompts scored by cosine similarity / temperature.
template <typename Scalar>
class RankingHead {
 public:
  RankingHead() = default;
  RankingHead(Tensor<Scalar> prompts, double temperature, Similarity similarity)
      : prompts_(std::move(prompts)), temperature_(temperature), similarity_(similarity) {
    detail::require_rank(prompts_, 2, "ranking head prompts");
    detail::require_dim(prompts_.dim(0), Index{kNumGrades}, "ranking head", "prompt rows");
    bank().validate();
  }

  static RankingHead init(Index dim, double temperature, double init_std, std::uint64_t seed,
                          Similarity similarity = Similarity::kCosine) {
    if (dim < 1) throw ValidationError("ranking head: embedding dim must be >= 1");
    if (!(init_std > 0)) throw ValidationError("ranking head: prompt init std must be > 0");
    const auto bank = PromptBank<Scalar>::random(dim, init_std, seed);
    Tensor<Scalar> p({Index{kNumGrades}, dim});
    p.matrix() = bank.embeddings;
    return RankingHead(std::move(p), temperature, similarity);
  }

  HeadKind kind() const { return HeadKind::kRanking; }
  Index input_dim() const { return prompts_.dim(1); }
  double temperature() const { return temperature_; }
  Similarity similarity() const { return similarity_; }
  const Tensor<Scalar>& prompts() const { return prompts_; }

  PromptBank<Scalar> bank() const {
    PromptBank<Scalar> b;
    b.embeddings = prompts_.matrix();
    b.learnable = true;
    b.temperature = temperature_;
    b.similarity = similarity_;
    return b;
  }

  GradeLogits<Scalar> forward(const Tensor<Scalar>& x, Mode) {
    detail::require_rank(x, 2, "ranking head input");
    last_input_ = x.matrix();
    return ranking_head_forward(last_input_, bank());
  }

  std::map<std::string, Tensor<Scalar>> backward(const GradeLogits<Scalar>& d_logits) {
    auto g = ranking_head_backward(last_input_, bank(), d_logits);
    Tensor<Scalar> d({Index{kNumGrades}, input_dim()});
    d.matrix() = g.d_prompts;
    return {{"prompts", std::move(d)}};
  }

  void commit() {}

  template <typename Fn>
  void visit_parameters(Fn&& fn) {
    fn(std::string("prompts"), prompts_);
  }

 private:
  Tensor<Scalar> prompts_;
  double temperature_ = 0.2;
  Similarity similarity_ = Similarity::kCosine;
  RowMatrix<Scalar> last_input_;
};

/// Conv/BN/ReLU/CBAM decoder over feature maps.
template <typename Scalar>
class FcnHead {
 public:
  FcnHead() = default;
  explicit FcnHead(FcnHeadParams<Scalar> params) : params_(std::move(params)) {}

  static FcnHead init(const FcnHeadConfig& config, std::uint64_t seed) {
    return FcnHead(FcnHeadParams<Scalar>::init(config, seed));
  }

  HeadKind kind() const { return HeadKind::kFcn; }
  const FcnHeadParams<Scalar>& params() const { return params_; }
  FcnHeadParams<Scalar>& params() { return params_; }

  GradeLogits<Scalar> forward(const Tensor<Scalar>& x, Mode mode) {
    last_ = fcn_head_forward(x, params_, mode);
    return last_.logits;
  }

  std::map<std::string, Tensor<Scalar>> backward(const GradeLogits<Scalar>& d_logits) {
    return fcn_head_backward(last_, params_, d_logits).d_params;
  }

  /// Folds the last train-mode batch statistics into the running averages.
  void commit() { commit_running_stats(params_, last_); }

  template <typename Fn>
  void visit_parameters(Fn&& fn) {
    params_.visit_parameters(fn);
  }

 private:
  FcnHeadParams<Scalar> params_;
  FcnForward<Scalar> last_;
};

// ===========================================================================
// Configuration and data
// ===========================================================================

enum class MonitoredMetric { kValLoss, kValAccuracy };

inline std::string to_string(MonitoredMetric m) {
  return m == MonitoredMetric::kValLoss ? "val_loss" : "val_accuracy";
}

inline MonitoredMetric parse_monitored(const std::string& s) {
  if (s == "val_loss") return MonitoredMetric::kValLoss;
  if (s == "val_accuracy") return MonitoredMetric::kValAccuracy;
  throw ValidationError("unknown monitored metric '" + s + "' (expected val_loss or val_accuracy)");
}

enum class FcnLoss { kFocal, kFocalPlusCrossEntropy };

struct TrainConfig {
  std::size_t batch_size = 32;
  AdamWConfig optimizer;
  int epochs = 20;
  int early_stop_patience = 7;
  double temperature = 0.2;
  double alpha = 0.7;
  double gamma = 2.0;
  std::uint64_t seed = 0;
  MonitoredMetric monitored = MonitoredMetric::kValLoss;
  double margin = 0.05;
  RankingPairs pairs = RankingPairs::kUnimodal;
  bool alpha_on_cross_entropy = true;
  FcnLoss fcn_loss = FcnLoss::kFocal;
  // Inverse-frequency weights from the training labels; uniform when false.
  bool inverse_frequency_weights = true;
  double prompt_init_std = 0.02;

  void validate() const {
    optimizer.validate();
    if (batch_size < 1) throw ValidationError("train: batch size must be >= 1");
    if (epochs < 1) throw ValidationError("train: epochs must be >= 1");
    if (early_stop_patience < 1) throw ValidationError("train: patience must be >= 1");
    if (!(temperature > 0)) throw ValidationError("train: temperature must be > 0");
    if (!(alpha >= 0 && alpha <= 1)) throw ValidationError("train: alpha must be in [0, 1]");
    if (!(gamma >= 0)) throw ValidationError("train: gamma must be >= 0");
    if (!(margin >= 0)) throw ValidationError("train: margin must be >= 0");
    if (!(prompt_init_std > 0)) throw ValidationError("train: prompt init std must be > 0");
  }
};

/// Inputs stacked along the first axis: N x D for global embeddings,
/// N x C x H x W for feature maps.
template <typename Scalar>
struct Dataset {
  Tensor<Scalar> inputs;
  std::vector<int> labels;
  std::vector<std::string> ids;

  std::size_t size() const { return labels.size(); }

  void validate(const char* what) const {
    if (labels.empty()) throw ValidationError(std::string(what) + ": empty dataset");
    if (inputs.empty() || inputs.dim(0) != static_cast<Index>(labels.size())) {
      throw ShapeError(std::string(what) + ": inputs and labels differ in length");
    }
    for (int y : labels) {
      if (!valid_grade(y)) throw ValidationError(std::string(what) + ": label out of range");
    }
  }

  Tensor<Scalar> gather(std::span<const std::size_t> rows) const {
    Shape shape = inputs.shape();
    const Index stride = inputs.size() / shape[0];
    shape[0] = static_cast<Index>(rows.size());
    Tensor<Scalar> out(shape);
    for (std::size_t i = 0; i < rows.size(); ++i) {
      out.flat().segment(static_cast<Index>(i) * stride, stride) =
          inputs.flat().segment(static_cast<Index>(rows[i]) * stride, stride);
    }
    return out;
  }
};

// ===========================================================================
// Loss selection
// ===========================================================================

template <typename Scalar>
LossValue<Scalar> head_loss(HeadKind head, const GradeLogits<Scalar>& logits, std::span<const int> targets,
                            const TrainConfig& cfg, const ClassWeights& weights) {
  if (head == HeadKind::kRanking) {
    CombinedLossConfig c;
    c.alpha = cfg.alpha;
    c.gamma = 0.0;
    c.weights = weights;
    c.margin = cfg.margin;
    c.pairs = cfg.pairs;
    c.alpha_on_cross_entropy = cfg.alpha_on_cross_entropy;
    c.score_scale = cfg.temperature;
    return combined_loss(logits, targets, c);
  }
  LossValue<Scalar> focal = focal_loss(logits, targets, cfg.gamma, weights);
  if (cfg.fcn_loss == FcnLoss::kFocalPlusCrossEntropy) {
    const LossValue<Scalar> ce = weighted_cross_entropy(logits, targets, weights);
    focal.value += ce.value;
    focal.d_logits += ce.d_logits;
  }
  return focal;
}

template <typename Scalar>
ClassWeights training_weights(const std::vector<int>& labels, const TrainConfig& cfg) {
  if (!cfg.inverse_frequency_weights) return ClassWeights::uniform();
  std::array<std::size_t, kNumGrades> counts{};
  for (int y : labels) ++counts[static_cast<std::size_t>(y)];
  return ClassWeights::inverse_frequency(counts);
}

// ===========================================================================
// Early stopping and history
// ===========================================================================

/// Tracks the best monitored value; an epoch improves only if strictly
/// better than every earlier epoch.
class EarlyStopping {
 public:
  EarlyStopping(int patience, bool lower_is_better) : patience_(patience), lower_(lower_is_better) {
    if (patience < 1) throw ValidationError("early stopping: patience must be >= 1");
  }

  /// Records one epoch; returns true when it is the new best.
  bool update(int epoch, double value) {
    const bool better = best_epoch_ == 0 || (lower_ ? value < best_ : value > best_);
    if (better) {
      best_ = value;
      best_epoch_ = epoch;
      stale_ = 0;
    } else {
      ++stale_;
    }
    return better;
  }

  bool should_stop() const { return stale_ >= patience_; }
  int best_epoch() const { return best_epoch_; }
  double best_value() const { return best_; }

 private:
  int patience_;
  bool lower_;
  int best_epoch_ = 0;
  int stale_ = 0;
  double best_ = 0.0;
};

struct EpochRecord {
  int epoch = 0;
  double train_loss = 0.0;
  double train_acc = 0.0;
  double val_loss = 0.0;
  double val_acc = 0.0;
};

using History = std::vector<EpochRecord>;

template <typename Model>
struct TrainResult {
  Model model;  // parameters from the best epoch
  History history;
  int best_epoch = 0;
  bool stopped_early = false;
  ClassWeights weights;
};

struct Evaluation {
  double loss = 0.0;
  double accuracy = 0.0;
};

template <typename Scalar, typename Model>
GradeLogits<Scalar> batched_logits(Model& model, const Dataset<Scalar>& data, std::size_t batch_size) {
  GradeLogits<Scalar> out(static_cast<Index>(data.size()), kNumGrades);
  std::vector<std::size_t> rows;
  for (std::size_t start = 0; start < data.size(); start += batch_size) {
    const std::size_t end = std::min(data.size(), start + batch_size);
    rows.resize(end - start);
    std::iota(rows.begin(), rows.end(), start);
    out.middleRows(static_cast<Index>(start), static_cast<Index>(rows.size())) =
        model.forward(data.gather(rows), Mode::kEval);
  }
  return out;
}

template <typename Scalar>
double argmax_accuracy(const GradeLogits<Scalar>& logits, std::span<const int> labels) {
  std::size_t hits = 0;
  for (Index i = 0; i < logits.rows(); ++i) hits += argmax_grade(logits.row(i)) == labels[static_cast<std::size_t>(i)];
  return static_cast<double>(hits) / static_cast<double>(logits.rows());
}

template <typename Scalar, typename Model>
Evaluation evaluate_loss(Model& model, const Dataset<Scalar>& data, const TrainConfig& cfg,
                         const ClassWeights& weights) {
  const GradeLogits<Scalar> logits = batched_logits(model, data, cfg.batch_size);
  const auto loss = head_loss(model.kind(), logits, std::span<const int>(data.labels), cfg, weights);
  return {static_cast<double>(loss.value), argmax_accuracy(logits, std::span<const int>(data.labels))};
}

/// Minibatch index lists for one epoch, shuffled from (seed, epoch). A
/// trailing batch of one sample joins the previous batch so batch-norm
/// statistics always see at least two samples.
inline std::vector<std::vector<std::size_t>> epoch_batches(std::size_t n, std::size_t batch_size,
                                                           std::uint64_t seed, int epoch) {
  std::vector<std::size_t> order(n);
  std::iota(order.begin(), order.end(), std::size_t{0});
  std::seed_seq seq{static_cast<std::uint32_t>(seed), static_cast<std::uint32_t>(seed >> 32),
                    static_cast<std::uint32_t>(epoch), 0x7472u};
  std::mt19937_64 rng(seq);
  for (std::size_t i = n; i > 1; --i) {
    std::uniform_int_distribution<std::size_t> pick(0, i - 1);
    std::swap(order[i - 1], order[pick(rng)]);
  }
  std::vector<std::vector<std::size_t>> batches;
  for (std::size_t start = 0; start < n; start += batch_size) {
    const std::size_t end = std::min(n, start + batch_size);
    if (end - start == 1 && !batches.empty()) {
      batches.back().push_back(order[start]);
    } else {
      batches.emplace_back(order.begin() + static_cast<std::ptrdiff_t>(start),
                           order.begin() + static_cast<std::ptrdiff_t>(end));
    }
  }
  return batches;
}

/// Called after every epoch with the record just appended.
using EpochCallback = std::function<void(const EpochRecord&)>;

template <typename Scalar, typename Model>
TrainResult<Model> train(Model model, const Dataset<Scalar>& train_set, const Dataset<Scalar>& val_set,
                         const TrainConfig& cfg, const EpochCallback& on_epoch = {}) {
  cfg.validate();
  train_set.validate("train set");
  val_set.validate("validation set");
  TrainResult<Model> result;
  result.weights = training_weights<Scalar>(train_set.labels, cfg);
  OptimState<Scalar> optim;
  EarlyStopping stopper(cfg.early_stop_patience, cfg.monitored == MonitoredMetric::kValLoss);
  result.model = model;

  for (int epoch = 1; epoch <= cfg.epochs; ++epoch) {
    double loss_sum = 0.0;
    std::size_t hits = 0;
    const auto batches = epoch_batches(train_set.size(), cfg.batch_size, cfg.seed, epoch);
    for (std::size_t b = 0; b < batches.size(); ++b) {
      std::vector<int> y(batches[b].size());
      for (std::size_t i = 0; i < y.size(); ++i) y[i] = train_set.labels[batches[b][i]];
      const GradeLogits<Scalar> logits = model.forward(train_set.gather(batches[b]), Mode::kTrain);
      const auto loss = head_loss(model.kind(), logits, std::span<const int>(y), cfg, result.weights);
      if (!std::isfinite(static_cast<double>(loss.value)) || !loss.d_logits.allFinite()) {
        throw RuntimeFailure("non-finite training loss at epoch " + std::to_string(epoch) + ", batch " +
                             std::to_string(b + 1));
      }
      auto grads = model.backward(loss.d_logits);
      model.commit();
      adamw_step(model, grads, optim, cfg.optimizer);
      loss_sum += static_cast<double>(loss.value) * static_cast<double>(y.size());
      for (Index i = 0; i < logits.rows(); ++i) hits += argmax_grade(logits.row(i)) == y[static_cast<std::size_t>(i)];
    }
    EpochRecord rec;
    rec.epoch = epoch;
    rec.train_loss = loss_sum / static_cast<double>(train_set.size());
    rec.train_acc = static_cast<double>(hits) / static_cast<double>(train_set.size());
    const Evaluation val = evaluate_loss(model, val_set, cfg, result.weights);
    if (!std::isfinite(val.loss)) {
      throw RuntimeFailure("non-finite validation loss at epoch " + std::to_string(epoch));
    }
    rec.val_loss = val.loss;
    rec.val_acc = val.accuracy;
    result.history.push_back(rec);
    if (on_epoch) on_epoch(rec);
    if (stopper.update(epoch, cfg.monitored == MonitoredMetric::kValLoss ? rec.val_loss : rec.val_acc)) {
      result.model = model;
    }
    if (stopper.should_stop() && epoch < cfg.epochs) {
      result.stopped_early = true;
      break;
    }
  }
  result.best_epoch = stopper.best_epoch();
  return result;
}

// ===========================================================================
// Prediction
// ===========================================================================

struct Predictions {
  std::vector<int> grades;
  GradeLogits<double> probabilities;
};

/// Softmax probabilities and decisions: argmax without thresholds,
/// calibration::decide with them.
template <typename Scalar>
Predictions predict_from_logits(const GradeLogits<Scalar>& logits, const std::optional<ThresholdSet>& thresholds) {
  Predictions p;
  p.probabilities = softmax_rows(GradeLogits<double>(logits.template cast<double>()));
  p.grades.resize(static_cast<std::size_t>(logits.rows()));
  for (Index i = 0; i < logits.rows(); ++i) {
    if (thresholds && thresholds->kind == ScoreKind::kProbability) {
      p.grades[static_cast<std::size_t>(i)] = decide(p.probabilities.row(i), *thresholds);
    } else if (thresholds) {
      p.grades[static_cast<std::size_t>(i)] = decide(GradeRow<double>(logits.row(i).template cast<double>()), *thresholds);
    } else {
      p.grades[static_cast<std::size_t>(i)] = argmax_grade(logits.row(i));
    }
  }
  return p;
}

template <typename Scalar, typename Model>
Predictions predict(Model& model, const Dataset<Scalar>& data, const std::optional<ThresholdSet>& thresholds,
                    std::size_t batch_size = 32) {
  if (data.inputs.empty()) throw ValidationError("predict: no inputs");
  return predict_from_logits(batched_logits(model, data, batch_size), thresholds);
}

}  // namespace drgrade
