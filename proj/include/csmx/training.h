#pragma once

#include <cstdint>
#include <span>
#include <stdexcept>
#include <vector>

#include "csmx/model.h"
#include "csmx/tensor.h"

namespace csmx::training {

/// Raised when a loss or update produces a non-finite value.
class NumericError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Class posterior p(y|x) = softmax(logits)_y over the last axis.
Tensor softmax_posterior(const Tensor& logits);

/// One-hot rows [B, K] for hard labels.
Tensor one_hot(std::span<const int> labels, std::size_t num_classes);

/// Mean over the batch of -sum_y target(y) log p(y|x). `logits` and
/// `targets` are [B, K] (or [K] for a single sample); every target row must
/// be a probability distribution (sum 1 within 1e-6, no negative entries).
/// Differentiable with respect to the logits.
Tensor cross_entropy(const Tensor& logits, const Tensor& targets);

/// Index of the largest entry; ties go to the lowest index.
std::size_t argmax(std::span<const double> row);

/// 100 * fraction of rows whose argmax equals the label.
double accuracy_from_logits(const Tensor& logits, std::span<const int> labels);

struct AdamWConfig {
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
  double weight_decay = 0.05;
};

struct OptimizerState {
  AdamWConfig hyper;
  std::uint64_t step = 0;
  std::vector<Tensor> first;   // one per parameter, same shapes
  std::vector<Tensor> second;

  static OptimizerState init(std::span<const NamedParameter> params, const AdamWConfig& hyper);
};

/// One decoupled-weight-decay Adam update with bias-corrected moments.
/// Parameters with decay == false (biases, norm parameters) are not decayed.
/// A parameter without a gradient buffer is treated as having zero gradient.
void adamw_step(std::span<const NamedParameter> params, OptimizerState& state, double lr);

/// Scales all gradients so their joint L2 norm is at most `max_norm`.
/// Returns the norm before clipping.
double clip_grad_norm(std::span<const NamedParameter> params, double max_norm);

struct SchedulePlan {
  std::size_t warmup_epochs = 20;
  std::size_t cooldown_epochs = 10;
  std::size_t total_epochs = 300;
  double base_lr = 2e-3;
  double warmup_lr = 1e-6;
  double min_lr = 1e-5;
  double cooldown_lr = 1e-5;

  void validate() const;
};

/// Per-epoch learning rate: linear warmup_lr -> base_lr ramp, cosine decay
/// base_lr -> min_lr over the main phase, then constant cooldown_lr.
double lr_at(std::size_t epoch, const SchedulePlan& plan);

struct EmaState {
  double decay = 0.99996;
  std::vector<Tensor> shadow;

  static EmaState init(std::span<const NamedParameter> params, double decay);
  /// shadow <- decay * shadow + (1 - decay) * param, per scalar.
  void update(std::span<const NamedParameter> params);
  /// Exchanges shadow values with the live parameters (used to evaluate
  /// with EMA weights and swap back).
  void swap_into(std::span<const NamedParameter> params);
};

}  // namespace csmx::training
