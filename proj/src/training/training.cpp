#include "csmx/training.h"

#include <algorithm>
#include <cmath>
#include <numbers>
#include <string>

#include "csmx/ops.h"

namespace csmx::training {

Tensor softmax_posterior(const Tensor& logits) { return ops::softmax(logits); }

Tensor one_hot(std::span<const int> labels, std::size_t num_classes) {
  Tensor out({labels.size(), num_classes});
  auto d = out.mutable_data();
  for (std::size_t i = 0; i < labels.size(); ++i) {
    if (labels[i] < 0 || static_cast<std::size_t>(labels[i]) >= num_classes) {
      throw std::out_of_range("one_hot: label " + std::to_string(labels[i]) + " outside [0, " +
                              std::to_string(num_classes) + ")");
    }
    d[i * num_classes + static_cast<std::size_t>(labels[i])] = 1.0;
  }
  return out;
}

Tensor cross_entropy(const Tensor& logits, const Tensor& targets) {
  if (logits.shape() != targets.shape()) {
    throw ShapeError("cross_entropy: logits " + shape_str(logits.shape()) + " vs targets " +
                     shape_str(targets.shape()));
  }
  const std::size_t k = logits.shape().back(), rows = logits.numel() / k;
  auto z = logits.data();
  auto t = targets.data();
  std::vector<double> posterior(logits.numel());
  double total = 0.0;
  for (std::size_t r = 0; r < rows; ++r) {
    double mass = 0.0;
    for (std::size_t j = 0; j < k; ++j) {
      if (t[r * k + j] < 0.0) throw std::invalid_argument("cross_entropy: negative target in row " + std::to_string(r));
      mass += t[r * k + j];
    }
    if (std::abs(mass - 1.0) > 1e-6) {
      throw std::invalid_argument("cross_entropy: target row " + std::to_string(r) + " sums to " +
                                  std::to_string(mass));
    }
    const double* zr = z.data() + r * k;
    const double m = *std::max_element(zr, zr + k);
    double norm = 0.0;
    for (std::size_t j = 0; j < k; ++j) norm += std::exp(zr[j] - m);
    const double log_norm = m + std::log(norm);
    for (std::size_t j = 0; j < k; ++j) {
      posterior[r * k + j] = std::exp(zr[j] - log_norm);
      if (t[r * k + j] > 0.0) total -= t[r * k + j] * (zr[j] - log_norm);
    }
  }
  Tensor loss = Tensor::scalar(total / static_cast<double>(rows));
  if (active_tape() && logits.requires_grad()) {
    active_tape()->record(loss, [logits, targets, loss, posterior = std::move(posterior), rows]() mutable {
      const double g = loss.grad()[0] / static_cast<double>(rows);
      auto t = targets.data();
      auto dz = logits.grad_buffer();
      for (std::size_t i = 0; i < dz.size(); ++i) dz[i] += g * (posterior[i] - t[i]);
    });
  }
  return loss;
}

std::size_t argmax(std::span<const double> row) {
  return static_cast<std::size_t>(std::max_element(row.begin(), row.end()) - row.begin());
}

double accuracy_from_logits(const Tensor& logits, std::span<const int> labels) {
  const std::size_t k = logits.shape().back(), rows = logits.numel() / k;
  if (rows != labels.size()) throw ShapeError("accuracy: logits rows do not match label count");
  if (rows == 0) throw std::invalid_argument("accuracy: empty dataset");
  std::size_t correct = 0;
  for (std::size_t r = 0; r < rows; ++r) {
    if (static_cast<int>(argmax(logits.data().subspan(r * k, k))) == labels[r]) ++correct;
  }
  return 100.0 * static_cast<double>(correct) / static_cast<double>(rows);
}

OptimizerState OptimizerState::init(std::span<const NamedParameter> params, const AdamWConfig& hyper) {
  OptimizerState s;
  s.hyper = hyper;
  for (const auto& p : params) {
    s.first.emplace_back(p.tensor.shape());
    s.second.emplace_back(p.tensor.shape());
  }
  return s;
}

void adamw_step(std::span<const NamedParameter> params, OptimizerState& state, double lr) {
  if (params.size() != state.first.size()) {
    throw std::invalid_argument("adamw_step: optimizer state tracks " + std::to_string(state.first.size()) +
                                " tensors, got " + std::to_string(params.size()));
  }
  ++state.step;
  const auto& h = state.hyper;
  const double t = static_cast<double>(state.step);
  const double correction1 = 1.0 - std::pow(h.beta1, t);
  const double correction2 = 1.0 - std::pow(h.beta2, t);
  for (std::size_t i = 0; i < params.size(); ++i) {
    Tensor p = params[i].tensor;
    if (p.shape() != state.first[i].shape()) {
      throw ShapeError("adamw_step: moment shape mismatch for " + params[i].name);
    }
    auto w = p.mutable_data();
    auto g = p.grad();
    auto m = state.first[i].mutable_data();
    auto v = state.second[i].mutable_data();
    const double shrink = params[i].decay ? 1.0 - lr * h.weight_decay : 1.0;
    for (std::size_t j = 0; j < w.size(); ++j) {
      const double gj = g.empty() ? 0.0 : g[j];
      m[j] = h.beta1 * m[j] + (1.0 - h.beta1) * gj;
      v[j] = h.beta2 * v[j] + (1.0 - h.beta2) * gj * gj;
      const double m_hat = m[j] / correction1;
      const double v_hat = v[j] / correction2;
      w[j] = w[j] * shrink - lr * m_hat / (std::sqrt(v_hat) + h.eps);
    }
  }
}

double clip_grad_norm(std::span<const NamedParameter> params, double max_norm) {
  double sq = 0.0;
  for (const auto& p : params) {
    for (double g : p.tensor.grad()) sq += g * g;
  }
  const double norm = std::sqrt(sq);
  if (norm > max_norm && norm > 0.0) {
    const double f = max_norm / norm;
    for (const auto& p : params) {
      if (!p.tensor.has_grad()) continue;
      for (double& g : p.tensor.grad_buffer()) g *= f;
    }
  }
  return norm;
}

void SchedulePlan::validate() const {
  if (total_epochs == 0) throw std::invalid_argument("schedule: total_epochs must be > 0");
  if (warmup_epochs + cooldown_epochs > total_epochs) {
    throw std::invalid_argument("schedule: warmup + cooldown exceeds total epochs");
  }
  if (!(base_lr > 0.0) || warmup_lr < 0.0 || min_lr < 0.0 || cooldown_lr < 0.0 || min_lr > base_lr) {
    throw std::invalid_argument("schedule: learning rates must satisfy 0 <= min_lr <= base_lr");
  }
}

double lr_at(std::size_t epoch, const SchedulePlan& plan) {
  plan.validate();
  if (epoch >= plan.total_epochs) {
    throw std::out_of_range("lr_at: epoch " + std::to_string(epoch) + " outside [0, " +
                            std::to_string(plan.total_epochs) + ")");
  }
  if (epoch < plan.warmup_epochs) {
    const double frac = static_cast<double>(epoch) / static_cast<double>(plan.warmup_epochs);
    return plan.warmup_lr + (plan.base_lr - plan.warmup_lr) * frac;
  }
  const std::size_t main_epochs = plan.total_epochs - plan.warmup_epochs - plan.cooldown_epochs;
  if (epoch >= plan.warmup_epochs + main_epochs) return plan.cooldown_lr;
  if (main_epochs == 1) return plan.base_lr;
  const double progress =
      static_cast<double>(epoch - plan.warmup_epochs) / static_cast<double>(main_epochs - 1);
  return plan.min_lr + 0.5 * (plan.base_lr - plan.min_lr) * (1.0 + std::cos(std::numbers::pi * progress));
}

EmaState EmaState::init(std::span<const NamedParameter> params, double decay) {
  if (!(decay >= 0.0 && decay <= 1.0)) throw std::invalid_argument("ema: decay must be in [0, 1]");
  EmaState e;
  e.decay = decay;
  for (const auto& p : params) e.shadow.push_back(p.tensor.clone());
  return e;
}

void EmaState::update(std::span<const NamedParameter> params) {
  if (params.size() != shadow.size()) throw std::invalid_argument("ema: parameter count mismatch");
  for (std::size_t i = 0; i < params.size(); ++i) {
    if (params[i].tensor.shape() != shadow[i].shape()) {
      throw ShapeError("ema: shape mismatch for " + params[i].name);
    }
    auto s = shadow[i].mutable_data();
    auto p = params[i].tensor.data();
    for (std::size_t j = 0; j < s.size(); ++j) s[j] = decay * s[j] + (1.0 - decay) * p[j];
  }
}

void EmaState::swap_into(std::span<const NamedParameter> params) {
  if (params.size() != shadow.size()) throw std::invalid_argument("ema: parameter count mismatch");
  for (std::size_t i = 0; i < params.size(); ++i) {
    Tensor live = params[i].tensor;
    auto a = live.mutable_data();
    auto b = shadow[i].mutable_data();
    std::swap_ranges(a.begin(), a.end(), b.begin());
  }
}

}  // namespace csmx::training
