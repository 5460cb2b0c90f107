#pragma once

#include <filesystem>
#include <functional>
#include <optional>
#include <string>
#include <vector>

#include "csmx/data.h"
#include "csmx/model.h"
#include "csmx/training.h"

namespace csmx::training {

/// Desk-scale training recipe: cosine decay between a linear warmup and a
/// constant cooldown, with epoch counts small enough for a CPU.
struct Recipe {
  std::size_t epochs = 20;
  std::size_t batch = 64;
  double base_lr = 2e-3 * 64.0 / 1024.0;  // linear scaling from 2e-3 at batch 1024
  double warmup_lr = 1e-6;
  double min_lr = 1e-5;
  double cooldown_lr = 1e-5;
  std::size_t warmup_epochs = 2;
  std::size_t cooldown_epochs = 0;
  AdamWConfig adamw;
  double ema_decay = 0.99996;
  std::optional<double> grad_clip;
  data::Normalization norm;
  double eval_crop = 0.9;
  bool flip = true;
  std::size_t crop_pad = 4;
  std::size_t eval_batch = 100;

  SchedulePlan schedule() const;
  std::string to_text() const;
};

struct EpochMetrics {
  std::size_t epoch = 0;
  double lr = 0, train_loss = 0, val_acc = 0, ema_val_acc = 0;
  bool operator==(const EpochMetrics&) const = default;
};

inline constexpr const char* kMetricsHeader = "epoch,lr,train_loss,val_acc,ema_val_acc";
std::string format_metrics_row(const EpochMetrics& m);
std::string format_metrics_csv(const std::vector<EpochMetrics>& rows);
std::vector<EpochMetrics> parse_metrics_csv(const std::string& text);

struct TrainOptions {
  /// Receives metrics.csv, last.ckpt, best.ckpt and final.ckpt.
  std::filesystem::path out_dir;
  /// Continue from this checkpoint; earlier metrics rows are kept from
  /// out_dir/metrics.csv.
  std::optional<std::filesystem::path> resume_from;
  /// Stop after this many epochs of this invocation (simulated interruption).
  std::optional<std::size_t> stop_after;
  std::function<void(const EpochMetrics&)> on_epoch;
};

struct TrainResult {
  std::vector<EpochMetrics> history;
  bool completed = false;
};

/// Runs the recipe. All randomness is drawn from `rng`, whose state is saved
/// in every checkpoint.
/// Throws NumericError naming the epoch and batch on a non-finite loss.
TrainResult train(Model& model, const data::Dataset& train_set, const data::Dataset& val_set, const Recipe& recipe,
                  Rng& rng, const TrainOptions& options);

/// Eval-mode logits for the whole dataset using the evaluation transform.
Tensor predict(const Model& model, const data::Dataset& dataset, const data::Normalization& norm, double crop,
               std::size_t batch);
/// 100 * fraction of images whose argmax posterior equals the label.
double accuracy(const Model& model, const data::Dataset& dataset, const data::Normalization& norm, double crop,
                std::size_t batch);

}  // namespace csmx::training
