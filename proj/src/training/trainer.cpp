#include "csmx/trainer.h"

#include <cmath>
#include <cstdio>
#include <fstream>
#include <numeric>
#include <sstream>

#include "csmx/checkpoint.h"

namespace csmx::training {

SchedulePlan Recipe::schedule() const {
  SchedulePlan p;
  p.warmup_epochs = warmup_epochs;
  p.cooldown_epochs = cooldown_epochs;
  p.total_epochs = epochs;
  p.base_lr = base_lr;
  p.warmup_lr = warmup_lr;
  p.min_lr = min_lr;
  p.cooldown_lr = cooldown_lr;
  return p;
}

std::string Recipe::to_text() const {
  std::ostringstream os;
  os.precision(17);
  os << "epochs=" << epochs << "\nbatch=" << batch << "\nbase_lr=" << base_lr << "\nwarmup_lr=" << warmup_lr
     << "\nmin_lr=" << min_lr << "\ncooldown_lr=" << cooldown_lr << "\nwarmup_epochs=" << warmup_epochs
     << "\ncooldown_epochs=" << cooldown_epochs << "\nbeta1=" << adamw.beta1 << "\nbeta2=" << adamw.beta2
     << "\nadam_eps=" << adamw.eps << "\nweight_decay=" << adamw.weight_decay << "\nema_decay=" << ema_decay
     << "\ngrad_clip=" << (grad_clip ? std::to_string(*grad_clip) : std::string("none"))
     << "\nnorm_mean=" << norm.mean[0] << ',' << norm.mean[1] << ',' << norm.mean[2] << "\nnorm_std=" << norm.std[0]
     << ',' << norm.std[1] << ',' << norm.std[2] << "\neval_crop=" << eval_crop << "\nflip=" << (flip ? 1 : 0)
     << "\ncrop_pad=" << crop_pad << "\neval_batch=" << eval_batch << '\n';
  return os.str();
}

std::string format_metrics_row(const EpochMetrics& m) {
  char buf[160];
  std::snprintf(buf, sizeof buf, "%zu,%.17g,%.17g,%.17g,%.17g", m.epoch, m.lr, m.train_loss, m.val_acc, m.ema_val_acc);
  return buf;
}

std::string format_metrics_csv(const std::vector<EpochMetrics>& rows) {
  std::string out = std::string(kMetricsHeader) + "\n";
  for (const auto& r : rows) out += format_metrics_row(r) + "\n";
  return out;
}

std::vector<EpochMetrics> parse_metrics_csv(const std::string& text) {
  std::istringstream is(text);
  std::string line;
  std::vector<EpochMetrics> rows;
  if (!std::getline(is, line) || line != kMetricsHeader) throw data::DataError("metrics CSV: unexpected header");
  while (std::getline(is, line)) {
    if (line.empty()) continue;
    EpochMetrics m;
    if (std::sscanf(line.c_str(), "%zu,%lf,%lf,%lf,%lf", &m.epoch, &m.lr, &m.train_loss, &m.val_acc,
                    &m.ema_val_acc) != 5) {
      throw data::DataError("metrics CSV: malformed row '" + line + "'");
    }
    rows.push_back(m);
  }
  return rows;
}

namespace {

void write_text(const std::filesystem::path& path, const std::string& text) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  out << text;
  if (!out) throw std::runtime_error("cannot write " + path.string());
}

}  // namespace

Tensor predict(const Model& model, const data::Dataset& dataset, const data::Normalization& norm, double crop,
               std::size_t batch) {
  if (dataset.empty()) throw std::invalid_argument("predict: empty dataset");
  const std::size_t k = model.config().num_classes;
  Tensor logits({dataset.size(), k});
  auto out = logits.mutable_data();
  for (std::size_t begin = 0; begin < dataset.size(); begin += batch) {
    const std::size_t end = std::min(begin + batch, dataset.size());
    std::vector<Tensor> images;
    for (std::size_t i = begin; i < end; ++i) images.push_back(data::eval_transform(dataset.items[i], norm, crop));
    Tensor y = forward(model, data::stack(images));
    std::copy(y.data().begin(), y.data().end(), out.begin() + static_cast<std::ptrdiff_t>(begin * k));
  }
  return logits;
}

double accuracy(const Model& model, const data::Dataset& dataset, const data::Normalization& norm, double crop,
                std::size_t batch) {
  if (dataset.empty()) throw std::invalid_argument("accuracy: empty dataset");
  std::vector<int> labels;
  for (const auto& item : dataset.items) labels.push_back(item.label);
  return accuracy_from_logits(predict(model, dataset, norm, crop, batch), labels);
}

TrainResult train(Model& model, const data::Dataset& train_set, const data::Dataset& val_set, const Recipe& recipe,
                  Rng& rng, const TrainOptions& options) {
  const ModelConfig& cfg = model.config();
  for (const auto* ds : {&train_set, &val_set}) {
    if (ds->height != cfg.image_h || ds->width != cfg.image_w) {
      throw data::DataError("dataset images are " + std::to_string(ds->height) + "x" + std::to_string(ds->width) +
                            " but the model expects " + std::to_string(cfg.image_h) + "x" + std::to_string(cfg.image_w));
    }
    if (ds->num_classes > cfg.num_classes) {
      throw data::DataError("dataset has " + std::to_string(ds->num_classes) + " classes, model has " +
                            std::to_string(cfg.num_classes));
    }
  }
  if (train_set.empty() || val_set.empty()) throw data::DataError("training and validation sets must be non-empty");
  if (recipe.batch == 0) throw std::invalid_argument("train: batch must be > 0");
  const SchedulePlan plan = recipe.schedule();
  plan.validate();
  std::filesystem::create_directories(options.out_dir);

  const auto params = model.parameters();
  OptimizerState opt = OptimizerState::init(params, recipe.adamw);
  EmaState ema = EmaState::init(params, recipe.ema_decay);
  TrainResult result;
  std::size_t start_epoch = 0;
  if (options.resume_from) {
    const data::Checkpoint ck = data::load_checkpoint(*options.resume_from);
    if (!(ck.config == cfg)) throw data::CheckpointError("resume: checkpoint config differs from the model config");
    if (!ck.ema || !ck.optimizer || ck.rng_state.empty()) {
      throw data::CheckpointError("resume: checkpoint lacks optimizer, EMA or RNG state");
    }
    data::restore_parameters(model, ck.params);
    ema = data::restore_ema(model, *ck.ema);
    opt = data::restore_optimizer(model, *ck.optimizer);
    rng.restore(ck.rng_state);
    start_epoch = static_cast<std::size_t>(ck.epoch);
    const auto metrics_path = options.out_dir / "metrics.csv";
    if (std::filesystem::exists(metrics_path)) {
      std::ifstream in(metrics_path);
      std::stringstream ss;
      ss << in.rdbuf();
      for (const auto& row : parse_metrics_csv(ss.str())) {
        if (row.epoch < start_epoch) result.history.push_back(row);
      }
    }
  }
  double best = -1.0;
  for (const auto& row : result.history) best = std::max(best, row.val_acc);

  model.set_requires_grad(true);
  const std::size_t k = cfg.num_classes;
  std::vector<std::size_t> order(train_set.size());
  std::size_t epochs_this_run = 0;
  for (std::size_t epoch = start_epoch; epoch < recipe.epochs; ++epoch) {
    const double lr = lr_at(epoch, plan);
    std::iota(order.begin(), order.end(), std::size_t{0});
    for (std::size_t i = order.size(); i > 1; --i) std::swap(order[i - 1], order[rng.below(i)]);

    double loss_sum = 0.0;
    std::size_t batch_index = 0;
    for (std::size_t begin = 0; begin < order.size(); begin += recipe.batch, ++batch_index) {
      const std::size_t end = std::min(begin + recipe.batch, order.size());
      std::vector<Tensor> images;
      std::vector<int> labels;
      for (std::size_t i = begin; i < end; ++i) {
        const auto& item = train_set.items[order[i]];
        images.push_back(data::normalize(data::augment(item, rng, recipe.flip, recipe.crop_pad), recipe.norm));
        labels.push_back(item.label);
      }
      Tape tape;
      double loss_value;
      {
        TapeScope scope(tape);
        Tensor logits = forward(model, data::stack(images), ForwardOptions{true, &rng});
        Tensor loss = cross_entropy(logits, one_hot(labels, k));
        loss_value = loss.item();
        if (!std::isfinite(loss_value)) {
          throw NumericError("non-finite loss at epoch " + std::to_string(epoch) + ", batch " +
                             std::to_string(batch_index));
        }
        model.zero_grad();
        tape.backward(loss);
      }
      tape.clear();
      if (recipe.grad_clip) clip_grad_norm(params, *recipe.grad_clip);
      adamw_step(params, opt, lr);
      ema.update(params);
      loss_sum += loss_value * static_cast<double>(end - begin);
    }

    EpochMetrics m;
    m.epoch = epoch;
    m.lr = lr;
    m.train_loss = loss_sum / static_cast<double>(order.size());
    m.val_acc = accuracy(model, val_set, recipe.norm, recipe.eval_crop, recipe.eval_batch);
    ema.swap_into(params);
    m.ema_val_acc = accuracy(model, val_set, recipe.norm, recipe.eval_crop, recipe.eval_batch);
    ema.swap_into(params);
    result.history.push_back(m);
    if (options.on_epoch) options.on_epoch(m);

    write_text(options.out_dir / "metrics.csv", format_metrics_csv(result.history));
    const data::Checkpoint ck = data::capture(model, &ema, &opt, &rng, epoch + 1);
    data::save_checkpoint(options.out_dir / "last.ckpt", ck);
    if (m.val_acc > best) {
      best = m.val_acc;
      data::save_checkpoint(options.out_dir / "best.ckpt", ck);
    }
    ++epochs_this_run;
    if (options.stop_after && epochs_this_run >= *options.stop_after && epoch + 1 < recipe.epochs) return result;
  }
  model.set_requires_grad(false);
  model.zero_grad();
  std::filesystem::copy_file(options.out_dir / "last.ckpt", options.out_dir / "final.ckpt",
                             std::filesystem::copy_options::overwrite_existing);
  result.completed = true;
  return result;
}

}  // namespace csmx::training
