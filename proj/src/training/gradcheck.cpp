#include "csmx/gradcheck.h"

#include <cmath>

#include "csmx/training.h"

namespace csmx::training {

double gradient_rel_err(double analytic, double numeric) {
  const double scale = std::max(std::abs(analytic), std::abs(numeric));
  return scale == 0.0 ? 0.0 : std::abs(analytic - numeric) / scale;
}

GradCheckReport gradient_check(Model& model, const GradCheckOptions& options, Rng& rng) {
  const ModelConfig& cfg = model.config();
  const auto params = model.parameters();
  if (options.param_scale > 0.0) {
    for (const auto& p : params) {
      Tensor t = p.tensor;
      const double center = p.init == Init::Ones ? 1.0 : 0.0;
      for (auto& v : t.mutable_data()) v = center + options.param_scale * (2.0 * rng.uniform() - 1.0);
    }
  }
  Tensor images({options.batch, cfg.image_h, cfg.image_w, cfg.in_channels});
  for (auto& v : images.mutable_data()) v = 2.0 * rng.uniform() - 1.0;
  std::vector<int> labels(options.batch);
  for (auto& l : labels) l = static_cast<int>(rng.below(cfg.num_classes));
  const Tensor targets = one_hot(labels, cfg.num_classes);

  auto loss_value = [&] { return cross_entropy(forward(model, images), targets).item(); };

  model.set_requires_grad(true);
  model.zero_grad();
  {
    Tape tape;
    TapeScope scope(tape);
    Tensor loss = cross_entropy(forward(model, images), targets);
    tape.backward(loss);
  }

  // Sample (tensor, index) pairs: one per tensor first, the rest by scalar.
  std::vector<std::pair<std::size_t, std::size_t>> picks;
  std::size_t total = 0;
  for (const auto& p : params) total += p.tensor.numel();
  for (std::size_t i = 0; i < params.size() && picks.size() < options.samples; ++i) {
    picks.emplace_back(i, static_cast<std::size_t>(rng.below(params[i].tensor.numel())));
  }
  while (picks.size() < options.samples) {
    std::uint64_t flat = rng.below(total);
    std::size_t i = 0;
    while (flat >= params[i].tensor.numel()) flat -= params[i].tensor.numel(), ++i;
    picks.emplace_back(i, static_cast<std::size_t>(flat));
  }

  GradCheckReport report;
  for (auto [i, j] : picks) {
    Tensor t = params[i].tensor;
    const double analytic = t.has_grad() ? t.grad()[j] : 0.0;
    const double saved = t[j];
    auto central = [&](double h) {
      t.mutable_data()[j] = saved + h;
      const double plus = loss_value();
      t.mutable_data()[j] = saved - h;
      const double minus = loss_value();
      t.mutable_data()[j] = saved;
      return (plus - minus) / (2.0 * h);
    };
    const double coarse = central(options.step);
    const double numeric = options.extrapolate ? (4.0 * central(options.step / 2) - coarse) / 3.0 : coarse;
    GradCheckEntry e{params[i].name, j, analytic, numeric, gradient_rel_err(analytic, numeric)};
    if (!std::isfinite(analytic) || !std::isfinite(numeric)) {
      if (report.finite) report.nonfinite_param = e.param;
      report.finite = false;
    }
    if (e.rel_err > report.max_rel_err || !std::isfinite(e.rel_err)) {
      report.max_rel_err = e.rel_err;
      report.worst_param = e.param;
    }
    report.entries.push_back(std::move(e));
  }
  model.set_requires_grad(false);
  model.zero_grad();
  return report;
}

}  // namespace csmx::training
