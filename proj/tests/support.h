#pragma once

#include <algorithm>
#include <cmath>
#include <functional>
#include <vector>

#include "csmx/ops.h"
#include "csmx/rng.h"
#include "csmx/tensor.h"

namespace csmx::test {

inline Tensor random_tensor(const Shape& shape, Rng& rng, double lo = -1.0, double hi = 1.0) {
  Tensor t(shape);
  for (auto& v : t.mutable_data()) v = lo + (hi - lo) * rng.uniform();
  return t;
}

inline std::size_t random_extent(Rng& rng, std::size_t lo, std::size_t hi) {
  return lo + static_cast<std::size_t>(rng.below(hi - lo + 1));
}

inline double max_abs_diff(std::span<const double> a, std::span<const double> b) {
  double m = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) m = std::max(m, std::abs(a[i] - b[i]));
  return m;
}

using Fn = std::function<Tensor(const std::vector<Tensor>&)>;

/// Worst normwise relative error max|a - n| / max(max|a|, max|n|) over the
/// inputs, where the scalar loss is sum(f(inputs) * w) for a fixed random w
/// and n comes from central differences with `step`.
inline double fd_gradient_error(const Fn& f, std::vector<Tensor> inputs, Rng& rng, double step = 1e-5) {
  for (auto& t : inputs) t.set_requires_grad(true);
  Tensor weights;
  {
    Tape tape;
    TapeScope scope(tape);
    Tensor out = f(inputs);
    weights = random_tensor(out.shape(), rng);
    tape.backward(ops::sum(ops::mul(out, weights)));
  }
  auto loss = [&] {
    const Tensor out = f(inputs);
    double s = 0.0;
    for (std::size_t i = 0; i < out.numel(); ++i) s += out[i] * weights[i];
    return s;
  };
  double worst = 0.0;
  for (auto& t : inputs) {
    std::vector<double> numeric(t.numel());
    for (std::size_t j = 0; j < t.numel(); ++j) {
      const double saved = t[j];
      t.mutable_data()[j] = saved + step;
      const double plus = loss();
      t.mutable_data()[j] = saved - step;
      const double minus = loss();
      t.mutable_data()[j] = saved;
      numeric[j] = (plus - minus) / (2.0 * step);
    }
    std::vector<double> analytic(t.numel(), 0.0);
    if (t.has_grad()) std::copy(t.grad().begin(), t.grad().end(), analytic.begin());
    double scale = 0.0;
    for (std::size_t j = 0; j < t.numel(); ++j) scale = std::max({scale, std::abs(analytic[j]), std::abs(numeric[j])});
    if (scale > 0.0) worst = std::max(worst, max_abs_diff(analytic, numeric) / scale);
  }
  return worst;
}

}  // namespace csmx::test
