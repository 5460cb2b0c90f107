#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "csmx/model.h"
#include "csmx/rng.h"

namespace csmx::training {

struct GradCheckOptions {
  std::size_t samples = 200;  // scalar parameters compared
  std::size_t batch = 2;      // random images in [-1, 1]
  double step = 1e-3;         // central-difference step
  /// Richardson extrapolation (4 D(h/2) - D(h)) / 3 of two central
  /// differences: O(h^4) truncation, so a larger step keeps roundoff small.
  bool extrapolate = true;
  /// When > 0, parameters are redrawn uniformly from [-scale, scale] (norm
  /// gains around 1) so gradients are far from the finite-difference noise
  /// floor; a freshly initialized model has many near-zero gradients.
  double param_scale = 0.2;
};

struct GradCheckEntry {
  std::string param;
  std::size_t index = 0;
  double analytic = 0, numeric = 0, rel_err = 0;
};

struct GradCheckReport {
  std::vector<GradCheckEntry> entries;
  double max_rel_err = 0;
  std::string worst_param;
  bool finite = true;
  std::string nonfinite_param;  // first parameter with a non-finite value
};

/// |a - n| / max(|a|, |n|); 0 when both are 0.
double gradient_rel_err(double analytic, double numeric);

/// Compares backward() against central finite differences of the
/// cross-entropy loss on a random batch with random labels, in eval mode.
/// Every parameter tensor is sampled at least once when samples allow.
GradCheckReport gradient_check(Model& model, const GradCheckOptions& options, Rng& rng);

}  // namespace csmx::training
