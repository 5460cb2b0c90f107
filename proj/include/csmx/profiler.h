#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "csmx/config.h"

namespace csmx::profiler {

struct CostRow {
  std::string layer;  // kind: conv, token_mixer, channel_mlp, norms, head
  std::string path;   // e.g. "stage3.layer5.token_mixer"
  std::uint64_t params = 0;
  std::uint64_t macs = 0;
};

/// Closed-form per-layer cost of a configuration. One MAC is reported as
/// one FLOP. Only matrix products and convolutions count as MACs.
struct CostReport {
  ModelConfig config;
  std::vector<CostRow> rows;
  std::uint64_t total_params = 0;
  std::uint64_t total_macs = 0;
};

CostReport count_costs(const ModelConfig& config);
/// Same report; kept as separate entry points for the two columns.
inline CostReport count_params(const ModelConfig& config) { return count_costs(config); }
inline CostReport count_macs(const ModelConfig& config) { return count_costs(config); }

/// Closed forms shared by count_costs and tests.
std::uint64_t conv_params(std::uint64_t k, std::uint64_t cin, std::uint64_t cout);
std::uint64_t token_mixer_params(std::uint64_t c, std::uint64_t d, std::uint64_t heads, std::uint64_t tokens);
std::uint64_t channel_mlp_params(std::uint64_t c, std::size_t affine_layers);

/// Reference parameter and MAC totals for the four variants.
struct ReferenceSize {
  std::string variant;
  double params_m;
  double gflops;
};
const std::vector<ReferenceSize>& reference_sizes();

struct AuditRow {
  std::string variant;
  double params_m = 0, reference_params_m = 0, params_rel_err = 0;
  double gflops = 0, reference_gflops = 0, gflops_rel_err = 0;
};

struct Audit {
  std::size_t mlp_affine_layers = 2;  // interpretation with lowest mean param error
  std::vector<AuditRow> rows;         // under the chosen interpretation
  /// Mean relative param error for each interpretation tried, as
  /// (affine layers, mean error).
  std::vector<std::pair<std::size_t, double>> interpretation_errors;
};

inline constexpr double kParamTolerance = 0.05;
inline constexpr double kFlopTolerance = 0.10;

double relative_error(double computed, double reference);
Audit audit_reference_sizes();

std::string format_report(const CostReport& report);
std::string format_csv(const CostReport& report);
std::string format_audit(const Audit& audit);

}  // namespace csmx::profiler
