#include "csmx/profiler.h"

#include <cmath>
#include <cstdio>
#include <sstream>

#include "csmx/model.h"

namespace csmx::profiler {

std::uint64_t conv_params(std::uint64_t k, std::uint64_t cin, std::uint64_t cout) { return k * k * cin * cout + cout; }

std::uint64_t token_mixer_params(std::uint64_t c, std::uint64_t d, std::uint64_t heads, std::uint64_t tokens) {
  const std::uint64_t ld = tokens * d;
  return 2 * c * c + 2 * c + heads * (2 * c * d + c + d) + heads * (ld * ld + ld);
}

std::uint64_t channel_mlp_params(std::uint64_t c, std::size_t affine_layers) {
  std::uint64_t n = 8 * c * c + 5 * c;
  if (affine_layers == 3) n += 16 * c * c + 4 * c;
  return n;
}

namespace {

void add_conv_rows(CostReport& r, const std::string& prefix, std::uint64_t cin, std::uint64_t h_out,
                   std::uint64_t w_out, const std::vector<std::pair<std::uint64_t, std::uint64_t>>& kernels_cout) {
  for (auto [k, cout] : kernels_cout) {
    r.rows.push_back({"conv", prefix + ".k" + std::to_string(k), conv_params(k, cin, cout),
                      h_out * w_out * k * k * cin * cout});
  }
}

}  // namespace

CostReport count_costs(const ModelConfig& config) {
  const auto plans = plan_stages(config);
  CostReport r;
  r.config = config;
  const std::uint64_t c0 = config.base_dim;
  std::vector<std::pair<std::uint64_t, std::uint64_t>> embed;
  for (std::size_t b = 0; b < kEmbedKernels.size(); ++b) embed.emplace_back(kEmbedKernels[b], c0 / kEmbedShareDivisors[b]);
  add_conv_rows(r, "embed", config.in_channels, plans[0].h, plans[0].w, embed);

  for (const auto& plan : plans) {
    const std::uint64_t c = plan.channels, d = config.rank, m = plan.heads, L = plan.tokens_per_group();
    const std::uint64_t positions = plan.h * plan.w, groups = plan.groups();
    const std::string stage = "stage" + std::to_string(plan.index + 1);
    if (plan.index > 0) {
      const std::uint64_t cin = plans[plan.index - 1].channels;
      add_conv_rows(r, "merge" + std::to_string(plan.index), cin, plan.h, plan.w,
                    {{kMergeKernels[0], cin}, {kMergeKernels[1], cin}});
    }
    for (std::size_t l = 0; l < plan.layers.size(); ++l) {
      const std::string prefix = stage + ".layer" + std::to_string(l);
      r.rows.push_back({"norms", prefix + ".norms", 4 * c, 0});
      // W_u and W_o per position, W_v and its reverse projection per head,
      // and the dense (L*d)^2 map once per group and head.
      const std::uint64_t mixer_macs = positions * (2 * c * c + 2 * m * c * d) + groups * m * (L * d) * (L * d);
      r.rows.push_back({"token_mixer", prefix + ".token_mixer", token_mixer_params(c, d, m, L), mixer_macs});
      const std::uint64_t mlp_macs = positions * (config.mlp_affine_layers == 3 ? 24 * c * c : 8 * c * c);
      r.rows.push_back({"channel_mlp", prefix + ".mlp", channel_mlp_params(c, config.mlp_affine_layers), mlp_macs});
    }
  }
  const std::uint64_t c_last = plans.back().channels, k = config.num_classes;
  r.rows.push_back({"head", "head", c_last * k + k, c_last * k});
  for (const auto& row : r.rows) {
    r.total_params += row.params;
    r.total_macs += row.macs;
  }
  return r;
}

const std::vector<ReferenceSize>& reference_sizes() {
  static const std::vector<ReferenceSize> sizes{
      {"T", 25.4, 2.4}, {"S", 32.2, 4.2}, {"B", 55.9, 7.8}, {"L", 94.2, 13.7}};
  return sizes;
}

double relative_error(double computed, double reference) { return std::abs(computed - reference) / reference; }

Audit audit_reference_sizes() {
  Audit audit;
  double best = INFINITY;
  for (std::size_t layers : {2u, 3u}) {
    std::vector<AuditRow> rows;
    double err_sum = 0;
    for (const auto& ref : reference_sizes()) {
      ModelConfig cfg = ModelConfig::preset(ref.variant);
      cfg.mlp_affine_layers = layers;
      const CostReport rep = count_costs(cfg);
      AuditRow row;
      row.variant = ref.variant;
      row.params_m = static_cast<double>(rep.total_params) / 1e6;
      row.reference_params_m = ref.params_m;
      row.params_rel_err = relative_error(row.params_m, ref.params_m);
      row.gflops = static_cast<double>(rep.total_macs) / 1e9;
      row.reference_gflops = ref.gflops;
      row.gflops_rel_err = relative_error(row.gflops, ref.gflops);
      err_sum += row.params_rel_err;
      rows.push_back(row);
    }
    const double mean_err = err_sum / static_cast<double>(rows.size());
    audit.interpretation_errors.emplace_back(layers, mean_err);
    if (mean_err < best) {
      best = mean_err;
      audit.mlp_affine_layers = layers;
      audit.rows = std::move(rows);
    }
  }
  return audit;
}

std::string format_report(const CostReport& report) {
  std::ostringstream os;
  char line[256];
  std::snprintf(line, sizeof line, "%-12s %-34s %14s %16s\n", "layer", "path", "params", "macs");
  os << line;
  for (const auto& row : report.rows) {
    std::snprintf(line, sizeof line, "%-12s %-34s %14llu %16llu\n", row.layer.c_str(), row.path.c_str(),
                  static_cast<unsigned long long>(row.params), static_cast<unsigned long long>(row.macs));
    os << line;
  }
  std::snprintf(line, sizeof line, "%-12s %-34s %14llu %16llu\n", "total", "",
                static_cast<unsigned long long>(report.total_params),
                static_cast<unsigned long long>(report.total_macs));
  os << line;
  std::snprintf(line, sizeof line, "params %.3f M, GFLOPs (MACs) %.3f\n",
                static_cast<double>(report.total_params) / 1e6, static_cast<double>(report.total_macs) / 1e9);
  os << line;
  return os.str();
}

std::string format_csv(const CostReport& report) {
  std::ostringstream os;
  os << "layer,path,params,macs\n";
  for (const auto& row : report.rows) os << row.layer << ',' << row.path << ',' << row.params << ',' << row.macs << '\n';
  os << "total,," << report.total_params << ',' << report.total_macs << '\n';
  return os.str();
}

std::string format_audit(const Audit& audit) {
  std::ostringstream os;
  char line[256];
  for (auto [layers, err] : audit.interpretation_errors) {
    std::snprintf(line, sizeof line, "channel MLP with %zu affine layers: mean param rel. err %.4f\n", layers, err);
    os << line;
  }
  os << "chosen: " << audit.mlp_affine_layers << " affine layers\n";
  std::snprintf(line, sizeof line, "%-7s %10s %10s %9s %6s %9s %9s %9s %6s\n", "variant", "params(M)", "ref(M)",
                "rel_err", "", "GFLOPs", "ref", "rel_err", "");
  os << line;
  for (const auto& r : audit.rows) {
    std::snprintf(line, sizeof line, "%-7s %10.3f %10.1f %9.4f %6s %9.3f %9.1f %9.4f %6s\n", r.variant.c_str(),
                  r.params_m, r.reference_params_m, r.params_rel_err, r.params_rel_err <= kParamTolerance ? "PASS" : "FAIL",
                  r.gflops, r.reference_gflops, r.gflops_rel_err, r.gflops_rel_err <= kFlopTolerance ? "PASS" : "FAIL");
    os << line;
  }
  return os.str();
}

}  // namespace csmx::profiler
