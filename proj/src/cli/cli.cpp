#include "csmx/cli.h"

#include <CLI11.hpp>

#include <cstdio>
#include <cstdlib>
#include <fstream>
#include <iostream>
#include <sstream>

#include "csmx/checkpoint.h"
#include "csmx/gradcheck.h"
#include "csmx/profiler.h"
#include "csmx/weight_grid.h"

namespace csmx::cli {

namespace fs = std::filesystem;
using Entries = std::vector<std::pair<std::string, std::string>>;

namespace {

std::string trim(const std::string& s) {
  const auto b = s.find_first_not_of(" \t\r");
  if (b == std::string::npos) return "";
  return s.substr(b, s.find_last_not_of(" \t\r") - b + 1);
}

double parse_real(const std::string& key, const std::string& v) {
  try {
    std::size_t used = 0;
    const double x = std::stod(v, &used);
    if (used == v.size()) return x;
  } catch (const std::exception&) {
  }
  throw ConfigError("key '" + key + "': expected a real, got '" + v + "'");
}

std::uint64_t parse_count(const std::string& key, const std::string& v) {
  if (!v.empty() && v.find_first_not_of("0123456789") == std::string::npos) {
    try {
      return std::stoull(v);
    } catch (const std::exception&) {
    }
  }
  throw ConfigError("key '" + key + "': expected a non-negative integer, got '" + v + "'");
}

bool parse_bool(const std::string& key, const std::string& v) {
  if (v == "1" || v == "true") return true;
  if (v == "0" || v == "false") return false;
  throw ConfigError("key '" + key + "': expected 0/1, got '" + v + "'");
}

std::array<double, 3> parse_triple(const std::string& key, const std::string& v) {
  std::array<double, 3> out{};
  std::istringstream is(v);
  std::string part;
  std::size_t i = 0;
  while (std::getline(is, part, ',')) {
    if (i == 3) break;
    out[i++] = parse_real(key, trim(part));
  }
  if (i != 3 || std::getline(is, part)) throw ConfigError("key '" + key + "': expected three comma-separated reals");
  return out;
}

std::string read_file(const fs::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw data::DataError("cannot open " + path.string());
  std::ostringstream os;
  os << in.rdbuf();
  return os.str();
}

void write_file(const fs::path& path, const std::string& text) {
  if (path.has_parent_path()) fs::create_directories(path.parent_path());
  std::ofstream out(path, std::ios::binary);
  out << text;
  if (!out) throw data::DataError("cannot write " + path.string());
}

std::uint64_t default_seed() {
  const char* env = std::getenv("CSMX_SEED");
  if (!env || !*env) return 0;
  return parse_count("CSMX_SEED", env);
}

}  // namespace

training::Recipe desk_recipe() {
  training::Recipe r;
  r.epochs = 20;
  r.batch = 32;
  r.base_lr = 2e-3;
  r.warmup_epochs = 1;
  r.ema_decay = 0.99;
  return r;
}

std::string RunSpec::to_text() const {
  std::ostringstream os;
  os << "command=" << command << "\nseed=" << seed << "\ndataset=" << dataset << "\ndata_dir=" << data_dir
     << "\ntrain_size=" << train_size << "\nval_size=" << val_size << "\ndata_seed=" << data_seed
     << "\nresize=" << (resize == data::Interpolation::Bilinear ? "bilinear" : "nearest")
     << "\nout=" << out_dir.string() << '\n';
  return os.str() + model.to_text() + recipe.to_text();
}

Entries parse_entries(const std::string& text) {
  Entries out;
  std::istringstream is(text);
  std::string line;
  std::size_t lineno = 0;
  while (std::getline(is, line)) {
    ++lineno;
    const auto hash = line.find('#');
    if (hash != std::string::npos) line.resize(hash);
    line = trim(line);
    if (line.empty()) continue;
    const auto eq = line.find('=');
    if (eq == std::string::npos) {
      throw ConfigError("line " + std::to_string(lineno) + ": expected key=value, got '" + line + "'");
    }
    out.emplace_back(trim(line.substr(0, eq)), trim(line.substr(eq + 1)));
  }
  return out;
}

void apply_entry(RunSpec& s, const std::string& raw_key, const std::string& raw_value) {
  const std::string key = trim(raw_key), v = trim(raw_value);
  auto& r = s.recipe;
  if (key == "command") {
    // Echoed by manifests; the invoked command wins.
  } else if (key == "seed") {
    s.seed = parse_count(key, v);
  } else if (key == "dataset") {
    if (v != "synthetic" && v != "cifar10") throw ConfigError("dataset must be 'synthetic' or 'cifar10', got '" + v + "'");
    s.dataset = v;
  } else if (key == "data_dir") {
    s.data_dir = v;
  } else if (key == "train_size") {
    s.train_size = parse_count(key, v);
  } else if (key == "val_size") {
    s.val_size = parse_count(key, v);
  } else if (key == "data_seed") {
    s.data_seed = parse_count(key, v);
  } else if (key == "resize") {
    if (v == "bilinear") s.resize = data::Interpolation::Bilinear;
    else if (v == "nearest") s.resize = data::Interpolation::Nearest;
    else throw ConfigError("resize must be 'bilinear' or 'nearest', got '" + v + "'");
  } else if (key == "out") {
    s.out_dir = v;
  } else if (key == "epochs") {
    r.epochs = parse_count(key, v);
  } else if (key == "batch") {
    r.batch = parse_count(key, v);
  } else if (key == "lr" || key == "base_lr") {
    r.base_lr = parse_real(key, v);
  } else if (key == "warmup_lr") {
    r.warmup_lr = parse_real(key, v);
  } else if (key == "min_lr") {
    r.min_lr = parse_real(key, v);
  } else if (key == "cooldown_lr") {
    r.cooldown_lr = parse_real(key, v);
  } else if (key == "warmup_epochs") {
    r.warmup_epochs = parse_count(key, v);
  } else if (key == "cooldown_epochs") {
    r.cooldown_epochs = parse_count(key, v);
  } else if (key == "beta1") {
    r.adamw.beta1 = parse_real(key, v);
  } else if (key == "beta2") {
    r.adamw.beta2 = parse_real(key, v);
  } else if (key == "adam_eps") {
    r.adamw.eps = parse_real(key, v);
  } else if (key == "weight_decay") {
    r.adamw.weight_decay = parse_real(key, v);
  } else if (key == "ema_decay") {
    r.ema_decay = parse_real(key, v);
  } else if (key == "grad_clip") {
    if (v == "none") r.grad_clip.reset();
    else r.grad_clip = parse_real(key, v);
  } else if (key == "norm_mean") {
    r.norm.mean = parse_triple(key, v);
  } else if (key == "norm_std") {
    r.norm.std = parse_triple(key, v);
  } else if (key == "eval_crop") {
    r.eval_crop = parse_real(key, v);
  } else if (key == "flip") {
    r.flip = parse_bool(key, v);
  } else if (key == "crop_pad") {
    r.crop_pad = parse_count(key, v);
  } else if (key == "eval_batch") {
    r.eval_batch = parse_count(key, v);
  } else {
    apply_config_entry(s.model, key, v);
  }
}

Splits load_splits(const RunSpec& s) {
  const ModelConfig& m = s.model;
  if (s.train_size == 0 && s.val_size == 0) throw data::DataError("dataset is empty (train_size = val_size = 0)");
  Splits out;
  if (s.dataset == "synthetic") {
    const auto all = data::synth_dataset(s.train_size + s.val_size, m.num_classes, m.image_h, m.image_w, s.data_seed);
    out.train = all.slice(0, s.train_size);
    out.val = all.slice(s.train_size, s.train_size + s.val_size);
  } else {
    if (s.data_dir.empty()) throw data::DataError("dataset=cifar10 needs data_dir");
    if (m.num_classes != data::kCifarClasses) {
      throw data::DataError("CIFAR-10 has 10 classes but the model has K=" + std::to_string(m.num_classes));
    }
    const fs::path dir = s.data_dir;
    data::Dataset train{data::kCifarSide, data::kCifarSide, data::kCifarClasses, {}};
    for (int b = 1; b <= 5 && train.size() < s.train_size; ++b) {
      auto part = data::load_cifar10(dir / ("data_batch_" + std::to_string(b) + ".bin"));
      std::move(part.items.begin(), part.items.end(), std::back_inserter(train.items));
    }
    out.train = train.slice(0, s.train_size);
    out.val = s.val_size ? data::load_cifar10(dir / "test_batch.bin").slice(0, s.val_size)
                         : data::Dataset{data::kCifarSide, data::kCifarSide, data::kCifarClasses, {}};
    if (out.train.size() < s.train_size || out.val.size() < s.val_size) {
      throw data::DataError("CIFAR-10 files in " + dir.string() + " hold fewer images than requested");
    }
    for (data::Dataset* ds : {&out.train, &out.val}) {
      if (ds->height == m.image_h && ds->width == m.image_w) continue;
      for (auto& img : ds->items) img = data::resize(img, m.image_h, m.image_w, s.resize);
      ds->height = m.image_h;
      ds->width = m.image_w;
    }
  }
  out.train.validate();
  out.val.validate();
  return out;
}

namespace {

/// Shared options for commands that resolve a RunSpec.
struct SpecFlags {
  std::string variant;
  std::string config_path;
  std::vector<std::string> sets;
  std::optional<std::uint64_t> seed;
  std::string out;
  // Direct overrides, applied last.
  std::optional<std::size_t> g, d, image_size, epochs, batch, classes;
  std::string depths, heads;
  std::optional<double> lr;
  std::string dataset, data_dir;
  std::optional<std::size_t> train_size, val_size;

  void add_model(CLI::App* app) {
    app->add_option("--variant", variant, "Reference size T, S, B or L (default: tiny config)");
    app->add_option("--config", config_path, "Flat key=value file (a run manifest is accepted)");
    app->add_option("--set", sets, "key=value override, repeatable");
    app->add_option("--g", g, "Group size");
    app->add_option("--d", d, "Rank of the mixing subspace");
    app->add_option("--depths", depths, "Layers per stage, e.g. 2,2,2,2");
    app->add_option("--heads", heads, "Heads per stage, e.g. 1,2,2,4");
    app->add_option("--image-size", image_size, "Square input side");
    app->add_option("--classes", classes, "Number of classes K");
  }
  void add_seed(CLI::App* app) { app->add_option("--seed", seed, "RNG seed (default: $CSMX_SEED, else 0)"); }
  void add_out(CLI::App* app, bool required) {
    auto* o = app->add_option("--out", out, "Output directory");
    if (required) o->required();
  }
  void add_data(CLI::App* app) {
    app->add_option("--dataset", dataset, "synthetic or cifar10");
    app->add_option("--data-dir", data_dir, "Directory with the CIFAR-10 .bin files");
    app->add_option("--train-size", train_size, "Training images");
    app->add_option("--val-size", val_size, "Validation images");
  }
  void add_recipe(CLI::App* app) {
    app->add_option("--epochs", epochs, "Training epochs");
    app->add_option("--batch", batch, "Batch size");
    app->add_option("--lr", lr, "Peak learning rate");
  }

  RunSpec resolve(const std::string& command, bool train_defaults) const {
    Entries entries;
    if (!config_path.empty()) entries = parse_entries(read_file(config_path));
    for (const auto& s : sets) {
      const auto eq = s.find('=');
      if (eq == std::string::npos) throw ConfigError("--set expects key=value, got '" + s + "'");
      entries.emplace_back(trim(s.substr(0, eq)), trim(s.substr(eq + 1)));
    }
    auto put = [&](const char* k, const std::string& v) { entries.emplace_back(k, v); };
    if (g) put("g", std::to_string(*g));
    if (d) put("d", std::to_string(*d));
    if (!depths.empty()) put("depths", depths);
    if (!heads.empty()) put("heads", heads);
    if (image_size) put("image_size", std::to_string(*image_size));
    if (classes) put("K", std::to_string(*classes));
    if (epochs) put("epochs", std::to_string(*epochs));
    if (batch) put("batch", std::to_string(*batch));
    if (lr) {
      char buf[40];
      std::snprintf(buf, sizeof buf, "%.17g", *lr);
      put("lr", buf);
    }
    if (!dataset.empty()) put("dataset", dataset);
    if (!data_dir.empty()) put("data_dir", data_dir);
    if (train_size) put("train_size", std::to_string(*train_size));
    if (val_size) put("val_size", std::to_string(*val_size));
    if (!out.empty()) put("out", out);

    RunSpec spec;
    spec.command = command;
    if (train_defaults) spec.recipe = desk_recipe();
    // The base model: --variant, else a reference variant named in the file.
    std::string base = variant;
    if (base.empty()) {
      for (const auto& [k, v] : entries) {
        if (k == "variant" && (v == "T" || v == "S" || v == "B" || v == "L")) base = v;
      }
    }
    if (!base.empty()) spec.model = ModelConfig::preset(base);
    bool classes_set = false;
    for (const auto& [k, v] : entries) {
      apply_entry(spec, k, v);
      classes_set |= (k == "K" || k == "num_classes");
    }
    if (spec.dataset == "cifar10" && !classes_set) spec.model.num_classes = data::kCifarClasses;
    spec.seed = seed ? *seed : default_seed();
    for (const auto& [k, v] : entries) {
      if (k == "seed" && !seed) spec.seed = parse_count(k, v);
    }
    spec.model.validate();
    return spec;
  }
};

void write_manifest(const RunSpec& spec, const std::string& name) {
  write_file(spec.out_dir / name, spec.to_text());
}

std::optional<profiler::ReferenceSize> reference_for(const ModelConfig& c) {
  if (!c.is_canonical()) return std::nullopt;
  for (const auto& p : profiler::reference_sizes()) {
    if (p.variant == c.variant) return p;
  }
  return std::nullopt;
}

std::string label_for(const ModelConfig& c) { return c.variant == "custom" ? "custom" : c.variant; }

int describe_one(const ModelConfig& config, const fs::path& out_dir, std::ostream& out) {
  const auto report = profiler::count_costs(config);
  out << profiler::format_report(report);
  const fs::path csv = out_dir / ("describe_" + label_for(config) + ".csv");
  write_file(csv, profiler::format_csv(report));
  out << "csv: " << csv.string() << '\n';
  const auto ref = reference_for(config);
  if (!ref) {
    out << "reference comparison: skipped (non-canonical configuration)\n";
    return kOk;
  }
  const double pe = profiler::relative_error(static_cast<double>(report.total_params) / 1e6, ref->params_m);
  const double fe = profiler::relative_error(static_cast<double>(report.total_macs) / 1e9, ref->gflops);
  const bool p_ok = pe <= profiler::kParamTolerance, f_ok = fe <= profiler::kFlopTolerance;
  char buf[256];
  std::snprintf(buf, sizeof buf,
                "reference comparison %s: params %.3fM vs %.1fM rel.err %.4f %s | MACs %.3fG vs %.1fG rel.err %.4f %s\n",
                ref->variant.c_str(), static_cast<double>(report.total_params) / 1e6, ref->params_m, pe,
                p_ok ? "PASS" : "FAIL", static_cast<double>(report.total_macs) / 1e9, ref->gflops, fe,
                f_ok ? "PASS" : "FAIL");
  out << buf;
  return p_ok && f_ok ? kOk : kAcceptanceFailed;
}

int cmd_describe(const SpecFlags& f, bool all, std::ostream& out) {
  if (all) {
    if (!f.variant.empty() || !f.config_path.empty() || !f.sets.empty()) {
      throw CLI::ValidationError("--all", "cannot be combined with --variant, --config or --set");
    }
    RunSpec spec = f.resolve("describe", false);
    spec.model = ModelConfig::preset("T");
    write_manifest(spec, "describe.manifest");
    for (const auto& p : profiler::reference_sizes()) {
      write_file(spec.out_dir / ("describe_" + p.variant + ".csv"),
                 profiler::format_csv(profiler::count_costs(ModelConfig::preset(p.variant))));
    }
    const auto audit = profiler::audit_reference_sizes();
    out << profiler::format_audit(audit);
    for (const auto& r : audit.rows) {
      if (r.params_rel_err > profiler::kParamTolerance || r.gflops_rel_err > profiler::kFlopTolerance) {
        return kAcceptanceFailed;
      }
    }
    return kOk;
  }
  if (f.variant.empty() && f.config_path.empty()) {
    throw CLI::ValidationError("describe", "needs --variant, --config or --all");
  }
  const RunSpec spec = f.resolve("describe", false);
  write_manifest(spec, "describe.manifest");
  return describe_one(spec.model, spec.out_dir, out);
}

int cmd_gradcheck(const SpecFlags& f, const training::GradCheckOptions& options, bool force, bool corrupt,
                  bool verbose, std::ostream& out) {
  const RunSpec spec = f.resolve("gradcheck", false);
  const auto count = profiler::count_costs(spec.model).total_params;
  if (count > 1'000'000 && !force) {
    throw CLI::ValidationError("gradcheck", "configuration has " + std::to_string(count) +
                                                " parameters (> 1M); pass --force to run anyway");
  }
  write_manifest(spec, "gradcheck.manifest");
  Rng rng(spec.seed);
  Model model = Model::build(spec.model, rng);
  testing::set_corrupt_gelu_backward(corrupt);
  training::GradCheckReport report;
  try {
    report = training::gradient_check(model, options, rng);
  } catch (...) {
    testing::set_corrupt_gelu_backward(false);
    throw;
  }
  testing::set_corrupt_gelu_backward(false);
  char buf[256];
  if (verbose) {
    for (const auto& e : report.entries) {
      std::snprintf(buf, sizeof buf, "%s[%zu] analytic=%.12e numeric=%.12e rel_err=%.3e\n", e.param.c_str(), e.index,
                    e.analytic, e.numeric, e.rel_err);
      out << buf;
    }
  }
  if (!report.finite) {
    out << "gradcheck: non-finite value in parameter " << report.nonfinite_param << '\n';
    return kNumericError;
  }
  const bool pass = report.max_rel_err < 1e-5;
  std::snprintf(buf, sizeof buf, "gradcheck: %zu parameters, max rel err %.3e (%s), threshold 1e-5: %s\n",
                report.entries.size(), report.max_rel_err, report.worst_param.c_str(), pass ? "PASS" : "FAIL");
  out << buf;
  return pass ? kOk : kAcceptanceFailed;
}

int cmd_train(const SpecFlags& f, bool resume, const std::string& resume_from, std::optional<std::size_t> stop_after,
              std::ostream& out) {
  const RunSpec spec = f.resolve("train", true);
  const Splits splits = load_splits(spec);
  if (splits.train.empty() || splits.val.empty()) throw data::DataError("train and validation sets must be non-empty");
  fs::create_directories(spec.out_dir);
  write_manifest(spec, "run.manifest");

  Rng rng(spec.seed);
  Model model = Model::build(spec.model, rng);
  training::TrainOptions options;
  options.out_dir = spec.out_dir;
  if (!resume_from.empty()) options.resume_from = fs::path(resume_from);
  else if (resume) options.resume_from = spec.out_dir / "last.ckpt";
  if (options.resume_from) {
    const auto ckpt = data::load_checkpoint(*options.resume_from);
    if (!(ckpt.config == spec.model)) {
      throw data::CheckpointError("checkpoint " + options.resume_from->string() +
                                  " was written for a different model configuration");
    }
  }
  options.stop_after = stop_after;
  options.on_epoch = [&out](const training::EpochMetrics& m) {
    char buf[160];
    std::snprintf(buf, sizeof buf, "epoch %zu lr %.3e loss %.6f val_acc %.2f ema_val_acc %.2f\n", m.epoch, m.lr,
                  m.train_loss, m.val_acc, m.ema_val_acc);
    out << buf << std::flush;
  };
  const auto result = training::train(model, splits.train, splits.val, spec.recipe, rng, options);
  if (!result.completed) {
    out << "stopped before the final epoch; continue with --resume\n";
    return kOk;
  }
  const auto grids = data::export_weight_grids(model, spec.out_dir / "weights");
  out << "final val_acc " << (result.history.empty() ? 0.0 : result.history.back().val_acc) << '\n'
      << "weight grids: " << grids.files.size() << " files in " << (spec.out_dir / "weights").string() << '\n';
  return kOk;
}

Model model_from_checkpoint(const data::Checkpoint& ckpt, bool ema) {
  Rng rng(0);
  Model model = Model::build(ckpt.config, rng);
  if (ema) {
    if (!ckpt.ema) throw data::CheckpointError("checkpoint has no EMA weights");
    data::restore_parameters(model, ckpt.ema->shadow);
  } else {
    data::restore_parameters(model, ckpt.params);
  }
  return model;
}

int cmd_eval(const SpecFlags& f, const std::string& checkpoint, bool ema, std::ostream& out) {
  RunSpec spec = f.resolve("eval", true);
  const auto ckpt = data::load_checkpoint(checkpoint);
  spec.model = ckpt.config;
  const Model model = model_from_checkpoint(ckpt, ema);
  const Splits splits = load_splits(spec);
  if (splits.val.empty()) throw data::DataError("evaluation set is empty");
  const double acc = training::accuracy(model, splits.val, spec.recipe.norm, spec.recipe.eval_crop,
                                        spec.recipe.eval_batch);
  char buf[96];
  std::snprintf(buf, sizeof buf, "accuracy %.17g\n", acc);
  out << (ema ? "weights ema\n" : "weights raw\n") << "images " << splits.val.size() << '\n' << buf;
  return kOk;
}

int cmd_export(const std::string& checkpoint, const std::string& out_dir, bool ema, std::ostream& out) {
  const auto ckpt = data::load_checkpoint(checkpoint);
  const Model model = model_from_checkpoint(ckpt, ema);
  const auto result = data::export_weight_grids(model, out_dir);
  for (const auto& file : result.files) out << file.string() << '\n';
  for (const auto& note : result.notes) out << "note: " << note << '\n';
  return kOk;
}

}  // namespace

int run(const std::vector<std::string>& args, std::ostream& out, std::ostream& err) {
  CLI::App app{"csmx: cross-scale spatial-channel mixer toolkit", "csmx"};
  app.require_subcommand(1);

  SpecFlags describe_f, grad_f, train_f, eval_f;
  bool all = false;
  auto* describe = app.add_subcommand("describe", "Per-layer parameter and MAC report");
  describe_f.add_model(describe);
  describe_f.add_out(describe, false);
  describe->add_flag("--all", all, "Audit all four reference sizes");

  training::GradCheckOptions gopts;
  bool force = false, corrupt = false, verbose = false;
  auto* grad = app.add_subcommand("gradcheck", "Analytic vs finite-difference gradients");
  grad_f.add_model(grad);
  grad_f.add_seed(grad);
  grad_f.add_out(grad, false);
  grad->add_option("--samples", gopts.samples, "Scalar parameters to compare")->check(CLI::Range(1, 1 << 30));
  grad->add_option("--batch", gopts.batch, "Random images per check")->check(CLI::Range(1, 1 << 16));
  grad->add_option("--param-scale", gopts.param_scale, "Redraw parameters from [-s, s] (0 keeps the init)");
  grad->add_option("--step", gopts.step, "Finite-difference step");
  grad->add_flag("!--no-extrapolate", gopts.extrapolate, "Plain central differences instead of Richardson");
  grad->add_flag("--force", force, "Allow configurations above 1M parameters");
  grad->add_flag("--verbose", verbose, "Print every compared entry");
  grad->add_flag("--corrupt-backward", corrupt)->group("");  // negative control

  bool resume = false;
  std::string resume_from;
  std::optional<std::size_t> stop_after;
  auto* train = app.add_subcommand("train", "Train and write metrics, checkpoints and weight grids");
  train_f.add_model(train);
  train_f.add_seed(train);
  train_f.add_out(train, true);
  train_f.add_data(train);
  train_f.add_recipe(train);
  train->add_flag("--resume", resume, "Continue from <out>/last.ckpt");
  train->add_option("--resume-from", resume_from, "Continue from this checkpoint");
  train->add_option("--stop-after", stop_after, "Stop after this many epochs (simulated interruption)");

  std::string checkpoint;
  bool ema = false;
  auto* eval = app.add_subcommand("eval", "Validation accuracy of a checkpoint");
  eval->add_option("--config", eval_f.config_path, "Run manifest or key=value file for dataset settings");
  eval->add_option("--set", eval_f.sets, "key=value override, repeatable");
  eval_f.add_out(eval, false);
  eval_f.add_data(eval);
  eval->add_option("--checkpoint", checkpoint, "Checkpoint file")->required();
  eval->add_flag("--ema", ema, "Use the EMA weights");

  std::string export_ckpt, export_out;
  bool export_ema = false;
  auto* exp = app.add_subcommand("export-weights", "Write spatial weight grids as CSV and PGM");
  exp->add_option("--checkpoint", export_ckpt, "Checkpoint file")->required();
  exp->add_option("--out", export_out, "Output directory")->required();
  exp->add_flag("--ema", export_ema, "Use the EMA weights");

  try {
    std::vector<std::string> reversed(args.rbegin(), args.rend());
    app.parse(reversed);
  } catch (const CLI::CallForHelp&) {
    out << app.help();
    return kOk;
  } catch (const CLI::CallForAllHelp&) {
    out << app.help("", CLI::AppFormatMode::All);
    return kOk;
  } catch (const CLI::ParseError& e) {
    err << "usage error: " << e.what() << '\n';
    return kUsage;
  }
  // Subcommand help is handled by CLI11 through the same exceptions above.

  try {
    if (describe->parsed()) return cmd_describe(describe_f, all, out);
    if (grad->parsed()) return cmd_gradcheck(grad_f, gopts, force, corrupt, verbose, out);
    if (train->parsed()) return cmd_train(train_f, resume, resume_from, stop_after, out);
    if (eval->parsed()) return cmd_eval(eval_f, checkpoint, ema, out);
    if (exp->parsed()) return cmd_export(export_ckpt, export_out, export_ema, out);
  } catch (const CLI::Error& e) {
    err << "usage error: " << e.what() << '\n';
    return kUsage;
  } catch (const ConfigError& e) {
    err << "config error: " << e.what() << '\n';
    return kUsage;
  } catch (const training::NumericError& e) {
    err << "numeric failure: " << e.what() << '\n';
    return kNumericError;
  } catch (const std::exception& e) {
    err << "data error: " << e.what() << '\n';
    return kDataError;
  }
  return kUsage;
}

}  // namespace csmx::cli
