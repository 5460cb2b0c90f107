#pragma once

#include <cstdint>
#include <filesystem>
#include <iosfwd>
#include <string>
#include <utility>
#include <vector>

#include "csmx/config.h"
#include "csmx/data.h"
#include "csmx/trainer.h"

namespace csmx::cli {

enum ExitCode : int { kOk = 0, kUsage = 1, kDataError = 2, kNumericError = 3, kAcceptanceFailed = 4 };

/// Fully resolved description of one invocation. Precedence, lowest first:
/// variant preset (or the tiny config), config file, --set entries, flags.
struct RunSpec {
  std::string command;
  ModelConfig model = ModelConfig::tiny();
  training::Recipe recipe;
  std::string dataset = "synthetic";  // or "cifar10"
  std::string data_dir;
  std::size_t train_size = 512;
  std::size_t val_size = 256;
  std::uint64_t data_seed = 7;
  data::Interpolation resize = data::Interpolation::Bilinear;
  std::uint64_t seed = 0;
  std::filesystem::path out_dir = ".";

  /// key=value lines accepted back by apply_entry (the manifest format).
  std::string to_text() const;
};

/// Recipe defaults tuned for the tiny config on a single CPU core.
training::Recipe desk_recipe();

/// Applies one key; keys not known to the run or recipe go to the model
/// config. Throws ConfigError on an unknown key or malformed value.
void apply_entry(RunSpec& spec, const std::string& key, const std::string& value);

/// Parses flat "key=value" text (blank lines and '#' comments allowed).
std::vector<std::pair<std::string, std::string>> parse_entries(const std::string& text);

struct Splits {
  data::Dataset train;
  data::Dataset val;
};
/// Builds the train and validation sets a RunSpec names, at the model's
/// input size.
Splits load_splits(const RunSpec& spec);

/// Runs one command (args exclude the program name). Never throws; errors
/// are reported on `err` and mapped to an ExitCode.
int run(const std::vector<std::string>& args, std::ostream& out, std::ostream& err);

}  // namespace csmx::cli
