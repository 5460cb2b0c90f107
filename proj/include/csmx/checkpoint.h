#pragma once

#include <cstdint>
#include <filesystem>
#include <optional>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

#include "csmx/model.h"
#include "csmx/rng.h"
#include "csmx/training.h"

namespace csmx::data {

/// A malformed checkpoint file, or parameters that do not fit the model
/// they are loaded into.
class CheckpointError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

inline constexpr char kCheckpointMagic[4] = {'C', 'S', 'M', 'X'};
inline constexpr std::uint32_t kCheckpointVersion = 1;

struct TensorRecord {
  std::string name;
  Shape shape;
  std::vector<double> values;
  bool operator==(const TensorRecord&) const = default;
};

struct EmaSnapshot {
  double decay = 0.0;
  std::vector<TensorRecord> shadow;
};

struct OptimizerSnapshot {
  training::AdamWConfig hyper;
  std::uint64_t step = 0;
  std::vector<TensorRecord> first;
  std::vector<TensorRecord> second;
};

/// Everything needed to resume a run. Encoded little-endian as
///   "CSMX" u32:version
///   str:config u64:epoch str:rng_state
///   table:params
///   u8:has_ema [f64:decay table:shadow]
///   u8:has_optimizer [u64:step f64:beta1 f64:beta2 f64:eps f64:weight_decay table:first table:second]
/// where str is u32 length + bytes and table is u32 count followed by
/// records (str:name u32:rank u64:extent... f64:value...).
struct Checkpoint {
  ModelConfig config;
  std::uint64_t epoch = 0;
  std::string rng_state;
  std::vector<TensorRecord> params;
  std::optional<EmaSnapshot> ema;
  std::optional<OptimizerSnapshot> optimizer;
};

Checkpoint capture(const Model& model, const training::EmaState* ema, const training::OptimizerState* optimizer,
                   const Rng* rng, std::uint64_t epoch);

std::vector<std::uint8_t> encode_checkpoint(const Checkpoint& checkpoint);
Checkpoint decode_checkpoint(std::span<const std::uint8_t> bytes);

/// Writes to a temporary sibling and renames it into place.
void save_checkpoint(const std::filesystem::path& path, const Checkpoint& checkpoint);
Checkpoint load_checkpoint(const std::filesystem::path& path);

/// Copies values into the model's tensors, matching by name. Every model
/// parameter must be present with an identical shape.
void restore_parameters(const Model& model, const std::vector<TensorRecord>& records);
training::EmaState restore_ema(const Model& model, const EmaSnapshot& snapshot);
training::OptimizerState restore_optimizer(const Model& model, const OptimizerSnapshot& snapshot);

}  // namespace csmx::data
