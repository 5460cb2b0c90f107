#pragma once

#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

#include "csmx/model.h"

namespace csmx::data {

/// Spatial weights of the first head's first output neuron reading the first
/// rank channel: mix_weight[0][(i, 0)][(0, 0)] for every token i of the group,
/// laid out as the g x g window.
struct WeightGrid {
  std::size_t stage = 0;  // 0-based
  Aggregation mode = Aggregation::Local;
  std::size_t layer = 0;
  std::size_t side = 0;
  std::vector<double> values;  // side * side, row-major
};

/// First Local and first Global layer of each stage, when present.
std::vector<WeightGrid> extract_weight_grids(const Model& model);

std::string grid_csv(const WeightGrid& grid);
/// Binary PGM (P5), min-max normalized per grid; a constant grid maps to 128.
std::vector<std::uint8_t> grid_pgm(const WeightGrid& grid);

struct GridExport {
  std::vector<std::filesystem::path> files;
  std::vector<std::string> notes;  // stages lacking a mode
};

/// Writes stage<s>_<la|ga>.csv/.pgm per grid and a manifest.txt listing the
/// files and any skipped (stage, mode) pairs.
GridExport export_weight_grids(const Model& model, const std::filesystem::path& dir);

}  // namespace csmx::data
