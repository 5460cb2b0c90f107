#include "csmx/weight_grid.h"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <stdexcept>

namespace csmx::data {

namespace {

std::string stem(const WeightGrid& g) {
  return "stage" + std::to_string(g.stage + 1) + (g.mode == Aggregation::Local ? "_la" : "_ga");
}

void write_file(const std::filesystem::path& path, const std::string& bytes) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
  if (!out) throw std::runtime_error("cannot write " + path.string());
}

}  // namespace

std::vector<WeightGrid> extract_weight_grids(const Model& model) {
  std::vector<WeightGrid> grids;
  for (std::size_t s = 0; s < kStages; ++s) {
    const auto& layers = model.stages[s].layers;
    for (auto mode : {Aggregation::Local, Aggregation::Global}) {
      auto it = std::find_if(layers.begin(), layers.end(), [&](const MixerLayerParams& l) { return l.mode == mode; });
      if (it == layers.end()) continue;
      const auto& tm = it->token_mixer;
      const std::size_t ld = tm.tokens * tm.rank;
      WeightGrid g;
      g.stage = s;
      g.mode = mode;
      g.layer = static_cast<std::size_t>(it - layers.begin());
      g.side = it->group_size;
      auto w = tm.mix_weight.data();
      for (std::size_t i = 0; i < tm.tokens; ++i) g.values.push_back(w[(i * tm.rank) * ld + 0]);
      grids.push_back(std::move(g));
    }
  }
  return grids;
}

std::string grid_csv(const WeightGrid& grid) {
  std::string out;
  char buf[32];
  for (std::size_t y = 0; y < grid.side; ++y) {
    for (std::size_t x = 0; x < grid.side; ++x) {
      std::snprintf(buf, sizeof buf, "%.17g", grid.values[y * grid.side + x]);
      if (x) out += ',';
      out += buf;
    }
    out += '\n';
  }
  return out;
}

std::vector<std::uint8_t> grid_pgm(const WeightGrid& grid) {
  const std::string header = "P5\n" + std::to_string(grid.side) + " " + std::to_string(grid.side) + "\n255\n";
  std::vector<std::uint8_t> out(header.begin(), header.end());
  const auto [lo, hi] = std::minmax_element(grid.values.begin(), grid.values.end());
  const double range = *hi - *lo;
  for (double v : grid.values) {
    out.push_back(range > 0.0 ? static_cast<std::uint8_t>(std::lround((v - *lo) / range * 255.0)) : 128);
  }
  return out;
}

GridExport export_weight_grids(const Model& model, const std::filesystem::path& dir) {
  std::filesystem::create_directories(dir);
  GridExport result;
  const auto grids = extract_weight_grids(model);
  std::string manifest;
  for (std::size_t s = 0; s < kStages; ++s) {
    for (auto mode : {Aggregation::Local, Aggregation::Global}) {
      auto it = std::find_if(grids.begin(), grids.end(), [&](const WeightGrid& g) { return g.stage == s && g.mode == mode; });
      const std::string label = "stage" + std::to_string(s + 1) + " " + to_string(mode);
      if (it == grids.end()) {
        const std::string note = label + " skipped: stage has no " + to_string(mode) + " layer";
        result.notes.push_back(note);
        manifest += note + "\n";
        continue;
      }
      const auto csv = dir / (stem(*it) + ".csv");
      const auto pgm = dir / (stem(*it) + ".pgm");
      write_file(csv, grid_csv(*it));
      const auto pgm_bytes = grid_pgm(*it);
      write_file(pgm, std::string(pgm_bytes.begin(), pgm_bytes.end()));
      result.files.push_back(csv);
      result.files.push_back(pgm);
      manifest += label + " layer" + std::to_string(it->layer) + " " + std::to_string(it->side) + "x" +
                  std::to_string(it->side) + " " + csv.filename().string() + " " + pgm.filename().string() + "\n";
    }
  }
  write_file(dir / "manifest.txt", manifest);
  result.files.push_back(dir / "manifest.txt");
  return result;
}

}  // namespace csmx::data
