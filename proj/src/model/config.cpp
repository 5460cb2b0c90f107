#include "csmx/config.h"

#include <algorithm>
#include <numeric>
#include <sstream>

namespace csmx {

const char* to_string(Aggregation mode) { return mode == Aggregation::Local ? "LA" : "GA"; }

ModelConfig ModelConfig::preset(const std::string& variant) {
  ModelConfig c;
  c.variant = variant;
  c.group_size = 7;
  c.image_h = c.image_w = 224;
  c.num_classes = 1000;
  if (variant == "T") {
    c.base_dim = 64, c.rank = 2, c.depths = {1, 1, 8, 6}, c.heads = {2, 4, 8, 16};
  } else if (variant == "S") {
    c.base_dim = 96, c.rank = 4, c.depths = {2, 2, 6, 2}, c.heads = {3, 6, 12, 24};
  } else if (variant == "B") {
    c.base_dim = 96, c.rank = 4, c.depths = {2, 2, 18, 2}, c.heads = {3, 6, 12, 24};
  } else if (variant == "L") {
    c.base_dim = 128, c.rank = 4, c.depths = {2, 2, 18, 2}, c.heads = {4, 8, 16, 32};
  } else {
    throw ConfigError("unknown variant '" + variant + "' (expected T, S, B or L)");
  }
  return c;
}

ModelConfig ModelConfig::tiny(std::size_t num_classes) {
  ModelConfig c;
  c.variant = "custom";
  c.base_dim = 8;
  c.rank = 2;
  c.depths = {1, 1, 1, 1};
  c.heads = {1, 2, 2, 4};
  c.group_size = 2;
  c.image_h = c.image_w = 32;
  c.num_classes = num_classes;
  return c;
}

std::size_t ModelConfig::stage_group_size(std::size_t stage) const {
  // Largest window <= g that tiles the stage exactly; equals g whenever g
  // divides both extents (all reference configurations).
  const std::size_t common = std::gcd(stage_h(stage), stage_w(stage));
  for (std::size_t g = std::min(group_size, common); g > 1; --g) {
    if (common % g == 0) return g;
  }
  return 1;
}

void ModelConfig::validate() const {
  auto fail = [](const std::string& msg) { throw ConfigError("invalid config: " + msg); };
  if (image_h == 0 || image_w == 0 || image_h % 32 || image_w % 32) {
    fail("image size " + std::to_string(image_h) + "x" + std::to_string(image_w) + " must be a positive multiple of 32");
  }
  if (base_dim == 0 || base_dim % 8) fail("base_dim must be a positive multiple of 8");
  if (rank == 0) fail("rank must be >= 1");
  if (group_size == 0) fail("group_size must be >= 1");
  if (in_channels == 0) fail("in_channels must be >= 1");
  if (num_classes == 0) fail("num_classes must be >= 1");
  if (!(drop_path_rate >= 0.0 && drop_path_rate < 1.0)) fail("drop_path_rate must be in [0, 1)");
  if (mlp_affine_layers != 2 && mlp_affine_layers != 3) fail("mlp_affine_layers must be 2 or 3");
  for (std::size_t s = 0; s < kStages; ++s) {
    if (heads[s] == 0) fail("heads must be positive");
    const std::size_t g = stage_group_size(s);
    if (stage_h(s) % g || stage_w(s) % g) {
      fail("group size " + std::to_string(g) + " does not divide stage " + std::to_string(s + 1) + " extent " +
           std::to_string(stage_h(s)) + "x" + std::to_string(stage_w(s)));
    }
  }
}

bool ModelConfig::is_canonical() const {
  if (variant != "T" && variant != "S" && variant != "B" && variant != "L") return false;
  return *this == preset(variant);
}

namespace {

template <typename T>
std::string join(const std::array<T, kStages>& values) {
  std::ostringstream os;
  for (std::size_t i = 0; i < values.size(); ++i) os << (i ? "," : "") << values[i];
  return os.str();
}

std::size_t parse_size(const std::string& key, const std::string& value) {
  std::size_t pos = 0;
  unsigned long long v = 0;
  try {
    v = std::stoull(value, &pos);
  } catch (const std::exception&) {
    pos = 0;
  }
  if (pos != value.size() || value.empty() || value.front() == '-') {
    throw ConfigError("config key '" + key + "': expected a non-negative integer, got '" + value + "'");
  }
  return static_cast<std::size_t>(v);
}

std::array<std::size_t, kStages> parse_quad(const std::string& key, const std::string& value) {
  std::array<std::size_t, kStages> out{};
  std::stringstream ss(value);
  std::string item;
  std::size_t i = 0;
  while (std::getline(ss, item, ',')) {
    if (i == kStages) throw ConfigError("config key '" + key + "': expected 4 values, got '" + value + "'");
    out[i++] = parse_size(key, item);
  }
  if (i != kStages) throw ConfigError("config key '" + key + "': expected 4 values, got '" + value + "'");
  return out;
}

std::string trim(const std::string& s) {
  const auto b = s.find_first_not_of(" \t\r");
  if (b == std::string::npos) return "";
  return s.substr(b, s.find_last_not_of(" \t\r") - b + 1);
}

}  // namespace

std::string ModelConfig::to_text() const {
  std::ostringstream os;
  os.precision(17);
  os << "variant=" << variant << '\n'
     << "base_dim=" << base_dim << '\n'
     << "rank=" << rank << '\n'
     << "depths=" << join(depths) << '\n'
     << "heads=" << join(heads) << '\n'
     << "group_size=" << group_size << '\n'
     << "image_h=" << image_h << '\n'
     << "image_w=" << image_w << '\n'
     << "in_channels=" << in_channels << '\n'
     << "num_classes=" << num_classes << '\n'
     << "drop_path_rate=" << drop_path_rate << '\n'
     << "mlp_affine_layers=" << mlp_affine_layers << '\n';
  return os.str();
}

void apply_config_entry(ModelConfig& c, const std::string& raw_key, const std::string& raw_value) {
  const std::string key = trim(raw_key), value = trim(raw_value);
  if (key == "variant") {
    c.variant = value;
  } else if (key == "base_dim" || key == "C") {
    c.base_dim = parse_size(key, value);
  } else if (key == "rank" || key == "d") {
    c.rank = parse_size(key, value);
  } else if (key == "depths") {
    c.depths = parse_quad(key, value);
  } else if (key == "heads") {
    c.heads = parse_quad(key, value);
  } else if (key == "group_size" || key == "g") {
    c.group_size = parse_size(key, value);
  } else if (key == "image_size") {
    c.image_h = c.image_w = parse_size(key, value);
  } else if (key == "image_h") {
    c.image_h = parse_size(key, value);
  } else if (key == "image_w") {
    c.image_w = parse_size(key, value);
  } else if (key == "in_channels") {
    c.in_channels = parse_size(key, value);
  } else if (key == "num_classes" || key == "K") {
    c.num_classes = parse_size(key, value);
  } else if (key == "drop_path_rate") {
    try {
      c.drop_path_rate = std::stod(value);
    } catch (const std::exception&) {
      throw ConfigError("config key 'drop_path_rate': expected a real, got '" + value + "'");
    }
  } else if (key == "mlp_affine_layers") {
    c.mlp_affine_layers = parse_size(key, value);
  } else {
    throw ConfigError("unknown config key '" + key + "'");
  }
}

ModelConfig parse_config(const std::string& text, ModelConfig base) {
  std::istringstream is(text);
  std::string line;
  std::size_t lineno = 0;
  while (std::getline(is, line)) {
    ++lineno;
    const auto hash = line.find('#');
    if (hash != std::string::npos) line.resize(hash);
    if (trim(line).empty()) continue;
    const auto eq = line.find('=');
    if (eq == std::string::npos) {
      throw ConfigError("config line " + std::to_string(lineno) + ": expected key=value");
    }
    apply_config_entry(base, line.substr(0, eq), line.substr(eq + 1));
  }
  return base;
}

std::vector<StagePlan> plan_stages(const ModelConfig& config) {
  config.validate();
  std::vector<StagePlan> plans;
  for (std::size_t s = 0; s < kStages; ++s) {
    StagePlan p;
    p.index = s;
    p.h = config.stage_h(s);
    p.w = config.stage_w(s);
    p.channels = config.stage_dim(s);
    p.group_size = config.stage_group_size(s);
    p.heads = config.heads[s];
    for (std::size_t l = 0; l < config.depths[s]; ++l) {
      p.layers.push_back(l % 2 == 0 ? Aggregation::Local : Aggregation::Global);
    }
    plans.push_back(std::move(p));
  }
  return plans;
}

}  // namespace csmx
