#pragma once

#include <array>
#include <cstddef>
#include <stdexcept>
#include <string>
#include <vector>

namespace csmx {

class ConfigError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

/// Token grouping before mixing: contiguous g x g tiles (local) or dilated
/// lattices with stride (h/g, w/g) (global).
enum class Aggregation { Local, Global };

const char* to_string(Aggregation mode);

inline constexpr std::size_t kStages = 4;

struct ModelConfig {
  std::string variant = "custom";  // "T", "S", "B", "L" for the reference sizes
  std::size_t base_dim = 64;
  std::size_t rank = 2;
  std::array<std::size_t, kStages> depths{1, 1, 8, 6};
  std::array<std::size_t, kStages> heads{2, 4, 8, 16};
  std::size_t group_size = 7;
  std::size_t image_h = 224;
  std::size_t image_w = 224;
  std::size_t in_channels = 3;
  std::size_t num_classes = 1000;
  double drop_path_rate = 0.0;
  /// Affine maps in the channel MLP: 2 (c->4c->c) or 3 (c->4c->4c->c).
  std::size_t mlp_affine_layers = 2;

  /// One of the four reference configurations at 224x224, K=1000, g=7.
  static ModelConfig preset(const std::string& variant);
  /// Small configuration for gradient checks and desk-scale training:
  /// 32x32 input, g=2, C=8, d=2, depths 1,1,1,1.
  static ModelConfig tiny(std::size_t num_classes = 4);

  std::size_t stage_dim(std::size_t stage) const { return base_dim << stage; }
  std::size_t stage_h(std::size_t stage) const { return (image_h / 4) >> stage; }
  std::size_t stage_w(std::size_t stage) const { return (image_w / 4) >> stage; }
  /// Group size used in a stage: the largest divisor of both stage extents
  /// that does not exceed g (so g itself when it tiles the feature map).
  std::size_t stage_group_size(std::size_t stage) const;

  void validate() const;
  /// True when identical to the preset named by `variant`.
  bool is_canonical() const;

  /// Flat "key=value" lines; parse_config accepts the same keys.
  std::string to_text() const;
  bool operator==(const ModelConfig&) const = default;
};

/// Applies one "key=value" override (e.g. "g=2", "depths=1,1,2,1").
void apply_config_entry(ModelConfig& config, const std::string& key, const std::string& value);
ModelConfig parse_config(const std::string& text, ModelConfig base = ModelConfig{});

struct StagePlan {
  std::size_t index = 0;
  std::size_t h = 0, w = 0, channels = 0;
  std::size_t group_size = 1;
  std::size_t heads = 1;
  std::vector<Aggregation> layers;  // alternating, starting Local

  std::size_t tokens_per_group() const { return group_size * group_size; }
  std::size_t groups() const { return (h * w) / tokens_per_group(); }
};

std::vector<StagePlan> plan_stages(const ModelConfig& config);

}  // namespace csmx
