#pragma once

#include <array>
#include <string>
#include <vector>

#include "csmx/config.h"
#include "csmx/rng.h"
#include "csmx/tensor.h"

namespace csmx {

struct AffineParams {
  Tensor weight;  // [in, out]
  Tensor bias;    // [out]
};

struct NormParams {
  Tensor gain;
  Tensor bias;
};

struct ConvParams {
  Tensor kernel;  // [k, k, cin, cout]
  Tensor bias;    // [cout]
  std::size_t stride = 1;
  std::size_t pad = 0;
};

/// Parallel convolutions sharing a stride whose outputs are concatenated
/// along channels (patch embedding and patch merging).
struct CrossScaleConv {
  std::vector<ConvParams> branches;
};

/// Weights of one token-mixing operator. Per-head maps are stored stacked:
/// head n of W_v is columns [n*rank, (n+1)*rank) of value_in.weight, head n of
/// the reverse projection is rows [n*rank, (n+1)*rank) of value_out_weight, and
/// mix_weight[n] is the dense (tokens*rank) x (tokens*rank) map, i.e. the
/// [tokens, rank, tokens, rank] tensor flattened with (token, rank) row-major
/// on both sides.
struct CsMixerParams {
  std::size_t tokens = 0;    // L = g^2
  std::size_t channels = 0;  // c
  std::size_t rank = 0;      // d
  std::size_t heads = 0;     // m
  AffineParams gate;         // W_u: [c, c]
  AffineParams value_in;     // [c, m*d], bias [m*d]
  Tensor mix_weight;         // [m, L*d, L*d]
  Tensor mix_bias;           // [m, L*d]
  Tensor value_out_weight;   // [m*d, c]
  Tensor value_out_bias;     // [m, c]
  AffineParams out;          // W_o: [c, c]
};

struct ChannelMlpParams {
  std::vector<AffineParams> layers;  // GELU between consecutive layers
};

struct MixerLayerParams {
  Aggregation mode = Aggregation::Local;
  std::size_t group_size = 1;
  double drop_prob = 0.0;
  NormParams norm1;
  CsMixerParams token_mixer;
  NormParams norm2;
  ChannelMlpParams mlp;
};

struct StageParams {
  StagePlan plan;
  std::vector<MixerLayerParams> layers;
};

enum class Init { TruncNormal, MixWeight, Zeros, Ones, MixBias };

struct NamedParameter {
  std::string name;
  Tensor tensor;
  bool decay = true;  // false for biases and norm parameters
  Init init = Init::TruncNormal;
};

class Model {
 public:
  /// Allocates every parameter and initializes it from `rng`.
  static Model build(const ModelConfig& config, Rng& rng);

  const ModelConfig& config() const { return config_; }

  /// Every trainable tensor in a fixed order with stable names.
  std::vector<NamedParameter> parameters() const;
  std::size_t parameter_count() const;
  void set_requires_grad(bool on);
  void zero_grad();

  CrossScaleConv embed;
  std::array<StageParams, kStages> stages;
  std::array<CrossScaleConv, kStages - 1> merges;  // merges[i] precedes stage i+1
  AffineParams head;

 private:
  ModelConfig config_;
};

struct ForwardOptions {
  bool training = false;
  Rng* rng = nullptr;  // required when training with drop_prob > 0
};

/// image [H, W, C] -> [H/4, W/4, base_dim] (or batched with a leading axis).
Tensor cross_scale_embed(const Tensor& image, const CrossScaleConv& embed);
/// x [h, w, c] -> [h/2, w/2, 2c] (or batched).
Tensor patch_merge(const Tensor& x, const CrossScaleConv& merge);

/// x [b, h, w, c] (or [h, w, c]) -> [b*N, L, c] groups; group order is
/// (batch, row of groups, column of groups), tokens in each group row-major
/// over the g x g window.
Tensor aggregate(const Tensor& x, std::size_t g, Aggregation mode);
/// Exact inverse of aggregate for a target [batch, h, w, c] layout
/// (batch = 0 means unbatched [h, w, c]).
Tensor disaggregate(const Tensor& groups, std::size_t batch, std::size_t h, std::size_t w, std::size_t g,
                    Aggregation mode);

/// Token mixing on groups x [G, L, c] -> [G, L, c]; all groups share params.
Tensor cs_mixer_op(const Tensor& groups, const CsMixerParams& params);
Tensor channel_mlp(const Tensor& x, const ChannelMlpParams& params);
Tensor mixer_layer(const Tensor& x, const MixerLayerParams& params, const ForwardOptions& options = {});

/// images [B, H, W, C] -> logits [B, K]; a single [H, W, C] image gives [K].
Tensor forward(const Model& model, const Tensor& images, const ForwardOptions& options = {});

/// Embedding kernel sizes and paddings; channel shares are C/2, C/4, C/8, C/8.
inline constexpr std::array<std::size_t, 4> kEmbedKernels{4, 8, 16, 32};
inline constexpr std::array<std::size_t, 4> kEmbedPads{0, 2, 6, 14};
inline constexpr std::array<std::size_t, 4> kEmbedShareDivisors{2, 4, 8, 8};
inline constexpr std::array<std::size_t, 2> kMergeKernels{2, 4};
inline constexpr std::array<std::size_t, 2> kMergePads{0, 1};

}  // namespace csmx
