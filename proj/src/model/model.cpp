#include "csmx/model.h"

#include "csmx/ops.h"
#include "csmx/rearrange.h"

namespace csmx {

namespace {

AffineParams make_affine(std::size_t in, std::size_t out) { return {Tensor({in, out}), Tensor({out})}; }
NormParams make_norm(std::size_t c) { return {Tensor::ones({c}), Tensor({c})}; }

ConvParams make_conv(std::size_t k, std::size_t cin, std::size_t cout, std::size_t stride, std::size_t pad) {
  return {Tensor({k, k, cin, cout}), Tensor({cout}), stride, pad};
}

CsMixerParams make_mixer(std::size_t tokens, std::size_t c, std::size_t rank, std::size_t heads) {
  CsMixerParams p;
  p.tokens = tokens;
  p.channels = c;
  p.rank = rank;
  p.heads = heads;
  p.gate = make_affine(c, c);
  p.value_in = make_affine(c, heads * rank);
  p.mix_weight = Tensor({heads, tokens * rank, tokens * rank});
  p.mix_bias = Tensor({heads, tokens * rank});
  p.value_out_weight = Tensor({heads * rank, c});
  p.value_out_bias = Tensor({heads, c});
  p.out = make_affine(c, c);
  return p;
}

std::string kernel_tag(const ConvParams& conv) { return "k" + std::to_string(conv.kernel.extent(0)); }

void push_affine(std::vector<NamedParameter>& out, const std::string& prefix, const AffineParams& a) {
  out.push_back({prefix + ".weight", a.weight, true, Init::TruncNormal});
  out.push_back({prefix + ".bias", a.bias, false, Init::Zeros});
}

void push_norm(std::vector<NamedParameter>& out, const std::string& prefix, const NormParams& n) {
  out.push_back({prefix + ".gain", n.gain, false, Init::Ones});
  out.push_back({prefix + ".bias", n.bias, false, Init::Zeros});
}

void push_cross_scale(std::vector<NamedParameter>& out, const std::string& prefix, const CrossScaleConv& cs) {
  for (const auto& conv : cs.branches) {
    out.push_back({prefix + "." + kernel_tag(conv) + ".kernel", conv.kernel, true, Init::TruncNormal});
    out.push_back({prefix + "." + kernel_tag(conv) + ".bias", conv.bias, false, Init::Zeros});
  }
}

Tensor apply_cross_scale(const Tensor& x, const CrossScaleConv& cs) {
  std::vector<Tensor> parts;
  parts.reserve(cs.branches.size());
  for (const auto& conv : cs.branches) parts.push_back(ops::conv2d(x, conv.kernel, conv.bias, conv.stride, conv.pad));
  return ops::concat_last(parts);
}

Tensor drop_path(const Tensor& branch, double drop_prob, const ForwardOptions& options) {
  if (drop_prob <= 0.0) return branch;
  if (!options.training) return ops::scale(branch, 1.0 - drop_prob);
  if (!options.rng) throw std::logic_error("stochastic depth in training mode needs an Rng");
  std::vector<double> keep(branch.extent(0));
  for (auto& k : keep) k = options.rng->bernoulli(drop_prob) ? 0.0 : 1.0;
  return ops::scale_leading(branch, keep);
}

RearrangeSpec aggregation_spec(Aggregation mode, std::size_t g) {
  const char* pattern = mode == Aggregation::Local ? "b (nh g1) (nw g2) c -> (b nh nw) (g1 g2) c"
                                                   : "b (g1 nh) (g2 nw) c -> (b nh nw) (g1 g2) c";
  return RearrangeSpec::parse(pattern, {{"g1", g}, {"g2", g}});
}

}  // namespace

Model Model::build(const ModelConfig& config, Rng& rng) {
  const auto plans = plan_stages(config);
  Model m;
  m.config_ = config;
  const std::size_t c0 = config.base_dim;
  for (std::size_t b = 0; b < kEmbedKernels.size(); ++b) {
    m.embed.branches.push_back(
        make_conv(kEmbedKernels[b], config.in_channels, c0 / kEmbedShareDivisors[b], 4, kEmbedPads[b]));
  }
  std::size_t total_layers = 0;
  for (auto d : config.depths) total_layers += d;
  std::size_t layer_index = 0;
  for (std::size_t s = 0; s < kStages; ++s) {
    const StagePlan& plan = plans[s];
    if (s > 0) {
      const std::size_t cin = plans[s - 1].channels;
      for (std::size_t b = 0; b < kMergeKernels.size(); ++b) {
        m.merges[s - 1].branches.push_back(make_conv(kMergeKernels[b], cin, cin, 2, kMergePads[b]));
      }
    }
    m.stages[s].plan = plan;
    const std::size_t c = plan.channels;
    for (auto mode : plan.layers) {
      MixerLayerParams layer;
      layer.mode = mode;
      layer.group_size = plan.group_size;
      layer.drop_prob = total_layers > 1 ? config.drop_path_rate * static_cast<double>(layer_index) /
                                               static_cast<double>(total_layers - 1)
                                         : 0.0;
      layer.norm1 = make_norm(c);
      layer.token_mixer = make_mixer(plan.tokens_per_group(), c, config.rank, plan.heads);
      layer.norm2 = make_norm(c);
      layer.mlp.layers.push_back(make_affine(c, 4 * c));
      if (config.mlp_affine_layers == 3) layer.mlp.layers.push_back(make_affine(4 * c, 4 * c));
      layer.mlp.layers.push_back(make_affine(4 * c, c));
      m.stages[s].layers.push_back(std::move(layer));
      ++layer_index;
    }
  }
  m.head = make_affine(plans.back().channels, config.num_classes);

  for (auto& p : m.parameters()) {
    auto values = p.tensor.mutable_data();
    switch (p.init) {
      case Init::TruncNormal:
        for (auto& v : values) v = rng.truncated_normal(0.02);
        break;
      case Init::MixWeight:
        for (auto& v : values) v = rng.truncated_normal(1e-4);
        break;
      case Init::MixBias:
        std::fill(values.begin(), values.end(), 1.0);
        break;
      case Init::Ones:
        std::fill(values.begin(), values.end(), 1.0);
        break;
      case Init::Zeros:
        std::fill(values.begin(), values.end(), 0.0);
        break;
    }
  }
  return m;
}

std::vector<NamedParameter> Model::parameters() const {
  std::vector<NamedParameter> out;
  push_cross_scale(out, "embed", embed);
  for (std::size_t s = 0; s < kStages; ++s) {
    const std::string stage = "stage" + std::to_string(s + 1);
    if (s > 0) push_cross_scale(out, "merge" + std::to_string(s), merges[s - 1]);
    for (std::size_t l = 0; l < stages[s].layers.size(); ++l) {
      const auto& layer = stages[s].layers[l];
      const std::string prefix = stage + ".layer" + std::to_string(l);
      push_norm(out, prefix + ".norm1", layer.norm1);
      const auto& tm = layer.token_mixer;
      const std::string t = prefix + ".token_mixer";
      push_affine(out, t + ".gate", tm.gate);
      push_affine(out, t + ".value_in", tm.value_in);
      out.push_back({t + ".mix.weight", tm.mix_weight, true, Init::MixWeight});
      out.push_back({t + ".mix.bias", tm.mix_bias, false, Init::MixBias});
      out.push_back({t + ".value_out.weight", tm.value_out_weight, true, Init::TruncNormal});
      out.push_back({t + ".value_out.bias", tm.value_out_bias, false, Init::Zeros});
      push_affine(out, t + ".out", tm.out);
      push_norm(out, prefix + ".norm2", layer.norm2);
      for (std::size_t i = 0; i < layer.mlp.layers.size(); ++i) {
        push_affine(out, prefix + ".mlp.fc" + std::to_string(i + 1), layer.mlp.layers[i]);
      }
    }
  }
  push_affine(out, "head", head);
  return out;
}

std::size_t Model::parameter_count() const {
  std::size_t n = 0;
  for (const auto& p : parameters()) n += p.tensor.numel();
  return n;
}

void Model::set_requires_grad(bool on) {
  for (auto& p : parameters()) p.tensor.set_requires_grad(on);
}

void Model::zero_grad() {
  for (auto& p : parameters()) p.tensor.zero_grad();
}

Tensor cross_scale_embed(const Tensor& image, const CrossScaleConv& embed) {
  const std::size_t hi = image.rank() == 4 ? 1 : 0;
  if (image.rank() < 3 || image.extent(hi) % 4 || image.extent(hi + 1) % 4) {
    throw ShapeError("cross_scale_embed: spatial extents of " + shape_str(image.shape()) + " must be divisible by 4");
  }
  return apply_cross_scale(image, embed);
}

Tensor patch_merge(const Tensor& x, const CrossScaleConv& merge) {
  const std::size_t hi = x.rank() == 4 ? 1 : 0;
  if (x.rank() < 3 || x.extent(hi) % 2 || x.extent(hi + 1) % 2) {
    throw ShapeError("patch_merge: spatial extents of " + shape_str(x.shape()) + " must be even");
  }
  return apply_cross_scale(x, merge);
}

Tensor aggregate(const Tensor& x, std::size_t g, Aggregation mode) {
  if (x.rank() == 3) return aggregate(ops::reshape(x, {1, x.extent(0), x.extent(1), x.extent(2)}), g, mode);
  if (x.rank() != 4) throw ShapeError("aggregate: expected [b,h,w,c], got " + shape_str(x.shape()));
  if (g == 0 || x.extent(1) % g || x.extent(2) % g) {
    throw ShapeError("aggregate: group size " + std::to_string(g) + " does not divide " + shape_str(x.shape()));
  }
  return rearrange(x, aggregation_spec(mode, g));
}

Tensor disaggregate(const Tensor& groups, std::size_t batch, std::size_t h, std::size_t w, std::size_t g,
                    Aggregation mode) {
  if (g == 0 || h % g || w % g) {
    throw ShapeError("disaggregate: group size " + std::to_string(g) + " does not divide " + std::to_string(h) +
                     "x" + std::to_string(w));
  }
  const std::size_t b = batch == 0 ? 1 : batch;
  const std::size_t nh = h / g, nw = w / g;
  if (groups.rank() != 3 || groups.extent(0) != b * nh * nw || groups.extent(1) != g * g) {
    throw ShapeError("disaggregate: groups " + shape_str(groups.shape()) + " do not tile " + std::to_string(h) +
                     "x" + std::to_string(w) + " with g=" + std::to_string(g));
  }
  RearrangeSpec inverse = aggregation_spec(mode, g).inverse();
  Tensor spatial = rearrange(
      groups, RearrangeSpec::parse(inverse.pattern(), {{"g1", g}, {"g2", g}, {"nh", nh}, {"nw", nw}, {"b", b}}));
  return batch == 0 ? ops::reshape(spatial, {h, w, groups.extent(2)}) : spatial;
}

Tensor cs_mixer_op(const Tensor& groups, const CsMixerParams& p) {
  if (groups.rank() != 3 || groups.extent(1) != p.tokens || groups.extent(2) != p.channels) {
    throw ShapeError("cs_mixer_op: groups " + shape_str(groups.shape()) + " do not match operator with L=" +
                     std::to_string(p.tokens) + ", c=" + std::to_string(p.channels));
  }
  const std::size_t n_groups = groups.extent(0), L = p.tokens, d = p.rank, m = p.heads;
  Tensor u = ops::linear(groups, p.gate.weight, p.gate.bias);
  Tensor v = ops::linear(groups, p.value_in.weight, p.value_in.bias);  // [G, L, m*d]
  // [G, L, m, d] -> [m, G, L*d]: each head mixes its (token, rank) plane.
  v = ops::permute(v, {n_groups, L, m, d}, {2, 0, 1, 3}, {m, n_groups, L * d});
  v = ops::batched_linear(v, p.mix_weight, p.mix_bias);
  v = ops::permute(v, {m, n_groups, L, d}, {1, 2, 0, 3}, {n_groups, L, m * d});
  v = ops::add_bias(ops::matmul(v, p.value_out_weight), ops::sum_leading(p.value_out_bias));
  return ops::linear(ops::mul(u, v), p.out.weight, p.out.bias);
}

Tensor channel_mlp(const Tensor& x, const ChannelMlpParams& params) {
  Tensor h = x;
  for (std::size_t i = 0; i < params.layers.size(); ++i) {
    h = ops::linear(h, params.layers[i].weight, params.layers[i].bias);
    if (i + 1 < params.layers.size()) h = ops::gelu(h);
  }
  return h;
}

Tensor mixer_layer(const Tensor& x, const MixerLayerParams& params, const ForwardOptions& options) {
  if (x.rank() == 3) {
    Tensor y = mixer_layer(ops::reshape(x, {1, x.extent(0), x.extent(1), x.extent(2)}), params, options);
    return ops::reshape(y, x.shape());
  }
  if (x.rank() != 4) throw ShapeError("mixer_layer: expected [b,h,w,c], got " + shape_str(x.shape()));
  const std::size_t b = x.extent(0), h = x.extent(1), w = x.extent(2), g = params.group_size;
  Tensor normed = ops::layer_norm(x, params.norm1.gain, params.norm1.bias);
  Tensor mixed = cs_mixer_op(aggregate(normed, g, params.mode), params.token_mixer);
  Tensor token_branch = drop_path(disaggregate(mixed, b, h, w, g, params.mode), params.drop_prob, options);
  Tensor y = ops::add(x, token_branch);
  Tensor channel_branch =
      drop_path(channel_mlp(ops::layer_norm(y, params.norm2.gain, params.norm2.bias), params.mlp), params.drop_prob,
                options);
  return ops::add(y, channel_branch);
}

Tensor forward(const Model& model, const Tensor& images, const ForwardOptions& options) {
  const ModelConfig& cfg = model.config();
  if (images.rank() == 3) {
    Tensor logits = forward(model, ops::reshape(images, {1, images.extent(0), images.extent(1), images.extent(2)}),
                            options);
    return ops::reshape(logits, {cfg.num_classes});
  }
  if (images.rank() != 4 || images.extent(1) != cfg.image_h || images.extent(2) != cfg.image_w ||
      images.extent(3) != cfg.in_channels) {
    throw ShapeError("forward: images " + shape_str(images.shape()) + " do not match configured input [B," +
                     std::to_string(cfg.image_h) + "," + std::to_string(cfg.image_w) + "," +
                     std::to_string(cfg.in_channels) + "]");
  }
  Tensor x = cross_scale_embed(images, model.embed);
  for (std::size_t s = 0; s < kStages; ++s) {
    if (s > 0) x = patch_merge(x, model.merges[s - 1]);
    for (const auto& layer : model.stages[s].layers) x = mixer_layer(x, layer, options);
  }
  const std::size_t b = x.extent(0), c = x.extent(3);
  Tensor pooled = ops::mean_axis(ops::reshape(x, {b, x.extent(1) * x.extent(2), c}), 1);
  return ops::linear(pooled, model.head.weight, model.head.bias);
}

}  // namespace csmx
