#include <gtest/gtest.h>

#include <cmath>
#include <set>

#include "csmx/gradcheck.h"
#include "csmx/model.h"
#include "csmx/ops.h"
#include "csmx/profiler.h"
#include "mixer_oracle.h"
#include "support.h"

namespace csmx {
namespace {

using test::random_extent;
using test::random_tensor;
using test::naive_mixer;
using test::random_mixer;

TEST(CsMixerOp, MatchesIndexLoopOracle) {
  Rng rng(11);
  int instances = 0;
  for (int trial = 0; trial < 40; ++trial) {
    const std::size_t g = random_extent(rng, 1, 3), l = g * g;
    const std::size_t d = random_extent(rng, 1, std::max<std::size_t>(1, 64 / l));
    if (l * d > 64) continue;
    const std::size_t c = random_extent(rng, 1, 6), m = random_extent(rng, 1, 3), groups = random_extent(rng, 1, 3);
    const CsMixerParams p = random_mixer(l, c, d, m, rng);
    const Tensor x = random_tensor({groups, l, c}, rng);
    const Tensor y = cs_mixer_op(x, p);
    ASSERT_EQ(y.shape(), x.shape());
    for (std::size_t n = 0; n < groups; ++n) {
      const std::vector<double> xs(x.data().begin() + n * l * c, x.data().begin() + (n + 1) * l * c);
      const auto expected = naive_mixer(xs, p);
      for (std::size_t i = 0; i < l * c; ++i) {
        ASSERT_NEAR(y[n * l * c + i], expected[i], 1e-12) << "trial " << trial << " L=" << l << " d=" << d;
      }
    }
    ++instances;
  }
  EXPECT_GE(instances, 20);
}

TEST(CsMixerOp, SpecifiedSmallInstance) {
  Rng rng(12);
  const CsMixerParams p = random_mixer(4, 6, 2, 2, rng);
  const Tensor x = random_tensor({1, 4, 6}, rng);
  const auto expected = naive_mixer(std::vector<double>(x.data().begin(), x.data().end()), p);
  const Tensor y = cs_mixer_op(x, p);
  for (std::size_t i = 0; i < expected.size(); ++i) EXPECT_NEAR(y[i], expected[i], 1e-12);
}

TEST(CsMixerOp, ZeroMixAndBiasesKillTheGate) {
  Rng rng(13);
  CsMixerParams p = random_mixer(4, 3, 2, 2, rng);
  p.mix_weight = Tensor(p.mix_weight.shape(), 0.0);
  p.mix_bias = Tensor(p.mix_bias.shape(), 0.0);
  p.value_out_bias = Tensor(p.value_out_bias.shape(), 0.0);
  p.out.bias = Tensor(p.out.bias.shape(), 0.0);
  const Tensor y = cs_mixer_op(random_tensor({2, 4, 3}, rng), p);
  for (double v : y.data()) EXPECT_EQ(v, 0.0);
}

TEST(CsMixerOp, IdentityMapsGiveHadamardSquare) {
  const std::size_t l = 4, c = 3;
  auto eye = [](std::size_t n) {
    Tensor t({n, n});
    for (std::size_t i = 0; i < n; ++i) t.mutable_data()[i * n + i] = 1.0;
    return t;
  };
  CsMixerParams p;
  p.tokens = l, p.channels = c, p.rank = c, p.heads = 1;
  p.gate = {eye(c), Tensor({c}, 0.0)};
  p.value_in = {eye(c), Tensor({c}, 0.0)};
  p.mix_weight = ops::reshape(eye(l * c), {1, l * c, l * c});
  p.mix_bias = Tensor({1, l * c}, 0.0);
  p.value_out_weight = eye(c);
  p.value_out_bias = Tensor({1, c}, 0.0);
  p.out = {eye(c), Tensor({c}, 0.0)};
  Rng rng(14);
  const Tensor x = random_tensor({1, l, c}, rng);
  const Tensor y = cs_mixer_op(x, p);
  for (std::size_t i = 0; i < x.numel(); ++i) EXPECT_DOUBLE_EQ(y[i], x[i] * x[i]);
}

TEST(CsMixerOp, RejectsMismatchedShapes) {
  Rng rng(15);
  const CsMixerParams p = random_mixer(4, 3, 2, 1, rng);
  EXPECT_THROW(cs_mixer_op(Tensor({1, 9, 3}), p), ShapeError);
  EXPECT_THROW(cs_mixer_op(Tensor({1, 4, 5}), p), ShapeError);
}

TEST(CrossScaleEmbed, FullResolutionShapeAndSlices) {
  ModelConfig cfg = ModelConfig::preset("S");  // C = 96
  Rng rng(16);
  const Model model = Model::build(cfg, rng);
  const std::size_t widths[] = {48, 24, 12, 12};
  ASSERT_EQ(model.embed.branches.size(), 4u);
  for (std::size_t i = 0; i < 4; ++i) {
    EXPECT_EQ(model.embed.branches[i].kernel.shape(), (Shape{kEmbedKernels[i], kEmbedKernels[i], 3, widths[i]}));
  }
  const Tensor out = cross_scale_embed(random_tensor({224, 224, 3}, rng), model.embed);
  EXPECT_EQ(out.shape(), (Shape{56, 56, 96}));
}

TEST(CrossScaleEmbed, BaseDimSixtyFour) {
  Rng rng(17);
  const Model model = Model::build(ModelConfig::preset("T"), rng);
  EXPECT_EQ(cross_scale_embed(Tensor({224, 224, 3}), model.embed).shape(), (Shape{56, 56, 64}));
}

TEST(CrossScaleEmbed, ZeroImageZeroBiasesGiveZero) {
  Rng rng(18);
  const Model model = Model::build(ModelConfig::tiny(), rng);
  const Tensor out = cross_scale_embed(Tensor({32, 32, 3}), model.embed);
  for (double v : out.data()) EXPECT_EQ(v, 0.0);
}

TEST(CrossScaleEmbed, BaseDimMustBeMultipleOfEight) {
  ModelConfig cfg = ModelConfig::tiny();
  cfg.base_dim = 12;
  EXPECT_THROW(cfg.validate(), ConfigError);
}

TEST(PatchMerge, HalvesSpaceDoublesChannels) {
  ModelConfig cfg = ModelConfig::preset("S");
  Rng rng(19);
  const Model model = Model::build(cfg, rng);
  EXPECT_EQ(patch_merge(Tensor({56, 56, 96}), model.merges[0]).shape(), (Shape{28, 28, 192}));
  EXPECT_EQ(patch_merge(Tensor({14, 14, 384}), model.merges[2]).shape(), (Shape{7, 7, 768}));
  const Tensor out = patch_merge(Tensor({14, 14, 384}), model.merges[2]);
  for (double v : out.data()) ASSERT_EQ(v, 0.0);
  EXPECT_THROW(patch_merge(Tensor({7, 7, 384}), model.merges[2]), ShapeError);
}

TEST(ChannelMlp, ZeroWeightsGiveZero) {
  ChannelMlpParams p{{{Tensor({3, 12}), Tensor({12})}, {Tensor({12, 3}), Tensor({3})}}};
  Rng rng(20);
  const Tensor out = channel_mlp(random_tensor({5, 3}, rng), p);
  for (double v : out.data()) EXPECT_EQ(v, 0.0);
}

TEST(ChannelMlp, IdentityConstructionRoundTrips) {
  // GELU(z) - GELU(-z) = z, so hidden units (+x, -x) and output weights
  // (+1, -1) reproduce any input exactly up to rounding.
  const std::size_t c = 2;
  Tensor w1({c, 4 * c}), w2({4 * c, c});
  for (std::size_t i = 0; i < c; ++i) {
    w1.mutable_data()[i * 4 * c + 2 * i] = 1.0;
    w1.mutable_data()[i * 4 * c + 2 * i + 1] = -1.0;
    w2.mutable_data()[(2 * i) * c + i] = 1.0;
    w2.mutable_data()[(2 * i + 1) * c + i] = -1.0;
  }
  const ChannelMlpParams p{{{w1, Tensor({4 * c})}, {w2, Tensor({c})}}};
  const Tensor x({c}, {0.75, -1.5});
  const Tensor y = channel_mlp(x, p);
  EXPECT_NEAR(y[0], 0.75, 1e-15);
  EXPECT_NEAR(y[1], -1.5, 1e-15);
}

TEST(ChannelMlp, HiddenWidthIsFourC) {
  Rng rng(21);
  const Model model = Model::build(ModelConfig::preset("S"), rng);
  const auto& mlp = model.stages[0].layers[0].mlp;
  ASSERT_EQ(mlp.layers.size(), 2u);
  EXPECT_EQ(mlp.layers[0].weight.shape(), (Shape{96, 384}));
  EXPECT_EQ(mlp.layers[1].weight.shape(), (Shape{384, 96}));
}

MixerLayerParams zero_branch_copy(const MixerLayerParams& src) {
  MixerLayerParams p = src;
  auto zero = [](Tensor& t) { t = Tensor(t.shape(), 0.0); };
  zero(p.token_mixer.out.weight);
  zero(p.token_mixer.out.bias);
  zero(p.mlp.layers.back().weight);
  zero(p.mlp.layers.back().bias);
  return p;
}

TEST(MixerLayer, ZeroBranchOutputsAreIdentity) {
  Rng rng(22);
  const Model model = Model::build(ModelConfig::tiny(), rng);
  for (const auto& stage : model.stages) {
    for (const auto& layer : stage.layers) {
      const auto p = zero_branch_copy(layer);
      const Tensor x = random_tensor({2, stage.plan.h, stage.plan.w, stage.plan.channels}, rng, -5, 5);
      const Tensor y = mixer_layer(x, p);
      for (std::size_t i = 0; i < x.numel(); ++i) ASSERT_EQ(y[i], x[i]);
    }
  }
}

TEST(MixerLayer, EvalEqualsTrainWithoutDropPath) {
  Rng rng(23);
  const Model model = Model::build(ModelConfig::tiny(), rng);
  const auto& layer = model.stages[0].layers[0];
  ASSERT_EQ(layer.drop_prob, 0.0);
  const Tensor x = random_tensor({2, 8, 8, 8}, rng);
  Rng drop_rng(1);
  const Tensor a = mixer_layer(x, layer);
  const Tensor b = mixer_layer(x, layer, {true, &drop_rng});
  for (std::size_t i = 0; i < x.numel(); ++i) EXPECT_EQ(a[i], b[i]);
}

TEST(MixerLayer, StochasticDepthDropsWholeSamples) {
  ModelConfig cfg = ModelConfig::tiny();
  cfg.depths = {2, 1, 1, 1};
  cfg.drop_path_rate = 0.5;
  Rng rng(24);
  const Model model = Model::build(cfg, rng);
  // Linear schedule over all five layers: 0, 0.125, ..., 0.5.
  EXPECT_EQ(model.stages[0].layers[0].drop_prob, 0.0);
  EXPECT_DOUBLE_EQ(model.stages[0].layers[1].drop_prob, 0.125);
  EXPECT_DOUBLE_EQ(model.stages[3].layers[0].drop_prob, 0.5);

  MixerLayerParams layer = model.stages[3].layers[0];
  layer.drop_prob = 1.0;  // always drop: training output is the input
  const Tensor x = random_tensor({3, 1, 1, 64}, rng);
  Rng drop_rng(2);
  const Tensor y = mixer_layer(x, layer, {true, &drop_rng});
  for (std::size_t i = 0; i < x.numel(); ++i) EXPECT_EQ(y[i], x[i]);
  EXPECT_THROW(mixer_layer(x, layer, {true, nullptr}), std::logic_error);
}

TEST(Forward, StageScheduleForAllVariants) {
  for (const char* v : {"T", "S", "B", "L"}) {
    const ModelConfig cfg = ModelConfig::preset(v);
    const auto plans = plan_stages(cfg);
    ASSERT_EQ(plans.size(), 4u);
    const std::size_t sides[] = {56, 28, 14, 7};
    for (std::size_t s = 0; s < 4; ++s) {
      EXPECT_EQ(plans[s].h, sides[s]);
      EXPECT_EQ(plans[s].w, sides[s]);
      EXPECT_EQ(plans[s].channels, cfg.base_dim << s);
      EXPECT_EQ(plans[s].group_size, 7u);
      EXPECT_EQ(plans[s].layers.size(), cfg.depths[s]);
      for (std::size_t l = 0; l < plans[s].layers.size(); ++l) {
        EXPECT_EQ(plans[s].layers[l], l % 2 ? Aggregation::Global : Aggregation::Local);
      }
    }
  }
}

TEST(Forward, TinyVariantShapesAtFullResolution) {
  Rng rng(25);
  const Model model = Model::build(ModelConfig::preset("T"), rng);
  // Trace the stage shapes through the real pipeline.
  Tensor x = cross_scale_embed(random_tensor({224, 224, 3}, rng), model.embed);
  const std::size_t sides[] = {56, 28, 14, 7}, dims[] = {64, 128, 256, 512};
  for (std::size_t s = 0; s < 4; ++s) {
    if (s) x = patch_merge(x, model.merges[s - 1]);
    for (const auto& layer : model.stages[s].layers) {
      const Tensor y = mixer_layer(x, layer);
      ASSERT_EQ(y.shape(), x.shape());
      x = y;
    }
    EXPECT_EQ(x.shape(), (Shape{sides[s], sides[s], dims[s]}));
  }
  const Tensor logits = forward(model, random_tensor({224, 224, 3}, rng));
  EXPECT_EQ(logits.shape(), (Shape{1000}));
}

TEST(Forward, EvalIsDeterministicAndBatchConsistent) {
  Rng rng(26);
  const Model model = Model::build(ModelConfig::tiny(), rng);
  const Tensor img = random_tensor({32, 32, 3}, rng);
  const Tensor a = forward(model, img), b = forward(model, img);
  for (std::size_t i = 0; i < a.numel(); ++i) EXPECT_EQ(a[i], b[i]);
  Tensor batch({2, 32, 32, 3});
  std::copy(img.data().begin(), img.data().end(), batch.mutable_data().begin());
  std::copy(img.data().begin(), img.data().end(), batch.mutable_data().begin() + 3072);
  const Tensor logits = forward(model, batch);
  ASSERT_EQ(logits.shape(), (Shape{2, 4}));
  for (std::size_t k = 0; k < 4; ++k) {
    EXPECT_NEAR(logits[k], a[k], 1e-12);
    EXPECT_EQ(logits[k], logits[4 + k]);
  }
  EXPECT_THROW(forward(model, Tensor({64, 64, 3})), ShapeError);
}

TEST(Model, ParameterNamesAreUniqueAndStable) {
  Rng r1(27), r2(99);
  const Model a = Model::build(ModelConfig::tiny(), r1), b = Model::build(ModelConfig::tiny(), r2);
  const auto pa = a.parameters(), pb = b.parameters();
  ASSERT_EQ(pa.size(), pb.size());
  std::set<std::string> names;
  for (std::size_t i = 0; i < pa.size(); ++i) {
    EXPECT_EQ(pa[i].name, pb[i].name);
    EXPECT_TRUE(names.insert(pa[i].name).second) << pa[i].name;
  }
  EXPECT_TRUE(names.count("embed.k4.kernel"));
  EXPECT_TRUE(names.count("stage1.layer0.token_mixer.mix.weight"));
  EXPECT_TRUE(names.count("head.bias"));
}

TEST(Model, InitializationFollowsTheRecipe) {
  Rng rng(28);
  const Model model = Model::build(ModelConfig::preset("T"), rng);
  const auto& mixer = model.stages[2].layers[0].token_mixer;
  double sq = 0.0;
  for (double v : mixer.mix_weight.data()) sq += v * v;
  const double std_mix = std::sqrt(sq / static_cast<double>(mixer.mix_weight.numel()));
  EXPECT_NEAR(std_mix, 1e-4 * 0.88, 1e-5);  // std of N(0, s) truncated at 2s is 0.88 s
  for (double v : mixer.mix_bias.data()) EXPECT_EQ(v, 1.0);
  for (const auto& p : model.parameters()) {
    if (p.init != Init::TruncNormal) continue;
    for (double v : p.tensor.data()) ASSERT_LE(std::abs(v), 0.04) << p.name;
  }
  for (double v : model.stages[0].layers[0].norm1.gain.data()) EXPECT_EQ(v, 1.0);
  for (double v : model.head.bias.data()) EXPECT_EQ(v, 0.0);
}

TEST(Model, DecayExemptsBiasesAndNorms) {
  Rng rng(29);
  const Model model = Model::build(ModelConfig::tiny(), rng);
  for (const auto& p : model.parameters()) {
    const bool exempt = p.name.find("bias") != std::string::npos || p.name.find("norm") != std::string::npos;
    EXPECT_EQ(p.decay, !exempt) << p.name;
  }
}

TEST(Config, TinyGroupSizeShrinksOnSmallStages) {
  const ModelConfig tiny = ModelConfig::tiny();
  EXPECT_NO_THROW(tiny.validate());
  EXPECT_EQ(tiny.stage_group_size(0), 2u);
  EXPECT_EQ(tiny.stage_group_size(3), 1u);  // 1 x 1 feature map
  ModelConfig t = ModelConfig::preset("T");
  t.group_size = 2;  // stage 4 is 7 x 7
  EXPECT_EQ(t.stage_group_size(2), 2u);
  EXPECT_EQ(t.stage_group_size(3), 1u);
  t.group_size = 4;
  EXPECT_EQ(t.stage_group_size(0), 4u);
  EXPECT_EQ(t.stage_group_size(2), 2u);  // 14 = 2 * 7
}

TEST(Config, ValidationErrors) {
  ModelConfig c = ModelConfig::tiny();
  c.image_h = 48;
  EXPECT_THROW(c.validate(), ConfigError);
  c = ModelConfig::tiny();
  c.heads[1] = 0;
  EXPECT_THROW(c.validate(), ConfigError);
  EXPECT_THROW(ModelConfig::preset("XL"), ConfigError);
}

TEST(Config, TextRoundTripAndOverrides) {
  const ModelConfig t = ModelConfig::preset("B");
  EXPECT_EQ(parse_config(t.to_text()), t);
  EXPECT_TRUE(t.is_canonical());
  const ModelConfig c = parse_config("# comment\nvariant=T\ng=2\nd = 3\ndepths=1,2,3,4\n", ModelConfig::preset("T"));
  EXPECT_EQ(c.group_size, 2u);
  EXPECT_EQ(c.rank, 3u);
  EXPECT_EQ(c.depths, (std::array<std::size_t, 4>{1, 2, 3, 4}));
  EXPECT_FALSE(c.is_canonical());
  EXPECT_THROW(parse_config("bogus=1"), ConfigError);
  EXPECT_THROW(parse_config("depths=1,2"), ConfigError);
  EXPECT_THROW(parse_config("g=abc"), ConfigError);
}

TEST(EndToEnd, GradientMatchesFiniteDifferencesOnTinyConfig) {
  Rng rng(30);
  Model model = Model::build(ModelConfig::tiny(), rng);
  training::GradCheckOptions opts;
  opts.samples = 250;
  const auto report = training::gradient_check(model, opts, rng);
  ASSERT_TRUE(report.finite);
  EXPECT_EQ(report.entries.size(), 250u);
  EXPECT_LT(report.max_rel_err, 1e-5) << report.worst_param;
  // Every tensor is sampled at least once.
  std::set<std::string> seen;
  for (const auto& e : report.entries) seen.insert(e.param);
  EXPECT_EQ(seen.size(), model.parameters().size());
}

TEST(EndToEnd, CorruptedBackwardIsDetected) {
  Rng rng(31);
  Model model = Model::build(ModelConfig::tiny(), rng);
  testing::set_corrupt_gelu_backward(true);
  const auto report = training::gradient_check(model, {}, rng);
  testing::set_corrupt_gelu_backward(false);
  EXPECT_GT(report.max_rel_err, 1e-5);
}

}  // namespace
}  // namespace csmx
