#include <gtest/gtest.h>

#include <filesystem>
#include <fstream>
#include <limits>

#include "csmx/checkpoint.h"
#include "csmx/trainer.h"

namespace csmx::training {
namespace {

namespace fs = std::filesystem;

fs::path scratch(const std::string& name) {
  const fs::path dir = fs::temp_directory_path() / ("csmx_test_trainer_" + name);
  fs::remove_all(dir);
  fs::create_directories(dir);
  return dir;
}

std::string slurp(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  return {std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
}

struct Fixture {
  data::Dataset train_set, val_set;
  Recipe recipe;
  Fixture() {
    const data::Dataset all = data::synth_dataset(192, 4, 32, 32, 7);
    train_set = all.slice(0, 128);
    val_set = all.slice(128, 192);
    recipe.epochs = 4;
    recipe.batch = 32;
    recipe.base_lr = 2e-3;
    recipe.warmup_epochs = 1;
    recipe.ema_decay = 0.9;
    recipe.eval_batch = 64;
  }
  Model model(std::uint64_t seed) const {
    Rng rng(seed);
    return Model::build(ModelConfig::tiny(), rng);
  }
};

TEST(Trainer, LossDropsAndLrFollowsSchedule) {
  Fixture f;
  f.recipe.epochs = 6;
  Model m = f.model(0);
  Rng rng(0);
  const fs::path dir = scratch("loss");
  const auto result = train(m, f.train_set, f.val_set, f.recipe, rng, {dir, {}, {}, {}});
  ASSERT_TRUE(result.completed);
  ASSERT_EQ(result.history.size(), 6u);
  EXPECT_LT(result.history.back().train_loss, 0.5 * result.history.front().train_loss);
  const SchedulePlan plan = f.recipe.schedule();
  for (const auto& row : result.history) EXPECT_EQ(row.lr, lr_at(row.epoch, plan)) << row.epoch;
  EXPECT_EQ(parse_metrics_csv(slurp(dir / "metrics.csv")), result.history);
  for (const char* f2 : {"last.ckpt", "best.ckpt", "final.ckpt"}) EXPECT_TRUE(fs::exists(dir / f2)) << f2;
  // Final checkpoint reproduces the logged accuracy.
  const auto ck = data::load_checkpoint(dir / "final.ckpt");
  Rng r2(1);
  Model restored = Model::build(ck.config, r2);
  data::restore_parameters(restored, ck.params);
  EXPECT_EQ(accuracy(restored, f.val_set, f.recipe.norm, f.recipe.eval_crop, f.recipe.eval_batch),
            result.history.back().val_acc);
  fs::remove_all(dir);
}

TEST(Trainer, SeededRunsAreByteIdentical) {
  Fixture f;
  f.recipe.epochs = 2;
  const fs::path a = scratch("det_a"), b = scratch("det_b");
  for (const auto& dir : {a, b}) {
    Model m = f.model(3);
    Rng rng(3);
    train(m, f.train_set, f.val_set, f.recipe, rng, {dir, {}, {}, {}});
  }
  EXPECT_EQ(slurp(a / "metrics.csv"), slurp(b / "metrics.csv"));
  EXPECT_EQ(slurp(a / "final.ckpt"), slurp(b / "final.ckpt"));
  fs::remove_all(a);
  fs::remove_all(b);
}

TEST(Trainer, ResumeMatchesUninterruptedRun) {
  Fixture f;
  const fs::path full = scratch("full"), split = scratch("split");
  {
    Model m = f.model(4);
    Rng rng(4);
    train(m, f.train_set, f.val_set, f.recipe, rng, {full, {}, {}, {}});
  }
  {
    Model m = f.model(4);
    Rng rng(4);
    const auto first = train(m, f.train_set, f.val_set, f.recipe, rng, {split, {}, 2, {}});
    EXPECT_FALSE(first.completed);
    EXPECT_EQ(first.history.size(), 2u);
  }
  {
    Model m = f.model(99);
    Rng rng(99);
    const auto second = train(m, f.train_set, f.val_set, f.recipe, rng, {split, split / "last.ckpt", {}, {}});
    EXPECT_TRUE(second.completed);
    EXPECT_EQ(second.history.size(), 4u);
  }
  EXPECT_EQ(slurp(full / "metrics.csv"), slurp(split / "metrics.csv"));
  EXPECT_EQ(slurp(full / "final.ckpt"), slurp(split / "final.ckpt"));
  fs::remove_all(full);
  fs::remove_all(split);
}

TEST(Trainer, ResumeRejectsDifferentConfig) {
  Fixture f;
  f.recipe.epochs = 2;
  const fs::path dir = scratch("cfg");
  Model m = f.model(5);
  Rng rng(5);
  train(m, f.train_set, f.val_set, f.recipe, rng, {dir, {}, 1, {}});
  ModelConfig other = ModelConfig::tiny();
  other.base_dim = 16;
  Rng r2(5);
  Model m2 = Model::build(other, r2);
  EXPECT_THROW(train(m2, f.train_set, f.val_set, f.recipe, r2, {dir, dir / "last.ckpt", {}, {}}),
               data::CheckpointError);
  fs::remove_all(dir);
}

TEST(Trainer, NonFiniteLossIsReported) {
  Fixture f;
  f.recipe.epochs = 1;
  Model m = f.model(6);
  m.parameters().back().tensor.mutable_data()[0] = std::numeric_limits<double>::quiet_NaN();
  Rng rng(6);
  const fs::path dir = scratch("nan");
  try {
    train(m, f.train_set, f.val_set, f.recipe, rng, {dir, {}, {}, {}});
    FAIL() << "expected NumericError";
  } catch (const NumericError& e) {
    EXPECT_NE(std::string(e.what()).find("epoch 0, batch 0"), std::string::npos) << e.what();
  }
  fs::remove_all(dir);
}

TEST(Trainer, DatasetMismatchesAreDataErrors) {
  Fixture f;
  Model m = f.model(7);
  Rng rng(7);
  const fs::path dir = scratch("bad");
  const data::Dataset wrong_size = data::synth_dataset(8, 4, 16, 16, 0);
  EXPECT_THROW(train(m, wrong_size, f.val_set, f.recipe, rng, {dir, {}, {}, {}}), data::DataError);
  const data::Dataset wrong_classes = data::synth_dataset(8, 5, 32, 32, 0);
  EXPECT_THROW(train(m, wrong_classes, f.val_set, f.recipe, rng, {dir, {}, {}, {}}), data::DataError);
  EXPECT_THROW(train(m, f.train_set, f.val_set.slice(0, 0), f.recipe, rng, {dir, {}, {}, {}}), data::DataError);
  EXPECT_THROW(accuracy(m, f.val_set.slice(0, 0), f.recipe.norm, 0.9, 10), std::invalid_argument);
  fs::remove_all(dir);
}

TEST(Trainer, MetricsCsvRoundTrip) {
  const std::vector<EpochMetrics> rows{{0, 1e-6, 1.3862943611198906, 25.0, 25.0},
                                       {1, 0.002, 0.1 + 0.2, 100.0, 98.4375}};
  EXPECT_EQ(parse_metrics_csv(format_metrics_csv(rows)), rows);
  EXPECT_THROW(parse_metrics_csv("epoch,lr\n"), data::DataError);
  EXPECT_THROW(parse_metrics_csv(std::string(kMetricsHeader) + "\n1,2,x,4,5\n"), data::DataError);
}

}  // namespace
}  // namespace csmx::training
