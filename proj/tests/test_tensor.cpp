#include <gtest/gtest.h>

#include <cmath>

#include "csmx/ops.h"
#include "support.h"

namespace csmx {
namespace {

using test::fd_gradient_error;
using test::random_extent;
using test::random_tensor;

void expect_values(const Tensor& t, const Shape& shape, const std::vector<double>& values) {
  ASSERT_EQ(t.shape(), shape);
  for (std::size_t i = 0; i < values.size(); ++i) EXPECT_DOUBLE_EQ(t[i], values[i]) << "index " << i;
}

TEST(Tensor, ShapeInvariants) {
  Tensor t({2, 3}, 1.5);
  EXPECT_EQ(t.numel(), 6u);
  EXPECT_FALSE(t.has_grad());
  EXPECT_THROW(Tensor({2, 0}), ShapeError);
  EXPECT_THROW(Tensor({2, 2}, std::vector<double>{1, 2, 3}), ShapeError);
  t.grad_buffer();
  EXPECT_EQ(t.grad().size(), t.numel());
}

TEST(Matmul, IdentityRight) {
  const Tensor a({2, 2}, {1, 2, 3, 4});
  const Tensor eye({2, 2}, {1, 0, 0, 1});
  expect_values(ops::matmul(a, eye), {2, 2}, {1, 2, 3, 4});
}

TEST(Matmul, IdentityLeft) {
  const Tensor eye({2, 2}, {1, 0, 0, 1});
  const Tensor b({2, 2}, {5, 6, 7, 8});
  expect_values(ops::matmul(eye, b), {2, 2}, {5, 6, 7, 8});
}

TEST(Matmul, HandContraction) {
  expect_values(ops::matmul(Tensor({1, 2}, {1, 2}), Tensor({2, 1}, {3, 4})), {1, 1}, {11});
}

TEST(Matmul, MismatchNamesBothShapes) {
  try {
    ops::matmul(Tensor({2, 3}), Tensor({2, 2}));
    FAIL() << "expected ShapeError";
  } catch (const ShapeError& e) {
    const std::string msg = e.what();
    EXPECT_NE(msg.find("[2,3]"), std::string::npos) << msg;
    EXPECT_NE(msg.find("[2,2]"), std::string::npos) << msg;
  }
}

TEST(Conv2d, PatchEmbeddingShapes) {
  const Tensor image({224, 224, 3});
  EXPECT_EQ(ops::conv2d(image, Tensor({4, 4, 3, 5}), Tensor(), 4, 0).shape(), (Shape{56, 56, 5}));
  EXPECT_EQ(ops::conv2d(image, Tensor({32, 32, 3, 2}), Tensor(), 4, 14).shape(), (Shape{56, 56, 2}));
}

TEST(Conv2d, OutputExtentFormulaForModelKernels) {
  const std::size_t embed_pads[] = {0, 2, 6, 14};
  const std::size_t embed_kernels[] = {4, 8, 16, 32};
  for (std::size_t side : {32u, 64u, 224u}) {
    for (int i = 0; i < 4; ++i) {
      EXPECT_EQ(ops::conv_output_extent(side, embed_kernels[i], 4, embed_pads[i]), side / 4);
    }
    EXPECT_EQ(ops::conv_output_extent(side, 2, 2, 0), side / 2);
    EXPECT_EQ(ops::conv_output_extent(side, 4, 2, 1), side / 2);
  }
  EXPECT_EQ(ops::conv_output_extent(7, 3, 2, 0), 3u);
  EXPECT_THROW(ops::conv_output_extent(2, 5, 1, 1), ShapeError);
}

TEST(Conv2d, ZeroKernelGivesZeroOutput) {
  Rng rng(3);
  const Tensor out = ops::conv2d(random_tensor({8, 8, 2}, rng), Tensor({3, 3, 2, 4}), Tensor(), 1, 1);
  for (double v : out.data()) EXPECT_EQ(v, 0.0);
}

TEST(Conv2d, CrossCorrelationWithoutFlip) {
  // 3x3 input, 2x2 kernel picking the bottom-right tap.
  const Tensor in({3, 3, 1}, {1, 2, 3, 4, 5, 6, 7, 8, 9});
  const Tensor k({2, 2, 1, 1}, {0, 0, 0, 1});
  expect_values(ops::conv2d(in, k, Tensor(), 1, 0), {2, 2, 1}, {5, 6, 8, 9});
}

TEST(Elementwise, Identities) {
  Rng rng(1);
  const Tensor x = random_tensor({3, 4}, rng);
  const Tensor y = ops::mul(x, Tensor(x.shape(), 1.0));
  for (std::size_t i = 0; i < x.numel(); ++i) EXPECT_EQ(y[i], x[i]);
  const Tensor zero = ops::mul(x, Tensor(x.shape(), 0.0));
  for (double v : zero.data()) EXPECT_EQ(v, 0.0);
  EXPECT_EQ(ops::gelu(Tensor::scalar(0.0)).item(), 0.0);
  EXPECT_THROW(ops::add(Tensor({2}), Tensor({3})), ShapeError);
  EXPECT_THROW(ops::mul(Tensor({2, 1}), Tensor({1, 2})), ShapeError);
}

TEST(Elementwise, GeluIsExact) {
  const double x = 1.3;
  const double expected = 0.5 * x * (1.0 + std::erf(x / std::sqrt(2.0)));
  EXPECT_DOUBLE_EQ(ops::gelu(Tensor::scalar(x)).item(), expected);
}

TEST(LayerNorm, ConstantRowGivesZeros) {
  const Tensor out = ops::layer_norm(Tensor({2, 4}, 3.0), Tensor({4}, 1.0), Tensor({4}, 0.0));
  for (double v : out.data()) EXPECT_EQ(v, 0.0);
}

TEST(LayerNorm, AlreadyStandardized) {
  const Tensor out = ops::layer_norm(Tensor({2}, {1, -1}), Tensor({2}, 1.0), Tensor({2}, 0.0), 1e-15);
  EXPECT_NEAR(out[0], 1.0, 1e-12);
  EXPECT_NEAR(out[1], -1.0, 1e-12);
}

TEST(LayerNorm, ZeroGainGivesBias) {
  Rng rng(2);
  const Tensor out = ops::layer_norm(random_tensor({3, 2}, rng), Tensor({2}, 0.0), Tensor({2}, {0.25, -4}));
  for (std::size_t i = 0; i < out.numel(); ++i) EXPECT_EQ(out[i], i % 2 ? -4.0 : 0.25);
}

TEST(Softmax, RowsSumToOne) {
  Rng rng(9);
  for (int trial = 0; trial < 50; ++trial) {
    const std::size_t rows = random_extent(rng, 1, 6), k = random_extent(rng, 1, 12);
    const Tensor p = ops::softmax(random_tensor({rows, k}, rng, -30, 30));
    for (std::size_t r = 0; r < rows; ++r) {
      double s = 0.0;
      for (std::size_t j = 0; j < k; ++j) {
        EXPECT_GE(p[r * k + j], 0.0);
        s += p[r * k + j];
      }
      EXPECT_NEAR(s, 1.0, 1e-12);
    }
  }
}

TEST(Backward, SumGivesOnes) {
  Tensor x({3, 2}, {1, 2, 3, 4, 5, 6});
  x.set_requires_grad(true);
  Tape tape;
  TapeScope scope(tape);
  backward(ops::sum(x));
  for (double g : x.grad()) EXPECT_EQ(g, 1.0);
}

TEST(Backward, SquareGivesTwoX) {
  Tensor x({4}, {1, -2, 0.5, 3});
  x.set_requires_grad(true);
  Tape tape;
  TapeScope scope(tape);
  backward(ops::sum(ops::mul(x, x)));
  for (std::size_t i = 0; i < 4; ++i) EXPECT_EQ(x.grad()[i], 2.0 * x[i]);
}

TEST(Backward, RepeatedCallsAccumulate) {
  Tensor x({2}, {1, 2});
  x.set_requires_grad(true);
  Tape tape;
  TapeScope scope(tape);
  const Tensor loss = ops::sum(ops::scale(x, 3.0));
  tape.backward(loss);
  x.zero_grad();
  // Intermediate grads are not reset, so a second replay doubles them.
  tape.backward(loss);
  EXPECT_GE(x.grad()[0], 3.0);
  x.zero_grad();
  EXPECT_EQ(x.grad()[0], 0.0);
}

TEST(Backward, RejectsNonScalarAndDetachedLoss) {
  Tensor x({2}, {1, 2});
  x.set_requires_grad(true);
  Tape tape;
  TapeScope scope(tape);
  EXPECT_THROW(tape.backward(ops::scale(x, 2.0)), ShapeError);
  EXPECT_THROW(tape.backward(Tensor::scalar(1.0)), std::logic_error);
}

TEST(Backward, OnlyRecordsWhenNeeded) {
  Tape tape;
  TapeScope scope(tape);
  ops::add(Tensor({2}, 1.0), Tensor({2}, 2.0));
  EXPECT_EQ(tape.size(), 0u);
  Tensor x({2}, 1.0);
  x.set_requires_grad(true);
  ops::add(x, Tensor({2}, 2.0));
  EXPECT_EQ(tape.size(), 1u);
}

TEST(Backward, CorruptionHookChangesGeluGradient) {
  Tensor x({1}, {0.7});
  auto grad_of = [&] {
    x.set_requires_grad(true);
    x.zero_grad();
    Tape tape;
    TapeScope scope(tape);
    backward(ops::sum(ops::gelu(x)));
    return x.grad()[0];
  };
  const double clean = grad_of();
  testing::set_corrupt_gelu_backward(true);
  const double corrupt = grad_of();
  testing::set_corrupt_gelu_backward(false);
  EXPECT_NEAR(corrupt / clean, 1.0 + 1e-3, 1e-12);
}

// Finite-difference checks: 100 random shape / seed combinations per op,
// inputs uniform in [-1, 1], step 1e-5, normwise relative error < 1e-6.
constexpr int kTrials = 100;
constexpr double kOpTolerance = 1e-6;

template <class Make>
void check_op(const char* name, Make make) {
  double worst = 0.0;
  for (int seed = 0; seed < kTrials; ++seed) {
    Rng rng(1000 + static_cast<std::uint64_t>(seed));
    auto [fn, inputs] = make(rng);
    const double err = fd_gradient_error(fn, inputs, rng);
    worst = std::max(worst, err);
    ASSERT_LT(err, kOpTolerance) << name << " seed " << seed;
  }
  ::testing::Test::RecordProperty(name, std::to_string(worst));
}

using Case = std::pair<test::Fn, std::vector<Tensor>>;

TEST(GradCheck, Matmul) {
  check_op("matmul", [](Rng& r) {
    const std::size_t b = random_extent(r, 1, 3), p = random_extent(r, 1, 4), q = random_extent(r, 1, 5),
                      n = random_extent(r, 1, 4);
    return Case{[](const std::vector<Tensor>& in) { return ops::matmul(in[0], in[1]); },
                {random_tensor({b, p, q}, r), random_tensor({q, n}, r)}};
  });
}

TEST(GradCheck, BatchedMatmul) {
  check_op("batched_matmul", [](Rng& r) {
    const std::size_t n = random_extent(r, 1, 3), p = random_extent(r, 1, 4), q = random_extent(r, 1, 4),
                      c = random_extent(r, 1, 4);
    return Case{[](const std::vector<Tensor>& in) { return ops::batched_matmul(in[0], in[1]); },
                {random_tensor({n, p, q}, r), random_tensor({n, q, c}, r)}};
  });
}

TEST(GradCheck, Linear) {
  check_op("linear", [](Rng& r) {
    const std::size_t p = random_extent(r, 1, 5), q = random_extent(r, 1, 5), c = random_extent(r, 1, 5);
    return Case{[](const std::vector<Tensor>& in) { return ops::linear(in[0], in[1], in[2]); },
                {random_tensor({p, q}, r), random_tensor({q, c}, r), random_tensor({c}, r)}};
  });
}

TEST(GradCheck, BatchedLinear) {
  check_op("batched_linear", [](Rng& r) {
    const std::size_t n = random_extent(r, 1, 3), p = random_extent(r, 1, 4), q = random_extent(r, 1, 4),
                      c = random_extent(r, 1, 4);
    return Case{[](const std::vector<Tensor>& in) { return ops::batched_linear(in[0], in[1], in[2]); },
                {random_tensor({n, p, q}, r), random_tensor({n, q, c}, r), random_tensor({n, c}, r)}};
  });
}

TEST(GradCheck, Elementwise) {
  check_op("elementwise", [](Rng& r) {
    const Shape s{random_extent(r, 1, 4), random_extent(r, 1, 5)};
    return Case{[](const std::vector<Tensor>& in) {
                  const Tensor a = ops::add(in[0], in[1]);
                  const Tensor b = ops::sub(ops::mul(a, in[1]), ops::scale(in[0], 0.3));
                  return ops::add_scalar(ops::add_bias(b, in[2]), 0.5);
                },
                {random_tensor(s, r), random_tensor(s, r), random_tensor({s.back()}, r)}};
  });
}

TEST(GradCheck, Gelu) {
  check_op("gelu", [](Rng& r) {
    return Case{[](const std::vector<Tensor>& in) { return ops::gelu(in[0]); },
                {random_tensor({random_extent(r, 1, 6), random_extent(r, 1, 6)}, r)}};
  });
}

TEST(GradCheck, LayerNorm) {
  check_op("layer_norm", [](Rng& r) {
    // With c = 2 the normalized row is +-1 up to eps and its x-gradient is
    // eps-sized, below the finite-difference noise; start at c = 3.
    const std::size_t rows = random_extent(r, 1, 4), c = random_extent(r, 3, 6);
    return Case{[](const std::vector<Tensor>& in) { return ops::layer_norm(in[0], in[1], in[2]); },
                {random_tensor({rows, c}, r), random_tensor({c}, r), random_tensor({c}, r)}};
  });
}

TEST(GradCheck, Reductions) {
  check_op("reductions", [](Rng& r) {
    const Shape s{random_extent(r, 1, 3), random_extent(r, 1, 4), random_extent(r, 1, 3)};
    const std::size_t axis = static_cast<std::size_t>(r.below(3));
    std::vector<double> factors(s[0]);
    for (auto& f : factors) f = 2.0 * r.uniform() - 1.0;
    return Case{[axis, factors](const std::vector<Tensor>& in) {
                  const Tensor a = ops::mean_axis(ops::scale_leading(in[0], factors), axis);
                  const Tensor b = ops::sum_leading(in[0]);
                  return ops::concat_last({ops::reshape(a, {a.numel()}), ops::reshape(b, {b.numel()}),
                                           ops::reshape(ops::sum(in[0]), {1}), ops::reshape(ops::mean(in[0]), {1})});
                },
                {random_tensor(s, r)}};
  });
}

TEST(GradCheck, ConcatLast) {
  check_op("concat_last", [](Rng& r) {
    const std::size_t rows = random_extent(r, 1, 4);
    return Case{[](const std::vector<Tensor>& in) { return ops::concat_last({in[0], in[1], in[2]}); },
                {random_tensor({rows, random_extent(r, 1, 3)}, r), random_tensor({rows, random_extent(r, 1, 3)}, r),
                 random_tensor({rows, random_extent(r, 1, 3)}, r)}};
  });
}

TEST(GradCheck, Conv2d) {
  check_op("conv2d", [](Rng& r) {
    const std::size_t k = random_extent(r, 1, 3), stride = random_extent(r, 1, 2), pad = random_extent(r, 0, 1);
    const std::size_t h = random_extent(r, k, 5), w = random_extent(r, k, 5);
    const std::size_t cin = random_extent(r, 1, 2), cout = random_extent(r, 1, 3);
    const bool batched = r.bernoulli(0.5);
    const Shape in_shape = batched ? Shape{2, h, w, cin} : Shape{h, w, cin};
    return Case{[stride, pad](const std::vector<Tensor>& in) { return ops::conv2d(in[0], in[1], in[2], stride, pad); },
                {random_tensor(in_shape, r), random_tensor({k, k, cin, cout}, r), random_tensor({cout}, r)}};
  });
}

TEST(GradCheck, Permute) {
  check_op("permute", [](Rng& r) {
    const Shape s{random_extent(r, 1, 3), random_extent(r, 1, 3), random_extent(r, 1, 3)};
    std::vector<std::size_t> perm{0, 1, 2};
    std::swap(perm[r.below(3)], perm[r.below(3)]);
    const Shape out{s[perm[0]], s[perm[1]], s[perm[2]]};
    return Case{[s, perm, out](const std::vector<Tensor>& in) { return ops::permute(in[0], s, perm, out); },
                {random_tensor(s, r)}};
  });
}

TEST(GradCheck, Softmax) {
  check_op("softmax", [](Rng& r) {
    return Case{[](const std::vector<Tensor>& in) { return ops::softmax(in[0]); },
                {random_tensor({random_extent(r, 1, 4), random_extent(r, 1, 6)}, r)}};
  });
}

TEST(GradCheck, RandomThreeOpGraph) {
  check_op("three_op_graph", [](Rng& r) {
    const std::size_t p = random_extent(r, 1, 4), q = random_extent(r, 1, 4);
    return Case{[](const std::vector<Tensor>& in) {
                  return ops::mul(ops::gelu(ops::matmul(in[0], in[1])), ops::matmul(in[0], in[2]));
                },
                {random_tensor({p, q}, r), random_tensor({q, q}, r), random_tensor({q, q}, r)}};
  });
}

}  // namespace
}  // namespace csmx
