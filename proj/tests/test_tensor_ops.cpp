#include <cmath>
#include <limits>

#include "test_util.hpp"

using namespace xres;
using xres::test::op_grad_error;
using xres::test::random_tensor;

namespace {

const Tensor<double>* const kNoBias = nullptr;

Tensor<double> mat(std::size_t r, std::size_t c, std::vector<double> v) { return Tensor<double>({r, c}, std::move(v)); }

std::vector<double> triple_loop(const Tensor<double>& a, const Tensor<double>& b) {
  const std::size_t n = a.dim(0), k = a.dim(1), m = b.dim(1);
  std::vector<double> out(n * m, 0.0);
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t j = 0; j < m; ++j)
      for (std::size_t q = 0; q < k; ++q) out[i * m + j] += a[i * k + q] * b[q * m + j];
  return out;
}

}  // namespace

TEST(Tensor, ShapeMustMatchPayload) {
  EXPECT_THROW(Tensor<double>({2, 3}, std::vector<double>(5)), DimensionError);
  Tensor<double> t({2, 3}, 1.5);
  EXPECT_EQ(t.numel(), 6u);
  EXPECT_THROW((void)t.item(), ContractError);
}

TEST(Matmul, IdentityAndHandExpansion) {
  const auto i2 = mat(2, 2, {1, 0, 0, 1});
  const auto a = mat(2, 2, {1, 2, 3, 4});
  auto r = matmul(i2, a);
  EXPECT_EQ(std::vector<double>(r.data().begin(), r.data().end()), (std::vector<double>{1, 2, 3, 4}));
  auto r2 = matmul(mat(2, 2, {1, 0, 0, 0}), mat(2, 2, {0, 1, 1, 0}));
  EXPECT_EQ(std::vector<double>(r2.data().begin(), r2.data().end()), (std::vector<double>{0, 1, 0, 0}));
}

TEST(Matmul, MatchesTripleLoop) {
  Rng rng(4);
  auto a = random_tensor({5, 7}, rng, 1.0, false);
  auto b = random_tensor({7, 3}, rng, 1.0, false);
  const auto ref = triple_loop(a, b);
  const auto out = matmul(a, b);
  ASSERT_EQ(out.shape(), (Shape{5, 3}));
  for (std::size_t i = 0; i < ref.size(); ++i) EXPECT_NEAR(out[i], ref[i], 1e-12);
}

TEST(Matmul, BatchedLeadingDims) {
  Rng rng(5);
  auto a = random_tensor({2, 3, 4}, rng, 1.0, false);
  auto b = random_tensor({2, 4, 2}, rng, 1.0, false);
  const auto out = matmul(a, b);
  ASSERT_EQ(out.shape(), (Shape{2, 3, 2}));
  for (std::size_t batch = 0; batch < 2; ++batch) {
    Tensor<double> ai({3, 4}, std::vector<double>(a.data().begin() + batch * 12, a.data().begin() + batch * 12 + 12));
    Tensor<double> bi({4, 2}, std::vector<double>(b.data().begin() + batch * 8, b.data().begin() + batch * 8 + 8));
    const auto ref = triple_loop(ai, bi);
    for (std::size_t i = 0; i < 6; ++i) EXPECT_NEAR(out[batch * 6 + i], ref[i], 1e-12);
  }
}

TEST(Matmul, ShapeMismatchNamesBothShapes) {
  try {
    (void)matmul(Tensor<double>({2, 3}), Tensor<double>({4, 2}));
    FAIL() << "expected DimensionError";
  } catch (const DimensionError& e) {
    const std::string msg = e.what();
    EXPECT_NE(msg.find("2x3"), std::string::npos) << msg;
    EXPECT_NE(msg.find("4x2"), std::string::npos) << msg;
  }
}

TEST(Matmul, GradientMatchesFiniteDifference) {
  Rng rng(6);
  auto b = random_tensor({3, 3}, rng, 1.0, false);
  EXPECT_LE(op_grad_error([&](const Tensor<double>& a) { return matmul(a, b); }, random_tensor({3, 3}, rng)), 1e-6);
  auto a = random_tensor({3, 3}, rng, 1.0, false);
  EXPECT_LE(op_grad_error([&](const Tensor<double>& bb) { return matmul(a, bb); }, random_tensor({3, 3}, rng)), 1e-6);
}

TEST(Softmax, UniformAndStable) {
  const auto u = softmax(Tensor<double>({4}, 0.0), 0);
  for (std::size_t i = 0; i < 4; ++i) EXPECT_DOUBLE_EQ(u[i], 0.25);
  const auto s = softmax(Tensor<double>({2}, std::vector<double>{1000.0, 0.0}), 0);
  EXPECT_NEAR(s[0], 1.0, 1e-12);
  EXPECT_NEAR(s[1], 0.0, 1e-12);
  EXPECT_TRUE(std::isfinite(s[0]) && std::isfinite(s[1]));
}

TEST(Softmax, RowsSumToOne) {
  Rng rng(7);
  auto x = random_tensor({6, 9}, rng, 20.0, false);
  for (std::size_t axis : {0u, 1u}) {
    const auto s = softmax(x, axis);
    const std::size_t outer = axis == 0 ? 9 : 6, len = axis == 0 ? 6 : 9;
    for (std::size_t o = 0; o < outer; ++o) {
      double total = 0;
      for (std::size_t i = 0; i < len; ++i) total += axis == 0 ? s[i * 9 + o] : s[o * 9 + i];
      EXPECT_NEAR(total, 1.0, 1e-12);
    }
  }
}

TEST(Softmax, Errors) {
  EXPECT_THROW((void)softmax(Tensor<double>({3}), 1), DimensionError);
  const double nan = std::numeric_limits<double>::quiet_NaN();
  EXPECT_THROW((void)softmax(Tensor<double>({2}, std::vector<double>{nan, 0.0}), 0), NumericError);
}

TEST(Softmax, JacobianMatchesFiniteDifference) {
  Rng rng(8);
  EXPECT_LE(op_grad_error([](const Tensor<double>& x) { return softmax(x, 0); }, random_tensor({5}, rng)), 1e-6);
  EXPECT_LE(op_grad_error([](const Tensor<double>& x) { return softmax(x, 1); }, random_tensor({3, 4}, rng)), 1e-6);
}

TEST(Conv2d, UnitKernelIsIdentity) {
  Rng rng(10);
  auto x = random_tensor({5, 5, 1}, rng, 1.0, false);
  const auto y = conv2d(x, Tensor<double>({1, 1, 1, 1}, 1.0), kNoBias, Conv2dSpec{});
  ASSERT_EQ(y.shape(), x.shape());
  for (std::size_t i = 0; i < x.numel(); ++i) EXPECT_EQ(y[i], x[i]);
}

TEST(Conv2d, KernelFivePadTwoKeepsShape) {
  Rng rng(11);
  auto x = random_tensor({12, 12, 6}, rng, 1.0, false);
  auto w = random_tensor({5, 5, 1, 6}, rng, 1.0, false);
  const auto y = conv2d(x, w, kNoBias, Conv2dSpec{1, 2, 6});
  EXPECT_EQ(y.shape(), (Shape{12, 12, 6}));
  auto w2 = random_tensor({3, 3, 6, 4}, rng, 1.0, false);
  EXPECT_EQ(conv2d(x, w2, kNoBias, Conv2dSpec{2, 1, 1}).shape(), (Shape{6, 6, 4}));
}

TEST(Conv2d, GroupsMustDivideChannels) {
  EXPECT_THROW((void)conv2d(Tensor<double>({4, 4, 6}), Tensor<double>({3, 3, 1, 4}), kNoBias, Conv2dSpec{1, 1, 4}), ConfigError);
}

TEST(Conv2d, GradientsMatchFiniteDifference) {
  Rng rng(12);
  auto x = random_tensor({6, 6, 2}, rng, 1.0, false);
  auto bias = random_tensor({3}, rng, 1.0, false);
  EXPECT_LE(op_grad_error([&](const Tensor<double>& w) { return conv2d(x, w, &bias, Conv2dSpec{1, 1, 1}); },
                          random_tensor({3, 3, 2, 3}, rng)),
            1e-5);
  auto w = random_tensor({3, 3, 2, 3}, rng, 1.0, false);
  EXPECT_LE(op_grad_error([&](const Tensor<double>& xx) { return conv2d(xx, w, &bias, Conv2dSpec{2, 1, 1}); },
                          random_tensor({6, 6, 2}, rng)),
            1e-5);
  auto dw = random_tensor({5, 5, 1, 2}, rng, 1.0, false);
  EXPECT_LE(op_grad_error([&](const Tensor<double>& xx) { return conv2d(xx, dw, kNoBias, Conv2dSpec{1, 2, 2}); },
                          random_tensor({6, 6, 2}, rng)),
            1e-5);
}

TEST(Pool2d, Examples) {
  Tensor<double> x({2, 2, 1}, std::vector<double>{1, 3, 5, 7});
  EXPECT_DOUBLE_EQ(pool2d(x, PoolMode::avg, 2, 2).item(), 4.0);
  EXPECT_DOUBLE_EQ(pool2d(x, PoolMode::max, 2, 2).item(), 7.0);
  Tensor<double> block({16, 16, 4}, 0.0);
  for (std::size_t i = 0; i < 256; ++i) block.mutable_data()[i * 4 + 2] = 1.0;
  const auto p = pool2d(block, PoolMode::avg, 16, 16);
  ASSERT_EQ(p.shape(), (Shape{1, 1, 4}));
  EXPECT_EQ(std::vector<double>(p.data().begin(), p.data().end()), (std::vector<double>{0, 0, 1, 0}));
}

TEST(Pool2d, IndivisibleExtentThrows) {
  EXPECT_THROW((void)pool2d(Tensor<double>({5, 4, 1}), PoolMode::avg, 2, 2), DimensionError);
}

TEST(Pool2d, MaxTieRoutesToLowestIndex) {
  Tensor<double> x({2, 2, 1}, 1.0);
  x.set_requires_grad();
  Tape<double> tape;
  TapeScope<double> scope(tape);
  auto l = sum(pool2d(x, PoolMode::max, 2, 2));
  backward(l);
  EXPECT_EQ(std::vector<double>(x.grad().begin(), x.grad().end()), (std::vector<double>{1, 0, 0, 0}));
}

TEST(Pool2d, GradientsMatchFiniteDifference) {
  Rng rng(13);
  EXPECT_LE(op_grad_error([](const Tensor<double>& x) { return pool2d(x, PoolMode::avg, 2, 2); },
                          random_tensor({4, 6, 3}, rng)),
            1e-5);
  EXPECT_LE(op_grad_error([](const Tensor<double>& x) { return pool2d(x, PoolMode::max, 2, 2); },
                          random_tensor({4, 6, 3}, rng)),
            1e-4);
}

TEST(Ops, ElementwiseGradients) {
  Rng rng(14);
  auto other = random_tensor({3, 4}, rng, 1.0, false);
  auto bias = random_tensor({4}, rng, 1.0, false);
  auto g = random_tensor({4}, rng, 1.0, false);
  auto b = random_tensor({4}, rng, 1.0, false);
  const std::vector<std::function<Tensor<double>(const Tensor<double>&)>> ops = {
      [&](const Tensor<double>& x) { return add(x, other); },
      [&](const Tensor<double>& x) { return sub(other, x); },
      [&](const Tensor<double>& x) { return mul(x, other); },
      [&](const Tensor<double>& x) { return scale(x, 2.5); },
      [&](const Tensor<double>& x) { return add_bias(x, bias); },
      [](const Tensor<double>& x) { return sigmoid(x); },
      [](const Tensor<double>& x) { return gelu(x); },
      [](const Tensor<double>& x) { return mean(x); },
      [](const Tensor<double>& x) { return transpose_last2(x); },
      [](const Tensor<double>& x) { return gather_rows(x, {2, 0, 2}); },
      [&](const Tensor<double>& x) { return concat_last<double>({x, other}); },
      [](const Tensor<double>& x) { return slice_last(x, 1, 2); },
      [&](const Tensor<double>& x) { return layer_norm(x, g, b); },
      [](const Tensor<double>& x) { return l2_normalize_rows(x); },
      [](const Tensor<double>& x) { return upsample_bilinear(reshape(x, {3, 2, 2}), 5, 4); },
  };
  for (std::size_t i = 0; i < ops.size(); ++i)
    EXPECT_LE(op_grad_error(ops[i], random_tensor({3, 4}, rng)), 1e-5) << "op " << i;
}

TEST(Ops, ReluAwayFromKink) {
  Tensor<double> x({6}, std::vector<double>{-2, -1, -0.5, 0.5, 1, 2});
  x.set_requires_grad();
  EXPECT_LE(op_grad_error([](const Tensor<double>& t) { return relu(t); }, x), 1e-8);
}

TEST(Ops, WeightedCrossEntropyGradient) {
  Rng rng(15);
  const std::vector<int> labels = {0, 3, 1};
  const std::vector<double> w = {0.5, 1.0, 2.0};
  EXPECT_LE(op_grad_error(
                [&](const Tensor<double>& z) {
                  return weighted_cross_entropy(z, std::span<const int>(labels), std::span<const double>(w));
                },
                random_tensor({3, 4}, rng)),
            1e-5);
  EXPECT_THROW((void)weighted_cross_entropy(Tensor<double>({1, 2}), std::span<const int>(std::vector<int>{2}),
                                            std::span<const double>(std::vector<double>{1.0})),
               DataError);
}

TEST(Backward, SumGivesOnesAndSquareGivesSix) {
  Tape<double> tape;
  TapeScope<double> scope(tape);
  Tensor<double> x({2, 3}, 0.7);
  x.set_requires_grad();
  auto l = sum(x);
  backward(l);
  for (double v : x.grad()) EXPECT_EQ(v, 1.0);
  EXPECT_TRUE(tape.empty());

  auto s = Tensor<double>::scalar(3.0);
  s.set_requires_grad();
  auto l2 = sum(mul(s, s));
  backward(l2);
  EXPECT_DOUBLE_EQ(s.grad()[0], 6.0);
}

TEST(Backward, ReusedTensorAccumulates) {
  Tape<double> tape;
  TapeScope<double> scope(tape);
  Tensor<double> x({3}, 1.0);
  x.set_requires_grad();
  auto l = sum(add(x, x));
  backward(l);
  for (double v : x.grad()) EXPECT_EQ(v, 2.0);
}

TEST(Backward, ContractErrors) {
  Tape<double> tape;
  TapeScope<double> scope(tape);
  Tensor<double> x({3}, 1.0);
  x.set_requires_grad();
  auto y = scale(x, 2.0);
  EXPECT_THROW(backward(y), ContractError);
  Tape<double> empty;
  TapeScope<double> inner(empty);
  auto c = Tensor<double>::scalar(1.0);
  EXPECT_THROW(backward(c), ContractError);
}

TEST(Backward, CompositeConvSoftmaxPool) {
  Rng rng(16);
  auto x = random_tensor({8, 8, 2}, rng, 1.0, false);
  auto w = random_tensor({3, 3, 2, 4}, rng, 0.5);
  auto f = [&] {
    auto h = conv2d(x, w, kNoBias, Conv2dSpec{1, 1, 1});
    auto p = pool2d(softmax(h, 2), PoolMode::avg, 2, 2);
    return sum(mul(p, p));
  };
  {
    Tape<double> tape;
    TapeScope<double> scope(tape);
    auto l = f();
    backward(l);
  }
  std::vector<std::size_t> idx;
  for (std::size_t i = 0; i < 20; ++i) idx.push_back(rng.below(w.numel()));
  EXPECT_LE(finite_diff_check<double>([&] { return f().item(); }, w, 1e-6, idx).max_rel_err, 1e-5);
}

TEST(Backward, DeterministicGradients) {
  auto run = [] {
    Rng rng(17);
    auto w = random_tensor({3, 3, 2, 2}, rng);
    auto x = random_tensor({6, 6, 2}, rng, 1.0, false);
    Tape<double> tape;
    TapeScope<double> scope(tape);
    auto l = sum(gelu(conv2d(x, w, kNoBias, Conv2dSpec{1, 1, 1})));
    backward(l);
    return std::vector<double>(w.grad().begin(), w.grad().end());
  };
  EXPECT_EQ(run(), run());
}

TEST(FiniteDiff, Examples) {
  auto x = Tensor<double>::scalar(3.0);
  x.mutable_grad();
  {
    Tape<double> tape;
    TapeScope<double> scope(tape);
    x.set_requires_grad();
    auto l = sum(mul(x, x));
    backward(l);
  }
  EXPECT_LE(finite_diff_check<double>([&] { return x[0] * x[0]; }, x, 1e-4).max_rel_err, 1e-8);

  Tensor<double> c({2}, std::vector<double>{1.0, 2.0});
  const auto r = finite_diff_check<double>([] { return 5.0; }, c, 1e-4);
  EXPECT_EQ(r.max_rel_err, 0.0);

  EXPECT_THROW((void)finite_diff_check<double>([] { return 1.0; }, c, 1e-2), ContractError);
  EXPECT_THROW((void)finite_diff_check<double>([] { return std::numeric_limits<double>::infinity(); }, c, 1e-4),
               NumericError);
}
