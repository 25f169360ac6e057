#include <set>

#include "test_util.hpp"
#include "xres/bra.hpp"
#include "xres/verify.hpp"

using namespace xres;
using xres::test::random_tensor;

namespace {

template <class T>
void perturb(ParamSet<T>& ps, Rng& rng, double s = 0.1) {
  for (auto& e : ps.entries())
    for (auto& v : e.tensor.mutable_data()) v += static_cast<T>(s * rng.normal());
}

// Gradient of Σ r ⊙ f() against every element of every tensor in ps. The
// relative error denominator is floored at `floor` so exactly-zero gradients
// (key bias under softmax shift invariance) compare absolutely.
double params_grad_error(ParamSet<double>& ps, const std::function<Tensor<double>()>& f, std::uint64_t seed,
                         double eps = 1e-6, double floor = 1e-6) {
  Tensor<double> out;
  {
    NoGradScope<double> ng;
    out = f();
  }
  Rng rng(seed);
  auto r = random_tensor(out.shape(), rng, 1.0, false);
  auto objective = [&] { return sum(mul(f(), r)); };
  ps.zero_grad();
  {
    Tape<double> tape;
    TapeScope<double> scope(tape);
    auto l = objective();
    backward(l);
  }
  double worst = 0;
  for (auto& e : ps.entries()) {
    const auto res = finite_diff_check<double>([&] { return objective().item(); }, e.tensor, eps);
    for (std::size_t i = 0; i < res.analytic.size(); ++i) {
      const double a = res.analytic[i], n = res.numeric[i];
      worst = std::max(worst, std::abs(a - n) / std::max({std::abs(a), std::abs(n), floor}));
    }
  }
  return worst;
}

}  // namespace

TEST(Layers, ParamSetRegistersNamesInOrder) {
  ParamSet<double> ps;
  Rng rng(1);
  Linear<double> l(ps, "fc", 3, 5, rng);
  ASSERT_EQ(ps.size(), 2u);
  EXPECT_EQ(ps.entries()[0].name, "fc.weight");
  EXPECT_EQ(ps.entries()[1].name, "fc.bias");
  EXPECT_EQ(ps.count(), 20u);
  ASSERT_NE(ps.find("fc.bias"), nullptr);
  EXPECT_EQ(ps.find("missing"), nullptr);
}

TEST(Layers, LinearInitModes) {
  ParamSet<double> ps;
  Rng rng(2);
  Linear<double> t(ps, "t", 64, 64, rng);
  Linear<double> f(ps, "f", 64, 64, rng, LinearInit::fan_in);
  for (double v : t.weight.data()) EXPECT_LE(std::abs(v), 0.04);
  const double bound = 1.0 / 8.0;
  double mx = 0;
  for (double v : f.weight.data()) {
    EXPECT_LE(std::abs(v), bound);
    mx = std::max(mx, std::abs(v));
  }
  EXPECT_GT(mx, 0.1);
}

TEST(Layers, ShapesAndErrors) {
  ParamSet<double> ps;
  Rng rng(3);
  Linear<double> l(ps, "l", 4, 6, rng);
  EXPECT_EQ(l(Tensor<double>({2, 3, 4})).shape(), (Shape{2, 3, 6}));
  EXPECT_THROW((void)l(Tensor<double>({2, 5})), ConfigError);

  PatchEmbed<double> embed(ps, "e", 4, 8, rng);
  EXPECT_EQ(embed(Tensor<double>({32, 32, 4})).shape(), (Shape{8, 8, 8}));
  EXPECT_THROW((void)embed(Tensor<double>({30, 32, 4})), DimensionError);

  PatchMerge<double> merge(ps, "m", 8, rng);
  EXPECT_EQ(merge(Tensor<double>({8, 8, 8})).shape(), (Shape{4, 4, 16}));
  EXPECT_THROW((void)merge(Tensor<double>({7, 8, 8})), DimensionError);

  PatchExpand<double> ex2(ps, "x2", 16, 2, rng), ex4(ps, "x4", 8, 4, rng);
  EXPECT_EQ(ex2(Tensor<double>({4, 4, 16})).shape(), (Shape{8, 8, 8}));
  EXPECT_EQ(ex4(Tensor<double>({8, 8, 8})).shape(), (Shape{32, 32, 2}));
  EXPECT_THROW(PatchExpand<double>(ps, "bad", 6, 4, rng), ConfigError);

  EXPECT_THROW(Conv2d<double>(ps, "c", 6, 6, 3, {.stride = 1, .pad = 1, .groups = 4}, rng), ConfigError);
}

TEST(Layers, PixelShuffleIsPermutation) {
  const auto idx = pixel_shuffle_order(3, 2, 2);
  std::set<std::size_t> s(idx.begin(), idx.end());
  EXPECT_EQ(s.size(), idx.size());
  EXPECT_EQ(*s.rbegin(), idx.size() - 1);
  const auto m = merge_order(4, 4);
  EXPECT_EQ((std::vector<std::size_t>(m.begin(), m.begin() + 4)), (std::vector<std::size_t>{0, 1, 4, 5}));
}

TEST(Layers, GradientsMatchFiniteDifference) {
  Rng rng(4);
  ParamSet<double> ps;
  PatchEmbed<double> embed(ps, "e", 2, 4, rng);
  PatchMerge<double> merge(ps, "m", 4, rng);
  PatchExpand<double> expand(ps, "x", 8, 2, rng);
  LayerNorm<double> norm(ps, "n", 4);
  MlpGelu<double> mlp(ps, "mlp", 4, 3, rng);
  perturb(ps, rng);
  auto x = random_tensor({16, 16, 2}, rng, 1.0, false);
  EXPECT_LE(params_grad_error(ps, [&] { return mlp(norm(expand(merge(embed(x))))); }, 5, 1e-5), 1e-5);
}

TEST(Regions, PartitionShapesAndRoundTrip) {
  Rng rng(5);
  const auto g = make_region_grid(8, 8, 4);
  EXPECT_EQ(g.regions(), 16u);
  EXPECT_EQ(g.tokens_per_region, 4u);
  auto x = random_tensor({64, 3}, rng, 1.0, false);
  const auto p = region_partition(x, g);
  EXPECT_EQ(p.shape(), (Shape{16, 4, 3}));
  const auto back = region_reassemble(p, g);
  EXPECT_EQ(std::vector<double>(back.data().begin(), back.data().end()),
            std::vector<double>(x.data().begin(), x.data().end()));
  const auto one = make_region_grid(8, 8, 1);
  EXPECT_EQ(region_partition(x, one).shape(), (Shape{1, 64, 3}));
  EXPECT_THROW((void)make_region_grid(8, 8, 3), DimensionError);
}

TEST(Regions, AffinityMatchesHandProduct) {
  // Two regions of two tokens, C = 2.
  Tensor<double> q({2, 2, 2}, std::vector<double>{1, 0, 3, 2, 0, 1, 2, 1});
  Tensor<double> k({2, 2, 2}, std::vector<double>{1, 1, 1, 3, 2, 0, 0, 0});
  // Region means: q0 = (2, 1), q1 = (1, 1); k0 = (1, 2), k1 = (1, 0).
  const auto a = region_affinity(q, k);
  EXPECT_EQ(a, (std::vector<double>{4, 2, 3, 1}));
  Tensor<double> same({3, 2, 2}, 1.0);
  for (double v : region_affinity(same, same)) EXPECT_EQ(v, 2.0);
}

TEST(Routing, TopkExamples) {
  const std::vector<double> a = {0.9, 0.1, 0.2, 0.8};
  const auto r = topk_route<double>(a, 2, 1);
  EXPECT_EQ(r.index, (std::vector<std::size_t>{0, 1}));
  const auto full = topk_route<double>(a, 2, 2);
  for (std::size_t i = 0; i < 2; ++i) {
    std::set<std::size_t> s(full.row(i).begin(), full.row(i).end());
    EXPECT_EQ(s, (std::set<std::size_t>{0, 1}));
  }
  const std::vector<double> tie(9, 0.5);
  const auto t = topk_route<double>(tie, 3, 2);
  EXPECT_EQ((std::vector<std::size_t>(t.row(0).begin(), t.row(0).end())), (std::vector<std::size_t>{0, 1}));
  EXPECT_THROW((void)topk_route<double>(a, 2, 0), ConfigError);
  EXPECT_THROW((void)topk_route<double>(a, 2, 3), ConfigError);
}

TEST(Routing, GatherIdentityAndMultiplicity) {
  Rng rng(6);
  auto x = random_tensor({4, 3, 2}, rng);
  const RoutingIndex id{4, 1, {0, 1, 2, 3}};
  const auto g = gather_kv(x, id);
  EXPECT_EQ(std::vector<double>(g.data().begin(), g.data().end()),
            std::vector<double>(x.data().begin(), x.data().end()));

  const RoutingIndex r{4, 2, {0, 1, 0, 2, 0, 3, 1, 2}};
  Tape<double> tape;
  TapeScope<double> scope(tape);
  auto l = sum(gather_kv(x, r));
  backward(l);
  const std::vector<double> mult = {3, 2, 2, 1};
  for (std::size_t reg = 0; reg < 4; ++reg)
    for (std::size_t i = 0; i < 6; ++i) EXPECT_EQ(x.grad()[reg * 6 + i], mult[reg]);

  const RoutingIndex all{4, 4, {0, 1, 2, 3, 0, 1, 2, 3, 0, 1, 2, 3, 0, 1, 2, 3}};
  EXPECT_EQ(gather_kv(x, all).shape(), (Shape{4, 12, 2}));
}

TEST(Bra, DenseEquivalence) {
  EXPECT_LE(bra_dense_gap<float>(3, 7), 1e-5);
  EXPECT_LE(bra_dense_gap<double>(3, 7), 1e-10);
}

TEST(Bra, ZeroValuesGiveZeroOutput) {
  ParamSet<double> ps;
  Rng rng(8);
  BraParams<double> p(ps, "b", 4, rng);
  // Zero value projection and zero biases: attention and LCE both see V = 0.
  auto w = p.qkv.weight.mutable_data();
  for (std::size_t i = 0; i < 4; ++i)
    for (std::size_t j = 8; j < 12; ++j) w[i * 12 + j] = 0.0;
  auto x = random_tensor({8, 8, 4}, rng, 1.0, false);
  const auto y = bra_forward(x, p, 2, 2, 2);
  for (double v : y.data()) EXPECT_EQ(v, 0.0);
}

TEST(Bra, AttentionRowsSumToOne) {
  ParamSet<double> ps;
  Rng rng(9);
  BraParams<double> p(ps, "b", 8, rng);
  perturb(ps, rng, 0.5);
  auto x = random_tensor({8, 8, 8}, rng, 1.0, false);
  BraTrace<double> tr;
  const auto y = bra_forward(x, p, 4, 3, 2, &tr);
  EXPECT_EQ(y.shape(), x.shape());
  ASSERT_EQ(tr.attention.size(), 2u);
  for (const auto& a : tr.attention) {
    ASSERT_EQ(a.shape(), (Shape{16, 4, 12}));
    for (std::size_t row = 0; row < 16 * 4; ++row) {
      double s = 0;
      for (std::size_t j = 0; j < 12; ++j) s += a[row * 12 + j];
      EXPECT_NEAR(s, 1.0, 1e-6);
    }
  }
  EXPECT_EQ(tr.route.k, 3u);
}

TEST(Bra, ConfigErrors) {
  ParamSet<double> ps;
  Rng rng(10);
  BraParams<double> p(ps, "b", 6, rng);
  EXPECT_THROW((void)bra_forward(Tensor<double>({8, 8, 6}), p, 2, 2, 4), ConfigError);
  EXPECT_THROW((void)bra_forward(Tensor<double>({8, 8, 6}), p, 2, 5, 2), ConfigError);
  EXPECT_THROW((void)bra_forward(Tensor<double>({8, 8, 5}), p, 2, 2, 1), ConfigError);
}

TEST(Bra, RoutingFreezeReplaysFirstPass) {
  ParamSet<double> ps;
  Rng rng(11);
  BraParams<double> p(ps, "b", 4, rng);
  perturb(ps, rng, 0.5);
  auto x = random_tensor({8, 8, 4}, rng, 1.0, false);
  RoutingFreeze freeze;
  BraTrace<double> first, second;
  (void)bra_forward(x, p, 2, 1, 1, &first);
  EXPECT_EQ(freeze.recorded(), 1u);
  freeze.rewind();
  (void)bra_forward(random_tensor({8, 8, 4}, rng, 5.0, false), p, 2, 1, 1, &second);
  EXPECT_EQ(first.route.index, second.route.index);
  EXPECT_EQ(freeze.recorded(), 1u);
}

TEST(BiFormer, IdentityWhenResidualBranchesAreZero) {
  ParamSet<double> ps;
  Rng rng(12);
  BiFormerBlock<double> blk(ps, "blk", 8, {2, 2, 2}, 3, rng);
  for (auto& e : ps.entries())
    if (e.name.find("norm") == std::string::npos)
      for (auto& v : e.tensor.mutable_data()) v = 0.0;
  auto x = random_tensor({8, 8, 8}, rng, 1.0, false);
  const auto y = blk(x);
  for (std::size_t i = 0; i < x.numel(); ++i) EXPECT_EQ(y[i], x[i]);
}

TEST(BiFormer, GradientMatchesFiniteDifference) {
  ParamSet<double> ps;
  Rng rng(13);
  BiFormerBlock<double> blk(ps, "blk", 8, {2, 4, 2}, 2, rng);
  perturb(ps, rng, 0.2);
  auto x = random_tensor({8, 8, 8}, rng, 1.0, false);
  RoutingFreeze freeze;
  EXPECT_LE(params_grad_error(ps, [&] {
              freeze.rewind();
              return blk(x);
            }, 14, 1e-5, 1e-4),
            1e-4);
}
