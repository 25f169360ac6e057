#include "test_util.hpp"
#include "xres/model.hpp"

using namespace xres;
using xres::test::random_tensor;

namespace {

double params_error(ParamSet<double>& ps, Tensor<double>& extra, const std::function<Tensor<double>()>& f,
                    std::uint64_t seed, double eps = 1e-6) {
  Tensor<double> out;
  {
    NoGradScope<double> ng;
    out = f();
  }
  Rng rng(seed);
  auto r = random_tensor(out.shape(), rng, 1.0, false);
  auto objective = [&] { return sum(mul(f(), r)); };
  ps.zero_grad();
  extra.clear_grad();
  {
    Tape<double> tape;
    TapeScope<double> scope(tape);
    auto l = objective();
    backward(l);
  }
  double worst = finite_diff_check<double>([&] { return objective().item(); }, extra, eps).max_rel_err;
  for (auto& e : ps.entries())
    worst = std::max(worst, finite_diff_check<double>([&] { return objective().item(); }, e.tensor, eps).max_rel_err);
  return worst;
}

}  // namespace

TEST(CosineAlign, SingleChannelReplicates) {
  Rng rng(1);
  auto xh = random_tensor({2, 2, 1}, rng, 1.0, false);
  auto xe = random_tensor({4, 4, 3}, rng, 1.0, false);
  const auto y = cosine_align(xh, xe);
  ASSERT_EQ(y.shape(), (Shape{4, 4, 3}));
  const auto up = upsample_bilinear(xh, 4, 4);
  for (std::size_t p = 0; p < 16; ++p)
    for (std::size_t c = 0; c < 3; ++c) EXPECT_NEAR(y[p * 3 + c], up[p], 1e-12);
}

TEST(CosineAlign, CopyDominates) {
  // X^h channel 0 copies X^e channel 0; channel 1 is orthogonal to it.
  Tensor<double> xe({1, 2, 1}, std::vector<double>{1.0, 0.0});
  Tensor<double> xh({1, 2, 2}, std::vector<double>{1.0, 0.0, 0.0, 1.0});
  const auto sim = channel_cosine(reshape(xe, {2, 1}), reshape(xh, {2, 2}));
  EXPECT_NEAR(sim[0], 1.0, 1e-12);
  EXPECT_NEAR(sim[1], 0.0, 1e-12);
  const auto y = cosine_align(xh, xe);
  const double w0 = std::exp(1.0) / (std::exp(1.0) + 1.0);
  EXPECT_NEAR(y[0], w0, 1e-12);
  EXPECT_NEAR(y[1], 1.0 - w0, 1e-12);
}

TEST(CosineAlign, ScaleInvariantSimilarity) {
  Rng rng(2);
  auto a = random_tensor({9, 3}, rng, 1.0, false);
  auto b = random_tensor({9, 2}, rng, 1.0, false);
  auto b2 = b.clone();
  for (std::size_t i = 0; i < 9; ++i) b2.mutable_data()[i * 2 + 1] *= 7.5;
  const auto s1 = channel_cosine(a, b), s2 = channel_cosine(a, b2);
  for (std::size_t i = 0; i < s1.numel(); ++i) EXPECT_NEAR(s1[i], s2[i], 1e-12);
  const auto z = channel_cosine(Tensor<double>({9, 1}), b);
  for (double v : z.data()) EXPECT_EQ(v, 0.0);
}

TEST(NeuralAlign, ZeroInputGivesBiasOnly) {
  ParamSet<double> ps;
  Rng rng(3);
  NeuralAlign<double> na(ps, "na", 8, 4, rng);
  for (std::size_t c = 0; c < 4; ++c) na.proj.bias.mutable_data()[c] = 0.3 * static_cast<double>(c);
  const auto y = na(Tensor<double>({2, 2, 8}), 8, 8);
  ASSERT_EQ(y.shape(), (Shape{8, 8, 4}));
  const auto expect = gelu(na.proj.bias);
  for (std::size_t p = 0; p < 64; ++p)
    for (std::size_t c = 0; c < 4; ++c) EXPECT_NEAR(y[p * 4 + c], expect[c], 1e-15);
}

TEST(ReverseDifference, IdentityRangeAndScalarProbes) {
  Rng rng(4);
  auto xe = random_tensor({3, 3, 2}, rng, 2.0, false);
  const auto same = reverse_difference(xe, xe, xe);
  for (double v : same.data()) EXPECT_EQ(v, 0.0);
  auto a = random_tensor({3, 3, 2}, rng, 3.0, false), b = random_tensor({3, 3, 2}, rng, 3.0, false);
  const auto d = reverse_difference(xe, a, b);
  EXPECT_EQ(d.shape(), (Shape{3, 3, 4}));
  for (double v : d.data()) {
    EXPECT_GE(v, 0.0);
    EXPECT_LT(v, 1.0);
  }
  Tensor<double> z({1, 1, 1}, 0.0), big({1, 1, 1}, 1e3), neg({1, 1, 1}, -1e3);
  const auto p = reverse_difference(z, big, neg);
  EXPECT_EQ(p[0], 0.0);
  EXPECT_NEAR(p[1], 0.5, 1e-12);
  EXPECT_THROW((void)reverse_difference(z, Tensor<double>({1, 1, 2}), z), DimensionError);
}

TEST(SkipFuse, ZeroDetailsAndGradientsReachBothInputs) {
  ParamSet<double> ps;
  Rng rng(5);
  SkipFuse<double> fuse(ps, "f", 12, 4, rng);
  auto xd = random_tensor({2, 2, 4}, rng);
  auto xsd = random_tensor({2, 2, 8}, rng);
  const auto y0 = fuse(Tensor<double>({2, 2, 8}), xd);
  EXPECT_EQ(y0.shape(), (Shape{2, 2, 4}));
  // With zero details only the rows of the weight acting on xd contribute.
  const auto w = fuse.proj.weight.data();
  for (std::size_t p = 0; p < 4; ++p)
    for (std::size_t o = 0; o < 4; ++o) {
      double s = 0;
      for (std::size_t c = 0; c < 4; ++c) s += xd[p * 4 + c] * w[(8 + c) * 4 + o];
      EXPECT_NEAR(y0[p * 4 + o], s, 1e-12);
    }
  Tape<double> tape;
  TapeScope<double> scope(tape);
  auto l = sum(mul(fuse(xsd, xd), fuse(xsd, xd)));
  backward(l);
  auto nonzero = [](std::span<const double> g) {
    for (double v : g)
      if (v != 0.0) return true;
    return false;
  };
  EXPECT_TRUE(nonzero(xd.grad()));
  EXPECT_TRUE(nonzero(xsd.grad()));
  EXPECT_THROW((void)fuse(Tensor<double>({3, 2, 8}), xd), DimensionError);
}

TEST(Rdm, GradientsMatchFiniteDifference) {
  ParamSet<double> ps;
  Rng rng(6);
  RdmSkip<double> rdm(ps, "rdm", 8, 4, rng);
  auto xh = random_tensor({2, 2, 8}, rng);
  auto xe = random_tensor({8, 8, 4}, rng, 1.0, false);
  auto xd = random_tensor({8, 8, 4}, rng, 1.0, false);
  EXPECT_LE(params_error(ps, xh, [&] { return rdm(xh, xe, xd); }, 7), 1e-5);
}

TEST(Model, ShapeLaws) {
  for (auto [w, c] : {std::pair<std::size_t, std::size_t>{32, 8}, {64, 16}}) {
    ModelConfig cfg;
    cfg.size = w;
    cfg.channels = c;
    Model<float> m(cfg, 1);
    Rng rng(2);
    auto x = random_tensor<float>({w, w, 4}, rng, 1.0, false);
    const auto a = m.forward(x);
    const std::size_t q = w / 4;
    EXPECT_EQ(a.encoder[0].shape(), (Shape{q, q, c}));
    EXPECT_EQ(a.encoder[1].shape(), (Shape{q / 2, q / 2, 2 * c}));
    EXPECT_EQ(a.encoder[2].shape(), (Shape{q / 4, q / 4, 4 * c}));
    EXPECT_EQ(a.bottleneck.shape(), (Shape{q / 8, q / 8, 8 * c}));
    for (std::size_t i = 0; i < 3; ++i) {
      EXPECT_EQ(a.decoder_in[i].shape(), a.encoder[i].shape()) << "level " << i + 1;
      EXPECT_EQ(a.decoder_out[i].shape(), a.encoder[i].shape()) << "level " << i + 1;
    }
    EXPECT_EQ(a.decoder1.shape(), (Shape{q, q, c}));
    EXPECT_EQ(a.logits.shape(), (Shape{w, w, 4}));
  }
}

TEST(Model, StageSettingsClipRegionsAndTopk) {
  ModelConfig cfg;
  cfg.size = 32;
  EXPECT_EQ(cfg.stage(0).regions_per_side, 4u);
  EXPECT_EQ(cfg.stage(3).regions_per_side, 1u);
  EXPECT_EQ(cfg.stage(3).topk, 1u);
  EXPECT_EQ(cfg.stage(2).regions_per_side, 2u);
  EXPECT_EQ(cfg.stage(2).topk, 4u);
}

TEST(Model, ConfigErrors) {
  ModelConfig cfg;
  cfg.size = 48;
  EXPECT_THROW(Model<float>(cfg, 0), ConfigError);
  cfg.size = 64;
  cfg.heads = 3;
  EXPECT_THROW(Model<float>(cfg, 0), ConfigError);
  cfg.heads = 2;
  cfg.topk = {1, 2};
  EXPECT_THROW(Model<float>(cfg, 0), ConfigError);
  Model<float> m(ModelConfig{}, 0);
  EXPECT_THROW((void)m.forward(Tensor<float>({32, 32, 4})), DimensionError);
}

TEST(Model, ParameterCountAndSeeding) {
  ModelConfig cfg;
  Model<float> a(cfg, 5), b(cfg, 5), c(cfg, 6);
  EXPECT_LT(a.parameter_count(), 2'000'000u);
  EXPECT_GT(a.parameter_count(), 0u);
  bool differs = false;
  for (std::size_t i = 0; i < a.params().size(); ++i) {
    const auto& ta = a.params().entries()[i].tensor;
    const auto& tb = b.params().entries()[i].tensor;
    const auto& tc = c.params().entries()[i].tensor;
    EXPECT_TRUE(std::equal(ta.data().begin(), ta.data().end(), tb.data().begin()));
    differs = differs || !std::equal(ta.data().begin(), ta.data().end(), tc.data().begin());
  }
  EXPECT_TRUE(differs);
  cfg.rdm = false;
  EXPECT_NE(Model<float>(cfg, 5).parameter_count(), a.parameter_count());
}

TEST(Model, DeterministicForwardAndNonzeroGradients) {
  ModelConfig cfg;
  cfg.size = 32;
  cfg.channels = 8;
  Model<double> m(cfg, 3);
  Rng rng(4);
  auto x = random_tensor({32, 32, 4}, rng, 1.0, false);
  const auto o1 = m.forward(x).logits, o2 = m.forward(x).logits;
  EXPECT_TRUE(std::equal(o1.data().begin(), o1.data().end(), o2.data().begin()));

  Tape<double> tape;
  TapeScope<double> scope(tape);
  auto l = sum(m.forward(x).logits);
  backward(l);
  std::size_t with_grad = 0;
  double norm = 0;
  for (const auto& e : m.params().entries()) {
    if (!e.tensor.has_grad()) continue;
    ++with_grad;
    for (double g : e.tensor.grad()) {
      ASSERT_TRUE(std::isfinite(g)) << e.name;
      norm += g * g;
    }
  }
  EXPECT_EQ(with_grad, m.params().size());
  EXPECT_GT(norm, 0.0);
}
