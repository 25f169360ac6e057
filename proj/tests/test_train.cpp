#include <gtest/gtest.h>

#include <fstream>
#include <sstream>

#include "xres/train.hpp"
#include "xres/verify.hpp"

using namespace xres;

namespace {

fs::path scratch(const std::string& name) {
  auto p = fs::temp_directory_path() / ("xres_test_" + name);
  fs::remove_all(p);
  return p;
}

std::string slurp(const fs::path& p) {
  std::ifstream is(p, std::ios::binary);
  return {std::istreambuf_iterator<char>(is), {}};
}

RunConfig tiny_config() {
  RunConfig c;
  c.model.size = 32;
  c.model.channels = 8;
  c.data.tiles = 1;
  c.data.tile_size = 32;
  c.data.rho_mis = 0;
  c.data.rho_chg = 0;
  c.optim.batch = 1;
  c.optim.loss = "ce";
  c.seed = 3;
  return c;
}

// Leaves `g` in the gradient buffer of `w` via backward of sum(g * w).
void set_grad(ParamSet<double>& ps, Tensor<double>& w, std::vector<double> g) {
  ps.zero_grad();
  Tape<double> tape;
  TapeScope<double> scope(tape);
  auto l = sum(mul(w, Tensor<double>(w.shape(), std::move(g))));
  backward(l);
}

}  // namespace

TEST(AdamW, FirstStepMovesByLearningRate) {
  ParamSet<double> ps;
  auto w = ps.add("w", Tensor<double>({2}, std::vector<double>{1.0, -2.0}));
  AdamW<double> opt(ps, {.lr = 0.1, .weight_decay = 0.0});
  set_grad(ps, w, {3.0, -0.5});
  opt.step();
  EXPECT_NEAR(w[0], 0.9, 1e-6);
  EXPECT_NEAR(w[1], -1.9, 1e-6);
  EXPECT_EQ(opt.steps(), 1u);
}

TEST(AdamW, DecoupledDecayAndGradScale) {
  ParamSet<double> ps;
  auto w = ps.add("w", Tensor<double>({1}, std::vector<double>{2.0}));
  AdamW<double> opt(ps, {.lr = 0.1, .weight_decay = 0.5});
  set_grad(ps, w, {0.0});
  opt.step();
  EXPECT_NEAR(w[0], 2.0 * (1 - 0.05), 1e-12);

  ParamSet<double> a, b;
  auto wa = a.add("w", Tensor<double>({1}, std::vector<double>{0.0}));
  auto wb = b.add("w", Tensor<double>({1}, std::vector<double>{0.0}));
  AdamW<double> oa(a, {.lr = 0.1, .weight_decay = 0.0}), ob(b, {.lr = 0.1, .weight_decay = 0.0});
  for (int i = 0; i < 3; ++i) {
    set_grad(a, wa, {1.0});
    set_grad(b, wb, {4.0});
    oa.step();
    ob.step(4.0);
  }
  EXPECT_NEAR(wa[0], wb[0], 1e-12);
}

TEST(PlateauSchedule, ReducesAfterPatience) {
  PlateauSchedule s(2, 0.1);
  double lr = 1.0;
  EXPECT_FALSE(s.update(5.0, lr));
  EXPECT_FALSE(s.update(5.0, lr));
  EXPECT_TRUE(s.update(6.0, lr));
  EXPECT_DOUBLE_EQ(lr, 0.1);
  EXPECT_EQ(s.stale(), 0u);
  EXPECT_FALSE(s.update(4.0, lr));
  EXPECT_EQ(s.best(), 4.0);
  EXPECT_FALSE(s.update(4.5, lr));
  EXPECT_DOUBLE_EQ(lr, 0.1);
}

TEST(Train, SingleTileOverfits) {
  auto cfg = tiny_config();
  const auto tiles = synth_tiles(cfg);
  Model<float> m(cfg.model, cfg.seed);
  std::ostringstream log;
  const auto r = train(m, tiles, cfg, {.log = &log});
  ASSERT_EQ(r.epoch_loss.size(), 10u);
  EXPECT_LE(r.epoch_loss.back(), 0.5 * r.epoch_loss.front());
  EXPECT_EQ(r.steps, 40u);
  std::istringstream lines(log.str());
  std::string line;
  std::size_t records = 0;
  while (std::getline(lines, line)) {
    const auto j = nlohmann::json::parse(line);
    EXPECT_TRUE(j.contains("epoch"));
    ++records;
  }
  EXPECT_EQ(records, 50u);
}

TEST(Train, AnlcStepsAreFiniteAndDeterministic) {
  auto cfg = tiny_config();
  cfg.optim.loss = "anlc";
  cfg.optim.epochs = 2;
  cfg.data.rho_mis = 0.2;
  const auto tiles = synth_tiles(cfg);
  Model<float> a(cfg.model, 1), b(cfg.model, 1);
  const auto ra = train(a, tiles, cfg), rb = train(b, tiles, cfg);
  EXPECT_EQ(ra.epoch_loss, rb.epoch_loss);
  for (double l : ra.epoch_loss) EXPECT_TRUE(std::isfinite(l));
}

TEST(Train, RejectsBadInputs) {
  auto cfg = tiny_config();
  Model<float> m(cfg.model, 0);
  EXPECT_THROW((void)train(m, {}, cfg), DataError);
  cfg.optim.loss = "mse";
  EXPECT_THROW((void)train(m, synth_tiles(tiny_config()), cfg), ConfigError);
}

TEST(Checkpoint, RoundTripAndMismatch) {
  const auto dir = scratch("ckpt");
  fs::create_directories(dir);
  ModelConfig mc;
  mc.size = 32;
  mc.channels = 8;
  Model<float> m(mc, 4);
  save_checkpoint(dir / "m.ckpt", m);
  const auto back = load_model<float>(dir / "m.ckpt");
  EXPECT_EQ(back.config().size, 32u);
  ASSERT_EQ(back.params().size(), m.params().size());
  for (std::size_t i = 0; i < m.params().size(); ++i) {
    const auto& a = m.params().entries()[i];
    const auto& b = back.params().entries()[i];
    EXPECT_EQ(a.name, b.name);
    EXPECT_TRUE(std::equal(a.tensor.data().begin(), a.tensor.data().end(), b.tensor.data().begin())) << a.name;
  }
  mc.channels = 16;
  Model<float> other(mc, 0);
  EXPECT_THROW(load_checkpoint(read_checkpoint_records(dir / "m.ckpt"), other), ContractError);
  fs::remove_all(dir);
}

TEST(Predict, TiledShapeAndDeterminism) {
  ModelConfig mc;
  mc.size = 32;
  mc.channels = 8;
  Model<float> m(mc, 2);
  SceneSpec s;
  s.size = 256;
  const auto w = synth_world(s);
  const auto a = predict(m, w.image), b = predict(m, w.image);
  EXPECT_EQ(a.height, 256u);
  EXPECT_EQ(a.width, 256u);
  EXPECT_EQ(a, b);
  for (auto v : a.labels) ASSERT_LT(v, 4);
  EXPECT_THROW((void)predict(m, crop(w.image, 0, 0, 48)), DimensionError);
  EXPECT_EQ(evaluate(m, {{"t", w.image, w.truth, w.outdated}}).total(), 256u * 256u);
}

TEST(Dataset, SynthWritesTilesAndManifestDeterministically) {
  RunConfig cfg;
  const auto d1 = scratch("ds1"), d2 = scratch("ds2");
  write_dataset(d1, synth_tiles(cfg), cfg);
  write_dataset(d2, synth_tiles(cfg), cfg);
  std::size_t nsrt = 0;
  for (const auto& e : fs::directory_iterator(d1)) {
    if (e.path().extension() == ".nsrt") ++nsrt;
    EXPECT_EQ(slurp(e.path()), slurp(d2 / e.path().filename())) << e.path().filename();
  }
  EXPECT_EQ(nsrt, 24u);
  EXPECT_TRUE(fs::exists(d1 / "manifest.json"));
  const auto back = read_dataset(d1);
  ASSERT_EQ(back.size(), 8u);
  const auto again = synth_tiles(cfg);
  EXPECT_EQ(back[3].image, again[3].image);
  EXPECT_EQ(back[3].outdated, again[3].outdated);
  fs::remove_all(d1);
  fs::remove_all(d2);
  EXPECT_THROW((void)read_dataset(d1), DataError);
}

TEST(Verify, SignFlipIsDetected) {
  GradientCheckSetup g;
  g.probes = 6;
  g.flip_sign = true;
  EXPECT_FALSE(verify_gradients(g).passed);
}
