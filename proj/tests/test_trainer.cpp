#include <gtest/gtest.h>

#include <cmath>
#include <sstream>

#include "kanseg/trainer.hpp"

using namespace kanseg;
using TD = Tensor<double>;

namespace {

RunConfig micro_run() {
  RunConfig c;
  c.model = ModelConfig::micro();
  c.train.epochs = 2;
  c.train.milestones = {1};
  c.train.batch = 4;
  c.train.eval_stride = 64;
  c.data.patch = 64;
  return c;
}

std::vector<Sample> micro_samples(std::size_t n) {
  auto patches = extract_patches(synth_generate(21, 1, 128), 64, 32);
  patches.resize(n);
  return patches;
}

/// logits[b,c] = (c+1) * image[b, c mod 3], a purely per-pixel function.
TD pixelwise(const TD& images) {
  const std::size_t b = images.dim(0), h = images.dim(2), w = images.dim(3);
  TD out({b, 4, h, w});
  for (std::size_t n = 0; n < b; ++n)
    for (std::size_t c = 0; c < 4; ++c)
      for (std::size_t i = 0; i < h * w; ++i) out[(n * 4 + c) * h * w + i] = double(c + 1) * images[(n * 3 + c % 3) * h * w + i];
  return out;
}

}  // namespace

TEST(CrossEntropy, UniformLogitsGiveLogOfClassCount) {
  Graph<double> g;
  const std::vector<std::uint8_t> t{0, 5, 3, 2};
  const auto r = cross_entropy_loss(g.input(TD({1, 6, 2, 2})), t);
  EXPECT_NEAR(r.loss.value()[0], std::log(6.0), 1e-15);
  EXPECT_EQ(r.count, 4u);
}

TEST(CrossEntropy, LargeMarginIsNearZero) {
  TD logits({2, 6, 1, 1});
  const std::vector<std::uint8_t> t{4, 1};
  logits[0 * 6 + 4] = 50;
  logits[1 * 6 + 1] = 50;
  Graph<double> g;
  EXPECT_LT(cross_entropy_loss(g.input(logits), t).loss.value()[0], 1e-9);
}

TEST(CrossEntropy, MatchesPerPixelOracleWithIgnoredPixels) {
  Rng rng(1);
  const TD logits = rng.normal_tensor<double>({2, 6, 3, 3}, 0, 2);
  std::vector<std::uint8_t> t(18);
  for (auto& v : t) v = static_cast<std::uint8_t>(rng.integer(0, 5));
  t[0] = t[7] = t[13] = 255;
  double sum = 0;
  std::size_t n = 0;
  for (std::size_t b = 0; b < 2; ++b)
    for (std::size_t i = 0; i < 9; ++i) {
      const std::uint8_t y = t[b * 9 + i];
      if (y == 255) continue;
      double z = 0;
      for (std::size_t c = 0; c < 6; ++c) z += std::exp(logits[(b * 6 + c) * 9 + i]);
      sum += std::log(z) - logits[(b * 6 + y) * 9 + i];
      ++n;
    }
  Graph<double> g;
  const auto r = cross_entropy_loss(g.input(logits), t);
  EXPECT_EQ(r.count, 15u);
  EXPECT_NEAR(r.loss.value()[0], sum / double(n), 1e-10);
}

TEST(CrossEntropy, AllIgnoredIsAnError) {
  Graph<double> g;
  const std::vector<std::uint8_t> t(4, 255);
  EXPECT_THROW(cross_entropy_loss(g.input(TD({1, 6, 2, 2})), t), NumericError);
}

TEST(Sgd, SingleScalarSteps) {
  Parameter<double> w(TD({1}, 1.0));
  const ParamList<double> ps{{"w", &w}};
  OptimizerState<double> st;
  w.grad = TD({1}, 1.0);
  sgd_step(ps, st, 0.1, 0.9, 0.0);
  EXPECT_NEAR(w.value[0], 0.9, 1e-15);
  sgd_step(ps, st, 0.1, 0.9, 0.0);
  EXPECT_NEAR(w.value[0], 0.71, 1e-15);
  EXPECT_EQ(st.step, 2u);
}

TEST(Sgd, MatchesScalarReference) {
  Rng rng(2);
  Parameter<double> p(rng.normal_tensor<double>({10}, 0, 1));
  const ParamList<double> ps{{"p", &p}};
  std::vector<double> w(p.value.data().begin(), p.value.data().end()), v(10, 0.0);
  OptimizerState<double> st;
  for (int step = 0; step < 5; ++step) {
    p.grad = rng.normal_tensor<double>({10}, 0, 1);
    for (std::size_t i = 0; i < 10; ++i) {
      v[i] = 0.9 * v[i] + p.grad[i] + 0.0005 * w[i];
      w[i] -= 0.01 * v[i];
    }
    sgd_step(ps, st, 0.01, 0.9, 0.0005);
  }
  for (std::size_t i = 0; i < 10; ++i) EXPECT_NEAR(p.value[i], w[i], 1e-12);
}

TEST(Sgd, WeightDecayShrinksWithoutGradient) {
  Parameter<double> p(TD({3}, {1.0, -2.0, 4.0}));
  Parameter<double> frozen(TD({1}, 3.0), false);
  const ParamList<double> ps{{"p", &p}, {"frozen", &frozen}};
  OptimizerState<double> st;
  sgd_step(ps, st, 0.1, 0.0, 0.5);
  EXPECT_NEAR(p.value[0], 0.95, 1e-15);
  EXPECT_NEAR(p.value[1], -1.9, 1e-15);
  EXPECT_NEAR(p.value[2], 3.8, 1e-15);
  EXPECT_EQ(frozen.value[0], 3.0);
}

TEST(Sgd, ZeroDecayAndZeroGradientIsANoOp) {
  Rng rng(9);
  Parameter<double> p(rng.normal_tensor<double>({6}, 0, 1));
  const TD before = p.value;
  OptimizerState<double> st;
  for (int i = 0; i < 3; ++i) sgd_step(ParamList<double>{{"p", &p}}, st, 0.1, 0.9, 0.0);
  EXPECT_EQ(p.value, before);
}

TEST(Sgd, DecayStrictlyShrinksNormsUnderMomentum) {
  Rng rng(10);
  Parameter<double> a(rng.normal_tensor<double>({5}, 0, 1)), b(rng.normal_tensor<double>({3, 3}, 0, 1));
  const ParamList<double> ps{{"a", &a}, {"b", &b}};
  OptimizerState<double> st;
  const auto norm = [](const TD& t) {
    double s = 0;
    for (double v : t.buffer()) s += v * v;
    return s;
  };
  for (int i = 0; i < 5; ++i) {
    const double na = norm(a.value), nb = norm(b.value);
    sgd_step(ps, st, 0.01, 0.9, 0.0005);
    EXPECT_LT(norm(a.value), na);
    EXPECT_LT(norm(b.value), nb);
  }
}

TEST(Sgd, NonFiniteGradientNamesParameter) {
  Parameter<double> p(TD({2}, 1.0));
  p.grad = TD({2}, {0.0, NAN});
  OptimizerState<double> st;
  try {
    sgd_step(ParamList<double>{{"decoder.fuse", &p}}, st, 0.1, 0.9, 0.0);
    FAIL() << "expected NumericError";
  } catch (const NumericError& e) {
    EXPECT_NE(std::string(e.what()).find("decoder.fuse"), std::string::npos);
  }
}

TEST(Schedule, StepDecayAtMilestones) {
  const TrainConfig c;
  EXPECT_EQ(lr_at_epoch(c, 0), 0.01);
  EXPECT_EQ(lr_at_epoch(c, 24), 0.01);
  EXPECT_EQ(lr_at_epoch(c, 25), 0.001);
  EXPECT_EQ(lr_at_epoch(c, 34), 0.001);
  EXPECT_EQ(lr_at_epoch(c, 35), 0.0001);
  EXPECT_EQ(lr_at_epoch(c, 45), 0.00001);
  EXPECT_EQ(lr_at_epoch(c, 49), 0.00001);
}

TEST(Stitch, StrideEqualToPatchCoversOnce) {
  Rng rng(3);
  Raster img(64, 96, 3);
  for (auto& v : img.data) v = static_cast<std::uint8_t>(rng.integer(0, 255));
  const StitchedLogits s = stitch_logits<double>(pixelwise, img, 32, 32, 4);
  EXPECT_EQ(s.classes, 4u);
  for (auto c : s.count) ASSERT_EQ(c, 1u);
  const TD full = pixelwise(image_batch<double>({&img}));
  for (std::size_t i = 0; i < full.size(); ++i) ASSERT_EQ(s.mean[i], full[i]);
}

TEST(Stitch, OverlapAveragingOfPixelwiseModelIsExact) {
  Rng rng(4);
  Raster img(64, 64, 3);
  for (auto& v : img.data) v = static_cast<std::uint8_t>(rng.integer(0, 255));
  const StitchedLogits s = stitch_logits<double>(pixelwise, img, 32, 8, 3);
  const TD full = pixelwise(image_batch<double>({&img}));
  for (std::size_t i = 0; i < full.size(); ++i) ASSERT_NEAR(s.mean[i], full[i], 1e-12);
  EXPECT_EQ(*std::max_element(s.count.begin(), s.count.end()), 16u);
}

TEST(Stitch, TwoWindowHandAverage) {
  // windows at x = 0 and x = 16 emit constant logits 0 and 1 for class 0
  std::size_t calls = 0;
  const LogitFn<double> fn = [&calls](const TD& images) {
    TD out({images.dim(0), 2, 32, 32});
    for (std::size_t b = 0; b < images.dim(0); ++b, ++calls)
      for (std::size_t i = 0; i < 32 * 32; ++i) out[(b * 2) * 32 * 32 + i] = double(calls);
    return out;
  };
  const StitchedLogits s = stitch_logits(fn, Raster(32, 48, 3), 32, 16, 1);
  for (std::size_t x : {0, 15}) EXPECT_EQ(s.mean[x], 0.0);
  for (std::size_t x : {16, 31}) EXPECT_EQ(s.mean[x], 0.5);
  for (std::size_t x : {32, 47}) EXPECT_EQ(s.mean[x], 1.0);
  EXPECT_EQ(s.count[20], 2u);
}

TEST(Stitch, ArgmaxTiesGoToLowestIndexAndScaleDoesNotMatter) {
  const LogitFn<double> zeros = [](const TD& images) { return TD({images.dim(0), 3, 16, 16}); };
  const Raster img(16, 16, 3, 100);
  const Raster p = argmax_map(stitch_logits(zeros, img, 16, 16));
  for (auto v : p.data) EXPECT_EQ(v, 0);
  Rng rng(5);
  Raster noisy(32, 32, 3);
  for (auto& v : noisy.data) v = static_cast<std::uint8_t>(rng.integer(0, 255));
  const LogitFn<double> scaled = [](const TD& images) {
    TD out = pixelwise(images);
    for (auto& v : out.buffer()) v *= 7.5;
    return out;
  };
  EXPECT_EQ(argmax_map(stitch_logits<double>(pixelwise, noisy, 16, 8)), argmax_map(stitch_logits(scaled, noisy, 16, 8)));
}

TEST(Stitch, GeometryErrors) {
  const Raster img(32, 32, 3);
  EXPECT_THROW(stitch_logits<double>(pixelwise, img, 16, 17), ConfigError);
  EXPECT_THROW(stitch_logits<double>(pixelwise, img, 64, 32), ShapeError);
}

TEST(Evaluate, ConfusionOverTilesAndHeadlineExcludesClutter) {
  Tile t{"t", Raster(16, 16, 3, 200), Raster(16, 16, 1, 1)};
  t.label.data[0] = kClutter;
  t.label.data[1] = kVoid;
  const LogitFn<double> always1 = [](const TD& images) {
    TD out({images.dim(0), 6, 16, 16});
    for (std::size_t b = 0; b < images.dim(0); ++b)
      for (std::size_t i = 0; i < 256; ++i) out[(b * 6 + 1) * 256 + i] = 1.0;
    return out;
  };
  const TileEvaluation ev = evaluate_tiles(always1, {t, t}, 6, 16, 8);
  EXPECT_EQ(ev.cm.total(), 2u * 255u);
  EXPECT_EQ(ev.cm.at(kClutter, 1), 2u);
  ASSERT_EQ(ev.predictions.size(), 2u);
  // building: TP 508, FP 2 (the clutter pixels)
  EXPECT_NEAR(headline_scores(ev.cm).miou, 508.0 / 510.0, 1e-15);
  EXPECT_THROW(evaluate_tiles(always1, {t}, 5, 16, 8), ShapeError);
}

TEST(TrainLoop, FiniteAndBitwiseReproducible) {
  const RunConfig cfg = micro_run();
  const auto train = micro_samples(8);
  const auto test = synth_generate(22, 1, 64);
  std::ostringstream log1, log2;
  Model<float> m1(cfg.model, cfg.seed), m2(cfg.model, cfg.seed);
  const TrainResult r1 = train_loop(m1, train, test, cfg, TrainOptions{{}, &log1, nullptr});
  const TrainResult r2 = train_loop(m2, train, test, cfg, TrainOptions{{}, &log2, nullptr});
  ASSERT_EQ(r1.epochs.size(), 2u);
  for (const auto& e : r1.epochs) {
    EXPECT_TRUE(std::isfinite(e.loss));
    EXPECT_TRUE(e.test_miou.has_value());
  }
  EXPECT_DOUBLE_EQ(r1.epochs[1].lr, 0.001);
  EXPECT_EQ(log1.str(), log2.str());
  const auto p1 = m1.parameters(), p2 = m2.parameters();
  for (std::size_t i = 0; i < p1.size(); ++i) ASSERT_EQ(p1[i].param->value, p2[i].param->value) << p1[i].name;
}

TEST(TrainLoop, DivergenceReportsEpochBatchAndNorms) {
  RunConfig cfg = micro_run();
  cfg.train.epochs = 1;
  cfg.train.milestones = {};
  Model<float> m(cfg.model, cfg.seed);
  m.encoder.stem.weight.value[0] = NAN;
  try {
    train_loop(m, micro_samples(4), {}, cfg);
    FAIL() << "expected NumericError";
  } catch (const NumericError& e) {
    const std::string msg = e.what();
    EXPECT_NE(msg.find("epoch 1, batch 1"), std::string::npos) << msg;
    EXPECT_NE(msg.find("global parameter norm"), std::string::npos) << msg;
  }
}

TEST(TrainLoop, MicroModelFitsOneBatch) {
  RunConfig cfg = micro_run();
  cfg.train.epochs = 300;
  cfg.train.milestones = {};
  cfg.train.batch = 8;
  cfg.train.augment = false;
  Model<float> m(cfg.model, cfg.seed);
  const TrainResult r = train_loop(m, micro_samples(8), {}, cfg);
  EXPECT_LT(r.epochs.back().loss, 0.25 * r.epochs.front().loss);
}

TEST(TrainLoop, RejectsEmptyTrainingSet) {
  Model<float> m(ModelConfig::micro(), 1);
  EXPECT_THROW(train_loop(m, {}, {}, micro_run()), ConfigError);
}

TEST(Formatting, EpochAndAblationLines) {
  EpochLog e{3, 0.001, 0.25, 0.5, 1.0, 8};
  EXPECT_EQ(format_epoch(e), "epoch 3 lr 0.001 loss 0.25 test_miou 0.500000\n");
  e.test_miou.reset();
  EXPECT_EQ(format_epoch(e), "epoch 3 lr 0.001 loss 0.25\n");
  const std::vector<AblationRow> rows{{Variant::baseline, 10, 0.5, 0.6, 0.4},
                                      {Variant::deepkan, 20, 0.4, 0.7, 0.5},
                                      {Variant::glkan, 15, 0.45, 0.65, 0.45},
                                      {Variant::full, 25, 0.3, 0.8, 0.6}};
  EXPECT_NE(format_ablation(rows).find("ordering by mIoU: full > deepkan > glkan > baseline"), std::string::npos);
}
