#include <gtest/gtest.h>

#include <filesystem>

#include "kanseg/checkpoint.hpp"
#include "kanseg/trainer.hpp"

using namespace kanseg;
namespace fs = std::filesystem;

namespace {

std::size_t encoder_count(const std::array<std::size_t, 4>& ch) {
  std::size_t n = 3 * ch[0] * 9 + 2 * ch[0];
  std::size_t in = ch[0];
  for (std::size_t i = 0; i < 4; ++i) {
    const std::size_t c = ch[i];
    n += in * c * 9 + c * c * 9 + 4 * c;
    if (i > 0 || in != c) n += in * c + 2 * c;
    in = c;
  }
  return n;
}

std::size_t kan_block_count(std::size_t c, std::size_t basis) { return c * c * (basis + 2) + c * (9 + 2); }

std::size_t decoder_count(const ModelConfig& m) {
  const std::size_t basis = m.spline_intervals + m.spline_order;
  const auto& w = m.decoder_widths;
  const auto& e = m.encoder_channels;
  std::size_t n = e[3] * w[0];
  for (std::size_t s = 0; s < 3; ++s) {
    const std::size_t c = w[s], next = s + 1 < 3 ? w[s + 1] : w[2];
    n += 4 * c;                              // two layer norms
    n += 4 * (c * c + c) + 9 * c + c * c + c;  // q, k, v, proj, local depthwise + pointwise
    n += m.use_glkan_ffn ? 2 * kan_block_count(c, basis) : 2 * (c * c + c);
    n += c * next + e[2 - s] * next + 2;
  }
  return n + w[2] * m.num_classes + m.num_classes;
}

std::size_t deepkan_count(const ModelConfig& m) {
  const std::size_t c = m.encoder_channels[3];
  return m.deepkan_modules * (3 * kan_block_count(c, m.spline_intervals + m.spline_order) + 2 * c);
}

Tensor<float> random_images(std::size_t b, std::size_t s, std::uint64_t seed) {
  Rng rng(seed);
  return rng.normal_tensor<float>({b, 3, s, s}, 0, 1);
}

Tensor<float> forward(Model<float>& m, const Tensor<float>& x, Mode mode) {
  Graph<float> g(GraphOptions{false});
  return m(g, g.input(x), mode).value();
}

}  // namespace

TEST(Model, LogitsAtInputResolution) {
  Model<float> m(ModelConfig{}, 1);
  EXPECT_EQ(forward(m, random_images(2, 64, 2), Mode::train).shape(), (Shape{2, 6, 64, 64}));
}

TEST(Model, ParameterCountsAreClosedForm) {
  for (const ModelConfig& base : {ModelConfig::micro(), ModelConfig{}}) {
    for (Variant v : {Variant::baseline, Variant::deepkan, Variant::glkan, Variant::full}) {
      const ModelConfig c = base.with_variant(v);
      Model<float> m(c, 3);
      const std::size_t expect = encoder_count(c.encoder_channels) + decoder_count(c) + (c.use_deepkan ? deepkan_count(c) : 0);
      EXPECT_EQ(m.parameter_count(), expect) << variant_name(v);
    }
  }
}

TEST(Model, RefinementDeltaIsExactlyTheDeepKanModules) {
  const ModelConfig c = ModelConfig::micro();
  Model<float> base = make_variant<float>(c, Variant::baseline, 4);
  Model<float> deep = make_variant<float>(c, Variant::deepkan, 4);
  const std::size_t C = c.encoder_channels[3], G = c.spline_intervals, k = c.spline_order, N = c.deepkan_modules;
  EXPECT_EQ(deep.parameter_count() - base.parameter_count(), N * 3 * (C * C * (G + k + 2) + C * 11) + N * 2 * C);
}

TEST(Model, VariantsShareEncoderAndDecoderInitialisation) {
  const ModelConfig c = ModelConfig::micro();
  Model<float> base = make_variant<float>(c, Variant::baseline, 5);
  Model<float> deep = make_variant<float>(c, Variant::deepkan, 5);
  EXPECT_EQ(base.encoder.stem.weight.value, deep.encoder.stem.weight.value);
  EXPECT_EQ(base.decoder.classifier.weight.value, deep.decoder.classifier.weight.value);
  const auto x = random_images(2, 64, 6);
  EXPECT_NE(forward(base, x, Mode::train), forward(deep, x, Mode::train));
}

TEST(Model, EvalForwardIsDeterministic) {
  Model<float> m(ModelConfig::micro(), 7);
  const auto x = random_images(2, 64, 8);
  forward(m, x, Mode::train);
  EXPECT_EQ(forward(m, x, Mode::eval), forward(m, x, Mode::eval));
  Model<float> fresh(ModelConfig::micro(), 7);
  EXPECT_THROW(forward(fresh, x, Mode::eval), StateError);
}

TEST(Model, ConstantLogitShiftKeepsArgmax) {
  Model<float> m(ModelConfig::micro(), 9);
  const auto x = random_images(1, 64, 10);
  forward(m, x, Mode::train);
  const LogitFn<float> fn = model_logits(m);
  Rng rng(11);
  Raster img(64, 64, 3);
  for (auto& v : img.data) v = static_cast<std::uint8_t>(rng.integer(0, 255));
  const Raster before = argmax_map(stitch_logits(fn, img, 64, 64));
  for (auto& b : m.decoder.classifier_bias.value.buffer()) b += 3.0f;
  EXPECT_EQ(argmax_map(stitch_logits(fn, img, 64, 64)), before);
}

TEST(Model, EveryVariantTakesATrainingStep) {
  const auto samples = extract_patches(synth_generate(12, 1, 64), 64, 64);
  ASSERT_EQ(samples.size(), 1u);
  const std::vector<Sample> two{samples[0], samples[0]};
  RunConfig cfg;
  cfg.model = ModelConfig::micro();
  cfg.train.epochs = 1;
  cfg.train.milestones = {};
  cfg.train.batch = 2;
  for (Variant v : {Variant::baseline, Variant::deepkan, Variant::glkan, Variant::full}) {
    Model<float> m = make_variant<float>(cfg.model, v, 13);
    const Tensor<float> before = m.decoder.classifier.weight.value;
    const TrainResult r = train_loop(m, two, {}, cfg);
    EXPECT_TRUE(std::isfinite(r.epochs[0].loss)) << variant_name(v);
    EXPECT_NE(m.decoder.classifier.weight.value, before) << variant_name(v);
  }
}

TEST(Checkpoint, RoundTripRestoresEveryTensor) {
  const fs::path dir = fs::temp_directory_path() / "kanseg_test_model_ckpt";
  fs::remove_all(dir);
  RunConfig cfg;
  cfg.seed = 14;
  cfg.model = ModelConfig::micro().with_variant(Variant::glkan);
  Model<float> m(cfg.model, cfg.seed);
  const auto x = random_images(2, 64, 15);
  forward(m, x, Mode::train);
  m.decoder.fuse[1].value[0] = 0.25f;
  save_checkpoint(dir, m, cfg, {"note"});
  RunConfig loaded_cfg;
  Model<float> back = load_checkpoint<float>(dir, &loaded_cfg);
  EXPECT_EQ(loaded_cfg.model.variant(), Variant::glkan);
  EXPECT_EQ(forward(back, x, Mode::eval), forward(m, x, Mode::eval));
  const auto a = m.parameters(), b = back.parameters();
  ASSERT_EQ(a.size(), b.size());
  for (std::size_t i = 0; i < a.size(); ++i) EXPECT_EQ(a[i].param->value, b[i].param->value) << a[i].name;
}

TEST(Checkpoint, MismatchedModelIsRejected) {
  const fs::path dir = fs::temp_directory_path() / "kanseg_test_model_mismatch";
  fs::remove_all(dir);
  RunConfig cfg;
  cfg.model = ModelConfig::micro();
  Model<float> m(cfg.model, 1);
  save_checkpoint(dir, m, cfg);
  Model<float> other(ModelConfig::micro().with_variant(Variant::baseline), 1);
  EXPECT_THROW(assign_parameters(other.parameters(), io::load_records<float>(dir / kParamsFile)), IoError);
}
