#pragma once

#include <array>
#include <cstdint>
#include <optional>
#include <string>
#include <string_view>

#include "kanseg/deepkan.hpp"
#include "kanseg/encoder.hpp"
#include "kanseg/glkan.hpp"

namespace kanseg {

/// Ablation variants.
enum class Variant { baseline, deepkan, glkan, full };

inline std::string_view variant_name(Variant v) {
  switch (v) {
    case Variant::baseline: return "baseline";
    case Variant::deepkan: return "deepkan";
    case Variant::glkan: return "glkan";
    case Variant::full: return "full";
  }
  return "?";
}

inline Variant parse_variant(std::string_view s) {
  if (s == "baseline") return Variant::baseline;
  if (s == "deepkan") return Variant::deepkan;
  if (s == "glkan") return Variant::glkan;
  if (s == "full") return Variant::full;
  throw ConfigError("unknown variant '" + std::string(s) + "' (expected baseline|deepkan|glkan|full)");
}

struct ModelConfig {
  std::array<std::size_t, 4> encoder_channels{64, 128, 256, 512};
  std::array<std::size_t, 3> decoder_widths{256, 128, 64};
  std::size_t deepkan_modules = 4;
  std::size_t num_classes = 6;
  std::size_t heads = 4;
  std::size_t window = 8;
  double spline_min = -1.0;
  double spline_max = 1.0;
  std::size_t spline_intervals = 5;
  std::size_t spline_order = 3;
  bool use_deepkan = true;
  bool use_glkan_ffn = true;
  bool deepkan_residual = false;

  SplineGrid grid() const { return SplineGrid(spline_min, spline_max, spline_intervals, spline_order); }

  void validate() const {
    if (num_classes < 2) throw ConfigError("model.num_classes must be at least 2");
    if (deepkan_modules == 0) throw ConfigError("model.deepkan_modules must be at least 1");
    for (std::size_t c : encoder_channels)
      if (c == 0) throw ConfigError("model.encoder_channels must be positive");
    for (std::size_t c : decoder_widths)
      if (c == 0 || c % heads != 0) throw ConfigError("model.decoder_widths must be positive multiples of model.heads");
    if (window == 0) throw ConfigError("model.window must be positive");
    (void)grid();
  }

  Variant variant() const {
    if (use_deepkan && use_glkan_ffn) return Variant::full;
    if (use_deepkan) return Variant::deepkan;
    if (use_glkan_ffn) return Variant::glkan;
    return Variant::baseline;
  }

  ModelConfig with_variant(Variant v) const {
    ModelConfig c = *this;
    c.use_deepkan = v == Variant::deepkan || v == Variant::full;
    c.use_glkan_ffn = v == Variant::glkan || v == Variant::full;
    return c;
  }

  /// Tiny configuration for gradient checks and fast tests.
  static ModelConfig micro() {
    ModelConfig c;
    c.encoder_channels = {8, 16, 32, 64};
    c.decoder_widths = {16, 8, 8};
    c.deepkan_modules = 1;
    c.heads = 2;
    c.window = 2;
    return c;
  }
};

/// Encoder -> (optional) DeepKAN refinement of F4 -> GLKAN decoder -> logits at input resolution.
template <class T>
struct Model {
  ModelConfig cfg;
  Encoder<T> encoder;
  std::optional<DeepKan<T>> refine;
  Decoder<T> decoder;

  Model() = default;
  Model(const ModelConfig& c, std::uint64_t seed) : cfg(c) {
    c.validate();
    // Independent streams keep encoder/decoder initialisation identical across variants.
    Rng enc_rng(seed * 4 + 1), deep_rng(seed * 4 + 2), dec_rng(seed * 4 + 3);
    encoder = Encoder<T>(EncoderConfig{3, c.encoder_channels}, enc_rng);
    if (c.use_deepkan) {
      refine = DeepKan<T>(DeepKanConfig{c.deepkan_modules, c.encoder_channels[3], c.grid(), c.deepkan_residual}, deep_rng);
    }
    DecoderConfig dc;
    dc.encoder_channels = c.encoder_channels;
    dc.widths = c.decoder_widths;
    dc.num_classes = c.num_classes;
    dc.heads = c.heads;
    dc.window = c.window;
    dc.kan_ffn = c.use_glkan_ffn;
    dc.grid = c.grid();
    decoder = Decoder<T>(dc, dec_rng);
  }

  /// image [B,3,H,W] with H, W divisible by 32 -> logits [B,C',H,W].
  Var<T> operator()(Graph<T>& g, const Var<T>& image, Mode mode) {
    const FeaturePyramid<T> p = encoder(g, image, mode);
    Var<T> f4 = p.f[3];
    if (cfg.use_deepkan && refine) f4 = (*refine)(g, f4, mode);
    return decoder(g, f4, SkipFeatures<T>{p.f[0], p.f[1], p.f[2]}, mode);
  }

  ParamList<T> parameters() {
    ParamList<T> out;
    encoder.parameters(out, "encoder");
    if (cfg.use_deepkan && refine) refine->parameters(out, "deepkan");
    decoder.parameters(out, "decoder");
    return out;
  }

  std::size_t parameter_count() { return count_trainable(parameters()); }
};

template <class T>
Model<T> make_variant(const ModelConfig& cfg, Variant v, std::uint64_t seed) {
  return Model<T>(cfg.with_variant(v), seed);
}

}  // namespace kanseg
