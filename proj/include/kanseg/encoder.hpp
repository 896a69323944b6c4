#pragma once

#include <array>
#include <optional>
#include <string>

#include "kanseg/layers.hpp"

namespace kanseg {

template <class T>
struct FeaturePyramid {
  std::array<Var<T>, 4> f;  // strides 4, 8, 16, 32
};

/// Two 3x3 conv/BN layers with an additive shortcut; the first conv carries the stage stride and
/// the shortcut becomes a 1x1 conv/BN projection whenever the shape changes.
template <class T>
struct ResidualStage {
  Conv2d<T> conv1, conv2;
  BatchNorm<T> bn1, bn2;
  std::optional<Conv2d<T>> shortcut;
  std::optional<BatchNorm<T>> shortcut_bn;

  ResidualStage() = default;
  ResidualStage(std::size_t in, std::size_t out, std::size_t stride, Rng& rng)
      : conv1(in, out, 3, stride, 1, rng), conv2(out, out, 3, 1, 1, rng), bn1(out), bn2(out) {
    if (stride != 1 || in != out) {
      shortcut = Conv2d<T>(in, out, 1, stride, 0, rng);
      shortcut_bn = BatchNorm<T>(out);
    }
  }

  Var<T> operator()(Graph<T>& g, const Var<T>& x, Mode mode) {
    Var<T> y = ops::relu(bn1(g, conv1(g, x), mode));
    y = bn2(g, conv2(g, y), mode);
    const Var<T> s = shortcut ? (*shortcut_bn)(g, (*shortcut)(g, x), mode) : x;
    return ops::relu(ops::add(y, s));
  }

  void parameters(ParamList<T>& out, const std::string& prefix) {
    conv1.parameters(out, join_name(prefix, "conv1"));
    bn1.parameters(out, join_name(prefix, "bn1"));
    conv2.parameters(out, join_name(prefix, "conv2"));
    bn2.parameters(out, join_name(prefix, "bn2"));
    if (shortcut) {
      shortcut->parameters(out, join_name(prefix, "shortcut"));
      shortcut_bn->parameters(out, join_name(prefix, "shortcut_bn"));
    }
  }
};

struct EncoderConfig {
  std::size_t in_channels = 3;
  std::array<std::size_t, 4> channels{64, 128, 256, 512};
};

/// ResNet-style encoder: stride-2 3x3 stem + BN + ReLU + 2x2 max-pool, then four residual stages
/// (stride 1, 2, 2, 2) yielding features at strides 4, 8, 16 and 32.
template <class T>
struct Encoder {
  EncoderConfig cfg;
  Conv2d<T> stem;
  BatchNorm<T> stem_bn;
  std::array<ResidualStage<T>, 4> stages;

  Encoder() = default;
  Encoder(const EncoderConfig& c, Rng& rng) : cfg(c), stem(c.in_channels, c.channels[0], 3, 2, 1, rng), stem_bn(c.channels[0]) {
    std::size_t in = c.channels[0];
    for (std::size_t i = 0; i < 4; ++i) {
      stages[i] = ResidualStage<T>(in, c.channels[i], i == 0 ? 1 : 2, rng);
      in = c.channels[i];
    }
  }

  static constexpr std::size_t kDivisor = 32;

  FeaturePyramid<T> operator()(Graph<T>& g, const Var<T>& image, Mode mode) {
    const Shape& s = image.shape();
    if (s.size() != 4 || s[1] != cfg.in_channels) {
      throw ShapeError("encode: expected [B," + std::to_string(cfg.in_channels) + ",H,W], got " + to_string(s));
    }
    if (s[2] % kDivisor != 0 || s[3] % kDivisor != 0) {
      throw ShapeError("encode: image extent " + std::to_string(s[2]) + "x" + std::to_string(s[3]) +
                       " must be divisible by " + std::to_string(kDivisor));
    }
    Var<T> x = ops::relu(stem_bn(g, stem(g, image), mode));
    x = ops::max_pool2x2(x);
    FeaturePyramid<T> out;
    for (std::size_t i = 0; i < 4; ++i) {
      x = stages[i](g, x, mode);
      out.f[i] = x;
    }
    return out;
  }

  void parameters(ParamList<T>& out, const std::string& prefix) {
    stem.parameters(out, join_name(prefix, "stem"));
    stem_bn.parameters(out, join_name(prefix, "stem_bn"));
    for (std::size_t i = 0; i < 4; ++i) stages[i].parameters(out, join_name(prefix, "stage" + std::to_string(i + 1)));
  }
};

}  // namespace kanseg
