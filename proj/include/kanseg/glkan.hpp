#pragma once

#include <array>
#include <cmath>
#include <cstdint>
#include <string>
#include <vector>

#include "kanseg/kan.hpp"

namespace kanseg {

namespace ops {

/// (a*x + b*skip) / (a + b + eps) with a = relu(weights[0]), b = relu(weights[1]).
template <class T>
Var<T> weighted_fuse(const Var<T>& x, const Var<T>& skip, const Var<T>& weights, T eps) {
  Graph<T>& g = x.graph();
  if (x.shape() != skip.shape()) g.fail("weighted_fuse", "operands " + to_string(x.shape()) + " and " + to_string(skip.shape()));
  if (weights.shape() != Shape{2}) g.fail("weighted_fuse", "expected two fusion weights");
  const T a = std::max(weights.value()[0], T{0});
  const T b = std::max(weights.value()[1], T{0});
  const T z = a + b + eps;
  Tensor<T> out(x.shape());
  const auto& xv = x.value();
  const auto& sv = skip.value();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = (a * xv[i] + b * sv[i]) / z;
  if (g.tracking_kinks()) g.note_pattern((weights.value()[0] > T{0} ? 1u : 0u) | (weights.value()[1] > T{0} ? 2u : 0u));
  const std::size_t ix = x.id(), is = skip.id(), iw = weights.id();
  return g.record("weighted_fuse", std::move(out), {ix, is, iw}, [ix, is, iw, a, b, z](Graph<T>& gr, const Tensor<T>& go) {
    if (gr.requires_grad(ix)) {
      Tensor<T>& gi = gr.grad_ref(ix);
      for (std::size_t i = 0; i < gi.size(); ++i) gi[i] += go[i] * a / z;
    }
    if (gr.requires_grad(is)) {
      Tensor<T>& gi = gr.grad_ref(is);
      for (std::size_t i = 0; i < gi.size(); ++i) gi[i] += go[i] * b / z;
    }
    if (gr.requires_grad(iw)) {
      const auto& xv = gr.value(ix);
      const auto& sv = gr.value(is);
      const auto& wv = gr.value(iw);
      T da = 0, db = 0;
      for (std::size_t i = 0; i < go.size(); ++i) {
        const T o = (a * xv[i] + b * sv[i]) / z;
        da += go[i] * (xv[i] - o) / z;
        db += go[i] * (sv[i] - o) / z;
      }
      Tensor<T>& gw = gr.grad_ref(iw);
      if (wv[0] > T{0}) gw[0] += da;
      if (wv[1] > T{0}) gw[1] += db;
    }
  });
}

}  // namespace ops

/// Index maps for non-overlapping window partitioning of an h×w token grid, zero-padded up to
/// multiples of the window size.
struct WindowLayout {
  std::size_t batch = 0, h = 0, w = 0, window = 0;
  std::size_t windows_y = 0, windows_x = 0;
  std::vector<std::int64_t> partition;  // window-major rows -> token rows (-1 = padding)
  std::vector<std::int64_t> reverse;    // token rows -> window-major rows
  ops::SoftmaxMask mask;                // key validity per window (only meaningful when padded)
  bool padded = false;

  WindowLayout(std::size_t b, std::size_t hh, std::size_t ww, std::size_t win, std::size_t heads)
      : batch(b), h(hh), w(ww), window(win) {
    if (win == 0) throw ConfigError("WindowLayout: window size must be positive");
    windows_y = (h + win - 1) / win;
    windows_x = (w + win - 1) / win;
    padded = windows_y * win != h || windows_x * win != w;
    const std::size_t per_window = win * win, nw = windows_y * windows_x;
    partition.assign(b * nw * per_window, -1);
    reverse.assign(b * h * w, -1);
    mask.rows_per_group = heads * per_window;
    mask.groups = nw;
    mask.valid.assign(nw * per_window, 0);
    for (std::size_t n = 0; n < b; ++n)
      for (std::size_t wy = 0; wy < windows_y; ++wy)
        for (std::size_t wx = 0; wx < windows_x; ++wx)
          for (std::size_t iy = 0; iy < win; ++iy)
            for (std::size_t ix = 0; ix < win; ++ix) {
              const std::size_t y = wy * win + iy, x = wx * win + ix;
              const std::size_t wi = wy * windows_x + wx;
              const std::size_t row = (n * nw + wi) * per_window + iy * win + ix;
              if (y < h && x < w) {
                const std::size_t tok = (n * h + y) * w + x;
                partition[row] = static_cast<std::int64_t>(tok);
                reverse[tok] = static_cast<std::int64_t>(row);
                mask.valid[wi * per_window + iy * win + ix] = 1;
              }
            }
  }

  std::size_t num_windows() const { return batch * windows_y * windows_x; }
};

/// Global branch: non-overlapping window multi-head self-attention. Local branch: depthwise 3x3
/// followed by pointwise 1x1. Branch outputs are summed.
template <class T>
struct GlobalLocalAttention {
  std::size_t channels = 0, heads = 4, window = 8;
  Linear<T> q, k, v, proj;
  Parameter<T> local_dw;  // [C, 3, 3]
  Linear<T> local_pw;

  GlobalLocalAttention() = default;
  GlobalLocalAttention(std::size_t c, std::size_t num_heads, std::size_t win, Rng& rng)
      : channels(c), heads(num_heads), window(win), q(c, c, rng), k(c, c, rng), v(c, c, rng), proj(c, c, rng) {
    if (num_heads == 0 || c % num_heads != 0) {
      throw ConfigError("GlobalLocalAttention: " + std::to_string(c) + " channels not divisible into " +
                        std::to_string(num_heads) + " heads");
    }
    local_dw = Parameter<T>(rng.uniform_tensor<T>({c, 3, 3}, -1.0 / 3.0, 1.0 / 3.0));
    local_pw = Linear<T>(c, c, rng);
  }

  /// tokens [B, h*w, C] -> [B, h*w, C]
  Var<T> global_branch(Graph<T>& g, const Var<T>& t, std::size_t h, std::size_t w) {
    const std::size_t b = t.dim(0), c = channels, d = c / heads;
    const WindowLayout layout(b, h, w, window, heads);
    const std::size_t nw = layout.num_windows(), len = window * window;
    auto split = [&](const Var<T>& x) {
      Var<T> y = ops::gather_rows(x, c, layout.partition, {nw, len, c});
      y = ops::reshape(y, {nw, len, heads, d});
      return ops::permute(y, {0, 2, 1, 3});
    };
    const Var<T> qw = split(q(g, t));
    const Var<T> kw = split(k(g, t));
    const Var<T> vw = split(v(g, t));
    Var<T> scores = ops::scale(ops::bmm(qw, kw, false, true), T{1} / std::sqrt(static_cast<T>(d)));
    const Var<T> attn = ops::softmax(scores, layout.padded ? &layout.mask : nullptr);
    Var<T> o = ops::bmm(attn, vw);
    o = ops::reshape(ops::permute(o, {0, 2, 1, 3}), {nw * len, c});
    o = ops::gather_rows(o, c, layout.reverse, {b, h * w, c});
    return proj(g, o);
  }

  Var<T> local_branch(Graph<T>& g, const Var<T>& t, std::size_t h, std::size_t w) {
    Var<T> y = tokens_to_map(t, h, w);
    y = ops::conv2d_depthwise(y, g.param(local_dw));
    return local_pw(g, map_to_tokens(y));
  }

  Var<T> operator()(Graph<T>& g, const Var<T>& t, std::size_t h, std::size_t w) {
    if (t.shape().size() != 3 || t.dim(2) != channels || t.dim(1) != h * w) {
      g.fail("global_local_attention", "expected [B," + std::to_string(h * w) + "," + std::to_string(channels) + "], got " +
                                           to_string(t.shape()));
    }
    return ops::add(global_branch(g, t, h, w), local_branch(g, t, h, w));
  }

  void parameters(ParamList<T>& out, const std::string& prefix) {
    q.parameters(out, join_name(prefix, "q"));
    k.parameters(out, join_name(prefix, "k"));
    v.parameters(out, join_name(prefix, "v"));
    proj.parameters(out, join_name(prefix, "proj"));
    out.push_back({join_name(prefix, "local_dw"), &local_dw});
    local_pw.parameters(out, join_name(prefix, "local_pw"));
  }
};

/// Feed-forward path of a decoder block: two KAN blocks, or (ablation) two linear+ReLU layers.
template <class T>
struct DecoderFfn {
  bool use_kan = true;
  std::array<KanBlock<T>, 2> kan;
  std::array<Linear<T>, 2> plain;

  DecoderFfn() = default;
  DecoderFfn(std::size_t c, bool kan_ffn, const SplineGrid& grid, Rng& rng) : use_kan(kan_ffn) {
    if (use_kan) {
      kan = {KanBlock<T>(c, c, grid, rng), KanBlock<T>(c, c, grid, rng)};
    } else {
      plain = {Linear<T>(c, c, rng), Linear<T>(c, c, rng)};
    }
  }

  Var<T> operator()(Graph<T>& g, Var<T> z, std::size_t h, std::size_t w, Mode mode) {
    if (use_kan) {
      for (auto& block : kan) z = block(g, z, h, w, mode);
    } else {
      for (auto& layer : plain) z = ops::relu(layer(g, z));
    }
    return z;
  }

  void parameters(ParamList<T>& out, const std::string& prefix) {
    for (std::size_t i = 0; i < 2; ++i) {
      if (use_kan) {
        kan[i].parameters(out, join_name(prefix, "kan" + std::to_string(i)));
      } else {
        plain[i].parameters(out, join_name(prefix, "linear" + std::to_string(i)));
      }
    }
  }
};

/// F^ = GLAttn(LN(F)) + F;  out = FFN(LN(F^)) + F^.
template <class T>
struct GlkanBlock {
  std::size_t channels = 0;
  LayerNorm<T> ln1, ln2;
  GlobalLocalAttention<T> attn;
  DecoderFfn<T> ffn;

  GlkanBlock() = default;
  GlkanBlock(std::size_t c, std::size_t heads, std::size_t window, bool kan_ffn, const SplineGrid& grid, Rng& rng)
      : channels(c), ln1(c), ln2(c), attn(c, heads, window, rng), ffn(c, kan_ffn, grid, rng) {}

  /// f [B, C, h, w] -> [B, C, h, w]
  Var<T> operator()(Graph<T>& g, const Var<T>& f, Mode mode) {
    const Shape& s = f.shape();
    if (s.size() != 4 || s[1] != channels) {
      g.fail("glkan_block", "expected [B," + std::to_string(channels) + ",h,w], got " + to_string(s));
    }
    const std::size_t h = s[2], w = s[3];
    const Var<T> t = map_to_tokens(f);
    const Var<T> fhat = ops::add(attn(g, ln1(g, t), h, w), t);
    const Var<T> out = ops::add(ffn(g, ln2(g, fhat), h, w, mode), fhat);
    return tokens_to_map(out, h, w);
  }

  void parameters(ParamList<T>& out, const std::string& prefix) {
    ln1.parameters(out, join_name(prefix, "ln1"));
    attn.parameters(out, join_name(prefix, "attn"));
    ln2.parameters(out, join_name(prefix, "ln2"));
    ffn.parameters(out, join_name(prefix, "ffn"));
  }
};

struct DecoderConfig {
  std::array<std::size_t, 4> encoder_channels{64, 128, 256, 512};
  std::array<std::size_t, 3> widths{256, 128, 64};  // decoder stages j = 4, 3, 2
  std::size_t num_classes = 6;
  std::size_t heads = 4;
  std::size_t window = 8;
  bool kan_ffn = true;
  SplineGrid grid{};
  double fuse_eps = 1e-4;
};

/// Encoder skip features in stride order (F1 at stride 4 ... F3 at stride 16).
template <class T>
struct SkipFeatures {
  Var<T> f1, f2, f3;
};

template <class T>
struct Decoder {
  DecoderConfig cfg;
  Conv2d<T> in_proj;                    // C4 -> widths[0]
  std::array<GlkanBlock<T>, 3> blocks;  // j = 4, 3, 2
  std::array<Conv2d<T>, 3> up_proj;     // widths[s] -> widths[s+1] (last: widths[2] -> widths[2])
  std::array<Conv2d<T>, 3> skip_proj;   // C_{3-s} -> same target width
  std::array<Parameter<T>, 3> fuse;     // two raw weights per stage
  Conv2d<T> classifier;
  Parameter<T> classifier_bias;

  Decoder() = default;
  Decoder(const DecoderConfig& c, Rng& rng) : cfg(c) {
    if (c.num_classes < 2) throw ConfigError("Decoder: at least two classes required");
    in_proj = Conv2d<T>(c.encoder_channels[3], c.widths[0], 1, 1, 0, rng, ConvInit::uniform_fan_in);
    for (std::size_t s = 0; s < 3; ++s) {
      const std::size_t width = c.widths[s];
      const std::size_t next = s + 1 < 3 ? c.widths[s + 1] : c.widths[2];
      blocks[s] = GlkanBlock<T>(width, c.heads, c.window, c.kan_ffn, c.grid, rng);
      up_proj[s] = Conv2d<T>(width, next, 1, 1, 0, rng, ConvInit::uniform_fan_in);
      skip_proj[s] = Conv2d<T>(c.encoder_channels[2 - s], next, 1, 1, 0, rng, ConvInit::uniform_fan_in);
      fuse[s] = Parameter<T>(Tensor<T>({2}, T{1}));
    }
    classifier = Conv2d<T>(c.widths[2], c.num_classes, 1, 1, 0, rng, ConvInit::uniform_fan_in);
    classifier_bias = Parameter<T>(Tensor<T>({c.num_classes}, T{0}));
  }

  /// Feature entering the stage-s skip fusion: F3, F2, F1 for s = 0, 1, 2.
  static const Var<T>& skip_for(const SkipFeatures<T>& skips, std::size_t s) {
    return s == 0 ? skips.f3 : (s == 1 ? skips.f2 : skips.f1);
  }

  void check_pyramid(const Var<T>& refined, const SkipFeatures<T>& skips) const {
    const Shape& r = refined.shape();
    if (r.size() != 4) throw ShapeError("decode_pyramid: refined feature must be [B,C,h,w], got " + to_string(r));
    Shape expected{r[0], cfg.encoder_channels[3], r[2], r[3]};
    if (r != expected) {
      throw ShapeError("decode_pyramid: refined feature expected " + to_string(expected) + ", got " + to_string(r));
    }
    for (std::size_t s = 0; s < 3; ++s) {
      const std::size_t f = std::size_t{2} << s;
      expected = Shape{r[0], cfg.encoder_channels[2 - s], r[2] * f, r[3] * f};
      const Shape& actual = skip_for(skips, s).shape();
      if (actual != expected) {
        throw ShapeError("decode_pyramid: skip F" + std::to_string(3 - s) + " expected " + to_string(expected) +
                         ", got " + to_string(actual));
      }
    }
  }

  /// Returns unnormalised logits [B, C', 16h, 16w] for a refined map of extent h×w.
  Var<T> operator()(Graph<T>& g, const Var<T>& refined, const SkipFeatures<T>& skips, Mode mode) {
    check_pyramid(refined, skips);
    Var<T> x = in_proj(g, refined);
    for (std::size_t s = 0; s < 3; ++s) {
      x = blocks[s](g, x, mode);
      x = ops::upsample(x, 2, ops::Upsample::bilinear);
      x = up_proj[s](g, x);
      const Var<T> skip = skip_proj[s](g, skip_for(skips, s));
      x = ops::weighted_fuse(x, skip, g.param(fuse[s]), static_cast<T>(cfg.fuse_eps));
    }
    x = ops::add_bias(classifier(g, x), g.param(classifier_bias), 1);
    return ops::upsample(x, 4, ops::Upsample::bilinear);
  }

  void parameters(ParamList<T>& out, const std::string& prefix) {
    in_proj.parameters(out, join_name(prefix, "in_proj"));
    for (std::size_t s = 0; s < 3; ++s) {
      const std::string stage = join_name(prefix, "stage" + std::to_string(4 - s));
      blocks[s].parameters(out, join_name(stage, "block"));
      up_proj[s].parameters(out, join_name(stage, "up_proj"));
      skip_proj[s].parameters(out, join_name(stage, "skip_proj"));
      out.push_back({join_name(stage, "fuse"), &fuse[s]});
    }
    classifier.parameters(out, join_name(prefix, "classifier"));
    out.push_back({join_name(prefix, "classifier_bias"), &classifier_bias});
  }
};

}  // namespace kanseg
