#pragma once

#include <cmath>
#include <string>
#include <vector>

#include "kanseg/layers.hpp"
#include "kanseg/spline.hpp"

namespace kanseg {

namespace ops {

/// Per-feature KAN expansion: x [..., I] -> [..., I*(G+k+1)] where slot p*(G+k+1) holds
/// silu(x_p) and the following G+k slots hold B_i(clamp(x_p)).
template <class T>
Var<T> kan_expand(const Var<T>& x, const SplineGrid& grid) {
  Graph<T>& g = x.graph();
  const Shape& s = x.shape();
  const std::size_t nb = grid.num_basis(), stride = nb + 1, k = grid.order();
  const std::size_t count = x.value().size();
  Shape out_shape = s;
  out_shape.back() *= stride;
  Tensor<T> out(out_shape);
  const T* xv = x.value().data().data();
  T* ov = out.data().data();
  PatternHash ph;
  const bool track = g.tracking_kinks();
  for (std::size_t i = 0; i < count; ++i) {
    const T v = xv[i];
    T* row = ov + i * stride;
    row[0] = v * sigmoid_scalar(v);
    const BasisBand<T> band = basis_band(grid, v);
    for (std::size_t r = 0; r <= k; ++r) row[1 + band.first + r] = band.values[r];
    if (track) ph.add((band.interval << 2) | static_cast<std::size_t>(band.clamped + 1));
  }
  if (track) g.note_pattern(ph.value());
  const std::size_t ix = x.id();
  return g.record("kan_expand", std::move(out), {ix}, [ix, grid, count, stride, k](Graph<T>& gr, const Tensor<T>& go) {
    Tensor<T>& gi = gr.grad_ref(ix);
    const auto& xv = gr.value(ix);
    for (std::size_t i = 0; i < count; ++i) {
      const T v = xv[i];
      const T* grow = go.data().data() + i * stride;
      const T sg = sigmoid_scalar(v);
      T acc = grow[0] * sg * (T{1} + v * (T{1} - sg));
      const BasisBand<T> band = basis_band(grid, v);
      if (band.clamped == 0) {
        for (std::size_t r = 0; r <= k; ++r) acc += grow[1 + band.first + r] * band.derivs[r];
      }
      gi[i] += acc;
    }
  });
}

/// Assembles the dense weight of a KAN layer: W[q, p*(G+k+1)] = base[q,p],
/// W[q, p*(G+k+1) + 1 + i] = scale[q,p] * coeff[q,p,i].
template <class T>
Var<T> kan_edge_weights(const Var<T>& base, const Var<T>& scale, const Var<T>& coeffs) {
  Graph<T>& g = base.graph();
  const Shape& cs = coeffs.shape();
  if (cs.size() != 3 || base.shape() != Shape{cs[0], cs[1]} || scale.shape() != base.shape()) {
    g.fail("kan_edge_weights", "inconsistent edge parameter shapes " + to_string(base.shape()) + ", " +
                                   to_string(scale.shape()) + ", " + to_string(cs));
  }
  const std::size_t no = cs[0], ni = cs[1], nb = cs[2], stride = nb + 1;
  Tensor<T> out({no, ni * stride});
  const auto& bv = base.value();
  const auto& sv = scale.value();
  const auto& cv = coeffs.value();
  for (std::size_t q = 0; q < no; ++q)
    for (std::size_t p = 0; p < ni; ++p) {
      T* row = out.data().data() + q * ni * stride + p * stride;
      row[0] = bv[q * ni + p];
      const T sc = sv[q * ni + p];
      const T* c = cv.data().data() + (q * ni + p) * nb;
      for (std::size_t i = 0; i < nb; ++i) row[1 + i] = sc * c[i];
    }
  const std::size_t ib = base.id(), is = scale.id(), ic = coeffs.id();
  return g.record("kan_edge_weights", std::move(out), {ib, is, ic},
                  [ib, is, ic, no, ni, nb, stride](Graph<T>& gr, const Tensor<T>& go) {
                    const bool db = gr.requires_grad(ib), ds = gr.requires_grad(is), dc = gr.requires_grad(ic);
                    Tensor<T>* gb = db ? &gr.grad_ref(ib) : nullptr;
                    Tensor<T>* gs = ds ? &gr.grad_ref(is) : nullptr;
                    Tensor<T>* gc = dc ? &gr.grad_ref(ic) : nullptr;
                    const auto& sv = gr.value(is);
                    const auto& cv = gr.value(ic);
                    for (std::size_t q = 0; q < no; ++q)
                      for (std::size_t p = 0; p < ni; ++p) {
                        const std::size_t e = q * ni + p;
                        const T* grow = go.data().data() + q * ni * stride + p * stride;
                        if (gb) (*gb)[e] += grow[0];
                        T acc = 0;
                        for (std::size_t i = 0; i < nb; ++i) {
                          acc += grow[1 + i] * cv[e * nb + i];
                          if (gc) (*gc)[e * nb + i] += grow[1 + i] * sv[e];
                        }
                        if (gs) (*gs)[e] += acc;
                      }
                  });
}

}  // namespace ops

/// A layer of learnable univariate edge functions
///   phi_{q,p}(x) = w_b[q,p] * silu(x) + w_s[q,p] * sum_i c[q,p,i] B_i(x),
/// with out[..., q] = sum_p phi_{q,p}(x[..., p]).
template <class T>
struct KanLayer {
  SplineGrid grid;
  Parameter<T> spline_coeffs;  // [n_out, n_in, G+k]
  Parameter<T> base_weight;    // [n_out, n_in]
  Parameter<T> spline_weight;  // [n_out, n_in]

  KanLayer() = default;

  KanLayer(std::size_t n_in, std::size_t n_out, const SplineGrid& g, Rng& rng) : grid(g) {
    if (n_in == 0 || n_out == 0) throw ConfigError("KanLayer: feature extents must be positive");
    const std::size_t nb = grid.num_basis();
    spline_coeffs = Parameter<T>(rng.normal_tensor<T>({n_out, n_in, nb}, 0.0, 0.1 / static_cast<double>(nb)));
    const double bound = std::sqrt(1.0 / static_cast<double>(n_in));
    base_weight = Parameter<T>(rng.uniform_tensor<T>({n_out, n_in}, -bound, bound));
    spline_weight = Parameter<T>(Tensor<T>({n_out, n_in}, T{1}));
  }

  std::size_t n_in() const { return base_weight.value.dim(1); }
  std::size_t n_out() const { return base_weight.value.dim(0); }

  /// x [..., n_in] -> [..., n_out]
  Var<T> operator()(Graph<T>& g, const Var<T>& x) {
    if (x.shape().back() != n_in()) {
      g.fail("kan_layer", "last extent " + std::to_string(x.shape().back()) + " != n_in " + std::to_string(n_in()));
    }
    const Var<T> w = ops::kan_edge_weights(g.param(base_weight), g.param(spline_weight), g.param(spline_coeffs));
    return ops::linear(ops::kan_expand(x, grid), w);
  }

  void parameters(ParamList<T>& out, const std::string& prefix) {
    out.push_back({join_name(prefix, "spline_coeffs"), &spline_coeffs});
    out.push_back({join_name(prefix, "base_weight"), &base_weight});
    out.push_back({join_name(prefix, "spline_weight"), &spline_weight});
  }
};

/// Composition of KAN layers; layers[0] is applied first.
template <class T>
struct KanStack {
  std::vector<KanLayer<T>> layers;

  KanStack() = default;
  explicit KanStack(std::vector<KanLayer<T>> ls) : layers(std::move(ls)) {
    if (layers.empty()) throw ConfigError("KanStack: at least one layer required");
    for (std::size_t i = 0; i + 1 < layers.size(); ++i) {
      if (layers[i].n_out() != layers[i + 1].n_in()) {
        throw ConfigError("KanStack: layer " + std::to_string(i) + " emits " + std::to_string(layers[i].n_out()) +
                          " features but layer " + std::to_string(i + 1) + " expects " +
                          std::to_string(layers[i + 1].n_in()));
      }
    }
  }

  /// widths = {n_0, n_1, ..., n_K}
  KanStack(const std::vector<std::size_t>& widths, const SplineGrid& grid, Rng& rng) {
    if (widths.size() < 2) throw ConfigError("KanStack: need at least two widths");
    for (std::size_t i = 0; i + 1 < widths.size(); ++i) layers.emplace_back(widths[i], widths[i + 1], grid, rng);
  }

  Var<T> operator()(Graph<T>& g, Var<T> x) {
    for (auto& layer : layers) x = layer(g, x);
    return x;
  }

  void parameters(ParamList<T>& out, const std::string& prefix) {
    for (std::size_t i = 0; i < layers.size(); ++i) layers[i].parameters(out, join_name(prefix, std::to_string(i)));
  }
};

/// KAN layer applied tokenwise, then depthwise 3x3 convolution on the restored spatial layout,
/// batch norm and ReLU: relu(BN(DwConv(Phi Z))).
template <class T>
struct KanBlock {
  KanLayer<T> kan;
  Parameter<T> dw_kernel;  // [n_out, 3, 3]
  BatchNorm<T> bn;

  KanBlock() = default;
  KanBlock(std::size_t n_in, std::size_t n_out, const SplineGrid& grid, Rng& rng) : kan(n_in, n_out, grid, rng), bn(n_out) {
    const double bound = 1.0 / 3.0;  // fan-in of a depthwise 3x3 kernel is 9
    dw_kernel = Parameter<T>(rng.uniform_tensor<T>({n_out, 3, 3}, -bound, bound));
  }

  std::size_t n_in() const { return kan.n_in(); }
  std::size_t n_out() const { return kan.n_out(); }

  /// z [B, h*w, n_in] -> [B, h*w, n_out]
  Var<T> operator()(Graph<T>& g, const Var<T>& z, std::size_t h, std::size_t w, Mode mode) {
    const Shape& s = z.shape();
    if (s.size() != 3 || s[1] != h * w) {
      g.fail("kan_block", "sequence " + to_string(s) + " is not factorable as " + std::to_string(h) + "x" + std::to_string(w));
    }
    if (s[2] != n_in()) g.fail("kan_block", "channel extent " + std::to_string(s[2]) + " != n_in " + std::to_string(n_in()));
    Var<T> y = kan(g, z);
    y = tokens_to_map(y, h, w);
    y = ops::conv2d_depthwise(y, g.param(dw_kernel));
    y = bn(g, y, mode);
    y = ops::relu(y);
    return map_to_tokens(y);
  }

  void parameters(ParamList<T>& out, const std::string& prefix) {
    kan.parameters(out, join_name(prefix, "kan"));
    out.push_back({join_name(prefix, "dw_kernel"), &dw_kernel});
    bn.parameters(out, join_name(prefix, "bn"));
  }
};

}  // namespace kanseg
