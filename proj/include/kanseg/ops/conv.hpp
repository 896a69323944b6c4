#pragma once

#include <algorithm>
#include <cmath>
#include <limits>
#include <vector>

#include "kanseg/gemm.hpp"
#include "kanseg/graph.hpp"

namespace kanseg::ops {

struct Conv2dOptions {
  std::size_t stride = 1;
  std::size_t padding = 0;
};

namespace detail {

struct ConvGeometry {
  std::size_t cin, h, w, k, stride, pad, ho, wo;
};

/// col[(ci*k + ky)*k + kx][oy*wo + ox] = x[ci][oy*s + ky - p][ox*s + kx - p] (zero outside).
template <class T>
void im2col(const T* x, const ConvGeometry& g, T* col) {
  const std::size_t plane = g.ho * g.wo;
  for (std::size_t ci = 0; ci < g.cin; ++ci)
    for (std::size_t ky = 0; ky < g.k; ++ky)
      for (std::size_t kx = 0; kx < g.k; ++kx) {
        T* row = col + ((ci * g.k + ky) * g.k + kx) * plane;
        for (std::size_t oy = 0; oy < g.ho; ++oy) {
          const long iy = static_cast<long>(oy * g.stride + ky) - static_cast<long>(g.pad);
          T* dst = row + oy * g.wo;
          if (iy < 0 || iy >= static_cast<long>(g.h)) {
            std::fill_n(dst, g.wo, T{0});
            continue;
          }
          const T* src = x + (ci * g.h + static_cast<std::size_t>(iy)) * g.w;
          for (std::size_t ox = 0; ox < g.wo; ++ox) {
            const long ix = static_cast<long>(ox * g.stride + kx) - static_cast<long>(g.pad);
            dst[ox] = (ix < 0 || ix >= static_cast<long>(g.w)) ? T{0} : src[ix];
          }
        }
      }
}

template <class T>
void col2im_add(const T* col, const ConvGeometry& g, T* x) {
  const std::size_t plane = g.ho * g.wo;
  for (std::size_t ci = 0; ci < g.cin; ++ci)
    for (std::size_t ky = 0; ky < g.k; ++ky)
      for (std::size_t kx = 0; kx < g.k; ++kx) {
        const T* row = col + ((ci * g.k + ky) * g.k + kx) * plane;
        for (std::size_t oy = 0; oy < g.ho; ++oy) {
          const long iy = static_cast<long>(oy * g.stride + ky) - static_cast<long>(g.pad);
          if (iy < 0 || iy >= static_cast<long>(g.h)) continue;
          T* dst = x + (ci * g.h + static_cast<std::size_t>(iy)) * g.w;
          const T* src = row + oy * g.wo;
          for (std::size_t ox = 0; ox < g.wo; ++ox) {
            const long ix = static_cast<long>(ox * g.stride + kx) - static_cast<long>(g.pad);
            if (ix >= 0 && ix < static_cast<long>(g.w)) dst[ix] += src[ox];
          }
        }
      }
}

}  // namespace detail

/// Dense 2-D convolution, x [B,Ci,H,W], weight [Co,Ci,k,k] -> [B,Co,Ho,Wo]. No bias.
template <class T>
Var<T> conv2d(const Var<T>& x, const Var<T>& weight, Conv2dOptions opts = {}) {
  Graph<T>& g = x.graph();
  const Shape& s = x.shape();
  const Shape& ws = weight.shape();
  if (s.size() != 4 || ws.size() != 4 || ws[1] != s[1] || ws[2] != ws[3]) {
    g.fail("conv2d", "input " + to_string(s) + " incompatible with kernel " + to_string(ws));
  }
  if (opts.stride == 0) g.fail("conv2d", "stride must be positive");
  const std::size_t b = s[0], k = ws[2], cout = ws[0];
  if (s[2] + 2 * opts.padding < k || s[3] + 2 * opts.padding < k) g.fail("conv2d", "kernel larger than padded input");
  const detail::ConvGeometry geo{s[1], s[2], s[3], k, opts.stride, opts.padding,
                                 (s[2] + 2 * opts.padding - k) / opts.stride + 1,
                                 (s[3] + 2 * opts.padding - k) / opts.stride + 1};
  const std::size_t plane = geo.ho * geo.wo, ckk = geo.cin * k * k;
  Tensor<T> out({b, cout, geo.ho, geo.wo});
  std::vector<T> col(ckk * plane);
  const T* xv = x.value().data().data();
  const T* wv = weight.value().data().data();
  const bool pointwise = k == 1 && opts.stride == 1 && opts.padding == 0;
  for (std::size_t n = 0; n < b; ++n) {
    const T* img = xv + n * geo.cin * geo.h * geo.w;
    if (!pointwise) detail::im2col(img, geo, col.data());
    kanseg::detail::gemm(false, false, cout, plane, ckk, wv, pointwise ? img : col.data(),
                         out.data().data() + n * cout * plane, false);
  }
  const std::size_t ix = x.id(), iw = weight.id();
  return g.record("conv2d", std::move(out), {ix, iw}, [ix, iw, geo, b, cout, pointwise](Graph<T>& gr, const Tensor<T>& go) {
    const std::size_t plane = geo.ho * geo.wo, ckk = geo.cin * geo.k * geo.k, in_size = geo.cin * geo.h * geo.w;
    std::vector<T> col(ckk * plane);
    const T* xv = gr.value(ix).data().data();
    const T* wv = gr.value(iw).data().data();
    const bool dx = gr.requires_grad(ix), dw = gr.requires_grad(iw);
    T* gw = dw ? gr.grad_ref(iw).data().data() : nullptr;
    T* gx = dx ? gr.grad_ref(ix).data().data() : nullptr;
    for (std::size_t n = 0; n < b; ++n) {
      const T* gon = go.data().data() + n * cout * plane;
      if (dw) {
        const T* src = xv + n * in_size;
        if (!pointwise) {
          detail::im2col(src, geo, col.data());
          src = col.data();
        }
        kanseg::detail::gemm(false, true, cout, ckk, plane, gon, src, gw, true);
      }
      if (dx) {
        if (pointwise) {
          kanseg::detail::gemm(true, false, ckk, plane, cout, wv, gon, gx + n * in_size, true);
        } else {
          kanseg::detail::gemm(true, false, ckk, plane, cout, wv, gon, col.data(), false);
          detail::col2im_add(col.data(), geo, gx + n * in_size);
        }
      }
    }
  });
}

/// Per-channel k×k convolution with zero "same" padding; x [B,C,H,W], kernel [C,k,k].
template <class T>
Var<T> conv2d_depthwise(const Var<T>& x, const Var<T>& kernel) {
  Graph<T>& g = x.graph();
  const Shape& s = x.shape();
  const Shape& ks = kernel.shape();
  if (ks.size() != 3 || ks[1] != ks[2]) g.fail("conv2d_depthwise", "kernel must be [C,k,k], got " + to_string(ks));
  if (ks[1] % 2 == 0) g.fail("conv2d_depthwise", "kernel size must be odd, got " + std::to_string(ks[1]));
  if (s.size() != 4 || s[1] != ks[0]) {
    g.fail("conv2d_depthwise", "channel mismatch: input " + to_string(s) + ", kernel " + to_string(ks));
  }
  const std::size_t b = s[0], c = s[1], h = s[2], w = s[3], k = ks[1];
  const long p = static_cast<long>(k / 2);
  Tensor<T> out(s);
  const T* xv = x.value().data().data();
  const T* kv = kernel.value().data().data();
  for (std::size_t n = 0; n < b; ++n)
    for (std::size_t ch = 0; ch < c; ++ch) {
      const T* src = xv + (n * c + ch) * h * w;
      T* dst = out.data().data() + (n * c + ch) * h * w;
      const T* ker = kv + ch * k * k;
      for (std::size_t ky = 0; ky < k; ++ky)
        for (std::size_t kx = 0; kx < k; ++kx) {
          const T wgt = ker[ky * k + kx];
          const long dy = static_cast<long>(ky) - p, dx = static_cast<long>(kx) - p;
          const std::size_t y0 = static_cast<std::size_t>(std::max(0L, -dy));
          const std::size_t y1 = static_cast<std::size_t>(std::min(static_cast<long>(h), static_cast<long>(h) - dy));
          const std::size_t x0 = static_cast<std::size_t>(std::max(0L, -dx));
          const std::size_t x1 = static_cast<std::size_t>(std::min(static_cast<long>(w), static_cast<long>(w) - dx));
          for (std::size_t y = y0; y < y1; ++y) {
            const T* row = src + static_cast<std::size_t>(static_cast<long>(y) + dy) * w;
            T* orow = dst + y * w;
            for (std::size_t xx = x0; xx < x1; ++xx) orow[xx] += wgt * row[static_cast<long>(xx) + dx];
          }
        }
    }
  const std::size_t ix = x.id(), ik = kernel.id();
  return g.record("conv2d_depthwise", std::move(out), {ix, ik}, [ix, ik, b, c, h, w, k, p](Graph<T>& gr, const Tensor<T>& go) {
    const T* xv = gr.value(ix).data().data();
    const T* kv = gr.value(ik).data().data();
    const bool dx_needed = gr.requires_grad(ix), dk_needed = gr.requires_grad(ik);
    T* gx = dx_needed ? gr.grad_ref(ix).data().data() : nullptr;
    T* gk = dk_needed ? gr.grad_ref(ik).data().data() : nullptr;
    for (std::size_t n = 0; n < b; ++n)
      for (std::size_t ch = 0; ch < c; ++ch) {
        const std::size_t off = (n * c + ch) * h * w;
        const T* gsrc = go.data().data() + off;
        for (std::size_t ky = 0; ky < k; ++ky)
          for (std::size_t kx = 0; kx < k; ++kx) {
            const long dy = static_cast<long>(ky) - p, dx = static_cast<long>(kx) - p;
            const std::size_t y0 = static_cast<std::size_t>(std::max(0L, -dy));
            const std::size_t y1 = static_cast<std::size_t>(std::min(static_cast<long>(h), static_cast<long>(h) - dy));
            const std::size_t x0 = static_cast<std::size_t>(std::max(0L, -dx));
            const std::size_t x1 = static_cast<std::size_t>(std::min(static_cast<long>(w), static_cast<long>(w) - dx));
            const T wgt = kv[(ch * k + ky) * k + kx];
            T acc = 0;
            for (std::size_t y = y0; y < y1; ++y) {
              const std::size_t in_row = off + static_cast<std::size_t>(static_cast<long>(y) + dy) * w;
              const T* grow = gsrc + y * w;
              for (std::size_t xx = x0; xx < x1; ++xx) {
                const std::size_t idx = in_row + static_cast<std::size_t>(static_cast<long>(xx) + dx);
                if (gk) acc += grow[xx] * xv[idx];
                if (gx) gx[idx] += wgt * grow[xx];
              }
            }
            if (gk) gk[(ch * k + ky) * k + kx] += acc;
          }
      }
  });
}

/// 2×2 max pooling with stride 2; the first maximal element in scan order takes the gradient.
template <class T>
Var<T> max_pool2x2(const Var<T>& x) {
  Graph<T>& g = x.graph();
  const Shape& s = x.shape();
  if (s.size() != 4 || s[2] % 2 || s[3] % 2) g.fail("max_pool2x2", "expected [B,C,H,W] with even H, W; got " + to_string(s));
  const std::size_t planes = s[0] * s[1], h = s[2], w = s[3], ho = h / 2, wo = w / 2;
  Tensor<T> out({s[0], s[1], ho, wo});
  std::vector<std::size_t> argmax(out.size());
  const T* xv = x.value().data().data();
  PatternHash ph;
  for (std::size_t pl = 0; pl < planes; ++pl)
    for (std::size_t oy = 0; oy < ho; ++oy)
      for (std::size_t ox = 0; ox < wo; ++ox) {
        std::size_t best = pl * h * w + (2 * oy) * w + 2 * ox;
        for (std::size_t dy = 0; dy < 2; ++dy)
          for (std::size_t dx = 0; dx < 2; ++dx) {
            const std::size_t idx = pl * h * w + (2 * oy + dy) * w + 2 * ox + dx;
            if (xv[idx] > xv[best]) best = idx;
          }
        const std::size_t o = (pl * ho + oy) * wo + ox;
        out[o] = xv[best];
        argmax[o] = best;
        if (g.tracking_kinks()) ph.add(best);
      }
  if (g.tracking_kinks()) g.note_pattern(ph.value());
  const std::size_t ix = x.id();
  return g.record("max_pool2x2", std::move(out), {ix}, [ix, argmax = std::move(argmax)](Graph<T>& gr, const Tensor<T>& go) {
    Tensor<T>& gi = gr.grad_ref(ix);
    for (std::size_t o = 0; o < argmax.size(); ++o) gi[argmax[o]] += go[o];
  });
}

enum class Upsample { nearest, bilinear };

namespace detail {

struct Interp {
  std::size_t i0, i1;
  double w1;  // weight of i1; i0 gets 1 - w1
};

/// Source taps for integer-factor resize, half-pixel centres (align_corners = false).
inline std::vector<Interp> bilinear_taps(std::size_t in, std::size_t factor) {
  std::vector<Interp> taps(in * factor);
  for (std::size_t o = 0; o < taps.size(); ++o) {
    double src = (static_cast<double>(o) + 0.5) / static_cast<double>(factor) - 0.5;
    if (src < 0) src = 0;
    std::size_t i0 = static_cast<std::size_t>(std::floor(src));
    if (i0 > in - 1) i0 = in - 1;
    const std::size_t i1 = std::min(i0 + 1, in - 1);
    taps[o] = {i0, i1, src - static_cast<double>(i0)};
  }
  return taps;
}

}  // namespace detail

/// Integer-factor spatial upsampling of [B,C,H,W].
template <class T>
Var<T> upsample(const Var<T>& x, std::size_t factor, Upsample mode = Upsample::bilinear) {
  Graph<T>& g = x.graph();
  const Shape& s = x.shape();
  if (s.size() != 4 || factor == 0) g.fail("upsample", "expected [B,C,H,W] and positive factor, got " + to_string(s));
  const std::size_t planes = s[0] * s[1], h = s[2], w = s[3], ho = h * factor, wo = w * factor;
  std::vector<detail::Interp> ty, tx;
  if (mode == Upsample::bilinear) {
    ty = detail::bilinear_taps(h, factor);
    tx = detail::bilinear_taps(w, factor);
  } else {
    ty.resize(ho);
    tx.resize(wo);
    for (std::size_t o = 0; o < ho; ++o) ty[o] = {o / factor, o / factor, 0.0};
    for (std::size_t o = 0; o < wo; ++o) tx[o] = {o / factor, o / factor, 0.0};
  }
  Tensor<T> out({s[0], s[1], ho, wo});
  const T* xv = x.value().data().data();
  for (std::size_t pl = 0; pl < planes; ++pl) {
    const T* src = xv + pl * h * w;
    T* dst = out.data().data() + pl * ho * wo;
    for (std::size_t oy = 0; oy < ho; ++oy) {
      const auto& a = ty[oy];
      const T wy1 = static_cast<T>(a.w1), wy0 = T{1} - wy1;
      for (std::size_t ox = 0; ox < wo; ++ox) {
        const auto& bb = tx[ox];
        const T wx1 = static_cast<T>(bb.w1), wx0 = T{1} - wx1;
        dst[oy * wo + ox] = wy0 * (wx0 * src[a.i0 * w + bb.i0] + wx1 * src[a.i0 * w + bb.i1]) +
                            wy1 * (wx0 * src[a.i1 * w + bb.i0] + wx1 * src[a.i1 * w + bb.i1]);
      }
    }
  }
  const std::size_t ix = x.id();
  return g.record("upsample", std::move(out), {ix},
                  [ix, ty = std::move(ty), tx = std::move(tx), planes, h, w, ho, wo](Graph<T>& gr, const Tensor<T>& go) {
                    Tensor<T>& gi = gr.grad_ref(ix);
                    for (std::size_t pl = 0; pl < planes; ++pl) {
                      T* dst = gi.data().data() + pl * h * w;
                      const T* src = go.data().data() + pl * ho * wo;
                      for (std::size_t oy = 0; oy < ho; ++oy) {
                        const auto& a = ty[oy];
                        const T wy1 = static_cast<T>(a.w1), wy0 = T{1} - wy1;
                        for (std::size_t ox = 0; ox < wo; ++ox) {
                          const auto& bb = tx[ox];
                          const T wx1 = static_cast<T>(bb.w1), wx0 = T{1} - wx1;
                          const T v = src[oy * wo + ox];
                          dst[a.i0 * w + bb.i0] += wy0 * wx0 * v;
                          dst[a.i0 * w + bb.i1] += wy0 * wx1 * v;
                          dst[a.i1 * w + bb.i0] += wy1 * wx0 * v;
                          dst[a.i1 * w + bb.i1] += wy1 * wx1 * v;
                        }
                      }
                    }
                  });
}

}  // namespace kanseg::ops
