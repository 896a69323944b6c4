#pragma once

#include <cmath>
#include <vector>

#include "kanseg/graph.hpp"

namespace kanseg::ops {

/// Normalises each row over the last axis, then applies per-channel gamma/beta.
template <class T>
Var<T> layer_norm(const Var<T>& x, const Var<T>& gamma, const Var<T>& beta, T eps = T(1e-6)) {
  Graph<T>& g = x.graph();
  const std::size_t c = x.shape().back();
  if (gamma.shape() != Shape{c} || beta.shape() != Shape{c}) {
    g.fail("layer_norm", "affine parameters do not match channel extent of " + to_string(x.shape()));
  }
  const std::size_t rows = x.value().size() / c;
  Tensor<T> out(x.shape());
  std::vector<T> xhat(x.value().size());
  std::vector<T> inv_std(rows);
  const auto& xv = x.value();
  const auto& gv = gamma.value();
  const auto& bv = beta.value();
  for (std::size_t r = 0; r < rows; ++r) {
    const T* p = xv.data().data() + r * c;
    T mu = 0;
    for (std::size_t j = 0; j < c; ++j) mu += p[j];
    mu /= static_cast<T>(c);
    T var = 0;
    for (std::size_t j = 0; j < c; ++j) var += (p[j] - mu) * (p[j] - mu);
    var /= static_cast<T>(c);
    const T is = T{1} / std::sqrt(var + eps);
    inv_std[r] = is;
    for (std::size_t j = 0; j < c; ++j) {
      const T h = (p[j] - mu) * is;
      xhat[r * c + j] = h;
      out[r * c + j] = h * gv[j] + bv[j];
    }
  }
  const std::size_t ix = x.id(), ig = gamma.id(), ib = beta.id();
  return g.record("layer_norm", std::move(out), {ix, ig, ib},
                  [ix, ig, ib, c, rows, xhat = std::move(xhat), inv_std = std::move(inv_std)](Graph<T>& gr,
                                                                                              const Tensor<T>& go) {
                    if (gr.requires_grad(ig) || gr.requires_grad(ib)) {
                      const bool dg = gr.requires_grad(ig), db = gr.requires_grad(ib);
                      Tensor<T>* gg = dg ? &gr.grad_ref(ig) : nullptr;
                      Tensor<T>* gb = db ? &gr.grad_ref(ib) : nullptr;
                      for (std::size_t r = 0; r < rows; ++r)
                        for (std::size_t j = 0; j < c; ++j) {
                          if (gg) (*gg)[j] += go[r * c + j] * xhat[r * c + j];
                          if (gb) (*gb)[j] += go[r * c + j];
                        }
                    }
                    if (gr.requires_grad(ix)) {
                      Tensor<T>& gi = gr.grad_ref(ix);
                      const auto& gv = gr.value(ig);
                      const T inv_c = T{1} / static_cast<T>(c);
                      for (std::size_t r = 0; r < rows; ++r) {
                        T s1 = 0, s2 = 0;
                        for (std::size_t j = 0; j < c; ++j) {
                          const T d = go[r * c + j] * gv[j];
                          s1 += d;
                          s2 += d * xhat[r * c + j];
                        }
                        for (std::size_t j = 0; j < c; ++j) {
                          const T d = go[r * c + j] * gv[j];
                          gi[r * c + j] += inv_std[r] * (d - inv_c * s1 - xhat[r * c + j] * inv_c * s2);
                        }
                      }
                    }
                  });
}

/// Running statistics of a batch-norm layer. `tracked` counts train-mode updates; evaluation
/// requires either at least one update or explicitly installed statistics.
template <class T>
struct BatchNormState {
  Parameter<T> running_mean;
  Parameter<T> running_var;
  Parameter<T> tracked;  // single element, stored as a tensor so it round-trips through checkpoints

  explicit BatchNormState(std::size_t channels = 1)
      : running_mean(Tensor<T>({channels}, T{0}), false),
        running_var(Tensor<T>({channels}, T{1}), false),
        tracked(Tensor<T>({1}, T{0}), false) {}

  bool initialized() const { return tracked.value[0] > T{0}; }
  void mark_initialized() { tracked.value[0] = std::max(tracked.value[0], T{1}); }
};

struct BatchNormOptions {
  double eps = 1e-5;
  double momentum = 0.1;
};

/// Batch norm over channel axis 1; statistics over every other axis.
template <class T>
Var<T> batch_norm(const Var<T>& x, const Var<T>& gamma, const Var<T>& beta, BatchNormState<T>& state, Mode mode,
                  BatchNormOptions opts = {}) {
  Graph<T>& g = x.graph();
  const Shape& s = x.shape();
  if (s.size() < 2) g.fail("batch_norm", "expected at least rank 2, got " + to_string(s));
  const std::size_t b = s[0], c = s[1], inner = x.value().size() / (b * c);
  if (gamma.shape() != Shape{c} || beta.shape() != Shape{c} || state.running_mean.value.shape() != Shape{c}) {
    g.fail("batch_norm", "parameters do not match channel extent of " + to_string(s));
  }
  if (mode == Mode::eval && !state.initialized()) {
    throw StateError("batch_norm: evaluation mode requested but running statistics were never initialised");
  }
  const T eps = static_cast<T>(opts.eps);
  const std::size_t count = b * inner;
  std::vector<T> mean(c), inv_std(c);
  const T* xv = x.value().data().data();
  if (mode == Mode::train) {
    for (std::size_t ch = 0; ch < c; ++ch) {
      T mu = 0;
      for (std::size_t n = 0; n < b; ++n) {
        const T* p = xv + (n * c + ch) * inner;
        for (std::size_t i = 0; i < inner; ++i) mu += p[i];
      }
      mu /= static_cast<T>(count);
      T var = 0;
      for (std::size_t n = 0; n < b; ++n) {
        const T* p = xv + (n * c + ch) * inner;
        for (std::size_t i = 0; i < inner; ++i) var += (p[i] - mu) * (p[i] - mu);
      }
      var /= static_cast<T>(count);
      mean[ch] = mu;
      inv_std[ch] = T{1} / std::sqrt(var + eps);
      const T m = static_cast<T>(opts.momentum);
      const T unbiased = count > 1 ? var * static_cast<T>(count) / static_cast<T>(count - 1) : var;
      state.running_mean.value[ch] = (T{1} - m) * state.running_mean.value[ch] + m * mu;
      state.running_var.value[ch] = (T{1} - m) * state.running_var.value[ch] + m * unbiased;
    }
    state.tracked.value[0] += T{1};
  } else {
    for (std::size_t ch = 0; ch < c; ++ch) {
      mean[ch] = state.running_mean.value[ch];
      inv_std[ch] = T{1} / std::sqrt(state.running_var.value[ch] + eps);
    }
  }
  Tensor<T> out(s);
  std::vector<T> xhat(x.value().size());
  const auto& gv = gamma.value();
  const auto& bv = beta.value();
  for (std::size_t n = 0; n < b; ++n)
    for (std::size_t ch = 0; ch < c; ++ch) {
      const std::size_t off = (n * c + ch) * inner;
      for (std::size_t i = 0; i < inner; ++i) {
        const T h = (xv[off + i] - mean[ch]) * inv_std[ch];
        xhat[off + i] = h;
        out[off + i] = h * gv[ch] + bv[ch];
      }
    }
  const std::size_t ix = x.id(), ig = gamma.id(), ib = beta.id();
  const bool batch_stats = mode == Mode::train;
  return g.record("batch_norm", std::move(out), {ix, ig, ib},
                  [ix, ig, ib, b, c, inner, count, batch_stats, xhat = std::move(xhat),
                   inv_std = std::move(inv_std)](Graph<T>& gr, const Tensor<T>& go) {
                    std::vector<T> sum_dy(c, T{0}), sum_dy_xhat(c, T{0});
                    for (std::size_t n = 0; n < b; ++n)
                      for (std::size_t ch = 0; ch < c; ++ch) {
                        const std::size_t off = (n * c + ch) * inner;
                        T s1 = 0, s2 = 0;
                        for (std::size_t i = 0; i < inner; ++i) {
                          s1 += go[off + i];
                          s2 += go[off + i] * xhat[off + i];
                        }
                        sum_dy[ch] += s1;
                        sum_dy_xhat[ch] += s2;
                      }
                    if (gr.requires_grad(ig)) {
                      Tensor<T>& gg = gr.grad_ref(ig);
                      for (std::size_t ch = 0; ch < c; ++ch) gg[ch] += sum_dy_xhat[ch];
                    }
                    if (gr.requires_grad(ib)) {
                      Tensor<T>& gb = gr.grad_ref(ib);
                      for (std::size_t ch = 0; ch < c; ++ch) gb[ch] += sum_dy[ch];
                    }
                    if (gr.requires_grad(ix)) {
                      Tensor<T>& gi = gr.grad_ref(ix);
                      const auto& gv = gr.value(ig);
                      const T inv_n = T{1} / static_cast<T>(count);
                      for (std::size_t n = 0; n < b; ++n)
                        for (std::size_t ch = 0; ch < c; ++ch) {
                          const std::size_t off = (n * c + ch) * inner;
                          const T k = gv[ch] * inv_std[ch];
                          if (batch_stats) {
                            for (std::size_t i = 0; i < inner; ++i) {
                              gi[off + i] += k * (go[off + i] - inv_n * sum_dy[ch] - xhat[off + i] * inv_n * sum_dy_xhat[ch]);
                            }
                          } else {
                            for (std::size_t i = 0; i < inner; ++i) gi[off + i] += k * go[off + i];
                          }
                        }
                    }
                  });
}

}  // namespace kanseg::ops
