#pragma once

#include <cmath>
#include <cstdint>
#include <vector>

#include "kanseg/graph.hpp"

namespace kanseg::ops {

template <class T>
Var<T> add(const Var<T>& a, const Var<T>& b) {
  Graph<T>& g = a.graph();
  if (a.shape() != b.shape()) g.fail("add", "operands " + to_string(a.shape()) + " and " + to_string(b.shape()));
  Tensor<T> out = a.value();
  const auto& bv = b.value();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] += bv[i];
  const std::size_t ia = a.id(), ib = b.id();
  return g.record("add", std::move(out), {ia, ib}, [ia, ib](Graph<T>& gr, const Tensor<T>& go) {
    for (std::size_t id : {ia, ib}) {
      if (!gr.requires_grad(id)) continue;
      Tensor<T>& gi = gr.grad_ref(id);
      for (std::size_t i = 0; i < gi.size(); ++i) gi[i] += go[i];
    }
  });
}

template <class T>
Var<T> mul(const Var<T>& a, const Var<T>& b) {
  Graph<T>& g = a.graph();
  if (a.shape() != b.shape()) g.fail("mul", "operands " + to_string(a.shape()) + " and " + to_string(b.shape()));
  Tensor<T> out = a.value();
  const auto& bv = b.value();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] *= bv[i];
  const std::size_t ia = a.id(), ib = b.id();
  return g.record("mul", std::move(out), {ia, ib}, [ia, ib](Graph<T>& gr, const Tensor<T>& go) {
    if (gr.requires_grad(ia)) {
      Tensor<T>& gi = gr.grad_ref(ia);
      const auto& other = gr.value(ib);
      for (std::size_t i = 0; i < gi.size(); ++i) gi[i] += go[i] * other[i];
    }
    if (gr.requires_grad(ib)) {
      Tensor<T>& gi = gr.grad_ref(ib);
      const auto& other = gr.value(ia);
      for (std::size_t i = 0; i < gi.size(); ++i) gi[i] += go[i] * other[i];
    }
  });
}

template <class T>
Var<T> scale(const Var<T>& a, T factor) {
  Tensor<T> out = a.value();
  for (auto& v : out.buffer()) v *= factor;
  const std::size_t ia = a.id();
  return a.graph().record("scale", std::move(out), {ia}, [ia, factor](Graph<T>& gr, const Tensor<T>& go) {
    Tensor<T>& gi = gr.grad_ref(ia);
    for (std::size_t i = 0; i < gi.size(); ++i) gi[i] += factor * go[i];
  });
}

/// out = x + bias broadcast along `axis` (bias has shape [x.dim(axis)]).
template <class T>
Var<T> add_bias(const Var<T>& x, const Var<T>& bias, std::size_t axis) {
  Graph<T>& g = x.graph();
  const Shape& s = x.shape();
  if (axis >= s.size() || bias.shape() != Shape{s[axis]}) {
    g.fail("add_bias", "bias " + to_string(bias.shape()) + " does not match axis " + std::to_string(axis) + " of " +
                           to_string(s));
  }
  std::size_t outer = 1, inner = 1;
  for (std::size_t i = 0; i < axis; ++i) outer *= s[i];
  for (std::size_t i = axis + 1; i < s.size(); ++i) inner *= s[i];
  const std::size_t c = s[axis];
  Tensor<T> out = x.value();
  const auto& b = bias.value();
  for (std::size_t o = 0; o < outer; ++o)
    for (std::size_t j = 0; j < c; ++j) {
      T* p = out.data().data() + (o * c + j) * inner;
      for (std::size_t i = 0; i < inner; ++i) p[i] += b[j];
    }
  const std::size_t ix = x.id(), ib = bias.id();
  return g.record("add_bias", std::move(out), {ix, ib},
                  [ix, ib, outer, inner, c](Graph<T>& gr, const Tensor<T>& go) {
                    if (gr.requires_grad(ix)) {
                      Tensor<T>& gi = gr.grad_ref(ix);
                      for (std::size_t i = 0; i < gi.size(); ++i) gi[i] += go[i];
                    }
                    if (gr.requires_grad(ib)) {
                      Tensor<T>& gb = gr.grad_ref(ib);
                      for (std::size_t o = 0; o < outer; ++o)
                        for (std::size_t j = 0; j < c; ++j) {
                          const T* p = go.data().data() + (o * c + j) * inner;
                          T acc = 0;
                          for (std::size_t i = 0; i < inner; ++i) acc += p[i];
                          gb[j] += acc;
                        }
                    }
                  });
}

/// ReLU with subgradient 0 at the origin.
template <class T>
Var<T> relu(const Var<T>& x) {
  Graph<T>& g = x.graph();
  Tensor<T> out = x.value();
  for (auto& v : out.buffer()) v = v > T{0} ? v : T{0};
  if (g.tracking_kinks()) {
    PatternHash h;
    for (std::size_t i = 0; i < out.size(); ++i) h.add(out[i] > T{0} ? i * 2 + 1 : i * 2);
    g.note_pattern(h.value());
  }
  const std::size_t ix = x.id();
  return g.record("relu", std::move(out), {ix}, [ix](Graph<T>& gr, const Tensor<T>& go) {
    Tensor<T>& gi = gr.grad_ref(ix);
    const auto& xv = gr.value(ix);
    for (std::size_t i = 0; i < gi.size(); ++i)
      if (xv[i] > T{0}) gi[i] += go[i];
  });
}

template <class T>
T sigmoid_scalar(T x) {
  return T{1} / (T{1} + std::exp(-x));
}

/// x · sigmoid(x)
template <class T>
Var<T> silu(const Var<T>& x) {
  Tensor<T> out = x.value();
  for (auto& v : out.buffer()) v = v * sigmoid_scalar(v);
  const std::size_t ix = x.id();
  return x.graph().record("silu", std::move(out), {ix}, [ix](Graph<T>& gr, const Tensor<T>& go) {
    Tensor<T>& gi = gr.grad_ref(ix);
    const auto& xv = gr.value(ix);
    for (std::size_t i = 0; i < gi.size(); ++i) {
      const T s = sigmoid_scalar(xv[i]);
      gi[i] += go[i] * s * (T{1} + xv[i] * (T{1} - s));
    }
  });
}

template <class T>
Var<T> reshape(const Var<T>& x, Shape shape) {
  Graph<T>& g = x.graph();
  if (numel(shape) != x.value().size()) g.fail("reshape", "cannot view " + to_string(x.shape()) + " as " + to_string(shape));
  Tensor<T> out = x.value().reshaped(std::move(shape));
  const std::size_t ix = x.id();
  return g.record("reshape", std::move(out), {ix}, [ix](Graph<T>& gr, const Tensor<T>& go) {
    Tensor<T>& gi = gr.grad_ref(ix);
    for (std::size_t i = 0; i < gi.size(); ++i) gi[i] += go[i];
  });
}

namespace detail {

/// out[perm-order index] = in[...]; out.shape[i] = in.shape[perm[i]].
template <class T>
void permute_copy(const T* in, const Shape& in_shape, const std::vector<std::size_t>& perm, T* out, bool accumulate) {
  const std::size_t r = in_shape.size();
  std::vector<std::size_t> in_strides(r, 1);
  for (std::size_t i = r - 1; i-- > 0;) in_strides[i] = in_strides[i + 1] * in_shape[i + 1];
  std::vector<std::size_t> out_shape(r), step(r);
  for (std::size_t i = 0; i < r; ++i) {
    out_shape[i] = in_shape[perm[i]];
    step[i] = in_strides[perm[i]];
  }
  const std::size_t total = numel(in_shape);
  const std::size_t last = out_shape[r - 1];
  const std::size_t last_step = step[r - 1];
  std::vector<std::size_t> idx(r, 0);
  std::size_t src = 0;
  for (std::size_t o = 0; o < total; o += last) {
    const T* p = in + src;
    T* q = out + o;
    if (accumulate) {
      for (std::size_t j = 0; j < last; ++j) q[j] += p[j * last_step];
    } else {
      for (std::size_t j = 0; j < last; ++j) q[j] = p[j * last_step];
    }
    for (std::size_t ax = r - 1; ax-- > 0;) {
      ++idx[ax];
      src += step[ax];
      if (idx[ax] < out_shape[ax]) break;
      src -= step[ax] * out_shape[ax];
      idx[ax] = 0;
    }
  }
}

}  // namespace detail

/// Axis permutation; output axis i is input axis perm[i].
template <class T>
Var<T> permute(const Var<T>& x, std::vector<std::size_t> perm) {
  Graph<T>& g = x.graph();
  const Shape& s = x.shape();
  if (perm.size() != s.size()) g.fail("permute", "permutation rank does not match " + to_string(s));
  std::vector<bool> seen(s.size(), false);
  for (std::size_t p : perm) {
    if (p >= s.size() || seen[p]) g.fail("permute", "invalid permutation");
    seen[p] = true;
  }
  Shape out_shape(s.size());
  for (std::size_t i = 0; i < s.size(); ++i) out_shape[i] = s[perm[i]];
  Tensor<T> out(out_shape);
  detail::permute_copy(x.value().data().data(), s, perm, out.data().data(), false);
  std::vector<std::size_t> inverse(s.size());
  for (std::size_t i = 0; i < s.size(); ++i) inverse[perm[i]] = i;
  const std::size_t ix = x.id();
  return g.record("permute", std::move(out), {ix},
                  [ix, inverse, out_shape](Graph<T>& gr, const Tensor<T>& go) {
                    Tensor<T>& gi = gr.grad_ref(ix);
                    detail::permute_copy(go.data().data(), out_shape, inverse, gi.data().data(), true);
                  });
}

template <class T>
Var<T> sum(const Var<T>& x) {
  T acc = 0;
  for (T v : x.value().data()) acc += v;
  const std::size_t ix = x.id();
  return x.graph().record("sum", Tensor<T>::scalar(acc), {ix}, [ix](Graph<T>& gr, const Tensor<T>& go) {
    Tensor<T>& gi = gr.grad_ref(ix);
    for (auto& v : gi.buffer()) v += go[0];
  });
}

template <class T>
Var<T> mean(const Var<T>& x) {
  const auto n = static_cast<T>(x.value().size());
  return scale(sum(x), T{1} / n);
}

/// Row gather: x viewed as [rows, width]; out row r = x row index[r], or zeros for index -1.
/// Backward scatter-adds. Used for window partitioning with padding and its inverse.
template <class T>
Var<T> gather_rows(const Var<T>& x, std::size_t width, std::vector<std::int64_t> index, Shape out_shape) {
  Graph<T>& g = x.graph();
  const std::size_t rows = x.value().size() / width;
  if (rows * width != x.value().size()) g.fail("gather_rows", "width does not divide " + to_string(x.shape()));
  if (numel(out_shape) != index.size() * width) g.fail("gather_rows", "output shape does not match index count");
  Tensor<T> out(out_shape);
  const T* src = x.value().data().data();
  for (std::size_t r = 0; r < index.size(); ++r) {
    const std::int64_t k = index[r];
    if (k < 0) continue;
    if (static_cast<std::size_t>(k) >= rows) g.fail("gather_rows", "row index out of range");
    std::copy_n(src + static_cast<std::size_t>(k) * width, width, out.data().data() + r * width);
  }
  const std::size_t ix = x.id();
  return g.record("gather_rows", std::move(out), {ix},
                  [ix, width, index = std::move(index)](Graph<T>& gr, const Tensor<T>& go) {
                    Tensor<T>& gi = gr.grad_ref(ix);
                    for (std::size_t r = 0; r < index.size(); ++r) {
                      if (index[r] < 0) continue;
                      T* dst = gi.data().data() + static_cast<std::size_t>(index[r]) * width;
                      const T* s = go.data().data() + r * width;
                      for (std::size_t j = 0; j < width; ++j) dst[j] += s[j];
                    }
                  });
}

}  // namespace kanseg::ops
