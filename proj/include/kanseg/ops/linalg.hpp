#pragma once

#include <cmath>
#include <cstdint>
#include <limits>
#include <optional>
#include <vector>

#include "kanseg/gemm.hpp"
#include "kanseg/graph.hpp"

namespace kanseg::ops {

/// [m,k] · [k,n] -> [m,n]
template <class T>
Var<T> matmul(const Var<T>& a, const Var<T>& b) {
  Graph<T>& g = a.graph();
  if (a.shape().size() != 2 || b.shape().size() != 2 || a.dim(1) != b.dim(0)) {
    g.fail("matmul", "incompatible operands " + to_string(a.shape()) + " and " + to_string(b.shape()));
  }
  const std::size_t m = a.dim(0), k = a.dim(1), n = b.dim(1);
  Tensor<T> out({m, n});
  kanseg::detail::gemm(false, false, m, n, k, a.value().data().data(), b.value().data().data(), out.data().data(), false);
  const std::size_t ia = a.id(), ib = b.id();
  return g.record("matmul", std::move(out), {ia, ib}, [ia, ib, m, n, k](Graph<T>& gr, const Tensor<T>& go) {
    if (gr.requires_grad(ia)) {
      kanseg::detail::gemm(false, true, m, k, n, go.data().data(), gr.value(ib).data().data(), gr.grad_ref(ia).data().data(),
                   true);
    }
    if (gr.requires_grad(ib)) {
      kanseg::detail::gemm(true, false, k, n, m, gr.value(ia).data().data(), go.data().data(), gr.grad_ref(ib).data().data(),
                   true);
    }
  });
}

/// Batched product over all leading axes: a [..., m, k'] and b [..., k', n'] with optional
/// transposition of the trailing two axes of either operand.
template <class T>
Var<T> bmm(const Var<T>& a, const Var<T>& b, bool trans_a = false, bool trans_b = false) {
  Graph<T>& g = a.graph();
  const Shape& sa = a.shape();
  const Shape& sb = b.shape();
  if (sa.size() < 2 || sa.size() != sb.size() || !std::equal(sa.begin(), sa.end() - 2, sb.begin())) {
    g.fail("bmm", "incompatible operands " + to_string(sa) + " and " + to_string(sb));
  }
  const std::size_t r = sa.size();
  const std::size_t m = trans_a ? sa[r - 1] : sa[r - 2];
  const std::size_t k = trans_a ? sa[r - 2] : sa[r - 1];
  const std::size_t kb = trans_b ? sb[r - 1] : sb[r - 2];
  const std::size_t n = trans_b ? sb[r - 2] : sb[r - 1];
  if (k != kb) g.fail("bmm", "inner extents differ: " + to_string(sa) + " and " + to_string(sb));
  const std::size_t batch = numel(sa) / (sa[r - 1] * sa[r - 2]);
  Shape out_shape(sa.begin(), sa.end() - 2);
  out_shape.push_back(m);
  out_shape.push_back(n);
  Tensor<T> out(out_shape);
  const T* pa = a.value().data().data();
  const T* pb = b.value().data().data();
  for (std::size_t i = 0; i < batch; ++i) {
    kanseg::detail::gemm(trans_a, trans_b, m, n, k, pa + i * m * k, pb + i * k * n, out.data().data() + i * m * n, false);
  }
  const std::size_t ia = a.id(), ib = b.id();
  return g.record("bmm", std::move(out), {ia, ib},
                  [ia, ib, m, n, k, batch, trans_a, trans_b](Graph<T>& gr, const Tensor<T>& go) {
                    const T* pga = go.data().data();
                    if (gr.requires_grad(ia)) {
                      T* da = gr.grad_ref(ia).data().data();
                      const T* vb = gr.value(ib).data().data();
                      for (std::size_t i = 0; i < batch; ++i) {
                        // dA = dC · op(B)^T, stored in A's layout
                        if (!trans_a) {
                          kanseg::detail::gemm(false, !trans_b, m, k, n, pga + i * m * n, vb + i * k * n, da + i * m * k, true);
                        } else {
                          kanseg::detail::gemm(trans_b, true, k, m, n, vb + i * k * n, pga + i * m * n, da + i * m * k, true);
                        }
                      }
                    }
                    if (gr.requires_grad(ib)) {
                      T* db = gr.grad_ref(ib).data().data();
                      const T* va = gr.value(ia).data().data();
                      for (std::size_t i = 0; i < batch; ++i) {
                        // dB = op(A)^T · dC, stored in B's layout
                        if (!trans_b) {
                          kanseg::detail::gemm(!trans_a, false, k, n, m, va + i * m * k, pga + i * m * n, db + i * k * n, true);
                        } else {
                          kanseg::detail::gemm(true, trans_a, n, k, m, pga + i * m * n, va + i * m * k, db + i * k * n, true);
                        }
                      }
                    }
                  });
}

/// x [..., k] · W[n, k]^T (+ bias[n]) -> [..., n]
template <class T>
Var<T> linear(const Var<T>& x, const Var<T>& weight, std::optional<Var<T>> bias = std::nullopt) {
  Graph<T>& g = x.graph();
  const Shape& s = x.shape();
  if (weight.shape().size() != 2 || s.empty() || s.back() != weight.dim(1)) {
    g.fail("linear", "input " + to_string(s) + " does not match weight " + to_string(weight.shape()));
  }
  const std::size_t k = s.back(), n = weight.dim(0), m = x.value().size() / k;
  if (bias && bias->shape() != Shape{n}) g.fail("linear", "bias shape " + to_string(bias->shape()));
  Shape out_shape = s;
  out_shape.back() = n;
  Tensor<T> out(out_shape);
  kanseg::detail::gemm(false, true, m, n, k, x.value().data().data(), weight.value().data().data(), out.data().data(), false);
  std::vector<std::size_t> inputs{x.id(), weight.id()};
  if (bias) {
    const auto& b = bias->value();
    for (std::size_t r = 0; r < m; ++r)
      for (std::size_t j = 0; j < n; ++j) out[r * n + j] += b[j];
    inputs.push_back(bias->id());
  }
  const std::size_t ix = x.id(), iw = weight.id();
  const std::optional<std::size_t> ib = bias ? std::optional<std::size_t>(bias->id()) : std::nullopt;
  return g.record("linear", std::move(out), std::move(inputs), [ix, iw, ib, m, n, k](Graph<T>& gr, const Tensor<T>& go) {
    if (gr.requires_grad(ix)) {
      kanseg::detail::gemm(false, false, m, k, n, go.data().data(), gr.value(iw).data().data(), gr.grad_ref(ix).data().data(),
                   true);
    }
    if (gr.requires_grad(iw)) {
      kanseg::detail::gemm(true, false, n, k, m, go.data().data(), gr.value(ix).data().data(), gr.grad_ref(iw).data().data(),
                   true);
    }
    if (ib && gr.requires_grad(*ib)) {
      Tensor<T>& gb = gr.grad_ref(*ib);
      for (std::size_t r = 0; r < m; ++r)
        for (std::size_t j = 0; j < n; ++j) gb[j] += go[r * n + j];
    }
  });
}

/// Key-validity mask for softmax rows: row r uses mask row (r / rows_per_group) % groups.
struct SoftmaxMask {
  std::size_t rows_per_group = 1;
  std::size_t groups = 1;
  std::vector<std::uint8_t> valid;  // [groups, last_dim]
};

/// Softmax over the last axis. Masked positions receive probability exactly 0.
template <class T>
Var<T> softmax(const Var<T>& x, const SoftmaxMask* mask = nullptr) {
  Graph<T>& g = x.graph();
  const std::size_t n = x.shape().back();
  const std::size_t rows = x.value().size() / n;
  if (mask && mask->valid.size() != mask->groups * n) g.fail("softmax", "mask does not match last extent");
  Tensor<T> out(x.shape());
  const T* in = x.value().data().data();
  for (std::size_t r = 0; r < rows; ++r) {
    const std::uint8_t* valid = mask ? mask->valid.data() + ((r / mask->rows_per_group) % mask->groups) * n : nullptr;
    const T* p = in + r * n;
    T* q = out.data().data() + r * n;
    T mx = -std::numeric_limits<T>::infinity();
    for (std::size_t j = 0; j < n; ++j)
      if (!valid || valid[j]) mx = std::max(mx, p[j]);
    T z = 0;
    for (std::size_t j = 0; j < n; ++j) {
      q[j] = (!valid || valid[j]) ? std::exp(p[j] - mx) : T{0};
      z += q[j];
    }
    for (std::size_t j = 0; j < n; ++j) q[j] /= z;
  }
  const std::size_t ix = x.id();
  const std::size_t out_id = g.size();
  return g.record("softmax", std::move(out), {ix}, [ix, out_id, n, rows](Graph<T>& gr, const Tensor<T>& go) {
    Tensor<T>& gi = gr.grad_ref(ix);
    const auto& y = gr.value(out_id);
    for (std::size_t r = 0; r < rows; ++r) {
      T dot = 0;
      for (std::size_t j = 0; j < n; ++j) dot += go[r * n + j] * y[r * n + j];
      for (std::size_t j = 0; j < n; ++j) gi[r * n + j] += y[r * n + j] * (go[r * n + j] - dot);
    }
  });
}

}  // namespace kanseg::ops
