#pragma once

#include <cmath>
#include <cstdint>
#include <span>
#include <vector>

#include "kanseg/graph.hpp"

namespace kanseg::ops {

template <class T>
struct LossResult {
  Var<T> loss;
  std::size_t count = 0;  // contributing (non-ignored) pixels
};

/// Mean over non-ignored pixels of -log softmax(logits)[target], softmax over axis 1.
/// logits [B,C,H,W] (or [B,C]), targets [B*H*W] class indices.
template <class T>
LossResult<T> cross_entropy(const Var<T>& logits, std::span<const std::uint8_t> targets, std::uint8_t ignore_index = 255) {
  Graph<T>& g = logits.graph();
  const Shape& s = logits.shape();
  if (s.size() < 2) g.fail("cross_entropy", "logits must be at least [B,C], got " + to_string(s));
  const std::size_t b = s[0], c = s[1], inner = logits.value().size() / (b * c);
  if (targets.size() != b * inner) {
    g.fail("cross_entropy", "target count " + std::to_string(targets.size()) + " does not match logits " + to_string(s));
  }
  const T* lv = logits.value().data().data();
  std::vector<T> prob(logits.value().size());
  std::size_t count = 0;
  T total = 0;
  for (std::size_t n = 0; n < b; ++n)
    for (std::size_t i = 0; i < inner; ++i) {
      const std::uint8_t t = targets[n * inner + i];
      const std::size_t base = n * c * inner + i;
      T mx = lv[base];
      for (std::size_t ch = 1; ch < c; ++ch) mx = std::max(mx, lv[base + ch * inner]);
      T z = 0;
      for (std::size_t ch = 0; ch < c; ++ch) {
        const T e = std::exp(lv[base + ch * inner] - mx);
        prob[base + ch * inner] = e;
        z += e;
      }
      for (std::size_t ch = 0; ch < c; ++ch) prob[base + ch * inner] /= z;
      if (t == ignore_index) continue;
      if (t >= c) g.fail("cross_entropy", "target class " + std::to_string(t) + " out of range for " + std::to_string(c) + " classes");
      total += -(lv[base + t * inner] - mx - std::log(z));
      ++count;
    }
  if (count == 0) throw NumericError("cross_entropy: every pixel is ignored, mean loss is undefined");
  const T inv = T{1} / static_cast<T>(count);
  std::vector<std::uint8_t> tcopy(targets.begin(), targets.end());
  const std::size_t il = logits.id();
  Var<T> loss = g.record("cross_entropy", Tensor<T>::scalar(total * inv), {il},
                         [il, b, c, inner, inv, ignore_index, prob = std::move(prob), tcopy = std::move(tcopy)](
                             Graph<T>& gr, const Tensor<T>& go) {
                           Tensor<T>& gi = gr.grad_ref(il);
                           const T scale = go[0] * inv;
                           for (std::size_t n = 0; n < b; ++n)
                             for (std::size_t i = 0; i < inner; ++i) {
                               const std::uint8_t t = tcopy[n * inner + i];
                               if (t == ignore_index) continue;
                               const std::size_t base = n * c * inner + i;
                               for (std::size_t ch = 0; ch < c; ++ch) {
                                 const T onehot = ch == t ? T{1} : T{0};
                                 gi[base + ch * inner] += scale * (prob[base + ch * inner] - onehot);
                               }
                             }
                         });
  return {loss, count};
}

}  // namespace kanseg::ops
