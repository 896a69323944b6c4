#pragma once

#include <cmath>
#include <optional>
#include <string>

#include "kanseg/ops/basic.hpp"
#include "kanseg/ops/conv.hpp"
#include "kanseg/ops/linalg.hpp"
#include "kanseg/ops/norm.hpp"
#include "kanseg/rng.hpp"

namespace kanseg {

inline std::string join_name(const std::string& prefix, const std::string& name) {
  return prefix.empty() ? name : prefix + "." + name;
}

/// [B,C,h,w] -> [B,h*w,C], tokens in row-major spatial order (index = y*w + x).
template <class T>
Var<T> map_to_tokens(const Var<T>& x) {
  const Shape& s = x.shape();
  if (s.size() != 4) x.graph().fail("map_to_tokens", "expected [B,C,h,w], got " + to_string(s));
  return ops::reshape(ops::permute(x, {0, 2, 3, 1}), {s[0], s[2] * s[3], s[1]});
}

/// [B,h*w,C] -> [B,C,h,w]; inverse of map_to_tokens.
template <class T>
Var<T> tokens_to_map(const Var<T>& z, std::size_t h, std::size_t w) {
  const Shape& s = z.shape();
  if (s.size() != 3 || s[1] != h * w) {
    z.graph().fail("tokens_to_map", "sequence " + to_string(s) + " is not factorable as " + std::to_string(h) + "x" +
                                        std::to_string(w));
  }
  return ops::permute(ops::reshape(z, {s[0], h, w, s[2]}), {0, 3, 1, 2});
}

template <class T>
struct Linear {
  Parameter<T> weight;  // [out, in]
  std::optional<Parameter<T>> bias;

  Linear() = default;
  Linear(std::size_t in, std::size_t out, Rng& rng, bool with_bias = true) {
    const double bound = 1.0 / std::sqrt(static_cast<double>(in));
    weight = Parameter<T>(rng.uniform_tensor<T>({out, in}, -bound, bound));
    if (with_bias) bias = Parameter<T>(rng.uniform_tensor<T>({out}, -bound, bound));
  }

  std::size_t in_features() const { return weight.value.dim(1); }
  std::size_t out_features() const { return weight.value.dim(0); }

  Var<T> operator()(Graph<T>& g, const Var<T>& x) {
    if (bias) return ops::linear(x, g.param(weight), std::optional<Var<T>>(g.param(*bias)));
    return ops::linear(x, g.param(weight));
  }

  void zero() {
    weight.value.fill(T{0});
    if (bias) bias->value.fill(T{0});
  }

  void parameters(ParamList<T>& out, const std::string& prefix) {
    out.push_back({join_name(prefix, "weight"), &weight});
    if (bias) out.push_back({join_name(prefix, "bias"), &*bias});
  }
};

template <class T>
struct LayerNorm {
  Parameter<T> gamma;
  Parameter<T> beta;
  double eps = 1e-6;

  LayerNorm() = default;
  explicit LayerNorm(std::size_t channels) : gamma(Tensor<T>({channels}, T{1})), beta(Tensor<T>({channels}, T{0})) {}

  Var<T> operator()(Graph<T>& g, const Var<T>& x) {
    return ops::layer_norm(x, g.param(gamma), g.param(beta), static_cast<T>(eps));
  }

  void parameters(ParamList<T>& out, const std::string& prefix) {
    out.push_back({join_name(prefix, "gamma"), &gamma});
    out.push_back({join_name(prefix, "beta"), &beta});
  }
};

template <class T>
struct BatchNorm {
  Parameter<T> gamma;
  Parameter<T> beta;
  ops::BatchNormState<T> state;

  BatchNorm() = default;
  explicit BatchNorm(std::size_t channels)
      : gamma(Tensor<T>({channels}, T{1})), beta(Tensor<T>({channels}, T{0})), state(channels) {}

  Var<T> operator()(Graph<T>& g, const Var<T>& x, Mode mode) {
    return ops::batch_norm(x, g.param(gamma), g.param(beta), state, mode);
  }

  /// Installs running statistics (mean 0, variance 1 unless given) and marks them usable.
  void set_running_stats(T mean = T{0}, T var = T{1}) {
    state.running_mean.value.fill(mean);
    state.running_var.value.fill(var);
    state.mark_initialized();
  }

  void parameters(ParamList<T>& out, const std::string& prefix) {
    out.push_back({join_name(prefix, "gamma"), &gamma});
    out.push_back({join_name(prefix, "beta"), &beta});
    out.push_back({join_name(prefix, "running_mean"), &state.running_mean});
    out.push_back({join_name(prefix, "running_var"), &state.running_var});
    out.push_back({join_name(prefix, "tracked"), &state.tracked});
  }
};

enum class ConvInit {
  he_normal,       // N(0, 2 / fan_out), for conv -> BN -> ReLU stacks
  uniform_fan_in,  // U(-1/sqrt(fan_in), 1/sqrt(fan_in)), for plain projections
};

/// Bias-free dense convolution.
template <class T>
struct Conv2d {
  Parameter<T> weight;  // [out, in, k, k]
  ops::Conv2dOptions opts;

  Conv2d() = default;
  Conv2d(std::size_t in, std::size_t out, std::size_t k, std::size_t stride, std::size_t padding, Rng& rng,
         ConvInit init = ConvInit::he_normal)
      : opts{stride, padding} {
    if (init == ConvInit::he_normal) {
      const double stddev = std::sqrt(2.0 / static_cast<double>(out * k * k));
      weight = Parameter<T>(rng.normal_tensor<T>({out, in, k, k}, 0.0, stddev));
    } else {
      const double bound = 1.0 / std::sqrt(static_cast<double>(in * k * k));
      weight = Parameter<T>(rng.uniform_tensor<T>({out, in, k, k}, -bound, bound));
    }
  }

  Var<T> operator()(Graph<T>& g, const Var<T>& x) { return ops::conv2d(x, g.param(weight), opts); }

  void parameters(ParamList<T>& out, const std::string& prefix) { out.push_back({join_name(prefix, "weight"), &weight}); }
};

template <class T>
std::size_t count_trainable(const ParamList<T>& params) {
  std::size_t n = 0;
  for (const auto& p : params)
    if (p.param->trainable) n += p.param->value.size();
  return n;
}

}  // namespace kanseg
