#pragma once

#include <array>
#include <string>
#include <vector>

#include "kanseg/kan.hpp"

namespace kanseg {

struct DeepKanConfig {
  std::size_t modules = 4;
  std::size_t channels = 512;
  SplineGrid grid{};
  /// Wraps each module in an identity shortcut. Off by default; kept as an ablation switch.
  bool module_residual = false;
};

/// One refinement module: layer norm followed by three width-preserving KAN blocks.
template <class T>
struct DeepKanModule {
  LayerNorm<T> norm;
  std::array<KanBlock<T>, 3> blocks;

  DeepKanModule() = default;
  DeepKanModule(std::size_t channels, const SplineGrid& grid, Rng& rng)
      : norm(channels),
        blocks{KanBlock<T>(channels, channels, grid, rng), KanBlock<T>(channels, channels, grid, rng),
               KanBlock<T>(channels, channels, grid, rng)} {}

  /// z [B, h*w, C] -> [B, h*w, C]
  Var<T> operator()(Graph<T>& g, const Var<T>& z, std::size_t h, std::size_t w, Mode mode) {
    Var<T> y = norm(g, z);
    for (auto& block : blocks) y = block(g, y, h, w, mode);
    return y;
  }

  void parameters(ParamList<T>& out, const std::string& prefix) {
    norm.parameters(out, join_name(prefix, "norm"));
    for (std::size_t i = 0; i < blocks.size(); ++i) blocks[i].parameters(out, join_name(prefix, "block" + std::to_string(i)));
  }
};

/// Deep feature refinement of the deepest encoder map: flatten to a token sequence, run the
/// stacked modules, reshape back to the input layout.
template <class T>
struct DeepKan {
  DeepKanConfig cfg;
  std::vector<DeepKanModule<T>> modules;

  DeepKan() = default;
  DeepKan(const DeepKanConfig& c, Rng& rng) : cfg(c) {
    if (c.modules == 0) throw ConfigError("DeepKan: at least one module required");
    if (c.channels == 0) throw ConfigError("DeepKan: channel count must be positive");
    modules.reserve(c.modules);
    for (std::size_t i = 0; i < c.modules; ++i) modules.emplace_back(c.channels, c.grid, rng);
  }

  /// f4 [B, C, h, w] -> [B, C, h, w]
  Var<T> operator()(Graph<T>& g, const Var<T>& f4, Mode mode) {
    const Shape& s = f4.shape();
    if (s.size() != 4 || s[1] != cfg.channels) {
      g.fail("deepkan", "expected [B," + std::to_string(cfg.channels) + ",h,w], got " + to_string(s));
    }
    const std::size_t h = s[2], w = s[3];
    Var<T> z = map_to_tokens(f4);
    for (auto& m : modules) {
      Var<T> y = m(g, z, h, w, mode);
      z = cfg.module_residual ? ops::add(y, z) : y;
    }
    return tokens_to_map(z, h, w);
  }

  void parameters(ParamList<T>& out, const std::string& prefix) {
    for (std::size_t i = 0; i < modules.size(); ++i) modules[i].parameters(out, join_name(prefix, std::to_string(i)));
  }
};

}  // namespace kanseg
