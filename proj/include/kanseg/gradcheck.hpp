#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <cstdio>
#include <functional>
#include <numeric>
#include <string>
#include <vector>

#include "kanseg/model.hpp"

namespace kanseg {

struct GradCheckOptions {
  double step = 1e-5;
  double tolerance = 1e-4;
  std::size_t coords_per_tensor = 8;
  std::size_t max_coords = 400;
  std::uint64_t seed = 1;
};

struct GradCheckReport {
  std::string name;
  double tolerance = 0;
  double max_rel_error = 0;
  std::string worst;  // parameter[index] with the largest error
  std::size_t checked = 0;
  std::size_t skipped = 0;  // coordinates whose perturbation crossed a kink

  bool passed() const { return checked > 0 && max_rel_error < tolerance; }
};

/// |a - n| / max(|a|, |n|, 1e-6)
inline double relative_error(double analytic, double numeric) {
  return std::abs(analytic - numeric) / std::max({std::abs(analytic), std::abs(numeric), 1e-6});
}

/// Builds a scalar loss from the current parameter values. It must be a pure function of them.
using LossBuilder = std::function<Var<double>(Graph<double>&)>;

/// Compares reverse-mode gradients of `targets` against central differences on a random subset
/// of coordinates. A coordinate is skipped when either perturbed forward reports a different
/// activation pattern (ReLU mask, spline interval, pool argmax) than the unperturbed one.
inline GradCheckReport grad_check(const std::string& name, const LossBuilder& build, const ParamList<double>& targets,
                                  const GradCheckOptions& opts = {}) {
  GradCheckReport rep;
  rep.name = name;
  rep.tolerance = opts.tolerance;
  for (const auto& p : targets) p.param->zero_grad();
  std::uint64_t base_pattern = 0;
  {
    Graph<double> g(GraphOptions{true, true, true});
    const Var<double> loss = build(g);
    base_pattern = g.pattern();
    g.backward(loss);
  }
  const auto eval = [&](std::uint64_t& pattern) {
    Graph<double> g(GraphOptions{false, true, true});
    const double v = build(g).value()[0];
    pattern = g.pattern();
    return v;
  };
  Rng rng(opts.seed);
  for (const auto& p : targets) {
    if (!p.param->trainable) continue;
    Tensor<double>& value = p.param->value;
    const Tensor<double> grad = p.param->grad.empty() ? Tensor<double>(value.shape()) : p.param->grad;
    std::vector<std::size_t> idx(value.size());
    std::iota(idx.begin(), idx.end(), std::size_t{0});
    const std::size_t take = std::min(opts.coords_per_tensor, idx.size());
    for (std::size_t i = 0; i < take; ++i) {
      std::swap(idx[i], idx[i + static_cast<std::size_t>(rng.integer(0, static_cast<std::int64_t>(idx.size() - i - 1)))]);
    }
    for (std::size_t t = 0; t < take && rep.checked + rep.skipped < opts.max_coords; ++t) {
      const std::size_t i = idx[t];
      const double orig = value[i];
      std::uint64_t pp = 0, pm = 0;
      value[i] = orig + opts.step;
      const double lp = eval(pp);
      value[i] = orig - opts.step;
      const double lm = eval(pm);
      value[i] = orig;
      if (pp != base_pattern || pm != base_pattern) {
        ++rep.skipped;
        continue;
      }
      const double numeric = (lp - lm) / (2 * opts.step);
      const double err = relative_error(grad[i], numeric);
      ++rep.checked;
      if (rep.checked == 1 || err > rep.max_rel_error) {
        rep.max_rel_error = err;
        rep.worst = p.name + "[" + std::to_string(i) + "]";
      }
    }
  }
  for (const auto& p : targets) p.param->zero_grad();
  return rep;
}

/// Fixed random projection of an output to a scalar of order one: sum(out * r) / sqrt(numel).
class ProbeLoss {
 public:
  ProbeLoss(const Shape& shape, std::uint64_t seed) {
    Rng rng(seed);
    weights_ = rng.normal_tensor<double>(shape, 0.0, 1.0);
  }

  Var<double> operator()(const Var<double>& out) const {
    Graph<double>& g = out.graph();
    const Var<double> r = g.input(weights_);
    return ops::scale(ops::sum(ops::mul(out, r)), 1.0 / std::sqrt(static_cast<double>(weights_.size())));
  }

 private:
  Tensor<double> weights_;
};

inline std::string format_gradcheck(const std::vector<GradCheckReport>& reports) {
  std::string out;
  char buf[200];
  std::snprintf(buf, sizeof buf, "%-18s %8s %8s %14s %10s  %s\n", "family", "checked", "skipped", "max_rel_err", "threshold",
                "result");
  out += buf;
  for (const auto& r : reports) {
    std::snprintf(buf, sizeof buf, "%-18s %8zu %8zu %14.3e %10.0e  %s\n", r.name.c_str(), r.checked, r.skipped,
                  r.max_rel_error, r.tolerance, r.passed() ? "PASS" : "FAIL");
    out += buf;
  }
  return out;
}

/// Gradient checks for each layer family at 64-bit precision, covering parameters and inputs.
inline std::vector<GradCheckReport> gradcheck_suite(std::uint64_t seed, double layer_tol = 1e-4, double model_tol = 1e-3) {
  std::vector<GradCheckReport> out;
  GradCheckOptions opts;
  opts.seed = seed;
  opts.tolerance = layer_tol;
  const SplineGrid grid(-1.0, 1.0, 5, 3);
  Rng rng(seed);

  {  // KAN layer, inputs spanning the grid and the clamped tails
    KanLayer<double> layer(5, 4, grid, rng);
    for (auto& c : layer.spline_coeffs.value.buffer()) c = rng.normal(0, 0.5);
    Parameter<double> x(rng.uniform_tensor<double>({3, 5}, -1.3, 1.3));
    const ProbeLoss probe({3, 4}, seed + 1);
    ParamList<double> ps;
    layer.parameters(ps, "kan");
    ps.push_back({"input", &x});
    out.push_back(grad_check("kan_layer", [&](Graph<double>& g) { return probe(layer(g, g.param(x))); }, ps, opts));
  }
  {  // KAN block
    KanBlock<double> block(4, 5, grid, rng);
    for (auto& c : block.kan.spline_coeffs.value.buffer()) c = rng.normal(0, 0.5);
    Parameter<double> z(rng.uniform_tensor<double>({2, 12, 4}, -1.2, 1.2));
    const ProbeLoss probe({2, 12, 5}, seed + 2);
    ParamList<double> ps;
    block.parameters(ps, "block");
    ps.push_back({"input", &z});
    out.push_back(grad_check("kan_block", [&](Graph<double>& g) { return probe(block(g, g.param(z), 3, 4, Mode::train)); }, ps, opts));
  }
  {  // DeepKAN module (LN + three KAN blocks)
    DeepKan<double> deep(DeepKanConfig{1, 6, grid, false}, rng);
    Parameter<double> f(rng.normal_tensor<double>({2, 6, 3, 3}, 0, 1));
    const ProbeLoss probe({2, 6, 3, 3}, seed + 3);
    ParamList<double> ps;
    deep.parameters(ps, "deepkan");
    ps.push_back({"input", &f});
    out.push_back(grad_check("deepkan_module", [&](Graph<double>& g) { return probe(deep(g, g.param(f), Mode::train)); }, ps, opts));
  }
  {  // global-local attention with a padded window
    GlobalLocalAttention<double> attn(8, 2, 2, rng);
    Parameter<double> t(rng.normal_tensor<double>({2, 15, 8}, 0, 1));
    const ProbeLoss probe({2, 15, 8}, seed + 4);
    ParamList<double> ps;
    attn.parameters(ps, "attn");
    ps.push_back({"input", &t});
    out.push_back(grad_check("glattn", [&](Graph<double>& g) { return probe(attn(g, g.param(t), 3, 5)); }, ps, opts));
  }
  {  // GLKAN block
    GlkanBlock<double> block(8, 2, 2, true, grid, rng);
    Parameter<double> f(rng.normal_tensor<double>({2, 8, 4, 4}, 0, 1));
    const ProbeLoss probe({2, 8, 4, 4}, seed + 5);
    ParamList<double> ps;
    block.parameters(ps, "glkan");
    ps.push_back({"input", &f});
    out.push_back(grad_check("glkan_block", [&](Graph<double>& g) { return probe(block(g, g.param(f), Mode::train)); }, ps, opts));
  }
  {  // encoder stage with a projection shortcut
    ResidualStage<double> stage(4, 6, 2, rng);
    Parameter<double> x(rng.normal_tensor<double>({2, 4, 6, 6}, 0, 1));
    const ProbeLoss probe({2, 6, 3, 3}, seed + 6);
    ParamList<double> ps;
    stage.parameters(ps, "stage");
    ps.push_back({"input", &x});
    out.push_back(grad_check("encoder_stage", [&](Graph<double>& g) { return probe(stage(g, g.param(x), Mode::train)); }, ps, opts));
  }
  {  // full micro model end to end
    Model<double> model(ModelConfig::micro(), seed);
    Parameter<double> image(rng.normal_tensor<double>({2, 3, 64, 64}, 0, 1));
    const ProbeLoss probe({2, 6, 64, 64}, seed + 7);
    ParamList<double> ps = model.parameters();
    ps.push_back({"input", &image});
    GradCheckOptions mopts = opts;
    mopts.tolerance = model_tol;
    mopts.coords_per_tensor = 3;
    mopts.max_coords = 480;
    out.push_back(grad_check("micro_model", [&](Graph<double>& g) { return probe(model(g, g.param(image), Mode::train)); }, ps, mopts));
  }
  return out;
}

}  // namespace kanseg
