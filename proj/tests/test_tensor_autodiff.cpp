#include <gtest/gtest.h>

#include <sstream>

#include "kanseg/glkan.hpp"
#include "kanseg/kan.hpp"
#include "kanseg/ops/basic.hpp"
#include "kanseg/ops/conv.hpp"
#include "kanseg/ops/linalg.hpp"
#include "kanseg/ops/loss.hpp"
#include "kanseg/ops/norm.hpp"
#include "kanseg/serialize.hpp"
#include "oracles.hpp"

using namespace kanseg;
using oracle::TD;
using Vars = std::vector<Var<double>>;

namespace {

TD randn(Rng& rng, Shape s, double sd = 1.0) { return rng.normal_tensor<double>(std::move(s), 0.0, sd); }

/// Uniform values with |x| >= gap, keeping ReLU/pool inputs away from their kinks.
TD away_from_zero(Rng& rng, Shape s, double gap = 0.1) {
  TD t(std::move(s));
  for (auto& v : t.buffer()) {
    const double m = rng.uniform(gap, 1.5);
    v = rng.bernoulli(0.5) ? m : -m;
  }
  return t;
}

}  // namespace

TEST(Tensor, ShapeAndBuffer) {
  TD t({2, 3, 4});
  EXPECT_EQ(t.size(), 24u);
  EXPECT_EQ(t.rank(), 3u);
  t.at({1, 2, 3}) = 5.0;
  EXPECT_EQ(t[23], 5.0);
  EXPECT_THROW(TD({2, 0}), ShapeError);
  EXPECT_THROW(TD({2, 2}, std::vector<double>(3)), ShapeError);
  EXPECT_THROW(t.at({2, 0, 0}), ShapeError);
  EXPECT_THROW(t.at({0, 0}), ShapeError);
  EXPECT_THROW(t.reshaped({5, 5}), ShapeError);
  EXPECT_EQ(t.reshaped({4, 6}).shape(), (Shape{4, 6}));
}

TEST(Primitives, ReluValuesAndSubgradient) {
  Graph<double> g;
  const auto x = g.input(TD({3}, {-1.0, 0.0, 2.0}), true);
  const auto y = ops::relu(x);
  EXPECT_EQ(y.value().buffer(), (std::vector<double>{0, 0, 2}));
  g.backward(y, TD({3}, 1.0));
  EXPECT_EQ(g.grad(x).buffer(), (std::vector<double>{0, 0, 1}));
}

TEST(Primitives, SoftmaxOfZerosIsUniform) {
  Graph<double> g;
  const auto y = ops::softmax(g.input(TD({3}, 0.0)));
  for (double v : y.value().buffer()) EXPECT_DOUBLE_EQ(v, 1.0 / 3.0);
}

TEST(Primitives, SumOfSquaresGradient) {
  Graph<double> g;
  const auto x = g.input(TD({1}, 3.0), true);
  g.backward(ops::sum(ops::mul(x, x)));
  EXPECT_EQ(g.grad(x)[0], 6.0);
}

TEST(Primitives, MatmulMatchesTripleLoop) {
  Rng rng(11);
  for (auto [m, k, n] : {std::array<std::size_t, 3>{2, 3, 2}, {7, 5, 9}, {16, 33, 4}}) {
    const TD a = randn(rng, {m, k}), b = randn(rng, {k, n});
    Graph<double> g;
    const TD c = ops::matmul(g.input(a), g.input(b)).value();
    EXPECT_LT(max_abs_diff(c, oracle::matmul(a, b)), 1e-12);
  }
}

TEST(Primitives, BmmTranspositionsMatchOracle) {
  Rng rng(12);
  const TD a = randn(rng, {3, 4, 5}), b = randn(rng, {3, 5, 6});
  const auto slice = [](const TD& t, std::size_t i, bool transpose) {
    const std::size_t r = t.dim(1), c = t.dim(2);
    TD s(transpose ? Shape{c, r} : Shape{r, c});
    for (std::size_t y = 0; y < r; ++y)
      for (std::size_t x = 0; x < c; ++x) (transpose ? s.at({x, y}) : s.at({y, x})) = t.at({i, y, x});
    return s;
  };
  const auto transposed = [](const TD& t) {
    TD o({t.dim(0), t.dim(2), t.dim(1)});
    for (std::size_t i = 0; i < t.dim(0); ++i)
      for (std::size_t y = 0; y < t.dim(1); ++y)
        for (std::size_t x = 0; x < t.dim(2); ++x) o.at({i, x, y}) = t.at({i, y, x});
    return o;
  };
  for (bool ta : {false, true})
    for (bool tb : {false, true}) {
      Graph<double> g;
      const TD out = ops::bmm(g.input(ta ? transposed(a) : a), g.input(tb ? transposed(b) : b), ta, tb).value();
      for (std::size_t i = 0; i < 3; ++i) {
        const TD ref = oracle::matmul(slice(a, i, false), slice(b, i, false));
        for (std::size_t y = 0; y < 4; ++y)
          for (std::size_t x = 0; x < 6; ++x) EXPECT_NEAR(out.at({i, y, x}), ref.at({y, x}), 1e-12);
      }
    }
}

TEST(Primitives, LinearMatchesOracle) {
  Rng rng(13);
  const TD x = randn(rng, {2, 3, 5}), w = randn(rng, {4, 5}), b = randn(rng, {4});
  Graph<double> g;
  const TD y = ops::linear(g.input(x), g.input(w), std::optional<Var<double>>(g.input(b))).value();
  EXPECT_LT(max_abs_diff(y, oracle::linear(x, w, &b)), 1e-12);
}

TEST(Primitives, Conv2dMatchesDirectLoops) {
  Rng rng(14);
  for (auto [k, stride, pad] : {std::array<std::size_t, 3>{3, 1, 1}, {3, 2, 1}, {1, 1, 0}, {1, 2, 0}, {5, 1, 2}}) {
    const TD x = randn(rng, {2, 3, 9, 8}), w = randn(rng, {4, 3, k, k});
    Graph<double> g;
    const TD y = ops::conv2d(g.input(x), g.input(w), ops::Conv2dOptions{stride, pad}).value();
    EXPECT_LT(max_abs_diff(y, oracle::conv2d(x, w, stride, pad)), 1e-12) << "k=" << k << " stride=" << stride;
  }
}

TEST(Primitives, DepthwiseIdentityKernel) {
  Rng rng(15);
  const TD x = randn(rng, {2, 3, 6, 5});
  TD kernel({3, 3, 3});
  for (std::size_t c = 0; c < 3; ++c) kernel.at({c, 1, 1}) = 1.0;
  Graph<double> g;
  EXPECT_EQ(ops::conv2d_depthwise(g.input(x), g.input(kernel)).value(), x);
}

TEST(Primitives, DepthwiseOnesKernelOnConstantInput) {
  Graph<double> g;
  const TD y = ops::conv2d_depthwise(g.input(TD({1, 1, 5, 5}, 1.0)), g.input(TD({1, 3, 3}, 1.0))).value();
  EXPECT_EQ(y.at({0, 0, 2, 2}), 9.0);
  EXPECT_EQ(y.at({0, 0, 0, 0}), 4.0);
  EXPECT_EQ(y.at({0, 0, 0, 2}), 6.0);
}

TEST(Primitives, DepthwiseMatchesDirectLoops) {
  Rng rng(16);
  const TD x = randn(rng, {1, 2, 5, 5}), kernel = randn(rng, {2, 3, 3});
  Graph<double> g;
  EXPECT_LT(max_abs_diff(ops::conv2d_depthwise(g.input(x), g.input(kernel)).value(), oracle::depthwise(x, kernel)), 1e-12);
}

TEST(Primitives, DepthwiseChannelsAreIndependent) {
  Rng rng(17);
  TD x = randn(rng, {1, 3, 6, 6});
  const TD kernel = randn(rng, {3, 3, 3});
  Graph<double> g;
  const TD y0 = ops::conv2d_depthwise(g.input(x), g.input(kernel)).value();
  for (std::size_t i = 0; i < 36; ++i) x[36 + i] += 1.0;  // channel 1 only
  const TD y1 = ops::conv2d_depthwise(g.input(x), g.input(kernel)).value();
  for (std::size_t i = 0; i < 36; ++i) {
    EXPECT_EQ(y0[i], y1[i]);
    EXPECT_EQ(y0[72 + i], y1[72 + i]);
  }
}

TEST(Primitives, DepthwiseRejectsBadKernels) {
  Graph<double> g;
  const auto x = g.input(TD({1, 2, 4, 4}));
  EXPECT_THROW(ops::conv2d_depthwise(x, g.input(TD({2, 2, 2}))), ShapeError);
  EXPECT_THROW(ops::conv2d_depthwise(x, g.input(TD({3, 3, 3}))), ShapeError);
}

TEST(Primitives, BilinearUpsampleHalfPixelCentres) {
  Graph<double> g;
  const TD y = ops::upsample(g.input(TD({1, 1, 2, 2}, {0, 1, 2, 3})), 2, ops::Upsample::bilinear).value();
  const std::vector<double> expected{0.0, 0.25, 0.75, 1.0,  0.5, 0.75, 1.25, 1.5,
                                     1.5, 1.75, 2.25, 2.5,  2.0, 2.25, 2.75, 3.0};
  for (std::size_t i = 0; i < 16; ++i) EXPECT_NEAR(y[i], expected[i], 1e-15) << i;
}

TEST(Primitives, UpsamplePreservesConstantsAndNearestRepeats) {
  Graph<double> g;
  const TD c = ops::upsample(g.input(TD({1, 2, 3, 3}, 4.5)), 4, ops::Upsample::bilinear).value();
  for (double v : c.buffer()) EXPECT_DOUBLE_EQ(v, 4.5);
  const TD n = ops::upsample(g.input(TD({1, 1, 2, 2}, {1, 2, 3, 4})), 2, ops::Upsample::nearest).value();
  EXPECT_EQ(n.buffer(), (std::vector<double>{1, 1, 2, 2, 1, 1, 2, 2, 3, 3, 4, 4, 3, 3, 4, 4}));
}

TEST(Primitives, MaxPoolTakesBlockMaxima) {
  Graph<double> g;
  const TD y = ops::max_pool2x2(g.input(TD({1, 1, 2, 4}, {1, 5, -2, -3, 4, 0, -1, -4}))).value();
  EXPECT_EQ(y.buffer(), (std::vector<double>{5, -1}));
}

TEST(Primitives, SoftmaxRowsSumToOne) {
  Rng rng(18);
  Graph<double> g;
  const TD y = ops::softmax(g.input(randn(rng, {50, 17}, 4.0))).value();
  for (std::size_t r = 0; r < 50; ++r) {
    double s = 0;
    for (std::size_t j = 0; j < 17; ++j) {
      EXPECT_GE(y[r * 17 + j], 0.0);
      s += y[r * 17 + j];
    }
    EXPECT_NEAR(s, 1.0, 1e-12);
  }
}

TEST(Primitives, MaskedSoftmaxZeroesInvalidKeys) {
  Rng rng(19);
  ops::SoftmaxMask mask{2, 2, {1, 1, 0, 1, 0, 1}};
  Graph<double> g;
  const TD y = ops::softmax(g.input(randn(rng, {8, 3})), &mask).value();
  for (std::size_t r = 0; r < 8; ++r) {
    const std::size_t grp = (r / 2) % 2;
    double s = 0;
    for (std::size_t j = 0; j < 3; ++j) {
      if (!mask.valid[grp * 3 + j]) {
        EXPECT_EQ(y[r * 3 + j], 0.0);
      }
      s += y[r * 3 + j];
    }
    EXPECT_NEAR(s, 1.0, 1e-12);
  }
}

TEST(Primitives, LayerNormMatchesOracle) {
  Rng rng(20);
  const TD x = randn(rng, {3, 4, 7}, 2.0), gamma = randn(rng, {7}), beta = randn(rng, {7});
  Graph<double> g;
  const TD y = ops::layer_norm(g.input(x), g.input(gamma), g.input(beta), 1e-6).value();
  EXPECT_LT(max_abs_diff(y, oracle::layer_norm(x, gamma, beta, 1e-6)), 1e-12);
}

TEST(Primitives, BatchNormTrainStatisticsAndRunningUpdate) {
  Rng rng(21);
  const TD x = randn(rng, {3, 4, 5, 2}, 2.0), gamma = randn(rng, {4}), beta = randn(rng, {4});
  ops::BatchNormState<double> state(4);
  Graph<double> g;
  const TD y = ops::batch_norm(g.input(x), g.input(gamma), g.input(beta), state, Mode::train).value();
  EXPECT_LT(max_abs_diff(y, oracle::batch_norm_train(x, gamma, beta, 1e-5)), 1e-12);
  EXPECT_TRUE(state.initialized());
  for (std::size_t c = 0; c < 4; ++c) {
    double mu = 0;
    for (std::size_t b = 0; b < 3; ++b)
      for (std::size_t i = 0; i < 10; ++i) mu += x[(b * 4 + c) * 10 + i];
    EXPECT_NEAR(state.running_mean.value[c], 0.1 * mu / 30.0, 1e-14);
  }
}

TEST(Primitives, BatchNormEvalNeedsStatistics) {
  ops::BatchNormState<double> state(2);
  Graph<double> g;
  const auto x = g.input(TD({1, 2, 2, 2}, 1.0));
  const auto one = g.input(TD({2}, 1.0)), zero = g.input(TD({2}, 0.0));
  EXPECT_THROW(ops::batch_norm(x, one, zero, state, Mode::eval), StateError);
  state.mark_initialized();
  const TD y = ops::batch_norm(x, one, zero, state, Mode::eval).value();
  for (double v : y.buffer()) EXPECT_NEAR(v, 1.0 / std::sqrt(1.0 + 1e-5), 1e-15);
}

TEST(Primitives, GatherRowsWithPadding) {
  Graph<double> g;
  const TD y = ops::gather_rows(g.input(TD({3, 2}, {1, 2, 3, 4, 5, 6})), 2, {2, -1, 0}, {3, 2}).value();
  EXPECT_EQ(y.buffer(), (std::vector<double>{5, 6, 0, 0, 1, 2}));
}

TEST(Primitives, PermuteMovesAxes) {
  Rng rng(22);
  const TD x = randn(rng, {2, 3, 4});
  Graph<double> g;
  const TD y = ops::permute(g.input(x), {2, 0, 1}).value();
  ASSERT_EQ(y.shape(), (Shape{4, 2, 3}));
  for (std::size_t a = 0; a < 2; ++a)
    for (std::size_t b = 0; b < 3; ++b)
      for (std::size_t c = 0; c < 4; ++c) EXPECT_EQ(y.at({c, a, b}), x.at({a, b, c}));
}

TEST(Primitives, CrossEntropyGradientIsSoftmaxMinusOneHot) {
  Rng rng(23);
  const TD logits = randn(rng, {2, 4, 3, 1});
  const std::vector<std::uint8_t> target{0, 3, 255, 2, 1, 1};
  Graph<double> g;
  const auto x = g.input(logits, true);
  const auto res = ops::cross_entropy(x, target);
  EXPECT_EQ(res.count, 5u);
  g.backward(res.loss);
  EXPECT_EQ(g.grad(x).at({0, 0, 2, 0}), 0.0);  // ignored pixel
  EXPECT_LT(oracle::vjp_error([&](Graph<double>&, const Vars& v) { return ops::cross_entropy(v[0], target).loss; }, {logits}, 1),
            1e-6);
}

// Backward of every primitive against central differences on randomized inputs.
class PrimitiveGradients : public ::testing::TestWithParam<int> {};

TEST_P(PrimitiveGradients, MatchFiniteDifferences) {
  const auto trial = static_cast<std::uint64_t>(GetParam());
  Rng rng(1000 + trial);
  const SplineGrid grid(-1.0, 1.0, 5, 3);
  struct Case {
    const char* name;
    oracle::Builder f;
    std::vector<TD> inputs;
  };
  std::vector<Case> cases;
  cases.push_back({"add", [](Graph<double>&, const Vars& v) { return ops::add(v[0], v[1]); }, {randn(rng, {3, 4}), randn(rng, {3, 4})}});
  cases.push_back({"mul", [](Graph<double>&, const Vars& v) { return ops::mul(v[0], v[1]); }, {randn(rng, {3, 4}), randn(rng, {3, 4})}});
  cases.push_back({"scale", [](Graph<double>&, const Vars& v) { return ops::scale(v[0], -1.7); }, {randn(rng, {5})}});
  cases.push_back({"add_bias", [](Graph<double>&, const Vars& v) { return ops::add_bias(v[0], v[1], 1); },
                   {randn(rng, {2, 3, 2, 2}), randn(rng, {3})}});
  cases.push_back({"relu", [](Graph<double>&, const Vars& v) { return ops::relu(v[0]); }, {away_from_zero(rng, {4, 5})}});
  cases.push_back({"silu", [](Graph<double>&, const Vars& v) { return ops::silu(v[0]); }, {randn(rng, {4, 5}, 2.0)}});
  cases.push_back({"reshape", [](Graph<double>&, const Vars& v) { return ops::reshape(v[0], {6, 2}); }, {randn(rng, {3, 4})}});
  cases.push_back({"permute", [](Graph<double>&, const Vars& v) { return ops::permute(v[0], {1, 2, 0}); }, {randn(rng, {2, 3, 4})}});
  cases.push_back({"sum", [](Graph<double>&, const Vars& v) { return ops::sum(v[0]); }, {randn(rng, {3, 3})}});
  cases.push_back({"mean", [](Graph<double>&, const Vars& v) { return ops::mean(v[0]); }, {randn(rng, {3, 3})}});
  cases.push_back({"gather_rows", [](Graph<double>&, const Vars& v) { return ops::gather_rows(v[0], 2, {1, -1, 1, 0}, {4, 2}); },
                   {randn(rng, {2, 2})}});
  cases.push_back({"matmul", [](Graph<double>&, const Vars& v) { return ops::matmul(v[0], v[1]); }, {randn(rng, {3, 4}), randn(rng, {4, 2})}});
  for (bool ta : {false, true})
    for (bool tb : {false, true}) {
      cases.push_back({"bmm", [ta, tb](Graph<double>&, const Vars& v) { return ops::bmm(v[0], v[1], ta, tb); },
                       {randn(rng, ta ? Shape{2, 4, 3} : Shape{2, 3, 4}), randn(rng, tb ? Shape{2, 5, 4} : Shape{2, 4, 5})}});
    }
  cases.push_back({"linear", [](Graph<double>&, const Vars& v) { return ops::linear(v[0], v[1], std::optional<Var<double>>(v[2])); },
                   {randn(rng, {2, 3, 4}), randn(rng, {5, 4}), randn(rng, {5})}});
  cases.push_back({"softmax", [](Graph<double>&, const Vars& v) { return ops::softmax(v[0]); }, {randn(rng, {4, 6}, 2.0)}});
  static const ops::SoftmaxMask mask{1, 2, {1, 0, 1, 1, 1, 0}};
  cases.push_back({"softmax_masked", [](Graph<double>&, const Vars& v) { return ops::softmax(v[0], &mask); }, {randn(rng, {4, 3}, 2.0)}});
  cases.push_back({"layer_norm", [](Graph<double>&, const Vars& v) { return ops::layer_norm(v[0], v[1], v[2], 1e-6); },
                   {randn(rng, {3, 5}), randn(rng, {5}), randn(rng, {5})}});
  cases.push_back({"batch_norm",
                   [](Graph<double>&, const Vars& v) {
                     ops::BatchNormState<double> st(3);
                     return ops::batch_norm(v[0], v[1], v[2], st, Mode::train);
                   },
                   {randn(rng, {2, 3, 2, 3}), randn(rng, {3}), randn(rng, {3})}});
  cases.push_back({"conv2d", [](Graph<double>&, const Vars& v) { return ops::conv2d(v[0], v[1], ops::Conv2dOptions{2, 1}); },
                   {randn(rng, {2, 2, 5, 4}), randn(rng, {3, 2, 3, 3})}});
  cases.push_back({"conv2d_depthwise", [](Graph<double>&, const Vars& v) { return ops::conv2d_depthwise(v[0], v[1]); },
                   {randn(rng, {2, 2, 4, 3}), randn(rng, {2, 3, 3})}});
  {
    // distinct magnitudes so no pooling window has a near-tie
    TD x({1, 2, 4, 4});
    std::vector<double> vals(32);
    for (std::size_t i = 0; i < 32; ++i) vals[i] = 0.2 * static_cast<double>(i) - 3.0;
    std::shuffle(vals.begin(), vals.end(), rng.engine());
    x.buffer() = vals;
    cases.push_back({"max_pool2x2", [](Graph<double>&, const Vars& v) { return ops::max_pool2x2(v[0]); }, {x}});
  }
  cases.push_back({"upsample_bilinear", [](Graph<double>&, const Vars& v) { return ops::upsample(v[0], 2, ops::Upsample::bilinear); },
                   {randn(rng, {1, 2, 3, 3})}});
  cases.push_back({"upsample_nearest", [](Graph<double>&, const Vars& v) { return ops::upsample(v[0], 2, ops::Upsample::nearest); },
                   {randn(rng, {1, 2, 3, 2})}});
  cases.push_back({"kan_expand", [grid](Graph<double>&, const Vars& v) { return ops::kan_expand(v[0], grid); },
                   {rng.uniform_tensor<double>({3, 4}, -0.97, 0.97)}});
  cases.push_back({"kan_edge_weights", [](Graph<double>&, const Vars& v) { return ops::kan_edge_weights(v[0], v[1], v[2]); },
                   {randn(rng, {2, 3}), randn(rng, {2, 3}), randn(rng, {2, 3, 8})}});
  cases.push_back({"weighted_fuse", [](Graph<double>&, const Vars& v) { return ops::weighted_fuse(v[0], v[1], v[2], 1e-4); },
                   {randn(rng, {1, 2, 3, 3}), randn(rng, {1, 2, 3, 3}), rng.uniform_tensor<double>({2}, 0.3, 2.0)}});
  for (const auto& c : cases) {
    EXPECT_LT(oracle::vjp_error(c.f, c.inputs, trial * 131 + 7), 1e-5) << c.name;
  }
}

// 32 primitive cases x 4 trials.
INSTANTIATE_TEST_SUITE_P(RandomTrials, PrimitiveGradients, ::testing::Range(0, 4));

TEST(Autodiff, RandomFiveNodeGraph) {
  Rng rng(31);
  const auto f = [](Graph<double>&, const Vars& v) {
    const auto a = ops::mul(v[0], v[1]);
    const auto b = ops::silu(ops::add(a, v[0]));
    const auto c = ops::softmax(ops::matmul(b, v[2]));
    return ops::sum(ops::mul(c, c));
  };
  for (int t = 0; t < 5; ++t) {
    EXPECT_LT(oracle::vjp_error(f, {randn(rng, {3, 4}), randn(rng, {3, 4}), randn(rng, {4, 2})}, 40 + t), 1e-6);
  }
}

TEST(Autodiff, QuadraticGraphIsExactToFdPrecision) {
  Rng rng(32);
  const auto f = [](Graph<double>&, const Vars& v) { return ops::sum(ops::mul(ops::scale(v[0], 3.0), v[0])); };
  EXPECT_LT(oracle::vjp_error(f, {randn(rng, {6})}, 2), 1e-8);
}

TEST(Autodiff, FanOutGradientsAdd) {
  Rng rng(33);
  const TD x0 = randn(rng, {10}), c0 = randn(rng, {10});
  const auto grad_of = [&](int which) {
    Graph<double> g;
    const auto x = g.input(x0, true);
    const auto c = g.input(c0);
    const auto f = ops::silu(x);
    const auto h = ops::mul(x, c);
    const auto y = which == 0 ? f : (which == 1 ? h : ops::add(f, h));
    g.backward(ops::sum(y));
    return g.grad(x);
  };
  const TD gf = grad_of(0), gh = grad_of(1), both = grad_of(2);
  for (std::size_t i = 0; i < 10; ++i) EXPECT_DOUBLE_EQ(both[i], gf[i] + gh[i]);
}

TEST(Autodiff, ParameterGradientsAccumulateAcrossBackwardPasses) {
  Parameter<double> p(TD({2}, {1.0, -2.0}));
  for (int pass = 0; pass < 2; ++pass) {
    Graph<double> g;
    const auto v = g.param(p);
    g.backward(ops::sum(ops::mul(v, v)));
  }
  EXPECT_EQ(p.grad.buffer(), (std::vector<double>{4.0, -8.0}));
  p.zero_grad();
  EXPECT_TRUE(p.grad.empty());
}

TEST(Autodiff, ForwardReplayIsBitIdentical) {
  Rng rng(34);
  const TD x = randn(rng, {2, 3, 8, 8}), w = randn(rng, {4, 3, 3, 3}), k = randn(rng, {4, 3, 3});
  const auto run = [&]() {
    Graph<double> g;
    auto y = ops::conv2d(g.input(x), g.input(w), ops::Conv2dOptions{1, 1});
    y = ops::relu(ops::conv2d_depthwise(y, g.input(k)));
    y = ops::upsample(ops::max_pool2x2(y), 2);
    return ops::softmax(y).value();
  };
  EXPECT_EQ(run(), run());
}

TEST(Autodiff, BackwardTwiceIsAnError) {
  Graph<double> g;
  const auto y = ops::sum(g.input(TD({2}, 1.0), true));
  g.backward(y);
  EXPECT_THROW(g.backward(y), StateError);
}

TEST(Autodiff, BackwardWithoutForwardIsAnError) {
  Graph<double> g;
  EXPECT_THROW(g.backward(Var<double>()), StateError);
  Graph<double> other;
  const auto y = ops::sum(other.input(TD({2}, 1.0), true));
  EXPECT_THROW(g.backward(y), StateError);
}

TEST(Autodiff, SeedShapeMustMatchOutput) {
  Graph<double> g;
  const auto y = ops::scale(g.input(TD({3}, 1.0), true), 2.0);
  EXPECT_THROW(g.backward(y), ShapeError);
  EXPECT_THROW(g.backward(y, TD({2}, 1.0)), ShapeError);
}

TEST(Autodiff, ShapeErrorNamesTheNode) {
  Graph<double> g;
  const auto a = g.input(TD({2, 3})), b = g.input(TD({3, 2}));
  try {
    ops::add(a, b);
    FAIL() << "expected ShapeError";
  } catch (const ShapeError& e) {
    EXPECT_NE(std::string(e.what()).find("add"), std::string::npos);
    EXPECT_NE(std::string(e.what()).find("node #2"), std::string::npos);
  }
}

TEST(Autodiff, NonFiniteIntermediateNamesNodeAndValue) {
  Graph<double> g;
  const auto x = g.input(TD({2}, 1e308));
  try {
    ops::scale(x, 10.0);
    FAIL() << "expected NumericError";
  } catch (const NumericError& e) {
    const std::string msg = e.what();
    EXPECT_NE(msg.find("scale"), std::string::npos);
    EXPECT_NE(msg.find("inf"), std::string::npos);
  }
}

TEST(Serialization, RoundTripsBothPrecisions) {
  Rng rng(35);
  const TD d = randn(rng, {2, 3, 4});
  const Tensor<float> f = cast<float>(d);
  std::stringstream ss;
  io::write_records<double>(ss, {{"a.weight", d}});
  io::write_records<float>(ss, {{"b", f}});
  const auto rd = io::read_records<double>(ss);
  ASSERT_EQ(rd.size(), 1u);
  EXPECT_EQ(rd[0].name, "a.weight");
  EXPECT_EQ(rd[0].tensor, d);
  const auto rf = io::read_records<float>(ss);
  EXPECT_EQ(rf[0].tensor, f);
}

TEST(Serialization, HeaderIsLittleEndianKtsr) {
  std::stringstream ss;
  io::write_records<float>(ss, {{"x", Tensor<float>({2}, {1.0f, 2.0f})}});
  const std::string bytes = ss.str();
  EXPECT_EQ(bytes.substr(0, 4), "KTSR");
  EXPECT_EQ(bytes.substr(8, 4), std::string("\x01\x00\x00\x00", 4));   // record count
  EXPECT_EQ(bytes.substr(12, 4), std::string("\x01\x00\x00\x00", 4));  // name length
  EXPECT_EQ(bytes[17], '\x01');                                          // f32 dtype code
  EXPECT_EQ(bytes[18], '\x01');                                          // rank
  EXPECT_EQ(bytes.size(), 4u + 4 + 4 + 4 + 1 + 1 + 1 + 4 + 8);
  std::stringstream bad("XXXX");
  EXPECT_THROW(io::read_records<double>(bad), IoError);
  std::stringstream truncated(bytes.substr(0, bytes.size() - 3));
  EXPECT_THROW(io::read_records<float>(truncated), IoError);
}
