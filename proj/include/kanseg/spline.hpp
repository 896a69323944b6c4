#pragma once

#include <algorithm>
#include <array>
#include <cmath>
#include <cstddef>
#include <string>
#include <vector>

#include "kanseg/error.hpp"

namespace kanseg {

/// Uniform B-spline grid on [range_min, range_max] with G intervals and order k, extended by k
/// knots of the same spacing beyond each end (G + 2k + 1 knots, G + k basis functions).
class SplineGrid {
 public:
  static constexpr std::size_t kMaxOrder = 7;

  SplineGrid(double range_min = -1.0, double range_max = 1.0, std::size_t intervals = 5, std::size_t order = 3)
      : min_(range_min), max_(range_max), intervals_(intervals), order_(order) {
    if (intervals == 0) throw ConfigError("SplineGrid: number of intervals must be positive");
    if (!(range_max > range_min) || !std::isfinite(range_min) || !std::isfinite(range_max)) {
      throw ConfigError("SplineGrid: range must be finite and increasing, got [" + std::to_string(range_min) + ", " +
                        std::to_string(range_max) + "]");
    }
    if (order > kMaxOrder) throw ConfigError("SplineGrid: order above " + std::to_string(kMaxOrder) + " unsupported");
    spacing_ = (range_max - range_min) / static_cast<double>(intervals);
    knots_.resize(intervals + 2 * order + 1);
    for (std::size_t j = 0; j < knots_.size(); ++j) {
      knots_[j] = range_min + (static_cast<double>(j) - static_cast<double>(order)) * spacing_;
    }
  }

  double range_min() const noexcept { return min_; }
  double range_max() const noexcept { return max_; }
  std::size_t intervals() const noexcept { return intervals_; }
  std::size_t order() const noexcept { return order_; }
  double spacing() const noexcept { return spacing_; }
  std::size_t num_basis() const noexcept { return intervals_ + order_; }
  const std::vector<double>& knots() const noexcept { return knots_; }

  friend bool operator==(const SplineGrid& a, const SplineGrid& b) {
    return a.min_ == b.min_ && a.max_ == b.max_ && a.intervals_ == b.intervals_ && a.order_ == b.order_;
  }

 private:
  double min_, max_;
  std::size_t intervals_, order_;
  double spacing_ = 0;
  std::vector<double> knots_;
};

/// Nonzero basis values at one point: B_{first + r}(x) for r = 0..order.
template <class T>
struct BasisBand {
  std::size_t first = 0;
  std::size_t interval = 0;  // knot span index j, t_j <= x < t_{j+1}
  int clamped = 0;           // -1 below range, +1 above, 0 inside
  std::array<T, SplineGrid::kMaxOrder + 1> values{};
  std::array<T, SplineGrid::kMaxOrder + 1> derivs{};
};

/// Evaluates the order+1 nonzero basis functions (and their x-derivatives) at clamp(x) using
/// the triangular de Boor scheme. Derivatives are zero outside the range (the clamp is flat).
template <class T>
BasisBand<T> basis_band(const SplineGrid& grid, T x) {
  BasisBand<T> band;
  const T lo = static_cast<T>(grid.range_min());
  const T hi = static_cast<T>(grid.range_max());
  if (x < lo) {
    x = lo;
    band.clamped = -1;
  } else if (x > hi) {
    x = hi;
    band.clamped = 1;
  }
  const std::size_t k = grid.order();
  const std::size_t G = grid.intervals();
  const T h = static_cast<T>(grid.spacing());
  long cell = static_cast<long>(std::floor((x - lo) / h));
  cell = std::clamp(cell, 0L, static_cast<long>(G) - 1);
  const std::size_t j = k + static_cast<std::size_t>(cell);
  band.interval = j;
  band.first = j - k;

  const auto& t = grid.knots();
  std::array<T, SplineGrid::kMaxOrder + 1> left{}, right{}, prev{};
  auto& N = band.values;
  N[0] = T{1};
  for (std::size_t d = 1; d <= k; ++d) {
    if (d == k) prev = N;
    left[d] = x - static_cast<T>(t[j + 1 - d]);
    right[d] = static_cast<T>(t[j + d]) - x;
    T saved = 0;
    for (std::size_t r = 0; r < d; ++r) {
      const T tmp = N[r] / (right[r + 1] + left[d - r]);
      N[r] = saved + right[r + 1] * tmp;
      saved = left[d - r] * tmp;
    }
    N[d] = saved;
  }
  if (k > 0 && band.clamped == 0) {
    // uniform knots: B'_{i,k} = (B_{i,k-1} - B_{i+1,k-1}) / h
    for (std::size_t r = 0; r <= k; ++r) {
      const T a = r >= 1 ? prev[r - 1] : T{0};
      const T b = r < k ? prev[r] : T{0};
      band.derivs[r] = (a - b) / h;
    }
  }
  return band;
}

/// Full basis vector of length G + k at clamp(x).
template <class T>
std::vector<T> bspline_basis(const SplineGrid& grid, T x) {
  std::vector<T> out(grid.num_basis(), T{0});
  const BasisBand<T> band = basis_band(grid, x);
  for (std::size_t r = 0; r <= grid.order(); ++r) out[band.first + r] = band.values[r];
  return out;
}

}  // namespace kanseg
