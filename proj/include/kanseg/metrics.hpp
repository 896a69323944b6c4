#pragma once

#include <cstdint>
#include <cstdio>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "kanseg/error.hpp"

namespace kanseg {

/// Rows are ground truth, columns are predictions. Void pixels never enter the matrix.
class ConfusionMatrix {
 public:
  explicit ConfusionMatrix(std::size_t classes = 6) : n_(classes), counts_(classes * classes, 0) {
    if (classes == 0) throw ConfigError("ConfusionMatrix: at least one class required");
  }

  std::size_t classes() const noexcept { return n_; }
  std::uint64_t at(std::size_t truth, std::size_t pred) const { return counts_.at(truth * n_ + pred); }
  std::uint64_t& at(std::size_t truth, std::size_t pred) { return counts_.at(truth * n_ + pred); }

  std::uint64_t total() const {
    std::uint64_t s = 0;
    for (auto c : counts_) s += c;
    return s;
  }

  void update(std::span<const std::uint8_t> pred, std::span<const std::uint8_t> truth, std::uint8_t void_index = 255) {
    if (pred.size() != truth.size()) {
      throw ShapeError("update_confusion: prediction has " + std::to_string(pred.size()) + " pixels, truth has " +
                       std::to_string(truth.size()));
    }
    for (std::size_t i = 0; i < pred.size(); ++i) {
      if (truth[i] == void_index) continue;
      if (truth[i] >= n_ || pred[i] >= n_) {
        throw ShapeError("update_confusion: class index out of range at pixel " + std::to_string(i) + " (truth " +
                         std::to_string(truth[i]) + ", prediction " + std::to_string(pred[i]) + ")");
      }
      ++counts_[truth[i] * n_ + pred[i]];
    }
  }

  ConfusionMatrix& operator+=(const ConfusionMatrix& o) {
    if (o.n_ != n_) throw ShapeError("ConfusionMatrix: merging matrices of different class counts");
    for (std::size_t i = 0; i < counts_.size(); ++i) counts_[i] += o.counts_[i];
    return *this;
  }

  friend ConfusionMatrix operator+(ConfusionMatrix a, const ConfusionMatrix& b) { return a += b; }
  friend bool operator==(const ConfusionMatrix&, const ConfusionMatrix&) = default;

 private:
  std::size_t n_;
  std::vector<std::uint64_t> counts_;
};

struct ClassScores {
  std::uint64_t tp = 0, fp = 0, fn = 0;
  bool defined = false;  // false when the class never occurs in truth or prediction
  double precision = 0, recall = 0, f1 = 0, iou = 0;
};

/// p = TP/(TP+FP), r = TP/(TP+FN), F1 = 2pr/(p+r), IoU = TP/(TP+FP+FN).
/// A zero denominator in p or r gives 0; F1 is 0 when p = r = 0.
inline ClassScores class_scores(const ConfusionMatrix& cm, std::size_t n) {
  if (n >= cm.classes()) throw ShapeError("class_scores: class " + std::to_string(n) + " out of range");
  ClassScores s;
  s.tp = cm.at(n, n);
  for (std::size_t j = 0; j < cm.classes(); ++j) {
    if (j == n) continue;
    s.fp += cm.at(j, n);
    s.fn += cm.at(n, j);
  }
  s.defined = s.tp + s.fp + s.fn > 0;
  if (!s.defined) return s;
  const double tp = static_cast<double>(s.tp), fp = static_cast<double>(s.fp), fn = static_cast<double>(s.fn);
  s.precision = tp + fp > 0 ? tp / (tp + fp) : 0.0;
  s.recall = tp + fn > 0 ? tp / (tp + fn) : 0.0;
  s.f1 = s.precision + s.recall > 0 ? 2 * s.precision * s.recall / (s.precision + s.recall) : 0.0;
  s.iou = tp / (tp + fp + fn);
  return s;
}

struct MeanScores {
  double mf1 = 0, miou = 0;
  std::size_t classes = 0;  // defined foreground classes entering the means
};

/// Unweighted means over the defined classes of `foreground`.
inline MeanScores mean_scores(const ConfusionMatrix& cm, std::span<const std::size_t> foreground) {
  if (foreground.empty()) throw ConfigError("mean_scores: foreground class set is empty");
  MeanScores m;
  for (std::size_t c : foreground) {
    const ClassScores s = class_scores(cm, c);
    if (!s.defined) continue;
    m.mf1 += s.f1;
    m.miou += s.iou;
    ++m.classes;
  }
  if (m.classes == 0) throw NumericError("mean_scores: no foreground class occurs in truth or prediction");
  m.mf1 /= static_cast<double>(m.classes);
  m.miou /= static_cast<double>(m.classes);
  return m;
}

/// Every class except `excluded` (the clutter class).
inline std::vector<std::size_t> foreground_classes(std::size_t classes, std::optional<std::size_t> excluded) {
  std::vector<std::size_t> out;
  for (std::size_t c = 0; c < classes; ++c)
    if (!excluded || c != *excluded) out.push_back(c);
  return out;
}

/// Per-class precision/recall/F1/IoU table followed by the means over `foreground`.
inline std::string format_report(const ConfusionMatrix& cm, std::span<const char* const> names,
                                 std::span<const std::size_t> foreground) {
  std::string out;
  char buf[160];
  std::snprintf(buf, sizeof buf, "%-12s %9s %9s %9s %9s %12s\n", "class", "precision", "recall", "F1", "IoU", "pixels");
  out += buf;
  for (std::size_t c = 0; c < cm.classes(); ++c) {
    const ClassScores s = class_scores(cm, c);
    const char* name = c < names.size() ? names[c] : "?";
    bool in_means = false;
    for (std::size_t f : foreground) in_means = in_means || f == c;
    const char* mark = in_means ? "" : " (excluded)";
    if (s.defined) {
      std::snprintf(buf, sizeof buf, "%-12s %9.4f %9.4f %9.4f %9.4f %12llu%s\n", name, s.precision, s.recall, s.f1, s.iou,
                    static_cast<unsigned long long>(s.tp + s.fn), mark);
    } else {
      std::snprintf(buf, sizeof buf, "%-12s %9s %9s %9s %9s %12d%s\n", name, "undef", "undef", "undef", "undef", 0, mark);
    }
    out += buf;
  }
  const MeanScores m = mean_scores(cm, foreground);
  std::snprintf(buf, sizeof buf, "mF1 %.4f\nmIoU %.4f\n", m.mf1, m.miou);
  out += buf;
  return out;
}

}  // namespace kanseg
