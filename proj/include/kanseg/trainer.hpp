#pragma once

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdint>
#include <cstdio>
#include <filesystem>
#include <functional>
#include <limits>
#include <optional>
#include <ostream>
#include <span>
#include <string>
#include <vector>

#include "kanseg/checkpoint.hpp"
#include "kanseg/config.hpp"
#include "kanseg/dataset.hpp"
#include "kanseg/metrics.hpp"
#include "kanseg/model.hpp"
#include "kanseg/ops/loss.hpp"

namespace kanseg {

/// Mean cross-entropy over non-ignored pixels, with the number of contributing pixels.
template <class T>
ops::LossResult<T> cross_entropy_loss(const Var<T>& logits, std::span<const std::uint8_t> targets,
                                      std::uint8_t ignore_index = 255) {
  return ops::cross_entropy(logits, targets, ignore_index);
}

/// lr0 * gamma^(number of milestones <= epoch), epochs counted from 0. Repeated multiplication,
/// so 0.01 decays to exactly 0.001, 0.0001, 1e-05.
inline double lr_at_epoch(const TrainConfig& cfg, std::size_t epoch) {
  double lr = cfg.lr0;
  for (std::size_t m : cfg.milestones)
    if (m <= epoch) lr *= cfg.gamma;
  return lr;
}

template <class T>
struct OptimizerState {
  std::vector<Tensor<T>> velocity;  // one per parameter, created on the first step
  std::size_t step = 0;
  std::size_t epoch = 0;
};

/// Heavy-ball SGD: g' = g + wd*w; v = momentum*v + g'; w -= lr*v. Parameters without a
/// gradient are treated as having a zero gradient; non-trainable entries are skipped.
template <class T>
void sgd_step(const ParamList<T>& params, OptimizerState<T>& state, double lr, double momentum, double weight_decay) {
  if (state.velocity.empty()) {
    state.velocity.reserve(params.size());
    for (const auto& p : params) state.velocity.emplace_back(p.param->value.shape());
  }
  if (state.velocity.size() != params.size()) throw StateError("sgd_step: optimizer state belongs to another parameter list");
  const T m = static_cast<T>(momentum), wd = static_cast<T>(weight_decay), step = static_cast<T>(lr);
  for (std::size_t i = 0; i < params.size(); ++i) {
    Parameter<T>& p = *params[i].param;
    if (!p.trainable) continue;
    Tensor<T>& v = state.velocity[i];
    if (v.shape() != p.value.shape()) throw ShapeError("sgd_step: velocity of " + params[i].name + " has the wrong shape");
    const bool has_grad = !p.grad.empty();
    if (has_grad && p.grad.shape() != p.value.shape()) throw ShapeError("sgd_step: gradient of " + params[i].name + " has the wrong shape");
    for (std::size_t j = 0; j < p.value.size(); ++j) {
      const T g = has_grad ? p.grad[j] : T{0};
      if (!std::isfinite(g)) {
        throw NumericError("sgd_step: non-finite gradient in " + params[i].name + " at index " + std::to_string(j));
      }
      v[j] = m * v[j] + g + wd * p.value[j];
      p.value[j] -= step * v[j];
    }
  }
  ++state.step;
}

template <class T>
void zero_grads(const ParamList<T>& params) {
  for (const auto& p : params) p.param->zero_grad();
}

/// Global L2 norm and the three largest per-tensor norms, for divergence diagnostics.
template <class T>
std::string parameter_norms(const ParamList<T>& params) {
  std::vector<std::pair<double, std::string>> norms;
  double total = 0;
  for (const auto& p : params) {
    if (!p.param->trainable) continue;
    double s = 0;
    for (T v : p.param->value.data()) s += static_cast<double>(v) * static_cast<double>(v);
    total += s;
    norms.emplace_back(std::sqrt(s), p.name);
  }
  std::sort(norms.begin(), norms.end(), [](const auto& a, const auto& b) { return a.first > b.first; });
  char buf[96];
  std::snprintf(buf, sizeof buf, "global parameter norm %.6g; largest:", std::sqrt(total));
  std::string out = buf;
  for (std::size_t i = 0; i < std::min<std::size_t>(3, norms.size()); ++i) {
    std::snprintf(buf, sizeof buf, " %.6g", norms[i].first);
    out += " " + norms[i].second + "=" + (buf + 1);
  }
  return out;
}

// ---------------------------------------------------------------------------------------------
// Sliding-window evaluation

/// Maps a batch [B,3,S,S] to logits [B,C,S,S].
template <class T>
using LogitFn = std::function<Tensor<T>(const Tensor<T>&)>;

/// Eval-mode forward without gradient recording.
template <class T>
LogitFn<T> model_logits(Model<T>& model) {
  return [&model](const Tensor<T>& images) {
    Graph<T> g(GraphOptions{false, true, false});
    return model(g, g.input(images), Mode::eval).value();
  };
}

struct StitchedLogits {
  std::size_t classes = 0, height = 0, width = 0;
  std::vector<double> mean;          // [C,H,W] average of every window's logits covering a pixel
  std::vector<std::uint32_t> count;  // [H,W] windows covering each pixel
};

template <class T>
StitchedLogits stitch_logits(const LogitFn<T>& fn, const Raster& image, std::size_t patch, std::size_t stride,
                             std::size_t batch = 8) {
  if (stride > patch) throw ConfigError("evaluate_tiles: stride " + std::to_string(stride) + " exceeds patch " + std::to_string(patch));
  if (image.height < patch || image.width < patch) {
    throw ShapeError("evaluate_tiles: tile " + std::to_string(image.height) + "x" + std::to_string(image.width) +
                     " is smaller than patch " + std::to_string(patch));
  }
  const auto origins = sliding_window(image.height, image.width, patch, stride);
  StitchedLogits out;
  out.height = image.height;
  out.width = image.width;
  out.count.assign(image.height * image.width, 0);
  std::vector<double>& sum = out.mean;
  for (std::size_t first = 0; first < origins.size(); first += batch) {
    const std::size_t n = std::min(batch, origins.size() - first);
    std::vector<Raster> crops;
    crops.reserve(n);
    for (std::size_t i = 0; i < n; ++i) crops.push_back(crop(image, origins[first + i].first, origins[first + i].second, patch, patch));
    std::vector<const Raster*> ptrs;
    for (const auto& c : crops) ptrs.push_back(&c);
    const Tensor<T> logits = fn(image_batch<T>(ptrs));
    if (logits.rank() != 4 || logits.dim(0) != n || logits.dim(2) != patch || logits.dim(3) != patch) {
      throw ShapeError("evaluate_tiles: logit function returned " + to_string(logits.shape()));
    }
    if (out.classes == 0) {
      out.classes = logits.dim(1);
      sum.assign(out.classes * out.height * out.width, 0.0);
    }
    const std::size_t C = out.classes;
    for (std::size_t i = 0; i < n; ++i) {
      const auto [oy, ox] = origins[first + i];
      for (std::size_t c = 0; c < C; ++c)
        for (std::size_t y = 0; y < patch; ++y)
          for (std::size_t x = 0; x < patch; ++x) {
            sum[(c * out.height + oy + y) * out.width + ox + x] += static_cast<double>(logits[((i * C + c) * patch + y) * patch + x]);
          }
      for (std::size_t y = 0; y < patch; ++y)
        for (std::size_t x = 0; x < patch; ++x) ++out.count[(oy + y) * out.width + ox + x];
    }
  }
  const std::size_t hw = out.height * out.width;
  for (std::size_t c = 0; c < out.classes; ++c)
    for (std::size_t i = 0; i < hw; ++i) sum[c * hw + i] /= static_cast<double>(out.count[i]);
  return out;
}

/// Per-pixel argmax; ties go to the lowest class index.
inline Raster argmax_map(const StitchedLogits& s) {
  Raster pred(s.height, s.width, 1);
  const std::size_t hw = s.height * s.width;
  for (std::size_t i = 0; i < hw; ++i) {
    std::size_t best = 0;
    for (std::size_t c = 1; c < s.classes; ++c)
      if (s.mean[c * hw + i] > s.mean[best * hw + i]) best = c;
    pred.data[i] = static_cast<std::uint8_t>(best);
  }
  return pred;
}

struct TileEvaluation {
  ConfusionMatrix cm;
  std::vector<Raster> predictions;
  std::vector<std::vector<std::uint32_t>> counts;
};

template <class T>
TileEvaluation evaluate_tiles(const LogitFn<T>& fn, const std::vector<Tile>& tiles, std::size_t classes, std::size_t patch,
                              std::size_t stride, std::size_t batch = 8) {
  TileEvaluation ev{ConfusionMatrix(classes), {}, {}};
  for (const auto& t : tiles) {
    StitchedLogits s = stitch_logits(fn, t.image, patch, stride, batch);
    if (s.classes != classes) throw ShapeError("evaluate_tiles: model emits " + std::to_string(s.classes) + " classes");
    Raster pred = argmax_map(s);
    ev.cm.update(pred.data, t.label.data);
    ev.predictions.push_back(std::move(pred));
    ev.counts.push_back(std::move(s.count));
  }
  return ev;
}

template <class T>
TileEvaluation evaluate_tiles(Model<T>& model, const std::vector<Tile>& tiles, std::size_t patch, std::size_t stride,
                              std::size_t batch = 8) {
  return evaluate_tiles<T>(model_logits(model), tiles, model.cfg.num_classes, patch, stride, batch);
}

/// mIoU/mF1 with the last class (clutter) excluded.
inline MeanScores headline_scores(const ConfusionMatrix& cm) {
  const auto fg = foreground_classes(cm.classes(), cm.classes() - 1);
  return mean_scores(cm, fg);
}

// ---------------------------------------------------------------------------------------------
// Training loop

struct EpochLog {
  std::size_t epoch = 0;
  double lr = 0;
  double loss = 0;
  std::optional<double> test_miou;
  double seconds = 0;
  std::size_t samples = 0;
};

struct TrainOptions {
  std::filesystem::path out_dir;   // empty: no checkpoints
  std::ostream* log = nullptr;     // deterministic per-epoch lines
  std::ostream* timing = nullptr;  // wall-clock throughput lines
};

struct TrainResult {
  std::vector<EpochLog> epochs;
  double best_miou = -1;
  std::size_t best_epoch = 0;
};

inline std::string format_epoch(const EpochLog& e) {
  char buf[160];
  if (e.test_miou) {
    std::snprintf(buf, sizeof buf, "epoch %zu lr %.8g loss %.9g test_miou %.6f\n", e.epoch, e.lr, e.loss, *e.test_miou);
  } else {
    std::snprintf(buf, sizeof buf, "epoch %zu lr %.8g loss %.9g\n", e.epoch, e.lr, e.loss);
  }
  return buf;
}

/// Shuffles (seeded) and augments every epoch, steps SGD per batch, evaluates the held-out tiles
/// after each epoch and keeps "best" (by mIoU) and "last" checkpoints under opts.out_dir.
template <class T>
TrainResult train_loop(Model<T>& model, const std::vector<Sample>& train, const std::vector<Tile>& test,
                       const RunConfig& cfg, const TrainOptions& opts = {}) {
  if (train.empty()) throw ConfigError("train_loop: training set is empty");
  cfg.train.validate();
  const TrainConfig& tc = cfg.train;
  const ParamList<T> params = model.parameters();
  OptimizerState<T> opt;
  Rng rng(cfg.seed * 7919 + 17);
  std::vector<std::size_t> order(train.size());
  TrainResult result;
  for (std::size_t epoch = 0; epoch < tc.epochs; ++epoch) {
    const auto t0 = std::chrono::steady_clock::now();
    opt.epoch = epoch;
    const double lr = lr_at_epoch(tc, epoch);
    for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;
    for (std::size_t i = order.size(); i > 1; --i) {
      std::swap(order[i - 1], order[static_cast<std::size_t>(rng.integer(0, static_cast<std::int64_t>(i) - 1))]);
    }
    double loss_sum = 0;
    std::size_t batch_index = 0;
    for (std::size_t first = 0; first < order.size(); first += tc.batch, ++batch_index) {
      const std::size_t n = std::min(tc.batch, order.size() - first);
      std::vector<Sample> batch;
      batch.reserve(n);
      for (std::size_t i = 0; i < n; ++i) {
        const Sample& s = train[order[first + i]];
        batch.push_back(tc.augment ? augment(s, rng) : s);
      }
      std::vector<const Raster*> images, labels;
      for (const auto& s : batch) {
        images.push_back(&s.image);
        labels.push_back(&s.label);
      }
      const std::vector<std::uint8_t> targets = label_batch(labels);
      try {
        Graph<T> g;
        const Var<T> logits = model(g, g.input(image_batch<T>(images)), Mode::train);
        const auto loss = cross_entropy_loss(logits, targets, tc.ignore_index);
        const T value = loss.loss.value()[0];
        if (!std::isfinite(value)) throw NumericError("loss is not finite");
        g.backward(loss.loss);
        sgd_step(params, opt, lr, tc.momentum, tc.weight_decay);
        zero_grads(params);
        loss_sum += static_cast<double>(value) * static_cast<double>(n);
      } catch (const NumericError& e) {
        throw NumericError("training diverged at epoch " + std::to_string(epoch + 1) + ", batch " +
                           std::to_string(batch_index + 1) + ": " + e.what() + "; " + parameter_norms(params));
      }
    }
    EpochLog log;
    log.epoch = epoch + 1;
    log.lr = lr;
    log.loss = loss_sum / static_cast<double>(train.size());
    log.samples = train.size();
    if (!test.empty()) {
      const TileEvaluation ev = evaluate_tiles(model, test, cfg.data.patch, tc.eval_stride, tc.batch);
      log.test_miou = headline_scores(ev.cm).miou;
    }
    log.seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
    result.epochs.push_back(log);
    if (opts.log) *opts.log << format_epoch(log) << std::flush;
    if (opts.timing) {
      char buf[96];
      std::snprintf(buf, sizeof buf, "epoch %zu seconds %.2f samples_per_sec %.3f\n", log.epoch, log.seconds,
                    static_cast<double>(log.samples) / log.seconds);
      *opts.timing << buf << std::flush;
    }
    const std::vector<std::string> notes{"epoch " + std::to_string(log.epoch),
                                         "test_miou " + (log.test_miou ? std::to_string(*log.test_miou) : "n/a")};
    if (log.test_miou && *log.test_miou > result.best_miou) {
      result.best_miou = *log.test_miou;
      result.best_epoch = log.epoch;
      if (!opts.out_dir.empty()) save_checkpoint(opts.out_dir / "best", model, cfg, notes);
    }
    if (!opts.out_dir.empty() && epoch + 1 == tc.epochs) save_checkpoint(opts.out_dir / "last", model, cfg, notes);
  }
  return result;
}

// ---------------------------------------------------------------------------------------------
// Ablation

struct AblationRow {
  Variant variant = Variant::full;
  std::size_t parameters = 0;
  double final_loss = 0;
  double mf1 = 0, miou = 0;
};

/// Trains and evaluates the four variants (baseline, +DeepKAN, +GLKAN, both) under one config.
template <class T>
std::vector<AblationRow> run_ablation(const std::vector<Sample>& train, const std::vector<Tile>& test, const RunConfig& cfg,
                                      std::ostream* log = nullptr) {
  std::vector<AblationRow> rows;
  for (Variant v : {Variant::baseline, Variant::deepkan, Variant::glkan, Variant::full}) {
    Model<T> model = make_variant<T>(cfg.model, v, cfg.seed);
    if (log) *log << "# training variant " << variant_name(v) << "\n" << std::flush;
    const TrainResult tr = train_loop(model, train, {}, cfg, TrainOptions{{}, log, nullptr});
    const TileEvaluation ev = evaluate_tiles(model, test, cfg.data.patch, cfg.data.test_stride, cfg.train.batch);
    const MeanScores s = headline_scores(ev.cm);
    rows.push_back({v, model.parameter_count(), tr.epochs.back().loss, s.mf1, s.miou});
  }
  return rows;
}

inline std::string format_ablation(const std::vector<AblationRow>& rows) {
  std::string out;
  char buf[160];
  std::snprintf(buf, sizeof buf, "%-10s %-8s %-6s %12s %12s %8s %8s\n", "variant", "deepkan", "glkan", "parameters",
                "final_loss", "mF1", "mIoU");
  out += buf;
  for (const auto& r : rows) {
    const bool dk = r.variant == Variant::deepkan || r.variant == Variant::full;
    const bool gl = r.variant == Variant::glkan || r.variant == Variant::full;
    std::snprintf(buf, sizeof buf, "%-10s %-8s %-6s %12zu %12.6f %8.4f %8.4f\n", std::string(variant_name(r.variant)).c_str(),
                  dk ? "yes" : "no", gl ? "yes" : "no", r.parameters, r.final_loss, r.mf1, r.miou);
    out += buf;
  }
  std::vector<AblationRow> sorted = rows;
  std::stable_sort(sorted.begin(), sorted.end(), [](const auto& a, const auto& b) { return a.miou > b.miou; });
  out += "ordering by mIoU:";
  for (std::size_t i = 0; i < sorted.size(); ++i) out += (i ? " > " : " ") + std::string(variant_name(sorted[i].variant));
  out += "\n";
  return out;
}

}  // namespace kanseg
