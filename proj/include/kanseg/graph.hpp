#pragma once

#include <cstdint>
#include <functional>
#include <limits>
#include <string>
#include <string_view>
#include <vector>

#include "kanseg/tensor.hpp"

namespace kanseg {

/// A learnable (or buffered) tensor owned by a layer. `grad` accumulates across backward passes
/// until cleared by the optimizer.
template <class T>
struct Parameter {
  Tensor<T> value;
  Tensor<T> grad;
  bool trainable = true;

  Parameter() = default;
  explicit Parameter(Tensor<T> v, bool is_trainable = true) : value(std::move(v)), trainable(is_trainable) {}

  void zero_grad() { grad = Tensor<T>(); }
};

template <class T>
struct NamedParameter {
  std::string name;
  Parameter<T>* param;
};

template <class T>
using ParamList = std::vector<NamedParameter<T>>;

enum class Mode { train, eval };

struct GraphOptions {
  /// Record backward closures. Disable for inference.
  bool grad_enabled = true;
  /// Reject non-finite op outputs.
  bool check_finite = true;
  /// Hash activation patterns of non-smooth primitives (ReLU masks, spline intervals, pool argmax).
  bool track_kinks = false;
};

template <class T>
class Graph;

/// Handle to a node in a Graph.
template <class T>
class Var {
 public:
  Var() = default;
  Var(Graph<T>* g, std::size_t id) : graph_(g), id_(id) {}

  Graph<T>& graph() const { return *graph_; }
  std::size_t id() const noexcept { return id_; }
  const Tensor<T>& value() const { return graph_->value(id_); }
  const Shape& shape() const { return value().shape(); }
  std::size_t dim(std::size_t axis) const { return value().dim(axis); }
  bool valid() const noexcept { return graph_ != nullptr; }

 private:
  Graph<T>* graph_ = nullptr;
  std::size_t id_ = 0;
};

/// Define-by-run tape. Nodes are appended in execution order, which is a topological order by
/// construction; backward walks them in reverse.
template <class T>
class Graph {
 public:
  /// Propagates `out_grad` of the node into its inputs through `Graph::grad_ref`.
  using BackwardFn = std::function<void(Graph&, const Tensor<T>& out_grad)>;

  struct Node {
    std::string op;
    Tensor<T> value;
    Tensor<T> grad;
    std::vector<std::size_t> inputs;
    BackwardFn backward;
    Parameter<T>* param = nullptr;
    bool requires_grad = false;

    const Tensor<T>& data() const noexcept { return param != nullptr ? param->value : value; }
  };

  explicit Graph(GraphOptions opts = {}) : opts_(opts) {}
  Graph(const Graph&) = delete;
  Graph& operator=(const Graph&) = delete;

  const GraphOptions& options() const noexcept { return opts_; }
  bool grad_enabled() const noexcept { return opts_.grad_enabled; }
  std::size_t size() const noexcept { return nodes_.size(); }
  const Node& node(std::size_t id) const { return nodes_.at(id); }

  Var<T> input(Tensor<T> value, bool requires_grad = false) {
    Node n;
    n.op = "input";
    n.value = std::move(value);
    n.requires_grad = requires_grad && opts_.grad_enabled;
    nodes_.push_back(std::move(n));
    return Var<T>(this, nodes_.size() - 1);
  }

  /// Leaf bound to a parameter; after backward its gradient is added into `p.grad`.
  Var<T> param(Parameter<T>& p) {
    Node n;
    n.op = "param";
    n.param = &p;
    n.requires_grad = p.trainable && opts_.grad_enabled;
    nodes_.push_back(std::move(n));
    return Var<T>(this, nodes_.size() - 1);
  }

  bool requires_grad(std::size_t id) const { return nodes_.at(id).requires_grad; }
  bool requires_grad(const Var<T>& v) const { return requires_grad(v.id()); }

  const Tensor<T>& value(std::size_t id) const { return nodes_.at(id).data(); }

  /// Appends the result of a primitive. `backward` may be empty when no input needs a gradient.
  Var<T> record(std::string_view op, Tensor<T> value, std::vector<std::size_t> inputs, BackwardFn backward) {
    if (opts_.check_finite) {
      for (std::size_t i = 0; i < value.size(); ++i) {
        if (!std::isfinite(value[i])) {
          throw NumericError("node #" + std::to_string(nodes_.size()) + " (" + std::string(op) +
                             ") produced non-finite value " + std::to_string(value[i]) + " at flat index " +
                             std::to_string(i));
        }
      }
    }
    Node n;
    n.op = std::string(op);
    n.value = std::move(value);
    n.requires_grad = false;
    if (opts_.grad_enabled) {
      for (std::size_t in : inputs) n.requires_grad = n.requires_grad || nodes_.at(in).requires_grad;
    }
    if (n.requires_grad) n.backward = std::move(backward);
    n.inputs = std::move(inputs);
    nodes_.push_back(std::move(n));
    return Var<T>(this, nodes_.size() - 1);
  }

  [[noreturn]] void fail(std::string_view op, const std::string& message) const {
    throw ShapeError("node #" + std::to_string(nodes_.size()) + " (" + std::string(op) + "): " + message);
  }

  /// Gradient buffer of a node, zero-initialised on first access.
  Tensor<T>& grad_ref(std::size_t id) {
    Node& n = nodes_.at(id);
    if (n.grad.empty()) n.grad = Tensor<T>(n.data().shape());
    return n.grad;
  }

  const Tensor<T>& grad(const Var<T>& v) const { return nodes_.at(v.id()).grad; }

  /// Backward from a single-element output, seeded with 1.
  void backward(const Var<T>& output) {
    check_output(output);
    if (output.value().size() != 1) {
      throw ShapeError("backward: implicit seed requires a single-element output, got " + to_string(output.shape()));
    }
    backward(output, Tensor<T>(output.shape(), T{1}));
  }

  void backward(const Var<T>& output, const Tensor<T>& seed) {
    check_output(output);
    if (seed.shape() != output.shape()) {
      throw ShapeError("backward: seed shape " + to_string(seed.shape()) + " does not match output " +
                       to_string(output.shape()));
    }
    if (consumed_) throw StateError("backward: graph has already been differentiated");
    consumed_ = true;
    if (!nodes_[output.id()].requires_grad) return;
    Tensor<T>& g0 = grad_ref(output.id());
    for (std::size_t i = 0; i < seed.size(); ++i) g0[i] += seed[i];
    for (std::size_t id = output.id() + 1; id-- > 0;) {
      Node& n = nodes_[id];
      if (n.grad.empty() || !n.requires_grad) continue;
      if (n.backward) {
        n.backward(*this, n.grad);
        if (id != output.id()) n.grad = Tensor<T>();  // intermediate grads are dead once propagated
      }
      if (n.param != nullptr) {
        Tensor<T>& pg = n.param->grad;
        if (pg.empty()) {
          pg = n.grad;
        } else {
          for (std::size_t i = 0; i < pg.size(); ++i) pg[i] += n.grad[i];
        }
      }
    }
  }

  /// Non-smooth primitives report here when kink tracking is enabled.
  void note_pattern(std::uint64_t h) {
    pattern_ ^= h + 0x9e3779b97f4a7c15ULL + (pattern_ << 6) + (pattern_ >> 2);
  }
  std::uint64_t pattern() const noexcept { return pattern_; }
  bool tracking_kinks() const noexcept { return opts_.track_kinks; }

 private:
  void check_output(const Var<T>& output) const {
    if (nodes_.empty() || !output.valid() || &output.graph() != this || output.id() >= nodes_.size()) {
      throw StateError("backward: output does not belong to an evaluated graph");
    }
  }

  GraphOptions opts_;
  std::vector<Node> nodes_;
  std::uint64_t pattern_ = 0;
  bool consumed_ = false;
};

/// FNV-1a style incremental hash for activation patterns.
class PatternHash {
 public:
  void add(std::uint64_t v) noexcept {
    h_ ^= v;
    h_ *= 0x100000001b3ULL;
  }
  std::uint64_t value() const noexcept { return h_; }

 private:
  std::uint64_t h_ = 0xcbf29ce484222325ULL;
};

}  // namespace kanseg
