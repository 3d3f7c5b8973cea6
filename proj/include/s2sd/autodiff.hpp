#pragma once

// Tape-based reverse-mode differentiation over dense tensors.
//
// A Graph owns every node created while evaluating one computation. Nodes are
// appended in creation order, which is already a topological order, so the
// backward pass is a single reverse sweep over the tape.

#include <cstddef>
#include <functional>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "s2sd/tensor.hpp"

namespace s2sd {

class Graph;

/// Handle to a node in a Graph. Cheap to copy; valid while the Graph lives.
class Var {
public:
  Var() = default;
  Var(Graph* graph, std::size_t id) : graph_(graph), id_(id) {}

  Graph& graph() const { return *graph_; }
  std::size_t id() const noexcept { return id_; }
  bool valid() const noexcept { return graph_ != nullptr; }

  const Tensor& value() const;
  const Tensor& grad() const;
  const Shape& shape() const { return value().shape(); }
  std::size_t rows() const { return value().rows(); }
  std::size_t cols() const { return value().cols(); }
  double item() const { return value().item(); }

private:
  Graph* graph_ = nullptr;
  std::size_t id_ = 0;
};

class Graph {
public:
  /// Accumulates the incoming gradient of a node into its parents.
  using Backward = std::function<void(Graph&, const Tensor& out_grad)>;

  Graph() = default;
  Graph(const Graph&) = delete;
  Graph& operator=(const Graph&) = delete;

  /// Leaf that receives a gradient.
  Var parameter(Tensor value);
  /// Leaf that never receives a gradient.
  Var constant(Tensor value);

  /// Appends an op node. The value is checked for non-finite entries.
  Var record(std::string_view op, Tensor value, std::span<const std::size_t> parents,
             Backward backward);

  /// Reverse sweep from a single-element root. Gradients from a previous
  /// sweep are discarded.
  void backward(Var root);

  const Tensor& value(std::size_t id) const { return nodes_.at(id).value; }
  /// Gradient after backward(); a zero tensor for nodes the sweep did not reach.
  const Tensor& grad(std::size_t id) const;
  /// Accumulation target for a parent, or nullptr when it takes no gradient.
  Tensor* grad_slot(std::size_t id);

  bool requires_grad(std::size_t id) const { return nodes_.at(id).requires_grad; }
  bool is_stop(std::size_t id) const { return nodes_.at(id).stop; }
  const std::string& op(std::size_t id) const { return nodes_.at(id).op; }
  std::size_t size() const noexcept { return nodes_.size(); }
  std::size_t last_backward_visits() const noexcept { return visits_; }

  /// Values produced by stop_gradient nodes so far, in creation order.
  const std::vector<Tensor>& stop_values() const noexcept { return stop_values_; }
  /// Makes the k-th stop_gradient node take `values[k]` instead of its input's
  /// value. Finite differences use this to hold gradient-stopped quantities at
  /// their unperturbed values, which is the function backward differentiates.
  void replay_stops(std::vector<Tensor> values) { stop_replay_ = std::move(values); }

private:
  friend Var stop_gradient(Var x);

  struct Node {
    std::string op;
    Tensor value;
    Tensor grad;
    std::vector<std::size_t> parents;
    Backward backward;
    bool requires_grad = false;
    bool stop = false;
    bool has_grad = false;
  };

  std::vector<Node> nodes_;
  std::size_t visits_ = 0;
  std::vector<Tensor> stop_values_;
  std::vector<Tensor> stop_replay_;
};

// ---------------------------------------------------------------------------
// Primitives. Binary elementwise ops accept equal shapes, or a single-element
// operand on either side (scalar broadcast); nothing else broadcasts.

Var matmul(Var a, Var b);     // [n x k] * [k x m]
Var matmul_nt(Var a, Var b);  // [n x k] * [m x k]^T
Var transpose(Var a);
Var add(Var a, Var b);
Var sub(Var a, Var b);
Var mul(Var a, Var b);
Var div(Var a, Var b);
Var add_row(Var matrix, Var row);  // adds a [1 x m] row to every row of [n x m]
Var scale(Var a, double factor);
Var add_scalar(Var a, double offset);
Var relu(Var a);
Var exp(Var a);
Var log(Var a);
/// Square root; the local derivative at exactly 0 is taken as 0.
Var sqrt(Var a);
/// Elementwise max(a, floor).
Var maximum(Var a, double floor);
Var sum(Var a);
Var mean(Var a);
Var row_sums(Var a);  // [n x m] -> [n x 1]
Var softmax_rows(Var a);
/// Row-wise x / sqrt(max(|x|^2, 1e-12)).
Var l2_normalize_rows(Var a);
Var concat_cols(std::span<const Var> parts);
/// Flat-index gather into a [1 x k] row.
Var gather(Var a, std::span<const std::size_t> flat_indices);
Var reshape(Var a, Shape shape);
/// Identity on values; contributes nothing to the gradient of x's ancestors.
Var stop_gradient(Var x);

inline Var operator+(Var a, Var b) { return add(a, b); }
inline Var operator-(Var a, Var b) { return sub(a, b); }
inline Var operator*(Var a, Var b) { return mul(a, b); }

}  // namespace s2sd
