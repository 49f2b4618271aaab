#pragma once

#include <span>
#include <vector>

#include "maesn/tensor.hpp"

namespace maesn {

/// Handle to a node inside a Graph. Cheap to copy; only valid together with
/// the Graph it came from.
struct Var {
  int id = -1;
  bool valid() const { return id >= 0; }
};

enum class OpKind : uint8_t {
  Leaf,
  Const,
  Add,
  Sub,
  Mul,
  Div,
  Neg,
  MatMul,
  Transpose,
  Relu,
  StepFn,  // 1 where x > 0 else 0; derivative defined as 0 everywhere
  Tanh,
  Exp,
  Log,
  Square,
  Scale,   // c * x
  Shift,   // x + c
  Sum,     // -> scalar
  Mean,    // -> scalar
  BroadcastRow,     // [d] -> [rows, d]
  ColSum,           // [m, n] -> [n]
  BroadcastScalar,  // [] -> shape
  Reshape,
  Detach,  // identity forward, no gradient (first-order / stop-gradient mode)
};

/// Append-only computation graph over Tensors. Nodes are evaluated eagerly at
/// construction; leaf values may be replaced later and dependent nodes are
/// recomputed lazily. grad() emits ordinary nodes into the same graph, so a
/// gradient expression can itself be differentiated again — that closure under
/// differentiation is what carries the meta-gradient through the inner
/// policy-gradient step.
class Graph {
 public:
  Var leaf(Tensor init);
  Var constant(Tensor value);

  Var add(Var a, Var b);
  Var sub(Var a, Var b);
  Var mul(Var a, Var b);
  Var div(Var a, Var b);
  Var neg(Var a);
  Var matmul(Var a, Var b);
  Var transpose(Var a);
  Var relu(Var a);
  Var step_fn(Var a);
  Var tanh_(Var a);
  Var exp_(Var a);
  Var log_(Var a);
  Var square(Var a);
  Var scale(Var a, double c);
  Var shift(Var a, double c);
  Var sum(Var a);
  Var mean(Var a);
  Var broadcast_row(Var v, long rows);
  Var col_sum(Var a);
  Var broadcast_scalar(Var s, std::vector<long> shape);
  Var reshape(Var a, std::vector<long> shape);
  Var detach(Var a);

  /// Reverse-mode gradient of a scalar node w.r.t. each node in `wrt`
  /// (leaves or any nodes). The results are nodes of this graph, matching the
  /// wrt shapes. A wrt node unreachable from the scalar yields a zero
  /// constant rather than an error.
  std::vector<Var> grad(Var scalar_node, std::span<const Var> wrt);

  /// Replace a leaf's value; dependents are recomputed on next value() call.
  void set_value(Var leaf, const Tensor& t);

  const Tensor& value(Var v);
  const std::vector<long>& shape(Var v) const;
  bool is_leaf(Var v) const;
  size_t size() const { return nodes_.size(); }

 private:
  struct Node {
    OpKind op;
    int a = -1, b = -1;
    double c = 0.0;
    std::vector<long> aux_shape;  // target shape for broadcast/reshape; rows for BroadcastRow in aux_shape[0]
    Tensor value;
    bool dirty = false;
  };

  std::vector<Node> nodes_;
  bool any_dirty_ = false;

  Var push(Node n);
  void compute(Node& n) const;
  void refresh();
  const Node& node(Var v) const { return nodes_[static_cast<size_t>(v.id)]; }
};

}  // namespace maesn
