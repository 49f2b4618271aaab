#include "maesn/graph.hpp"

#include <Eigen/Dense>

#include <cmath>
#include <unordered_map>

namespace maesn {

namespace {

using MatMap = Eigen::Map<Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>>;
using ConstMatMap =
    Eigen::Map<const Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>>;

void require_same_shape(const Tensor& a, const Tensor& b, const char* what) {
  if (!a.same_shape(b))
    throw std::invalid_argument(std::string(what) + ": shape mismatch " + a.shape_str() +
                                " vs " + b.shape_str());
}

}  // namespace

Var Graph::push(Node n) {
  compute(n);
  nodes_.push_back(std::move(n));
  return Var{static_cast<int>(nodes_.size()) - 1};
}

Var Graph::leaf(Tensor init) {
  Node n;
  n.op = OpKind::Leaf;
  n.value = std::move(init);
  nodes_.push_back(std::move(n));
  return Var{static_cast<int>(nodes_.size()) - 1};
}

Var Graph::constant(Tensor value) {
  Node n;
  n.op = OpKind::Const;
  n.value = std::move(value);
  nodes_.push_back(std::move(n));
  return Var{static_cast<int>(nodes_.size()) - 1};
}

Var Graph::add(Var a, Var b) { return push({OpKind::Add, a.id, b.id}); }
Var Graph::sub(Var a, Var b) { return push({OpKind::Sub, a.id, b.id}); }
Var Graph::mul(Var a, Var b) { return push({OpKind::Mul, a.id, b.id}); }
Var Graph::div(Var a, Var b) { return push({OpKind::Div, a.id, b.id}); }
Var Graph::neg(Var a) { return push({OpKind::Neg, a.id}); }
Var Graph::matmul(Var a, Var b) { return push({OpKind::MatMul, a.id, b.id}); }
Var Graph::transpose(Var a) { return push({OpKind::Transpose, a.id}); }
Var Graph::relu(Var a) { return push({OpKind::Relu, a.id}); }
Var Graph::step_fn(Var a) { return push({OpKind::StepFn, a.id}); }
Var Graph::tanh_(Var a) { return push({OpKind::Tanh, a.id}); }
Var Graph::exp_(Var a) { return push({OpKind::Exp, a.id}); }
Var Graph::log_(Var a) { return push({OpKind::Log, a.id}); }
Var Graph::square(Var a) { return push({OpKind::Square, a.id}); }
Var Graph::scale(Var a, double c) { return push({OpKind::Scale, a.id, -1, c}); }
Var Graph::shift(Var a, double c) { return push({OpKind::Shift, a.id, -1, c}); }
Var Graph::sum(Var a) { return push({OpKind::Sum, a.id}); }
Var Graph::mean(Var a) { return push({OpKind::Mean, a.id}); }
Var Graph::col_sum(Var a) { return push({OpKind::ColSum, a.id}); }
Var Graph::detach(Var a) { return push({OpKind::Detach, a.id}); }

Var Graph::broadcast_row(Var v, long rows) {
  Node n{OpKind::BroadcastRow, v.id};
  n.aux_shape = {rows};
  return push(std::move(n));
}

Var Graph::broadcast_scalar(Var s, std::vector<long> shape) {
  Node n{OpKind::BroadcastScalar, s.id};
  n.aux_shape = std::move(shape);
  return push(std::move(n));
}

Var Graph::reshape(Var a, std::vector<long> shape) {
  Node n{OpKind::Reshape, a.id};
  n.aux_shape = std::move(shape);
  return push(std::move(n));
}

void Graph::compute(Node& n) const {
  auto val = [this](int id) -> const Tensor& { return nodes_[static_cast<size_t>(id)].value; };
  auto ew = [&](auto f) {
    const Tensor& a = val(n.a);
    Tensor out = a;
    for (double& x : out.v) x = f(x);
    n.value = std::move(out);
  };
  switch (n.op) {
    case OpKind::Leaf:
    case OpKind::Const:
      break;
    case OpKind::Add: {
      const Tensor &a = val(n.a), &b = val(n.b);
      require_same_shape(a, b, "add");
      Tensor out = a;
      for (long i = 0; i < out.size(); ++i) out.v[i] += b.v[i];
      n.value = std::move(out);
      break;
    }
    case OpKind::Sub: {
      const Tensor &a = val(n.a), &b = val(n.b);
      require_same_shape(a, b, "sub");
      Tensor out = a;
      for (long i = 0; i < out.size(); ++i) out.v[i] -= b.v[i];
      n.value = std::move(out);
      break;
    }
    case OpKind::Mul: {
      const Tensor &a = val(n.a), &b = val(n.b);
      require_same_shape(a, b, "mul");
      Tensor out = a;
      for (long i = 0; i < out.size(); ++i) out.v[i] *= b.v[i];
      n.value = std::move(out);
      break;
    }
    case OpKind::Div: {
      const Tensor &a = val(n.a), &b = val(n.b);
      require_same_shape(a, b, "div");
      Tensor out = a;
      for (long i = 0; i < out.size(); ++i) out.v[i] /= b.v[i];
      n.value = std::move(out);
      break;
    }
    case OpKind::Neg:
      ew([](double x) { return -x; });
      break;
    case OpKind::MatMul: {
      const Tensor &a = val(n.a), &b = val(n.b);
      if (a.shape.size() != 2 || b.shape.size() != 2 || a.shape[1] != b.shape[0])
        throw std::invalid_argument("matmul: incompatible shapes " + a.shape_str() + " x " +
                                    b.shape_str());
      long m = a.shape[0], k = a.shape[1], p = b.shape[1];
      Tensor out = Tensor::zeros({m, p});
      ConstMatMap ma(a.v.data(), m, k), mb(b.v.data(), k, p);
      MatMap mo(out.v.data(), m, p);
      mo.noalias() = ma * mb;
      n.value = std::move(out);
      break;
    }
    case OpKind::Transpose: {
      const Tensor& a = val(n.a);
      if (a.shape.size() != 2)
        throw std::invalid_argument("transpose: expects matrix, got " + a.shape_str());
      long m = a.shape[0], k = a.shape[1];
      Tensor out = Tensor::zeros({k, m});
      for (long i = 0; i < m; ++i)
        for (long j = 0; j < k; ++j) out.at(j, i) = a.at(i, j);
      n.value = std::move(out);
      break;
    }
    case OpKind::Relu:
      ew([](double x) { return x > 0 ? x : 0.0; });
      break;
    case OpKind::StepFn:
      ew([](double x) { return x > 0 ? 1.0 : 0.0; });
      break;
    case OpKind::Tanh:
      ew([](double x) { return std::tanh(x); });
      break;
    case OpKind::Exp:
      ew([](double x) { return std::exp(x); });
      break;
    case OpKind::Log:
      ew([](double x) { return std::log(x); });
      break;
    case OpKind::Square:
      ew([](double x) { return x * x; });
      break;
    case OpKind::Scale: {
      double c = n.c;
      ew([c](double x) { return c * x; });
      break;
    }
    case OpKind::Shift: {
      double c = n.c;
      ew([c](double x) { return x + c; });
      break;
    }
    case OpKind::Sum: {
      const Tensor& a = val(n.a);
      double s = 0.0;
      for (double x : a.v) s += x;
      n.value = Tensor::scalar(s);
      break;
    }
    case OpKind::Mean: {
      const Tensor& a = val(n.a);
      if (a.size() == 0) throw std::invalid_argument("mean: empty tensor");
      double s = 0.0;
      for (double x : a.v) s += x;
      n.value = Tensor::scalar(s / static_cast<double>(a.size()));
      break;
    }
    case OpKind::BroadcastRow: {
      const Tensor& a = val(n.a);
      if (a.shape.size() != 1)
        throw std::invalid_argument("broadcast_row: expects vector, got " + a.shape_str());
      long rows = n.aux_shape[0], d = a.shape[0];
      Tensor out = Tensor::zeros({rows, d});
      for (long i = 0; i < rows; ++i)
        for (long j = 0; j < d; ++j) out.at(i, j) = a.at(j);
      n.value = std::move(out);
      break;
    }
    case OpKind::ColSum: {
      const Tensor& a = val(n.a);
      if (a.shape.size() != 2)
        throw std::invalid_argument("col_sum: expects matrix, got " + a.shape_str());
      long m = a.shape[0], d = a.shape[1];
      Tensor out = Tensor::zeros({d});
      for (long i = 0; i < m; ++i)
        for (long j = 0; j < d; ++j) out.at(j) += a.at(i, j);
      n.value = std::move(out);
      break;
    }
    case OpKind::BroadcastScalar: {
      const Tensor& a = val(n.a);
      n.value = Tensor::full(n.aux_shape, a.item());
      break;
    }
    case OpKind::Reshape: {
      const Tensor& a = val(n.a);
      if (Tensor::numel(n.aux_shape) != a.size())
        throw std::invalid_argument("reshape: size mismatch from " + a.shape_str());
      Tensor out(n.aux_shape, a.v);
      n.value = std::move(out);
      break;
    }
    case OpKind::Detach:
      n.value = val(n.a);
      break;
  }
}

void Graph::set_value(Var v, const Tensor& t) {
  Node& n = nodes_[static_cast<size_t>(v.id)];
  if (n.op != OpKind::Leaf) throw std::invalid_argument("set_value: node is not a leaf");
  if (!n.value.same_shape(t))
    throw std::invalid_argument("set_value: shape mismatch " + n.value.shape_str() + " vs " +
                                t.shape_str());
  n.value = t;
  n.dirty = true;
  any_dirty_ = true;
}

void Graph::refresh() {
  if (!any_dirty_) return;
  std::vector<char> changed(nodes_.size(), 0);
  for (size_t i = 0; i < nodes_.size(); ++i) {
    Node& n = nodes_[i];
    if (n.op == OpKind::Leaf) {
      changed[i] = n.dirty ? 1 : 0;
      n.dirty = false;
      continue;
    }
    if (n.op == OpKind::Const) continue;
    bool in_changed = (n.a >= 0 && changed[static_cast<size_t>(n.a)]) ||
                      (n.b >= 0 && changed[static_cast<size_t>(n.b)]);
    if (in_changed) {
      compute(n);
      changed[i] = 1;
    }
  }
  any_dirty_ = false;
}

const Tensor& Graph::value(Var v) {
  refresh();
  return nodes_[static_cast<size_t>(v.id)].value;
}

const std::vector<long>& Graph::shape(Var v) const { return node(v).value.shape; }

bool Graph::is_leaf(Var v) const { return node(v).op == OpKind::Leaf; }

std::vector<Var> Graph::grad(Var scalar_node, std::span<const Var> wrt) {
  refresh();
  if (!node(scalar_node).value.shape.empty())
    throw std::invalid_argument("grad: node is not a scalar, shape " +
                                node(scalar_node).value.shape_str());

  const size_t n0 = nodes_.size();
  // Ancestors of the scalar.
  std::vector<char> anc(n0, 0);
  anc[static_cast<size_t>(scalar_node.id)] = 1;
  for (int i = scalar_node.id; i >= 0; --i) {
    if (!anc[static_cast<size_t>(i)]) continue;
    const Node& n = nodes_[static_cast<size_t>(i)];
    // Gradient does not flow past a detach or through a step function.
    if (n.op == OpKind::Detach || n.op == OpKind::StepFn) continue;
    if (n.a >= 0) anc[static_cast<size_t>(n.a)] = 1;
    if (n.b >= 0) anc[static_cast<size_t>(n.b)] = 1;
  }
  // Descendants of the wrt set (gradient only needs to flow where it can land).
  std::vector<char> desc(n0, 0);
  for (Var w : wrt) {
    if (w.id < 0 || static_cast<size_t>(w.id) >= n0)
      throw std::invalid_argument("grad: invalid wrt node");
    desc[static_cast<size_t>(w.id)] = 1;
  }
  for (size_t i = 0; i < n0; ++i) {
    const Node& n = nodes_[i];
    if (n.op == OpKind::Detach || n.op == OpKind::StepFn) continue;
    if ((n.a >= 0 && desc[static_cast<size_t>(n.a)]) ||
        (n.b >= 0 && desc[static_cast<size_t>(n.b)]))
      desc[i] = 1;
  }

  std::vector<Var> adj(n0, Var{});
  auto accumulate = [&](int id, Var g) {
    if (id < 0) return;
    size_t i = static_cast<size_t>(id);
    if (i >= n0 || !anc[i] || !desc[i]) return;
    adj[i] = adj[i].valid() ? add(adj[i], g) : g;
  };

  adj[static_cast<size_t>(scalar_node.id)] = constant(Tensor::scalar(1.0));

  for (int i = scalar_node.id; i >= 0; --i) {
    size_t idx = static_cast<size_t>(i);
    if (!adj[idx].valid()) continue;
    const Node n = nodes_[idx];  // copy: push() may reallocate nodes_
    Var g = adj[idx];
    Var A{n.a}, B{n.b};
    switch (n.op) {
      case OpKind::Leaf:
      case OpKind::Const:
      case OpKind::StepFn:
      case OpKind::Detach:
        break;
      case OpKind::Add:
        accumulate(n.a, g);
        accumulate(n.b, g);
        break;
      case OpKind::Sub:
        accumulate(n.a, g);
        accumulate(n.b, neg(g));
        break;
      case OpKind::Mul:
        accumulate(n.a, mul(g, B));
        accumulate(n.b, mul(g, A));
        break;
      case OpKind::Div:
        accumulate(n.a, div(g, B));
        accumulate(n.b, neg(div(mul(g, div(A, B)), B)));
        break;
      case OpKind::Neg:
        accumulate(n.a, neg(g));
        break;
      case OpKind::MatMul:
        accumulate(n.a, matmul(g, transpose(B)));
        accumulate(n.b, matmul(transpose(A), g));
        break;
      case OpKind::Transpose:
        accumulate(n.a, transpose(g));
        break;
      case OpKind::Relu:
        accumulate(n.a, mul(g, step_fn(A)));
        break;
      case OpKind::Tanh:
        accumulate(n.a, mul(g, shift(neg(square(Var{i})), 1.0)));
        break;
      case OpKind::Exp:
        accumulate(n.a, mul(g, Var{i}));
        break;
      case OpKind::Log:
        accumulate(n.a, div(g, A));
        break;
      case OpKind::Square:
        accumulate(n.a, scale(mul(g, A), 2.0));
        break;
      case OpKind::Scale:
        accumulate(n.a, scale(g, n.c));
        break;
      case OpKind::Shift:
        accumulate(n.a, g);
        break;
      case OpKind::Sum:
        accumulate(n.a, broadcast_scalar(g, nodes_[static_cast<size_t>(n.a)].value.shape));
        break;
      case OpKind::Mean: {
        const auto& ashape = nodes_[static_cast<size_t>(n.a)].value.shape;
        double inv = 1.0 / static_cast<double>(Tensor::numel(ashape));
        accumulate(n.a, scale(broadcast_scalar(g, ashape), inv));
        break;
      }
      case OpKind::BroadcastRow:
        accumulate(n.a, col_sum(g));
        break;
      case OpKind::ColSum:
        accumulate(n.a, broadcast_row(g, nodes_[static_cast<size_t>(n.a)].value.shape[0]));
        break;
      case OpKind::BroadcastScalar:
        accumulate(n.a, sum(g));
        break;
      case OpKind::Reshape:
        accumulate(n.a, reshape(g, nodes_[static_cast<size_t>(n.a)].value.shape));
        break;
    }
  }

  std::vector<Var> out;
  out.reserve(wrt.size());
  for (Var w : wrt) {
    Var a = adj[static_cast<size_t>(w.id)];
    out.push_back(a.valid() ? a : constant(Tensor::zeros(node(w).value.shape)));
  }
  return out;
}

}  // namespace maesn
