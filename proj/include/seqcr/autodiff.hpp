#pragma once

// Reverse-mode automatic differentiation over dense Tensors.
//
// A Tape records every operation in insertion order; insertion order is a
// valid topological order, so backward() is a single reverse sweep. A Tape
// must only be touched by one thread. Distinct tapes on distinct threads are
// fine.

#include <cstddef>
#include <cstdint>
#include <functional>
#include <random>
#include <span>
#include <string>
#include <unordered_map>
#include <vector>

#include "seqcr/tensor.hpp"

namespace seqcr {

using NodeId = std::uint32_t;

enum class OpKind {
  Leaf,
  Add,
  Sub,
  Mul,
  Div,
  Scale,
  Shift,
  Matmul,
  Exp,
  Log,
  Tanh,
  Sigmoid,
  Relu,
  Softmax,
  LogSoftmax,
  Sum,
  SumAxis,
  Mean,
  Concat,
  Slice,
  GatherRows,
  Pick,
  Max,
  L2Norm,
  Cosine,
  Reshape,
  StGumbel,
};

const char* op_name(OpKind op);

class Tape;

/// Handle to a node on a Tape.
class Var {
 public:
  Var() = default;
  Var(Tape* tape, NodeId id) : tape_(tape), id_(id) {}

  Tape& tape() const { return *tape_; }
  NodeId id() const { return id_; }
  bool valid() const { return tape_ != nullptr; }

  const Tensor& value() const;
  const Shape& shape() const { return value().shape(); }
  bool requires_grad() const;

 private:
  Tape* tape_ = nullptr;
  NodeId id_ = 0;
};

/// Gradients of a scalar with respect to every requires_grad leaf.
class Gradients {
 public:
  const Tensor& operator[](Var v) const { return at(v.id()); }
  const Tensor& at(NodeId id) const;
  bool contains(NodeId id) const { return by_node_.contains(id); }
  const std::unordered_map<NodeId, Tensor>& map() const { return by_node_; }

 private:
  friend class Tape;
  std::unordered_map<NodeId, Tensor> by_node_;
};

class Tape {
 public:
  using BackwardFn = std::function<void(Tape&, NodeId)>;

  Tape() = default;
  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;

  Var leaf(Tensor value, bool requires_grad = false);
  Var constant(Tensor value) { return leaf(std::move(value), false); }
  Var param(Tensor value) { return leaf(std::move(value), true); }

  /// Reverse sweep from a scalar. Resets any previous gradients first, so
  /// repeated calls give identical results.
  Gradients backward(Var loss);

  std::size_t size() const { return nodes_.size(); }
  OpKind op(NodeId id) const { return nodes_[id].op; }
  std::span<const NodeId> inputs(NodeId id) const { return nodes_[id].inputs; }
  const Tensor& value(NodeId id) const { return nodes_[id].value; }
  bool requires_grad(NodeId id) const { return nodes_[id].requires_grad; }
  /// Gradient from the most recent backward(), or nullptr.
  const Tensor* grad(NodeId id) const;

  // Used by op implementations.
  Var record(OpKind op, std::vector<NodeId> inputs, Tensor value,
             BackwardFn backward);
  const Tensor& out_grad(NodeId id) const { return nodes_[id].grad; }
  /// Gradient accumulator of `id`, zero-initialised on first use.
  Tensor& accum(NodeId id);

 private:
  struct Node {
    OpKind op = OpKind::Leaf;
    std::vector<NodeId> inputs;
    Tensor value;
    Tensor grad;
    bool requires_grad = false;
    bool has_grad = false;
    BackwardFn backward;
  };
  std::vector<Node> nodes_;
};

// ---- operation catalog -----------------------------------------------------
//
// Binary elementwise ops accept operands of equal rank where every dimension
// either matches or is 1 in one of them (numpy-style broadcast, same rank).

Var add(Var a, Var b);
Var sub(Var a, Var b);
Var mul(Var a, Var b);
Var div(Var a, Var b);
Var scale(Var a, double s);
Var shift(Var a, double c);
/// rank-2 [m,k]x[k,n], or batched rank-3 [b,m,k]x[b,k,n].
Var matmul(Var a, Var b);
Var exp(Var a);
/// Rejects non-positive inputs.
Var log(Var a);
Var tanh(Var a);
Var sigmoid(Var a);
/// relu'(0) = 0.
Var relu(Var a);
Var softmax(Var a, std::size_t axis);
Var log_softmax(Var a, std::size_t axis);
Var sum(Var a);
Var sum(Var a, std::size_t axis);
Var mean(Var a);
Var concat(std::span<const Var> parts, std::size_t axis);
Var slice(Var a, std::size_t axis, std::size_t begin, std::size_t end);
/// Rows of a rank-2 table; used for embedding lookup.
Var gather_rows(Var table, std::span<const std::size_t> ids);
/// out[b] = a[b, index[b]] for rank-2 `a`.
Var pick(Var a, std::span<const std::size_t> index);
/// Max along `axis`; ties go to the lowest index.
Var max(Var a, std::size_t axis);
Var l2_norm(Var a, std::size_t axis);
/// Cosine similarity along `axis`; norms are floored at 1e-12.
Var cosine_similarity(Var a, Var b, std::size_t axis);
Var reshape(Var a, Shape shape);
/// Same value, cut from the graph.
Var detach(Var a);

/// Straight-through Gumbel-Softmax along the last axis. Forward is the
/// one-hot argmax of (logits + noise) / temperature; backward is the
/// gradient of softmax((logits + noise) / temperature). `noise` has the
/// shape of `logits`.
Var st_gumbel(Var logits, double temperature, const Tensor& noise);

/// Gumbel(0,1) draws g = -log(-log(u)), u uniform on the open interval.
Tensor gumbel_noise(const Shape& shape, std::mt19937_64& rng);

// ---- finite-difference verification -----------------------------------------

struct GradCheckResult {
  double max_rel_error = 0.0;
  std::size_t worst_param = 0;
  std::size_t worst_index = 0;
  std::size_t coordinates_checked = 0;
  bool finite = true;
  std::string message;

  bool passed(double tolerance) const {
    return finite && max_rel_error < tolerance;
  }
};

/// |a-b| / max(1e-8, |a|+|b|)
double relative_error(double a, double b);

using ScalarFn = std::function<Var(Tape&, std::span<const Var>)>;

struct GradCheckOptions {
  double epsilon = 1e-5;
  /// Per-parameter cap on checked coordinates, 0 = all.
  std::size_t max_coords_per_param = 0;
  std::uint64_t seed = 0;
};

/// Compares reverse-mode gradients of `f` at `params` against central
/// differences. `params` are restored before return.
GradCheckResult grad_check(const ScalarFn& f, std::vector<Tensor>& params,
                           const GradCheckOptions& options = {});

}  // namespace seqcr
