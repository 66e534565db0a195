#include "seqcr/autodiff.hpp"

#include <Eigen/Dense>
#include <algorithm>
#include <cmath>
#include <limits>
#include <memory>
#include <numeric>
#include <stdexcept>

namespace seqcr {

namespace {

using RowMat =
    Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using ConstMap = Eigen::Map<const RowMat>;
using MutMap = Eigen::Map<RowMat>;

[[noreturn]] void shape_error(const char* op, const Shape& a, const Shape& b) {
  throw std::invalid_argument(std::string(op) + ": shape mismatch " +
                              to_string(a) + " vs " + to_string(b));
}

void check_same_tape(const char* op, Var a, Var b) {
  if (&a.tape() != &b.tape()) {
    throw std::invalid_argument(std::string(op) + ": operands on different tapes");
  }
}

void check_axis(const char* op, const Shape& s, std::size_t axis) {
  if (axis >= s.size()) {
    throw std::invalid_argument(std::string(op) + ": axis " +
                                std::to_string(axis) + " out of range for " +
                                to_string(s));
  }
}

// Decomposition of a shape around one axis: index = (o * n + i) * inner + k.
struct AxisView {
  std::size_t outer = 1, n = 1, inner = 1;
  AxisView(const Shape& s, std::size_t axis) {
    for (std::size_t d = 0; d < axis; ++d) outer *= s[d];
    n = s[axis];
    for (std::size_t d = axis + 1; d < s.size(); ++d) inner *= s[d];
  }
  std::size_t at(std::size_t o, std::size_t i, std::size_t k) const {
    return (o * n + i) * inner + k;
  }
};

Shape drop_axis(const Shape& s, std::size_t axis) {
  Shape out = s;
  out.erase(out.begin() + static_cast<std::ptrdiff_t>(axis));
  return out;
}

// Same-rank broadcast plan: per-axis element strides of each operand in the
// output index space (0 on broadcast axes).
struct Broadcast {
  Shape out;
  std::vector<std::size_t> sa, sb;
  bool trivial = true;
};

Broadcast plan_broadcast(const char* op, const Shape& a, const Shape& b) {
  Broadcast plan;
  if (a == b) {
    plan.out = a;
    return plan;
  }
  if (a.size() != b.size()) shape_error(op, a, b);
  plan.trivial = false;
  const std::size_t rank = a.size();
  plan.out.resize(rank);
  for (std::size_t d = 0; d < rank; ++d) {
    if (a[d] == b[d] || b[d] == 1) {
      plan.out[d] = a[d];
    } else if (a[d] == 1) {
      plan.out[d] = b[d];
    } else {
      shape_error(op, a, b);
    }
  }
  plan.sa.resize(rank);
  plan.sb.resize(rank);
  std::size_t acc_a = 1, acc_b = 1;
  for (std::size_t d = rank; d-- > 0;) {
    plan.sa[d] = a[d] == 1 ? 0 : acc_a;
    plan.sb[d] = b[d] == 1 ? 0 : acc_b;
    acc_a *= a[d];
    acc_b *= b[d];
  }
  return plan;
}

// Calls fn(k, ia, ib) for every output element k in row-major order.
template <typename F>
void for_each_pair(const Broadcast& plan, F&& fn) {
  const std::size_t total = numel(plan.out);
  if (plan.trivial) {
    for (std::size_t k = 0; k < total; ++k) fn(k, k, k);
    return;
  }
  if (total == 0) return;
  const std::size_t rank = plan.out.size();
  const std::size_t last = rank - 1;
  const std::size_t n = plan.out[last];
  const std::size_t da = plan.sa[last], db = plan.sb[last];
  std::vector<std::size_t> idx(rank, 0);
  std::size_t oa = 0, ob = 0;
  for (std::size_t k = 0; k < total; k += n) {
    for (std::size_t i = 0; i < n; ++i) fn(k + i, oa + i * da, ob + i * db);
    for (std::size_t d = last; d-- > 0;) {
      oa += plan.sa[d];
      ob += plan.sb[d];
      if (++idx[d] < plan.out[d]) break;
      oa -= plan.sa[d] * idx[d];
      ob -= plan.sb[d] * idx[d];
      idx[d] = 0;
    }
  }
}

enum class Bin { Add, Sub, Mul, Div };

Var binary(Bin kind, OpKind op, const char* name, Var a, Var b) {
  check_same_tape(name, a, b);
  Tape& tape = a.tape();
  auto plan = std::make_shared<Broadcast>(plan_broadcast(name, a.shape(), b.shape()));
  const Tensor& av = a.value();
  const Tensor& bv = b.value();
  Tensor out(plan->out);
  switch (kind) {
    case Bin::Add:
      for_each_pair(*plan, [&](std::size_t k, std::size_t i, std::size_t j) { out[k] = av[i] + bv[j]; });
      break;
    case Bin::Sub:
      for_each_pair(*plan, [&](std::size_t k, std::size_t i, std::size_t j) { out[k] = av[i] - bv[j]; });
      break;
    case Bin::Mul:
      for_each_pair(*plan, [&](std::size_t k, std::size_t i, std::size_t j) { out[k] = av[i] * bv[j]; });
      break;
    case Bin::Div:
      for_each_pair(*plan, [&](std::size_t k, std::size_t i, std::size_t j) { out[k] = av[i] / bv[j]; });
      break;
  }
  const NodeId ida = a.id(), idb = b.id();
  return tape.record(op, {ida, idb}, std::move(out),
                     [kind, plan, ida, idb](Tape& t, NodeId self) {
    const Tensor& g = t.out_grad(self);
    const Tensor& x = t.value(ida);
    const Tensor& y = t.value(idb);
    if (t.requires_grad(ida)) {
      Tensor& ga = t.accum(ida);
      switch (kind) {
        case Bin::Add:
        case Bin::Sub:
          for_each_pair(*plan, [&](std::size_t k, std::size_t i, std::size_t) { ga[i] += g[k]; });
          break;
        case Bin::Mul:
          for_each_pair(*plan, [&](std::size_t k, std::size_t i, std::size_t j) { ga[i] += g[k] * y[j]; });
          break;
        case Bin::Div:
          for_each_pair(*plan, [&](std::size_t k, std::size_t i, std::size_t j) { ga[i] += g[k] / y[j]; });
          break;
      }
    }
    if (t.requires_grad(idb)) {
      Tensor& gb = t.accum(idb);
      switch (kind) {
        case Bin::Add:
          for_each_pair(*plan, [&](std::size_t k, std::size_t, std::size_t j) { gb[j] += g[k]; });
          break;
        case Bin::Sub:
          for_each_pair(*plan, [&](std::size_t k, std::size_t, std::size_t j) { gb[j] -= g[k]; });
          break;
        case Bin::Mul:
          for_each_pair(*plan, [&](std::size_t k, std::size_t i, std::size_t j) { gb[j] += g[k] * x[i]; });
          break;
        case Bin::Div:
          for_each_pair(*plan, [&](std::size_t k, std::size_t i, std::size_t j) {
            gb[j] -= g[k] * x[i] / (y[j] * y[j]);
          });
          break;
      }
    }
  });
}

// Elementwise unary op; `deriv(x, y)` returns dy/dx.
template <typename F, typename D>
Var unary(OpKind op, Var a, F forward, D deriv) {
  const Tensor& av = a.value();
  Tensor out(av.shape());
  for (std::size_t k = 0; k < av.size(); ++k) out[k] = forward(av[k]);
  const NodeId ida = a.id();
  return a.tape().record(op, {ida}, std::move(out),
                         [ida, deriv](Tape& t, NodeId self) {
    const Tensor& g = t.out_grad(self);
    const Tensor& x = t.value(ida);
    const Tensor& y = t.value(self);
    Tensor& ga = t.accum(ida);
    for (std::size_t k = 0; k < g.size(); ++k) ga[k] += g[k] * deriv(x[k], y[k]);
  });
}

void softmax_rows(const Tensor& x, Tensor& y, const AxisView& v) {
  for (std::size_t o = 0; o < v.outer; ++o) {
    for (std::size_t k = 0; k < v.inner; ++k) {
      double m = -std::numeric_limits<double>::infinity();
      for (std::size_t i = 0; i < v.n; ++i) m = std::max(m, x[v.at(o, i, k)]);
      double s = 0.0;
      for (std::size_t i = 0; i < v.n; ++i) {
        const double e = std::exp(x[v.at(o, i, k)] - m);
        y[v.at(o, i, k)] = e;
        s += e;
      }
      for (std::size_t i = 0; i < v.n; ++i) y[v.at(o, i, k)] /= s;
    }
  }
}

}  // namespace

const char* op_name(OpKind op) {
  switch (op) {
    case OpKind::Leaf: return "leaf";
    case OpKind::Add: return "add";
    case OpKind::Sub: return "sub";
    case OpKind::Mul: return "mul";
    case OpKind::Div: return "div";
    case OpKind::Scale: return "scale";
    case OpKind::Shift: return "shift";
    case OpKind::Matmul: return "matmul";
    case OpKind::Exp: return "exp";
    case OpKind::Log: return "log";
    case OpKind::Tanh: return "tanh";
    case OpKind::Sigmoid: return "sigmoid";
    case OpKind::Relu: return "relu";
    case OpKind::Softmax: return "softmax";
    case OpKind::LogSoftmax: return "log_softmax";
    case OpKind::Sum: return "sum";
    case OpKind::SumAxis: return "sum_axis";
    case OpKind::Mean: return "mean";
    case OpKind::Concat: return "concat";
    case OpKind::Slice: return "slice";
    case OpKind::GatherRows: return "gather_rows";
    case OpKind::Pick: return "pick";
    case OpKind::Max: return "max";
    case OpKind::L2Norm: return "l2_norm";
    case OpKind::Cosine: return "cosine_similarity";
    case OpKind::Reshape: return "reshape";
    case OpKind::StGumbel: return "st_gumbel";
  }
  return "?";
}

// ---- Var / Gradients / Tape ---------------------------------------------------

const Tensor& Var::value() const { return tape_->value(id_); }
bool Var::requires_grad() const { return tape_->requires_grad(id_); }

const Tensor& Gradients::at(NodeId id) const {
  auto it = by_node_.find(id);
  if (it == by_node_.end()) {
    throw std::out_of_range("gradients: node " + std::to_string(id) +
                            " is not a requires_grad leaf");
  }
  return it->second;
}

Var Tape::leaf(Tensor value, bool requires_grad) {
  Node node;
  node.op = OpKind::Leaf;
  node.value = std::move(value);
  node.requires_grad = requires_grad;
  nodes_.push_back(std::move(node));
  return Var(this, static_cast<NodeId>(nodes_.size() - 1));
}

Var Tape::record(OpKind op, std::vector<NodeId> inputs, Tensor value,
                 BackwardFn backward) {
  Node node;
  node.op = op;
  node.requires_grad = std::any_of(inputs.begin(), inputs.end(),
                                   [&](NodeId i) { return nodes_[i].requires_grad; });
  node.inputs = std::move(inputs);
  node.value = std::move(value);
  if (node.requires_grad) node.backward = std::move(backward);
  nodes_.push_back(std::move(node));
  return Var(this, static_cast<NodeId>(nodes_.size() - 1));
}

Tensor& Tape::accum(NodeId id) {
  Node& n = nodes_[id];
  if (!n.has_grad) {
    n.grad = Tensor(n.value.shape(), 0.0);
    n.has_grad = true;
  }
  return n.grad;
}

const Tensor* Tape::grad(NodeId id) const {
  return nodes_[id].has_grad ? &nodes_[id].grad : nullptr;
}

Gradients Tape::backward(Var loss) {
  if (&loss.tape() != this) {
    throw std::invalid_argument("backward: loss belongs to another tape");
  }
  if (loss.value().size() != 1) {
    throw std::invalid_argument("backward: loss must be scalar, got shape " +
                                to_string(loss.shape()));
  }
  for (auto& n : nodes_) {
    n.has_grad = false;
    n.grad = Tensor();
  }
  accum(loss.id())[0] = 1.0;
  for (NodeId i = loss.id() + 1; i-- > 0;) {
    Node& n = nodes_[i];
    if (n.has_grad && n.backward) n.backward(*this, i);
  }
  Gradients out;
  for (NodeId i = 0; i < nodes_.size(); ++i) {
    const Node& n = nodes_[i];
    if (n.op != OpKind::Leaf || !n.requires_grad) continue;
    out.by_node_.emplace(i, n.has_grad ? n.grad : Tensor(n.value.shape(), 0.0));
  }
  return out;
}

// ---- ops ----------------------------------------------------------------------

Var add(Var a, Var b) { return binary(Bin::Add, OpKind::Add, "add", a, b); }
Var sub(Var a, Var b) { return binary(Bin::Sub, OpKind::Sub, "sub", a, b); }
Var mul(Var a, Var b) { return binary(Bin::Mul, OpKind::Mul, "mul", a, b); }
Var div(Var a, Var b) { return binary(Bin::Div, OpKind::Div, "div", a, b); }

Var scale(Var a, double s) {
  return unary(OpKind::Scale, a, [s](double x) { return s * x; },
               [s](double, double) { return s; });
}

Var shift(Var a, double c) {
  return unary(OpKind::Shift, a, [c](double x) { return x + c; },
               [](double, double) { return 1.0; });
}

Var matmul(Var a, Var b) {
  check_same_tape("matmul", a, b);
  const Shape& sa = a.shape();
  const Shape& sb = b.shape();
  std::size_t batch = 1, m = 0, k = 0, n = 0;
  Shape out_shape;
  if (sa.size() == 2 && sb.size() == 2 && sa[1] == sb[0]) {
    m = sa[0], k = sa[1], n = sb[1];
    out_shape = {m, n};
  } else if (sa.size() == 3 && sb.size() == 3 && sa[0] == sb[0] &&
             sa[2] == sb[1]) {
    batch = sa[0], m = sa[1], k = sa[2], n = sb[2];
    out_shape = {batch, m, n};
  } else {
    shape_error("matmul", sa, sb);
  }
  Tensor out(out_shape);
  const double* ad = a.value().data().data();
  const double* bd = b.value().data().data();
  double* od = out.data().data();
  for (std::size_t i = 0; i < batch; ++i) {
    MutMap(od + i * m * n, m, n).noalias() =
        ConstMap(ad + i * m * k, m, k) * ConstMap(bd + i * k * n, k, n);
  }
  const NodeId ida = a.id(), idb = b.id();
  return a.tape().record(OpKind::Matmul, {ida, idb}, std::move(out),
                         [=](Tape& t, NodeId self) {
    const double* g = t.out_grad(self).data().data();
    const double* x = t.value(ida).data().data();
    const double* y = t.value(idb).data().data();
    if (t.requires_grad(ida)) {
      double* gx = t.accum(ida).data().data();
      for (std::size_t i = 0; i < batch; ++i) {
        MutMap(gx + i * m * k, m, k).noalias() +=
            ConstMap(g + i * m * n, m, n) *
            ConstMap(y + i * k * n, k, n).transpose();
      }
    }
    if (t.requires_grad(idb)) {
      double* gy = t.accum(idb).data().data();
      for (std::size_t i = 0; i < batch; ++i) {
        MutMap(gy + i * k * n, k, n).noalias() +=
            ConstMap(x + i * m * k, m, k).transpose() *
            ConstMap(g + i * m * n, m, n);
      }
    }
  });
}

Var exp(Var a) {
  return unary(OpKind::Exp, a, [](double x) { return std::exp(x); },
               [](double, double y) { return y; });
}

Var log(Var a) {
  for (double x : a.value().data()) {
    if (!(x > 0.0)) {
      throw std::domain_error("log: non-positive input " + std::to_string(x) +
                              " in shape " + to_string(a.shape()));
    }
  }
  return unary(OpKind::Log, a, [](double x) { return std::log(x); },
               [](double x, double) { return 1.0 / x; });
}

Var tanh(Var a) {
  return unary(OpKind::Tanh, a, [](double x) { return std::tanh(x); },
               [](double, double y) { return 1.0 - y * y; });
}

Var sigmoid(Var a) {
  return unary(OpKind::Sigmoid, a,
               [](double x) { return 1.0 / (1.0 + std::exp(-x)); },
               [](double, double y) { return y * (1.0 - y); });
}

Var relu(Var a) {
  return unary(OpKind::Relu, a, [](double x) { return x > 0.0 ? x : 0.0; },
               [](double x, double) { return x > 0.0 ? 1.0 : 0.0; });
}

Var softmax(Var a, std::size_t axis) {
  check_axis("softmax", a.shape(), axis);
  const AxisView v(a.shape(), axis);
  Tensor out(a.shape());
  softmax_rows(a.value(), out, v);
  const NodeId ida = a.id();
  return a.tape().record(OpKind::Softmax, {ida}, std::move(out),
                         [ida, v](Tape& t, NodeId self) {
    const Tensor& g = t.out_grad(self);
    const Tensor& y = t.value(self);
    Tensor& ga = t.accum(ida);
    for (std::size_t o = 0; o < v.outer; ++o) {
      for (std::size_t k = 0; k < v.inner; ++k) {
        double s = 0.0;
        for (std::size_t i = 0; i < v.n; ++i) {
          s += g[v.at(o, i, k)] * y[v.at(o, i, k)];
        }
        for (std::size_t i = 0; i < v.n; ++i) {
          const std::size_t j = v.at(o, i, k);
          ga[j] += y[j] * (g[j] - s);
        }
      }
    }
  });
}

Var log_softmax(Var a, std::size_t axis) {
  check_axis("log_softmax", a.shape(), axis);
  const AxisView v(a.shape(), axis);
  const Tensor& x = a.value();
  Tensor out(a.shape());
  for (std::size_t o = 0; o < v.outer; ++o) {
    for (std::size_t k = 0; k < v.inner; ++k) {
      double m = -std::numeric_limits<double>::infinity();
      for (std::size_t i = 0; i < v.n; ++i) m = std::max(m, x[v.at(o, i, k)]);
      double s = 0.0;
      for (std::size_t i = 0; i < v.n; ++i) s += std::exp(x[v.at(o, i, k)] - m);
      const double lse = m + std::log(s);
      for (std::size_t i = 0; i < v.n; ++i) {
        out[v.at(o, i, k)] = x[v.at(o, i, k)] - lse;
      }
    }
  }
  const NodeId ida = a.id();
  return a.tape().record(OpKind::LogSoftmax, {ida}, std::move(out),
                         [ida, v](Tape& t, NodeId self) {
    const Tensor& g = t.out_grad(self);
    const Tensor& y = t.value(self);
    Tensor& ga = t.accum(ida);
    for (std::size_t o = 0; o < v.outer; ++o) {
      for (std::size_t k = 0; k < v.inner; ++k) {
        double s = 0.0;
        for (std::size_t i = 0; i < v.n; ++i) s += g[v.at(o, i, k)];
        for (std::size_t i = 0; i < v.n; ++i) {
          const std::size_t j = v.at(o, i, k);
          ga[j] += g[j] - std::exp(y[j]) * s;
        }
      }
    }
  });
}

Var sum(Var a) {
  const Tensor& x = a.value();
  const double s = std::accumulate(x.data().begin(), x.data().end(), 0.0);
  const NodeId ida = a.id();
  return a.tape().record(OpKind::Sum, {ida}, Tensor::scalar(s),
                         [ida](Tape& t, NodeId self) {
    const double g = t.out_grad(self)[0];
    for (double& v : t.accum(ida).data()) v += g;
  });
}

Var sum(Var a, std::size_t axis) {
  check_axis("sum", a.shape(), axis);
  const AxisView v(a.shape(), axis);
  const Tensor& x = a.value();
  Tensor out(drop_axis(a.shape(), axis));
  for (std::size_t o = 0; o < v.outer; ++o) {
    for (std::size_t i = 0; i < v.n; ++i) {
      for (std::size_t k = 0; k < v.inner; ++k) {
        out[o * v.inner + k] += x[v.at(o, i, k)];
      }
    }
  }
  const NodeId ida = a.id();
  return a.tape().record(OpKind::SumAxis, {ida}, std::move(out),
                         [ida, v](Tape& t, NodeId self) {
    const Tensor& g = t.out_grad(self);
    Tensor& ga = t.accum(ida);
    for (std::size_t o = 0; o < v.outer; ++o) {
      for (std::size_t i = 0; i < v.n; ++i) {
        for (std::size_t k = 0; k < v.inner; ++k) {
          ga[v.at(o, i, k)] += g[o * v.inner + k];
        }
      }
    }
  });
}

Var mean(Var a) {
  const Tensor& x = a.value();
  const double n = static_cast<double>(x.size());
  const double s = std::accumulate(x.data().begin(), x.data().end(), 0.0) / n;
  const NodeId ida = a.id();
  return a.tape().record(OpKind::Mean, {ida}, Tensor::scalar(s),
                         [ida, n](Tape& t, NodeId self) {
    const double g = t.out_grad(self)[0] / n;
    for (double& v : t.accum(ida).data()) v += g;
  });
}

Var concat(std::span<const Var> parts, std::size_t axis) {
  if (parts.empty()) throw std::invalid_argument("concat: no inputs");
  const Shape& first = parts[0].shape();
  check_axis("concat", first, axis);
  Shape out_shape = first;
  out_shape[axis] = 0;
  std::vector<NodeId> ids;
  std::vector<std::size_t> widths;
  for (const Var& p : parts) {
    check_same_tape("concat", parts[0], p);
    const Shape& s = p.shape();
    if (s.size() != first.size()) shape_error("concat", first, s);
    for (std::size_t d = 0; d < s.size(); ++d) {
      if (d != axis && s[d] != first[d]) shape_error("concat", first, s);
    }
    out_shape[axis] += s[axis];
    ids.push_back(p.id());
    widths.push_back(s[axis]);
  }
  const AxisView ov(out_shape, axis);
  Tensor out(out_shape);
  std::size_t offset = 0;
  for (std::size_t p = 0; p < parts.size(); ++p) {
    const Tensor& x = parts[p].value();
    const AxisView pv(x.shape(), axis);
    for (std::size_t o = 0; o < pv.outer; ++o) {
      for (std::size_t i = 0; i < pv.n; ++i) {
        for (std::size_t k = 0; k < pv.inner; ++k) {
          out[ov.at(o, offset + i, k)] = x[pv.at(o, i, k)];
        }
      }
    }
    offset += widths[p];
  }
  return parts[0].tape().record(OpKind::Concat, ids, std::move(out),
                                [ids, widths, ov](Tape& t, NodeId self) {
    const Tensor& g = t.out_grad(self);
    std::size_t offset = 0;
    for (std::size_t p = 0; p < ids.size(); ++p) {
      if (t.requires_grad(ids[p])) {
        Tensor& gp = t.accum(ids[p]);
        for (std::size_t o = 0; o < ov.outer; ++o) {
          for (std::size_t i = 0; i < widths[p]; ++i) {
            for (std::size_t k = 0; k < ov.inner; ++k) {
              gp[(o * widths[p] + i) * ov.inner + k] +=
                  g[ov.at(o, offset + i, k)];
            }
          }
        }
      }
      offset += widths[p];
    }
  });
}

Var slice(Var a, std::size_t axis, std::size_t begin, std::size_t end) {
  check_axis("slice", a.shape(), axis);
  if (begin >= end || end > a.shape()[axis]) {
    throw std::invalid_argument("slice: range [" + std::to_string(begin) + "," +
                                std::to_string(end) + ") invalid for " +
                                to_string(a.shape()));
  }
  const AxisView iv(a.shape(), axis);
  Shape out_shape = a.shape();
  out_shape[axis] = end - begin;
  const std::size_t w = end - begin;
  const Tensor& x = a.value();
  Tensor out(out_shape);
  for (std::size_t o = 0; o < iv.outer; ++o) {
    for (std::size_t i = 0; i < w; ++i) {
      for (std::size_t k = 0; k < iv.inner; ++k) {
        out[(o * w + i) * iv.inner + k] = x[iv.at(o, begin + i, k)];
      }
    }
  }
  const NodeId ida = a.id();
  return a.tape().record(OpKind::Slice, {ida}, std::move(out),
                         [ida, iv, begin, w](Tape& t, NodeId self) {
    const Tensor& g = t.out_grad(self);
    Tensor& ga = t.accum(ida);
    for (std::size_t o = 0; o < iv.outer; ++o) {
      for (std::size_t i = 0; i < w; ++i) {
        for (std::size_t k = 0; k < iv.inner; ++k) {
          ga[iv.at(o, begin + i, k)] += g[(o * w + i) * iv.inner + k];
        }
      }
    }
  });
}

Var gather_rows(Var table, std::span<const std::size_t> ids) {
  const Shape& s = table.shape();
  if (s.size() != 2) {
    throw std::invalid_argument("gather_rows: table must be rank 2, got " +
                                to_string(s));
  }
  if (ids.empty()) throw std::invalid_argument("gather_rows: no indices");
  const std::size_t d = s[1];
  Tensor out(Shape{ids.size(), d});
  for (std::size_t r = 0; r < ids.size(); ++r) {
    if (ids[r] >= s[0]) {
      throw std::out_of_range("gather_rows: index " + std::to_string(ids[r]) +
                              " out of range for " + to_string(s));
    }
    std::copy_n(table.value().data().begin() + ids[r] * d, d,
                out.data().begin() + r * d);
  }
  std::vector<std::size_t> rows(ids.begin(), ids.end());
  const NodeId idt = table.id();
  return table.tape().record(OpKind::GatherRows, {idt}, std::move(out),
                             [idt, rows, d](Tape& t, NodeId self) {
    const Tensor& g = t.out_grad(self);
    Tensor& gt = t.accum(idt);
    for (std::size_t r = 0; r < rows.size(); ++r) {
      for (std::size_t c = 0; c < d; ++c) gt[rows[r] * d + c] += g[r * d + c];
    }
  });
}

Var pick(Var a, std::span<const std::size_t> index) {
  const Shape& s = a.shape();
  if (s.size() != 2 || index.size() != s[0]) {
    throw std::invalid_argument("pick: expected rank-2 input with " +
                                std::to_string(index.size()) + " rows, got " +
                                to_string(s));
  }
  Tensor out(Shape{s[0]});
  for (std::size_t r = 0; r < s[0]; ++r) {
    if (index[r] >= s[1]) {
      throw std::out_of_range("pick: column " + std::to_string(index[r]) +
                              " out of range for " + to_string(s));
    }
    out[r] = a.value().at(r, index[r]);
  }
  std::vector<std::size_t> cols(index.begin(), index.end());
  const NodeId ida = a.id();
  const std::size_t width = s[1];
  return a.tape().record(OpKind::Pick, {ida}, std::move(out),
                         [ida, cols, width](Tape& t, NodeId self) {
    const Tensor& g = t.out_grad(self);
    Tensor& ga = t.accum(ida);
    for (std::size_t r = 0; r < cols.size(); ++r) ga[r * width + cols[r]] += g[r];
  });
}

Var max(Var a, std::size_t axis) {
  check_axis("max", a.shape(), axis);
  const AxisView v(a.shape(), axis);
  const Tensor& x = a.value();
  Tensor out(drop_axis(a.shape(), axis));
  std::vector<std::size_t> arg(out.size());
  for (std::size_t o = 0; o < v.outer; ++o) {
    for (std::size_t k = 0; k < v.inner; ++k) {
      std::size_t best = 0;
      for (std::size_t i = 1; i < v.n; ++i) {
        if (x[v.at(o, i, k)] > x[v.at(o, best, k)]) best = i;
      }
      out[o * v.inner + k] = x[v.at(o, best, k)];
      arg[o * v.inner + k] = v.at(o, best, k);
    }
  }
  const NodeId ida = a.id();
  return a.tape().record(OpKind::Max, {ida}, std::move(out),
                         [ida, arg](Tape& t, NodeId self) {
    const Tensor& g = t.out_grad(self);
    Tensor& ga = t.accum(ida);
    for (std::size_t j = 0; j < arg.size(); ++j) ga[arg[j]] += g[j];
  });
}

Var l2_norm(Var a, std::size_t axis) {
  check_axis("l2_norm", a.shape(), axis);
  const AxisView v(a.shape(), axis);
  const Tensor& x = a.value();
  Tensor out(drop_axis(a.shape(), axis));
  for (std::size_t o = 0; o < v.outer; ++o) {
    for (std::size_t k = 0; k < v.inner; ++k) {
      double s = 0.0;
      for (std::size_t i = 0; i < v.n; ++i) s += x[v.at(o, i, k)] * x[v.at(o, i, k)];
      out[o * v.inner + k] = std::sqrt(s);
    }
  }
  const NodeId ida = a.id();
  return a.tape().record(OpKind::L2Norm, {ida}, std::move(out),
                         [ida, v](Tape& t, NodeId self) {
    const Tensor& g = t.out_grad(self);
    const Tensor& y = t.value(self);
    const Tensor& x = t.value(ida);
    Tensor& ga = t.accum(ida);
    for (std::size_t o = 0; o < v.outer; ++o) {
      for (std::size_t k = 0; k < v.inner; ++k) {
        const double norm = y[o * v.inner + k];
        if (norm == 0.0) continue;
        const double gn = g[o * v.inner + k] / norm;
        for (std::size_t i = 0; i < v.n; ++i) ga[v.at(o, i, k)] += gn * x[v.at(o, i, k)];
      }
    }
  });
}

Var cosine_similarity(Var a, Var b, std::size_t axis) {
  check_same_tape("cosine_similarity", a, b);
  if (a.shape() != b.shape()) shape_error("cosine_similarity", a.shape(), b.shape());
  check_axis("cosine_similarity", a.shape(), axis);
  constexpr double kFloor = 1e-12;
  const AxisView v(a.shape(), axis);
  const Tensor& x = a.value();
  const Tensor& y = b.value();
  Tensor out(drop_axis(a.shape(), axis));
  // per output: raw norms of a and b
  std::vector<double> na(out.size()), nb(out.size());
  for (std::size_t o = 0; o < v.outer; ++o) {
    for (std::size_t k = 0; k < v.inner; ++k) {
      double xy = 0, xx = 0, yy = 0;
      for (std::size_t i = 0; i < v.n; ++i) {
        const double p = x[v.at(o, i, k)], q = y[v.at(o, i, k)];
        xy += p * q;
        xx += p * p;
        yy += q * q;
      }
      const std::size_t j = o * v.inner + k;
      na[j] = std::sqrt(xx);
      nb[j] = std::sqrt(yy);
      out[j] = xy / (std::max(na[j], kFloor) * std::max(nb[j], kFloor));
    }
  }
  const NodeId ida = a.id(), idb = b.id();
  return a.tape().record(OpKind::Cosine, {ida, idb}, std::move(out),
                         [=](Tape& t, NodeId self) {
    const Tensor& g = t.out_grad(self);
    const Tensor& c = t.value(self);
    const Tensor& x = t.value(ida);
    const Tensor& y = t.value(idb);
    const bool wa = t.requires_grad(ida), wb = t.requires_grad(idb);
    Tensor* ga = wa ? &t.accum(ida) : nullptr;
    Tensor* gb = wb ? &t.accum(idb) : nullptr;
    for (std::size_t o = 0; o < v.outer; ++o) {
      for (std::size_t k = 0; k < v.inner; ++k) {
        const std::size_t j = o * v.inner + k;
        const double da = std::max(na[j], kFloor), db = std::max(nb[j], kFloor);
        // d/da of a.b/(|a||b|) = b/(|a||b|) - c a/|a|^2 (second term only
        // while the norm is above its floor)
        const double ca = na[j] > kFloor ? c[j] / (da * da) : 0.0;
        const double cb = nb[j] > kFloor ? c[j] / (db * db) : 0.0;
        for (std::size_t i = 0; i < v.n; ++i) {
          const std::size_t e = v.at(o, i, k);
          if (ga) (*ga)[e] += g[j] * (y[e] / (da * db) - ca * x[e]);
          if (gb) (*gb)[e] += g[j] * (x[e] / (da * db) - cb * y[e]);
        }
      }
    }
  });
}

Var reshape(Var a, Shape shape) {
  if (numel(shape) != a.value().size()) shape_error("reshape", a.shape(), shape);
  const NodeId ida = a.id();
  return a.tape().record(OpKind::Reshape, {ida}, a.value().reshaped(std::move(shape)),
                         [ida](Tape& t, NodeId self) {
    const Tensor& g = t.out_grad(self);
    Tensor& ga = t.accum(ida);
    for (std::size_t k = 0; k < g.size(); ++k) ga[k] += g[k];
  });
}

Var detach(Var a) { return a.tape().constant(a.value()); }

Var st_gumbel(Var logits, double temperature, const Tensor& noise) {
  if (!(temperature > 0.0)) {
    throw std::invalid_argument("st_gumbel: temperature must be positive, got " +
                                std::to_string(temperature));
  }
  const Shape& s = logits.shape();
  if (s.empty()) throw std::invalid_argument("st_gumbel: scalar logits");
  if (noise.shape() != s) shape_error("st_gumbel", s, noise.shape());
  const std::size_t axis = s.size() - 1;
  const AxisView v(s, axis);
  const Tensor& x = logits.value();
  Tensor perturbed(s);
  for (std::size_t k = 0; k < x.size(); ++k) {
    perturbed[k] = (x[k] + noise[k]) / temperature;
  }
  auto soft = std::make_shared<Tensor>(s);
  softmax_rows(perturbed, *soft, v);
  Tensor hard(s, 0.0);
  for (std::size_t o = 0; o < v.outer; ++o) {
    std::size_t best = 0;
    for (std::size_t i = 1; i < v.n; ++i) {
      if (perturbed[v.at(o, i, 0)] > perturbed[v.at(o, best, 0)]) best = i;
    }
    hard[v.at(o, best, 0)] = 1.0;
  }
  const NodeId ida = logits.id();
  return logits.tape().record(OpKind::StGumbel, {ida}, std::move(hard),
                              [ida, v, soft, temperature](Tape& t, NodeId self) {
    const Tensor& g = t.out_grad(self);
    const Tensor& y = *soft;
    Tensor& ga = t.accum(ida);
    for (std::size_t o = 0; o < v.outer; ++o) {
      double s = 0.0;
      for (std::size_t i = 0; i < v.n; ++i) s += g[v.at(o, i, 0)] * y[v.at(o, i, 0)];
      for (std::size_t i = 0; i < v.n; ++i) {
        const std::size_t j = v.at(o, i, 0);
        ga[j] += y[j] * (g[j] - s) / temperature;
      }
    }
  });
}

Tensor gumbel_noise(const Shape& shape, std::mt19937_64& rng) {
  Tensor out(shape);
  for (double& g : out.data()) {
    // (k + 0.5) / 2^53 lies strictly inside (0, 1)
    const double u = (static_cast<double>(rng() >> 11) + 0.5) * 0x1.0p-53;
    g = -std::log(-std::log(u));
  }
  return out;
}

// ---- grad_check ----------------------------------------------------------------

double relative_error(double a, double b) {
  return std::abs(a - b) / std::max(1e-8, std::abs(a) + std::abs(b));
}

GradCheckResult grad_check(const ScalarFn& f, std::vector<Tensor>& params,
                           const GradCheckOptions& options) {
  if (!(options.epsilon > 0.0)) {
    throw std::invalid_argument("grad_check: epsilon must be positive");
  }
  GradCheckResult result;
  auto evaluate = [&]() {
    Tape tape;
    std::vector<Var> vars;
    for (const auto& p : params) vars.push_back(tape.constant(p));
    return f(tape, vars).value().item();
  };

  std::vector<Tensor> analytic;
  {
    Tape tape;
    std::vector<Var> vars;
    for (const auto& p : params) vars.push_back(tape.param(p));
    Var loss = f(tape, vars);
    if (!std::isfinite(loss.value().item())) {
      result.finite = false;
      result.message = "non-finite forward value at unperturbed point";
      return result;
    }
    Gradients g = tape.backward(loss);
    for (const Var& v : vars) analytic.push_back(g[v]);
  }

  std::mt19937_64 rng(options.seed);
  for (std::size_t p = 0; p < params.size(); ++p) {
    std::vector<std::size_t> coords(params[p].size());
    std::iota(coords.begin(), coords.end(), std::size_t{0});
    if (options.max_coords_per_param != 0 &&
        coords.size() > options.max_coords_per_param) {
      std::shuffle(coords.begin(), coords.end(), rng);
      coords.resize(options.max_coords_per_param);
      std::sort(coords.begin(), coords.end());
    }
    for (std::size_t i : coords) {
      const double orig = params[p][i];
      params[p][i] = orig + options.epsilon;
      const double up = evaluate();
      params[p][i] = orig - options.epsilon;
      const double down = evaluate();
      params[p][i] = orig;
      ++result.coordinates_checked;
      if (!std::isfinite(up) || !std::isfinite(down)) {
        result.finite = false;
        result.worst_param = p;
        result.worst_index = i;
        result.message = "non-finite forward value at param " +
                         std::to_string(p) + " coordinate " + std::to_string(i);
        return result;
      }
      const double numeric = (up - down) / (2.0 * options.epsilon);
      const double err = relative_error(analytic[p][i], numeric);
      if (err > result.max_rel_error) {
        result.max_rel_error = err;
        result.worst_param = p;
        result.worst_index = i;
      }
    }
  }
  return result;
}

}  // namespace seqcr
