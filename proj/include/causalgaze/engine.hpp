#pragma once

// Reverse-mode differentiation over a closed set of 2-D tensor primitives.
//
// Every backward rule is itself expressed with tape primitives. Calling
// Tape::gradient with create_graph = true therefore records the first-order
// gradient as ordinary nodes, and a later backward pass through those nodes
// yields derivatives of scalars built from gradients (second order).
//
// Subgradient conventions: relu, clamp_min and abs use 0 at the kink;
// max_rows routes the gradient to the first maximal row.

#include <cmath>
#include <cstdint>
#include <functional>
#include <limits>
#include <map>
#include <span>
#include <string>
#include <string_view>
#include <utility>
#include <vector>

#include "causalgaze/error.hpp"
#include "causalgaze/tensor.hpp"

namespace causalgaze::engine {

enum class Op : std::uint8_t {
  Leaf,
  Constant,
  MatMul,
  Transpose,
  Add,
  Sub,
  Mul,
  Affine,
  Concat,
  Slice,
  Pad,
  Reshape,
  Relu,
  Sigmoid,
  ClampMin,
  Abs,
  RowSum,
  BroadcastCols,
  ColSum,
  BroadcastRows,
  SumAll,
  BroadcastScalar,
  MaxRows,
  MeanRows,
  Softmax,
  SoftmaxCrossEntropy,
  FrobeniusSq,
  RowL2Norm,
  Dropout,
};

constexpr std::string_view op_name(Op op) {
  switch (op) {
    case Op::Leaf: return "leaf";
    case Op::Constant: return "constant";
    case Op::MatMul: return "matmul";
    case Op::Transpose: return "transpose";
    case Op::Add: return "add";
    case Op::Sub: return "subtract";
    case Op::Mul: return "multiply";
    case Op::Affine: return "scalar-multiply";
    case Op::Concat: return "concat";
    case Op::Slice: return "slice";
    case Op::Pad: return "pad";
    case Op::Reshape: return "reshape";
    case Op::Relu: return "relu";
    case Op::Sigmoid: return "sigmoid";
    case Op::ClampMin: return "clamp-min";
    case Op::Abs: return "abs";
    case Op::RowSum: return "row-wise-sum";
    case Op::BroadcastCols: return "broadcast-cols";
    case Op::ColSum: return "column-sum";
    case Op::BroadcastRows: return "broadcast-rows";
    case Op::SumAll: return "sum-all";
    case Op::BroadcastScalar: return "broadcast-scalar";
    case Op::MaxRows: return "max-over-rows";
    case Op::MeanRows: return "mean-over-rows";
    case Op::Softmax: return "softmax";
    case Op::SoftmaxCrossEntropy: return "softmax-cross-entropy-with-logits";
    case Op::FrobeniusSq: return "frobenius-norm-squared";
    case Op::RowL2Norm: return "l2-norm-rows";
    case Op::Dropout: return "dropout-mask-apply";
  }
  return "unknown";
}

class Tape;

/// Handle to a node on a Tape. Cheap to copy; valid while the tape lives.
class Var {
 public:
  Var() = default;

  bool valid() const noexcept { return tape_ != nullptr && id_ >= 0; }
  int id() const noexcept { return id_; }
  Tape* tape() const noexcept { return tape_; }

  inline const Tensor& value() const;
  inline bool requires_grad() const;
  std::size_t rows() const { return value().rows(); }
  std::size_t cols() const { return value().cols(); }

 private:
  friend class Tape;
  Var(Tape* tape, int id) : tape_(tape), id_(id) {}

  Tape* tape_ = nullptr;
  int id_ = -1;
};

class Tape {
 public:
  Tape() = default;
  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;

  std::size_t size() const noexcept { return nodes_.size(); }

  // ---- leaves -------------------------------------------------------------

  Var leaf(Tensor value, std::string name = {}, bool requires_grad = true) {
    Node n;
    n.op = Op::Leaf;
    n.value = std::move(value);
    n.requires_grad = requires_grad;
    n.name = std::move(name);
    return push(std::move(n));
  }

  Var constant(Tensor value) {
    Node n;
    n.op = Op::Constant;
    n.value = std::move(value);
    return push(std::move(n));
  }

  /// Same value, severed from the graph.
  Var detach(Var x) { return constant(value(x)); }

  // ---- primitives ---------------------------------------------------------

  /// op(a) * op(b), where op transposes when the flag is set.
  Var matmul(Var a, Var b, bool trans_a = false, bool trans_b = false) {
    const Tensor& A = value(a);
    const Tensor& B = value(b);
    const std::size_t m = trans_a ? A.cols() : A.rows();
    const std::size_t k = trans_a ? A.rows() : A.cols();
    const std::size_t kb = trans_b ? B.cols() : B.rows();
    const std::size_t n = trans_b ? B.rows() : B.cols();
    if (k != kb) shape_error(Op::MatMul, A, B);
    Tensor out(m, n);
    const double* pa = A.data().data();
    const double* pb = B.data().data();
    double* po = out.data().data();
    const std::size_t ac = A.cols();
    const std::size_t bc = B.cols();
    for (std::size_t i = 0; i < m; ++i) {
      double* orow = po + i * n;
      for (std::size_t p = 0; p < k; ++p) {
        const double av = trans_a ? pa[p * ac + i] : pa[i * ac + p];
        if (av == 0.0) continue;
        if (!trans_b) {
          const double* brow = pb + p * bc;
          for (std::size_t j = 0; j < n; ++j) orow[j] += av * brow[j];
        } else {
          for (std::size_t j = 0; j < n; ++j) orow[j] += av * pb[j * bc + p];
        }
      }
    }
    Node nd = make(Op::MatMul, {a, b}, std::move(out));
    nd.flags = (trans_a ? 1u : 0u) | (trans_b ? 2u : 0u);
    return push(std::move(nd));
  }

  Var transpose(Var a) {
    const Tensor& A = value(a);
    Tensor out(A.cols(), A.rows());
    for (std::size_t i = 0; i < A.rows(); ++i)
      for (std::size_t j = 0; j < A.cols(); ++j) out(j, i) = A(i, j);
    return push(make(Op::Transpose, {a}, std::move(out)));
  }

  Var add(Var a, Var b) { return binary(Op::Add, a, b, [](double x, double y) { return x + y; }); }
  Var sub(Var a, Var b) { return binary(Op::Sub, a, b, [](double x, double y) { return x - y; }); }
  Var mul(Var a, Var b) { return binary(Op::Mul, a, b, [](double x, double y) { return x * y; }); }

  /// scale * a + shift, with compile-time-constant scale and shift.
  Var affine(Var a, double scale, double shift = 0.0) {
    Tensor out = value(a);
    for (auto& v : out.data()) v = scale * v + shift;
    Node n = make(Op::Affine, {a}, std::move(out));
    n.c0 = scale;
    n.c1 = shift;
    return push(std::move(n));
  }
  Var scale(Var a, double s) { return affine(a, s, 0.0); }

  /// Concatenation along the last (column) axis.
  Var concat(std::span<const Var> parts) {
    if (parts.empty()) throw ShapeError("concat: no operands");
    const std::size_t r = value(parts[0]).rows();
    std::size_t c = 0;
    for (const Var& p : parts) {
      if (value(p).rows() != r) shape_error(Op::Concat, value(parts[0]), value(p));
      c += value(p).cols();
    }
    Tensor out(r, c);
    std::size_t off = 0;
    std::vector<int> ids;
    for (const Var& p : parts) {
      const Tensor& P = value(p);
      for (std::size_t i = 0; i < r; ++i)
        for (std::size_t j = 0; j < P.cols(); ++j) out(i, off + j) = P(i, j);
      off += P.cols();
      ids.push_back(p.id());
    }
    return push(make_ids(Op::Concat, std::move(ids), std::move(out)));
  }
  Var concat(std::initializer_list<Var> parts) {
    return concat(std::span<const Var>(parts.begin(), parts.size()));
  }

  /// Columns [offset, offset + width).
  Var slice(Var a, std::size_t offset, std::size_t width) {
    const Tensor& A = value(a);
    if (offset + width > A.cols()) {
      throw ShapeError("slice: columns [" + std::to_string(offset) + ", " +
                       std::to_string(offset + width) + ") out of range for " + A.shape_string());
    }
    Tensor out(A.rows(), width);
    for (std::size_t i = 0; i < A.rows(); ++i)
      for (std::size_t j = 0; j < width; ++j) out(i, j) = A(i, offset + j);
    Node n = make(Op::Slice, {a}, std::move(out));
    n.s0 = offset;
    n.s1 = width;
    return push(std::move(n));
  }

  /// Embeds a into zeros of width total_cols at column offset (adjoint of slice).
  Var pad(Var a, std::size_t offset, std::size_t total_cols) {
    const Tensor& A = value(a);
    if (offset + A.cols() > total_cols) {
      throw ShapeError("pad: " + A.shape_string() + " at offset " + std::to_string(offset) +
                       " exceeds width " + std::to_string(total_cols));
    }
    Tensor out(A.rows(), total_cols);
    for (std::size_t i = 0; i < A.rows(); ++i)
      for (std::size_t j = 0; j < A.cols(); ++j) out(i, offset + j) = A(i, j);
    Node n = make(Op::Pad, {a}, std::move(out));
    n.s0 = offset;
    n.s1 = total_cols;
    return push(std::move(n));
  }

  /// Row-major reinterpretation with the same element count.
  Var reshape(Var a, std::size_t rows, std::size_t cols) {
    const Tensor& A = value(a);
    if (rows * cols != A.size()) {
      throw ShapeError("reshape: " + A.shape_string() + " to " + std::to_string(rows) + "x" +
                       std::to_string(cols));
    }
    std::vector<double> d(A.data().begin(), A.data().end());
    return push(make(Op::Reshape, {a}, Tensor(rows, cols, std::move(d))));
  }

  Var relu(Var a) { return unary(Op::Relu, a, [](double x) { return x > 0.0 ? x : 0.0; }); }

  Var sigmoid(Var a) {
    return unary(Op::Sigmoid, a, [](double x) {
      if (x >= 0.0) return 1.0 / (1.0 + std::exp(-x));
      const double e = std::exp(x);
      return e / (1.0 + e);
    });
  }

  Var clamp_min(Var a, double lo) {
    Tensor out = value(a);
    for (auto& v : out.data()) v = v > lo ? v : lo;
    Node n = make(Op::ClampMin, {a}, std::move(out));
    n.c0 = lo;
    return push(std::move(n));
  }

  Var abs(Var a) { return unary(Op::Abs, a, [](double x) { return std::abs(x); }); }

  /// L x n -> L x 1.
  Var row_sum(Var a) {
    const Tensor& A = value(a);
    Tensor out(A.rows(), 1);
    for (std::size_t i = 0; i < A.rows(); ++i) {
      double s = 0.0;
      for (double v : A.row(i)) s += v;
      out(i, 0) = s;
    }
    return push(make(Op::RowSum, {a}, std::move(out)));
  }

  /// L x 1 -> L x n.
  Var broadcast_cols(Var a, std::size_t n) {
    const Tensor& A = value(a);
    if (A.cols() != 1) throw ShapeError("broadcast-cols: expected Lx1, got " + A.shape_string());
    Tensor out(A.rows(), n);
    for (std::size_t i = 0; i < A.rows(); ++i)
      for (std::size_t j = 0; j < n; ++j) out(i, j) = A(i, 0);
    Node nd = make(Op::BroadcastCols, {a}, std::move(out));
    nd.s0 = n;
    return push(std::move(nd));
  }

  /// L x n -> 1 x n.
  Var col_sum(Var a) {
    const Tensor& A = value(a);
    Tensor out(1, A.cols());
    for (std::size_t i = 0; i < A.rows(); ++i)
      for (std::size_t j = 0; j < A.cols(); ++j) out(0, j) += A(i, j);
    return push(make(Op::ColSum, {a}, std::move(out)));
  }

  /// 1 x n -> L x n.
  Var broadcast_rows(Var a, std::size_t rows) {
    const Tensor& A = value(a);
    if (A.rows() != 1) throw ShapeError("broadcast-rows: expected 1xn, got " + A.shape_string());
    Tensor out(rows, A.cols());
    for (std::size_t i = 0; i < rows; ++i)
      for (std::size_t j = 0; j < A.cols(); ++j) out(i, j) = A(0, j);
    Node nd = make(Op::BroadcastRows, {a}, std::move(out));
    nd.s0 = rows;
    return push(std::move(nd));
  }

  Var sum_all(Var a) {
    double s = 0.0;
    for (double v : value(a).data()) s += v;
    return push(make(Op::SumAll, {a}, Tensor::scalar(s)));
  }

  /// 1 x 1 -> rows x cols.
  Var broadcast_scalar(Var a, std::size_t rows, std::size_t cols) {
    const Tensor& A = value(a);
    if (A.size() != 1) throw ShapeError("broadcast-scalar: expected 1x1, got " + A.shape_string());
    Node nd = make(Op::BroadcastScalar, {a}, Tensor(rows, cols, A[0]));
    nd.s0 = rows;
    nd.s1 = cols;
    return push(std::move(nd));
  }

  /// Column-wise maximum over rows, L x n -> 1 x n.
  Var max_rows(Var a) {
    const Tensor& A = value(a);
    if (A.rows() == 0) throw ShapeError("max-over-rows: empty input");
    Tensor out(1, A.cols());
    Tensor route(A.rows(), A.cols());
    for (std::size_t j = 0; j < A.cols(); ++j) {
      std::size_t best = 0;
      for (std::size_t i = 1; i < A.rows(); ++i)
        if (A(i, j) > A(best, j)) best = i;
      out(0, j) = A(best, j);
      route(best, j) = 1.0;
    }
    Node nd = make(Op::MaxRows, {a}, std::move(out));
    nd.aux = std::move(route);
    return push(std::move(nd));
  }

  /// Column-wise mean over rows, L x n -> 1 x n.
  Var mean_rows(Var a) {
    const Tensor& A = value(a);
    if (A.rows() == 0) throw ShapeError("mean-over-rows: empty input");
    Tensor out(1, A.cols());
    for (std::size_t i = 0; i < A.rows(); ++i)
      for (std::size_t j = 0; j < A.cols(); ++j) out(0, j) += A(i, j);
    const double inv = 1.0 / static_cast<double>(A.rows());
    for (auto& v : out.data()) v *= inv;
    return push(make(Op::MeanRows, {a}, std::move(out)));
  }

  /// Row-wise softmax.
  Var softmax_rows(Var a) {
    return push(make(Op::Softmax, {a}, softmax_value(value(a))));
  }

  /// Sum over rows of -log softmax(logits)[label].
  Var softmax_cross_entropy(Var logits, std::span<const std::size_t> labels) {
    const Tensor& Z = value(logits);
    if (labels.size() != Z.rows()) {
      throw ShapeError("softmax-cross-entropy-with-logits: " + std::to_string(labels.size()) +
                       " labels for " + Z.shape_string() + " logits");
    }
    double total = 0.0;
    for (std::size_t i = 0; i < Z.rows(); ++i) {
      if (labels[i] >= Z.cols()) throw ShapeError("softmax-cross-entropy-with-logits: label out of range");
      double mx = -std::numeric_limits<double>::infinity();
      for (double v : Z.row(i)) mx = std::max(mx, v);
      double s = 0.0;
      for (double v : Z.row(i)) s += std::exp(v - mx);
      total += mx + std::log(s) - Z(i, labels[i]);
    }
    Node nd = make(Op::SoftmaxCrossEntropy, {logits}, Tensor::scalar(total));
    nd.aux = Tensor(Z.rows(), Z.cols());
    for (std::size_t i = 0; i < Z.rows(); ++i) nd.aux(i, labels[i]) = 1.0;
    return push(std::move(nd));
  }
  Var softmax_cross_entropy(Var logits, std::size_t label) {
    const std::size_t l[1] = {label};
    return softmax_cross_entropy(logits, std::span<const std::size_t>(l, 1));
  }

  Var frobenius_sq(Var a) {
    double s = 0.0;
    for (double v : value(a).data()) s += v * v;
    return push(make(Op::FrobeniusSq, {a}, Tensor::scalar(s)));
  }

  /// Euclidean norm of every row, L x n -> L x 1. First-order only.
  Var l2_norm_rows(Var a) {
    const Tensor& A = value(a);
    Tensor out(A.rows(), 1);
    for (std::size_t i = 0; i < A.rows(); ++i) {
      double s = 0.0;
      for (double v : A.row(i)) s += v * v;
      out(i, 0) = std::sqrt(s);
    }
    return push(make(Op::RowL2Norm, {a}, std::move(out)));
  }

  /// x * mask, where mask is a constant 0 / (1/(1-p)) tensor sampled beforehand.
  Var dropout(Var x, Var mask) {
    if (node(mask).op != Op::Constant) throw Error("dropout-mask-apply: mask must be a constant");
    if (!value(x).same_shape(value(mask))) shape_error(Op::Dropout, value(x), value(mask));
    Tensor out = value(x);
    const Tensor& M = value(mask);
    for (std::size_t i = 0; i < out.size(); ++i) out[i] *= M[i];
    return push(make(Op::Dropout, {x, mask}, std::move(out)));
  }

  // ---- reverse mode -------------------------------------------------------

  /// d root / d w for every w in wrt. Nodes created while backpropagating are
  /// themselves differentiable when create_graph is set. Leaves with no path
  /// to root receive exact zeros.
  std::vector<Var> gradient(Var root, std::span<const Var> wrt, bool create_graph = false) {
    check_owned(root);
    if (value(root).size() != 1) {
      throw ShapeError("backward: root must be scalar, got " + value(root).shape_string());
    }
    const int n_fwd = root.id() + 1;
    std::vector<char> relevant(static_cast<std::size_t>(n_fwd), 0);
    for (const Var& w : wrt) {
      check_owned(w);
      if (w.id() < n_fwd && nodes_[static_cast<std::size_t>(w.id())].requires_grad)
        relevant[static_cast<std::size_t>(w.id())] = 1;
    }
    for (int i = 0; i < n_fwd; ++i) {
      const Node& nd = nodes_[static_cast<std::size_t>(i)];
      if (relevant[static_cast<std::size_t>(i)] || !nd.requires_grad) continue;
      for (int in : nd.inputs)
        if (relevant[static_cast<std::size_t>(in)]) {
          relevant[static_cast<std::size_t>(i)] = 1;
          break;
        }
    }

    const bool saved_mode = grad_enabled_;
    grad_enabled_ = create_graph;
    std::vector<Var> adj(static_cast<std::size_t>(n_fwd));
    try {
      if (relevant[static_cast<std::size_t>(root.id())]) {
        adj[static_cast<std::size_t>(root.id())] = constant(Tensor::scalar(1.0));
      }
      for (int i = n_fwd - 1; i >= 0; --i) {
        const Var gy = adj[static_cast<std::size_t>(i)];
        if (!gy.valid()) continue;
        const Op op = nodes_[static_cast<std::size_t>(i)].op;
        if (op == Op::Leaf || op == Op::Constant) continue;
        propagate(i, gy, relevant, adj, create_graph);
      }
    } catch (...) {
      grad_enabled_ = saved_mode;
      throw;
    }

    std::vector<Var> out;
    out.reserve(wrt.size());
    for (const Var& w : wrt) {
      Var g = w.id() < n_fwd ? adj[static_cast<std::size_t>(w.id())] : Var{};
      if (!g.valid()) g = constant(Tensor(value(w).rows(), value(w).cols()));
      out.push_back(g);
    }
    grad_enabled_ = saved_mode;
    return out;
  }

  std::vector<Var> gradient(Var root, std::initializer_list<Var> wrt, bool create_graph = false) {
    return gradient(root, std::span<const Var>(wrt.begin(), wrt.size()), create_graph);
  }

  /// Numeric gradients of root with respect to wrt.
  std::vector<Tensor> backward(Var root, std::span<const Var> wrt) {
    std::vector<Tensor> out;
    for (const Var& g : gradient(root, wrt, false)) out.push_back(value(g));
    return out;
  }

  /// Gradients for every named differentiable leaf.
  std::map<std::string, Tensor> backward(Var root) {
    std::vector<Var> leaves;
    std::vector<std::string> names;
    for (std::size_t i = 0; i < nodes_.size() && static_cast<int>(i) <= root.id(); ++i) {
      const Node& n = nodes_[i];
      if (n.op == Op::Leaf && n.requires_grad && !n.name.empty()) {
        leaves.push_back(Var(this, static_cast<int>(i)));
        names.push_back(n.name);
      }
    }
    std::vector<Tensor> grads = backward(root, leaves);
    std::map<std::string, Tensor> out;
    for (std::size_t i = 0; i < names.size(); ++i) out[names[i]] = std::move(grads[i]);
    return out;
  }

  /// Position of every forward kink relative to its threshold: sign of the
  /// input minus the kink for relu/clamp-min/abs, the routed row for
  /// max-over-rows. Two evaluations with equal signatures lie on the same
  /// smooth piece.
  std::vector<std::int32_t> kink_signature(int upto = -1) const {
    std::vector<std::int32_t> sig;
    const std::size_t end = upto < 0 ? nodes_.size() : static_cast<std::size_t>(upto) + 1;
    for (std::size_t i = 0; i < end; ++i) {
      const Node& n = nodes_[i];
      double kink = 0.0;
      switch (n.op) {
        case Op::ClampMin: kink = n.c0; [[fallthrough]];
        case Op::Relu:
        case Op::Abs: {
          const Tensor& x = nodes_[static_cast<std::size_t>(n.inputs[0])].value;
          for (double v : x.data()) sig.push_back(v > kink ? 1 : (v < kink ? -1 : 0));
          break;
        }
        case Op::MaxRows: {
          for (std::size_t j = 0; j < n.aux.cols(); ++j)
            for (std::size_t r = 0; r < n.aux.rows(); ++r)
              if (n.aux(r, j) != 0.0) sig.push_back(static_cast<std::int32_t>(r));
          break;
        }
        default: break;
      }
    }
    return sig;
  }

  const Tensor& value(Var v) const {
    check_owned(v);
    return nodes_[static_cast<std::size_t>(v.id())].value;
  }
  bool requires_grad(Var v) const {
    check_owned(v);
    return nodes_[static_cast<std::size_t>(v.id())].requires_grad;
  }
  Op op(Var v) const { return node(v).op; }

 private:
  struct Node {
    Op op = Op::Constant;
    std::vector<int> inputs;
    Tensor value;
    Tensor aux;  // max routing / one-hot labels
    double c0 = 0.0, c1 = 0.0;
    std::size_t s0 = 0, s1 = 0;
    unsigned flags = 0;
    bool requires_grad = false;
    std::string name;
  };

  const Node& node(Var v) const {
    check_owned(v);
    return nodes_[static_cast<std::size_t>(v.id())];
  }

  void check_owned(Var v) const {
    if (v.tape_ != this || v.id_ < 0 || static_cast<std::size_t>(v.id_) >= nodes_.size()) {
      throw Error("engine: variable does not belong to this tape");
    }
  }

  [[noreturn]] static void shape_error(Op op, const Tensor& a, const Tensor& b) {
    throw ShapeError(std::string(op_name(op)) + ": shape mismatch " + a.shape_string() + " vs " +
                     b.shape_string());
  }

  Node make(Op op, std::initializer_list<Var> in, Tensor value) {
    std::vector<int> ids;
    for (const Var& v : in) {
      check_owned(v);
      ids.push_back(v.id());
    }
    return make_ids(op, std::move(ids), std::move(value));
  }

  Node make_ids(Op op, std::vector<int> ids, Tensor value) {
    Node n;
    n.op = op;
    n.value = std::move(value);
    bool rg = false;
    for (int id : ids) rg = rg || nodes_[static_cast<std::size_t>(id)].requires_grad;
    n.requires_grad = rg && grad_enabled_;
    n.inputs = std::move(ids);
    return n;
  }

  Var push(Node&& n) {
    if (!n.value.all_finite()) {
      throw NumericError(std::string(op_name(n.op)) + " produced a non-finite value");
    }
    nodes_.push_back(std::move(n));
    return Var(this, static_cast<int>(nodes_.size() - 1));
  }

  template <class F>
  Var unary(Op op, Var a, F f) {
    Tensor out = value(a);
    for (auto& v : out.data()) v = f(v);
    return push(make(op, {a}, std::move(out)));
  }

  template <class F>
  Var binary(Op op, Var a, Var b, F f) {
    const Tensor& A = value(a);
    const Tensor& B = value(b);
    if (!A.same_shape(B)) shape_error(op, A, B);
    Tensor out(A.rows(), A.cols());
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = f(A[i], B[i]);
    return push(make(op, {a, b}, std::move(out)));
  }

  static Tensor softmax_value(const Tensor& Z) {
    Tensor out(Z.rows(), Z.cols());
    for (std::size_t i = 0; i < Z.rows(); ++i) {
      double mx = -std::numeric_limits<double>::infinity();
      for (double v : Z.row(i)) mx = std::max(mx, v);
      double s = 0.0;
      for (std::size_t j = 0; j < Z.cols(); ++j) {
        out(i, j) = std::exp(Z(i, j) - mx);
        s += out(i, j);
      }
      for (std::size_t j = 0; j < Z.cols(); ++j) out(i, j) /= s;
    }
    return out;
  }

  void accumulate(std::vector<Var>& adj, int id, Var g) {
    Var& slot = adj[static_cast<std::size_t>(id)];
    slot = slot.valid() ? add(slot, g) : g;
  }

  // Pushes d root / d input for each relevant input of node i given gy = d root / d node.
  // Node fields are copied first: creating nodes may reallocate nodes_.
  void propagate(int i, Var gy, const std::vector<char>& relevant, std::vector<Var>& adj,
                 bool create_graph) {
    const Node nd_copy_header = shallow(nodes_[static_cast<std::size_t>(i)]);
    const Op op = nd_copy_header.op;
    const std::vector<int>& in = nd_copy_header.inputs;
    auto rel = [&](std::size_t k) { return relevant[static_cast<std::size_t>(in[k])] != 0; };
    auto inp = [&](std::size_t k) { return Var(this, in[k]); };
    const Var self(this, i);

    switch (op) {
      case Op::Leaf:
      case Op::Constant: break;
      case Op::MatMul: {
        const bool ta = nd_copy_header.flags & 1u;
        const bool tb = nd_copy_header.flags & 2u;
        const Var a = inp(0), b = inp(1);
        if (rel(0)) {
          Var ga;
          if (!ta && !tb) ga = matmul(gy, b, false, true);
          else if (ta && !tb) ga = matmul(b, gy, false, true);
          else if (!ta && tb) ga = matmul(gy, b);
          else ga = matmul(b, gy, true, true);
          accumulate(adj, in[0], ga);
        }
        if (rel(1)) {
          Var gb;
          if (!ta && !tb) gb = matmul(a, gy, true, false);
          else if (ta && !tb) gb = matmul(a, gy);
          else if (!ta && tb) gb = matmul(gy, a, true, false);
          else gb = matmul(gy, a, true, true);
          accumulate(adj, in[1], gb);
        }
        break;
      }
      case Op::Transpose:
        if (rel(0)) accumulate(adj, in[0], transpose(gy));
        break;
      case Op::Add:
        if (rel(0)) accumulate(adj, in[0], gy);
        if (rel(1)) accumulate(adj, in[1], gy);
        break;
      case Op::Sub:
        if (rel(0)) accumulate(adj, in[0], gy);
        if (rel(1)) accumulate(adj, in[1], scale(gy, -1.0));
        break;
      case Op::Mul:
        if (rel(0)) accumulate(adj, in[0], mul(gy, inp(1)));
        if (rel(1)) accumulate(adj, in[1], mul(gy, inp(0)));
        break;
      case Op::Affine:
        if (rel(0)) accumulate(adj, in[0], scale(gy, nd_copy_header.c0));
        break;
      case Op::Concat: {
        std::size_t off = 0;
        for (std::size_t k = 0; k < in.size(); ++k) {
          const std::size_t w = value(inp(k)).cols();
          if (rel(k)) accumulate(adj, in[k], slice(gy, off, w));
          off += w;
        }
        break;
      }
      case Op::Slice:
        if (rel(0)) accumulate(adj, in[0], pad(gy, nd_copy_header.s0, value(inp(0)).cols()));
        break;
      case Op::Pad:
        if (rel(0)) accumulate(adj, in[0], slice(gy, nd_copy_header.s0, value(inp(0)).cols()));
        break;
      case Op::Reshape:
        if (rel(0)) accumulate(adj, in[0], reshape(gy, value(inp(0)).rows(), value(inp(0)).cols()));
        break;
      case Op::Relu:
      case Op::ClampMin: {
        if (!rel(0)) break;
        const double kink = op == Op::Relu ? 0.0 : nd_copy_header.c0;
        Tensor step = value(inp(0));
        for (auto& v : step.data()) v = v > kink ? 1.0 : 0.0;
        accumulate(adj, in[0], mul(gy, constant(std::move(step))));
        break;
      }
      case Op::Abs: {
        if (!rel(0)) break;
        Tensor sign = value(inp(0));
        for (auto& v : sign.data()) v = v > 0.0 ? 1.0 : (v < 0.0 ? -1.0 : 0.0);
        accumulate(adj, in[0], mul(gy, constant(std::move(sign))));
        break;
      }
      case Op::Sigmoid: {
        if (!rel(0)) break;
        // s * (1 - s), built from the output node so second order flows through it.
        const Var slope = mul(self, affine(self, -1.0, 1.0));
        accumulate(adj, in[0], mul(gy, slope));
        break;
      }
      case Op::RowSum:
        if (rel(0)) accumulate(adj, in[0], broadcast_cols(gy, value(inp(0)).cols()));
        break;
      case Op::BroadcastCols:
        if (rel(0)) accumulate(adj, in[0], row_sum(gy));
        break;
      case Op::ColSum:
        if (rel(0)) accumulate(adj, in[0], broadcast_rows(gy, value(inp(0)).rows()));
        break;
      case Op::BroadcastRows:
        if (rel(0)) accumulate(adj, in[0], col_sum(gy));
        break;
      case Op::SumAll:
        if (rel(0)) accumulate(adj, in[0], broadcast_scalar(gy, value(inp(0)).rows(), value(inp(0)).cols()));
        break;
      case Op::BroadcastScalar:
        if (rel(0)) accumulate(adj, in[0], sum_all(gy));
        break;
      case Op::MaxRows: {
        if (!rel(0)) break;
        Tensor route = nodes_[static_cast<std::size_t>(i)].aux;
        accumulate(adj, in[0], mul(broadcast_rows(gy, route.rows()), constant(std::move(route))));
        break;
      }
      case Op::MeanRows: {
        if (!rel(0)) break;
        const std::size_t r = value(inp(0)).rows();
        accumulate(adj, in[0], scale(broadcast_rows(gy, r), 1.0 / static_cast<double>(r)));
        break;
      }
      case Op::Softmax: {
        if (!rel(0)) break;
        // s * (gy - rowsum(gy * s))
        const std::size_t c = value(self).cols();
        const Var inner = broadcast_cols(row_sum(mul(gy, self)), c);
        accumulate(adj, in[0], mul(self, sub(gy, inner)));
        break;
      }
      case Op::SoftmaxCrossEntropy: {
        if (!rel(0)) break;
        const Var z = inp(0);
        Tensor onehot = nodes_[static_cast<std::size_t>(i)].aux;
        const Var diff = sub(softmax_rows(z), constant(std::move(onehot)));
        accumulate(adj, in[0], mul(broadcast_scalar(gy, value(z).rows(), value(z).cols()), diff));
        break;
      }
      case Op::FrobeniusSq: {
        if (!rel(0)) break;
        const Var x = inp(0);
        accumulate(adj, in[0],
                   mul(broadcast_scalar(gy, value(x).rows(), value(x).cols()), scale(x, 2.0)));
        break;
      }
      case Op::RowL2Norm: {
        if (!rel(0)) break;
        if (create_graph && requires_grad(inp(0))) {
          throw Error("l2-norm-rows: no second-order rule");
        }
        Tensor unit = value(inp(0));
        const Tensor& norms = value(self);
        for (std::size_t r = 0; r < unit.rows(); ++r)
          for (std::size_t c = 0; c < unit.cols(); ++c)
            unit(r, c) = norms(r, 0) > 0.0 ? unit(r, c) / norms(r, 0) : 0.0;
        accumulate(adj, in[0], mul(broadcast_cols(gy, unit.cols()), constant(std::move(unit))));
        break;
      }
      case Op::Dropout:
        if (rel(0)) accumulate(adj, in[0], dropout(gy, inp(1)));
        break;
    }
  }

  // Copy of a node without its (possibly large) tensors.
  static Node shallow(const Node& n) {
    Node c;
    c.op = n.op;
    c.inputs = n.inputs;
    c.c0 = n.c0;
    c.c1 = n.c1;
    c.s0 = n.s0;
    c.s1 = n.s1;
    c.flags = n.flags;
    c.requires_grad = n.requires_grad;
    return c;
  }

  std::vector<Node> nodes_;
  bool grad_enabled_ = true;
};

inline const Tensor& Var::value() const { return tape_->value(*this); }
inline bool Var::requires_grad() const { return tape_->requires_grad(*this); }

/// Max over coordinates of |analytic - central| / max(1, |analytic|).
inline double relative_error(const Tensor& analytic, const Tensor& numeric) {
  if (!analytic.same_shape(numeric)) {
    throw ShapeError("relative_error: " + analytic.shape_string() + " vs " + numeric.shape_string());
  }
  double worst = 0.0;
  for (std::size_t i = 0; i < analytic.size(); ++i) {
    const double denom = std::max(1.0, std::abs(analytic[i]));
    worst = std::max(worst, std::abs(analytic[i] - numeric[i]) / denom);
  }
  return worst;
}

/// Central differences (f(x+eps) - f(x-eps)) / (2 eps) of a scalar function,
/// at every coordinate listed in coords (all coordinates when empty).
inline Tensor central_difference(const std::function<double(const Tensor&)>& f, const Tensor& point,
                                 double eps, std::span<const std::size_t> coords = {}) {
  if (!(eps > 0.0)) throw ConfigError("finite differences need eps > 0");
  Tensor grad(point.rows(), point.cols());
  Tensor probe = point;
  auto one = [&](std::size_t i) {
    const double x0 = point[i];
    probe[i] = x0 + eps;
    const double up = f(probe);
    probe[i] = x0 - eps;
    const double down = f(probe);
    probe[i] = x0;
    if (!std::isfinite(up) || !std::isfinite(down)) {
      throw NumericError("finite difference probe produced a non-finite value at coordinate " +
                         std::to_string(i));
    }
    grad[i] = (up - down) / (2.0 * eps);
  };
  if (coords.empty()) {
    for (std::size_t i = 0; i < point.size(); ++i) one(i);
  } else {
    for (std::size_t i : coords) one(i);
  }
  return grad;
}

/// Builds f on a fresh tape with `point` as its only differentiable leaf and
/// compares the reverse-mode gradient with central differences.
template <class F>
double finite_diff_check(F&& f, const Tensor& point, double eps) {
  Tensor analytic;
  {
    Tape tape;
    const Var x = tape.leaf(point, "x");
    const Var y = f(tape, x);
    analytic = tape.backward(y, std::span<const Var>(&x, 1)).front();
  }
  auto eval = [&](const Tensor& p) {
    Tape tape;
    const Var x = tape.leaf(p, "x");
    const Var y = f(tape, x);
    if (y.value().size() != 1) throw ShapeError("finite_diff_check: function must be scalar");
    return y.value()[0];
  };
  return relative_error(analytic, central_difference(eval, point, eps));
}

}  // namespace causalgaze::engine
