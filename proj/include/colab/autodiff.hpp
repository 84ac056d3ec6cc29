// Reverse-mode automatic differentiation on an append-only tape.
//
// Values are computed eagerly when a node is appended. Adjoints are built out
// of the same differentiable primitives, so the result of `Graph::gradients`
// lives on the tape and can itself be differentiated (double backprop).
// `Graph::backward` computes the same adjoints and then truncates the tape.
#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <limits>
#include <memory>
#include <span>
#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

#include "colab/tensor.hpp"

namespace colab {

using NodeId = std::uint32_t;
inline constexpr NodeId kNoNode = std::numeric_limits<NodeId>::max();

enum class Op : std::uint8_t {
  leaf,
  add,
  sub,
  mul,
  div,
  scale,
  matmul,     // A[m,k] B[k,n]
  matmul_nt,  // A[m,k] B[n,k]^T
  matmul_tn,  // A[k,m]^T B[k,n]
  add_row_vec,
  col_sum,
  row_sum,
  broadcast_rows,
  broadcast_cols,
  sum,
  fill,
  reshape,
  relu,
  step,        // 1 where input > 0; carries no gradient
  relu_mask,   // a where b > 0, else 0; no gradient flows to b
  exp,
  log,
  sqrt,
  log_softmax,
  gather,
  scatter,
  im2col,
  col2im,
};

/// Patch geometry of a valid (unpadded) convolution over NHWC input.
struct ConvGeometry {
  std::size_t batch = 0, height = 0, width = 0, channels = 0, kernel = 0, stride = 1;

  std::size_t out_h() const { return (height - kernel) / stride + 1; }
  std::size_t out_w() const { return (width - kernel) / stride + 1; }
  std::size_t patch_size() const { return kernel * kernel * channels; }
  std::size_t patches() const { return batch * out_h() * out_w(); }
};

class Graph;

/// Work of every graph evaluated on this thread, in the units of Graph::work().
inline double& work_meter() noexcept {
  thread_local double total = 0.0;
  return total;
}

/// Handle to a node on a Graph.
class Var {
 public:
  Var() = default;
  Var(Graph* graph, NodeId id) : graph_(graph), id_(id) {}

  Graph& graph() const { return *graph_; }
  NodeId id() const { return id_; }
  bool valid() const { return graph_ != nullptr && id_ != kNoNode; }
  inline const Tensor& value() const;
  const Shape& shape() const { return value().shape(); }

 private:
  Graph* graph_ = nullptr;
  NodeId id_ = kNoNode;
};

class Graph {
 public:
  struct Node {
    Op op = Op::leaf;
    NodeId a = kNoNode;
    NodeId b = kNoNode;
    double scalar = 0.0;
    Shape attr;
    std::shared_ptr<const std::vector<int>> labels;
    ConvGeometry conv;
    Tensor value;
  };

  Var input(Tensor value) {
    Node n;
    n.value = std::move(value);
    return push(std::move(n));
  }

  /// Cached value of a node; throws std::out_of_range for unknown ids.
  const Tensor& value(NodeId id) const {
    if (id >= nodes_.size()) {
      throw std::out_of_range("node " + std::to_string(id) + " is not on this graph");
    }
    return nodes_[id].value;
  }

  std::size_t size() const noexcept { return nodes_.size(); }
  Op op(NodeId id) const { return nodes_.at(id).op; }

  /// Estimated floating-point work of every node evaluated so far, including
  /// nodes later discarded by `backward`.
  double work() const noexcept { return work_; }

  Var make(Op op, Var a, Var b = {}, double scalar = 0.0, Shape attr = {},
           std::shared_ptr<const std::vector<int>> labels = nullptr, ConvGeometry conv = {}) {
    Node n;
    n.op = op;
    n.a = a.valid() ? checked(a) : kNoNode;
    n.b = b.valid() ? checked(b) : kNoNode;
    n.scalar = scalar;
    n.attr = std::move(attr);
    n.labels = std::move(labels);
    n.conv = conv;
    const double before = work_;
    n.value = compute(n);
    work_meter() += work_ - before;
    return push(std::move(n));
  }

  /// Adjoints of scalar `root` with respect to `wrt`, appended to the tape.
  std::vector<Var> gradients(Var root, std::span<const Var> wrt);

  /// Adjoint values without leaving the adjoint computation on the tape.
  std::vector<Tensor> backward(Var root, std::span<const Var> wrt) {
    const std::size_t mark = nodes_.size();
    std::vector<Var> adj = gradients(root, wrt);
    std::vector<Tensor> out;
    out.reserve(adj.size());
    for (const Var& v : adj) out.push_back(nodes_[v.id()].value);
    nodes_.resize(mark);
    return out;
  }

  /// Recomputes every non-leaf node from its inputs in tape order.
  void replay() {
    for (Node& n : nodes_) {
      if (n.op != Op::leaf) n.value = compute(n);
    }
  }

 private:
  Var push(Node n) {
    if (nodes_.size() >= kNoNode) throw std::length_error("graph too large");
    nodes_.push_back(std::move(n));
    return Var(this, static_cast<NodeId>(nodes_.size() - 1));
  }

  NodeId checked(Var v) const {
    if (&v.graph() != this) throw std::invalid_argument("variable belongs to another graph");
    if (v.id() >= nodes_.size()) throw std::out_of_range("unknown node id");
    return v.id();
  }

  Var var(NodeId id) { return Var(this, id); }

  Tensor compute(const Node& n);
  Var vjp(NodeId id, int which, Var g);

  std::vector<Node> nodes_;
  double work_ = 0.0;
};

inline const Tensor& Var::value() const { return graph_->value(id_); }

// ---------------------------------------------------------------------------
// Primitive builders

inline Var operator+(Var a, Var b) { return a.graph().make(Op::add, a, b); }
inline Var operator-(Var a, Var b) { return a.graph().make(Op::sub, a, b); }
inline Var operator*(Var a, Var b) { return a.graph().make(Op::mul, a, b); }
inline Var operator/(Var a, Var b) { return a.graph().make(Op::div, a, b); }
inline Var operator*(double c, Var a) { return a.graph().make(Op::scale, a, {}, c); }
inline Var operator-(Var a) { return -1.0 * a; }

inline Var matmul(Var a, Var b) { return a.graph().make(Op::matmul, a, b); }
inline Var matmul_nt(Var a, Var b) { return a.graph().make(Op::matmul_nt, a, b); }
inline Var matmul_tn(Var a, Var b) { return a.graph().make(Op::matmul_tn, a, b); }
inline Var add_row_vector(Var a, Var v) { return a.graph().make(Op::add_row_vec, a, v); }
inline Var col_sum(Var a) { return a.graph().make(Op::col_sum, a); }
inline Var row_sum(Var a) { return a.graph().make(Op::row_sum, a); }
inline Var broadcast_rows(Var v, std::size_t rows) {
  return v.graph().make(Op::broadcast_rows, v, {}, 0.0, Shape{rows});
}
inline Var broadcast_cols(Var v, std::size_t cols) {
  return v.graph().make(Op::broadcast_cols, v, {}, 0.0, Shape{cols});
}
inline Var sum(Var a) { return a.graph().make(Op::sum, a); }
inline Var mean(Var a) { return (1.0 / static_cast<double>(a.value().size())) * sum(a); }
inline Var fill(Var scalar, Shape shape) {
  return scalar.graph().make(Op::fill, scalar, {}, 0.0, std::move(shape));
}
inline Var reshape(Var a, Shape shape) { return a.graph().make(Op::reshape, a, {}, 0.0, std::move(shape)); }
inline Var relu(Var a) { return a.graph().make(Op::relu, a); }
inline Var step(Var a) { return a.graph().make(Op::step, a); }
inline Var relu_mask(Var a, Var gate) { return a.graph().make(Op::relu_mask, a, gate); }
inline Var exp(Var a) { return a.graph().make(Op::exp, a); }
inline Var log(Var a) { return a.graph().make(Op::log, a); }
inline Var sqrt(Var a) { return a.graph().make(Op::sqrt, a); }
inline Var log_softmax(Var a) { return a.graph().make(Op::log_softmax, a); }

inline Var gather(Var a, std::shared_ptr<const std::vector<int>> labels) {
  return a.graph().make(Op::gather, a, {}, 0.0, {}, std::move(labels));
}
inline Var scatter(Var v, std::shared_ptr<const std::vector<int>> labels, std::size_t cols) {
  return v.graph().make(Op::scatter, v, {}, 0.0, Shape{cols}, std::move(labels));
}

/// Unfolds NHWC data into one row per output pixel, columns ordered (kh, kw, c).
/// `x` may have any shape holding geo.batch*height*width*channels elements in
/// NHWC order; the adjoint restores that shape.
inline Var im2col(Var x, const ConvGeometry& geo) {
  if (geo.kernel == 0 || geo.stride == 0 || geo.kernel > geo.height || geo.kernel > geo.width) {
    throw ShapeError("im2col: kernel does not fit input " + to_string(x.shape()));
  }
  if (x.value().size() != geo.batch * geo.height * geo.width * geo.channels) {
    throw ShapeError("im2col: input " + to_string(x.shape()) + " does not match geometry");
  }
  return x.graph().make(Op::im2col, x, {}, 0.0, x.shape(), nullptr, geo);
}

inline Var im2col(Var x, std::size_t kernel, std::size_t stride) {
  const Shape& s = x.shape();
  if (s.size() != 4) throw ShapeError("im2col expects NHWC input, got " + to_string(s));
  return im2col(x, ConvGeometry{s[0], s[1], s[2], s[3], kernel, stride});
}

/// Valid convolution over NHWC data described by `geo`.
/// weight[out, k*k*C], bias[out] -> [N*OH*OW, out], which is NHWC output laid flat.
inline Var conv2d(Var x, Var weight, Var bias, const ConvGeometry& geo) {
  return add_row_vector(matmul_nt(im2col(x, geo), weight), bias);
}

/// x[N,H,W,C] -> [N,OH,OW,out].
inline Var conv2d(Var x, Var weight, Var bias, std::size_t kernel, std::size_t stride) {
  const Shape& s = x.shape();
  if (s.size() != 4) throw ShapeError("conv2d expects NHWC input, got " + to_string(s));
  const ConvGeometry geo{s[0], s[1], s[2], s[3], kernel, stride};
  return reshape(conv2d(x, weight, bias, geo), Shape{s[0], geo.out_h(), geo.out_w(), weight.shape()[0]});
}

/// Per-row cross-entropy of logits[m,n] against integer labels -> [m].
inline Var cross_entropy_rows(Var logits, std::shared_ptr<const std::vector<int>> labels) {
  return -gather(log_softmax(logits), std::move(labels));
}

// ---------------------------------------------------------------------------
// Kernels

namespace detail {

inline void require(bool ok, const char* what, const Shape& a, const Shape& b = {}) {
  if (!ok) throw ShapeError(std::string(what) + ": incompatible shapes " + to_string(a) + " " + to_string(b));
}

inline Tensor zip(const Tensor& a, const Tensor& b, const char* what, auto fn) {
  require(a.shape() == b.shape(), what, a.shape(), b.shape());
  Tensor out(a.shape());
  for (std::size_t i = 0; i < a.size(); ++i) out[i] = fn(a[i], b[i]);
  return out;
}

/// C[m,p] = A[m,k] B[k,p], row by row.
inline void gemm_rows(const double* __restrict A, const double* __restrict B, double* __restrict C,
                      std::size_t m, std::size_t k, std::size_t p) {
  for (std::size_t i = 0; i < m; ++i) {
    double* __restrict c = C + i * p;
    const double* __restrict a = A + i * k;
    for (std::size_t t = 0; t < k; ++t) {
      const double at = a[t];
      const double* __restrict b = B + t * p;
      for (std::size_t j = 0; j < p; ++j) c[j] += at * b[j];
    }
  }
}

inline Tensor map(const Tensor& a, auto fn) {
  Tensor out(a.shape());
  for (std::size_t i = 0; i < a.size(); ++i) out[i] = fn(a[i]);
  return out;
}

}  // namespace detail

inline Tensor Graph::compute(const Node& n) {
  using detail::require;
  auto in = [&](NodeId id) -> const Tensor& { return nodes_[id].value; };
  switch (n.op) {
    case Op::leaf:
      return n.value;
    case Op::add:
      work_ += static_cast<double>(in(n.a).size());
      return detail::zip(in(n.a), in(n.b), "add", [](double x, double y) { return x + y; });
    case Op::sub:
      work_ += static_cast<double>(in(n.a).size());
      return detail::zip(in(n.a), in(n.b), "sub", [](double x, double y) { return x - y; });
    case Op::mul:
      work_ += static_cast<double>(in(n.a).size());
      return detail::zip(in(n.a), in(n.b), "mul", [](double x, double y) { return x * y; });
    case Op::div:
      work_ += static_cast<double>(in(n.a).size());
      return detail::zip(in(n.a), in(n.b), "div", [](double x, double y) { return x / y; });
    case Op::scale: {
      work_ += static_cast<double>(in(n.a).size());
      const double c = n.scalar;
      return detail::map(in(n.a), [c](double x) { return c * x; });
    }
    case Op::matmul: {
      const Tensor& A = in(n.a);
      const Tensor& B = in(n.b);
      require(A.rank() == 2 && B.rank() == 2 && A.dim(1) == B.dim(0), "matmul", A.shape(), B.shape());
      const std::size_t m = A.dim(0), k = A.dim(1), p = B.dim(1);
      Tensor C(Shape{m, p});
      detail::gemm_rows(A.data().data(), B.data().data(), C.data().data(), m, k, p);
      work_ += 2.0 * static_cast<double>(m * k * p);
      return C;
    }
    case Op::matmul_nt: {
      const Tensor& A = in(n.a);
      const Tensor& B = in(n.b);
      require(A.rank() == 2 && B.rank() == 2 && A.dim(1) == B.dim(1), "matmul_nt", A.shape(), B.shape());
      const std::size_t m = A.dim(0), k = A.dim(1), p = B.dim(0);
      std::vector<double> bt(k * p);
      for (std::size_t j = 0; j < p; ++j)
        for (std::size_t t = 0; t < k; ++t) bt[t * p + j] = B[j * k + t];
      Tensor C(Shape{m, p});
      detail::gemm_rows(A.data().data(), bt.data(), C.data().data(), m, k, p);
      work_ += 2.0 * static_cast<double>(m * k * p);
      return C;
    }
    case Op::matmul_tn: {
      const Tensor& A = in(n.a);
      const Tensor& B = in(n.b);
      require(A.rank() == 2 && B.rank() == 2 && A.dim(0) == B.dim(0), "matmul_tn", A.shape(), B.shape());
      const std::size_t k = A.dim(0), m = A.dim(1), p = B.dim(1);
      Tensor C(Shape{m, p});
      const double* __restrict pa = A.data().data();
      const double* __restrict pb = B.data().data();
      double* __restrict pc = C.data().data();
      for (std::size_t t = 0; t < k; ++t) {
        const double* __restrict b = pb + t * p;
        for (std::size_t i = 0; i < m; ++i) {
          const double a = pa[t * m + i];
          double* __restrict c = pc + i * p;
          for (std::size_t j = 0; j < p; ++j) c[j] += a * b[j];
        }
      }
      work_ += 2.0 * static_cast<double>(m * k * p);
      return C;
    }
    case Op::add_row_vec: {
      const Tensor& A = in(n.a);
      const Tensor& v = in(n.b);
      require(A.rank() == 2 && v.rank() == 1 && A.dim(1) == v.dim(0), "add_row_vec", A.shape(), v.shape());
      Tensor out = A;
      const std::size_t cols = v.size();
      for (std::size_t i = 0; i < A.dim(0); ++i) {
        double* o = &out[i * cols];
        for (std::size_t j = 0; j < cols; ++j) o[j] += v[j];
      }
      work_ += static_cast<double>(A.size());
      return out;
    }
    case Op::col_sum: {
      const Tensor& A = in(n.a);
      require(A.rank() == 2, "col_sum", A.shape());
      Tensor out(Shape{A.dim(1)});
      for (std::size_t i = 0; i < A.dim(0); ++i)
        for (std::size_t j = 0; j < A.dim(1); ++j) out[j] += A[i * A.dim(1) + j];
      work_ += static_cast<double>(A.size());
      return out;
    }
    case Op::row_sum: {
      const Tensor& A = in(n.a);
      require(A.rank() == 2, "row_sum", A.shape());
      Tensor out(Shape{A.dim(0)});
      for (std::size_t i = 0; i < A.dim(0); ++i) {
        double s = 0.0;
        for (std::size_t j = 0; j < A.dim(1); ++j) s += A[i * A.dim(1) + j];
        out[i] = s;
      }
      work_ += static_cast<double>(A.size());
      return out;
    }
    case Op::broadcast_rows: {
      const Tensor& v = in(n.a);
      require(v.rank() == 1, "broadcast_rows", v.shape());
      const std::size_t m = n.attr.at(0);
      Tensor out(Shape{m, v.size()});
      for (std::size_t i = 0; i < m; ++i) std::copy(v.data().begin(), v.data().end(), out.row(i).begin());
      work_ += static_cast<double>(out.size());
      return out;
    }
    case Op::broadcast_cols: {
      const Tensor& v = in(n.a);
      require(v.rank() == 1, "broadcast_cols", v.shape());
      const std::size_t p = n.attr.at(0);
      Tensor out(Shape{v.size(), p});
      for (std::size_t i = 0; i < v.size(); ++i) std::fill_n(&out[i * p], p, v[i]);
      work_ += static_cast<double>(out.size());
      return out;
    }
    case Op::sum: {
      const Tensor& A = in(n.a);
      double s = 0.0;
      for (double x : A.data()) s += x;
      work_ += static_cast<double>(A.size());
      return Tensor::scalar(s);
    }
    case Op::fill: {
      const Tensor& s = in(n.a);
      work_ += static_cast<double>(numel(n.attr));
      return Tensor(n.attr, s.item());
    }
    case Op::reshape:
      return in(n.a).reshaped(n.attr);
    case Op::relu:
      work_ += static_cast<double>(in(n.a).size());
      return detail::map(in(n.a), [](double x) { return x > 0.0 ? x : 0.0; });
    case Op::step:
      work_ += static_cast<double>(in(n.a).size());
      return detail::map(in(n.a), [](double x) { return x > 0.0 ? 1.0 : 0.0; });
    case Op::relu_mask:
      work_ += static_cast<double>(in(n.a).size());
      return detail::zip(in(n.a), in(n.b), "relu_mask", [](double x, double gate) { return gate > 0.0 ? x : 0.0; });
    case Op::exp:
      work_ += static_cast<double>(in(n.a).size());
      return detail::map(in(n.a), [](double x) { return std::exp(x); });
    case Op::log:
      work_ += static_cast<double>(in(n.a).size());
      return detail::map(in(n.a), [](double x) { return std::log(x); });
    case Op::sqrt:
      work_ += static_cast<double>(in(n.a).size());
      return detail::map(in(n.a), [](double x) { return std::sqrt(x); });
    case Op::log_softmax: {
      const Tensor& A = in(n.a);
      require(A.rank() == 2, "log_softmax", A.shape());
      const std::size_t m = A.dim(0), p = A.dim(1);
      Tensor out(A.shape());
      for (std::size_t i = 0; i < m; ++i) {
        const double* z = &A[i * p];
        const double zmax = *std::max_element(z, z + p);
        double s = 0.0;
        for (std::size_t j = 0; j < p; ++j) s += std::exp(z[j] - zmax);
        const double lse = zmax + std::log(s);
        for (std::size_t j = 0; j < p; ++j) out[i * p + j] = z[j] - lse;
      }
      work_ += 3.0 * static_cast<double>(A.size());
      return out;
    }
    case Op::gather: {
      const Tensor& A = in(n.a);
      require(A.rank() == 2 && n.labels && n.labels->size() == A.dim(0), "gather", A.shape());
      Tensor out(Shape{A.dim(0)});
      for (std::size_t i = 0; i < A.dim(0); ++i) {
        const int y = (*n.labels)[i];
        if (y < 0 || static_cast<std::size_t>(y) >= A.dim(1)) {
          throw ContractError("label " + std::to_string(y) + " out of range [0, " + std::to_string(A.dim(1)) + ")");
        }
        out[i] = A[i * A.dim(1) + static_cast<std::size_t>(y)];
      }
      return out;
    }
    case Op::scatter: {
      const Tensor& v = in(n.a);
      require(v.rank() == 1 && n.labels && n.labels->size() == v.size(), "scatter", v.shape());
      const std::size_t p = n.attr.at(0);
      Tensor out(Shape{v.size(), p});
      for (std::size_t i = 0; i < v.size(); ++i) out[i * p + static_cast<std::size_t>((*n.labels)[i])] = v[i];
      return out;
    }
    case Op::im2col: {
      const Tensor& x = in(n.a);
      const ConvGeometry& g = n.conv;
      require(x.size() == g.batch * g.height * g.width * g.channels, "im2col", x.shape());
      const std::size_t oh = g.out_h(), ow = g.out_w(), ps = g.patch_size(), c = g.channels;
      Tensor out(Shape{g.patches(), ps});
      std::size_t r = 0;
      for (std::size_t b = 0; b < g.batch; ++b)
        for (std::size_t oy = 0; oy < oh; ++oy)
          for (std::size_t ox = 0; ox < ow; ++ox, ++r) {
            double* dst = &out[r * ps];
            for (std::size_t ky = 0; ky < g.kernel; ++ky) {
              const double* src = &x[((b * g.height + oy * g.stride + ky) * g.width + ox * g.stride) * c];
              std::copy_n(src, g.kernel * c, dst + ky * g.kernel * c);
            }
          }
      work_ += static_cast<double>(out.size());
      return out;
    }
    case Op::col2im: {
      const Tensor& cols = in(n.a);
      const ConvGeometry& g = n.conv;
      require(cols.shape() == Shape{g.patches(), g.patch_size()}, "col2im", cols.shape());
      const std::size_t oh = g.out_h(), ow = g.out_w(), ps = g.patch_size(), c = g.channels;
      Tensor out(n.attr.empty() ? Shape{g.batch, g.height, g.width, g.channels} : n.attr);
      std::size_t r = 0;
      for (std::size_t b = 0; b < g.batch; ++b)
        for (std::size_t oy = 0; oy < oh; ++oy)
          for (std::size_t ox = 0; ox < ow; ++ox, ++r) {
            const double* src = &cols[r * ps];
            for (std::size_t ky = 0; ky < g.kernel; ++ky) {
              double* dst = &out[((b * g.height + oy * g.stride + ky) * g.width + ox * g.stride) * c];
              const double* s = src + ky * g.kernel * c;
              for (std::size_t t = 0; t < g.kernel * c; ++t) dst[t] += s[t];
            }
          }
      work_ += static_cast<double>(cols.size());
      return out;
    }
  }
  throw std::logic_error("unknown op");
}

inline Var Graph::vjp(NodeId id, int which, Var g) {
  // Copy what we need: appending nodes may reallocate the node vector.
  const Op op = nodes_[id].op;
  const Var self = var(id);
  const Var a = var(nodes_[id].a);
  const Var b = nodes_[id].b == kNoNode ? Var{} : var(nodes_[id].b);
  const double scalar = nodes_[id].scalar;
  const auto labels = nodes_[id].labels;
  const ConvGeometry conv = nodes_[id].conv;

  switch (op) {
    case Op::add:
      return g;
    case Op::sub:
      return which == 0 ? g : -g;
    case Op::mul:
      return which == 0 ? g * b : g * a;
    case Op::div:
      return which == 0 ? g / b : -((g * self) / b);
    case Op::scale:
      return scalar * g;
    case Op::matmul:
      return which == 0 ? matmul_nt(g, b) : matmul_tn(a, g);
    case Op::matmul_nt:
      return which == 0 ? matmul(g, b) : matmul_tn(g, a);
    case Op::matmul_tn:
      return which == 0 ? matmul_nt(b, g) : matmul(a, g);
    case Op::add_row_vec:
      return which == 0 ? g : col_sum(g);
    case Op::col_sum:
      return broadcast_rows(g, a.shape()[0]);
    case Op::row_sum:
      return broadcast_cols(g, a.shape()[1]);
    case Op::broadcast_rows:
      return col_sum(g);
    case Op::broadcast_cols:
      return row_sum(g);
    case Op::sum:
      return fill(g, a.shape());
    case Op::fill:
      return sum(g);
    case Op::reshape:
      return reshape(g, a.shape());
    case Op::relu:
      return relu_mask(g, a);
    case Op::relu_mask:
      return relu_mask(g, b);
    case Op::exp:
      return g * self;
    case Op::log:
      return g / a;
    case Op::sqrt:
      return g / (2.0 * self);
    case Op::log_softmax:
      return g - exp(self) * broadcast_cols(row_sum(g), a.shape()[1]);
    case Op::gather:
      return scatter(g, labels, a.shape()[1]);
    case Op::scatter:
      return gather(g, labels);
    case Op::im2col:
      return make(Op::col2im, g, {}, 0.0, a.shape(), nullptr, conv);
    case Op::col2im:
      return make(Op::im2col, g, {}, 0.0, g.shape(), nullptr, conv);
    case Op::leaf:
    case Op::step:
      break;
  }
  throw std::logic_error("vjp requested for a non-differentiable node");
}

inline std::vector<Var> Graph::gradients(Var root_var, std::span<const Var> wrt) {
  const NodeId root = checked(root_var);
  if (nodes_[root].value.size() != 1) {
    throw ContractError("gradient root must be scalar, got shape " + to_string(nodes_[root].value.shape()));
  }
  std::vector<char> reach(root + 1, 0);
  for (const Var& w : wrt) {
    const NodeId id = checked(w);
    if (id <= root) reach[id] = 1;
  }
  for (NodeId id = 0; id <= root; ++id) {
    const Node& n = nodes_[id];
    if (n.op == Op::leaf || n.op == Op::step) continue;
    const bool b_flows = n.b != kNoNode && n.op != Op::relu_mask && reach[n.b];
    if ((n.a != kNoNode && reach[n.a]) || b_flows) reach[id] = 1;
  }

  std::vector<NodeId> adj(root + 1, kNoNode);
  if (reach[root]) {
    adj[root] = input(Tensor(nodes_[root].value.shape(), 1.0)).id();
    for (NodeId id = root + 1; id-- > 0;) {
      if (adj[id] == kNoNode || nodes_[id].op == Op::leaf) continue;
      const NodeId inputs[2] = {nodes_[id].a, nodes_[id].op == Op::relu_mask ? kNoNode : nodes_[id].b};
      for (int which = 0; which < 2; ++which) {
        const NodeId src = inputs[which];
        if (src == kNoNode || !reach[src]) continue;
        Var contrib = vjp(id, which, var(adj[id]));
        adj[src] = adj[src] == kNoNode ? contrib.id() : (var(adj[src]) + contrib).id();
      }
    }
  }

  std::vector<Var> out;
  out.reserve(wrt.size());
  for (const Var& w : wrt) {
    const NodeId id = w.id();
    if (id <= root && adj[id] != kNoNode) {
      out.push_back(var(adj[id]));
    } else {
      out.push_back(input(Tensor(nodes_[id].value.shape(), 0.0)));
    }
  }
  return out;
}

/// Root value of a recorded computation.
inline const Tensor& forward_eval(const Graph& graph, NodeId root) { return graph.value(root); }

/// Central finite differences of a scalar function, one coordinate at a time.
template <class F>
Tensor finite_diff_gradient(F&& f, const Tensor& x, double h) {
  if (!(h > 0.0)) throw ContractError("finite_diff_gradient: step must be positive");
  Tensor grad(x.shape());
  Tensor probe = x;
  for (std::size_t i = 0; i < x.size(); ++i) {
    const double orig = probe[i];
    probe[i] = orig + h;
    const double up = f(static_cast<const Tensor&>(probe));
    probe[i] = orig - h;
    const double down = f(static_cast<const Tensor&>(probe));
    probe[i] = orig;
    grad[i] = (up - down) / (2.0 * h);
  }
  return grad;
}

}  // namespace colab
