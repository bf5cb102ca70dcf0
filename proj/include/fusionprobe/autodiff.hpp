#pragma once

// Reverse-mode automatic differentiation over Tensor values.
//
// A Graph records every forward operation as a node. Nodes are appended in
// creation order, which is a valid topological order, so backward() simply
// walks the node list in reverse. A Graph is a single-use tape: once
// backward() has run it refuses to run again.

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <functional>
#include <limits>
#include <string>
#include <utility>
#include <vector>

#include "fusionprobe/error.hpp"
#include "fusionprobe/tensor.hpp"

namespace fprobe {

template <typename Scalar>
class Graph;

/// Handle to a node of a Graph. Cheap to copy; only valid while its Graph lives.
template <typename Scalar>
struct Var {
  Graph<Scalar>* graph = nullptr;
  std::size_t id = 0;

  const Tensor<Scalar>& value() const { return graph->value(*this); }
  const Shape& shape() const { return value().shape(); }
  std::size_t dim(std::size_t axis) const { return shape().at(axis); }
  std::size_t rank() const { return shape().size(); }
};

template <typename Scalar>
class Graph {
 public:
  using VarT = Var<Scalar>;
  using BackwardFn = std::function<void(Graph&, std::size_t)>;

  Graph() { nodes_.reserve(256); }
  Graph(const Graph&) = delete;
  Graph& operator=(const Graph&) = delete;

  VarT constant(Tensor<Scalar> value) { return record("constant", std::move(value), false, {}); }

  VarT leaf(Tensor<Scalar> value, bool requires_grad = true) {
    return record("leaf", std::move(value), requires_grad, {});
  }

  const Tensor<Scalar>& value(VarT v) const { return nodes_.at(v.id).value; }
  bool requires_grad(VarT v) const { return nodes_.at(v.id).requires_grad; }
  std::size_t size() const noexcept { return nodes_.size(); }
  bool consumed() const noexcept { return consumed_; }

  /// Gradient of the last backward() root with respect to `v`.
  Tensor<Scalar> grad(VarT v) const {
    const Node& node = nodes_.at(v.id);
    require(node.requires_grad, ErrorCode::kInvalidArgument,
            "gradient requested for a node that does not require grad");
    if (node.grad.empty()) return Tensor<Scalar>(node.value.shape());
    return Tensor<Scalar>(node.value.shape(), node.grad);
  }

  /// Whether a gradient buffer was ever allocated for `v`.
  bool has_grad_buffer(VarT v) const { return !nodes_.at(v.id).grad.empty(); }

  void backward(VarT root) {
    require(!consumed_, ErrorCode::kTapeConsumed, "backward() already ran on this graph");
    require(root.graph == this, ErrorCode::kInvalidArgument, "root belongs to another graph");
    require(value(root).size() == 1, ErrorCode::kDimension, "backward() needs a scalar root");
    consumed_ = true;
    if (!nodes_[root.id].requires_grad) return;
    nodes_[root.id].grad.assign(1, Scalar{1});
    for (std::size_t i = root.id + 1; i-- > 0;) {
      Node& node = nodes_[i];
      if (!node.requires_grad || node.grad.empty() || !node.backward) continue;
      node.backward(*this, i);
    }
  }

  // Op-implementation interface.

  VarT record(const char* op, Tensor<Scalar> value, bool requires_grad, BackwardFn backward) {
    if (!value.all_finite())
      throw Error(ErrorCode::kNonFinite, std::string("non-finite output from ") + op);
    nodes_.push_back(Node{std::move(value), requires_grad, {}, requires_grad ? std::move(backward) : BackwardFn{}});
    return VarT{this, nodes_.size() - 1};
  }

  const std::vector<Scalar>& out_grad(std::size_t id) const { return nodes_[id].grad; }

  /// Gradient accumulator for an input node, or nullptr if that node does not
  /// require a gradient. Buffers are allocated on first use.
  Scalar* grad_target(std::size_t id) {
    Node& node = nodes_[id];
    if (!node.requires_grad) return nullptr;
    if (node.grad.empty()) node.grad.assign(node.value.size(), Scalar{0});
    return node.grad.data();
  }

 private:
  struct Node {
    Tensor<Scalar> value;
    bool requires_grad;
    std::vector<Scalar> grad;
    BackwardFn backward;
  };

  std::vector<Node> nodes_;
  bool consumed_ = false;
};

namespace detail {

/// dst[c * rows + r] = src[r * cols + c]
template <typename Scalar>
void transpose_into(const Scalar* src, std::size_t rows, std::size_t cols, Scalar* dst) {
  for (std::size_t r = 0; r < rows; ++r)
    for (std::size_t c = 0; c < cols; ++c) dst[c * rows + r] = src[r * cols + c];
}

template <typename Scalar>
struct GemmScratch {
  std::vector<Scalar> at, bt, ct;
};

/// c[I, J] += a[I, K] @ b[K, J], all row-major. Narrow outputs (J small,
/// e.g. per-head attention values) are computed transposed so the inner
/// loop runs over I instead of J.
template <typename Scalar>
void gemm_acc(const Scalar* a, const Scalar* b, Scalar* c, std::size_t I, std::size_t K, std::size_t J,
              GemmScratch<Scalar>& s) {
  if (J < 16 && I > J) {
    s.at.resize(K * I);
    s.bt.resize(J * K);
    s.ct.resize(J * I);
    transpose_into(a, I, K, s.at.data());
    transpose_into(b, K, J, s.bt.data());
    transpose_into(c, I, J, s.ct.data());
    gemm_acc(s.bt.data(), s.at.data(), s.ct.data(), J, K, I, s);
    transpose_into(s.ct.data(), J, I, c);
    return;
  }
  for (std::size_t i = 0; i < I; ++i) {
    Scalar* crow = c + i * J;
    for (std::size_t k = 0; k < K; ++k) {
      const Scalar aik = a[i * K + k];
      const Scalar* brow = b + k * J;
      for (std::size_t j = 0; j < J; ++j) crow[j] += aik * brow[j];
    }
  }
}

template <typename Scalar>
Graph<Scalar>& same_graph(Var<Scalar> a, Var<Scalar> b) {
  require(a.graph != nullptr && a.graph == b.graph, ErrorCode::kInvalidArgument,
          "operands belong to different graphs");
  return *a.graph;
}

template <typename Scalar>
bool any_grad(Var<Scalar> a) {
  return a.graph->requires_grad(a);
}

template <typename Scalar>
bool any_grad(Var<Scalar> a, Var<Scalar> b) {
  return a.graph->requires_grad(a) || b.graph->requires_grad(b);
}

inline void check_axis(std::size_t axis, std::size_t rank, const char* op) {
  require(axis < rank, ErrorCode::kDimension,
          [&] { return std::string(op) + ": axis " + std::to_string(axis) + " out of range for rank " +
              std::to_string(rank); });
}

/// (outer, n, inner) factorisation of a shape around `axis`.
struct AxisSplit {
  std::size_t outer = 1, n = 1, inner = 1;
};

inline AxisSplit split_at(const Shape& shape, std::size_t axis) {
  AxisSplit s;
  for (std::size_t i = 0; i < axis; ++i) s.outer *= shape[i];
  s.n = shape[axis];
  for (std::size_t i = axis + 1; i < shape.size(); ++i) s.inner *= shape[i];
  return s;
}

inline Shape drop_axis(const Shape& shape, std::size_t axis) {
  Shape out;
  for (std::size_t i = 0; i < shape.size(); ++i)
    if (i != axis) out.push_back(shape[i]);
  if (out.empty()) out.push_back(1);
  return out;
}

/// `small` must equal the trailing dims of `big`; returns the repeat period.
inline std::size_t suffix_period(const Shape& big, const Shape& small, const char* op) {
  bool ok = small.size() <= big.size() &&
            std::equal(small.rbegin(), small.rend(), big.rbegin());
  require(ok, ErrorCode::kDimension,
          [&] { return std::string(op) + ": cannot broadcast " + shape_string(small) + " onto " +
              shape_string(big); });
  return shape_size(small);
}

enum class Binary { kAdd, kSub, kMul };

template <typename Scalar>
Var<Scalar> binary(Var<Scalar> a, Var<Scalar> b, Binary kind, const char* op) {
  Graph<Scalar>& g = same_graph(a, b);
  const auto& av = a.value();
  const auto& bv = b.value();
  const std::size_t m = suffix_period(av.shape(), bv.shape(), op);
  const std::size_t n = av.size();
  Tensor<Scalar> out(av.shape());
  auto o = out.data();
  auto x = av.data();
  auto y = bv.data();
  for (std::size_t i = 0; i < n; ++i) {
    const Scalar bi = y[i % m];
    switch (kind) {
      case Binary::kAdd: o[i] = x[i] + bi; break;
      case Binary::kSub: o[i] = x[i] - bi; break;
      case Binary::kMul: o[i] = x[i] * bi; break;
    }
  }
  const std::size_t ia = a.id, ib = b.id;
  return g.record(op, std::move(out), any_grad(a, b), [ia, ib, n, m, kind](Graph<Scalar>& g, std::size_t self) {
    const auto& go = g.out_grad(self);
    Scalar* ga = g.grad_target(ia);
    Scalar* gb = g.grad_target(ib);
    const auto& x = g.value(Var<Scalar>{&g, ia}).data();
    const auto& y = g.value(Var<Scalar>{&g, ib}).data();
    for (std::size_t i = 0; i < n; ++i) {
      const std::size_t j = i % m;
      switch (kind) {
        case Binary::kAdd:
          if (ga) ga[i] += go[i];
          if (gb) gb[j] += go[i];
          break;
        case Binary::kSub:
          if (ga) ga[i] += go[i];
          if (gb) gb[j] -= go[i];
          break;
        case Binary::kMul:
          if (ga) ga[i] += go[i] * y[j];
          if (gb) gb[j] += go[i] * x[i];
          break;
      }
    }
  });
}

enum class Unary { kRelu, kTanh, kSigmoid };

template <typename Scalar>
Var<Scalar> unary(Var<Scalar> a, Unary kind, const char* op) {
  Graph<Scalar>& g = *a.graph;
  const auto& av = a.value();
  Tensor<Scalar> out(av.shape());
  auto o = out.data();
  auto x = av.data();
  for (std::size_t i = 0; i < x.size(); ++i) {
    switch (kind) {
      case Unary::kRelu: o[i] = x[i] > Scalar{0} ? x[i] : Scalar{0}; break;
      case Unary::kTanh: o[i] = std::tanh(x[i]); break;
      case Unary::kSigmoid: o[i] = Scalar{1} / (Scalar{1} + std::exp(-x[i])); break;
    }
  }
  const std::size_t ia = a.id;
  return g.record(op, std::move(out), any_grad(a), [ia, kind](Graph<Scalar>& g, std::size_t self) {
    Scalar* ga = g.grad_target(ia);
    if (!ga) return;
    const auto& go = g.out_grad(self);
    auto x = g.value(Var<Scalar>{&g, ia}).data();
    auto y = g.value(Var<Scalar>{&g, self}).data();
    for (std::size_t i = 0; i < go.size(); ++i) {
      switch (kind) {
        case Unary::kRelu: ga[i] += x[i] > Scalar{0} ? go[i] : Scalar{0}; break;
        case Unary::kTanh: ga[i] += go[i] * (Scalar{1} - y[i] * y[i]); break;
        case Unary::kSigmoid: ga[i] += go[i] * y[i] * (Scalar{1} - y[i]); break;
      }
    }
  });
}

/// Gathers `src[map[i]]` into element i; the backward pass scatters. Used for
/// all pure data-movement ops.
template <typename Scalar>
Var<Scalar> gather(Var<Scalar> a, Shape shape, std::vector<std::size_t> map, const char* op) {
  Graph<Scalar>& g = *a.graph;
  auto x = a.value().data();
  Tensor<Scalar> out(std::move(shape));
  auto o = out.data();
  for (std::size_t i = 0; i < map.size(); ++i) o[i] = x[map[i]];
  const std::size_t ia = a.id;
  return g.record(op, std::move(out), any_grad(a),
                  [ia, map = std::move(map)](Graph<Scalar>& g, std::size_t self) {
                    Scalar* ga = g.grad_target(ia);
                    if (!ga) return;
                    const auto& go = g.out_grad(self);
                    for (std::size_t i = 0; i < map.size(); ++i) ga[map[i]] += go[i];
                  });
}

}  // namespace detail

// ---------------------------------------------------------------------------
// Elementwise

/// a + b, where b's shape equals the trailing dims of a's (leading-dim broadcast only).
template <typename Scalar>
Var<Scalar> add(Var<Scalar> a, Var<Scalar> b) {
  if (b.rank() > a.rank()) std::swap(a, b);
  return detail::binary(a, b, detail::Binary::kAdd, "add");
}

template <typename Scalar>
Var<Scalar> sub(Var<Scalar> a, Var<Scalar> b) {
  return detail::binary(a, b, detail::Binary::kSub, "sub");
}

template <typename Scalar>
Var<Scalar> mul(Var<Scalar> a, Var<Scalar> b) {
  if (b.rank() > a.rank()) std::swap(a, b);
  return detail::binary(a, b, detail::Binary::kMul, "mul");
}

template <typename Scalar>
Var<Scalar> scale(Var<Scalar> a, Scalar factor) {
  Graph<Scalar>& g = *a.graph;
  Tensor<Scalar> out(a.shape());
  auto x = a.value().data();
  auto o = out.data();
  for (std::size_t i = 0; i < x.size(); ++i) o[i] = x[i] * factor;
  const std::size_t ia = a.id;
  return g.record("scale", std::move(out), detail::any_grad(a), [ia, factor](Graph<Scalar>& g, std::size_t self) {
    Scalar* ga = g.grad_target(ia);
    if (!ga) return;
    const auto& go = g.out_grad(self);
    for (std::size_t i = 0; i < go.size(); ++i) ga[i] += go[i] * factor;
  });
}

template <typename Scalar>
Var<Scalar> relu(Var<Scalar> a) {
  return detail::unary(a, detail::Unary::kRelu, "relu");
}

template <typename Scalar>
Var<Scalar> tanh(Var<Scalar> a) {
  return detail::unary(a, detail::Unary::kTanh, "tanh");
}

template <typename Scalar>
Var<Scalar> sigmoid(Var<Scalar> a) {
  return detail::unary(a, detail::Unary::kSigmoid, "sigmoid");
}

template <typename Scalar>
Var<Scalar> operator+(Var<Scalar> a, Var<Scalar> b) { return add(a, b); }
template <typename Scalar>
Var<Scalar> operator-(Var<Scalar> a, Var<Scalar> b) { return sub(a, b); }
template <typename Scalar>
Var<Scalar> operator*(Var<Scalar> a, Var<Scalar> b) { return mul(a, b); }

// ---------------------------------------------------------------------------
// Linear algebra

/// Batched matrix product [..., i, k] x [..., k, j]. Leading batch dims
/// broadcast numpy-style (missing or size-1 dims repeat).
template <typename Scalar>
Var<Scalar> matmul(Var<Scalar> a, Var<Scalar> b) {
  Graph<Scalar>& g = detail::same_graph(a, b);
  const Shape& as = a.shape();
  const Shape& bs = b.shape();
  require(as.size() >= 2 && bs.size() >= 2, ErrorCode::kDimension,
          [&] { return "matmul needs rank >= 2, got " + shape_string(as) + " and " + shape_string(bs); });
  const std::size_t I = as[as.size() - 2], K = as.back(), J = bs.back();
  require(bs[bs.size() - 2] == K, ErrorCode::kDimension,
          [&] { return "matmul inner dimensions differ: " + shape_string(as) + " @ " + shape_string(bs); });

  const std::size_t ra = as.size() - 2, rb = bs.size() - 2, rank = std::max(ra, rb);
  Shape batch(rank);
  for (std::size_t i = 0; i < rank; ++i) {
    const std::size_t da = i + ra >= rank ? as[i + ra - rank] : 1;
    const std::size_t db = i + rb >= rank ? bs[i + rb - rank] : 1;
    require(da == db || da == 1 || db == 1, ErrorCode::kDimension,
            [&] { return "matmul batch dims not broadcastable: " + shape_string(as) + " @ " + shape_string(bs); });
    batch[i] = std::max(da, db);
  }
  const std::size_t nb = shape_size(batch);
  std::vector<std::size_t> off_a(nb), off_b(nb);
  for (std::size_t flat = 0; flat < nb; ++flat) {
    std::size_t rem = flat, oa = 0, ob = 0, sa = I * K, sb = K * J;
    for (std::size_t i = rank; i-- > 0;) {
      const std::size_t idx = rem % batch[i];
      rem /= batch[i];
      if (i + ra >= rank) {
        const std::size_t d = as[i + ra - rank];
        if (d != 1) oa += idx * sa;
        sa *= d;
      }
      if (i + rb >= rank) {
        const std::size_t d = bs[i + rb - rank];
        if (d != 1) ob += idx * sb;
        sb *= d;
      }
    }
    off_a[flat] = oa;
    off_b[flat] = ob;
  }

  Shape out_shape = batch;
  out_shape.push_back(I);
  out_shape.push_back(J);
  Tensor<Scalar> out(out_shape);
  auto A = a.value().data();
  auto B = b.value().data();
  auto C = out.data();
  detail::GemmScratch<Scalar> scratch;
  for (std::size_t n = 0; n < nb; ++n)
    detail::gemm_acc(A.data() + off_a[n], B.data() + off_b[n], C.data() + n * I * J, I, K, J, scratch);

  const std::size_t ia = a.id, ib = b.id;
  return g.record("matmul", std::move(out), detail::any_grad(a, b),
                  [ia, ib, I, K, J, nb, off_a = std::move(off_a), off_b = std::move(off_b)](
                      Graph<Scalar>& g, std::size_t self) {
                    const auto& go = g.out_grad(self);
                    Scalar* ga = g.grad_target(ia);
                    Scalar* gb = g.grad_target(ib);
                    auto A = g.value(Var<Scalar>{&g, ia}).data();
                    auto B = g.value(Var<Scalar>{&g, ib}).data();
                    detail::GemmScratch<Scalar> scratch;
                    std::vector<Scalar> t;
                    for (std::size_t n = 0; n < nb; ++n) {
                      const Scalar* pg = go.data() + n * I * J;
                      if (ga) {
                        // dA += dC @ B^T
                        t.resize(J * K);
                        detail::transpose_into(B.data() + off_b[n], K, J, t.data());
                        detail::gemm_acc(pg, t.data(), ga + off_a[n], I, J, K, scratch);
                      }
                      if (gb) {
                        // dB += A^T @ dC
                        t.resize(K * I);
                        detail::transpose_into(A.data() + off_a[n], I, K, t.data());
                        detail::gemm_acc(t.data(), pg, gb + off_b[n], K, I, J, scratch);
                      }
                    }
                  });
}

// ---------------------------------------------------------------------------
// Normalisation and reductions

/// Max-stabilised softmax along `axis`.
template <typename Scalar>
Var<Scalar> softmax(Var<Scalar> a, std::size_t axis) {
  detail::check_axis(axis, a.rank(), "softmax");
  Graph<Scalar>& g = *a.graph;
  const auto sp = detail::split_at(a.shape(), axis);
  auto x = a.value().data();
  Tensor<Scalar> out(a.shape());
  auto y = out.data();
  for (std::size_t o = 0; o < sp.outer; ++o)
    for (std::size_t in = 0; in < sp.inner; ++in) {
      const std::size_t base = o * sp.n * sp.inner + in;
      Scalar mx = x[base];
      for (std::size_t j = 1; j < sp.n; ++j) mx = std::max(mx, x[base + j * sp.inner]);
      Scalar total{0};
      for (std::size_t j = 0; j < sp.n; ++j) {
        const Scalar e = std::exp(x[base + j * sp.inner] - mx);
        y[base + j * sp.inner] = e;
        total += e;
      }
      for (std::size_t j = 0; j < sp.n; ++j) y[base + j * sp.inner] /= total;
    }
  const std::size_t ia = a.id;
  return g.record("softmax", std::move(out), detail::any_grad(a), [ia, sp](Graph<Scalar>& g, std::size_t self) {
    Scalar* ga = g.grad_target(ia);
    if (!ga) return;
    const auto& go = g.out_grad(self);
    auto y = g.value(Var<Scalar>{&g, self}).data();
    for (std::size_t o = 0; o < sp.outer; ++o)
      for (std::size_t in = 0; in < sp.inner; ++in) {
        const std::size_t base = o * sp.n * sp.inner + in;
        Scalar dot{0};
        for (std::size_t j = 0; j < sp.n; ++j) dot += go[base + j * sp.inner] * y[base + j * sp.inner];
        for (std::size_t j = 0; j < sp.n; ++j) {
          const std::size_t idx = base + j * sp.inner;
          ga[idx] += y[idx] * (go[idx] - dot);
        }
      }
  });
}

/// Mean over `axis`; the axis is removed from the output shape.
template <typename Scalar>
Var<Scalar> mean(Var<Scalar> a, std::size_t axis) {
  detail::check_axis(axis, a.rank(), "mean");
  Graph<Scalar>& g = *a.graph;
  const auto sp = detail::split_at(a.shape(), axis);
  auto x = a.value().data();
  Tensor<Scalar> out(detail::drop_axis(a.shape(), axis));
  auto y = out.data();
  const Scalar inv = Scalar{1} / static_cast<Scalar>(sp.n);
  for (std::size_t o = 0; o < sp.outer; ++o)
    for (std::size_t in = 0; in < sp.inner; ++in) {
      Scalar total{0};
      for (std::size_t j = 0; j < sp.n; ++j) total += x[(o * sp.n + j) * sp.inner + in];
      y[o * sp.inner + in] = total / static_cast<Scalar>(sp.n);
    }
  const std::size_t ia = a.id;
  return g.record("mean", std::move(out), detail::any_grad(a), [ia, sp, inv](Graph<Scalar>& g, std::size_t self) {
    Scalar* ga = g.grad_target(ia);
    if (!ga) return;
    const auto& go = g.out_grad(self);
    for (std::size_t o = 0; o < sp.outer; ++o)
      for (std::size_t in = 0; in < sp.inner; ++in) {
        const Scalar share = go[o * sp.inner + in] * inv;
        for (std::size_t j = 0; j < sp.n; ++j) ga[(o * sp.n + j) * sp.inner + in] += share;
      }
  });
}

/// Max over `axis`. The gradient goes to the first (lowest index) maximiser.
template <typename Scalar>
Var<Scalar> max(Var<Scalar> a, std::size_t axis) {
  detail::check_axis(axis, a.rank(), "max");
  Graph<Scalar>& g = *a.graph;
  const auto sp = detail::split_at(a.shape(), axis);
  auto x = a.value().data();
  Tensor<Scalar> out(detail::drop_axis(a.shape(), axis));
  auto y = out.data();
  std::vector<std::size_t> arg(sp.outer * sp.inner);
  for (std::size_t o = 0; o < sp.outer; ++o)
    for (std::size_t in = 0; in < sp.inner; ++in) {
      std::size_t best = (o * sp.n) * sp.inner + in;
      for (std::size_t j = 1; j < sp.n; ++j) {
        const std::size_t idx = (o * sp.n + j) * sp.inner + in;
        if (x[idx] > x[best]) best = idx;
      }
      y[o * sp.inner + in] = x[best];
      arg[o * sp.inner + in] = best;
    }
  const std::size_t ia = a.id;
  return g.record("max", std::move(out), detail::any_grad(a),
                  [ia, arg = std::move(arg)](Graph<Scalar>& g, std::size_t self) {
                    Scalar* ga = g.grad_target(ia);
                    if (!ga) return;
                    const auto& go = g.out_grad(self);
                    for (std::size_t i = 0; i < arg.size(); ++i) ga[arg[i]] += go[i];
                  });
}

/// Sum of all elements, shape {1}.
template <typename Scalar>
Var<Scalar> sum(Var<Scalar> a) {
  Graph<Scalar>& g = *a.graph;
  Scalar total{0};
  for (Scalar v : a.value().data()) total += v;
  const std::size_t ia = a.id;
  return g.record("sum", Tensor<Scalar>::scalar(total), detail::any_grad(a), [ia](Graph<Scalar>& g, std::size_t self) {
    Scalar* ga = g.grad_target(ia);
    if (!ga) return;
    const Scalar go = g.out_grad(self)[0];
    const std::size_t n = g.value(Var<Scalar>{&g, ia}).size();
    for (std::size_t i = 0; i < n; ++i) ga[i] += go;
  });
}

/// Layer normalisation over the last axis with affine gain and bias.
template <typename Scalar>
Var<Scalar> layer_norm(Var<Scalar> x, Var<Scalar> gain, Var<Scalar> bias, Scalar eps = Scalar{1e-5}) {
  Graph<Scalar>& g = detail::same_graph(x, gain);
  detail::same_graph(x, bias);
  const std::size_t D = x.shape().back();
  require(gain.shape() == Shape{D} && bias.shape() == Shape{D}, ErrorCode::kDimension,
          [&] { return "layer_norm parameters must have shape [" + std::to_string(D) + "]"; });
  const std::size_t rows = x.value().size() / D;
  auto xv = x.value().data();
  auto gv = gain.value().data();
  auto bv = bias.value().data();
  Tensor<Scalar> out(x.shape());
  auto y = out.data();
  std::vector<Scalar> xhat(xv.size()), inv_std(rows);
  for (std::size_t r = 0; r < rows; ++r) {
    const Scalar* row = xv.data() + r * D;
    Scalar mu{0};
    for (std::size_t d = 0; d < D; ++d) mu += row[d];
    mu /= static_cast<Scalar>(D);
    Scalar var{0};
    for (std::size_t d = 0; d < D; ++d) var += (row[d] - mu) * (row[d] - mu);
    var /= static_cast<Scalar>(D);
    const Scalar is = Scalar{1} / std::sqrt(var + eps);
    inv_std[r] = is;
    for (std::size_t d = 0; d < D; ++d) {
      const Scalar h = (row[d] - mu) * is;
      xhat[r * D + d] = h;
      y[r * D + d] = h * gv[d] + bv[d];
    }
  }
  const bool needs = detail::any_grad(x) || detail::any_grad(gain) || detail::any_grad(bias);
  const std::size_t ix = x.id, ig = gain.id, ib = bias.id;
  return g.record("layer_norm", std::move(out), needs,
                  [ix, ig, ib, D, rows, xhat = std::move(xhat), inv_std = std::move(inv_std)](
                      Graph<Scalar>& g, std::size_t self) {
                    const auto& go = g.out_grad(self);
                    Scalar* gx = g.grad_target(ix);
                    Scalar* gg = g.grad_target(ig);
                    Scalar* gb = g.grad_target(ib);
                    auto gv = g.value(Var<Scalar>{&g, ig}).data();
                    std::vector<Scalar> dh(D);
                    for (std::size_t r = 0; r < rows; ++r) {
                      const Scalar* gor = go.data() + r * D;
                      const Scalar* hr = xhat.data() + r * D;
                      Scalar mean_dh{0}, mean_dh_h{0};
                      for (std::size_t d = 0; d < D; ++d) {
                        if (gg) gg[d] += gor[d] * hr[d];
                        if (gb) gb[d] += gor[d];
                        dh[d] = gor[d] * gv[d];
                        mean_dh += dh[d];
                        mean_dh_h += dh[d] * hr[d];
                      }
                      if (!gx) continue;
                      mean_dh /= static_cast<Scalar>(D);
                      mean_dh_h /= static_cast<Scalar>(D);
                      for (std::size_t d = 0; d < D; ++d)
                        gx[r * D + d] += inv_std[r] * (dh[d] - mean_dh - hr[d] * mean_dh_h);
                    }
                  });
}

/// Softmax cross-entropy of a logit vector against `target`, shape {1}.
template <typename Scalar>
Var<Scalar> cross_entropy(Var<Scalar> logits, std::size_t target) {
  Graph<Scalar>& g = *logits.graph;
  auto z = logits.value().data();
  const std::size_t C = z.size();
  require(target < C, ErrorCode::kInvalidArgument,
          [&] { return "class id " + std::to_string(target) + " out of range for " + std::to_string(C) + " logits"; });
  Scalar mx = z[0];
  for (Scalar v : z) mx = std::max(mx, v);
  Scalar total{0};
  for (Scalar v : z) total += std::exp(v - mx);
  const Scalar loss = std::log(total) + mx - z[target];
  const std::size_t il = logits.id;
  return g.record("cross_entropy", Tensor<Scalar>::scalar(loss), detail::any_grad(logits),
                  [il, target, mx, total](Graph<Scalar>& g, std::size_t self) {
                    Scalar* gl = g.grad_target(il);
                    if (!gl) return;
                    const Scalar go = g.out_grad(self)[0];
                    auto z = g.value(Var<Scalar>{&g, il}).data();
                    for (std::size_t c = 0; c < z.size(); ++c) {
                      const Scalar p = std::exp(z[c] - mx) / total;
                      gl[c] += go * (p - (c == target ? Scalar{1} : Scalar{0}));
                    }
                  });
}

// ---------------------------------------------------------------------------
// Data movement

template <typename Scalar>
Var<Scalar> reshape(Var<Scalar> a, Shape shape) {
  require(shape_size(shape) == a.value().size(), ErrorCode::kDimension,
          [&] { return "reshape " + shape_string(a.shape()) + " -> " + shape_string(shape); });
  std::vector<std::size_t> map(a.value().size());
  std::iota(map.begin(), map.end(), std::size_t{0});
  return detail::gather(a, std::move(shape), std::move(map), "reshape");
}

/// Axis permutation: output axis i is input axis perm[i].
template <typename Scalar>
Var<Scalar> permute(Var<Scalar> a, const std::vector<std::size_t>& perm) {
  const Shape& in = a.shape();
  const std::size_t r = in.size();
  std::vector<bool> seen(r, false);
  require(perm.size() == r, ErrorCode::kDimension, "permute: wrong permutation length");
  for (std::size_t p : perm) {
    require(p < r && !seen[p], ErrorCode::kDimension, "permute: invalid permutation");
    seen[p] = true;
  }
  std::vector<std::size_t> in_stride(r, 1);
  for (std::size_t i = r - 1; i-- > 0;) in_stride[i] = in_stride[i + 1] * in[i + 1];
  Shape out(r);
  for (std::size_t i = 0; i < r; ++i) out[i] = in[perm[i]];
  std::vector<std::size_t> map(a.value().size());
  std::vector<std::size_t> idx(r, 0);
  for (std::size_t flat = 0; flat < map.size(); ++flat) {
    std::size_t src = 0;
    for (std::size_t i = 0; i < r; ++i) src += idx[i] * in_stride[perm[i]];
    map[flat] = src;
    for (std::size_t i = r; i-- > 0;) {
      if (++idx[i] < out[i]) break;
      idx[i] = 0;
    }
  }
  return detail::gather(a, std::move(out), std::move(map), "permute");
}

/// Contiguous slice [start, start + length) along `axis`.
template <typename Scalar>
Var<Scalar> slice(Var<Scalar> a, std::size_t axis, std::size_t start, std::size_t length) {
  detail::check_axis(axis, a.rank(), "slice");
  require(length > 0 && start + length <= a.dim(axis), ErrorCode::kDimension,
          [&] { return "slice [" + std::to_string(start) + ", " + std::to_string(start + length) + ") of axis size " +
              std::to_string(a.dim(axis)); });
  const auto sp = detail::split_at(a.shape(), axis);
  Shape out = a.shape();
  out[axis] = length;
  std::vector<std::size_t> map;
  map.reserve(sp.outer * length * sp.inner);
  for (std::size_t o = 0; o < sp.outer; ++o)
    for (std::size_t j = 0; j < length; ++j)
      for (std::size_t in = 0; in < sp.inner; ++in) map.push_back((o * sp.n + start + j) * sp.inner + in);
  return detail::gather(a, std::move(out), std::move(map), "slice");
}

/// Delays a sequence along axis 0: row t of the output is row t - steps of the
/// input, and the first `steps` rows are zero.
template <typename Scalar>
Var<Scalar> causal_shift(Var<Scalar> a, std::size_t steps) {
  Graph<Scalar>& g = *a.graph;
  const std::size_t T = a.dim(0);
  const std::size_t row = a.value().size() / T;
  Tensor<Scalar> out(a.shape());
  auto x = a.value().data();
  auto y = out.data();
  for (std::size_t t = steps; t < T; ++t)
    std::copy_n(x.data() + (t - steps) * row, row, y.data() + t * row);
  const std::size_t ia = a.id;
  return g.record("causal_shift", std::move(out), detail::any_grad(a), [ia, T, row, steps](Graph<Scalar>& g, std::size_t self) {
    Scalar* ga = g.grad_target(ia);
    if (!ga) return;
    const auto& go = g.out_grad(self);
    for (std::size_t t = steps; t < T; ++t)
      for (std::size_t i = 0; i < row; ++i) ga[(t - steps) * row + i] += go[t * row + i];
  });
}

}  // namespace fprobe
