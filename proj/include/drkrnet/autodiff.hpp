#pragma once

// Tape-based reverse-mode differentiation over dense tensors.
//
// Nodes are appended in evaluation order, so a reverse sweep over the node
// list is a valid topological order. Only nodes that (transitively) depend on
// a leaf with requires_grad carry a backward closure and a gradient buffer.

#include "tensor.hpp"

#include <Eigen/Core>

#include <array>
#include <functional>
#include <initializer_list>
#include <string>
#include <string_view>
#include <vector>

namespace drkrnet {

class Tape;

struct Var {
  Tape *tape = nullptr;
  std::size_t id = 0;
};

class Tape {
public:
  using Backward = std::function<void(Tape &, const Tensor &out_grad)>;

  Var leaf(Tensor value, bool requires_grad, std::string label = "leaf") {
    check_finite(value, label);
    nodes_.push_back(Node{std::move(label), std::move(value), Tensor{}, requires_grad,
                          false, nullptr});
    return Var{this, nodes_.size() - 1};
  }

  Var constant(Tensor value) { return leaf(std::move(value), false, "constant"); }

  const Tensor &value(Var v) const { return nodes_.at(v.id).value; }
  bool requires_grad(Var v) const { return nodes_.at(v.id).requires_grad; }
  std::size_t size() const { return nodes_.size(); }

  /// Accumulated gradient; zeros if nothing flowed into this node.
  Tensor grad(Var v) const {
    const auto &n = nodes_.at(v.id);
    return n.has_grad ? n.grad : Tensor(n.value.shape());
  }

  /// Record an op result. The backward closure is dropped when no parent
  /// requires gradients.
  Var record(std::string op, Tensor value, const std::vector<Var> &parents,
             Backward backward) {
    check_finite(value, op);
    bool needs = false;
    for (auto p : parents)
      needs = needs || nodes_.at(p.id).requires_grad;
    nodes_.push_back(Node{std::move(op), std::move(value), Tensor{}, needs, false,
                          needs ? std::move(backward) : nullptr});
    return Var{this, nodes_.size() - 1};
  }

  /// Gradient buffer of a parent, allocated on first use. Returns nullptr when
  /// the parent does not take gradients.
  Tensor *grad_sink(Var v) {
    auto &n = nodes_.at(v.id);
    if (!n.requires_grad)
      return nullptr;
    if (!n.has_grad) {
      n.grad = Tensor(n.value.shape());
      n.has_grad = true;
    }
    return &n.grad;
  }

  void backward(Var root) {
    auto &r = nodes_.at(root.id);
    if (r.value.size() != 1)
      throw ShapeError("backward() needs a scalar root, got shape " +
                       shape_string(r.value.shape()));
    if (!r.requires_grad)
      return;
    r.grad = Tensor(r.value.shape(), 1.0);
    r.has_grad = true;
    for (std::size_t i = root.id + 1; i-- > 0;) {
      auto &n = nodes_[i];
      if (!n.backward || !n.has_grad)
        continue;
      // Closures only write into parent buffers; no nodes are appended here.
      n.backward(*this, n.grad);
    }
  }

private:
  struct Node {
    std::string op;
    Tensor value;
    Tensor grad;
    bool requires_grad;
    bool has_grad;
    Backward backward;
  };

  void check_finite(const Tensor &t, std::string_view op) const {
    if (!t.all_finite())
      throw NumericalError("non-finite value produced by '" + std::string(op) +
                           "' at tape node " + std::to_string(nodes_.size()));
  }

  std::vector<Node> nodes_;
};

namespace detail {

inline void same_shape(const Tensor &a, const Tensor &b, std::string_view op) {
  if (a.shape() != b.shape())
    throw ShapeError(std::string(op) + ": shape mismatch " + shape_string(a.shape()) +
                     " vs " + shape_string(b.shape()));
}

inline void require_matrix(const Tensor &a, std::string_view op) {
  if (a.rank() != 2)
    throw ShapeError(std::string(op) + ": expected a matrix, got shape " +
                     shape_string(a.shape()));
}

template <class F> Tensor map(const Tensor &a, F f) {
  Tensor out(a.shape());
  for (std::size_t i = 0; i < a.size(); ++i)
    out[i] = f(a[i]);
  return out;
}

using RowMat = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using ConstMap = Eigen::Map<const RowMat>;
using MutMap = Eigen::Map<RowMat>;

inline ConstMap as_mat(const Tensor &t) {
  return ConstMap(t.storage().data(), static_cast<Eigen::Index>(t.rows()),
                  static_cast<Eigen::Index>(t.cols()));
}
inline MutMap as_mat(Tensor &t) {
  return MutMap(t.storage().data(), static_cast<Eigen::Index>(t.rows()),
                static_cast<Eigen::Index>(t.cols()));
}

} // namespace detail

// ---------------------------------------------------------------------------
// Elementwise
// ---------------------------------------------------------------------------

inline Var add(Var a, Var b) {
  Tape &t = *a.tape;
  const auto &va = t.value(a), &vb = t.value(b);
  detail::same_shape(va, vb, "add");
  Tensor out(va.shape());
  for (std::size_t i = 0; i < out.size(); ++i)
    out[i] = va[i] + vb[i];
  return t.record("add", std::move(out), {a, b}, [a, b](Tape &tp, const Tensor &g) {
    for (Var p : {a, b})
      if (auto *s = tp.grad_sink(p))
        for (std::size_t i = 0; i < g.size(); ++i)
          (*s)[i] += g[i];
  });
}

inline Var sub(Var a, Var b) {
  Tape &t = *a.tape;
  const auto &va = t.value(a), &vb = t.value(b);
  detail::same_shape(va, vb, "sub");
  Tensor out(va.shape());
  for (std::size_t i = 0; i < out.size(); ++i)
    out[i] = va[i] - vb[i];
  return t.record("sub", std::move(out), {a, b}, [a, b](Tape &tp, const Tensor &g) {
    if (auto *s = tp.grad_sink(a))
      for (std::size_t i = 0; i < g.size(); ++i)
        (*s)[i] += g[i];
    if (auto *s = tp.grad_sink(b))
      for (std::size_t i = 0; i < g.size(); ++i)
        (*s)[i] -= g[i];
  });
}

inline Var mul(Var a, Var b) {
  Tape &t = *a.tape;
  const auto &va = t.value(a), &vb = t.value(b);
  detail::same_shape(va, vb, "mul");
  Tensor out(va.shape());
  for (std::size_t i = 0; i < out.size(); ++i)
    out[i] = va[i] * vb[i];
  return t.record("mul", std::move(out), {a, b}, [a, b](Tape &tp, const Tensor &g) {
    const Tensor &xa = tp.value(a), &xb = tp.value(b);
    if (auto *s = tp.grad_sink(a))
      for (std::size_t i = 0; i < g.size(); ++i)
        (*s)[i] += g[i] * xb[i];
    if (auto *s = tp.grad_sink(b))
      for (std::size_t i = 0; i < g.size(); ++i)
        (*s)[i] += g[i] * xa[i];
  });
}

inline Var scale(Var a, double c) {
  Tape &t = *a.tape;
  Tensor out = detail::map(t.value(a), [c](double x) { return c * x; });
  return t.record("scale", std::move(out), {a}, [a, c](Tape &tp, const Tensor &g) {
    if (auto *s = tp.grad_sink(a))
      for (std::size_t i = 0; i < g.size(); ++i)
        (*s)[i] += c * g[i];
  });
}

inline Var add_scalar(Var a, double c) {
  Tape &t = *a.tape;
  Tensor out = detail::map(t.value(a), [c](double x) { return x + c; });
  return t.record("add_scalar", std::move(out), {a}, [a](Tape &tp, const Tensor &g) {
    if (auto *s = tp.grad_sink(a))
      for (std::size_t i = 0; i < g.size(); ++i)
        (*s)[i] += g[i];
  });
}

namespace detail {

// Unary op whose derivative is expressed through input x and output y.
template <class F, class D>
Var unary(Var a, const char *name, F f, D dfdx) {
  Tape &t = *a.tape;
  const Tensor &x = t.value(a);
  Tensor out = map(x, f);
  const std::size_t out_id = t.size();
  return t.record(name, std::move(out), {a}, [a, out_id, dfdx](Tape &tp, const Tensor &g) {
    if (auto *s = tp.grad_sink(a)) {
      const Tensor &xv = tp.value(a);
      const Tensor &yv = tp.value(Var{&tp, out_id});
      for (std::size_t i = 0; i < g.size(); ++i)
        (*s)[i] += g[i] * dfdx(xv[i], yv[i]);
    }
  });
}

} // namespace detail

inline Var relu(Var a) {
  return detail::unary(
      a, "relu", [](double x) { return x > 0.0 ? x : 0.0; },
      [](double x, double) { return x > 0.0 ? 1.0 : 0.0; });
}

inline Var softplus(Var a) {
  return detail::unary(
      a, "softplus",
      [](double x) { return x > 30.0 ? x : std::log1p(std::exp(x)); },
      [](double x, double) { return 1.0 / (1.0 + std::exp(-x)); });
}

inline Var tanh(Var a) {
  return detail::unary(
      a, "tanh", [](double x) { return std::tanh(x); },
      [](double, double y) { return 1.0 - y * y; });
}

inline Var exp(Var a) {
  return detail::unary(
      a, "exp", [](double x) { return std::exp(x); }, [](double, double y) { return y; });
}

inline Var square(Var a) {
  return detail::unary(
      a, "square", [](double x) { return x * x; },
      [](double x, double) { return 2.0 * x; });
}

/// Clamp to [lo, hi]; zero gradient outside the interval.
inline Var clamp(Var a, double lo, double hi) {
  return detail::unary(
      a, "clamp", [lo, hi](double x) { return std::clamp(x, lo, hi); },
      [lo, hi](double x, double) { return (x >= lo && x <= hi) ? 1.0 : 0.0; });
}

inline Var operator+(Var a, Var b) { return add(a, b); }
inline Var operator-(Var a, Var b) { return sub(a, b); }
inline Var operator*(Var a, Var b) { return mul(a, b); }
inline Var operator*(double c, Var a) { return scale(a, c); }
inline Var operator*(Var a, double c) { return scale(a, c); }
inline Var operator+(Var a, double c) { return add_scalar(a, c); }
inline Var operator-(Var a) { return scale(a, -1.0); }

// ---------------------------------------------------------------------------
// Reductions
// ---------------------------------------------------------------------------

inline Var sum(Var a) {
  Tape &t = *a.tape;
  const Tensor &x = t.value(a);
  double s = 0.0;
  for (double v : x.storage())
    s += v;
  return t.record("sum", Tensor::scalar(s), {a}, [a](Tape &tp, const Tensor &g) {
    if (auto *s = tp.grad_sink(a))
      for (auto &v : s->storage())
        v += g[0];
  });
}

inline Var mean(Var a) {
  const auto n = static_cast<double>(a.tape->value(a).size());
  return scale(sum(a), 1.0 / n);
}

/// Per-row sum of a matrix: [n, m] -> [n].
inline Var row_sum(Var a) {
  Tape &t = *a.tape;
  const Tensor &x = t.value(a);
  detail::require_matrix(x, "row_sum");
  const auto n = x.rows(), m = x.cols();
  Tensor out(Shape{n});
  for (std::size_t r = 0; r < n; ++r) {
    double s = 0.0;
    for (std::size_t c = 0; c < m; ++c)
      s += x[r * m + c];
    out[r] = s;
  }
  return t.record("row_sum", std::move(out), {a}, [a, n, m](Tape &tp, const Tensor &g) {
    if (auto *s = tp.grad_sink(a))
      for (std::size_t r = 0; r < n; ++r)
        for (std::size_t c = 0; c < m; ++c)
          (*s)[r * m + c] += g[r];
  });
}

// ---------------------------------------------------------------------------
// Linear algebra and broadcasting
// ---------------------------------------------------------------------------

inline Var matmul(Var a, Var b) {
  Tape &t = *a.tape;
  const Tensor &va = t.value(a), &vb = t.value(b);
  detail::require_matrix(va, "matmul");
  detail::require_matrix(vb, "matmul");
  if (va.cols() != vb.rows())
    throw ShapeError("matmul: inner dimensions differ " + shape_string(va.shape()) +
                     " x " + shape_string(vb.shape()));
  Tensor out(Shape{va.rows(), vb.cols()});
  detail::as_mat(out).noalias() = detail::as_mat(va) * detail::as_mat(vb);
  return t.record("matmul", std::move(out), {a, b}, [a, b](Tape &tp, const Tensor &g) {
    const auto G = detail::as_mat(g);
    if (auto *s = tp.grad_sink(a))
      detail::as_mat(*s).noalias() += G * detail::as_mat(tp.value(b)).transpose();
    if (auto *s = tp.grad_sink(b))
      detail::as_mat(*s).noalias() += detail::as_mat(tp.value(a)).transpose() * G;
  });
}

/// a[n, m] + row vector b[m] broadcast over rows.
inline Var add_row(Var a, Var b) {
  Tape &t = *a.tape;
  const Tensor &va = t.value(a), &vb = t.value(b);
  detail::require_matrix(va, "add_row");
  const auto n = va.rows(), m = va.cols();
  if (vb.size() != m)
    throw ShapeError("add_row: row vector of size " + std::to_string(vb.size()) +
                     " against matrix " + shape_string(va.shape()));
  Tensor out(va.shape());
  for (std::size_t r = 0; r < n; ++r)
    for (std::size_t c = 0; c < m; ++c)
      out[r * m + c] = va[r * m + c] + vb[c];
  return t.record("add_row", std::move(out), {a, b}, [a, b, n, m](Tape &tp, const Tensor &g) {
    if (auto *s = tp.grad_sink(a))
      for (std::size_t i = 0; i < g.size(); ++i)
        (*s)[i] += g[i];
    if (auto *s = tp.grad_sink(b))
      for (std::size_t r = 0; r < n; ++r)
        for (std::size_t c = 0; c < m; ++c)
          (*s)[c] += g[r * m + c];
  });
}

/// a[n, m] * row vector b[m] broadcast over rows.
inline Var mul_row(Var a, Var b) {
  Tape &t = *a.tape;
  const Tensor &va = t.value(a), &vb = t.value(b);
  detail::require_matrix(va, "mul_row");
  const auto n = va.rows(), m = va.cols();
  if (vb.size() != m)
    throw ShapeError("mul_row: row vector of size " + std::to_string(vb.size()) +
                     " against matrix " + shape_string(va.shape()));
  Tensor out(va.shape());
  for (std::size_t r = 0; r < n; ++r)
    for (std::size_t c = 0; c < m; ++c)
      out[r * m + c] = va[r * m + c] * vb[c];
  return t.record("mul_row", std::move(out), {a, b}, [a, b, n, m](Tape &tp, const Tensor &g) {
    const Tensor &xa = tp.value(a), &xb = tp.value(b);
    if (auto *s = tp.grad_sink(a))
      for (std::size_t r = 0; r < n; ++r)
        for (std::size_t c = 0; c < m; ++c)
          (*s)[r * m + c] += g[r * m + c] * xb[c];
    if (auto *s = tp.grad_sink(b))
      for (std::size_t r = 0; r < n; ++r)
        for (std::size_t c = 0; c < m; ++c)
          (*s)[c] += g[r * m + c] * xa[r * m + c];
  });
}

// ---------------------------------------------------------------------------
// Column selection
// ---------------------------------------------------------------------------

/// Columns `index` of a[n, m] in the given order: -> [n, |index|].
inline Var gather_cols(Var a, std::vector<std::size_t> index) {
  Tape &t = *a.tape;
  const Tensor &x = t.value(a);
  detail::require_matrix(x, "gather_cols");
  const auto n = x.rows(), m = x.cols(), k = index.size();
  for (auto c : index)
    if (c >= m)
      throw ShapeError("gather_cols: column " + std::to_string(c) + " out of range for " +
                       shape_string(x.shape()));
  Tensor out(Shape{n, k});
  for (std::size_t r = 0; r < n; ++r)
    for (std::size_t j = 0; j < k; ++j)
      out[r * k + j] = x[r * m + index[j]];
  return t.record("gather_cols", std::move(out), {a},
                  [a, n, m, idx = std::move(index)](Tape &tp, const Tensor &g) {
                    if (auto *s = tp.grad_sink(a)) {
                      const auto kk = idx.size();
                      for (std::size_t r = 0; r < n; ++r)
                        for (std::size_t j = 0; j < kk; ++j)
                          (*s)[r * m + idx[j]] += g[r * kk + j];
                    }
                  });
}

struct ColumnBlock {
  Var values;
  std::vector<std::size_t> index;
};

/// Assemble a [n, width] matrix whose columns index[j] come from block column
/// j. The blocks must cover every column exactly once.
inline Var scatter_cols(std::vector<ColumnBlock> blocks, std::size_t width) {
  if (blocks.empty())
    throw ShapeError("scatter_cols: no blocks");
  Tape &t = *blocks.front().values.tape;
  const auto n = t.value(blocks.front().values).rows();
  std::vector<int> covered(width, 0);
  Tensor out(Shape{n, width});
  for (const auto &b : blocks) {
    const Tensor &x = t.value(b.values);
    detail::require_matrix(x, "scatter_cols");
    if (x.rows() != n || x.cols() != b.index.size())
      throw ShapeError("scatter_cols: block " + shape_string(x.shape()) +
                       " does not match its index set of size " +
                       std::to_string(b.index.size()));
    const auto k = b.index.size();
    for (std::size_t j = 0; j < k; ++j) {
      if (b.index[j] >= width || covered[b.index[j]]++)
        throw ShapeError("scatter_cols: blocks do not partition the columns");
      for (std::size_t r = 0; r < n; ++r)
        out[r * width + b.index[j]] = x[r * k + j];
    }
  }
  if (std::find(covered.begin(), covered.end(), 0) != covered.end())
    throw ShapeError("scatter_cols: blocks do not partition the columns");

  std::vector<Var> parents;
  for (const auto &b : blocks)
    parents.push_back(b.values);
  return t.record("scatter_cols", std::move(out), parents,
                  [bl = std::move(blocks), n, width](Tape &tp, const Tensor &g) {
                    for (const auto &b : bl) {
                      auto *s = tp.grad_sink(b.values);
                      if (!s)
                        continue;
                      const auto k = b.index.size();
                      for (std::size_t r = 0; r < n; ++r)
                        for (std::size_t j = 0; j < k; ++j)
                          (*s)[r * k + j] += g[r * width + b.index[j]];
                    }
                  });
}

// ---------------------------------------------------------------------------
// Fixed 3x3 cross-correlation with replicate padding
// ---------------------------------------------------------------------------

using Kernel3 = std::array<double, 9>;

namespace detail {

inline void conv3_forward(const double *in, double *out, std::size_t H, std::size_t W,
                          const Kernel3 &k) {
  for (std::size_t i = 0; i < H; ++i) {
    const std::size_t rows[3] = {i == 0 ? 0 : i - 1, i, i + 1 < H ? i + 1 : H - 1};
    for (std::size_t j = 0; j < W; ++j) {
      const std::size_t cols[3] = {j == 0 ? 0 : j - 1, j, j + 1 < W ? j + 1 : W - 1};
      double acc = 0.0;
      for (int a = 0; a < 3; ++a)
        for (int b = 0; b < 3; ++b)
          acc += k[a * 3 + b] * in[rows[a] * W + cols[b]];
      out[i * W + j] = acc;
    }
  }
}

inline void conv3_adjoint(const double *g, double *in_grad, std::size_t H, std::size_t W,
                          const Kernel3 &k) {
  for (std::size_t i = 0; i < H; ++i) {
    const std::size_t rows[3] = {i == 0 ? 0 : i - 1, i, i + 1 < H ? i + 1 : H - 1};
    for (std::size_t j = 0; j < W; ++j) {
      const std::size_t cols[3] = {j == 0 ? 0 : j - 1, j, j + 1 < W ? j + 1 : W - 1};
      const double gij = g[i * W + j];
      for (int a = 0; a < 3; ++a)
        for (int b = 0; b < 3; ++b)
          in_grad[rows[a] * W + cols[b]] += k[a * 3 + b] * gij;
    }
  }
}

} // namespace detail

/// Row-wise 3x3 cross-correlation of a batch of flattened H x W fields
/// ([n, H*W]), or a single [H, W] field. Differentiable in the field.
inline Var conv3x3(Var a, std::size_t H, std::size_t W, const Kernel3 &kernel) {
  Tape &t = *a.tape;
  const Tensor &x = t.value(a);
  if (H < 3 || W < 3)
    throw ShapeError("conv3x3: field " + std::to_string(H) + "x" + std::to_string(W) +
                     " smaller than the 3x3 kernel");
  if (x.size() % (H * W) != 0)
    throw ShapeError("conv3x3: tensor " + shape_string(x.shape()) +
                     " is not a batch of " + std::to_string(H) + "x" + std::to_string(W) +
                     " fields");
  const std::size_t n = x.size() / (H * W);
  Tensor out(x.shape());
  for (std::size_t r = 0; r < n; ++r)
    detail::conv3_forward(x.storage().data() + r * H * W, out.storage().data() + r * H * W,
                          H, W, kernel);
  return t.record("conv3x3", std::move(out), {a},
                  [a, n, H, W, kernel](Tape &tp, const Tensor &g) {
                    if (auto *s = tp.grad_sink(a))
                      for (std::size_t r = 0; r < n; ++r)
                        detail::conv3_adjoint(g.storage().data() + r * H * W,
                                              s->storage().data() + r * H * W, H, W, kernel);
                  });
}

inline Kernel3 kernel_from(const Tensor &k) {
  if (k.size() != 9)
    throw ShapeError("expected a 3x3 kernel, got " + shape_string(k.shape()));
  Kernel3 out{};
  std::copy(k.storage().begin(), k.storage().end(), out.begin());
  return out;
}

/// Cross-correlation of an H x W field with a 3x3 kernel under replicate
/// padding.
inline Tensor fixed_conv2d(const Tensor &field, const Tensor &kernel) {
  if (field.rank() != 2)
    throw ShapeError("fixed_conv2d: expected an HxW field, got " +
                     shape_string(field.shape()));
  const auto H = field.dim(0), W = field.dim(1);
  if (H < 3 || W < 3)
    throw ShapeError("fixed_conv2d: field " + shape_string(field.shape()) +
                     " smaller than the 3x3 kernel");
  Tensor out(field.shape());
  detail::conv3_forward(field.storage().data(), out.storage().data(), H, W,
                        kernel_from(kernel));
  return out;
}

// ---------------------------------------------------------------------------
// Parameter binding and one-shot evaluation
// ---------------------------------------------------------------------------

/// Parameters placed on a tape as leaves, addressable by name.
class BoundParams {
public:
  BoundParams() = default;
  BoundParams(Tape &tape, const ParamStore &store, bool requires_grad) {
    entries_.reserve(store.size());
    for (const auto &[name, value] : store)
      entries_.emplace_back(name, tape.leaf(value, requires_grad, name));
  }

  Var operator[](std::string_view name) const {
    for (const auto &[n, v] : entries_)
      if (n == name)
        return v;
    throw ValidationError("program references unknown parameter '" + std::string(name) +
                          "'");
  }

  const std::vector<std::pair<std::string, Var>> &entries() const { return entries_; }

  ParamStore gradients(const Tape &tape, std::uint64_t seed = 0) const {
    ParamStore out(seed);
    for (const auto &[n, v] : entries_)
      out.add(n, tape.grad(v));
    return out;
  }

private:
  std::vector<std::pair<std::string, Var>> entries_;
};

using Program = std::function<Var(Tape &, const BoundParams &, const Tensor &inputs)>;

struct Evaluation {
  double value = 0.0;
  ParamStore gradients;
};

/// Forward-evaluate a scalar program and return exact reverse-mode gradients
/// for every parameter in the store (zeros for unused ones).
inline Evaluation evaluate_with_gradients(const Program &program, const ParamStore &params,
                                          const Tensor &inputs) {
  Tape tape;
  BoundParams bound(tape, params, true);
  Var out = program(tape, bound, inputs);
  if (tape.value(out).size() != 1)
    throw ShapeError("program must produce a scalar, got shape " +
                     shape_string(tape.value(out).shape()));
  tape.backward(out);
  return Evaluation{tape.value(out).item(), bound.gradients(tape, params.rng_seed())};
}

} // namespace drkrnet
