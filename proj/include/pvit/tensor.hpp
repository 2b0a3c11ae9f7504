#pragma once

// Dense 64-bit tensors and a reverse-mode gradient tape.
//
// A Tape records every operation applied to its Vars in execution order, so
// the node list is already topologically sorted; backward() walks it once in
// reverse. Tapes are built fresh for each forward pass and are single-owner.

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <functional>
#include <initializer_list>
#include <numbers>
#include <optional>
#include <span>
#include <sstream>
#include <string>
#include <utility>
#include <vector>

#include "pvit/errors.hpp"

namespace pvit {

using Shape = std::vector<std::size_t>;

inline std::string shape_string(const Shape& shape) {
  std::ostringstream os;
  os << '[';
  for (std::size_t i = 0; i < shape.size(); ++i) os << (i ? "," : "") << shape[i];
  os << ']';
  return os.str();
}

inline std::size_t shape_size(const Shape& shape) {
  std::size_t n = 1;
  for (auto d : shape) n *= d;
  return n;
}

struct Tensor {
  Shape shape;
  std::vector<double> data = std::vector<double>(1, 0.0);
  bool requires_grad = false;
  std::optional<std::vector<double>> grad;

  Tensor() = default;

  Tensor(Shape s, std::vector<double> values) : shape(std::move(s)), data(std::move(values)) {
    check();
  }

  explicit Tensor(Shape s, double fill = 0.0) : shape(std::move(s)) {
    for (auto d : shape) {
      if (d == 0) throw ShapeError("tensor dimensions must be positive, got " + shape_string(shape));
    }
    data.assign(shape_size(shape), fill);
  }

  static Tensor scalar(double v) { return Tensor(Shape{}, std::vector<double>{v}); }

  static Tensor from_rows(std::initializer_list<std::initializer_list<double>> rows) {
    const std::size_t r = rows.size();
    const std::size_t c = r ? rows.begin()->size() : 0;
    std::vector<double> values;
    values.reserve(r * c);
    for (const auto& row : rows) {
      if (row.size() != c) throw ShapeError("from_rows: ragged rows");
      values.insert(values.end(), row.begin(), row.end());
    }
    return Tensor({r, c}, std::move(values));
  }

  std::size_t size() const { return data.size(); }
  std::size_t rank() const { return shape.size(); }
  std::size_t rows() const { return shape.at(0); }
  std::size_t cols() const { return shape.at(1); }

  double& operator()(std::size_t i, std::size_t j) { return data[i * shape[1] + j]; }
  double operator()(std::size_t i, std::size_t j) const { return data[i * shape[1] + j]; }
  double item() const {
    if (data.size() != 1) throw ShapeError("item() on tensor of shape " + shape_string(shape));
    return data[0];
  }

  std::span<const double> row(std::size_t i) const {
    return {data.data() + i * shape.back(), shape.back()};
  }

  Tensor reshape(Shape s) const {
    if (shape_size(s) != data.size()) {
      throw ShapeError("reshape " + shape_string(shape) + " -> " + shape_string(s));
    }
    return Tensor(std::move(s), data);
  }

  void zero_grad() { grad.reset(); }

 private:
  void check() const {
    for (auto d : shape) {
      if (d == 0) throw ShapeError("tensor dimensions must be positive, got " + shape_string(shape));
    }
    if (shape_size(shape) != data.size()) {
      throw ShapeError("shape " + shape_string(shape) + " does not match " +
                       std::to_string(data.size()) + " values");
    }
  }
};

class Tape;

/// Handle to a node on a Tape. Cheap to copy; valid while the tape lives and
/// has not been reset.
class Var {
 public:
  Var() = default;

  const Tensor& value() const;
  const Shape& shape() const { return value().shape; }
  bool requires_grad() const { return value().requires_grad; }
  Tape& tape() const { return *tape_; }
  std::size_t id() const { return id_; }

 private:
  friend class Tape;
  Var(Tape* tape, std::size_t id) : tape_(tape), id_(id) {}

  Tape* tape_ = nullptr;
  std::size_t id_ = 0;
};

class Tape {
 public:
  using Backward = std::function<void(Tape&, std::size_t)>;

  enum class Mode { record, inference };

  struct Node {
    Tensor value;
    std::vector<double> grad;
    std::vector<std::size_t> inputs;
    Backward backward;
    Tensor* bound = nullptr;
    std::vector<double> saved;
  };

  explicit Tape(Mode mode = Mode::record) : mode_(mode) {}
  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;

  bool recording() const { return mode_ == Mode::record; }
  std::size_t size() const { return nodes_.size(); }

  Var constant(Tensor value) {
    value.requires_grad = false;
    value.grad.reset();
    return push_leaf(std::move(value), nullptr);
  }

  /// Free leaf that requires grad; read its gradient back with gradient().
  Var variable(Tensor value) {
    value.requires_grad = recording();
    value.grad.reset();
    return push_leaf(std::move(value), nullptr);
  }

  /// Leaf bound to an external tensor (a model parameter). After backward()
  /// its gradient is accumulated into `bound.grad`.
  Var param(Tensor& bound) {
    Tensor copy(bound.shape, bound.data);
    const bool tracked = recording() && bound.requires_grad;
    copy.requires_grad = tracked;
    return push_leaf(std::move(copy), tracked ? &bound : nullptr);
  }

  void backward(const Var& root) {
    if (root.tape_ != this) throw TapeError("backward: root does not belong to this tape");
    if (backward_done_) {
      throw TapeError("backward: already run on this tape; reset() before reusing it");
    }
    Node& r = nodes_.at(root.id_);
    if (r.value.size() != 1) {
      throw TapeError("backward: root must be scalar, got shape " + shape_string(r.value.shape));
    }
    if (!r.value.requires_grad) {
      throw TapeError("backward: root is detached (no input requires grad)");
    }
    backward_done_ = true;
    r.grad.assign(1, 1.0);
    for (std::size_t i = root.id_ + 1; i-- > 0;) {
      Node& n = nodes_[i];
      if (n.grad.empty() || !n.backward) continue;
      n.backward(*this, i);
    }
    for (Node& n : nodes_) {
      if (n.bound == nullptr || n.grad.empty()) continue;
      auto& g = n.bound->grad;
      if (!g || g->size() != n.grad.size()) g.emplace(n.grad.size(), 0.0);
      for (std::size_t j = 0; j < n.grad.size(); ++j) (*g)[j] += n.grad[j];
    }
  }

  void reset() {
    nodes_.clear();
    backward_done_ = false;
  }

  /// Gradient of the last backward() root with respect to `v`; zeros when
  /// `v` was not reached.
  std::vector<double> gradient(const Var& v) const {
    const Node& n = nodes_.at(v.id_);
    if (n.grad.empty()) return std::vector<double>(n.value.size(), 0.0);
    return n.grad;
  }

  const std::vector<double>& saved(const Var& v) const { return nodes_.at(v.id_).saved; }

  // Op-author interface.

  const Node& node(std::size_t i) const { return nodes_[i]; }

  /// Gradient buffer for input `i`, or nullptr when it does not need one.
  double* grad_target(std::size_t i) {
    Node& n = nodes_[i];
    if (!n.value.requires_grad) return nullptr;
    if (n.grad.empty()) n.grad.assign(n.value.size(), 0.0);
    return n.grad.data();
  }

  Var push(Tensor value, std::vector<std::size_t> inputs, Backward backward,
           std::vector<double> saved = {}) {
    bool needs = false;
    if (recording()) {
      for (auto i : inputs) needs = needs || nodes_.at(i).value.requires_grad;
    }
    Node n;
    value.requires_grad = needs;
    n.value = std::move(value);
    n.saved = std::move(saved);
    if (needs) {
      n.inputs = std::move(inputs);
      n.backward = std::move(backward);
    }
    nodes_.push_back(std::move(n));
    return Var(this, nodes_.size() - 1);
  }

 private:
  friend class Var;

  Var push_leaf(Tensor value, Tensor* bound) {
    Node n;
    n.value = std::move(value);
    n.bound = bound;
    nodes_.push_back(std::move(n));
    return Var(this, nodes_.size() - 1);
  }

  Mode mode_;
  bool backward_done_ = false;
  std::vector<Node> nodes_;
};

inline const Tensor& Var::value() const { return tape_->node(id_).value; }

namespace detail {

inline Tape& same_tape(const Var& a, const Var& b, const char* op) {
  if (&a.tape() != &b.tape()) throw TapeError(std::string(op) + ": operands live on different tapes");
  return a.tape();
}

inline void require_matrix(const Tensor& t, const char* op) {
  if (t.rank() != 2) {
    throw ShapeError(std::string(op) + ": expected a matrix, got shape " + shape_string(t.shape));
  }
}

// C[m,n] += A[m,k] * B[k,n]
inline void gemm_nn(std::size_t m, std::size_t k, std::size_t n, const double* a, const double* b,
                    double* c) {
  for (std::size_t i = 0; i < m; ++i) {
    double* crow = c + i * n;
    for (std::size_t p = 0; p < k; ++p) {
      const double av = a[i * k + p];
      const double* brow = b + p * n;
      for (std::size_t j = 0; j < n; ++j) crow[j] += av * brow[j];
    }
  }
}

// A[m,k] += C[m,n] * B[k,n]^T
inline void gemm_nt(std::size_t m, std::size_t k, std::size_t n, const double* c, const double* b,
                    double* a) {
  for (std::size_t i = 0; i < m; ++i) {
    const double* crow = c + i * n;
    for (std::size_t p = 0; p < k; ++p) {
      const double* brow = b + p * n;
      double acc = 0.0;
      for (std::size_t j = 0; j < n; ++j) acc += crow[j] * brow[j];
      a[i * k + p] += acc;
    }
  }
}

// B[k,n] += A[m,k]^T * C[m,n]
inline void gemm_tn(std::size_t m, std::size_t k, std::size_t n, const double* a, const double* c,
                    double* b) {
  for (std::size_t i = 0; i < m; ++i) {
    const double* crow = c + i * n;
    for (std::size_t p = 0; p < k; ++p) {
      const double av = a[i * k + p];
      double* brow = b + p * n;
      for (std::size_t j = 0; j < n; ++j) brow[j] += av * crow[j];
    }
  }
}

struct AxisSplit {
  std::size_t outer = 1, len = 1, inner = 1;
};

inline AxisSplit split_axis(const Shape& shape, std::size_t axis, const char* op) {
  if (axis >= shape.size()) {
    throw ShapeError(std::string(op) + ": axis " + std::to_string(axis) + " invalid for shape " +
                     shape_string(shape));
  }
  AxisSplit s;
  for (std::size_t i = 0; i < axis; ++i) s.outer *= shape[i];
  s.len = shape[axis];
  for (std::size_t i = axis + 1; i < shape.size(); ++i) s.inner *= shape[i];
  return s;
}

}  // namespace detail

inline Var matmul(const Var& a, const Var& b) {
  Tape& tape = detail::same_tape(a, b, "matmul");
  const Tensor& A = a.value();
  const Tensor& B = b.value();
  detail::require_matrix(A, "matmul");
  detail::require_matrix(B, "matmul");
  if (A.cols() != B.rows()) {
    throw ShapeError("matmul: inner dimensions disagree: " + shape_string(A.shape) + " x " +
                     shape_string(B.shape));
  }
  const std::size_t m = A.rows(), k = A.cols(), n = B.cols();
  Tensor C({m, n});
  detail::gemm_nn(m, k, n, A.data.data(), B.data.data(), C.data.data());
  const std::size_t ia = a.id(), ib = b.id();
  return tape.push(std::move(C), {ia, ib}, [ia, ib, m, k, n](Tape& t, std::size_t self) {
    const double* dc = t.node(self).grad.data();
    if (double* da = t.grad_target(ia)) {
      detail::gemm_nt(m, k, n, dc, t.node(ib).value.data.data(), da);
    }
    if (double* db = t.grad_target(ib)) {
      detail::gemm_tn(m, k, n, t.node(ia).value.data.data(), dc, db);
    }
  });
}

inline Var add(const Var& a, const Var& b) {
  Tape& tape = detail::same_tape(a, b, "add");
  if (a.shape() != b.shape()) {
    throw ShapeError("add: shapes differ: " + shape_string(a.shape()) + " vs " +
                     shape_string(b.shape()));
  }
  Tensor out = a.value();
  out.grad.reset();
  const auto& bv = b.value().data;
  for (std::size_t i = 0; i < out.size(); ++i) out.data[i] += bv[i];
  const std::size_t ia = a.id(), ib = b.id();
  return tape.push(std::move(out), {ia, ib}, [ia, ib](Tape& t, std::size_t self) {
    const auto& g = t.node(self).grad;
    for (auto in : {ia, ib}) {
      if (double* d = t.grad_target(in)) {
        for (std::size_t i = 0; i < g.size(); ++i) d[i] += g[i];
      }
    }
  });
}

/// x[R,C] + y[r,C] with y tiled down the rows (R must be a multiple of r).
/// With r == 1 this is a bias add.
inline Var add_rows(const Var& x, const Var& y) {
  Tape& tape = detail::same_tape(x, y, "add_rows");
  const Tensor& X = x.value();
  const Tensor& Y = y.value();
  detail::require_matrix(X, "add_rows");
  const std::size_t cols = X.cols();
  const std::size_t yrows = Y.size() / cols;
  if (Y.size() % cols != 0 || Y.shape.back() != cols || X.rows() % yrows != 0) {
    throw ShapeError("add_rows: cannot tile " + shape_string(Y.shape) + " over " +
                     shape_string(X.shape));
  }
  Tensor out(X.shape, X.data);
  for (std::size_t i = 0; i < X.rows(); ++i) {
    const double* yr = Y.data.data() + (i % yrows) * cols;
    double* o = out.data.data() + i * cols;
    for (std::size_t j = 0; j < cols; ++j) o[j] += yr[j];
  }
  const std::size_t ix = x.id(), iy = y.id();
  return tape.push(std::move(out), {ix, iy}, [ix, iy, cols, yrows](Tape& t, std::size_t self) {
    const auto& g = t.node(self).grad;
    if (double* dx = t.grad_target(ix)) {
      for (std::size_t i = 0; i < g.size(); ++i) dx[i] += g[i];
    }
    if (double* dy = t.grad_target(iy)) {
      const std::size_t rows = g.size() / cols;
      for (std::size_t i = 0; i < rows; ++i) {
        for (std::size_t j = 0; j < cols; ++j) dy[(i % yrows) * cols + j] += g[i * cols + j];
      }
    }
  });
}

/// Elementwise product of equal-shape tensors.
inline Var mul(const Var& a, const Var& b) {
  Tape& tape = detail::same_tape(a, b, "mul");
  if (a.shape() != b.shape()) {
    throw ShapeError("mul: shapes differ: " + shape_string(a.shape()) + " vs " +
                     shape_string(b.shape()));
  }
  Tensor out(a.shape());
  const auto& av = a.value().data;
  const auto& bv = b.value().data;
  for (std::size_t i = 0; i < out.size(); ++i) out.data[i] = av[i] * bv[i];
  const std::size_t ia = a.id(), ib = b.id();
  return tape.push(std::move(out), {ia, ib}, [ia, ib](Tape& t, std::size_t self) {
    const auto& g = t.node(self).grad;
    const auto& av = t.node(ia).value.data;
    const auto& bv = t.node(ib).value.data;
    if (double* da = t.grad_target(ia)) {
      for (std::size_t i = 0; i < g.size(); ++i) da[i] += g[i] * bv[i];
    }
    if (double* db = t.grad_target(ib)) {
      for (std::size_t i = 0; i < g.size(); ++i) db[i] += g[i] * av[i];
    }
  });
}

inline Var scale(const Var& a, double s) {
  Tensor out(a.shape(), a.value().data);
  for (auto& v : out.data) v *= s;
  const std::size_t ia = a.id();
  return a.tape().push(std::move(out), {ia}, [ia, s](Tape& t, std::size_t self) {
    const auto& g = t.node(self).grad;
    if (double* d = t.grad_target(ia)) {
      for (std::size_t i = 0; i < g.size(); ++i) d[i] += s * g[i];
    }
  });
}

inline Var sum(const Var& a) {
  double acc = 0.0;
  for (double v : a.value().data) acc += v;
  const std::size_t ia = a.id();
  return a.tape().push(Tensor::scalar(acc), {ia}, [ia](Tape& t, std::size_t self) {
    const double g = t.node(self).grad[0];
    if (double* d = t.grad_target(ia)) {
      const std::size_t n = t.node(ia).value.size();
      for (std::size_t i = 0; i < n; ++i) d[i] += g;
    }
  });
}

/// Softmax along `axis`, max-shifted.
inline Var softmax(const Var& z, std::size_t axis) {
  const Tensor& Z = z.value();
  const auto s = detail::split_axis(Z.shape, axis, "softmax");
  Tensor out(Z.shape);
  for (std::size_t o = 0; o < s.outer; ++o) {
    for (std::size_t in = 0; in < s.inner; ++in) {
      const std::size_t base = o * s.len * s.inner + in;
      double mx = Z.data[base];
      for (std::size_t j = 1; j < s.len; ++j) mx = std::max(mx, Z.data[base + j * s.inner]);
      double total = 0.0;
      for (std::size_t j = 0; j < s.len; ++j) {
        const double e = std::exp(Z.data[base + j * s.inner] - mx);
        out.data[base + j * s.inner] = e;
        total += e;
      }
      for (std::size_t j = 0; j < s.len; ++j) out.data[base + j * s.inner] /= total;
    }
  }
  const std::size_t iz = z.id();
  return z.tape().push(std::move(out), {iz}, [iz, s](Tape& t, std::size_t self) {
    const auto& node = t.node(self);
    const auto& y = node.value.data;
    const auto& g = node.grad;
    double* d = t.grad_target(iz);
    if (!d) return;
    for (std::size_t o = 0; o < s.outer; ++o) {
      for (std::size_t in = 0; in < s.inner; ++in) {
        const std::size_t base = o * s.len * s.inner + in;
        double dot = 0.0;
        for (std::size_t j = 0; j < s.len; ++j) {
          const std::size_t k = base + j * s.inner;
          dot += g[k] * y[k];
        }
        for (std::size_t j = 0; j < s.len; ++j) {
          const std::size_t k = base + j * s.inner;
          d[k] += y[k] * (g[k] - dot);
        }
      }
    }
  });
}

inline Var softmax(const Var& z) {
  if (z.shape().empty()) throw ShapeError("softmax: scalar input has no axis");
  return softmax(z, z.shape().size() - 1);
}

/// log(sum(exp(z))) along `axis`; the axis is removed from the output shape.
inline Var logsumexp(const Var& z, std::size_t axis) {
  const Tensor& Z = z.value();
  const auto s = detail::split_axis(Z.shape, axis, "logsumexp");
  Shape out_shape = Z.shape;
  out_shape.erase(out_shape.begin() + static_cast<std::ptrdiff_t>(axis));
  Tensor out(out_shape);
  std::vector<double> probs(Z.size());
  for (std::size_t o = 0; o < s.outer; ++o) {
    for (std::size_t in = 0; in < s.inner; ++in) {
      const std::size_t base = o * s.len * s.inner + in;
      double mx = Z.data[base];
      for (std::size_t j = 1; j < s.len; ++j) mx = std::max(mx, Z.data[base + j * s.inner]);
      double total = 0.0;
      for (std::size_t j = 0; j < s.len; ++j) {
        const double e = std::exp(Z.data[base + j * s.inner] - mx);
        probs[base + j * s.inner] = e;
        total += e;
      }
      for (std::size_t j = 0; j < s.len; ++j) probs[base + j * s.inner] /= total;
      out.data[o * s.inner + in] = mx + std::log(total);
    }
  }
  const std::size_t iz = z.id();
  return z.tape().push(
      std::move(out), {iz},
      [iz, s](Tape& t, std::size_t self) {
        const auto& node = t.node(self);
        const auto& p = node.saved;
        double* d = t.grad_target(iz);
        if (!d) return;
        for (std::size_t o = 0; o < s.outer; ++o) {
          for (std::size_t in = 0; in < s.inner; ++in) {
            const double g = node.grad[o * s.inner + in];
            const std::size_t base = o * s.len * s.inner + in;
            for (std::size_t j = 0; j < s.len; ++j) d[base + j * s.inner] += g * p[base + j * s.inner];
          }
        }
      },
      std::move(probs));
}

inline constexpr double kLayerNormEps = 1e-5;

/// Normalizes each row over the last axis (population variance), then
/// applies gain and bias of that axis' length.
inline Var layer_norm(const Var& x, const Var& gain, const Var& bias, double eps = kLayerNormEps) {
  Tape& tape = detail::same_tape(x, gain, "layer_norm");
  detail::same_tape(x, bias, "layer_norm");
  const Tensor& X = x.value();
  if (X.rank() == 0) throw ShapeError("layer_norm: scalar input");
  const std::size_t d = X.shape.back();
  if (gain.value().size() != d || bias.value().size() != d) {
    throw ShapeError("layer_norm: gain " + shape_string(gain.shape()) + " / bias " +
                     shape_string(bias.shape()) + " do not match last axis of " +
                     shape_string(X.shape));
  }
  const std::size_t rows = X.size() / d;
  const auto& g = gain.value().data;
  const auto& b = bias.value().data;
  Tensor out(X.shape);
  // saved: normalized values followed by one reciprocal stddev per row
  std::vector<double> saved(X.size() + rows);
  for (std::size_t r = 0; r < rows; ++r) {
    const double* xr = X.data.data() + r * d;
    double mean = 0.0;
    for (std::size_t j = 0; j < d; ++j) mean += xr[j];
    mean /= static_cast<double>(d);
    double var = 0.0;
    for (std::size_t j = 0; j < d; ++j) var += (xr[j] - mean) * (xr[j] - mean);
    var /= static_cast<double>(d);
    const double rstd = 1.0 / std::sqrt(var + eps);
    saved[X.size() + r] = rstd;
    for (std::size_t j = 0; j < d; ++j) {
      const double xh = (xr[j] - mean) * rstd;
      saved[r * d + j] = xh;
      out.data[r * d + j] = xh * g[j] + b[j];
    }
  }
  const std::size_t ix = x.id(), ig = gain.id(), ib = bias.id();
  return tape.push(
      std::move(out), {ix, ig, ib},
      [ix, ig, ib, d, rows](Tape& t, std::size_t self) {
        const auto& node = t.node(self);
        const auto& dy = node.grad;
        const auto& xhat = node.saved;
        const auto& gv = t.node(ig).value.data;
        const std::size_t n = rows * d;
        if (double* dg = t.grad_target(ig)) {
          for (std::size_t r = 0; r < rows; ++r)
            for (std::size_t j = 0; j < d; ++j) dg[j] += dy[r * d + j] * xhat[r * d + j];
        }
        if (double* db = t.grad_target(ib)) {
          for (std::size_t r = 0; r < rows; ++r)
            for (std::size_t j = 0; j < d; ++j) db[j] += dy[r * d + j];
        }
        if (double* dx = t.grad_target(ix)) {
          for (std::size_t r = 0; r < rows; ++r) {
            const double rstd = xhat[n + r];
            double mean_dxh = 0.0, mean_dxh_xh = 0.0;
            for (std::size_t j = 0; j < d; ++j) {
              const double dxh = dy[r * d + j] * gv[j];
              mean_dxh += dxh;
              mean_dxh_xh += dxh * xhat[r * d + j];
            }
            mean_dxh /= static_cast<double>(d);
            mean_dxh_xh /= static_cast<double>(d);
            for (std::size_t j = 0; j < d; ++j) {
              const double dxh = dy[r * d + j] * gv[j];
              dx[r * d + j] += rstd * (dxh - mean_dxh - xhat[r * d + j] * mean_dxh_xh);
            }
          }
        }
      },
      std::move(saved));
}

/// Exact GELU: x * Phi(x).
inline Var gelu(const Var& x) {
  Tensor out(x.shape());
  const auto& xv = x.value().data;
  for (std::size_t i = 0; i < out.size(); ++i) {
    out.data[i] = 0.5 * xv[i] * (1.0 + std::erf(xv[i] * std::numbers::sqrt2 / 2.0));
  }
  const std::size_t ix = x.id();
  return x.tape().push(std::move(out), {ix}, [ix](Tape& t, std::size_t self) {
    const auto& g = t.node(self).grad;
    const auto& xv = t.node(ix).value.data;
    double* d = t.grad_target(ix);
    if (!d) return;
    const double inv_sqrt_2pi = 0.5 * std::numbers::inv_sqrtpi * std::numbers::sqrt2;
    for (std::size_t i = 0; i < g.size(); ++i) {
      const double cdf = 0.5 * (1.0 + std::erf(xv[i] * std::numbers::sqrt2 / 2.0));
      const double pdf = inv_sqrt_2pi * std::exp(-0.5 * xv[i] * xv[i]);
      d[i] += g[i] * (cdf + xv[i] * pdf);
    }
  });
}

/// Mean over the batch of logsumexp(logits_b) - logits_b[target_b].
inline Var cross_entropy(const Var& logits, std::span<const std::size_t> targets) {
  const Tensor& Z = logits.value();
  detail::require_matrix(Z, "cross_entropy");
  const std::size_t batch = Z.rows(), k = Z.cols();
  if (targets.size() != batch) {
    throw ShapeError("cross_entropy: " + std::to_string(targets.size()) + " targets for " +
                     std::to_string(batch) + " rows");
  }
  std::vector<double> probs(Z.size());
  double loss = 0.0;
  for (std::size_t b = 0; b < batch; ++b) {
    if (targets[b] >= k) {
      throw ShapeError("cross_entropy: target " + std::to_string(targets[b]) +
                       " out of range for " + std::to_string(k) + " classes");
    }
    const double* z = Z.data.data() + b * k;
    const double mx = *std::max_element(z, z + k);
    double total = 0.0;
    for (std::size_t j = 0; j < k; ++j) {
      probs[b * k + j] = std::exp(z[j] - mx);
      total += probs[b * k + j];
    }
    for (std::size_t j = 0; j < k; ++j) probs[b * k + j] /= total;
    loss += mx + std::log(total) - z[targets[b]];
  }
  loss /= static_cast<double>(batch);
  const std::size_t iz = logits.id();
  std::vector<std::size_t> tgt(targets.begin(), targets.end());
  return logits.tape().push(
      Tensor::scalar(loss), {iz},
      [iz, tgt = std::move(tgt), batch, k](Tape& t, std::size_t self) {
        const auto& node = t.node(self);
        const double g = node.grad[0] / static_cast<double>(batch);
        double* d = t.grad_target(iz);
        if (!d) return;
        for (std::size_t b = 0; b < batch; ++b) {
          for (std::size_t j = 0; j < k; ++j) {
            d[b * k + j] += g * (node.saved[b * k + j] - (j == tgt[b] ? 1.0 : 0.0));
          }
        }
      },
      std::move(probs));
}

/// Rows [begin, end) of a matrix.
inline Var slice_rows(const Var& x, std::size_t begin, std::size_t end) {
  const Tensor& X = x.value();
  detail::require_matrix(X, "slice_rows");
  if (begin >= end || end > X.rows()) {
    throw ShapeError("slice_rows: [" + std::to_string(begin) + "," + std::to_string(end) +
                     ") out of range for " + shape_string(X.shape));
  }
  const std::size_t cols = X.cols();
  Tensor out({end - begin, cols},
             std::vector<double>(X.data.begin() + static_cast<std::ptrdiff_t>(begin * cols),
                                 X.data.begin() + static_cast<std::ptrdiff_t>(end * cols)));
  const std::size_t ix = x.id();
  return x.tape().push(std::move(out), {ix}, [ix, begin, cols](Tape& t, std::size_t self) {
    const auto& g = t.node(self).grad;
    if (double* d = t.grad_target(ix)) {
      for (std::size_t i = 0; i < g.size(); ++i) d[begin * cols + i] += g[i];
    }
  });
}

/// Vertical concatenation of matrices sharing a column count.
inline Var concat_rows(std::span<const Var> parts) {
  if (parts.empty()) throw ShapeError("concat_rows: no inputs");
  Tape& tape = parts[0].tape();
  detail::require_matrix(parts[0].value(), "concat_rows");
  const std::size_t cols = parts[0].value().cols();
  std::size_t rows = 0;
  std::vector<std::size_t> ids;
  std::vector<std::size_t> offsets;
  for (const Var& p : parts) {
    detail::same_tape(parts[0], p, "concat_rows");
    detail::require_matrix(p.value(), "concat_rows");
    if (p.value().cols() != cols) {
      throw ShapeError("concat_rows: column mismatch " + shape_string(parts[0].shape()) + " vs " +
                       shape_string(p.shape()));
    }
    ids.push_back(p.id());
    offsets.push_back(rows * cols);
    rows += p.value().rows();
  }
  Tensor out({rows, cols});
  for (std::size_t i = 0; i < parts.size(); ++i) {
    const auto& src = parts[i].value().data;
    std::copy(src.begin(), src.end(), out.data.begin() + static_cast<std::ptrdiff_t>(offsets[i]));
  }
  auto inputs = ids;
  return tape.push(std::move(out), std::move(inputs),
                   [ids, offsets](Tape& t, std::size_t self) {
                     const auto& g = t.node(self).grad;
                     for (std::size_t i = 0; i < ids.size(); ++i) {
                       double* d = t.grad_target(ids[i]);
                       if (!d) continue;
                       const std::size_t n = t.node(ids[i]).value.size();
                       for (std::size_t j = 0; j < n; ++j) d[j] += g[offsets[i] + j];
                     }
                   });
}

/// Selected rows of a matrix, in the given order (repeats allowed).
inline Var gather_rows(const Var& x, std::vector<std::size_t> indices) {
  const Tensor& X = x.value();
  detail::require_matrix(X, "gather_rows");
  if (indices.empty()) throw ShapeError("gather_rows: no indices");
  const std::size_t cols = X.cols();
  Tensor out({indices.size(), cols});
  for (std::size_t i = 0; i < indices.size(); ++i) {
    if (indices[i] >= X.rows()) {
      throw ShapeError("gather_rows: row " + std::to_string(indices[i]) + " out of range for " +
                       shape_string(X.shape));
    }
    std::copy_n(X.data.begin() + static_cast<std::ptrdiff_t>(indices[i] * cols), cols,
                out.data.begin() + static_cast<std::ptrdiff_t>(i * cols));
  }
  const std::size_t ix = x.id();
  return x.tape().push(std::move(out), {ix},
                       [ix, cols, idx = std::move(indices)](Tape& t, std::size_t self) {
                         const auto& g = t.node(self).grad;
                         double* d = t.grad_target(ix);
                         if (!d) return;
                         for (std::size_t i = 0; i < idx.size(); ++i)
                           for (std::size_t j = 0; j < cols; ++j) d[idx[i] * cols + j] += g[i * cols + j];
                       });
}

/// Multi-head scaled dot-product attention over `batch` sequences stacked
/// row-wise in q, k, v ([batch * seq, dim] each). Head h uses columns
/// [h * dim/heads, (h+1) * dim/heads). The attention probabilities are kept
/// in the node's saved buffer, laid out [batch][head][query][key].
inline Var attention(const Var& q, const Var& k, const Var& v, std::size_t batch,
                     std::size_t heads) {
  Tape& tape = detail::same_tape(q, k, "attention");
  detail::same_tape(q, v, "attention");
  const Tensor& Q = q.value();
  const Tensor& K = k.value();
  const Tensor& V = v.value();
  detail::require_matrix(Q, "attention");
  if (K.shape != Q.shape || V.shape != Q.shape) {
    throw ShapeError("attention: q/k/v shapes differ: " + shape_string(Q.shape) + ", " +
                     shape_string(K.shape) + ", " + shape_string(V.shape));
  }
  const std::size_t dim = Q.cols();
  if (batch == 0 || heads == 0 || Q.rows() % batch != 0 || dim % heads != 0) {
    throw ShapeError("attention: " + shape_string(Q.shape) + " does not split into " +
                     std::to_string(batch) + " sequences x " + std::to_string(heads) + " heads");
  }
  const std::size_t seq = Q.rows() / batch;
  const std::size_t hd = dim / heads;
  const double sc = 1.0 / std::sqrt(static_cast<double>(hd));
  std::vector<double> probs(batch * heads * seq * seq);
  Tensor out(Q.shape);
  for (std::size_t b = 0; b < batch; ++b) {
    for (std::size_t h = 0; h < heads; ++h) {
      double* P = probs.data() + (b * heads + h) * seq * seq;
      for (std::size_t i = 0; i < seq; ++i) {
        const double* qi = Q.data.data() + (b * seq + i) * dim + h * hd;
        double mx = -INFINITY;
        for (std::size_t j = 0; j < seq; ++j) {
          const double* kj = K.data.data() + (b * seq + j) * dim + h * hd;
          double s = 0.0;
          for (std::size_t c = 0; c < hd; ++c) s += qi[c] * kj[c];
          P[i * seq + j] = s * sc;
          mx = std::max(mx, P[i * seq + j]);
        }
        double total = 0.0;
        for (std::size_t j = 0; j < seq; ++j) {
          P[i * seq + j] = std::exp(P[i * seq + j] - mx);
          total += P[i * seq + j];
        }
        double* oi = out.data.data() + (b * seq + i) * dim + h * hd;
        for (std::size_t j = 0; j < seq; ++j) {
          P[i * seq + j] /= total;
          const double* vj = V.data.data() + (b * seq + j) * dim + h * hd;
          for (std::size_t c = 0; c < hd; ++c) oi[c] += P[i * seq + j] * vj[c];
        }
      }
    }
  }
  const std::size_t iq = q.id(), ik = k.id(), iv = v.id();
  return tape.push(
      std::move(out), {iq, ik, iv},
      [=](Tape& t, std::size_t self) {
        const auto& node = t.node(self);
        const double* dO = node.grad.data();
        const double* Q = t.node(iq).value.data.data();
        const double* K = t.node(ik).value.data.data();
        const double* V = t.node(iv).value.data.data();
        double* dQ = t.grad_target(iq);
        double* dK = t.grad_target(ik);
        double* dV = t.grad_target(iv);
        std::vector<double> dS(seq * seq);
        for (std::size_t b = 0; b < batch; ++b) {
          for (std::size_t h = 0; h < heads; ++h) {
            const double* P = node.saved.data() + (b * heads + h) * seq * seq;
            const std::size_t off = b * seq * dim + h * hd;
            for (std::size_t i = 0; i < seq; ++i) {
              const double* doi = dO + off + i * dim;
              double dot = 0.0;
              for (std::size_t j = 0; j < seq; ++j) {
                const double* vj = V + off + j * dim;
                double dp = 0.0;
                for (std::size_t c = 0; c < hd; ++c) dp += doi[c] * vj[c];
                dS[i * seq + j] = dp;
                dot += dp * P[i * seq + j];
              }
              for (std::size_t j = 0; j < seq; ++j) {
                dS[i * seq + j] = P[i * seq + j] * (dS[i * seq + j] - dot) * sc;
              }
            }
            if (dV) {
              for (std::size_t i = 0; i < seq; ++i)
                for (std::size_t j = 0; j < seq; ++j) {
                  const double p = P[i * seq + j];
                  const double* doi = dO + off + i * dim;
                  double* dvj = dV + off + j * dim;
                  for (std::size_t c = 0; c < hd; ++c) dvj[c] += p * doi[c];
                }
            }
            for (std::size_t i = 0; i < seq; ++i) {
              for (std::size_t j = 0; j < seq; ++j) {
                const double s = dS[i * seq + j];
                if (dQ) {
                  const double* kj = K + off + j * dim;
                  double* dqi = dQ + off + i * dim;
                  for (std::size_t c = 0; c < hd; ++c) dqi[c] += s * kj[c];
                }
                if (dK) {
                  const double* qi = Q + off + i * dim;
                  double* dkj = dK + off + j * dim;
                  for (std::size_t c = 0; c < hd; ++c) dkj[c] += s * qi[c];
                }
              }
            }
          }
        }
      },
      std::move(probs));
}

}  // namespace pvit
