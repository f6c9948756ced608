#pragma once

// Reverse-mode differentiation over dense row-major f64 matrices.
//
// A Tape records every op as a node holding its forward value and a closure
// that pushes the node's gradient into its parents. Nodes are appended in
// execution order, so a reverse sweep is a valid topological order.
// Only scalar-with-tensor broadcasting exists; bias rows go through add_bias.

#include <algorithm>
#include <array>
#include <cmath>
#include <cstddef>
#include <functional>
#include <limits>
#include <numbers>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include "pointgmm/errors.hpp"

namespace pointgmm::ad {

class Tensor {
 public:
  Tensor() = default;
  Tensor(std::size_t rows, std::size_t cols, double fill = 0.0) : rows_(rows), cols_(cols), data_(rows * cols, fill) {}
  Tensor(std::size_t rows, std::size_t cols, std::vector<double> data)
      : rows_(rows), cols_(cols), data_(std::move(data)) {
    if (data_.size() != rows_ * cols_)
      throw UsageError("tensor data length " + std::to_string(data_.size()) + " != " + std::to_string(rows_) + "x" +
                       std::to_string(cols_));
  }

  static Tensor scalar(double v) { return Tensor(1, 1, v); }

  std::size_t rows() const noexcept { return rows_; }
  std::size_t cols() const noexcept { return cols_; }
  std::size_t size() const noexcept { return data_.size(); }
  std::vector<std::size_t> shape() const { return {rows_, cols_}; }
  bool empty() const noexcept { return data_.empty(); }

  double& operator()(std::size_t r, std::size_t c) noexcept { return data_[r * cols_ + c]; }
  double operator()(std::size_t r, std::size_t c) const noexcept { return data_[r * cols_ + c]; }
  double& operator[](std::size_t i) noexcept { return data_[i]; }
  double operator[](std::size_t i) const noexcept { return data_[i]; }

  double* data() noexcept { return data_.data(); }
  const double* data() const noexcept { return data_.data(); }
  std::vector<double>& values() noexcept { return data_; }
  const std::vector<double>& values() const noexcept { return data_; }
  std::span<const double> row(std::size_t r) const noexcept { return {data_.data() + r * cols_, cols_}; }

  double item() const {
    if (size() != 1) throw UsageError("item() on a non-scalar tensor");
    return data_[0];
  }

  bool same_shape(const Tensor& o) const noexcept { return rows_ == o.rows_ && cols_ == o.cols_; }

  bool all_finite() const noexcept {
    return std::all_of(data_.begin(), data_.end(), [](double v) { return std::isfinite(v); });
  }

  friend bool operator==(const Tensor&, const Tensor&) = default;

 private:
  std::size_t rows_ = 0;
  std::size_t cols_ = 0;
  std::vector<double> data_;
};

class Tape;

/// Handle to a node on a tape. Cheap to copy; valid while the tape lives.
class Var {
 public:
  Var() = default;
  Var(Tape* tape, std::size_t id) : tape_(tape), id_(id) {}
  Tape& tape() const noexcept { return *tape_; }
  std::size_t id() const noexcept { return id_; }
  const Tensor& value() const;
  std::size_t rows() const { return value().rows(); }
  std::size_t cols() const { return value().cols(); }

 private:
  Tape* tape_ = nullptr;
  std::size_t id_ = 0;
};

class Tape {
 public:
  /// Receives the node's accumulated output gradient.
  using BackwardFn = std::function<void(Tape&, const Tensor& out_grad)>;

  Tape() = default;
  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;

  Var constant(Tensor v) { return push(std::move(v), false, nullptr); }
  Var variable(Tensor v) { return push(std::move(v), true, nullptr); }

  /// Records a derived node. `backward` runs only if some parent needs a gradient.
  Var record(Tensor value, std::span<const Var> parents, BackwardFn backward) {
    if (!value.all_finite()) throw NumericError("non-finite value produced on tape");
    bool needs = false;
    for (const auto& p : parents) {
      if (&p.tape() != this) throw UsageError("mixing vars from different tapes");
      needs = needs || nodes_[p.id()].needs_grad;
    }
    return push(std::move(value), needs, needs ? std::move(backward) : nullptr);
  }

  const Tensor& value(std::size_t id) const { return nodes_.at(id).value; }
  bool needs_grad(std::size_t id) const { return nodes_.at(id).needs_grad; }

  /// Gradient buffer of a node, allocated (zeroed) on first touch.
  Tensor& grad_buffer(std::size_t id) {
    auto& n = nodes_.at(id);
    if (n.grad.empty() && !n.value.empty()) n.grad = Tensor(n.value.rows(), n.value.cols());
    return n.grad;
  }

  /// Gradient of the last backward() target with respect to `v`; zeros if untouched.
  Tensor grad(Var v) const {
    const auto& n = nodes_.at(v.id());
    if (n.grad.empty()) return Tensor(n.value.rows(), n.value.cols());
    return n.grad;
  }

  void backward(Var out) {
    const auto& o = nodes_.at(out.id());
    if (o.value.size() != 1) throw UsageError("backward() requires a scalar output");
    for (auto& n : nodes_) n.grad = Tensor();
    grad_buffer(out.id())[0] = 1.0;
    for (std::size_t k = out.id() + 1; k-- > 0;) {
      auto& n = nodes_[k];
      if (!n.backward || n.grad.empty()) continue;
      const Tensor g = n.grad;
      n.backward(*this, g);
    }
  }

  std::size_t size() const noexcept { return nodes_.size(); }

 private:
  struct Node {
    Tensor value;
    Tensor grad;
    bool needs_grad = false;
    BackwardFn backward;
  };

  Var push(Tensor v, bool needs, BackwardFn fn) {
    nodes_.push_back(Node{std::move(v), Tensor(), needs, std::move(fn)});
    return Var(this, nodes_.size() - 1);
  }

  std::vector<Node> nodes_;
};

inline const Tensor& Var::value() const { return tape_->value(id_); }

namespace detail {

inline void accumulate(Tape& t, const Var& v, const Tensor& g) {
  if (!t.needs_grad(v.id())) return;
  Tensor& buf = t.grad_buffer(v.id());
  for (std::size_t i = 0; i < g.size(); ++i) buf[i] += g[i];
}

inline void require_same_shape(const Var& a, const Var& b, const char* op) {
  if (!a.value().same_shape(b.value()))
    throw UsageError(std::string(op) + ": shape mismatch " + std::to_string(a.rows()) + "x" + std::to_string(a.cols()) +
                     " vs " + std::to_string(b.rows()) + "x" + std::to_string(b.cols()));
}

template <class F>
Tensor map(const Tensor& x, F f) {
  Tensor out(x.rows(), x.cols());
  for (std::size_t i = 0; i < x.size(); ++i) out[i] = f(x[i]);
  return out;
}

/// C += A * B, fixed i-k-j accumulation order (bit-identical per row regardless of row count).
inline void gemm_acc(const double* A, const double* B, double* C, std::size_t m, std::size_t k, std::size_t n) {
  for (std::size_t i = 0; i < m; ++i) {
    double* c = C + i * n;
    const double* a = A + i * k;
    for (std::size_t p = 0; p < k; ++p) {
      const double av = a[p];
      if (av == 0.0) continue;
      const double* b = B + p * n;
      for (std::size_t j = 0; j < n; ++j) c[j] += av * b[j];
    }
  }
}

/// C += A * B^T with A m x k, B n x k.
inline void gemm_abt_acc(const double* A, const double* B, double* C, std::size_t m, std::size_t k, std::size_t n) {
  for (std::size_t i = 0; i < m; ++i) {
    const double* a = A + i * k;
    for (std::size_t j = 0; j < n; ++j) {
      const double* b = B + j * k;
      double s = 0.0;
      for (std::size_t p = 0; p < k; ++p) s += a[p] * b[p];
      C[i * n + j] += s;
    }
  }
}

/// C += A^T * B with A m x k, B m x n.
inline void gemm_atb_acc(const double* A, const double* B, double* C, std::size_t m, std::size_t k, std::size_t n) {
  for (std::size_t i = 0; i < m; ++i) {
    const double* a = A + i * k;
    const double* b = B + i * n;
    for (std::size_t p = 0; p < k; ++p) {
      const double av = a[p];
      if (av == 0.0) continue;
      double* c = C + p * n;
      for (std::size_t j = 0; j < n; ++j) c[j] += av * b[j];
    }
  }
}

}  // namespace detail

// ---- elementwise ------------------------------------------------------------

inline Var add(Var a, Var b) {
  detail::require_same_shape(a, b, "add");
  Tensor out = a.value();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] += b.value()[i];
  const Var ps[] = {a, b};
  return a.tape().record(std::move(out), ps, [a, b](Tape& t, const Tensor& g) {
    detail::accumulate(t, a, g);
    detail::accumulate(t, b, g);
  });
}

inline Var sub(Var a, Var b) {
  detail::require_same_shape(a, b, "sub");
  Tensor out = a.value();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] -= b.value()[i];
  const Var ps[] = {a, b};
  return a.tape().record(std::move(out), ps, [a, b](Tape& t, const Tensor& g) {
    detail::accumulate(t, a, g);
    detail::accumulate(t, b, detail::map(g, [](double v) { return -v; }));
  });
}

inline Var mul(Var a, Var b) {
  detail::require_same_shape(a, b, "mul");
  Tensor out = a.value();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] *= b.value()[i];
  const Var ps[] = {a, b};
  return a.tape().record(std::move(out), ps, [a, b](Tape& t, const Tensor& g) {
    const Tensor& av = t.value(a.id());
    const Tensor& bv = t.value(b.id());
    Tensor ga(g.rows(), g.cols()), gb(g.rows(), g.cols());
    for (std::size_t i = 0; i < g.size(); ++i) {
      ga[i] = g[i] * bv[i];
      gb[i] = g[i] * av[i];
    }
    detail::accumulate(t, a, ga);
    detail::accumulate(t, b, gb);
  });
}

inline Var div(Var a, Var b) {
  detail::require_same_shape(a, b, "div");
  Tensor out = a.value();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] /= b.value()[i];
  const Var ps[] = {a, b};
  return a.tape().record(std::move(out), ps, [a, b](Tape& t, const Tensor& g) {
    const Tensor& av = t.value(a.id());
    const Tensor& bv = t.value(b.id());
    Tensor ga(g.rows(), g.cols()), gb(g.rows(), g.cols());
    for (std::size_t i = 0; i < g.size(); ++i) {
      ga[i] = g[i] / bv[i];
      gb[i] = -g[i] * av[i] / (bv[i] * bv[i]);
    }
    detail::accumulate(t, a, ga);
    detail::accumulate(t, b, gb);
  });
}

/// s * a for a constant scalar s.
inline Var scale(Var a, double s) {
  Tensor out = detail::map(a.value(), [s](double v) { return v * s; });
  const Var ps[] = {a};
  return a.tape().record(std::move(out), ps, [a, s](Tape& t, const Tensor& g) {
    detail::accumulate(t, a, detail::map(g, [s](double v) { return v * s; }));
  });
}

inline Var add_scalar(Var a, double s) {
  Tensor out = detail::map(a.value(), [s](double v) { return v + s; });
  const Var ps[] = {a};
  return a.tape().record(std::move(out), ps, [a](Tape& t, const Tensor& g) { detail::accumulate(t, a, g); });
}

/// a (M x n) times the 1x1 tensor s, broadcast.
inline Var mul_scalar(Var a, Var s) {
  if (s.value().size() != 1) throw UsageError("mul_scalar: second operand must be 1x1");
  const double sv = s.value()[0];
  Tensor out = detail::map(a.value(), [sv](double v) { return v * sv; });
  const Var ps[] = {a, s};
  return a.tape().record(std::move(out), ps, [a, s](Tape& t, const Tensor& g) {
    const double sv = t.value(s.id())[0];
    const Tensor& av = t.value(a.id());
    double gs = 0.0;
    for (std::size_t i = 0; i < g.size(); ++i) gs += g[i] * av[i];
    detail::accumulate(t, a, detail::map(g, [sv](double v) { return v * sv; }));
    detail::accumulate(t, s, Tensor::scalar(gs));
  });
}

namespace detail {
template <class F, class DF>
Var unary(Var a, F f, DF df) {
  Tensor out = map(a.value(), f);
  const Var ps[] = {a};
  return a.tape().record(std::move(out), ps, [a, df](Tape& t, const Tensor& g) {
    const Tensor& x = t.value(a.id());
    Tensor ga(g.rows(), g.cols());
    for (std::size_t i = 0; i < g.size(); ++i) ga[i] = g[i] * df(x[i]);
    accumulate(t, a, ga);
  });
}
}  // namespace detail

inline Var relu(Var a) {
  return detail::unary(a, [](double x) { return x > 0.0 ? x : 0.0; }, [](double x) { return x > 0.0 ? 1.0 : 0.0; });
}
inline Var log(Var a) {
  return detail::unary(a, [](double x) { return std::log(x); }, [](double x) { return 1.0 / x; });
}
inline Var exp(Var a) {
  return detail::unary(a, [](double x) { return std::exp(x); }, [](double x) { return std::exp(x); });
}
inline Var square(Var a) {
  return detail::unary(a, [](double x) { return x * x; }, [](double x) { return 2.0 * x; });
}
inline Var sqrt(Var a) {
  return detail::unary(a, [](double x) { return std::sqrt(x); }, [](double x) { return 0.5 / std::sqrt(x); });
}
inline Var abs(Var a) {
  return detail::unary(a, [](double x) { return std::abs(x); },
                       [](double x) { return x > 0.0 ? 1.0 : (x < 0.0 ? -1.0 : 0.0); });
}
/// max(x, floor); zero gradient where clamped.
inline Var clamp_min(Var a, double floor) {
  return detail::unary(a, [floor](double x) { return x < floor ? floor : x; },
                       [floor](double x) { return x < floor ? 0.0 : 1.0; });
}

// ---- reductions -------------------------------------------------------------

inline Var sum(Var a) {
  double s = 0.0;
  for (double v : a.value().values()) s += v;
  const Var ps[] = {a};
  return a.tape().record(Tensor::scalar(s), ps, [a](Tape& t, const Tensor& g) {
    const Tensor& x = t.value(a.id());
    detail::accumulate(t, a, Tensor(x.rows(), x.cols(), g[0]));
  });
}

inline Var mean(Var a) {
  const auto n = static_cast<double>(a.value().size());
  return scale(sum(a), 1.0 / n);
}

/// Column-wise max over rows (global max-pool): M x n -> 1 x n. Ties pick the first row.
inline Var max_pool_rows(Var a) {
  const Tensor& x = a.value();
  if (x.rows() == 0) throw UsageError("max_pool_rows on an empty tensor");
  Tensor out(1, x.cols());
  std::vector<std::size_t> arg(x.cols(), 0);
  for (std::size_t c = 0; c < x.cols(); ++c) out[c] = x(0, c);
  for (std::size_t r = 1; r < x.rows(); ++r)
    for (std::size_t c = 0; c < x.cols(); ++c)
      if (x(r, c) > out[c]) {
        out[c] = x(r, c);
        arg[c] = r;
      }
  const Var ps[] = {a};
  return a.tape().record(std::move(out), ps, [a, arg = std::move(arg)](Tape& t, const Tensor& g) {
    const Tensor& x = t.value(a.id());
    Tensor ga(x.rows(), x.cols());
    for (std::size_t c = 0; c < x.cols(); ++c) ga(arg[c], c) = g[c];
    detail::accumulate(t, a, ga);
  });
}

// ---- linear algebra and layout ---------------------------------------------

inline Var matmul(Var a, Var b) {
  const Tensor& A = a.value();
  const Tensor& B = b.value();
  if (A.cols() != B.rows())
    throw UsageError("matmul: inner dims " + std::to_string(A.cols()) + " vs " + std::to_string(B.rows()));
  const std::size_t m = A.rows(), k = A.cols(), n = B.cols();
  Tensor out(m, n);
  detail::gemm_acc(A.data(), B.data(), out.data(), m, k, n);
  const Var ps[] = {a, b};
  return a.tape().record(std::move(out), ps, [a, b, m, k, n](Tape& t, const Tensor& g) {
    if (t.needs_grad(a.id())) {
      Tensor ga(m, k);
      detail::gemm_abt_acc(g.data(), t.value(b.id()).data(), ga.data(), m, n, k);
      detail::accumulate(t, a, ga);
    }
    if (t.needs_grad(b.id())) {
      Tensor gb(k, n);
      detail::gemm_atb_acc(t.value(a.id()).data(), g.data(), gb.data(), m, k, n);
      detail::accumulate(t, b, gb);
    }
  });
}

inline Var transpose(Var a) {
  const Tensor& x = a.value();
  Tensor out(x.cols(), x.rows());
  for (std::size_t r = 0; r < x.rows(); ++r)
    for (std::size_t c = 0; c < x.cols(); ++c) out(c, r) = x(r, c);
  const Var ps[] = {a};
  return a.tape().record(std::move(out), ps, [a](Tape& t, const Tensor& g) {
    Tensor ga(g.cols(), g.rows());
    for (std::size_t r = 0; r < g.rows(); ++r)
      for (std::size_t c = 0; c < g.cols(); ++c) ga(c, r) = g(r, c);
    detail::accumulate(t, a, ga);
  });
}

/// Row-major reinterpretation; element count must match.
inline Var reshape(Var a, std::size_t rows, std::size_t cols) {
  if (rows * cols != a.value().size()) throw UsageError("reshape: element count mismatch");
  Tensor out(rows, cols, a.value().values());
  const Var ps[] = {a};
  return a.tape().record(std::move(out), ps, [a](Tape& t, const Tensor& g) {
    const Tensor& x = t.value(a.id());
    detail::accumulate(t, a, Tensor(x.rows(), x.cols(), g.values()));
  });
}

/// a (M x n) + b (1 x n) added to every row.
inline Var add_bias(Var a, Var b) {
  const Tensor& x = a.value();
  const Tensor& bias = b.value();
  if (bias.rows() != 1 || bias.cols() != x.cols()) throw UsageError("add_bias: bias must be 1 x cols");
  Tensor out = x;
  for (std::size_t r = 0; r < x.rows(); ++r)
    for (std::size_t c = 0; c < x.cols(); ++c) out(r, c) += bias[c];
  const Var ps[] = {a, b};
  return a.tape().record(std::move(out), ps, [a, b](Tape& t, const Tensor& g) {
    detail::accumulate(t, a, g);
    if (t.needs_grad(b.id())) {
      Tensor gb(1, g.cols());
      for (std::size_t r = 0; r < g.rows(); ++r)
        for (std::size_t c = 0; c < g.cols(); ++c) gb[c] += g(r, c);
      detail::accumulate(t, b, gb);
    }
  });
}

inline Var concat_cols(std::span<const Var> parts) {
  if (parts.empty()) throw UsageError("concat_cols: no inputs");
  const std::size_t rows = parts[0].rows();
  std::size_t cols = 0;
  for (const auto& p : parts) {
    if (p.rows() != rows) throw UsageError("concat_cols: row count mismatch");
    cols += p.cols();
  }
  Tensor out(rows, cols);
  std::vector<std::size_t> offsets;
  std::size_t off = 0;
  for (const auto& p : parts) {
    offsets.push_back(off);
    for (std::size_t r = 0; r < rows; ++r)
      for (std::size_t c = 0; c < p.cols(); ++c) out(r, off + c) = p.value()(r, c);
    off += p.cols();
  }
  std::vector<Var> ps(parts.begin(), parts.end());
  return parts[0].tape().record(std::move(out), ps, [ps, offsets](Tape& t, const Tensor& g) {
    for (std::size_t k = 0; k < ps.size(); ++k) {
      if (!t.needs_grad(ps[k].id())) continue;
      const Tensor& x = t.value(ps[k].id());
      Tensor gp(x.rows(), x.cols());
      for (std::size_t r = 0; r < x.rows(); ++r)
        for (std::size_t c = 0; c < x.cols(); ++c) gp(r, c) = g(r, offsets[k] + c);
      detail::accumulate(t, ps[k], gp);
    }
  });
}

inline Var concat_rows(std::span<const Var> parts) {
  if (parts.empty()) throw UsageError("concat_rows: no inputs");
  const std::size_t cols = parts[0].cols();
  std::size_t rows = 0;
  for (const auto& p : parts) {
    if (p.cols() != cols) throw UsageError("concat_rows: column count mismatch");
    rows += p.rows();
  }
  std::vector<double> data;
  data.reserve(rows * cols);
  for (const auto& p : parts) data.insert(data.end(), p.value().values().begin(), p.value().values().end());
  std::vector<Var> ps(parts.begin(), parts.end());
  return parts[0].tape().record(Tensor(rows, cols, std::move(data)), ps, [ps](Tape& t, const Tensor& g) {
    std::size_t off = 0;
    for (const auto& p : ps) {
      const Tensor& x = t.value(p.id());
      if (t.needs_grad(p.id())) {
        std::vector<double> part(g.values().begin() + static_cast<std::ptrdiff_t>(off),
                                 g.values().begin() + static_cast<std::ptrdiff_t>(off + x.size()));
        detail::accumulate(t, p, Tensor(x.rows(), x.cols(), std::move(part)));
      }
      off += x.size();
    }
  });
}

/// Rows [r0, r1).
inline Var slice_rows(Var a, std::size_t r0, std::size_t r1) {
  const Tensor& x = a.value();
  if (r0 > r1 || r1 > x.rows()) throw UsageError("slice_rows: range out of bounds");
  std::vector<double> data(x.values().begin() + static_cast<std::ptrdiff_t>(r0 * x.cols()),
                           x.values().begin() + static_cast<std::ptrdiff_t>(r1 * x.cols()));
  const Var ps[] = {a};
  return a.tape().record(Tensor(r1 - r0, x.cols(), std::move(data)), ps, [a, r0](Tape& t, const Tensor& g) {
    const Tensor& x = t.value(a.id());
    Tensor& buf = t.grad_buffer(a.id());
    const std::size_t off = r0 * x.cols();
    for (std::size_t i = 0; i < g.size(); ++i) buf[off + i] += g[i];
  });
}

/// Columns [c0, c1).
inline Var slice_cols(Var a, std::size_t c0, std::size_t c1) {
  const Tensor& x = a.value();
  if (c0 > c1 || c1 > x.cols()) throw UsageError("slice_cols: range out of bounds");
  Tensor out(x.rows(), c1 - c0);
  for (std::size_t r = 0; r < x.rows(); ++r)
    for (std::size_t c = c0; c < c1; ++c) out(r, c - c0) = x(r, c);
  const Var ps[] = {a};
  return a.tape().record(std::move(out), ps, [a, c0](Tape& t, const Tensor& g) {
    Tensor& buf = t.grad_buffer(a.id());
    const std::size_t cols = t.value(a.id()).cols();
    for (std::size_t r = 0; r < g.rows(); ++r)
      for (std::size_t c = 0; c < g.cols(); ++c) buf[r * cols + c0 + c] += g(r, c);
  });
}

// ---- softmax ----------------------------------------------------------------

/// Softmax along `axis` (1: within each row, 0: within each column).
inline Var softmax(Var a, int axis = 1) {
  if (axis != 0 && axis != 1) throw UsageError("softmax: axis must be 0 or 1");
  const Tensor& x = a.value();
  const std::size_t groups = axis == 1 ? x.rows() : x.cols();
  const std::size_t len = axis == 1 ? x.cols() : x.rows();
  auto at = [&](std::size_t g, std::size_t k) { return axis == 1 ? g * x.cols() + k : k * x.cols() + g; };
  Tensor out(x.rows(), x.cols());
  for (std::size_t g = 0; g < groups; ++g) {
    double m = -std::numeric_limits<double>::infinity();
    for (std::size_t k = 0; k < len; ++k) m = std::max(m, x[at(g, k)]);
    double s = 0.0;
    for (std::size_t k = 0; k < len; ++k) s += (out[at(g, k)] = std::exp(x[at(g, k)] - m));
    for (std::size_t k = 0; k < len; ++k) out[at(g, k)] /= s;
  }
  const Var ps[] = {a};
  Tensor y = out;
  return a.tape().record(std::move(out), ps, [a, axis, y = std::move(y)](Tape& t, const Tensor& g) {
    const std::size_t groups = axis == 1 ? y.rows() : y.cols();
    const std::size_t len = axis == 1 ? y.cols() : y.rows();
    auto at = [&](std::size_t gi, std::size_t k) { return axis == 1 ? gi * y.cols() + k : k * y.cols() + gi; };
    Tensor ga(y.rows(), y.cols());
    for (std::size_t gi = 0; gi < groups; ++gi) {
      double dot = 0.0;
      for (std::size_t k = 0; k < len; ++k) dot += g[at(gi, k)] * y[at(gi, k)];
      for (std::size_t k = 0; k < len; ++k) ga[at(gi, k)] = y[at(gi, k)] * (g[at(gi, k)] - dot);
    }
    detail::accumulate(t, a, ga);
  });
}

/// log(softmax(a)) within each row, computed stably.
inline Var log_softmax_rows(Var a) {
  const Tensor& x = a.value();
  Tensor out(x.rows(), x.cols());
  for (std::size_t r = 0; r < x.rows(); ++r) {
    double m = -std::numeric_limits<double>::infinity();
    for (std::size_t c = 0; c < x.cols(); ++c) m = std::max(m, x(r, c));
    double s = 0.0;
    for (std::size_t c = 0; c < x.cols(); ++c) s += std::exp(x(r, c) - m);
    const double lse = m + std::log(s);
    for (std::size_t c = 0; c < x.cols(); ++c) out(r, c) = x(r, c) - lse;
  }
  const Var ps[] = {a};
  Tensor y = out;
  return a.tape().record(std::move(out), ps, [a, y = std::move(y)](Tape& t, const Tensor& g) {
    Tensor ga(y.rows(), y.cols());
    for (std::size_t r = 0; r < y.rows(); ++r) {
      double gs = 0.0;
      for (std::size_t c = 0; c < y.cols(); ++c) gs += g(r, c);
      for (std::size_t c = 0; c < y.cols(); ++c) ga(r, c) = g(r, c) - std::exp(y(r, c)) * gs;
    }
    detail::accumulate(t, a, ga);
  });
}

// ---- geometry ---------------------------------------------------------------

inline constexpr double kGramSchmidtDegenerate = 1e-8;

namespace detail {

using Row3 = std::array<double, 3>;

inline double dot3(const Row3& a, const Row3& b) { return a[0] * b[0] + a[1] * b[1] + a[2] * b[2]; }

/// Intermediates of one 3x3 classical Gram-Schmidt pass (rows in, orthonormal rows out).
struct GramSchmidt3 {
  Row3 u[3];       // inputs
  Row3 w[3];       // residuals after projection
  Row3 e[3];       // outputs
  double norm[3];  // |w_k|
  bool fallback[3] = {false, false, false};

  explicit GramSchmidt3(const double* in) {
    for (int k = 0; k < 3; ++k)
      for (int c = 0; c < 3; ++c) u[k][c] = in[3 * k + c];
    for (int k = 0; k < 3; ++k) {
      w[k] = u[k];
      for (int i = 0; i < k; ++i) {
        const double c = dot3(u[k], e[i]);
        for (int d = 0; d < 3; ++d) w[k][d] -= c * e[i][d];
      }
      norm[k] = std::sqrt(dot3(w[k], w[k]));
      if (norm[k] < kGramSchmidtDegenerate) {
        fallback[k] = true;
        // Standard basis vector of this row's index (then the next ones),
        // re-orthogonalized against the rows already emitted.
        for (int attempt = 0; attempt < 3; ++attempt) {
          Row3 b{0.0, 0.0, 0.0};
          b[(k + attempt) % 3] = 1.0;
          for (int i = 0; i < k; ++i) {
            const double c = dot3(b, e[i]);
            for (int d = 0; d < 3; ++d) b[d] -= c * e[i][d];
          }
          const double n = std::sqrt(dot3(b, b));
          if (n > 1e-3) {
            w[k] = b;
            norm[k] = n;
            break;
          }
        }
      }
      for (int d = 0; d < 3; ++d) e[k][d] = w[k][d] / norm[k];
    }
  }

  /// Pulls gradients wrt the outputs back to the inputs. Fallback rows are constants.
  void backward(const double* g_out, double* g_in) const {
    Row3 ge[3];
    for (int k = 0; k < 3; ++k)
      for (int c = 0; c < 3; ++c) ge[k][c] = g_out[3 * k + c];
    Row3 gu[3] = {{0, 0, 0}, {0, 0, 0}, {0, 0, 0}};
    for (int k = 2; k >= 0; --k) {
      if (fallback[k]) continue;
      // e = w / |w|
      const double proj = dot3(ge[k], e[k]);
      Row3 gw;
      for (int d = 0; d < 3; ++d) gw[d] = (ge[k][d] - e[k][d] * proj) / norm[k];
      // w = u_k - sum_i (u_k . e_i) e_i
      for (int d = 0; d < 3; ++d) gu[k][d] += gw[d];
      for (int i = 0; i < k; ++i) {
        const double c = dot3(u[k], e[i]);
        const double gc = -dot3(gw, e[i]);
        for (int d = 0; d < 3; ++d) {
          gu[k][d] += gc * e[i][d];
          ge[i][d] += gc * u[k][d] - c * gw[d];
        }
      }
    }
    for (int k = 0; k < 3; ++k)
      for (int c = 0; c < 3; ++c) g_in[3 * k + c] += gu[k][c];
  }
};

}  // namespace detail

/// Row-wise Gram-Schmidt on K x 9 input, each row a row-major 3x3 whose rows
/// are orthonormalized in order. Rows with residual norm < 1e-8 fall back to a
/// re-orthogonalized standard basis vector.
inline Var gram_schmidt(Var a) {
  const Tensor& x = a.value();
  if (x.cols() != 9) throw UsageError("gram_schmidt: expected K x 9 input");
  Tensor out(x.rows(), 9);
  for (std::size_t r = 0; r < x.rows(); ++r) {
    const detail::GramSchmidt3 gs(x.data() + 9 * r);
    for (int k = 0; k < 3; ++k)
      for (int c = 0; c < 3; ++c) out(r, static_cast<std::size_t>(3 * k + c)) = gs.e[k][c];
  }
  const Var ps[] = {a};
  return a.tape().record(std::move(out), ps, [a](Tape& t, const Tensor& g) {
    const Tensor& x = t.value(a.id());
    Tensor ga(x.rows(), 9);
    for (std::size_t r = 0; r < x.rows(); ++r) {
      const detail::GramSchmidt3 gs(x.data() + 9 * r);
      gs.backward(g.data() + 9 * r, ga.data() + 9 * r);
    }
    detail::accumulate(t, a, ga);
  });
}

/// Batched Gaussian-mixture log-likelihood over sibling groups.
///
/// Component j has log weight `log_w(j)`, mean `mu.row(j)`, orthonormal
/// eigenvector rows `U.row(j)` (3x3 row-major) and eigenvalues `lam.row(j)`,
/// i.e. covariance U^T diag(lam) U. Point i is scored against the components of
/// group `group[i]`, which are [group[i] * group_size, (group[i] + 1) * group_size).
/// Returns the scalar sum_i log sum_{j in group} exp(log_w_j + log N(x_i | j)).
/// `points` and `group` are constants.
inline Var mixture_log_likelihood(Var log_w, Var mu, Var U, Var lam, const std::vector<double>& points,
                                  const std::vector<std::size_t>& group, std::size_t group_size) {
  const std::size_t K = log_w.rows();
  if (log_w.cols() != 1 || mu.rows() != K || mu.cols() != 3 || U.rows() != K || U.cols() != 9 || lam.rows() != K ||
      lam.cols() != 3)
    throw UsageError("mixture_log_likelihood: parameter shapes must be Kx1, Kx3, Kx9, Kx3");
  if (group_size == 0 || K % group_size != 0) throw UsageError("mixture_log_likelihood: bad group size");
  if (points.size() != 3 * group.size()) throw UsageError("mixture_log_likelihood: points/group length mismatch");
  for (std::size_t gi : group)
    if ((gi + 1) * group_size > K) throw UsageError("mixture_log_likelihood: group index out of range");

  // Forward pass shared with backward via recomputation of per-point terms.
  struct Eval {
    static double log_density(const Tensor& lw, const Tensor& m, const Tensor& u, const Tensor& l, std::size_t j,
                              const double* x, double* proj_out, double* diff_out) {
      double d[3] = {x[0] - m(j, 0), x[1] - m(j, 1), x[2] - m(j, 2)};
      double maha = 0.0, logdet = 0.0;
      for (std::size_t k = 0; k < 3; ++k) {
        const double p = u(j, 3 * k) * d[0] + u(j, 3 * k + 1) * d[1] + u(j, 3 * k + 2) * d[2];
        if (proj_out) proj_out[k] = p;
        maha += p * p / l(j, k);
        logdet += std::log(l(j, k));
      }
      if (diff_out)
        for (int k = 0; k < 3; ++k) diff_out[k] = d[k];
      return lw(j, 0) - 1.5 * 1.8378770664093454836 - 0.5 * logdet - 0.5 * maha;
    }
  };

  const Tensor& LW = log_w.value();
  const Tensor& M = mu.value();
  const Tensor& UU = U.value();
  const Tensor& L = lam.value();
  std::vector<double> a(group_size);
  double total = 0.0;
  for (std::size_t i = 0; i < group.size(); ++i) {
    const std::size_t first = group[i] * group_size;
    for (std::size_t s = 0; s < group_size; ++s)
      a[s] = Eval::log_density(LW, M, UU, L, first + s, points.data() + 3 * i, nullptr, nullptr);
    double mx = -std::numeric_limits<double>::infinity();
    for (double v : a) mx = std::max(mx, v);
    double acc = 0.0;
    for (double v : a) acc += std::exp(v - mx);
    total += mx + std::log(acc);
  }

  const Var ps[] = {log_w, mu, U, lam};
  return log_w.tape().record(
      Tensor::scalar(total), ps, [log_w, mu, U, lam, points, group, group_size](Tape& t, const Tensor& g) {
        const Tensor& LW = t.value(log_w.id());
        const Tensor& M = t.value(mu.id());
        const Tensor& UU = t.value(U.id());
        const Tensor& L = t.value(lam.id());
        const std::size_t K = LW.rows();
        Tensor g_lw(K, 1), g_mu(K, 3), g_u(K, 9), g_lam(K, 3);
        std::vector<double> a(group_size), proj(3 * group_size), diff(3 * group_size);
        for (std::size_t i = 0; i < group.size(); ++i) {
          const std::size_t first = group[i] * group_size;
          for (std::size_t s = 0; s < group_size; ++s)
            a[s] = Eval::log_density(LW, M, UU, L, first + s, points.data() + 3 * i, &proj[3 * s], &diff[3 * s]);
          double mx = -std::numeric_limits<double>::infinity();
          for (double v : a) mx = std::max(mx, v);
          double acc = 0.0;
          for (double v : a) acc += std::exp(v - mx);
          for (std::size_t s = 0; s < group_size; ++s) {
            const std::size_t j = first + s;
            const double r = g[0] * std::exp(a[s] - mx) / acc;
            if (r == 0.0) continue;
            g_lw(j, 0) += r;
            for (std::size_t k = 0; k < 3; ++k) {
              const double l = L(j, k);
              const double p = proj[3 * s + k];
              const double q = p / l;
              g_lam(j, k) += r * 0.5 * (q * q - 1.0 / l);
              for (std::size_t c = 0; c < 3; ++c) {
                g_mu(j, c) += r * q * UU(j, 3 * k + c);
                g_u(j, 3 * k + c) -= r * q * diff[3 * s + c];
              }
            }
          }
        }
        detail::accumulate(t, log_w, g_lw);
        detail::accumulate(t, mu, g_mu);
        detail::accumulate(t, U, g_u);
        detail::accumulate(t, lam, g_lam);
      });
}

// ---- verification -----------------------------------------------------------

/// Max over coordinates of |analytic - central difference| / max(1, |central difference|).
inline double grad_check(const std::function<Var(Tape&, Var)>& f, const Tensor& theta, double step = 1e-5) {
  Tensor analytic;
  {
    Tape tape;
    Var x = tape.variable(theta);
    Var y = f(tape, x);
    tape.backward(y);
    analytic = tape.grad(x);
  }
  auto eval = [&](const Tensor& th) {
    Tape tape;
    Var x = tape.variable(th);
    return f(tape, x).value().item();
  };
  double worst = 0.0;
  Tensor probe = theta;
  for (std::size_t i = 0; i < theta.size(); ++i) {
    const double orig = probe[i];
    probe[i] = orig + step;
    const double up = eval(probe);
    probe[i] = orig - step;
    const double down = eval(probe);
    probe[i] = orig;
    const double numeric = (up - down) / (2.0 * step);
    worst = std::max(worst, std::abs(analytic[i] - numeric) / std::max(1.0, std::abs(numeric)));
  }
  return worst;
}

}  // namespace pointgmm::ad
