#pragma once

#include <Eigen/Core>

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <functional>
#include <limits>
#include <span>
#include <string>
#include <vector>

#include "lain/tensor.hpp"

namespace lain {

using RowMatrix = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using MatMap = Eigen::Map<RowMatrix>;
using ConstMatMap = Eigen::Map<const RowMatrix>;

inline ConstMatMap as_matrix(const Tensor& t) {
  return ConstMatMap(t.data().data(), static_cast<Eigen::Index>(t.rows()), static_cast<Eigen::Index>(t.cols()));
}
inline ConstMatMap as_matrix(const double* p, std::size_t r, std::size_t c) {
  return ConstMatMap(p, static_cast<Eigen::Index>(r), static_cast<Eigen::Index>(c));
}
inline MatMap as_matrix(double* p, std::size_t r, std::size_t c) {
  return MatMap(p, static_cast<Eigen::Index>(r), static_cast<Eigen::Index>(c));
}

/// Handle to a value recorded on a Tape.
struct Var {
  static constexpr std::uint32_t kNone = std::numeric_limits<std::uint32_t>::max();
  std::uint32_t id = kNone;
  bool valid() const { return id != kNone; }
};

/// Operation tape for reverse-mode differentiation.
///
/// Nodes are appended in evaluation order, so the recording is already a
/// topological order; backward() walks it in reverse. Leaves created with
/// param() read the parameter's storage directly and accumulate their
/// gradient into Parameter::tensor.grad(). A tape belongs to one thread.
class Tape {
 public:
  using Backward = std::function<void(Tape&, std::uint32_t)>;

  Var constant(Tensor value) { return push(std::move(value), nullptr, false, {}, "constant"); }

  Var param(Parameter& p) {
    Node n;
    n.param = &p;
    n.requires_grad = p.trainable;
    nodes_.push_back(std::move(n));
    return Var{static_cast<std::uint32_t>(nodes_.size() - 1)};
  }

  /// Records an op output. requires_grad is inherited from the inputs.
  Var record(Tensor value, std::initializer_list<Var> inputs, Backward fn, const char* op) {
    bool rg = false;
    for (Var v : inputs) rg = rg || requires_grad(v);
    return push(std::move(value), std::move(fn), rg, inputs, op);
  }
  Var record(Tensor value, std::span<const Var> inputs, Backward fn, const char* op) {
    bool rg = false;
    for (Var v : inputs) rg = rg || requires_grad(v);
    return push(std::move(value), std::move(fn), rg, {}, op);
  }

  const Tensor& value(Var v) const {
    const Node& n = nodes_.at(v.id);
    return n.param ? n.param->tensor : n.value;
  }
  double item(Var v) const { return value(v).data().at(0); }
  bool requires_grad(Var v) const { return nodes_.at(v.id).requires_grad; }
  std::size_t size() const { return nodes_.size(); }

  /// Gradient slot of a node; only meaningful inside or after backward().
  std::span<double> grad(Var v) {
    Node& n = nodes_[v.id];
    if (n.param) return {n.param->tensor.grad().data(), n.param->tensor.grad().size()};
    return {n.grad.data(), n.grad.size()};
  }
  std::span<double> grad(std::uint32_t id) { return grad(Var{id}); }

  /// Seeds d(out)/d(out) = 1 and propagates. `out` must hold one element.
  void backward(Var out) {
    if (value(out).size() != 1) {
      throw DimensionError("backward() needs a scalar output, got shape " + shape_str(value(out).shape()));
    }
    for (Node& n : nodes_) {
      if (!n.requires_grad) continue;
      if (n.param) {
        n.param->tensor.ensure_grad();
      } else {
        n.grad.assign(n.value.size(), 0.0);
      }
    }
    if (!requires_grad(out)) return;
    grad(out)[0] += 1.0;
    for (std::uint32_t i = out.id + 1; i-- > 0;) {
      Node& n = nodes_[i];
      if (n.requires_grad && n.backward) n.backward(*this, i);
    }
  }

  void clear() {
    nodes_.clear();
    branches_ = Fnv1a{};
  }

  /// Piecewise ops (ReLU, clamps, top-k) hash the branch they took, so two
  /// evaluations with equal digests lie on the same smooth piece.
  void note_branch(std::uint64_t v) { branches_.u64(v); }
  std::uint64_t branch_digest() const { return branches_.value(); }

 private:
  struct Node {
    Tensor value;
    Parameter* param = nullptr;
    bool requires_grad = false;
    std::vector<double> grad;
    Backward backward;
  };

  Var push(Tensor value, Backward fn, bool rg, std::initializer_list<Var>, const char* op) {
    if (!value.all_finite()) throw DomainError(std::string("non-finite value produced by ") + op);
    Node n;
    n.value = std::move(value);
    n.requires_grad = rg;
    if (rg) n.backward = std::move(fn);
    nodes_.push_back(std::move(n));
    return Var{static_cast<std::uint32_t>(nodes_.size() - 1)};
  }

  std::vector<Node> nodes_;
  Fnv1a branches_;
};

namespace detail {
inline void add_into(std::span<double> dst, const double* src) {
  for (std::size_t i = 0; i < dst.size(); ++i) dst[i] += src[i];
}
}  // namespace detail

// ---------------------------------------------------------------------------
// Linear algebra
// ---------------------------------------------------------------------------

namespace detail {
// Eigen peels vector lanes according to the address of mapped storage, so
// products over maps of arbitrary heap buffers can round differently from run
// to run. Operands are copied into Eigen-owned (aligned) matrices first.
template <class A, class B>
RowMatrix product(const A& a, const B& b) {
  const RowMatrix x = a, y = b;
  RowMatrix out(x.rows(), y.cols());
  out.noalias() = x * y;
  return out;
}
}  // namespace detail

inline Tensor matmul(const Tensor& a, const Tensor& b) {
  if (a.cols() != b.rows()) {
    throw DimensionError("matmul: inner dimensions disagree for " + shape_str(a.shape()) + " and " +
                         shape_str(b.shape()));
  }
  Tensor out({a.rows(), b.cols()});
  as_matrix(out.data().data(), a.rows(), b.cols()) = detail::product(as_matrix(a), as_matrix(b));
  return out;
}

inline Var matmul(Tape& t, Var a, Var b) {
  const Tensor& av = t.value(a);
  const Tensor& bv = t.value(b);
  const std::size_t m = av.rows(), k = av.cols(), n = bv.cols();
  Tensor out = matmul(av, bv);
  return t.record(
      std::move(out), {a, b},
      [a, b, m, k, n](Tape& tp, std::uint32_t self) {
        auto g = as_matrix(tp.grad(self).data(), m, n);
        if (tp.requires_grad(a)) {
          as_matrix(tp.grad(a).data(), m, k) += detail::product(g, as_matrix(tp.value(b)).transpose());
        }
        if (tp.requires_grad(b)) {
          as_matrix(tp.grad(b).data(), k, n) += detail::product(as_matrix(tp.value(a)).transpose(), g);
        }
      },
      "matmul");
}

inline Var transpose(Tape& t, Var a) {
  const Tensor& av = t.value(a);
  const std::size_t r = av.rows(), c = av.cols();
  Tensor out({c, r});
  as_matrix(out.data().data(), c, r) = as_matrix(av).transpose();
  return t.record(
      std::move(out), {a},
      [a, r, c](Tape& tp, std::uint32_t self) {
        as_matrix(tp.grad(a).data(), r, c) += as_matrix(tp.grad(self).data(), c, r).transpose();
      },
      "transpose");
}

inline Var add(Tape& t, Var a, Var b) {
  const Tensor& av = t.value(a);
  const Tensor& bv = t.value(b);
  if (av.size() != bv.size()) {
    throw DimensionError("add: shapes " + shape_str(av.shape()) + " and " + shape_str(bv.shape()) + " differ");
  }
  Tensor out = av;
  out.drop_grad();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] += bv[i];
  return t.record(
      std::move(out), {a, b},
      [a, b](Tape& tp, std::uint32_t self) {
        auto g = tp.grad(self);
        if (tp.requires_grad(a)) detail::add_into(tp.grad(a), g.data());
        if (tp.requires_grad(b)) detail::add_into(tp.grad(b), g.data());
      },
      "add");
}

/// a [m x n] + row [n], broadcast over rows.
inline Var add_row(Tape& t, Var a, Var row) {
  const Tensor& av = t.value(a);
  const Tensor& rv = t.value(row);
  const std::size_t m = av.rows(), n = av.cols();
  if (rv.size() != n) {
    throw DimensionError("add_row: row " + shape_str(rv.shape()) + " does not fit " + shape_str(av.shape()));
  }
  Tensor out({m, n});
  for (std::size_t i = 0; i < m; ++i)
    for (std::size_t j = 0; j < n; ++j) out[i * n + j] = av[i * n + j] + rv[j];
  return t.record(
      std::move(out), {a, row},
      [a, row, m, n](Tape& tp, std::uint32_t self) {
        auto g = tp.grad(self);
        if (tp.requires_grad(a)) detail::add_into(tp.grad(a), g.data());
        if (tp.requires_grad(row)) {
          auto gr = tp.grad(row);
          for (std::size_t i = 0; i < m; ++i)
            for (std::size_t j = 0; j < n; ++j) gr[j] += g[i * n + j];
        }
      },
      "add_row");
}

inline Var scale(Tape& t, Var a, double c) {
  Tensor out = t.value(a);
  out.drop_grad();
  for (double& v : out.data()) v *= c;
  return t.record(
      std::move(out), {a},
      [a, c](Tape& tp, std::uint32_t self) {
        auto g = tp.grad(self);
        auto ga = tp.grad(a);
        for (std::size_t i = 0; i < g.size(); ++i) ga[i] += c * g[i];
      },
      "scale");
}

/// Adds the scalar node `s` to every entry of `a`.
inline Var add_scalar(Tape& t, Var a, Var s) {
  const double sv = t.item(s);
  Tensor out = t.value(a);
  out.drop_grad();
  for (double& v : out.data()) v += sv;
  return t.record(
      std::move(out), {a, s},
      [a, s](Tape& tp, std::uint32_t self) {
        auto g = tp.grad(self);
        if (tp.requires_grad(a)) detail::add_into(tp.grad(a), g.data());
        if (tp.requires_grad(s)) {
          double acc = 0.0;
          for (double v : g) acc += v;
          tp.grad(s)[0] += acc;
        }
      },
      "add_scalar");
}

/// Row-wise inner products of two [n x d] matrices, giving [n x 1].
inline Var row_dot(Tape& t, Var a, Var b) {
  const Tensor& av = t.value(a);
  const Tensor& bv = t.value(b);
  if (av.rows() != bv.rows() || av.cols() != bv.cols()) {
    throw DimensionError("row_dot: " + shape_str(av.shape()) + " vs " + shape_str(bv.shape()));
  }
  const std::size_t n = av.rows(), d = av.cols();
  Tensor out({n, 1});
  for (std::size_t i = 0; i < n; ++i) {
    double s = 0.0;
    for (std::size_t c = 0; c < d; ++c) s += av[i * d + c] * bv[i * d + c];
    out[i] = s;
  }
  return t.record(
      std::move(out), {a, b},
      [a, b, n, d](Tape& tp, std::uint32_t self) {
        auto g = tp.grad(self);
        const auto& x = tp.value(a).data();
        const auto& y = tp.value(b).data();
        if (tp.requires_grad(a)) {
          auto ga = tp.grad(a);
          for (std::size_t i = 0; i < n; ++i)
            for (std::size_t c = 0; c < d; ++c) ga[i * d + c] += g[i] * y[i * d + c];
        }
        if (tp.requires_grad(b)) {
          auto gb = tp.grad(b);
          for (std::size_t i = 0; i < n; ++i)
            for (std::size_t c = 0; c < d; ++c) gb[i * d + c] += g[i] * x[i * d + c];
        }
      },
      "row_dot");
}

inline Var sum(Tape& t, Var a) {
  const Tensor& av = t.value(a);
  double acc = 0.0;
  for (double v : av.data()) acc += v;
  return t.record(
      Tensor::scalar(acc), {a},
      [a](Tape& tp, std::uint32_t self) {
        const double g = tp.grad(self)[0];
        for (double& v : tp.grad(a)) v += g;
      },
      "sum");
}

inline Var mean(Tape& t, Var a) {
  const std::size_t n = t.value(a).size();
  return scale(t, sum(t, a), 1.0 / static_cast<double>(n));
}

// ---------------------------------------------------------------------------
// Elementwise nonlinearities
// ---------------------------------------------------------------------------

inline Var relu(Tape& t, Var a) {
  Tensor out = t.value(a);
  out.drop_grad();
  std::uint64_t bits = 0;
  std::size_t k = 0;
  for (double& v : out.data()) {
    bits = (bits << 1) | (v > 0.0 ? 1u : 0u);
    if (++k % 64 == 0) t.note_branch(bits);
    v = v > 0.0 ? v : 0.0;
  }
  t.note_branch(bits);
  return t.record(
      std::move(out), {a},
      [a](Tape& tp, std::uint32_t self) {
        auto g = tp.grad(self);
        auto ga = tp.grad(a);
        const auto& x = tp.value(a).data();
        for (std::size_t i = 0; i < g.size(); ++i)
          if (x[i] > 0.0) ga[i] += g[i];
      },
      "relu");
}

inline double sigmoid(double z) {
  if (z >= 0) return 1.0 / (1.0 + std::exp(-z));
  const double e = std::exp(z);
  return e / (1.0 + e);
}

/// Sigmoid clamped to [eps, 1 - eps]; the gradient is zero where clamped.
inline Var clamped_sigmoid(Tape& t, Var z, double eps = 1e-7) {
  Tensor out = t.value(z);
  out.drop_grad();
  for (double& v : out.data()) {
    const double p = sigmoid(v);
    t.note_branch(p < eps ? 1 : p > 1.0 - eps ? 2 : 0);
    v = std::clamp(p, eps, 1.0 - eps);
  }
  return t.record(
      std::move(out), {z},
      [z, eps](Tape& tp, std::uint32_t self) {
        auto g = tp.grad(self);
        auto gz = tp.grad(z);
        const auto& y = tp.value(Var{self}).data();
        for (std::size_t i = 0; i < g.size(); ++i) {
          const double s = sigmoid(tp.value(z)[i]);
          if (s < eps || s > 1.0 - eps) continue;
          gz[i] += g[i] * y[i] * (1.0 - y[i]);
        }
      },
      "clamped_sigmoid");
}

inline Var sigmoid(Tape& t, Var z) { return clamped_sigmoid(t, z, 0.0); }

/// Inverted dropout. `rng == nullptr` means evaluation mode (identity).
inline Var dropout(Tape& t, Var a, double p, Rng* rng) {
  if (rng == nullptr || p <= 0.0) return a;
  if (p >= 1.0) throw DomainError("dropout rate must be < 1");
  const Tensor& av = t.value(a);
  std::vector<double> keep(av.size());
  const double s = 1.0 / (1.0 - p);
  for (double& k : keep) k = rng->uniform() < p ? 0.0 : s;
  Tensor out = av;
  out.drop_grad();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] *= keep[i];
  return t.record(
      std::move(out), {a},
      [a, keep = std::move(keep)](Tape& tp, std::uint32_t self) {
        auto g = tp.grad(self);
        auto ga = tp.grad(a);
        for (std::size_t i = 0; i < g.size(); ++i) ga[i] += g[i] * keep[i];
      },
      "dropout");
}

// ---------------------------------------------------------------------------
// Normalization
// ---------------------------------------------------------------------------

/// Row-wise layer normalization: gain * (x - mean) / sqrt(var + eps) + bias.
inline Var layer_norm(Tape& t, Var x, Var gain, Var bias, double eps = 1e-5) {
  const Tensor& xv = t.value(x);
  const Tensor& gv = t.value(gain);
  const Tensor& bv = t.value(bias);
  const std::size_t m = xv.rows(), n = xv.cols();
  if (n == 0) throw DimensionError("layer_norm: empty row");
  if (gv.size() != n || bv.size() != n) {
    throw DimensionError("layer_norm: gain/bias " + shape_str(gv.shape()) + "/" + shape_str(bv.shape()) +
                         " do not match rows of " + shape_str(xv.shape()));
  }
  std::vector<double> xhat(m * n), inv_std(m);
  Tensor out(xv.shape());
  for (std::size_t i = 0; i < m; ++i) {
    const double* row = xv.data().data() + i * n;
    double mu = 0.0;
    for (std::size_t j = 0; j < n; ++j) mu += row[j];
    mu /= static_cast<double>(n);
    double var = 0.0;
    for (std::size_t j = 0; j < n; ++j) var += (row[j] - mu) * (row[j] - mu);
    var /= static_cast<double>(n);
    inv_std[i] = 1.0 / std::sqrt(var + eps);
    for (std::size_t j = 0; j < n; ++j) {
      xhat[i * n + j] = (row[j] - mu) * inv_std[i];
      out[i * n + j] = gv[j] * xhat[i * n + j] + bv[j];
    }
  }
  return t.record(
      std::move(out), {x, gain, bias},
      [x, gain, bias, m, n, xhat = std::move(xhat), inv_std = std::move(inv_std)](Tape& tp, std::uint32_t self) {
        auto g = tp.grad(self);
        const auto& gv2 = tp.value(gain).data();
        if (tp.requires_grad(gain)) {
          auto gg = tp.grad(gain);
          for (std::size_t i = 0; i < m; ++i)
            for (std::size_t j = 0; j < n; ++j) gg[j] += g[i * n + j] * xhat[i * n + j];
        }
        if (tp.requires_grad(bias)) {
          auto gb = tp.grad(bias);
          for (std::size_t i = 0; i < m; ++i)
            for (std::size_t j = 0; j < n; ++j) gb[j] += g[i * n + j];
        }
        if (tp.requires_grad(x)) {
          auto gx = tp.grad(x);
          const double inv_n = 1.0 / static_cast<double>(n);
          for (std::size_t i = 0; i < m; ++i) {
            double mean_d = 0.0, mean_dx = 0.0;
            for (std::size_t j = 0; j < n; ++j) {
              const double d = g[i * n + j] * gv2[j];
              mean_d += d;
              mean_dx += d * xhat[i * n + j];
            }
            mean_d *= inv_n;
            mean_dx *= inv_n;
            for (std::size_t j = 0; j < n; ++j) {
              const double d = g[i * n + j] * gv2[j];
              gx[i * n + j] += inv_std[i] * (d - mean_d - xhat[i * n + j] * mean_dx);
            }
          }
        }
      },
      "layer_norm");
}

// ---------------------------------------------------------------------------
// Softmax with temperature
// ---------------------------------------------------------------------------

namespace detail {
constexpr double kMaskedLogit = -1e30;

inline std::vector<double> softmax_values(std::span<const double> z, double tau, std::span<const std::uint8_t> mask) {
  if (!(tau > 0.0)) throw DomainError("softmax temperature must be positive, got " + std::to_string(tau));
  if (!mask.empty() && mask.size() != z.size()) {
    throw DimensionError("softmax mask length " + std::to_string(mask.size()) + " != logits length " +
                         std::to_string(z.size()));
  }
  const std::size_t n = z.size();
  std::vector<double> u(n);
  bool any = false;
  for (std::size_t i = 0; i < n; ++i) {
    const bool valid = mask.empty() || mask[i];
    u[i] = valid ? z[i] / tau : kMaskedLogit;
    any = any || valid;
  }
  if (!any) throw DegenerateMaskError("softmax: every position is masked");
  const double mx = *std::max_element(u.begin(), u.end());
  double total = 0.0;
  for (std::size_t i = 0; i < n; ++i) {
    const bool valid = mask.empty() || mask[i];
    u[i] = valid ? std::exp(u[i] - mx) : 0.0;
    total += u[i];
  }
  for (double& v : u) v /= total;
  return u;
}

inline Var softmax_impl(Tape& t, Var logits, Var tau_var, double tau, std::span<const std::uint8_t> mask) {
  const Tensor& zv = t.value(logits);
  std::vector<double> y = softmax_values(zv.data(), tau, mask);
  std::vector<std::uint8_t> m(mask.begin(), mask.end());
  Tensor out(zv.shape(), y);
  auto fn = [logits, tau_var, tau, m = std::move(m)](Tape& tp, std::uint32_t self) {
    auto g = tp.grad(self);
    const auto& yv = tp.value(Var{self}).data();
    const auto& z = tp.value(logits).data();
    double s = 0.0;
    for (std::size_t i = 0; i < g.size(); ++i) s += yv[i] * g[i];
    // d/du_i with u = z / tau; masked positions have y = 0 and get nothing.
    double dtau = 0.0;
    std::span<double> gz;
    if (tp.requires_grad(logits)) gz = tp.grad(logits);
    for (std::size_t i = 0; i < g.size(); ++i) {
      if (!m.empty() && !m[i]) continue;
      const double du = yv[i] * (g[i] - s);
      if (!gz.empty()) gz[i] += du / tau;
      dtau -= du * z[i] / (tau * tau);
    }
    if (tau_var.valid() && tp.requires_grad(tau_var)) tp.grad(tau_var)[0] += dtau;
  };
  if (tau_var.valid()) return t.record(std::move(out), {logits, tau_var}, std::move(fn), "softmax_temp");
  return t.record(std::move(out), {logits}, std::move(fn), "softmax_temp");
}
}  // namespace detail

/// softmax(z / tau) over unmasked positions; masked outputs are exactly 0.
inline std::vector<double> softmax_temp(std::span<const double> logits, double tau,
                                        std::span<const std::uint8_t> mask = {}) {
  return detail::softmax_values(logits, tau, mask);
}

inline Var softmax_temp(Tape& t, Var logits, double tau, std::span<const std::uint8_t> mask = {}) {
  return detail::softmax_impl(t, logits, Var{}, tau, mask);
}

/// Differentiable-temperature variant; `tau` is a one-element node.
inline Var softmax_temp(Tape& t, Var logits, Var tau, std::span<const std::uint8_t> mask = {}) {
  return detail::softmax_impl(t, logits, tau, t.item(tau), mask);
}

// ---------------------------------------------------------------------------
// Structural ops
// ---------------------------------------------------------------------------

inline Var reshape(Tape& t, Var a, Shape shape) {
  Tensor out = t.value(a);
  out.drop_grad();
  out.reshape(std::move(shape));
  return t.record(
      std::move(out), {a},
      [a](Tape& tp, std::uint32_t self) { detail::add_into(tp.grad(a), tp.grad(self).data()); }, "reshape");
}

inline Var slice_rows(Tape& t, Var a, std::size_t begin, std::size_t count) {
  const Tensor& av = t.value(a);
  const std::size_t n = av.cols();
  if (begin + count > av.rows()) {
    throw DimensionError("slice_rows: rows [" + std::to_string(begin) + ", " + std::to_string(begin + count) +
                         ") out of range for " + shape_str(av.shape()));
  }
  std::vector<double> d(av.data().begin() + static_cast<std::ptrdiff_t>(begin * n),
                        av.data().begin() + static_cast<std::ptrdiff_t>((begin + count) * n));
  Tensor out({count, n}, std::move(d));
  return t.record(
      std::move(out), {a},
      [a, begin, n](Tape& tp, std::uint32_t self) {
        auto g = tp.grad(self);
        auto ga = tp.grad(a);
        for (std::size_t i = 0; i < g.size(); ++i) ga[begin * n + i] += g[i];
      },
      "slice_rows");
}

/// Stacks matrices with equal column counts on top of each other.
inline Var concat_rows(Tape& t, std::span<const Var> parts) {
  if (parts.empty()) throw DimensionError("concat_rows: no inputs");
  const std::size_t n = t.value(parts[0]).cols();
  std::size_t rows = 0;
  for (Var p : parts) {
    if (t.value(p).cols() != n) {
      throw DimensionError("concat_rows: column mismatch " + shape_str(t.value(parts[0]).shape()) + " vs " +
                           shape_str(t.value(p).shape()));
    }
    rows += t.value(p).rows();
  }
  std::vector<double> d;
  d.reserve(rows * n);
  for (Var p : parts) d.insert(d.end(), t.value(p).data().begin(), t.value(p).data().end());
  std::vector<Var> ins(parts.begin(), parts.end());
  return t.record(
      Tensor({rows, n}, std::move(d)), parts,
      [ins](Tape& tp, std::uint32_t self) {
        auto g = tp.grad(self);
        std::size_t off = 0;
        for (Var p : ins) {
          const std::size_t sz = tp.value(p).size();
          if (tp.requires_grad(p)) detail::add_into(tp.grad(p), g.data() + off);
          off += sz;
        }
      },
      "concat_rows");
}

/// Joins matrices with equal row counts side by side.
inline Var concat_cols(Tape& t, std::span<const Var> parts) {
  if (parts.empty()) throw DimensionError("concat_cols: no inputs");
  const std::size_t m = t.value(parts[0]).rows();
  std::vector<std::size_t> widths;
  std::size_t total = 0;
  for (Var p : parts) {
    if (t.value(p).rows() != m) {
      throw DimensionError("concat_cols: row mismatch " + shape_str(t.value(parts[0]).shape()) + " vs " +
                           shape_str(t.value(p).shape()));
    }
    widths.push_back(t.value(p).cols());
    total += widths.back();
  }
  Tensor out({m, total});
  std::size_t off = 0;
  for (std::size_t k = 0; k < parts.size(); ++k) {
    const auto& src = t.value(parts[k]).data();
    for (std::size_t i = 0; i < m; ++i)
      std::copy_n(src.begin() + static_cast<std::ptrdiff_t>(i * widths[k]), widths[k],
                  out.data().begin() + static_cast<std::ptrdiff_t>(i * total + off));
    off += widths[k];
  }
  std::vector<Var> ins(parts.begin(), parts.end());
  return t.record(
      std::move(out), parts,
      [ins, widths, m, total](Tape& tp, std::uint32_t self) {
        auto g = tp.grad(self);
        std::size_t col = 0;
        for (std::size_t k = 0; k < ins.size(); ++k) {
          if (tp.requires_grad(ins[k])) {
            auto gk = tp.grad(ins[k]);
            for (std::size_t i = 0; i < m; ++i)
              for (std::size_t j = 0; j < widths[k]; ++j) gk[i * widths[k] + j] += g[i * total + col + j];
          }
          col += widths[k];
        }
      },
      "concat_cols");
}

/// Row lookup into a [vocab x d] table. Id `padding` yields a zero row that
/// receives no gradient.
inline Var gather_rows(Tape& t, Var table, std::span<const std::int64_t> ids, std::int64_t padding = 0) {
  const Tensor& tv = t.value(table);
  const std::size_t vocab = tv.rows(), d = tv.cols();
  Tensor out({ids.size(), d});
  if (ids.empty()) out = Tensor({0, d});
  for (std::size_t i = 0; i < ids.size(); ++i) {
    const std::int64_t id = ids[i];
    if (id < 0 || static_cast<std::size_t>(id) >= vocab) {
      throw LookupError("embedding id " + std::to_string(id) + " outside vocabulary of size " + std::to_string(vocab));
    }
    if (id == padding) continue;
    std::copy_n(tv.data().begin() + static_cast<std::ptrdiff_t>(id * static_cast<std::int64_t>(d)), d,
                out.data().begin() + static_cast<std::ptrdiff_t>(i * d));
  }
  std::vector<std::int64_t> idv(ids.begin(), ids.end());
  return t.record(
      std::move(out), {table},
      [table, idv = std::move(idv), d, padding](Tape& tp, std::uint32_t self) {
        auto g = tp.grad(self);
        auto gt = tp.grad(table);
        for (std::size_t i = 0; i < idv.size(); ++i) {
          if (idv[i] == padding) continue;
          double* dst = gt.data() + static_cast<std::size_t>(idv[i]) * d;
          for (std::size_t j = 0; j < d; ++j) dst[j] += g[i * d + j];
        }
      },
      "gather_rows");
}

// ---------------------------------------------------------------------------
// Losses
// ---------------------------------------------------------------------------

/// Mean binary cross-entropy of probabilities `p` against 0/1 labels.
inline Var bce_loss(Tape& t, Var p, std::span<const double> labels, double eps = 1e-7) {
  const Tensor& pv = t.value(p);
  if (pv.size() != labels.size()) {
    throw DimensionError("bce_loss: " + std::to_string(pv.size()) + " predictions vs " +
                         std::to_string(labels.size()) + " labels");
  }
  const std::size_t n = labels.size();
  double acc = 0.0;
  for (std::size_t i = 0; i < n; ++i) {
    const double q = std::clamp(pv[i], eps, 1.0 - eps);
    acc -= labels[i] * std::log(q) + (1.0 - labels[i]) * std::log(1.0 - q);
  }
  std::vector<double> y(labels.begin(), labels.end());
  return t.record(
      Tensor::scalar(acc / static_cast<double>(n)), {p},
      [p, y = std::move(y), eps](Tape& tp, std::uint32_t self) {
        const double g = tp.grad(self)[0] / static_cast<double>(y.size());
        auto gp = tp.grad(p);
        const auto& pv2 = tp.value(p).data();
        for (std::size_t i = 0; i < y.size(); ++i) {
          if (pv2[i] < eps || pv2[i] > 1.0 - eps) continue;
          gp[i] += g * (-(y[i] / pv2[i]) + (1.0 - y[i]) / (1.0 - pv2[i]));
        }
      },
      "bce_loss");
}

inline double bce_loss(std::span<const double> p, std::span<const double> labels, double eps = 1e-7) {
  if (p.size() != labels.size()) {
    throw DimensionError("bce_loss: " + std::to_string(p.size()) + " predictions vs " +
                         std::to_string(labels.size()) + " labels");
  }
  double acc = 0.0;
  for (std::size_t i = 0; i < p.size(); ++i) {
    const double q = std::clamp(p[i], eps, 1.0 - eps);
    acc -= labels[i] * std::log(q) + (1.0 - labels[i]) * std::log(1.0 - q);
  }
  return acc / static_cast<double>(p.size());
}

}  // namespace lain
