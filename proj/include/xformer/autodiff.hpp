#ifndef XFORMER_AUTODIFF_HPP
#define XFORMER_AUTODIFF_HPP

// Minimal reverse-mode differentiation over dense 2-D tensors.
//
// A Tape records every primitive in execution order; ids are therefore a
// topological order and backward() walks them in reverse exactly once.
// Leaves are either constants (no gradient) or parameters that reference
// external storage without copying it.

#include <cmath>
#include <cstddef>
#include <functional>
#include <limits>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include "encodings.hpp"
#include "errors.hpp"
#include "tensor.hpp"

namespace xformer::ad {

struct Var {
  std::size_t id = std::numeric_limits<std::size_t>::max();
  [[nodiscard]] bool valid() const noexcept { return id != std::numeric_limits<std::size_t>::max(); }
};

class Tape {
 public:
  using Backward = std::function<void(Tape&, std::size_t)>;

  Var constant(Tensor value) { return push(std::move(value), nullptr, "constant", {}, false, {}); }

  Var parameter(const Tensor& storage) { return push(Tensor(), &storage, "parameter", {}, true, {}); }

  /// Records a primitive. The node requires a gradient when any parent does;
  /// otherwise `backward` is dropped.
  Var record(Tensor value, const char* op, std::vector<Var> parents, Backward backward) {
    bool needs = false;
    for (Var p : parents) needs = needs || nodes_[p.id].requires_grad;
    if (!value.all_finite()) {
      throw NumericalError("non-finite value produced by '" + std::string(op) + "'" + scope_suffix());
    }
    return push(std::move(value), nullptr, op, std::move(parents), needs, needs ? std::move(backward) : Backward{});
  }

  [[nodiscard]] const Tensor& value(Var v) const {
    const auto& n = nodes_[v.id];
    return n.external ? *n.external : n.value;
  }
  [[nodiscard]] bool requires_grad(Var v) const { return nodes_[v.id].requires_grad; }
  [[nodiscard]] bool has_grad(Var v) const { return !nodes_[v.id].grad.empty(); }

  /// Gradient accumulator of v, allocated as zeros on first use.
  Tensor& grad(Var v) { return grad(v.id); }
  Tensor& grad(std::size_t id) {
    auto& n = nodes_[id];
    if (n.grad.empty()) {
      const Tensor& val = n.external ? *n.external : n.value;
      n.grad = Tensor(val.rows(), val.cols());
    }
    return n.grad;
  }
  /// Gradient after backward(); zeros when v is unreachable from the loss.
  [[nodiscard]] Tensor gradient(Var v) const {
    const auto& n = nodes_[v.id];
    if (!n.grad.empty()) return n.grad;
    const Tensor& val = n.external ? *n.external : n.value;
    return Tensor(val.rows(), val.cols());
  }

  void backward(Var loss) {
    const Tensor& l = value(loss);
    if (l.rows() != 1 || l.cols() != 1) throw ValidationError("backward: loss must be a 1x1 scalar");
    if (!requires_grad(loss)) return;
    grad(loss)[0] = 1.0;
    for (std::size_t id = loss.id + 1; id-- > 0;) {
      auto& n = nodes_[id];
      if (n.grad.empty() || !n.backward) continue;
      n.backward(*this, id);
      for (Var p : nodes_[id].parents) {
        if (!nodes_[p.id].grad.empty() && !nodes_[p.id].grad.all_finite()) {
          throw NumericalError(std::string("non-finite gradient from '") + nodes_[id].op + "'" + scope_suffix());
        }
      }
    }
  }

  [[nodiscard]] std::size_t size() const noexcept { return nodes_.size(); }
  [[nodiscard]] const std::vector<Var>& parents(std::size_t id) const { return nodes_[id].parents; }
  [[nodiscard]] const char* op(std::size_t id) const { return nodes_[id].op; }

  /// Label appended to numerical error messages (e.g. "block 2").
  void set_scope(std::string scope) { scope_ = std::move(scope); }

  /// Free-form flags recorded by kinked primitives so finite-difference
  /// checks can detect when a perturbation crosses a kink.
  std::vector<signed char>& kink_signature() { return kinks_; }
  [[nodiscard]] const std::vector<signed char>& kink_signature() const { return kinks_; }

 private:
  struct Node {
    Tensor value;
    const Tensor* external = nullptr;
    const char* op = "";
    std::vector<Var> parents;
    bool requires_grad = false;
    Backward backward;
    Tensor grad;
  };

  Var push(Tensor value, const Tensor* external, const char* op, std::vector<Var> parents, bool needs,
           Backward backward) {
    nodes_.push_back(Node{std::move(value), external, op, std::move(parents), needs, std::move(backward), Tensor()});
    return Var{nodes_.size() - 1};
  }

  [[nodiscard]] std::string scope_suffix() const { return scope_.empty() ? "" : " in " + scope_; }

  std::vector<Node> nodes_;
  std::string scope_;
  std::vector<signed char> kinks_;
};

// ---------------------------------------------------------------------------
// Primitives

namespace detail {

inline void gemm_acc(const Tensor& a, const Tensor& b, Tensor& c) {  // c += a·b
  const std::size_t n = a.rows(), k = a.cols(), m = b.cols();
  for (std::size_t i = 0; i < n; ++i) {
    double* ci = &c(i, 0);
    for (std::size_t p = 0; p < k; ++p) {
      const double aip = a(i, p);
      if (aip == 0.0) continue;
      const double* bp = &b(p, 0);
      for (std::size_t j = 0; j < m; ++j) ci[j] += aip * bp[j];
    }
  }
}

inline void gemm_tn_acc(const Tensor& a, const Tensor& b, Tensor& c) {  // c += aᵀ·b
  const std::size_t n = a.rows(), k = a.cols(), m = b.cols();
  for (std::size_t i = 0; i < n; ++i) {
    const double* bi = &b(i, 0);
    for (std::size_t p = 0; p < k; ++p) {
      const double aip = a(i, p);
      if (aip == 0.0) continue;
      double* cp = &c(p, 0);
      for (std::size_t j = 0; j < m; ++j) cp[j] += aip * bi[j];
    }
  }
}

inline void gemm_nt_acc(const Tensor& a, const Tensor& b, Tensor& c) {  // c += a·bᵀ
  const std::size_t n = a.rows(), k = a.cols(), m = b.rows();
  for (std::size_t i = 0; i < n; ++i) {
    for (std::size_t j = 0; j < m; ++j) {
      double s = 0.0;
      for (std::size_t p = 0; p < k; ++p) s += a(i, p) * b(j, p);
      c(i, j) += s;
    }
  }
}

inline void require(bool ok, const char* op, const Tensor& a, const Tensor& b) {
  if (!ok) {
    throw ValidationError(std::string(op) + ": shape mismatch " + a.shape_string() + " vs " + b.shape_string());
  }
}

template <class F, class D>
Var unary(Tape& t, Var a, const char* op, F f, D df) {
  const Tensor& x = t.value(a);
  Tensor y(x.rows(), x.cols());
  for (std::size_t i = 0; i < x.size(); ++i) y[i] = f(x[i]);
  return t.record(std::move(y), op, {a}, [a, df](Tape& tp, std::size_t self) {
    const Tensor& g = tp.grad(self);
    if (!tp.requires_grad(a)) return;
    const Tensor& xv = tp.value(a);
    const Tensor& yv = tp.value(Var{self});
    Tensor& ga = tp.grad(a);
    for (std::size_t i = 0; i < g.size(); ++i) ga[i] += g[i] * df(xv[i], yv[i]);
  });
}

}  // namespace detail

inline Var matmul(Tape& t, Var a, Var b) {
  const Tensor& x = t.value(a);
  const Tensor& y = t.value(b);
  detail::require(x.cols() == y.rows(), "matmul", x, y);
  Tensor out(x.rows(), y.cols());
  detail::gemm_acc(x, y, out);
  return t.record(std::move(out), "matmul", {a, b}, [a, b](Tape& tp, std::size_t self) {
    const Tensor& g = tp.grad(self);
    if (tp.requires_grad(a)) detail::gemm_nt_acc(g, tp.value(b), tp.grad(a));
    if (tp.requires_grad(b)) detail::gemm_tn_acc(tp.value(a), g, tp.grad(b));
  });
}

/// a·bᵀ
inline Var matmul_nt(Tape& t, Var a, Var b) {
  const Tensor& x = t.value(a);
  const Tensor& y = t.value(b);
  detail::require(x.cols() == y.cols(), "matmul_nt", x, y);
  Tensor out(x.rows(), y.rows());
  detail::gemm_nt_acc(x, y, out);
  return t.record(std::move(out), "matmul_nt", {a, b}, [a, b](Tape& tp, std::size_t self) {
    const Tensor& g = tp.grad(self);
    if (tp.requires_grad(a)) detail::gemm_acc(g, tp.value(b), tp.grad(a));
    if (tp.requires_grad(b)) detail::gemm_tn_acc(g, tp.value(a), tp.grad(b));
  });
}

inline Var add(Tape& t, Var a, Var b) {
  const Tensor& x = t.value(a);
  const Tensor& y = t.value(b);
  detail::require(x.same_shape(y), "add", x, y);
  Tensor out = x;
  out += y;
  return t.record(std::move(out), "add", {a, b}, [a, b](Tape& tp, std::size_t self) {
    const Tensor g = tp.grad(self);
    if (tp.requires_grad(a)) tp.grad(a) += g;
    if (tp.requires_grad(b)) tp.grad(b) += g;
  });
}

/// Adds a 1×c row vector to every row of a.
inline Var add_bias(Tape& t, Var a, Var bias) {
  const Tensor& x = t.value(a);
  const Tensor& b = t.value(bias);
  detail::require(b.rows() == 1 && b.cols() == x.cols(), "add_bias", x, b);
  Tensor out = x;
  for (std::size_t i = 0; i < out.rows(); ++i) {
    for (std::size_t j = 0; j < out.cols(); ++j) out(i, j) += b[j];
  }
  return t.record(std::move(out), "add_bias", {a, bias}, [a, bias](Tape& tp, std::size_t self) {
    const Tensor g = tp.grad(self);
    if (tp.requires_grad(a)) tp.grad(a) += g;
    if (tp.requires_grad(bias)) {
      Tensor& gb = tp.grad(bias);
      for (std::size_t i = 0; i < g.rows(); ++i) {
        for (std::size_t j = 0; j < g.cols(); ++j) gb[j] += g(i, j);
      }
    }
  });
}

/// scale·a + shift, elementwise.
inline Var affine(Tape& t, Var a, double scale, double shift = 0.0) {
  return detail::unary(
      t, a, "affine", [scale, shift](double x) { return scale * x + shift; },
      [scale](double, double) { return scale; });
}

inline Var scale(Tape& t, Var a, double s) { return affine(t, a, s, 0.0); }

inline Var exp(Tape& t, Var a) {
  return detail::unary(t, a, "exp", [](double x) { return std::exp(x); }, [](double, double y) { return y; });
}

inline Var log(Tape& t, Var a) {
  return detail::unary(t, a, "log", [](double x) { return std::log(x); }, [](double x, double) { return 1.0 / x; });
}

inline Var sqrt(Tape& t, Var a) {
  return detail::unary(
      t, a, "sqrt", [](double x) { return std::sqrt(x); }, [](double, double y) { return 0.5 / y; });
}

inline Var reciprocal(Tape& t, Var a) {
  return detail::unary(
      t, a, "reciprocal", [](double x) { return 1.0 / x; }, [](double, double y) { return -y * y; });
}

/// x^p for real p (x > 0 expected for fractional p).
inline Var pow(Tape& t, Var a, double p) {
  return detail::unary(
      t, a, "pow", [p](double x) { return std::pow(x, p); },
      [p](double x, double y) { return x == 0.0 ? 0.0 : p * y / x; });
}

namespace detail {
inline void note_kinks(Tape& t, const Tensor& x, double at = 0.0) {
  auto& sig = t.kink_signature();
  for (double v : x.data()) sig.push_back(static_cast<signed char>(v > at ? 1 : (v < at ? -1 : 0)));
}
}  // namespace detail

inline Var relu(Tape& t, Var a) {
  detail::note_kinks(t, t.value(a));
  return detail::unary(
      t, a, "relu", [](double x) { return x > 0.0 ? x : 0.0; }, [](double x, double) { return x > 0.0 ? 1.0 : 0.0; });
}

inline Var elu(Tape& t, Var a) {
  detail::note_kinks(t, t.value(a));
  return detail::unary(
      t, a, "elu", [](double x) { return x < 0.0 ? std::expm1(x) : x; },
      [](double x, double y) { return x < 0.0 ? y + 1.0 : 1.0; });
}

inline Var shifted_elu(Tape& t, Var a, double slope, double floor) {
  detail::note_kinks(t, t.value(a));
  return detail::unary(
      t, a, "shifted_elu", [slope, floor](double x) { return xformer::shifted_elu(x, slope, floor); },
      [slope, floor](double x, double) { return xformer::shifted_elu_derivative(x, slope, floor); });
}

inline Var abs(Tape& t, Var a) {
  detail::note_kinks(t, t.value(a));
  return detail::unary(
      t, a, "abs", [](double x) { return std::abs(x); },
      [](double x, double) { return x > 0.0 ? 1.0 : (x < 0.0 ? -1.0 : 0.0); });
}

/// Sum of all entries, 1×1.
inline Var sum(Tape& t, Var a) {
  const Tensor& x = t.value(a);
  double s = 0.0;
  for (double v : x.data()) s += v;
  return t.record(Tensor::scalar(s), "sum", {a}, [a](Tape& tp, std::size_t self) {
    const double g = tp.grad(self)[0];
    for (auto& v : tp.grad(a).data()) v += g;
  });
}

/// Column means, 1×c.
inline Var mean_rows(Tape& t, Var a) {
  const Tensor& x = t.value(a);
  if (x.rows() == 0) throw ValidationError("mean_rows: empty input");
  Tensor out(1, x.cols());
  for (std::size_t i = 0; i < x.rows(); ++i) {
    for (std::size_t j = 0; j < x.cols(); ++j) out[j] += x(i, j);
  }
  const double inv = 1.0 / double(x.rows());
  out *= inv;
  return t.record(std::move(out), "mean_rows", {a}, [a, inv](Tape& tp, std::size_t self) {
    const Tensor g = tp.grad(self);
    Tensor& ga = tp.grad(a);
    for (std::size_t i = 0; i < ga.rows(); ++i) {
      for (std::size_t j = 0; j < ga.cols(); ++j) ga(i, j) += inv * g[j];
    }
  });
}

/// Rows of `table` selected by index.
inline Var gather_rows(Tape& t, Var table, std::vector<std::size_t> index) {
  const Tensor& x = t.value(table);
  Tensor out(index.size(), x.cols());
  for (std::size_t i = 0; i < index.size(); ++i) {
    if (index[i] >= x.rows()) throw ValidationError("gather_rows: index out of range");
    for (std::size_t j = 0; j < x.cols(); ++j) out(i, j) = x(index[i], j);
  }
  return t.record(std::move(out), "gather_rows", {table},
                  [table, index = std::move(index)](Tape& tp, std::size_t self) {
                    const Tensor g = tp.grad(self);
                    Tensor& gt = tp.grad(table);
                    for (std::size_t i = 0; i < index.size(); ++i) {
                      for (std::size_t j = 0; j < g.cols(); ++j) gt(index[i], j) += g(i, j);
                    }
                  });
}

/// Columns [begin, end).
inline Var slice_cols(Tape& t, Var a, std::size_t begin, std::size_t end) {
  const Tensor& x = t.value(a);
  if (begin > end || end > x.cols()) throw ValidationError("slice_cols: range out of bounds");
  Tensor out(x.rows(), end - begin);
  for (std::size_t i = 0; i < x.rows(); ++i) {
    for (std::size_t j = begin; j < end; ++j) out(i, j - begin) = x(i, j);
  }
  return t.record(std::move(out), "slice_cols", {a}, [a, begin](Tape& tp, std::size_t self) {
    const Tensor g = tp.grad(self);
    Tensor& ga = tp.grad(a);
    for (std::size_t i = 0; i < g.rows(); ++i) {
      for (std::size_t j = 0; j < g.cols(); ++j) ga(i, begin + j) += g(i, j);
    }
  });
}

inline Var concat_cols(Tape& t, const std::vector<Var>& parts) {
  if (parts.empty()) throw ValidationError("concat_cols: no inputs");
  const std::size_t rows = t.value(parts[0]).rows();
  std::size_t cols = 0;
  for (Var p : parts) {
    detail::require(t.value(p).rows() == rows, "concat_cols", t.value(parts[0]), t.value(p));
    cols += t.value(p).cols();
  }
  Tensor out(rows, cols);
  std::size_t offset = 0;
  for (Var p : parts) {
    const Tensor& x = t.value(p);
    for (std::size_t i = 0; i < rows; ++i) {
      for (std::size_t j = 0; j < x.cols(); ++j) out(i, offset + j) = x(i, j);
    }
    offset += x.cols();
  }
  return t.record(std::move(out), "concat_cols", parts, [parts](Tape& tp, std::size_t self) {
    const Tensor g = tp.grad(self);
    std::size_t off = 0;
    for (Var p : parts) {
      const std::size_t c = tp.value(p).cols();
      if (tp.requires_grad(p)) {
        Tensor& gp = tp.grad(p);
        for (std::size_t i = 0; i < g.rows(); ++i) {
          for (std::size_t j = 0; j < c; ++j) gp(i, j) += g(i, off + j);
        }
      }
      off += c;
    }
  });
}

/// Row-wise softmax with per-row max subtraction.
inline Var softmax_rows(Tape& t, Var a) {
  const Tensor& x = t.value(a);
  Tensor out(x.rows(), x.cols());
  for (std::size_t i = 0; i < x.rows(); ++i) {
    double mx = -std::numeric_limits<double>::infinity();
    for (std::size_t j = 0; j < x.cols(); ++j) mx = std::max(mx, x(i, j));
    double z = 0.0;
    for (std::size_t j = 0; j < x.cols(); ++j) z += (out(i, j) = std::exp(x(i, j) - mx));
    for (std::size_t j = 0; j < x.cols(); ++j) out(i, j) /= z;
  }
  return t.record(std::move(out), "softmax_rows", {a}, [a](Tape& tp, std::size_t self) {
    const Tensor& g = tp.grad(self);
    const Tensor& y = tp.value(Var{self});
    Tensor& ga = tp.grad(a);
    for (std::size_t i = 0; i < y.rows(); ++i) {
      double dotgy = 0.0;
      for (std::size_t j = 0; j < y.cols(); ++j) dotgy += g(i, j) * y(i, j);
      for (std::size_t j = 0; j < y.cols(); ++j) ga(i, j) += y(i, j) * (g(i, j) - dotgy);
    }
  });
}

/// out_i = Σ_j A_ij · B_{(i·N + j)}, for A (N×N) and B (N²×d).
inline Var pair_weighted_sum(Tape& t, Var weights, Var pairs) {
  const Tensor& A = t.value(weights);
  const Tensor& B = t.value(pairs);
  const std::size_t n = A.rows();
  detail::require(A.cols() == n && B.rows() == n * n, "pair_weighted_sum", A, B);
  const std::size_t d = B.cols();
  Tensor out(n, d);
  for (std::size_t i = 0; i < n; ++i) {
    for (std::size_t j = 0; j < n; ++j) {
      const double a = A(i, j);
      const double* b = &B(i * n + j, 0);
      for (std::size_t c = 0; c < d; ++c) out(i, c) += a * b[c];
    }
  }
  return t.record(std::move(out), "pair_weighted_sum", {weights, pairs},
                  [weights, pairs, n, d](Tape& tp, std::size_t self) {
                    const Tensor& g = tp.grad(self);
                    if (tp.requires_grad(weights)) {
                      const Tensor& Bv = tp.value(pairs);
                      Tensor& gA = tp.grad(weights);
                      for (std::size_t i = 0; i < n; ++i) {
                        for (std::size_t j = 0; j < n; ++j) {
                          double s = 0.0;
                          for (std::size_t c = 0; c < d; ++c) s += g(i, c) * Bv(i * n + j, c);
                          gA(i, j) += s;
                        }
                      }
                    }
                    if (tp.requires_grad(pairs)) {
                      const Tensor& Av = tp.value(weights);
                      Tensor& gB = tp.grad(pairs);
                      for (std::size_t i = 0; i < n; ++i) {
                        for (std::size_t j = 0; j < n; ++j) {
                          for (std::size_t c = 0; c < d; ++c) gB(i * n + j, c) += Av(i, j) * g(i, c);
                        }
                      }
                    }
                  });
}

// ---------------------------------------------------------------------------
// Finite-difference checking

struct GradCheckReport {
  std::size_t checked = 0;
  std::size_t excluded = 0;  // perturbation crossed a kink or changed a truncation range
  std::size_t failures = 0;
  double max_abs_error = 0.0;
  double max_rel_error = 0.0;
  std::size_t worst_index = 0;
  [[nodiscard]] bool passed() const { return failures == 0; }
};

struct GradCheckOptions {
  double step = 1e-5;
  double rel_tol = 1e-4;
  double abs_tol = 1e-7;
};

/// Evaluation used by grad_check: value plus a signature of every discrete
/// decision (kink sides, truncation ranges) taken along the way.
struct Evaluation {
  double value = 0.0;
  std::vector<signed char> signature;
};

/// Compares `analytic` with central differences of `f` over `params`,
/// perturbing one entry at a time. An entry passes when
/// |fd − analytic| ≤ abs_tol or ≤ rel_tol·max(|fd|, |analytic|).
template <class F>
GradCheckReport grad_check(F&& f, std::span<double> params, std::span<const double> analytic,
                           const GradCheckOptions& opt = {}) {
  if (params.size() != analytic.size()) throw ValidationError("grad_check: gradient size mismatch");
  GradCheckReport rep;
  const Evaluation base = f();
  for (std::size_t i = 0; i < params.size(); ++i) {
    const double x0 = params[i];
    params[i] = x0 + opt.step;
    const Evaluation up = f();
    params[i] = x0 - opt.step;
    const Evaluation down = f();
    params[i] = x0;
    if (up.signature != base.signature || down.signature != base.signature) {
      ++rep.excluded;
      continue;
    }
    ++rep.checked;
    const double fd = (up.value - down.value) / (2.0 * opt.step);
    const double err = std::abs(fd - analytic[i]);
    const double scale = std::max(std::abs(fd), std::abs(analytic[i]));
    const double rel = scale > 0.0 ? err / scale : 0.0;
    if (err > rep.max_abs_error) rep.max_abs_error = err;
    if (err > opt.abs_tol && rel > rep.max_rel_error) {
      rep.max_rel_error = rel;
      rep.worst_index = i;
    }
    if (err > opt.abs_tol && rel > opt.rel_tol) ++rep.failures;
  }
  return rep;
}

}  // namespace xformer::ad

#endif  // XFORMER_AUTODIFF_HPP
