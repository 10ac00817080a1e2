#pragma once

// Tape-based reverse-mode differentiation over dense double matrices.
//
// Every operation appends one node to the tape. Inputs always precede the
// node that consumes them, so the backward sweep walks node ids downward.
// Nodes whose inputs carry no gradient requirement keep no backward closure,
// which makes a tape of constants a plain (inference) evaluator.

#include <cmath>
#include <cstddef>
#include <functional>
#include <initializer_list>
#include <limits>
#include <map>
#include <numbers>
#include <string>
#include <vector>

#include "ptrojan/tensor.hpp"

namespace ptrojan {

class Tape;

/// Handle to a node on a tape.
struct Var {
  Tape* tape = nullptr;
  std::size_t id = 0;

  const Tensor& value() const;
  std::size_t rows() const { return value().rows(); }
  std::size_t cols() const { return value().cols(); }
};

class Tape {
 public:
  using Backward = std::function<void(Tape&, std::size_t)>;

  explicit Tape(bool check_finite = true) : check_finite_(check_finite) { nodes_.reserve(256); }

  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;

  Var leaf(Tensor v, bool requires_grad = true) {
    if (check_finite_ && !v.all_finite()) throw NumericError("leaf: non-finite value");
    Node n;
    n.value = std::move(v);
    n.requires_grad = requires_grad;
    n.is_leaf = true;
    nodes_.push_back(std::move(n));
    return {this, nodes_.size() - 1};
  }

  Var constant(Tensor v) { return leaf(std::move(v), false); }

  /// Appends an operation result. `fn` is dropped when no input needs a gradient.
  Var record(const char* op, Tensor value, std::initializer_list<Var> inputs, Backward fn) {
    bool needs = false;
    for (const Var& in : inputs) {
      if (in.tape != this) throw std::invalid_argument(std::string(op) + ": input from another tape");
      needs = needs || nodes_[in.id].requires_grad;
    }
    return record_impl(op, std::move(value), needs, std::move(fn));
  }

  Var record(const char* op, Tensor value, const std::vector<Var>& inputs, Backward fn) {
    bool needs = false;
    for (const Var& in : inputs) {
      if (in.tape != this) throw std::invalid_argument(std::string(op) + ": input from another tape");
      needs = needs || nodes_[in.id].requires_grad;
    }
    return record_impl(op, std::move(value), needs, std::move(fn));
  }

  const Tensor& value(std::size_t id) const { return nodes_.at(id).value; }
  bool requires_grad(std::size_t id) const { return nodes_.at(id).requires_grad; }
  bool is_leaf(std::size_t id) const { return nodes_.at(id).is_leaf; }
  std::size_t size() const noexcept { return nodes_.size(); }

  /// Gradient accumulator for a node, zero-initialised on first use.
  Tensor& grad_buffer(std::size_t id) {
    Node& n = nodes_.at(id);
    if (n.grad.empty()) n.grad = Tensor(n.value.shape(), 0.0);
    return n.grad;
  }

  bool has_grad(std::size_t id) const { return !nodes_.at(id).grad.empty(); }

  /// Gradient of the last backward root with respect to `v`; zeros when unreached.
  Tensor grad(Var v) const {
    const Node& n = nodes_.at(v.id);
    if (n.grad.empty()) return Tensor(n.value.shape(), 0.0);
    return n.grad;
  }

  void backward(Var root) {
    if (root.tape != this) throw std::invalid_argument("backward: root from another tape");
    const Tensor& rv = nodes_.at(root.id).value;
    if (rv.size() != 1) {
      throw ShapeError("backward: root must be scalar, got shape " + shape_string(rv.shape()));
    }
    for (Node& n : nodes_) n.grad = Tensor();
    grad_buffer(root.id)[0] = 1.0;
    for (std::size_t id = root.id + 1; id-- > 0;) {
      Node& n = nodes_[id];
      if (!n.backward || n.grad.empty()) continue;
      n.backward(*this, id);
    }
  }

 private:
  struct Node {
    Tensor value;
    Tensor grad;
    bool requires_grad = false;
    bool is_leaf = false;
    Backward backward;
  };

  Var record_impl(const char* op, Tensor value, bool needs, Backward fn) {
    if (check_finite_ && !value.all_finite()) {
      throw NumericError(std::string(op) + ": produced non-finite values, shape " +
                         shape_string(value.shape()));
    }
    Node n;
    n.value = std::move(value);
    n.requires_grad = needs;
    if (needs) n.backward = std::move(fn);
    nodes_.push_back(std::move(n));
    return {this, nodes_.size() - 1};
  }

  std::vector<Node> nodes_;
  bool check_finite_;
};

inline const Tensor& Var::value() const { return tape->value(id); }

/// Gradients of marked leaves after a backward sweep, keyed by node id.
using GradientMap = std::map<std::size_t, Tensor>;

inline GradientMap backward(Tape& tape, Var root) {
  tape.backward(root);
  GradientMap out;
  for (std::size_t id = 0; id < tape.size(); ++id) {
    if (tape.is_leaf(id) && tape.requires_grad(id)) out.emplace(id, tape.grad(Var{&tape, id}));
  }
  return out;
}

namespace ad {

namespace detail {

inline bool wants(Tape& t, Var v) { return t.requires_grad(v.id); }

inline void add_into(Tensor& dst, const Tensor& src) {
  double* d = dst.data();
  const double* s = src.data();
  for (std::size_t i = 0; i < dst.size(); ++i) d[i] += s[i];
}

inline std::size_t bcast_dim(const char* op, std::size_t a, std::size_t b, const Tensor& x,
                             const Tensor& y) {
  if (a == b || b == 1) return a;
  if (a == 1) return b;
  throw ShapeError(std::string(op) + ": shapes " + dims(x) + " and " + dims(y) +
                   " do not broadcast");
}

// Elementwise binary op with 2-D broadcasting of size-1 dimensions.
template <class Op>
Var binary(const char* name, Var a, Var b) {
  Tape& t = *a.tape;
  const Tensor& x = a.value();
  const Tensor& y = b.value();
  const std::size_t r = bcast_dim(name, x.rows(), y.rows(), x, y);
  const std::size_t c = bcast_dim(name, x.cols(), y.cols(), x, y);
  const std::size_t xr = x.rows(), xc = x.cols(), yr = y.rows(), yc = y.cols();
  Tensor out = Tensor::matrix(r, c);
  for (std::size_t i = 0; i < r; ++i) {
    const double* xrow = x.data() + (xr == 1 ? 0 : i) * xc;
    const double* yrow = y.data() + (yr == 1 ? 0 : i) * yc;
    double* orow = out.data() + i * c;
    for (std::size_t j = 0; j < c; ++j) orow[j] = Op::f(xrow[xc == 1 ? 0 : j], yrow[yc == 1 ? 0 : j]);
  }
  const std::size_t ai = a.id, bi = b.id;
  return t.record(name, std::move(out), {a, b}, [ai, bi, r, c](Tape& tp, std::size_t self) {
    const Tensor& x = tp.value(ai);
    const Tensor& y = tp.value(bi);
    const Tensor& g = tp.grad_buffer(self);
    const std::size_t xr = x.rows(), xc = x.cols(), yr = y.rows(), yc = y.cols();
    const bool wa = tp.requires_grad(ai), wb = tp.requires_grad(bi);
    Tensor* gx = wa ? &tp.grad_buffer(ai) : nullptr;
    Tensor* gy = wb ? &tp.grad_buffer(bi) : nullptr;
    for (std::size_t i = 0; i < r; ++i) {
      const std::size_t xo = (xr == 1 ? 0 : i) * xc;
      const std::size_t yo = (yr == 1 ? 0 : i) * yc;
      for (std::size_t j = 0; j < c; ++j) {
        const std::size_t xk = xo + (xc == 1 ? 0 : j);
        const std::size_t yk = yo + (yc == 1 ? 0 : j);
        const double gv = g[i * c + j];
        if (gx) (*gx)[xk] += gv * Op::dx(x[xk], y[yk]);
        if (gy) (*gy)[yk] += gv * Op::dy(x[xk], y[yk]);
      }
    }
  });
}

struct AddOp {
  static double f(double x, double y) { return x + y; }
  static double dx(double, double) { return 1.0; }
  static double dy(double, double) { return 1.0; }
};
struct SubOp {
  static double f(double x, double y) { return x - y; }
  static double dx(double, double) { return 1.0; }
  static double dy(double, double) { return -1.0; }
};
struct MulOp {
  static double f(double x, double y) { return x * y; }
  static double dx(double, double y) { return y; }
  static double dy(double x, double) { return x; }
};
struct DivOp {
  static double f(double x, double y) { return x / y; }
  static double dx(double, double y) { return 1.0 / y; }
  static double dy(double x, double y) { return -x / (y * y); }
};

}  // namespace detail

inline Var add(Var a, Var b) { return detail::binary<detail::AddOp>("add", a, b); }
inline Var sub(Var a, Var b) { return detail::binary<detail::SubOp>("sub", a, b); }
inline Var mul(Var a, Var b) { return detail::binary<detail::MulOp>("mul", a, b); }
inline Var div(Var a, Var b) { return detail::binary<detail::DivOp>("div", a, b); }

inline Var matmul(Var a, Var b) {
  const Tensor& x = a.value();
  const Tensor& y = b.value();
  if (x.cols() != y.rows()) {
    throw ShapeError("matmul: shapes " + dims(x) + " and " + dims(y) + " do not conform");
  }
  const std::size_t ai = a.id, bi = b.id;
  return a.tape->record("matmul", kernels::matmul(x, y), {a, b}, [ai, bi](Tape& t, std::size_t self) {
    const Tensor& g = t.grad_buffer(self);
    const Tensor& x = t.value(ai);
    const Tensor& y = t.value(bi);
    if (t.requires_grad(ai)) {
      const Tensor yt = kernels::transpose(y);
      kernels::gemm_acc(g.data(), yt.data(), t.grad_buffer(ai).data(), g.rows(), g.cols(), yt.cols());
    }
    if (t.requires_grad(bi)) {
      const Tensor xt = kernels::transpose(x);
      kernels::gemm_acc(xt.data(), g.data(), t.grad_buffer(bi).data(), xt.rows(), xt.cols(), g.cols());
    }
  });
}

/// a * b^T
inline Var matmul_nt(Var a, Var b) {
  const Tensor& x = a.value();
  const Tensor& y = b.value();
  if (x.cols() != y.cols()) {
    throw ShapeError("matmul_nt: shapes " + dims(x) + " and " + dims(y) + " do not conform");
  }
  const std::size_t ai = a.id, bi = b.id;
  return a.tape->record("matmul_nt", kernels::matmul_nt(x, y), {a, b},
                        [ai, bi](Tape& t, std::size_t self) {
                          const Tensor& g = t.grad_buffer(self);  // m x n
                          const Tensor& x = t.value(ai);          // m x k
                          const Tensor& y = t.value(bi);          // n x k
                          if (t.requires_grad(ai)) {
                            kernels::gemm_acc(g.data(), y.data(), t.grad_buffer(ai).data(), g.rows(),
                                              g.cols(), y.cols());
                          }
                          if (t.requires_grad(bi)) {
                            const Tensor gt = kernels::transpose(g);
                            kernels::gemm_acc(gt.data(), x.data(), t.grad_buffer(bi).data(), gt.rows(),
                                              gt.cols(), x.cols());
                          }
                        });
}

inline Var transpose(Var a) {
  const std::size_t ai = a.id;
  return a.tape->record("transpose", kernels::transpose(a.value()), {a}, [ai](Tape& t, std::size_t self) {
    detail::add_into(t.grad_buffer(ai), kernels::transpose(t.grad_buffer(self)));
  });
}

inline Var scale(Var a, double s) {
  Tensor out = a.value();
  for (double& v : out.values()) v *= s;
  const std::size_t ai = a.id;
  return a.tape->record("scale", std::move(out), {a}, [ai, s](Tape& t, std::size_t self) {
    const Tensor& g = t.grad_buffer(self);
    Tensor& ga = t.grad_buffer(ai);
    for (std::size_t i = 0; i < g.size(); ++i) ga[i] += g[i] * s;
  });
}

inline Var add_scalar(Var a, double s) {
  Tensor out = a.value();
  for (double& v : out.values()) v += s;
  const std::size_t ai = a.id;
  return a.tape->record("add_scalar", std::move(out), {a}, [ai](Tape& t, std::size_t self) {
    detail::add_into(t.grad_buffer(ai), t.grad_buffer(self));
  });
}

/// Elementwise x^p.
inline Var pow_scalar(Var a, double p) {
  Tensor out = a.value();
  for (double& v : out.values()) v = std::pow(v, p);
  const std::size_t ai = a.id;
  return a.tape->record("pow", std::move(out), {a}, [ai, p](Tape& t, std::size_t self) {
    const Tensor& g = t.grad_buffer(self);
    const Tensor& x = t.value(ai);
    Tensor& ga = t.grad_buffer(ai);
    for (std::size_t i = 0; i < g.size(); ++i) ga[i] += g[i] * p * std::pow(x[i], p - 1.0);
  });
}

/// Sum of all elements, as a 1x1 tensor.
inline Var sum(Var a) {
  double s = 0.0;
  for (double v : a.value().values()) s += v;
  const std::size_t ai = a.id;
  return a.tape->record("sum", Tensor::scalar(s), {a}, [ai](Tape& t, std::size_t self) {
    const double g = t.grad_buffer(self)[0];
    for (double& v : t.grad_buffer(ai).values()) v += g;
  });
}

/// Mean over columns of each row: (m x n) -> (m x 1).
inline Var row_mean(Var a) {
  const Tensor& x = a.value();
  const std::size_t r = x.rows(), c = x.cols();
  Tensor out = Tensor::matrix(r, 1);
  for (std::size_t i = 0; i < r; ++i) {
    double s = 0.0;
    for (std::size_t j = 0; j < c; ++j) s += x[i * c + j];
    out[i] = s / static_cast<double>(c);
  }
  const std::size_t ai = a.id;
  return a.tape->record("row_mean", std::move(out), {a}, [ai, r, c](Tape& t, std::size_t self) {
    const Tensor& g = t.grad_buffer(self);
    Tensor& ga = t.grad_buffer(ai);
    for (std::size_t i = 0; i < r; ++i) {
      const double gv = g[i] / static_cast<double>(c);
      for (std::size_t j = 0; j < c; ++j) ga[i * c + j] += gv;
    }
  });
}

/// Mean over rows (sequence positions): (m x n) -> (1 x n).
inline Var mean_pool(Var a) {
  const Tensor& x = a.value();
  const std::size_t r = x.rows(), c = x.cols();
  Tensor out = Tensor::matrix(1, c);
  for (std::size_t i = 0; i < r; ++i)
    for (std::size_t j = 0; j < c; ++j) out[j] += x[i * c + j];
  for (double& v : out.values()) v /= static_cast<double>(r);
  const std::size_t ai = a.id;
  return a.tape->record("mean_pool", std::move(out), {a}, [ai, r, c](Tape& t, std::size_t self) {
    const Tensor& g = t.grad_buffer(self);
    Tensor& ga = t.grad_buffer(ai);
    const double inv = 1.0 / static_cast<double>(r);
    for (std::size_t i = 0; i < r; ++i)
      for (std::size_t j = 0; j < c; ++j) ga[i * c + j] += g[j] * inv;
  });
}

/// Rows of `table` selected by `ids`. Backward scatters into a dense table-sized gradient.
inline Var embed_lookup(Var table, const std::vector<int>& ids) {
  const Tensor& w = table.value();
  const std::size_t v = w.rows(), d = w.cols();
  if (ids.empty()) throw ShapeError("embed_lookup: empty id list");
  Tensor out = Tensor::matrix(ids.size(), d);
  for (std::size_t t = 0; t < ids.size(); ++t) {
    if (ids[t] < 0 || static_cast<std::size_t>(ids[t]) >= v) {
      throw ShapeError("embed_lookup: id " + std::to_string(ids[t]) + " outside table " + dims(w));
    }
    std::copy_n(w.data() + static_cast<std::size_t>(ids[t]) * d, d, out.data() + t * d);
  }
  const std::size_t ti = table.id;
  return table.tape->record("embed_lookup", std::move(out), {table},
                            [ti, ids, d](Tape& t, std::size_t self) {
                              const Tensor& g = t.grad_buffer(self);
                              Tensor& gw = t.grad_buffer(ti);
                              for (std::size_t r = 0; r < ids.size(); ++r) {
                                double* dst = gw.data() + static_cast<std::size_t>(ids[r]) * d;
                                const double* src = g.data() + r * d;
                                for (std::size_t j = 0; j < d; ++j) dst[j] += src[j];
                              }
                            });
}

/// Row-wise softmax. With `causal`, entry (i, j) for j > i is masked to zero.
inline Var softmax(Var a, bool causal = false) {
  const Tensor& x = a.value();
  const std::size_t r = x.rows(), c = x.cols();
  Tensor out = Tensor::matrix(r, c);
  for (std::size_t i = 0; i < r; ++i) {
    const std::size_t lim = causal ? std::min(c, i + 1) : c;
    const double* xr = x.data() + i * c;
    double* orow = out.data() + i * c;
    double mx = -std::numeric_limits<double>::infinity();
    for (std::size_t j = 0; j < lim; ++j) mx = std::max(mx, xr[j]);
    double z = 0.0;
    for (std::size_t j = 0; j < lim; ++j) {
      orow[j] = std::exp(xr[j] - mx);
      z += orow[j];
    }
    for (std::size_t j = 0; j < lim; ++j) orow[j] /= z;
  }
  const std::size_t ai = a.id;
  return a.tape->record("softmax", std::move(out), {a}, [ai, r, c](Tape& t, std::size_t self) {
    const Tensor& g = t.grad_buffer(self);
    const Tensor& y = t.value(self);
    Tensor& ga = t.grad_buffer(ai);
    for (std::size_t i = 0; i < r; ++i) {
      const double* yr = y.data() + i * c;
      const double* gr = g.data() + i * c;
      double s = 0.0;
      for (std::size_t j = 0; j < c; ++j) s += gr[j] * yr[j];
      double* dst = ga.data() + i * c;
      for (std::size_t j = 0; j < c; ++j) dst[j] += yr[j] * (gr[j] - s);
    }
  });
}

/// Row-wise layer normalisation with affine (1 x n) gamma and beta.
inline Var layernorm(Var x, Var gamma, Var beta, double eps = 1e-5) {
  const Tensor& xv = x.value();
  const std::size_t r = xv.rows(), c = xv.cols();
  if (gamma.value().size() != c || beta.value().size() != c) {
    throw ShapeError("layernorm: input " + dims(xv) + " with gamma " + dims(gamma.value()) +
                     " and beta " + dims(beta.value()));
  }
  const Tensor& gv = gamma.value();
  const Tensor& bv = beta.value();
  Tensor out = Tensor::matrix(r, c);
  Tensor xhat = Tensor::matrix(r, c);
  Tensor rstd = Tensor::matrix(r, 1);
  for (std::size_t i = 0; i < r; ++i) {
    const double* xr = xv.data() + i * c;
    double mu = 0.0;
    for (std::size_t j = 0; j < c; ++j) mu += xr[j];
    mu /= static_cast<double>(c);
    double var = 0.0;
    for (std::size_t j = 0; j < c; ++j) var += (xr[j] - mu) * (xr[j] - mu);
    var /= static_cast<double>(c);
    const double rs = 1.0 / std::sqrt(var + eps);
    rstd[i] = rs;
    for (std::size_t j = 0; j < c; ++j) {
      const double h = (xr[j] - mu) * rs;
      xhat[i * c + j] = h;
      out[i * c + j] = h * gv[j] + bv[j];
    }
  }
  const std::size_t xi = x.id, gi = gamma.id, bi = beta.id;
  return x.tape->record(
      "layernorm", std::move(out), {x, gamma, beta},
      [xi, gi, bi, r, c, xhat = std::move(xhat), rstd = std::move(rstd)](Tape& t, std::size_t self) {
        const Tensor& g = t.grad_buffer(self);
        const Tensor& gv = t.value(gi);
        if (t.requires_grad(gi) || t.requires_grad(bi)) {
          Tensor* gg = t.requires_grad(gi) ? &t.grad_buffer(gi) : nullptr;
          Tensor* gb = t.requires_grad(bi) ? &t.grad_buffer(bi) : nullptr;
          for (std::size_t i = 0; i < r; ++i)
            for (std::size_t j = 0; j < c; ++j) {
              if (gg) (*gg)[j] += g[i * c + j] * xhat[i * c + j];
              if (gb) (*gb)[j] += g[i * c + j];
            }
        }
        if (t.requires_grad(xi)) {
          Tensor& gx = t.grad_buffer(xi);
          std::vector<double> dh(c);
          for (std::size_t i = 0; i < r; ++i) {
            double m1 = 0.0, m2 = 0.0;
            for (std::size_t j = 0; j < c; ++j) {
              dh[j] = g[i * c + j] * gv[j];
              m1 += dh[j];
              m2 += dh[j] * xhat[i * c + j];
            }
            m1 /= static_cast<double>(c);
            m2 /= static_cast<double>(c);
            for (std::size_t j = 0; j < c; ++j)
              gx[i * c + j] += rstd[i] * (dh[j] - m1 - xhat[i * c + j] * m2);
          }
        }
      });
}

/// Exact (erf) GELU.
inline Var gelu(Var a) {
  Tensor out = a.value();
  for (double& v : out.values()) v = 0.5 * v * (1.0 + std::erf(v / std::numbers::sqrt2));
  const std::size_t ai = a.id;
  return a.tape->record("gelu", std::move(out), {a}, [ai](Tape& t, std::size_t self) {
    const Tensor& g = t.grad_buffer(self);
    const Tensor& x = t.value(ai);
    Tensor& ga = t.grad_buffer(ai);
    constexpr double inv_sqrt_2pi = 0.3989422804014327;
    for (std::size_t i = 0; i < g.size(); ++i) {
      const double v = x[i];
      const double cdf = 0.5 * (1.0 + std::erf(v / std::numbers::sqrt2));
      ga[i] += g[i] * (cdf + v * inv_sqrt_2pi * std::exp(-0.5 * v * v));
    }
  });
}

/// Mean token cross-entropy of row-wise logits against `targets`; a target of
/// -1 excludes that row. Result is 1x1.
inline Var cross_entropy(Var logits, const std::vector<int>& targets) {
  const Tensor& x = logits.value();
  const std::size_t r = x.rows(), c = x.cols();
  if (targets.size() != r) {
    throw ShapeError("cross_entropy: logits " + dims(x) + " with " + std::to_string(targets.size()) +
                     " targets");
  }
  std::size_t count = 0;
  for (int y : targets) {
    if (y >= static_cast<int>(c)) {
      throw ShapeError("cross_entropy: target " + std::to_string(y) + " outside " + std::to_string(c) +
                       " classes");
    }
    if (y >= 0) ++count;
  }
  if (count == 0) throw ShapeError("cross_entropy: no target rows");
  Tensor probs = Tensor::matrix(r, c);
  double total = 0.0;
  for (std::size_t i = 0; i < r; ++i) {
    if (targets[i] < 0) continue;
    const double* xr = x.data() + i * c;
    double mx = xr[0];
    for (std::size_t j = 1; j < c; ++j) mx = std::max(mx, xr[j]);
    double z = 0.0;
    for (std::size_t j = 0; j < c; ++j) {
      probs[i * c + j] = std::exp(xr[j] - mx);
      z += probs[i * c + j];
    }
    for (std::size_t j = 0; j < c; ++j) probs[i * c + j] /= z;
    total += -(xr[targets[i]] - mx - std::log(z));
  }
  const double inv = 1.0 / static_cast<double>(count);
  const std::size_t li = logits.id;
  return logits.tape->record(
      "cross_entropy", Tensor::scalar(total * inv), {logits},
      [li, targets, r, c, inv, probs = std::move(probs)](Tape& t, std::size_t self) {
        const double g = t.grad_buffer(self)[0] * inv;
        Tensor& gl = t.grad_buffer(li);
        for (std::size_t i = 0; i < r; ++i) {
          if (targets[i] < 0) continue;
          for (std::size_t j = 0; j < c; ++j) gl[i * c + j] += g * probs[i * c + j];
          gl[i * c + static_cast<std::size_t>(targets[i])] -= g;
        }
      });
}

/// Vertical concatenation.
inline Var concat_rows(const std::vector<Var>& parts) {
  if (parts.empty()) throw ShapeError("concat_rows: no inputs");
  const std::size_t c = parts.front().cols();
  std::size_t r = 0;
  for (const Var& p : parts) {
    if (p.cols() != c) {
      throw ShapeError("concat_rows: column mismatch " + dims(parts.front().value()) + " vs " +
                       dims(p.value()));
    }
    r += p.rows();
  }
  Tensor out = Tensor::matrix(r, c);
  std::size_t off = 0;
  std::vector<std::size_t> ids;
  for (const Var& p : parts) {
    std::copy_n(p.value().data(), p.value().size(), out.data() + off);
    off += p.value().size();
    ids.push_back(p.id);
  }
  return parts.front().tape->record("concat_rows", std::move(out), parts,
                                    [ids](Tape& t, std::size_t self) {
                                      const Tensor& g = t.grad_buffer(self);
                                      std::size_t off = 0;
                                      for (std::size_t id : ids) {
                                        const std::size_t n = t.value(id).size();
                                        if (t.requires_grad(id)) {
                                          Tensor& gi = t.grad_buffer(id);
                                          for (std::size_t k = 0; k < n; ++k) gi[k] += g[off + k];
                                        }
                                        off += n;
                                      }
                                    });
}

/// Horizontal concatenation.
inline Var concat_cols(const std::vector<Var>& parts) {
  if (parts.empty()) throw ShapeError("concat_cols: no inputs");
  const std::size_t r = parts.front().rows();
  std::size_t c = 0;
  for (const Var& p : parts) {
    if (p.rows() != r) {
      throw ShapeError("concat_cols: row mismatch " + dims(parts.front().value()) + " vs " +
                       dims(p.value()));
    }
    c += p.cols();
  }
  Tensor out = Tensor::matrix(r, c);
  std::vector<std::size_t> ids;
  std::size_t coff = 0;
  for (const Var& p : parts) {
    const std::size_t pc = p.cols();
    for (std::size_t i = 0; i < r; ++i)
      std::copy_n(p.value().data() + i * pc, pc, out.data() + i * c + coff);
    coff += pc;
    ids.push_back(p.id);
  }
  return parts.front().tape->record("concat_cols", std::move(out), parts,
                                    [ids, r, c](Tape& t, std::size_t self) {
                                      const Tensor& g = t.grad_buffer(self);
                                      std::size_t coff = 0;
                                      for (std::size_t id : ids) {
                                        const std::size_t pc = t.value(id).cols();
                                        if (t.requires_grad(id)) {
                                          Tensor& gi = t.grad_buffer(id);
                                          for (std::size_t i = 0; i < r; ++i)
                                            for (std::size_t j = 0; j < pc; ++j)
                                              gi[i * pc + j] += g[i * c + coff + j];
                                        }
                                        coff += pc;
                                      }
                                    });
}

/// Rows [begin, end).
inline Var slice_rows(Var a, std::size_t begin, std::size_t end) {
  const Tensor& x = a.value();
  if (begin >= end || end > x.rows()) {
    throw ShapeError("slice_rows: range [" + std::to_string(begin) + ", " + std::to_string(end) +
                     ") invalid for " + dims(x));
  }
  const std::size_t c = x.cols();
  Tensor out({end - begin, c},
             std::vector<double>(x.data() + begin * c, x.data() + end * c));
  const std::size_t ai = a.id;
  return a.tape->record("slice_rows", std::move(out), {a}, [ai, begin, c](Tape& t, std::size_t self) {
    const Tensor& g = t.grad_buffer(self);
    Tensor& ga = t.grad_buffer(ai);
    for (std::size_t k = 0; k < g.size(); ++k) ga[begin * c + k] += g[k];
  });
}

/// Columns [begin, end).
inline Var slice_cols(Var a, std::size_t begin, std::size_t end) {
  const Tensor& x = a.value();
  if (begin >= end || end > x.cols()) {
    throw ShapeError("slice_cols: range [" + std::to_string(begin) + ", " + std::to_string(end) +
                     ") invalid for " + dims(x));
  }
  const std::size_t r = x.rows(), c = x.cols(), w = end - begin;
  Tensor out = Tensor::matrix(r, w);
  for (std::size_t i = 0; i < r; ++i) std::copy_n(x.data() + i * c + begin, w, out.data() + i * w);
  const std::size_t ai = a.id;
  return a.tape->record("slice_cols", std::move(out), {a}, [ai, begin, r, c, w](Tape& t, std::size_t self) {
    const Tensor& g = t.grad_buffer(self);
    Tensor& ga = t.grad_buffer(ai);
    for (std::size_t i = 0; i < r; ++i)
      for (std::size_t j = 0; j < w; ++j) ga[i * c + begin + j] += g[i * w + j];
  });
}

/// Cosine similarity of two equally sized tensors viewed as flat vectors.
inline Var cosine(Var a, Var b) {
  const Var num = sum(mul(a, b));
  const Var den = pow_scalar(mul(sum(mul(a, a)), sum(mul(b, b))), 0.5);
  return div(num, den);
}

}  // namespace ad

/// Scalar function built on a fresh tape from a leaf.
using TapeFunction = std::function<Var(Tape&, Var)>;

/// Max over coordinates of |analytic - central difference| / (|analytic| + 1e-12).
inline double finite_difference_check(const TapeFunction& f, const Tensor& x, double h = 1e-5) {
  if (!(h > 0.0)) throw std::invalid_argument("finite_difference_check: step must be positive");
  Tensor analytic;
  {
    Tape tape;
    Var leaf = tape.leaf(x, true);
    Var out = f(tape, leaf);
    if (!out.value().all_finite()) throw NumericError("finite_difference_check: non-finite f(x)");
    tape.backward(out);
    analytic = tape.grad(leaf);
  }
  auto eval = [&](const Tensor& at) {
    Tape tape(false);
    Var leaf = tape.leaf(at, false);
    const double v = f(tape, leaf).value().item();
    if (!std::isfinite(v)) throw NumericError("finite_difference_check: non-finite f value");
    return v;
  };
  double worst = 0.0;
  Tensor probe = x;
  for (std::size_t i = 0; i < x.size(); ++i) {
    const double orig = x[i];
    probe[i] = orig + h;
    const double fp = eval(probe);
    probe[i] = orig - h;
    const double fm = eval(probe);
    probe[i] = orig;
    const double fd = (fp - fm) / (2.0 * h);
    worst = std::max(worst, std::abs(analytic[i] - fd) / (std::abs(analytic[i]) + 1e-12));
  }
  return worst;
}

}  // namespace ptrojan
