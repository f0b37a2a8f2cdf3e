// SPDX-License-Identifier: Apache-2.0
//
// A small reverse-mode differentiation tape over row-major batches. Every
// primitive rounds each intermediate (products, partial sums, activations,
// gradients) through the tape's quantizer, so a whole forward/backward pass
// runs in the emulated format. Matrix products reduce in a fixed sequential
// order.

#pragma once

#include <cmath>
#include <cstdint>
#include <functional>
#include <map>
#include <random>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

#include "lpsac/lpsim.hpp"
#include "lpsac/stablemath.hpp"
#include "lpsac/tensor.hpp"

namespace lpsac::nn {

class NotScalarLoss : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

enum class Activation { Identity, Relu, Tanh };

namespace detail {

struct WideRound {
  double operator()(double x) const { return x; }
};

// Holds a copy so that stores into output tensors cannot alias the
// quantizer's fields; otherwise the inner loops do not vectorize.
struct FormatRound {
  Quantizer q;
  double operator()(double x) const { return q.round_plain(x); }
};

struct CoerceRound {
  Quantizer q;
  double operator()(double x) const { return q.coerce(q.round_plain(x)); }
};

/// Calls `fn` with a rounding functor chosen once, so inner loops inline it.
template <typename Fn>
decltype(auto) with_rounding(const Quantizer& q, Fn&& fn) {
  if (q.is_wide()) return fn(WideRound{});
  if (q.coerces()) return fn(CoerceRound{q});
  return fn(FormatRound{q});
}

// y = x W + b for x (B x in), W (in x out), b (1 x out).
template <typename R>
void dense_kernel(R r, const Tensor& x, const Tensor& w, const Tensor& b, Tensor& y) {
  const std::size_t batch = x.rows(), in = x.cols(), out = w.cols();
  for (std::size_t n = 0; n < batch; ++n) {
    double* __restrict yr = y.data() + n * out;
    const double* xr = x.data() + n * in;
    for (std::size_t j = 0; j < out; ++j) yr[j] = 0.0;
    for (std::size_t i = 0; i < in; ++i) {
      const double xi = xr[i];
      const double* __restrict wr = w.data() + i * out;
      for (std::size_t j = 0; j < out; ++j) yr[j] = r(yr[j] + r(wr[j] * xi));
    }
    const double* __restrict br = b.data();
    for (std::size_t j = 0; j < out; ++j) yr[j] = r(yr[j] + br[j]);
  }
}

// dx = dy W^T, using a transposed copy of W for contiguous access.
template <typename R>
void dense_backward_input(R r, const Tensor& dy, const Tensor& w, Tensor& dx) {
  const std::size_t batch = dy.rows(), in = w.rows(), out = w.cols();
  Tensor wt(out, in);
  for (std::size_t i = 0; i < in; ++i)
    for (std::size_t j = 0; j < out; ++j) wt(j, i) = w(i, j);
  for (std::size_t n = 0; n < batch; ++n) {
    double* __restrict dxr = dx.data() + n * in;
    for (std::size_t i = 0; i < in; ++i) dxr[i] = 0.0;
    for (std::size_t j = 0; j < out; ++j) {
      const double g = dy(n, j);
      const double* __restrict wtr = wt.data() + j * in;
      for (std::size_t i = 0; i < in; ++i) dxr[i] = r(dxr[i] + r(wtr[i] * g));
    }
  }
}

// dW = x^T dy and db = column sums of dy, reduced over the batch in order.
template <typename R>
void dense_backward_params(R r, const Tensor& x, const Tensor& dy, Tensor& dw, Tensor& db) {
  const std::size_t batch = x.rows(), in = x.cols(), out = dy.cols();
  for (std::size_t n = 0; n < batch; ++n) {
    const double* __restrict dyr = dy.data() + n * out;
    for (std::size_t i = 0; i < in; ++i) {
      const double xi = x(n, i);
      double* __restrict dwr = dw.data() + i * out;
      for (std::size_t j = 0; j < out; ++j) dwr[j] = r(dwr[j] + r(xi * dyr[j]));
    }
    double* __restrict dbr = db.data();
    for (std::size_t j = 0; j < out; ++j) dbr[j] = r(dbr[j] + dyr[j]);
  }
}

template <typename R>
void activate(R r, Activation act, Tensor& y) {
  switch (act) {
    case Activation::Identity: break;
    case Activation::Relu:
      for (double& v : y.values()) v = v > 0.0 || v != v ? v : 0.0;
      break;
    case Activation::Tanh:
      for (double& v : y.values()) v = r(std::tanh(v));
      break;
  }
}

inline void check_dense_shapes(const Tensor& x, const Tensor& w, const Tensor& b) {
  if (x.cols() != w.rows() || b.rows() != 1 || b.cols() != w.cols()) {
    throw ShapeMismatch("dense: x " + x.shape_string() + ", W " + w.shape_string() + ", b " +
                        b.shape_string());
  }
}

}  // namespace detail

/// act(x W + b) with every multiply, partial sum and activation rounded.
/// W is stored (in x out).
inline Tensor dense_forward(const Tensor& x, const Tensor& w, const Tensor& b, Activation act,
                            const Quantizer& q) {
  detail::check_dense_shapes(x, w, b);
  Tensor y(x.rows(), w.cols());
  detail::with_rounding(q, [&](auto r) {
    detail::dense_kernel(r, x, w, b, y);
    detail::activate(r, act, y);
  });
  return y;
}

/// Handle to a tape node.
struct Var {
  std::uint32_t id = 0;
};

class Tape {
 public:
  explicit Tape(Quantizer q = {}) : q_(q) {}

  const Quantizer& quantizer() const { return q_; }
  std::size_t size() const { return nodes_.size(); }

  /// Input that receives no gradient. Values are rounded into the format.
  Var constant(Tensor value) { return push(quantized(std::move(value), q_), false, {}); }

  /// Differentiable leaf.
  Var parameter(const Tensor& value) { return push(quantized(value, q_), true, {}); }

  Var detach(Var v) { return push(value(v), false, {}); }

  const Tensor& value(Var v) const { return nodes_.at(v.id).value; }
  bool requires_grad(Var v) const { return nodes_.at(v.id).requires_grad; }

  /// Gradient of the last backward pass; zeros when the node was not reached.
  Tensor grad(Var v) const {
    const Node& n = nodes_.at(v.id);
    if (n.grad.empty()) return Tensor(n.value.rows(), n.value.cols());
    return n.grad;
  }

  // -- primitives ----------------------------------------------------------

  Var dense(Var x, Var w, Var b) {
    detail::check_dense_shapes(value(x), value(w), value(b));
    Tensor y(value(x).rows(), value(w).cols());
    detail::with_rounding(q_, [&](auto r) { detail::dense_kernel(r, value(x), value(w), value(b), y); });
    return push(std::move(y), any_grad({x, w, b}), [this, x, w, b](const Tensor& g) {
      detail::with_rounding(q_, [&](auto r) {
        if (requires_grad(x)) {
          Tensor dx(value(x).rows(), value(x).cols());
          detail::dense_backward_input(r, g, value(w), dx);
          accumulate(x, std::move(dx));
        }
        if (requires_grad(w) || requires_grad(b)) {
          Tensor dw(value(w).rows(), value(w).cols());
          Tensor db(1, value(b).cols());
          detail::dense_backward_params(r, value(x), g, dw, db);
          accumulate(w, std::move(dw));
          accumulate(b, std::move(db));
        }
      });
    });
  }

  Var relu(Var x) {
    // NaN inputs stay NaN, as in common frameworks.
    return unary(x, [](double v, const Quantizer&) { return v > 0.0 || v != v ? v : 0.0; },
                 [](double g, double xv, double, const Quantizer&) { return xv > 0.0 ? g : 0.0; });
  }

  Var tanh(Var x) {
    return unary(x, [](double v, const Quantizer& q) { return q.tanh(v); },
                 [](double g, double, double y, const Quantizer& q) {
                   return q.mul(g, q.sub(1.0, q.mul(y, y)));
                 });
  }

  Var exp(Var x) {
    return unary(x, [](double v, const Quantizer& q) { return q.exp(v); },
                 [](double g, double, double y, const Quantizer& q) { return q.mul(g, y); });
  }

  Var log(Var x) {
    return unary(x, [](double v, const Quantizer& q) { return q.log(v); },
                 [](double g, double xv, double, const Quantizer& q) { return q.div(g, xv); });
  }

  Var square(Var x) {
    return unary(x, [](double v, const Quantizer& q) { return q.mul(v, v); },
                 [](double g, double xv, double, const Quantizer& q) {
                   return q.mul(g, q.mul(2.0, xv));
                 });
  }

  Var add_scalar(Var x, double c) {
    const double cq = q_(c);
    return unary(x, [cq](double v, const Quantizer& q) { return q.add(v, cq); },
                 [](double g, double, double, const Quantizer&) { return g; });
  }

  Var mul_scalar(Var x, double c) {
    const double cq = q_(c);
    return unary(x, [cq](double v, const Quantizer& q) { return q.mul(v, cq); },
                 [cq](double g, double, double, const Quantizer& q) { return q.mul(g, cq); });
  }

  Var add(Var a, Var b) {
    return binary(a, b, [](double x, double y, const Quantizer& q) { return q.add(x, y); },
                  [](double g, double, double, const Quantizer&) { return g; },
                  [](double g, double, double, const Quantizer&) { return g; });
  }

  Var sub(Var a, Var b) {
    return binary(a, b, [](double x, double y, const Quantizer& q) { return q.sub(x, y); },
                  [](double g, double, double, const Quantizer&) { return g; },
                  [](double g, double, double, const Quantizer&) { return -g; });
  }

  Var mul(Var a, Var b) {
    return binary(a, b, [](double x, double y, const Quantizer& q) { return q.mul(x, y); },
                  [](double g, double, double y, const Quantizer& q) { return q.mul(g, y); },
                  [](double g, double x, double, const Quantizer& q) { return q.mul(g, x); });
  }

  Var div(Var a, Var b) {
    return binary(
        a, b, [](double x, double y, const Quantizer& q) { return q.div(x, y); },
        [](double g, double, double y, const Quantizer& q) { return q.div(g, y); },
        [](double g, double x, double y, const Quantizer& q) {
          return -q.div(q.mul(g, x), q.mul(y, y));
        });
  }

  /// Elementwise minimum, NaN-propagating; ties send the gradient to `a`.
  Var minimum(Var a, Var b) {
    require_same_shape(value(a), value(b), "minimum");
    Tensor y = value(a);
    for (std::size_t i = 0; i < y.size(); ++i) {
      const double x = value(a)[i], z = value(b)[i];
      y[i] = x != x || z != z ? x + z : std::min(x, z);
    }
    return push(std::move(y), any_grad({a, b}), [this, a, b](const Tensor& g) {
      Tensor ga(g.rows(), g.cols()), gb(g.rows(), g.cols());
      for (std::size_t i = 0; i < g.size(); ++i) {
        (value(a)[i] <= value(b)[i] ? ga : gb)[i] = g[i];
      }
      accumulate(a, std::move(ga));
      accumulate(b, std::move(gb));
    });
  }

  /// Row sums: (B x n) -> (B x 1).
  Var sum_cols(Var x) {
    const Tensor& xv = value(x);
    Tensor y(xv.rows(), 1);
    for (std::size_t r = 0; r < xv.rows(); ++r) {
      double acc = 0.0;
      for (double v : xv.row_span(r)) acc = q_.add(acc, v);
      y[r] = acc;
    }
    return push(std::move(y), requires_grad(x), [this, x](const Tensor& g) {
      Tensor gx(value(x).rows(), value(x).cols());
      for (std::size_t r = 0; r < gx.rows(); ++r)
        for (std::size_t c = 0; c < gx.cols(); ++c) gx(r, c) = g[r];
      accumulate(x, std::move(gx));
    });
  }

  /// Mean of all entries -> (1 x 1).
  Var mean(Var x) {
    const Tensor& xv = value(x);
    double acc = 0.0;
    for (double v : xv.values()) acc = q_.add(acc, v);
    const double n = static_cast<double>(xv.size());
    return push(Tensor::scalar(q_.div(acc, n)), requires_grad(x), [this, x, n](const Tensor& g) {
      Tensor gx(value(x).rows(), value(x).cols(), q_.div(g[0], n));
      accumulate(x, std::move(gx));
    });
  }

  Var slice_cols(Var x, std::size_t begin, std::size_t end) {
    const Tensor& xv = value(x);
    if (begin > end || end > xv.cols()) throw ShapeMismatch("slice_cols out of range");
    Tensor y(xv.rows(), end - begin);
    for (std::size_t r = 0; r < xv.rows(); ++r)
      for (std::size_t c = begin; c < end; ++c) y(r, c - begin) = xv(r, c);
    return push(std::move(y), requires_grad(x), [this, x, begin, end](const Tensor& g) {
      Tensor gx(value(x).rows(), value(x).cols());
      for (std::size_t r = 0; r < gx.rows(); ++r)
        for (std::size_t c = begin; c < end; ++c) gx(r, c) = g(r, c - begin);
      accumulate(x, std::move(gx));
    });
  }

  Var concat_cols(Var a, Var b) {
    const Tensor& av = value(a);
    const Tensor& bv = value(b);
    if (av.rows() != bv.rows()) throw ShapeMismatch("concat_cols: row count differs");
    Tensor y(av.rows(), av.cols() + bv.cols());
    for (std::size_t r = 0; r < av.rows(); ++r) {
      for (std::size_t c = 0; c < av.cols(); ++c) y(r, c) = av(r, c);
      for (std::size_t c = 0; c < bv.cols(); ++c) y(r, av.cols() + c) = bv(r, c);
    }
    const std::size_t split = av.cols();
    return push(std::move(y), any_grad({a, b}), [this, a, b, split](const Tensor& g) {
      Tensor ga(g.rows(), split), gb(g.rows(), g.cols() - split);
      for (std::size_t r = 0; r < g.rows(); ++r) {
        for (std::size_t c = 0; c < split; ++c) ga(r, c) = g(r, c);
        for (std::size_t c = split; c < g.cols(); ++c) gb(r, c - split) = g(r, c);
      }
      accumulate(a, std::move(ga));
      accumulate(b, std::move(gb));
    });
  }

  // -- stable kernels as primitive nodes -----------------------------------

  /// log(1 + exp(-2u)) with the linear branch and its hand-written
  /// derivative.
  Var softplus_fix(Var u, const stablemath::StableMathConfig& cfg) {
    return unary(u, [cfg](double v, const Quantizer& q) { return stablemath::softplus_fix(v, q, cfg); },
                 [cfg](double g, double v, double, const Quantizer& q) {
                   return q.mul(g, stablemath::softplus_fix_grad(v, q, cfg));
                 });
  }

  /// log(1 + exp(-2u)) differentiated the way an autograd engine would.
  Var softplus_naive(Var u) {
    return unary(u, [](double v, const Quantizer& q) { return stablemath::softplus_naive(v, q); },
                 [](double g, double v, double, const Quantizer& q) {
                   return q.mul(g, stablemath::softplus_naive_grad(v, q));
                 });
  }

  /// Elementwise log N(x; mu, sigma). With `standardize` the residual is
  /// divided by sigma before squaring; otherwise the density is formed as
  /// (x - mu)^2 / sigma^2. Does not throw on bad sigma: NaN/inf propagate.
  Var normal_log_prob(Var x, Var mu, Var sigma, bool standardize) {
    require_same_shape(value(x), value(mu), "normal_log_prob");
    require_same_shape(value(x), value(sigma), "normal_log_prob");
    const double c = q_(stablemath::kHalfLog2Pi);
    Tensor y(value(x).rows(), value(x).cols());
    const Quantizer& q = q_;
    for (std::size_t i = 0; i < y.size(); ++i) {
      const double d = q.sub(value(x)[i], value(mu)[i]);
      const double s = value(sigma)[i];
      double quad;
      if (standardize) {
        const double z = q.div(d, s);
        quad = q.mul(z, z);
      } else {
        quad = q.div(q.mul(d, d), q.mul(s, s));
      }
      y[i] = q.sub(q.sub(q.mul(-0.5, quad), q.log(s)), c);
    }
    return push(std::move(y), any_grad({x, mu, sigma}),
                [this, x, mu, sigma, standardize](const Tensor& g) {
                  const Quantizer& q = q_;
                  Tensor gx(g.rows(), g.cols()), gmu(g.rows(), g.cols()), gs(g.rows(), g.cols());
                  for (std::size_t i = 0; i < g.size(); ++i) {
                    const double d = q.sub(value(x)[i], value(mu)[i]);
                    const double s = value(sigma)[i];
                    double dx;  // d/dx = -(x - mu) / sigma^2
                    double ds;  // d/dsigma = (x - mu)^2 / sigma^3 - 1 / sigma
                    if (standardize) {
                      const double z = q.div(d, s);
                      dx = -q.div(z, s);
                      ds = q.div(q.sub(q.mul(z, z), 1.0), s);
                    } else {
                      const double s2 = q.mul(s, s);
                      dx = -q.div(d, s2);
                      ds = q.sub(q.div(q.mul(d, d), q.mul(s2, s)), q.div(1.0, s));
                    }
                    gx[i] = q.mul(g[i], dx);
                    gmu[i] = -gx[i];
                    gs[i] = q.mul(g[i], ds);
                  }
                  accumulate(x, std::move(gx));
                  accumulate(mu, std::move(gmu));
                  accumulate(sigma, std::move(gs));
                });
  }

  // -- backward ------------------------------------------------------------

  /// Reverse-mode accumulation from a scalar node. `seed` is the incoming
  /// gradient of the loss, i.e. the loss scale.
  void backward(Var loss, double seed = 1.0) {
    const Tensor& lv = value(loss);
    if (lv.size() != 1) throw NotScalarLoss("backward requires a scalar loss, got " + lv.shape_string());
    for (Node& n : nodes_) n.grad = Tensor();
    nodes_[loss.id].grad = Tensor::scalar(q_(seed));
    for (std::size_t k = loss.id + 1; k-- > 0;) {
      Node& n = nodes_[k];
      if (!n.requires_grad || n.grad.empty() || !n.backward) continue;
      const Tensor g = n.grad;  // callbacks may grow nothing but hold no refs
      n.backward(g);
    }
  }

 private:
  using Backward = std::function<void(const Tensor&)>;

  struct Node {
    Tensor value;
    Tensor grad;
    bool requires_grad = false;
    Backward backward;
  };

  Var push(Tensor value, bool requires_grad, Backward backward) {
    nodes_.push_back({std::move(value), Tensor(), requires_grad, requires_grad ? std::move(backward) : Backward{}});
    return Var{static_cast<std::uint32_t>(nodes_.size() - 1)};
  }

  bool any_grad(std::initializer_list<Var> vs) const {
    for (Var v : vs)
      if (requires_grad(v)) return true;
    return false;
  }

  void accumulate(Var v, Tensor g) {
    Node& n = nodes_[v.id];
    if (!n.requires_grad) return;
    if (n.grad.empty()) {
      n.grad = std::move(g);
      return;
    }
    for (std::size_t i = 0; i < g.size(); ++i) n.grad[i] = q_.add(n.grad[i], g[i]);
  }

  // f(x) and df/dx evaluated as g * f'(x, y).
  template <typename F, typename D>
  Var unary(Var x, F f, D d) {
    const Tensor& xv = value(x);
    Tensor y(xv.rows(), xv.cols());
    for (std::size_t i = 0; i < y.size(); ++i) y[i] = f(xv[i], q_);
    const Var out{static_cast<std::uint32_t>(nodes_.size())};
    return push(std::move(y), requires_grad(x), [this, x, out, d](const Tensor& g) {
      const Tensor& xv = value(x);
      const Tensor& yv = value(out);
      Tensor gx(xv.rows(), xv.cols());
      for (std::size_t i = 0; i < gx.size(); ++i) gx[i] = d(g[i], xv[i], yv[i], q_);
      accumulate(x, std::move(gx));
    });
  }

  template <typename F, typename DA, typename DB>
  Var binary(Var a, Var b, F f, DA da, DB db) {
    require_same_shape(value(a), value(b), "elementwise op");
    const Tensor& av = value(a);
    const Tensor& bv = value(b);
    Tensor y(av.rows(), av.cols());
    for (std::size_t i = 0; i < y.size(); ++i) y[i] = f(av[i], bv[i], q_);
    return push(std::move(y), any_grad({a, b}), [this, a, b, da, db](const Tensor& g) {
      const Tensor& av = value(a);
      const Tensor& bv = value(b);
      if (requires_grad(a)) {
        Tensor ga(g.rows(), g.cols());
        for (std::size_t i = 0; i < g.size(); ++i) ga[i] = da(g[i], av[i], bv[i], q_);
        accumulate(a, std::move(ga));
      }
      if (requires_grad(b)) {
        Tensor gb(g.rows(), g.cols());
        for (std::size_t i = 0; i < g.size(); ++i) gb[i] = db(g[i], av[i], bv[i], q_);
        accumulate(b, std::move(gb));
      }
    });
  }

  Quantizer q_;
  std::vector<Node> nodes_;
};

// ---------------------------------------------------------------------------
// Multi-layer perceptron

struct Linear {
  Tensor w;  ///< (in x out)
  Tensor b;  ///< (1 x out)
};

/// Fully connected network with a shared hidden activation and an identity
/// output layer.
class Mlp {
 public:
  Mlp() = default;

  /// Weights and biases uniform in +-1/sqrt(fan_in).
  Mlp(const std::vector<std::size_t>& sizes, Activation hidden, std::mt19937_64& rng)
      : hidden_(hidden) {
    if (sizes.size() < 2) throw std::invalid_argument("Mlp needs at least input and output sizes");
    for (std::size_t l = 0; l + 1 < sizes.size(); ++l) {
      const double bound = 1.0 / std::sqrt(static_cast<double>(sizes[l]));
      std::uniform_real_distribution<double> dist(-bound, bound);
      Linear layer{Tensor(sizes[l], sizes[l + 1]), Tensor(1, sizes[l + 1])};
      for (double& v : layer.w.values()) v = dist(rng);
      for (double& v : layer.b.values()) v = dist(rng);
      layers_.push_back(std::move(layer));
    }
  }

  std::size_t input_size() const { return layers_.front().w.rows(); }
  std::size_t output_size() const { return layers_.back().w.cols(); }
  Activation hidden_activation() const { return hidden_; }
  const std::vector<Linear>& layers() const { return layers_; }
  std::vector<Linear>& layers() { return layers_; }

  std::vector<Tensor*> parameters() {
    std::vector<Tensor*> out;
    for (Linear& l : layers_) {
      out.push_back(&l.w);
      out.push_back(&l.b);
    }
    return out;
  }

  std::vector<const Tensor*> parameters() const {
    std::vector<const Tensor*> out;
    for (const Linear& l : layers_) {
      out.push_back(&l.w);
      out.push_back(&l.b);
    }
    return out;
  }

  std::size_t parameter_count() const {
    std::size_t n = 0;
    for (const Linear& l : layers_) n += l.w.size() + l.b.size();
    return n;
  }

  /// Rounds every parameter into `q`'s format.
  void quantize(const Quantizer& q) {
    for (Tensor* p : parameters()) *p = quantized(std::move(*p), q);
  }

  /// Gradient-free evaluation. Parameters are rounded into `q` on use.
  Tensor forward(const Tensor& x, const Quantizer& q) const {
    Tensor h = quantized(x, q);
    for (std::size_t l = 0; l < layers_.size(); ++l) {
      const bool last = l + 1 == layers_.size();
      h = dense_forward(h, quantized(layers_[l].w, q), quantized(layers_[l].b, q),
                        last ? Activation::Identity : hidden_, q);
    }
    return h;
  }

  /// Records the network on `tape`. With `trainable`, the parameter leaves
  /// are appended to `param_vars` in parameters() order.
  Var forward(Tape& tape, Var x, bool trainable, std::vector<Var>* param_vars = nullptr) const {
    Var h = x;
    for (std::size_t l = 0; l < layers_.size(); ++l) {
      const Linear& layer = layers_[l];
      const Var w = trainable ? tape.parameter(layer.w) : tape.constant(layer.w);
      const Var b = trainable ? tape.parameter(layer.b) : tape.constant(layer.b);
      if (param_vars != nullptr) {
        param_vars->push_back(w);
        param_vars->push_back(b);
      }
      h = tape.dense(h, w, b);
      if (l + 1 < layers_.size()) {
        h = hidden_ == Activation::Relu ? tape.relu(h)
            : hidden_ == Activation::Tanh ? tape.tanh(h)
                                          : h;
      }
    }
    return h;
  }

 private:
  Activation hidden_ = Activation::Relu;
  std::vector<Linear> layers_;
};

// ---------------------------------------------------------------------------
// Gradient magnitude histogram

struct GradHistogram {
  /// floor(log10 |g|) -> count, for nonzero finite g.
  std::map<int, std::uint64_t> decades;
  std::uint64_t zeros = 0;
  std::uint64_t non_finite = 0;

  std::size_t nonzero_bins() const {
    std::size_t n = 0;
    for (const auto& [d, c] : decades) n += c > 0;
    return n;
  }

  void add(double g) {
    if (!std::isfinite(g)) {
      ++non_finite;
    } else if (g == 0.0) {
      ++zeros;
    } else {
      ++decades[static_cast<int>(std::floor(std::log10(std::fabs(g))))];
    }
  }

  void merge(const GradHistogram& o) {
    for (const auto& [d, c] : o.decades) decades[d] += c;
    zeros += o.zeros;
    non_finite += o.non_finite;
  }
};

/// Counts |g| per decade bin [10^k, 10^(k+1)); zeros are binned separately.
inline GradHistogram grad_histogram(std::span<const Tensor> grads) {
  GradHistogram h;
  for (const Tensor& t : grads)
    for (double g : t.values()) h.add(g);
  return h;
}

inline GradHistogram grad_histogram(std::span<const double> grads) {
  GradHistogram h;
  for (double g : grads) h.add(g);
  return h;
}

}  // namespace lpsac::nn
