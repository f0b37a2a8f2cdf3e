// SPDX-License-Identifier: Apache-2.0
//
// Scalar kernels whose naive forms under- or overflow in half precision,
// together with their naive counterparts for comparison. Every kernel takes
// the active quantizer, so the same code runs as a double-precision oracle
// (Quantizer::wide()) or under emulation.

#pragma once

#include <algorithm>
#include <cmath>
#include <numbers>
#include <span>
#include <stdexcept>

#include "lpsac/lpsim.hpp"

namespace lpsac::stablemath {

/// sigma quantized to zero or NaN.
class InvalidSigma : public std::domain_error {
 public:
  using std::domain_error::domain_error;
};

class LengthMismatch : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

struct StableMathConfig {
  /// Exponent argument at and above which softplus switches to its linear
  /// branch.
  double K = 10.0;
  /// Added to the hypot denominator so that hypot(0, 0) is defined. Zero
  /// selects the min_normal of the active format.
  double eps_denominator = 0.0;

  double hypot_guard(const Quantizer& q) const {
    return eps_denominator > 0.0 ? eps_denominator : q.min_normal();
  }

  void validate() const {
    if (!(K > 0.0)) throw std::invalid_argument("softplus threshold K must be positive");
    if (eps_denominator < 0.0) throw std::invalid_argument("eps_denominator must be >= 0");
  }
};

inline constexpr double kHalfLog2Pi = 0.91893853320467274178;  // 0.5 * log(2 pi)

// ---------------------------------------------------------------------------
// hypot

/// sqrt(a^2 + b^2) for non-negative magnitudes, evaluated as
/// max * sqrt(1 + (min / (max + guard))^2) so that no intermediate squares a
/// tiny operand.
inline double hypot_stable(double a, double b, const Quantizer& q,
                           const StableMathConfig& cfg = {}) {
  const double hi = std::max(a, b);
  const double lo = std::min(a, b);
  const double ratio = q.div(lo, q.add(hi, cfg.hypot_guard(q)));
  return q.mul(hi, q.sqrt(q.add(1.0, q.mul(ratio, ratio))));
}

inline double hypot_naive(double a, double b, const Quantizer& q) {
  return q.sqrt(q.add(q.mul(a, a), q.mul(b, b)));
}

// ---------------------------------------------------------------------------
// softplus(-2u) = log(1 + exp(-2u)), the term of the tanh change of variables

/// log(1 + exp(-2u)) with a linear branch (-2u) once the exponent argument
/// -2u reaches K, so that neither pass evaluates a large exp.
inline double softplus_fix(double u, const Quantizer& q, const StableMathConfig& cfg = {}) {
  const double x = q.mul(-2.0, u);
  if (x >= cfg.K) return x;
  return q.log1p(q.exp(x));
}

/// d/du of softplus_fix.
inline double softplus_fix_grad(double u, const Quantizer& q, const StableMathConfig& cfg = {}) {
  const double x = q.mul(-2.0, u);
  if (x >= cfg.K) return -2.0;
  const double e = q.exp(x);
  return q.mul(-2.0, q.div(e, q.add(1.0, e)));
}

inline double softplus_naive(double u, const Quantizer& q) {
  return q.log1p(q.exp(q.mul(-2.0, u)));
}

/// Backward pass as an autograd engine would derive it: exp(x) / (1 + exp(x)),
/// which is inf / inf once exp overflows.
inline double softplus_naive_grad(double u, const Quantizer& q) {
  const double e = q.exp(q.mul(-2.0, u));
  return q.mul(-2.0, q.div(e, q.add(1.0, e)));
}

// ---------------------------------------------------------------------------
// Gaussian log-density

namespace detail {
inline void check_sigma(double sigma) {
  if (!(sigma > 0.0)) throw InvalidSigma("sigma must be positive after quantization");
}
}  // namespace detail

/// log N(x; mu, sigma) with the standardized residual formed before
/// squaring: -0.5 ((x - mu) / sigma)^2 - log sigma - 0.5 log(2 pi).
inline double normal_log_prob(double x, double mu, double sigma, const Quantizer& q) {
  const double s = q(sigma);
  detail::check_sigma(s);
  const double z = q.div(q.sub(x, mu), s);
  const double quad = q.mul(z, z);
  return q.sub(q.sub(q.mul(-0.5, quad), q.log(s)), q(kHalfLog2Pi));
}

/// Same density via (x - mu)^2 / sigma^2, whose denominator underflows for
/// small sigma.
inline double normal_log_prob_naive(double x, double mu, double sigma, const Quantizer& q) {
  const double s = q(sigma);
  detail::check_sigma(s);
  const double d = q.sub(x, mu);
  const double quad = q.div(q.mul(d, d), q.mul(s, s));
  return q.sub(q.sub(q.mul(-0.5, quad), q.log(s)), q(kHalfLog2Pi));
}

// ---------------------------------------------------------------------------
// tanh-squashed Gaussian

/// log(1 - tanh(u)^2) = 2 (log 2 - u - softplus(-2u)).
inline double tanh_log_jacobian(double u, const Quantizer& q, const StableMathConfig& cfg = {}) {
  const double inner = q.sub(q.sub(q(std::numbers::ln2), u), softplus_fix(u, q, cfg));
  return q.mul(2.0, inner);
}

/// Log-density of a = tanh(u) where u ~ N(mu, diag(sigma^2)):
/// sum_i log N(u_i) - sum_i log(1 - tanh(u_i)^2).
inline double tanh_gaussian_log_prob(std::span<const double> u, std::span<const double> mu,
                                     std::span<const double> sigma, const Quantizer& q,
                                     const StableMathConfig& cfg = {}) {
  if (u.size() != mu.size() || u.size() != sigma.size()) {
    throw LengthMismatch("tanh_gaussian_log_prob: u, mu and sigma must have equal length");
  }
  double gauss = 0.0;
  double jac = 0.0;
  for (std::size_t i = 0; i < u.size(); ++i) {
    gauss = q.add(gauss, normal_log_prob(u[i], mu[i], sigma[i], q));
    jac = q.add(jac, tanh_log_jacobian(u[i], q, cfg));
  }
  return q.sub(gauss, jac);
}

/// The textbook form log N(u) - sum log(1 - tanh^2 u) with no rewriting.
inline double tanh_gaussian_log_prob_direct(std::span<const double> u,
                                            std::span<const double> mu,
                                            std::span<const double> sigma, const Quantizer& q) {
  if (u.size() != mu.size() || u.size() != sigma.size()) {
    throw LengthMismatch("tanh_gaussian_log_prob_direct: length mismatch");
  }
  double total = 0.0;
  for (std::size_t i = 0; i < u.size(); ++i) {
    const double t = q.tanh(u[i]);
    const double jac = q.log(q.sub(1.0, q.mul(t, t)));
    total = q.add(total, q.sub(normal_log_prob_naive(u[i], mu[i], sigma[i], q), jac));
  }
  return total;
}

}  // namespace lpsac::stablemath
