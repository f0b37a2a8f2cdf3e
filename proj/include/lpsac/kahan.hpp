// SPDX-License-Identifier: Apache-2.0
//
// Compensated (Kahan) summation and its two uses during training: applying
// parameter updates that are far below the parameter's ulp, and the
// exponential moving average of target-network weights.

#pragma once

#include <span>
#include <stdexcept>

#include "lpsac/lpsim.hpp"
#include "lpsac/tensor.hpp"

namespace lpsac::kahan {

/// Running sum plus the compensation term that holds its lost low-order
/// bits.
struct KahanAccumulator {
  double sum = 0.0;
  double c = 0.0;
};

/// One step of compensated summation, every operation rounded by `q`:
/// y = val - c; t = sum + y; c = (t - sum) - y; sum = t.
inline KahanAccumulator kahan_add(KahanAccumulator acc, double val, const Quantizer& q) {
  const double y = q.sub(val, acc.c);
  const double t = q.add(acc.sum, y);
  acc.c = q.sub(q.sub(t, acc.sum), y);
  acc.sum = t;
  return acc;
}

/// Elementwise kahan_add of `delta` into (`values`, `compensation`).
inline void kahan_add_into(std::span<double> values, std::span<double> compensation,
                           std::span<const double> delta, const Quantizer& q) {
  if (values.size() != compensation.size() || values.size() != delta.size()) {
    throw ShapeMismatch("kahan_add_into: length mismatch");
  }
  for (std::size_t i = 0; i < values.size(); ++i) {
    const auto acc = kahan_add({values[i], compensation[i]}, delta[i], q);
    values[i] = acc.sum;
    compensation[i] = acc.c;
  }
}

/// Parameter values plus a same-shaped compensation array, which starts at
/// zero.
struct KahanParamBuffer {
  Tensor value;
  Tensor compensation;

  KahanParamBuffer() = default;
  explicit KahanParamBuffer(Tensor initial)
      : value(std::move(initial)), compensation(value.rows(), value.cols()) {}
};

/// value <- value + delta, compensated.
inline void kahan_apply_gradient(KahanParamBuffer& buf, const Tensor& delta, const Quantizer& q) {
  require_same_shape(buf.value, delta, "kahan_apply_gradient");
  kahan_add_into(buf.value.values(), buf.compensation.values(), delta.values(), q);
}

/// Target-network weights kept as a copy scaled by C, so that the per-step
/// increment C (1 - beta) (psi - psi_hat) stays well above the underflow
/// threshold. The scaled copy is the only storage; read-out divides by C.
class ScaledTargetBuffer {
 public:
  ScaledTargetBuffer() = default;

  ScaledTargetBuffer(const Tensor& initial, double scale, double beta, const Quantizer& q)
      : scaled_(initial.rows(), initial.cols()),
        compensation_(initial.rows(), initial.cols()),
        scale_(scale),
        beta_(beta) {
    if (!(scale >= 1.0)) throw std::invalid_argument("Kahan-momentum scale C must be >= 1");
    if (!(beta > 0.0 && beta < 1.0)) throw std::invalid_argument("beta must lie in (0, 1)");
    for (std::size_t i = 0; i < initial.size(); ++i) scaled_[i] = q(initial[i] * scale_);
  }

  double scale() const { return scale_; }
  double beta() const { return beta_; }
  const Tensor& scaled() const { return scaled_; }
  const Tensor& compensation() const { return compensation_; }
  Tensor& scaled() { return scaled_; }
  Tensor& compensation() { return compensation_; }

  /// Target weights, divided by C in double and rounded once.
  Tensor readout(const Quantizer& q) const {
    Tensor out(scaled_.rows(), scaled_.cols());
    for (std::size_t i = 0; i < scaled_.size(); ++i) out[i] = q(scaled_[i] / scale_);
    return out;
  }

 private:
  Tensor scaled_;
  Tensor compensation_;
  double scale_ = 1e4;
  double beta_ = 0.995;
};

/// psi_hat <- beta psi_hat + (1 - beta) psi, realised as a compensated add of
/// C (1 - beta) (psi - psi_hat) to the scaled copy.
inline void kahan_momentum_update(ScaledTargetBuffer& tb, const Tensor& psi, const Quantizer& q) {
  require_same_shape(tb.scaled(), psi, "kahan_momentum_update");
  const double coef = q(tb.scale() * (1.0 - tb.beta()));
  auto scaled = tb.scaled().values();
  auto comp = tb.compensation().values();
  for (std::size_t i = 0; i < psi.size(); ++i) {
    const double current = q(scaled[i] / tb.scale());
    const double delta = q.mul(coef, q.sub(psi[i], current));
    const auto acc = kahan_add({scaled[i], comp[i]}, delta, q);
    scaled[i] = acc.sum;
    comp[i] = acc.c;
  }
}

/// The uncompensated EMA, every product and sum rounded by `q`.
inline void naive_ema_update(Tensor& target, const Tensor& psi, double beta, const Quantizer& q) {
  require_same_shape(target, psi, "naive_ema_update");
  for (std::size_t i = 0; i < psi.size(); ++i) {
    target[i] = q.add(q.mul(beta, target[i]), q.mul(1.0 - beta, psi[i]));
  }
}

}  // namespace lpsac::kahan
