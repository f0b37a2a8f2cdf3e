// SPDX-License-Identifier: Apache-2.0
//
// Adam-family optimizers for emulated low precision.
//
// hAdam stores w = sqrt(v) and updates it with a stable hypot, so the
// second-moment buffer needs half the dynamic range. With compound loss
// scaling the gradients arrive multiplied by gamma, m and w carry that
// factor, and the update uses m / (w + gamma * eps); nothing is unscaled.

#pragma once

#include <cmath>
#include <cstdint>
#include <stdexcept>
#include <vector>

#include "lpsac/kahan.hpp"
#include "lpsac/lpsim.hpp"
#include "lpsac/stablemath.hpp"
#include "lpsac/tensor.hpp"

namespace lpsac::optim {

/// A gradient reached the optimizer with an inf or NaN entry. The loss
/// scaler is supposed to filter those steps out first.
class NonFiniteGradient : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

struct HAdamConfig {
  double lr = 1e-4;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;

  double sqrt_beta2() const { return std::sqrt(beta2); }
  double sqrt_one_minus_beta2() const { return std::sqrt(1.0 - beta2); }

  void validate() const {
    if (!(lr > 0.0)) throw std::invalid_argument("lr must be positive");
    if (!(beta1 > 0.0 && beta1 < 1.0)) throw std::invalid_argument("beta1 must lie in (0, 1)");
    if (!(beta2 > 0.0 && beta2 < 1.0)) throw std::invalid_argument("beta2 must lie in (0, 1)");
    if (!(eps > 0.0)) throw std::invalid_argument("adam_eps must be positive");
  }
  friend bool operator==(const HAdamConfig&, const HAdamConfig&) = default;
};

struct HAdamState {
  Tensor m;
  Tensor w;
  std::int64_t t = 0;
  /// Loss scale the contents of m and w currently carry.
  double scale = 1.0;

  HAdamState() = default;
  explicit HAdamState(const Tensor& like)
      : m(like.rows(), like.cols()), w(like.rows(), like.cols()) {}
};

struct AdamState {
  Tensor m;
  Tensor v;
  std::int64_t t = 0;
  double scale = 1.0;

  AdamState() = default;
  explicit AdamState(const Tensor& like)
      : m(like.rows(), like.cols()), v(like.rows(), like.cols()) {}
};

namespace detail {

inline void require_finite(const Tensor& g) {
  if (!g.all_finite()) throw NonFiniteGradient("non-finite gradient reached the optimizer");
}

/// Moves buffers that carry scale `from` to scale `to`.
inline void rescale(Tensor& a, Tensor& b, double from, double to, const Quantizer& q) {
  if (from == to) return;
  const double ratio = to / from;
  for (double& x : a.values()) x = q(x * ratio);
  for (double& x : b.values()) x = q(x * ratio);
}

inline void apply_update(Tensor& params, Tensor* compensation, std::size_t i, double update,
                         const Quantizer& q) {
  if (compensation != nullptr) {
    const auto acc = kahan::kahan_add({params[i], (*compensation)[i]}, -update, q);
    params[i] = acc.sum;
    (*compensation)[i] = acc.c;
  } else {
    params[i] = q.sub(params[i], update);
  }
}

inline void hadam_update(HAdamState& state, const HAdamConfig& cfg, Tensor& params,
                         const Tensor& grads_scaled, double gamma, const Quantizer& q,
                         Tensor* compensation, const stablemath::StableMathConfig& smc) {
  if (state.m.empty()) state = HAdamState(params);
  rescale(state.m, state.w, state.scale, gamma, q);
  state.scale = gamma;
  ++state.t;

  const double sb2 = cfg.sqrt_beta2();
  const double s1mb2 = cfg.sqrt_one_minus_beta2();
  const double bc1 = 1.0 - std::pow(cfg.beta1, static_cast<double>(state.t));
  const double bc2 = std::sqrt(1.0 - std::pow(cfg.beta2, static_cast<double>(state.t)));
  const double eps = q(gamma * cfg.eps);

  for (std::size_t i = 0; i < params.size(); ++i) {
    const double g = grads_scaled[i];
    state.m[i] = q.add(q.mul(cfg.beta1, state.m[i]), q.mul(1.0 - cfg.beta1, g));
    state.w[i] = stablemath::hypot_stable(q.mul(sb2, state.w[i]), q.mul(s1mb2, std::fabs(g)), q,
                                          smc);
    const double m_hat = q(state.m[i] / bc1);
    const double w_hat = q(state.w[i] / bc2);
    const double update = q.mul(cfg.lr, q.div(m_hat, q.add(w_hat, eps)));
    apply_update(params, compensation, i, update, q);
  }
}

}  // namespace detail

/// One hAdam step. `grads_scaled` is the gradient times `gamma`; the update
/// is lr * m_hat / (w_hat + gamma * eps). When `compensation` is given the
/// parameter update goes through Kahan summation.
inline void hadam_step(HAdamState& state, const HAdamConfig& cfg, Tensor& params,
                       const Tensor& grads_scaled, double gamma, const Quantizer& q,
                       Tensor* compensation = nullptr,
                       const stablemath::StableMathConfig& smc = {}) {
  require_same_shape(params, grads_scaled, "hadam_step");
  detail::require_finite(grads_scaled);
  detail::hadam_update(state, cfg, params, grads_scaled, gamma, q, compensation, smc);
}

/// Textbook Adam with bias correction, optionally on gamma-scaled gradients
/// (eps is then scaled too). With a wide quantizer this is the reference
/// implementation.
inline void adam_step(AdamState& state, const HAdamConfig& cfg, Tensor& params,
                      const Tensor& grads, double gamma, const Quantizer& q,
                      Tensor* compensation = nullptr) {
  require_same_shape(params, grads, "adam_step");
  if (state.m.empty()) state = AdamState(params);
  if (state.scale != gamma) {
    const double ratio = gamma / state.scale;
    for (double& x : state.m.values()) x = q(x * ratio);
    for (double& x : state.v.values()) x = q(x * ratio * ratio);
    state.scale = gamma;
  }
  ++state.t;
  const double bc1 = 1.0 - std::pow(cfg.beta1, static_cast<double>(state.t));
  const double bc2 = 1.0 - std::pow(cfg.beta2, static_cast<double>(state.t));
  const double eps = q(gamma * cfg.eps);

  for (std::size_t i = 0; i < params.size(); ++i) {
    const double g = grads[i];
    state.m[i] = q.add(q.mul(cfg.beta1, state.m[i]), q.mul(1.0 - cfg.beta1, g));
    // (1 - beta2) * g * g is a single fused multiply in common kernels.
    state.v[i] = q.add(q.mul(cfg.beta2, state.v[i]), q((1.0 - cfg.beta2) * g * g));
    const double m_hat = q(state.m[i] / bc1);
    const double v_hat = q(state.v[i] / bc2);
    const double update = q.mul(cfg.lr, q.div(m_hat, q.add(q.sqrt(v_hat), eps)));
    detail::apply_update(params, compensation, i, update, q);
  }
}

inline void adam_step_reference(AdamState& state, const HAdamConfig& cfg, Tensor& params,
                                const Tensor& grads) {
  adam_step(state, cfg, params, grads, 1.0, Quantizer::wide());
}

// ---------------------------------------------------------------------------
// Dynamic loss scale

struct LossScaler {
  double gamma = 1e4;
  std::int64_t good_steps = 0;
  std::int64_t growth_interval = 10000;

  LossScaler() = default;
  LossScaler(double init, std::int64_t interval) : gamma(init), growth_interval(interval) {
    if (!(init > 0.0)) throw std::invalid_argument("init_grad_scale must be positive");
    if (interval < 1) throw std::invalid_argument("inc_grad_scale_freq must be >= 1");
  }
};

inline double scaler_scale_loss(const LossScaler& sc, double loss) { return sc.gamma * loss; }

struct ScalerDecision {
  bool apply;
};

/// Halves gamma and skips the step on non-finite gradients; doubles gamma
/// after `growth_interval` consecutive clean steps.
inline ScalerDecision scaler_update(LossScaler& sc, bool grads_finite) {
  if (!grads_finite) {
    sc.gamma *= 0.5;
    sc.good_steps = 0;
    return {false};
  }
  if (++sc.good_steps >= sc.growth_interval) {
    sc.gamma *= 2.0;
    sc.good_steps = 0;
  }
  return {true};
}

// ---------------------------------------------------------------------------
// Per-network optimizer with the precision strategy folded in

enum class ScalingMode {
  None,      ///< gradients used as computed
  Compound,  ///< gamma-scaled gradients feed the buffers directly
  Unscale,   ///< classic loss scaling: gradients divided by gamma first
};

struct OptimizerSettings {
  HAdamConfig adam;
  bool hypot_buffer = false;       ///< hAdam instead of Adam
  bool kahan_updates = false;      ///< compensated parameter updates
  ScalingMode scaling = ScalingMode::None;
  double init_grad_scale = 1e4;
  std::int64_t inc_grad_scale_freq = 10000;
  /// Format of parameters and optimizer state.
  Quantizer storage;
  stablemath::StableMathConfig stable;
};

/// Owns the optimizer state for a fixed list of parameter tensors.
class Optimizer {
 public:
  Optimizer() = default;

  Optimizer(OptimizerSettings settings, const std::vector<Tensor*>& params)
      : settings_(std::move(settings)),
        scaler_(settings_.init_grad_scale, settings_.inc_grad_scale_freq) {
    settings_.adam.validate();
    for (const Tensor* p : params) {
      hadam_.emplace_back(*p);
      adam_.emplace_back(*p);
      compensation_.emplace_back(p->rows(), p->cols());
    }
  }

  /// Seed for the backward pass: the current loss scale (1 without scaling).
  double loss_scale() const {
    return settings_.scaling == ScalingMode::None ? 1.0 : scaler_.gamma;
  }

  const LossScaler& scaler() const { return scaler_; }
  const OptimizerSettings& settings() const { return settings_; }
  std::int64_t skipped_steps() const { return skipped_; }
  const std::vector<Tensor>& compensation() const { return compensation_; }
  const std::vector<HAdamState>& hadam_states() const { return hadam_; }
  const std::vector<AdamState>& adam_states() const { return adam_; }

  /// Applies one update. Returns false when the loss scaler skipped it.
  /// Without a scaler, non-finite gradients flow into the buffers.
  bool step(const std::vector<Tensor*>& params, const std::vector<Tensor>& grads) {
    if (params.size() != grads.size() || params.size() != hadam_.size()) {
      throw ShapeMismatch("Optimizer::step: parameter/gradient count mismatch");
    }
    const Quantizer& q = settings_.storage;
    double gamma = 1.0;
    if (settings_.scaling != ScalingMode::None) {
      bool finite = true;
      for (const Tensor& g : grads) finite = finite && g.all_finite();
      gamma = scaler_.gamma;
      if (!scaler_update(scaler_, finite).apply) {
        ++skipped_;
        return false;
      }
    }
    for (std::size_t k = 0; k < params.size(); ++k) {
      Tensor g = quantized(grads[k], q);
      double eps_scale = 1.0;
      if (settings_.scaling == ScalingMode::Unscale) {
        for (double& x : g.values()) x = q(x / gamma);
      } else if (settings_.scaling == ScalingMode::Compound) {
        eps_scale = gamma;
      }
      Tensor* comp = settings_.kahan_updates ? &compensation_[k] : nullptr;
      if (settings_.hypot_buffer) {
        hypot_step(k, *params[k], g, eps_scale, comp);
      } else {
        adam_step(adam_[k], settings_.adam, *params[k], g, eps_scale, q, comp);
      }
    }
    return true;
  }

 private:
  // Unguarded configurations (no scaler) let non-finite gradients through,
  // as the underlying arithmetic would.
  void hypot_step(std::size_t k, Tensor& p, const Tensor& g, double gamma, Tensor* comp) {
    require_same_shape(p, g, "Optimizer::step");
    detail::hadam_update(hadam_[k], settings_.adam, p, g, gamma, settings_.storage, comp,
                         settings_.stable);
  }

  OptimizerSettings settings_;
  LossScaler scaler_;
  std::vector<HAdamState> hadam_;
  std::vector<AdamState> adam_;
  std::vector<Tensor> compensation_;
  std::int64_t skipped_ = 0;
};

}  // namespace lpsac::optim
