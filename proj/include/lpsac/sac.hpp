// SPDX-License-Identifier: Apache-2.0
//
// Soft actor-critic with a tanh-squashed Gaussian policy, twin critics,
// exponentially averaged target critics and a learned temperature. All
// network arithmetic runs through the tape's quantizer; parameters and
// optimizer state live in a (possibly different) storage format.

#pragma once

#include <array>
#include <cmath>
#include <cstdint>
#include <numbers>
#include <optional>
#include <random>
#include <stdexcept>
#include <string>
#include <string_view>
#include <tuple>
#include <vector>

#include "lpsac/env.hpp"
#include "lpsac/kahan.hpp"
#include "lpsac/lpsim.hpp"
#include "lpsac/nn.hpp"
#include "lpsac/optim.hpp"
#include "lpsac/replay.hpp"
#include "lpsac/stablemath.hpp"
#include "lpsac/tensor.hpp"

namespace lpsac::sac {

/// The six stability methods, in the order they are added by the cumulative
/// ablation.
enum class Method { HAdam, SoftplusFix, NormalFix, KahanMomentum, CompoundScaling, KahanGradients };

inline constexpr std::array<Method, 6> kMethodOrder = {
    Method::HAdam,         Method::SoftplusFix,     Method::NormalFix,
    Method::KahanMomentum, Method::CompoundScaling, Method::KahanGradients};

inline constexpr std::string_view method_name(Method m) {
  switch (m) {
    case Method::HAdam: return "hadam";
    case Method::SoftplusFix: return "softplus-fix";
    case Method::NormalFix: return "normal-fix";
    case Method::KahanMomentum: return "kahan-momentum";
    case Method::CompoundScaling: return "compound-scaling";
    case Method::KahanGradients: return "kahan-gradients";
  }
  return "?";
}

inline std::optional<Method> parse_method(std::string_view s) {
  for (Method m : kMethodOrder)
    if (method_name(m) == s) return m;
  return std::nullopt;
}

struct Methods {
  std::array<bool, 6> on{};

  static Methods all() {
    Methods m;
    m.on.fill(true);
    return m;
  }
  static Methods none() { return {}; }

  /// The first `k` methods of kMethodOrder enabled.
  static Methods first(std::size_t k) {
    Methods m;
    for (std::size_t i = 0; i < k && i < m.on.size(); ++i) m.on[i] = true;
    return m;
  }

  bool get(Method m) const { return on[static_cast<std::size_t>(m)]; }
  void set(Method m, bool v) { on[static_cast<std::size_t>(m)] = v; }
  Methods without(Method m) const {
    Methods c = *this;
    c.set(m, false);
    return c;
  }
  bool all_on() const { return *this == all(); }
  bool all_off() const { return *this == none(); }

  friend bool operator==(const Methods&, const Methods&) = default;
};

/// How numbers are represented during training.
enum class Precision {
  Fp64,            ///< double everywhere
  Emulated,        ///< one format for everything
  Coerce,          ///< emulated, NaN -> 0 and +-inf -> +-max after every op
  LossScale,       ///< emulated, dynamic loss scaling with unscaled gradients
  MixedPrecision,  ///< storage in a wider master format, compute in `format`
};

struct SacConfig {
  double discount = 0.99;
  double init_temperature = 0.1;
  double tau = 0.005;
  std::size_t batch_size = 256;
  int target_update_freq = 2;
  int actor_update_freq = 1;
  std::size_t seed_steps = 1000;
  double log_std_min = -5.0;
  double log_std_max = 2.0;
  std::size_t hidden_dim = 64;
  std::size_t hidden_depth = 2;
  bool twin_critics = true;
  std::size_t replay_capacity = 100000;
  optim::HAdamConfig adam;  ///< shared by actor, critic and temperature
  double init_grad_scale = 1e4;
  std::int64_t inc_grad_scale_freq = 10000;
  double softplus_K = 10.0;
  double kahan_momentum_scale = 1e4;

  Precision precision = Precision::Fp64;
  FloatFormat format = FloatFormat::fp16();
  FloatFormat master_format = FloatFormat::fp32();
  Methods methods;

  friend bool operator==(const SacConfig&, const SacConfig&) = default;

  void validate() const {
    if (!(discount > 0.0 && discount < 1.0)) throw std::invalid_argument("discount must lie in (0, 1)");
    if (!(tau >= 0.0 && tau <= 1.0)) throw std::invalid_argument("tau must lie in [0, 1]");
    if (!(log_std_min < log_std_max)) throw std::invalid_argument("log_std bounds must be ordered");
    if (!(init_temperature > 0.0)) throw std::invalid_argument("init_temperature must be positive");
    if (batch_size == 0 || hidden_dim == 0 || replay_capacity == 0) {
      throw std::invalid_argument("batch_size, hidden_dim and replay_capacity must be positive");
    }
    if (target_update_freq < 1 || actor_update_freq < 1) {
      throw std::invalid_argument("update frequencies must be >= 1");
    }
    if (!(kahan_momentum_scale >= 1.0)) throw std::invalid_argument("kahan_momentum_scale must be >= 1");
    adam.validate();
    stablemath::StableMathConfig{softplus_K, 0.0}.validate();
    format.validate();
    master_format.validate();
  }

  double beta() const { return 1.0 - tau; }
  double target_entropy(std::size_t act_dim) const { return -static_cast<double>(act_dim); }

  Quantizer compute_quantizer() const {
    switch (precision) {
      case Precision::Fp64: return Quantizer::wide();
      case Precision::Coerce: return Quantizer(format, true);
      default: return Quantizer(format);
    }
  }

  Quantizer storage_quantizer() const {
    switch (precision) {
      case Precision::Fp64: return Quantizer::wide();
      case Precision::Coerce: return Quantizer(format, true);
      case Precision::MixedPrecision: return Quantizer(master_format);
      default: return Quantizer(format);
    }
  }

  optim::ScalingMode scaling_mode() const {
    if (methods.get(Method::CompoundScaling)) return optim::ScalingMode::Compound;
    if (precision == Precision::LossScale || precision == Precision::MixedPrecision) {
      return optim::ScalingMode::Unscale;
    }
    return optim::ScalingMode::None;
  }
};

struct PolicyOutput {
  Tensor mu;       ///< (B x A)
  Tensor log_std;  ///< (B x A), inside the bounds
  Tensor eps;      ///< (B x A)
  Tensor u;        ///< pre-tanh sample
  Tensor action;   ///< tanh(u)
  Tensor log_prob; ///< (B x 1)
};

struct UpdateStats {
  double critic_loss = 0.0;
  double actor_loss = 0.0;
  double alpha_loss = 0.0;
  bool actor_updated = false;
  bool target_updated = false;
};

class SacAgent {
 public:
  SacAgent(const SacConfig& cfg, std::size_t obs_dim, std::size_t act_dim, std::uint64_t seed)
      : cfg_(cfg), obs_dim_(obs_dim), act_dim_(act_dim), rng_(seed) {
    cfg_.validate();
    qc_ = cfg_.compute_quantizer();
    qs_ = cfg_.storage_quantizer();
    stable_ = {cfg_.softplus_K, 0.0};

    std::mt19937_64 init_rng(seed ^ 0x5ac0f1e1dULL);
    std::vector<std::size_t> actor_sizes{obs_dim};
    std::vector<std::size_t> critic_sizes{obs_dim + act_dim};
    for (std::size_t d = 0; d < cfg_.hidden_depth; ++d) {
      actor_sizes.push_back(cfg_.hidden_dim);
      critic_sizes.push_back(cfg_.hidden_dim);
    }
    actor_sizes.push_back(2 * act_dim);
    critic_sizes.push_back(1);

    actor_ = nn::Mlp(actor_sizes, nn::Activation::Relu, init_rng);
    const std::size_t n_critics = cfg_.twin_critics ? 2 : 1;
    for (std::size_t i = 0; i < n_critics; ++i) {
      critics_.emplace_back(critic_sizes, nn::Activation::Relu, init_rng);
    }
    actor_.quantize(qs_);
    for (auto& c : critics_) c.quantize(qs_);
    targets_ = critics_;
    if (kahan_momentum()) {
      for (const auto& c : critics_)
        for (const Tensor* p : c.parameters())
          target_buffers_.emplace_back(*p, cfg_.kahan_momentum_scale, cfg_.beta(), qs_);
    }
    log_alpha_ = Tensor::scalar(qs_(std::log(cfg_.init_temperature)));

    actor_opt_ = optim::Optimizer(optimizer_settings(false), actor_.parameters());
    critic_opt_ = optim::Optimizer(optimizer_settings(cfg_.methods.get(Method::KahanGradients)),
                                   critic_parameters());
    alpha_opt_ = optim::Optimizer(optimizer_settings(cfg_.methods.get(Method::KahanGradients)),
                                  {&log_alpha_});
  }

  const SacConfig& config() const { return cfg_; }
  std::size_t obs_dim() const { return obs_dim_; }
  std::size_t act_dim() const { return act_dim_; }
  const Quantizer& compute_quantizer() const { return qc_; }
  const Quantizer& storage_quantizer() const { return qs_; }

  nn::Mlp& actor() { return actor_; }
  const nn::Mlp& actor() const { return actor_; }
  std::vector<nn::Mlp>& critics() { return critics_; }
  const std::vector<nn::Mlp>& critics() const { return critics_; }
  const std::vector<nn::Mlp>& target_critics() const { return targets_; }
  std::vector<nn::Mlp>& target_critics() { return targets_; }
  const std::vector<kahan::ScaledTargetBuffer>& target_buffers() const { return target_buffers_; }

  double log_alpha() const { return log_alpha_[0]; }
  void set_log_alpha(double v) { log_alpha_[0] = qs_(v); }
  /// exp(log alpha) in the compute format.
  double alpha() const { return qc_.exp(qc_(log_alpha_[0])); }

  const optim::Optimizer& actor_optimizer() const { return actor_opt_; }
  const optim::Optimizer& critic_optimizer() const { return critic_opt_; }
  const optim::Optimizer& alpha_optimizer() const { return alpha_opt_; }

  /// Number of optimizer calls that saw a non-finite gradient.
  std::int64_t nan_events() const { return nan_events_; }
  /// Critic gradients of the most recent critic update, divided by the loss
  /// scale in double precision.
  const std::vector<Tensor>& last_critic_grads() const { return last_critic_grads_; }

  std::vector<Tensor*> critic_parameters() {
    std::vector<Tensor*> out;
    for (auto& c : critics_)
      for (Tensor* p : c.parameters()) out.push_back(p);
    return out;
  }

  /// Standard-normal draws rounded into the compute format.
  Tensor sample_eps(std::size_t batch) {
    Tensor eps(batch, act_dim_);
    std::normal_distribution<double> n(0.0, 1.0);
    for (double& v : eps.values()) v = qc_(n(rng_));
    return eps;
  }

  // -- policy ----------------------------------------------------------------

  struct PolicyVars {
    nn::Var mu, log_std, std, u, action, log_prob;
  };

  /// Records the reparameterized policy on `tape` for observations `s`.
  PolicyVars record_policy(nn::Tape& t, nn::Var s, const Tensor& eps, bool trainable,
                           std::vector<nn::Var>* params = nullptr) const {
    const std::size_t A = act_dim_;
    const nn::Var out = actor_.forward(t, s, trainable, params);
    PolicyVars p;
    p.mu = t.slice_cols(out, 0, A);
    const nn::Var raw = t.slice_cols(out, A, 2 * A);
    const double lo = cfg_.log_std_min, hi = cfg_.log_std_max;
    p.log_std = t.add_scalar(t.mul_scalar(t.add_scalar(t.tanh(raw), 1.0), 0.5 * (hi - lo)), lo);
    p.std = t.exp(p.log_std);
    p.u = t.add(p.mu, t.mul(t.constant(eps), p.std));
    p.action = t.tanh(p.u);

    const bool normal_fix = cfg_.methods.get(Method::NormalFix);
    const nn::Var gauss = t.sum_cols(t.normal_log_prob(p.u, p.mu, p.std, normal_fix));
    // log(1 - tanh(u)^2) = 2 (log 2 - u - softplus(-2u))
    const nn::Var sp = cfg_.methods.get(Method::SoftplusFix) ? t.softplus_fix(p.u, stable_)
                                                             : t.softplus_naive(p.u);
    const nn::Var jac =
        t.mul_scalar(t.sub(t.add_scalar(t.mul_scalar(p.u, -1.0), std::numbers::ln2), sp), 2.0);
    p.log_prob = t.sub(gauss, t.sum_cols(jac));
    return p;
  }

  /// Samples actions for a batch of observations with the given noise (or
  /// fresh noise when `eps` is empty). Throws NonFiniteAction.
  PolicyOutput policy_sample(const Tensor& obs, Tensor eps = {}) {
    if (eps.empty()) eps = sample_eps(obs.rows());
    nn::Tape t(qc_);
    const PolicyVars p = record_policy(t, t.constant(obs), eps, false);
    PolicyOutput out{t.value(p.mu), t.value(p.log_std), quantized(eps, qc_),
                     t.value(p.u),  t.value(p.action),  t.value(p.log_prob)};
    if (!out.action.all_finite()) throw NonFiniteAction("policy produced a non-finite action");
    return out;
  }

  /// tanh(mu) (deterministic) or a sampled action for each row of `obs`.
  /// Throws NonFiniteAction.
  Tensor act(const Tensor& obs, bool deterministic) {
    Tensor a;
    if (deterministic) {
      const Tensor out = actor_.forward(quantized(obs, qc_), qc_);
      a = Tensor(obs.rows(), act_dim_);
      for (std::size_t r = 0; r < obs.rows(); ++r)
        for (std::size_t c = 0; c < act_dim_; ++c) a(r, c) = qc_.tanh(out(r, c));
    } else {
      nn::Tape t(qc_);
      const PolicyVars p = record_policy(t, t.constant(obs), sample_eps(obs.rows()), false);
      a = t.value(p.action);
    }
    if (!a.all_finite()) throw NonFiniteAction("policy produced a non-finite action");
    return a;
  }

  /// Q-values of the first critic.
  Tensor q_values(const Tensor& obs, const Tensor& action) const {
    nn::Tape t(qc_);
    const nn::Var sa = t.concat_cols(t.constant(obs), t.constant(action));
    return t.value(critics_.front().forward(t, sa, false));
  }

  // -- updates ---------------------------------------------------------------

  /// Bootstrap targets r + discount * not_done * (min Q_target(s', a') - alpha log pi(a'|s')).
  Tensor critic_targets(const Batch& b, const Tensor& eps_next) const {
    nn::Tape t(qc_);
    const nn::Var s2 = t.constant(b.next_obs);
    const PolicyVars p = record_policy(t, s2, eps_next, false);
    const nn::Var sa2 = t.concat_cols(s2, p.action);
    nn::Var tq = targets_[0].forward(t, sa2, false);
    for (std::size_t i = 1; i < targets_.size(); ++i) tq = t.minimum(tq, targets_[i].forward(t, sa2, false));
    const nn::Var v = t.sub(tq, t.mul_scalar(p.log_prob, alpha()));
    const nn::Var nd = t.mul_scalar(t.constant(b.not_done), cfg_.discount);
    return t.value(t.add(t.constant(b.reward), t.mul(nd, v)));
  }

  struct Gradients {
    double loss = 0.0;
    std::vector<Tensor> grads;  ///< scaled by `scale`, in parameters() order
    Tensor log_prob;            ///< actor gradients only: log pi of the batch
  };

  /// Critic loss (MSE averaged over critics) and its gradients with the
  /// backward pass seeded by `scale`.
  Gradients critic_gradients(const Batch& b, const Tensor& eps_next, double scale) const {
    const Tensor y = critic_targets(b, eps_next);
    nn::Tape t(qc_);
    const nn::Var sa = t.concat_cols(t.constant(b.obs), t.constant(b.action));
    const nn::Var target = t.constant(y);
    std::vector<nn::Var> vars;
    nn::Var loss{};
    for (std::size_t i = 0; i < critics_.size(); ++i) {
      const nn::Var q = critics_[i].forward(t, sa, true, &vars);
      const nn::Var mse = t.mean(t.square(t.sub(q, target)));
      loss = i == 0 ? mse : t.add(loss, mse);
    }
    if (critics_.size() > 1) loss = t.mul_scalar(loss, 1.0 / static_cast<double>(critics_.size()));
    t.backward(loss, scale);
    Gradients g{t.value(loss).item(), {}, {}};
    for (nn::Var v : vars) g.grads.push_back(t.grad(v));
    return g;
  }

  /// Actor loss E[alpha log pi - min Q] and its gradients; critics are held
  /// fixed.
  Gradients actor_gradients(const Batch& b, const Tensor& eps, double scale) const {
    nn::Tape t(qc_);
    const nn::Var s = t.constant(b.obs);
    std::vector<nn::Var> vars;
    const PolicyVars p = record_policy(t, s, eps, true, &vars);
    const nn::Var sa = t.concat_cols(s, p.action);
    nn::Var q = critics_[0].forward(t, sa, false);
    for (std::size_t i = 1; i < critics_.size(); ++i) q = t.minimum(q, critics_[i].forward(t, sa, false));
    const nn::Var loss = t.mean(t.sub(t.mul_scalar(p.log_prob, alpha()), q));
    t.backward(loss, scale);
    Gradients g{t.value(loss).item(), {}, t.value(p.log_prob)};
    for (nn::Var v : vars) g.grads.push_back(t.grad(v));
    return g;
  }

  /// Temperature loss -log alpha * mean(log pi + target entropy), log pi
  /// detached. The single gradient is for log alpha.
  Gradients alpha_gradients(const Tensor& log_prob, double scale) const {
    nn::Tape t(qc_);
    const nn::Var la = t.parameter(log_alpha_);
    const nn::Var gap = t.mean(t.add_scalar(t.constant(log_prob), cfg_.target_entropy(act_dim_)));
    const nn::Var loss = t.mul(la, t.mul_scalar(gap, -1.0));
    t.backward(loss, scale);
    return {t.value(loss).item(), {t.grad(la)}, {}};
  }

  /// One critic step. Returns the (unscaled) loss, averaged over critics.
  double critic_update(const Batch& b, Tensor eps_next = {}) {
    if (eps_next.empty()) eps_next = sample_eps(b.obs.rows());
    const double scale = critic_opt_.loss_scale();
    Gradients g = critic_gradients(b, eps_next, scale);
    last_critic_grads_ = g.grads;
    for (Tensor& t : last_critic_grads_)
      for (double& x : t.values()) x /= scale;
    step(critic_opt_, critic_parameters(), g.grads);
    return g.loss;
  }

  /// One actor step followed by one temperature step. Returns the losses.
  std::pair<double, double> actor_and_alpha_update(const Batch& b, Tensor eps = {}) {
    if (eps.empty()) eps = sample_eps(b.obs.rows());
    const Gradients ga = actor_gradients(b, eps, actor_opt_.loss_scale());
    step(actor_opt_, actor_.parameters(), ga.grads);
    const Gradients gt = alpha_gradients(ga.log_prob, alpha_opt_.loss_scale());
    step(alpha_opt_, {&log_alpha_}, gt.grads);
    return {ga.loss, gt.loss};
  }

  /// target <- beta target + (1 - beta) critic, per critic parameter.
  void target_soft_update() {
    std::size_t k = 0;
    for (std::size_t i = 0; i < critics_.size(); ++i) {
      const auto src = critics_[i].parameters();
      const auto dst = targets_[i].parameters();
      for (std::size_t j = 0; j < src.size(); ++j, ++k) {
        if (kahan_momentum()) {
          kahan::kahan_momentum_update(target_buffers_[k], *src[j], qs_);
          *dst[j] = target_buffers_[k].readout(qs_);
        } else {
          kahan::naive_ema_update(*dst[j], *src[j], cfg_.beta(), qs_);
        }
      }
    }
  }

  /// Critic step, then actor/temperature and target updates on their
  /// schedules. `step` counts environment steps.
  UpdateStats update(const ReplayBuffer& replay, std::int64_t step_index, std::mt19937_64& sample_rng) {
    const Batch b = replay.sample(cfg_.batch_size, sample_rng);
    UpdateStats s;
    s.critic_loss = critic_update(b);
    if (step_index % cfg_.actor_update_freq == 0) {
      std::tie(s.actor_loss, s.alpha_loss) = actor_and_alpha_update(b);
      s.actor_updated = true;
    }
    if (step_index % cfg_.target_update_freq == 0) {
      target_soft_update();
      s.target_updated = true;
    }
    return s;
  }

  /// All trainable parameters (actor, then critics) flattened.
  std::vector<double> flat_parameters() const {
    std::vector<double> out;
    for (const Tensor* p : actor_.parameters()) out.insert(out.end(), p->values().begin(), p->values().end());
    for (const auto& c : critics_)
      for (const Tensor* p : c.parameters()) out.insert(out.end(), p->values().begin(), p->values().end());
    return out;
  }

 private:
  bool kahan_momentum() const { return cfg_.methods.get(Method::KahanMomentum); }

  optim::OptimizerSettings optimizer_settings(bool kahan_updates) const {
    optim::OptimizerSettings s;
    s.adam = cfg_.adam;
    s.hypot_buffer = cfg_.methods.get(Method::HAdam);
    s.kahan_updates = kahan_updates;
    s.scaling = cfg_.scaling_mode();
    s.init_grad_scale = cfg_.init_grad_scale;
    s.inc_grad_scale_freq = cfg_.inc_grad_scale_freq;
    s.storage = qs_;
    s.stable = stable_;
    return s;
  }

  void step(optim::Optimizer& opt, const std::vector<Tensor*>& params, const std::vector<Tensor>& grads) {
    for (const Tensor& g : grads) {
      if (!g.all_finite()) {
        ++nan_events_;
        break;
      }
    }
    opt.step(params, grads);
  }

  SacConfig cfg_;
  std::size_t obs_dim_;
  std::size_t act_dim_;
  Quantizer qc_;
  Quantizer qs_;
  stablemath::StableMathConfig stable_;
  std::mt19937_64 rng_;

  nn::Mlp actor_;
  std::vector<nn::Mlp> critics_;
  std::vector<nn::Mlp> targets_;
  std::vector<kahan::ScaledTargetBuffer> target_buffers_;
  Tensor log_alpha_;

  optim::Optimizer actor_opt_;
  optim::Optimizer critic_opt_;
  optim::Optimizer alpha_opt_;

  std::int64_t nan_events_ = 0;
  std::vector<Tensor> last_critic_grads_;
};

}  // namespace lpsac::sac
