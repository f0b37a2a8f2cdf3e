// SPDX-License-Identifier: Apache-2.0
//
// Training loop on the pendulum task: random seed steps, then one update per
// environment step, with periodic deterministic evaluation.

#pragma once

#include <cstdint>
#include <functional>
#include <optional>
#include <random>
#include <span>
#include <string>
#include <vector>

#include "lpsac/env.hpp"
#include "lpsac/nn.hpp"
#include "lpsac/replay.hpp"
#include "lpsac/sac.hpp"

namespace lpsac {

struct TrainConfig {
  sac::SacConfig sac;
  std::int64_t total_steps = 30000;
  std::int64_t eval_interval = 5000;
  int eval_episodes = 10;
  /// Seeds the evaluation start states, shared by every run so that returns
  /// of different configurations are paired.
  std::uint64_t eval_seed = 20240611;
  /// Record weight/Q snapshots every this many steps (0 disables).
  std::int64_t snapshot_interval = 0;
  /// Step at which the critic gradient histogram is captured (0 = midpoint).
  std::int64_t gradhist_step = 0;
  PendulumParams env;

  friend bool operator==(const TrainConfig&, const TrainConfig&) = default;
};

struct EvalPoint {
  std::int64_t step = 0;
  double eval_return = 0.0;
  double alpha = 0.0;
  double gamma_scale = 1.0;  ///< critic loss scale
  std::int64_t nan_events = 0;
};

/// Parameters and first-critic Q-values on the probe states at one step.
struct Snapshot {
  std::int64_t step = 0;
  std::vector<double> params;
  std::vector<double> q_probe;
};

struct MetricsLog {
  std::vector<EvalPoint> evals;
  std::vector<Snapshot> snapshots;
  bool crashed = false;
  std::int64_t crash_step = -1;
  std::string crash_reason;
  double final_return = 0.0;   ///< last evaluation (0 when crashed)
  double random_return = 0.0;  ///< uniform-random policy on the same start states
  nn::GradHistogram critic_grad_hist;
  std::int64_t gradhist_step = -1;

  /// Return above the random policy, 0 for a crashed run.
  double score() const { return crashed ? 0.0 : final_return - random_return; }
};

/// Fixed evaluation start states (theta, theta_dot).
inline std::vector<std::array<double, 2>> eval_start_states(std::uint64_t seed, int episodes) {
  std::mt19937_64 rng(seed);
  std::vector<std::array<double, 2>> out;
  PendulumEnv env;
  for (int i = 0; i < episodes; ++i) {
    env.reset(rng);
    out.push_back({env.angle(), env.angular_velocity()});
  }
  return out;
}

/// Probe states for Q comparisons, with the deterministic policy's action
/// supplied by the caller.
inline Tensor probe_states(std::size_t n = 64, std::uint64_t seed = 7) {
  std::mt19937_64 rng(seed);
  PendulumEnv env;
  Tensor s(n, PendulumEnv::kObsDim);
  for (std::size_t i = 0; i < n; ++i) {
    const auto o = env.reset(rng);
    for (std::size_t c = 0; c < o.size(); ++c) s(i, c) = o[c];
  }
  return s;
}

/// Mean undiscounted return of `policy` over episodes started from `starts`,
/// all episodes stepped together as one batch. `policy` maps a (n x 3)
/// observation batch to (n x 1) actions.
inline double evaluate(const std::function<Tensor(const Tensor&)>& policy,
                       const std::vector<std::array<double, 2>>& starts, const PendulumParams& params) {
  const std::size_t n = starts.size();
  std::vector<PendulumEnv> envs(n, PendulumEnv(params));
  Tensor obs(n, PendulumEnv::kObsDim);
  for (std::size_t i = 0; i < n; ++i) {
    const auto o = envs[i].reset_to(starts[i][0], starts[i][1]);
    for (std::size_t c = 0; c < o.size(); ++c) obs(i, c) = o[c];
  }
  double total = 0.0;
  for (int t = 0; t < params.episode_length; ++t) {
    const Tensor a = policy(obs);
    for (std::size_t i = 0; i < n; ++i) {
      const StepResult r = envs[i].step(a(i, 0));
      total += r.reward;
      for (std::size_t c = 0; c < r.obs.size(); ++c) obs(i, c) = r.obs[c];
    }
  }
  return total / static_cast<double>(n);
}

inline double random_policy_return(const std::vector<std::array<double, 2>>& starts,
                                   const PendulumParams& params, std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  std::uniform_real_distribution<double> u(-1.0, 1.0);
  return evaluate(
      [&](const Tensor& obs) {
        Tensor a(obs.rows(), 1);
        for (double& v : a.values()) v = u(rng);
        return a;
      },
      starts, params);
}

struct TrainHooks {
  /// Called after every evaluation.
  std::function<void(const EvalPoint&)> on_eval;
  /// Called once when the gradient histogram is captured, with the agent and
  /// the replay buffer at that moment.
  std::function<void(const sac::SacAgent&, const ReplayBuffer&, std::int64_t)> on_midpoint;
};

/// Trains one agent. Numeric failures are recorded in the log, never thrown.
inline MetricsLog train(const TrainConfig& cfg, std::uint64_t seed, const TrainHooks& hooks = {}) {
  MetricsLog log;
  const auto starts = eval_start_states(cfg.eval_seed, cfg.eval_episodes);
  log.random_return = random_policy_return(starts, cfg.env, cfg.eval_seed + 1);
  const Tensor probes = probe_states();

  sac::SacAgent agent(cfg.sac, PendulumEnv::kObsDim, PendulumEnv::kActDim, seed);
  ReplayBuffer replay(cfg.sac.replay_capacity, PendulumEnv::kObsDim, PendulumEnv::kActDim);
  std::mt19937_64 env_rng(seed * 0x9e3779b97f4a7c15ULL + 1);
  std::mt19937_64 sample_rng(seed * 0x9e3779b97f4a7c15ULL + 2);
  std::uniform_real_distribution<double> uniform_action(-1.0, 1.0);
  const std::int64_t hist_step = cfg.gradhist_step > 0 ? cfg.gradhist_step : cfg.total_steps / 2;

  auto snapshot = [&](std::int64_t step) {
    Snapshot s;
    s.step = step;
    s.params = agent.flat_parameters();
    const Tensor a = agent.act(probes, true);
    const Tensor q = agent.q_values(probes, a);
    s.q_probe.assign(q.values().begin(), q.values().end());
    log.snapshots.push_back(std::move(s));
  };

  auto eval = [&](std::int64_t step) {
    EvalPoint p;
    p.step = step;
    p.eval_return = evaluate([&](const Tensor& obs) { return agent.act(obs, true); }, starts, cfg.env);
    p.alpha = agent.alpha();
    p.gamma_scale = agent.critic_optimizer().loss_scale();
    p.nan_events = agent.nan_events();
    log.evals.push_back(p);
    log.final_return = p.eval_return;
    if (hooks.on_eval) hooks.on_eval(p);
  };

  PendulumEnv env(cfg.env);
  auto obs = env.reset(env_rng);
  std::int64_t step = 0;
  try {
    if (cfg.snapshot_interval > 0) snapshot(0);
    for (step = 1; step <= cfg.total_steps; ++step) {
      double action;
      if (step <= static_cast<std::int64_t>(cfg.sac.seed_steps)) {
        action = uniform_action(env_rng);
      } else {
        action = agent.act(Tensor(1, obs.size(), std::vector<double>(obs.begin(), obs.end())), false)[0];
      }
      const StepResult r = env.step(action);
      replay.add(obs, std::span<const double>(&action, 1), r.reward, r.obs, r.done);
      obs = r.truncated || r.done ? env.reset(env_rng) : r.obs;

      if (step >= static_cast<std::int64_t>(cfg.sac.seed_steps)) {
        agent.update(replay, step, sample_rng);
        if (step == hist_step) {
          log.critic_grad_hist = nn::grad_histogram(std::span<const Tensor>(agent.last_critic_grads()));
          log.gradhist_step = step;
          if (hooks.on_midpoint) hooks.on_midpoint(agent, replay, step);
        }
      }
      if (cfg.snapshot_interval > 0 && step % cfg.snapshot_interval == 0) snapshot(step);
      if (step % cfg.eval_interval == 0 || step == cfg.total_steps) eval(step);
    }
  } catch (const NonFiniteAction& e) {
    log.crashed = true;
    log.crash_step = step;
    log.crash_reason = e.what();
    log.final_return = 0.0;
  }
  return log;
}

}  // namespace lpsac
