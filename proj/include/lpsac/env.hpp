// SPDX-License-Identifier: Apache-2.0
//
// Inverted-pendulum swing-up task. The dynamics are simulated in double
// precision; only the agent runs in the emulated format.

#pragma once

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdint>
#include <numbers>
#include <random>
#include <stdexcept>
#include <string>

namespace lpsac {

/// An action component that is NaN or infinite.
class NonFiniteAction : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

class ActionOutOfRange : public std::out_of_range {
 public:
  using std::out_of_range::out_of_range;
};

struct PendulumParams {
  double gravity = 10.0;
  double mass = 1.0;
  double length = 1.0;
  double dt = 0.05;
  double max_speed = 8.0;
  double max_torque = 2.0;  ///< torque applied for action +-1
  int episode_length = 200;

  friend bool operator==(const PendulumParams&, const PendulumParams&) = default;
};

struct StepResult {
  std::array<double, 3> obs;
  double reward;
  bool done;       ///< terminal state (never: the task only has a time limit)
  bool truncated;  ///< episode length reached
};

class PendulumEnv {
 public:
  static constexpr std::size_t kObsDim = 3;
  static constexpr std::size_t kActDim = 1;

  explicit PendulumEnv(PendulumParams p = {}) : p_(p) {}

  const PendulumParams& params() const { return p_; }
  double angle() const { return theta_; }
  double angular_velocity() const { return theta_dot_; }
  int elapsed() const { return t_; }

  /// theta ~ U(-pi, pi), theta_dot ~ U(-1, 1).
  std::array<double, 3> reset(std::mt19937_64& rng) {
    std::uniform_real_distribution<double> th(-std::numbers::pi, std::numbers::pi);
    std::uniform_real_distribution<double> thd(-1.0, 1.0);
    const double a = th(rng);
    const double b = thd(rng);
    return reset_to(a, b);
  }

  std::array<double, 3> reset_to(double theta, double theta_dot) {
    theta_ = theta;
    theta_dot_ = theta_dot;
    t_ = 0;
    return observation();
  }

  /// Advances one step. `action` must lie in [-1, 1]; it is never clipped.
  StepResult step(double action) {
    if (!std::isfinite(action)) throw NonFiniteAction("non-finite action");
    if (action < -1.0 || action > 1.0) {
      throw ActionOutOfRange("action " + std::to_string(action) + " outside [-1, 1]");
    }
    const double u = p_.max_torque * action;
    const double th = wrap_angle(theta_);
    const double cost = th * th + 0.1 * theta_dot_ * theta_dot_ + 0.001 * u * u;

    const double g = p_.gravity, m = p_.mass, l = p_.length;
    double thd = theta_dot_ + (3.0 * g / (2.0 * l) * std::sin(theta_) + 3.0 / (m * l * l) * u) * p_.dt;
    thd = std::clamp(thd, -p_.max_speed, p_.max_speed);
    theta_ += thd * p_.dt;
    theta_dot_ = thd;
    ++t_;
    return {observation(), -cost, false, t_ >= p_.episode_length};
  }

  std::array<double, 3> observation() const {
    return {std::cos(theta_), std::sin(theta_), theta_dot_ / p_.max_speed};
  }

  /// Maps an angle to [-pi, pi).
  static double wrap_angle(double x) {
    const double two_pi = 2.0 * std::numbers::pi;
    return x - two_pi * std::floor((x + std::numbers::pi) / two_pi);
  }

 private:
  PendulumParams p_;
  double theta_ = 0.0;
  double theta_dot_ = 0.0;
  int t_ = 0;
};

}  // namespace lpsac
