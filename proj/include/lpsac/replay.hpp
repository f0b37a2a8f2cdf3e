// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <algorithm>
#include <cstddef>
#include <random>
#include <span>
#include <stdexcept>
#include <vector>

#include "lpsac/tensor.hpp"

namespace lpsac {

struct Batch {
  Tensor obs;       ///< (B x obs_dim)
  Tensor action;    ///< (B x act_dim)
  Tensor reward;    ///< (B x 1)
  Tensor next_obs;  ///< (B x obs_dim)
  Tensor not_done;  ///< (B x 1), 0 where the transition was terminal
};

/// Fixed-capacity ring of transitions, stored in double precision and sampled
/// uniformly with replacement.
class ReplayBuffer {
 public:
  ReplayBuffer(std::size_t capacity, std::size_t obs_dim, std::size_t act_dim)
      : capacity_(capacity), obs_dim_(obs_dim), act_dim_(act_dim) {
    if (capacity == 0) throw std::invalid_argument("replay capacity must be positive");
    obs_.resize(capacity * obs_dim);
    next_obs_.resize(capacity * obs_dim);
    act_.resize(capacity * act_dim);
    rew_.resize(capacity);
    not_done_.resize(capacity);
  }

  std::size_t size() const { return size_; }
  std::size_t capacity() const { return capacity_; }
  std::size_t obs_dim() const { return obs_dim_; }
  std::size_t act_dim() const { return act_dim_; }

  void add(std::span<const double> obs, std::span<const double> action, double reward,
           std::span<const double> next_obs, bool done) {
    if (obs.size() != obs_dim_ || next_obs.size() != obs_dim_ || action.size() != act_dim_) {
      throw ShapeMismatch("ReplayBuffer::add: transition dimensions");
    }
    const std::size_t i = next_;
    std::copy(obs.begin(), obs.end(), obs_.begin() + i * obs_dim_);
    std::copy(next_obs.begin(), next_obs.end(), next_obs_.begin() + i * obs_dim_);
    std::copy(action.begin(), action.end(), act_.begin() + i * act_dim_);
    rew_[i] = reward;
    not_done_[i] = done ? 0.0 : 1.0;
    next_ = (next_ + 1) % capacity_;
    if (size_ < capacity_) ++size_;
  }

  /// Uniform indices in [0, size()).
  std::vector<std::size_t> sample_indices(std::size_t n, std::mt19937_64& rng) const {
    if (size_ == 0) throw std::logic_error("sampling from an empty replay buffer");
    std::uniform_int_distribution<std::size_t> dist(0, size_ - 1);
    std::vector<std::size_t> idx(n);
    for (auto& i : idx) i = dist(rng);
    return idx;
  }

  Batch gather(const std::vector<std::size_t>& idx) const {
    const std::size_t n = idx.size();
    Batch b{Tensor(n, obs_dim_), Tensor(n, act_dim_), Tensor(n, 1), Tensor(n, obs_dim_), Tensor(n, 1)};
    for (std::size_t r = 0; r < n; ++r) {
      const std::size_t i = idx[r];
      for (std::size_t c = 0; c < obs_dim_; ++c) {
        b.obs(r, c) = obs_[i * obs_dim_ + c];
        b.next_obs(r, c) = next_obs_[i * obs_dim_ + c];
      }
      for (std::size_t c = 0; c < act_dim_; ++c) b.action(r, c) = act_[i * act_dim_ + c];
      b.reward[r] = rew_[i];
      b.not_done[r] = not_done_[i];
    }
    return b;
  }

  Batch sample(std::size_t n, std::mt19937_64& rng) const { return gather(sample_indices(n, rng)); }

 private:
  std::size_t capacity_;
  std::size_t obs_dim_;
  std::size_t act_dim_;
  std::size_t size_ = 0;
  std::size_t next_ = 0;
  std::vector<double> obs_, next_obs_, act_, rew_, not_done_;
};

}  // namespace lpsac
