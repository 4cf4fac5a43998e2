#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <vector>

#include "blackout/dqn.hpp"
#include "blackout/rng.hpp"

namespace blackout {

class ReplayError : public std::runtime_error {
public:
  using std::runtime_error::runtime_error;
};

struct Transition {
  Vec state;
  int action = 0;
  double reward = 0.0;
  Vec next_state;
  bool end = false;
};

// Binary sum tree over a power-of-two number of leaves. Internal nodes are
// recomputed from their children, never accumulated by deltas.
class SumTree {
public:
  explicit SumTree(std::size_t capacity = 1) {
    leaves_ = 1;
    while (leaves_ < capacity) leaves_ <<= 1;
    node_.assign(2 * leaves_, 0.0);
  }

  std::size_t capacity() const { return leaves_; }
  double total() const { return node_[1]; }
  double leaf(std::size_t i) const { return node_[leaves_ + i]; }

  void set(std::size_t i, double p) {
    if (i >= leaves_) throw ReplayError("sum tree index out of range");
    if (!(p >= 0.0) || !std::isfinite(p)) throw ReplayError("priority must be finite and >= 0");
    std::size_t n = leaves_ + i;
    node_[n] = p;
    for (n >>= 1; n >= 1; n >>= 1) node_[n] = node_[2 * n] + node_[2 * n + 1];
  }

  // Leaf whose cumulative interval contains u, u in [0, total()).
  std::size_t find(double u) const {
    std::size_t n = 1;
    while (n < leaves_) {
      const double left = node_[2 * n];
      if (u < left || node_[2 * n + 1] <= 0.0) {
        n = 2 * n;
      } else {
        u -= left;
        n = 2 * n + 1;
      }
    }
    return n - leaves_;
  }

private:
  std::size_t leaves_;
  std::vector<double> node_;
};

struct ReplayConfig {
  std::size_t capacity = std::size_t{1} << 17;
  double alpha = 0.6;
  double beta0 = 0.4;  // annealed linearly to beta1 over training
  double beta1 = 1.0;
  double eps = 1e-3;   // added to |TD| so no priority reaches zero
  bool importance_weights = true;
};

struct SampledBatch {
  std::vector<std::size_t> indices;
  Vec weights;
  Batch batch;
};

// Ring buffer with proportional prioritized sampling. Stored tree values are
// priority^alpha; new transitions receive the current maximum priority.
class ReplayBuffer {
public:
  explicit ReplayBuffer(ReplayConfig cfg = {}) : cfg_(cfg), tree_(cfg.capacity) {
    if (cfg_.capacity < 1) throw ReplayError("replay capacity must be >= 1");
    if (cfg_.alpha < 0.0) throw ReplayError("alpha must be >= 0");
  }

  const ReplayConfig& config() const { return cfg_; }
  std::size_t size() const { return data_.size(); }
  std::size_t capacity() const { return cfg_.capacity; }
  double max_priority() const { return max_priority_; }
  double total() const { return tree_.total(); }
  const Transition& at(std::size_t i) const { return data_.at(i); }
  double priority(std::size_t i) const { return std::pow(tree_.leaf(i), 1.0 / std::max(cfg_.alpha, 1e-300)); }
  double sampling_weight(std::size_t i) const { return tree_.leaf(i); }

  std::size_t push(Transition t) {
    std::size_t slot = next_;
    if (data_.size() < cfg_.capacity)
      data_.push_back(std::move(t));
    else
      data_[slot] = std::move(t);
    next_ = (next_ + 1) % cfg_.capacity;
    tree_.set(slot, std::pow(max_priority_, cfg_.alpha));
    return slot;
  }

  void set_priority(std::size_t i, double p) {
    if (i >= data_.size()) throw ReplayError("priority index out of range");
    if (!(p > 0.0) || !std::isfinite(p)) throw ReplayError("priority must be finite and > 0");
    tree_.set(i, std::pow(p, cfg_.alpha));
    max_priority_ = std::max(max_priority_, p);
  }

  void update_priorities(const std::vector<std::size_t>& idx, const Vec& abs_td) {
    for (std::size_t i = 0; i < idx.size(); ++i) set_priority(idx[i], std::abs(abs_td[static_cast<Eigen::Index>(i)]) + cfg_.eps);
  }

  std::size_t sample_index(Rng& rng) const {
    const double u = rng.uniform() * tree_.total();
    return std::min(tree_.find(u), data_.size() - 1);
  }

  // B independent draws with probability P(i) = p_i^alpha / sum p^alpha.
  // Importance weights (N P(i))^-beta, normalized by the batch maximum.
  SampledBatch sample(int b, double beta, Rng& rng) const {
    if (b < 1) throw ReplayError("batch size must be >= 1");
    if (data_.size() < static_cast<std::size_t>(b)) throw ReplayError("underfilled buffer");
    const Eigen::Index dim = data_.front().state.size();
    SampledBatch out;
    out.indices.resize(b);
    out.weights = Vec::Ones(b);
    out.batch.states.resize(dim, b);
    out.batch.next_states.resize(dim, b);
    out.batch.actions.resize(b);
    out.batch.rewards.resize(b);
    out.batch.ends.resize(b);
    const double total = tree_.total();
    const double n = static_cast<double>(data_.size());
    for (int k = 0; k < b; ++k) {
      const std::size_t i = sample_index(rng);
      out.indices[k] = i;
      const Transition& t = data_[i];
      out.batch.states.col(k) = t.state;
      out.batch.next_states.col(k) = t.next_state;
      out.batch.actions[k] = t.action;
      out.batch.rewards[k] = t.reward;
      out.batch.ends[k] = t.end;
      if (cfg_.importance_weights) out.weights[k] = std::pow(n * tree_.leaf(i) / total, -beta);
    }
    if (cfg_.importance_weights) out.weights /= out.weights.maxCoeff();
    return out;
  }

private:
  ReplayConfig cfg_;
  SumTree tree_;
  std::vector<Transition> data_;
  std::size_t next_ = 0;
  double max_priority_ = 1.0;
};

}  // namespace blackout
