#pragma once

#include <array>
#include <cmath>
#include <cstdint>
#include <string>
#include <vector>

#include "blackout/grid.hpp"
#include "blackout/rng.hpp"

namespace blackout {

class DqnError : public std::runtime_error {
public:
  using std::runtime_error::runtime_error;
};

struct NetworkDims {
  int kappa = 1;
  int features = 1;  // per-step feature width O
  int hidden1 = 1;
  int hidden2 = 1;
  int actions = 1;

  int input() const { return kappa * features; }
  bool operator==(const NetworkDims&) const = default;
};

// Dueling network: input -> tanh(hidden1) -> tanh(hidden2) -> {tanh advantage
// head, linear value head}; Q = A + V. Biases are stored as one-column matrices.
struct NetworkParams {
  enum Tensor { W1, B1, W2, B2, WA, BA, WV, BV, kCount };
  static constexpr std::array<const char*, kCount> kNames{"w1", "b1", "w2", "b2", "wa", "ba", "wv", "bv"};

  NetworkDims dims;
  std::array<Mat, kCount> t;

  static NetworkParams zeros(const NetworkDims& d) {
    NetworkParams p;
    p.dims = d;
    p.t[W1] = Mat::Zero(d.hidden1, d.input());
    p.t[B1] = Mat::Zero(d.hidden1, 1);
    p.t[W2] = Mat::Zero(d.hidden2, d.hidden1);
    p.t[B2] = Mat::Zero(d.hidden2, 1);
    p.t[WA] = Mat::Zero(d.actions, d.hidden2);
    p.t[BA] = Mat::Zero(d.actions, 1);
    p.t[WV] = Mat::Zero(1, d.hidden2);
    p.t[BV] = Mat::Zero(1, 1);
    return p;
  }

  // Glorot-uniform weights, zero biases.
  static NetworkParams init(const NetworkDims& d, Rng& rng) {
    NetworkParams p = zeros(d);
    for (int w : {W1, W2, WA, WV}) {
      Mat& m = p.t[w];
      const double r = std::sqrt(6.0 / static_cast<double>(m.rows() + m.cols()));
      for (Eigen::Index j = 0; j < m.cols(); ++j)
        for (Eigen::Index i = 0; i < m.rows(); ++i) m(i, j) = rng.uniform(-r, r);
    }
    return p;
  }

  std::size_t parameter_count() const {
    std::size_t n = 0;
    for (const auto& m : t) n += static_cast<std::size_t>(m.size());
    return n;
  }

  bool all_finite() const {
    for (const auto& m : t)
      if (!m.allFinite()) return false;
    return true;
  }
};

struct ForwardCache {
  Mat x, h1, h2, adv, q;
  Eigen::RowVectorXd v;
};

// Batched forward pass; columns of `x` are samples.
inline ForwardCache forward_batch(const NetworkParams& p, const Mat& x) {
  using T = NetworkParams;
  if (x.rows() != p.dims.input()) throw DqnError("forward: input dimension mismatch");
  if (!x.allFinite()) throw DqnError("forward: non-finite input");
  ForwardCache c;
  c.x = x;
  c.h1 = ((p.t[T::W1] * x).colwise() + p.t[T::B1].col(0)).array().tanh();
  c.h2 = ((p.t[T::W2] * c.h1).colwise() + p.t[T::B2].col(0)).array().tanh();
  c.adv = ((p.t[T::WA] * c.h2).colwise() + p.t[T::BA].col(0)).array().tanh();
  c.v = (p.t[T::WV] * c.h2).array() + p.t[T::BV](0, 0);
  c.q = c.adv.rowwise() + c.v;
  return c;
}

struct QOutput {
  Vec q;
  double v = 0.0;
  Vec adv;
};

inline QOutput forward(const NetworkParams& p, const Vec& s) {
  const ForwardCache c = forward_batch(p, s);
  return {c.q.col(0), c.v(0), c.adv.col(0)};
}

// Gradient of sum_i dq(:, i) . Q(:, i) with respect to every tensor.
inline std::array<Mat, NetworkParams::kCount> backward(const NetworkParams& p, const ForwardCache& c,
                                                       const Mat& dq) {
  using T = NetworkParams;
  std::array<Mat, T::kCount> g;
  const Mat dza = (dq.array() * (1.0 - c.adv.array().square())).matrix();
  const Eigen::RowVectorXd dv = dq.colwise().sum();
  g[T::WA] = dza * c.h2.transpose();
  g[T::BA] = dza.rowwise().sum();
  g[T::WV] = dv * c.h2.transpose();
  g[T::BV] = Mat::Constant(1, 1, dv.sum());
  const Mat dh2 = p.t[T::WA].transpose() * dza + p.t[T::WV].transpose() * dv;
  const Mat dz2 = (dh2.array() * (1.0 - c.h2.array().square())).matrix();
  g[T::W2] = dz2 * c.h1.transpose();
  g[T::B2] = dz2.rowwise().sum();
  const Mat dh1 = p.t[T::W2].transpose() * dz2;
  const Mat dz1 = (dh1.array() * (1.0 - c.h1.array().square())).matrix();
  g[T::W1] = dz1 * c.x.transpose();
  g[T::B1] = dz1.rowwise().sum();
  return g;
}

struct Batch {
  Mat states;       // input x B
  Mat next_states;  // input x B
  std::vector<int> actions;
  Vec rewards;
  std::vector<bool> ends;

  int size() const { return static_cast<int>(actions.size()); }
};

// t = r + gamma * (1 - end) * max_a Q_target(s', a); terminal rows never
// touch the target network.
inline Vec td_target(const Batch& batch, const NetworkParams& target, double gamma) {
  if (batch.size() == 0) throw DqnError("td_target: empty batch");
  Vec t = batch.rewards;
  std::vector<int> live;
  for (int i = 0; i < batch.size(); ++i)
    if (!batch.ends[i]) live.push_back(i);
  if (live.empty() || gamma == 0.0) return t;
  Mat x(batch.next_states.rows(), static_cast<Eigen::Index>(live.size()));
  for (std::size_t j = 0; j < live.size(); ++j) x.col(j) = batch.next_states.col(live[j]);
  const ForwardCache c = forward_batch(target, x);
  for (std::size_t j = 0; j < live.size(); ++j) t[live[j]] += gamma * c.q.col(j).maxCoeff();
  return t;
}

// Weighted squared TD loss sum_i w_i (t_i - Q(s_i, a_i))^2 and its gradient.
struct LossAndGrad {
  double loss = 0.0;
  Vec td;  // t_i - Q(s_i, a_i)
  std::array<Mat, NetworkParams::kCount> grad;
};

inline LossAndGrad td_loss(const NetworkParams& p, const Batch& batch, const Vec& targets, const Vec& weights) {
  const int b = batch.size();
  if (targets.size() != b || weights.size() != b) throw DqnError("update: batch/target/weight size mismatch");
  const ForwardCache c = forward_batch(p, batch.states);
  LossAndGrad out;
  out.td.resize(b);
  Mat dq = Mat::Zero(p.dims.actions, b);
  for (int i = 0; i < b; ++i) {
    const int a = batch.actions[i];
    if (a < 0 || a >= p.dims.actions) throw DqnError("update: action id out of range");
    out.td[i] = targets[i] - c.q(a, i);
    out.loss += weights[i] * out.td[i] * out.td[i];
    dq(a, i) = -2.0 * weights[i] * out.td[i];
  }
  out.grad = backward(p, c, dq);
  return out;
}

struct AdamConfig {
  double lr = 5e-4;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
  double decay = 0.05;     // inverse-time decay factor
  int decay_every = 1024;  // iterations per decay stage
};

struct OptimizerState {
  AdamConfig cfg;
  std::array<Mat, NetworkParams::kCount> m, v;
  std::int64_t step = 0;

  static OptimizerState for_params(const NetworkParams& p, AdamConfig cfg = {}) {
    OptimizerState s;
    s.cfg = cfg;
    for (int i = 0; i < NetworkParams::kCount; ++i) {
      s.m[i] = Mat::Zero(p.t[i].rows(), p.t[i].cols());
      s.v[i] = Mat::Zero(p.t[i].rows(), p.t[i].cols());
    }
    return s;
  }

  // alpha_n = alpha_0 / (1 + decay * floor(n / decay_every))
  double rate() const {
    return cfg.lr / (1.0 + cfg.decay * static_cast<double>(step / std::max(1, cfg.decay_every)));
  }
};

inline void adam_step(NetworkParams& p, OptimizerState& opt, const std::array<Mat, NetworkParams::kCount>& grad) {
  const double lr = opt.rate();
  ++opt.step;
  const double bc1 = 1.0 - std::pow(opt.cfg.beta1, static_cast<double>(opt.step));
  const double bc2 = 1.0 - std::pow(opt.cfg.beta2, static_cast<double>(opt.step));
  for (int i = 0; i < NetworkParams::kCount; ++i) {
    opt.m[i] = opt.cfg.beta1 * opt.m[i] + (1.0 - opt.cfg.beta1) * grad[i];
    opt.v[i] = opt.cfg.beta2 * opt.v[i] + (1.0 - opt.cfg.beta2) * grad[i].cwiseProduct(grad[i]);
    p.t[i].array() -= lr * (opt.m[i].array() / bc1) / ((opt.v[i].array() / bc2).sqrt() + opt.cfg.eps);
  }
}

struct UpdateResult {
  double loss = 0.0;
  Vec abs_td;  // |TD error| per sample, before the step
};

// One Adam step on the weighted TD loss. A non-finite gradient leaves
// params and optimizer untouched and throws.
inline UpdateResult sgd_update(NetworkParams& p, OptimizerState& opt, const Batch& batch, const Vec& targets,
                               const Vec& is_weights) {
  LossAndGrad lg = td_loss(p, batch, targets, is_weights);
  for (int i = 0; i < NetworkParams::kCount; ++i)
    if (!lg.grad[i].allFinite())
      throw DqnError(std::string("non-finite gradient in tensor ") + NetworkParams::kNames[i] + "; update rejected");
  adam_step(p, opt, lg.grad);
  return {lg.loss, lg.td.cwiseAbs()};
}

// theta_target <- tau * theta + (1 - tau) * theta_target
inline void soft_update(NetworkParams& target, const NetworkParams& online, double tau) {
  if (!(tau > 0.0 && tau <= 1.0)) throw DqnError("soft_update: tau must be in (0, 1]");
  for (int i = 0; i < NetworkParams::kCount; ++i) {
    if (tau == 1.0)
      target.t[i] = online.t[i];
    else
      target.t[i] = tau * online.t[i] + (1.0 - tau) * target.t[i];
  }
}

}  // namespace blackout
