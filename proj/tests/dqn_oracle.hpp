#pragma once

// Independent Q-network oracles: loop-level forward pass and loss, and a
// central-difference gradient check built on them.

#include <algorithm>
#include <cmath>
#include <vector>

#include "blackout/dqn.hpp"
#include "blackout/rng.hpp"

namespace testing_support {

using blackout::Batch;
using blackout::Mat;
using blackout::NetworkDims;
using blackout::NetworkParams;
using blackout::Rng;
using blackout::Vec;

using T = NetworkParams;

inline NetworkDims small_dims() { return {2, 3, 4, 5, 6}; }

inline NetworkParams random_params(const NetworkDims& d, std::uint64_t seed, double bias_scale = 0.3) {
  Rng rng(seed);
  NetworkParams p = NetworkParams::init(d, rng);
  for (int i : {T::B1, T::B2, T::BA, T::BV})
    for (Eigen::Index r = 0; r < p.t[i].rows(); ++r) p.t[i](r, 0) = rng.uniform(-bias_scale, bias_scale);
  return p;
}

inline Vec random_vec(Rng& rng, int n, double scale = 1.0) {
  Vec v(n);
  for (int i = 0; i < n; ++i) v[i] = rng.uniform(-scale, scale);
  return v;
}

// Loop-level forward pass kept apart from the Eigen implementation.
inline std::vector<double> naive_q(const NetworkParams& p, const Vec& s) {
  auto layer = [](const Mat& w, const Mat& b, const std::vector<double>& x, bool squash) {
    std::vector<double> out(static_cast<std::size_t>(w.rows()));
    for (Eigen::Index i = 0; i < w.rows(); ++i) {
      double z = b(i, 0);
      for (Eigen::Index j = 0; j < w.cols(); ++j) z += w(i, j) * x[static_cast<std::size_t>(j)];
      out[static_cast<std::size_t>(i)] = squash ? std::tanh(z) : z;
    }
    return out;
  };
  std::vector<double> x(s.data(), s.data() + s.size());
  const auto h1 = layer(p.t[T::W1], p.t[T::B1], x, true);
  const auto h2 = layer(p.t[T::W2], p.t[T::B2], h1, true);
  const auto adv = layer(p.t[T::WA], p.t[T::BA], h2, true);
  const double v = layer(p.t[T::WV], p.t[T::BV], h2, false)[0];
  std::vector<double> q(adv.size());
  for (std::size_t a = 0; a < adv.size(); ++a) q[a] = adv[a] + v;
  return q;
}

inline double naive_loss(const NetworkParams& p, const Batch& b, const Vec& targets, const Vec& w) {
  double loss = 0.0;
  for (int i = 0; i < b.size(); ++i) {
    const double td = targets[i] - naive_q(p, b.states.col(i))[static_cast<std::size_t>(b.actions[i])];
    loss += w[i] * td * td;
  }
  return loss;
}

inline Batch random_batch(Rng& rng, const NetworkDims& d, int n) {
  Batch b;
  b.states = Mat(d.input(), n);
  b.next_states = Mat(d.input(), n);
  for (int i = 0; i < n; ++i) {
    b.states.col(i) = random_vec(rng, d.input());
    b.next_states.col(i) = random_vec(rng, d.input());
    b.actions.push_back(static_cast<int>(rng.below(d.actions)));
    b.ends.push_back(rng.uniform() < 0.3);
  }
  b.rewards = random_vec(rng, n, 3.0);
  return b;
}

// Max over every coordinate of |analytic - numeric| / max(|analytic|, |numeric|, 1e-6).
inline double gradient_check(std::uint64_t seed, int batch_size) {
  Rng rng(seed * 7919 + 1);
  const NetworkDims d{2, 3, 4, 5, 6};
  NetworkParams p = random_params(d, seed);
  const Batch b = random_batch(rng, d, batch_size);
  const Vec targets = random_vec(rng, batch_size, 2.0);
  Vec w(batch_size);
  for (int i = 0; i < batch_size; ++i) w[i] = rng.uniform(0.2, 1.0);
  const auto analytic = td_loss(p, b, targets, w).grad;
  const double h = 1e-5;
  double worst = 0.0;
  for (int k = 0; k < T::kCount; ++k)
    for (Eigen::Index i = 0; i < p.t[k].size(); ++i) {
      double& x = p.t[k].data()[i];
      const double keep = x;
      x = keep + h;
      const double up = naive_loss(p, b, targets, w);
      x = keep - h;
      const double down = naive_loss(p, b, targets, w);
      x = keep;
      const double numeric = (up - down) / (2.0 * h);
      const double a = analytic[k].data()[i];
      worst = std::max(worst, std::abs(a - numeric) / std::max({std::abs(a), std::abs(numeric), 1e-6}));
    }
  return worst;
}

}  // namespace testing_support
