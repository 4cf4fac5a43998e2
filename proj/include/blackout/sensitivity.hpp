#pragma once

#include <cmath>
#include <limits>
#include <optional>
#include <string>

#include "blackout/grid.hpp"

namespace blackout {

class SensitivityError : public std::runtime_error {
public:
  using std::runtime_error::runtime_error;
};

// PTDF/LODF for one topology snapshot. Rows of disconnected lines and LODF
// columns of bridges/disconnected lines hold NaN and are flagged invalid.
struct SensitivitySet {
  std::uint64_t topology_tag = 0;
  LineStatus status;
  Mat ptdf;  // L x N
  Mat lodf;  // L x L, empty until compute_lodf
  std::vector<bool> bridge;
  bool has_lodf = false;

  bool line_valid(int l) const { return status[l]; }
  bool outage_valid(int k) const { return has_lodf && status[k] && !bridge[k]; }

  void require_topology(const LineStatus& s) const {
    if (topology_tag != blackout::topology_tag(s) || s != status)
      throw SensitivityError("sensitivity set does not match the current topology");
  }
};

inline constexpr double kBridgeTolerance = 1e-8;

// Flow change on every operational line per MW injected at each bus and
// withdrawn at the slack bus.
inline SensitivitySet compute_ptdf(const Grid& grid, const LineStatus& status) {
  const int n = grid.num_buses(), nl = grid.num_lines();
  if (static_cast<int>(status.size()) != nl) throw SensitivityError("status dimension mismatch");
  if (islands(grid, status).count() != 1) throw SensitivityError("island detected");

  const int slack = grid.slack_index();
  std::vector<int> pos(n, -1);
  int m = 0;
  for (int i = 0; i < n; ++i)
    if (i != slack) pos[i] = m++;

  Mat b = Mat::Zero(m, m);
  for (int l = 0; l < nl; ++l) {
    if (!status[l]) continue;
    const int f = pos[grid.from_index(l)], t = pos[grid.to_index(l)];
    const double y = 1.0 / grid.lines[l].reactance;
    if (f >= 0) b(f, f) += y;
    if (t >= 0) b(t, t) += y;
    if (f >= 0 && t >= 0) {
      b(f, t) -= y;
      b(t, f) -= y;
    }
  }
  // Reactance matrix: angle response to unit (per-unit) injections.
  Mat x = Mat::Zero(n, n);
  if (m > 0) {
    Eigen::LDLT<Mat> ldlt(b);
    if (ldlt.info() != Eigen::Success) throw SensitivityError("island detected");
    Mat xr = ldlt.solve(Mat::Identity(m, m));
    for (int i = 0; i < n; ++i)
      for (int j = 0; j < n; ++j)
        if (pos[i] >= 0 && pos[j] >= 0) x(i, j) = xr(pos[i], pos[j]);
  }

  SensitivitySet s;
  s.status = status;
  s.topology_tag = topology_tag(status);
  s.ptdf = Mat::Constant(nl, n, std::numeric_limits<double>::quiet_NaN());
  for (int l = 0; l < nl; ++l) {
    if (!status[l]) continue;
    const int f = grid.from_index(l), t = grid.to_index(l);
    s.ptdf.row(l) = (x.row(f) - x.row(t)) / grid.lines[l].reactance;
    s.ptdf(l, slack) = 0.0;
  }
  s.bridge.assign(nl, false);
  return s;
}

// lodf(l, k) = phi_l / (1 - phi_k) where phi is the response to a unit
// transfer from k's from_bus to its to_bus; lodf(k, k) = -1.
inline SensitivitySet compute_lodf(SensitivitySet sens, const Grid& grid, const LineStatus& status) {
  sens.require_topology(status);
  const int nl = grid.num_lines();
  const double nan = std::numeric_limits<double>::quiet_NaN();
  sens.lodf = Mat::Constant(nl, nl, nan);
  sens.bridge.assign(nl, false);
  for (int k = 0; k < nl; ++k) {
    if (!status[k]) continue;
    const int fk = grid.from_index(k), tk = grid.to_index(k);
    const double phi_k = sens.ptdf(k, fk) - sens.ptdf(k, tk);
    const double denom = 1.0 - phi_k;
    if (std::abs(denom) < kBridgeTolerance) {
      sens.bridge[k] = true;
      continue;
    }
    for (int l = 0; l < nl; ++l) {
      if (!status[l]) continue;
      sens.lodf(l, k) = l == k ? -1.0 : (sens.ptdf(l, fk) - sens.ptdf(l, tk)) / denom;
    }
  }
  sens.has_lodf = true;
  return sens;
}

inline SensitivitySet compute_sensitivities(const Grid& grid, const LineStatus& status) {
  return compute_lodf(compute_ptdf(grid, status), grid, status);
}

// Flows after a bus-level generation change (slack absorbs nothing for a
// balanced change; its column is zero anyway).
inline Vec predict_gen_adjust(const Vec& flows, const SensitivitySet& sens, const Vec& delta_g) {
  if (flows.size() != sens.ptdf.rows() || delta_g.size() != sens.ptdf.cols())
    throw SensitivityError("dimension mismatch");
  Vec out = flows;
  for (int l = 0; l < flows.size(); ++l)
    if (sens.line_valid(l)) out[l] += sens.ptdf.row(l).dot(delta_g);
  return out;
}

inline Vec predict_removal(const Vec& flows, const SensitivitySet& sens, int k) {
  if (!sens.has_lodf) throw SensitivityError("lodf not computed");
  if (k < 0 || k >= flows.size()) throw SensitivityError("line index out of range");
  if (!sens.status[k]) throw SensitivityError("line already disconnected");
  if (sens.bridge[k]) throw SensitivityError("bridge outage undefined");
  Vec out = flows;
  for (int l = 0; l < flows.size(); ++l)
    if (sens.line_valid(l) && l != k) out[l] += sens.lodf(l, k) * flows[k];
  out[k] = 0.0;
  return out;
}

// Reconnection effect by exact re-solve on the restored topology.
inline Vec predict_reconnect(const Grid& grid, const LineStatus& status, const Vec& injections, int k) {
  if (k < 0 || k >= grid.num_lines()) throw SensitivityError("line index out of range");
  if (status[k]) throw SensitivityError("line already connected");
  LineStatus restored = status;
  restored[k] = true;
  return solve_dc(grid, injections, restored).flows;
}

}  // namespace blackout
