#pragma once

// Fixtures and reference oracles shared by the test binaries. The oracles
// here are written independently of the library: a full-Laplacian DC solve
// through FullPivLU, Tarjan bridge finding, brute-force enumerations.

#include <Eigen/Dense>

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <functional>
#include <set>
#include <string>
#include <vector>

#include "blackout/actions.hpp"
#include "blackout/env.hpp"
#include "blackout/grid.hpp"
#include "blackout/rng.hpp"
#include "blackout/scenario.hpp"

namespace testing_support {

using blackout::Grid;
using blackout::LineStatus;
using blackout::Mat;
using blackout::Vec;

inline std::string data_path(const std::string& rel) { return std::string(BLACKOUT_DATA_DIR) + "/" + rel; }

inline Grid make_grid(int n, const std::vector<std::tuple<int, int, double, double>>& lines, double base = 1.0,
                      int slack = 1) {
  Grid g;
  g.base_mva = base;
  g.slack_bus = slack;
  for (int i = 1; i <= n; ++i) g.buses.push_back(i);
  int id = 1;
  for (const auto& [f, t, x, fmax] : lines) g.lines.push_back({id++, f, t, x, fmax, 1.0});
  // One unit and one load per bus so any injection vector is representable.
  for (int i = 1; i <= n; ++i) {
    g.generators.push_back({i, i, 0.0, 1e6, 1.0, 1.0, true});
    g.loads.push_back({i, i});
  }
  g.finalize();
  return g;
}

// Buses 1 (slack), 2, 3; lines 1-2, 2-3, 1-3, x = 1, base 1.
inline Grid unit_triangle(double l12 = 10.0, double l23 = 10.0, double l13 = 10.0) {
  return make_grid(3, {{1, 2, 1.0, l12}, {2, 3, 1.0, l23}, {1, 3, 1.0, l13}});
}

// Unit triangle with generators at buses 1 (slack), 2, 3 and a load at bus 3.
inline Grid unit_triangle_with_units(double l12, double l23, double l13) {
  Grid g;
  g.base_mva = 1.0;
  g.slack_bus = 1;
  g.buses = {1, 2, 3};
  g.lines = {{1, 1, 2, 1.0, l12, 1.0}, {2, 2, 3, 1.0, l23, 1.0}, {3, 1, 3, 1.0, l13, 1.0}};
  g.generators = {{1, 1, 0.0, 5.0, 1.0, 1.0, true}, {2, 2, 0.0, 5.0, 0.5, 2.0, true}, {3, 3, 0.0, 5.0, 0.5, 3.0, true}};
  g.loads = {{1, 3}};
  g.finalize();
  return g;
}

// Reference DC flows: full nodal Laplacian, slack row replaced by the
// angle reference, solved with full-pivot LU. Only valid for connected
// operational topologies.
inline Vec oracle_flows(const Grid& g, const Vec& injections, const LineStatus& status) {
  const int n = g.num_buses();
  Mat b = Mat::Zero(n, n);
  for (int l = 0; l < g.num_lines(); ++l) {
    if (!status[l]) continue;
    const int f = g.bus_index(g.lines[l].from_bus), t = g.bus_index(g.lines[l].to_bus);
    const double y = 1.0 / g.lines[l].reactance;
    b(f, f) += y;
    b(t, t) += y;
    b(f, t) -= y;
    b(t, f) -= y;
  }
  Vec rhs = injections / g.base_mva;
  const int s = g.bus_index(g.slack_bus);
  b.row(s).setZero();
  b(s, s) = 1.0;
  rhs[s] = 0.0;
  const Vec theta = b.fullPivLu().solve(rhs);
  Vec flows = Vec::Zero(g.num_lines());
  for (int l = 0; l < g.num_lines(); ++l) {
    if (!status[l]) continue;
    const int f = g.bus_index(g.lines[l].from_bus), t = g.bus_index(g.lines[l].to_bus);
    flows[l] = g.base_mva * (theta[f] - theta[t]) / g.lines[l].reactance;
  }
  return flows;
}

// Connected components by depth-first search.
inline int oracle_component_count(const Grid& g, const LineStatus& status) {
  const int n = g.num_buses();
  std::vector<std::vector<int>> adj(n);
  for (int l = 0; l < g.num_lines(); ++l)
    if (status[l]) {
      const int f = g.bus_index(g.lines[l].from_bus), t = g.bus_index(g.lines[l].to_bus);
      adj[f].push_back(t);
      adj[t].push_back(f);
    }
  std::vector<bool> seen(n, false);
  int count = 0;
  for (int s = 0; s < n; ++s) {
    if (seen[s]) continue;
    ++count;
    std::vector<int> stack{s};
    seen[s] = true;
    while (!stack.empty()) {
      const int u = stack.back();
      stack.pop_back();
      for (int v : adj[u])
        if (!seen[v]) {
          seen[v] = true;
          stack.push_back(v);
        }
    }
  }
  return count;
}

// Tarjan low-link bridges over the operational multigraph (parallel lines
// are never bridges).
inline std::vector<bool> oracle_bridges(const Grid& g, const LineStatus& status) {
  const int n = g.num_buses();
  std::vector<std::vector<std::pair<int, int>>> adj(n);  // (neighbor, line)
  for (int l = 0; l < g.num_lines(); ++l)
    if (status[l]) {
      const int f = g.bus_index(g.lines[l].from_bus), t = g.bus_index(g.lines[l].to_bus);
      adj[f].push_back({t, l});
      adj[t].push_back({f, l});
    }
  std::vector<int> disc(n, -1), low(n, 0);
  std::vector<bool> bridge(g.num_lines(), false);
  int timer = 0;
  std::function<void(int, int)> dfs = [&](int u, int via) {
    disc[u] = low[u] = timer++;
    for (auto [v, l] : adj[u]) {
      if (l == via) continue;
      if (disc[v] < 0) {
        dfs(v, l);
        low[u] = std::min(low[u], low[v]);
        if (low[v] > disc[u]) bridge[l] = true;
      } else {
        low[u] = std::min(low[u], disc[v]);
      }
    }
  };
  for (int s = 0; s < n; ++s)
    if (disc[s] < 0) dfs(s, -1);
  return bridge;
}

// Random connected grid: random spanning tree plus extra lines (parallel
// lines allowed), N buses, slack bus 1.
inline Grid random_grid(blackout::Rng& rng, int n, int extra) {
  std::vector<std::tuple<int, int, double, double>> lines;
  for (int i = 2; i <= n; ++i) {
    const int parent = 1 + static_cast<int>(rng.below(i - 1));
    lines.push_back({parent, i, rng.uniform(0.05, 1.0), rng.uniform(0.5, 3.0)});
  }
  for (int e = 0; e < extra; ++e) {
    const int a = 1 + static_cast<int>(rng.below(n));
    int b = 1 + static_cast<int>(rng.below(n));
    if (a == b) b = a % n + 1;
    lines.push_back({a, b, rng.uniform(0.05, 1.0), rng.uniform(0.5, 3.0)});
  }
  return make_grid(n, lines, 1.0 + 99.0 * rng.uniform());
}

// Balanced injections: random at every non-slack bus, slack closes the sum.
inline Vec random_injections(blackout::Rng& rng, const Grid& g) {
  Vec p(g.num_buses());
  for (int i = 0; i < g.num_buses(); ++i) p[i] = rng.uniform(-1.0, 1.0);
  const int s = g.bus_index(g.slack_bus);
  p[s] = 0.0;
  p[s] = -p.sum();
  return p;
}

inline double rel_err(double a, double b) { return std::abs(a - b) / std::max(1.0, std::max(std::abs(a), std::abs(b))); }

inline double max_rel_err(const Vec& a, const Vec& b) {
  double m = 0.0;
  for (int i = 0; i < a.size(); ++i) m = std::max(m, rel_err(a[i], b[i]));
  return m;
}

// Brute-force count of zero-sum {-1,0,+1}^k patterns, all-zero excluded.
inline std::int64_t brute_force_combos(int k) {
  std::int64_t total = 1;
  for (int i = 0; i < k; ++i) total *= 3;
  std::int64_t count = 0;
  for (std::int64_t code = 0; code < total; ++code) {
    std::int64_t c = code;
    int sum = 0, nonzero = 0;
    for (int i = 0; i < k; ++i) {
      const int v = static_cast<int>(c % 3) - 1;
      c /= 3;
      sum += v;
      nonzero += v != 0;
    }
    if (sum == 0 && nonzero > 0) ++count;
  }
  return count;
}

// Reference effective set: exhaustive re-solves of every legal removal
// (bridges excluded by connectivity) plus all legal reconnections.
inline std::set<int> oracle_effective_set(const Grid& g, const blackout::SystemState& s,
                                          const blackout::ActionCatalog& cat) {
  std::set<int> out;
  const int nl = g.num_lines();
  int lmax = -1;
  for (int l = 0; l < nl; ++l)
    if (s.line_status[l] && (lmax < 0 || s.risk_margin[l] > s.risk_margin[lmax])) lmax = l;
  const Vec inj = blackout::bus_injections(g, s.gen_output, s.load_demand);
  const int base_islands = oracle_component_count(g, s.line_status);
  // Removals are only screened on a connected topology.
  if (lmax >= 0 && base_islands == 1) {
    for (int k = 0; k < nl; ++k) {
      if (k == lmax || !s.line_status[k] || s.cooldown[k] != 0) continue;
      LineStatus st = s.line_status;
      st[k] = false;
      if (oracle_component_count(g, st) != base_islands) continue;
      const Vec f = oracle_flows(g, inj, st);
      if (std::abs(f[lmax]) > g.lines[lmax].flow_limit) continue;
      bool overload = false;
      for (int l = 0; l < nl; ++l)
        if (st[l] && l != lmax && std::abs(f[l]) > g.lines[l].flow_limit) overload = true;
      if (!overload) out.insert(cat.remove_id(k));
    }
  }
  for (int k = 0; k < nl; ++k)
    if (!s.line_status[k] && s.cooldown[k] == 0) out.insert(cat.reconnect_id(k));
  return out;
}

// State for the given bus injections on a make_grid() network: positive
// injections on the bus generator, negative ones on the bus load.
inline blackout::SystemState state_from_injections(const Grid& g, const Vec& inj, const LineStatus& status) {
  blackout::SystemState s;
  s.step = 1;
  s.gen_output = inj.cwiseMax(0.0);
  s.load_demand = (-inj).cwiseMax(0.0);
  s.line_status = status;
  s.line_flow = oracle_flows(g, inj, status);
  s.risk_margin = blackout::risk_margins(g, s.line_flow, status);
  s.overflow_steps.assign(g.num_lines(), 0);
  s.cooldown.assign(g.num_lines(), 0);
  return s;
}

// The scripted overload grid and scenario shipped in data/.
inline Grid scripted_grid() { return blackout::load_grid(data_path("triangle.json")); }

inline blackout::Scenario scripted_scenario(const Grid& g) {
  return blackout::load_scenario(g, data_path("scenarios/scripted/overload_ramp.csv"));
}

inline blackout::EnvConfig scripted_config() {
  blackout::EnvConfig c;
  c.kappa = 2;
  c.horizon = 30;
  return c;
}

inline std::filesystem::path temp_dir(const std::string& name) {
  auto p = std::filesystem::temp_directory_path() / ("blackout_test_" + name);
  std::filesystem::remove_all(p);
  std::filesystem::create_directories(p);
  return p;
}

}  // namespace testing_support
