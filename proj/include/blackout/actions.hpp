#pragma once

#include <algorithm>
#include <cstdint>
#include <limits>
#include <optional>
#include <ostream>
#include <sstream>
#include <string>
#include <vector>

#include "blackout/grid.hpp"
#include "blackout/sensitivity.hpp"

namespace blackout {

class ActionError : public std::runtime_error {
public:
  using std::runtime_error::runtime_error;
};

enum class ActionKind { DoNothing, Remove, Reconnect, Redispatch };

inline const char* to_string(ActionKind k) {
  switch (k) {
    case ActionKind::DoNothing: return "do_nothing";
    case ActionKind::Remove: return "remove";
    case ActionKind::Reconnect: return "reconnect";
    case ActionKind::Redispatch: return "redispatch";
  }
  return "?";
}

struct GenAdjust {
  int gen = 0;  // generator index
  double delta = 0.0;
};

struct Action {
  ActionKind kind = ActionKind::DoNothing;
  int line = -1;   // line index for Remove/Reconnect
  int combo = -1;  // combo index for Redispatch
  std::vector<GenAdjust> adjust;

  bool is_line_switch() const { return kind == ActionKind::Remove || kind == ActionKind::Reconnect; }
};

// Zero-sum sign patterns over k generators, entries in {-1, 0, +1}, in
// lexicographic order with -1 < 0 < +1, all-zero excluded.
inline std::vector<std::vector<int>> zero_sum_patterns(int k) {
  std::vector<std::vector<int>> out;
  std::vector<int> cur(k, -1);
  while (true) {
    int sum = 0;
    bool zero = true;
    for (int v : cur) {
      sum += v;
      zero = zero && v == 0;
    }
    if (sum == 0 && !zero) out.push_back(cur);
    int i = k - 1;
    while (i >= 0 && cur[i] == 1) cur[i--] = -1;
    if (i < 0) break;
    ++cur[i];
  }
  return out;
}

// Number of zero-sum patterns (all-zero excluded), by dynamic programming
// over the running sum.
inline std::int64_t count_zero_sum_combos(int k) {
  std::vector<std::int64_t> ways(2 * k + 1, 0);
  ways[k] = 1;
  for (int i = 0; i < k; ++i) {
    std::vector<std::int64_t> next(2 * k + 1, 0);
    for (int s = 0; s <= 2 * k; ++s) {
      if (!ways[s]) continue;
      for (int d = -1; d <= 1; ++d)
        if (s + d >= 0 && s + d <= 2 * k) next[s + d] += ways[s];
    }
    ways.swap(next);
  }
  return ways[k] - 1;
}

inline std::vector<Action> enumerate_line_actions(const Grid& grid) {
  std::vector<Action> out;
  out.push_back({});
  for (int l = 0; l < grid.num_lines(); ++l) out.push_back({ActionKind::Remove, l, -1, {}});
  for (int l = 0; l < grid.num_lines(); ++l) out.push_back({ActionKind::Reconnect, l, -1, {}});
  return out;
}

// Redispatch actions over the given generator indices with step delta.
inline std::vector<Action> enumerate_gen_combos(const Grid& grid, const std::vector<int>& gens, double delta) {
  if (gens.size() < 2) throw ActionError("generator combos need at least two generators");
  if (!(delta > 0.0)) throw ActionError("redispatch step must be positive");
  for (int j : gens)
    if (delta > grid.generators[j].ramp_limit)
      throw ActionError("delta violates ramp limit of generator " + std::to_string(grid.generators[j].id));
  std::vector<Action> out;
  const auto patterns = zero_sum_patterns(static_cast<int>(gens.size()));
  for (std::size_t c = 0; c < patterns.size(); ++c) {
    Action a{ActionKind::Redispatch, -1, static_cast<int>(c), {}};
    for (std::size_t i = 0; i < gens.size(); ++i)
      if (patterns[c][i] != 0) a.adjust.push_back({gens[i], patterns[c][i] * delta});
    out.push_back(std::move(a));
  }
  return out;
}

// The k dispatchable non-slack generators with the largest ramp rates
// (ties by lower index), returned in index order.
inline std::vector<int> select_redispatch_generators(const Grid& grid, int k) {
  std::vector<int> cand;
  for (int j = 0; j < grid.num_generators(); ++j)
    if (grid.generators[j].dispatchable && j != grid.slack_generator()) cand.push_back(j);
  std::stable_sort(cand.begin(), cand.end(), [&](int a, int b) {
    return grid.generators[a].ramp_limit > grid.generators[b].ramp_limit;
  });
  if (static_cast<int>(cand.size()) < k)
    throw ActionError("requested " + std::to_string(k) + " redispatch generators, grid has " +
                      std::to_string(cand.size()));
  cand.resize(k);
  std::sort(cand.begin(), cand.end());
  return cand;
}

struct GenActionConfig {
  int k = 0;           // 0 disables redispatch actions
  double delta = 0.0;  // 0 selects the smallest ramp among the chosen generators
};

// Stable id <-> action mapping: 0 = DoNothing, 1..L = Remove, L+1..2L =
// Reconnect, then redispatch combos.
class ActionCatalog {
public:
  ActionCatalog() = default;
  ActionCatalog(const Grid& grid, GenActionConfig cfg) : num_lines_(grid.num_lines()) {
    actions_ = enumerate_line_actions(grid);
    if (cfg.k > 0) {
      gens_ = select_redispatch_generators(grid, cfg.k);
      delta_ = cfg.delta;
      if (delta_ <= 0.0) {
        delta_ = std::numeric_limits<double>::infinity();
        for (int j : gens_) delta_ = std::min(delta_, grid.generators[j].ramp_limit);
      }
      auto combos = enumerate_gen_combos(grid, gens_, delta_);
      actions_.insert(actions_.end(), combos.begin(), combos.end());
    }
  }

  static constexpr int kDoNothing = 0;

  int size() const { return static_cast<int>(actions_.size()); }
  int num_line_actions() const { return 2 * num_lines_ + 1; }
  int num_gen_actions() const { return size() - num_line_actions(); }
  const Action& at(int id) const {
    if (id < 0 || id >= size()) throw ActionError("action id " + std::to_string(id) + " out of range");
    return actions_[id];
  }
  int remove_id(int line) const { return 1 + line; }
  int reconnect_id(int line) const { return 1 + num_lines_ + line; }
  int id_of(const Action& a) const {
    switch (a.kind) {
      case ActionKind::DoNothing: return kDoNothing;
      case ActionKind::Remove: return remove_id(a.line);
      case ActionKind::Reconnect: return reconnect_id(a.line);
      case ActionKind::Redispatch: return num_line_actions() + a.combo;
    }
    return -1;
  }
  const std::vector<int>& redispatch_generators() const { return gens_; }
  double delta() const { return delta_; }
  const std::vector<Action>& actions() const { return actions_; }

private:
  int num_lines_ = 0;
  std::vector<Action> actions_;
  std::vector<int> gens_;
  double delta_ = 0.0;
};

inline std::string describe(const Grid& grid, const Action& a) {
  std::ostringstream os;
  switch (a.kind) {
    case ActionKind::DoNothing: os << "do nothing"; break;
    case ActionKind::Remove:
    case ActionKind::Reconnect: {
      const Line& ln = grid.lines[a.line];
      os << to_string(a.kind) << " line " << ln.id << " (" << ln.from_bus << "-" << ln.to_bus << ")";
      break;
    }
    case ActionKind::Redispatch:
      os << "redispatch";
      for (const auto& g : a.adjust) os << " g" << grid.generators[g.gen].id << (g.delta > 0 ? "+" : "") << g.delta;
      break;
  }
  return os.str();
}

// id,kind,line,combo,detail
inline void write_manifest(std::ostream& os, const Grid& grid, const ActionCatalog& cat) {
  os << "id,kind,line,combo,detail\n";
  for (int id = 0; id < cat.size(); ++id) {
    const Action& a = cat.at(id);
    os << id << ',' << to_string(a.kind) << ',';
    if (a.is_line_switch()) os << grid.lines[a.line].id;
    os << ',';
    if (a.kind == ActionKind::Redispatch) os << a.combo;
    os << ',' << '"' << describe(grid, a) << '"' << '\n';
  }
}

inline nlohmann::json manifest_json(const Grid& grid, const ActionCatalog& cat) {
  nlohmann::json out = nlohmann::json::array();
  for (int id = 0; id < cat.size(); ++id) {
    const Action& a = cat.at(id);
    nlohmann::json row{{"id", id}, {"kind", to_string(a.kind)}, {"detail", describe(grid, a)}};
    if (a.is_line_switch()) row["line"] = grid.lines[a.line].id;
    if (a.kind == ActionKind::Redispatch) {
      row["combo"] = a.combo;
      for (const auto& g : a.adjust) row["adjust"].push_back({{"gen", grid.generators[g.gen].id}, {"delta", g.delta}});
    }
    out.push_back(row);
  }
  return out;
}

inline bool redispatch_within_bounds(const Grid& grid, const SystemState& state, const Action& a) {
  for (const auto& g : a.adjust) {
    const double p = state.gen_output[g.gen] + g.delta;
    const auto& gen = grid.generators[g.gen];
    if (p < gen.p_min || p > gen.p_max) return false;
  }
  return true;
}

inline bool is_legal(const Grid& grid, const SystemState& state, const Action& a) {
  switch (a.kind) {
    case ActionKind::DoNothing: return true;
    case ActionKind::Remove: return state.line_status[a.line] && state.cooldown[a.line] == 0;
    case ActionKind::Reconnect: return !state.line_status[a.line] && state.cooldown[a.line] == 0;
    case ActionKind::Redispatch: return redispatch_within_bounds(grid, state, a);
  }
  return false;
}

// Sorted ids of every action applicable in this state.
inline std::vector<int> legal_actions(const SystemState& state, const ActionCatalog& cat, const Grid& grid) {
  std::vector<int> out;
  for (int id = 0; id < cat.size(); ++id)
    if (is_legal(grid, state, cat.at(id))) out.push_back(id);
  return out;
}

// Sum over lines of (1 - rho^2).
inline double margin_reward(const Vec& rho) { return (1.0 - rho.array().square()).sum(); }

// Cost terms of an action: mu_gen * sum c_j |dG_j| + mu_line * c_l per switch.
inline double action_cost(const Grid& grid, const Action& a, double mu_line, double mu_gen) {
  double cost = 0.0;
  if (a.is_line_switch()) cost += mu_line * grid.lines[a.line].switch_cost;
  for (const auto& g : a.adjust) cost += mu_gen * grid.generators[g.gen].cost_per_mw * std::abs(g.delta);
  return cost;
}

inline Vec bus_delta(const Grid& grid, const Action& a) {
  Vec d = Vec::Zero(grid.num_buses());
  for (const auto& g : a.adjust) d[grid.gen_bus_index(g.gen)] += g.delta;
  return d;
}

// Post-action flows: PTDF/LODF predictions for redispatch and
// removal, exact re-solve for reconnection. Without a sensitivity set (the
// current topology is islanded) every kind falls back to a re-solve.
// nullopt when the action has no defined outcome (bridge removal).
inline std::optional<Vec> predict_flows(const Grid& grid, const SystemState& state, const Action& a,
                                        const SensitivitySet* sens) {
  const Vec inj = bus_injections(grid, state.gen_output, state.load_demand);
  try {
    switch (a.kind) {
      case ActionKind::DoNothing: return state.line_flow;
      case ActionKind::Redispatch:
        if (sens) return predict_gen_adjust(state.line_flow, *sens, bus_delta(grid, a));
        return solve_dc(grid, inj + bus_delta(grid, a), state.line_status).flows;
      case ActionKind::Remove: {
        if (sens) {
          if (sens->bridge[a.line]) return std::nullopt;
          return predict_removal(state.line_flow, *sens, a.line);
        }
        LineStatus st = state.line_status;
        st[a.line] = false;
        if (islands(grid, st).count() != islands(grid, state.line_status).count()) return std::nullopt;
        return solve_dc(grid, inj, st).flows;
      }
      case ActionKind::Reconnect: return predict_reconnect(grid, state.line_status, inj, a.line);
    }
  } catch (const SolveError&) {
    return std::nullopt;
  }
  return std::nullopt;
}

inline LineStatus status_after(const SystemState& state, const Action& a) {
  LineStatus st = state.line_status;
  if (a.kind == ActionKind::Remove) st[a.line] = false;
  if (a.kind == ActionKind::Reconnect) st[a.line] = true;
  return st;
}

// Reward estimate r~ of an action: the instant reward evaluated on predicted
// margins plus the action's own cost terms. -inf when undefined.
inline double reward_estimate(const Action& a, const SystemState& state, const Grid& grid,
                              const SensitivitySet* sens, double mu_line, double mu_gen) {
  const auto flows = predict_flows(grid, state, a, sens);
  if (!flows) return -std::numeric_limits<double>::infinity();
  const Vec rho = risk_margins(grid, *flows, status_after(state, a));
  return margin_reward(rho) - action_cost(grid, a, mu_line, mu_gen);
}

inline int most_loaded_line(const SystemState& state) {
  int best = -1;
  for (int l = 0; l < static_cast<int>(state.line_status.size()); ++l)
    if (state.line_status[l] && (best < 0 || state.risk_margin[l] > state.risk_margin[best])) best = l;
  return best;
}

struct EffectiveCandidate {
  int action_id = 0;
  double predicted_lmax_margin = 0.0;  // margin of l_max after the action
};

struct EffectiveSet {
  int l_max = -1;
  std::vector<EffectiveCandidate> candidates;

  std::vector<int> ids() const {
    std::vector<int> out;
    for (const auto& c : candidates) out.push_back(c.action_id);
    return out;
  }
};

// Line-switch screening: legal non-bridge removals (other than the most
// loaded line) that bring the most loaded line within its limit without
// overloading any other line, plus every legal reconnection.
inline EffectiveSet effective_line_set(const SystemState& state, const ActionCatalog& cat, const Grid& grid,
                                       const SensitivitySet* sens) {
  EffectiveSet out;
  const int nl = grid.num_lines();
  const int lmax = most_loaded_line(state);
  out.l_max = lmax;
  const Vec& f = state.line_flow;

  if (sens && lmax >= 0) {
    sens->require_topology(state.line_status);
    const double lmax_limit = grid.lines[lmax].flow_limit;
    for (int k = 0; k < nl; ++k) {
      if (k == lmax || !state.line_status[k] || state.cooldown[k] != 0 || sens->bridge[k]) continue;
      const double f_lmax = f[lmax] + sens->lodf(lmax, k) * f[k];
      if (!(std::abs(f_lmax) <= lmax_limit)) continue;
      bool new_overload = false;
      for (int l = 0; l < nl; ++l) {
        if (!state.line_status[l] || l == lmax) continue;
        const double fl = l == k ? 0.0 : f[l] + sens->lodf(l, k) * f[k];
        if (std::abs(fl) > grid.lines[l].flow_limit) {
          new_overload = true;
          break;
        }
      }
      if (!new_overload) out.candidates.push_back({cat.remove_id(k), std::abs(f_lmax) / lmax_limit});
    }
  }
  const Vec inj = bus_injections(grid, state.gen_output, state.load_demand);
  for (int k = 0; k < nl; ++k) {
    if (state.line_status[k] || state.cooldown[k] != 0) continue;
    double margin = 0.0;
    if (lmax >= 0) {
      try {
        margin = std::abs(predict_reconnect(grid, state.line_status, inj, k)[lmax]) / grid.lines[lmax].flow_limit;
      } catch (const SolveError&) {
        margin = std::numeric_limits<double>::quiet_NaN();
      }
    }
    out.candidates.push_back({cat.reconnect_id(k), margin});
  }
  return out;
}

}  // namespace blackout
