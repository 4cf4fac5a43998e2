#pragma once

#include <cassert>
#include <deque>
#include <iomanip>
#include <limits>
#include <optional>
#include <ostream>
#include <string>
#include <vector>

#include "blackout/actions.hpp"
#include "blackout/grid.hpp"
#include "blackout/scenario.hpp"

namespace blackout {

class EnvError : public std::runtime_error {
public:
  using std::runtime_error::runtime_error;
};

class IllegalAction : public EnvError {
public:
  using EnvError::EnvError;
};

struct EnvConfig {
  double eta = 0.95;      // critical threshold
  double nu = 0.0;        // calm threshold
  int kappa = 6;          // state window length
  int tau_d = 3;          // cooldown after an agent switch
  int tau_f = 12;         // cooldown after a natural failure
  int tau_ov = 3;         // consecutive overloaded steps before a line trips
  double rho_hard = 2.0;  // instant trip margin
  double mu_line = 0.0;
  double mu_gen = 0.0;
  std::optional<double> blackout_penalty;  // defaults to -L
  int horizon = 8062;
  GenActionConfig gen_actions;

  void validate() const {
    if (!(nu >= 0.0 && nu < eta)) throw EnvError("config: require 0 <= nu < eta");
    if (!(tau_d >= 1 && tau_f > tau_d)) throw EnvError("config: require tau_f > tau_d >= 1");
    if (tau_ov < 1) throw EnvError("config: tau_ov must be >= 1");
    if (!(rho_hard > 1.0)) throw EnvError("config: rho_hard must exceed 1");
    if (kappa < 1) throw EnvError("config: kappa must be >= 1");
    if (horizon < 1) throw EnvError("config: horizon must be >= 1");
  }
  double penalty(const Grid& grid) const { return blackout_penalty.value_or(-static_cast<double>(grid.num_lines())); }
};

inline nlohmann::json to_json(const EnvConfig& c) {
  nlohmann::json j{{"eta", c.eta},       {"nu", c.nu},         {"kappa", c.kappa},       {"tau_d", c.tau_d},
                   {"tau_f", c.tau_f},   {"tau_ov", c.tau_ov}, {"rho_hard", c.rho_hard}, {"mu_line", c.mu_line},
                   {"mu_gen", c.mu_gen}, {"horizon", c.horizon},
                   {"gen_actions", {{"k", c.gen_actions.k}, {"delta", c.gen_actions.delta}}}};
  if (c.blackout_penalty) j["blackout_penalty"] = *c.blackout_penalty;
  return j;
}

inline EnvConfig env_config_from_json(const nlohmann::json& j) {
  EnvConfig c;
  c.eta = j.value("eta", c.eta);
  c.nu = j.value("nu", c.nu);
  c.kappa = j.value("kappa", c.kappa);
  c.tau_d = j.value("tau_d", c.tau_d);
  c.tau_f = j.value("tau_f", c.tau_f);
  c.tau_ov = j.value("tau_ov", c.tau_ov);
  c.rho_hard = j.value("rho_hard", c.rho_hard);
  c.mu_line = j.value("mu_line", c.mu_line);
  c.mu_gen = j.value("mu_gen", c.mu_gen);
  c.horizon = j.value("horizon", c.horizon);
  if (j.contains("blackout_penalty")) c.blackout_penalty = j.at("blackout_penalty").get<double>();
  if (j.contains("gen_actions")) {
    c.gen_actions.k = j.at("gen_actions").value("k", 0);
    c.gen_actions.delta = j.at("gen_actions").value("delta", 0.0);
  }
  c.validate();
  return c;
}

// max rho over operational lines >= eta; an empty operational set is not critical.
inline bool is_critical(const SystemState& s, const EnvConfig& c) {
  bool any = false;
  double m = 0.0;
  for (std::size_t l = 0; l < s.line_status.size(); ++l)
    if (s.line_status[l]) {
      any = true;
      m = std::max(m, s.risk_margin[l]);
    }
  return any && m >= c.eta;
}

inline bool is_calm(const SystemState& s, const EnvConfig& c) {
  double m = 0.0;
  for (std::size_t l = 0; l < s.line_status.size(); ++l)
    if (s.line_status[l]) m = std::max(m, s.risk_margin[l]);
  return m <= c.nu;
}

inline double compute_reward(const SystemState& after, const Action& a, const EnvConfig& c, const Grid& grid,
                             bool blackout = false) {
  if (blackout) return c.penalty(grid);
  return margin_reward(after.risk_margin) - action_cost(grid, a, c.mu_line, c.mu_gen);
}

inline int feature_size(const Grid& g) { return g.num_generators() + g.num_loads() + 5 * g.num_lines(); }

// Normalized feature vector: gen, load, flow/limit, rho, status, overflow, cooldown.
inline Vec features(const Grid& grid, const EnvConfig& c, const SystemState& s) {
  const int G = grid.num_generators(), D = grid.num_loads(), L = grid.num_lines();
  Vec x(feature_size(grid));
  double load_scale = 1.0;
  for (const auto& g : grid.generators) load_scale = std::max(load_scale, g.p_max);
  int o = 0;
  for (int j = 0; j < G; ++j) x[o++] = s.gen_output[j] / std::max(grid.generators[j].p_max, 1e-9);
  for (int k = 0; k < D; ++k) x[o++] = s.load_demand[k] / load_scale;
  for (int l = 0; l < L; ++l) x[o++] = s.line_flow[l] / grid.lines[l].flow_limit;
  for (int l = 0; l < L; ++l) x[o++] = s.risk_margin[l];
  for (int l = 0; l < L; ++l) x[o++] = s.line_status[l] ? 1.0 : 0.0;
  for (int l = 0; l < L; ++l) x[o++] = static_cast<double>(s.overflow_steps[l]) / c.tau_ov;
  for (int l = 0; l < L; ++l) x[o++] = static_cast<double>(s.cooldown[l]) / c.tau_f;
  return x;
}

// Moving window of the last kappa feature vectors, oldest first.
class MdpState {
public:
  MdpState() = default;
  MdpState(int kappa, int width) : width_(width) { blocks_.assign(kappa, Vec::Zero(width)); }

  void push(Vec x) {
    blocks_.pop_front();
    blocks_.push_back(std::move(x));
  }
  int kappa() const { return static_cast<int>(blocks_.size()); }
  int width() const { return width_; }
  const Vec& block(int i) const { return blocks_[i]; }

  Vec flatten() const {
    Vec out(kappa() * width_);
    for (int i = 0; i < kappa(); ++i) out.segment(i * width_, width_) = blocks_[i];
    return out;
  }

private:
  int width_ = 0;
  std::deque<Vec> blocks_;
};

struct StepOutcome {
  SystemState next_state;
  double reward = 0.0;
  bool done = false;
  bool blackout = false;
  std::string blackout_cause;
  std::vector<int> cascade_failures;  // line indices failed this step
  int action_id = 0;
};

struct TraceRow {
  int step = 0;  // index of the state reached
  int action_id = 0;
  double reward = 0.0;
  double max_rho = 0.0;
  std::vector<int> failures;  // line ids
  bool blackout = false;
};

struct EpisodeTrace {
  std::string scenario_id;
  int horizon = 0;
  std::vector<TraceRow> rows;
  bool blackout = false;
  int blackout_step = 0;
};

// Blackout step index if one occurred, otherwise the horizon.
inline int survival_time(const EpisodeTrace& t) { return t.blackout ? t.blackout_step : t.horizon; }

inline void write_trace_csv(const EpisodeTrace& t, std::ostream& os) {
  os << "step,action_id,reward,max_rho,failures,blackout\n" << std::setprecision(17);
  for (const auto& r : t.rows) {
    os << r.step << ',' << r.action_id << ',' << r.reward << ',' << r.max_rho << ',';
    for (std::size_t i = 0; i < r.failures.size(); ++i) os << (i ? ";" : "") << r.failures[i];
    os << ',' << (r.blackout ? 1 : 0) << '\n';
  }
}

// Episodic DC-flow MDP with overflow cascades. Holds references to the grid
// and the active scenario; both must outlive the environment.
class Environment {
public:
  Environment(const Grid& grid, EnvConfig cfg)
      : grid_(&grid), cfg_(std::move(cfg)), catalog_(grid, cfg_.gen_actions) {
    cfg_.validate();
  }

  const Grid& grid() const { return *grid_; }
  const EnvConfig& config() const { return cfg_; }
  const ActionCatalog& catalog() const { return catalog_; }
  const SystemState& state() const { return state_; }
  const MdpState& window() const { return window_; }
  Vec observation() const { return window_.flatten(); }
  int observation_size() const { return cfg_.kappa * feature_size(*grid_); }
  const EpisodeTrace& trace() const { return trace_; }
  const Scenario* scenario() const { return scenario_; }
  bool done() const { return done_; }
  int horizon() const { return horizon_; }
  const Vec& redispatch_offset() const { return offset_; }

  const SystemState& reset(const Scenario& sc) {
    if (sc.length() < 1) throw EnvError("scenario " + sc.id + " is empty");
    if (static_cast<int>(sc.loads[0].size()) != grid_->num_loads() ||
        static_cast<int>(sc.gens[0].size()) != grid_->num_generators())
      throw EnvError("scenario " + sc.id + " does not match the grid");
    scenario_ = &sc;
    horizon_ = std::min(cfg_.horizon, sc.length());
    offset_ = Vec::Zero(grid_->num_generators());
    const int L = grid_->num_lines();
    SystemState s;
    s.step = 1;
    s.line_status = grid_->all_lines_on();
    s.overflow_steps.assign(L, 0);
    s.cooldown.assign(L, 0);
    s.load_demand = sc.loads[0];
    s.gen_output = dispatch(sc.gens[0], s.load_demand.sum(), nullptr);
    if (!slack_within_bounds(s.gen_output)) throw EnvError("scenario " + sc.id + " rejected: slack out of bounds");
    try {
      const auto sol = solve_dc(*grid_, bus_injections(*grid_, s.gen_output, s.load_demand), s.line_status);
      s.line_flow = sol.flows;
      s.risk_margin = risk_margins(*grid_, sol.flows, s.line_status);
    } catch (const SolveError& e) {
      throw EnvError("scenario " + sc.id + " rejected: " + e.what());
    }
    state_ = std::move(s);
    window_ = MdpState(cfg_.kappa, feature_size(*grid_));
    window_.push(features(*grid_, cfg_, state_));
    done_ = false;
    trace_ = EpisodeTrace{sc.id, horizon_, {}, false, 0};
    return state_;
  }

  StepOutcome step(int action_id) { return step_impl(catalog_.at(action_id), action_id); }
  StepOutcome step(const Action& a) { return step_impl(a, catalog_.id_of(a)); }

private:
  // Generator outputs for the given set-points: clamped to bounds, islanded
  // generators tripped, slack closing the balance.
  Vec dispatch(const Vec& setpoints, double load_total, const Islands* isl) const {
    const int G = grid_->num_generators();
    const int slack_gen = grid_->slack_generator();
    const int slack_comp = isl ? isl->label[grid_->slack_index()] : 0;
    Vec out = Vec::Zero(G);
    double total = 0.0;
    for (int j = 0; j < G; ++j) {
      if (j == slack_gen) continue;
      if (isl && isl->label[grid_->gen_bus_index(j)] != slack_comp) continue;
      const auto& g = grid_->generators[j];
      out[j] = std::clamp(setpoints[j] + offset_[j], g.p_min, g.p_max);
      total += out[j];
    }
    out[slack_gen] = load_total - total;
    return out;
  }

  bool slack_within_bounds(const Vec& gen) const {
    const auto& g = grid_->generators[grid_->slack_generator()];
    const double tol = 1e-9 * std::max(1.0, g.p_max);
    return gen[grid_->slack_generator()] >= g.p_min - tol && gen[grid_->slack_generator()] <= g.p_max + tol;
  }

  StepOutcome step_impl(const Action& a, int action_id) {
    if (done_) throw EnvError("episode finished");
    if (state_.step >= horizon_) throw EnvError("scenario exhausted");
    if (!is_legal(*grid_, state_, a))
      throw IllegalAction("illegal action " + std::to_string(action_id) + ": " + describe(*grid_, a));

    const int L = grid_->num_lines();
    SystemState s;
    s.step = state_.step + 1;
    s.line_status = state_.line_status;
    s.overflow_steps = state_.overflow_steps;
    s.cooldown = state_.cooldown;
    std::vector<bool> touched(L, false);

    // (1) set-points for the new step
    const Vec& setpoints = scenario_->gens[s.step - 1];
    s.load_demand = scenario_->loads[s.step - 1];

    // (2) the action
    if (a.is_line_switch()) {
      assert(state_.cooldown[a.line] == 0);
      s.line_status[a.line] = a.kind == ActionKind::Reconnect;
      s.cooldown[a.line] = cfg_.tau_d;
      s.overflow_steps[a.line] = 0;
      touched[a.line] = true;
    }
    for (const auto& g : a.adjust) offset_[g.gen] += g.delta;

    // (3)-(5) solve, cascade, blackout checks
    StepOutcome out;
    out.action_id = action_id;
    std::vector<bool> counted(L, false);
    int iterations = 0;
    while (true) {
      const Islands isl = islands(*grid_, s.line_status);
      const int slack_comp = isl.label[grid_->slack_index()];
      for (int k = 0; k < grid_->num_loads(); ++k)
        if (isl.label[grid_->load_bus_index(k)] != slack_comp) {
          out.blackout_cause = "load " + std::to_string(grid_->loads[k].id) + " islanded";
          break;
        }
      if (!out.blackout_cause.empty()) break;
      s.gen_output = dispatch(setpoints, s.load_demand.sum(), &isl);
      if (!slack_within_bounds(s.gen_output)) {
        out.blackout_cause = "slack generator out of bounds";
        break;
      }
      try {
        const auto sol = solve_dc(*grid_, bus_injections(*grid_, s.gen_output, s.load_demand), s.line_status);
        s.line_flow = sol.flows;
      } catch (const SolveError& e) {
        out.blackout_cause = e.what();
        break;
      }
      s.risk_margin = risk_margins(*grid_, s.line_flow, s.line_status);

      std::vector<int> failing;
      for (int l = 0; l < L; ++l) {
        if (!s.line_status[l]) continue;
        if (s.risk_margin[l] >= 1.0 && !counted[l]) {
          ++s.overflow_steps[l];
          counted[l] = true;
        }
        if (s.risk_margin[l] >= cfg_.rho_hard || s.overflow_steps[l] >= cfg_.tau_ov) failing.push_back(l);
      }
      if (failing.empty()) break;
      for (int l : failing) {
        s.line_status[l] = false;
        s.cooldown[l] = cfg_.tau_f;
        s.overflow_steps[l] = 0;
        touched[l] = true;
        out.cascade_failures.push_back(l);
      }
      ++iterations;
      assert(iterations <= L);
    }

    out.blackout = !out.blackout_cause.empty();
    if (out.blackout) {
      if (s.gen_output.size() != grid_->num_generators()) s.gen_output = Vec::Zero(grid_->num_generators());
      s.line_flow = Vec::Zero(L);
      s.risk_margin = Vec::Zero(L);
    }
    for (int l = 0; l < L; ++l)
      if (!s.line_status[l] || s.risk_margin[l] < 1.0) s.overflow_steps[l] = 0;

    // (6) reward
    out.reward = compute_reward(s, a, cfg_, *grid_, out.blackout);

    // (7) bookkeeping
    for (int l = 0; l < L; ++l)
      if (!touched[l] && s.cooldown[l] > 0) --s.cooldown[l];
    state_ = s;
    window_.push(features(*grid_, cfg_, state_));
    done_ = out.blackout || state_.step >= horizon_;
    out.done = done_;
    out.next_state = state_;

    TraceRow row{state_.step, action_id, out.reward, state_.max_margin(), {}, out.blackout};
    for (int l : out.cascade_failures) row.failures.push_back(grid_->lines[l].id);
    trace_.rows.push_back(std::move(row));
    if (out.blackout) {
      trace_.blackout = true;
      trace_.blackout_step = state_.step;
    }
    return out;
  }

  const Grid* grid_;
  EnvConfig cfg_;
  ActionCatalog catalog_;
  const Scenario* scenario_ = nullptr;
  SystemState state_;
  MdpState window_;
  EpisodeTrace trace_;
  Vec offset_;
  int horizon_ = 0;
  bool done_ = true;
};

}  // namespace blackout
