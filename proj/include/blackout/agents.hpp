#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <functional>
#include <iomanip>
#include <limits>
#include <optional>
#include <ostream>
#include <set>
#include <string>
#include <vector>

#include "blackout/actions.hpp"
#include "blackout/checkpoint.hpp"
#include "blackout/dqn.hpp"
#include "blackout/env.hpp"
#include "blackout/replay.hpp"
#include "blackout/rng.hpp"

namespace blackout {

class AgentError : public std::runtime_error {
public:
  using std::runtime_error::runtime_error;
};

enum class PolicyKind { DoNothing, Reconnection, RandomExplore, PhysicsGuided };

inline const char* to_string(PolicyKind k) {
  switch (k) {
    case PolicyKind::DoNothing: return "do-nothing";
    case PolicyKind::Reconnection: return "reconnection";
    case PolicyKind::RandomExplore: return "random-explore";
    case PolicyKind::PhysicsGuided: return "physics-guided";
  }
  return "?";
}

inline PolicyKind policy_from_string(const std::string& s) {
  if (s == "do-nothing") return PolicyKind::DoNothing;
  if (s == "reconnection") return PolicyKind::Reconnection;
  if (s == "random-explore" || s == "random") return PolicyKind::RandomExplore;
  if (s == "physics-guided" || s == "physics" || s == "trained") return PolicyKind::PhysicsGuided;
  throw AgentError("unknown policy '" + s + "'");
}

struct EpsilonSchedule {
  double start = 0.99;
  double end = 0.05;
  double horizon = 26000.0;  // steps until the floor is reached

  // max(end, start * exp(-n / lambda)), lambda = horizon / ln(start / end)
  double operator()(std::int64_t n) const {
    const double lambda = horizon / std::log(start / end);
    return std::max(end, start * std::exp(-static_cast<double>(n) / lambda));
  }
};

inline double epsilon(std::int64_t n) { return EpsilonSchedule{}(n); }

// nullopt when the topology is islanded.
inline std::optional<SensitivitySet> sensitivities_for(const Grid& grid, const SystemState& s) {
  try {
    return compute_sensitivities(grid, s.line_status);
  } catch (const SensitivityError&) {
    return std::nullopt;
  }
}

// Highest reward estimate among ids scanned in ascending order (strict
// improvement, so ties keep the lowest id). -1 when none is finite.
inline int argmax_estimate(std::vector<int> ids, const SystemState& s, const ActionCatalog& cat, const Grid& grid,
                           const SensitivitySet* sens, double mu_line, double mu_gen, double* best_value = nullptr) {
  std::sort(ids.begin(), ids.end());
  int best = -1;
  double best_r = -std::numeric_limits<double>::infinity();
  for (int id : ids) {
    const double r = reward_estimate(cat.at(id), s, grid, sens, mu_line, mu_gen);
    if (r > best_r) {
      best_r = r;
      best = id;
    }
  }
  if (best_value) *best_value = best_r;
  return best;
}

// Non-critical rule: reconnect the legal line with the best estimate, else DoNothing.
inline int reconnect_rule(const SystemState& s, const ActionCatalog& cat, const Grid& grid, double mu_line,
                          double mu_gen) {
  std::vector<int> ids;
  for (int l = 0; l < grid.num_lines(); ++l)
    if (!s.line_status[l] && s.cooldown[l] == 0) ids.push_back(cat.reconnect_id(l));
  const int best = argmax_estimate(ids, s, cat, grid, nullptr, mu_line, mu_gen);
  return best < 0 ? ActionCatalog::kDoNothing : best;
}

struct ExploreChoice {
  int action_id = ActionCatalog::kDoNothing;
  std::vector<int> candidates;  // R_eff plus legal redispatch, ascending
};

// Physics-guided exploration over R_eff and the legal redispatch actions.
inline ExploreChoice physics_explore(const SystemState& s, const ActionCatalog& cat, const Grid& grid,
                                     const SensitivitySet* sens, double mu_line, double mu_gen) {
  ExploreChoice out;
  out.candidates = effective_line_set(s, cat, grid, sens).ids();
  for (int id = cat.num_line_actions(); id < cat.size(); ++id)
    if (is_legal(grid, s, cat.at(id))) out.candidates.push_back(id);
  std::sort(out.candidates.begin(), out.candidates.end());
  const int best = argmax_estimate(out.candidates, s, cat, grid, sens, mu_line, mu_gen);
  out.action_id = best < 0 ? ActionCatalog::kDoNothing : best;
  return out;
}

// Uniform over every legal action.
inline int random_explore(const SystemState& s, const ActionCatalog& cat, const Grid& grid, Rng& rng) {
  const auto legal = legal_actions(s, cat, grid);
  return legal[rng.below(legal.size())];
}

struct RankedAction {
  int action_id = 0;
  double q = 0.0;
  double estimate = 0.0;
};

// The k highest-Q legal actions (ties by lower id), with reward estimates.
inline std::vector<RankedAction> top_legal_by_q(const Vec& q, const SystemState& s, const ActionCatalog& cat,
                                                const Grid& grid, const SensitivitySet* sens, double mu_line,
                                                double mu_gen, int k = 5) {
  if (q.size() != cat.size()) throw AgentError("Q vector does not match the action catalog");
  auto legal = legal_actions(s, cat, grid);
  std::stable_sort(legal.begin(), legal.end(), [&](int a, int b) { return q[a] > q[b]; });
  if (static_cast<int>(legal.size()) > k) legal.resize(k);
  std::vector<RankedAction> out;
  for (int id : legal) out.push_back({id, q[id], reward_estimate(cat.at(id), s, grid, sens, mu_line, mu_gen)});
  return out;
}

// Q-guided exploitation: best reward estimate among the top-k legal Q values.
inline int q_exploit(const Vec& q, const SystemState& s, const ActionCatalog& cat, const Grid& grid,
                     const SensitivitySet* sens, double mu_line, double mu_gen, int k = 5) {
  auto ranked = top_legal_by_q(q, s, cat, grid, sens, mu_line, mu_gen, k);
  std::sort(ranked.begin(), ranked.end(), [](const auto& a, const auto& b) { return a.action_id < b.action_id; });
  int best = ActionCatalog::kDoNothing;
  double best_r = -std::numeric_limits<double>::infinity();
  for (const auto& r : ranked)
    if (r.estimate > best_r) {
      best_r = r.estimate;
      best = r.action_id;
    }
  return best;
}

struct Decision {
  int action_id = ActionCatalog::kDoNothing;
  bool critical = false;
  bool explored = false;
  std::vector<int> explore_set;  // physics-guided explore branch only
};

class Agent {
public:
  explicit Agent(PolicyKind kind, const NetworkParams* params = nullptr, int top_k = 5)
      : kind_(kind), params_(params), top_k_(top_k) {
    if (trained() && !params_) throw AgentError(std::string(to_string(kind)) + " policy needs network parameters");
  }

  PolicyKind kind() const { return kind_; }
  bool trained() const { return kind_ == PolicyKind::RandomExplore || kind_ == PolicyKind::PhysicsGuided; }
  const NetworkParams* params() const { return params_; }

  Decision act(const Environment& env, double eps, Rng& rng) const {
    if (env.done()) throw AgentError("act on a finished episode");
    const SystemState& s = env.state();
    const EnvConfig& cfg = env.config();
    const Grid& grid = env.grid();
    const ActionCatalog& cat = env.catalog();
    Decision d;
    d.critical = is_critical(s, cfg);
    if (kind_ == PolicyKind::DoNothing) return d;
    if (!d.critical || kind_ == PolicyKind::Reconnection) {
      d.action_id = reconnect_rule(s, cat, grid, cfg.mu_line, cfg.mu_gen);
      return d;
    }
    if (params_->dims.actions != cat.size() || params_->dims.input() != env.observation_size())
      throw AgentError("network dimensions do not match the environment");
    const auto sens = sensitivities_for(grid, s);
    const SensitivitySet* sp = sens ? &*sens : nullptr;
    d.explored = rng.uniform() < eps;
    if (d.explored) {
      if (kind_ == PolicyKind::PhysicsGuided) {
        auto choice = physics_explore(s, cat, grid, sp, cfg.mu_line, cfg.mu_gen);
        d.action_id = choice.action_id;
        d.explore_set = std::move(choice.candidates);
      } else {
        d.action_id = random_explore(s, cat, grid, rng);
      }
      return d;
    }
    const Vec q = forward(*params_, env.observation()).q;
    d.action_id = q_exploit(q, s, cat, grid, sp, cfg.mu_line, cfg.mu_gen, top_k_);
    return d;
  }

private:
  PolicyKind kind_;
  const NetworkParams* params_;
  int top_k_;
};

// ---------------------------------------------------------------------------
// Training

struct DqnConfig {
  int hidden = 0;  // 0 selects the per-step feature width
  double gamma = 0.99;
  int batch = 64;
  double tau_soft = 0.005;
  int top_k = 5;
  EpsilonSchedule epsilon;
  AdamConfig adam;
  ReplayConfig replay;
};

inline nlohmann::json to_json(const DqnConfig& c) {
  return {{"hidden", c.hidden},
          {"gamma", c.gamma},
          {"batch", c.batch},
          {"tau_soft", c.tau_soft},
          {"top_k", c.top_k},
          {"epsilon", {{"start", c.epsilon.start}, {"end", c.epsilon.end}, {"horizon", c.epsilon.horizon}}},
          {"adam",
           {{"lr", c.adam.lr},
            {"beta1", c.adam.beta1},
            {"beta2", c.adam.beta2},
            {"eps", c.adam.eps},
            {"decay", c.adam.decay},
            {"decay_every", c.adam.decay_every}}},
          {"replay",
           {{"capacity", c.replay.capacity},
            {"alpha", c.replay.alpha},
            {"beta0", c.replay.beta0},
            {"beta1", c.replay.beta1},
            {"eps", c.replay.eps},
            {"importance_weights", c.replay.importance_weights}}}};
}

inline DqnConfig dqn_config_from_json(const nlohmann::json& j) {
  DqnConfig c;
  c.hidden = j.value("hidden", c.hidden);
  c.gamma = j.value("gamma", c.gamma);
  c.batch = j.value("batch", c.batch);
  c.tau_soft = j.value("tau_soft", c.tau_soft);
  c.top_k = j.value("top_k", c.top_k);
  if (j.contains("epsilon")) {
    const auto& e = j.at("epsilon");
    c.epsilon.start = e.value("start", c.epsilon.start);
    c.epsilon.end = e.value("end", c.epsilon.end);
    c.epsilon.horizon = e.value("horizon", c.epsilon.horizon);
  }
  if (j.contains("adam")) {
    const auto& a = j.at("adam");
    c.adam.lr = a.value("lr", c.adam.lr);
    c.adam.beta1 = a.value("beta1", c.adam.beta1);
    c.adam.beta2 = a.value("beta2", c.adam.beta2);
    c.adam.eps = a.value("eps", c.adam.eps);
    c.adam.decay = a.value("decay", c.adam.decay);
    c.adam.decay_every = a.value("decay_every", c.adam.decay_every);
  }
  if (j.contains("replay")) {
    const auto& r = j.at("replay");
    c.replay.capacity = r.value("capacity", c.replay.capacity);
    c.replay.alpha = r.value("alpha", c.replay.alpha);
    c.replay.beta0 = r.value("beta0", c.replay.beta0);
    c.replay.beta1 = r.value("beta1", c.replay.beta1);
    c.replay.eps = r.value("eps", c.replay.eps);
    c.replay.importance_weights = r.value("importance_weights", c.replay.importance_weights);
  }
  if (c.batch < 1) throw AgentError("dqn: batch must be >= 1");
  if (!(c.gamma >= 0.0 && c.gamma <= 1.0)) throw AgentError("dqn: gamma must be in [0, 1]");
  if (c.top_k < 1) throw AgentError("dqn: top_k must be >= 1");
  return c;
}

inline NetworkDims network_dims(const Environment& env, const DqnConfig& c) {
  const int o = feature_size(env.grid());
  const int h = c.hidden > 0 ? c.hidden : o;
  return {env.config().kappa, o, h, h, env.catalog().size()};
}

struct TrainOptions {
  PolicyKind kind = PolicyKind::PhysicsGuided;
  std::int64_t steps = 0;  // environment steps
  std::uint64_t seed = 0;
  DqnConfig dqn;
};

struct EpisodeLog {
  int episode = 0;
  std::string scenario_id;
  int survival_time = 0;
  double total_reward = 0.0;
  double mean_loss = std::numeric_limits<double>::quiet_NaN();
  double epsilon = 0.0;
  int unique_actions = 0;
};

struct TrainResult {
  Checkpoint model;
  std::vector<EpisodeLog> episodes;
  std::int64_t env_steps = 0;
  std::int64_t critical_steps = 0;
  std::int64_t updates = 0;
  std::int64_t rejected_updates = 0;
  std::int64_t containment_violations = 0;
  double final_epsilon = 0.0;
  double final_beta = 0.0;
};

// Deep Q-learning over the scenario list, cycled in order. Only critical
// steps produce transitions and updates; the step budget counts every
// environment step. `progress` (optional) sees each finished episode.
inline TrainResult train(const Grid& grid, const std::vector<Scenario>& scenarios, const EnvConfig& env_cfg,
                         const TrainOptions& opt,
                         const std::function<void(const EpisodeLog&)>& progress = nullptr) {
  if (scenarios.empty()) throw AgentError("train: no scenarios");
  if (opt.kind != PolicyKind::PhysicsGuided && opt.kind != PolicyKind::RandomExplore)
    throw AgentError("train: only learning policies can be trained");
  if (opt.steps < 0) throw AgentError("train: negative step budget");
  for (const auto& sc : scenarios)
    if (std::min(sc.length(), env_cfg.horizon) < 2)
      throw AgentError("train: scenario " + sc.id + " gives an episode shorter than two steps");

  Environment env(grid, env_cfg);
  const NetworkDims dims = network_dims(env, opt.dqn);
  Rng init_rng = Rng::stream(opt.seed, "init");
  Rng explore_rng = Rng::stream(opt.seed, "exploration");
  Rng replay_rng = Rng::stream(opt.seed, "replay");

  TrainResult res;
  res.model.online = NetworkParams::init(dims, init_rng);
  res.model.target = res.model.online;
  res.model.optimizer = OptimizerState::for_params(res.model.online, opt.dqn.adam);
  NetworkParams& online = res.model.online;
  NetworkParams& target = res.model.target;
  OptimizerState& adam = res.model.optimizer;

  ReplayBuffer buffer(opt.dqn.replay);
  const Agent agent(opt.kind, &online, opt.dqn.top_k);

  std::size_t sc_index = 0;
  int episode = 0;
  double ep_reward = 0.0, ep_loss = 0.0;
  int ep_updates = 0;
  std::set<int> ep_actions;
  env.reset(scenarios[0]);

  for (std::int64_t t = 0; t < opt.steps; ++t) {
    const double beta =
        opt.dqn.replay.beta0 + (opt.dqn.replay.beta1 - opt.dqn.replay.beta0) *
                                   std::min(1.0, static_cast<double>(t) / static_cast<double>(opt.steps));
    res.final_beta = beta;
    const double eps = opt.dqn.epsilon(res.critical_steps);
    const Vec s_obs = env.observation();
    const Decision d = agent.act(env, eps, explore_rng);
    if (d.explored && opt.kind == PolicyKind::PhysicsGuided && d.action_id != ActionCatalog::kDoNothing &&
        !std::binary_search(d.explore_set.begin(), d.explore_set.end(), d.action_id))
      ++res.containment_violations;

    const StepOutcome out = env.step(d.action_id);
    ++res.env_steps;
    ep_reward += out.reward;
    ep_actions.insert(d.action_id);

    if (d.critical) {
      buffer.push({s_obs, d.action_id, out.reward, env.observation(), out.done});
      if (buffer.size() >= static_cast<std::size_t>(opt.dqn.batch)) {
        const SampledBatch sb = buffer.sample(opt.dqn.batch, beta, replay_rng);
        const Vec targets = td_target(sb.batch, target, opt.dqn.gamma);
        try {
          const UpdateResult u = sgd_update(online, adam, sb.batch, targets, sb.weights);
          buffer.update_priorities(sb.indices, u.abs_td);
          soft_update(target, online, opt.dqn.tau_soft);
          ep_loss += u.loss;
          ++ep_updates;
          ++res.updates;
        } catch (const DqnError&) {
          ++res.rejected_updates;
        }
      }
      ++res.critical_steps;
    }

    if (out.done) {
      EpisodeLog log;
      log.episode = episode++;
      log.scenario_id = scenarios[sc_index].id;
      log.survival_time = survival_time(env.trace());
      log.total_reward = ep_reward;
      if (ep_updates > 0) log.mean_loss = ep_loss / ep_updates;
      log.epsilon = opt.dqn.epsilon(res.critical_steps);
      log.unique_actions = static_cast<int>(ep_actions.size());
      res.episodes.push_back(log);
      if (progress) progress(log);
      ep_reward = ep_loss = 0.0;
      ep_updates = 0;
      ep_actions.clear();
      sc_index = (sc_index + 1) % scenarios.size();
      env.reset(scenarios[sc_index]);
    }
  }
  res.final_epsilon = opt.dqn.epsilon(res.critical_steps);
  return res;
}

inline void write_train_log(std::ostream& os, const std::vector<EpisodeLog>& episodes) {
  os << "episode,scenario_id,survival_time,total_reward,mean_loss,epsilon,unique_actions\n" << std::setprecision(17);
  for (const auto& e : episodes) {
    os << e.episode << ',' << e.scenario_id << ',' << e.survival_time << ',' << e.total_reward << ',';
    if (std::isfinite(e.mean_loss)) os << e.mean_loss;
    os << ',' << e.epsilon << ',' << e.unique_actions << '\n';
  }
}

// ---------------------------------------------------------------------------
// Evaluation

struct DecisionRecord {
  int action_id = 0;
  ActionKind kind = ActionKind::DoNothing;
  bool critical = false;
};

struct EpisodeRecord {
  std::string scenario_id;
  int survival_time = 0;
  bool blackout = false;
  double total_reward = 0.0;
  std::vector<DecisionRecord> decisions;
};

struct ScenarioMetrics {
  std::string id;
  int survival_time = 0;
  bool blackout = false;
  double total_reward = 0.0;
  int decisions = 0;
  int critical_decisions = 0;
  // Shares of critical decisions; all DoNothing when there were none.
  double pct_do_nothing = 100.0, pct_reconnect = 0.0, pct_removal = 0.0, pct_redispatch = 0.0;
  int unique_actions = 0;
};

struct EvalMetrics {
  int num_scenarios = 0;
  int num_actions = 0;
  double avg_survival_time = 0.0;
  double pct_do_nothing = 100.0;
  double pct_reconnect = 0.0;
  double pct_removal = 0.0;
  double pct_redispatch = 0.0;
  double action_diversity = 0.0;      // mean unique actions per scenario
  double action_diversity_pct = 0.0;  // as a share of the catalog
  std::vector<ScenarioMetrics> per_scenario;
};

// Action split: per-scenario shares over critical decisions, averaged over
// the scenarios that had at least one. Diversity counts every decision.
inline EvalMetrics compute_metrics(const std::vector<EpisodeRecord>& episodes, int num_actions) {
  EvalMetrics m;
  m.num_scenarios = static_cast<int>(episodes.size());
  m.num_actions = num_actions;
  if (episodes.empty()) return m;
  double st = 0.0, div = 0.0;
  double split[4] = {0, 0, 0, 0};
  int with_critical = 0;
  for (const auto& e : episodes) {
    ScenarioMetrics s;
    s.id = e.scenario_id;
    s.survival_time = e.survival_time;
    s.blackout = e.blackout;
    s.total_reward = e.total_reward;
    s.decisions = static_cast<int>(e.decisions.size());
    int count[4] = {0, 0, 0, 0};
    std::set<int> unique;
    for (const auto& d : e.decisions) {
      unique.insert(d.action_id);
      if (!d.critical) continue;
      ++s.critical_decisions;
      ++count[static_cast<int>(d.kind)];
    }
    s.unique_actions = static_cast<int>(unique.size());
    if (s.critical_decisions > 0) {
      const double n = s.critical_decisions;
      s.pct_do_nothing = 100.0 * count[0] / n;
      s.pct_removal = 100.0 * count[1] / n;
      s.pct_reconnect = 100.0 * count[2] / n;
      s.pct_redispatch = 100.0 * count[3] / n;
      split[0] += s.pct_do_nothing;
      split[1] += s.pct_removal;
      split[2] += s.pct_reconnect;
      split[3] += s.pct_redispatch;
      ++with_critical;
    }
    st += s.survival_time;
    div += s.unique_actions;
    m.per_scenario.push_back(s);
  }
  m.avg_survival_time = st / m.num_scenarios;
  if (with_critical > 0) {
    m.pct_do_nothing = split[0] / with_critical;
    m.pct_removal = split[1] / with_critical;
    m.pct_reconnect = split[2] / with_critical;
    m.pct_redispatch = split[3] / with_critical;
  }
  m.action_diversity = div / m.num_scenarios;
  m.action_diversity_pct = num_actions > 0 ? 100.0 * m.action_diversity / num_actions : 0.0;
  return m;
}

inline nlohmann::json to_json(const EvalMetrics& m) {
  nlohmann::json per = nlohmann::json::array();
  for (const auto& s : m.per_scenario)
    per.push_back({{"id", s.id},
                   {"survival_time", s.survival_time},
                   {"blackout", s.blackout},
                   {"total_reward", s.total_reward},
                   {"decisions", s.decisions},
                   {"critical_decisions", s.critical_decisions},
                   {"pct_do_nothing", s.pct_do_nothing},
                   {"pct_reconnect", s.pct_reconnect},
                   {"pct_removal", s.pct_removal},
                   {"pct_redispatch", s.pct_redispatch},
                   {"unique_actions", s.unique_actions}});
  return {{"num_scenarios", m.num_scenarios},
          {"num_actions", m.num_actions},
          {"avg_survival_time", m.avg_survival_time},
          {"pct_do_nothing", m.pct_do_nothing},
          {"pct_reconnect", m.pct_reconnect},
          {"pct_removal", m.pct_removal},
          {"pct_redispatch", m.pct_redispatch},
          {"action_diversity", m.action_diversity},
          {"action_diversity_pct", m.action_diversity_pct},
          {"per_scenario", per}};
}

struct EvalResult {
  EvalMetrics metrics;
  std::vector<EpisodeTrace> traces;
  std::vector<EpisodeRecord> episodes;
};

// Greedy rollout of every scenario (epsilon forced to zero).
inline EvalResult evaluate(const Agent& agent, const std::vector<Scenario>& scenarios, const Grid& grid,
                           const EnvConfig& cfg) {
  Environment env(grid, cfg);
  Rng rng = Rng::stream(0, "evaluation");
  EvalResult out;
  for (const auto& sc : scenarios) {
    env.reset(sc);
    EpisodeRecord rec;
    rec.scenario_id = sc.id;
    while (!env.done() && env.state().step < env.horizon()) {
      const Decision d = agent.act(env, 0.0, rng);
      rec.decisions.push_back({d.action_id, env.catalog().at(d.action_id).kind, d.critical});
      rec.total_reward += env.step(d.action_id).reward;
    }
    rec.survival_time = survival_time(env.trace());
    rec.blackout = env.trace().blackout;
    out.traces.push_back(env.trace());
    out.episodes.push_back(std::move(rec));
  }
  out.metrics = compute_metrics(out.episodes, env.catalog().size());
  return out;
}

}  // namespace blackout
