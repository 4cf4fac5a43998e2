#pragma once

#include <httplib.h>
// <resolv.h>, pulled in by httplib, defines _res as a macro; Eigen uses it
// as a parameter name.
#ifdef _res
#undef _res
#endif

#include <cstdint>
#include <mutex>
#include <optional>
#include <shared_mutex>
#include <sstream>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "blackout/agents.hpp"
#include "blackout/env.hpp"

namespace blackout {

// Error surfaced to API clients as {code, message} with an HTTP status.
class ApiError : public std::runtime_error {
public:
  ApiError(int status, std::string code, const std::string& message)
      : std::runtime_error(message), status_(status), code_(std::move(code)) {}
  int status() const { return status_; }
  const std::string& code() const { return code_; }

private:
  int status_;
  std::string code_;
};

inline nlohmann::json vec_json(const Vec& v) { return std::vector<double>(v.data(), v.data() + v.size()); }

// One interactive episode. Mutations (step, reset) take the lock exclusively;
// reads share it.
class Session {
public:
  Session(Grid grid, std::vector<Scenario> scenarios, EnvConfig cfg,
          std::optional<NetworkParams> params = std::nullopt)
      : grid_(std::move(grid)), scenarios_(std::move(scenarios)), env_(grid_, std::move(cfg)),
        params_(std::move(params)) {
    if (scenarios_.empty()) throw ApiError(400, "no_scenarios", "session needs at least one scenario");
    if (params_ && (params_->dims.actions != env_.catalog().size() ||
                    params_->dims.input() != env_.observation_size()))
      throw ApiError(400, "bad_checkpoint", "checkpoint dimensions do not match the grid and action catalog");
    reset_locked(scenarios_.front().id);
  }

  nlohmann::json reset(const std::string& scenario_id) {
    std::unique_lock lock(mu_);
    reset_locked(scenario_id.empty() ? scenarios_.front().id : scenario_id);
    return state_locked();
  }

  nlohmann::json state() const {
    std::shared_lock lock(mu_);
    return state_locked();
  }

  nlohmann::json legal() const {
    std::shared_lock lock(mu_);
    nlohmann::json ids = legal_actions(env_.state(), env_.catalog(), grid_);
    return {{"step", env_.state().step}, {"legal", ids}};
  }

  nlohmann::json effective() const {
    std::shared_lock lock(mu_);
    const auto sens = sensitivities_for(grid_, env_.state());
    const EffectiveSet eff = effective_line_set(env_.state(), env_.catalog(), grid_, sens ? &*sens : nullptr);
    nlohmann::json cands = nlohmann::json::array();
    for (const auto& c : eff.candidates) {
      nlohmann::json m = std::isfinite(c.predicted_lmax_margin) ? nlohmann::json(c.predicted_lmax_margin) : nlohmann::json(nullptr);
      cands.push_back({{"action_id", c.action_id},
                       {"detail", describe(grid_, env_.catalog().at(c.action_id))},
                       {"predicted_lmax_margin", m}});
    }
    nlohmann::json lmax = eff.l_max >= 0 ? nlohmann::json(grid_.lines[eff.l_max].id) : nlohmann::json(nullptr);
    return {{"step", env_.state().step}, {"l_max", lmax}, {"sensitivities", sens.has_value()}, {"candidates", cands}};
  }

  // Preview only; the session is not touched.
  nlohmann::json whatif(int id) const {
    std::shared_lock lock(mu_);
    const Action& a = checked_action(id);
    const SystemState& s = env_.state();
    if (!is_legal(grid_, s, a)) throw ApiError(409, "illegal_action", legality_reason(a));
    const auto sens = sensitivities_for(grid_, s);
    const SensitivitySet* sp = sens ? &*sens : nullptr;
    const auto flows = predict_flows(grid_, s, a, sp);
    const EnvConfig& c = env_.config();
    nlohmann::json out{{"action_id", id}, {"detail", describe(grid_, a)}, {"step", s.step}};
    if (!flows) {
      out["predicted_flows"] = nullptr;
      out["predicted_margins"] = nullptr;
      out["reward_estimate"] = nullptr;
      out["undefined_reason"] = "removal islands the network";
      return out;
    }
    out["predicted_flows"] = vec_json(*flows);
    out["predicted_margins"] = vec_json(risk_margins(grid_, *flows, status_after(s, a)));
    out["reward_estimate"] = reward_estimate(a, s, grid_, sp, c.mu_line, c.mu_gen);
    return out;
  }

  nlohmann::json step(int id) {
    std::unique_lock lock(mu_);
    const Action& a = checked_action(id);
    if (env_.done()) throw ApiError(409, "episode_finished", "episode is over; POST /api/reset to start another");
    if (env_.state().step >= env_.horizon()) throw ApiError(409, "scenario_exhausted", "scenario has no more steps");
    if (!is_legal(grid_, env_.state(), a)) throw ApiError(409, "illegal_action", legality_reason(a));
    const bool critical = is_critical(env_.state(), env_.config());
    const StepOutcome out = env_.step(id);
    log_.push_back(id);
    total_reward_ += out.reward;
    ++steps_;
    if (critical) ++critical_counts_[static_cast<int>(a.kind)];
    nlohmann::json failures = nlohmann::json::array();
    for (int l : out.cascade_failures) failures.push_back(grid_.lines[l].id);
    return {{"action_id", id},
            {"reward", out.reward},
            {"done", out.done},
            {"blackout", out.blackout},
            {"blackout_cause", out.blackout_cause},
            {"cascade_failures", failures},
            {"survival_time", out.done ? nlohmann::json(survival_time(env_.trace())) : nlohmann::json(nullptr)},
            {"next_state", state_locked()}};
  }

  nlohmann::json suggest(int k = 5) const {
    std::shared_lock lock(mu_);
    const SystemState& s = env_.state();
    const EnvConfig& c = env_.config();
    const auto sens = sensitivities_for(grid_, s);
    const SensitivitySet* sp = sens ? &*sens : nullptr;
    std::vector<RankedAction> ranked;
    if (params_) {
      ranked = top_legal_by_q(forward(*params_, env_.observation()).q, s, env_.catalog(), grid_, sp, c.mu_line,
                              c.mu_gen, k);
    } else {
      // No network loaded: rank legal actions by reward estimate alone.
      for (int id : legal_actions(s, env_.catalog(), grid_))
        ranked.push_back({id, 0.0, reward_estimate(env_.catalog().at(id), s, grid_, sp, c.mu_line, c.mu_gen)});
      std::stable_sort(ranked.begin(), ranked.end(),
                       [](const auto& a, const auto& b) { return a.estimate > b.estimate; });
      if (static_cast<int>(ranked.size()) > k) ranked.resize(k);
    }
    nlohmann::json items = nlohmann::json::array();
    for (const auto& r : ranked) {
      nlohmann::json est = std::isfinite(r.estimate) ? nlohmann::json(r.estimate) : nlohmann::json(nullptr);
      items.push_back({{"action_id", r.action_id},
                       {"detail", describe(grid_, env_.catalog().at(r.action_id))},
                       {"q", params_ ? nlohmann::json(r.q) : nlohmann::json(nullptr)},
                       {"reward_estimate", est}});
    }
    return {{"step", s.step}, {"agent_loaded", params_.has_value()}, {"suggestions", items}};
  }

  nlohmann::json metrics() const {
    std::shared_lock lock(mu_);
    nlohmann::json max_rho = nlohmann::json::array();
    for (const auto& r : env_.trace().rows) max_rho.push_back(r.max_rho);
    return {{"scenario_id", env_.trace().scenario_id},
            {"steps", steps_},
            {"total_reward", total_reward_},
            {"done", env_.done()},
            {"blackout", env_.trace().blackout},
            {"survival_time", survival_time(env_.trace())},
            {"critical_decisions",
             {{"do_nothing", critical_counts_[0]},
              {"removal", critical_counts_[1]},
              {"reconnect", critical_counts_[2]},
              {"redispatch", critical_counts_[3]}}},
            {"max_rho_history", max_rho},
            {"action_log", log_}};
  }

  nlohmann::json manifest() const { return manifest_json(grid_, env_.catalog()); }

  std::string manifest_csv() const {
    std::ostringstream os;
    write_manifest(os, grid_, env_.catalog());
    return os.str();
  }

  // FNV-1a over the serialized state, window included.
  std::uint64_t state_hash() const {
    std::shared_lock lock(mu_);
    const std::string s = state_locked().dump();
    std::uint64_t h = 1469598103934665603ULL;
    for (unsigned char c : s) {
      h ^= c;
      h *= 1099511628211ULL;
    }
    return h;
  }

  std::vector<int> action_log() const {
    std::shared_lock lock(mu_);
    return log_;
  }

  std::string scenario_id() const {
    std::shared_lock lock(mu_);
    return env_.trace().scenario_id;
  }

  EpisodeTrace trace() const {
    std::shared_lock lock(mu_);
    return env_.trace();
  }

  const Grid& grid() const { return grid_; }
  const std::vector<Scenario>& scenarios() const { return scenarios_; }
  const EnvConfig& config() const { return env_.config(); }

private:
  const Action& checked_action(int id) const {
    if (id < 0 || id >= env_.catalog().size())
      throw ApiError(400, "bad_action", "action id " + std::to_string(id) + " out of range [0, " +
                                            std::to_string(env_.catalog().size()) + ")");
    return env_.catalog().at(id);
  }

  std::string legality_reason(const Action& a) const {
    const SystemState& s = env_.state();
    std::string what = describe(grid_, a);
    switch (a.kind) {
      case ActionKind::Remove:
      case ActionKind::Reconnect:
        if (a.kind == ActionKind::Remove && !s.line_status[a.line]) return what + ": line is already disconnected";
        if (a.kind == ActionKind::Reconnect && s.line_status[a.line]) return what + ": line is already connected";
        return what + ": line on cooldown for " + std::to_string(s.cooldown[a.line]) + " more step(s)";
      case ActionKind::Redispatch:
        return what + ": a generator would leave its [p_min, p_max] range";
      case ActionKind::DoNothing: break;
    }
    return what + ": not applicable";
  }

  void reset_locked(const std::string& id) {
    const Scenario* sc = nullptr;
    for (const auto& s : scenarios_)
      if (s.id == id) sc = &s;
    if (!sc) throw ApiError(404, "unknown_scenario", "no scenario with id '" + id + "'");
    try {
      env_.reset(*sc);
    } catch (const EnvError& e) {
      throw ApiError(422, "scenario_rejected", e.what());
    }
    log_.clear();
    total_reward_ = 0.0;
    steps_ = 0;
    for (int& c : critical_counts_) c = 0;
  }

  nlohmann::json state_locked() const {
    const SystemState& s = env_.state();
    const EnvConfig& c = env_.config();
    nlohmann::json j = to_json(s);
    nlohmann::json window = nlohmann::json::array();
    for (int i = 0; i < env_.window().kappa(); ++i) window.push_back(vec_json(env_.window().block(i)));
    std::vector<int> line_ids;
    for (const auto& l : grid_.lines) line_ids.push_back(l.id);
    j["line_ids"] = line_ids;
    j["window"] = window;
    j["critical"] = is_critical(s, c);
    j["calm"] = is_calm(s, c);
    j["max_margin"] = s.max_margin();
    j["eta"] = c.eta;
    j["nu"] = c.nu;
    j["scenario_id"] = env_.trace().scenario_id;
    j["horizon"] = env_.horizon();
    j["done"] = env_.done();
    j["redispatch_offset"] = vec_json(env_.redispatch_offset());
    return j;
  }

  Grid grid_;
  std::vector<Scenario> scenarios_;
  Environment env_;
  std::optional<NetworkParams> params_;
  mutable std::shared_mutex mu_;
  std::vector<int> log_;
  double total_reward_ = 0.0;
  int steps_ = 0;
  int critical_counts_[4] = {0, 0, 0, 0};
};

namespace detail {

inline void send_json(httplib::Response& res, int status, const nlohmann::json& body) {
  res.status = status;
  res.set_content(body.dump(), "application/json");
}

inline void send_error(httplib::Response& res, int status, const std::string& code, const std::string& msg) {
  send_json(res, status, {{"code", code}, {"message", msg}});
}

inline int action_id_from(const httplib::Request& req) {
  nlohmann::json body;
  try {
    body = nlohmann::json::parse(req.body);
  } catch (const nlohmann::json::exception&) {
    throw ApiError(400, "bad_request", "body must be JSON with an integer action_id");
  }
  if (!body.is_object() || !body.contains("action_id") || !body["action_id"].is_number_integer())
    throw ApiError(400, "bad_request", "body must be JSON with an integer action_id");
  return body["action_id"].get<int>();
}

template <class F>
httplib::Server::Handler guarded(F f) {
  return [f](const httplib::Request& req, httplib::Response& res) {
    try {
      send_json(res, 200, f(req));
    } catch (const ApiError& e) {
      send_error(res, e.status(), e.code(), e.what());
    } catch (const std::exception& e) {
      send_error(res, 500, "internal", e.what());
    }
  };
}

}  // namespace detail

// Registers the /api routes on `server`; `session` must outlive it.
inline void mount_api(httplib::Server& server, Session& session) {
  using detail::guarded;
  server.Get("/api/state", guarded([&](const httplib::Request&) { return session.state(); }));
  server.Get("/api/actions/legal", guarded([&](const httplib::Request&) { return session.legal(); }));
  server.Get("/api/actions/effective", guarded([&](const httplib::Request&) { return session.effective(); }));
  server.Get("/api/actions/manifest", guarded([&](const httplib::Request&) { return session.manifest(); }));
  server.Get("/api/agent/suggest", guarded([&](const httplib::Request&) { return session.suggest(); }));
  server.Get("/api/metrics", guarded([&](const httplib::Request&) { return session.metrics(); }));
  server.Post("/api/whatif",
              guarded([&](const httplib::Request& req) { return session.whatif(detail::action_id_from(req)); }));
  server.Post("/api/step",
              guarded([&](const httplib::Request& req) { return session.step(detail::action_id_from(req)); }));
  server.Post("/api/reset", guarded([&](const httplib::Request& req) {
                std::string id;
                if (!req.body.empty()) {
                  nlohmann::json body;
                  try {
                    body = nlohmann::json::parse(req.body);
                  } catch (const nlohmann::json::exception&) {
                    throw ApiError(400, "bad_request", "body must be JSON");
                  }
                  if (body.contains("scenario_id")) {
                    if (!body["scenario_id"].is_string())
                      throw ApiError(400, "bad_request", "scenario_id must be a string");
                    id = body["scenario_id"].get<std::string>();
                  }
                }
                return session.reset(id);
              }));
  server.set_error_handler([](const httplib::Request& req, httplib::Response& res) {
    if (res.body.empty() && req.path.rfind("/api/", 0) == 0)
      detail::send_error(res, res.status, res.status == 404 ? "not_found" : "error", "no route " + req.method + " " + req.path);
  });
}

}  // namespace blackout
