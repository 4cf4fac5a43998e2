#pragma once

#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <numbers>
#include <string>
#include <vector>

#include "blackout/env.hpp"
#include "blackout/grid.hpp"
#include "blackout/rng.hpp"
#include "blackout/scenario.hpp"

namespace blackout {

enum class StressProfile { Calm, Daily, StressRamp };

inline const char* to_string(StressProfile p) {
  switch (p) {
    case StressProfile::Calm: return "calm";
    case StressProfile::Daily: return "daily";
    case StressProfile::StressRamp: return "stress-ramp";
  }
  return "?";
}

inline StressProfile profile_from_string(const std::string& s) {
  if (s == "calm") return StressProfile::Calm;
  if (s == "daily") return StressProfile::Daily;
  if (s == "stress-ramp" || s == "stress") return StressProfile::StressRamp;
  throw ScenarioError("unknown stress profile '" + s + "'");
}

struct GenerateOptions {
  int count = 1;
  int length = 288;
  StressProfile profile = StressProfile::Daily;
  std::uint64_t seed = 0;
  double eta = 0.95;        // critical threshold the profiles are built around
  int day = 288;            // steps per sinusoid period (5-minute resolution)
  double noise = 0.02;      // bounded uniform noise amplitude
  double gen_share = 0.7;   // demand share scheduled on non-slack generators
};

struct GeneratedScenario {
  Scenario scenario;
  StressProfile profile = StressProfile::Daily;
  int stress_step = 0;      // first step with max rho >= eta under DoNothing; 0 if none
  double peak_margin = 0.0; // max rho under DoNothing over the scenario
};

namespace detail {

// DoNothing rollout: (first step reaching eta or 0, peak margin, blackout).
struct Rollout {
  int first_critical = 0;
  double peak = 0.0;
  bool blackout = false;
};

inline Rollout do_nothing_rollout(const Grid& grid, const Scenario& sc, double eta) {
  EnvConfig cfg;
  cfg.eta = eta;
  cfg.horizon = sc.length();
  Environment env(grid, cfg);
  Rollout r;
  try {
    env.reset(sc);
  } catch (const EnvError&) {
    r.blackout = true;
    return r;
  }
  auto observe = [&] {
    const double m = env.state().max_margin();
    r.peak = std::max(r.peak, m);
    if (!r.first_critical && is_critical(env.state(), cfg)) r.first_critical = env.state().step;
  };
  observe();
  while (!env.done() && env.state().step < env.horizon()) {
    const auto out = env.step(ActionCatalog::kDoNothing);
    if (out.blackout) {
      r.blackout = true;
      if (!r.first_critical) r.first_critical = env.state().step;
      break;
    }
    observe();
  }
  return r;
}

}  // namespace detail

// Build one scenario from per-step demand multipliers (already scaled).
inline Scenario scenario_from_profile(const Grid& grid, const std::vector<Vec>& demand, double gen_share,
                                      std::string id) {
  const int G = grid.num_generators();
  const int slack = grid.slack_generator();
  double cap = 0.0;
  for (int j = 0; j < G; ++j)
    if (j != slack) cap += grid.generators[j].p_max;
  Scenario sc;
  sc.id = std::move(id);
  for (const Vec& d : demand) {
    Vec g = Vec::Zero(G);
    const double total = d.sum();
    for (int j = 0; j < G; ++j) {
      if (j == slack) continue;
      g[j] = cap > 0.0 ? gen_share * total * grid.generators[j].p_max / cap : 0.0;
    }
    g[slack] = std::max(0.0, total - g.sum());
    sc.loads.push_back(d);
    sc.gens.push_back(g);
  }
  return sc;
}

// Synthetic demand: base weight x (1 + a sin(2 pi n / day + phase) + noise),
// scaled so the all-lines-on margins sit below the profile's target. The
// stress-ramp profile adds a linear ramp that is extended until a DoNothing
// rollout reaches eta.
inline std::vector<GeneratedScenario> generate_scenarios(const Grid& grid, const GenerateOptions& opt) {
  if (opt.length < 1) throw ScenarioError("scenario length must be >= 1");
  if (opt.count < 1) throw ScenarioError("scenario count must be >= 1");
  if (opt.day < 1) throw ScenarioError("day length must be >= 1");
  Rng rng = Rng::stream(opt.seed, "scenario");
  const int D = grid.num_loads();
  const int T = opt.length;
  const double amp = opt.profile == StressProfile::Calm ? 0.05 : opt.profile == StressProfile::Daily ? 0.15 : 0.1;
  const double target = opt.profile == StressProfile::Daily ? 0.9 * opt.eta : 0.75 * opt.eta;
  const LineStatus all_on = grid.all_lines_on();

  std::vector<GeneratedScenario> out;
  for (int i = 0; i < opt.count; ++i) {
    char name[64];
    std::snprintf(name, sizeof name, "%s_%03d", to_string(opt.profile), i);
    Vec weight(D);
    for (int k = 0; k < D; ++k) weight[k] = rng.uniform(0.5, 1.5);
    const double phase = rng.uniform(0.0, 2.0 * std::numbers::pi);
    std::vector<Vec> unit(T, Vec(D));
    for (int n = 0; n < T; ++n)
      for (int k = 0; k < D; ++k) {
        const double s = std::sin(2.0 * std::numbers::pi * (n + 1) / opt.day + phase);
        unit[n][k] = std::max(0.0, weight[k] * (1.0 + amp * s + rng.uniform(-opt.noise, opt.noise)));
      }

    // Peak margin and capacity use per unit of scale (flows are linear in scale).
    const int ramp_start = opt.profile == StressProfile::StressRamp ? std::max(1, (6 * T) / 10) : T;
    const int ramp_end = std::min(T, ramp_start + std::max(1, T / 10));
    const Scenario unit_sc = scenario_from_profile(grid, unit, opt.gen_share, name);
    double peak_unit = 0.0, cap_unit = 0.0;
    for (int n = 0; n < ramp_start; ++n) {
      const auto sol = solve_dc(grid, bus_injections(grid, unit_sc.gens[n], unit_sc.loads[n]), all_on);
      peak_unit = std::max(peak_unit, risk_margins(grid, sol.flows, all_on).maxCoeff());
      for (int j = 0; j < grid.num_generators(); ++j)
        if (grid.generators[j].p_max > 0.0)
          cap_unit = std::max(cap_unit, unit_sc.gens[n][j] / grid.generators[j].p_max);
    }
    double scale = 1.0;
    if (peak_unit > 0.0) scale = target / peak_unit;
    if (cap_unit > 0.0) scale = std::min(scale, 0.9 / cap_unit);

    double ramp = opt.profile == StressProfile::StressRamp ? std::max(1.05, 1.2 / target) : 1.0;
    GeneratedScenario gs;
    gs.profile = opt.profile;
    for (int attempt = 0; attempt < 40; ++attempt) {
      std::vector<Vec> demand(T);
      for (int n = 0; n < T; ++n) {
        double r = 1.0;
        if (n >= ramp_start) r = n >= ramp_end ? ramp : 1.0 + (ramp - 1.0) * (n - ramp_start + 1) / (ramp_end - ramp_start + 1);
        demand[n] = unit[n] * scale * r;
      }
      gs.scenario = scenario_from_profile(grid, demand, opt.gen_share, name);
      const auto roll = detail::do_nothing_rollout(grid, gs.scenario, opt.eta);
      gs.peak_margin = roll.peak;
      gs.stress_step = roll.first_critical;
      if (opt.profile == StressProfile::StressRamp) {
        if (roll.first_critical >= ramp_start + 1 && roll.first_critical > 0) break;
        if (roll.first_critical > 0 && roll.first_critical <= ramp_start) {
          scale *= 0.8;  // already critical before the ramp
          continue;
        }
        ramp *= 1.15;
      } else {
        if (roll.first_critical == 0 && !roll.blackout) break;
        scale *= 0.8;
      }
    }
    out.push_back(std::move(gs));
  }
  return out;
}

inline nlohmann::json manifest_json(const std::vector<GeneratedScenario>& v, const GenerateOptions& opt) {
  nlohmann::json items = nlohmann::json::array();
  for (const auto& g : v)
    items.push_back({{"id", g.scenario.id},
                     {"profile", to_string(g.profile)},
                     {"length", g.scenario.length()},
                     {"stress_step", g.stress_step},
                     {"peak_margin", g.peak_margin}});
  return {{"seed", opt.seed}, {"eta", opt.eta}, {"day", opt.day}, {"scenarios", items}};
}

// <dir>/<id>.csv for each scenario plus <dir>/manifest.json.
inline void write_generated(const std::filesystem::path& dir, const Grid& grid,
                            const std::vector<GeneratedScenario>& v, const GenerateOptions& opt) {
  std::filesystem::create_directories(dir);
  for (const auto& g : v) {
    std::ofstream os(dir / (g.scenario.id + ".csv"), std::ios::trunc);
    if (!os) throw ScenarioError("cannot write scenario " + g.scenario.id);
    write_scenario(grid, g.scenario, os);
  }
  std::ofstream m(dir / "manifest.json", std::ios::trunc);
  m << manifest_json(v, opt).dump(2) << '\n';
}

}  // namespace blackout
