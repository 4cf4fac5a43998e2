#pragma once

#include <CLI11.hpp>

#include <atomic>
#include <csignal>
#include <filesystem>
#include <fstream>
#include <iomanip>
#include <iostream>
#include <sstream>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "blackout/agents.hpp"
#include "blackout/checkpoint.hpp"
#include "blackout/generate.hpp"
#include "blackout/scenario.hpp"
#include "blackout/sensitivity.hpp"
#include "blackout/service.hpp"

namespace blackout {

class ConfigError : public std::runtime_error {
public:
  using std::runtime_error::runtime_error;
};

namespace fs = std::filesystem;

// Everything a run needs. Relative paths resolve against the config file.
struct RunConfig {
  fs::path grid;
  std::vector<fs::path> scenarios;  // directories or single CSV files
  EnvConfig env;
  DqnConfig dqn;
  PolicyKind policy = PolicyKind::PhysicsGuided;
  std::uint64_t seed = 0;
  std::int64_t steps = 0;
  std::vector<double> mu_line_sweep;  // one run per value; empty runs env.mu_line once
  fs::path output_dir = "out";
};

inline nlohmann::json to_json(const RunConfig& c) {
  std::vector<std::string> sc;
  for (const auto& p : c.scenarios) sc.push_back(p.generic_string());
  return {{"grid", c.grid.generic_string()}, {"scenarios", sc},
          {"env", to_json(c.env)},           {"dqn", to_json(c.dqn)},
          {"policy", to_string(c.policy)},   {"seed", c.seed},
          {"steps", c.steps},                {"mu_line_sweep", c.mu_line_sweep},
          {"output_dir", c.output_dir.generic_string()}};
}

inline RunConfig run_config_from_json(const nlohmann::json& j, const fs::path& base = {}) {
  auto resolve = [&](const std::string& p) {
    fs::path q(p);
    return q.is_relative() && !base.empty() ? base / q : q;
  };
  RunConfig c;
  try {
    if (!j.contains("grid")) throw ConfigError("config: 'grid' is required");
    c.grid = resolve(j.at("grid").get<std::string>());
    if (j.contains("scenarios")) {
      const auto& s = j.at("scenarios");
      if (s.is_string())
        c.scenarios.push_back(resolve(s.get<std::string>()));
      else
        for (const auto& x : s) c.scenarios.push_back(resolve(x.get<std::string>()));
    }
    if (j.contains("env")) c.env = env_config_from_json(j.at("env"));
    if (j.contains("dqn")) c.dqn = dqn_config_from_json(j.at("dqn"));
    if (j.contains("policy")) c.policy = policy_from_string(j.at("policy").get<std::string>());
    c.seed = j.value("seed", c.seed);
    c.steps = j.value("steps", c.steps);
    if (j.contains("mu_line_sweep")) c.mu_line_sweep = j.at("mu_line_sweep").get<std::vector<double>>();
    if (j.contains("output_dir")) c.output_dir = resolve(j.at("output_dir").get<std::string>());
  } catch (const nlohmann::json::exception& e) {
    throw ConfigError(std::string("config: ") + e.what());
  } catch (const EnvError& e) {
    throw ConfigError(e.what());
  } catch (const AgentError& e) {
    throw ConfigError(e.what());
  }
  if (!fs::exists(c.grid)) throw ConfigError("config: grid file " + c.grid.string() + " does not exist");
  for (const auto& p : c.scenarios)
    if (!fs::exists(p)) throw ConfigError("config: scenario path " + p.string() + " does not exist");
  for (double mu : c.mu_line_sweep)
    if (!(mu >= 0.0)) throw ConfigError("config: mu_line values must be >= 0");
  return c;
}

inline RunConfig load_run_config(const fs::path& path) {
  std::ifstream in(path);
  if (!in) throw ConfigError("cannot open config " + path.string());
  nlohmann::json j;
  try {
    j = nlohmann::json::parse(in);
  } catch (const nlohmann::json::exception& e) {
    throw ConfigError("config " + path.string() + ": " + e.what());
  }
  return run_config_from_json(j, path.parent_path());
}

// Identifies the experiment; the output location is left out so the same
// run written to two directories carries the same hash.
inline std::string config_hash(const RunConfig& c) {
  nlohmann::json j = to_json(c);
  j.erase("output_dir");
  const std::string s = j.dump();
  std::uint64_t h = 1469598103934665603ULL;
  for (unsigned char ch : s) {
    h ^= ch;
    h *= 1099511628211ULL;
  }
  std::ostringstream os;
  os << std::hex << std::setw(16) << std::setfill('0') << h;
  return os.str();
}

inline std::vector<Scenario> load_scenarios(const Grid& grid, const std::vector<fs::path>& paths) {
  if (paths.empty()) throw ConfigError("no scenario paths given");
  std::vector<Scenario> out;
  for (const auto& p : paths) {
    auto v = load_scenario_dir(grid, p);
    out.insert(out.end(), std::make_move_iterator(v.begin()), std::make_move_iterator(v.end()));
  }
  return out;
}

// Matrix dump with a header row, 12 significant digits; NaN marks entries
// that are undefined for the topology.
inline void write_matrix_csv(std::ostream& os, const std::string& corner, const std::vector<std::string>& cols,
                             const std::vector<std::string>& rows, const Mat& m) {
  os << corner;
  for (const auto& c : cols) os << ',' << c;
  os << '\n' << std::setprecision(12);
  for (Eigen::Index i = 0; i < m.rows(); ++i) {
    os << rows[i];
    for (Eigen::Index j = 0; j < m.cols(); ++j) {
      os << ',';
      if (std::isnan(m(i, j)))
        os << "nan";
      else
        os << m(i, j);
    }
    os << '\n';
  }
}

// Line status from a file or an inline list: 0/1 per line in id order,
// comma or newline separated; a non-numeric first row is a header.
inline LineStatus parse_status(const Grid& grid, const std::string& arg) {
  std::string text = arg;
  if (fs::is_regular_file(arg)) {
    std::ifstream in(arg);
    std::stringstream ss;
    ss << in.rdbuf();
    text = ss.str();
  }
  std::vector<std::string> cells;
  std::istringstream lines(text);
  std::string line;
  bool first = true;
  while (std::getline(lines, line)) {
    auto row = split_csv_line(line);
    if (row.empty()) continue;
    if (first && !row[0].empty() && row[0].find_first_not_of("01 ") != std::string::npos) {
      first = false;
      continue;
    }
    first = false;
    for (auto& c : row)
      if (!c.empty()) cells.push_back(c);
  }
  if (static_cast<int>(cells.size()) != grid.num_lines())
    throw ConfigError("status has " + std::to_string(cells.size()) + " entries, grid has " +
                      std::to_string(grid.num_lines()) + " lines");
  LineStatus st;
  for (const auto& c : cells) {
    if (c != "0" && c != "1") throw ConfigError("status entries must be 0 or 1, got '" + c + "'");
    st.push_back(c == "1");
  }
  return st;
}

namespace detail {

inline void write_text(const fs::path& p, const std::string& s) {
  std::ofstream os(p, std::ios::trunc | std::ios::binary);
  if (!os) throw ConfigError("cannot write " + p.string());
  os << s;
}

inline std::string format_mu(double mu) {
  std::ostringstream os;
  os << mu;
  return os.str();
}

inline std::atomic<httplib::Server*> g_server{nullptr};

inline void stop_server(int) {
  if (auto* s = g_server.load()) s->stop();
}

}  // namespace detail

struct TrainArgs {
  std::string config;
  std::int64_t steps = -1;
  std::int64_t seed = -1;
  std::string out;
  std::string policy;
};

inline int cmd_train(const TrainArgs& a, std::ostream& out) {
  RunConfig rc = load_run_config(a.config);
  if (a.steps >= 0) rc.steps = a.steps;
  if (a.seed >= 0) rc.seed = static_cast<std::uint64_t>(a.seed);
  if (!a.out.empty()) rc.output_dir = a.out;
  if (!a.policy.empty()) rc.policy = policy_from_string(a.policy);
  const Grid grid = load_grid(rc.grid.string());
  const auto scenarios = load_scenarios(grid, rc.scenarios);

  std::vector<double> sweep = rc.mu_line_sweep;
  if (sweep.empty()) sweep.push_back(rc.env.mu_line);
  for (double mu : sweep) {
    RunConfig run = rc;
    run.env.mu_line = mu;
    run.mu_line_sweep = {mu};
    const fs::path dir = sweep.size() > 1 ? rc.output_dir / ("mu_" + detail::format_mu(mu)) : rc.output_dir;
    fs::create_directories(dir);

    TrainOptions opt{run.policy, run.steps, run.seed, run.dqn};
    TrainResult res = train(grid, scenarios, run.env, opt);
    res.model.meta = {{"training_step", res.env_steps},
                      {"critical_steps", res.critical_steps},
                      {"updates", res.updates},
                      {"rejected_updates", res.rejected_updates},
                      {"epsilon", res.final_epsilon},
                      {"schedule",
                       {{"beta", res.final_beta},
                        {"learning_rate", res.model.optimizer.rate()},
                        {"optimizer_step", res.model.optimizer.step}}},
                      {"config_hash", config_hash(run)},
                      {"seed", run.seed},
                      {"policy", to_string(run.policy)},
                      {"mu_line", mu}};
    save_checkpoint(dir / "checkpoint.bin", res.model);
    std::ostringstream log;
    write_train_log(log, res.episodes);
    detail::write_text(dir / "train_log.csv", log.str());
    Environment env(grid, run.env);
    std::ostringstream manifest;
    write_manifest(manifest, grid, env.catalog());
    detail::write_text(dir / "actions.csv", manifest.str());
    detail::write_text(dir / "run_config.json", to_json(run).dump(2) + "\n");
    out << "trained " << to_string(run.policy) << " mu_line=" << mu << ": " << res.env_steps << " steps, "
        << res.episodes.size() << " episodes, " << res.updates << " updates -> " << dir.string() << '\n';
    if (res.containment_violations != 0)
      throw AgentError("exploration left the candidate set " + std::to_string(res.containment_violations) + " time(s)");
  }
  return 0;
}

struct EvalArgs {
  std::string config, grid, policy = "do-nothing", checkpoint, out;
  std::vector<std::string> scenarios;
  int horizon = 0;
};

inline int cmd_eval(const EvalArgs& a, std::ostream& out) {
  RunConfig rc;
  if (!a.config.empty()) rc = load_run_config(a.config);
  if (!a.grid.empty()) rc.grid = a.grid;
  if (!a.scenarios.empty()) rc.scenarios.assign(a.scenarios.begin(), a.scenarios.end());
  if (a.horizon > 0) rc.env.horizon = a.horizon;
  if (rc.grid.empty()) throw ConfigError("eval needs --grid or --config");
  const Grid grid = load_grid(rc.grid.string());
  const auto scenarios = load_scenarios(grid, rc.scenarios);
  const PolicyKind kind = policy_from_string(a.policy);

  std::optional<Checkpoint> ck;
  Environment probe(grid, rc.env);
  if (kind == PolicyKind::PhysicsGuided || kind == PolicyKind::RandomExplore) {
    if (a.checkpoint.empty()) throw ConfigError("policy " + a.policy + " needs --checkpoint");
    ck = load_checkpoint(a.checkpoint);
    if (ck->online.dims.actions != probe.catalog().size() || ck->online.dims.input() != probe.observation_size())
      throw CheckpointError("checkpoint dimension mismatch: file has " + std::to_string(ck->online.dims.actions) +
                            " actions, catalog has " + std::to_string(probe.catalog().size()));
  }
  const Agent agent(kind, ck ? &ck->online : nullptr, rc.dqn.top_k);
  const EvalResult res = evaluate(agent, scenarios, grid, rc.env);
  nlohmann::json report = to_json(res.metrics);
  report["policy"] = to_string(kind);
  if (!a.out.empty()) {
    const fs::path dir = a.out;
    fs::create_directories(dir / "traces");
    detail::write_text(dir / "metrics.json", report.dump(2) + "\n");
    for (const auto& t : res.traces) {
      std::ostringstream os;
      write_trace_csv(t, os);
      detail::write_text(dir / "traces" / (t.scenario_id + ".csv"), os.str());
    }
  }
  out << report.dump(2) << '\n';
  return 0;
}

struct GenArgs {
  std::string grid, out, profile = "daily";
  int count = 1, length = 288, day = 288;
  std::uint64_t seed = 0;
  double eta = 0.95;
};

inline int cmd_gen(const GenArgs& a, std::ostream& out) {
  const Grid grid = load_grid(a.grid);
  GenerateOptions opt;
  opt.count = a.count;
  opt.length = a.length;
  opt.profile = profile_from_string(a.profile);
  opt.seed = a.seed;
  opt.eta = a.eta;
  opt.day = a.day;
  const auto v = generate_scenarios(grid, opt);
  write_generated(a.out, grid, v, opt);
  out << "wrote " << v.size() << " " << a.profile << " scenario(s) to " << a.out << '\n';
  return 0;
}

struct SensArgs {
  std::string grid, status, out;
};

inline int cmd_sens(const SensArgs& a, std::ostream& out) {
  const Grid grid = load_grid(a.grid);
  const LineStatus st = a.status.empty() ? grid.all_lines_on() : parse_status(grid, a.status);
  const SensitivitySet s = compute_sensitivities(grid, st);
  std::vector<std::string> buses, lines, outages;
  for (int b : grid.buses) buses.push_back("bus_" + std::to_string(b));
  for (const auto& l : grid.lines) {
    lines.push_back(std::to_string(l.id));
    outages.push_back("out_" + std::to_string(l.id));
  }
  std::ostringstream ptdf, lodf;
  write_matrix_csv(ptdf, "line", buses, lines, s.ptdf);
  write_matrix_csv(lodf, "line", outages, lines, s.lodf);
  if (!a.out.empty()) {
    fs::create_directories(a.out);
    detail::write_text(fs::path(a.out) / "ptdf.csv", ptdf.str());
    detail::write_text(fs::path(a.out) / "lodf.csv", lodf.str());
  } else {
    out << "# ptdf\n" << ptdf.str() << "\n# lodf\n" << lodf.str();
  }
  return 0;
}

struct WhatifArgs {
  std::string config, grid, scenario_id, checkpoint;
  std::vector<std::string> scenarios;
  int step = 1;
  int action = 0;
};

inline std::optional<NetworkParams> load_params_for(const std::string& path) {
  if (path.empty()) return std::nullopt;
  return load_checkpoint(path).online;
}

inline int cmd_whatif(const WhatifArgs& a, std::ostream& out) {
  RunConfig rc;
  if (!a.config.empty()) rc = load_run_config(a.config);
  if (!a.grid.empty()) rc.grid = a.grid;
  if (!a.scenarios.empty()) rc.scenarios.assign(a.scenarios.begin(), a.scenarios.end());
  if (rc.grid.empty()) throw ConfigError("whatif needs --grid or --config");
  Grid grid = load_grid(rc.grid.string());
  auto scenarios = load_scenarios(grid, rc.scenarios);
  Session session(std::move(grid), std::move(scenarios), rc.env);
  if (!a.scenario_id.empty()) session.reset(a.scenario_id);
  while (session.state()["step"].get<int>() < a.step) session.step(ActionCatalog::kDoNothing);
  out << session.whatif(a.action).dump(2) << '\n';
  return 0;
}

struct ServeArgs {
  std::string config, grid, checkpoint, host = "127.0.0.1", static_dir;
  std::vector<std::string> scenarios;
  int port = 8080;
};

inline int cmd_serve(const ServeArgs& a, std::ostream& out) {
  RunConfig rc;
  if (!a.config.empty()) rc = load_run_config(a.config);
  if (!a.grid.empty()) rc.grid = a.grid;
  if (!a.scenarios.empty()) rc.scenarios.assign(a.scenarios.begin(), a.scenarios.end());
  if (rc.grid.empty()) throw ConfigError("serve needs --grid or --config");
  Grid grid = load_grid(rc.grid.string());
  auto scenarios = load_scenarios(grid, rc.scenarios);
  auto params = load_params_for(a.checkpoint);
  Session session(std::move(grid), std::move(scenarios), rc.env, std::move(params));
  httplib::Server server;
  mount_api(server, session);
  if (!a.static_dir.empty() && !server.set_mount_point("/", a.static_dir))
    throw ConfigError("static directory " + a.static_dir + " not found");
  if (!server.bind_to_port(a.host, a.port))
    throw std::runtime_error("cannot bind " + a.host + ":" + std::to_string(a.port) + " (port busy?)");
  out << "serving on http://" << a.host << ':' << a.port << "/api" << std::endl;
  detail::g_server = &server;
  std::signal(SIGINT, detail::stop_server);
  std::signal(SIGTERM, detail::stop_server);
  server.listen_after_bind();
  detail::g_server = nullptr;
  return 0;
}

// Entry point; returns the process exit code (2 usage, 1 runtime failure).
inline int run_cli(const std::vector<std::string>& args, std::ostream& out = std::cout,
                   std::ostream& err = std::cerr) {
  CLI::App app{"Blackout mitigation workbench: DC power flow, cascades, physics-guided deep Q-learning"};
  app.name(args.empty() ? "blackout" : fs::path(args[0]).filename().string());
  app.require_subcommand(1);

  TrainArgs ta;
  auto* train_cmd = app.add_subcommand("train", "train a deep Q agent");
  train_cmd->add_option("--config", ta.config, "run configuration JSON")->required()->check(CLI::ExistingFile);
  train_cmd->add_option("--steps", ta.steps, "environment step budget (overrides config)")->check(CLI::NonNegativeNumber);
  train_cmd->add_option("--seed", ta.seed, "seed (overrides config)")->check(CLI::NonNegativeNumber);
  train_cmd->add_option("--out", ta.out, "output directory (overrides config)");
  train_cmd->add_option("--policy", ta.policy, "physics-guided | random-explore");

  EvalArgs ea;
  auto* eval_cmd = app.add_subcommand("eval", "evaluate a policy and emit metrics JSON");
  eval_cmd->add_option("--config", ea.config, "run configuration JSON")->check(CLI::ExistingFile);
  eval_cmd->add_option("--grid", ea.grid, "grid JSON")->check(CLI::ExistingFile);
  eval_cmd->add_option("--scenarios", ea.scenarios, "scenario directory or CSV file")->check(CLI::ExistingPath);
  eval_cmd->add_option("--policy", ea.policy, "do-nothing | reconnection | physics-guided | random-explore");
  eval_cmd->add_option("--checkpoint", ea.checkpoint, "checkpoint for trained policies")->check(CLI::ExistingFile);
  eval_cmd->add_option("--horizon", ea.horizon, "episode horizon override")->check(CLI::PositiveNumber);
  eval_cmd->add_option("--out", ea.out, "directory for metrics.json and traces");

  GenArgs ga;
  auto* gen_cmd = app.add_subcommand("gen-scenarios", "generate synthetic demand scenarios");
  gen_cmd->add_option("--grid", ga.grid, "grid JSON")->required()->check(CLI::ExistingFile);
  gen_cmd->add_option("--out", ga.out, "output directory")->required();
  gen_cmd->add_option("--count", ga.count, "number of scenarios")->check(CLI::PositiveNumber);
  gen_cmd->add_option("--length", ga.length, "steps per scenario")->check(CLI::PositiveNumber);
  gen_cmd->add_option("--profile", ga.profile, "calm | daily | stress-ramp")
      ->check(CLI::IsMember({"calm", "daily", "stress-ramp"}));
  gen_cmd->add_option("--seed", ga.seed, "seed");
  gen_cmd->add_option("--eta", ga.eta, "critical threshold")->check(CLI::Range(0.0, 1.0));
  gen_cmd->add_option("--day", ga.day, "steps per daily cycle")->check(CLI::PositiveNumber);

  SensArgs sa;
  auto* sens_cmd = app.add_subcommand("sens", "dump PTDF and LODF matrices");
  sens_cmd->add_option("--grid", sa.grid, "grid JSON")->required()->check(CLI::ExistingFile);
  sens_cmd->add_option("--status", sa.status, "line status CSV file or inline 0/1 list (default all on)");
  sens_cmd->add_option("--out", sa.out, "directory for ptdf.csv and lodf.csv (default stdout)");

  WhatifArgs wa;
  auto* whatif_cmd = app.add_subcommand("whatif", "preview one action without applying it");
  whatif_cmd->add_option("--config", wa.config, "run configuration JSON")->check(CLI::ExistingFile);
  whatif_cmd->add_option("--grid", wa.grid, "grid JSON")->check(CLI::ExistingFile);
  whatif_cmd->add_option("--scenarios", wa.scenarios, "scenario directory or CSV file")->check(CLI::ExistingPath);
  whatif_cmd->add_option("--scenario", wa.scenario_id, "scenario id (default first)");
  whatif_cmd->add_option("--step", wa.step, "advance with DoNothing to this step first")->check(CLI::PositiveNumber);
  whatif_cmd->add_option("--action", wa.action, "action id")->required()->check(CLI::NonNegativeNumber);

  ServeArgs sv;
  auto* serve_cmd = app.add_subcommand("serve", "run the HTTP session service");
  serve_cmd->add_option("--config", sv.config, "run configuration JSON")->check(CLI::ExistingFile);
  serve_cmd->add_option("--grid", sv.grid, "grid JSON")->check(CLI::ExistingFile);
  serve_cmd->add_option("--scenarios", sv.scenarios, "scenario directory or CSV file")->check(CLI::ExistingPath);
  serve_cmd->add_option("--checkpoint", sv.checkpoint, "checkpoint for agent suggestions")->check(CLI::ExistingFile);
  serve_cmd->add_option("--host", sv.host, "bind address");
  serve_cmd->add_option("--port", sv.port, "port")->check(CLI::Range(1, 65535));
  serve_cmd->add_option("--static", sv.static_dir, "console bundle directory served at /");

  std::vector<const char*> argv;
  const std::string prog = args.empty() ? "blackout" : args[0];
  argv.push_back(prog.c_str());
  for (std::size_t i = 1; i < args.size(); ++i) argv.push_back(args[i].c_str());
  try {
    app.parse(static_cast<int>(argv.size()), argv.data());
  } catch (const CLI::CallForHelp&) {
    out << app.help();
    return 0;
  } catch (const CLI::ParseError& e) {
    err << "error: " << e.what() << "\n\n" << app.help();
    return 2;
  }

  try {
    if (train_cmd->parsed()) return cmd_train(ta, out);
    if (eval_cmd->parsed()) return cmd_eval(ea, out);
    if (gen_cmd->parsed()) return cmd_gen(ga, out);
    if (sens_cmd->parsed()) return cmd_sens(sa, out);
    if (whatif_cmd->parsed()) return cmd_whatif(wa, out);
    if (serve_cmd->parsed()) return cmd_serve(sv, out);
  } catch (const ApiError& e) {
    err << "error: " << e.code() << ": " << e.what() << '\n';
    return 1;
  } catch (const std::exception& e) {
    err << "error: " << e.what() << '\n';
    return 1;
  }
  err << app.help();
  return 2;
}

}  // namespace blackout
