#include <gtest/gtest.h>

#include <sys/wait.h>

#include <cstdlib>
#include <fstream>
#include <sstream>

#include "blackout/cli.hpp"
#include "schema_check.hpp"
#include "support.hpp"

using namespace blackout;
using namespace testing_support;

namespace {

struct CliRun {
  int code = 0;
  std::string out, err;
};

CliRun cli(std::vector<std::string> args) {
  args.insert(args.begin(), "blackout");
  std::ostringstream out, err;
  CliRun r;
  r.code = run_cli(args, out, err);
  r.out = out.str();
  r.err = err.str();
  return r;
}

std::string slurp(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  std::stringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

// Run config for the scripted triangle with absolute paths.
fs::path write_config(const fs::path& dir, nlohmann::json extra = nlohmann::json::object()) {
  nlohmann::json j{{"grid", data_path("triangle.json")},
                   {"scenarios", {data_path("scenarios/scripted")}},
                   {"seed", 3},
                   {"steps", 150},
                   {"policy", "physics-guided"},
                   {"env", {{"kappa", 2}, {"horizon", 30}, {"gen_actions", {{"k", 2}}}}},
                   {"dqn", {{"batch", 8}, {"replay", {{"capacity", 512}}}}},
                   {"output_dir", (dir / "run").string()}};
  j.merge_patch(extra);
  const fs::path p = dir / "run.json";
  std::ofstream(p) << j.dump(2);
  return p;
}

// First 1-based step whose all-lines-on flows reach eta, by a dense
// full-Laplacian solve; 0 if none.
int oracle_first_critical(const Grid& g, const Scenario& sc, double eta) {
  const int slack = g.slack_generator();
  for (int n = 0; n < sc.length(); ++n) {
    Vec inj = Vec::Zero(g.num_buses());
    for (int j = 0; j < g.num_generators(); ++j)
      if (j != slack) inj[g.gen_bus_index(j)] += sc.gens[n][j];
    for (int d = 0; d < g.num_loads(); ++d) inj[g.load_bus_index(d)] -= sc.loads[n][d];
    const Vec f = oracle_flows(g, inj, g.all_lines_on());
    double m = 0.0;
    for (int l = 0; l < g.num_lines(); ++l) m = std::max(m, std::abs(f[l]) / g.lines[l].flow_limit);
    if (m >= eta) return n + 1;
  }
  return 0;
}

}  // namespace

TEST(Generator, CalmProfileNeverReachesEta) {
  const Grid g = scripted_grid();
  GenerateOptions opt;
  opt.count = 3;
  opt.length = 200;
  opt.day = 96;
  opt.profile = StressProfile::Calm;
  opt.seed = 11;
  for (const auto& gs : generate_scenarios(g, opt)) {
    EXPECT_EQ(oracle_first_critical(g, gs.scenario, opt.eta), 0) << gs.scenario.id;
    EnvConfig cfg;
    cfg.horizon = opt.length;
    Environment env(g, cfg);
    env.reset(gs.scenario);
    while (!env.done() && env.state().step < env.horizon()) env.step(ActionCatalog::kDoNothing);
    EXPECT_FALSE(env.trace().blackout);
    EXPECT_EQ(survival_time(env.trace()), opt.length);
    for (const auto& row : gs.scenario.loads) EXPECT_GE(row.minCoeff(), 0.0);
  }
}

TEST(Generator, StressRampReachesEtaAtRecordedStep) {
  const Grid g = scripted_grid();
  GenerateOptions opt;
  opt.count = 3;
  opt.length = 120;
  opt.day = 48;
  opt.profile = StressProfile::StressRamp;
  opt.seed = 12;
  for (const auto& gs : generate_scenarios(g, opt)) {
    EXPECT_GT(gs.stress_step, 0) << gs.scenario.id;
    EXPECT_EQ(oracle_first_critical(g, gs.scenario, opt.eta), gs.stress_step) << gs.scenario.id;
    EXPECT_GE(gs.peak_margin, opt.eta);
  }
}

TEST(Generator, SameSeedSameFiles) {
  const Grid g = load_grid(data_path("grid36.json"));
  GenerateOptions opt;
  opt.count = 2;
  opt.length = 60;
  opt.seed = 5;
  const auto a = temp_dir("gen_a"), b = temp_dir("gen_b"), c = temp_dir("gen_c");
  write_generated(a, g, generate_scenarios(g, opt), opt);
  write_generated(b, g, generate_scenarios(g, opt), opt);
  opt.seed = 6;
  write_generated(c, g, generate_scenarios(g, opt), opt);
  for (const char* f : {"daily_000.csv", "daily_001.csv", "manifest.json"}) {
    ASSERT_TRUE(fs::exists(a / f)) << f;
    EXPECT_EQ(slurp(a / f), slurp(b / f)) << f;
  }
  EXPECT_NE(slurp(a / "daily_000.csv"), slurp(c / "daily_000.csv"));
  const auto back = load_scenario_dir(g, a);
  EXPECT_EQ(back.size(), 2u);
}

TEST(Generator, RejectsEmptyLength) {
  GenerateOptions opt;
  opt.length = 0;
  EXPECT_THROW(generate_scenarios(scripted_grid(), opt), ScenarioError);
  EXPECT_THROW(profile_from_string("stormy"), ScenarioError);
}

TEST(RunConfig, ResolvesRelativePathsAndHashes) {
  const RunConfig c = load_run_config(data_path("run_triangle.json"));
  EXPECT_EQ(fs::canonical(c.grid), fs::canonical(data_path("triangle.json")));
  ASSERT_EQ(c.scenarios.size(), 1u);
  EXPECT_EQ(c.seed, 7u);
  EXPECT_EQ(c.steps, 500);
  EXPECT_EQ(c.env.gen_actions.k, 2);
  EXPECT_EQ(config_hash(c), config_hash(load_run_config(data_path("run_triangle.json"))));
  RunConfig d = c;
  d.seed = 8;
  EXPECT_NE(config_hash(c), config_hash(d));
  RunConfig moved = c;
  moved.output_dir = "/elsewhere";
  EXPECT_EQ(config_hash(c), config_hash(moved));
  EXPECT_EQ(config_hash(c).size(), 16u);
}

TEST(RunConfig, RejectsBadInputs) {
  const auto dir = temp_dir("config_bad");
  EXPECT_THROW(run_config_from_json({{"seed", 1}}), ConfigError);
  EXPECT_THROW(run_config_from_json({{"grid", (dir / "nope.json").string()}}), ConfigError);
  EXPECT_THROW(run_config_from_json({{"grid", data_path("triangle.json")}, {"scenarios", {(dir / "none").string()}}}),
               ConfigError);
  EXPECT_THROW(run_config_from_json({{"grid", data_path("triangle.json")}, {"mu_line_sweep", {0.5, -1.0}}}),
               ConfigError);
  EXPECT_THROW(run_config_from_json({{"grid", data_path("triangle.json")}, {"env", {{"nu", 0.99}}}}), ConfigError);
  EXPECT_THROW(run_config_from_json({{"grid", data_path("triangle.json")}, {"seed", "x"}}), ConfigError);
  std::ofstream(dir / "broken.json") << "{ not json";
  EXPECT_THROW(load_run_config(dir / "broken.json"), ConfigError);
}

TEST(Cli, EvalDoNothingEmitsSchemaValidMetrics) {
  const auto r = cli({"eval", "--grid", data_path("triangle.json"), "--scenarios", data_path("scenarios/scripted"),
                      "--policy", "do-nothing", "--horizon", "30"});
  ASSERT_EQ(r.code, 0) << r.err;
  const auto report = nlohmann::json::parse(r.out);
  const auto schema = nlohmann::json::parse(slurp(fs::path(BLACKOUT_SOURCE_DIR) / "schemas/metrics.schema.json"));
  const auto errors = schema_errors(schema, report);
  EXPECT_TRUE(errors.empty()) << errors.front();
  EXPECT_EQ(report["avg_survival_time"], 15.0);
  EXPECT_EQ(report["pct_do_nothing"], 100.0);
  EXPECT_EQ(report["policy"], "do-nothing");
}

TEST(Cli, SchemaCheckerCatchesDrift) {
  const auto schema = nlohmann::json::parse(slurp(fs::path(BLACKOUT_SOURCE_DIR) / "schemas/metrics.schema.json"));
  EvalMetrics m;
  m.num_actions = 7;
  nlohmann::json ok = to_json(m);
  ok["policy"] = "do-nothing";
  EXPECT_TRUE(schema_errors(schema, ok).empty());
  auto missing = ok;
  missing.erase("pct_removal");
  EXPECT_FALSE(schema_errors(schema, missing).empty());
  auto extra = ok;
  extra["surprise"] = 1;
  EXPECT_FALSE(schema_errors(schema, extra).empty());
  auto range = ok;
  range["pct_removal"] = 101.0;
  EXPECT_FALSE(schema_errors(schema, range).empty());
  auto type = ok;
  type["num_actions"] = 1.5;
  EXPECT_FALSE(schema_errors(schema, type).empty());
}

TEST(Cli, EvalWritesMetricsAndTraces) {
  const auto dir = temp_dir("cli_eval_out");
  const auto r = cli({"eval", "--grid", data_path("triangle.json"), "--scenarios", data_path("scenarios/scripted"),
                      "--policy", "reconnection", "--horizon", "30", "--out", dir.string()});
  ASSERT_EQ(r.code, 0) << r.err;
  EXPECT_TRUE(fs::exists(dir / "metrics.json"));
  const std::string trace = slurp(dir / "traces" / "overload_ramp.csv");
  EXPECT_EQ(trace.substr(0, trace.find('\n')), "step,action_id,reward,max_rho,failures,blackout");
}

TEST(Cli, BadFlagsExitTwo) {
  EXPECT_EQ(cli({"eval", "--bogus"}).code, 2);
  EXPECT_EQ(cli({}).code, 2);
  EXPECT_EQ(cli({"frobnicate"}).code, 2);
  EXPECT_EQ(cli({"train"}).code, 2);
  EXPECT_EQ(cli({"train", "--config", "/nonexistent/run.json"}).code, 2);
  const auto r = cli({"sens", "--grid", data_path("triangle.json"), "--what"});
  EXPECT_EQ(r.code, 2);
  EXPECT_NE(r.err.find("sens"), std::string::npos);
  EXPECT_EQ(cli({"--help"}).code, 0);
}

TEST(Cli, RuntimeFailuresExitOne) {
  EXPECT_EQ(cli({"eval", "--grid", data_path("triangle.json"), "--policy", "do-nothing"}).code, 1);
  EXPECT_EQ(cli({"eval", "--grid", data_path("triangle.json"), "--scenarios", data_path("scenarios/scripted"),
                 "--policy", "physics-guided"})
                .code,
            1);
  EXPECT_EQ(cli({"eval", "--grid", data_path("triangle.json"), "--scenarios", data_path("scenarios/scripted"),
                 "--policy", "greedy"})
                .code,
            1);
  const auto r = cli({"whatif", "--grid", data_path("triangle.json"), "--scenarios", data_path("scenarios/scripted"),
                      "--action", "99"});
  EXPECT_EQ(r.code, 1);
  EXPECT_NE(r.err.find("bad_action"), std::string::npos);
}

TEST(Cli, TrainWritesArtifactsThatEvalAccepts) {
  const auto dir = temp_dir("cli_train");
  const auto cfg = write_config(dir);
  const auto r = cli({"train", "--config", cfg.string()});
  ASSERT_EQ(r.code, 0) << r.err;
  const fs::path run = dir / "run";
  for (const char* f : {"checkpoint.bin", "checkpoint.bin.json", "train_log.csv", "actions.csv", "run_config.json"})
    EXPECT_TRUE(fs::exists(run / f)) << f;
  const Checkpoint ck = load_checkpoint(run / "checkpoint.bin");
  EXPECT_EQ(ck.online.dims.actions, 9);
  EXPECT_EQ(ck.meta["training_step"], 150);
  EXPECT_EQ(ck.meta["config_hash"], config_hash(load_run_config(run / "run_config.json")));
  const auto e = cli({"eval", "--config", cfg.string(), "--policy", "physics-guided", "--checkpoint",
                      (run / "checkpoint.bin").string()});
  EXPECT_EQ(e.code, 0) << e.err;
  EXPECT_EQ(nlohmann::json::parse(e.out)["num_actions"], 9);

  // Same checkpoint against a catalog without redispatch: 7 actions.
  const auto other = write_config(temp_dir("cli_train_mismatch"), {{"env", {{"gen_actions", nullptr}}}});
  const auto bad = cli({"eval", "--config", other.string(), "--policy", "physics-guided", "--checkpoint",
                        (run / "checkpoint.bin").string()});
  EXPECT_EQ(bad.code, 1);
  EXPECT_NE(bad.err.find("mismatch"), std::string::npos);
}

TEST(Cli, TrainSweepWritesOneDirectoryPerMu) {
  const auto dir = temp_dir("cli_sweep");
  const auto cfg = write_config(dir, {{"steps", 40}, {"mu_line_sweep", {0.0, 0.5}}});
  const auto r = cli({"train", "--config", cfg.string()});
  ASSERT_EQ(r.code, 0) << r.err;
  for (const char* sub : {"mu_0", "mu_0.5"}) {
    EXPECT_TRUE(fs::exists(dir / "run" / sub / "checkpoint.bin")) << sub;
    const auto rc = nlohmann::json::parse(slurp(dir / "run" / sub / "run_config.json"));
    EXPECT_EQ(rc["env"]["mu_line"], std::string(sub) == "mu_0" ? 0.0 : 0.5);
  }
}

TEST(Cli, SensDumpsTriangleMatrices) {
  const auto dir = temp_dir("cli_sens");
  const auto r = cli({"sens", "--grid", data_path("triangle.json"), "--out", dir.string()});
  ASSERT_EQ(r.code, 0) << r.err;
  std::ifstream in(dir / "ptdf.csv");
  std::string header, row;
  std::getline(in, header);
  EXPECT_EQ(header, "line,bus_1,bus_2,bus_3");
  std::getline(in, row);
  const auto cells = split_csv_line(row);
  ASSERT_EQ(cells.size(), 4u);
  // Injection at bus 2, withdrawn at the slack: 2/3 flows directly 2 -> 1.
  EXPECT_NEAR(std::stod(cells[2]), -2.0 / 3.0, 1e-11);
  EXPECT_NEAR(std::stod(cells[1]), 0.0, 1e-15);

  const auto open = cli({"sens", "--grid", data_path("triangle.json"), "--status", "1,1,0"});
  ASSERT_EQ(open.code, 0) << open.err;
  EXPECT_NE(open.out.find("nan"), std::string::npos);
  EXPECT_EQ(cli({"sens", "--grid", data_path("triangle.json"), "--status", "1,1"}).code, 1);
}

TEST(Cli, WhatifPreviewsRemovalAtOverload) {
  const auto r = cli({"whatif", "--grid", data_path("triangle.json"), "--scenarios", data_path("scenarios/scripted"),
                      "--step", "11", "--action", "3"});
  ASSERT_EQ(r.code, 0) << r.err;
  const auto j = nlohmann::json::parse(r.out);
  EXPECT_EQ(j["step"], 11);
  const auto f = j["predicted_flows"].get<std::vector<double>>();
  ASSERT_EQ(f.size(), 3u);
  EXPECT_NEAR(f[0], -50.0, 1e-9);
  EXPECT_NEAR(f[1], 100.0, 1e-9);
  EXPECT_NEAR(f[2], 0.0, 1e-9);
  const double expect = (1.0 - 25.0 / 36.0) + (1.0 - 100.0 / 121.0) + 1.0;
  EXPECT_NEAR(j["reward_estimate"].get<double>(), expect, 1e-9);
}

TEST(Binary, ExitCodesFromTheRealExecutable) {
  auto run = [](const std::string& args) {
    const std::string cmd = std::string(BLACKOUT_CLI) + " " + args + " >/dev/null 2>&1";
    const int st = std::system(cmd.c_str());
    return WIFEXITED(st) ? WEXITSTATUS(st) : -1;
  };
  EXPECT_EQ(run("eval --grid " + data_path("triangle.json") + " --scenarios " + data_path("scenarios/scripted") +
                " --policy do-nothing"),
            0);
  EXPECT_EQ(run("eval --unknown-flag"), 2);
  EXPECT_EQ(run("eval --grid " + data_path("triangle.json") + " --policy do-nothing"), 1);
}
