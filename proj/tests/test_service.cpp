#include <gtest/gtest.h>

#include <thread>

#include "blackout/service.hpp"
#include "support.hpp"

using namespace blackout;
using namespace testing_support;

namespace {

Session scripted_session(std::optional<NetworkParams> params = std::nullopt) {
  Grid g = scripted_grid();
  std::vector<Scenario> sc{scripted_scenario(g)};
  EnvConfig cfg = scripted_config();
  cfg.gen_actions = {2, 5.0};
  return Session(std::move(g), std::move(sc), cfg, std::move(params));
}

int api_status(const std::function<void()>& f) {
  try {
    f();
  } catch (const ApiError& e) {
    return e.status();
  }
  return 200;
}

// Server on an ephemeral port for the lifetime of the fixture.
class Http : public ::testing::Test {
protected:
  void SetUp() override {
    mount_api(server_, session_);
    port_ = server_.bind_to_any_port("127.0.0.1");
    ASSERT_GT(port_, 0);
    thread_ = std::thread([this] { server_.listen_after_bind(); });
    server_.wait_until_ready();
  }
  void TearDown() override {
    server_.stop();
    if (thread_.joinable()) thread_.join();
  }
  httplib::Client client() const {
    httplib::Client c("127.0.0.1", port_);
    c.set_read_timeout(10, 0);
    return c;
  }
  static nlohmann::json body(const httplib::Result& r) { return nlohmann::json::parse(r->body); }

  Session session_ = scripted_session();
  httplib::Server server_;
  std::thread thread_;
  int port_ = 0;
};

}  // namespace

TEST(Session, WhatifLeavesStateUntouched) {
  Session s = scripted_session();
  for (int i = 0; i < 10; ++i) s.step(0);
  const auto before = s.state_hash();
  const auto legal = s.legal()["legal"];
  for (const auto& id : legal) s.whatif(id.get<int>());
  s.suggest();
  s.effective();
  EXPECT_EQ(s.state_hash(), before);
  EXPECT_EQ(s.state()["step"], 11);
}

TEST(Session, WhatifRemovalMatchesFixturePrediction) {
  Session s = scripted_session();
  for (int i = 0; i < 10; ++i) s.step(0);
  const auto j = s.whatif(3);
  const auto m = j["predicted_margins"].get<std::vector<double>>();
  EXPECT_NEAR(m[1], 100.0 / 110.0, 1e-12);
  EXPECT_NEAR(m[2], 0.0, 1e-12);
  const auto none = s.whatif(0);
  EXPECT_EQ(none["predicted_margins"], s.state()["risk_margin"]);
}

TEST(Session, ErrorsCarryStatusCodes) {
  Session s = scripted_session();
  EXPECT_EQ(api_status([&] { s.step(-1); }), 400);
  EXPECT_EQ(api_status([&] { s.whatif(9); }), 400);
  EXPECT_EQ(api_status([&] { s.reset("no_such_scenario"); }), 404);
  // Reconnect of a connected line.
  EXPECT_EQ(api_status([&] { s.step(4); }), 409);
  try {
    s.step(4);
  } catch (const ApiError& e) {
    EXPECT_EQ(e.code(), "illegal_action");
    EXPECT_NE(std::string(e.what()).find("already connected"), std::string::npos);
  }
  s.step(3);
  try {
    s.step(6);
    FAIL();
  } catch (const ApiError& e) {
    EXPECT_NE(std::string(e.what()).find("cooldown"), std::string::npos);
  }
  EXPECT_EQ(s.action_log(), std::vector<int>{3});
}

TEST(Session, StepsEndAtBlackoutAndResetRestarts) {
  Session s = scripted_session();
  nlohmann::json last;
  for (int i = 0; i < 14; ++i) last = s.step(0);
  EXPECT_TRUE(last["blackout"].get<bool>());
  EXPECT_EQ(last["survival_time"], 15);
  EXPECT_EQ(api_status([&] { s.step(0); }), 409);
  const auto fresh = s.reset("overload_ramp");
  EXPECT_EQ(fresh["step"], 1);
  EXPECT_TRUE(s.action_log().empty());
  EXPECT_EQ(s.metrics()["steps"], 0);
}

TEST(Session, ReplayOfActionLogReproducesTrace) {
  Session s = scripted_session();
  const std::vector<int> plan = {0, 0, 0, 0, 0, 0, 0, 0, 0, 0, 3, 0, 0, 0, 0, 7, 0, 0};
  for (int id : plan) s.step(id);
  const EpisodeTrace live = s.trace();

  Environment env(s.grid(), s.config());
  env.reset(s.scenarios().front());
  for (int id : s.action_log()) env.step(id);
  const EpisodeTrace& again = env.trace();
  ASSERT_EQ(again.rows.size(), live.rows.size());
  for (std::size_t i = 0; i < live.rows.size(); ++i) {
    EXPECT_EQ(again.rows[i].step, live.rows[i].step);
    EXPECT_EQ(again.rows[i].action_id, live.rows[i].action_id);
    EXPECT_EQ(again.rows[i].reward, live.rows[i].reward);
    EXPECT_EQ(again.rows[i].max_rho, live.rows[i].max_rho);
    EXPECT_EQ(again.rows[i].failures, live.rows[i].failures);
  }
  const auto served = s.state();
  EXPECT_EQ(served["line_flow"], to_json(env.state())["line_flow"]);
  EXPECT_EQ(served["cooldown"], to_json(env.state())["cooldown"]);
}

TEST(Session, SuggestRanksByEstimateWithoutNetwork) {
  Session s = scripted_session();
  for (int i = 0; i < 10; ++i) s.step(0);
  const auto j = s.suggest();
  EXPECT_FALSE(j["agent_loaded"].get<bool>());
  const auto& items = j["suggestions"];
  ASSERT_FALSE(items.empty());
  EXPECT_LE(items.size(), 5u);
  EXPECT_EQ(items[0]["action_id"], 3);
  for (std::size_t i = 1; i < items.size(); ++i)
    if (!items[i]["reward_estimate"].is_null())
      EXPECT_GE(items[i - 1]["reward_estimate"].get<double>(), items[i]["reward_estimate"].get<double>());
}

TEST(Session, SuggestUsesLoadedNetwork) {
  Grid g = scripted_grid();
  EnvConfig cfg = scripted_config();
  cfg.gen_actions = {2, 5.0};
  Environment env(g, cfg);
  Rng rng = Rng::stream(1, "init");
  const int features = env.observation_size() / cfg.kappa;
  NetworkParams p = NetworkParams::init({cfg.kappa, features, 16, 16, env.catalog().size()}, rng);
  Session s = scripted_session(p);
  const auto j = s.suggest();
  EXPECT_TRUE(j["agent_loaded"].get<bool>());
  for (const auto& it : j["suggestions"]) EXPECT_TRUE(it["q"].is_number());

  NetworkParams wrong = NetworkParams::init({cfg.kappa, features, 16, 16, 7}, rng);
  EXPECT_EQ(api_status([&] { scripted_session(wrong); }), 400);
}

TEST(Session, ConcurrentReadsDuringSteps) {
  Session s = scripted_session();
  std::atomic<bool> stop{false};
  std::atomic<int> reads{0};
  std::vector<std::thread> readers;
  for (int t = 0; t < 4; ++t)
    readers.emplace_back([&] {
      while (!stop) {
        const auto st = s.state();
        EXPECT_EQ(st["window"].size(), 2u);
        s.whatif(0);
        ++reads;
      }
    });
  // Each step waits for fresh reads so readers and the writer interleave.
  for (int i = 0; i < 12; ++i) {
    const int seen = reads.load();
    while (reads.load() < seen + 4) std::this_thread::yield();
    s.step(0);
  }
  stop = true;
  for (auto& r : readers) r.join();
  EXPECT_GT(reads.load(), 0);
  EXPECT_EQ(s.state()["step"], 13);
}

TEST_F(Http, StateAfterReset) {
  auto c = client();
  const auto r = c.Post("/api/reset", R"({"scenario_id":"overload_ramp"})", "application/json");
  ASSERT_TRUE(r);
  EXPECT_EQ(r->status, 200);
  const auto st = c.Get("/api/state");
  ASSERT_TRUE(st);
  const auto j = body(st);
  EXPECT_EQ(j["step"], 1);
  EXPECT_EQ(j["risk_margin"].size(), 3u);
  EXPECT_FALSE(j["critical"].get<bool>());
  EXPECT_EQ(j["cooldown"].size(), 3u);
}

TEST_F(Http, WhatifDoesNotAdvance) {
  auto c = client();
  const auto r = c.Post("/api/whatif", R"({"action_id":3})", "application/json");
  ASSERT_TRUE(r);
  EXPECT_EQ(r->status, 200);
  const auto j = body(r);
  EXPECT_TRUE(j.contains("predicted_flows"));
  EXPECT_TRUE(j.contains("predicted_margins"));
  EXPECT_TRUE(j.contains("reward_estimate"));
  EXPECT_EQ(body(c.Get("/api/state"))["step"], 1);
}

TEST_F(Http, StepAndErrors) {
  auto c = client();
  auto ok = c.Post("/api/step", R"({"action_id":0})", "application/json");
  ASSERT_TRUE(ok);
  EXPECT_EQ(ok->status, 200);
  EXPECT_EQ(body(ok)["next_state"]["step"], 2);

  auto illegal = c.Post("/api/step", R"({"action_id":4})", "application/json");
  ASSERT_TRUE(illegal);
  EXPECT_EQ(illegal->status, 409);
  EXPECT_EQ(body(illegal)["code"], "illegal_action");
  EXPECT_TRUE(body(illegal)["message"].is_string());

  auto bad = c.Post("/api/step", "not json", "application/json");
  ASSERT_TRUE(bad);
  EXPECT_EQ(bad->status, 400);
  EXPECT_EQ(body(bad)["code"], "bad_request");

  auto range = c.Post("/api/whatif", R"({"action_id":1000})", "application/json");
  ASSERT_TRUE(range);
  EXPECT_EQ(range->status, 400);

  auto missing = c.Post("/api/reset", R"({"scenario_id":"nope"})", "application/json");
  ASSERT_TRUE(missing);
  EXPECT_EQ(missing->status, 404);
  EXPECT_EQ(body(missing)["code"], "unknown_scenario");

  auto route = c.Get("/api/nowhere");
  ASSERT_TRUE(route);
  EXPECT_EQ(route->status, 404);
  EXPECT_EQ(body(route)["code"], "not_found");
}

TEST_F(Http, ReadEndpoints) {
  auto c = client();
  const auto legal = c.Get("/api/actions/legal");
  ASSERT_TRUE(legal);
  EXPECT_EQ(legal->status, 200);
  EXPECT_EQ(body(legal)["legal"][0], 0);

  const auto eff = c.Get("/api/actions/effective");
  ASSERT_TRUE(eff);
  EXPECT_EQ(eff->status, 200);

  const auto manifest = c.Get("/api/actions/manifest");
  ASSERT_TRUE(manifest);
  EXPECT_EQ(body(manifest).size(), 9u);

  const auto sug = c.Get("/api/agent/suggest");
  ASSERT_TRUE(sug);
  EXPECT_LE(body(sug)["suggestions"].size(), 5u);

  c.Post("/api/step", R"({"action_id":0})", "application/json");
  const auto met = c.Get("/api/metrics");
  ASSERT_TRUE(met);
  EXPECT_EQ(body(met)["steps"], 1);
  EXPECT_EQ(body(met)["action_log"], nlohmann::json::array({0}));
}

TEST_F(Http, FloatsRoundTripExactly) {
  auto c = client();
  for (int i = 0; i < 10; ++i) c.Post("/api/step", R"({"action_id":0})", "application/json");
  const auto j = body(c.Get("/api/state"));
  for (const char* key : {"line_flow", "risk_margin"}) {
    const auto served = j[key].get<std::vector<double>>();
    const auto local = session_.state()[key].get<std::vector<double>>();
    EXPECT_EQ(served, local) << key;
  }
}
