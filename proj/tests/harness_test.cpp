// Copyright 2026 The agentserve Authors.
// SPDX-License-Identifier: Apache-2.0

#include <gtest/gtest.h>

#include <algorithm>

#include "agentserve/harness.hpp"

namespace agentserve {
namespace {

std::string src(const std::string& rel) { return std::string(AGENTSERVE_SOURCE_DIR) + "/" + rel; }

double first_envelope_at(const EventTrace& t) {
  for (const auto& r : t) {
    if (r.kind == EventKind::kEnvelopeArrival) return r.time_ms;
  }
  return -1.0;
}

RunResult run_policy(const ExperimentConfig& cfg, const std::string& name, bool trace = true) {
  for (const auto& p : cfg.policies) {
    if (p.name == name) {
      return simulate(cfg, RunSpec{p, cfg.load_balancing.front(), 0.0, offered_rate(cfg, 0), workload_for(cfg, 0), trace});
    }
  }
  throw std::runtime_error("no policy " + name);
}

TEST(OracleTest, FirstTesterInputTimes) {
  const auto cfg = load_config(src("configs/oracle.json"));
  // 10 ms prefill, 16 decode steps at 16 ms, 1 ms network.
  EXPECT_DOUBLE_EQ(first_envelope_at(run_policy(cfg, "token_stream").trace), 267.0);
  // 10 ms prefill, 32 steps, 1 ms network.
  EXPECT_DOUBLE_EQ(first_envelope_at(run_policy(cfg, "batch_all").trace), 523.0);
}

TEST(OracleTest, RequestCompletes) {
  const auto cfg = load_config(src("configs/oracle.json"));
  for (const char* p : {"token_stream", "batch_all"}) {
    const auto run = run_policy(cfg, p, false);
    ASSERT_EQ(run.outcomes.size(), 1u);
    EXPECT_TRUE(run.outcomes[0].completion.has_value()) << p;
    EXPECT_EQ(run.outcomes[0].tokens, 32 + 64);
  }
}

TEST(ConfigTest, ShippedConfigsLoad) {
  for (const char* f : {"configs/default.json", "configs/oracle.json", "configs/kv_transfer.json"}) {
    EXPECT_NO_THROW(load_config(src(f))) << f;
  }
  const auto cfg = load_config(src("configs/default.json"));
  EXPECT_EQ(cfg.chain(), (std::vector<std::string>{"developer", "tester"}));
  EXPECT_EQ(cfg.policies.size(), 4u);
  EXPECT_EQ(cfg.policies.back().kind, PolicyConfig::Kind::kAdaptive);
}

void expect_config_error(const std::string& text, const std::string& field) {
  try {
    (void)parse_config(text);
    FAIL() << "accepted: " << text;
  } catch (const Error& e) {
    EXPECT_EQ(e.code(), ErrorCode::kConfigError);
    EXPECT_NE(std::string(e.what()).find(field), std::string::npos) << e.what();
  }
}

TEST(ConfigTest, InvalidTopologies) {
  const std::string policies = R"("policies": [{"name": "b", "static": "batch_all"}], "rates_rps": [1])";
  expect_config_error(R"({"roles": [{"name": "a"}], "links": [{"source": "a", "destination": "z"}], )" + policies + "}",
                      "links[0].destination");
  expect_config_error(R"({"roles": [{"name": "a"}, {"name": "b"}], "links": [{"source": "a", "destination": "b"},
                          {"source": "b", "destination": "a"}], )" + policies + "}",
                      "links");
  expect_config_error(R"({"roles": [{"name": "a"}, {"name": "b"}, {"name": "c"}], "links": [
                          {"source": "a", "destination": "b"}, {"source": "a", "destination": "c"}], )" + policies + "}",
                      "links[1]");
  expect_config_error(R"({"roles": [{"name": "a"}, {"name": "b"}], )" + policies + "}", "links");
}

TEST(ConfigTest, FieldErrors) {
  expect_config_error(R"({"roles": [{"name": "a", "replicas": 0}], "policies": [{"name": "b", "static": "batch_all"}]})",
                      "roles[0].replicas");
  expect_config_error(R"({"roles": [{"name": "a", "colour": 1}], "policies": [{"name": "b", "static": "batch_all"}]})",
                      "roles[0].colour");
  expect_config_error(R"j({"roles": [{"name": "a"}], "policies": [{"name": "b", "static": "token_stream(0)"}]})j",
                      "policies[0]");
  expect_config_error(R"({"roles": [{"name": "a"}], "policies": []})", "policies");
  expect_config_error("[1, 2", "config");
}

TEST(CapacityTest, SingleSequenceBatchAll) {
  auto cfg = load_config(src("configs/oracle.json"));
  cfg.roles = {cfg.roles.front()};
  cfg.links.clear();
  cfg.roles[0].serving.max_num_seqs = 1;
  cfg.workload.prompt_tokens = TokenDist::fixed(100);
  cfg.workload.output_tokens = TokenDist::fixed(32);
  // prefill 10 + 32 steps of 16 + one received message.
  EXPECT_NEAR(compute_capacity(cfg, Granularity::batch_all()), 1000.0 / 523.0, 1e-9);
}

TEST(CapacityTest, StreamingAddsReceiverOverhead) {
  auto cfg = load_config(src("configs/oracle.json"));
  cfg.roles[0].output_tokens = 32;
  cfg.workload.prompt_tokens = TokenDist::fixed(100);
  const auto batch = busy_per_request_ms(cfg, Granularity::batch_all());
  const auto stream = busy_per_request_ms(cfg, Granularity::token_stream(16));
  ASSERT_EQ(batch.size(), 2u);
  EXPECT_DOUBLE_EQ(batch[0], stream[0]);
  EXPECT_DOUBLE_EQ(stream[1] - batch[1], 1.0);
}

TEST(CapacityTest, AnalyticBoundNearSimulatedSaturation) {
  auto cfg = load_config(src("configs/oracle.json"));
  cfg.roles = {cfg.roles.front()};
  cfg.links.clear();
  cfg.requests.clear();
  cfg.workload.prompt_tokens = TokenDist::fixed(100);
  cfg.workload.output_tokens = TokenDist::fixed(32);
  cfg.workload.duration = SimTime(60000.0);
  cfg.drain_ms = 0.0;
  const double cap = compute_capacity(cfg, Granularity::batch_all());
  cfg.rates_rps = {1.5 * cap};
  const auto run = run_policy(cfg, "batch_all", false);
  const auto row = summarize(run);
  EXPECT_NEAR(row.goodput_rps, cap, 0.1 * cap) << "capacity " << cap;
}

TEST(HarnessTest, ZeroArrivalWorkloadYieldsEmptyRows) {
  auto cfg = load_config(src("configs/default.json"));
  cfg.load_points.clear();
  cfg.rates_rps = {1e-6};
  cfg.workload.duration = SimTime(1.0);
  const auto res = run_experiment(cfg);
  ASSERT_EQ(res.report.rows.size(), cfg.policies.size());
  for (const auto& r : res.report.rows) {
    EXPECT_EQ(r.offered, 0);
    EXPECT_EQ(r.completed, 0);
    EXPECT_DOUBLE_EQ(r.goodput_rps, 0.0);
  }
}

TEST(HarnessTest, SameSeedSameTrace) {
  auto cfg = load_config(src("configs/default.json"));
  cfg.load_points = {0.8};
  cfg.workload.duration = SimTime(20000.0);
  const auto a = run_policy(cfg, "adaptive");
  const auto b = run_policy(cfg, "adaptive");
  EXPECT_EQ(a.trace_hash, b.trace_hash);
  EXPECT_EQ(a.trace, b.trace);
  cfg.seed = 2;
  EXPECT_NE(run_policy(cfg, "adaptive").trace_hash, a.trace_hash);
}

TEST(HarnessTest, PolicyDoesNotChangeArrivals) {
  auto cfg = load_config(src("configs/default.json"));
  cfg.load_points = {0.6};
  cfg.workload.duration = SimTime(20000.0);
  const auto a = run_policy(cfg, "token_stream", false);
  const auto b = run_policy(cfg, "batch_all", false);
  ASSERT_EQ(a.outcomes.size(), b.outcomes.size());
  for (std::size_t i = 0; i < a.outcomes.size(); ++i) {
    EXPECT_EQ(a.outcomes[i].arrival, b.outcomes[i].arrival);
    EXPECT_EQ(a.outcomes[i].interactive, b.outcomes[i].interactive);
  }
}

TEST(ReportTest, CsvRoundTrip) {
  auto cfg = load_config(src("configs/default.json"));
  cfg.load_points = {0.2, 0.9};
  cfg.workload.duration = SimTime(10000.0);
  const auto res = compare_modes(cfg);
  const auto csv = res.report.to_csv();
  EXPECT_EQ(Report::parse_csv(csv), res.report);
  EXPECT_THROW(Report::parse_csv("nonsense\n1,2\n"), Error);
}

TEST(ReportTest, RowsAreConsistent) {
  auto cfg = load_config(src("configs/default.json"));
  cfg.workload.duration = SimTime(15000.0);
  const auto res = compare_modes(cfg);
  ASSERT_EQ(res.report.rows.size(), cfg.load_points.size() * cfg.policies.size());
  std::map<double, int> winners;
  for (const auto& r : res.report.rows) {
    EXPECT_EQ(r.completed + r.incomplete, r.offered);
    EXPECT_GE(r.goodput_rps, 0.0);
    EXPECT_GE(r.p90_e2e_ms, 0.0);
    EXPECT_GE(r.slo_violation_fraction, 0.0);
    EXPECT_LE(r.slo_violation_fraction, 1.0);
    if (r.policy != "adaptive") EXPECT_EQ(r.mode_switches, 0);
    winners[r.load_point] += r.winner;
  }
  for (const auto& [lp, n] : winners) EXPECT_EQ(n, 1) << lp;
}

TEST(WinnerTest, TieBrokenByLatency) {
  Report rep;
  ReportRow a;
  a.policy = "a";
  a.goodput_rps = 10.0;
  a.p90_e2e_ms = 500.0;
  ReportRow b = a;
  b.policy = "b";
  b.goodput_rps = 9.95;
  b.p90_e2e_ms = 300.0;
  ReportRow c = a;
  c.policy = "c";
  c.goodput_rps = 8.0;
  c.p90_e2e_ms = 100.0;
  rep.rows = {a, b, c};
  mark_winners(rep);
  EXPECT_FALSE(rep.rows[0].winner);
  EXPECT_TRUE(rep.rows[1].winner);
  EXPECT_FALSE(rep.rows[2].winner);
}

// Goodput grows with offered load until the system nears capacity.
TEST(HarnessProperty, MonotoneLoadResponse) {
  for (std::uint64_t seed : {1u, 2u, 3u}) {
    auto cfg = load_config(src("configs/default.json"));
    cfg.seed = seed;
    cfg.workload.duration = SimTime(60000.0);
    cfg.load_points = {0.1, 0.2, 0.3, 0.4, 0.5, 0.6, 0.7, 0.8, 0.9};
    cfg.policies = {cfg.policies[2]};
    const auto res = run_experiment(cfg);
    const double cap = compute_capacity(cfg, Granularity::batch_all());
    double prev = 0.0;
    for (const auto& r : res.report.rows) {
      if (prev >= 0.95 * cap) break;
      EXPECT_GE(r.goodput_rps, prev) << "seed " << seed << " load " << r.load_point;
      prev = r.goodput_rps;
    }
  }
}

TEST(LoadBalancingTest, ParseNames) {
  for (auto lb : {LoadBalancing::kNone, LoadBalancing::kPostHocTransfer, LoadBalancing::kHints}) {
    EXPECT_EQ(parse_load_balancing(to_string(lb)), lb);
  }
  EXPECT_THROW(parse_load_balancing("magic"), Error);
}

}  // namespace
}  // namespace agentserve
