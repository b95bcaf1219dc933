// Copyright 2026 The agentserve Authors.
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <cstdint>
#include <filesystem>
#include <map>
#include <optional>
#include <string>
#include <string_view>
#include <vector>

#include "agentserve/agent.hpp"
#include "agentserve/control.hpp"
#include "agentserve/core.hpp"
#include "agentserve/kernel.hpp"
#include "agentserve/metrics.hpp"

namespace agentserve {

struct RoleConfig {
  std::string name;
  int replicas = 1;
  CostModel cost;
  ServingParams serving;
  // Unset: the request's own output size (ingress) or the upstream output.
  std::optional<std::int64_t> output_tokens;
  int functions = 1;
  std::int64_t session_context_tokens = 0;
};

struct LinkConfig {
  std::string source;
  std::string destination;
  Granularity mode = Granularity::token_stream(kDefaultChunkTokens);
  double pacing_gap_ms = 0.0;
  double network_delay_ms = 1.0;
};

struct PolicyConfig {
  enum class Kind : std::uint8_t { kStatic, kAdaptive };
  std::string name;
  Kind kind = Kind::kStatic;
  Granularity mode = Granularity::batch_all();  // static policies
  Intent intent;                                 // adaptive policies
};

enum class LoadBalancing : std::uint8_t { kNone, kPostHocTransfer, kHints };
std::string_view to_string(LoadBalancing lb);
LoadBalancing parse_load_balancing(std::string_view text);  // throws Error(kConfigError)

struct ExperimentConfig {
  std::vector<RoleConfig> roles;
  std::vector<LinkConfig> links;
  WorkloadSpec workload;               // arrival_rate is set per load point
  std::vector<double> load_points;     // multiples of batch_all capacity
  std::vector<double> rates_rps;       // absolute rates, used when load_points is empty
  std::vector<Request> requests;       // explicit arrivals override the generator
  std::vector<PolicyConfig> policies;
  std::vector<LoadBalancing> load_balancing{LoadBalancing::kNone};
  std::vector<MetricDescriptor> extra_metrics;
  std::uint64_t seed = 1;
  double drain_ms = 30000.0;
  double poll_period_ms = 100.0;
  double tick_period_ms = 100.0;
  std::string output = "out";

  // Throws Error(kConfigError) naming the offending field.
  void validate() const;
  // Role names from ingress to sink.
  std::vector<std::string> chain() const;
  const RoleConfig& role(const std::string& name) const;
  std::vector<std::pair<std::string, std::string>> role_links() const;
};

// Throws Error(kConfigError) with a field path. Relative file references
// (intent_file, metric_descriptors) resolve against base_dir.
ExperimentConfig parse_config(std::string_view json_text, const std::filesystem::path& base_dir = {});
ExperimentConfig load_config(const std::filesystem::path& path);

// The declared default experiment: developer -> tester with three static
// policies and the max_throughput intent.
ExperimentConfig default_config();

// Per-role server occupancy (ms) for one mean-sized request, with decode
// steps shared across a full batch.
std::vector<double> busy_per_request_ms(const ExperimentConfig& cfg, const Granularity& mode);

// Analytic requests/s bound at the bottleneck role under `mode`.
double compute_capacity(const ExperimentConfig& cfg, const Granularity& mode);

// Offered rate (requests/s) for load point `index`.
double offered_rate(const ExperimentConfig& cfg, std::size_t index);
std::size_t load_point_count(const ExperimentConfig& cfg);
std::vector<Request> workload_for(const ExperimentConfig& cfg, std::size_t index);

struct RequestOutcome {
  RequestId id = 0;
  bool interactive = false;
  SimTime arrival;
  std::optional<SimTime> deadline;
  std::optional<SimTime> completion;
  std::optional<SimTime> final_first_token;  // first output token at the last hop
  std::int64_t tokens = 0;                   // output tokens over all hops
};

struct RunResult {
  std::string policy;
  LoadBalancing load_balancing = LoadBalancing::kNone;
  double load_point = 0.0;
  double rate_rps = 0.0;
  std::uint64_t seed = 0;
  double duration_ms = 0.0;
  std::vector<RequestOutcome> outcomes;
  std::map<std::string, int> mode_switches;  // role-level link -> count
  std::uint64_t kv_transfers = 0;
  EventTrace trace;  // empty unless recorded
  std::uint64_t trace_hash = 0;
};

struct RunSpec {
  PolicyConfig policy;
  LoadBalancing load_balancing = LoadBalancing::kNone;
  double load_point = 0.0;
  double rate_rps = 0.0;
  std::vector<Request> requests;
  bool record_trace = false;
};

RunResult simulate(const ExperimentConfig& cfg, const RunSpec& spec);

struct ReportRow {
  double load_point = 0.0;
  double rate_rps = 0.0;
  std::string policy;
  std::string load_balancing;
  std::uint64_t seed = 0;
  std::int64_t offered = 0;
  std::int64_t completed = 0;
  std::int64_t incomplete = 0;
  double goodput_rps = 0.0;
  double token_throughput_tps = 0.0;
  double mean_e2e_ms = 0.0;
  double p90_e2e_ms = 0.0;
  double mean_e2e_interactive_ms = 0.0;
  double p90_e2e_interactive_ms = 0.0;
  double mean_ttft_final_ms = 0.0;
  double slo_violation_fraction = 0.0;
  std::int64_t mode_switches = 0;
  std::string mode_switches_by_link;  // "developer->tester=3;..."
  bool winner = false;

  friend bool operator==(const ReportRow&, const ReportRow&) = default;
};

ReportRow summarize(const RunResult& run);

struct Report {
  std::vector<ReportRow> rows;

  std::string to_csv() const;
  static Report parse_csv(std::string_view text);  // throws Error(kParseError)
  friend bool operator==(const Report&, const Report&) = default;
};

struct RunOptions {
  unsigned threads = 0;  // 0: hardware concurrency
  bool record_traces = false;
};

struct ExperimentResult {
  Report report;
  std::vector<RunResult> runs;  // same order as report rows
};

// One simulation per (load point, load-balancing mode, policy).
ExperimentResult run_experiment(const ExperimentConfig& cfg, const RunOptions& options = {});

// run_experiment plus a winner per (load point, load-balancing mode): highest
// goodput, with goodputs within 1% tied and broken by lower p90 latency.
ExperimentResult compare_modes(const ExperimentConfig& cfg, const RunOptions& options = {});

void mark_winners(Report& report);

}  // namespace agentserve
