// Copyright 2026 The agentserve Authors.
// SPDX-License-Identifier: Apache-2.0

#include "agentserve/harness.hpp"

#include <algorithm>
#include <atomic>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <memory>
#include <mutex>
#include <numeric>
#include <set>
#include <sstream>
#include <thread>
#include <tuple>
#include <unordered_map>

#include <json.hpp>

#include "agentserve/dataplane.hpp"

namespace agentserve {

std::string_view to_string(LoadBalancing lb) {
  switch (lb) {
    case LoadBalancing::kNone: return "none";
    case LoadBalancing::kPostHocTransfer: return "post_hoc_transfer";
    case LoadBalancing::kHints: return "hints";
  }
  return "?";
}

LoadBalancing parse_load_balancing(std::string_view text) {
  if (text == "none") return LoadBalancing::kNone;
  if (text == "post_hoc_transfer") return LoadBalancing::kPostHocTransfer;
  if (text == "hints") return LoadBalancing::kHints;
  throw Error(ErrorCode::kConfigError, "load_balancing: unknown mode '" + std::string(text) + "'");
}

// ---------------------------------------------------------------------------
// Topology

namespace {

[[noreturn]] void config_fail(const std::string& path, const std::string& what) {
  throw Error(ErrorCode::kConfigError, path + ": " + what);
}

}  // namespace

const RoleConfig& ExperimentConfig::role(const std::string& name) const {
  for (const auto& r : roles) {
    if (r.name == name) return r;
  }
  config_fail("roles", "no role named '" + name + "'");
}

void ExperimentConfig::validate() const {
  if (roles.empty()) config_fail("roles", "at least one role is required");
  std::set<std::string> names;
  for (std::size_t i = 0; i < roles.size(); ++i) {
    const auto path = "roles[" + std::to_string(i) + "]";
    const auto& r = roles[i];
    if (r.name.empty()) config_fail(path + ".name", "must be non-empty");
    if (r.name.find_first_of("./-> ") != std::string::npos) config_fail(path + ".name", "must not contain . / - > or spaces");
    if (!names.insert(r.name).second) config_fail(path + ".name", "duplicate role '" + r.name + "'");
    if (r.replicas < 1) config_fail(path + ".replicas", "must be >= 1");
    if (r.functions < 1) config_fail(path + ".functions", "must be >= 1");
    if (r.output_tokens && *r.output_tokens < 1) config_fail(path + ".output_tokens", "must be >= 1");
    if (r.session_context_tokens < 0) config_fail(path + ".session_context_tokens", "must be >= 0");
    if (r.serving.max_num_seqs < 1 || r.serving.max_num_seqs > 64) {
      config_fail(path + ".knobs.max_num_seqs", "must be in [1, 64]");
    }
    try {
      r.cost.validate();
      admission_min_level(r.serving.admission);
    } catch (const Error& e) {
      config_fail(path, e.what());
    }
  }
  std::map<std::string, int> in, out;
  for (std::size_t i = 0; i < links.size(); ++i) {
    const auto path = "links[" + std::to_string(i) + "]";
    const auto& l = links[i];
    if (!names.contains(l.source)) config_fail(path + ".source", "unknown role '" + l.source + "'");
    if (!names.contains(l.destination)) config_fail(path + ".destination", "unknown role '" + l.destination + "'");
    if (l.source == l.destination) config_fail(path, "self loop on '" + l.source + "'");
    if (!(l.pacing_gap_ms >= 0.0)) config_fail(path + ".pacing_gap_ms", "must be >= 0");
    if (!(l.network_delay_ms >= 0.0)) config_fail(path + ".network_delay_ms", "must be >= 0");
    if (++out[l.source] > 1) config_fail(path, "role '" + l.source + "' has more than one downstream link");
    if (++in[l.destination] > 1) config_fail(path, "role '" + l.destination + "' has more than one upstream link");
  }
  // With in/out degree <= 1 the graph is a set of paths and cycles; it must
  // be a single path through every role.
  const auto c = chain();
  if (c.size() != roles.size()) config_fail("links", "roles must form one acyclic pipeline");
  try {
    workload.validate();
  } catch (const Error& e) {
    config_fail("workload", e.what());
  }
  for (std::size_t i = 0; i < load_points.size(); ++i) {
    if (!(load_points[i] > 0.0)) config_fail("load_points[" + std::to_string(i) + "]", "must be > 0");
  }
  for (std::size_t i = 0; i < rates_rps.size(); ++i) {
    if (!(rates_rps[i] > 0.0)) config_fail("rates_rps[" + std::to_string(i) + "]", "must be > 0");
  }
  for (std::size_t i = 0; i < requests.size(); ++i) {
    if (auto bad = validate_request(requests[i])) {
      config_fail("requests[" + std::to_string(i) + "]." + bad->name, bad->reason);
    }
  }
  if (policies.empty()) config_fail("policies", "at least one policy is required");
  std::set<std::string> policy_names;
  for (std::size_t i = 0; i < policies.size(); ++i) {
    if (!policy_names.insert(policies[i].name).second) {
      config_fail("policies[" + std::to_string(i) + "].name", "duplicate policy '" + policies[i].name + "'");
    }
  }
  if (load_balancing.empty()) config_fail("load_balancing", "at least one mode is required");
  if (!(drain_ms >= 0.0)) config_fail("drain_ms", "must be >= 0");
  if (!(poll_period_ms > 0.0)) config_fail("poll_period_ms", "must be > 0");
  if (!(tick_period_ms > 0.0)) config_fail("tick_period_ms", "must be > 0");
}

std::vector<std::string> ExperimentConfig::chain() const {
  std::map<std::string, std::string> next;
  std::set<std::string> has_upstream;
  for (const auto& l : links) {
    next[l.source] = l.destination;
    has_upstream.insert(l.destination);
  }
  std::vector<std::string> out;
  for (const auto& r : roles) {
    if (has_upstream.contains(r.name)) continue;
    if (!out.empty()) return {};  // more than one ingress
    out.push_back(r.name);
  }
  if (out.empty()) return {};
  std::set<std::string> seen{out.front()};
  while (true) {
    auto it = next.find(out.back());
    if (it == next.end()) break;
    if (!seen.insert(it->second).second) return {};
    out.push_back(it->second);
  }
  return out;
}

std::vector<std::pair<std::string, std::string>> ExperimentConfig::role_links() const {
  std::vector<std::pair<std::string, std::string>> out;
  for (const auto& l : links) out.emplace_back(l.source, l.destination);
  return out;
}

// ---------------------------------------------------------------------------
// Config documents

namespace {

using nlohmann::json;

void check_keys(const json& obj, std::initializer_list<std::string_view> allowed, const std::string& path) {
  if (!obj.is_object()) config_fail(path, "expected an object");
  for (const auto& [key, _] : obj.items()) {
    if (std::find(allowed.begin(), allowed.end(), key) == allowed.end()) {
      config_fail(path + "." + key, "unknown key");
    }
  }
}

template <typename T>
T get_field(const json& obj, const std::string& key, const std::string& path) {
  try {
    return obj.at(key).get<T>();
  } catch (const json::exception&) {
    config_fail(path + "." + key, "wrong type or missing");
  }
}

TokenDist token_dist(const json& j, const std::string& path) {
  if (j.is_number_integer()) return TokenDist::fixed(j.get<std::int64_t>());
  check_keys(j, {"fixed", "uniform"}, path);
  if (j.contains("fixed")) return TokenDist::fixed(get_field<std::int64_t>(j, "fixed", path));
  if (j.contains("uniform")) {
    const auto& u = j.at("uniform");
    if (!u.is_array() || u.size() != 2) config_fail(path + ".uniform", "expected [lo, hi]");
    const auto lo = u[0].get<std::int64_t>();
    const auto hi = u[1].get<std::int64_t>();
    if (lo > hi) config_fail(path + ".uniform", "lo must be <= hi");
    return TokenDist::uniform(lo, hi);
  }
  config_fail(path, "expected fixed or uniform");
}

CostModel cost_model(const json& j, const std::string& path) {
  check_keys(j,
             {"prefill_base_ms", "prefill_per_token_ms", "decode_step_base_ms", "decode_step_per_seq_ms",
              "envelope_overhead_ms", "kv_transfer_per_token_ms"},
             path);
  CostModel c;
  auto take = [&](const char* key, double& field) {
    if (j.contains(key)) field = get_field<double>(j, key, path);
  };
  take("prefill_base_ms", c.prefill_base_ms);
  take("prefill_per_token_ms", c.prefill_per_token_ms);
  take("decode_step_base_ms", c.decode_step_base_ms);
  take("decode_step_per_seq_ms", c.decode_step_per_seq_ms);
  take("envelope_overhead_ms", c.envelope_overhead_ms);
  take("kv_transfer_per_token_ms", c.kv_transfer_per_token_ms);
  return c;
}

std::string read_file(const std::filesystem::path& p, const std::string& path) {
  std::ifstream in(p);
  if (!in) config_fail(path, "cannot read '" + p.string() + "'");
  std::stringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

Granularity granularity(const std::string& text, const std::string& path) {
  try {
    return Granularity::parse(text);
  } catch (const Error& e) {
    config_fail(path, e.what());
  }
}

}  // namespace

ExperimentConfig parse_config(std::string_view json_text, const std::filesystem::path& base_dir) {
  json doc;
  try {
    doc = json::parse(json_text);
  } catch (const json::parse_error& e) {
    config_fail("config", e.what());
  }
  check_keys(doc,
             {"roles", "links", "workload", "load_points", "rates_rps", "requests", "policies", "load_balancing",
              "metric_descriptors", "seed", "drain_ms", "poll_period_ms", "tick_period_ms", "output"},
             "config");
  ExperimentConfig cfg;
  cfg.policies.clear();

  if (!doc.contains("roles") || !doc.at("roles").is_array()) config_fail("roles", "expected a list");
  const auto& roles = doc.at("roles");
  for (std::size_t i = 0; i < roles.size(); ++i) {
    const auto path = "roles[" + std::to_string(i) + "]";
    const auto& j = roles[i];
    check_keys(j, {"name", "replicas", "cost", "knobs", "output_tokens", "functions", "session_context_tokens"}, path);
    RoleConfig r;
    r.name = get_field<std::string>(j, "name", path);
    if (j.contains("replicas")) r.replicas = get_field<int>(j, "replicas", path);
    if (j.contains("cost")) r.cost = cost_model(j.at("cost"), path + ".cost");
    if (j.contains("knobs")) {
      const auto& k = j.at("knobs");
      check_keys(k, {"max_num_seqs", "admission"}, path + ".knobs");
      if (k.contains("max_num_seqs")) r.serving.max_num_seqs = get_field<std::int64_t>(k, "max_num_seqs", path + ".knobs");
      if (k.contains("admission")) r.serving.admission = get_field<std::string>(k, "admission", path + ".knobs");
    }
    if (j.contains("output_tokens")) r.output_tokens = get_field<std::int64_t>(j, "output_tokens", path);
    if (j.contains("functions")) r.functions = get_field<int>(j, "functions", path);
    if (j.contains("session_context_tokens")) {
      r.session_context_tokens = get_field<std::int64_t>(j, "session_context_tokens", path);
    }
    cfg.roles.push_back(std::move(r));
  }

  if (doc.contains("links")) {
    const auto& links = doc.at("links");
    if (!links.is_array()) config_fail("links", "expected a list");
    for (std::size_t i = 0; i < links.size(); ++i) {
      const auto path = "links[" + std::to_string(i) + "]";
      const auto& j = links[i];
      check_keys(j, {"source", "destination", "mode", "pacing_gap_ms", "network_delay_ms"}, path);
      LinkConfig l;
      l.source = get_field<std::string>(j, "source", path);
      l.destination = get_field<std::string>(j, "destination", path);
      if (j.contains("mode")) l.mode = granularity(get_field<std::string>(j, "mode", path), path + ".mode");
      if (j.contains("pacing_gap_ms")) l.pacing_gap_ms = get_field<double>(j, "pacing_gap_ms", path);
      if (j.contains("network_delay_ms")) l.network_delay_ms = get_field<double>(j, "network_delay_ms", path);
      cfg.links.push_back(std::move(l));
    }
  }

  if (doc.contains("workload")) {
    const auto& j = doc.at("workload");
    const std::string path = "workload";
    check_keys(j, {"duration_ms", "interactive_fraction", "prompt_tokens", "output_tokens", "sessions",
                   "interactive_slo_ms"},
               path);
    auto& w = cfg.workload;
    if (j.contains("duration_ms")) w.duration = SimTime(get_field<double>(j, "duration_ms", path));
    if (j.contains("interactive_fraction")) w.interactive_fraction = get_field<double>(j, "interactive_fraction", path);
    if (j.contains("prompt_tokens")) w.prompt_tokens = token_dist(j.at("prompt_tokens"), path + ".prompt_tokens");
    if (j.contains("output_tokens")) w.output_tokens = token_dist(j.at("output_tokens"), path + ".output_tokens");
    if (j.contains("sessions")) w.sessions = get_field<std::uint64_t>(j, "sessions", path);
    if (j.contains("interactive_slo_ms")) w.interactive_slo_ms = get_field<double>(j, "interactive_slo_ms", path);
  }
  if (doc.contains("load_points")) cfg.load_points = get_field<std::vector<double>>(doc, "load_points", "config");
  if (doc.contains("rates_rps")) cfg.rates_rps = get_field<std::vector<double>>(doc, "rates_rps", "config");
  if (doc.contains("requests")) {
    const auto& list = doc.at("requests");
    if (!list.is_array()) config_fail("requests", "expected a list");
    for (std::size_t i = 0; i < list.size(); ++i) {
      const auto path = "requests[" + std::to_string(i) + "]";
      const auto& j = list[i];
      check_keys(j, {"arrival_ms", "prompt_tokens", "output_tokens", "interactive", "level", "session",
                     "slo_deadline_ms"},
                 path);
      Request r;
      r.id = i;
      r.arrival = SimTime(get_field<double>(j, "arrival_ms", path));
      r.prompt_tokens = get_field<std::int64_t>(j, "prompt_tokens", path);
      r.output_tokens = get_field<std::int64_t>(j, "output_tokens", path);
      const bool interactive = j.contains("interactive") && get_field<bool>(j, "interactive", path);
      r.priority = interactive ? Priority::interactive() : Priority::background();
      if (j.contains("level")) r.priority.level = get_field<int>(j, "level", path);
      r.session = j.contains("session") ? get_field<SessionId>(j, "session", path) : i + 1;
      if (j.contains("slo_deadline_ms")) r.slo_deadline = SimTime(get_field<double>(j, "slo_deadline_ms", path));
      cfg.requests.push_back(std::move(r));
    }
  }

  if (doc.contains("policies")) {
    const auto& list = doc.at("policies");
    if (!list.is_array()) config_fail("policies", "expected a list");
    for (std::size_t i = 0; i < list.size(); ++i) {
      const auto path = "policies[" + std::to_string(i) + "]";
      const auto& j = list[i];
      check_keys(j, {"name", "static", "intent", "intent_file"}, path);
      PolicyConfig p;
      const int kinds = j.contains("static") + j.contains("intent") + j.contains("intent_file");
      if (kinds != 1) config_fail(path, "exactly one of static, intent, intent_file");
      if (j.contains("static")) {
        p.kind = PolicyConfig::Kind::kStatic;
        p.mode = granularity(get_field<std::string>(j, "static", path), path + ".static");
        p.name = j.contains("name") ? get_field<std::string>(j, "name", path) : p.mode.to_string();
      } else {
        p.kind = PolicyConfig::Kind::kAdaptive;
        std::string text;
        if (j.contains("intent")) {
          text = j.at("intent").dump();
        } else {
          const auto file = base_dir / get_field<std::string>(j, "intent_file", path);
          text = read_file(file, path + ".intent_file");
        }
        try {
          p.intent = parse_policy(text);
        } catch (const Error& e) {
          config_fail(path, e.what());
        }
        p.name = j.contains("name") ? get_field<std::string>(j, "name", path) : "adaptive";
      }
      cfg.policies.push_back(std::move(p));
    }
  } else {
    cfg.policies.push_back(PolicyConfig{"batch_all", PolicyConfig::Kind::kStatic, Granularity::batch_all(), {}});
  }

  if (doc.contains("load_balancing")) {
    const auto& lb = doc.at("load_balancing");
    cfg.load_balancing.clear();
    try {
      if (lb.is_string()) {
        cfg.load_balancing.push_back(parse_load_balancing(lb.get<std::string>()));
      } else if (lb.is_array()) {
        for (const auto& x : lb) cfg.load_balancing.push_back(parse_load_balancing(x.get<std::string>()));
      } else {
        config_fail("load_balancing", "expected a string or list");
      }
    } catch (const json::exception&) {
      config_fail("load_balancing", "expected strings");
    }
  }
  if (doc.contains("metric_descriptors")) {
    const auto file = base_dir / get_field<std::string>(doc, "metric_descriptors", "config");
    try {
      cfg.extra_metrics = load_descriptors(read_file(file, "metric_descriptors"));
    } catch (const Error& e) {
      config_fail("metric_descriptors", e.what());
    }
  }
  if (doc.contains("seed")) cfg.seed = get_field<std::uint64_t>(doc, "seed", "config");
  if (doc.contains("drain_ms")) cfg.drain_ms = get_field<double>(doc, "drain_ms", "config");
  if (doc.contains("poll_period_ms")) cfg.poll_period_ms = get_field<double>(doc, "poll_period_ms", "config");
  if (doc.contains("tick_period_ms")) cfg.tick_period_ms = get_field<double>(doc, "tick_period_ms", "config");
  if (doc.contains("output")) cfg.output = get_field<std::string>(doc, "output", "config");
  cfg.workload.seed = cfg.seed;
  cfg.validate();
  return cfg;
}

ExperimentConfig load_config(const std::filesystem::path& path) {
  return parse_config(read_file(path, "config"), path.parent_path());
}

ExperimentConfig default_config() {
  ExperimentConfig cfg;
  RoleConfig dev;
  dev.name = "developer";
  dev.functions = 4;
  RoleConfig tester;
  tester.name = "tester";
  tester.output_tokens = 64;
  cfg.roles = {dev, tester};
  cfg.links = {LinkConfig{"developer", "tester", Granularity::token_stream(kDefaultChunkTokens), 0.0, 1.0}};
  cfg.workload.duration = SimTime(120000.0);
  cfg.workload.interactive_fraction = 0.5;
  cfg.workload.prompt_tokens = TokenDist::uniform(64, 256);
  cfg.workload.output_tokens = TokenDist::fixed(128);
  cfg.load_points = {0.2, 0.4, 0.6, 0.8, 0.9, 1.0};
  Intent intent;
  intent.objective = Objective::kMaxThroughput;
  cfg.policies = {
      PolicyConfig{"token_stream", PolicyConfig::Kind::kStatic, Granularity::token_stream(kDefaultChunkTokens), {}},
      PolicyConfig{"per_function", PolicyConfig::Kind::kStatic, Granularity::per_function(), {}},
      PolicyConfig{"batch_all", PolicyConfig::Kind::kStatic, Granularity::batch_all(), {}},
      PolicyConfig{"adaptive", PolicyConfig::Kind::kAdaptive, Granularity::batch_all(), intent},
  };
  return cfg;
}

// ---------------------------------------------------------------------------
// Capacity

std::vector<double> busy_per_request_ms(const ExperimentConfig& cfg, const Granularity& mode) {
  const auto chain = cfg.chain();
  std::vector<double> busy;
  double upstream_out = 0.0;
  int upstream_functions = 1;
  for (std::size_t k = 0; k < chain.size(); ++k) {
    const auto& r = cfg.role(chain[k]);
    const double input = k == 0 ? cfg.workload.prompt_tokens.mean() : upstream_out;
    double out = 0.0;
    if (r.output_tokens) {
      out = static_cast<double>(*r.output_tokens);
    } else {
      out = k == 0 ? cfg.workload.output_tokens.mean() : upstream_out;
    }
    // The ingress request counts as one received message.
    double envelopes = 1.0;
    if (k > 0) {
      switch (mode.kind()) {
        case Granularity::Kind::kTokenStream:
          envelopes = std::ceil(input / static_cast<double>(mode.chunk_tokens()));
          break;
        case Granularity::Kind::kPerFunction:
          envelopes = upstream_functions;
          break;
        case Granularity::Kind::kBatchAll:
          envelopes = 1.0;
          break;
      }
    }
    const auto b = static_cast<double>(r.serving.max_num_seqs);
    busy.push_back(r.cost.prefill_base_ms + r.cost.prefill_per_token_ms * input +
                   out * (r.cost.decode_step_base_ms + r.cost.decode_step_per_seq_ms * b) / b +
                   r.cost.envelope_overhead_ms * envelopes);
    upstream_out = out;
    upstream_functions = r.functions;
  }
  return busy;
}

double compute_capacity(const ExperimentConfig& cfg, const Granularity& mode) {
  const auto chain = cfg.chain();
  const auto busy = busy_per_request_ms(cfg, mode);
  double best = std::numeric_limits<double>::infinity();
  for (std::size_t k = 0; k < chain.size(); ++k) {
    best = std::min(best, static_cast<double>(cfg.role(chain[k]).replicas) * 1000.0 / busy[k]);
  }
  return best;
}

std::size_t load_point_count(const ExperimentConfig& cfg) {
  if (!cfg.requests.empty()) return 1;
  return cfg.load_points.empty() ? cfg.rates_rps.size() : cfg.load_points.size();
}

double offered_rate(const ExperimentConfig& cfg, std::size_t index) {
  if (!cfg.requests.empty()) return 0.0;
  if (cfg.load_points.empty()) return cfg.rates_rps.at(index);
  return cfg.load_points.at(index) * compute_capacity(cfg, Granularity::batch_all());
}

std::vector<Request> workload_for(const ExperimentConfig& cfg, std::size_t index) {
  if (!cfg.requests.empty()) {
    auto reqs = cfg.requests;
    for (auto& r : reqs) r.hops = cfg.chain();
    return reqs;
  }
  WorkloadSpec w = cfg.workload;
  w.seed = cfg.seed;
  w.arrival_rate = offered_rate(cfg, index);
  return gen_arrivals(w, cfg.chain());
}

// ---------------------------------------------------------------------------
// Simulation

namespace {

class Simulation {
 public:
  Simulation(const ExperimentConfig& cfg, const RunSpec& spec)
      : cfg_(cfg), spec_(spec), chain_(cfg.chain()), kv_(kernel_, kv_rate(cfg)) {
    kernel_.set_recording(spec.record_trace);
    build();
  }

  RunResult run() {
    const double horizon = horizon_ms();
    for (const auto& r : spec_.requests) {
      auto& rs = requests_[r.id];
      rs.request = r;
      rs.priority = r.priority;
      rs.instance.assign(chain_.size(), kNoAgent);
      rs.arrived.assign(chain_.size(), false);
      rs.pending.resize(chain_.size());
      order_.push_back(r.id);
      kernel_.schedule(r.arrival, EventKind::kRequestArrival, [this, id = r.id] { on_arrival(id); }, r.id);
    }
    kernel_.schedule(SimTime(0.0), EventKind::kMetricPoll, [this] { on_poll(); });
    kernel_.schedule(SimTime(0.0), EventKind::kControllerTick, [this] { on_tick(); });
    auto trace = kernel_.run_until(SimTime(horizon));

    RunResult res;
    res.policy = spec_.policy.name;
    res.load_balancing = spec_.load_balancing;
    res.load_point = spec_.load_point;
    res.rate_rps = spec_.rate_rps;
    res.seed = cfg_.seed;
    res.duration_ms = workload_ms();
    for (auto id : order_) {
      const auto& rs = requests_.at(id);
      RequestOutcome o;
      o.id = id;
      o.interactive = rs.request.interactive();
      o.arrival = rs.request.arrival;
      o.deadline = rs.request.slo_deadline;
      o.completion = rs.completion;
      o.final_first_token = rs.final_first_token;
      o.tokens = rs.tokens;
      res.outcomes.push_back(o);
    }
    for (const auto& l : cfg_.links) res.mode_switches[l.source + "->" + l.destination] += 0;
    for (const auto& [name, n] : switches_) res.mode_switches[name] += n;
    res.kv_transfers = kv_.transfers_started();
    res.trace_hash = trace_hash(trace);
    res.trace = std::move(trace);
    return res;
  }

 private:
  struct PendingTokens {
    std::int64_t n = 0;
    OfferFlags flags;
  };
  struct RequestState {
    Request request;
    Priority priority;
    std::vector<AgentId> instance;
    std::vector<bool> arrived;
    std::vector<std::vector<PendingTokens>> pending;  // output of hop k awaiting routing of hop k+1
    std::optional<SimTime> completion;
    std::optional<SimTime> final_first_token;
    std::int64_t tokens = 0;
  };

  static double kv_rate(const ExperimentConfig& cfg) {
    for (const auto& r : cfg.roles) {
      if (r.session_context_tokens > 0) return r.cost.kv_transfer_per_token_ms;
    }
    return CostModel{}.kv_transfer_per_token_ms;
  }

  double workload_ms() const {
    if (!cfg_.requests.empty()) {
      double last = 0.0;
      for (const auto& r : cfg_.requests) last = std::max(last, r.arrival.ms());
      return std::max(last, 1.0);
    }
    return cfg_.workload.duration.ms();
  }
  double horizon_ms() const { return workload_ms() + cfg_.drain_ms; }

  void build() {
    for (std::size_t k = 0; k < chain_.size(); ++k) {
      const auto& role = cfg_.role(chain_[k]);
      for (int i = 0; i < role.replicas; ++i) {
        const auto id = static_cast<AgentId>(instances_.size());
        auto inst = std::make_unique<AgentInstance>(id, role.name, role.cost, role.serving, kernel_, &metrics_, &kv_);
        inst->set_kv_transfer(spec_.load_balancing != LoadBalancing::kNone);
        inst->set_callbacks({
            [this, k, id](RequestId r, OfferFlags f, SimTime now) { on_token(k, id, r, f, now); },
            [this, k](RequestId r, const HopStats& s, SimTime now) { on_done(k, r, s, now); },
        });
        metrics_.register_metrics(id, builtin_descriptors());
        if (!cfg_.extra_metrics.empty()) metrics_.register_metrics(id, cfg_.extra_metrics);
        role_instances_[role.name].push_back(id);
        hop_of_.push_back(k);
        controller_.register_agent(id, inst->knobs(), role.name + "." + std::to_string(i), role.name);
        instances_.push_back(std::move(inst));
      }
    }
    pipeline_node_ = static_cast<NodeId>(instances_.size());
    for (const auto& d : builtin_descriptors()) {
      if (d.name == "e2e_latency_ms" || d.name == "e2e_latency_interactive_ms") {
        metrics_.register_metric(pipeline_node_, d);
      }
    }
    controller_.register_node(pipeline_node_, kPipelineNode);
    busy_seen_.assign(instances_.size(), 0.0);

    for (const auto& l : cfg_.links) {
      Granularity mode = l.mode;
      if (spec_.policy.kind == PolicyConfig::Kind::kStatic) mode = spec_.policy.mode;
      for (auto src : role_instances_.at(l.source)) {
        for (auto dst : role_instances_.at(l.destination)) {
          const auto id = shim_.add_link(src, dst, mode, l.pacing_gap_ms, l.network_delay_ms);
          link_of_[{src, dst}] = id;
          link_role_.push_back(l.source + "->" + l.destination);
          controller_.register_link(id, shim_.knobs(id), src, dst);
        }
      }
    }

    for (const auto& r : cfg_.roles) {
      if (r.session_context_tokens <= 0 || cfg_.workload.sessions == 0) continue;
      const auto home = role_instances_.at(r.name).front();
      for (SessionId s = 1; s <= cfg_.workload.sessions; ++s) kv_.place(s, home, r.session_context_tokens);
    }

    if (spec_.load_balancing == LoadBalancing::kHints) controller_.set_hints(true);
    if (spec_.policy.kind == PolicyConfig::Kind::kAdaptive) {
      controller_.install(compile_intent(spec_.policy.intent, cfg_.role_links()));
    }
  }

  std::int64_t hop_output(const RequestState& rs, std::size_t k) const {
    const auto& role = cfg_.role(chain_[k]);
    if (role.output_tokens) return *role.output_tokens;
    if (k == 0) return rs.request.output_tokens;
    return hop_output(rs, k - 1);
  }

  HopWork hop_work(const RequestState& rs, std::size_t k) const {
    const auto& role = cfg_.role(chain_[k]);
    HopWork w;
    w.request = rs.request.id;
    w.priority = rs.priority;
    w.session = rs.request.session;
    w.request_arrival = rs.request.arrival;
    w.expected_input = k == 0 ? 0 : hop_output(rs, k - 1);
    w.input_tokens = k == 0 ? rs.request.prompt_tokens : 0;
    w.output_tokens = hop_output(rs, k);
    w.functions = role.functions;
    w.session_context = role.session_context_tokens;
    return w;
  }

  std::optional<AgentId> kv_location(const RequestState& rs, std::size_t k) const {
    if (cfg_.role(chain_[k]).session_context_tokens <= 0) return std::nullopt;
    if (auto e = kv_.resident(rs.request.session)) return e->resident_on;
    return std::nullopt;
  }

  // Routes hop k; a blocked request is picked up again by on_tick().
  void route(RequestState& rs, std::size_t k) {
    const auto loc = kv_location(rs, k);
    const auto& candidates = role_instances_.at(chain_[k]);
    if (spec_.load_balancing == LoadBalancing::kNone && loc) {
      // Without load balancing a session stays where its cache lives.
      RouteDecision d;
      d.instance = *loc;
      d.priority = rs.priority;
      place(rs, k, d);
      return;
    }
    Request view = rs.request;
    view.priority = rs.priority;
    auto d = controller_.route(view, chain_[k], candidates, loc);
    if (d.status == RouteDecision::Status::kBlocked) {
      blocked_hop_[rs.request.id] = k;
      return;
    }
    place(rs, k, d);
  }

  void place(RequestState& rs, std::size_t k, const RouteDecision& d) {
    const auto now = kernel_.now();
    rs.priority = d.priority;
    rs.instance[k] = d.instance;
    if (d.hint) {
      const auto s = rs.request.session;
      if (kv_.resident(s) || kv_.in_flight(s)) {
        kernel_.schedule(
            now, EventKind::kHintDelivery, [this, s, to = *d.hint] { kv_.apply_hint(s, to, kernel_.now()); },
            rs.request.id, *d.hint, "session=" + std::to_string(s));
      }
    }
    auto& inst = *instances_[d.instance];
    if (k == 0) {
      if (chain_.size() > 1) {
        inst.expect(hop_work(rs, 0));
        route(rs, 1);
      }
      inst.submit(hop_work(rs, 0), now);
      return;
    }
    inst.expect(hop_work(rs, k));
    // Output the upstream produced before this hop was routed.
    auto pending = std::move(rs.pending[k - 1]);
    rs.pending[k - 1].clear();
    const auto link = link_of_.at({rs.instance[k - 1], d.instance});
    for (const auto& p : pending) shim_.offer_tokens(link, rs.request.id, p.n, p.flags, rs.priority, now);
    if (!pending.empty()) dispatch(link, now);
  }

  void on_arrival(RequestId id) { route(requests_.at(id), 0); }

  void on_token(std::size_t k, AgentId from, RequestId id, OfferFlags flags, SimTime now) {
    auto& rs = requests_.at(id);
    ++rs.tokens;
    if (k + 1 == chain_.size()) {
      if (!rs.final_first_token) rs.final_first_token = now;
      return;
    }
    if (rs.instance[k + 1] == kNoAgent) {
      rs.pending[k].push_back({1, flags});
      return;
    }
    const auto link = link_of_.at({from, rs.instance[k + 1]});
    shim_.offer_tokens(link, id, 1, flags, rs.priority, now);
    dispatch(link, now);
  }

  void dispatch(LinkId link, SimTime now) {
    for (auto& d : shim_.dispatch(link, now)) {
      const auto& e = d.envelope;
      std::string detail = "link=" + std::to_string(link) + " seq=" + std::to_string(e.seq) +
                           " tokens=" + std::to_string(e.payload_tokens) + (e.is_final ? " final" : "");
      kernel_.schedule(
          d.arrival, EventKind::kEnvelopeArrival, [this, env = e] { deliver(env); }, e.request_id, e.destination,
          std::move(detail));
    }
  }

  void deliver(const MessageEnvelope& e) {
    auto& rs = requests_.at(e.request_id);
    const auto k = hop_of_.at(e.destination);
    if (!rs.arrived[k]) {
      rs.arrived[k] = true;
      if (k + 1 < chain_.size()) route(rs, k + 1);
    }
    instances_[e.destination]->on_envelope(e, kernel_.now());
  }

  void on_done(std::size_t k, RequestId id, const HopStats&, SimTime now) {
    if (k + 1 != chain_.size()) return;
    auto& rs = requests_.at(id);
    rs.completion = now;
    const double e2e = now - rs.request.arrival;
    metrics_.record(pipeline_node_, "e2e_latency_ms", e2e, now);
    if (rs.request.interactive()) metrics_.record(pipeline_node_, "e2e_latency_interactive_ms", e2e, now);
  }

  void on_poll() {
    const auto now = kernel_.now();
    if (now.ms() > 0.0) {
      for (std::size_t i = 0; i < instances_.size(); ++i) {
        const double busy = instances_[i]->busy_ms_until(now);
        const double frac = (busy - busy_seen_[i]) / (now.ms() - last_poll_);
        busy_seen_[i] = busy;
        metrics_.record(static_cast<NodeId>(i), "server_busy_fraction", std::clamp(frac, 0.0, 1.0), now);
      }
    }
    last_poll_ = now.ms();
    controller_.refresh(metrics_, now);
    const auto next = now + cfg_.poll_period_ms;
    if (next.ms() <= horizon_ms()) kernel_.schedule(next, EventKind::kMetricPoll, [this] { on_poll(); });
  }

  void on_tick() {
    const auto now = kernel_.now();
    for (const auto& a : controller_.tick(now)) apply(a, now);
    for (auto& inst : instances_) inst->readmit(now);
    for (auto& r : controller_.release(now)) {
      auto it = blocked_hop_.find(r.request.id);
      if (it == blocked_hop_.end()) continue;
      const auto k = it->second;
      blocked_hop_.erase(it);
      place(requests_.at(r.request.id), k, r.decision);
    }
    const auto next = now + cfg_.tick_period_ms;
    if (next.ms() <= horizon_ms()) kernel_.schedule(next, EventKind::kControllerTick, [this] { on_tick(); });
  }

  void apply(const ControlAction& a, SimTime now) {
    kernel_.annotate(a.to_string());
    if (a.kind == Address::Kind::kAgent) {
      auto& inst = *instances_.at(a.target_id);
      if (a.op == ControlAction::Op::kSet) {
        inst.set(a.knob, a.value);
      } else {
        inst.reset(a.knob);
      }
      return;
    }
    const LinkId link = a.target_id;
    const auto before = shim_.knobs(link).get("comm_mode");
    if (a.op == ControlAction::Op::kSet) {
      shim_.set_knob(link, a.knob, a.value, now);
    } else {
      shim_.reset_knob(link, a.knob, now);
    }
    if (shim_.knobs(link).get("comm_mode") != before) ++switches_[link_role_.at(link)];
    dispatch(link, now);
  }

  const ExperimentConfig& cfg_;
  const RunSpec& spec_;
  std::vector<std::string> chain_;
  Kernel kernel_;
  MetricsPlane metrics_;
  Shim shim_;
  KvManager kv_;
  Controller controller_;
  std::vector<std::unique_ptr<AgentInstance>> instances_;
  std::vector<std::size_t> hop_of_;
  std::map<std::string, std::vector<AgentId>> role_instances_;
  std::map<std::pair<AgentId, AgentId>, LinkId> link_of_;
  std::vector<std::string> link_role_;
  NodeId pipeline_node_ = 0;
  std::unordered_map<RequestId, RequestState> requests_;
  std::vector<RequestId> order_;
  std::unordered_map<RequestId, std::size_t> blocked_hop_;
  std::vector<double> busy_seen_;
  double last_poll_ = 0.0;
  std::map<std::string, int> switches_;
};

double mean_of(const std::vector<double>& v) {
  if (v.empty()) return 0.0;
  return std::accumulate(v.begin(), v.end(), 0.0) / static_cast<double>(v.size());
}

double p90_of(const std::vector<double>& v) {
  if (v.empty()) return 0.0;
  return aggregate(v, AggregationKind{AggregationKind::Kind::kP90, {}});
}

}  // namespace

RunResult simulate(const ExperimentConfig& cfg, const RunSpec& spec) {
  Simulation sim(cfg, spec);
  return sim.run();
}

ReportRow summarize(const RunResult& run) {
  ReportRow row;
  row.load_point = run.load_point;
  row.rate_rps = run.rate_rps;
  row.policy = run.policy;
  row.load_balancing = std::string(to_string(run.load_balancing));
  row.seed = run.seed;
  row.offered = static_cast<std::int64_t>(run.outcomes.size());
  std::vector<double> e2e, e2e_i, ttft;
  double last = 0.0;
  std::int64_t tokens = 0;
  std::int64_t with_deadline = 0, violations = 0;
  for (const auto& o : run.outcomes) {
    if (o.deadline) {
      ++with_deadline;
      if (!o.completion || *o.completion > *o.deadline) ++violations;
    }
    if (!o.completion) continue;
    ++row.completed;
    tokens += o.tokens;
    last = std::max(last, o.completion->ms());
    const double lat = *o.completion - o.arrival;
    e2e.push_back(lat);
    if (o.interactive) e2e_i.push_back(lat);
    if (o.final_first_token) ttft.push_back(*o.final_first_token - o.arrival);
  }
  row.incomplete = row.offered - row.completed;
  const double span_s = std::max(run.duration_ms, last) / 1000.0;
  if (span_s > 0.0) {
    row.goodput_rps = static_cast<double>(row.completed) / span_s;
    row.token_throughput_tps = static_cast<double>(tokens) / span_s;
  }
  row.mean_e2e_ms = mean_of(e2e);
  row.p90_e2e_ms = p90_of(e2e);
  row.mean_e2e_interactive_ms = mean_of(e2e_i);
  row.p90_e2e_interactive_ms = p90_of(e2e_i);
  row.mean_ttft_final_ms = mean_of(ttft);
  row.slo_violation_fraction =
      with_deadline == 0 ? 0.0 : static_cast<double>(violations) / static_cast<double>(with_deadline);
  for (const auto& [link, n] : run.mode_switches) {
    row.mode_switches += n;
    if (!row.mode_switches_by_link.empty()) row.mode_switches_by_link += ';';
    row.mode_switches_by_link += link + "=" + std::to_string(n);
  }
  return row;
}

// ---------------------------------------------------------------------------
// Reports

namespace {

constexpr const char* kColumns[] = {
    "load_point",       "rate_rps",          "policy",         "load_balancing",
    "seed",             "offered",           "completed",      "incomplete",
    "goodput_rps",      "token_throughput_tps", "mean_e2e_ms", "p90_e2e_ms",
    "mean_e2e_interactive_ms", "p90_e2e_interactive_ms", "mean_ttft_final_ms", "slo_violation_fraction",
    "mode_switches",    "mode_switches_by_link", "winner",
};

std::string fmt(double v) {
  char buf[64];
  std::snprintf(buf, sizeof buf, "%.17g", v);
  return buf;
}

std::vector<std::string> split_csv_line(std::string_view line) {
  std::vector<std::string> out(1);
  for (char c : line) {
    if (c == ',') {
      out.emplace_back();
    } else {
      out.back() += c;
    }
  }
  return out;
}

}  // namespace

std::string Report::to_csv() const {
  std::string s;
  for (std::size_t i = 0; i < std::size(kColumns); ++i) {
    if (i) s += ',';
    s += kColumns[i];
  }
  s += '\n';
  for (const auto& r : rows) {
    s += fmt(r.load_point) + ',' + fmt(r.rate_rps) + ',' + r.policy + ',' + r.load_balancing + ',' +
         std::to_string(r.seed) + ',' + std::to_string(r.offered) + ',' + std::to_string(r.completed) + ',' +
         std::to_string(r.incomplete) + ',' + fmt(r.goodput_rps) + ',' + fmt(r.token_throughput_tps) + ',' +
         fmt(r.mean_e2e_ms) + ',' + fmt(r.p90_e2e_ms) + ',' + fmt(r.mean_e2e_interactive_ms) + ',' +
         fmt(r.p90_e2e_interactive_ms) + ',' + fmt(r.mean_ttft_final_ms) + ',' + fmt(r.slo_violation_fraction) +
         ',' + std::to_string(r.mode_switches) + ',' + r.mode_switches_by_link + ',' + (r.winner ? "1" : "0") +
         '\n';
  }
  return s;
}

Report Report::parse_csv(std::string_view text) {
  Report rep;
  std::size_t pos = 0;
  int line_no = 0;
  bool header = true;
  while (pos < text.size()) {
    auto end = text.find('\n', pos);
    if (end == std::string_view::npos) end = text.size();
    const auto line = text.substr(pos, end - pos);
    pos = end + 1;
    ++line_no;
    if (line.empty()) continue;
    const auto f = split_csv_line(line);
    if (f.size() != std::size(kColumns)) {
      throw Error(ErrorCode::kParseError, "line " + std::to_string(line_no) + ": expected " +
                                              std::to_string(std::size(kColumns)) + " fields");
    }
    if (header) {
      for (std::size_t i = 0; i < f.size(); ++i) {
        if (f[i] != kColumns[i]) throw Error(ErrorCode::kParseError, "line 1: unexpected column '" + f[i] + "'");
      }
      header = false;
      continue;
    }
    try {
      ReportRow r;
      r.load_point = std::stod(f[0]);
      r.rate_rps = std::stod(f[1]);
      r.policy = f[2];
      r.load_balancing = f[3];
      r.seed = std::stoull(f[4]);
      r.offered = std::stoll(f[5]);
      r.completed = std::stoll(f[6]);
      r.incomplete = std::stoll(f[7]);
      r.goodput_rps = std::stod(f[8]);
      r.token_throughput_tps = std::stod(f[9]);
      r.mean_e2e_ms = std::stod(f[10]);
      r.p90_e2e_ms = std::stod(f[11]);
      r.mean_e2e_interactive_ms = std::stod(f[12]);
      r.p90_e2e_interactive_ms = std::stod(f[13]);
      r.mean_ttft_final_ms = std::stod(f[14]);
      r.slo_violation_fraction = std::stod(f[15]);
      r.mode_switches = std::stoll(f[16]);
      r.mode_switches_by_link = f[17];
      r.winner = f[18] == "1";
      rep.rows.push_back(std::move(r));
    } catch (const std::logic_error&) {
      throw Error(ErrorCode::kParseError, "line " + std::to_string(line_no) + ": malformed number");
    }
  }
  return rep;
}

// ---------------------------------------------------------------------------
// Experiments

ExperimentResult run_experiment(const ExperimentConfig& cfg, const RunOptions& options) {
  cfg.validate();
  std::vector<RunSpec> specs;
  for (std::size_t i = 0; i < load_point_count(cfg); ++i) {
    const auto requests = workload_for(cfg, i);
    const double lp = cfg.requests.empty() && !cfg.load_points.empty() ? cfg.load_points[i] : 0.0;
    const double rate = offered_rate(cfg, i);
    for (auto lb : cfg.load_balancing) {
      for (const auto& p : cfg.policies) {
        specs.push_back(RunSpec{p, lb, lp, rate, requests, options.record_traces});
      }
    }
  }
  ExperimentResult res;
  res.runs.resize(specs.size());
  unsigned threads = options.threads != 0 ? options.threads : std::max(1U, std::thread::hardware_concurrency());
  threads = std::min<unsigned>(threads, static_cast<unsigned>(std::max<std::size_t>(specs.size(), 1)));
  std::atomic<std::size_t> next{0};
  std::exception_ptr failure;
  std::mutex failure_mu;
  auto worker = [&] {
    for (std::size_t i = next++; i < specs.size(); i = next++) {
      try {
        res.runs[i] = simulate(cfg, specs[i]);
      } catch (...) {
        std::lock_guard lock(failure_mu);
        if (!failure) failure = std::current_exception();
      }
    }
  };
  if (threads <= 1) {
    worker();
  } else {
    std::vector<std::thread> pool;
    for (unsigned t = 0; t < threads; ++t) pool.emplace_back(worker);
    for (auto& t : pool) t.join();
  }
  if (failure) std::rethrow_exception(failure);
  for (const auto& r : res.runs) res.report.rows.push_back(summarize(r));
  return res;
}

void mark_winners(Report& report) {
  std::map<std::tuple<double, double, std::string>, std::vector<std::size_t>> groups;
  for (std::size_t i = 0; i < report.rows.size(); ++i) {
    const auto& r = report.rows[i];
    report.rows[i].winner = false;
    groups[{r.load_point, r.rate_rps, r.load_balancing}].push_back(i);
  }
  for (const auto& [_, idx] : groups) {
    double best_goodput = 0.0;
    for (auto i : idx) best_goodput = std::max(best_goodput, report.rows[i].goodput_rps);
    std::size_t winner = idx.front();
    bool found = false;
    for (auto i : idx) {
      const auto& r = report.rows[i];
      if (r.goodput_rps < 0.99 * best_goodput) continue;
      if (!found || r.p90_e2e_ms < report.rows[winner].p90_e2e_ms) {
        winner = i;
        found = true;
      }
    }
    report.rows[winner].winner = true;
  }
}

ExperimentResult compare_modes(const ExperimentConfig& cfg, const RunOptions& options) {
  auto res = run_experiment(cfg, options);
  mark_winners(res.report);
  return res;
}

}  // namespace agentserve
