// Copyright 2026 The agentserve Authors.
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <cstdint>
#include <map>
#include <optional>
#include <span>
#include <string>
#include <string_view>
#include <utility>
#include <vector>

#include "agentserve/core.hpp"
#include "agentserve/kernel.hpp"
#include "agentserve/knobs.hpp"
#include "agentserve/metrics.hpp"

namespace agentserve {

enum class Comparator : std::uint8_t { kLt, kLe, kGt, kGe, kEq, kNe };

Comparator parse_comparator(std::string_view text);  // throws Error(kParseError)
std::string_view to_string(Comparator c);
Comparator negate(Comparator c);
bool compare(double lhs, Comparator c, double rhs);

// Node selectors: an instance name ("tester.1"), a role name (mean over its
// instances), a registered metric node ("pipeline"), or "$dst" / "$self" for
// the rule target's destination instance or the agent itself.
struct MetricPredicate {
  std::string metric;
  std::string node = "$dst";
  std::optional<AggregationKind> aggregation;  // descriptor default when unset
  double window_ms = 1000.0;
  Comparator comparator = Comparator::kGt;
  double threshold = 0.0;
};

// Conjunction; empty means always.
struct Condition {
  std::vector<MetricPredicate> all_of;
  bool always() const noexcept { return all_of.empty(); }
};

// "agent:<name>/<knob>" or "link:<src>-><dst>/<knob>". Names may be instance
// names, role names (all instances) or numeric ids.
struct Address {
  enum class Kind : std::uint8_t { kAgent, kLink };
  Kind kind = Kind::kAgent;
  std::string agent;  // or link source
  std::string destination;
  std::string knob;

  static Address parse(std::string_view text);  // throws Error(kParseError)
  std::string to_string() const;
};

struct AgentLevelRule {
  std::uint64_t id = 0;
  Address target;
  Condition condition;
  enum class Op : std::uint8_t { kSet, kReset };
  Op op = Op::kSet;
  KnobValue value = std::int64_t{0};  // ignored for reset
  double dwell_ms = 1000.0;
};

struct RequestMatch {
  std::optional<PriorityClass> cls;
  std::optional<int> min_level;
  std::optional<int> max_level;
  std::optional<std::string> hop;
  std::optional<SessionId> session;

  bool matches(const Request& r, const std::string& hop_role) const;
};

enum class Selector : std::uint8_t { kLeastQueueDepth, kFixed, kRoundRobin };

struct RequestAction {
  enum class Kind : std::uint8_t { kRouteTo, kBlockUntil, kSetPriority };
  Kind kind = Kind::kRouteTo;
  Selector selector = Selector::kLeastQueueDepth;
  std::string fixed;  // instance name for Selector::kFixed
  MetricPredicate until;
  int level = 0;
};

struct RequestLevelRule {
  std::uint64_t id = 0;
  RequestMatch match;
  RequestAction action;
};

struct ControlAction {
  using Op = AgentLevelRule::Op;
  Op op = Op::kSet;
  Address::Kind kind = Address::Kind::kAgent;
  std::uint32_t target_id = 0;  // AgentId or LinkId
  std::string target;           // instance or link name
  std::string knob;
  KnobValue value;              // value after the action
  std::uint64_t rule_id = 0;

  std::string to_string() const;
};

enum class Objective : std::uint8_t { kNone, kMaxThroughput, kMinP90Latency };

struct Constraint {
  std::string metric;  // e.g. "e2e_latency_p90_ms"
  Comparator comparator = Comparator::kLe;
  double value = 0.0;
  std::string scope;   // "", "all", "interactive" or "<src>-><dst>"
  double window_ms = 10000.0;
};

struct Intent {
  Objective objective = Objective::kNone;
  std::vector<Constraint> constraints;
  std::vector<AgentLevelRule> agent_rules;
  std::vector<RequestLevelRule> request_rules;
};

struct RuleSet {
  std::vector<AgentLevelRule> agent_rules;
  std::vector<RequestLevelRule> request_rules;
};

inline constexpr double kBandHigh = 0.8;
inline constexpr double kBandLow = 0.4;
inline constexpr double kDefaultDwellMs = 1000.0;
inline constexpr char kPipelineNode[] = "pipeline";

// Expands objective templates over the given role-level links (source,
// destination). Explicit rules pass through unchanged; generated rules get
// ids above every explicit id. Throws Error(kInvalidIntent).
RuleSet compile_intent(const Intent& intent, const std::vector<std::pair<std::string, std::string>>& links);

// Policy document: {"objective", "constraints", "rules": {"agent_level",
// "request_level"}}. Throws Error(kParseError) or Error(kInvalidIntent).
Intent parse_policy(std::string_view json_text);

// Splits "e2e_latency_p90_ms" into ("e2e_latency_ms", p90). Names without an
// aggregation infix come back unchanged with no aggregation.
std::pair<std::string, std::optional<AggregationKind>> split_metric_name(std::string_view name);

struct RouteDecision {
  enum class Status : std::uint8_t { kRouted, kBlocked };
  Status status = Status::kRouted;
  AgentId instance = 0;
  Priority priority;
  std::optional<AgentId> hint;  // apply_hint(session, *hint)
  std::uint64_t rule_id = 0;    // 0 when the default selector chose
};

struct StateStore {
  struct AgentEntry {
    std::string name;
    std::string role;
    KnobRegistry knobs;
  };
  struct LinkEntry {
    std::string name;
    AgentId source = 0;
    AgentId destination = 0;
    KnobRegistry knobs;
  };
  struct SnapshotKey {
    double window_ms = 0.0;
    bool has_aggregation = false;
    AggregationKind aggregation;
    SnapshotKey(double window, const std::optional<AggregationKind>& agg)
        : window_ms(window), has_aggregation(agg.has_value()), aggregation(agg.value_or(AggregationKind{})) {}
    std::optional<AggregationKind> kind() const {
      return has_aggregation ? std::optional(aggregation) : std::nullopt;
    }
    friend auto operator<=>(const SnapshotKey&, const SnapshotKey&) = default;
  };

  SimTime last_poll;
  std::map<SnapshotKey, Snapshot> snapshots;
  std::map<AgentId, AgentEntry> agents;
  std::map<LinkId, LinkEntry> links;
  std::map<NodeId, std::string> metric_nodes;
  std::map<std::pair<std::string, std::string>, SimTime> last_fire;  // (target, knob)
  std::map<AgentId, double> routed_since_poll;
};

// Logically central controller. Reads only its StateStore; acts only through
// set/reset actions returned by tick() and routing decisions.
class Controller {
 public:
  void register_agent(AgentId id, const KnobRegistry& knobs, std::string name = {}, std::string role = {});
  void register_link(LinkId id, const KnobRegistry& knobs, AgentId source, AgentId destination);
  void register_node(NodeId id, std::string name);

  // Throws Error(kUnknownTarget / kUnknownKnob / kValueOutOfRange).
  void install_rule(const AgentLevelRule& rule);
  void install_rule(const RequestLevelRule& rule);
  void install(const RuleSet& rules);
  const std::map<std::uint64_t, AgentLevelRule>& agent_rules() const noexcept { return agent_rules_; }
  const std::map<std::uint64_t, RequestLevelRule>& request_rules() const noexcept { return request_rules_; }

  void set_hints(bool on) noexcept { hints_ = on; }
  void set_default_selector(Selector s) noexcept { default_selector_ = s; }

  // Polls every registered node for the metrics the rules and router need.
  void refresh(const MetricsPlane& metrics, SimTime now);
  void update_snapshot(double window_ms, std::optional<AggregationKind> aggregation, Snapshot snapshot);

  std::vector<ControlAction> tick(SimTime now);

  // Throws Error(kNoInstanceAvailable) for an empty instance list. A blocked
  // request is held by the controller until release() frees it.
  RouteDecision route(const Request& request, const std::string& role, std::span<const AgentId> instances,
                      std::optional<AgentId> kv_location = std::nullopt);

  struct Released {
    Request request;
    std::string role;
    RouteDecision decision;
  };
  std::vector<Released> release(SimTime now);
  std::size_t blocked_count() const noexcept { return blocked_.size(); }

  const StateStore& store() const noexcept { return store_; }

 private:
  struct Blocked {
    Request request;
    std::string role;
    std::vector<AgentId> instances;
    std::optional<AgentId> kv_location;
    std::uint64_t rule_id = 0;
  };
  struct Target {
    Address::Kind kind;
    std::uint32_t id;
    std::string name;
    AgentId self;  // destination for links, the agent itself otherwise
  };

  std::vector<Target> resolve(const Address& a) const;
  std::vector<AgentId> resolve_agents(const std::string& name) const;
  KnobRegistry& registry(const Target& t);
  std::optional<double> value_of(const MetricPredicate& p, AgentId self) const;
  bool holds(const Condition& c, AgentId self) const;
  AgentId select(Selector s, const std::string& fixed, std::span<const AgentId> instances, std::uint64_t rr_key);
  double queue_depth(AgentId id) const;
  RouteDecision decide(const Request& request, const std::string& role, std::span<const AgentId> instances,
                       std::optional<AgentId> kv_location, bool allow_block);

  StateStore store_;
  std::map<std::uint64_t, AgentLevelRule> agent_rules_;
  std::map<std::uint64_t, RequestLevelRule> request_rules_;
  std::vector<Blocked> blocked_;
  std::map<std::pair<std::uint64_t, std::string>, std::uint64_t> round_robin_;
  Selector default_selector_ = Selector::kLeastQueueDepth;
  bool hints_ = false;
};

}  // namespace agentserve
