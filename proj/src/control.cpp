// Copyright 2026 The agentserve Authors.
// SPDX-License-Identifier: Apache-2.0

#include "agentserve/control.hpp"

#include <algorithm>
#include <charconv>
#include <cmath>
#include <limits>
#include <set>

#include <json.hpp>

namespace agentserve {

namespace {

// Window used for the router's queue_depth view: effectively all history, so
// the last sample of an idle node still counts.
constexpr double kRoutingWindowMs = 1e15;

std::optional<std::uint32_t> parse_id(std::string_view s) {
  std::uint32_t v = 0;
  auto [p, ec] = std::from_chars(s.data(), s.data() + s.size(), v);
  if (ec != std::errc{} || p != s.data() + s.size()) return std::nullopt;
  return v;
}

}  // namespace

Comparator parse_comparator(std::string_view t) {
  if (t == "<") return Comparator::kLt;
  if (t == "<=" || t == "≤") return Comparator::kLe;
  if (t == ">") return Comparator::kGt;
  if (t == ">=" || t == "≥") return Comparator::kGe;
  if (t == "==") return Comparator::kEq;
  if (t == "!=") return Comparator::kNe;
  throw Error(ErrorCode::kParseError, "unknown comparator '" + std::string(t) + "'");
}

std::string_view to_string(Comparator c) {
  switch (c) {
    case Comparator::kLt: return "<";
    case Comparator::kLe: return "<=";
    case Comparator::kGt: return ">";
    case Comparator::kGe: return ">=";
    case Comparator::kEq: return "==";
    case Comparator::kNe: return "!=";
  }
  return "?";
}

Comparator negate(Comparator c) {
  switch (c) {
    case Comparator::kLt: return Comparator::kGe;
    case Comparator::kLe: return Comparator::kGt;
    case Comparator::kGt: return Comparator::kLe;
    case Comparator::kGe: return Comparator::kLt;
    case Comparator::kEq: return Comparator::kNe;
    case Comparator::kNe: return Comparator::kEq;
  }
  return c;
}

bool compare(double lhs, Comparator c, double rhs) {
  switch (c) {
    case Comparator::kLt: return lhs < rhs;
    case Comparator::kLe: return lhs <= rhs;
    case Comparator::kGt: return lhs > rhs;
    case Comparator::kGe: return lhs >= rhs;
    case Comparator::kEq: return lhs == rhs;
    case Comparator::kNe: return lhs != rhs;
  }
  return false;
}

Address Address::parse(std::string_view text) {
  auto fail = [&] { throw Error(ErrorCode::kParseError, "bad address '" + std::string(text) + "'"); };
  Address a;
  std::string_view rest;
  if (text.starts_with("agent:")) {
    a.kind = Kind::kAgent;
    rest = text.substr(6);
  } else if (text.starts_with("link:")) {
    a.kind = Kind::kLink;
    rest = text.substr(5);
  } else {
    fail();
  }
  const auto slash = rest.rfind('/');
  if (slash == std::string_view::npos || slash + 1 == rest.size()) fail();
  a.knob = std::string(rest.substr(slash + 1));
  const auto node = rest.substr(0, slash);
  if (a.kind == Kind::kLink) {
    const auto arrow = node.find("->");
    if (arrow == std::string_view::npos || arrow == 0 || arrow + 2 == node.size()) fail();
    a.agent = std::string(node.substr(0, arrow));
    a.destination = std::string(node.substr(arrow + 2));
  } else {
    if (node.empty()) fail();
    a.agent = std::string(node);
  }
  return a;
}

std::string Address::to_string() const {
  if (kind == Kind::kAgent) return "agent:" + agent + "/" + knob;
  return "link:" + agent + "->" + destination + "/" + knob;
}

bool RequestMatch::matches(const Request& r, const std::string& hop_role) const {
  if (cls && r.priority.cls != *cls) return false;
  if (min_level && r.priority.level < *min_level) return false;
  if (max_level && r.priority.level > *max_level) return false;
  if (hop && *hop != hop_role) return false;
  if (session && r.session != *session) return false;
  return true;
}

std::string ControlAction::to_string() const {
  std::string s = op == Op::kSet ? "set " : "reset ";
  s += kind == Address::Kind::kAgent ? "agent:" : "link:";
  s += target + "/" + knob + "=" + knob_value_to_string(value);
  return s;
}

std::pair<std::string, std::optional<AggregationKind>> split_metric_name(std::string_view name) {
  static constexpr std::string_view kinds[] = {"p50", "p90", "p99", "mean", "max", "min", "sum", "count", "last"};
  for (auto k : kinds) {
    const std::string infix = "_" + std::string(k);
    std::size_t pos = 0;
    while ((pos = name.find(infix, pos)) != std::string_view::npos) {
      const auto end = pos + infix.size();
      if (end == name.size() || name[end] == '_') {
        std::string base(name.substr(0, pos));
        base += name.substr(end);
        return {base, AggregationKind::parse(k)};
      }
      pos = end;
    }
  }
  return {std::string(name), std::nullopt};
}

// ---------------------------------------------------------------------------
// Intent compilation

RuleSet compile_intent(const Intent& intent, const std::vector<std::pair<std::string, std::string>>& links) {
  if (intent.objective == Objective::kNone && intent.agent_rules.empty() && intent.request_rules.empty()) {
    throw Error(ErrorCode::kInvalidIntent, "intent has neither an objective nor rules");
  }
  RuleSet out{intent.agent_rules, intent.request_rules};
  std::uint64_t next = 1;
  for (const auto& r : intent.agent_rules) next = std::max(next, r.id + 1);
  for (const auto& r : intent.request_rules) next = std::max(next, r.id + 1);

  auto link_address = [](const std::pair<std::string, std::string>& l) {
    Address a;
    a.kind = Address::Kind::kLink;
    a.agent = l.first;
    a.destination = l.second;
    a.knob = "comm_mode";
    return a;
  };
  auto mode_rule = [&](const Address& a, Condition c, std::string_view mode) {
    AgentLevelRule r;
    r.id = next++;
    r.target = a;
    r.condition = std::move(c);
    r.op = AgentLevelRule::Op::kSet;
    r.value = std::string(mode);
    r.dwell_ms = kDefaultDwellMs;
    out.agent_rules.push_back(std::move(r));
  };

  if (intent.objective == Objective::kMaxThroughput) {
    for (const auto& l : links) {
      const auto a = link_address(l);
      auto busy = [](Comparator c, double t) {
        MetricPredicate p;
        p.metric = "server_busy_fraction";
        p.node = "$dst";
        p.aggregation = AggregationKind{AggregationKind::Kind::kMean, {}};
        p.window_ms = 1000.0;
        p.comparator = c;
        p.threshold = t;
        return p;
      };
      mode_rule(a, Condition{{busy(Comparator::kGe, kBandHigh)}}, "batch_all");
      mode_rule(a, Condition{{busy(Comparator::kLe, kBandLow)}}, "token_stream");
      mode_rule(a, Condition{{busy(Comparator::kGt, kBandLow), busy(Comparator::kLt, kBandHigh)}}, "per_function");
    }
  } else if (intent.objective == Objective::kMinP90Latency) {
    auto constraint_predicate = [](const Constraint& c, bool violated) {
      auto [metric, agg] = split_metric_name(c.metric);
      if (c.scope == "interactive" && metric == "e2e_latency_ms") metric = "e2e_latency_interactive_ms";
      MetricPredicate p;
      p.metric = metric;
      p.node = kPipelineNode;
      p.aggregation = agg;
      p.window_ms = c.window_ms;
      p.comparator = violated ? negate(c.comparator) : c.comparator;
      p.threshold = c.value;
      return p;
    };
    Condition within;
    for (const auto& c : intent.constraints) within.all_of.push_back(constraint_predicate(c, false));
    for (const auto& l : links) mode_rule(link_address(l), within, "token_stream");
    for (const auto& c : intent.constraints) {
      for (const auto& l : links) {
        const bool scoped = c.scope.empty() || c.scope == "all" || c.scope == "interactive" ||
                            c.scope == l.first + "->" + l.second;
        if (scoped) mode_rule(link_address(l), Condition{{constraint_predicate(c, true)}}, "batch_all");
      }
    }
  }
  return out;
}

// ---------------------------------------------------------------------------
// Policy documents

namespace {

using nlohmann::json;

[[noreturn]] void policy_fail(const std::string& what) { throw Error(ErrorCode::kParseError, what); }

void check_keys(const json& obj, std::initializer_list<std::string_view> allowed, const std::string& where) {
  if (!obj.is_object()) policy_fail(where + ": expected an object");
  for (const auto& [key, _] : obj.items()) {
    if (std::find(allowed.begin(), allowed.end(), key) == allowed.end()) {
      policy_fail(where + ": unknown key '" + key + "'");
    }
  }
}

KnobValue knob_value_from_json(const json& v, const std::string& where) {
  if (v.is_number_integer()) return v.get<std::int64_t>();
  if (v.is_number()) return v.get<double>();
  if (v.is_string()) return v.get<std::string>();
  policy_fail(where + ": knob value must be a number or string");
}

MetricPredicate predicate_from_json(const json& j, const std::string& where) {
  check_keys(j, {"metric", "node", "aggregation", "window_ms", "comparator", "threshold"}, where);
  MetricPredicate p;
  if (!j.contains("metric") || !j.contains("comparator") || !j.contains("threshold")) {
    policy_fail(where + ": predicate needs metric, comparator and threshold");
  }
  p.metric = j.at("metric").get<std::string>();
  if (j.contains("node")) p.node = j.at("node").get<std::string>();
  if (j.contains("aggregation")) p.aggregation = AggregationKind::parse(j.at("aggregation").get<std::string>());
  if (j.contains("window_ms")) p.window_ms = j.at("window_ms").get<double>();
  p.comparator = parse_comparator(j.at("comparator").get<std::string>());
  p.threshold = j.at("threshold").get<double>();
  if (!(p.window_ms > 0.0)) policy_fail(where + ": window_ms must be > 0");
  return p;
}

AgentLevelRule agent_rule_from_json(const json& j, const std::string& where) {
  check_keys(j, {"id", "target", "action", "value", "condition", "dwell_ms"}, where);
  if (!j.contains("id") || !j.contains("target") || !j.contains("action")) {
    policy_fail(where + ": agent rule needs id, target and action");
  }
  AgentLevelRule r;
  r.id = j.at("id").get<std::uint64_t>();
  r.target = Address::parse(j.at("target").get<std::string>());
  const auto action = j.at("action").get<std::string>();
  if (action == "set") {
    r.op = AgentLevelRule::Op::kSet;
    if (!j.contains("value")) policy_fail(where + ": set needs a value");
    r.value = knob_value_from_json(j.at("value"), where);
  } else if (action == "reset") {
    r.op = AgentLevelRule::Op::kReset;
  } else {
    policy_fail(where + ": action must be set or reset");
  }
  if (j.contains("condition")) {
    const auto& c = j.at("condition");
    if (c.is_string()) {
      if (c.get<std::string>() != "always") policy_fail(where + ": condition must be 'always' or a list");
    } else if (c.is_array()) {
      for (std::size_t i = 0; i < c.size(); ++i) {
        r.condition.all_of.push_back(predicate_from_json(c[i], where + ".condition[" + std::to_string(i) + "]"));
      }
    } else {
      policy_fail(where + ": condition must be 'always' or a list");
    }
  }
  if (j.contains("dwell_ms")) r.dwell_ms = j.at("dwell_ms").get<double>();
  if (!(r.dwell_ms >= 0.0)) policy_fail(where + ": dwell_ms must be >= 0");
  return r;
}

RequestLevelRule request_rule_from_json(const json& j, const std::string& where) {
  check_keys(j, {"id", "match", "action"}, where);
  if (!j.contains("id") || !j.contains("action")) policy_fail(where + ": request rule needs id and action");
  RequestLevelRule r;
  r.id = j.at("id").get<std::uint64_t>();
  if (j.contains("match")) {
    const auto& m = j.at("match");
    check_keys(m, {"class", "min_level", "max_level", "hop", "session"}, where + ".match");
    if (m.contains("class")) {
      const auto c = m.at("class").get<std::string>();
      if (c == "interactive") {
        r.match.cls = PriorityClass::kInteractive;
      } else if (c == "background") {
        r.match.cls = PriorityClass::kBackground;
      } else {
        policy_fail(where + ".match: class must be interactive or background");
      }
    }
    if (m.contains("min_level")) r.match.min_level = m.at("min_level").get<int>();
    if (m.contains("max_level")) r.match.max_level = m.at("max_level").get<int>();
    if (m.contains("hop")) r.match.hop = m.at("hop").get<std::string>();
    if (m.contains("session")) r.match.session = m.at("session").get<SessionId>();
  }
  const auto& a = j.at("action");
  check_keys(a, {"route_to", "block_until", "set_priority"}, where + ".action");
  if (a.size() != 1) policy_fail(where + ".action: exactly one of route_to, block_until, set_priority");
  if (a.contains("route_to")) {
    r.action.kind = RequestAction::Kind::kRouteTo;
    const auto s = a.at("route_to").get<std::string>();
    if (s == "least_queue_depth") {
      r.action.selector = Selector::kLeastQueueDepth;
    } else if (s == "round_robin") {
      r.action.selector = Selector::kRoundRobin;
    } else if (s.starts_with("fixed:") && s.size() > 6) {
      r.action.selector = Selector::kFixed;
      r.action.fixed = s.substr(6);
    } else {
      policy_fail(where + ".action: unknown selector '" + s + "'");
    }
  } else if (a.contains("block_until")) {
    r.action.kind = RequestAction::Kind::kBlockUntil;
    r.action.until = predicate_from_json(a.at("block_until"), where + ".action.block_until");
  } else {
    r.action.kind = RequestAction::Kind::kSetPriority;
    r.action.level = a.at("set_priority").get<int>();
    if (r.action.level < 0 || r.action.level > Priority::kMaxLevel) {
      policy_fail(where + ".action: set_priority level out of range");
    }
  }
  return r;
}

}  // namespace

Intent parse_policy(std::string_view json_text) {
  json doc;
  try {
    doc = json::parse(json_text);
  } catch (const json::parse_error& e) {
    policy_fail(std::string("policy: ") + e.what());
  }
  Intent intent;
  try {
    check_keys(doc, {"objective", "constraints", "rules"}, "policy");
    if (doc.contains("objective") && !doc.at("objective").is_null()) {
      const auto o = doc.at("objective").get<std::string>();
      if (o == "max_throughput") {
        intent.objective = Objective::kMaxThroughput;
      } else if (o == "min_p90_latency") {
        intent.objective = Objective::kMinP90Latency;
      } else if (o != "none") {
        policy_fail("policy.objective: unknown objective '" + o + "'");
      }
    }
    if (doc.contains("constraints")) {
      const auto& cs = doc.at("constraints");
      if (!cs.is_array()) policy_fail("policy.constraints: expected a list");
      for (std::size_t i = 0; i < cs.size(); ++i) {
        const auto where = "policy.constraints[" + std::to_string(i) + "]";
        check_keys(cs[i], {"metric", "comparator", "value", "scope", "window_ms"}, where);
        if (!cs[i].contains("metric") || !cs[i].contains("comparator") || !cs[i].contains("value")) {
          policy_fail(where + ": constraint needs metric, comparator and value");
        }
        Constraint c;
        c.metric = cs[i].at("metric").get<std::string>();
        c.comparator = parse_comparator(cs[i].at("comparator").get<std::string>());
        c.value = cs[i].at("value").get<double>();
        if (cs[i].contains("scope")) c.scope = cs[i].at("scope").get<std::string>();
        if (cs[i].contains("window_ms")) c.window_ms = cs[i].at("window_ms").get<double>();
        intent.constraints.push_back(std::move(c));
      }
    }
    if (doc.contains("rules")) {
      const auto& rs = doc.at("rules");
      check_keys(rs, {"agent_level", "request_level"}, "policy.rules");
      if (rs.contains("agent_level")) {
        const auto& list = rs.at("agent_level");
        if (!list.is_array()) policy_fail("policy.rules.agent_level: expected a list");
        for (std::size_t i = 0; i < list.size(); ++i) {
          intent.agent_rules.push_back(
              agent_rule_from_json(list[i], "policy.rules.agent_level[" + std::to_string(i) + "]"));
        }
      }
      if (rs.contains("request_level")) {
        const auto& list = rs.at("request_level");
        if (!list.is_array()) policy_fail("policy.rules.request_level: expected a list");
        for (std::size_t i = 0; i < list.size(); ++i) {
          intent.request_rules.push_back(
              request_rule_from_json(list[i], "policy.rules.request_level[" + std::to_string(i) + "]"));
        }
      }
    }
  } catch (const json::exception& e) {
    policy_fail(std::string("policy: ") + e.what());
  }
  if (intent.objective == Objective::kNone && intent.agent_rules.empty() && intent.request_rules.empty()) {
    throw Error(ErrorCode::kInvalidIntent, "policy has neither an objective nor rules");
  }
  return intent;
}

// ---------------------------------------------------------------------------
// Controller

void Controller::register_agent(AgentId id, const KnobRegistry& knobs, std::string name, std::string role) {
  if (store_.agents.contains(id) || store_.metric_nodes.contains(id)) {
    throw Error(ErrorCode::kDuplicateRegistration, "agent " + std::to_string(id) + " already registered");
  }
  if (name.empty()) name = std::to_string(id);
  store_.agents.emplace(id, StateStore::AgentEntry{std::move(name), std::move(role), knobs});
}

void Controller::register_link(LinkId id, const KnobRegistry& knobs, AgentId source, AgentId destination) {
  if (store_.links.contains(id)) {
    throw Error(ErrorCode::kDuplicateRegistration, "link " + std::to_string(id) + " already registered");
  }
  auto s = store_.agents.find(source);
  auto d = store_.agents.find(destination);
  if (s == store_.agents.end() || d == store_.agents.end()) {
    throw Error(ErrorCode::kUnknownTarget, "link endpoints must be registered agents");
  }
  store_.links.emplace(id, StateStore::LinkEntry{s->second.name + "->" + d->second.name, source, destination, knobs});
}

void Controller::register_node(NodeId id, std::string name) {
  if (store_.agents.contains(id) || store_.metric_nodes.contains(id)) {
    throw Error(ErrorCode::kDuplicateRegistration, "node " + std::to_string(id) + " already registered");
  }
  store_.metric_nodes.emplace(id, std::move(name));
}

std::vector<AgentId> Controller::resolve_agents(const std::string& name) const {
  std::vector<AgentId> out;
  for (const auto& [id, a] : store_.agents) {
    if (a.name == name || a.role == name) out.push_back(id);
  }
  if (out.empty()) {
    if (auto id = parse_id(name); id && store_.agents.contains(*id)) out.push_back(*id);
  }
  return out;
}

std::vector<Controller::Target> Controller::resolve(const Address& a) const {
  std::vector<Target> out;
  if (a.kind == Address::Kind::kAgent) {
    for (auto id : resolve_agents(a.agent)) out.push_back({a.kind, id, store_.agents.at(id).name, id});
    return out;
  }
  const auto src = resolve_agents(a.agent);
  const auto dst = resolve_agents(a.destination);
  for (const auto& [id, l] : store_.links) {
    const bool s = std::find(src.begin(), src.end(), l.source) != src.end();
    const bool d = std::find(dst.begin(), dst.end(), l.destination) != dst.end();
    if (s && d) out.push_back({a.kind, id, l.name, l.destination});
  }
  return out;
}

KnobRegistry& Controller::registry(const Target& t) {
  if (t.kind == Address::Kind::kAgent) return store_.agents.at(t.id).knobs;
  return store_.links.at(t.id).knobs;
}

void Controller::install_rule(const AgentLevelRule& rule) {
  const auto targets = resolve(rule.target);
  if (targets.empty()) throw Error(ErrorCode::kUnknownTarget, "no registered target for " + rule.target.to_string());
  for (const auto& t : targets) {
    const auto& reg = registry(t);
    if (!reg.contains(rule.target.knob)) {
      throw Error(ErrorCode::kUnknownKnob, "target " + t.name + " has no knob '" + rule.target.knob + "'");
    }
    if (rule.op == AgentLevelRule::Op::kSet) reg.spec(rule.target.knob).coerce(rule.value);
  }
  if (!(rule.dwell_ms >= 0.0) || !std::isfinite(rule.dwell_ms)) {
    throw Error(ErrorCode::kValueOutOfRange, "dwell_ms must be finite and >= 0");
  }
  for (const auto& p : rule.condition.all_of) {
    if (!std::isfinite(p.threshold) || !(p.window_ms > 0.0)) {
      throw Error(ErrorCode::kValueOutOfRange, "predicate thresholds must be finite and windows positive");
    }
  }
  agent_rules_[rule.id] = rule;
}

void Controller::install_rule(const RequestLevelRule& rule) {
  if (rule.action.kind == RequestAction::Kind::kRouteTo && rule.action.selector == Selector::kFixed &&
      resolve_agents(rule.action.fixed).empty()) {
    throw Error(ErrorCode::kUnknownTarget, "no registered instance '" + rule.action.fixed + "'");
  }
  if (rule.action.kind == RequestAction::Kind::kBlockUntil && !std::isfinite(rule.action.until.threshold)) {
    throw Error(ErrorCode::kValueOutOfRange, "predicate thresholds must be finite");
  }
  request_rules_[rule.id] = rule;
}

void Controller::install(const RuleSet& rules) {
  for (const auto& r : rules.agent_rules) install_rule(r);
  for (const auto& r : rules.request_rules) install_rule(r);
}

void Controller::update_snapshot(double window_ms, std::optional<AggregationKind> aggregation, Snapshot snapshot) {
  store_.last_poll = std::max(store_.last_poll, snapshot.poll_time);
  store_.snapshots[{window_ms, std::move(aggregation)}] = std::move(snapshot);
}

void Controller::refresh(const MetricsPlane& metrics, SimTime now) {
  std::map<StateStore::SnapshotKey, std::set<std::string>> groups;
  for (const auto& [_, r] : agent_rules_) {
    for (const auto& p : r.condition.all_of) groups[{p.window_ms, p.aggregation}].insert(p.metric);
  }
  for (const auto& [_, r] : request_rules_) {
    if (r.action.kind == RequestAction::Kind::kBlockUntil) {
      const auto& p = r.action.until;
      groups[{p.window_ms, p.aggregation}].insert(p.metric);
    }
  }
  groups[{kRoutingWindowMs, AggregationKind{AggregationKind::Kind::kLast, {}}}].insert("queue_depth");

  std::vector<NodeId> nodes;
  for (const auto& [id, _] : store_.agents) nodes.push_back(id);
  for (const auto& [id, _] : store_.metric_nodes) nodes.push_back(id);
  for (const auto& [key, names] : groups) {
    const std::vector<std::string> list(names.begin(), names.end());
    update_snapshot(key.window_ms, key.kind(), metrics.poll(nodes, list, key.window_ms, now, key.kind()));
  }
  store_.last_poll = now;
  store_.routed_since_poll.clear();
}

std::optional<double> Controller::value_of(const MetricPredicate& p, AgentId self) const {
  auto snap = store_.snapshots.find({p.window_ms, p.aggregation});
  if (snap == store_.snapshots.end()) return std::nullopt;
  std::vector<NodeId> nodes;
  if (p.node == "$dst" || p.node == "$self") {
    nodes.push_back(self);
  } else {
    for (const auto& [id, name] : store_.metric_nodes) {
      if (name == p.node) nodes.push_back(id);
    }
    if (nodes.empty()) nodes = resolve_agents(p.node);
  }
  double sum = 0.0;
  int n = 0;
  for (auto id : nodes) {
    if (auto v = snap->second.get(id, p.metric)) {
      sum += *v;
      ++n;
    }
  }
  if (n == 0) return std::nullopt;
  return sum / n;
}

bool Controller::holds(const Condition& c, AgentId self) const {
  for (const auto& p : c.all_of) {
    const auto v = value_of(p, self);
    if (!v || !compare(*v, p.comparator, p.threshold)) return false;
  }
  return true;
}

std::vector<ControlAction> Controller::tick(SimTime now) {
  std::vector<ControlAction> actions;
  for (const auto& [id, rule] : agent_rules_) {
    for (const auto& t : resolve(rule.target)) {
      if (!holds(rule.condition, t.self)) continue;
      const auto key = std::make_pair(t.name, rule.target.knob);
      if (auto last = store_.last_fire.find(key);
          last != store_.last_fire.end() && now - last->second < rule.dwell_ms) {
        continue;
      }
      auto& reg = registry(t);
      const auto& spec = reg.spec(rule.target.knob);
      const KnobValue next = rule.op == AgentLevelRule::Op::kSet ? spec.coerce(rule.value) : spec.default_value;
      if (reg.get(rule.target.knob) == next) continue;
      reg.set(rule.target.knob, next);
      store_.last_fire[key] = now;
      actions.push_back(ControlAction{rule.op, t.kind, t.id, t.name, rule.target.knob, next, id});
    }
  }
  return actions;
}

double Controller::queue_depth(AgentId id) const {
  double depth = 0.0;
  auto snap = store_.snapshots.find({kRoutingWindowMs, AggregationKind{AggregationKind::Kind::kLast, {}}});
  if (snap != store_.snapshots.end()) depth = snap->second.get(id, "queue_depth").value_or(0.0);
  if (auto r = store_.routed_since_poll.find(id); r != store_.routed_since_poll.end()) depth += r->second;
  return depth;
}

AgentId Controller::select(Selector s, const std::string& fixed, std::span<const AgentId> instances,
                           std::uint64_t rr_key) {
  switch (s) {
    case Selector::kFixed: {
      for (auto id : resolve_agents(fixed)) {
        if (std::find(instances.begin(), instances.end(), id) != instances.end()) return id;
      }
      throw Error(ErrorCode::kNoInstanceAvailable, "fixed instance '" + fixed + "' is not a candidate");
    }
    case Selector::kRoundRobin: {
      std::vector<AgentId> sorted(instances.begin(), instances.end());
      std::sort(sorted.begin(), sorted.end());
      auto& counter = round_robin_[{rr_key, store_.agents.contains(sorted.front())
                                                ? store_.agents.at(sorted.front()).role
                                                : std::string()}];
      return sorted[counter++ % sorted.size()];
    }
    case Selector::kLeastQueueDepth:
      break;
  }
  AgentId best = instances.front();
  double best_depth = queue_depth(best);
  for (auto id : instances.subspan(1)) {
    const double d = queue_depth(id);
    if (d < best_depth || (d == best_depth && id < best)) {
      best = id;
      best_depth = d;
    }
  }
  return best;
}

RouteDecision Controller::decide(const Request& request, const std::string& role, std::span<const AgentId> instances,
                                 std::optional<AgentId> kv_location, bool allow_block) {
  if (instances.empty()) throw Error(ErrorCode::kNoInstanceAvailable, "no instance of role '" + role + "'");
  RouteDecision d;
  d.priority = request.priority;
  Request view = request;
  const RequestLevelRule* route_rule = nullptr;
  for (const auto& [id, rule] : request_rules_) {
    if (!rule.match.matches(view, role)) continue;
    switch (rule.action.kind) {
      case RequestAction::Kind::kSetPriority:
        d.priority.level = rule.action.level;
        view.priority = d.priority;
        break;
      case RequestAction::Kind::kBlockUntil:
        if (allow_block && !holds(Condition{{rule.action.until}}, kNoAgent)) {
          blocked_.push_back(Blocked{request, role, {instances.begin(), instances.end()}, kv_location, id});
          d.status = RouteDecision::Status::kBlocked;
          d.rule_id = id;
          return d;
        }
        break;
      case RequestAction::Kind::kRouteTo:
        if (route_rule == nullptr) route_rule = &rule;
        break;
    }
  }
  if (route_rule != nullptr) {
    d.instance = select(route_rule->action.selector, route_rule->action.fixed, instances, route_rule->id);
    d.rule_id = route_rule->id;
  } else {
    d.instance = select(default_selector_, {}, instances, 0);
  }
  if (hints_ && kv_location && *kv_location != d.instance) d.hint = d.instance;
  store_.routed_since_poll[d.instance] += 1.0;
  return d;
}

RouteDecision Controller::route(const Request& request, const std::string& role, std::span<const AgentId> instances,
                                std::optional<AgentId> kv_location) {
  return decide(request, role, instances, kv_location, true);
}

std::vector<Controller::Released> Controller::release(SimTime) {
  std::vector<Released> out;
  std::vector<Blocked> still;
  for (auto& b : blocked_) {
    auto rule = request_rules_.find(b.rule_id);
    const bool free = rule == request_rules_.end() ||
                      rule->second.action.kind != RequestAction::Kind::kBlockUntil ||
                      holds(Condition{{rule->second.action.until}}, kNoAgent);
    if (!free) {
      still.push_back(std::move(b));
      continue;
    }
    auto d = decide(b.request, b.role, b.instances, b.kv_location, false);
    out.push_back(Released{std::move(b.request), std::move(b.role), d});
  }
  blocked_ = std::move(still);
  return out;
}

}  // namespace agentserve
