// Copyright 2026 The agentserve Authors.
// SPDX-License-Identifier: Apache-2.0

#include "agentserve/metrics.hpp"

#include <algorithm>
#include <set>

#include <json.hpp>

namespace agentserve {

AggregationKind AggregationKind::parse(std::string_view text) {
  using K = Kind;
  static const std::pair<std::string_view, K> table[] = {
      {"mean", K::kMean}, {"max", K::kMax}, {"min", K::kMin}, {"sum", K::kSum},   {"count", K::kCount},
      {"last", K::kLast}, {"p50", K::kP50}, {"p90", K::kP90}, {"p99", K::kP99},
  };
  for (const auto& [name, kind] : table) {
    if (text == name) return {kind, {}};
  }
  constexpr std::string_view prefix = "custom:";
  if (text.starts_with(prefix) && text.size() > prefix.size()) {
    return custom(std::string(text.substr(prefix.size())));
  }
  throw Error(ErrorCode::kParseError, "unknown aggregation '" + std::string(text) + "'");
}

std::string AggregationKind::to_string() const {
  switch (kind) {
    case Kind::kMean: return "mean";
    case Kind::kMax: return "max";
    case Kind::kMin: return "min";
    case Kind::kSum: return "sum";
    case Kind::kCount: return "count";
    case Kind::kLast: return "last";
    case Kind::kP50: return "p50";
    case Kind::kP90: return "p90";
    case Kind::kP99: return "p99";
    case Kind::kCustom: return "custom:" + custom_name;
  }
  return "?";
}

std::optional<double> Snapshot::get(NodeId node, const std::string& name) const {
  auto it = entries.find({node, name});
  if (it == entries.end()) return std::nullopt;
  return it->second;
}

namespace {

double nearest_rank(std::span<const double> samples, int percent) {
  std::vector<double> v(samples.begin(), samples.end());
  const std::size_t n = v.size();
  // ceil(percent * n / 100) in integers, clamped to [1, n].
  std::size_t rank = (static_cast<std::size_t>(percent) * n + 99) / 100;
  rank = std::clamp<std::size_t>(rank, 1, n);
  std::nth_element(v.begin(), v.begin() + static_cast<std::ptrdiff_t>(rank - 1), v.end());
  return v[rank - 1];
}

}  // namespace

double aggregate(std::span<const double> samples, const AggregationKind& kind) {
  using K = AggregationKind::Kind;
  if (samples.empty()) throw Error(ErrorCode::kEmptyInput, "aggregate over no samples");
  switch (kind.kind) {
    case K::kMean: {
      double sum = 0.0;
      for (double x : samples) sum += x;
      return sum / static_cast<double>(samples.size());
    }
    case K::kMax: return *std::max_element(samples.begin(), samples.end());
    case K::kMin: return *std::min_element(samples.begin(), samples.end());
    case K::kSum: {
      double sum = 0.0;
      for (double x : samples) sum += x;
      return sum;
    }
    case K::kCount: return static_cast<double>(samples.size());
    case K::kLast: return samples.back();
    case K::kP50: return nearest_rank(samples, 50);
    case K::kP90: return nearest_rank(samples, 90);
    case K::kP99: return nearest_rank(samples, 99);
    case K::kCustom: break;
  }
  throw Error(ErrorCode::kUnknownCustomAggregation, "no registry for custom aggregation '" + kind.custom_name + "'");
}

namespace {

// 1-based line of each top-level array element that opens an object.
std::vector<int> element_lines(std::string_view text) {
  std::vector<int> lines;
  int line = 1;
  int depth = 0;
  bool in_string = false;
  bool escaped = false;
  for (char c : text) {
    if (c == '\n') ++line;
    if (in_string) {
      if (escaped) {
        escaped = false;
      } else if (c == '\\') {
        escaped = true;
      } else if (c == '"') {
        in_string = false;
      }
      continue;
    }
    switch (c) {
      case '"': in_string = true; break;
      case '[':
      case '{':
        if (c == '{' && depth == 1) lines.push_back(line);
        ++depth;
        break;
      case ']':
      case '}': --depth; break;
      default: break;
    }
  }
  return lines;
}

int line_of_byte(std::string_view text, std::size_t byte) {
  byte = std::min(byte, text.size());
  return 1 + static_cast<int>(std::count(text.begin(), text.begin() + static_cast<std::ptrdiff_t>(byte), '\n'));
}

[[noreturn]] void parse_fail(int line, const std::string& what) {
  throw Error(ErrorCode::kParseError, "line " + std::to_string(line) + ": " + what);
}

}  // namespace

std::vector<MetricDescriptor> load_descriptors(std::string_view text) {
  nlohmann::json doc;
  try {
    doc = nlohmann::json::parse(text);
  } catch (const nlohmann::json::parse_error& e) {
    parse_fail(line_of_byte(text, e.byte == 0 ? 0 : e.byte - 1), e.what());
  }
  if (!doc.is_array()) parse_fail(1, "descriptor document must be a JSON array");
  const auto lines = element_lines(text);

  static const std::set<std::string> required = {"name", "unit", "direction", "default_aggregation",
                                                 "source", "description"};
  std::vector<MetricDescriptor> out;
  std::set<std::string> seen;
  for (std::size_t i = 0; i < doc.size(); ++i) {
    const int line = i < lines.size() ? lines[i] : 1;
    const auto& obj = doc[i];
    if (!obj.is_object()) parse_fail(line, "descriptor must be an object");
    for (const auto& [key, _] : obj.items()) {
      if (!required.contains(key)) parse_fail(line, "unknown key '" + key + "'");
    }
    for (const auto& key : required) {
      if (!obj.contains(key)) parse_fail(line, "missing required key '" + key + "'");
      if (!obj[key].is_string()) parse_fail(line, "key '" + key + "' must be a string");
    }
    MetricDescriptor d;
    d.name = obj["name"].get<std::string>();
    d.unit = obj["unit"].get<std::string>();
    d.description = obj["description"].get<std::string>();
    const auto dir = obj["direction"].get<std::string>();
    if (dir == "higher_is_better") {
      d.direction = Direction::kHigherIsBetter;
    } else if (dir == "lower_is_better") {
      d.direction = Direction::kLowerIsBetter;
    } else if (dir == "neutral") {
      d.direction = Direction::kNeutral;
    } else {
      parse_fail(line, "bad direction '" + dir + "'");
    }
    const auto src = obj["source"].get<std::string>();
    if (src == "system") {
      d.source = MetricSource::kSystem;
    } else if (src == "application") {
      d.source = MetricSource::kApplication;
    } else {
      parse_fail(line, "bad source '" + src + "'");
    }
    try {
      d.default_aggregation = AggregationKind::parse(obj["default_aggregation"].get<std::string>());
    } catch (const Error& e) {
      parse_fail(line, e.what());
    }
    if (d.name.empty()) parse_fail(line, "empty metric name");
    if (!seen.insert(d.name).second) {
      throw Error(ErrorCode::kDuplicateName, "line " + std::to_string(line) + ": duplicate metric '" + d.name + "'");
    }
    out.push_back(std::move(d));
  }
  return out;
}

std::vector<MetricDescriptor> builtin_descriptors() {
  using K = AggregationKind::Kind;
  auto d = [](std::string name, std::string unit, Direction dir, K agg, MetricSource src, std::string desc) {
    return MetricDescriptor{std::move(name), std::move(unit), dir, {agg, {}}, src, std::move(desc)};
  };
  return {
      d("queue_depth", "requests", Direction::kLowerIsBetter, K::kLast, MetricSource::kSystem,
        "work items resident on the node, waiting or running"),
      d("batch_size", "sequences", Direction::kNeutral, K::kMean, MetricSource::kSystem,
        "sequences advanced by a decode step"),
      d("server_busy_fraction", "fraction", Direction::kHigherIsBetter, K::kMean, MetricSource::kSystem,
        "share of the last poll period the server was occupied"),
      d("ttft_ms", "ms", Direction::kLowerIsBetter, K::kMean, MetricSource::kApplication,
        "arrival at node to first generated token"),
      d("tpt_ms", "ms", Direction::kLowerIsBetter, K::kMean, MetricSource::kApplication,
        "mean time per output token after the first"),
      d("e2e_latency_ms", "ms", Direction::kLowerIsBetter, K::kP90, MetricSource::kApplication,
        "request arrival to completion at the final hop"),
      d("e2e_latency_interactive_ms", "ms", Direction::kLowerIsBetter, K::kP90, MetricSource::kApplication,
        "e2e_latency_ms restricted to interactive requests"),
      d("envelopes_received", "count", Direction::kNeutral, K::kLast, MetricSource::kSystem,
        "cumulative envelopes received"),
  };
}

void MetricsPlane::register_metric(NodeId node, MetricDescriptor descriptor) {
  auto& metrics = nodes_[node];
  if (metrics.contains(descriptor.name)) {
    throw Error(ErrorCode::kDuplicateName, "metric '" + descriptor.name + "' already registered on node " +
                                               std::to_string(node));
  }
  Ring ring;
  auto name = descriptor.name;
  ring.descriptor = std::move(descriptor);
  metrics.emplace(std::move(name), std::move(ring));
}

void MetricsPlane::register_metrics(NodeId node, const std::vector<MetricDescriptor>& descriptors) {
  for (const auto& d : descriptors) register_metric(node, d);
}

void MetricsPlane::register_custom_aggregation(std::string name, CustomAggregation fn) {
  custom_.insert_or_assign(std::move(name), std::move(fn));
}

const MetricsPlane::Ring* MetricsPlane::find(NodeId node, const std::string& name) const {
  auto n = nodes_.find(node);
  if (n == nodes_.end()) return nullptr;
  auto m = n->second.find(name);
  return m == n->second.end() ? nullptr : &m->second;
}

bool MetricsPlane::has_metric(NodeId node, const std::string& name) const { return find(node, name) != nullptr; }

const MetricDescriptor& MetricsPlane::descriptor(NodeId node, const std::string& name) const {
  const auto* ring = find(node, name);
  if (ring == nullptr) throw Error(ErrorCode::kUnknownMetric, "unknown metric '" + name + "'");
  return ring->descriptor;
}

void MetricsPlane::record(NodeId node, const std::string& name, double value, SimTime now) {
  auto n = nodes_.find(node);
  if (n == nodes_.end() || !n->second.contains(name)) {
    throw Error(ErrorCode::kUnknownMetric,
                "metric '" + name + "' not registered on node " + std::to_string(node));
  }
  auto& ring = n->second.at(name);
  if (ring.slots.size() < capacity_) {
    ring.slots.emplace_back(now.ms(), value);
  } else {
    ring.slots[ring.head] = {now.ms(), value};
  }
  ring.head = (ring.head + 1) % capacity_;
  ring.size = std::min(ring.size + 1, capacity_);
}

std::vector<double> MetricsPlane::window(NodeId node, const std::string& name, double window_ms,
                                         SimTime now) const {
  std::vector<double> out;
  const auto* ring = find(node, name);
  if (ring == nullptr) return out;
  const double lo = now.ms() - window_ms;
  // Newest to oldest, stopping at the first sample outside the window.
  for (std::size_t k = 0; k < ring->size; ++k) {
    const std::size_t idx = (ring->head + capacity_ - 1 - k) % capacity_;
    const auto [t, v] = ring->slots[idx];
    if (t > now.ms()) continue;
    if (t <= lo) break;
    out.push_back(v);
  }
  std::reverse(out.begin(), out.end());
  return out;
}

double MetricsPlane::aggregate(std::span<const double> samples, const AggregationKind& kind) const {
  if (kind.kind != AggregationKind::Kind::kCustom) return agentserve::aggregate(samples, kind);
  auto it = custom_.find(kind.custom_name);
  if (it == custom_.end()) {
    throw Error(ErrorCode::kUnknownCustomAggregation, "unknown custom aggregation '" + kind.custom_name + "'");
  }
  if (samples.empty()) throw Error(ErrorCode::kEmptyInput, "aggregate over no samples");
  return it->second(samples);
}

Snapshot MetricsPlane::poll(std::span<const NodeId> nodes, std::span<const std::string> names, double window_ms,
                            SimTime now, const std::optional<AggregationKind>& override_kind) const {
  if (!(window_ms > 0.0)) throw Error(ErrorCode::kInvalidField, "window_ms must be > 0");
  Snapshot snap;
  snap.poll_time = now;
  snap.window_ms = window_ms;
  for (NodeId node : nodes) {
    for (const auto& name : names) {
      const auto* ring = find(node, name);
      if (ring == nullptr) continue;
      const auto values = window(node, name, window_ms, now);
      if (values.empty()) continue;
      const auto& kind = override_kind ? *override_kind : ring->descriptor.default_aggregation;
      snap.entries[{node, name}] = aggregate(values, kind);
    }
  }
  return snap;
}

}  // namespace agentserve
