// Copyright 2026 The agentserve Authors.
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <cstdint>
#include <functional>
#include <map>
#include <optional>
#include <span>
#include <string>
#include <string_view>
#include <unordered_map>
#include <utility>
#include <vector>

#include "agentserve/core.hpp"

namespace agentserve {

using NodeId = AgentId;

struct AggregationKind {
  enum class Kind : std::uint8_t { kMean, kMax, kMin, kSum, kCount, kLast, kP50, kP90, kP99, kCustom };
  Kind kind = Kind::kMean;
  std::string custom_name;

  static AggregationKind parse(std::string_view text);  // throws Error(kParseError)
  static AggregationKind custom(std::string name) { return {Kind::kCustom, std::move(name)}; }
  std::string to_string() const;

  friend bool operator==(const AggregationKind&, const AggregationKind&) = default;
  friend auto operator<=>(const AggregationKind&, const AggregationKind&) = default;
};

enum class Direction : std::uint8_t { kHigherIsBetter, kLowerIsBetter, kNeutral };
enum class MetricSource : std::uint8_t { kSystem, kApplication };

struct MetricDescriptor {
  std::string name;
  std::string unit;
  Direction direction = Direction::kNeutral;
  AggregationKind default_aggregation;
  MetricSource source = MetricSource::kSystem;
  std::string description;
};

struct MetricSample {
  std::string name;
  NodeId node = 0;
  SimTime time;
  double value = 0.0;
};

struct Snapshot {
  SimTime poll_time;
  double window_ms = 0.0;
  std::map<std::pair<NodeId, std::string>, double> entries;

  std::optional<double> get(NodeId node, const std::string& name) const;
  friend bool operator==(const Snapshot&, const Snapshot&) = default;
};

using CustomAggregation = std::function<double(std::span<const double>)>;

// Built-in reductions. Percentiles are nearest-rank (ceil(q*n)-th smallest).
// Throws Error(kEmptyInput) on empty input and Error(kUnknownCustomAggregation)
// for custom kinds, which need a MetricsPlane registry.
double aggregate(std::span<const double> samples, const AggregationKind& kind);

// Parses a descriptor document: a JSON array of objects with exactly the keys
// name, unit, direction, default_aggregation, source, description.
// Throws Error(kParseError) with the 1-based line, or Error(kDuplicateName).
std::vector<MetricDescriptor> load_descriptors(std::string_view text);

// Descriptors for the metrics every agent node emits.
std::vector<MetricDescriptor> builtin_descriptors();

inline constexpr std::size_t kDefaultRingCapacity = 65536;

// Two-tier telemetry: one local collector (ring buffer per metric) per node
// plus an on-demand poller.
class MetricsPlane {
 public:
  // Throws Error(kInvalidField) for a zero capacity.
  explicit MetricsPlane(std::size_t ring_capacity = kDefaultRingCapacity) : capacity_(ring_capacity) {
    if (capacity_ == 0) throw Error(ErrorCode::kInvalidField, "ring capacity must be >= 1");
  }

  // Throws Error(kDuplicateName) if the node already has the metric.
  void register_metric(NodeId node, MetricDescriptor descriptor);
  void register_metrics(NodeId node, const std::vector<MetricDescriptor>& descriptors);
  void register_custom_aggregation(std::string name, CustomAggregation fn);

  bool has_metric(NodeId node, const std::string& name) const;
  const MetricDescriptor& descriptor(NodeId node, const std::string& name) const;

  // Throws Error(kUnknownMetric).
  void record(NodeId node, const std::string& name, double value, SimTime now);

  // Aggregates samples in (now - window_ms, now]. Pairs with no samples in
  // the window, or unknown to the node, are omitted. Does not mutate state.
  Snapshot poll(std::span<const NodeId> nodes, std::span<const std::string> names, double window_ms,
                SimTime now, const std::optional<AggregationKind>& override_kind = std::nullopt) const;

  double aggregate(std::span<const double> samples, const AggregationKind& kind) const;

  // Values in (now - window_ms, now], oldest first.
  std::vector<double> window(NodeId node, const std::string& name, double window_ms, SimTime now) const;

 private:
  struct Ring {
    MetricDescriptor descriptor;
    std::vector<std::pair<double, double>> slots;  // (time_ms, value)
    std::size_t head = 0;                           // next write position
    std::size_t size = 0;
  };

  const Ring* find(NodeId node, const std::string& name) const;

  std::size_t capacity_;
  std::map<NodeId, std::unordered_map<std::string, Ring>> nodes_;
  std::map<std::string, CustomAggregation> custom_;
};

}  // namespace agentserve
