// Copyright 2026 The agentserve Authors.
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <cstdint>
#include <map>
#include <string>
#include <variant>
#include <vector>

#include "agentserve/core.hpp"

namespace agentserve {

using KnobValue = std::variant<std::int64_t, double, std::string>;

std::string knob_value_to_string(const KnobValue& v);

enum class KnobType : std::uint8_t { kInteger, kReal, kEnum };
enum class KnobScope : std::uint8_t { kServing, kDataplane };

struct KnobSpec {
  std::string name;
  KnobType type = KnobType::kInteger;
  KnobValue default_value = std::int64_t{0};
  double min = 0.0;  // numeric knobs, inclusive
  double max = 0.0;
  std::vector<std::string> allowed;  // enum knobs
  KnobScope scope = KnobScope::kServing;

  // Converts v to the knob's canonical representation; throws
  // Error(kValueOutOfRange) if it does not fit the type or range.
  KnobValue coerce(const KnobValue& v) const;
};

// The uniform set/reset surface every agent and link advertises to the
// controller.
class KnobRegistry {
 public:
  void add(KnobSpec spec);

  bool contains(const std::string& name) const { return entries_.contains(name); }
  const KnobSpec& spec(const std::string& name) const;
  const KnobValue& get(const std::string& name) const;
  std::int64_t get_int(const std::string& name) const;
  double get_real(const std::string& name) const;
  const std::string& get_enum(const std::string& name) const;

  // Returns the value actually stored.
  const KnobValue& set(const std::string& name, const KnobValue& value);
  const KnobValue& reset(const std::string& name);

  std::vector<std::string> names() const;

 private:
  struct Entry {
    KnobSpec spec;
    KnobValue value;
  };
  Entry& entry(const std::string& name);
  const Entry& entry(const std::string& name) const;

  std::map<std::string, Entry> entries_;
};

KnobRegistry default_agent_knobs(std::int64_t max_num_seqs = 8);
KnobRegistry default_link_knobs(const Granularity& mode, double pacing_gap = 0.0);

// Admission filter strings: "all" or "priority_at_least(k)" for k in [0,7].
int admission_min_level(const std::string& admission);

}  // namespace agentserve
