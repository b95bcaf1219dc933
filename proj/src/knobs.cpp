// Copyright 2026 The agentserve Authors.
// SPDX-License-Identifier: Apache-2.0

#include "agentserve/knobs.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>

namespace agentserve {

std::string knob_value_to_string(const KnobValue& v) {
  if (const auto* i = std::get_if<std::int64_t>(&v)) return std::to_string(*i);
  if (const auto* d = std::get_if<double>(&v)) {
    char buf[32];
    std::snprintf(buf, sizeof buf, "%.17g", *d);
    return buf;
  }
  return std::get<std::string>(v);
}

KnobValue KnobSpec::coerce(const KnobValue& v) const {
  auto out_of_range = [&](const std::string& why) {
    return Error(ErrorCode::kValueOutOfRange, name + ": " + why);
  };
  switch (type) {
    case KnobType::kInteger: {
      std::int64_t x = 0;
      if (const auto* i = std::get_if<std::int64_t>(&v)) {
        x = *i;
      } else if (const auto* d = std::get_if<double>(&v); d && std::floor(*d) == *d && std::isfinite(*d)) {
        x = static_cast<std::int64_t>(*d);
      } else {
        throw out_of_range("expects an integer, got '" + knob_value_to_string(v) + "'");
      }
      if (static_cast<double>(x) < min || static_cast<double>(x) > max) {
        throw out_of_range(std::to_string(x) + " outside [" + knob_value_to_string(min) + ", " +
                           knob_value_to_string(max) + "]");
      }
      return x;
    }
    case KnobType::kReal: {
      double x = 0.0;
      if (const auto* i = std::get_if<std::int64_t>(&v)) {
        x = static_cast<double>(*i);
      } else if (const auto* d = std::get_if<double>(&v)) {
        x = *d;
      } else {
        throw out_of_range("expects a number, got '" + std::get<std::string>(v) + "'");
      }
      if (!std::isfinite(x) || x < min || x > max) {
        throw out_of_range(knob_value_to_string(x) + " outside [" + knob_value_to_string(min) + ", " +
                           knob_value_to_string(max) + "]");
      }
      return x;
    }
    case KnobType::kEnum: {
      const auto* s = std::get_if<std::string>(&v);
      if (s == nullptr || std::find(allowed.begin(), allowed.end(), *s) == allowed.end()) {
        throw out_of_range("'" + knob_value_to_string(v) + "' is not an allowed value");
      }
      return *s;
    }
  }
  throw out_of_range("bad knob type");
}

void KnobRegistry::add(KnobSpec spec) {
  // coerce() throws when the default sits outside the valid range.
  KnobValue def = spec.coerce(spec.default_value);
  spec.default_value = def;
  auto name = spec.name;
  entries_.insert_or_assign(name, Entry{std::move(spec), std::move(def)});
}

KnobRegistry::Entry& KnobRegistry::entry(const std::string& name) {
  auto it = entries_.find(name);
  if (it == entries_.end()) throw Error(ErrorCode::kUnknownParameter, "unknown parameter '" + name + "'");
  return it->second;
}

const KnobRegistry::Entry& KnobRegistry::entry(const std::string& name) const {
  auto it = entries_.find(name);
  if (it == entries_.end()) throw Error(ErrorCode::kUnknownParameter, "unknown parameter '" + name + "'");
  return it->second;
}

const KnobSpec& KnobRegistry::spec(const std::string& name) const { return entry(name).spec; }
const KnobValue& KnobRegistry::get(const std::string& name) const { return entry(name).value; }

std::int64_t KnobRegistry::get_int(const std::string& name) const {
  return std::get<std::int64_t>(entry(name).value);
}

double KnobRegistry::get_real(const std::string& name) const {
  const auto& v = entry(name).value;
  if (const auto* i = std::get_if<std::int64_t>(&v)) return static_cast<double>(*i);
  return std::get<double>(v);
}

const std::string& KnobRegistry::get_enum(const std::string& name) const {
  return std::get<std::string>(entry(name).value);
}

const KnobValue& KnobRegistry::set(const std::string& name, const KnobValue& value) {
  auto& e = entry(name);
  e.value = e.spec.coerce(value);
  return e.value;
}

const KnobValue& KnobRegistry::reset(const std::string& name) {
  auto& e = entry(name);
  e.value = e.spec.default_value;
  return e.value;
}

std::vector<std::string> KnobRegistry::names() const {
  std::vector<std::string> out;
  out.reserve(entries_.size());
  for (const auto& [name, _] : entries_) out.push_back(name);
  return out;
}

KnobRegistry default_agent_knobs(std::int64_t max_num_seqs) {
  KnobRegistry reg;
  reg.add({.name = "max_num_seqs", .type = KnobType::kInteger, .default_value = max_num_seqs,
           .min = 1, .max = 64, .allowed = {}, .scope = KnobScope::kServing});
  std::vector<std::string> admission{"all"};
  for (int k = 0; k <= Priority::kMaxLevel; ++k) {
    admission.push_back("priority_at_least(" + std::to_string(k) + ")");
  }
  reg.add({.name = "admission", .type = KnobType::kEnum, .default_value = std::string("all"),
           .allowed = std::move(admission), .scope = KnobScope::kServing});
  return reg;
}

KnobRegistry default_link_knobs(const Granularity& mode, double pacing_gap) {
  KnobRegistry reg;
  reg.add({.name = "comm_mode", .type = KnobType::kEnum,
           .default_value = std::string(mode_name(mode.kind())),
           .allowed = {"token_stream", "per_function", "batch_all"}, .scope = KnobScope::kDataplane});
  const std::int64_t chunk =
      mode.kind() == Granularity::Kind::kTokenStream ? mode.chunk_tokens() : kDefaultChunkTokens;
  reg.add({.name = "chunk_tokens", .type = KnobType::kInteger, .default_value = chunk, .min = 1,
           .max = 65536, .allowed = {}, .scope = KnobScope::kDataplane});
  reg.add({.name = "pacing_gap", .type = KnobType::kReal, .default_value = pacing_gap, .min = 0.0,
           .max = 1e9, .allowed = {}, .scope = KnobScope::kDataplane});
  return reg;
}

int admission_min_level(const std::string& admission) {
  if (admission == "all") return 0;
  constexpr std::string_view prefix = "priority_at_least(";
  if (admission.starts_with(prefix) && admission.size() == prefix.size() + 2 && admission.back() == ')') {
    const char c = admission[prefix.size()];
    if (c >= '0' && c <= '7') return c - '0';
  }
  throw Error(ErrorCode::kValueOutOfRange, "bad admission filter '" + admission + "'");
}

}  // namespace agentserve
