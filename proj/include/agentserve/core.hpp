// Copyright 2026 The agentserve Authors.
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <compare>
#include <cstdint>
#include <optional>
#include <stdexcept>
#include <string>
#include <string_view>
#include <vector>

namespace agentserve {

enum class ErrorCode {
  kInvalidField,
  kTimeInPast,
  kUnknownLink,
  kInvalidGranularity,
  kUnknownParameter,
  kValueOutOfRange,
  kNoResidentCache,
  kUnknownMetric,
  kEmptyInput,
  kUnknownCustomAggregation,
  kParseError,
  kDuplicateName,
  kDuplicateRegistration,
  kUnknownTarget,
  kUnknownKnob,
  kNoInstanceAvailable,
  kInvalidIntent,
  kConfigError,
};

std::string_view to_string(ErrorCode code);

// All recoverable failures in the library are reported through this type so
// callers can branch on code() without string matching.
class Error : public std::runtime_error {
 public:
  Error(ErrorCode code, const std::string& what) : std::runtime_error(what), code_(code) {}
  ErrorCode code() const noexcept { return code_; }

 private:
  ErrorCode code_;
};

// Simulated time in milliseconds.
class SimTime {
 public:
  constexpr SimTime() = default;
  constexpr explicit SimTime(double ms) : ms_(ms) {}

  constexpr double ms() const noexcept { return ms_; }

  friend constexpr auto operator<=>(SimTime, SimTime) = default;
  friend constexpr SimTime operator+(SimTime t, double d) { return SimTime(t.ms_ + d); }
  friend constexpr double operator-(SimTime a, SimTime b) { return a.ms_ - b.ms_; }

 private:
  double ms_ = 0.0;
};

enum class PriorityClass : std::uint8_t { kBackground = 0, kInteractive = 1 };

struct Priority {
  PriorityClass cls = PriorityClass::kBackground;
  int level = 0;

  static constexpr int kMaxLevel = 7;
  static constexpr int kInteractiveDefaultLevel = 4;

  static Priority interactive(int level = kInteractiveDefaultLevel) {
    return {PriorityClass::kInteractive, level};
  }
  static Priority background(int level = 0) { return {PriorityClass::kBackground, level}; }

  bool valid() const noexcept { return level >= 0 && level <= kMaxLevel; }

  friend constexpr auto operator<=>(const Priority&, const Priority&) = default;
};

using RequestId = std::uint64_t;
using SessionId = std::uint64_t;
using AgentId = std::uint32_t;
using LinkId = std::uint32_t;

struct Request {
  RequestId id = 0;
  SimTime arrival;
  Priority priority;
  std::int64_t prompt_tokens = 1;
  std::int64_t output_tokens = 1;
  std::optional<SimTime> slo_deadline;
  SessionId session = 0;
  std::vector<std::string> hops;

  bool interactive() const noexcept { return priority.cls == PriorityClass::kInteractive; }
};

struct InvalidField {
  std::string name;
  std::string reason;
};

// Returns the first violated field, or nullopt when the request is well formed.
std::optional<InvalidField> validate_request(const Request& r);

class Granularity {
 public:
  enum class Kind : std::uint8_t { kTokenStream, kPerFunction, kBatchAll };

  static Granularity token_stream(std::int64_t chunk_tokens);
  static Granularity per_function() { return Granularity(Kind::kPerFunction, 0); }
  static Granularity batch_all() { return Granularity(Kind::kBatchAll, 0); }

  // Accepts "batch_all", "per_function", "token_stream" (chunk 16) and
  // "token_stream(N)".
  static Granularity parse(std::string_view text);

  Kind kind() const noexcept { return kind_; }
  std::int64_t chunk_tokens() const noexcept { return chunk_; }
  std::string to_string() const;

  friend bool operator==(const Granularity&, const Granularity&) = default;

 private:
  Granularity(Kind k, std::int64_t chunk) : kind_(k), chunk_(chunk) {}
  Kind kind_;
  std::int64_t chunk_;
};

inline constexpr std::int64_t kDefaultChunkTokens = 16;

std::string_view mode_name(Granularity::Kind kind);

struct MessageEnvelope {
  std::uint64_t id = 0;
  RequestId request_id = 0;
  AgentId source = 0;
  AgentId destination = 0;
  LinkId link = 0;
  std::int64_t payload_tokens = 0;
  std::int64_t seq = 0;
  bool is_final = false;
  Priority priority;
  SimTime created;
  // Granularity in force when the envelope was cut; receivers use it to pick
  // the start-of-work rule.
  Granularity::Kind mode = Granularity::Kind::kBatchAll;
};

}  // namespace agentserve
