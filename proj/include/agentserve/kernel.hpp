// Copyright 2026 The agentserve Authors.
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <cstdint>
#include <functional>
#include <iosfwd>
#include <queue>
#include <string>
#include <string_view>
#include <variant>
#include <vector>

#include "agentserve/core.hpp"

namespace agentserve {

enum class EventKind : std::uint8_t {
  kRequestArrival,
  kEnvelopeArrival,
  kBatchStepComplete,
  kPrefillComplete,
  kControllerTick,
  kMetricPoll,
  kKvTransferComplete,
  kHintDelivery,
};

std::string_view to_string(EventKind kind);

inline constexpr std::uint64_t kNoRequest = ~std::uint64_t{0};
inline constexpr AgentId kNoAgent = ~AgentId{0};

struct Event {
  SimTime time;
  std::uint64_t seq = 0;  // assigned by Kernel::schedule
  EventKind kind = EventKind::kControllerTick;
  RequestId request_id = kNoRequest;
  AgentId agent_id = kNoAgent;
  std::string detail;
  std::function<void()> action;
};

struct TraceRecord {
  double time_ms = 0.0;
  std::uint64_t seq = 0;
  EventKind kind = EventKind::kControllerTick;
  RequestId request_id = kNoRequest;
  AgentId agent_id = kNoAgent;
  std::string detail;

  friend bool operator==(const TraceRecord&, const TraceRecord&) = default;
};

using EventTrace = std::vector<TraceRecord>;

void write_trace_csv(std::ostream& out, const EventTrace& trace);
std::string trace_to_csv(const EventTrace& trace);
// FNV-1a over the CSV serialization.
std::uint64_t trace_hash(const EventTrace& trace);

// Single-threaded discrete-event engine. Events dispatch in (time, seq) order;
// seq is a global schedule counter so equal-time events run in schedule order.
class Kernel {
 public:
  SimTime now() const noexcept { return now_; }
  bool empty() const noexcept { return queue_.empty(); }
  std::size_t pending() const noexcept { return queue_.size(); }

  // Throws Error(kTimeInPast) when e.time < now().
  std::uint64_t schedule(Event e);
  std::uint64_t schedule(SimTime at, EventKind kind, std::function<void()> action,
                         RequestId request = kNoRequest, AgentId agent = kNoAgent,
                         std::string detail = {});

  // Dispatches every event with time <= t_end and returns the records of the
  // events dispatched by this call. The clock ends at t_end.
  EventTrace run_until(SimTime t_end);

  // Handlers may append to the detail of the event currently being dispatched.
  void annotate(std::string_view text);

  // When disabled, run_until still dispatches but returns an empty trace.
  void set_recording(bool on) noexcept { recording_ = on; }

 private:
  struct Later {
    bool operator()(const Event& a, const Event& b) const {
      if (a.time != b.time) return a.time > b.time;
      return a.seq > b.seq;
    }
  };

  SimTime now_;
  std::uint64_t next_seq_ = 0;
  std::priority_queue<Event, std::vector<Event>, Later> queue_;
  TraceRecord* current_ = nullptr;
  bool recording_ = true;
};

// splitmix64-seeded xoshiro256** with named, independent substreams.
class Rng {
 public:
  explicit Rng(std::uint64_t seed);
  // Substream derived from (seed, name); adding a new consumer never perturbs
  // the draws of an existing one.
  static Rng substream(std::uint64_t seed, std::string_view name);

  std::uint64_t next_u64();
  double uniform01();  // [0, 1)
  std::int64_t uniform_int(std::int64_t lo, std::int64_t hi);  // inclusive
  double exponential(double mean);
  bool bernoulli(double p);

 private:
  std::uint64_t s_[4];
};

std::uint64_t fnv1a64(std::string_view bytes, std::uint64_t h = 0xcbf29ce484222325ULL);

struct TokenDist {
  struct Fixed { std::int64_t n = 1; };
  struct Uniform { std::int64_t lo = 1; std::int64_t hi = 1; };
  std::variant<Fixed, Uniform> shape = Fixed{};

  static TokenDist fixed(std::int64_t n) { return {Fixed{n}}; }
  static TokenDist uniform(std::int64_t lo, std::int64_t hi) { return {Uniform{lo, hi}}; }
  double mean() const;
  std::int64_t min() const;
  std::int64_t sample(Rng& rng) const;
};

struct WorkloadSpec {
  double arrival_rate = 1.0;  // requests per second
  SimTime duration{1000.0};
  double interactive_fraction = 0.5;
  TokenDist prompt_tokens = TokenDist::uniform(64, 256);
  TokenDist output_tokens = TokenDist::fixed(128);
  std::uint64_t seed = 1;
  // 0 gives every request its own session; otherwise sessions are drawn
  // uniformly from [1, sessions].
  std::uint64_t sessions = 0;
  // Relative SLO: deadline = arrival + slo_ms for interactive requests when > 0.
  double interactive_slo_ms = 0.0;

  void validate() const;
};

// Poisson arrivals over [0, duration). Draws come from the "arrivals",
// "priorities", "sizes" and "sessions" substreams of the seed.
std::vector<Request> gen_arrivals(const WorkloadSpec& w, const std::vector<std::string>& hops = {});

}  // namespace agentserve
