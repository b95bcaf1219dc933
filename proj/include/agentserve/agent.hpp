// Copyright 2026 The agentserve Authors.
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <cstdint>
#include <functional>
#include <map>
#include <optional>
#include <set>
#include <string>
#include <unordered_map>
#include <vector>

#include "agentserve/core.hpp"
#include "agentserve/dataplane.hpp"
#include "agentserve/kernel.hpp"
#include "agentserve/knobs.hpp"
#include "agentserve/metrics.hpp"

namespace agentserve {

struct CostModel {
  double prefill_base_ms = 5.0;
  double prefill_per_token_ms = 0.05;
  double decode_step_base_ms = 15.0;
  double decode_step_per_seq_ms = 1.0;
  double envelope_overhead_ms = 1.0;  // charged per received envelope
  double kv_transfer_per_token_ms = 0.02;

  void validate() const;  // throws Error(kConfigError)

  double prefill(std::int64_t tokens) const {
    return prefill_base_ms + prefill_per_token_ms * static_cast<double>(tokens);
  }
  double incremental_prefill(std::int64_t tokens) const {
    return prefill_per_token_ms * static_cast<double>(tokens);
  }
  double decode_step(std::int64_t batch) const {
    return decode_step_base_ms + decode_step_per_seq_ms * static_cast<double>(batch);
  }
  double kv_transfer(std::int64_t context_tokens) const {
    return kv_transfer_per_token_ms * static_cast<double>(context_tokens);
  }
};

struct ServingParams {
  std::int64_t max_num_seqs = 8;
  std::string admission = "all";
};

struct KvCacheEntry {
  SessionId session = 0;
  std::int64_t context_tokens = 0;
  AgentId resident_on = 0;
};

// Session KV residency across instances. At most one resident copy and one
// in-flight transfer per session; a transfer moves the entry on completion.
class KvManager {
 public:
  KvManager(Kernel& kernel, double per_token_ms) : kernel_(kernel), per_token_ms_(per_token_ms) {}

  using ReadyFn = std::function<void(SessionId, SimTime)>;
  void add_listener(AgentId instance, ReadyFn fn) { listeners_[instance] = std::move(fn); }

  void place(SessionId session, AgentId instance, std::int64_t context_tokens);
  std::optional<KvCacheEntry> resident(SessionId session) const;
  bool resident_on(SessionId session, AgentId instance) const;
  bool in_flight(SessionId session) const { return transfers_.contains(session); }
  std::size_t in_flight_count() const { return transfers_.size(); }

  // Starts moving the session's entry; returns the completion time.
  // Throws Error(kNoResidentCache) if the entry is not resident on `from`.
  SimTime kv_transfer(SessionId session, AgentId from, AgentId to, SimTime now);

  // Ahead-of-time move toward `to`. No-op if already there or already heading
  // there. Throws Error(kNoResidentCache) if no copy exists anywhere.
  void apply_hint(SessionId session, AgentId to, SimTime now);

  enum class Status { kResident, kPending, kAbsent };
  // Where a request for the session stands at `instance`. With transfers
  // allowed, a copy held elsewhere is pulled and kPending is returned.
  Status acquire(SessionId session, AgentId instance, SimTime now, bool allow_transfer);

  // Records a recomputed context as resident when no copy exists yet.
  void claim(SessionId session, AgentId instance, std::int64_t context_tokens);

  std::uint64_t transfers_started() const noexcept { return transfers_started_; }

 private:
  struct Transfer {
    AgentId from = 0;
    AgentId to = 0;
    SimTime completion;
    std::vector<AgentId> next;  // destinations queued behind this transfer
  };
  void complete(SessionId session, SimTime now);

  Kernel& kernel_;
  double per_token_ms_;
  std::unordered_map<SessionId, KvCacheEntry> entries_;
  std::map<SessionId, Transfer> transfers_;
  std::unordered_map<AgentId, ReadyFn> listeners_;
  std::uint64_t transfers_started_ = 0;
};

// What a node needs to know about one request's visit.
struct HopWork {
  RequestId request = 0;
  Priority priority;
  SessionId session = 0;
  SimTime request_arrival;
  std::int64_t expected_input = 0;  // upstream output tokens; 0 for the ingress hop
  std::int64_t input_tokens = 0;    // ingress prompt
  std::int64_t output_tokens = 1;
  int functions = 1;                  // function boundaries in this node's output
  std::int64_t session_context = 0;   // KV context shared by the session at this role
};

struct HopStats {
  SimTime node_arrival;
  std::optional<SimTime> first_token;
  SimTime done;
  std::int64_t produced = 0;
  double prefill_ms = 0.0;
  double kv_wait_ms = 0.0;
};

// Simulated serving instance. A single server runs all of its work back to
// back under continuous batching.
class AgentInstance {
 public:
  struct Callbacks {
    // One output token for `request`; flags mark function and request ends.
    std::function<void(RequestId, OfferFlags, SimTime)> on_token;
    std::function<void(RequestId, const HopStats&, SimTime)> on_done;
  };

  AgentInstance(AgentId id, std::string role, CostModel cost, ServingParams params, Kernel& kernel,
                MetricsPlane* metrics = nullptr, KvManager* kv = nullptr);
  AgentInstance(const AgentInstance&) = delete;
  AgentInstance& operator=(const AgentInstance&) = delete;

  AgentId id() const noexcept { return id_; }
  const std::string& role() const noexcept { return role_; }
  const CostModel& cost() const noexcept { return cost_; }

  void set_callbacks(Callbacks cb) { callbacks_ = std::move(cb); }
  // Pull session KV from other instances (true) or recompute it (false).
  void set_kv_transfer(bool allow) noexcept { kv_transfer_ = allow; }

  // Routing-time registration of an upstream request headed here.
  void expect(const HopWork& work);
  // Ingress: the whole prompt is available now.
  void submit(const HopWork& work, SimTime now);
  void on_envelope(const MessageEnvelope& e, SimTime now);

  // set/reset knob surface. Throws Error(kUnknownParameter / kValueOutOfRange).
  void set(const std::string& name, const KnobValue& value);
  void reset(const std::string& name);
  const KnobRegistry& knobs() const noexcept { return knobs_; }

  // Re-examines requests parked by the admission filter.
  void readmit(SimTime now);
  void on_kv_ready(SessionId session, SimTime now);

  std::size_t batch_size() const noexcept { return batch_.size(); }
  std::size_t queue_length() const noexcept { return queue_.size(); }
  std::size_t assigned_requests() const noexcept { return requests_.size(); }
  std::size_t deferred_requests() const noexcept;
  std::size_t max_batch_seen() const noexcept { return max_batch_seen_; }
  bool busy() const noexcept { return busy_; }
  double busy_ms_until(SimTime t) const;
  double overhead_charged_ms() const noexcept { return overhead_charged_; }
  std::int64_t envelopes_received() const noexcept { return envelopes_received_; }
  std::int64_t decode_steps() const noexcept { return decode_steps_; }

 private:
  struct WorkItem {
    std::uint64_t id = 0;
    RequestId request = 0;
    Priority priority;
    std::uint64_t order = 0;
    std::int64_t initial_tokens = 0;   // prefilled on first admission
    std::int64_t recompute_tokens = 0; // session context rebuilt in its own pass
    std::int64_t pending_tokens = 0;   // incremental prefill backlog
    std::int64_t inflight_tokens = 0;  // incremental tokens in the running prefill
    std::int64_t allowance = 0;
    std::int64_t produced = 0;
    bool closed = false;
    bool prefilled = false;
    bool prefilling = false;  // initial prefill running
    bool kv_wait = false;
    bool needs_kv_lookup = false;
    bool needs_kv_claim = false;
    SimTime kv_wait_since;
  };

  struct NodeRequest {
    HopWork work;
    bool arrived = false;
    bool deferred = false;
    std::int64_t received = 0;
    std::int64_t deferred_tokens = 0;
    std::int64_t unlocked = 0;
    std::int64_t produced = 0;
    int next_boundary = 1;
    bool final_received = false;
    int open_items = 0;
    bool context_loaded = false;
    std::optional<std::uint64_t> stream_item;
    HopStats stats;
  };

  struct QueueKey {
    Priority priority;
    std::uint64_t order;
    std::uint64_t item;
    bool operator<(const QueueKey& o) const {
      if (priority != o.priority) return priority > o.priority;
      return order < o.order;
    }
  };

  enum class Activity { kNone, kPrefill, kStep, kOverhead };

  NodeRequest& arrive(RequestId id, SimTime now);
  bool admitted(const NodeRequest& nr) const;
  void ingest(NodeRequest& nr, std::int64_t payload, std::int64_t unlocked_now, Granularity::Kind mode,
              bool final, SimTime now);
  std::uint64_t new_item(NodeRequest& nr, std::int64_t input, std::int64_t allowance, bool closed, SimTime now);
  void extend_item(WorkItem& item, std::int64_t tokens, std::int64_t allowance, bool close);
  void finish_item(WorkItem& item, SimTime now);
  void maybe_finish_request(NodeRequest& nr, SimTime now);
  void pump(SimTime now);
  void refill(SimTime now);
  void lookup_kv(WorkItem& item, SimTime now);
  void start(Activity a, double duration, SimTime now, EventKind kind, RequestId req, std::function<void()> done);
  void on_prefill_done(std::uint64_t item_id, double duration, bool initial, SimTime now);
  void on_step_done(const std::vector<std::uint64_t>& stepped, SimTime now);
  void sample_queue_depth(SimTime now);
  void record(const char* name, double value, SimTime now);

  AgentId id_;
  std::string role_;
  CostModel cost_;
  KnobRegistry knobs_;
  Kernel& kernel_;
  MetricsPlane* metrics_;
  KvManager* kv_;
  Callbacks callbacks_;
  bool kv_transfer_ = true;

  std::unordered_map<RequestId, NodeRequest> requests_;
  std::unordered_map<std::uint64_t, WorkItem> items_;
  std::set<QueueKey> queue_;
  std::vector<std::uint64_t> batch_;  // admission order
  std::uint64_t next_item_ = 0;
  std::uint64_t next_order_ = 0;

  bool busy_ = false;
  Activity activity_ = Activity::kNone;
  double activity_start_ = 0.0;
  double activity_end_ = 0.0;
  double busy_done_ = 0.0;
  double overhead_pending_ = 0.0;
  double overhead_charged_ = 0.0;
  std::int64_t envelopes_received_ = 0;
  std::int64_t decode_steps_ = 0;
  std::size_t max_batch_seen_ = 0;
};

}  // namespace agentserve
