// Copyright 2026 The agentserve Authors.
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <cstdint>
#include <deque>
#include <functional>
#include <map>
#include <unordered_map>
#include <vector>

#include "agentserve/core.hpp"
#include "agentserve/knobs.hpp"

namespace agentserve {

struct Link {
  LinkId id = 0;
  AgentId source = 0;
  AgentId destination = 0;
  Granularity mode = Granularity::token_stream(kDefaultChunkTokens);
  double pacing_gap = 0.0;
  double network_delay = 1.0;
};

struct OfferFlags {
  // The offered tokens close a function (per_function cut point).
  bool function_boundary = false;
  // The sender has produced its last token for this request.
  bool request_complete = false;
};

struct Dispatched {
  MessageEnvelope envelope;
  SimTime arrival;
};

// Reconfigurable per-link shim. Buffers sender output per request and cuts
// envelopes under the link's current granularity; dispatch() releases ready
// envelopes highest-priority first, FIFO within a priority, honoring pacing.
class Shim {
 public:
  LinkId add_link(AgentId source, AgentId destination, Granularity mode, double pacing_gap = 0.0,
                  double network_delay = 1.0);

  const Link& link(LinkId id) const;
  std::size_t link_count() const noexcept { return links_.size(); }

  // Returns the envelopes cut by this offer (they are also queued for
  // dispatch). Throws Error(kUnknownLink).
  std::vector<MessageEnvelope> offer_tokens(LinkId link, RequestId request, std::int64_t n_tokens,
                                            OfferFlags flags = {}, Priority priority = {},
                                            SimTime now = SimTime{});

  // Re-binds buffered tokens to the new granularity; in-flight envelopes are
  // not touched. Returns envelopes newly cut by the switch.
  std::vector<MessageEnvelope> set_mode(LinkId link, const Granularity& g, SimTime now = SimTime{});
  void set_pacing_gap(LinkId link, double gap_ms);
  void set_network_delay(LinkId link, double delay_ms);

  std::vector<Dispatched> dispatch(LinkId link, SimTime now);

  // Knob surface for the controller: comm_mode, chunk_tokens, pacing_gap.
  const KnobRegistry& knobs(LinkId link) const;
  void set_knob(LinkId link, const std::string& name, const KnobValue& value, SimTime now = SimTime{});
  void reset_knob(LinkId link, const std::string& name, SimTime now = SimTime{});

  std::int64_t buffered_tokens(LinkId link, RequestId request) const;
  std::size_t ready_count(LinkId link) const;

 private:
  struct RequestBuffer {
    std::int64_t offered = 0;
    std::int64_t emitted = 0;
    std::deque<std::int64_t> boundaries;  // absolute offsets, > emitted
    std::int64_t next_seq = 0;
    bool complete = false;
    bool final_cut = false;
    Priority priority;
  };

  struct LinkState {
    Link link;
    KnobRegistry knobs;
    std::unordered_map<RequestId, RequestBuffer> buffers;
    std::map<Priority, std::deque<MessageEnvelope>, std::greater<>> ready;
    std::size_t ready_size = 0;
    double next_free_emit = 0.0;
  };

  LinkState& state(LinkId id);
  const LinkState& state(LinkId id) const;
  void cut(LinkState& ls, RequestId request, RequestBuffer& buf, SimTime now,
           std::vector<MessageEnvelope>& out);
  void apply_knobs(LinkState& ls, SimTime now, std::vector<MessageEnvelope>* out);

  std::vector<LinkState> links_;
  std::uint64_t next_envelope_id_ = 0;
};

}  // namespace agentserve
