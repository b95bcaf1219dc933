// Copyright 2026 The agentserve Authors.
// SPDX-License-Identifier: Apache-2.0

#include "agentserve/dataplane.hpp"

#include <algorithm>

namespace agentserve {

LinkId Shim::add_link(AgentId source, AgentId destination, Granularity mode, double pacing_gap,
                      double network_delay) {
  if (pacing_gap < 0.0 || network_delay < 0.0) {
    throw Error(ErrorCode::kConfigError, "pacing_gap and network_delay must be >= 0");
  }
  LinkState ls;
  ls.link = Link{static_cast<LinkId>(links_.size()), source, destination, mode, pacing_gap, network_delay};
  ls.knobs = default_link_knobs(mode, pacing_gap);
  links_.push_back(std::move(ls));
  return links_.back().link.id;
}

Shim::LinkState& Shim::state(LinkId id) {
  if (id >= links_.size()) throw Error(ErrorCode::kUnknownLink, "unknown link " + std::to_string(id));
  return links_[id];
}

const Shim::LinkState& Shim::state(LinkId id) const {
  if (id >= links_.size()) throw Error(ErrorCode::kUnknownLink, "unknown link " + std::to_string(id));
  return links_[id];
}

const Link& Shim::link(LinkId id) const { return state(id).link; }

void Shim::cut(LinkState& ls, RequestId request, RequestBuffer& buf, SimTime now,
               std::vector<MessageEnvelope>& out) {
  if (buf.final_cut) return;
  const std::size_t first_new = out.size();
  auto emit = [&](std::int64_t tokens, bool final) {
    MessageEnvelope e;
    e.id = next_envelope_id_++;
    e.request_id = request;
    e.source = ls.link.source;
    e.destination = ls.link.destination;
    e.link = ls.link.id;
    e.payload_tokens = tokens;
    e.seq = buf.next_seq++;
    e.is_final = final;
    e.priority = buf.priority;
    e.created = now;
    e.mode = ls.link.mode.kind();
    buf.emitted += tokens;
    ls.ready[buf.priority].push_back(e);
    ++ls.ready_size;
    out.push_back(std::move(e));
  };

  while (!buf.boundaries.empty() && buf.boundaries.front() <= buf.emitted) buf.boundaries.pop_front();

  switch (ls.link.mode.kind()) {
    case Granularity::Kind::kTokenStream: {
      const auto c = ls.link.mode.chunk_tokens();
      while (buf.offered - buf.emitted >= c) {
        const bool last = buf.complete && buf.offered - buf.emitted == c;
        emit(c, last);
      }
      break;
    }
    case Granularity::Kind::kPerFunction:
      while (!buf.boundaries.empty() && buf.boundaries.front() <= buf.offered) {
        const auto len = buf.boundaries.front() - buf.emitted;
        buf.boundaries.pop_front();
        if (len <= 0) continue;
        emit(len, buf.complete && buf.emitted + len == buf.offered);
      }
      break;
    case Granularity::Kind::kBatchAll:
      break;
  }

  if (!buf.complete) return;
  const auto remaining = buf.offered - buf.emitted;
  if (remaining > 0) {
    emit(remaining, true);
  } else if (out.size() > first_new) {
    if (!out.back().is_final) {
      // The last cut of this call closes the request; flag the queued copy too.
      out.back().is_final = true;
      auto& q = ls.ready[buf.priority];
      q.back().is_final = true;
    }
  } else {
    // Everything was already cut before completion was signalled. Flip the
    // newest queued envelope when it has not left yet, else send an empty
    // end-of-stream marker.
    auto& q = ls.ready[buf.priority];
    auto it = std::find_if(q.rbegin(), q.rend(), [&](const MessageEnvelope& e) { return e.request_id == request; });
    if (it != q.rend()) {
      it->is_final = true;
    } else {
      emit(0, true);
    }
  }
  buf.final_cut = true;
}

std::vector<MessageEnvelope> Shim::offer_tokens(LinkId link, RequestId request, std::int64_t n_tokens,
                                                OfferFlags flags, Priority priority, SimTime now) {
  auto& ls = state(link);
  if (n_tokens < 0) throw Error(ErrorCode::kInvalidField, "n_tokens must be >= 0");
  auto [it, inserted] = ls.buffers.try_emplace(request);
  auto& buf = it->second;
  if (inserted) buf.priority = priority;
  if (buf.final_cut) throw Error(ErrorCode::kInvalidField, "request already completed on this link");
  buf.offered += n_tokens;
  if (flags.function_boundary) buf.boundaries.push_back(buf.offered);
  if (flags.request_complete) buf.complete = true;

  std::vector<MessageEnvelope> out;
  cut(ls, request, buf, now, out);
  if (buf.final_cut) ls.buffers.erase(it);
  return out;
}

void Shim::apply_knobs(LinkState& ls, SimTime now, std::vector<MessageEnvelope>* out) {
  const auto& mode = ls.knobs.get_enum("comm_mode");
  Granularity g = mode == "token_stream" ? Granularity::token_stream(ls.knobs.get_int("chunk_tokens"))
                                         : Granularity::parse(mode);
  ls.link.pacing_gap = ls.knobs.get_real("pacing_gap");
  if (g == ls.link.mode) return;
  ls.link.mode = g;
  std::vector<MessageEnvelope> scratch;
  auto& sink = out ? *out : scratch;
  for (auto it = ls.buffers.begin(); it != ls.buffers.end();) {
    cut(ls, it->first, it->second, now, sink);
    it = it->second.final_cut ? ls.buffers.erase(it) : std::next(it);
  }
}

std::vector<MessageEnvelope> Shim::set_mode(LinkId link, const Granularity& g, SimTime now) {
  auto& ls = state(link);
  ls.knobs.set("comm_mode", std::string(mode_name(g.kind())));
  if (g.kind() == Granularity::Kind::kTokenStream) ls.knobs.set("chunk_tokens", g.chunk_tokens());
  std::vector<MessageEnvelope> out;
  apply_knobs(ls, now, &out);
  return out;
}

void Shim::set_pacing_gap(LinkId link, double gap_ms) {
  auto& ls = state(link);
  ls.knobs.set("pacing_gap", gap_ms);
  ls.link.pacing_gap = ls.knobs.get_real("pacing_gap");
}

void Shim::set_network_delay(LinkId link, double delay_ms) {
  if (delay_ms < 0.0) throw Error(ErrorCode::kValueOutOfRange, "network_delay must be >= 0");
  state(link).link.network_delay = delay_ms;
}

std::vector<Dispatched> Shim::dispatch(LinkId link, SimTime now) {
  auto& ls = state(link);
  std::vector<Dispatched> out;
  out.reserve(ls.ready_size);
  for (auto& [prio, q] : ls.ready) {
    while (!q.empty()) {
      const double emit_at = std::max(now.ms(), ls.next_free_emit);
      ls.next_free_emit = emit_at + ls.link.pacing_gap;
      out.push_back({std::move(q.front()), SimTime(emit_at + ls.link.network_delay)});
      q.pop_front();
    }
  }
  ls.ready.clear();
  ls.ready_size = 0;
  return out;
}

const KnobRegistry& Shim::knobs(LinkId link) const { return state(link).knobs; }

void Shim::set_knob(LinkId link, const std::string& name, const KnobValue& value, SimTime now) {
  auto& ls = state(link);
  ls.knobs.set(name, value);
  apply_knobs(ls, now, nullptr);
}

void Shim::reset_knob(LinkId link, const std::string& name, SimTime now) {
  auto& ls = state(link);
  ls.knobs.reset(name);
  apply_knobs(ls, now, nullptr);
}

std::int64_t Shim::buffered_tokens(LinkId link, RequestId request) const {
  const auto& ls = state(link);
  auto it = ls.buffers.find(request);
  return it == ls.buffers.end() ? 0 : it->second.offered - it->second.emitted;
}

std::size_t Shim::ready_count(LinkId link) const { return state(link).ready_size; }

}  // namespace agentserve
