// Copyright 2026 The agentserve Authors.
// SPDX-License-Identifier: Apache-2.0

#include "agentserve/agent.hpp"

#include <algorithm>
#include <cmath>

namespace agentserve {

void CostModel::validate() const {
  for (double v : {prefill_base_ms, prefill_per_token_ms, decode_step_base_ms, decode_step_per_seq_ms,
                   envelope_overhead_ms, kv_transfer_per_token_ms}) {
    if (!(v >= 0.0) || !std::isfinite(v)) throw Error(ErrorCode::kConfigError, "cost model fields must be >= 0");
  }
  if (!(decode_step_base_ms + decode_step_per_seq_ms > 0.0)) {
    throw Error(ErrorCode::kConfigError, "decode step must take positive time");
  }
}

// ---------------------------------------------------------------------------
// KvManager

void KvManager::place(SessionId session, AgentId instance, std::int64_t context_tokens) {
  entries_[session] = KvCacheEntry{session, context_tokens, instance};
}

std::optional<KvCacheEntry> KvManager::resident(SessionId session) const {
  auto it = entries_.find(session);
  if (it == entries_.end()) return std::nullopt;
  return it->second;
}

bool KvManager::resident_on(SessionId session, AgentId instance) const {
  auto it = entries_.find(session);
  return it != entries_.end() && it->second.resident_on == instance;
}

SimTime KvManager::kv_transfer(SessionId session, AgentId from, AgentId to, SimTime now) {
  auto it = entries_.find(session);
  if (it == entries_.end() || it->second.resident_on != from) {
    throw Error(ErrorCode::kNoResidentCache,
                "session " + std::to_string(session) + " has no cache on instance " + std::to_string(from));
  }
  if (transfers_.contains(session)) {
    throw Error(ErrorCode::kInvalidField, "session " + std::to_string(session) + " already has a transfer in flight");
  }
  const SimTime done = now + per_token_ms_ * static_cast<double>(it->second.context_tokens);
  transfers_[session] = Transfer{from, to, done, {}};
  ++transfers_started_;
  kernel_.schedule(
      done, EventKind::kKvTransferComplete, [this, session] { complete(session, kernel_.now()); }, kNoRequest, to,
      "session=" + std::to_string(session) + " from=" + std::to_string(from));
  return done;
}

void KvManager::complete(SessionId session, SimTime now) {
  auto node = transfers_.extract(session);
  Transfer t = std::move(node.mapped());
  entries_[session].resident_on = t.to;
  if (auto l = listeners_.find(t.to); l != listeners_.end()) l->second(session, now);
  auto next = std::find_if(t.next.begin(), t.next.end(), [&](AgentId a) { return a != t.to; });
  if (next != t.next.end()) {
    const AgentId dest = *next;
    std::vector<AgentId> rest;
    for (auto it = std::next(next); it != t.next.end(); ++it) {
      if (*it != dest) rest.push_back(*it);
    }
    kv_transfer(session, t.to, dest, now);
    transfers_[session].next = std::move(rest);
  }
}

void KvManager::apply_hint(SessionId session, AgentId to, SimTime now) {
  if (auto t = transfers_.find(session); t != transfers_.end()) {
    auto& tr = t->second;
    if (tr.to != to && std::find(tr.next.begin(), tr.next.end(), to) == tr.next.end()) tr.next.push_back(to);
    return;
  }
  auto it = entries_.find(session);
  if (it == entries_.end()) {
    throw Error(ErrorCode::kNoResidentCache, "no cache for session " + std::to_string(session));
  }
  if (it->second.resident_on == to) return;
  kv_transfer(session, it->second.resident_on, to, now);
}

KvManager::Status KvManager::acquire(SessionId session, AgentId instance, SimTime now, bool allow_transfer) {
  auto it = entries_.find(session);
  if (it != entries_.end() && it->second.resident_on == instance) return Status::kResident;
  if (auto t = transfers_.find(session); t != transfers_.end()) {
    auto& tr = t->second;
    if (tr.to == instance) return Status::kPending;
    if (!allow_transfer) return Status::kAbsent;
    if (std::find(tr.next.begin(), tr.next.end(), instance) == tr.next.end()) tr.next.push_back(instance);
    return Status::kPending;
  }
  if (it == entries_.end() || !allow_transfer) return Status::kAbsent;
  kv_transfer(session, it->second.resident_on, instance, now);
  return Status::kPending;
}

void KvManager::claim(SessionId session, AgentId instance, std::int64_t context_tokens) {
  if (entries_.contains(session) || transfers_.contains(session)) return;
  place(session, instance, context_tokens);
}

// ---------------------------------------------------------------------------
// AgentInstance

AgentInstance::AgentInstance(AgentId id, std::string role, CostModel cost, ServingParams params, Kernel& kernel,
                             MetricsPlane* metrics, KvManager* kv)
    : id_(id),
      role_(std::move(role)),
      cost_(cost),
      knobs_(default_agent_knobs(params.max_num_seqs)),
      kernel_(kernel),
      metrics_(metrics),
      kv_(kv) {
  cost_.validate();
  knobs_.set("admission", params.admission);
  // The configured admission filter is this instance's registered default.
  auto spec = knobs_.spec("admission");
  spec.default_value = params.admission;
  knobs_.add(spec);
  if (kv_ != nullptr) {
    kv_->add_listener(id_, [this](SessionId s, SimTime now) { on_kv_ready(s, now); });
  }
}

void AgentInstance::record(const char* name, double value, SimTime now) {
  if (metrics_ != nullptr && metrics_->has_metric(id_, name)) metrics_->record(id_, name, value, now);
}

void AgentInstance::sample_queue_depth(SimTime now) {
  record("queue_depth", static_cast<double>(requests_.size()), now);
}

std::size_t AgentInstance::deferred_requests() const noexcept {
  return static_cast<std::size_t>(
      std::count_if(requests_.begin(), requests_.end(), [](const auto& kv) { return kv.second.deferred; }));
}

double AgentInstance::busy_ms_until(SimTime t) const {
  double busy = busy_done_;
  if (busy_) busy += std::clamp(t.ms() - activity_start_, 0.0, activity_end_ - activity_start_);
  return busy;
}

void AgentInstance::set(const std::string& name, const KnobValue& value) {
  knobs_.set(name, value);
  // max_num_seqs applies at the next refill; admission at the next arrival.
}

void AgentInstance::reset(const std::string& name) { knobs_.reset(name); }

bool AgentInstance::admitted(const NodeRequest& nr) const {
  return nr.work.priority.level >= admission_min_level(knobs_.get_enum("admission"));
}

void AgentInstance::expect(const HopWork& work) {
  if (work.output_tokens < 0) throw Error(ErrorCode::kInvalidField, "output_tokens must be >= 0");
  auto [it, inserted] = requests_.try_emplace(work.request);
  if (inserted) {
    it->second.work = work;
    sample_queue_depth(kernel_.now());
  }
}

AgentInstance::NodeRequest& AgentInstance::arrive(RequestId id, SimTime now) {
  auto it = requests_.find(id);
  if (it == requests_.end()) {
    throw Error(ErrorCode::kInvalidField,
                "request " + std::to_string(id) + " was not routed to instance " + std::to_string(id_));
  }
  auto& nr = it->second;
  if (!nr.arrived) {
    nr.arrived = true;
    nr.stats.node_arrival = now;
    nr.deferred = !admitted(nr);
  }
  return nr;
}

void AgentInstance::submit(const HopWork& work, SimTime now) {
  expect(work);
  auto& nr = arrive(work.request, now);
  nr.received = work.input_tokens;
  nr.unlocked = work.output_tokens;
  nr.final_received = true;
  if (nr.deferred) {
    nr.deferred_tokens = work.input_tokens;
  } else {
    new_item(nr, work.input_tokens, work.output_tokens, true, now);
  }
  pump(now);
}

void AgentInstance::on_envelope(const MessageEnvelope& e, SimTime now) {
  if (e.destination != id_) {
    throw Error(ErrorCode::kInvalidField, "envelope for " + std::to_string(e.destination) +
                                              " delivered to " + std::to_string(id_));
  }
  overhead_pending_ += cost_.envelope_overhead_ms;
  ++envelopes_received_;
  record("envelopes_received", static_cast<double>(envelopes_received_), now);

  auto& nr = arrive(e.request_id, now);
  if (nr.final_received) throw Error(ErrorCode::kInvalidField, "envelope after final");
  nr.received += e.payload_tokens;
  const auto out = nr.work.output_tokens;
  std::int64_t target = out;
  if (!e.is_final && e.mode != Granularity::Kind::kTokenStream) {
    target = nr.work.expected_input > 0 ? (out * nr.received) / nr.work.expected_input : 0;
    target = std::min(target, out);
  }
  target = std::max(target, nr.unlocked);
  const auto newly = target - nr.unlocked;
  nr.unlocked = target;
  if (e.is_final) nr.final_received = true;
  ingest(nr, e.payload_tokens, newly, e.mode, e.is_final, now);
  // Closing a stalled item can finish it without further work.
  std::vector<std::uint64_t> done;
  for (const auto& [id, item] : items_) {
    if (item.request == e.request_id && item.closed && item.prefilled && !item.kv_wait &&
        item.produced >= item.allowance && item.pending_tokens == 0 && item.inflight_tokens == 0) {
      done.push_back(id);
    }
  }
  std::sort(done.begin(), done.end());
  for (auto id : done) finish_item(items_.at(id), now);
  if (auto it = requests_.find(e.request_id); it != requests_.end()) maybe_finish_request(it->second, now);
  pump(now);
}

void AgentInstance::ingest(NodeRequest& nr, std::int64_t payload, std::int64_t newly, Granularity::Kind mode,
                           bool final, SimTime now) {
  if (nr.deferred) {
    nr.deferred_tokens += payload;
    return;
  }
  WorkItem* stream = nullptr;
  if (nr.stream_item) {
    auto it = items_.find(*nr.stream_item);
    if (it != items_.end()) {
      stream = &it->second;
    } else {
      nr.stream_item.reset();
    }
  }
  switch (mode) {
    case Granularity::Kind::kTokenStream:
      if (stream != nullptr) {
        extend_item(*stream, payload, newly, final);
      } else if (payload > 0 || newly > 0) {
        const auto id = new_item(nr, payload, newly, final, now);
        if (!final) nr.stream_item = id;
      }
      break;
    case Granularity::Kind::kPerFunction:
      if (payload == 0 && stream != nullptr) {
        extend_item(*stream, 0, newly, final);
      } else if (payload > 0 || newly > 0) {
        new_item(nr, payload, newly, true, now);
      }
      break;
    case Granularity::Kind::kBatchAll:
      if (stream != nullptr) {
        extend_item(*stream, payload, newly, true);
      } else if (payload > 0 || newly > 0) {
        new_item(nr, payload, newly, true, now);
      }
      break;
  }
  if (final && nr.stream_item) {
    if (auto it = items_.find(*nr.stream_item); it != items_.end()) extend_item(it->second, 0, 0, true);
    nr.stream_item.reset();
  }
}

std::uint64_t AgentInstance::new_item(NodeRequest& nr, std::int64_t input, std::int64_t allowance, bool closed,
                                      SimTime) {
  WorkItem item;
  item.id = next_item_++;
  item.request = nr.work.request;
  item.priority = nr.work.priority;
  item.order = next_order_++;
  item.initial_tokens = input;
  item.allowance = allowance;
  item.closed = closed;
  // The session cache is looked up when the item is scheduled into the batch.
  item.needs_kv_lookup = !nr.context_loaded && nr.work.session_context > 0;
  nr.context_loaded = true;
  ++nr.open_items;
  const auto id = item.id;
  queue_.insert(QueueKey{item.priority, item.order, id});
  items_.emplace(id, std::move(item));
  return id;
}

void AgentInstance::extend_item(WorkItem& item, std::int64_t tokens, std::int64_t allowance, bool close) {
  if (!item.prefilled && !item.prefilling) {
    item.initial_tokens += tokens;
  } else {
    item.pending_tokens += tokens;
  }
  item.allowance += allowance;
  item.closed = item.closed || close;
}

void AgentInstance::finish_item(WorkItem& item, SimTime now) {
  const auto id = item.id;
  const auto req = item.request;
  batch_.erase(std::remove(batch_.begin(), batch_.end(), id), batch_.end());
  queue_.erase(QueueKey{item.priority, item.order, id});
  items_.erase(id);
  auto it = requests_.find(req);
  if (it == requests_.end()) return;
  --it->second.open_items;
  maybe_finish_request(it->second, now);
}

void AgentInstance::maybe_finish_request(NodeRequest& nr, SimTime now) {
  if (!nr.final_received || nr.deferred || nr.open_items > 0) return;
  if (nr.produced < nr.work.output_tokens) return;
  nr.stats.done = now;
  nr.stats.produced = nr.produced;
  if (nr.stats.first_token && nr.produced > 1) {
    record("tpt_ms", (now - *nr.stats.first_token) / static_cast<double>(nr.produced - 1), now);
  }
  const auto id = nr.work.request;
  const HopStats stats = nr.stats;
  requests_.erase(id);
  sample_queue_depth(now);
  if (callbacks_.on_done) callbacks_.on_done(id, stats, now);
}

void AgentInstance::lookup_kv(WorkItem& item, SimTime now) {
  item.needs_kv_lookup = false;
  const auto& work = requests_.at(item.request).work;
  auto status = KvManager::Status::kAbsent;
  if (kv_ != nullptr) status = kv_->acquire(work.session, id_, now, kv_transfer_);
  if (status == KvManager::Status::kPending) {
    item.kv_wait = true;
    item.kv_wait_since = now;
  } else if (status == KvManager::Status::kAbsent) {
    item.recompute_tokens = work.session_context;
    item.needs_kv_claim = true;
  }
}

void AgentInstance::refill(SimTime now) {
  const auto cap = static_cast<std::size_t>(knobs_.get_int("max_num_seqs"));
  while (batch_.size() < cap && !queue_.empty()) {
    auto key = *queue_.begin();
    queue_.erase(queue_.begin());
    batch_.push_back(key.item);
    auto& item = items_.at(key.item);
    if (item.needs_kv_lookup) lookup_kv(item, now);
  }
  max_batch_seen_ = std::max(max_batch_seen_, batch_.size());
}

void AgentInstance::start(Activity a, double duration, SimTime now, EventKind kind, RequestId req,
                          std::function<void()> done) {
  duration += overhead_pending_;
  overhead_charged_ += overhead_pending_;
  overhead_pending_ = 0.0;
  busy_ = true;
  activity_ = a;
  activity_start_ = now.ms();
  activity_end_ = now.ms() + duration;
  kernel_.schedule(
      SimTime(activity_end_), kind,
      [this, duration, done = std::move(done)] {
        busy_done_ += duration;
        busy_ = false;
        activity_ = Activity::kNone;
        done();
        pump(kernel_.now());
      },
      req, id_);
}

void AgentInstance::pump(SimTime now) {
  if (busy_) return;
  refill(now);

  for (auto id : batch_) {
    auto& item = items_.at(id);
    if (item.kv_wait) continue;
    if (!item.prefilled) {
      double d = item.initial_tokens > 0 || item.recompute_tokens == 0 ? cost_.prefill(item.initial_tokens) : 0.0;
      if (item.recompute_tokens > 0) d += cost_.prefill(item.recompute_tokens);
      item.prefilling = true;
      start(Activity::kPrefill, d, now, EventKind::kPrefillComplete, item.request,
            [this, id, d] { on_prefill_done(id, d, true, kernel_.now()); });
      return;
    }
    if (item.pending_tokens > 0) {
      const auto tokens = item.pending_tokens;
      item.pending_tokens = 0;
      item.inflight_tokens = tokens;
      const double d = cost_.incremental_prefill(tokens);
      start(Activity::kPrefill, d, now, EventKind::kPrefillComplete, item.request,
            [this, id, d] { on_prefill_done(id, d, false, kernel_.now()); });
      return;
    }
  }

  std::vector<std::uint64_t> stepped;
  for (auto id : batch_) {
    const auto& item = items_.at(id);
    if (item.prefilled && !item.kv_wait && item.produced < item.allowance) stepped.push_back(id);
  }
  if (!stepped.empty()) {
    const auto b = static_cast<std::int64_t>(stepped.size());
    ++decode_steps_;
    record("batch_size", static_cast<double>(b), now);
    start(Activity::kStep, cost_.decode_step(b), now, EventKind::kBatchStepComplete, kNoRequest,
          [this, stepped = std::move(stepped)] { on_step_done(stepped, kernel_.now()); });
    return;
  }
  if (overhead_pending_ > 0.0) {
    start(Activity::kOverhead, 0.0, now, EventKind::kBatchStepComplete, kNoRequest, [] {});
  }
}

void AgentInstance::on_prefill_done(std::uint64_t item_id, double duration, bool initial, SimTime now) {
  auto it = items_.find(item_id);
  if (it == items_.end()) return;
  auto& item = it->second;
  item.inflight_tokens = 0;
  if (auto r = requests_.find(item.request); r != requests_.end()) r->second.stats.prefill_ms += duration;
  if (initial) {
    item.prefilled = true;
    item.prefilling = false;
    if (item.needs_kv_claim && kv_ != nullptr) {
      if (auto r = requests_.find(item.request); r != requests_.end()) {
        kv_->claim(r->second.work.session, id_, r->second.work.session_context);
      }
    }
  }
  if (item.closed && item.produced >= item.allowance && item.pending_tokens == 0) finish_item(item, now);
}

void AgentInstance::on_step_done(const std::vector<std::uint64_t>& stepped, SimTime now) {
  for (auto id : stepped) {
    auto it = items_.find(id);
    if (it == items_.end()) continue;
    auto& item = it->second;
    ++item.produced;
    auto r = requests_.find(item.request);
    if (r != requests_.end()) {
      auto& nr = r->second;
      ++nr.produced;
      if (!nr.stats.first_token) {
        nr.stats.first_token = now;
        record("ttft_ms", now - nr.stats.node_arrival, now);
      }
      OfferFlags flags;
      const auto out = nr.work.output_tokens;
      const int f = std::max(1, nr.work.functions);
      if (nr.next_boundary <= f && nr.produced == (out * nr.next_boundary) / f) {
        flags.function_boundary = true;
        ++nr.next_boundary;
      }
      flags.request_complete = nr.produced == out;
      if (callbacks_.on_token) callbacks_.on_token(item.request, flags, now);
    }
    if (item.closed && item.produced >= item.allowance && item.pending_tokens == 0 && item.inflight_tokens == 0) {
      finish_item(item, now);
    }
  }
}

void AgentInstance::readmit(SimTime now) {
  bool any = false;
  for (auto& [id, nr] : requests_) {
    if (!nr.deferred || !admitted(nr)) continue;
    nr.deferred = false;
    any = true;
    if (nr.deferred_tokens > 0 || nr.unlocked > 0) {
      const auto item = new_item(nr, nr.deferred_tokens, nr.unlocked, nr.final_received, now);
      if (!nr.final_received) nr.stream_item = item;
    }
    nr.deferred_tokens = 0;
  }
  if (!any) return;
  for (auto it = requests_.begin(); it != requests_.end();) {
    auto next = std::next(it);
    maybe_finish_request(it->second, now);
    it = next;
  }
  pump(now);
}

void AgentInstance::on_kv_ready(SessionId session, SimTime now) {
  bool any = false;
  for (auto& [id, item] : items_) {
    if (!item.kv_wait) continue;
    auto r = requests_.find(item.request);
    if (r == requests_.end() || r->second.work.session != session) continue;
    item.kv_wait = false;
    r->second.stats.kv_wait_ms += now - item.kv_wait_since;
    any = true;
  }
  if (any) pump(now);
}

}  // namespace agentserve
