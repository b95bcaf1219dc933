// Copyright 2026 The agentserve Authors.
// SPDX-License-Identifier: Apache-2.0

#include "agentserve/kernel.hpp"

#include <cmath>
#include <cstdio>
#include <ostream>
#include <sstream>

namespace agentserve {

std::string_view to_string(EventKind kind) {
  switch (kind) {
    case EventKind::kRequestArrival: return "request_arrival";
    case EventKind::kEnvelopeArrival: return "envelope_arrival";
    case EventKind::kBatchStepComplete: return "batch_step_complete";
    case EventKind::kPrefillComplete: return "prefill_complete";
    case EventKind::kControllerTick: return "controller_tick";
    case EventKind::kMetricPoll: return "metric_poll";
    case EventKind::kKvTransferComplete: return "kv_transfer_complete";
    case EventKind::kHintDelivery: return "hint_delivery";
  }
  return "?";
}

namespace {

void csv_field(std::ostream& out, std::string_view s) {
  if (s.find_first_of(",\"\n") == std::string_view::npos) {
    out << s;
    return;
  }
  out << '"';
  for (char c : s) {
    if (c == '"') out << '"';
    out << c;
  }
  out << '"';
}

std::string format_ms(double v) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "%.17g", v);
  return buf;
}

}  // namespace

void write_trace_csv(std::ostream& out, const EventTrace& trace) {
  out << "time_ms,seq,kind,request_id,agent_id,detail\n";
  for (const auto& r : trace) {
    out << format_ms(r.time_ms) << ',' << r.seq << ',' << to_string(r.kind) << ',';
    if (r.request_id != kNoRequest) out << r.request_id;
    out << ',';
    if (r.agent_id != kNoAgent) out << r.agent_id;
    out << ',';
    csv_field(out, r.detail);
    out << '\n';
  }
}

std::string trace_to_csv(const EventTrace& trace) {
  std::ostringstream out;
  write_trace_csv(out, trace);
  return out.str();
}

std::uint64_t fnv1a64(std::string_view bytes, std::uint64_t h) {
  for (unsigned char c : bytes) {
    h ^= c;
    h *= 0x100000001b3ULL;
  }
  return h;
}

std::uint64_t trace_hash(const EventTrace& trace) { return fnv1a64(trace_to_csv(trace)); }

std::uint64_t Kernel::schedule(Event e) {
  if (e.time < now_) {
    throw Error(ErrorCode::kTimeInPast, "event at " + format_ms(e.time.ms()) +
                                            " ms is before now=" + format_ms(now_.ms()));
  }
  e.seq = next_seq_++;
  const auto seq = e.seq;
  queue_.push(std::move(e));
  return seq;
}

std::uint64_t Kernel::schedule(SimTime at, EventKind kind, std::function<void()> action,
                               RequestId request, AgentId agent, std::string detail) {
  Event e;
  e.time = at;
  e.kind = kind;
  e.action = std::move(action);
  e.request_id = request;
  e.agent_id = agent;
  e.detail = std::move(detail);
  return schedule(std::move(e));
}

EventTrace Kernel::run_until(SimTime t_end) {
  EventTrace trace;
  while (!queue_.empty() && queue_.top().time <= t_end) {
    // Ordering reads only time and seq, which survive the move.
    Event e = std::move(const_cast<Event&>(queue_.top()));
    queue_.pop();
    now_ = e.time;
    TraceRecord rec{e.time.ms(), e.seq, e.kind, e.request_id, e.agent_id, std::move(e.detail)};
    current_ = &rec;
    if (e.action) e.action();
    current_ = nullptr;
    if (recording_) trace.push_back(std::move(rec));
  }
  if (t_end > now_) now_ = t_end;
  return trace;
}

void Kernel::annotate(std::string_view text) {
  if (current_ == nullptr) return;
  if (!current_->detail.empty()) current_->detail += ';';
  current_->detail += text;
}

namespace {

std::uint64_t splitmix64(std::uint64_t& x) {
  std::uint64_t z = (x += 0x9e3779b97f4a7c15ULL);
  z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ULL;
  z = (z ^ (z >> 27)) * 0x94d049bb133111ebULL;
  return z ^ (z >> 31);
}

std::uint64_t rotl(std::uint64_t x, int k) { return (x << k) | (x >> (64 - k)); }

}  // namespace

Rng::Rng(std::uint64_t seed) {
  for (auto& s : s_) s = splitmix64(seed);
}

Rng Rng::substream(std::uint64_t seed, std::string_view name) {
  std::uint64_t mix = seed;
  return Rng(splitmix64(mix) ^ fnv1a64(name));
}

std::uint64_t Rng::next_u64() {
  const std::uint64_t result = rotl(s_[1] * 5, 7) * 9;
  const std::uint64_t t = s_[1] << 17;
  s_[2] ^= s_[0];
  s_[3] ^= s_[1];
  s_[1] ^= s_[2];
  s_[0] ^= s_[3];
  s_[2] ^= t;
  s_[3] = rotl(s_[3], 45);
  return result;
}

double Rng::uniform01() { return static_cast<double>(next_u64() >> 11) * 0x1.0p-53; }

std::int64_t Rng::uniform_int(std::int64_t lo, std::int64_t hi) {
  const auto span = static_cast<std::uint64_t>(hi - lo) + 1;
  if (span == 0) return static_cast<std::int64_t>(next_u64());
  // Lemire-style rejection keeps the draw unbiased.
  const std::uint64_t limit = (~std::uint64_t{0}) - ((~std::uint64_t{0}) % span);
  std::uint64_t x;
  do {
    x = next_u64();
  } while (x >= limit);
  return lo + static_cast<std::int64_t>(x % span);
}

double Rng::exponential(double mean) { return -mean * std::log1p(-uniform01()); }

bool Rng::bernoulli(double p) { return uniform01() < p; }

double TokenDist::mean() const {
  if (const auto* f = std::get_if<Fixed>(&shape)) return static_cast<double>(f->n);
  const auto& u = std::get<Uniform>(shape);
  return 0.5 * static_cast<double>(u.lo + u.hi);
}

std::int64_t TokenDist::min() const {
  if (const auto* f = std::get_if<Fixed>(&shape)) return f->n;
  return std::get<Uniform>(shape).lo;
}

std::int64_t TokenDist::sample(Rng& rng) const {
  if (const auto* f = std::get_if<Fixed>(&shape)) return f->n;
  const auto& u = std::get<Uniform>(shape);
  return rng.uniform_int(u.lo, u.hi);
}

void WorkloadSpec::validate() const {
  auto fail = [](const std::string& what) { throw Error(ErrorCode::kConfigError, what); };
  if (!(arrival_rate > 0.0) || !std::isfinite(arrival_rate)) fail("workload.arrival_rate must be > 0");
  if (!(duration.ms() > 0.0)) fail("workload.duration_ms must be > 0");
  if (!(interactive_fraction >= 0.0 && interactive_fraction <= 1.0)) {
    fail("workload.interactive_fraction must be in [0,1]");
  }
  for (const auto* d : {&prompt_tokens, &output_tokens}) {
    if (const auto* u = std::get_if<TokenDist::Uniform>(&d->shape); u && u->hi < u->lo) {
      fail("workload token distribution has hi < lo");
    }
    if (d->min() < 1) fail("workload token distributions must be >= 1");
  }
}

std::vector<Request> gen_arrivals(const WorkloadSpec& w, const std::vector<std::string>& hops) {
  w.validate();
  Rng arrivals = Rng::substream(w.seed, "arrivals");
  Rng priorities = Rng::substream(w.seed, "priorities");
  Rng sizes = Rng::substream(w.seed, "sizes");
  Rng sessions = Rng::substream(w.seed, "sessions");

  const double mean_gap_ms = 1000.0 / w.arrival_rate;
  std::vector<Request> out;
  double t = 0.0;
  for (RequestId id = 0;; ++id) {
    t += arrivals.exponential(mean_gap_ms);
    if (t >= w.duration.ms()) break;
    Request r;
    r.id = id;
    r.arrival = SimTime(t);
    r.priority = priorities.bernoulli(w.interactive_fraction) ? Priority::interactive()
                                                                : Priority::background();
    r.prompt_tokens = w.prompt_tokens.sample(sizes);
    r.output_tokens = w.output_tokens.sample(sizes);
    r.session = w.sessions == 0 ? id + 1
                                : static_cast<SessionId>(sessions.uniform_int(
                                      1, static_cast<std::int64_t>(w.sessions)));
    if (w.interactive_slo_ms > 0.0 && r.interactive()) r.slo_deadline = r.arrival + w.interactive_slo_ms;
    r.hops = hops;
    out.push_back(std::move(r));
  }
  return out;
}

}  // namespace agentserve
