// Copyright 2026 The agentserve Authors.
// SPDX-License-Identifier: Apache-2.0

#include <gtest/gtest.h>

#include <map>
#include <memory>
#include <random>

#include "agentserve/agent.hpp"

namespace agentserve {
namespace {

struct Rig {
  Kernel kernel;
  KvManager kv{kernel, 0.02};
  std::vector<std::unique_ptr<AgentInstance>> agents;
  std::map<RequestId, HopStats> done;
  std::map<RequestId, SimTime> done_at;
  std::map<RequestId, std::int64_t> tokens;

  AgentInstance& add(ServingParams p = {}, bool with_kv = true) {
    const auto id = static_cast<AgentId>(agents.size());
    agents.push_back(std::make_unique<AgentInstance>(id, "r", CostModel{}, p, kernel, nullptr, with_kv ? &kv : nullptr));
    agents.back()->set_callbacks({
        .on_token = [this](RequestId r, OfferFlags, SimTime) { ++tokens[r]; },
        .on_done =
            [this](RequestId r, const HopStats& s, SimTime now) {
              done[r] = s;
              done_at[r] = now;
            },
    });
    return *agents.back();
  }

  void submit_at(AgentInstance& a, HopWork w, double t) {
    kernel.schedule(SimTime(t), EventKind::kRequestArrival, [&a, w, this] { a.submit(w, kernel.now()); }, w.request);
  }
};

HopWork work(RequestId id, std::int64_t in, std::int64_t out) {
  HopWork w;
  w.request = id;
  w.session = id;
  w.input_tokens = in;
  w.output_tokens = out;
  return w;
}

double first_prefill_end(const EventTrace& t) {
  for (const auto& r : t) {
    if (r.kind == EventKind::kPrefillComplete) return r.time_ms;
  }
  return -1.0;
}

TEST(AgentTest, PrefillSkipsResidentContext) {
  Rig rig;
  auto& a = rig.add();
  rig.kv.place(5, a.id(), 1000);
  auto w = work(1, 100, 1);
  w.session = 5;
  w.session_context = 1000;
  a.submit(w, SimTime(0.0));
  EXPECT_DOUBLE_EQ(first_prefill_end(rig.kernel.run_until(SimTime(1000.0))), 10.0);
}

TEST(AgentTest, PrefillWithoutCacheCoversContext) {
  Rig rig;
  auto& a = rig.add();
  auto w = work(1, 0, 1);
  w.session_context = 1000;
  a.submit(w, SimTime(0.0));
  EXPECT_DOUBLE_EQ(first_prefill_end(rig.kernel.run_until(SimTime(1000.0))), 55.0);
  EXPECT_TRUE(rig.kv.resident_on(1, a.id()));
}

TEST(AgentTest, EnvelopeOverheadChargedPerEnvelope) {
  Rig rig;
  auto& a = rig.add();
  auto w = work(1, 0, 4);
  w.expected_input = 48;
  a.expect(w);
  for (int i = 0; i < 3; ++i) {
    MessageEnvelope e;
    e.request_id = 1;
    e.destination = a.id();
    e.payload_tokens = 16;
    e.seq = i;
    e.is_final = i == 2;
    e.mode = Granularity::Kind::kTokenStream;
    a.on_envelope(e, SimTime(0.0));
  }
  rig.kernel.run_until(SimTime(5000.0));
  EXPECT_DOUBLE_EQ(a.overhead_charged_ms(), 3.0);
  EXPECT_EQ(a.envelopes_received(), 3);
  EXPECT_TRUE(rig.done.contains(1));
}

TEST(AgentTest, SingleSequenceDecodeArithmetic) {
  Rig rig;
  auto& a = rig.add();
  a.submit(work(1, 100, 32), SimTime(0.0));
  rig.kernel.run_until(SimTime(10000.0));
  EXPECT_DOUBLE_EQ(rig.done_at.at(1).ms(), 10.0 + 32 * 16.0);
  EXPECT_EQ(rig.tokens.at(1), 32);
}

TEST(AgentTest, BatchOfFourStepsAtNineteen) {
  Rig rig;
  auto& a = rig.add();
  for (RequestId r = 1; r <= 4; ++r) a.submit(work(r, 100, 1), SimTime(0.0));
  rig.kernel.run_until(SimTime(1000.0));
  for (RequestId r = 1; r <= 4; ++r) EXPECT_DOUBLE_EQ(rig.done_at.at(r).ms(), 4 * 10.0 + 19.0);
}

TEST(AgentTest, FullBatchThroughputRatio) {
  auto decode_tps = [](int n) {
    Rig rig;
    auto& a = rig.add();
    for (int r = 0; r < n; ++r) a.submit(work(static_cast<RequestId>(r), 100, 100), SimTime(0.0));
    rig.kernel.run_until(SimTime(1e6));
    const double prefill = n * 10.0;
    double end = 0.0;
    for (const auto& [_, t] : rig.done_at) end = std::max(end, t.ms());
    return 100.0 * n / (end - prefill);
  };
  const double expected = (8.0 / 23.0) / (1.0 / 16.0);
  EXPECT_NEAR(decode_tps(8) / decode_tps(1), expected, expected * 0.02);
}

TEST(AgentTest, MaxNumSeqsCapsLaterRefills) {
  Rig rig;
  auto& a = rig.add();
  for (RequestId r = 1; r <= 8; ++r) a.submit(work(r, 100, 50), SimTime(0.0));
  a.set("max_num_seqs", std::int64_t{4});
  rig.kernel.run_until(SimTime(1e6));
  EXPECT_EQ(a.max_batch_seen(), 4u);
  EXPECT_EQ(rig.done.size(), 8u);
}

TEST(AgentTest, LoweringCapDoesNotEvict) {
  Rig rig;
  auto& a = rig.add();
  for (RequestId r = 1; r <= 8; ++r) a.submit(work(r, 100, 50), SimTime(0.0));
  rig.kernel.run_until(SimTime(200.0));
  ASSERT_EQ(a.batch_size(), 8u);
  a.set("max_num_seqs", std::int64_t{4});
  rig.kernel.run_until(SimTime(300.0));
  EXPECT_EQ(a.batch_size(), 8u);
}

TEST(AgentTest, KnobSurfaceErrors) {
  Rig rig;
  auto& a = rig.add();
  try {
    a.set("max_num_seqs", std::int64_t{0});
    FAIL();
  } catch (const Error& e) {
    EXPECT_EQ(e.code(), ErrorCode::kValueOutOfRange);
  }
  try {
    a.set("nonexistent", std::int64_t{1});
    FAIL();
  } catch (const Error& e) {
    EXPECT_EQ(e.code(), ErrorCode::kUnknownParameter);
  }
  EXPECT_THROW(a.reset("nonexistent"), Error);
  EXPECT_EQ(a.knobs().get_int("max_num_seqs"), 8);
}

TEST(AgentTest, ResetRestoresDefaultIdempotently) {
  Rig rig;
  auto& a = rig.add();
  a.set("max_num_seqs", std::int64_t{2});
  a.reset("max_num_seqs");
  EXPECT_EQ(a.knobs().get_int("max_num_seqs"), 8);
  a.reset("max_num_seqs");
  EXPECT_EQ(a.knobs().get_int("max_num_seqs"), 8);
}

TEST(AgentTest, AdmissionDefersLowPriorityUntilReadmit) {
  Rig rig;
  auto& a = rig.add();
  a.set("admission", std::string("priority_at_least(5)"));
  auto w = work(1, 100, 4);
  w.priority = Priority::background(0);
  a.submit(w, SimTime(0.0));
  rig.kernel.run_until(SimTime(1000.0));
  EXPECT_FALSE(rig.done.contains(1));
  EXPECT_EQ(a.deferred_requests(), 1u);
  a.reset("admission");
  a.readmit(SimTime(1000.0));
  rig.kernel.run_until(SimTime(2000.0));
  EXPECT_TRUE(rig.done.contains(1));
}

TEST(AgentTest, PerFunctionUnlocksProportionally) {
  Rig rig;
  auto& a = rig.add();
  auto w = work(1, 0, 40);
  w.expected_input = 40;
  a.expect(w);
  MessageEnvelope e;
  e.request_id = 1;
  e.destination = a.id();
  e.payload_tokens = 20;
  e.mode = Granularity::Kind::kPerFunction;
  a.on_envelope(e, SimTime(0.0));
  rig.kernel.run_until(SimTime(5000.0));
  EXPECT_EQ(rig.tokens[1], 20);
  e.seq = 1;
  e.is_final = true;
  a.on_envelope(e, SimTime(5000.0));
  rig.kernel.run_until(SimTime(10000.0));
  EXPECT_EQ(rig.tokens[1], 40);
  EXPECT_TRUE(rig.done.contains(1));
}

TEST(AgentTest, StreamFirstChunkStartsFullOutput) {
  Rig rig;
  auto& a = rig.add();
  auto w = work(1, 0, 10);
  w.expected_input = 64;
  a.expect(w);
  MessageEnvelope e;
  e.request_id = 1;
  e.destination = a.id();
  e.payload_tokens = 16;
  e.mode = Granularity::Kind::kTokenStream;
  a.on_envelope(e, SimTime(0.0));
  rig.kernel.run_until(SimTime(5000.0));
  EXPECT_EQ(rig.tokens[1], 10);
  EXPECT_FALSE(rig.done.contains(1));
  e.seq = 1;
  e.payload_tokens = 48;
  e.is_final = true;
  a.on_envelope(e, SimTime(5000.0));
  rig.kernel.run_until(SimTime(6000.0));
  EXPECT_TRUE(rig.done.contains(1));
}

TEST(KvTest, TransferTimeAndMove) {
  Kernel k;
  KvManager kv(k, 0.02);
  kv.place(1, 0, 1000);
  EXPECT_DOUBLE_EQ(kv.kv_transfer(1, 0, 1, SimTime(0.0)).ms(), 20.0);
  EXPECT_TRUE(kv.in_flight(1));
  EXPECT_TRUE(kv.resident_on(1, 0));
  k.run_until(SimTime(20.0));
  EXPECT_TRUE(kv.resident_on(1, 1));
  EXPECT_FALSE(kv.resident_on(1, 0));
  EXPECT_FALSE(kv.in_flight(1));
}

TEST(KvTest, NoResidentCache) {
  Kernel k;
  KvManager kv(k, 0.02);
  kv.place(1, 0, 1000);
  try {
    kv.kv_transfer(1, 2, 1, SimTime(0.0));
    FAIL();
  } catch (const Error& e) {
    EXPECT_EQ(e.code(), ErrorCode::kNoResidentCache);
  }
  EXPECT_THROW(kv.apply_hint(9, 1, SimTime(0.0)), Error);
}

TEST(KvTest, AtMostOneTransferInFlight) {
  Kernel k;
  KvManager kv(k, 0.02);
  kv.place(1, 0, 1000);
  kv.kv_transfer(1, 0, 1, SimTime(0.0));
  EXPECT_THROW(kv.kv_transfer(1, 0, 2, SimTime(0.0)), Error);
}

// Completion time for one request routed to instance 1 while its session KV
// lives on instance 0.
double rerouted_completion(bool allow_transfer, std::optional<double> hint_at, double arrival = 0.0) {
  Rig rig;
  rig.add();
  auto& b = rig.add();
  b.set_kv_transfer(allow_transfer);
  rig.kv.place(7, 0, 1000);
  if (hint_at) {
    rig.kernel.schedule(SimTime(*hint_at), EventKind::kHintDelivery,
                        [&] { rig.kv.apply_hint(7, 1, rig.kernel.now()); });
  }
  auto w = work(1, 100, 1);
  w.session = 7;
  w.session_context = 1000;
  rig.submit_at(b, w, arrival);
  rig.kernel.run_until(SimTime(1e5));
  return rig.done_at.at(1).ms() - arrival;
}

TEST(KvTest, TransferBeatsRecomputeByContextDifference) {
  const double transfer = rerouted_completion(true, std::nullopt);
  const double recompute = rerouted_completion(false, std::nullopt);
  EXPECT_DOUBLE_EQ(transfer, 20.0 + 10.0 + 16.0);
  EXPECT_DOUBLE_EQ(recompute - transfer, (5.0 + 0.05 * 1000) - 0.02 * 1000);
}

TEST(KvTest, HintLeadHidesTransfer) {
  auto wait = [](std::optional<double> hint_at, double arrival) {
    Rig rig;
    rig.add();
    auto& b = rig.add();
    rig.kv.place(7, 0, 1000);
    if (hint_at) {
      rig.kernel.schedule(SimTime(*hint_at), EventKind::kHintDelivery,
                          [&] { rig.kv.apply_hint(7, 1, rig.kernel.now()); });
    }
    auto w = work(1, 100, 1);
    w.session = 7;
    w.session_context = 1000;
    rig.submit_at(b, w, arrival);
    rig.kernel.run_until(SimTime(1e5));
    return rig.done.at(1).kv_wait_ms;
  };
  EXPECT_DOUBLE_EQ(wait(0.0, 100.0), 0.0);
  EXPECT_DOUBLE_EQ(wait(95.0, 100.0), 15.0);
  EXPECT_DOUBLE_EQ(wait(std::nullopt, 100.0), 20.0);
}

struct Arrival {
  double t;
  std::int64_t in, out;
  Priority pri;
};

std::map<RequestId, double> ttfts(const std::vector<Arrival>& arrivals, std::int64_t cap) {
  Rig rig;
  ServingParams p;
  p.max_num_seqs = cap;
  auto& a = rig.add(p, false);
  for (std::size_t i = 0; i < arrivals.size(); ++i) {
    auto w = work(i, arrivals[i].in, arrivals[i].out);
    w.priority = arrivals[i].pri;
    w.request_arrival = SimTime(arrivals[i].t);
    rig.submit_at(a, w, arrivals[i].t);
  }
  rig.kernel.run_until(SimTime(1e9));
  std::map<RequestId, double> out;
  for (const auto& [id, s] : rig.done) out[id] = s.first_token->ms() - arrivals[id].t;
  return out;
}

// Adding a competing request to the queue never makes an existing request's
// first token arrive sooner. Requests are queued together and the competitor
// sorts last, so the comparison is purely in queue depth.
TEST(AgentProperty, TtftMonotoneInQueueDepth) {
  for (std::uint64_t seed = 0; seed < 500; ++seed) {
    std::mt19937_64 gen(seed);
    const auto cap = 1 + static_cast<std::int64_t>(gen() % 4);
    const auto n = 1 + gen() % 6;
    const double t0 = static_cast<double>(gen() % 100);
    auto draw = [&] {
      const int level = static_cast<int>(gen() % 8);
      return Arrival{t0, 1 + static_cast<std::int64_t>(gen() % 300), 1 + static_cast<std::int64_t>(gen() % 20),
                     gen() % 2 ? Priority::interactive(level) : Priority::background(level)};
    };
    std::vector<Arrival> base;
    for (std::size_t i = 0; i < n; ++i) base.push_back(draw());
    auto more = base;
    more.push_back(draw());
    more.back().pri = Priority::background(0);
    const auto before = ttfts(base, cap);
    const auto after = ttfts(more, cap);
    for (const auto& [id, t] : before) EXPECT_GE(after.at(id) + 1e-9, t) << "seed " << seed << " id " << id;
  }
}

// Every submitted token is produced and the batch never exceeds its cap.
TEST(AgentProperty, WorkConservationAndBatchBound) {
  for (std::uint64_t seed = 0; seed < 100; ++seed) {
    std::mt19937_64 gen(seed);
    Rig rig;
    ServingParams p;
    p.max_num_seqs = 1 + static_cast<std::int64_t>(gen() % 8);
    auto& a = rig.add(p, false);
    std::int64_t want = 0;
    const int n = 1 + static_cast<int>(gen() % 30);
    for (int i = 0; i < n; ++i) {
      const auto out = 1 + static_cast<std::int64_t>(gen() % 50);
      want += out;
      auto w = work(static_cast<RequestId>(i), 1 + static_cast<std::int64_t>(gen() % 200), out);
      w.priority = gen() % 2 ? Priority::interactive() : Priority::background();
      rig.submit_at(a, w, static_cast<double>(gen() % 2000));
    }
    rig.kernel.run_until(SimTime(1e9));
    std::int64_t got = 0;
    for (const auto& [_, t] : rig.tokens) got += t;
    EXPECT_EQ(got, want);
    EXPECT_EQ(rig.done.size(), static_cast<std::size_t>(n));
    EXPECT_LE(a.max_batch_seen(), static_cast<std::size_t>(p.max_num_seqs));
    EXPECT_EQ(a.assigned_requests(), 0u);
  }
}

}  // namespace
}  // namespace agentserve
