// Copyright 2026 The agentserve Authors.
// SPDX-License-Identifier: Apache-2.0

#include <gtest/gtest.h>

#include <map>
#include <random>

#include "agentserve/dataplane.hpp"

namespace agentserve {
namespace {

std::int64_t payload_sum(const std::vector<MessageEnvelope>& env) {
  std::int64_t s = 0;
  for (const auto& e : env) s += e.payload_tokens;
  return s;
}

TEST(ShimTest, StreamCutsFullChunksOnly) {
  Shim shim;
  const auto l = shim.add_link(0, 1, Granularity::token_stream(16));
  EXPECT_TRUE(shim.offer_tokens(l, 7, 10).empty());
  auto cut = shim.offer_tokens(l, 7, 10);
  ASSERT_EQ(cut.size(), 1u);
  EXPECT_EQ(cut[0].payload_tokens, 16);
  EXPECT_FALSE(cut[0].is_final);
  EXPECT_EQ(shim.buffered_tokens(l, 7), 4);
}

TEST(ShimTest, BatchAllHoldsUntilComplete) {
  Shim shim;
  const auto l = shim.add_link(0, 1, Granularity::batch_all());
  EXPECT_TRUE(shim.offer_tokens(l, 1, 10).empty());
  EXPECT_TRUE(shim.offer_tokens(l, 1, 10).empty());
  auto cut = shim.offer_tokens(l, 1, 12, OfferFlags{.function_boundary = true, .request_complete = true});
  ASSERT_EQ(cut.size(), 1u);
  EXPECT_EQ(cut[0].payload_tokens, 32);
  EXPECT_TRUE(cut[0].is_final);
}

TEST(ShimTest, PerFunctionCutsAtBoundaries) {
  Shim shim;
  const auto l = shim.add_link(0, 1, Granularity::per_function());
  std::vector<MessageEnvelope> all;
  for (std::int64_t n : {40, 50}) {
    auto c = shim.offer_tokens(l, 1, n, OfferFlags{.function_boundary = true});
    all.insert(all.end(), c.begin(), c.end());
  }
  auto c = shim.offer_tokens(l, 1, 60, OfferFlags{.function_boundary = true, .request_complete = true});
  all.insert(all.end(), c.begin(), c.end());
  ASSERT_EQ(all.size(), 3u);
  EXPECT_EQ(all[0].payload_tokens, 40);
  EXPECT_EQ(all[1].payload_tokens, 50);
  EXPECT_EQ(all[2].payload_tokens, 60);
  EXPECT_TRUE(all[2].is_final);
  EXPECT_FALSE(all[1].is_final);
}

TEST(ShimTest, SwitchBatchToStreamFlushesWholeChunks) {
  Shim shim;
  const auto l = shim.add_link(0, 1, Granularity::batch_all());
  shim.offer_tokens(l, 1, 20);
  auto cut = shim.set_mode(l, Granularity::token_stream(16));
  ASSERT_EQ(cut.size(), 1u);
  EXPECT_EQ(cut[0].payload_tokens, 16);
  EXPECT_EQ(shim.buffered_tokens(l, 1), 4);
}

TEST(ShimTest, SwitchStreamToBatchHoldsRemainder) {
  Shim shim;
  const auto l = shim.add_link(0, 1, Granularity::token_stream(16));
  EXPECT_EQ(shim.offer_tokens(l, 1, 20).size(), 1u);
  EXPECT_TRUE(shim.set_mode(l, Granularity::batch_all()).empty());
  EXPECT_TRUE(shim.offer_tokens(l, 1, 30).empty());
  auto last = shim.offer_tokens(l, 1, 2, OfferFlags{.request_complete = true});
  ASSERT_EQ(last.size(), 1u);
  EXPECT_EQ(last[0].payload_tokens, 36);
  EXPECT_EQ(last[0].seq, 1);
  EXPECT_EQ(last[0].mode, Granularity::Kind::kBatchAll);
}

TEST(ShimTest, KnobSurfaceMatchesSetMode) {
  Shim shim;
  const auto l = shim.add_link(0, 1, Granularity::token_stream(16));
  shim.set_knob(l, "comm_mode", std::string("batch_all"));
  EXPECT_EQ(shim.link(l).mode, Granularity::batch_all());
  shim.reset_knob(l, "comm_mode");
  EXPECT_EQ(shim.link(l).mode, Granularity::token_stream(16));
  shim.set_knob(l, "chunk_tokens", std::int64_t{4});
  EXPECT_EQ(shim.link(l).mode.chunk_tokens(), 4);
  EXPECT_THROW(shim.set_knob(l, "chunk_tokens", std::int64_t{0}), Error);
  EXPECT_THROW(shim.set_knob(l, "bogus", std::int64_t{1}), Error);
}

TEST(ShimTest, UnknownLink) {
  Shim shim;
  try {
    shim.offer_tokens(3, 1, 1);
    FAIL();
  } catch (const Error& e) {
    EXPECT_EQ(e.code(), ErrorCode::kUnknownLink);
  }
}

TEST(ShimTest, DispatchPriorityFirstThenFifo) {
  Shim shim;
  const auto l = shim.add_link(0, 1, Granularity::token_stream(1), 0.0, 0.0);
  shim.offer_tokens(l, 1, 1, {}, Priority::background(0));
  shim.offer_tokens(l, 2, 1, {}, Priority::interactive(4));
  shim.offer_tokens(l, 3, 1, {}, Priority::background(0));
  auto out = shim.dispatch(l, SimTime(0.0));
  ASSERT_EQ(out.size(), 3u);
  EXPECT_EQ(out[0].envelope.request_id, 2u);
  EXPECT_EQ(out[1].envelope.request_id, 1u);
  EXPECT_EQ(out[2].envelope.request_id, 3u);
}

TEST(ShimTest, PacingSpacesArrivals) {
  Shim shim;
  const auto l = shim.add_link(0, 1, Granularity::token_stream(1), 5.0, 1.0);
  shim.offer_tokens(l, 1, 2);
  auto out = shim.dispatch(l, SimTime(0.0));
  ASSERT_EQ(out.size(), 2u);
  EXPECT_DOUBLE_EQ(out[0].arrival.ms(), 1.0);
  EXPECT_DOUBLE_EQ(out[1].arrival.ms(), 6.0);
}

TEST(ShimTest, EmptyDispatch) {
  Shim shim;
  const auto l = shim.add_link(0, 1, Granularity::batch_all());
  EXPECT_TRUE(shim.dispatch(l, SimTime(3.0)).empty());
}

// Random offers and mode switches: per request, emitted payloads sum to the
// offered count, seq is contiguous, exactly one final envelope comes last.
TEST(ShimProperty, ConservationUnderRandomSwitches) {
  for (std::uint64_t seed = 0; seed < 300; ++seed) {
    std::mt19937_64 gen(seed);
    Shim shim;
    const auto l = shim.add_link(0, 1, Granularity::token_stream(1 + static_cast<std::int64_t>(gen() % 20)));
    const int nreq = 1 + static_cast<int>(gen() % 5);
    std::map<RequestId, std::int64_t> offered, left;
    for (int r = 0; r < nreq; ++r) left[static_cast<RequestId>(r)] = 1 + static_cast<std::int64_t>(gen() % 200);
    std::map<RequestId, std::vector<MessageEnvelope>> got;
    double now = 0.0;
    auto drain = [&] {
      for (auto& d : shim.dispatch(l, SimTime(now))) got[d.envelope.request_id].push_back(d.envelope);
    };
    while (!left.empty()) {
      auto it = std::next(left.begin(), static_cast<long>(gen() % left.size()));
      const auto n = std::min<std::int64_t>(it->second, 1 + static_cast<std::int64_t>(gen() % 30));
      it->second -= n;
      offered[it->first] += n;
      OfferFlags f{.function_boundary = gen() % 4 == 0, .request_complete = it->second == 0};
      shim.offer_tokens(l, it->first, n, f, Priority::background(), SimTime(now));
      if (it->second == 0) left.erase(it);
      if (gen() % 5 == 0) {
        const auto k = gen() % 3;
        const auto g = k == 0 ? Granularity::batch_all()
                       : k == 1 ? Granularity::per_function()
                                : Granularity::token_stream(1 + static_cast<std::int64_t>(gen() % 20));
        shim.set_mode(l, g, SimTime(now));
      }
      now += 1.0;
      if (gen() % 2) drain();
    }
    drain();
    for (const auto& [req, total] : offered) {
      const auto& env = got[req];
      ASSERT_FALSE(env.empty());
      EXPECT_EQ(payload_sum(env), total);
      for (std::size_t i = 0; i < env.size(); ++i) {
        EXPECT_EQ(env[i].seq, static_cast<std::int64_t>(i));
        EXPECT_EQ(env[i].is_final, i + 1 == env.size());
      }
    }
  }
}

}  // namespace
}  // namespace agentserve
