// SPDX-License-Identifier: Apache-2.0
#include <gtest/gtest.h>

#include <cstring>
#include <random>

#include "local_ring.hpp"
#include "oracles.hpp"
#include "paft/error.hpp"
#include "paft/ftar.hpp"

using namespace paft;
using namespace paft::testing;
using namespace std::chrono_literals;

namespace {

PipelineConfig small_pipeline(std::size_t chunk = 256, std::uint32_t chunks = 3) {
  PipelineConfig c;
  c.chunk_bytes = chunk;
  c.num_chunks = chunks;
  c.per_chunk_timeout = 2000ms;
  return c;
}

bool same_bits(std::span<const float> a, std::span<const float> b) {
  return a.size() == b.size() && std::memcmp(a.data(), b.data(), a.size_bytes()) == 0;
}

}  // namespace

TEST(Pipeline, ValidateRejectsBadChunking) {
  PipelineConfig c;
  c.chunk_bytes = 0;
  EXPECT_THROW(c.validate(), ConfigError);
  c.chunk_bytes = 6;  // not a multiple of sizeof(float)
  EXPECT_THROW(c.validate(), ConfigError);
  c.chunk_bytes = 8;
  c.num_chunks = 0;
  EXPECT_THROW(c.validate(), ConfigError);
}

TEST(PartitionPlan, LargeMessageSplitsInTwo) {
  PipelineConfig c;
  c.chunk_bytes = 8 * kMiB;
  c.num_chunks = 4;
  const auto plan = build_partition_plan(256 * kMiB, c, 4);
  ASSERT_EQ(plan.partitions.size(), 2u);
  EXPECT_EQ(plan.partitions[0].length * sizeof(float), 128 * kMiB);
  EXPECT_EQ(plan.partitions[1].length * sizeof(float), 128 * kMiB);
}

TEST(PartitionPlan, TinyMessageIsOnePartitionWithShortLastChunk) {
  PipelineConfig c;
  c.chunk_bytes = 8 * kMiB;
  c.num_chunks = 4;
  const auto plan = build_partition_plan(100, c, 1);
  ASSERT_EQ(plan.partitions.size(), 1u);
  const auto& seg = plan.partitions[0].segments.back();
  const auto last = plan.chunk(seg, plan.chunks_in(seg) - 1);
  EXPECT_EQ(last.length * sizeof(float), 100u);
}

TEST(PartitionPlan, SegmentsTileEveryPartition) {
  std::mt19937_64 gen(5);
  for (int i = 0; i < 200; ++i) {
    const std::uint32_t n = 1 + gen() % 8;
    const std::size_t elems = 1 + gen() % 5000;
    const auto plan = build_partition_plan(elems * 4, small_pipeline(4 * (1 + gen() % 64)), n);
    std::size_t next = 0;
    for (const auto& p : plan.partitions) {
      EXPECT_EQ(p.offset, next);
      ASSERT_EQ(p.segments.size(), n);
      std::size_t off = 0;
      for (const auto& s : p.segments) {
        EXPECT_EQ(s.offset, off);
        off += s.length;
      }
      EXPECT_EQ(off, p.length);
      EXPECT_LE(p.length * 4, plan.chunk_elems * 4 * 3 * n);
      next += p.length;
    }
    EXPECT_EQ(next, elems);
  }
}

TEST(RingGroup, SortedAndDuplicateFree) {
  const Endpoint e{};
  const auto g = RingGroup::make({{3, e}, {0, e}, {2, e}}, 1);
  EXPECT_EQ(g.replica_ids(), (std::vector<std::uint32_t>{0, 2, 3}));
  EXPECT_EQ(g.index_of(2), 1);
  EXPECT_EQ(g.index_of(1), -1);
  EXPECT_EQ(g.right_of(2).replica_id, 0u);
  EXPECT_EQ(g.left_of(0).replica_id, 3u);
  EXPECT_THROW(RingGroup::make({{1, e}, {1, e}}, 1), ConfigError);
  EXPECT_THROW(RingGroup::make({}, 1), ConfigError);
  EXPECT_EQ(next_group(g, {{0, e}, {3, e}}).generation, 2u);
}

TEST(Ftar, FourMembersDirectSum) {
  LoopbackRing ring(4, small_pipeline(8, 2));
  ring.reconfig(all_positions(ring), 1);
  std::vector<std::vector<float>> in;
  for (int r = 0; r < 4; ++r) in.emplace_back(8, static_cast<float>(r));
  const auto run = ring_all_reduce(ring, in, 0);
  ASSERT_TRUE(run.ok());
  for (const auto& out : run.outputs) EXPECT_EQ(out, std::vector<float>(8, 6.0f));
}

TEST(Ftar, SingleMemberIsIdentity) {
  LoopbackRing ring(1, small_pipeline());
  ring.reconfig({0}, 1);
  std::vector<float> v{1, 2, 3};
  ring.comm(0).all_reduce(v, 0);
  EXPECT_EQ(v, (std::vector<float>{1, 2, 3}));
}

TEST(Ftar, RandomCasesMatchRingOrderOracleBitExactly) {
  std::mt19937_64 gen(20240917);
  std::map<std::uint32_t, std::unique_ptr<LoopbackRing>> rings;
  for (int c = 0; c < 40; ++c) {
    const std::uint32_t n = 2 + gen() % 7;
    const std::size_t len = 1 + gen() % 20000;
    const auto cfg = small_pipeline(512, 3);
    auto& ring = rings[n];
    if (!ring) {
      ring = std::make_unique<LoopbackRing>(n, cfg);
      ring->reconfig(all_positions(*ring), 1);
    }
    std::vector<std::vector<float>> in;
    for (std::uint32_t i = 0; i < n; ++i) in.push_back(random_floats(gen, len, -1e4f, 1e4f));
    const auto want = ring_order_sum(in, build_partition_plan(len * 4, cfg, n));
    const auto exact = direct_sum(in);
    const auto run = ring_all_reduce(*ring, in, c);
    ASSERT_TRUE(run.ok()) << "case " << c;
    for (std::uint32_t i = 0; i < n; ++i) {
      ASSERT_TRUE(same_bits(run.outputs[i], want)) << "case " << c << " member " << i;
      EXPECT_LE(run.stats[i].max_unacked_bytes, cfg.link_capacity());
    }
    for (std::size_t e = 0; e < len; e += 97) EXPECT_NEAR(want[e], exact[e], 1e-2);
  }
}

TEST(Ftar, ReconfigToSameMembershipBumpsGenerationAndWorks) {
  LoopbackRing ring(3, small_pipeline());
  ring.reconfig(all_positions(ring), 1);
  ring.reconfig(all_positions(ring), 2);
  EXPECT_EQ(ring.comm(0).group().generation, 2u);
  std::vector<std::vector<float>> in(3, std::vector<float>(100, 1.0f));
  const auto run = ring_all_reduce(ring, in, 0);
  ASSERT_TRUE(run.ok());
  EXPECT_EQ(run.outputs[2][99], 3.0f);
}

TEST(Ftar, SubsetRingAfterShrink) {
  LoopbackRing ring(4, small_pipeline());
  ring.reconfig({0, 1, 3}, 5);
  std::vector<std::vector<float>> in{{1, 1}, {2, 2}, {4, 4}};
  const auto run = ring_all_reduce(ring, in, 0, {0, 1, 3});
  ASSERT_TRUE(run.ok());
  for (const auto& o : run.outputs) EXPECT_EQ(o, (std::vector<float>{7, 7}));
}

TEST(Ftar, MemberKilledMidReduceScatterFailsSurvivorsRecoverably) {
  auto cfg = small_pipeline(64, 2);
  cfg.per_chunk_timeout = 1000ms;
  LoopbackRing ring(4, cfg);
  ring.reconfig(all_positions(ring), 1);
  ring.comm(2).set_send_hook([&](std::uint64_t, std::uint32_t t, std::uint32_t c) {
    if (t == 1 && c == 0) ring.kill_switch(2).trigger();
  });
  std::vector<std::vector<float>> in(4, std::vector<float>(4000, 1.0f));
  const auto t0 = SteadyClock::now();
  const auto run = ring_all_reduce(ring, in, 0);
  EXPECT_LT(SteadyClock::now() - t0, 2 * cfg.per_chunk_timeout + 500ms);
  for (std::uint32_t i : {0u, 1u, 3u}) {
    ASSERT_TRUE(run.errors[i]) << "member " << i;
    try {
      std::rethrow_exception(run.errors[i]);
    } catch (const Error& e) {
      EXPECT_TRUE(e.recoverable()) << e.what();
    }
    EXPECT_FALSE(ring.comm(i).ready());
  }
}

TEST(Ftar, BlackholedLinkTimesOutAndRetrySucceeds) {
  auto cfg = small_pipeline(64, 2);
  cfg.per_chunk_timeout = 300ms;
  FaultRule r;
  r.replica_id = 1;
  r.kind = FaultKind::kBlackhole;
  r.at_step = 3;
  LoopbackRing ring(3, cfg, std::make_shared<FaultTable>(std::vector<FaultRule>{r}, 0.0));
  ring.reconfig(all_positions(ring), 1);
  for (std::uint32_t i = 0; i < 3; ++i) ring.clock(i).step = 3;
  std::vector<std::vector<float>> in(3, std::vector<float>(500, 2.0f));
  auto run = ring_all_reduce(ring, in, 3);
  EXPECT_FALSE(run.ok());
  // Inputs are untouched unless a partition completed.
  for (const auto& o : run.outputs) {
    EXPECT_TRUE(std::all_of(o.begin(), o.end(), [](float x) { return x == 2.0f || x == 6.0f; }));
  }
  for (std::uint32_t i = 0; i < 3; ++i) ring.clock(i).attempt = 1;
  ring.reconfig(all_positions(ring), 2);
  run = ring_all_reduce(ring, in, 3);
  ASSERT_TRUE(run.ok());
  EXPECT_EQ(run.outputs[0][0], 6.0f);
}

TEST(Ftar, NonFiniteInputIsFatal) {
  LoopbackRing ring(2, small_pipeline());
  ring.reconfig(all_positions(ring), 1);
  std::vector<std::vector<float>> in{{1.0f, NAN}, {1.0f, 1.0f}};
  const auto run = ring_all_reduce(ring, in, 0);
  bool fatal = false;
  for (const auto& e : run.errors) {
    if (!e) continue;
    try {
      std::rethrow_exception(e);
    } catch (const Error& err) {
      fatal = fatal || err.reason() == Reason::kNumerical;
    }
  }
  EXPECT_TRUE(fatal);
}
