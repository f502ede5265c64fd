// SPDX-License-Identifier: Apache-2.0
#include <gtest/gtest.h>

#include <future>
#include <thread>

#include "paft/error.hpp"
#include "paft/quorum.hpp"

using namespace paft;
using namespace std::chrono_literals;

TEST(Decide, HealthyAtMaxStepOthersBehind) {
  const std::vector<QuorumReport> reports{{1, 100, 0, 0}, {1, 100, 1, 0}, {1, 60, 2, 1},
                                          {1, 100, 3, 0}};
  const auto d = decide(1, reports, nullptr);
  EXPECT_EQ(d.target_step, 100u);
  EXPECT_EQ(d.healthy, (std::vector<std::uint32_t>{0, 1, 3}));
  ASSERT_EQ(d.behind.size(), 1u);
  EXPECT_EQ(d.behind[0], (std::pair<std::uint32_t, std::uint64_t>{2, 60}));
  EXPECT_EQ(d.participants(), (std::vector<std::uint32_t>{0, 1, 2, 3}));
  EXPECT_TRUE(d.is_healthy(3));
  EXPECT_TRUE(d.is_behind(2));
  EXPECT_EQ(d.generation, 1u);
}

TEST(Decide, GenerationStableOnlyWhenEveryoneAdvancesTogether) {
  const std::vector<QuorumReport> r1{{1, 10, 0, 0}, {1, 10, 1, 0}};
  const auto d1 = decide(1, r1, nullptr);
  const std::vector<QuorumReport> r2{{2, 11, 0, 0}, {2, 11, 1, 0}};
  const auto d2 = decide(2, r2, &d1);
  EXPECT_EQ(d2.generation, d1.generation);
  // Retry of the same step: rings are rebuilt.
  const auto d3 = decide(3, r2, &d2);
  EXPECT_EQ(d3.generation, d2.generation + 1);
  // Membership change.
  const std::vector<QuorumReport> r4{{4, 12, 0, 0}};
  EXPECT_EQ(decide(4, r4, &d3).generation, d3.generation + 1);
}

TEST(Decide, EmptyRoundIsConfigError) {
  EXPECT_THROW(decide(1, std::span<const QuorumReport>{}, nullptr), ConfigError);
}

namespace {

std::future<QuorumDecision> report_async(const Coordinator& c, std::uint32_t replica,
                                         std::uint32_t inc, std::uint64_t step) {
  return std::async(std::launch::async, [ep = c.endpoint(), replica, inc, step] {
    QuorumClient client(ep, replica, inc);
    return client.report_and_decide(QuorumReport{0, step, replica, inc}, 10s);
  });
}

}  // namespace

TEST(Coordinator, AllReportersGetTheSameDecision) {
  Coordinator c;
  for (std::uint32_t r = 0; r < 4; ++r) c.expect(r, 0);
  std::vector<std::future<QuorumDecision>> fs;
  for (std::uint32_t r = 0; r < 4; ++r) fs.push_back(report_async(c, r, 0, r == 2 ? 3 : 5));
  std::vector<QuorumDecision> ds;
  for (auto& f : fs) ds.push_back(f.get());
  for (const auto& d : ds) EXPECT_EQ(d, ds[0]);
  EXPECT_EQ(ds[0].healthy, (std::vector<std::uint32_t>{0, 1, 3}));
  EXPECT_EQ(c.history().size(), 1u);
}

TEST(Coordinator, SilentReplicaExcludedAfterDeadline) {
  CoordinatorOptions o;
  o.report_deadline = 300ms;
  o.join_hold = 300ms;
  Coordinator c(o);
  for (std::uint32_t r = 0; r < 3; ++r) c.expect(r, 0);
  const auto t0 = SteadyClock::now();
  auto a = report_async(c, 0, 0, 1);
  auto b = report_async(c, 1, 0, 1);
  const auto d = a.get();
  EXPECT_EQ(b.get(), d);
  EXPECT_EQ(d.healthy, (std::vector<std::uint32_t>{0, 1}));
  EXPECT_GE(SteadyClock::now() - t0, 250ms);
}

TEST(Coordinator, DeadReplicaDoesNotDelayRound) {
  CoordinatorOptions o;
  o.report_deadline = 5s;
  o.join_hold = 5s;
  Coordinator c(o);
  for (std::uint32_t r = 0; r < 3; ++r) c.expect(r, 0);
  c.mark_dead(2);
  const auto t0 = SteadyClock::now();
  auto a = report_async(c, 0, 0, 1);
  auto b = report_async(c, 1, 0, 1);
  a.get();
  b.get();
  EXPECT_LT(SteadyClock::now() - t0, 2s);
}

TEST(Coordinator, StaleIncarnationIsRejected) {
  CoordinatorOptions o;
  o.report_deadline = 200ms;
  o.join_hold = 200ms;
  Coordinator c(o);
  c.expect(0, 0);
  c.expect(1, 2);
  auto stale = std::async(std::launch::async, [ep = c.endpoint()] {
    QuorumClient client(ep, 1, 1);
    return client.report_and_decide(QuorumReport{0, 1, 1, 1}, 1s);
  });
  auto good = report_async(c, 0, 0, 1);
  EXPECT_THROW(stale.get(), Error);
  EXPECT_EQ(good.get().healthy, (std::vector<std::uint32_t>{0}));
  EXPECT_GE(c.rejected_reports(), 1u);
}

TEST(Coordinator, GatedJoinerWaitsForItsStep) {
  CoordinatorOptions o;
  o.report_deadline = 2s;
  o.join_hold = 5s;
  Coordinator c(o);
  c.expect(0, 0);
  c.expect(1, 1, 3);
  // Joiner reports early; rounds for steps 1 and 2 go on without it.
  auto joiner = report_async(c, 1, 1, 0);
  for (std::uint64_t s = 1; s <= 2; ++s) {
    const auto d = report_async(c, 0, 0, s).get();
    EXPECT_EQ(d.participants(), (std::vector<std::uint32_t>{0}));
  }
  const auto d3 = report_async(c, 0, 0, 3).get();
  EXPECT_EQ(d3.healthy, (std::vector<std::uint32_t>{0}));
  ASSERT_EQ(d3.behind.size(), 1u);
  EXPECT_EQ(d3.behind[0].first, 1u);
  EXPECT_EQ(joiner.get(), d3);
}

TEST(Coordinator, RoundAtJoinStepHoldsForLateJoiner) {
  CoordinatorOptions o;
  o.report_deadline = 2s;
  o.join_hold = 5s;
  Coordinator c(o);
  c.expect(0, 0);
  report_async(c, 0, 0, 1).get();
  c.expect(1, 1, 2);
  auto healthy = report_async(c, 0, 0, 2);
  std::this_thread::sleep_for(300ms);
  EXPECT_EQ(healthy.wait_for(0ms), std::future_status::timeout);
  auto joiner = report_async(c, 1, 1, 0);
  const auto d = healthy.get();
  EXPECT_EQ(d.participants(), (std::vector<std::uint32_t>{0, 1}));
  EXPECT_EQ(joiner.get(), d);
}

TEST(Emulation, TwelveReplicasDecideQuickly) {
  const auto lat = emulate_quorum(12, 20);
  EXPECT_EQ(lat.replicas, 12u);
  EXPECT_LT(lat.p99_ms, 100.0);
  EXPECT_LE(lat.p50_ms, lat.p99_ms);
}
