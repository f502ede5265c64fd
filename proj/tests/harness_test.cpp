// SPDX-License-Identifier: Apache-2.0
#include <gtest/gtest.h>

#include <cmath>

#include "paft/error.hpp"
#include "paft/harness.hpp"
#include "paft/metrics.hpp"

using namespace paft;
namespace fs = std::filesystem;
using namespace std::chrono_literals;

TEST(EffectiveTime, Examples) {
  EXPECT_NEAR(compute_effective_training_time(18, 10, 10, 12), 8.0 / 18.0, 1e-12);
  EXPECT_NEAR(compute_effective_training_time(18, 10, 10, 1), 8.0 / 18.0, 1e-12);
  EXPECT_NEAR(compute_effective_training_time(18, 10, 3, 12), (8 + 7 * 11.0 / 12.0) / 18.0,
              1e-12);
  EXPECT_NEAR(compute_effective_training_time(18, 10, 3, 12), 0.801, 0.001);
  // One replica degenerates to fully synchronous training.
  EXPECT_NEAR(compute_effective_training_time(30, 6, 0, 1), 24.0 / 30.0, 1e-12);
  EXPECT_DOUBLE_EQ(compute_effective_training_time(10, 0, 0, 4), 1.0);
}

TEST(EffectiveTime, BadArgumentsRejected) {
  EXPECT_THROW(compute_effective_training_time(18, 10, 11, 4), ConfigError);
  EXPECT_THROW(compute_effective_training_time(9, 10, 3, 4), ConfigError);
  EXPECT_THROW(compute_effective_training_time(18, 10, -1, 4), ConfigError);
  EXPECT_THROW(compute_effective_training_time(18, 10, 3, 0), ConfigError);
  EXPECT_THROW(compute_effective_training_time(0, 0, 0, 1), ConfigError);
}

TEST(Ledger, ContiguousPrefixPasses) {
  std::vector<LoaderStateRecord> recs;
  for (std::uint64_t s = 1; s <= 5; ++s) {
    recs.push_back({s, 0, 2 * s});
    if (s != 3) recs.push_back({s, 1, 2 * (s < 3 ? s : s - 1)});
  }
  EXPECT_TRUE(check_loader_ledger(recs, 2).empty());
}

TEST(Ledger, GapsAndRepeatsFlagged) {
  const std::vector<LoaderStateRecord> skip{{1, 0, 2}, {2, 0, 6}};
  EXPECT_EQ(check_loader_ledger(skip, 2).size(), 1u);
  const std::vector<LoaderStateRecord> repeat{{1, 0, 2}, {1, 0, 4}};
  EXPECT_EQ(check_loader_ledger(repeat, 2).size(), 1u);
  const std::vector<LoaderStateRecord> bad_start{{1, 0, 4}};
  EXPECT_EQ(check_loader_ledger(bad_start, 2).size(), 1u);
}

TEST(ScenarioFile, JsonRoundTripAndLabel) {
  Scenario s;
  s.name = "kill2";
  s.total_steps = 300;
  FailureSpec f;
  f.at_step = 50;
  f.duration_steps = 20;
  f.replicas = {2};
  s.failures.push_back(f);
  s.lr.intervention = LrIntervention::kSqrt;
  const auto back = scenario_from_json(scenario_to_json(s));
  EXPECT_EQ(scenario_to_json(back), scenario_to_json(s));
  EXPECT_EQ(scenario_label(s), "d1x_f32_for20_1reps_lr_sqrt");
  EXPECT_EQ(failure_victims(s, s.failures[0]), (std::vector<std::uint32_t>{2}));
}

TEST(ScenarioFile, InvalidConfigsRejected) {
  EXPECT_THROW(scenario_from_json(R"({"topology": {"num_replicas": 4, "bogus": 1}})"),
               ConfigError);
  EXPECT_THROW(scenario_from_json("{"), ConfigError);
  Scenario s;
  s.total_steps = 60;
  FailureSpec f;
  f.at_step = 50;
  f.duration_steps = 20;
  s.failures.push_back(f);
  EXPECT_THROW(validate(s), ConfigError);
  s.failures[0].duration_steps = 5;
  s.failures[0].concurrent_replicas = s.num_replicas;
  EXPECT_THROW(validate(s), ConfigError);
}

namespace {

Scenario tiny(const std::string& name) {
  Scenario s;
  s.name = name;
  s.num_replicas = 3;
  s.ranks_per_replica = 2;
  s.dims = {8, 8, 2};
  s.micro_batch = 4;
  s.total_steps = 30;
  s.checkpoint_interval = 10;
  s.allocation_delay = 200ms;
  s.timeouts.detection = 3000ms;
  s.timeouts.per_chunk = 1000ms;
  s.timeouts.quorum_deadline = 1000ms;
  s.eval_rows = 16;
  return s;
}

MetricsReport run(const Scenario& s) {
  RunOptions o;
  o.run_dir = fs::temp_directory_path() / ("paft_harness_" + s.name);
  o.binary = PAFT_BINARY;
  o.time_limit = 120s;
  return run_scenario(s, o);
}

std::string joined(const std::vector<std::string>& v) {
  std::string out;
  for (const auto& x : v) out += x + "\n";
  return out;
}

}  // namespace

TEST(EndToEnd, Baseline) {
  const auto r = run(tiny("baseline"));
  ASSERT_EQ(r.exit_code, 0) << joined(r.violations) << joined(r.events);
  EXPECT_EQ(r.final_hashes.size(), 3u);
  for (const auto& row : r.rows) {
    EXPECT_EQ(row.phase, "train");
    EXPECT_EQ(row.healthy_count, 3u);
    EXPECT_EQ(row.tokens_committed, 4u * 2u);
  }
  EXPECT_EQ(r.rows.size(), 3u * 30u);
  EXPECT_EQ(r.tokens_total, 30u * 3u * 4u * 2u);
}

TEST(EndToEnd, DeterministicAcrossRuns) {
  const auto a = run(tiny("det_a"));
  const auto b = run(tiny("det_b"));
  ASSERT_EQ(a.exit_code, 0) << joined(a.violations);
  ASSERT_EQ(b.exit_code, 0) << joined(b.violations);
  EXPECT_EQ(a.final_hashes, b.final_hashes);
  ASSERT_EQ(a.curve.size(), b.curve.size());
  for (std::size_t i = 0; i < a.curve.size(); ++i) EXPECT_EQ(a.curve[i].loss, b.curve[i].loss);
}

TEST(EndToEnd, KillAndRejoin) {
  auto s = tiny("kill");
  FailureSpec f;
  f.at_step = 8;
  f.duration_steps = 6;
  f.replicas = {1};
  s.failures.push_back(f);
  const auto r = run(s);
  ASSERT_EQ(r.exit_code, 0) << joined(r.violations) << joined(r.events);
  EXPECT_EQ(r.final_hashes.size(), 3u);
  bool saw_two = false, saw_catchup = false;
  for (const auto& row : r.rows) {
    if (row.healthy_count == 2) saw_two = true;
    if (row.phase == "catchup" && row.replica_id == 1) saw_catchup = true;
  }
  EXPECT_TRUE(saw_two);
  EXPECT_TRUE(saw_catchup);
  EXPECT_EQ(r.first_step_overhead_ms.size(), 1u);
}

TEST(EndToEnd, HungRankDetected) {
  auto s = tiny("hang");
  // Long enough that the survivors are still training when the replacement
  // is ready.
  s.total_steps = 3000;
  s.checkpoint_interval = 0;
  s.timeouts.detection = 1500ms;
  FailureSpec f;
  f.kind = FailureKind::kHangRank;
  f.at_step = 6;
  f.duration_steps = 4;
  f.replicas = {2};
  f.rank = 1;
  s.failures.push_back(f);
  const auto r = run(s);
  ASSERT_EQ(r.exit_code, 0) << joined(r.violations) << joined(r.events);
  EXPECT_EQ(r.final_hashes.size(), 3u) << joined(r.events);
}

TEST(EndToEnd, DroppedLinksRetried) {
  auto s = tiny("drop");
  FailureSpec f;
  f.kind = FailureKind::kDropLinks;
  f.at_step = 5;
  f.duration_steps = 1;
  f.replicas = {0};
  f.rank = kAnyRank;
  s.failures.push_back(f);
  const auto r = run(s);
  ASSERT_EQ(r.exit_code, 0) << joined(r.violations) << joined(r.events);
  bool retried = false;
  for (const auto& a : r.attempts) retried |= a.outcome == "retried";
  EXPECT_TRUE(retried);
}
