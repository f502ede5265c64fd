// SPDX-License-Identifier: Apache-2.0
#pragma once

// Scenario runner. The harness process hosts the coordinator, launches one
// `paft rank` process per (replica, rank), restarts replicas after failures,
// then merges the per-rank logs and checks the run's invariants.

#include <chrono>
#include <filesystem>
#include <string>
#include <vector>

#include "paft/metrics.hpp"
#include "paft/scenario.hpp"

namespace paft {

struct RunOptions {
  std::filesystem::path run_dir;
  /// Executable that understands the `rank` subcommand.
  std::filesystem::path binary;
  Millis time_limit{1800000};
  /// Cap on restarts after deaths that were not scheduled.
  std::uint32_t max_unscheduled_restarts = 3;
};

/// Runs the scenario to completion and fills the report, including
/// violations and the exit code (0 ok, 3 invariant violated, 4 runtime).
/// Writes metrics.csv, curve.csv and summary.json into run_dir.
MetricsReport run_scenario(const Scenario& s, const RunOptions& opts);

/// Writes run.json (scenario, rank endpoints, coordinator endpoint).
void write_run_file(const std::filesystem::path& run_dir, const Scenario& s,
                    const std::vector<std::vector<Endpoint>>& endpoints,
                    const Endpoint& coordinator);
/// Rank-process side of run.json.
RankConfig load_rank_config(const std::filesystem::path& run_dir, std::uint32_t replica,
                            std::uint32_t rank, std::uint32_t incarnation,
                            std::uint64_t join_step);

/// Combined hash of one replica's rank shard hashes, in rank order.
std::uint64_t replica_state_hash(const std::vector<std::uint64_t>& shard_hashes);

/// Exactly-once check of the loader_state ledger: per replica, steps strictly
/// increase and each cursor advances by exactly `ranks`. Returns violations.
std::vector<std::string> check_loader_ledger(const std::vector<LoaderStateRecord>& records,
                                             std::uint32_t ranks);

/// Path of the running executable.
std::filesystem::path self_executable();

}  // namespace paft
