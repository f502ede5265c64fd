// SPDX-License-Identifier: Apache-2.0
#pragma once

// One rank of one replica: the per-step state machine.
//
//   leader reports to the coordinator, forwards the decision to its ranks
//   healthy:  forward/backward -> intra reduce-scatter -> FTAR on own shard
//             -> 2PC -> optimizer on shard -> all-gather parameters
//   behind:   fetch step n-1 shard from a donor -> FTAR with zeros -> 2PC
//             -> same optimizer update on the fetched state
//
// Rank 0 is the leader. Any rank failure takes the replica down.

#include <atomic>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <functional>
#include <memory>
#include <optional>
#include <span>
#include <string>
#include <thread>
#include <vector>

#include "paft/checkpoint.hpp"
#include "paft/ftar.hpp"
#include "paft/model.hpp"
#include "paft/quorum.hpp"
#include "paft/scenario.hpp"

namespace paft {

/// Contiguous split of the flat parameter vector across R ranks. The first
/// (total mod R) ranks hold one extra element.
struct ShardMap {
  std::vector<std::size_t> offsets;
  std::vector<std::size_t> lengths;

  static ShardMap make(std::size_t total, std::uint32_t ranks);
  std::uint32_t ranks() const noexcept { return static_cast<std::uint32_t>(offsets.size()); }
  std::size_t offset(std::uint32_t r) const { return offsets.at(r); }
  std::size_t length(std::uint32_t r) const { return lengths.at(r); }
  std::size_t total() const noexcept;
};

/// Fully connected mesh among the ranks of one replica.
class IntraGroup {
 public:
  IntraGroup(std::uint32_t rank, std::vector<std::unique_ptr<Connection>> peers,
             Millis timeout);

  /// Lower ranks dial higher ranks; higher ranks claim from their acceptor.
  static IntraGroup connect(std::uint32_t replica, std::uint32_t rank,
                            const std::vector<Endpoint>& rank_endpoints,
                            std::uint32_t incarnation, Acceptor& acceptor, KillSwitch* ks,
                            Deadline deadline, Millis timeout);

  std::uint32_t rank() const noexcept { return rank_; }
  std::uint32_t size() const noexcept { return static_cast<std::uint32_t>(peers_.size()); }

  /// out <- sum over ranks, in rank order, of shard `rank()` of each `grad`.
  void reduce_scatter(std::span<const float> grad, const ShardMap& map, std::span<float> out);
  /// Every rank's shard of `full` is replaced by its owner's copy.
  void all_gather(std::span<float> full, const ShardMap& map);

  void send(std::uint32_t to, const wire::Frame& f);
  wire::Frame recv(std::uint32_t from, Millis timeout);
  wire::Frame recv(std::uint32_t from) { return recv(from, timeout_); }

 private:
  void exchange(std::uint32_t peer, const wire::Frame& out, wire::Frame& in);

  std::uint32_t rank_;
  std::vector<std::unique_ptr<Connection>> peers_;  // indexed by rank; null for self
  Millis timeout_;
};

enum class Phase { kTraining, kAwaitingQuorum, kCatchingUp, kFailed };
std::string_view to_string(Phase p) noexcept;

struct StepOutcome {
  enum class Kind { kCommitted, kRetried, kLeftBehind, kReplicaFailed };
  Kind kind = Kind::kCommitted;
  std::uint64_t step = 0;
  std::uint64_t tokens = 0;
  std::uint32_t healthy_count = 0;
  Reason reason = Reason::kInternalInvariant;
  std::string detail;
};
std::string_view to_string(StepOutcome::Kind k) noexcept;

/// The replica is going down (scheduled kill, watchdog, or fatal error).
class ReplicaFailed : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

struct RankConfig {
  Scenario scenario;
  std::uint32_t replica_id = 0;
  std::uint32_t rank = 0;
  std::uint32_t incarnation = 0;
  /// First step this incarnation may act on; earlier scheduled actions are
  /// history.
  std::uint64_t join_step = 0;
  std::vector<std::vector<Endpoint>> endpoints;  // [replica][rank]
  Endpoint coordinator;
  std::filesystem::path run_dir;
};

/// Process-level effects, replaceable in tests.
struct RankHooks {
  std::function<void()> self_kill;        // scheduled kill_replica
  std::function<void()> watchdog_fired;   // detection interval exceeded
};

/// Per-attempt record written by each rank.
struct AttemptRecord {
  std::uint64_t step = 0;
  std::uint32_t attempt = 0;
  std::uint32_t replica_id = 0;
  std::uint32_t rank = 0;
  std::uint32_t incarnation = 0;
  std::string phase;    // train | catchup
  std::string outcome;  // committed | retried | left_behind
  double wall_ms = 0.0;      // since the previous attempt ended
  double step_ms = 0.0;      // decision to outcome
  double quorum_ms = 0.0;
  double ftar_ms = 0.0;
  double fetch_ms = 0.0;
  std::uint32_t healthy_count = 0;
  std::uint32_t generation = 0;
  std::uint64_t cursor = 0;  // batch cursor used (train) or restored (catchup)
  float loss = 0.0f;
  float eval_loss = 0.0f;
  std::uint64_t hash_before = 0;
  std::uint64_t hash_after = 0;
  std::string event;
};

std::string attempt_csv_header();
std::string to_csv(const AttemptRecord& r);

class RankEngine {
 public:
  RankEngine(RankConfig cfg, RankHooks hooks = {});
  ~RankEngine();
  RankEngine(const RankEngine&) = delete;
  RankEngine& operator=(const RankEngine&) = delete;

  /// Runs to total_steps (or halt). Throws ReplicaFailed / Error when the
  /// replica must go down.
  void run();

  std::uint64_t next_step() const noexcept { return next_step_; }
  /// Hash of this rank's shard (params, momentum, step_count).
  std::uint64_t shard_state_hash() const;
  std::uint64_t full_params_hash() const;

 private:
  void setup();
  QuorumDecision await_decision();
  StepOutcome train_step(const QuorumDecision& d);
  StepOutcome catch_up(const QuorumDecision& d);
  bool run_ftar(const QuorumDecision& d, std::span<float> shard, AttemptRecord& rec);
  bool two_phase_commit(std::uint64_t step, bool vote, bool training, std::uint64_t new_cursor);
  void apply_update(std::span<float> summed, const QuorumDecision& d);
  void after_commit(const QuorumDecision& d);
  void maybe_checkpoint(const QuorumDecision& d);
  ShardState current_shard(std::uint64_t step) const;
  float eval_loss() const;
  void write_record(AttemptRecord& rec);
  void write_final();
  void arm_watchdog();
  void disarm_watchdog();
  bool leader() const noexcept { return cfg_.rank == 0; }

  RankConfig cfg_;
  RankHooks hooks_;
  ModelState model_;
  std::vector<float> momentum_;  // this rank's shard only
  std::uint64_t step_count_ = 0;
  ShardMap shards_;
  bool have_state_ = false;
  std::uint64_t next_step_ = 0;
  std::uint64_t cursor_ = 0;
  std::uint64_t last_target_ = ~std::uint64_t{0};
  std::uint32_t attempt_ = 0;
  std::uint32_t consecutive_retries_ = 0;
  std::uint64_t epoch_ = 0;
  double quorum_ms_ = 0.0;

  KillSwitch kill_switch_;
  std::unique_ptr<Acceptor> acceptor_;
  std::shared_ptr<SnapshotStore> snapshots_;
  std::unique_ptr<RingComm> ring_;
  std::shared_ptr<FaultClock> clock_;
  std::shared_ptr<const FaultTable> faults_;
  std::optional<IntraGroup> intra_;
  std::unique_ptr<QuorumClient> quorum_;
  CheckpointWriter writer_;
  std::unique_ptr<LoaderStateLog> loader_log_;
  Batch eval_batch_;

  std::ofstream csv_;
  SteadyClock::time_point last_end_;

  std::atomic<bool> armed_{false};
  std::atomic<std::int64_t> armed_at_ns_{0};
  std::jthread watchdog_;
};

/// Entry point of a rank process: returns the process exit code.
int run_rank_process(const RankConfig& cfg);

/// Paths shared by the harness and rank processes.
std::filesystem::path rank_csv_path(const std::filesystem::path& run_dir, std::uint32_t replica,
                                    std::uint32_t rank, std::uint32_t incarnation);
std::filesystem::path rank_final_path(const std::filesystem::path& run_dir,
                                      std::uint32_t replica, std::uint32_t rank);
std::filesystem::path loader_state_path(const std::filesystem::path& run_dir);
std::filesystem::path checkpoint_root(const std::filesystem::path& run_dir);

}  // namespace paft
