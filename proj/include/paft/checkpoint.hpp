// SPDX-License-Identifier: Apache-2.0
#pragma once

// Replica state at rest and in flight: persistent checkpoints, the per-step
// loader_state ledger, and the in-memory snapshot each rank serves to
// recovering peers.

#include <cstdint>
#include <filesystem>
#include <map>
#include <memory>
#include <mutex>
#include <optional>
#include <span>
#include <stdexcept>
#include <string>
#include <thread>
#include <vector>

#include "paft/transport.hpp"

namespace paft {

/// Missing or corrupt persistent state.
class CheckpointError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// One rank's slice of the replica state after committing `step`.
struct ShardState {
  std::uint64_t step = 0;
  std::uint32_t rank = 0;
  std::uint64_t offset = 0;  // into the flat parameter vector
  std::uint64_t step_count = 0;
  std::vector<float> params;
  std::vector<float> momentum;

  bool operator==(const ShardState&) const = default;
};

std::vector<std::byte> serialize_shard(const ShardState& s);
/// Throws CheckpointError on a bad magic, size, or checksum.
ShardState deserialize_shard(std::span<const std::byte> bytes);
std::uint64_t shard_hash(const ShardState& s) noexcept;

struct Checkpoint {
  std::uint64_t step = 0;
  std::uint64_t param_count = 0;
  std::vector<ShardState> shards;  // indexed by rank, tiling the parameters

  bool operator==(const Checkpoint&) const = default;
};

inline constexpr std::uint32_t kCheckpointVersion = 1;

bool is_checkpoint_step(std::uint64_t step, std::uint64_t interval) noexcept;
std::filesystem::path checkpoint_dir(const std::filesystem::path& root, std::uint64_t step);

/// Writes shard files and a manifest into a temporary directory, then renames
/// it into place.
void write_checkpoint(const std::filesystem::path& root, const Checkpoint& ckpt);
/// Steps of every complete checkpoint under root, ascending.
std::vector<std::uint64_t> list_checkpoints(const std::filesystem::path& root);
/// Reads the given step, or the latest when nullopt. Throws CheckpointError.
Checkpoint read_checkpoint(const std::filesystem::path& root,
                           std::optional<std::uint64_t> step = std::nullopt);

/// Runs one checkpoint write at a time off the caller's thread.
class CheckpointWriter {
 public:
  ~CheckpointWriter() { wait(); }
  void submit(std::filesystem::path root, Checkpoint ckpt);
  void wait();
  /// Message of the last failed write, if any. Cleared by the next success.
  std::optional<std::string> last_error() const;

 private:
  mutable std::mutex mu_;
  std::optional<std::string> error_;
  std::jthread worker_;
};

// ---- loader_state ----------------------------------------------------------

struct LoaderStateRecord {
  std::uint64_t step = 0;
  std::uint32_t replica_id = 0;
  std::uint64_t cursor = 0;  // cursor after committing `step`

  bool operator==(const LoaderStateRecord&) const = default;
};

std::string format_record(const LoaderStateRecord& r);

/// Append-only text ledger of "step,replica_id,cursor" lines shared by every
/// replica. A torn final line is ignored on read.
class LoaderStateLog {
 public:
  explicit LoaderStateLog(std::filesystem::path path) : path_(std::move(path)) {}

  void append(const LoaderStateRecord& r) const;
  std::vector<LoaderStateRecord> read() const;
  /// Latest record per replica, optionally restricted to step <= max_step.
  std::map<std::uint32_t, LoaderStateRecord> latest(
      std::optional<std::uint64_t> max_step = std::nullopt) const;
  /// Drops records after `step`.
  void truncate_after(std::uint64_t step) const;
  const std::filesystem::path& path() const noexcept { return path_; }

 private:
  std::filesystem::path path_;
};

// ---- snapshots and peer fetch ---------------------------------------------

/// Holds the serialized shard of the latest committed step. Published by the
/// control context, read by fetch servers.
class SnapshotStore {
 public:
  void publish(const ShardState& s);
  /// Throws Error(kFetchTooOld) unless `step` is the retained one.
  std::shared_ptr<const std::vector<std::byte>> get(std::uint64_t step) const;
  std::optional<std::uint64_t> latest_step() const;

 private:
  mutable std::mutex mu_;
  std::optional<std::uint64_t> step_;
  std::shared_ptr<const std::vector<std::byte>> bytes_;
};

/// Serves FETCH_STATE_REQ frames from a store until the peer disconnects.
Acceptor::FetchHandler make_fetch_handler(std::shared_ptr<const SnapshotStore> store);

struct FetchDonor {
  std::uint32_t replica_id = 0;
  Endpoint endpoint;  // the donor rank's acceptor
};

struct FetchSpec {
  std::uint32_t self_replica = 0;
  std::uint32_t incarnation = 0;
  std::uint32_t rank = 0;
  std::uint64_t step = 0;
  std::vector<FetchDonor> donors;  // healthy replicas in ascending id order
  Deadline deadline{};
  KillSwitch* kill_switch = nullptr;
  Millis per_donor_timeout{2000};
};

struct FetchOutcome {
  ShardState shard;
  std::uint32_t donor = 0;
  std::uint32_t attempts = 0;
  Millis elapsed{0};
};

/// Index of the first donor rank r asks: r mod |donors|.
std::size_t first_donor(std::uint32_t rank, std::size_t donors);

/// Fetches this rank's shard for `step`, starting at donor r mod |donors| and
/// moving round-robin on failure. Throws the last Error if every donor fails
/// or the deadline passes.
FetchOutcome fetch_state_p2p(const FetchSpec& spec);

}  // namespace paft
