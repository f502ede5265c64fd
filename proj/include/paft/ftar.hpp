// SPDX-License-Identifier: Apache-2.0
#pragma once

// Fault-tolerant ring all-reduce.
//
// A message is cut into partitions of at most S*C*N bytes. Each partition is
// split into N segments and runs one ring round: N-1 ReduceScatter steps then
// N-1 AllGather steps. In every ring step a member sends one segment to its
// right neighbor and receives one from its left, in chunks of at most S bytes,
// never holding more than S*C unacknowledged bytes on a link.
//
// Segment j is reduced along the ring starting at member j:
//   ((x_j + x_{j+1}) + x_{j+2}) + ... + x_{j-1}
// and then copied verbatim to everyone, so all members hold bit-identical
// results for a given membership and plan.

#include <atomic>
#include <cstddef>
#include <cstdint>
#include <functional>
#include <memory>
#include <span>
#include <vector>

#include "paft/error.hpp"
#include "paft/transport.hpp"

namespace paft {

inline constexpr std::size_t kMiB = std::size_t{1} << 20;

struct PipelineConfig {
  std::size_t chunk_bytes = 8 * kMiB;  // S
  std::uint32_t num_chunks = 4;        // C
  Millis per_chunk_timeout{5000};

  std::size_t link_capacity() const noexcept { return chunk_bytes * num_chunks; }
  void validate(std::size_t elem_bytes = sizeof(float)) const;
};

struct RingMember {
  std::uint32_t replica_id = 0;
  Endpoint endpoint;

  bool operator==(const RingMember&) const = default;
};

/// Membership of one ring, in ascending replica_id order.
struct RingGroup {
  std::vector<RingMember> members;
  std::uint32_t generation = 0;

  std::uint32_t size() const noexcept { return static_cast<std::uint32_t>(members.size()); }
  /// Position of `replica_id`, or -1.
  int index_of(std::uint32_t replica_id) const noexcept;
  const RingMember& left_of(std::uint32_t index) const;
  const RingMember& right_of(std::uint32_t index) const;
  std::vector<std::uint32_t> replica_ids() const;

  static RingGroup make(std::vector<RingMember> members, std::uint32_t generation);
};

/// Membership arithmetic of reconfig(): sorted members, generation + 1.
RingGroup next_group(const RingGroup& current, std::vector<RingMember> new_members);

struct Segment {
  std::size_t offset = 0;  // elements, relative to the partition
  std::size_t length = 0;  // elements
};

struct Partition {
  std::size_t offset = 0;  // elements, relative to the message
  std::size_t length = 0;  // elements
  std::vector<Segment> segments;  // N of them, tiling the partition
};

struct PartitionPlan {
  std::size_t message_bytes = 0;
  std::size_t elem_bytes = sizeof(float);
  std::size_t chunk_elems = 0;
  std::uint32_t num_members = 0;
  std::vector<Partition> partitions;

  std::uint32_t ring_steps() const noexcept { return 2 * num_members - 2; }
  std::uint32_t chunks_in(const Segment& s) const noexcept;
  Segment chunk(const Segment& s, std::uint32_t c) const noexcept;
  /// Segment member `index` sends at ring step t: (index - t) mod N.
  std::uint32_t send_segment(std::uint32_t index, std::uint32_t t) const noexcept;
  /// Segment member `index` receives at ring step t: (index - t - 1) mod N.
  std::uint32_t recv_segment(std::uint32_t index, std::uint32_t t) const noexcept;
};

PartitionPlan build_partition_plan(std::size_t message_bytes, const PipelineConfig& cfg,
                                   std::uint32_t num_members,
                                   std::size_t elem_bytes = sizeof(float));

/// Reason -> class; see classify_error in error.hpp. Re-exported for FTAR users.
using paft::classify_error;

struct FtarStats {
  std::size_t max_unacked_bytes = 0;
  std::uint64_t chunks_sent = 0;
  std::uint64_t stale_frames_dropped = 0;
};

/// Called by the send context before each chunk goes out. Used to inject
/// crashes at a precise point of the protocol.
using ChunkSendHook =
    std::function<void(std::uint64_t step, std::uint32_t ring_step, std::uint32_t chunk)>;

struct RingCommOptions {
  std::uint32_t self_replica = 0;
  std::uint32_t rank = 0;
  std::uint32_t incarnation = 0;
  PipelineConfig pipeline;
  Acceptor* acceptor = nullptr;
  KillSwitch* kill_switch = nullptr;
  std::shared_ptr<const FaultTable> faults;
  std::shared_ptr<const FaultClock> clock;
  Millis connect_timeout{5000};
};

/// One member's endpoint of a ring: the connection to its left and right
/// neighbors plus the all-reduce control loop. Not thread-safe; one
/// all-reduce in flight at a time, and reconfig() never overlaps it.
class RingComm {
 public:
  explicit RingComm(RingCommOptions opts);
  ~RingComm();
  RingComm(const RingComm&) = delete;
  RingComm& operator=(const RingComm&) = delete;

  /// Drops stale connections and connects to the new neighbors. Throws a
  /// recoverable Error if a neighbor is unreachable by the deadline.
  void reconfig(RingGroup group);

  /// In-place sum across members. On error the caller's buffer still holds
  /// either its original input or, for partitions that completed, the final
  /// reduced values; the ring must be reconfigured before reuse.
  void all_reduce(std::span<float> buffer, std::uint64_t step);

  const RingGroup& group() const noexcept { return group_; }
  bool ready() const noexcept { return ready_; }
  void close();

  const FtarStats& stats() const noexcept { return stats_; }
  void reset_stats() { stats_ = {}; }
  void set_send_hook(ChunkSendHook hook) { send_hook_ = std::move(hook); }

  /// Test hook: raw access to the outbound data connection.
  Connection* right_connection() noexcept { return right_.get(); }

 private:
  LinkContext link_to(std::uint32_t remote_replica) const;

  RingCommOptions opts_;
  RingGroup group_;
  std::uint32_t index_ = 0;
  bool ready_ = false;
  std::unique_ptr<Connection> left_;
  std::unique_ptr<Connection> right_;
  std::vector<float> work_;
  std::uint64_t seq_ = 0;
  FtarStats stats_;
  ChunkSendHook send_hook_;
};

/// N ring members living in one process, each with its own acceptor and
/// loopback sockets. Used by the benchmark and by tests.
class LoopbackRing {
 public:
  LoopbackRing(std::uint32_t members, PipelineConfig cfg,
               std::shared_ptr<const FaultTable> faults = nullptr);
  ~LoopbackRing();

  std::uint32_t size() const noexcept { return static_cast<std::uint32_t>(comms_.size()); }
  RingComm& comm(std::uint32_t i) { return *comms_[i]; }
  FaultClock& clock(std::uint32_t i) { return *clocks_[i]; }
  KillSwitch& kill_switch(std::uint32_t i) { return *switches_[i]; }
  Acceptor& acceptor(std::uint32_t i) { return *acceptors_[i]; }
  std::vector<RingMember> members() const;

  /// Reconfigures every listed member (by position) to the given membership.
  void reconfig(const std::vector<std::uint32_t>& positions, std::uint32_t generation);

  /// Runs fn(i) on one thread per listed member and waits for all.
  /// Exceptions are captured per member.
  std::vector<std::exception_ptr> run(const std::vector<std::uint32_t>& positions,
                                      const std::function<void(std::uint32_t)>& fn);

 private:
  std::vector<std::unique_ptr<KillSwitch>> switches_;
  std::vector<std::unique_ptr<Acceptor>> acceptors_;
  std::vector<std::shared_ptr<FaultClock>> clocks_;
  std::vector<std::unique_ptr<RingComm>> comms_;
};

struct BenchResult {
  std::uint32_t members = 0;
  std::size_t message_bytes = 0;
  double mean_gbps = 0.0;
  std::vector<double> samples_gbps;
};

/// Algorithm bandwidth (message_bytes / wall time of the slowest member) over
/// `repetitions` all-reduces on a loopback ring.
BenchResult bench_ftar(std::uint32_t members, std::size_t message_bytes,
                       const PipelineConfig& cfg, std::uint32_t repetitions);

}  // namespace paft
