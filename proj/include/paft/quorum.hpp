// SPDX-License-Identifier: Apache-2.0
#pragma once

// Per-step membership agreement. Each replica leader reports the next step it
// wants to run; once every live replica has reported (or the round deadline
// passes) the coordinator publishes one decision to all reporters of the
// round: the healthy set at the maximum step, and the replicas behind it.

#include <cstdint>
#include <map>
#include <memory>
#include <mutex>
#include <optional>
#include <span>
#include <thread>
#include <utility>
#include <vector>

#include "paft/transport.hpp"

namespace paft {

struct QuorumReport {
  std::uint64_t epoch = 0;
  std::uint64_t next_step = 0;
  std::uint32_t replica_id = 0;
  std::uint32_t incarnation = 0;

  bool operator==(const QuorumReport&) const = default;
};

struct QuorumDecision {
  std::uint64_t epoch = 0;
  std::uint64_t target_step = 0;
  std::uint32_t generation = 0;
  std::vector<std::uint32_t> healthy;                            // ascending
  std::vector<std::pair<std::uint32_t, std::uint64_t>> behind;  // ascending by id

  bool is_healthy(std::uint32_t replica) const noexcept;
  bool is_behind(std::uint32_t replica) const noexcept;
  /// healthy plus behind, ascending. These are the FTAR ring members.
  std::vector<std::uint32_t> participants() const;

  bool operator==(const QuorumDecision&) const = default;
};

std::vector<std::byte> encode_report(const QuorumReport& r);
QuorumReport decode_report(std::span<const std::byte> payload);
std::vector<std::byte> encode_decision(const QuorumDecision& d);
QuorumDecision decode_decision(std::span<const std::byte> payload);

/// Pure decision rule over the reports received in one round. The ring
/// generation is carried over from `previous` only when the participant set
/// is unchanged and everyone advanced by exactly one step; otherwise it is
/// bumped so rings are rebuilt.
QuorumDecision decide(std::uint64_t epoch, std::span<const QuorumReport> reports,
                      const QuorumDecision* previous);

/// join_step for a replica that may rejoin as soon as it checks in.
inline constexpr std::uint64_t kJoinWhenReady = ~std::uint64_t{0};

struct CoordinatorOptions {
  std::uint16_t port = 0;
  Millis report_deadline{2000};
  /// How long a round at or past a rejoining replica's join step waits for
  /// that replica to check in.
  Millis join_hold{30000};
};

/// The membership service. A single event loop owns every connection and all
/// round state; the public methods only post registrations.
class Coordinator {
 public:
  explicit Coordinator(CoordinatorOptions opts = {});
  ~Coordinator();
  Coordinator(const Coordinator&) = delete;
  Coordinator& operator=(const Coordinator&) = delete;

  Endpoint endpoint() const { return Endpoint{"127.0.0.1", listener_.port()}; }

  /// Admits `incarnation` of a replica. Reports from any other incarnation
  /// are dropped. A nonzero join_step holds the replica's reports back until
  /// a round targets at least that step.
  void expect(std::uint32_t replica, std::uint32_t incarnation, std::uint64_t join_step = 0);
  /// The replica stops counting toward round completion.
  void mark_dead(std::uint32_t replica);
  void stop();

  std::vector<QuorumDecision> history() const;
  std::uint64_t rejected_reports() const;

 private:
  struct Slot {
    std::uint32_t incarnation = 0;
    std::uint64_t join_step = 0;
    bool alive = false;
  };
  struct Client {
    std::unique_ptr<Connection> conn;
    bool identified = false;
    std::uint32_t replica = 0;
    std::uint32_t incarnation = 0;
  };
  struct Pending {
    QuorumReport report;
    Connection* conn = nullptr;
  };

  void loop(std::stop_token st);
  void on_frame(Client& c, const wire::Frame& f);
  void maybe_close_round();

  CoordinatorOptions opts_;
  Listener listener_;
  mutable std::mutex mu_;
  std::map<std::uint32_t, Slot> slots_;
  std::map<std::uint32_t, Pending> pending_;
  std::vector<Client> clients_;  // event loop only
  std::optional<Deadline> round_opened_;
  std::optional<QuorumDecision> last_;
  std::vector<QuorumDecision> history_;
  std::uint64_t epoch_ = 0;
  std::uint64_t rejected_ = 0;
  std::jthread thread_;
};

/// Replica-side handle used by a leader. Blocking, with a timeout.
class QuorumClient {
 public:
  QuorumClient(Endpoint coordinator, std::uint32_t replica, std::uint32_t incarnation,
               KillSwitch* ks = nullptr);

  /// Throws Error(kTimeout / kPeerDown / kPeerReset) if no decision arrives.
  QuorumDecision report_and_decide(const QuorumReport& report, Millis timeout);

 private:
  void ensure_connected(Deadline deadline);

  Endpoint coordinator_;
  std::uint32_t replica_;
  std::uint32_t incarnation_;
  KillSwitch* ks_;
  std::unique_ptr<Connection> conn_;
};

struct QuorumLatency {
  std::uint32_t replicas = 0;
  std::uint32_t rounds = 0;
  double p50_ms = 0.0;
  double p99_ms = 0.0;
  double max_ms = 0.0;
};

/// Drives the real coordinator with `replicas` mock reporters living in one
/// thread. `report_latency` is added between a decision and the next report.
QuorumLatency emulate_quorum(std::uint32_t replicas, std::uint32_t rounds = 20,
                             Millis report_latency = Millis{0});

}  // namespace paft
