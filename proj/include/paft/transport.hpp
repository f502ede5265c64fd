// SPDX-License-Identifier: Apache-2.0
#pragma once

// Framed, timeout-guarded message exchange over localhost stream sockets, with
// an in-process fault shim standing in for a misbehaving network.

#include <atomic>
#include <chrono>
#include <condition_variable>
#include <cstdint>
#include <functional>
#include <memory>
#include <mutex>
#include <optional>
#include <string>
#include <thread>
#include <unordered_set>
#include <vector>

#include "paft/error.hpp"
#include "paft/wire.hpp"

namespace paft {

using SteadyClock = std::chrono::steady_clock;
using Millis = std::chrono::milliseconds;
using Deadline = SteadyClock::time_point;

inline Deadline deadline_after(Millis d) { return SteadyClock::now() + d; }
Millis remaining(Deadline d);

inline constexpr Millis kDefaultCallTimeout{5000};

struct Endpoint {
  std::string host = "127.0.0.1";
  std::uint16_t port = 0;

  std::string str() const { return host + ":" + std::to_string(port); }
  static Endpoint parse(const std::string& text);
  bool operator==(const Endpoint&) const = default;
};

struct PeerAddress {
  std::uint32_t replica_id = 0;
  std::uint32_t rank_id = 0;
  Endpoint endpoint;
};

// ---- fault injection -------------------------------------------------------

enum class FaultKind { kDropConnection, kDelay, kBlackhole };

inline constexpr std::uint32_t kAnyRank = 0xFFFFFFFFu;

struct FaultRule {
  std::uint32_t replica_id = 0;
  std::uint32_t rank = kAnyRank;  // kAnyRank: every rank of the replica
  FaultKind kind = FaultKind::kDelay;
  std::uint64_t at_step = 0;
  std::uint64_t duration_steps = 1;
  double latency_multiplier = 1.0;
};

std::string_view to_string(FaultKind kind) noexcept;
FaultKind parse_fault_kind(std::string_view name);

/// Both ends of a link, by (replica, rank).
struct LinkEnds {
  std::uint32_t local_replica = 0;
  std::uint32_t local_rank = 0;
  std::uint32_t remote_replica = 0;
  std::uint32_t remote_rank = 0;
};

struct LinkBehavior {
  bool drop = false;
  bool blackhole = false;
  double latency_ms = 0.0;

  bool nominal() const noexcept { return !drop && !blackhole; }
};

/// Current position of the owning rank: the step being attempted and how many
/// times it has been retried. Written by the control context at step
/// boundaries only.
struct FaultClock {
  std::atomic<std::uint64_t> step{0};
  std::atomic<std::uint32_t> attempt{0};
};

/// Immutable rule table. A rule covers the link if either end matches its
/// target, and is active for steps in [at_step, at_step + max(1, duration))
/// on the first attempt of each step only, so a retried attempt always sees
/// a nominal link and the retry can make progress.
class FaultTable {
 public:
  FaultTable() = default;
  FaultTable(std::vector<FaultRule> rules, double base_latency_ms);

  LinkBehavior evaluate(const LinkEnds& link, std::uint64_t step,
                        std::uint32_t attempt) const;
  const std::vector<FaultRule>& rules() const noexcept { return rules_; }
  double base_latency_ms() const noexcept { return base_latency_ms_; }

 private:
  std::vector<FaultRule> rules_;
  double base_latency_ms_ = 0.0;
};

/// Throws ConfigError on invalid fields or contradictory overlapping rules
/// on the same target.
void validate_fault_rules(const std::vector<FaultRule>& rules);

/// apply_fault: effective behavior of a link at a given clock.
LinkBehavior apply_fault(const FaultTable& table, const LinkEnds& link, std::uint64_t step,
                         std::uint32_t attempt = 0);

struct LinkContext {
  std::shared_ptr<const FaultTable> faults;
  std::shared_ptr<const FaultClock> clock;
  LinkEnds ends;

  LinkBehavior behavior() const;
};

// ---- connections -----------------------------------------------------------

class Connection;

/// Shuts down every registered socket at once. Used to emulate a replica
/// dying when its ranks run as threads, and by watchdogs.
class KillSwitch {
 public:
  void trigger();
  bool triggered() const noexcept { return fired_.load(); }
  void add(Connection* c);
  void remove(Connection* c);

 private:
  std::mutex mu_;
  std::unordered_set<Connection*> live_;
  std::atomic<bool> fired_{false};
};

/// One ordered, reliable byte channel carrying wire frames. Owned by a single
/// execution context at a time; send and recv may run on two different
/// contexts concurrently.
class Connection {
 public:
  Connection(int fd, std::string peer, KillSwitch* ks = nullptr);
  ~Connection();
  Connection(const Connection&) = delete;
  Connection& operator=(const Connection&) = delete;

  static std::unique_ptr<Connection> connect(const Endpoint& ep, Deadline deadline,
                                             KillSwitch* ks = nullptr,
                                             const LinkContext* link = nullptr);

  void set_link(LinkContext link) { link_ = std::move(link); has_link_ = true; }

  void send(const wire::Frame& frame, Millis timeout = kDefaultCallTimeout);
  wire::Frame recv(Millis timeout);
  /// Like recv but returns nullopt on timeout instead of throwing, leaving
  /// any partial frame buffered.
  std::optional<wire::Frame> poll_recv(Millis timeout);

  /// Abortive: wakes any blocked call on either side.
  void shutdown() noexcept;
  bool is_open() const noexcept { return !broken_.load(); }
  const std::string& peer() const noexcept { return peer_; }
  int fd() const noexcept { return fd_; }
  std::uint64_t bytes_sent() const noexcept { return bytes_sent_.load(); }

 private:
  [[noreturn]] void fail(Reason reason, const std::string& what);
  void check_link_for_io();
  void write_all(std::span<const std::byte> data, Deadline deadline);

  int fd_ = -1;
  std::string peer_;
  KillSwitch* ks_ = nullptr;
  LinkContext link_;
  bool has_link_ = false;
  wire::FrameDecoder decoder_;
  std::vector<std::byte> send_buf_;
  std::atomic<bool> broken_{false};
  std::atomic<std::uint64_t> bytes_sent_{0};
};

class Listener {
 public:
  explicit Listener(std::uint16_t port, const std::string& host = "127.0.0.1");
  ~Listener();
  Listener(const Listener&) = delete;
  Listener& operator=(const Listener&) = delete;

  std::uint16_t port() const noexcept { return port_; }
  int fd() const noexcept { return fd_; }
  /// Returns an accepted socket fd, or -1 on timeout.
  int accept_fd(Millis timeout);
  void close() noexcept;

 private:
  int fd_ = -1;
  std::uint16_t port_ = 0;
};

/// Picks a currently free localhost TCP port.
std::uint16_t pick_free_port();

/// Accepts connections on one port and routes each by its hello frame.
/// Ring/intra connections wait in a mailbox until claimed; fetch connections
/// go to the registered handler, which runs on its own thread.
class Acceptor {
 public:
  using FetchHandler =
      std::function<void(Connection&, const wire::Hello&, std::stop_token)>;

  explicit Acceptor(std::uint16_t port, KillSwitch* ks = nullptr);
  ~Acceptor();
  Acceptor(const Acceptor&) = delete;
  Acceptor& operator=(const Acceptor&) = delete;

  std::uint16_t port() const noexcept { return listener_.port(); }
  void set_fetch_handler(FetchHandler handler);

  /// Claims a connection from `from_replica`/`from_rank` with the given
  /// purpose and generation. Older generations for the same purpose and rank
  /// are discarded. Throws Error(kTimeout) at the deadline.
  std::unique_ptr<Connection> take(wire::Purpose purpose, std::uint32_t from_replica,
                                   std::uint32_t from_rank, std::uint32_t generation,
                                   Deadline deadline);
  void stop();

 private:
  struct Pending {
    wire::Hello hello;
    std::unique_ptr<Connection> conn;
  };
  void loop(std::stop_token st);
  void serve_fetch(std::unique_ptr<Connection> conn, wire::Hello hello);

  Listener listener_;
  KillSwitch* ks_;
  std::mutex mu_;
  std::condition_variable cv_;
  std::vector<Pending> pending_;
  FetchHandler fetch_handler_;
  struct Server {
    std::shared_ptr<std::atomic<bool>> done;
    std::jthread thread;
  };
  std::mutex servers_mu_;
  std::vector<Server> servers_;
  std::atomic<bool> stopping_{false};
  std::jthread thread_;
};

/// Connects and sends the hello frame in one go.
std::unique_ptr<Connection> dial(const Endpoint& ep, const wire::Hello& hello, Deadline deadline,
                                 KillSwitch* ks = nullptr, const LinkContext* link = nullptr);

}  // namespace paft
