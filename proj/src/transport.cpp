// SPDX-License-Identifier: Apache-2.0
#include "paft/transport.hpp"

#include <arpa/inet.h>
#include <fcntl.h>
#include <netinet/in.h>
#include <netinet/tcp.h>
#include <poll.h>
#include <sys/socket.h>
#include <unistd.h>

#include <algorithm>
#include <cerrno>
#include <cstring>

namespace paft {

namespace {

constexpr Millis kPollSlice{50};

void set_nonblocking(int fd) {
  const int flags = ::fcntl(fd, F_GETFL, 0);
  ::fcntl(fd, F_SETFL, flags | O_NONBLOCK);
}

void tune_socket(int fd) {
  int one = 1;
  ::setsockopt(fd, IPPROTO_TCP, TCP_NODELAY, &one, sizeof(one));
  set_nonblocking(fd);
}

int poll_ms(Millis d) {
  return static_cast<int>(std::clamp<long long>(d.count(), 0, 1'000'000));
}

sockaddr_in make_addr(const std::string& host, std::uint16_t port) {
  sockaddr_in addr{};
  addr.sin_family = AF_INET;
  addr.sin_port = htons(port);
  if (::inet_pton(AF_INET, host == "localhost" ? "127.0.0.1" : host.c_str(),
                  &addr.sin_addr) != 1) {
    throw ConfigError("cannot resolve endpoint host " + host);
  }
  return addr;
}

bool rules_overlap(const FaultRule& a, const FaultRule& b) {
  if (a.replica_id != b.replica_id) return false;
  if (a.rank != b.rank && a.rank != kAnyRank && b.rank != kAnyRank) return false;
  const auto a_end = a.at_step + std::max<std::uint64_t>(1, a.duration_steps);
  const auto b_end = b.at_step + std::max<std::uint64_t>(1, b.duration_steps);
  return a.at_step < b_end && b.at_step < a_end;
}

bool rule_covers(const FaultRule& r, std::uint32_t replica, std::uint32_t rank) {
  return r.replica_id == replica && (r.rank == kAnyRank || r.rank == rank);
}

}  // namespace

Millis remaining(Deadline d) {
  const auto left = d - SteadyClock::now();
  if (left <= SteadyClock::duration::zero()) return Millis{0};
  return std::chrono::ceil<Millis>(left);
}

Endpoint Endpoint::parse(const std::string& text) {
  const auto colon = text.rfind(':');
  if (colon == std::string::npos) throw ConfigError("endpoint needs host:port: " + text);
  Endpoint ep;
  ep.host = text.substr(0, colon);
  const int port = std::stoi(text.substr(colon + 1));
  if (port <= 0 || port > 65535) throw ConfigError("bad port in endpoint " + text);
  ep.port = static_cast<std::uint16_t>(port);
  return ep;
}

// ---- faults ----------------------------------------------------------------

std::string_view to_string(FaultKind kind) noexcept {
  switch (kind) {
    case FaultKind::kDropConnection: return "drop_connection";
    case FaultKind::kDelay: return "delay";
    case FaultKind::kBlackhole: return "blackhole";
  }
  return "delay";
}

FaultKind parse_fault_kind(std::string_view name) {
  if (name == "drop_connection") return FaultKind::kDropConnection;
  if (name == "delay") return FaultKind::kDelay;
  if (name == "blackhole") return FaultKind::kBlackhole;
  throw ConfigError("unknown fault kind: " + std::string(name));
}

void validate_fault_rules(const std::vector<FaultRule>& rules) {
  for (const auto& r : rules) {
    if (!(r.latency_multiplier >= 1.0)) {
      throw ConfigError("fault rule latency_multiplier must be >= 1");
    }
  }
  for (std::size_t i = 0; i < rules.size(); ++i) {
    for (std::size_t j = i + 1; j < rules.size(); ++j) {
      const auto& a = rules[i];
      const auto& b = rules[j];
      if (!rules_overlap(a, b)) continue;
      const bool same = a.kind == b.kind && a.latency_multiplier == b.latency_multiplier;
      if (!same) {
        throw ConfigError("contradictory fault rules overlap on replica " +
                          std::to_string(a.replica_id) + " (" + std::string(to_string(a.kind)) +
                          " vs " + std::string(to_string(b.kind)) + ")");
      }
    }
  }
}

FaultTable::FaultTable(std::vector<FaultRule> rules, double base_latency_ms)
    : rules_(std::move(rules)), base_latency_ms_(base_latency_ms) {
  validate_fault_rules(rules_);
  if (base_latency_ms_ < 0) throw ConfigError("base link latency must be >= 0");
}

LinkBehavior FaultTable::evaluate(const LinkEnds& link, std::uint64_t step,
                                  std::uint32_t attempt) const {
  LinkBehavior b;
  b.latency_ms = base_latency_ms_;
  if (attempt != 0) return b;
  for (const auto& r : rules_) {
    const auto end = r.at_step + std::max<std::uint64_t>(1, r.duration_steps);
    if (step < r.at_step || step >= end) continue;
    if (!rule_covers(r, link.local_replica, link.local_rank) &&
        !rule_covers(r, link.remote_replica, link.remote_rank)) {
      continue;
    }
    switch (r.kind) {
      case FaultKind::kDropConnection: b.drop = true; break;
      case FaultKind::kBlackhole: b.blackhole = true; break;
      case FaultKind::kDelay:
        b.latency_ms = std::max(b.latency_ms, base_latency_ms_ * r.latency_multiplier);
        break;
    }
  }
  return b;
}

LinkBehavior apply_fault(const FaultTable& table, const LinkEnds& link, std::uint64_t step,
                         std::uint32_t attempt) {
  return table.evaluate(link, step, attempt);
}

LinkBehavior LinkContext::behavior() const {
  if (!faults || !clock) return {};
  return faults->evaluate(ends, clock->step.load(), clock->attempt.load());
}

// ---- kill switch -----------------------------------------------------------

void KillSwitch::trigger() {
  fired_.store(true);
  std::lock_guard lk(mu_);
  for (Connection* c : live_) c->shutdown();
}

void KillSwitch::add(Connection* c) {
  std::lock_guard lk(mu_);
  live_.insert(c);
  if (fired_.load()) c->shutdown();
}

void KillSwitch::remove(Connection* c) {
  std::lock_guard lk(mu_);
  live_.erase(c);
}

// ---- connection ------------------------------------------------------------

Connection::Connection(int fd, std::string peer, KillSwitch* ks)
    : fd_(fd), peer_(std::move(peer)), ks_(ks) {
  tune_socket(fd_);
  if (ks_ != nullptr) ks_->add(this);
}

Connection::~Connection() {
  if (ks_ != nullptr) ks_->remove(this);
  if (fd_ >= 0) ::close(fd_);
}

void Connection::shutdown() noexcept {
  broken_.store(true);
  if (fd_ >= 0) ::shutdown(fd_, SHUT_RDWR);
}

void Connection::fail(Reason reason, const std::string& what) {
  shutdown();
  throw Error(reason, what + " [" + peer_ + "]");
}

void Connection::check_link_for_io() {
  if (!has_link_) return;
  if (link_.behavior().drop) fail(Reason::kPeerReset, "connection dropped by fault rule");
}

std::unique_ptr<Connection> Connection::connect(const Endpoint& ep, Deadline deadline,
                                                KillSwitch* ks, const LinkContext* link) {
  if (link != nullptr) {
    const auto b = link->behavior();
    if (b.blackhole) {
      while (SteadyClock::now() < deadline && !(ks && ks->triggered())) {
        std::this_thread::sleep_for(std::min(remaining(deadline), kPollSlice));
      }
      throw Error(Reason::kTimeout, "connect_timeout to blackholed " + ep.str());
    }
    if (b.drop) throw Error(Reason::kPeerDown, "connect refused by fault rule " + ep.str());
  }
  const sockaddr_in addr = make_addr(ep.host, ep.port);
  bool refused = false;
  while (true) {
    if (ks != nullptr && ks->triggered()) throw Error(Reason::kPeerReset, "killed");
    const int fd = ::socket(AF_INET, SOCK_STREAM | SOCK_CLOEXEC, 0);
    if (fd < 0) throw Error(Reason::kInternalInvariant, "socket(): " + std::string(strerror(errno)));
    set_nonblocking(fd);
    int rc = ::connect(fd, reinterpret_cast<const sockaddr*>(&addr), sizeof(addr));
    if (rc != 0 && errno == EINPROGRESS) {
      pollfd p{fd, POLLOUT, 0};
      rc = ::poll(&p, 1, poll_ms(std::min(remaining(deadline), Millis{500})));
      if (rc == 1) {
        int err = 0;
        socklen_t len = sizeof(err);
        ::getsockopt(fd, SOL_SOCKET, SO_ERROR, &err, &len);
        rc = err == 0 ? 0 : -1;
        errno = err;
      } else {
        rc = -1;
        errno = ETIMEDOUT;
      }
    }
    if (rc == 0) {
      auto conn = std::make_unique<Connection>(fd, ep.str(), ks);
      if (link != nullptr) conn->set_link(*link);
      return conn;
    }
    refused = refused || errno == ECONNREFUSED;
    ::close(fd);
    if (SteadyClock::now() >= deadline) {
      if (refused) throw Error(Reason::kPeerDown, "connection refused by " + ep.str());
      throw Error(Reason::kTimeout, "connect_timeout to " + ep.str());
    }
    std::this_thread::sleep_for(std::min(remaining(deadline), Millis{10}));
  }
}

void Connection::write_all(std::span<const std::byte> data, Deadline deadline) {
  std::size_t off = 0;
  while (off < data.size()) {
    if (broken_.load()) fail(Reason::kPeerReset, "connection closed");
    const ssize_t n = ::send(fd_, data.data() + off, data.size() - off, MSG_NOSIGNAL);
    if (n > 0) {
      off += static_cast<std::size_t>(n);
      continue;
    }
    if (n < 0 && (errno == EAGAIN || errno == EWOULDBLOCK)) {
      const Millis left = remaining(deadline);
      if (left.count() == 0) fail(Reason::kTimeout, "send timeout");
      pollfd p{fd_, POLLOUT, 0};
      ::poll(&p, 1, poll_ms(std::min(left, kPollSlice)));
      continue;
    }
    if (n < 0 && errno == EINTR) continue;
    fail(Reason::kPeerReset, std::string("send failed: ") + strerror(errno));
  }
  bytes_sent_.fetch_add(data.size());
}

void Connection::send(const wire::Frame& frame, Millis timeout) {
  if (broken_.load()) fail(Reason::kPeerReset, "connection closed");
  check_link_for_io();
  LinkBehavior b;
  if (has_link_) b = link_.behavior();
  if (b.latency_ms > 0.0) {
    std::this_thread::sleep_for(std::chrono::duration<double, std::milli>(b.latency_ms));
  }
  if (b.blackhole) return;
  send_buf_.clear();
  wire::encode_frame_into(frame, send_buf_);
  write_all(send_buf_, deadline_after(timeout));
}

std::optional<wire::Frame> Connection::poll_recv(Millis timeout) {
  const Deadline deadline = deadline_after(timeout);
  std::byte buf[64 * 1024];
  while (true) {
    if (auto f = decoder_.next()) {
      check_link_for_io();
      return f;
    }
    if (broken_.load()) fail(Reason::kPeerReset, "connection closed");
    check_link_for_io();
    const ssize_t n = ::recv(fd_, buf, sizeof(buf), 0);
    if (n > 0) {
      try {
        decoder_.feed(std::span(buf, static_cast<std::size_t>(n)));
      } catch (const Error& e) {
        fail(e.reason(), e.what());
      }
      // Surface decoder errors (bad tag / length) immediately.
      try {
        if (auto f = decoder_.next()) {
          check_link_for_io();
          return f;
        }
      } catch (const Error& e) {
        fail(e.reason(), e.what());
      }
      continue;
    }
    if (n == 0) fail(Reason::kPeerReset, "connection reset by peer");
    if (errno == EINTR) continue;
    if (errno != EAGAIN && errno != EWOULDBLOCK) {
      fail(Reason::kPeerReset, std::string("recv failed: ") + strerror(errno));
    }
    const Millis left = remaining(deadline);
    if (left.count() == 0) return std::nullopt;
    pollfd p{fd_, POLLIN, 0};
    ::poll(&p, 1, poll_ms(std::min(left, kPollSlice)));
  }
}

wire::Frame Connection::recv(Millis timeout) {
  auto f = poll_recv(timeout);
  if (!f) {
    throw Error(Reason::kTimeout, "recv_timeout after " + std::to_string(timeout.count()) +
                                      " ms [" + peer_ + "]");
  }
  return std::move(*f);
}

// ---- listener --------------------------------------------------------------

Listener::Listener(std::uint16_t port, const std::string& host) {
  fd_ = ::socket(AF_INET, SOCK_STREAM | SOCK_CLOEXEC, 0);
  if (fd_ < 0) throw Error(Reason::kInternalInvariant, "socket() failed");
  int one = 1;
  ::setsockopt(fd_, SOL_SOCKET, SO_REUSEADDR, &one, sizeof(one));
  const sockaddr_in addr = make_addr(host, port);
  if (::bind(fd_, reinterpret_cast<const sockaddr*>(&addr), sizeof(addr)) != 0) {
    const std::string msg = strerror(errno);
    ::close(fd_);
    throw Error(Reason::kPeerDown, "bind " + host + ":" + std::to_string(port) + ": " + msg);
  }
  if (::listen(fd_, 1024) != 0) {
    ::close(fd_);
    throw Error(Reason::kInternalInvariant, "listen failed");
  }
  sockaddr_in bound{};
  socklen_t len = sizeof(bound);
  ::getsockname(fd_, reinterpret_cast<sockaddr*>(&bound), &len);
  port_ = ntohs(bound.sin_port);
  set_nonblocking(fd_);
}

Listener::~Listener() {
  if (fd_ >= 0) ::close(fd_);
}

void Listener::close() noexcept {
  if (fd_ >= 0) ::close(fd_);
  fd_ = -1;
}

int Listener::accept_fd(Millis timeout) {
  if (fd_ < 0) {
    std::this_thread::sleep_for(timeout);
    return -1;
  }
  pollfd p{fd_, POLLIN, 0};
  if (::poll(&p, 1, poll_ms(timeout)) != 1) return -1;
  const int fd = ::accept4(fd_, nullptr, nullptr, SOCK_CLOEXEC);
  return fd;
}

std::uint16_t pick_free_port() {
  Listener l(0);
  return l.port();
}

// ---- acceptor --------------------------------------------------------------

Acceptor::Acceptor(std::uint16_t port, KillSwitch* ks)
    : listener_(port), ks_(ks), thread_([this](std::stop_token st) { loop(st); }) {}

Acceptor::~Acceptor() { stop(); }

void Acceptor::stop() {
  if (stopping_.exchange(true)) return;
  thread_.request_stop();
  if (thread_.joinable()) thread_.join();
  listener_.close();
  std::vector<Server> servers;
  {
    std::lock_guard lk(servers_mu_);
    servers.swap(servers_);
  }
  for (auto& s : servers) s.thread.request_stop();
  servers.clear();
  std::lock_guard lk(mu_);
  pending_.clear();
  cv_.notify_all();
}

void Acceptor::set_fetch_handler(FetchHandler handler) {
  std::lock_guard lk(mu_);
  fetch_handler_ = std::move(handler);
}

void Acceptor::loop(std::stop_token st) {
  while (!st.stop_requested()) {
    if (ks_ != nullptr && ks_->triggered()) {
      listener_.close();
      return;
    }
    const int fd = listener_.accept_fd(kPollSlice);
    if (fd < 0) continue;
    auto conn = std::make_unique<Connection>(fd, "inbound", ks_);
    wire::Hello hello;
    try {
      auto f = conn->recv(Millis{2000});
      if (f.type != wire::MsgType::kHeartbeat) continue;
      hello = wire::decode_hello(f.payload);
    } catch (const Error&) {
      continue;
    }
    if (hello.purpose == wire::Purpose::kFetch) {
      serve_fetch(std::move(conn), hello);
      continue;
    }
    std::lock_guard lk(mu_);
    pending_.push_back({hello, std::move(conn)});
    cv_.notify_all();
  }
}

void Acceptor::serve_fetch(std::unique_ptr<Connection> conn, wire::Hello hello) {
  FetchHandler handler;
  {
    std::lock_guard lk(mu_);
    handler = fetch_handler_;
  }
  if (!handler) return;
  std::lock_guard lk(servers_mu_);
  std::erase_if(servers_, [](const Server& s) { return s.done->load(); });
  auto done = std::make_shared<std::atomic<bool>>(false);
  servers_.push_back(
      {done, std::jthread([handler, hello, done,
                           c = std::shared_ptr<Connection>(std::move(conn))](std::stop_token st) {
         try {
           handler(*c, hello, st);
         } catch (const std::exception&) {
         }
         done->store(true);
       })});
}

std::unique_ptr<Connection> Acceptor::take(wire::Purpose purpose, std::uint32_t from_replica,
                                           std::uint32_t from_rank, std::uint32_t generation,
                                           Deadline deadline) {
  std::unique_lock lk(mu_);
  while (true) {
    if (ks_ != nullptr && ks_->triggered()) throw Error(Reason::kPeerReset, "killed");
    if (stopping_.load()) throw Error(Reason::kPeerReset, "acceptor stopped");
    // Stale generations for this slot can never be claimed.
    std::erase_if(pending_, [&](const Pending& p) {
      return p.hello.purpose == purpose && p.hello.rank == from_rank &&
             p.hello.replica_id == from_replica && p.hello.generation < generation;
    });
    for (auto it = pending_.begin(); it != pending_.end(); ++it) {
      const auto& h = it->hello;
      if (h.purpose == purpose && h.replica_id == from_replica && h.rank == from_rank &&
          h.generation == generation) {
        auto c = std::move(it->conn);
        pending_.erase(it);
        return c;
      }
    }
    if (SteadyClock::now() >= deadline) {
      throw Error(Reason::kTimeout, "no inbound connection from replica " +
                                        std::to_string(from_replica) + " rank " +
                                        std::to_string(from_rank) + " generation " +
                                        std::to_string(generation));
    }
    cv_.wait_until(lk, std::min(deadline, SteadyClock::now() + kPollSlice));
  }
}

std::unique_ptr<Connection> dial(const Endpoint& ep, const wire::Hello& hello, Deadline deadline,
                                 KillSwitch* ks, const LinkContext* link) {
  auto conn = Connection::connect(ep, deadline, ks, link);
  wire::Frame f;
  f.type = wire::MsgType::kHeartbeat;
  f.payload = wire::encode_hello(hello);
  conn->send(f, std::max(remaining(deadline), Millis{100}));
  return conn;
}

}  // namespace paft
