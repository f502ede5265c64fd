// SPDX-License-Identifier: Apache-2.0
#include "paft/quorum.hpp"

#include <poll.h>

#include <algorithm>

#include "paft/wire.hpp"

namespace paft {

bool QuorumDecision::is_healthy(std::uint32_t replica) const noexcept {
  return std::binary_search(healthy.begin(), healthy.end(), replica);
}

bool QuorumDecision::is_behind(std::uint32_t replica) const noexcept {
  return std::any_of(behind.begin(), behind.end(),
                     [&](const auto& b) { return b.first == replica; });
}

std::vector<std::uint32_t> QuorumDecision::participants() const {
  std::vector<std::uint32_t> out = healthy;
  for (const auto& b : behind) out.push_back(b.first);
  std::sort(out.begin(), out.end());
  return out;
}

std::vector<std::byte> encode_report(const QuorumReport& r) {
  wire::ByteWriter w(24);
  w.u64(r.epoch);
  w.u64(r.next_step);
  w.u32(r.replica_id);
  w.u32(r.incarnation);
  return w.take();
}

QuorumReport decode_report(std::span<const std::byte> payload) {
  wire::ByteReader r(payload);
  QuorumReport q;
  q.epoch = r.u64();
  q.next_step = r.u64();
  q.replica_id = r.u32();
  q.incarnation = r.u32();
  r.expect_end();
  return q;
}

std::vector<std::byte> encode_decision(const QuorumDecision& d) {
  wire::ByteWriter w(32 + 4 * d.healthy.size() + 12 * d.behind.size());
  w.u64(d.epoch);
  w.u64(d.target_step);
  w.u32(d.generation);
  w.u32(static_cast<std::uint32_t>(d.healthy.size()));
  for (auto id : d.healthy) w.u32(id);
  w.u32(static_cast<std::uint32_t>(d.behind.size()));
  for (const auto& [id, step] : d.behind) {
    w.u32(id);
    w.u64(step);
  }
  return w.take();
}

QuorumDecision decode_decision(std::span<const std::byte> payload) {
  wire::ByteReader r(payload);
  QuorumDecision d;
  d.epoch = r.u64();
  d.target_step = r.u64();
  d.generation = r.u32();
  const std::uint32_t h = r.u32();
  if (h > r.remaining() / 4) throw Error(Reason::kProtocolViolation, "bad healthy_count");
  for (std::uint32_t i = 0; i < h; ++i) d.healthy.push_back(r.u32());
  const std::uint32_t b = r.u32();
  if (b > r.remaining() / 12) throw Error(Reason::kProtocolViolation, "bad behind_count");
  for (std::uint32_t i = 0; i < b; ++i) {
    const auto id = r.u32();
    d.behind.emplace_back(id, r.u64());
  }
  r.expect_end();
  return d;
}

QuorumDecision decide(std::uint64_t epoch, std::span<const QuorumReport> reports,
                      const QuorumDecision* previous) {
  if (reports.empty()) throw ConfigError("a quorum decision needs at least one report");
  QuorumDecision d;
  d.epoch = epoch;
  for (const auto& r : reports) d.target_step = std::max(d.target_step, r.next_step);
  for (const auto& r : reports) {
    if (r.next_step == d.target_step) {
      d.healthy.push_back(r.replica_id);
    } else {
      d.behind.emplace_back(r.replica_id, r.next_step);
    }
  }
  std::sort(d.healthy.begin(), d.healthy.end());
  d.healthy.erase(std::unique(d.healthy.begin(), d.healthy.end()), d.healthy.end());
  std::sort(d.behind.begin(), d.behind.end());

  if (previous == nullptr) {
    d.generation = 1;
    return d;
  }
  const bool same_members = d.participants() == previous->participants();
  const bool all_advanced = std::all_of(reports.begin(), reports.end(), [&](const auto& r) {
    return r.next_step == previous->target_step + 1;
  });
  d.generation = same_members && all_advanced ? previous->generation
                                              : previous->generation + 1;
  return d;
}

// ---- coordinator -----------------------------------------------------------

Coordinator::Coordinator(CoordinatorOptions opts)
    : opts_(opts), listener_(opts.port), thread_([this](std::stop_token st) { loop(st); }) {}

Coordinator::~Coordinator() { stop(); }

void Coordinator::stop() {
  thread_.request_stop();
  if (thread_.joinable()) thread_.join();
}

void Coordinator::expect(std::uint32_t replica, std::uint32_t incarnation,
                         std::uint64_t join_step) {
  std::lock_guard lk(mu_);
  slots_[replica] = Slot{incarnation, join_step, true};
  pending_.erase(replica);
}

void Coordinator::mark_dead(std::uint32_t replica) {
  std::lock_guard lk(mu_);
  auto it = slots_.find(replica);
  if (it != slots_.end()) it->second.alive = false;
  pending_.erase(replica);
}

std::vector<QuorumDecision> Coordinator::history() const {
  std::lock_guard lk(mu_);
  return history_;
}

std::uint64_t Coordinator::rejected_reports() const {
  std::lock_guard lk(mu_);
  return rejected_;
}

void Coordinator::on_frame(Client& c, const wire::Frame& f) {
  if (f.type == wire::MsgType::kHeartbeat) {
    const auto hello = wire::decode_hello(f.payload);
    if (hello.purpose != wire::Purpose::kQuorum) {
      throw Error(Reason::kProtocolViolation, "not a quorum client");
    }
    c.identified = true;
    c.replica = hello.replica_id;
    c.incarnation = hello.incarnation;
    return;
  }
  if (f.type != wire::MsgType::kQuorumReport || !c.identified) {
    throw Error(Reason::kProtocolViolation, "unexpected frame at coordinator");
  }
  const auto report = decode_report(f.payload);
  std::lock_guard lk(mu_);
  auto it = slots_.find(report.replica_id);
  if (report.replica_id != c.replica || report.incarnation != c.incarnation ||
      it == slots_.end() || !it->second.alive ||
      it->second.incarnation != report.incarnation) {
    ++rejected_;
    throw Error(Reason::kProtocolViolation, "stale or unknown reporter");
  }
  pending_[report.replica_id] = Pending{report, c.conn.get()};
}

void Coordinator::maybe_close_round() {
  std::lock_guard lk(mu_);
  const auto now = SteadyClock::now();

  auto active = [](const Slot& s) { return s.alive && s.join_step == 0; };
  std::vector<const Pending*> act;
  std::vector<const Pending*> gated;
  bool any_active_slot = false;
  for (const auto& [id, s] : slots_) any_active_slot = any_active_slot || active(s);
  for (const auto& [id, p] : pending_) {
    (active(slots_.at(id)) ? act : gated).push_back(&p);
  }
  if (act.empty()) {
    if (any_active_slot || gated.empty()) {
      round_opened_.reset();
      return;
    }
    act.swap(gated);
  }
  if (!round_opened_) round_opened_ = now;

  std::uint64_t n = 0;
  for (const auto* p : act) n = std::max(n, p->report.next_step);
  std::size_t missing = 0;
  std::size_t joiners_waiting = 0;
  for (const auto& [id, s] : slots_) {
    if (!s.alive || pending_.count(id) != 0) continue;
    if (s.join_step == 0) {
      ++missing;
    } else if (s.join_step != kJoinWhenReady && s.join_step <= n) {
      ++joiners_waiting;
    }
  }
  const auto elapsed = now - *round_opened_;
  const Millis report_limit = last_ ? opts_.report_deadline : opts_.join_hold;
  if (missing > 0 && elapsed < report_limit) return;
  if (joiners_waiting > 0 && elapsed < opts_.join_hold) return;

  std::vector<const Pending*> included = act;
  for (const auto* p : gated) {
    const auto js = slots_.at(p->report.replica_id).join_step;
    if (js == kJoinWhenReady || js <= n) included.push_back(p);
  }
  std::vector<QuorumReport> reports;
  for (const auto* p : included) reports.push_back(p->report);
  QuorumDecision d = decide(++epoch_, reports, last_ ? &*last_ : nullptr);

  wire::Frame out;
  out.type = wire::MsgType::kQuorumDecision;
  out.step = d.target_step;
  out.seq = d.epoch;
  out.payload = encode_decision(d);
  std::vector<std::uint32_t> done;
  for (const auto* p : included) {
    try {
      p->conn->send(out, Millis{1000});
    } catch (const Error&) {
    }
    done.push_back(p->report.replica_id);
  }
  for (auto id : done) {
    slots_.at(id).join_step = 0;
    pending_.erase(id);
  }
  last_ = d;
  history_.push_back(std::move(d));
  round_opened_.reset();
}

void Coordinator::loop(std::stop_token st) {
  std::vector<pollfd> fds;
  while (!st.stop_requested()) {
    fds.clear();
    fds.push_back({listener_.fd(), POLLIN, 0});
    for (const auto& c : clients_) fds.push_back({c.conn->fd(), POLLIN, 0});
    ::poll(fds.data(), fds.size(), 10);

    if (fds[0].revents & POLLIN) {
      while (true) {
        const int fd = listener_.accept_fd(Millis{0});
        if (fd < 0) break;
        clients_.push_back(Client{std::make_unique<Connection>(fd, "quorum-client")});
      }
    }
    std::vector<Connection*> dead;
    for (std::size_t i = 0; i + 1 < fds.size(); ++i) {
      if (fds[i + 1].revents == 0) continue;
      Client& c = clients_[i];
      try {
        while (auto f = c.conn->poll_recv(Millis{0})) on_frame(c, *f);
      } catch (const std::exception&) {
        dead.push_back(c.conn.get());
      }
    }
    {
      // Connections of superseded incarnations are closed.
      std::lock_guard lk(mu_);
      for (const auto& c : clients_) {
        if (!c.identified) continue;
        auto it = slots_.find(c.replica);
        if (it != slots_.end() && it->second.incarnation != c.incarnation) {
          dead.push_back(c.conn.get());
        }
      }
      for (auto* d : dead) {
        std::erase_if(pending_, [&](const auto& kv) { return kv.second.conn == d; });
      }
    }
    if (!dead.empty()) {
      std::erase_if(clients_, [&](const Client& c) {
        return std::find(dead.begin(), dead.end(), c.conn.get()) != dead.end();
      });
    }
    maybe_close_round();
  }
}

// ---- client ----------------------------------------------------------------

QuorumClient::QuorumClient(Endpoint coordinator, std::uint32_t replica,
                           std::uint32_t incarnation, KillSwitch* ks)
    : coordinator_(std::move(coordinator)), replica_(replica), incarnation_(incarnation), ks_(ks) {}

void QuorumClient::ensure_connected(Deadline deadline) {
  if (conn_ && conn_->is_open()) return;
  conn_ = dial(coordinator_,
               wire::Hello{wire::Purpose::kQuorum, replica_, 0, 0, incarnation_}, deadline, ks_);
}

QuorumDecision QuorumClient::report_and_decide(const QuorumReport& report, Millis timeout) {
  const Deadline deadline = deadline_after(timeout);
  try {
    ensure_connected(deadline);
    wire::Frame f;
    f.type = wire::MsgType::kQuorumReport;
    f.step = report.next_step;
    f.seq = report.epoch;
    f.payload = encode_report(report);
    conn_->send(f, timeout);
    while (true) {
      auto in = conn_->recv(std::max(remaining(deadline), Millis{1}));
      if (in.type == wire::MsgType::kQuorumDecision) return decode_decision(in.payload);
    }
  } catch (const Error&) {
    conn_.reset();
    throw;
  }
}

// ---- emulation -------------------------------------------------------------

QuorumLatency emulate_quorum(std::uint32_t replicas, std::uint32_t rounds, Millis report_latency) {
  if (replicas < 1) throw ConfigError("emulate_quorum needs at least one replica");
  if (rounds < 1) throw ConfigError("emulate_quorum needs at least one round");
  CoordinatorOptions opts;
  opts.report_deadline = Millis{2000};
  Coordinator coord(opts);
  for (std::uint32_t i = 0; i < replicas; ++i) coord.expect(i, 0);

  std::vector<std::unique_ptr<Connection>> conns;
  conns.reserve(replicas);
  for (std::uint32_t i = 0; i < replicas; ++i) {
    conns.push_back(dial(coord.endpoint(), wire::Hello{wire::Purpose::kQuorum, i, 0, 0, 0},
                         deadline_after(Millis{10000})));
  }

  std::vector<double> samples;
  samples.reserve(static_cast<std::size_t>(replicas) * rounds);
  std::vector<SteadyClock::time_point> sent(replicas);
  std::vector<pollfd> fds(replicas);
  for (std::uint32_t round = 0; round < rounds; ++round) {
    if (report_latency.count() > 0) std::this_thread::sleep_for(report_latency);
    for (std::uint32_t i = 0; i < replicas; ++i) {
      wire::Frame f;
      f.type = wire::MsgType::kQuorumReport;
      f.step = round;
      f.payload = encode_report(QuorumReport{round, round, i, 0});
      sent[i] = SteadyClock::now();
      conns[i]->send(f);
    }
    std::vector<bool> got(replicas, false);
    std::uint32_t outstanding = replicas;
    const Deadline deadline = deadline_after(Millis{30000});
    while (outstanding > 0) {
      if (SteadyClock::now() >= deadline) {
        throw Error(Reason::kTimeout, "quorum emulation round timed out");
      }
      for (std::uint32_t i = 0; i < replicas; ++i) fds[i] = {conns[i]->fd(), POLLIN, 0};
      ::poll(fds.data(), fds.size(), 50);
      for (std::uint32_t i = 0; i < replicas; ++i) {
        if (got[i] || fds[i].revents == 0) continue;
        while (auto f = conns[i]->poll_recv(Millis{0})) {
          if (f->type != wire::MsgType::kQuorumDecision) continue;
          const auto d = decode_decision(f->payload);
          if (d.target_step != round) continue;
          samples.push_back(
              std::chrono::duration<double, std::milli>(SteadyClock::now() - sent[i]).count());
          got[i] = true;
          --outstanding;
          break;
        }
      }
    }
  }
  std::sort(samples.begin(), samples.end());
  auto pct = [&](double q) {
    const auto idx = static_cast<std::size_t>(q * static_cast<double>(samples.size() - 1) + 0.5);
    return samples[std::min(idx, samples.size() - 1)];
  };
  QuorumLatency out;
  out.replicas = replicas;
  out.rounds = rounds;
  out.p50_ms = pct(0.50);
  out.p99_ms = pct(0.99);
  out.max_ms = samples.back();
  return out;
}

}  // namespace paft
