// SPDX-License-Identifier: Apache-2.0
#include "paft/ftar.hpp"

#include <algorithm>
#include <barrier>
#include <condition_variable>
#include <cstring>
#include <deque>
#include <mutex>
#include <numeric>
#include <thread>

#include "paft/kernels.hpp"

namespace paft {

namespace {

constexpr Millis kSlice{20};

struct OutChunk {
  wire::Frame frame;
  wire::ChunkHeader header;
};

/// State shared between the control loop and the send context of one
/// all-reduce. The control loop only enqueues; the sender owns the right
/// connection for the duration of the operation.
struct SendChannel {
  std::mutex mu;
  std::condition_variable cv;
  std::deque<OutChunk> queue;
  bool finished = false;
  std::atomic<bool> cancel{false};
  std::atomic<bool> failed{false};
  std::exception_ptr error;

  void push(OutChunk c) {
    {
      std::lock_guard lk(mu);
      queue.push_back(std::move(c));
    }
    cv.notify_one();
  }
  void finish() {
    {
      std::lock_guard lk(mu);
      finished = true;
    }
    cv.notify_one();
  }
  void abort() {
    cancel.store(true);
    cv.notify_all();
  }
};

std::uint32_t mod(std::int64_t a, std::uint32_t n) {
  const auto m = a % static_cast<std::int64_t>(n);
  return static_cast<std::uint32_t>(m < 0 ? m + n : m);
}

}  // namespace

// ---- config / membership ---------------------------------------------------

void PipelineConfig::validate(std::size_t elem_bytes) const {
  if (chunk_bytes == 0) throw ConfigError("chunk size S must be > 0");
  if (chunk_bytes % elem_bytes != 0) {
    throw ConfigError("chunk size S must be a multiple of the element size");
  }
  if (num_chunks < 1) throw ConfigError("number of chunks C must be >= 1");
  if (per_chunk_timeout.count() <= 0) throw ConfigError("per-chunk timeout must be > 0");
}

int RingGroup::index_of(std::uint32_t replica_id) const noexcept {
  for (std::size_t i = 0; i < members.size(); ++i) {
    if (members[i].replica_id == replica_id) return static_cast<int>(i);
  }
  return -1;
}

const RingMember& RingGroup::left_of(std::uint32_t index) const {
  return members[(index + size() - 1) % size()];
}

const RingMember& RingGroup::right_of(std::uint32_t index) const {
  return members[(index + 1) % size()];
}

std::vector<std::uint32_t> RingGroup::replica_ids() const {
  std::vector<std::uint32_t> ids;
  for (const auto& m : members) ids.push_back(m.replica_id);
  return ids;
}

RingGroup RingGroup::make(std::vector<RingMember> members, std::uint32_t generation) {
  if (members.empty()) throw ConfigError("a ring needs at least one member");
  std::sort(members.begin(), members.end(),
            [](const RingMember& a, const RingMember& b) { return a.replica_id < b.replica_id; });
  for (std::size_t i = 1; i < members.size(); ++i) {
    if (members[i].replica_id == members[i - 1].replica_id) {
      throw ConfigError("duplicate ring member " + std::to_string(members[i].replica_id));
    }
  }
  return RingGroup{std::move(members), generation};
}

RingGroup next_group(const RingGroup& current, std::vector<RingMember> new_members) {
  if (new_members.empty()) throw ConfigError("a ring needs at least one member");
  return RingGroup::make(std::move(new_members), current.generation + 1);
}

// ---- partition plan --------------------------------------------------------

std::uint32_t PartitionPlan::chunks_in(const Segment& s) const noexcept {
  return static_cast<std::uint32_t>((s.length + chunk_elems - 1) / chunk_elems);
}

Segment PartitionPlan::chunk(const Segment& s, std::uint32_t c) const noexcept {
  const std::size_t off = static_cast<std::size_t>(c) * chunk_elems;
  return {s.offset + off, std::min(chunk_elems, s.length - off)};
}

std::uint32_t PartitionPlan::send_segment(std::uint32_t index, std::uint32_t t) const noexcept {
  return mod(static_cast<std::int64_t>(index) - t, num_members);
}

std::uint32_t PartitionPlan::recv_segment(std::uint32_t index, std::uint32_t t) const noexcept {
  return mod(static_cast<std::int64_t>(index) - t - 1, num_members);
}

PartitionPlan build_partition_plan(std::size_t message_bytes, const PipelineConfig& cfg,
                                   std::uint32_t num_members, std::size_t elem_bytes) {
  if (num_members < 1) throw ConfigError("ring needs at least one member");
  if (elem_bytes == 0) throw ConfigError("element size must be > 0");
  cfg.validate(elem_bytes);
  PartitionPlan plan;
  plan.message_bytes = message_bytes;
  plan.elem_bytes = elem_bytes;
  plan.chunk_elems = cfg.chunk_bytes / elem_bytes;
  plan.num_members = num_members;

  const std::size_t total = (message_bytes + elem_bytes - 1) / elem_bytes;
  const std::size_t capacity =
      cfg.chunk_bytes * cfg.num_chunks * num_members / elem_bytes;
  for (std::size_t off = 0; off < total; off += capacity) {
    Partition p;
    p.offset = off;
    p.length = std::min(capacity, total - off);
    const std::size_t base = p.length / num_members;
    const std::size_t extra = p.length % num_members;
    std::size_t seg_off = 0;
    for (std::uint32_t j = 0; j < num_members; ++j) {
      const std::size_t len = base + (j < extra ? 1 : 0);
      p.segments.push_back({seg_off, len});
      seg_off += len;
    }
    plan.partitions.push_back(std::move(p));
  }
  return plan;
}

// ---- ring comm -------------------------------------------------------------

RingComm::RingComm(RingCommOptions opts) : opts_(std::move(opts)) {
  opts_.pipeline.validate();
  if (opts_.acceptor == nullptr) throw ConfigError("RingComm needs an acceptor");
}

RingComm::~RingComm() { close(); }

void RingComm::close() {
  left_.reset();
  right_.reset();
  ready_ = false;
}

LinkContext RingComm::link_to(std::uint32_t remote_replica) const {
  LinkContext l;
  l.faults = opts_.faults;
  l.clock = opts_.clock;
  l.ends = {opts_.self_replica, opts_.rank, remote_replica, opts_.rank};
  return l;
}

void RingComm::reconfig(RingGroup group) {
  close();
  const int idx = group.index_of(opts_.self_replica);
  if (idx < 0) {
    throw ConfigError("replica " + std::to_string(opts_.self_replica) +
                      " is not a member of the requested ring");
  }
  group_ = std::move(group);
  index_ = static_cast<std::uint32_t>(idx);
  if (group_.size() == 1) {
    ready_ = true;
    return;
  }
  const Deadline deadline = deadline_after(opts_.connect_timeout);
  const RingMember& right = group_.right_of(index_);
  const RingMember& left = group_.left_of(index_);
  const wire::Hello hello{wire::Purpose::kRing, opts_.self_replica, opts_.rank,
                          group_.generation, opts_.incarnation};
  const LinkContext rlink = link_to(right.replica_id);
  right_ = dial(right.endpoint, hello, deadline, opts_.kill_switch, &rlink);
  try {
    left_ = opts_.acceptor->take(wire::Purpose::kRing, left.replica_id, opts_.rank,
                                 group_.generation, deadline);
  } catch (const Error& e) {
    right_.reset();
    throw Error(Reason::kPeerDown, std::string("left neighbor unreachable: ") + e.what());
  }
  left_->set_link(link_to(left.replica_id));
  ready_ = true;
}

void RingComm::all_reduce(std::span<float> buffer, std::uint64_t step) {
  if (!ready_) throw Error(Reason::kPeerReset, "ring is not established");
  const std::uint32_t n = group_.size();
  if (n == 1 || buffer.empty()) return;

  const PipelineConfig& cfg = opts_.pipeline;
  const PartitionPlan plan = build_partition_plan(buffer.size_bytes(), cfg, n);
  const std::uint32_t gen = group_.generation;
  const std::size_t cap = cfg.link_capacity();
  const Millis timeout = cfg.per_chunk_timeout;
  KillSwitch* ks = opts_.kill_switch;

  SendChannel ch;
  Connection& right = *right_;
  Connection& left = *left_;

  std::thread sender([&] {
    std::deque<wire::ChunkHeader> inflight;
    std::size_t unacked = 0;
    auto read_ack = [&](Millis wait) -> bool {
      auto f = right.poll_recv(wait);
      if (!f) return false;
      if (f->type != wire::MsgType::kChunkAck) {
        throw Error(Reason::kProtocolViolation, "expected CHUNK_ACK");
      }
      const auto h = wire::decode_chunk(f->payload);
      if (h.generation < gen) return true;  // stale
      if (inflight.empty() || !(h == inflight.front())) {
        throw Error(Reason::kProtocolViolation, "CHUNK_ACK out of order");
      }
      unacked -= h.data_len;
      inflight.pop_front();
      return true;
    };
    auto wait_ack = [&](Deadline deadline) {
      while (!read_ack(kSlice)) {
        if (ch.cancel.load()) throw Error(Reason::kPeerReset, "cancelled");
        if (SteadyClock::now() >= deadline) {
          throw Error(Reason::kTimeout, "CHUNK_ACK timeout from " + right.peer());
        }
      }
    };
    try {
      while (true) {
        OutChunk oc;
        {
          std::unique_lock lk(ch.mu);
          ch.cv.wait(lk, [&] { return !ch.queue.empty() || ch.finished || ch.cancel.load(); });
          if (ch.cancel.load()) return;
          if (ch.queue.empty()) break;
          oc = std::move(ch.queue.front());
          ch.queue.pop_front();
        }
        while (!inflight.empty() && read_ack(Millis{0})) {
        }
        const Deadline deadline = deadline_after(timeout);
        while (!inflight.empty() && unacked + oc.header.data_len > cap) wait_ack(deadline);
        if (send_hook_) send_hook_(step, oc.header.ring_step, oc.header.chunk);
        right.send(oc.frame, timeout);
        unacked += oc.header.data_len;
        inflight.push_back(oc.header);
        stats_.max_unacked_bytes = std::max(stats_.max_unacked_bytes, unacked);
        ++stats_.chunks_sent;
      }
      const Deadline deadline = deadline_after(timeout);
      while (!inflight.empty()) wait_ack(deadline);
    } catch (...) {
      {
        std::lock_guard lk(ch.mu);
        ch.error = std::current_exception();
      }
      ch.failed.store(true);
    }
  });

  auto enqueue = [&](std::uint32_t part, std::uint32_t t, std::uint32_t c,
                     std::span<const float> data) {
    OutChunk oc;
    oc.header = {gen, part, t, c, static_cast<std::uint32_t>(data.size_bytes())};
    oc.frame.type = wire::MsgType::kChunkData;
    oc.frame.step = step;
    oc.frame.seq = seq_++;
    oc.frame.payload = wire::encode_chunk(oc.header, data);
    ch.push(std::move(oc));
  };

  auto sender_error = [&]() -> std::exception_ptr {
    std::lock_guard lk(ch.mu);
    return ch.error;
  };

  auto recv_chunk = [&](const wire::ChunkHeader& want,
                        std::span<float> out_region) -> wire::Frame {
    const Deadline deadline = deadline_after(timeout);
    while (true) {
      if (ch.failed.load()) std::rethrow_exception(sender_error());
      if (ks != nullptr && ks->triggered()) throw Error(Reason::kPeerReset, "killed");
      auto f = left.poll_recv(std::min(kSlice, std::max(remaining(deadline), Millis{1})));
      if (!f) {
        if (SteadyClock::now() >= deadline) {
          throw Error(Reason::kTimeout, "chunk recv timeout from " + left.peer());
        }
        continue;
      }
      if (f->type != wire::MsgType::kChunkData) {
        throw Error(Reason::kProtocolViolation, "expected CHUNK_DATA");
      }
      std::span<const std::byte> data;
      const auto h = wire::decode_chunk(f->payload, &data);
      if (h.generation < gen || (h.generation == gen && f->step < step)) {
        ++stats_.stale_frames_dropped;
        continue;
      }
      if (h.generation != gen || f->step != step || h.partition != want.partition ||
          h.ring_step != want.ring_step || h.chunk != want.chunk ||
          h.data_len != out_region.size_bytes()) {
        throw Error(Reason::kProtocolViolation, "unexpected chunk header");
      }
      (void)out_region;
      return std::move(*f);
    }
  };

  try {
    for (std::uint32_t p = 0; p < plan.partitions.size(); ++p) {
      const Partition& part = plan.partitions[p];
      const std::span<float> input = buffer.subspan(part.offset, part.length);
      work_.resize(part.length);
      const std::span<float> work(work_.data(), part.length);

      const Segment& first = part.segments[plan.send_segment(index_, 0)];
      for (std::uint32_t c = 0; c < plan.chunks_in(first); ++c) {
        const Segment k = plan.chunk(first, c);
        enqueue(p, 0, c, input.subspan(k.offset, k.length));
      }

      for (std::uint32_t t = 0; t < plan.ring_steps(); ++t) {
        const bool reduce = t + 1 < n;  // ReduceScatter phase: t in [0, N-2]
        const Segment& seg = part.segments[plan.recv_segment(index_, t)];
        for (std::uint32_t c = 0; c < plan.chunks_in(seg); ++c) {
          const Segment k = plan.chunk(seg, c);
          const std::span<float> dst = work.subspan(k.offset, k.length);
          const wire::ChunkHeader want{gen, p, t, c,
                                       static_cast<std::uint32_t>(k.length * sizeof(float))};
          wire::Frame f = recv_chunk(want, dst);
          std::span<const std::byte> bytes;
          wire::decode_chunk(f.payload, &bytes);
          const std::span<const float> incoming(reinterpret_cast<const float*>(bytes.data()),
                                                k.length);
          if (reduce) {
            kernels::add(dst, incoming, input.subspan(k.offset, k.length));
            if (!kernels::all_finite(dst)) {
              throw Error(Reason::kNumerical, "non-finite value in reduced chunk");
            }
          } else {
            std::memcpy(dst.data(), incoming.data(), dst.size_bytes());
          }
          wire::Frame ack;
          ack.type = wire::MsgType::kChunkAck;
          ack.step = step;
          ack.seq = f.seq;
          ack.payload = wire::encode_chunk_ack(want);
          left.send(ack, timeout);
          if (t + 1 < plan.ring_steps()) enqueue(p, t + 1, c, dst);
        }
      }
      // Completed partition: publish into the caller's buffer.
      std::memcpy(input.data(), work.data(), input.size_bytes());
    }
    ch.finish();
    sender.join();
    if (ch.failed.load()) std::rethrow_exception(sender_error());
  } catch (...) {
    ch.abort();
    if (left_) left_->shutdown();
    if (right_) right_->shutdown();
    if (sender.joinable()) sender.join();
    ready_ = false;
    throw;
  }
}

// ---- loopback ring ---------------------------------------------------------

LoopbackRing::LoopbackRing(std::uint32_t members, PipelineConfig cfg,
                           std::shared_ptr<const FaultTable> faults) {
  for (std::uint32_t i = 0; i < members; ++i) {
    switches_.push_back(std::make_unique<KillSwitch>());
    acceptors_.push_back(std::make_unique<Acceptor>(0, switches_.back().get()));
    clocks_.push_back(std::make_shared<FaultClock>());
    RingCommOptions o;
    o.self_replica = i;
    o.rank = 0;
    o.pipeline = cfg;
    o.acceptor = acceptors_.back().get();
    o.kill_switch = switches_.back().get();
    o.faults = faults;
    o.clock = clocks_.back();
    o.connect_timeout = std::max(cfg.per_chunk_timeout, Millis{2000});
    comms_.push_back(std::make_unique<RingComm>(std::move(o)));
  }
}

LoopbackRing::~LoopbackRing() {
  comms_.clear();
  for (auto& a : acceptors_) a->stop();
}

std::vector<RingMember> LoopbackRing::members() const {
  std::vector<RingMember> out;
  for (std::uint32_t i = 0; i < acceptors_.size(); ++i) {
    out.push_back({i, Endpoint{"127.0.0.1", acceptors_[i]->port()}});
  }
  return out;
}

void LoopbackRing::reconfig(const std::vector<std::uint32_t>& positions,
                            std::uint32_t generation) {
  const auto all = members();
  std::vector<RingMember> chosen;
  for (auto p : positions) chosen.push_back(all[p]);
  const RingGroup group = RingGroup::make(chosen, generation);
  auto errors = run(positions, [&](std::uint32_t i) { comms_[i]->reconfig(group); });
  for (auto& e : errors) {
    if (e) std::rethrow_exception(e);
  }
}

std::vector<std::exception_ptr> LoopbackRing::run(
    const std::vector<std::uint32_t>& positions,
    const std::function<void(std::uint32_t)>& fn) {
  std::vector<std::exception_ptr> errors(positions.size());
  std::vector<std::thread> threads;
  threads.reserve(positions.size());
  for (std::size_t k = 0; k < positions.size(); ++k) {
    threads.emplace_back([&, k] {
      try {
        fn(positions[k]);
      } catch (...) {
        errors[k] = std::current_exception();
      }
    });
  }
  for (auto& t : threads) t.join();
  return errors;
}

// ---- benchmark -------------------------------------------------------------

BenchResult bench_ftar(std::uint32_t members, std::size_t message_bytes,
                       const PipelineConfig& cfg, std::uint32_t repetitions) {
  if (members < 2) throw ConfigError("benchmark needs at least two members");
  LoopbackRing ring(members, cfg);
  std::vector<std::uint32_t> all(members);
  std::iota(all.begin(), all.end(), 0u);
  ring.reconfig(all, 1);

  const std::size_t elems = message_bytes / sizeof(float);
  std::vector<std::vector<float>> buffers(members, std::vector<float>(elems, 0.0f));
  BenchResult result;
  result.members = members;
  result.message_bytes = elems * sizeof(float);

  SteadyClock::time_point start;
  std::vector<SteadyClock::time_point> ends(members);
  std::barrier sync(members, [&]() noexcept {});
  std::barrier begin(members, [&]() noexcept { start = SteadyClock::now(); });
  std::vector<double> samples;

  auto errors = ring.run(all, [&](std::uint32_t i) {
    for (std::uint32_t rep = 0; rep < repetitions; ++rep) {
      begin.arrive_and_wait();
      ring.comm(i).all_reduce(buffers[i], rep);
      ends[i] = SteadyClock::now();
      sync.arrive_and_wait();
      if (i == 0) {
        const auto last = *std::max_element(ends.begin(), ends.end());
        const double secs = std::chrono::duration<double>(last - start).count();
        samples.push_back(static_cast<double>(result.message_bytes) / secs / 1e9);
      }
    }
  });
  for (auto& e : errors) {
    if (e) std::rethrow_exception(e);
  }
  result.samples_gbps = std::move(samples);
  if (!result.samples_gbps.empty()) {
    result.mean_gbps = std::accumulate(result.samples_gbps.begin(), result.samples_gbps.end(), 0.0) /
                       static_cast<double>(result.samples_gbps.size());
  }
  return result;
}

}  // namespace paft
