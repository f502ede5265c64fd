// SPDX-License-Identifier: Apache-2.0
#include "paft/replica.hpp"

#include <unistd.h>

#include <algorithm>
#include <csignal>
#include <cstring>
#include <iomanip>
#include <iostream>
#include <sstream>

#include "paft/kernels.hpp"

namespace paft {

namespace fs = std::filesystem;

namespace {

constexpr Millis kQuorumWait{600000};
constexpr std::uint32_t kEvalStream = 0xE7A1u;

double ms_since(SteadyClock::time_point t) {
  return std::chrono::duration<double, std::milli>(SteadyClock::now() - t).count();
}

wire::Frame vote_frame(wire::MsgType type, const wire::Vote& v) {
  wire::Frame f;
  f.type = type;
  f.step = v.step;
  f.payload = wire::encode_vote(v);
  return f;
}

std::string sanitize(std::string s) {
  std::replace(s.begin(), s.end(), ',', ';');
  std::replace(s.begin(), s.end(), '\n', ' ');
  return s;
}

}  // namespace

// ---- shard map -------------------------------------------------------------

ShardMap ShardMap::make(std::size_t total, std::uint32_t ranks) {
  if (ranks < 1) throw ConfigError("a replica needs at least one rank");
  if (total < ranks) throw ConfigError("fewer parameters than ranks");
  ShardMap m;
  const std::size_t base = total / ranks;
  const std::size_t extra = total % ranks;
  std::size_t off = 0;
  for (std::uint32_t r = 0; r < ranks; ++r) {
    const std::size_t len = base + (r < extra ? 1 : 0);
    m.offsets.push_back(off);
    m.lengths.push_back(len);
    off += len;
  }
  return m;
}

std::size_t ShardMap::total() const noexcept {
  return offsets.empty() ? 0 : offsets.back() + lengths.back();
}

// ---- intra-replica mesh ----------------------------------------------------

IntraGroup::IntraGroup(std::uint32_t rank, std::vector<std::unique_ptr<Connection>> peers,
                       Millis timeout)
    : rank_(rank), peers_(std::move(peers)), timeout_(timeout) {
  if (rank_ >= peers_.size()) throw ConfigError("intra group rank out of range");
}

IntraGroup IntraGroup::connect(std::uint32_t replica, std::uint32_t rank,
                               const std::vector<Endpoint>& rank_endpoints,
                               std::uint32_t incarnation, Acceptor& acceptor, KillSwitch* ks,
                               Deadline deadline, Millis timeout) {
  const auto n = static_cast<std::uint32_t>(rank_endpoints.size());
  std::vector<std::unique_ptr<Connection>> peers(n);
  for (std::uint32_t p = rank + 1; p < n; ++p) {
    peers[p] = dial(rank_endpoints[p],
                    wire::Hello{wire::Purpose::kIntra, replica, rank, incarnation, incarnation},
                    deadline, ks);
  }
  for (std::uint32_t p = 0; p < rank; ++p) {
    peers[p] = acceptor.take(wire::Purpose::kIntra, replica, p, incarnation, deadline);
  }
  return IntraGroup(rank, std::move(peers), timeout);
}

void IntraGroup::send(std::uint32_t to, const wire::Frame& f) { peers_.at(to)->send(f, timeout_); }

wire::Frame IntraGroup::recv(std::uint32_t from, Millis timeout) {
  return peers_.at(from)->recv(timeout);
}

void IntraGroup::exchange(std::uint32_t peer, const wire::Frame& out, wire::Frame& in) {
  if (rank_ < peer) {
    send(peer, out);
    in = recv(peer);
  } else {
    in = recv(peer);
    send(peer, out);
  }
}

namespace {

wire::Frame shard_frame(std::uint32_t phase, std::uint32_t from, std::span<const float> data) {
  wire::Frame f;
  f.type = wire::MsgType::kChunkData;
  f.payload = wire::encode_chunk(
      wire::ChunkHeader{0, 0, phase, from, static_cast<std::uint32_t>(data.size_bytes())}, data);
  return f;
}

void read_shard(const wire::Frame& f, std::uint32_t phase, std::uint32_t from,
                std::span<float> out) {
  if (f.type != wire::MsgType::kChunkData) {
    throw Error(Reason::kProtocolViolation, "intra: expected shard data");
  }
  std::span<const std::byte> data;
  const auto h = wire::decode_chunk(f.payload, &data);
  if (h.ring_step != phase || h.chunk != from || data.size() != out.size_bytes()) {
    throw Error(Reason::kProtocolViolation, "intra: unexpected shard header");
  }
  std::memcpy(out.data(), data.data(), data.size());
}

}  // namespace

void IntraGroup::reduce_scatter(std::span<const float> grad, const ShardMap& map,
                                std::span<float> out) {
  const std::uint32_t n = size();
  if (map.ranks() != n || grad.size() != map.total() || out.size() != map.length(rank_)) {
    throw ConfigError("reduce_scatter: shard map does not match buffers");
  }
  std::vector<std::vector<float>> parts(n);
  parts[rank_].assign(grad.begin() + static_cast<std::ptrdiff_t>(map.offset(rank_)),
                      grad.begin() + static_cast<std::ptrdiff_t>(map.offset(rank_) + out.size()));
  for (std::uint32_t p = 0; p < n; ++p) {
    if (p == rank_) continue;
    wire::Frame in;
    exchange(p, shard_frame(1, rank_, grad.subspan(map.offset(p), map.length(p))), in);
    parts[p].resize(out.size());
    read_shard(in, 1, p, parts[p]);
  }
  std::copy(parts[0].begin(), parts[0].end(), out.begin());
  for (std::uint32_t p = 1; p < n; ++p) kernels::accumulate(out, parts[p]);
}

void IntraGroup::all_gather(std::span<float> full, const ShardMap& map) {
  const std::uint32_t n = size();
  if (map.ranks() != n || full.size() != map.total()) {
    throw ConfigError("all_gather: shard map does not match buffer");
  }
  for (std::uint32_t p = 0; p < n; ++p) {
    if (p == rank_) continue;
    wire::Frame in;
    exchange(p, shard_frame(2, rank_, full.subspan(map.offset(rank_), map.length(rank_))), in);
    read_shard(in, 2, p, full.subspan(map.offset(p), map.length(p)));
  }
}

// ---- names and records -----------------------------------------------------

std::string_view to_string(Phase p) noexcept {
  switch (p) {
    case Phase::kTraining: return "training";
    case Phase::kAwaitingQuorum: return "awaiting_quorum";
    case Phase::kCatchingUp: return "catching_up";
    case Phase::kFailed: return "failed";
  }
  return "unknown";
}

std::string_view to_string(StepOutcome::Kind k) noexcept {
  switch (k) {
    case StepOutcome::Kind::kCommitted: return "committed";
    case StepOutcome::Kind::kRetried: return "retried";
    case StepOutcome::Kind::kLeftBehind: return "left_behind";
    case StepOutcome::Kind::kReplicaFailed: return "replica_failed";
  }
  return "unknown";
}

std::string attempt_csv_header() {
  return "step,attempt,replica_id,rank,incarnation,phase,outcome,wall_ms,step_ms,quorum_ms,"
         "ftar_ms,fetch_ms,healthy_count,generation,cursor,loss,eval_loss,hash_before,"
         "hash_after,event";
}

std::string to_csv(const AttemptRecord& r) {
  std::ostringstream os;
  os << r.step << ',' << r.attempt << ',' << r.replica_id << ',' << r.rank << ','
     << r.incarnation << ',' << r.phase << ',' << r.outcome << ',' << std::fixed
     << std::setprecision(3) << r.wall_ms << ',' << r.step_ms << ',' << r.quorum_ms << ','
     << r.ftar_ms << ',' << r.fetch_ms << ',' << r.healthy_count << ',' << r.generation << ','
     << r.cursor << ',' << std::setprecision(9) << r.loss << ',' << r.eval_loss << ','
     << r.hash_before << ',' << r.hash_after << ',' << sanitize(r.event);
  return os.str();
}

fs::path rank_csv_path(const fs::path& run_dir, std::uint32_t replica, std::uint32_t rank,
                       std::uint32_t incarnation) {
  return run_dir / "ranks" /
         ("r" + std::to_string(replica) + "_k" + std::to_string(rank) + "_i" +
          std::to_string(incarnation) + ".csv");
}

fs::path rank_final_path(const fs::path& run_dir, std::uint32_t replica, std::uint32_t rank) {
  return run_dir / "ranks" /
         ("final_r" + std::to_string(replica) + "_k" + std::to_string(rank) + ".txt");
}

fs::path loader_state_path(const fs::path& run_dir) { return run_dir / "loader_state"; }
fs::path checkpoint_root(const fs::path& run_dir) { return run_dir / "checkpoints"; }

// ---- engine ----------------------------------------------------------------

RankEngine::RankEngine(RankConfig cfg, RankHooks hooks)
    : cfg_(std::move(cfg)), hooks_(std::move(hooks)) {
  if (!hooks_.self_kill) hooks_.self_kill = [] { ::raise(SIGKILL); };
  if (!hooks_.watchdog_fired) {
    hooks_.watchdog_fired = [] {
      static const char msg[] = "watchdog: step exceeded the detection interval\n";
      (void)!::write(2, msg, sizeof(msg) - 1);
      ::_exit(4);
    };
  }
}

RankEngine::~RankEngine() {
  watchdog_.request_stop();
  if (watchdog_.joinable()) watchdog_.join();
  kill_switch_.trigger();
  ring_.reset();
  intra_.reset();
  if (acceptor_) acceptor_->stop();
}

std::uint64_t RankEngine::shard_state_hash() const {
  return shard_hash(current_shard(0));
}

std::uint64_t RankEngine::full_params_hash() const { return hash_floats(model_.params); }

ShardState RankEngine::current_shard(std::uint64_t step) const {
  ShardState s;
  s.step = step;
  s.rank = cfg_.rank;
  s.offset = shards_.offset(cfg_.rank);
  s.step_count = step_count_;
  const auto first = model_.params.begin() + static_cast<std::ptrdiff_t>(s.offset);
  s.params.assign(first, first + static_cast<std::ptrdiff_t>(shards_.length(cfg_.rank)));
  s.momentum = momentum_;
  return s;
}

float RankEngine::eval_loss() const { return evaluate_loss(model_, eval_batch_); }

void RankEngine::arm_watchdog() {
  armed_at_ns_.store(SteadyClock::now().time_since_epoch().count());
  armed_.store(true);
}

void RankEngine::disarm_watchdog() { armed_.store(false); }

void RankEngine::setup() {
  const Scenario& s = cfg_.scenario;
  if (cfg_.endpoints.size() != s.num_replicas ||
      cfg_.endpoints.at(cfg_.replica_id).size() != s.ranks_per_replica) {
    throw ConfigError("endpoint table does not match topology");
  }
  fs::create_directories(cfg_.run_dir / "ranks");
  const auto csv_path = rank_csv_path(cfg_.run_dir, cfg_.replica_id, cfg_.rank, cfg_.incarnation);
  csv_.open(csv_path, std::ios::out | std::ios::trunc);
  csv_ << attempt_csv_header() << '\n' << std::flush;

  faults_ = std::make_shared<FaultTable>(scenario_fault_rules(s), s.base_latency_ms);
  clock_ = std::make_shared<FaultClock>();

  const Deadline bind_deadline = deadline_after(Millis{10000});
  const auto port = cfg_.endpoints[cfg_.replica_id][cfg_.rank].port;
  while (!acceptor_) {
    try {
      acceptor_ = std::make_unique<Acceptor>(port, &kill_switch_);
    } catch (const Error&) {
      if (SteadyClock::now() >= bind_deadline) throw;
      std::this_thread::sleep_for(Millis{50});
    }
  }
  snapshots_ = std::make_shared<SnapshotStore>();
  acceptor_->set_fetch_handler(make_fetch_handler(snapshots_));

  RingCommOptions ro;
  ro.self_replica = cfg_.replica_id;
  ro.rank = cfg_.rank;
  ro.incarnation = cfg_.incarnation;
  ro.pipeline = s.pipeline;
  ro.pipeline.per_chunk_timeout = s.timeouts.per_chunk;
  ro.acceptor = acceptor_.get();
  ro.kill_switch = &kill_switch_;
  ro.faults = faults_;
  ro.clock = clock_;
  ro.connect_timeout = s.timeouts.connect;
  ring_ = std::make_unique<RingComm>(ro);

  const auto layout = ModelLayout::mlp(s.dims);
  shards_ = ShardMap::make(layout.param_count(), s.ranks_per_replica);
  loader_log_ = std::make_unique<LoaderStateLog>(loader_state_path(cfg_.run_dir));
  DataSpec eval_spec = s.data_spec();
  eval_spec.micro_batch = s.eval_rows;
  eval_batch_ = make_batch(eval_spec, kEvalStream, 0);

  if (cfg_.incarnation > 0 && s.allocation_delay.count() > 0) {
    std::this_thread::sleep_for(s.allocation_delay);
  }

  const std::size_t my_len = shards_.length(cfg_.rank);
  if (s.restore && cfg_.incarnation == 0) {
    const Checkpoint ckpt = read_checkpoint(checkpoint_root(cfg_.run_dir));
    if (ckpt.shards.size() != s.ranks_per_replica || ckpt.param_count != layout.param_count()) {
      throw CheckpointError("checkpoint topology does not match the scenario");
    }
    model_.layout = layout;
    for (const auto& sh : ckpt.shards) {
      model_.params.insert(model_.params.end(), sh.params.begin(), sh.params.end());
    }
    momentum_ = ckpt.shards[cfg_.rank].momentum;
    step_count_ = ckpt.shards[cfg_.rank].step_count;
    next_step_ = ckpt.step + 1;
    const auto latest = loader_log_->latest(ckpt.step);
    const auto it = latest.find(cfg_.replica_id);
    cursor_ = it == latest.end() ? 0 : it->second.cursor;
    have_state_ = true;
    snapshots_->publish(current_shard(ckpt.step));
  } else if (cfg_.incarnation == 0) {
    auto [m, opt] = init_model(s.model_seed, s.dims);
    model_ = std::move(m);
    momentum_.assign(my_len, 0.0f);
    step_count_ = opt.step_count;
    have_state_ = true;
  } else {
    model_.layout = layout;
    model_.params.assign(layout.param_count(), 0.0f);
    momentum_.assign(my_len, 0.0f);
    const auto latest = loader_log_->latest();
    const auto it = latest.find(cfg_.replica_id);
    cursor_ = it == latest.end() ? 0 : it->second.cursor;
  }

  const Millis intra_timeout = std::max(s.timeouts.detection, s.timeouts.per_chunk);
  intra_.emplace(IntraGroup::connect(cfg_.replica_id, cfg_.rank, cfg_.endpoints[cfg_.replica_id],
                                     cfg_.incarnation, *acceptor_, &kill_switch_,
                                     deadline_after(Millis{60000}), intra_timeout));
  if (leader()) {
    quorum_ = std::make_unique<QuorumClient>(cfg_.coordinator, cfg_.replica_id,
                                             cfg_.incarnation, &kill_switch_);
  }

  watchdog_ = std::jthread([this, limit = s.timeouts.detection](std::stop_token st) {
    while (!st.stop_requested()) {
      std::this_thread::sleep_for(Millis{20});
      if (!armed_.load()) continue;
      const auto since = SteadyClock::now().time_since_epoch().count() - armed_at_ns_.load();
      if (std::chrono::nanoseconds(since) > limit) {
        armed_.store(false);
        hooks_.watchdog_fired();
      }
    }
  });
  last_end_ = SteadyClock::now();
}

QuorumDecision RankEngine::await_decision() {
  if (!leader()) {
    const auto f = intra_->recv(0, kQuorumWait);
    if (f.type != wire::MsgType::kQuorumDecision) {
      throw Error(Reason::kProtocolViolation, "follower expected a quorum decision");
    }
    return decode_decision(f.payload);
  }
  QuorumDecision d;
  for (std::uint32_t tries = 0;; ++tries) {
    try {
      d = quorum_->report_and_decide(
          QuorumReport{epoch_++, have_state_ ? next_step_ : 0, cfg_.replica_id, cfg_.incarnation},
          kQuorumWait);
      break;
    } catch (const Error& e) {
      if (kill_switch_.triggered() || tries >= 5) {
        throw ReplicaFailed(std::string("coordinator unreachable: ") + e.what());
      }
      std::this_thread::sleep_for(Millis{100});
    }
  }
  wire::Frame f;
  f.type = wire::MsgType::kQuorumDecision;
  f.step = d.target_step;
  f.seq = d.epoch;
  f.payload = encode_decision(d);
  for (std::uint32_t p = 1; p < intra_->size(); ++p) intra_->send(p, f);
  return d;
}

bool RankEngine::run_ftar(const QuorumDecision& d, std::span<float> shard, AttemptRecord& rec) {
  const Scenario& s = cfg_.scenario;
  std::vector<RingMember> members;
  for (auto id : d.participants()) members.push_back({id, cfg_.endpoints.at(id).at(cfg_.rank)});
  RingGroup group = RingGroup::make(std::move(members), d.generation);

  bool kill_now = false;
  if (attempt_ == 0) {
    for (const auto& f : s.failures) {
      if (f.kind != FailureKind::kKillReplica || f.at_step != d.target_step ||
          f.at_step < cfg_.join_step) {
        continue;
      }
      const auto v = failure_victims(s, f);
      kill_now = kill_now || std::find(v.begin(), v.end(), cfg_.replica_id) != v.end();
    }
  }
  if (kill_now) {
    const auto step = d.target_step;
    ring_->set_send_hook([this, step](std::uint64_t st, std::uint32_t, std::uint32_t) {
      if (st == step) hooks_.self_kill();
    });
    if (group.size() == 1) hooks_.self_kill();
  } else {
    ring_->set_send_hook(nullptr);
  }

  const auto t0 = SteadyClock::now();
  try {
    if (!ring_->ready() || ring_->group().generation != group.generation ||
        ring_->group().members != group.members) {
      ring_->reconfig(group);
    }
    std::exception_ptr err;
    std::thread worker([&] {
      try {
        ring_->all_reduce(shard, d.target_step);
      } catch (...) {
        err = std::current_exception();
      }
    });
    worker.join();
    if (err) std::rethrow_exception(err);
    rec.ftar_ms = ms_since(t0);
    return true;
  } catch (const Error& e) {
    rec.ftar_ms = ms_since(t0);
    if (!rec.event.empty()) rec.event += " ";
    rec.event += "ftar_" + std::string(to_string(e.reason())) + ": " + e.what();
    if (kill_switch_.triggered()) throw ReplicaFailed("killed during FTAR");
    if (!e.recoverable()) throw ReplicaFailed(std::string("fatal FTAR error: ") + e.what());
    return false;
  }
}

bool RankEngine::two_phase_commit(std::uint64_t step, bool vote, bool training,
                                  std::uint64_t new_cursor) {
  const wire::Vote mine{step, cfg_.incarnation, static_cast<std::uint8_t>(vote ? 1 : 0)};
  const Millis timeout = std::max(cfg_.scenario.timeouts.detection, cfg_.scenario.timeouts.per_chunk);
  const std::uint32_t n = intra_->size();
  if (!leader()) {
    const auto prep = intra_->recv(0, timeout);
    if (prep.type != wire::MsgType::kPrepare || wire::decode_vote(prep.payload).step != step) {
      throw Error(Reason::kProtocolViolation, "2PC: expected PREPARE");
    }
    intra_->send(0, vote_frame(wire::MsgType::kPrepared, mine));
    const auto out = intra_->recv(0, timeout);
    if (wire::decode_vote(out.payload).step != step) {
      throw Error(Reason::kProtocolViolation, "2PC: outcome for the wrong step");
    }
    if (out.type == wire::MsgType::kCommit) return true;
    if (out.type == wire::MsgType::kRetry) return false;
    throw Error(Reason::kProtocolViolation, "2PC: expected COMMIT or RETRY");
  }
  for (std::uint32_t p = 1; p < n; ++p) intra_->send(p, vote_frame(wire::MsgType::kPrepare, mine));
  bool all = vote;
  for (std::uint32_t p = 1; p < n; ++p) {
    const auto f = intra_->recv(p, timeout);
    if (f.type != wire::MsgType::kPrepared) {
      throw Error(Reason::kProtocolViolation, "2PC: expected PREPARED");
    }
    const auto v = wire::decode_vote(f.payload);
    all = all && v.step == step && v.vote == 1;
  }
  if (all && training) {
    loader_log_->append(LoaderStateRecord{step, cfg_.replica_id, new_cursor});
  }
  const wire::Vote outcome{step, cfg_.incarnation, static_cast<std::uint8_t>(all ? 1 : 0)};
  for (std::uint32_t p = 1; p < n; ++p) {
    intra_->send(p, vote_frame(all ? wire::MsgType::kCommit : wire::MsgType::kRetry, outcome));
  }
  return all;
}

void RankEngine::apply_update(std::span<float> summed, const QuorumDecision& d) {
  const Scenario& s = cfg_.scenario;
  const auto h = static_cast<std::uint32_t>(d.healthy.size());
  const float inv = 1.0f / static_cast<float>(h * s.ranks_per_replica);
  kernels::scale(summed, inv);
  const float lr = compute_lr(s.lr, d.target_step, h, s.num_replicas);
  auto params = std::span(model_.params).subspan(shards_.offset(cfg_.rank), shards_.length(cfg_.rank));
  try {
    sgd_momentum_step(params, momentum_, summed, lr);
  } catch (const Error& e) {
    throw ReplicaFailed(std::string("optimizer: ") + e.what());
  }
  ++step_count_;
}

void RankEngine::maybe_checkpoint(const QuorumDecision& d) {
  const Scenario& s = cfg_.scenario;
  const std::uint64_t n = d.target_step;
  if (!is_checkpoint_step(n, s.checkpoint_interval)) return;
  const std::uint32_t writer =
      d.is_healthy(s.preferred_writer()) ? s.preferred_writer() : d.healthy.front();
  if (writer != cfg_.replica_id) return;
  if (!leader()) {
    wire::Frame f;
    f.type = wire::MsgType::kFetchStateResp;
    f.step = n;
    f.payload = wire::encode_fetch_response(
        wire::FetchResponse{n, cfg_.rank, serialize_shard(current_shard(n))});
    intra_->send(0, f);
    return;
  }
  Checkpoint ckpt;
  ckpt.step = n;
  ckpt.param_count = model_.params.size();
  ckpt.shards.push_back(current_shard(n));
  for (std::uint32_t p = 1; p < intra_->size(); ++p) {
    const auto f = intra_->recv(p);
    if (f.type != wire::MsgType::kFetchStateResp) {
      throw Error(Reason::kProtocolViolation, "checkpoint: expected a shard");
    }
    ckpt.shards.push_back(deserialize_shard(wire::decode_fetch_response(f.payload).data));
  }
  writer_.submit(checkpoint_root(cfg_.run_dir), std::move(ckpt));
}

void RankEngine::after_commit(const QuorumDecision& d) {
  snapshots_->publish(current_shard(d.target_step));
  intra_->all_gather(model_.params, shards_);
  maybe_checkpoint(d);
  next_step_ = d.target_step + 1;
  have_state_ = true;
}

void RankEngine::write_record(AttemptRecord& rec) {
  const auto now = SteadyClock::now();
  rec.wall_ms = std::chrono::duration<double, std::milli>(now - last_end_).count();
  last_end_ = now;
  csv_ << to_csv(rec) << '\n' << std::flush;
}

StepOutcome RankEngine::train_step(const QuorumDecision& d) {
  const Scenario& s = cfg_.scenario;
  const std::uint64_t n = d.target_step;
  const auto t0 = SteadyClock::now();
  AttemptRecord rec;
  rec.step = n;
  rec.attempt = attempt_;
  rec.replica_id = cfg_.replica_id;
  rec.rank = cfg_.rank;
  rec.incarnation = cfg_.incarnation;
  rec.phase = "train";
  rec.quorum_ms = quorum_ms_;
  rec.healthy_count = static_cast<std::uint32_t>(d.healthy.size());
  rec.generation = d.generation;
  rec.cursor = cursor_ + cfg_.rank;
  rec.hash_before = shard_state_hash();

  if (attempt_ == 0) {
    for (const auto& f : s.failures) {
      if (f.kind != FailureKind::kHangRank || f.at_step != n || f.rank != cfg_.rank ||
          f.at_step < cfg_.join_step) {
        continue;
      }
      const auto v = failure_victims(s, f);
      if (std::find(v.begin(), v.end(), cfg_.replica_id) == v.end()) continue;
      while (true) std::this_thread::sleep_for(Millis{1000});
    }
  }

  const Batch batch = make_batch(s.data_spec(), cfg_.replica_id, cursor_ + cfg_.rank);
  LossAndGrad lg = forward_backward(model_, batch);
  rec.loss = lg.loss;
  std::vector<float> shard(shards_.length(cfg_.rank));
  intra_->reduce_scatter(lg.grad, shards_, shard);

  const bool ok = run_ftar(d, shard, rec);
  const bool commit = two_phase_commit(n, ok, true, cursor_ + s.ranks_per_replica);
  StepOutcome out;
  out.step = n;
  out.healthy_count = rec.healthy_count;
  if (commit) {
    apply_update(shard, d);
    cursor_ += s.ranks_per_replica;
    after_commit(d);
    out.kind = StepOutcome::Kind::kCommitted;
    out.tokens = static_cast<std::uint64_t>(s.micro_batch) * s.ranks_per_replica;
    rec.outcome = "committed";
    rec.eval_loss = eval_loss();
  } else {
    out.kind = StepOutcome::Kind::kRetried;
    out.reason = Reason::kTimeout;
    rec.outcome = "retried";
  }
  rec.hash_after = shard_state_hash();
  rec.step_ms = ms_since(t0);
  write_record(rec);
  return out;
}

StepOutcome RankEngine::catch_up(const QuorumDecision& d) {
  const Scenario& s = cfg_.scenario;
  const std::uint64_t n = d.target_step;
  const auto t0 = SteadyClock::now();
  AttemptRecord rec;
  rec.step = n;
  rec.attempt = attempt_;
  rec.replica_id = cfg_.replica_id;
  rec.rank = cfg_.rank;
  rec.incarnation = cfg_.incarnation;
  rec.phase = "catchup";
  rec.quorum_ms = quorum_ms_;
  rec.healthy_count = static_cast<std::uint32_t>(d.healthy.size());
  rec.generation = d.generation;
  rec.hash_before = shard_state_hash();

  std::optional<ShardState> fetched;
  if (n > 0) {
    FetchSpec fs;
    fs.self_replica = cfg_.replica_id;
    fs.incarnation = cfg_.incarnation;
    fs.rank = cfg_.rank;
    fs.step = n - 1;
    for (auto id : d.healthy) fs.donors.push_back({id, cfg_.endpoints.at(id).at(cfg_.rank)});
    fs.deadline = deadline_after(s.timeouts.join_wait_limit);
    fs.kill_switch = &kill_switch_;
    fs.per_donor_timeout = s.timeouts.join_wait_limit;
    const auto f0 = SteadyClock::now();
    try {
      auto got = fetch_state_p2p(fs);
      rec.fetch_ms = ms_since(f0);
      rec.event = "fetched step " + std::to_string(n - 1) + " from replica " +
                  std::to_string(got.donor);
      if (got.shard.offset != shards_.offset(cfg_.rank) ||
          got.shard.params.size() != shards_.length(cfg_.rank)) {
        throw Error(Reason::kProtocolViolation, "fetched shard has the wrong geometry");
      }
      fetched = std::move(got.shard);
    } catch (const Error& e) {
      rec.fetch_ms = ms_since(f0);
      rec.event = std::string("fetch_failed: ") + e.what();
    }
  }

  std::vector<float> zeros(shards_.length(cfg_.rank), 0.0f);
  const bool ok = run_ftar(d, zeros, rec);
  const bool commit = two_phase_commit(n, ok && fetched.has_value(), false, 0);
  StepOutcome out;
  out.step = n;
  out.healthy_count = rec.healthy_count;
  if (commit) {
    std::copy(fetched->params.begin(), fetched->params.end(),
              model_.params.begin() + static_cast<std::ptrdiff_t>(shards_.offset(cfg_.rank)));
    momentum_ = fetched->momentum;
    step_count_ = fetched->step_count;
    apply_update(zeros, d);
    const auto latest = loader_log_->latest();
    const auto it = latest.find(cfg_.replica_id);
    cursor_ = it == latest.end() ? 0 : it->second.cursor;
    after_commit(d);
    out.kind = StepOutcome::Kind::kCommitted;
    rec.outcome = "committed";
    rec.eval_loss = eval_loss();
  } else {
    out.kind = StepOutcome::Kind::kLeftBehind;
    rec.outcome = "left_behind";
  }
  rec.cursor = cursor_;
  rec.hash_after = shard_state_hash();
  rec.step_ms = ms_since(t0);
  write_record(rec);
  return out;
}

void RankEngine::write_final() {
  std::ofstream out(rank_final_path(cfg_.run_dir, cfg_.replica_id, cfg_.rank), std::ios::trunc);
  out << "replica " << cfg_.replica_id << "\n"
      << "rank " << cfg_.rank << "\n"
      << "incarnation " << cfg_.incarnation << "\n"
      << "next_step " << next_step_ << "\n"
      << "step_count " << step_count_ << "\n"
      << "cursor " << cursor_ << "\n"
      << "shard_hash " << shard_state_hash() << "\n"
      << "params_hash " << full_params_hash() << "\n"
      << "eval_loss " << std::setprecision(9) << eval_loss() << "\n";
}

void RankEngine::run() {
  setup();
  const Scenario& s = cfg_.scenario;
  while (true) {
    if (have_state_ && next_step_ >= s.total_steps) break;
    if (have_state_ && s.halt_at_step && next_step_ >= *s.halt_at_step) break;
    const auto tq = SteadyClock::now();
    const QuorumDecision d = await_decision();
    quorum_ms_ = ms_since(tq);
    attempt_ = d.target_step == last_target_ ? attempt_ + 1 : 0;
    last_target_ = d.target_step;
    clock_->step.store(d.target_step);
    clock_->attempt.store(attempt_);

    StepOutcome out;
    arm_watchdog();
    if (d.is_healthy(cfg_.replica_id) && have_state_ && d.target_step == next_step_) {
      out = train_step(d);
    } else if (d.is_behind(cfg_.replica_id) || d.is_healthy(cfg_.replica_id)) {
      out = catch_up(d);
    } else {
      disarm_watchdog();
      continue;
    }
    disarm_watchdog();
    if (out.kind == StepOutcome::Kind::kCommitted) {
      consecutive_retries_ = 0;
    } else if (++consecutive_retries_ >= s.retry_budget) {
      throw ReplicaFailed("step " + std::to_string(out.step) + " retried " +
                          std::to_string(consecutive_retries_) + " times");
    }
  }
  writer_.wait();
  write_final();
}

int run_rank_process(const RankConfig& cfg) {
  try {
    RankEngine engine(cfg);
    engine.run();
    return 0;
  } catch (const ConfigError& e) {
    std::cerr << "rank " << cfg.replica_id << "/" << cfg.rank << ": config error: " << e.what()
              << "\n";
    return 2;
  } catch (const std::exception& e) {
    std::cerr << "rank " << cfg.replica_id << "/" << cfg.rank << ": " << e.what() << "\n";
    return 4;
  }
}

}  // namespace paft
