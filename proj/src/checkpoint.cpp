// SPDX-License-Identifier: Apache-2.0
#include "paft/checkpoint.hpp"

#include <fcntl.h>
#include <unistd.h>

#include <algorithm>
#include <cerrno>
#include <charconv>
#include <cstring>
#include <fstream>
#include <sstream>

#include "paft/model.hpp"
#include "paft/wire.hpp"

namespace paft {

namespace fs = std::filesystem;

namespace {

constexpr std::uint32_t kShardMagic = 0x44485350;  // "PSHD"
constexpr char kManifestMagic[] = "PAFTCKPT";

std::vector<std::byte> read_file(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  if (!in) throw CheckpointError("cannot open " + p.string());
  in.seekg(0, std::ios::end);
  const auto size = static_cast<std::size_t>(in.tellg());
  in.seekg(0);
  std::vector<std::byte> buf(size);
  in.read(reinterpret_cast<char*>(buf.data()), static_cast<std::streamsize>(size));
  if (!in) throw CheckpointError("short read " + p.string());
  return buf;
}

void write_file(const fs::path& p, std::span<const std::byte> data) {
  std::ofstream out(p, std::ios::binary | std::ios::trunc);
  out.write(reinterpret_cast<const char*>(data.data()), static_cast<std::streamsize>(data.size()));
  out.flush();
  if (!out) throw CheckpointError("write failed " + p.string());
}

std::uint64_t parse_u64(std::string_view s) {
  std::uint64_t v = 0;
  auto [ptr, ec] = std::from_chars(s.data(), s.data() + s.size(), v);
  if (ec != std::errc() || ptr != s.data() + s.size()) {
    throw CheckpointError("bad number '" + std::string(s) + "'");
  }
  return v;
}

}  // namespace

// ---- shards ----------------------------------------------------------------

std::vector<std::byte> serialize_shard(const ShardState& s) {
  if (s.params.size() != s.momentum.size()) {
    throw ConfigError("shard params and momentum differ in length");
  }
  wire::ByteWriter w(48 + 8 * s.params.size());
  w.u32(kShardMagic);
  w.u32(kCheckpointVersion);
  w.u64(s.step);
  w.u32(s.rank);
  w.u64(s.offset);
  w.u64(s.step_count);
  w.u64(s.params.size());
  w.floats(s.params);
  w.floats(s.momentum);
  const std::uint64_t sum = fnv1a(w.buffer());
  w.u64(sum);
  return w.take();
}

ShardState deserialize_shard(std::span<const std::byte> bytes) {
  if (bytes.size() < 8) throw CheckpointError("shard too short");
  const auto body = bytes.first(bytes.size() - 8);
  wire::ByteReader tail(bytes.last(8));
  if (tail.u64() != fnv1a(body)) throw CheckpointError("shard checksum mismatch");
  try {
    wire::ByteReader r(body);
    if (r.u32() != kShardMagic) throw CheckpointError("bad shard magic");
    if (r.u32() != kCheckpointVersion) throw CheckpointError("unsupported shard version");
    ShardState s;
    s.step = r.u64();
    s.rank = r.u32();
    s.offset = r.u64();
    s.step_count = r.u64();
    const std::uint64_t n = r.u64();
    if (n > r.remaining() / 8) throw CheckpointError("bad shard length");
    s.params = r.floats(n);
    s.momentum = r.floats(n);
    r.expect_end();
    return s;
  } catch (const Error& e) {
    throw CheckpointError(std::string("malformed shard: ") + e.what());
  }
}

std::uint64_t shard_hash(const ShardState& s) noexcept {
  std::uint64_t h = hash_floats(s.params);
  h = hash_floats(s.momentum, h);
  const auto sc = s.step_count;
  return fnv1a(std::as_bytes(std::span(&sc, 1)), h);
}

// ---- persistent checkpoints ------------------------------------------------

bool is_checkpoint_step(std::uint64_t step, std::uint64_t interval) noexcept {
  return interval > 0 && step > 0 && step % interval == 0;
}

fs::path checkpoint_dir(const fs::path& root, std::uint64_t step) {
  return root / ("ckpt_" + std::to_string(step));
}

void write_checkpoint(const fs::path& root, const Checkpoint& ckpt) {
  std::uint64_t covered = 0;
  for (std::size_t r = 0; r < ckpt.shards.size(); ++r) {
    const auto& s = ckpt.shards[r];
    if (s.rank != r || s.offset != covered || s.step != ckpt.step) {
      throw ConfigError("checkpoint shards must be ordered, contiguous and of one step");
    }
    covered += s.params.size();
  }
  if (covered != ckpt.param_count) throw ConfigError("checkpoint shards do not tile the model");

  fs::create_directories(root);
  const fs::path final_dir = checkpoint_dir(root, ckpt.step);
  fs::path tmp = final_dir;
  tmp += ".tmp";
  fs::remove_all(tmp);
  fs::create_directories(tmp);

  std::ostringstream manifest;
  manifest << kManifestMagic << "\n"
           << "version " << kCheckpointVersion << "\n"
           << "step " << ckpt.step << "\n"
           << "param_count " << ckpt.param_count << "\n"
           << "shards " << ckpt.shards.size() << "\n";
  for (const auto& s : ckpt.shards) {
    const std::string name = "shard_" + std::to_string(s.rank) + ".bin";
    const auto bytes = serialize_shard(s);
    write_file(tmp / name, bytes);
    manifest << "shard " << s.rank << " " << s.offset << " " << s.params.size() << " " << name
             << " " << fnv1a(bytes) << "\n";
  }
  const std::string text = manifest.str();
  write_file(tmp / "MANIFEST", std::as_bytes(std::span(text.data(), text.size())));
  fs::remove_all(final_dir);
  fs::rename(tmp, final_dir);
}

std::vector<std::uint64_t> list_checkpoints(const fs::path& root) {
  std::vector<std::uint64_t> steps;
  std::error_code ec;
  for (const auto& e : fs::directory_iterator(root, ec)) {
    const std::string name = e.path().filename().string();
    if (!e.is_directory() || name.rfind("ckpt_", 0) != 0) continue;
    if (name.size() > 4 && name.substr(name.size() - 4) == ".tmp") continue;
    if (!fs::exists(e.path() / "MANIFEST")) continue;
    try {
      steps.push_back(parse_u64(std::string_view(name).substr(5)));
    } catch (const CheckpointError&) {
    }
  }
  std::sort(steps.begin(), steps.end());
  return steps;
}

Checkpoint read_checkpoint(const fs::path& root, std::optional<std::uint64_t> step) {
  if (!step) {
    const auto all = list_checkpoints(root);
    if (all.empty()) throw CheckpointError("no checkpoint under " + root.string());
    step = all.back();
  }
  const fs::path dir = checkpoint_dir(root, *step);
  std::ifstream in(dir / "MANIFEST");
  if (!in) throw CheckpointError("missing manifest in " + dir.string());

  std::string line;
  std::getline(in, line);
  if (line != kManifestMagic) throw CheckpointError("bad manifest magic in " + dir.string());
  auto field = [&](const std::string& key) {
    std::string k, v;
    if (!std::getline(in, line)) throw CheckpointError("truncated manifest");
    std::istringstream ls(line);
    ls >> k >> v;
    if (k != key) throw CheckpointError("manifest: expected " + key);
    return parse_u64(v);
  };
  if (field("version") != kCheckpointVersion) throw CheckpointError("unsupported version");
  Checkpoint ckpt;
  ckpt.step = field("step");
  ckpt.param_count = field("param_count");
  const auto shards = field("shards");
  std::uint64_t covered = 0;
  for (std::uint64_t i = 0; i < shards; ++i) {
    if (!std::getline(in, line)) throw CheckpointError("truncated shard table");
    std::istringstream ls(line);
    std::string tag, rank, offset, len, name, sum;
    ls >> tag >> rank >> offset >> len >> name >> sum;
    if (tag != "shard") throw CheckpointError("bad shard table entry");
    const auto bytes = read_file(dir / name);
    if (fnv1a(bytes) != parse_u64(sum)) throw CheckpointError("shard file checksum mismatch");
    ShardState s = deserialize_shard(bytes);
    if (s.rank != parse_u64(rank) || s.offset != parse_u64(offset) ||
        s.params.size() != parse_u64(len) || s.step != ckpt.step || s.offset != covered) {
      throw CheckpointError("shard table disagrees with shard file " + name);
    }
    covered += s.params.size();
    ckpt.shards.push_back(std::move(s));
  }
  if (covered != ckpt.param_count) throw CheckpointError("shards do not cover param_count");
  return ckpt;
}

void CheckpointWriter::submit(fs::path root, Checkpoint ckpt) {
  wait();
  worker_ = std::jthread([this, root = std::move(root), ckpt = std::move(ckpt)] {
    try {
      write_checkpoint(root, ckpt);
      std::lock_guard lk(mu_);
      error_.reset();
    } catch (const std::exception& e) {
      std::lock_guard lk(mu_);
      error_ = e.what();
    }
  });
}

void CheckpointWriter::wait() {
  if (worker_.joinable()) worker_.join();
}

std::optional<std::string> CheckpointWriter::last_error() const {
  std::lock_guard lk(mu_);
  return error_;
}

// ---- loader_state ----------------------------------------------------------

std::string format_record(const LoaderStateRecord& r) {
  return std::to_string(r.step) + "," + std::to_string(r.replica_id) + "," +
         std::to_string(r.cursor) + "\n";
}

void LoaderStateLog::append(const LoaderStateRecord& r) const {
  const std::string line = format_record(r);
  const int fd = ::open(path_.c_str(), O_WRONLY | O_CREAT | O_APPEND | O_CLOEXEC, 0644);
  if (fd < 0) {
    throw Error(Reason::kPeerDown, "loader_state open: " + std::string(strerror(errno)));
  }
  const ssize_t n = ::write(fd, line.data(), line.size());
  ::close(fd);
  if (n != static_cast<ssize_t>(line.size())) {
    throw Error(Reason::kPeerDown, "loader_state append failed");
  }
}

std::vector<LoaderStateRecord> LoaderStateLog::read() const {
  std::vector<LoaderStateRecord> out;
  std::ifstream in(path_);
  if (!in) return out;
  std::string text((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
  std::size_t pos = 0;
  while (true) {
    const auto nl = text.find('\n', pos);
    if (nl == std::string::npos) break;  // torn tail
    const std::string_view line(text.data() + pos, nl - pos);
    pos = nl + 1;
    const auto c1 = line.find(',');
    const auto c2 = line.find(',', c1 + 1);
    if (c1 == std::string_view::npos || c2 == std::string_view::npos) {
      throw CheckpointError("malformed loader_state line '" + std::string(line) + "'");
    }
    LoaderStateRecord r;
    r.step = parse_u64(line.substr(0, c1));
    r.replica_id = static_cast<std::uint32_t>(parse_u64(line.substr(c1 + 1, c2 - c1 - 1)));
    r.cursor = parse_u64(line.substr(c2 + 1));
    out.push_back(r);
  }
  return out;
}

std::map<std::uint32_t, LoaderStateRecord> LoaderStateLog::latest(
    std::optional<std::uint64_t> max_step) const {
  std::map<std::uint32_t, LoaderStateRecord> out;
  for (const auto& r : read()) {
    if (max_step && r.step > *max_step) continue;
    auto it = out.find(r.replica_id);
    if (it == out.end() || it->second.step <= r.step) out[r.replica_id] = r;
  }
  return out;
}

void LoaderStateLog::truncate_after(std::uint64_t step) const {
  std::string kept;
  for (const auto& r : read()) {
    if (r.step <= step) kept += format_record(r);
  }
  fs::path tmp = path_;
  tmp += ".tmp";
  write_file(tmp, std::as_bytes(std::span(kept.data(), kept.size())));
  fs::rename(tmp, path_);
}

// ---- snapshots -------------------------------------------------------------

void SnapshotStore::publish(const ShardState& s) {
  auto bytes = std::make_shared<const std::vector<std::byte>>(serialize_shard(s));
  std::lock_guard lk(mu_);
  step_ = s.step;
  bytes_ = std::move(bytes);
}

std::shared_ptr<const std::vector<std::byte>> SnapshotStore::get(std::uint64_t step) const {
  std::lock_guard lk(mu_);
  if (!step_ || *step_ != step) {
    throw Error(Reason::kFetchTooOld,
                "snapshot for step " + std::to_string(step) + " not retained" +
                    (step_ ? " (have " + std::to_string(*step_) + ")" : ""));
  }
  return bytes_;
}

std::optional<std::uint64_t> SnapshotStore::latest_step() const {
  std::lock_guard lk(mu_);
  return step_;
}

Acceptor::FetchHandler make_fetch_handler(std::shared_ptr<const SnapshotStore> store) {
  return [store](Connection& conn, const wire::Hello&, std::stop_token st) {
    while (!st.stop_requested()) {
      auto f = conn.poll_recv(Millis{100});
      if (!f) continue;
      if (f->type != wire::MsgType::kFetchStateReq) {
        throw Error(Reason::kProtocolViolation, "expected FETCH_STATE_REQ");
      }
      const auto req = wire::decode_fetch_request(f->payload);
      wire::FetchResponse resp;
      resp.step = req.step;
      resp.rank = req.rank;
      try {
        const auto bytes = store->get(req.step);
        resp.data.assign(bytes->begin(), bytes->end());
      } catch (const Error&) {
        // Empty data signals fetch_too_old.
      }
      wire::Frame out;
      out.type = wire::MsgType::kFetchStateResp;
      out.step = req.step;
      out.seq = f->seq;
      out.payload = wire::encode_fetch_response(resp);
      conn.send(out);
    }
  };
}

std::size_t first_donor(std::uint32_t rank, std::size_t donors) {
  if (donors == 0) throw ConfigError("no donors to fetch from");
  return rank % donors;
}

FetchOutcome fetch_state_p2p(const FetchSpec& spec) {
  const auto start = SteadyClock::now();
  const std::size_t n = spec.donors.size();
  std::size_t idx = first_donor(spec.rank, n);
  std::optional<Error> last;
  FetchOutcome out;
  for (std::size_t tried = 0; tried < n; ++tried, idx = (idx + 1) % n) {
    if (SteadyClock::now() >= spec.deadline) break;
    const auto& donor = spec.donors[idx];
    ++out.attempts;
    try {
      const Deadline d = std::min(spec.deadline, deadline_after(spec.per_donor_timeout));
      auto conn = dial(donor.endpoint,
                       wire::Hello{wire::Purpose::kFetch, spec.self_replica, spec.rank, 0,
                                   spec.incarnation},
                       d, spec.kill_switch);
      wire::Frame req;
      req.type = wire::MsgType::kFetchStateReq;
      req.step = spec.step;
      req.payload = wire::encode_fetch_request(wire::FetchRequest{spec.step, spec.rank, 0, 0});
      conn->send(req, std::max(remaining(d), Millis{1}));
      const auto f = conn->recv(std::max(remaining(d), Millis{1}));
      if (f.type != wire::MsgType::kFetchStateResp) {
        throw Error(Reason::kProtocolViolation, "expected FETCH_STATE_RESP");
      }
      auto resp = wire::decode_fetch_response(f.payload);
      if (resp.data.empty()) {
        throw Error(Reason::kFetchTooOld, "donor " + std::to_string(donor.replica_id) +
                                              " no longer holds step " +
                                              std::to_string(spec.step));
      }
      ShardState s;
      try {
        s = deserialize_shard(resp.data);
      } catch (const CheckpointError& e) {
        throw Error(Reason::kProtocolViolation, e.what());
      }
      if (resp.step != spec.step || s.step != spec.step || s.rank != spec.rank) {
        throw Error(Reason::kProtocolViolation, "fetched shard does not match request");
      }
      out.shard = std::move(s);
      out.donor = donor.replica_id;
      out.elapsed = std::chrono::duration_cast<Millis>(SteadyClock::now() - start);
      return out;
    } catch (const Error& e) {
      last = e;
    }
  }
  if (last) throw *last;
  throw Error(Reason::kTimeout, "state fetch deadline passed");
}

}  // namespace paft
