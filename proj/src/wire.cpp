// SPDX-License-Identifier: Apache-2.0
#include "paft/wire.hpp"

#include <cstring>

namespace paft::wire {

bool is_known_type(std::uint8_t tag) noexcept {
  switch (tag) {
    case 0x01: case 0x02: case 0x10: case 0x11: case 0x20: case 0x21:
    case 0x22: case 0x23: case 0x30: case 0x31: case 0x40:
      return true;
    default:
      return false;
  }
}

std::string_view to_string(MsgType type) noexcept {
  switch (type) {
    case MsgType::kChunkData: return "CHUNK_DATA";
    case MsgType::kChunkAck: return "CHUNK_ACK";
    case MsgType::kQuorumReport: return "QUORUM_REPORT";
    case MsgType::kQuorumDecision: return "QUORUM_DECISION";
    case MsgType::kPrepare: return "PREPARE";
    case MsgType::kPrepared: return "PREPARED";
    case MsgType::kCommit: return "COMMIT";
    case MsgType::kRetry: return "RETRY";
    case MsgType::kFetchStateReq: return "FETCH_STATE_REQ";
    case MsgType::kFetchStateResp: return "FETCH_STATE_RESP";
    case MsgType::kHeartbeat: return "HEARTBEAT";
  }
  return "UNKNOWN";
}

void ByteWriter::u32(std::uint32_t v) {
  for (int i = 0; i < 4; ++i) buf_.push_back(static_cast<std::byte>(v >> (8 * i)));
}

void ByteWriter::u64(std::uint64_t v) {
  for (int i = 0; i < 8; ++i) buf_.push_back(static_cast<std::byte>(v >> (8 * i)));
}

void ByteReader::need(std::size_t n) const {
  if (remaining() < n) {
    throw Error(Reason::kProtocolViolation,
                "payload truncated: need " + std::to_string(n) + " bytes, have " +
                    std::to_string(remaining()));
  }
}

std::uint8_t ByteReader::u8() {
  need(1);
  return static_cast<std::uint8_t>(data_[pos_++]);
}

std::uint32_t ByteReader::u32() {
  need(4);
  std::uint32_t v = 0;
  for (int i = 0; i < 4; ++i) v |= static_cast<std::uint32_t>(data_[pos_ + i]) << (8 * i);
  pos_ += 4;
  return v;
}

std::uint64_t ByteReader::u64() {
  need(8);
  std::uint64_t v = 0;
  for (int i = 0; i < 8; ++i) v |= static_cast<std::uint64_t>(data_[pos_ + i]) << (8 * i);
  pos_ += 8;
  return v;
}

std::span<const std::byte> ByteReader::bytes(std::size_t n) {
  need(n);
  auto s = data_.subspan(pos_, n);
  pos_ += n;
  return s;
}

std::vector<float> ByteReader::floats(std::size_t count) {
  std::vector<float> out(count);
  read_floats(out);
  return out;
}

void ByteReader::read_floats(std::span<float> out) {
  auto b = bytes(out.size_bytes());
  if (!b.empty()) std::memcpy(out.data(), b.data(), b.size());
}

void ByteReader::expect_end() const {
  if (remaining() != 0) {
    throw Error(Reason::kProtocolViolation,
                std::to_string(remaining()) + " trailing bytes in payload");
  }
}

void encode_frame_into(const Frame& frame, std::vector<std::byte>& out) {
  const std::size_t body = kHeaderBytes + frame.payload.size();
  out.reserve(out.size() + kLengthPrefixBytes + body);
  ByteWriter w;
  w.buffer().swap(out);
  w.u32(static_cast<std::uint32_t>(body));
  w.u8(static_cast<std::uint8_t>(frame.type));
  w.u64(frame.step);
  w.u64(frame.seq);
  w.bytes(frame.payload);
  w.buffer().swap(out);
}

std::vector<std::byte> encode_frame(const Frame& frame) {
  std::vector<std::byte> out;
  encode_frame_into(frame, out);
  return out;
}

void FrameDecoder::feed(std::span<const std::byte> data) {
  if (start_ > 0 && start_ == buf_.size()) {
    buf_.clear();
    start_ = 0;
  } else if (start_ > (std::size_t{1} << 20) && start_ * 2 > buf_.size()) {
    buf_.erase(buf_.begin(), buf_.begin() + static_cast<std::ptrdiff_t>(start_));
    start_ = 0;
  }
  buf_.insert(buf_.end(), data.begin(), data.end());
}

std::optional<Frame> FrameDecoder::next() {
  if (buffered() < kLengthPrefixBytes) return std::nullopt;
  ByteReader prefix(std::span<const std::byte>(buf_).subspan(start_, kLengthPrefixBytes));
  const std::size_t body = prefix.u32();
  if (body < kHeaderBytes || body > kMaxFrameBytes) {
    throw Error(Reason::kProtocolViolation,
                "bad frame length prefix " + std::to_string(body));
  }
  if (buffered() >= kLengthPrefixBytes + 1) {
    const auto tag = static_cast<std::uint8_t>(buf_[start_ + kLengthPrefixBytes]);
    if (!is_known_type(tag)) {
      throw Error(Reason::kProtocolViolation, "unknown msg_type " + std::to_string(tag));
    }
  }
  if (buffered() < kLengthPrefixBytes + body) return std::nullopt;

  ByteReader r(std::span<const std::byte>(buf_).subspan(start_ + kLengthPrefixBytes, body));
  Frame f;
  f.type = static_cast<MsgType>(r.u8());
  f.step = r.u64();
  f.seq = r.u64();
  auto p = r.bytes(r.remaining());
  f.payload.assign(p.begin(), p.end());
  start_ += kLengthPrefixBytes + body;
  return f;
}

std::vector<std::byte> encode_chunk(const ChunkHeader& h, std::span<const float> data) {
  ByteWriter w(kChunkHeaderBytes + data.size_bytes());
  w.u32(h.generation);
  w.u32(h.partition);
  w.u32(h.ring_step);
  w.u32(h.chunk);
  w.u32(static_cast<std::uint32_t>(data.size_bytes()));
  w.floats(data);
  return w.take();
}

std::vector<std::byte> encode_chunk_ack(const ChunkHeader& h) {
  ByteWriter w(kChunkHeaderBytes);
  w.u32(h.generation);
  w.u32(h.partition);
  w.u32(h.ring_step);
  w.u32(h.chunk);
  w.u32(h.data_len);
  return w.take();
}

ChunkHeader decode_chunk(std::span<const std::byte> payload, std::span<const std::byte>* data) {
  ByteReader r(payload);
  ChunkHeader h;
  h.generation = r.u32();
  h.partition = r.u32();
  h.ring_step = r.u32();
  h.chunk = r.u32();
  h.data_len = r.u32();
  if (data != nullptr) {
    *data = r.bytes(h.data_len);
    r.expect_end();
  }
  return h;
}

std::vector<std::byte> encode_hello(const Hello& h) {
  ByteWriter w(17);
  w.u8(static_cast<std::uint8_t>(h.purpose));
  w.u32(h.replica_id);
  w.u32(h.rank);
  w.u32(h.generation);
  w.u32(h.incarnation);
  return w.take();
}

Hello decode_hello(std::span<const std::byte> payload) {
  ByteReader r(payload);
  Hello h;
  const auto p = r.u8();
  if (p < 1 || p > 4) {
    throw Error(Reason::kProtocolViolation, "unknown connection purpose " + std::to_string(p));
  }
  h.purpose = static_cast<Purpose>(p);
  h.replica_id = r.u32();
  h.rank = r.u32();
  h.generation = r.u32();
  h.incarnation = r.u32();
  r.expect_end();
  return h;
}

std::vector<std::byte> encode_vote(const Vote& v) {
  ByteWriter w(13);
  w.u64(v.step);
  w.u32(v.incarnation);
  w.u8(v.vote);
  return w.take();
}

Vote decode_vote(std::span<const std::byte> payload) {
  ByteReader r(payload);
  Vote v;
  v.step = r.u64();
  v.incarnation = r.u32();
  v.vote = r.u8();
  r.expect_end();
  return v;
}

std::vector<std::byte> encode_fetch_request(const FetchRequest& req) {
  ByteWriter w(20);
  w.u64(req.step);
  w.u32(req.rank);
  w.u32(req.shard_offset);
  w.u32(req.shard_len_hint);
  return w.take();
}

FetchRequest decode_fetch_request(std::span<const std::byte> payload) {
  ByteReader r(payload);
  FetchRequest req;
  req.step = r.u64();
  req.rank = r.u32();
  req.shard_offset = r.u32();
  req.shard_len_hint = r.u32();
  r.expect_end();
  return req;
}

std::vector<std::byte> encode_fetch_response(const FetchResponse& resp) {
  ByteWriter w(16 + resp.data.size());
  w.u64(resp.step);
  w.u32(resp.rank);
  w.u32(static_cast<std::uint32_t>(resp.data.size()));
  w.bytes(resp.data);
  return w.take();
}

FetchResponse decode_fetch_response(std::span<const std::byte> payload) {
  ByteReader r(payload);
  FetchResponse resp;
  resp.step = r.u64();
  resp.rank = r.u32();
  const auto n = r.u32();
  auto b = r.bytes(n);
  resp.data.assign(b.begin(), b.end());
  r.expect_end();
  return resp;
}

}  // namespace paft::wire
