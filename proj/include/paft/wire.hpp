// SPDX-License-Identifier: Apache-2.0
#pragma once

// Little-endian framing shared by every control- and data-plane message:
//   [u32 total_len][u8 msg_type][u64 step][u64 seq][payload]
// where total_len = 1 + 8 + 8 + len(payload).

#include <bit>
#include <cstddef>
#include <cstdint>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "paft/error.hpp"

namespace paft::wire {

static_assert(std::endian::native == std::endian::little,
              "float payloads are copied verbatim; big-endian hosts need byte swaps");

enum class MsgType : std::uint8_t {
  kChunkData = 0x01,
  kChunkAck = 0x02,
  kQuorumReport = 0x10,
  kQuorumDecision = 0x11,
  kPrepare = 0x20,
  kPrepared = 0x21,
  kCommit = 0x22,
  kRetry = 0x23,
  kFetchStateReq = 0x30,
  kFetchStateResp = 0x31,
  kHeartbeat = 0x40,
};

bool is_known_type(std::uint8_t tag) noexcept;
std::string_view to_string(MsgType type) noexcept;

inline constexpr std::size_t kLengthPrefixBytes = 4;
inline constexpr std::size_t kHeaderBytes = 1 + 8 + 8;
/// Larger declared lengths are treated as stream corruption.
inline constexpr std::size_t kMaxFrameBytes = (std::size_t{1} << 30) + 4096;

struct Frame {
  MsgType type = MsgType::kHeartbeat;
  std::uint64_t step = 0;
  std::uint64_t seq = 0;
  std::vector<std::byte> payload;
};

class ByteWriter {
 public:
  ByteWriter() = default;
  explicit ByteWriter(std::size_t reserve) { buf_.reserve(reserve); }

  void u8(std::uint8_t v) { buf_.push_back(static_cast<std::byte>(v)); }
  void u32(std::uint32_t v);
  void u64(std::uint64_t v);
  void bytes(std::span<const std::byte> b) { buf_.insert(buf_.end(), b.begin(), b.end()); }
  void floats(std::span<const float> f) { bytes(std::as_bytes(f)); }

  std::vector<std::byte>& buffer() { return buf_; }
  std::vector<std::byte> take() { return std::move(buf_); }

 private:
  std::vector<std::byte> buf_;
};

/// Bounds-checked reader. Any over-read is a protocol violation.
class ByteReader {
 public:
  explicit ByteReader(std::span<const std::byte> data) : data_(data) {}

  std::uint8_t u8();
  std::uint32_t u32();
  std::uint64_t u64();
  std::span<const std::byte> bytes(std::size_t n);
  std::vector<float> floats(std::size_t count);
  void read_floats(std::span<float> out);

  std::size_t remaining() const noexcept { return data_.size() - pos_; }
  void expect_end() const;

 private:
  void need(std::size_t n) const;
  std::span<const std::byte> data_;
  std::size_t pos_ = 0;
};

std::vector<std::byte> encode_frame(const Frame& frame);
/// Appends the encoded frame to `out`.
void encode_frame_into(const Frame& frame, std::vector<std::byte>& out);

/// Incremental decoder for a byte stream. Validates the length prefix and tag
/// before a frame is surfaced.
class FrameDecoder {
 public:
  void feed(std::span<const std::byte> data);
  /// Returns the next complete frame, if buffered. Throws
  /// Error(kProtocolViolation) on a malformed prefix or unknown tag.
  std::optional<Frame> next();
  std::size_t buffered() const noexcept { return buf_.size() - start_; }

 private:
  std::vector<std::byte> buf_;
  std::size_t start_ = 0;
};

// ---- payloads --------------------------------------------------------------

/// CHUNK_DATA: [u32 generation][u32 partition_idx][u32 ring_step][u32 chunk_idx]
///             [u32 data_len][data bytes].  CHUNK_ACK carries the same header
/// with data_len echoed and no data.
struct ChunkHeader {
  std::uint32_t generation = 0;
  std::uint32_t partition = 0;
  std::uint32_t ring_step = 0;
  std::uint32_t chunk = 0;
  std::uint32_t data_len = 0;

  bool operator==(const ChunkHeader&) const = default;
};
inline constexpr std::size_t kChunkHeaderBytes = 20;

std::vector<std::byte> encode_chunk(const ChunkHeader& h, std::span<const float> data);
std::vector<std::byte> encode_chunk_ack(const ChunkHeader& h);
/// Parses the header; `data` is left pointing at the payload bytes.
ChunkHeader decode_chunk(std::span<const std::byte> payload,
                         std::span<const std::byte>* data = nullptr);

enum class Purpose : std::uint8_t { kRing = 1, kIntra = 2, kFetch = 3, kQuorum = 4 };

/// HEARTBEAT sent as the first frame of every connection:
/// [u8 purpose][u32 replica_id][u32 rank][u32 generation][u32 incarnation]
struct Hello {
  Purpose purpose = Purpose::kRing;
  std::uint32_t replica_id = 0;
  std::uint32_t rank = 0;
  std::uint32_t generation = 0;
  std::uint32_t incarnation = 0;

  bool operator==(const Hello&) const = default;
};
std::vector<std::byte> encode_hello(const Hello& h);
Hello decode_hello(std::span<const std::byte> payload);

/// PREPARE / PREPARED / COMMIT / RETRY: [u64 step][u32 incarnation][u8 vote]
struct Vote {
  std::uint64_t step = 0;
  std::uint32_t incarnation = 0;
  std::uint8_t vote = 0;

  bool operator==(const Vote&) const = default;
};
std::vector<std::byte> encode_vote(const Vote& v);
Vote decode_vote(std::span<const std::byte> payload);

/// FETCH_STATE_REQ: [u64 step][u32 rank][u32 shard_offset][u32 shard_len_hint]
struct FetchRequest {
  std::uint64_t step = 0;
  std::uint32_t rank = 0;
  std::uint32_t shard_offset = 0;
  std::uint32_t shard_len_hint = 0;

  bool operator==(const FetchRequest&) const = default;
};
std::vector<std::byte> encode_fetch_request(const FetchRequest& r);
FetchRequest decode_fetch_request(std::span<const std::byte> payload);

/// FETCH_STATE_RESP: [u64 step][u32 rank][u32 data_len][shard bytes]
struct FetchResponse {
  std::uint64_t step = 0;
  std::uint32_t rank = 0;
  std::vector<std::byte> data;
};
std::vector<std::byte> encode_fetch_response(const FetchResponse& r);
FetchResponse decode_fetch_response(std::span<const std::byte> payload);

}  // namespace paft::wire
