// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cstdint>

namespace paft {

/// SplitMix64 finalizer. Bijective on 64-bit words.
constexpr std::uint64_t mix64(std::uint64_t z) noexcept {
  z += 0x9E3779B97F4A7C15ULL;
  z = (z ^ (z >> 30)) * 0xBF58476D1CE4E5B9ULL;
  z = (z ^ (z >> 27)) * 0x94D049BB133111EBULL;
  return z ^ (z >> 31);
}

/// Counter-based generator: value i of stream (seed, stream_id) is a pure
/// function of the three integers, so any element can be regenerated without
/// replaying the stream. Portable across platforms (integer ops only until the
/// final float conversion, which is exact).
class CounterRng {
 public:
  constexpr CounterRng(std::uint64_t seed, std::uint64_t stream_id) noexcept
      : key_(mix64(seed ^ mix64(stream_id ^ 0xA5A5A5A5DEADBEEFULL))) {}

  constexpr std::uint64_t bits(std::uint64_t index) const noexcept {
    return mix64(key_ ^ mix64(index));
  }

  /// Uniform in [0, 1) with 24 bits of mantissa.
  constexpr float uniform01(std::uint64_t index) const noexcept {
    return static_cast<float>(bits(index) >> 40) * (1.0f / 16777216.0f);
  }

  /// Uniform in [-1, 1).
  constexpr float symmetric(std::uint64_t index) const noexcept {
    return 2.0f * uniform01(index) - 1.0f;
  }

 private:
  std::uint64_t key_;
};

}  // namespace paft
