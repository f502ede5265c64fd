// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <exception>
#include <vector>

#include "paft/ftar.hpp"

namespace paft::testing {

struct RingRun {
  std::vector<std::vector<float>> outputs;  // per listed position
  std::vector<std::exception_ptr> errors;
  std::vector<FtarStats> stats;
  bool ok() const;
};

/// One all-reduce over the listed positions (all when empty). inputs[k]
/// belongs to positions[k]. The ring must already be configured.
RingRun ring_all_reduce(LoopbackRing& ring, std::vector<std::vector<float>> inputs,
                        std::uint64_t step, std::vector<std::uint32_t> positions = {});

std::vector<std::uint32_t> all_positions(const LoopbackRing& ring);

}  // namespace paft::testing
