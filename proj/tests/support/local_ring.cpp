// SPDX-License-Identifier: Apache-2.0
#include "local_ring.hpp"

#include <numeric>

namespace paft::testing {

bool RingRun::ok() const {
  for (const auto& e : errors) {
    if (e) return false;
  }
  return true;
}

std::vector<std::uint32_t> all_positions(const LoopbackRing& ring) {
  std::vector<std::uint32_t> p(ring.size());
  std::iota(p.begin(), p.end(), 0u);
  return p;
}

RingRun ring_all_reduce(LoopbackRing& ring, std::vector<std::vector<float>> inputs,
                        std::uint64_t step, std::vector<std::uint32_t> positions) {
  if (positions.empty()) positions = all_positions(ring);
  std::vector<std::size_t> slot(ring.size(), 0);
  for (std::size_t k = 0; k < positions.size(); ++k) {
    slot[positions[k]] = k;
    ring.comm(positions[k]).reset_stats();
  }
  RingRun run;
  run.errors = ring.run(positions, [&](std::uint32_t i) {
    ring.comm(i).all_reduce(inputs[slot[i]], step);
  });
  for (auto p : positions) run.stats.push_back(ring.comm(p).stats());
  run.outputs = std::move(inputs);
  return run;
}

}  // namespace paft::testing
