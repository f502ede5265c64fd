// SPDX-License-Identifier: Apache-2.0
#pragma once

// Independent reference computations for tests.

#include <cstdint>
#include <random>
#include <vector>

#include "paft/ftar.hpp"
#include "paft/model.hpp"

namespace paft::testing {

/// Sum of every member's input with the ring's association order: segment j
/// of each partition is folded left starting at member j, then j+1, ...
std::vector<float> ring_order_sum(const std::vector<std::vector<float>>& inputs,
                                  const PartitionPlan& plan);

/// Elementwise sum in double, member order.
std::vector<double> direct_sum(const std::vector<std::vector<float>>& inputs);

std::vector<float> random_floats(std::mt19937_64& gen, std::size_t n, float lo = -1.0f,
                                 float hi = 1.0f);

/// Mean squared-error loss of the MLP evaluated entirely in double.
double reference_loss(const ModelLayout& layout, const std::vector<double>& params,
                      const Batch& batch);

struct GradCheck {
  std::size_t checked = 0;
  double max_rel_err = 0.0;
  std::size_t worst_index = 0;
};

/// Central differences of reference_loss at `samples` random coordinates
/// against forward_backward's gradient. rel = |fd - g| / max(|fd|, |g|, floor).
GradCheck finite_difference_check(const ModelState& model, const Batch& batch,
                                  std::size_t samples, std::uint64_t seed, double eps = 1e-5,
                                  double floor = 1e-4);

}  // namespace paft::testing
