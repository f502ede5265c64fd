// SPDX-License-Identifier: Apache-2.0
#pragma once

// Deterministic toy training workload: a 2-layer tanh MLP regressing a fixed
// random linear teacher. Everything here is a pure function of its arguments.

#include <cstddef>
#include <cstdint>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include "paft/error.hpp"

namespace paft {

struct ModelDims {
  std::size_t input = 16;
  std::size_t hidden = 32;
  std::size_t output = 4;
};

struct TensorSlot {
  std::string name;
  std::size_t offset = 0;
  std::vector<std::size_t> shape;

  std::size_t size() const noexcept;
};

/// Flat layout of W1[hidden,input], b1[hidden], W2[output,hidden], b2[output].
struct ModelLayout {
  ModelDims dims;
  std::vector<TensorSlot> slots;

  static ModelLayout mlp(const ModelDims& dims);
  std::size_t param_count() const noexcept;
  const TensorSlot& slot(std::string_view name) const;
};

struct ModelState {
  ModelLayout layout;
  std::vector<float> params;
};

struct OptimizerState {
  std::vector<float> momentum;
  std::uint64_t step_count = 0;
};

struct LoaderState {
  std::uint32_t replica_id = 0;
  std::uint64_t cursor = 0;
};

/// Parameters of the synthetic data stream shared by every replica.
struct DataSpec {
  std::uint64_t seed = 1;
  std::size_t micro_batch = 8;
  std::size_t input_dim = 16;
  std::size_t output_dim = 4;
  float noise = 0.05f;
};

struct Batch {
  std::uint32_t replica_id = 0;
  std::uint64_t cursor = 0;
  std::size_t rows = 0;
  std::size_t input_dim = 0;
  std::size_t output_dim = 0;
  std::vector<float> inputs;   // rows x input_dim, row-major
  std::vector<float> targets;  // rows x output_dim, row-major
};

struct LossAndGrad {
  float loss = 0.0f;
  std::vector<float> grad;
};

enum class LrIntervention { kNone, kLinear, kSqrt };

struct LrPolicy {
  float initial_lr = 0.05f;
  /// 0 disables decay. Otherwise lr falls linearly to final_fraction * initial
  /// over this many steps and stays there.
  std::uint64_t decay_horizon = 0;
  float final_fraction = 0.1f;
  LrIntervention intervention = LrIntervention::kNone;
};

inline constexpr float kMomentumBeta = 0.9f;

class InvalidQuorum : public ConfigError {
 public:
  using ConfigError::ConfigError;
};

std::pair<ModelState, OptimizerState> init_model(std::uint64_t seed, const ModelDims& dims);

/// Mean over the micro-batch of 0.5 * ||y - t||^2.
LossAndGrad forward_backward(const ModelState& model, const Batch& batch);
float evaluate_loss(const ModelState& model, const Batch& batch);

/// SGD with momentum on a (possibly sharded) slice of the state:
///   m <- beta * m + grad;  params <- params - lr * m
/// Throws Error(kNumerical) on non-finite gradients.
void sgd_momentum_step(std::span<float> params, std::span<float> momentum,
                       std::span<const float> grad, float lr,
                       float beta = kMomentumBeta);

std::pair<ModelState, OptimizerState> optimizer_step(ModelState model, OptimizerState opt,
                                                     std::span<const float> grad, float lr,
                                                     float beta = kMomentumBeta);

float lr_factor(LrIntervention intervention, std::uint32_t healthy, std::uint32_t total);
float base_lr(const LrPolicy& policy, std::uint64_t step);
float compute_lr(const LrPolicy& policy, std::uint64_t step, std::uint32_t healthy,
                 std::uint32_t total);

Batch make_batch(const DataSpec& spec, std::uint32_t replica_id, std::uint64_t cursor);
std::pair<Batch, LoaderState> next_batch(const LoaderState& loader, const DataSpec& spec);

std::uint64_t fnv1a(std::span<const std::byte> bytes,
                    std::uint64_t seed = 0xcbf29ce484222325ULL) noexcept;
std::uint64_t hash_floats(std::span<const float> v,
                          std::uint64_t seed = 0xcbf29ce484222325ULL) noexcept;

std::string_view to_string(LrIntervention intervention) noexcept;
LrIntervention parse_intervention(std::string_view name);

}  // namespace paft
