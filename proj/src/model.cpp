// SPDX-License-Identifier: Apache-2.0
#include "paft/model.hpp"

#include <algorithm>
#include <cmath>
#include <cstring>
#include <numeric>

#include "paft/kernels.hpp"
#include "paft/rng.hpp"

namespace paft {

namespace {

constexpr std::uint64_t kInitSalt = 0x1A17'0000'0000'0001ULL;
constexpr std::uint64_t kTeacherSalt = 0x7EAC'4E50'0000'0002ULL;
constexpr std::uint64_t kDataSalt = 0xDA7A'0000'0000'0003ULL;

struct Views {
  const float* w1;
  const float* b1;
  const float* w2;
  const float* b2;
};

Views views(const ModelState& m) {
  const auto& l = m.layout;
  const float* p = m.params.data();
  return {p + l.slots[0].offset, p + l.slots[1].offset, p + l.slots[2].offset,
          p + l.slots[3].offset};
}

void check_batch(const ModelState& model, const Batch& batch) {
  const auto& d = model.layout.dims;
  if (batch.input_dim != d.input || batch.output_dim != d.output) {
    throw ConfigError("batch dims (" + std::to_string(batch.input_dim) + "," +
                      std::to_string(batch.output_dim) + ") do not match model (" +
                      std::to_string(d.input) + "," + std::to_string(d.output) + ")");
  }
  if (batch.inputs.size() != batch.rows * batch.input_dim ||
      batch.targets.size() != batch.rows * batch.output_dim || batch.rows == 0) {
    throw ConfigError("malformed batch");
  }
  if (model.params.size() != model.layout.param_count()) {
    throw ConfigError("parameter vector does not match layout");
  }
}

}  // namespace

std::size_t TensorSlot::size() const noexcept {
  return std::accumulate(shape.begin(), shape.end(), std::size_t{1},
                         std::multiplies<>());
}

ModelLayout ModelLayout::mlp(const ModelDims& dims) {
  if (dims.input < 1 || dims.hidden < 1 || dims.output < 1) {
    throw ConfigError("model dims must all be >= 1");
  }
  ModelLayout l;
  l.dims = dims;
  std::size_t off = 0;
  auto add = [&](std::string name, std::vector<std::size_t> shape) {
    TensorSlot s{std::move(name), off, std::move(shape)};
    off += s.size();
    l.slots.push_back(std::move(s));
  };
  add("w1", {dims.hidden, dims.input});
  add("b1", {dims.hidden});
  add("w2", {dims.output, dims.hidden});
  add("b2", {dims.output});
  return l;
}

std::size_t ModelLayout::param_count() const noexcept {
  if (slots.empty()) return 0;
  return slots.back().offset + slots.back().size();
}

const TensorSlot& ModelLayout::slot(std::string_view name) const {
  for (const auto& s : slots) {
    if (s.name == name) return s;
  }
  throw ConfigError("no tensor named " + std::string(name));
}

std::pair<ModelState, OptimizerState> init_model(std::uint64_t seed, const ModelDims& dims) {
  ModelState m{ModelLayout::mlp(dims), {}};
  m.params.resize(m.layout.param_count());
  const CounterRng rng(seed ^ kInitSalt, 0);
  std::uint64_t idx = 0;
  for (const auto& s : m.layout.slots) {
    const std::size_t fan_in = s.shape.size() == 2 ? s.shape[1] : 1;
    const float scale = s.shape.size() == 2 ? 1.0f / std::sqrt(static_cast<float>(fan_in))
                                            : 0.1f;
    for (std::size_t i = 0; i < s.size(); ++i) {
      m.params[s.offset + i] = scale * rng.symmetric(idx++);
    }
  }
  OptimizerState opt{std::vector<float>(m.params.size(), 0.0f), 0};
  return {std::move(m), std::move(opt)};
}

LossAndGrad forward_backward(const ModelState& model, const Batch& batch) {
  check_batch(model, batch);
  const auto& d = model.layout.dims;
  const Views v = views(model);
  const std::size_t B = batch.rows;
  const float inv_b = 1.0f / static_cast<float>(B);

  LossAndGrad out;
  out.grad.assign(model.params.size(), 0.0f);
  float* gw1 = out.grad.data() + model.layout.slots[0].offset;
  float* gb1 = out.grad.data() + model.layout.slots[1].offset;
  float* gw2 = out.grad.data() + model.layout.slots[2].offset;
  float* gb2 = out.grad.data() + model.layout.slots[3].offset;

  std::vector<float> h(d.hidden), dy(d.output), dz(d.hidden);
  double loss = 0.0;
  for (std::size_t b = 0; b < B; ++b) {
    const float* x = batch.inputs.data() + b * d.input;
    const float* t = batch.targets.data() + b * d.output;
    for (std::size_t j = 0; j < d.hidden; ++j) {
      float z = v.b1[j];
      const float* row = v.w1 + j * d.input;
      for (std::size_t i = 0; i < d.input; ++i) z += row[i] * x[i];
      h[j] = std::tanh(z);
    }
    for (std::size_t o = 0; o < d.output; ++o) {
      float y = v.b2[o];
      const float* row = v.w2 + o * d.hidden;
      for (std::size_t j = 0; j < d.hidden; ++j) y += row[j] * h[j];
      const float e = y - t[o];
      loss += 0.5 * static_cast<double>(e) * e;
      dy[o] = e * inv_b;
    }
    std::fill(dz.begin(), dz.end(), 0.0f);
    for (std::size_t o = 0; o < d.output; ++o) {
      float* grow = gw2 + o * d.hidden;
      const float* wrow = v.w2 + o * d.hidden;
      for (std::size_t j = 0; j < d.hidden; ++j) {
        grow[j] += dy[o] * h[j];
        dz[j] += wrow[j] * dy[o];
      }
      gb2[o] += dy[o];
    }
    for (std::size_t j = 0; j < d.hidden; ++j) {
      const float g = dz[j] * (1.0f - h[j] * h[j]);
      float* grow = gw1 + j * d.input;
      for (std::size_t i = 0; i < d.input; ++i) grow[i] += g * x[i];
      gb1[j] += g;
    }
  }
  out.loss = static_cast<float>(loss / static_cast<double>(B));
  return out;
}

float evaluate_loss(const ModelState& model, const Batch& batch) {
  return forward_backward(model, batch).loss;
}

void sgd_momentum_step(std::span<float> params, std::span<float> momentum,
                       std::span<const float> grad, float lr, float beta) {
  if (params.size() != momentum.size() || params.size() != grad.size()) {
    throw ConfigError("optimizer length mismatch");
  }
  if (!(lr > 0.0f)) throw ConfigError("learning rate must be > 0");
  if (!kernels::all_finite(grad)) {
    throw Error(Reason::kNumerical, "non-finite gradient entry");
  }
  kernels::momentum_update(params, momentum, grad, lr, beta);
}

std::pair<ModelState, OptimizerState> optimizer_step(ModelState model, OptimizerState opt,
                                                     std::span<const float> grad, float lr,
                                                     float beta) {
  sgd_momentum_step(model.params, opt.momentum, grad, lr, beta);
  ++opt.step_count;
  return {std::move(model), std::move(opt)};
}

float lr_factor(LrIntervention intervention, std::uint32_t healthy, std::uint32_t total) {
  if (healthy == 0) throw InvalidQuorum("no step may run with zero healthy replicas");
  if (healthy > total) throw InvalidQuorum("healthy replicas exceed total");
  const double ratio = static_cast<double>(healthy) / static_cast<double>(total);
  switch (intervention) {
    case LrIntervention::kNone: return 1.0f;
    case LrIntervention::kLinear: return static_cast<float>(ratio);
    case LrIntervention::kSqrt: return static_cast<float>(std::sqrt(ratio));
  }
  return 1.0f;
}

float base_lr(const LrPolicy& policy, std::uint64_t step) {
  if (policy.decay_horizon == 0) return policy.initial_lr;
  const double t = std::min<double>(1.0, static_cast<double>(step) /
                                             static_cast<double>(policy.decay_horizon));
  const double f = 1.0 - (1.0 - policy.final_fraction) * t;
  return static_cast<float>(policy.initial_lr * f);
}

float compute_lr(const LrPolicy& policy, std::uint64_t step, std::uint32_t healthy,
                 std::uint32_t total) {
  return base_lr(policy, step) * lr_factor(policy.intervention, healthy, total);
}

Batch make_batch(const DataSpec& spec, std::uint32_t replica_id, std::uint64_t cursor) {
  Batch b;
  b.replica_id = replica_id;
  b.cursor = cursor;
  b.rows = spec.micro_batch;
  b.input_dim = spec.input_dim;
  b.output_dim = spec.output_dim;
  b.inputs.resize(b.rows * b.input_dim);
  b.targets.resize(b.rows * b.output_dim);

  const CounterRng teacher(spec.seed ^ kTeacherSalt, 0);
  const CounterRng data(spec.seed ^ kDataSalt, mix64(replica_id + 1ULL) + cursor);
  const float tscale = 1.0f / std::sqrt(static_cast<float>(spec.input_dim));
  std::uint64_t idx = 0;
  for (std::size_t r = 0; r < b.rows; ++r) {
    float* x = b.inputs.data() + r * b.input_dim;
    for (std::size_t i = 0; i < b.input_dim; ++i) x[i] = data.symmetric(idx++);
    for (std::size_t o = 0; o < b.output_dim; ++o) {
      float y = 0.0f;
      for (std::size_t i = 0; i < b.input_dim; ++i) {
        y += tscale * teacher.symmetric(o * b.input_dim + i) * x[i];
      }
      b.targets[r * b.output_dim + o] = y + spec.noise * data.symmetric(idx++);
    }
  }
  return b;
}

std::pair<Batch, LoaderState> next_batch(const LoaderState& loader, const DataSpec& spec) {
  return {make_batch(spec, loader.replica_id, loader.cursor),
          LoaderState{loader.replica_id, loader.cursor + 1}};
}

std::uint64_t fnv1a(std::span<const std::byte> bytes, std::uint64_t seed) noexcept {
  std::uint64_t h = seed;
  for (std::byte b : bytes) {
    h ^= static_cast<std::uint64_t>(b);
    h *= 0x100000001b3ULL;
  }
  return h;
}

std::uint64_t hash_floats(std::span<const float> v, std::uint64_t seed) noexcept {
  return fnv1a(std::as_bytes(v), seed);
}

std::string_view to_string(LrIntervention intervention) noexcept {
  switch (intervention) {
    case LrIntervention::kNone: return "none";
    case LrIntervention::kLinear: return "linear";
    case LrIntervention::kSqrt: return "sqrt";
  }
  return "none";
}

LrIntervention parse_intervention(std::string_view name) {
  if (name == "none") return LrIntervention::kNone;
  if (name == "linear") return LrIntervention::kLinear;
  if (name == "sqrt") return LrIntervention::kSqrt;
  throw ConfigError("unknown lr intervention: " + std::string(name));
}

}  // namespace paft
