// SPDX-License-Identifier: Apache-2.0
#include "paft/kernels.hpp"

#include <cassert>
#include <cmath>
#include <cstdint>

namespace paft::kernels {

namespace serial {

void add(std::span<float> dst, std::span<const float> a, std::span<const float> b) {
  assert(dst.size() == a.size() && a.size() == b.size());
  for (std::size_t i = 0; i < dst.size(); ++i) dst[i] = a[i] + b[i];
}

void accumulate(std::span<float> dst, std::span<const float> src) {
  assert(dst.size() == src.size());
  for (std::size_t i = 0; i < dst.size(); ++i) dst[i] += src[i];
}

void scale(std::span<float> v, float factor) {
  for (float& x : v) x *= factor;
}

void momentum_update(std::span<float> params, std::span<float> momentum,
                     std::span<const float> grad, float lr, float beta) {
  assert(params.size() == momentum.size() && params.size() == grad.size());
  for (std::size_t i = 0; i < params.size(); ++i) {
    momentum[i] = beta * momentum[i] + grad[i];
    params[i] = params[i] - lr * momentum[i];
  }
}

bool all_finite(std::span<const float> v) {
  for (float x : v) {
    if (!std::isfinite(x)) return false;
  }
  return true;
}

}  // namespace serial

namespace parallel {

namespace {
bool go_parallel(std::size_t n) { return n >= kParallelThreshold; }
}  // namespace

void add(std::span<float> dst, std::span<const float> a, std::span<const float> b) {
  assert(dst.size() == a.size() && a.size() == b.size());
  const auto n = static_cast<std::int64_t>(dst.size());
  float* d = dst.data();
  const float* pa = a.data();
  const float* pb = b.data();
#pragma omp parallel for schedule(static) if (go_parallel(dst.size()))
  for (std::int64_t i = 0; i < n; ++i) d[i] = pa[i] + pb[i];
}

void accumulate(std::span<float> dst, std::span<const float> src) {
  assert(dst.size() == src.size());
  const auto n = static_cast<std::int64_t>(dst.size());
  float* d = dst.data();
  const float* s = src.data();
#pragma omp parallel for schedule(static) if (go_parallel(dst.size()))
  for (std::int64_t i = 0; i < n; ++i) d[i] += s[i];
}

void scale(std::span<float> v, float factor) {
  const auto n = static_cast<std::int64_t>(v.size());
  float* d = v.data();
#pragma omp parallel for schedule(static) if (go_parallel(v.size()))
  for (std::int64_t i = 0; i < n; ++i) d[i] *= factor;
}

void momentum_update(std::span<float> params, std::span<float> momentum,
                     std::span<const float> grad, float lr, float beta) {
  assert(params.size() == momentum.size() && params.size() == grad.size());
  const auto n = static_cast<std::int64_t>(params.size());
  float* p = params.data();
  float* m = momentum.data();
  const float* g = grad.data();
#pragma omp parallel for schedule(static) if (go_parallel(params.size()))
  for (std::int64_t i = 0; i < n; ++i) {
    m[i] = beta * m[i] + g[i];
    p[i] = p[i] - lr * m[i];
  }
}

bool all_finite(std::span<const float> v) {
  const auto n = static_cast<std::int64_t>(v.size());
  const float* d = v.data();
  int bad = 0;
#pragma omp parallel for schedule(static) reduction(| : bad) if (go_parallel(v.size()))
  for (std::int64_t i = 0; i < n; ++i) bad |= std::isfinite(d[i]) ? 0 : 1;
  return bad == 0;
}

}  // namespace parallel

}  // namespace paft::kernels
