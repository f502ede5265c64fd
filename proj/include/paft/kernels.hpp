// SPDX-License-Identifier: Apache-2.0
#pragma once

// Elementwise kernels used on the gradient path. Two implementations share
// one contract: `serial` is the reference, `parallel` splits the index range
// across OpenMP threads. Every kernel is elementwise (or an order-free
// boolean reduction), so both produce bit-identical results.

#include <cstddef>
#include <span>

namespace paft::kernels {

/// Below this length the parallel kernels run on the calling thread.
inline constexpr std::size_t kParallelThreshold = std::size_t{1} << 16;

namespace serial {
void add(std::span<float> dst, std::span<const float> a, std::span<const float> b);
void accumulate(std::span<float> dst, std::span<const float> src);
void scale(std::span<float> v, float factor);
void momentum_update(std::span<float> params, std::span<float> momentum,
                     std::span<const float> grad, float lr, float beta);
bool all_finite(std::span<const float> v);
}  // namespace serial

namespace parallel {
void add(std::span<float> dst, std::span<const float> a, std::span<const float> b);
void accumulate(std::span<float> dst, std::span<const float> src);
void scale(std::span<float> v, float factor);
void momentum_update(std::span<float> params, std::span<float> momentum,
                     std::span<const float> grad, float lr, float beta);
bool all_finite(std::span<const float> v);
}  // namespace parallel

// Default dispatch.
using parallel::accumulate;
using parallel::add;
using parallel::all_finite;
using parallel::momentum_update;
using parallel::scale;

}  // namespace paft::kernels
