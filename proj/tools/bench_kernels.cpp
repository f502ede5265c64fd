// SPDX-License-Identifier: Apache-2.0
// Serial reference vs OpenMP kernels.

#include <benchmark/benchmark.h>

#include <random>
#include <vector>

#include "paft/kernels.hpp"

namespace {

std::vector<float> noise(std::size_t n, std::uint64_t seed) {
  std::mt19937_64 gen(seed);
  std::uniform_real_distribution<float> d(-1.0f, 1.0f);
  std::vector<float> v(n);
  for (auto& x : v) x = d(gen);
  return v;
}

template <bool Parallel>
void BM_Add(benchmark::State& st) {
  const auto n = static_cast<std::size_t>(st.range(0));
  auto a = noise(n, 1), b = noise(n, 2);
  std::vector<float> out(n);
  for (auto _ : st) {
    if constexpr (Parallel) {
      paft::kernels::parallel::add(out, a, b);
    } else {
      paft::kernels::serial::add(out, a, b);
    }
    benchmark::DoNotOptimize(out.data());
  }
  st.SetBytesProcessed(static_cast<std::int64_t>(st.iterations() * n * 3 * sizeof(float)));
}

template <bool Parallel>
void BM_Momentum(benchmark::State& st) {
  const auto n = static_cast<std::size_t>(st.range(0));
  auto p = noise(n, 1), m = noise(n, 2), g = noise(n, 3);
  for (auto _ : st) {
    if constexpr (Parallel) {
      paft::kernels::parallel::momentum_update(p, m, g, 1e-6f, 0.9f);
    } else {
      paft::kernels::serial::momentum_update(p, m, g, 1e-6f, 0.9f);
    }
    benchmark::DoNotOptimize(p.data());
  }
  st.SetBytesProcessed(static_cast<std::int64_t>(st.iterations() * n * 5 * sizeof(float)));
}

}  // namespace

BENCHMARK(BM_Add<false>)->Range(1 << 12, 1 << 24);
BENCHMARK(BM_Add<true>)->Range(1 << 12, 1 << 24);
BENCHMARK(BM_Momentum<false>)->Range(1 << 12, 1 << 24);
BENCHMARK(BM_Momentum<true>)->Range(1 << 12, 1 << 24);

BENCHMARK_MAIN();
