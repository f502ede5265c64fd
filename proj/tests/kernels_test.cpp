// SPDX-License-Identifier: Apache-2.0
#include <gtest/gtest.h>

#include <cstring>

#include <cmath>
#include <limits>
#include <random>

#include "oracles.hpp"
#include "paft/kernels.hpp"

namespace k = paft::kernels;
using paft::testing::random_floats;

namespace {

bool same_bits(const std::vector<float>& a, const std::vector<float>& b) {
  return a.size() == b.size() && std::memcmp(a.data(), b.data(), a.size() * sizeof(float)) == 0;
}

}  // namespace

class KernelSizes : public ::testing::TestWithParam<std::size_t> {};

TEST_P(KernelSizes, ParallelMatchesSerialBitForBit) {
  std::mt19937_64 gen(GetParam());
  const std::size_t n = GetParam();
  const auto a = random_floats(gen, n, -1e3f, 1e3f);
  const auto b = random_floats(gen, n, -1e3f, 1e3f);

  std::vector<float> s(n), p(n);
  k::serial::add(s, a, b);
  k::parallel::add(p, a, b);
  EXPECT_TRUE(same_bits(s, p));

  k::serial::accumulate(s, a);
  k::parallel::accumulate(p, a);
  EXPECT_TRUE(same_bits(s, p));

  k::serial::scale(s, 0.37f);
  k::parallel::scale(p, 0.37f);
  EXPECT_TRUE(same_bits(s, p));

  std::vector<float> ms(n, 0.5f), mp(n, 0.5f);
  k::serial::momentum_update(s, ms, b, 0.01f, 0.9f);
  k::parallel::momentum_update(p, mp, b, 0.01f, 0.9f);
  EXPECT_TRUE(same_bits(s, p));
  EXPECT_TRUE(same_bits(ms, mp));
}

INSTANTIATE_TEST_SUITE_P(Sizes, KernelSizes,
                         ::testing::Values(0, 1, 7, 1000, k::kParallelThreshold - 1,
                                           k::kParallelThreshold, 3 * k::kParallelThreshold + 5));

TEST(Kernels, AddIsElementwise) {
  std::vector<float> a{1, 2, 3}, b{10, 20, 30}, d(3);
  k::add(d, a, b);
  EXPECT_EQ(d, (std::vector<float>{11, 22, 33}));
}

TEST(Kernels, MomentumUpdateFollowsRule) {
  std::vector<float> params{1, 1}, mom{0, 0}, grad{2, 4};
  k::momentum_update(params, mom, grad, 0.5f, 0.0f);
  EXPECT_EQ(params, (std::vector<float>{0, -1}));
  EXPECT_EQ(mom, (std::vector<float>{2, 4}));
}

TEST(Kernels, AllFiniteDetectsNanAndInf) {
  const std::size_t n = 2 * k::kParallelThreshold;
  std::vector<float> v(n, 1.0f);
  EXPECT_TRUE(k::serial::all_finite(v));
  EXPECT_TRUE(k::parallel::all_finite(v));
  v[n - 3] = std::numeric_limits<float>::quiet_NaN();
  EXPECT_FALSE(k::serial::all_finite(v));
  EXPECT_FALSE(k::parallel::all_finite(v));
  v[n - 3] = std::numeric_limits<float>::infinity();
  EXPECT_FALSE(k::parallel::all_finite(v));
}

TEST(Kernels, AdditionWithZeroIsExact) {
  std::mt19937_64 gen(3);
  const auto a = random_floats(gen, 5000);
  std::vector<float> zeros(a.size(), 0.0f), d(a.size());
  k::add(d, a, zeros);
  EXPECT_TRUE(same_bits(d, a));
}
