// SPDX-License-Identifier: Apache-2.0
#include <gtest/gtest.h>

#include <cmath>

#include "oracles.hpp"
#include "paft/error.hpp"
#include "paft/model.hpp"

using namespace paft;

TEST(Model, ParamCountOfSmallMlp) {
  auto [m, opt] = init_model(7, ModelDims{4, 8, 2});
  EXPECT_EQ(m.params.size(), 58u);
  EXPECT_EQ(m.layout.param_count(), 58u);
  EXPECT_EQ(opt.momentum.size(), 58u);
}

TEST(Model, InitIsDeterministic) {
  auto a = init_model(7, ModelDims{});
  auto b = init_model(7, ModelDims{});
  auto c = init_model(8, ModelDims{});
  EXPECT_EQ(a.first.params, b.first.params);
  EXPECT_NE(a.first.params, c.first.params);
}

TEST(Model, GradientMatchesFiniteDifferences) {
  auto [m, opt] = init_model(7, ModelDims{4, 8, 2});
  DataSpec spec;
  spec.input_dim = 4;
  spec.output_dim = 2;
  const Batch b = make_batch(spec, 0, 0);
  const auto check = paft::testing::finite_difference_check(m, b, 20, 99, 1e-3);
  EXPECT_EQ(check.checked, 20u);
  EXPECT_LT(check.max_rel_err, 1e-2);
}

TEST(Model, ReferenceLossAgreesWithFloatLoss) {
  auto [m, opt] = init_model(3, ModelDims{});
  const Batch b = make_batch(DataSpec{}, 1, 5);
  std::vector<double> p(m.params.begin(), m.params.end());
  EXPECT_NEAR(paft::testing::reference_loss(m.layout, p, b), evaluate_loss(m, b), 1e-5);
}

TEST(Model, BatchDimensionMismatchIsConfigError) {
  auto [m, opt] = init_model(7, ModelDims{4, 8, 2});
  EXPECT_THROW(forward_backward(m, make_batch(DataSpec{}, 0, 0)), ConfigError);
}

TEST(Optimizer, HandEvaluatedUpdate) {
  std::vector<float> params{1, 1}, mom{0, 0};
  const std::vector<float> grad{2, 4};
  sgd_momentum_step(params, mom, grad, 0.5f, 0.0f);
  EXPECT_EQ(params, (std::vector<float>{0, -1}));
}

TEST(Optimizer, NonFiniteGradientIsNumericalError) {
  std::vector<float> params{1, 1}, mom{0, 0};
  const std::vector<float> grad{NAN, 4};
  try {
    sgd_momentum_step(params, mom, grad, 0.5f);
    FAIL() << "expected an error";
  } catch (const Error& e) {
    EXPECT_EQ(e.reason(), Reason::kNumerical);
    EXPECT_FALSE(e.recoverable());
  }
  EXPECT_EQ(params, (std::vector<float>{1, 1}));
}

TEST(Optimizer, TrainingReducesLoss) {
  auto [m, opt] = init_model(7, ModelDims{});
  const DataSpec spec;
  const Batch eval = make_batch(spec, 99, 0);
  const float before = evaluate_loss(m, eval);
  LoaderState loader;
  for (int s = 0; s < 200; ++s) {
    auto [batch, next] = next_batch(loader, spec);
    loader = next;
    const auto g = forward_backward(m, batch);
    std::tie(m, opt) = optimizer_step(std::move(m), std::move(opt), g.grad, 0.05f);
  }
  EXPECT_LT(evaluate_loss(m, eval), before);
  EXPECT_EQ(opt.step_count, 200u);
}

TEST(LrIntervention, Factors) {
  EXPECT_NEAR(lr_factor(LrIntervention::kSqrt, 11, 12), 0.95743f, 1e-5);
  EXPECT_NEAR(lr_factor(LrIntervention::kLinear, 11, 12), 11.0f / 12.0f, 1e-6);
  EXPECT_EQ(lr_factor(LrIntervention::kNone, 11, 12), 1.0f);
  EXPECT_EQ(lr_factor(LrIntervention::kSqrt, 12, 12), 1.0f);
}

TEST(LrIntervention, InvalidHealthyCountIsInvalidQuorum) {
  EXPECT_THROW(lr_factor(LrIntervention::kSqrt, 0, 12), InvalidQuorum);
  EXPECT_THROW(lr_factor(LrIntervention::kLinear, 13, 12), InvalidQuorum);
}

TEST(LrIntervention, ParseNames) {
  EXPECT_EQ(parse_intervention("sqrt"), LrIntervention::kSqrt);
  EXPECT_EQ(parse_intervention("linear"), LrIntervention::kLinear);
  EXPECT_EQ(parse_intervention("none"), LrIntervention::kNone);
  EXPECT_THROW(parse_intervention("cubic"), ConfigError);
}

TEST(Loader, FiveCommitsAdvanceCursorToFive) {
  LoaderState l;
  for (int i = 0; i < 5; ++i) l = next_batch(l, DataSpec{}).second;
  EXPECT_EQ(l.cursor, 5u);
}

TEST(Loader, BatchDependsOnlyOnReplicaAndCursor) {
  const DataSpec spec;
  EXPECT_EQ(make_batch(spec, 2, 9).inputs, make_batch(spec, 2, 9).inputs);
  EXPECT_NE(make_batch(spec, 2, 9).inputs, make_batch(spec, 2, 10).inputs);
  EXPECT_NE(make_batch(spec, 2, 9).inputs, make_batch(spec, 3, 9).inputs);
}
