#include <gtest/gtest.h>

#include <cmath>
#include <random>

#include "fixtures.hpp"

using namespace dslbi;
using fixtures::random_tensor;

namespace {

HyperParams plain(double kappa, double nu, double lambda, double alpha) {
  HyperParams hp;
  hp.kappa = kappa;
  hp.nu = nu;
  hp.lambda = lambda;
  hp.alpha.initial = alpha;
  hp.alpha.drop_every = 0;
  return hp;
}

double state_distance(const OptimizerState& a, const OptimizerState& b) {
  double worst = 0.0;
  for (std::size_t i = 0; i < a.params.size(); ++i) {
    worst = std::max(worst, max_abs_diff(param(a.net, a.params[i].id), param(b.net, b.params[i].id)));
    if (a.params[i].split()) {
      worst = std::max(worst, max_abs_diff(a.params[i].gamma, b.params[i].gamma));
      worst = std::max(worst, max_abs_diff(a.params[i].v, b.params[i].v));
    }
  }
  return worst;
}

}  // namespace

// One step on least squares written out coordinate by coordinate.
TEST(DessiLbi, SingleStepOnLinearModelMatchesHandComputation) {
  std::mt19937_64 rng(4);
  const std::size_t n = 6, p = 3;
  const Tensor X = random_tensor(Shape{n, p}, rng);
  const Tensor y = random_tensor(Shape{n, 1}, rng);
  Network net = make_network({Dense{p, 1, false}}, LossKind::mse);
  net.layers[0].params[0] = random_tensor(Shape{1, p}, rng);
  const HyperParams hp = plain(2.0, 4.0, 0.05, 0.1);
  OptimizerState st = make_state(net, SplitPolicy::all(net, hp.lambda), hp);
  const Tensor w0 = net.layers[0].params[0];

  std::vector<double> grad(p, 0.0);
  for (std::size_t i = 0; i < n; ++i) {
    double r = -y[i];
    for (std::size_t j = 0; j < p; ++j) r += X[i * p + j] * w0[j];
    for (std::size_t j = 0; j < p; ++j) grad[j] += X[i * p + j] * r / n;
  }
  step_naive(st, {X, y}, hp);
  const Tensor& w1 = param(st.net, st.params[0].id);
  for (std::size_t j = 0; j < p; ++j) {
    // Gamma_0 = 0, so the coupling gradient is W/nu for W and -W/nu for Gamma
    const double w_expect = w0[j] - hp.kappa * hp.alpha.initial * (grad[j] + w0[j] / hp.nu);
    const double v_expect = hp.alpha.initial * w0[j] / hp.nu;
    const double g_expect = hp.kappa * std::copysign(std::max(0.0, std::abs(v_expect) - hp.lambda), v_expect);
    EXPECT_NEAR(w1[j], w_expect, 1e-14);
    EXPECT_NEAR(st.params[0].v[j], v_expect, 1e-15);
    EXPECT_NEAR(st.params[0].gamma[j], g_expect, 1e-15);
  }
  EXPECT_EQ(st.step, 1u);
}

TEST(DessiLbi, ReformulatedIterationTracksPlainIteration) {
  auto prob = fixtures::split_net_problem(3, 0.05);
  const HyperParams hp = plain(2.0, 5.0, 0.05, 0.05);
  OptimizerState a = make_state(prob.net, prob.split, hp);
  OptimizerState b = a;
  for (int k = 0; k < 100; ++k) {
    step_naive(a, prob.batch, hp);
    step_reformulated(b, prob.batch, hp);
  }
  EXPECT_LT(state_distance(a, b), 1e-10);
  bool any_active = false;
  for (const auto& ps : a.params)
    if (ps.split() && norm(ps.gamma) > 0) any_active = true;
  EXPECT_TRUE(any_active);
}

TEST(DessiLbi, DualStaysASubgradientAfterEveryStep) {
  auto prob = fixtures::split_net_problem(5, 0.02);
  for (Variant variant : {Variant::naive, Variant::mom, Variant::mom_wd}) {
    HyperParams hp = plain(3.0, 2.0, 0.02, 0.05);
    hp.variant = variant;
    OptimizerState st = make_state(prob.net, prob.split, hp);
    for (int k = 0; k < 60; ++k) {
      step(st, prob.batch, hp);
      for (const auto& ps : st.params) {
        if (ps.split()) {
          ASSERT_TRUE(is_subgradient(ps.dual, ps.gamma, *ps.penalty, 1e-9)) << "step " << k;
        }
      }
      ASSERT_LE(max_dual_excess(st), 1e-9);
    }
  }
}

TEST(DessiLbi, GammaStaysZeroWhileVInsideTheBall) {
  auto prob = fixtures::split_net_problem(2, 1e6);
  const HyperParams hp = plain(1.0, 1.0, 1e6, 0.1);
  OptimizerState st = make_state(prob.net, prob.split, hp);
  for (int k = 0; k < 10; ++k) step_naive(st, prob.batch, hp);
  EXPECT_EQ(gamma_sparsity(st), 0.0);
}

TEST(DessiLbi, EmptySplitReducesToPlainSgd) {
  auto prob = fixtures::split_net_problem(8, 0.1);
  const HyperParams hp = plain(2.0, 10.0, 0.1, 0.05);
  OptimizerState a = make_state(prob.net, SplitPolicy::none(), hp);
  OptimizerState b = a;
  const auto sgd = sgd_stepper(hp, SgdVariant::naive, 0.0);
  for (int k = 0; k < 20; ++k) {
    step_naive(a, prob.batch, hp);
    sgd(b, prob.batch);
  }
  EXPECT_EQ(state_distance(a, b), 0.0);
}

TEST(DessiLbi, ZeroMomentumEqualsPlainStep) {
  auto prob = fixtures::split_net_problem(9, 0.05);
  HyperParams hp = plain(2.0, 3.0, 0.05, 0.05);
  OptimizerState a = make_state(prob.net, prob.split, hp);
  OptimizerState b = a;
  HyperParams mom = hp;
  mom.variant = Variant::mom;
  mom.momentum = 0.0;
  for (int k = 0; k < 20; ++k) {
    step_naive(a, prob.batch, hp);
    step_momentum(b, prob.batch, mom);
  }
  EXPECT_LT(state_distance(a, b), 1e-15);
}

TEST(DessiLbi, WeightDecayUsesPreStepWeights) {
  auto prob = fixtures::split_net_problem(10, 0.05);
  HyperParams hp = plain(2.0, 3.0, 0.05, 0.05);
  hp.variant = Variant::mom_wd;
  hp.momentum = 0.9;
  hp.weight_decay = 0.01;
  OptimizerState st = make_state(prob.net, prob.split, hp);
  const auto g = grad_augmented(st, prob.batch, hp);
  const Tensor w0 = param(st.net, st.params[0].id);
  step_momentum_wd(st, prob.batch, hp);
  const Tensor& w1 = param(st.net, st.params[0].id);
  for (std::size_t k = 0; k < w0.size(); ++k)
    EXPECT_NEAR(w1[k], w0[k] - hp.kappa * 0.05 * g.w[0][k] - 0.01 * w0[k], 1e-15);
}

TEST(Sgd, NesterovWithoutMomentumEqualsPlainSgd) {
  auto prob = fixtures::split_net_problem(12, 0.1);
  HyperParams hp = plain(1.0, 10.0, 0.1, 0.1);
  hp.momentum = 0.0;
  OptimizerState a = make_state(prob.net, SplitPolicy::none(), hp);
  OptimizerState b = a;
  const auto naive = sgd_stepper(hp, SgdVariant::naive, 0.0);
  const auto nesterov = sgd_stepper(hp, SgdVariant::nesterov, 0.0);
  for (int k = 0; k < 15; ++k) {
    naive(a, prob.batch);
    nesterov(b, prob.batch);
  }
  EXPECT_LT(state_distance(a, b), 1e-15);
}

TEST(DessiLbi, StateRoundTripResumesIdentically) {
  auto prob = fixtures::split_net_problem(14, 0.05);
  const HyperParams hp = plain(2.0, 3.0, 0.05, 0.05);
  OptimizerState a = make_state(prob.net, prob.split, hp);
  for (int k = 0; k < 10; ++k) step_naive(a, prob.batch, hp);
  OptimizerState b = make_state(prob.net, prob.split, hp);
  load_state(b, decode_checkpoint(encode_checkpoint(save_state(a))));
  EXPECT_EQ(b.step, a.step);
  for (int k = 0; k < 10; ++k) {
    step_naive(a, prob.batch, hp);
    step_naive(b, prob.batch, hp);
  }
  EXPECT_EQ(state_distance(a, b), 0.0);
}

TEST(DessiLbi, NonFiniteIterateStopsTheRun) {
  auto prob = fixtures::split_net_problem(15, 0.05);
  const HyperParams hp = plain(1.0, 1e-6, 0.05, 1e3);
  OptimizerState st = make_state(prob.net, prob.split, hp);
  EXPECT_THROW(
      for (int k = 0; k < 200; ++k) step_naive(st, prob.batch, hp), NonFiniteError);
}

TEST(DessiLbi, RejectsMismatchedVariantAndBadHyperParameters) {
  auto prob = fixtures::split_net_problem(16, 0.05);
  HyperParams hp = plain(1.0, 1.0, 0.05, 0.1);
  OptimizerState st = make_state(prob.net, prob.split, hp);
  hp.variant = Variant::mom;
  EXPECT_THROW(step_naive(st, prob.batch, hp), std::invalid_argument);
  HyperParams bad = plain(0.0, 1.0, 0.05, 0.1);
  EXPECT_THROW(make_state(prob.net, prob.split, bad), std::invalid_argument);
  bad = plain(1.0, 1.0, 0.05, 0.1);
  bad.momentum = 1.0;
  EXPECT_THROW(make_state(prob.net, prob.split, bad), std::invalid_argument);
}

TEST(Schedule, StepDropsAndExplicitSteps) {
  HyperParams hp;
  hp.alpha.initial = 0.1;
  hp.alpha.drop_every = 30;
  hp.alpha.drop_factor = 0.1;
  EXPECT_DOUBLE_EQ(lr_schedule(hp, 29), 0.1);
  EXPECT_NEAR(lr_schedule(hp, 30), 0.01, 1e-17);
  EXPECT_NEAR(lr_schedule(hp, 65), 0.001, 1e-17);
  hp.alpha.steps = {{0, 0.5}, {10, 0.2}};
  EXPECT_DOUBLE_EQ(lr_schedule(hp, 9), 0.5);
  EXPECT_DOUBLE_EQ(lr_schedule(hp, 10), 0.2);
}

TEST(Schedule, StepSizeBound) {
  const HyperParams hp = plain(4.0, 2.0, 1.0, 0.1);
  EXPECT_DOUBLE_EQ(stepsize_bound(1.5, hp), 2.0 / (4.0 * 2.0));
  EXPECT_THROW(stepsize_bound(0.0, hp), std::invalid_argument);
}

TEST(SplitPolicy, DefaultsAndValidation) {
  auto prob = fixtures::split_net_problem(1, 0.3);
  ASSERT_TRUE(prob.split.layers[0]);
  EXPECT_EQ(prob.split.layers[0]->grouping.scheme(), GroupScheme::per_filter);
  ASSERT_TRUE(prob.split.layers[3]);
  EXPECT_EQ(prob.split.layers[3]->grouping.scheme(), GroupScheme::per_element);
  EXPECT_FALSE(prob.split.layers[1]);
  SplitPolicy bad;
  bad.layers.resize(4);
  bad.layers[1] = prob.split.layers[0];
  EXPECT_THROW(bad.validate(prob.net), std::invalid_argument);
}
