// Copyright (C) 2026 the mgd authors
// SPDX-License-Identifier: Apache-2.0
#include <gtest/gtest.h>

#include <cmath>

#include "mgd/analysis.hpp"
#include "mgd/baselines.hpp"
#include "mgd/core.hpp"
#include "mgd/moment_maps.hpp"

namespace {

using mgd::ExpFamilyTarget;
using mgd::Matrix;
using mgd::ParticleEnsemble;
using mgd::RngContract;
using mgd::Vector;

class BaselinesTest : public ::testing::Test {
 protected:
  void SetUp() override { mgd::set_thread_count(2); }
  RngContract rng_{404};
};

ExpFamilyTarget standard_normal_target() {
  Vector theta(1);
  theta << 0.5;  // exp(-x^2/2)
  return {theta, mgd::quadratic_map(1)};
}

TEST_F(BaselinesTest, TargetGradientMatchesFiniteDifferences) {
  ExpFamilyTarget target(mgd::quartic_theta(0.8), mgd::monomial_map(4));
  mgd::RngStream stream(rng_, mgd::StreamPurpose::kGeneric);
  for (int trial = 0; trial < 50; ++trial) {
    Vector x(1);
    x[0] = 2.0 * stream.normal();
    Vector grad(1);
    target.grad_energy(x, grad);
    const double eps = 1e-6;
    Vector hi = x, lo = x;
    hi[0] += eps;
    lo[0] -= eps;
    const double fd = (target.energy(hi) - target.energy(lo)) / (2.0 * eps);
    EXPECT_NEAR(grad[0], fd, 1e-5 * std::max(1.0, std::abs(fd)));
  }
}

TEST_F(BaselinesTest, LangevinReachesTheStationaryVariance) {
  ExpFamilyTarget target = standard_normal_target();
  ParticleEnsemble init = ParticleEnsemble::gaussian(30000, 1, rng_);
  auto out = mgd::langevin_run(target, 1.0, 1500, 0.01, std::move(init), rng_);
  EXPECT_NEAR(out.states.array().square().mean(), 1.0, 0.03);
}

TEST_F(BaselinesTest, HalvingTheStepLeavesTheStationaryLawUnchanged) {
  ExpFamilyTarget target = standard_normal_target();
  auto run_var = [&](double h, Eigen::Index steps) {
    ParticleEnsemble init = ParticleEnsemble::gaussian(30000, 1, rng_);
    auto out = mgd::langevin_run(target, 1.0, steps, h, std::move(init), rng_);
    return out.states.array().square().mean();
  };
  const double coarse = run_var(0.02, 1000);
  const double fine = run_var(0.01, 2000);
  EXPECT_NEAR(coarse, fine, 0.04);
}

TEST_F(BaselinesTest, ZeroParameterGivesPureBrownianGrowth) {
  Vector theta = Vector::Zero(1);
  ExpFamilyTarget target(theta, mgd::quadratic_map(1));
  ParticleEnsemble init;
  init.states = Matrix::Zero(30000, 1);
  const double sigma = 0.7, h = 0.01;
  const Eigen::Index steps = 500;
  auto out = mgd::langevin_run(target, sigma, steps, h, std::move(init), rng_);
  const double expected = 2.0 * sigma * sigma * h * static_cast<double>(steps);
  EXPECT_NEAR(out.states.array().square().mean(), expected, 0.1 * expected);
}

TEST_F(BaselinesTest, MalaTunesTowardTheTargetAcceptance) {
  ExpFamilyTarget target = standard_normal_target();
  ParticleEnsemble init = ParticleEnsemble::gaussian(20000, 1, rng_);
  mgd::MalaResult result = mgd::mala_run(target, 600, std::move(init), rng_);
  EXPECT_GE(result.acceptance_rate, 0.50);
  EXPECT_LE(result.acceptance_rate, 0.65);
  EXPECT_GT(result.tuned_h, 0.0);
  EXPECT_NEAR(result.samples.states.array().square().mean(), 1.0, 0.03);
}

TEST_F(BaselinesTest, MalaSamplesTheGaussianToSmallKl) {
  ExpFamilyTarget target = standard_normal_target();
  ParticleEnsemble init = ParticleEnsemble::gaussian(500000, 1, rng_);
  mgd::MalaResult result = mgd::mala_run(target, 300, std::move(init), rng_);
  const double kl = mgd::kl_vs_density(result.samples.states.col(0),
                                       [](double x) { return -0.5 * x * x; }, -8.0, 8.0);
  EXPECT_LE(kl, 1e-3);
}

TEST_F(BaselinesTest, TinyStepsTrapChainsInTheStartingMode) {
  // Symmetric double well: started inside one mode with a frozen small step,
  // short chains cannot rebalance the mode masses.
  Vector theta(4);
  theta << 0.0, -5.0, 0.0, 1.0;  // x^4 - 5 x^2
  ExpFamilyTarget target(theta, mgd::monomial_map(4));
  ParticleEnsemble init;
  init.states = Matrix::Constant(20000, 1, -1.58);  // left well
  mgd::MalaOptions options;
  options.initial_h = 1e-3;
  options.burn_in_fraction = 0.0;  // freeze the step size
  mgd::MalaResult result = mgd::mala_run(target, 400, std::move(init), rng_, options);
  const double right_mass =
      (result.samples.states.col(0).array() > 0.0).cast<double>().mean();
  EXPECT_GT(std::abs(1.0 - 2.0 * right_mass), 0.3);
}

TEST_F(BaselinesTest, AcceptRuleSatisfiesDetailedBalanceOnAToyChain) {
  // Three states with a symmetric uniform proposal over the other two and
  // the same Metropolis-Hastings accept rule used by MALA; the stationary
  // law of the brute-force transition matrix must match the weights.
  const Vector energy = (Vector(3) << 0.3, 1.1, 2.0).finished();
  Matrix transition = Matrix::Zero(3, 3);
  for (int a = 0; a < 3; ++a) {
    for (int b = 0; b < 3; ++b) {
      if (a == b) continue;
      const double log_acc =
          mgd::metropolis_log_accept(-energy[a], -energy[b], std::log(0.5), std::log(0.5));
      transition(a, b) = 0.5 * std::min(1.0, std::exp(log_acc));
    }
    transition(a, a) = 1.0 - transition.row(a).sum();
  }
  Eigen::RowVector3d pi(1.0 / 3, 1.0 / 3, 1.0 / 3);
  for (int it = 0; it < 20000; ++it) pi = pi * transition;
  Vector weights = (-energy.array()).exp();
  weights /= weights.sum();
  for (int a = 0; a < 3; ++a) EXPECT_NEAR(pi[a], weights[a], 1e-6);
}

TEST_F(BaselinesTest, BarrierExperimentSmokeRunsAndCensors) {
  // Tiny budgets so the search censors quickly; exercises both columns.
  mgd::BarrierCostOptions opts;
  opts.n_chains = 4000;
  opts.kl_target = 1e-4;  // unreachable at this sample count
  opts.mala_min_steps = 16;
  opts.mala_step_budget = 32;
  opts.mgd_sigma2_min = 0.25;
  opts.mgd_sigma2_max = 0.5;
  opts.step_rule = {40.0, 100.0};
  opts.n_mc = 4000;
  opts.seed = rng_;
  auto rows = mgd::barrier_cost_experiment({0.4}, opts);
  ASSERT_EQ(rows.size(), 2u);
  EXPECT_EQ(rows[0].algorithm, "mala");
  EXPECT_EQ(rows[1].algorithm, "mgd");
  EXPECT_TRUE(rows[0].censored);
  EXPECT_TRUE(rows[1].censored);
  EXPECT_THROW(mgd::barrier_cost_experiment({}, opts), mgd::ConfigError);
}

}  // namespace
