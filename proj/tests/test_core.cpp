// Copyright (C) 2026 the mgd authors
// SPDX-License-Identifier: Apache-2.0
#include <gtest/gtest.h>

#include <cmath>

#include "mgd/analysis.hpp"
#include "mgd/core.hpp"
#include "mgd/moment_maps.hpp"
#include "mgd/moment_path.hpp"

namespace {

using mgd::InterpolantSchedule;
using mgd::Matrix;
using mgd::MomentPath;
using mgd::ParticleEnsemble;
using mgd::RngContract;
using mgd::RngStream;
using mgd::StreamPurpose;
using mgd::Vector;

Vector scalar(double v) {
  Vector x(1);
  x[0] = v;
  return x;
}

TEST(InterpolantSample, EndpointsAreExact) {
  auto sched = InterpolantSchedule::cosine();
  Vector z(3), x(3);
  z << 0.1, -2.5, 7.0;
  x << 3.0, 0.0, -1.0;
  EXPECT_EQ(mgd::interpolant_sample(z, x, 0.0, sched), z);
  EXPECT_EQ(mgd::interpolant_sample(z, x, 1.0, sched), x);
}

TEST(InterpolantSample, MidpointMixesWithEqualWeights) {
  auto sched = InterpolantSchedule::cosine();
  Vector mixed = mgd::interpolant_sample(scalar(1.0), scalar(3.0), 0.5, sched);
  EXPECT_NEAR(mixed[0], 4.0 * std::sqrt(0.5), 1e-12);
}

TEST(InterpolantSample, RejectsTimeOutsideUnitInterval) {
  auto sched = InterpolantSchedule::cosine();
  EXPECT_THROW(mgd::interpolant_sample(scalar(0), scalar(1), -0.1, sched), std::domain_error);
  EXPECT_THROW(mgd::interpolant_sample(scalar(0), scalar(1), 1.1, sched), std::domain_error);
}

TEST(InterpolantSchedule, ValidatesCustomMaps) {
  EXPECT_THROW(InterpolantSchedule::custom([](double t) { return t; }), mgd::ConfigError);
  EXPECT_THROW(InterpolantSchedule::custom(
                   [](double t) { return 0.5 * M_PI * t * std::cos(8.0 * t); }),
               mgd::ConfigError);
  auto quad = InterpolantSchedule::custom([](double t) { return 0.5 * M_PI * t * t; });
  EXPECT_DOUBLE_EQ(quad.alpha(1.0), 0.5 * M_PI);
  EXPECT_NEAR(quad.alpha_dot(0.5), 0.5 * M_PI, 1e-4);
}

TEST(RngStream, KeyedStreamsAreReproducibleAndDistinct) {
  RngContract rng{123};
  RngStream a(rng, StreamPurpose::kPredictorNoise, 7, 3);
  RngStream b(rng, StreamPurpose::kPredictorNoise, 7, 3);
  RngStream c(rng, StreamPurpose::kPredictorNoise, 8, 3);
  RngStream d(rng, StreamPurpose::kLangevinNoise, 7, 3);
  for (int i = 0; i < 16; ++i) {
    const auto va = a.next_u64();
    EXPECT_EQ(va, b.next_u64());
    EXPECT_NE(va, c.next_u64());
    EXPECT_NE(va, d.next_u64());
  }
  RngStream u(rng, StreamPurpose::kGeneric);
  for (int i = 0; i < 1000; ++i) {
    const double v = u.uniform();
    ASSERT_GT(v, 0.0);
    ASSERT_LE(v, 1.0);
  }
}

TEST(ParticleEnsembleTest, GaussianInitIsDeterministicAcrossThreadCounts) {
  RngContract rng{9};
  mgd::set_thread_count(1);
  ParticleEnsemble a = ParticleEnsemble::gaussian(5000, 3, rng);
  mgd::set_thread_count(2);
  ParticleEnsemble b = ParticleEnsemble::gaussian(5000, 3, rng);
  EXPECT_EQ(a.states, b.states);
  EXPECT_NEAR(a.states.mean(), 0.0, 0.05);
  EXPECT_NEAR(a.states.array().square().mean(), 1.0, 0.05);
}

TEST(ParticleEnsembleTest, NonFiniteStateIsAHardError) {
  ParticleEnsemble ens;
  ens.states = Matrix::Zero(4, 2);
  ens.states(2, 1) = std::numeric_limits<double>::quiet_NaN();
  EXPECT_THROW(ens.require_finite(11, 0.5), mgd::DivergedError);
  try {
    ens.require_finite(11, 0.5);
  } catch (const mgd::DivergedError& e) {
    EXPECT_EQ(e.step(), 11);
  }
}

class MomentPathTest : public ::testing::Test {
 protected:
  void SetUp() override {
    mgd::set_thread_count(2);
    RngStream stream(rng_, StreamPurpose::kSyntheticData);
    gaussian_data_.resize(60000, 1);
    for (Eigen::Index i = 0; i < gaussian_data_.rows(); ++i) {
      gaussian_data_(i, 0) = stream.normal();
    }
  }

  RngContract rng_{42};
  Matrix gaussian_data_;
};

TEST_F(MomentPathTest, EndpointsMatchGaussianAndDatasetMoments) {
  auto phi = mgd::monomial_map(4);
  MomentPath path = mgd::estimate_moment_path(gaussian_data_, *phi, 64, 200000,
                                              InterpolantSchedule::cosine(), rng_);
  // t = 0: standard normal moments (0, 1, 0, 3).
  EXPECT_NEAR(path.values(0, 0), 0.0, 0.02);
  EXPECT_NEAR(path.values(0, 1), 1.0, 0.02);
  EXPECT_NEAR(path.values(0, 2), 0.0, 0.05);
  EXPECT_NEAR(path.values(0, 3), 3.0, 0.15);
  // t = 1: the empirical mean of phi over the dataset, up to resampling.
  Matrix phis(gaussian_data_.rows(), 4);
  phi->eval_batch(gaussian_data_, phis);
  Vector dataset_mean = phis.colwise().mean().transpose();
  for (int k = 0; k < 4; ++k) {
    EXPECT_NEAR(path.values(64, k), dataset_mean[k], 0.12) << "coordinate " << k;
  }
}

TEST_F(MomentPathTest, BimodalTargetMomentsMatchReportedValues) {
  // Unbalanced bimodal density ~ exp(-(4/5)(x^4 - 5 x^2 - x/2)) has moments
  // approximately (0.8, 2.4, 2.2, 6.4).
  RngStream stream(rng_, StreamPurpose::kGeneric);
  Vector samples = mgd::inverse_cdf_sample(
      [](double x) { return -0.8 * (x * x * x * x - 5.0 * x * x - 0.5 * x); }, -4.0, 4.0, 200000,
      stream, 20001);
  Matrix data(samples.size(), 1);
  data.col(0) = samples;
  auto phi = mgd::monomial_map(4);
  MomentPath path =
      mgd::estimate_moment_path(data, *phi, 32, 200000, InterpolantSchedule::cosine(), rng_);
  EXPECT_NEAR(path.values(32, 0), 0.8, 0.05);
  EXPECT_NEAR(path.values(32, 1), 2.4, 0.05);
  EXPECT_NEAR(path.values(32, 2), 2.2, 0.1);
  EXPECT_NEAR(path.values(32, 3), 6.4, 0.15);
}

TEST_F(MomentPathTest, QuadraticMidpointAveragesSecondMoments) {
  // cos^2 + sin^2 mixing of independent Z and X: at t = 1/2 the second
  // moment is the average of the endpoint second moments (cross terms
  // vanish in expectation). Monte-Carlo oracle with common pairs.
  Matrix data = 2.0 * gaussian_data_;  // variance 4
  auto phi = mgd::quadratic_map(1);
  MomentPath path =
      mgd::estimate_moment_path(data, *phi, 64, 200000, InterpolantSchedule::cosine(), rng_);
  const double m0 = path.values(0, 0);
  const double m1 = path.values(64, 0);
  EXPECT_NEAR(path.values(32, 0), 0.5 * (m0 + m1), 0.05);
}

TEST_F(MomentPathTest, CommonRandomNumbersGiveSmoothDifferences) {
  auto phi = mgd::monomial_map(4);
  auto max_step = [&](Eigen::Index n_grid) {
    MomentPath path = mgd::estimate_moment_path(gaussian_data_, *phi, n_grid, 20000,
                                                InterpolantSchedule::cosine(), rng_);
    double worst = 0.0;
    for (Eigen::Index k = 0; k < path.n_steps(); ++k) {
      worst = std::max(worst, path.diffs.row(k).lpNorm<Eigen::Infinity>() * path.h());
    }
    return worst;
  };
  const double coarse = max_step(50);
  const double fine = max_step(200);
  EXPECT_LT(fine, 0.5 * coarse);  // |m_{k+1} - m_k| shrinks like h on fixed pairs
}

TEST_F(MomentPathTest, DeterministicAcrossCallsAndThreadCounts) {
  auto phi = mgd::monomial_map(3);
  mgd::set_thread_count(1);
  MomentPath a = mgd::estimate_moment_path(gaussian_data_, *phi, 40, 10000,
                                           InterpolantSchedule::cosine(), rng_);
  mgd::set_thread_count(2);
  MomentPath b = mgd::estimate_moment_path(gaussian_data_, *phi, 40, 10000,
                                           InterpolantSchedule::cosine(), rng_);
  EXPECT_EQ(a.values, b.values);
  EXPECT_EQ(a.diffs, b.diffs);
}

TEST_F(MomentPathTest, RejectsBadInputs) {
  auto phi = mgd::monomial_map(2);
  Matrix empty(0, 1);
  EXPECT_THROW(mgd::estimate_moment_path(empty, *phi, 10, 100, InterpolantSchedule::cosine(), rng_),
               mgd::DataError);
  EXPECT_THROW(
      mgd::estimate_moment_path(gaussian_data_, *phi, 1, 100, InterpolantSchedule::cosine(), rng_),
      mgd::ConfigError);
  EXPECT_THROW(
      mgd::estimate_moment_path(gaussian_data_, *phi, 10, 0, InterpolantSchedule::cosine(), rng_),
      mgd::ConfigError);
}

TEST_F(MomentPathTest, SingleRealizationDatasetsAreAllowed) {
  Matrix one_row(1, 8);
  one_row << 1, -1, 2, -2, 0.5, -0.5, 1.5, -1.5;
  auto phi = mgd::quadratic_map(8);
  MomentPath path =
      mgd::estimate_moment_path(one_row, *phi, 8, 500, InterpolantSchedule::cosine(), rng_);
  Vector phi_data(phi->output_dim());
  phi->eval(one_row.row(0).transpose(), phi_data);
  // Every draw picks the single realization, so t = 1 reproduces it exactly.
  EXPECT_LT((path.values.row(8).transpose() - phi_data).lpNorm<Eigen::Infinity>(), 1e-12);
}

}  // namespace
