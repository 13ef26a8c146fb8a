// Copyright (C) 2026 the mgd authors
// SPDX-License-Identifier: Apache-2.0
#include <gtest/gtest.h>

#include <algorithm>
#include <cmath>
#include <numeric>
#include <random>

#include "mgd/core.hpp"
#include "mgd/moment_maps.hpp"

namespace {

using mgd::Matrix;
using mgd::MomentFunction;
using mgd::ParticleEnsemble;
using mgd::Vector;

Vector scalar(double v) {
  Vector x(1);
  x[0] = v;
  return x;
}

Vector eval_at(const MomentFunction& phi, const Vector& x) {
  Vector out(phi.output_dim());
  phi.eval(x, out);
  return out;
}

Matrix jac_at(const MomentFunction& phi, const Vector& x) {
  Matrix jac(phi.output_dim(), phi.input_dim());
  phi.jacobian(x, jac);
  return jac;
}

TEST(MonomialMap, MatchesDirectPowers) {
  auto phi = mgd::monomial_map(4);
  Vector vals = eval_at(*phi, scalar(2.0));
  EXPECT_EQ(vals[0], 2.0);
  EXPECT_EQ(vals[1], 4.0);
  EXPECT_EQ(vals[2], 8.0);
  EXPECT_EQ(vals[3], 16.0);
  Matrix jac = jac_at(*phi, scalar(2.0));
  EXPECT_EQ(jac(0, 0), 1.0);
  EXPECT_EQ(jac(1, 0), 4.0);
  EXPECT_EQ(jac(2, 0), 12.0);
  EXPECT_EQ(jac(3, 0), 32.0);

  auto linear = mgd::monomial_map(1);
  EXPECT_EQ(eval_at(*linear, scalar(0.0))[0], 0.0);
  EXPECT_EQ(jac_at(*linear, scalar(0.0))(0, 0), 1.0);
  EXPECT_THROW(mgd::monomial_map(0), mgd::ConfigError);
}

TEST(QuadraticMap, EnumeratesUpperTriangularProducts) {
  auto phi2 = mgd::quadratic_map(2);
  Vector x(2);
  x << 1.0, 2.0;
  Vector vals = eval_at(*phi2, x);
  ASSERT_EQ(vals.size(), 3);
  EXPECT_EQ(vals[0], 1.0);  // (1,1)
  EXPECT_EQ(vals[1], 2.0);  // (1,2)
  EXPECT_EQ(vals[2], 4.0);  // (2,2)

  auto phi1 = mgd::quadratic_map(1);
  EXPECT_EQ(eval_at(*phi1, scalar(3.0))[0], 9.0);
  EXPECT_EQ(jac_at(*phi1, scalar(3.0))(0, 0), 6.0);

  EXPECT_EQ(mgd::quadratic_map(3)->output_dim(), 6);
}

TEST(AbsQuadraticMap, UsesZeroSubgradientAtKink) {
  auto phi = mgd::abs_quadratic_map();
  Vector vals = eval_at(*phi, scalar(-3.0));
  EXPECT_EQ(vals[0], 9.0);
  EXPECT_EQ(vals[1], 3.0);
  Matrix jac = jac_at(*phi, scalar(-3.0));
  EXPECT_EQ(jac(0, 0), -6.0);
  EXPECT_EQ(jac(1, 0), -1.0);

  EXPECT_EQ(eval_at(*phi, scalar(0.0)).lpNorm<Eigen::Infinity>(), 0.0);
  EXPECT_EQ(jac_at(*phi, scalar(0.0)).lpNorm<Eigen::Infinity>(), 0.0);
}

TEST(AbsQuadraticMap, LaplaceMomentsAreTwoAndOne) {
  auto phi = mgd::abs_quadratic_map();
  mgd::RngContract rng{5};
  mgd::RngStream stream(rng, mgd::StreamPurpose::kSyntheticData);
  const Eigen::Index n = 400000;
  Vector mean = Vector::Zero(2);
  Vector vals(2);
  for (Eigen::Index i = 0; i < n; ++i) {
    const double u = stream.uniform() - 0.5;  // Laplace(1) via inverse CDF
    const double x = -std::copysign(std::log(1.0 - 2.0 * std::abs(u)), u);
    phi->eval(scalar(x), vals);
    mean += vals;
  }
  mean /= static_cast<double>(n);
  EXPECT_NEAR(mean[0], 2.0, 0.03);
  EXPECT_NEAR(mean[1], 1.0, 0.01);
}

TEST(LogDensityMap, EvaluatesDensityAndDerivatives) {
  auto phi = mgd::log_density_map([](double x) { return -0.5 * x * x; },
                                  [](double x) { return -x; }, [](double) { return -1.0; });
  Vector vals = eval_at(*phi, scalar(1.0));
  EXPECT_EQ(vals[0], 1.0);
  EXPECT_EQ(vals[1], -0.5);
  Matrix jac = jac_at(*phi, scalar(1.0));
  EXPECT_EQ(jac(0, 0), 2.0);
  EXPECT_EQ(jac(1, 0), -1.0);

  // Bimodal quartic log density at 0 evaluates to the constant term.
  auto bimodal = mgd::log_density_map(
      [](double x) { return -0.8 * (std::pow(x, 4) - 5 * x * x - 0.5 * x) + 1.25; },
      [](double x) { return -0.8 * (4 * std::pow(x, 3) - 10 * x - 0.5); },
      [](double x) { return -0.8 * (12 * x * x - 10); });
  Vector at0 = eval_at(*bimodal, scalar(0.0));
  EXPECT_EQ(at0[0], 0.0);
  EXPECT_EQ(at0[1], 1.25);

  auto bad = mgd::log_density_map([](double x) { return std::log(x); },
                                  [](double x) { return 1.0 / x; });
  EXPECT_THROW(eval_at(*bad, scalar(-1.0)), mgd::DataError);
}

// Jacobians must agree with central finite differences wherever the map is
// smooth; vjp must match the transposed Jacobian essentially exactly.
TEST(MomentFunctionContract, JacobianMatchesFiniteDifferencesAndVjp) {
  std::vector<mgd::MomentFunctionPtr> maps = {
      mgd::monomial_map(4), mgd::quadratic_map(3), mgd::abs_quadratic_map(),
      mgd::log_density_map([](double x) { return -0.8 * (std::pow(x, 4) - 5 * x * x - 0.5 * x); },
                           [](double x) { return -0.8 * (4 * std::pow(x, 3) - 10 * x - 0.5); })};
  mgd::RngContract rng{17};
  mgd::RngStream stream(rng, mgd::StreamPurpose::kGeneric);
  for (const auto& phi : maps) {
    const Eigen::Index d = phi->input_dim();
    const Eigen::Index r = phi->output_dim();
    for (int trial = 0; trial < 100; ++trial) {
      Vector x(d);
      for (Eigen::Index c = 0; c < d; ++c) x[c] = 2.0 * stream.normal();
      if (d == 1 && std::abs(x[0]) < 1e-3) x[0] = 0.5;  // stay away from the |x| kink
      Matrix jac = jac_at(*phi, x);
      const double eps = 1e-6;
      for (Eigen::Index c = 0; c < d; ++c) {
        Vector hi = x, lo = x;
        hi[c] += eps;
        lo[c] -= eps;
        Vector fd = (eval_at(*phi, hi) - eval_at(*phi, lo)) / (2.0 * eps);
        for (Eigen::Index k = 0; k < r; ++k) {
          const double scale = std::max(1.0, std::abs(jac(k, c)));
          EXPECT_NEAR(jac(k, c), fd[k], 1e-5 * scale);
        }
      }
      Vector w(r);
      for (Eigen::Index k = 0; k < r; ++k) w[k] = stream.normal();
      Vector via_vjp(d);
      phi->vjp(x, w, via_vjp);
      Vector via_jac = jac.transpose() * w;
      EXPECT_LT((via_vjp - via_jac).lpNorm<Eigen::Infinity>(),
                1e-12 * std::max(1.0, via_jac.lpNorm<Eigen::Infinity>()));
    }
  }
}

TEST(MomentFunctionContract, BatchedPathsMatchPointwisePaths) {
  std::vector<mgd::MomentFunctionPtr> maps = {mgd::monomial_map(4), mgd::abs_quadratic_map(),
                                              mgd::quadratic_map(2)};
  mgd::RngContract rng{3};
  mgd::RngStream stream(rng, mgd::StreamPurpose::kGeneric);
  for (const auto& phi : maps) {
    const Eigen::Index d = phi->input_dim();
    const Eigen::Index r = phi->output_dim();
    Matrix X(37, d);
    for (Eigen::Index i = 0; i < X.size(); ++i) X(i / d, i % d) = stream.normal();
    Matrix batch_vals(X.rows(), r), jac_stack(r, X.rows() * d), vjp_out(X.rows(), d);
    Vector w(r);
    for (Eigen::Index k = 0; k < r; ++k) w[k] = stream.normal();
    phi->eval_batch(X, batch_vals);
    phi->jacobian_batch(X, jac_stack);
    phi->vjp_batch(X, w, vjp_out);
    for (Eigen::Index i = 0; i < X.rows(); ++i) {
      EXPECT_EQ(batch_vals.row(i).transpose(), eval_at(*phi, X.row(i).transpose()));
      EXPECT_EQ(Matrix(jac_stack.middleCols(i * d, d)), jac_at(*phi, X.row(i).transpose()));
      Vector vjp_i(d);
      phi->vjp(X.row(i).transpose(), w, vjp_i);
      EXPECT_EQ(vjp_out.row(i).transpose(), vjp_i);
    }
  }
}

TEST(Gram, MatchesHandComputedExamples) {
  auto phi = mgd::monomial_map(2);
  ParticleEnsemble single;
  single.states = Matrix::Constant(1, 1, 1.0);
  Matrix g1 = mgd::gram(single, *phi).entries;
  EXPECT_NEAR(g1(0, 0), 1.0, 1e-15);
  EXPECT_NEAR(g1(0, 1), 2.0, 1e-15);
  EXPECT_NEAR(g1(1, 0), 2.0, 1e-15);
  EXPECT_NEAR(g1(1, 1), 4.0, 1e-15);

  ParticleEnsemble pair;
  pair.states.resize(2, 1);
  pair.states << -1.0, 1.0;
  Matrix g2 = mgd::gram(pair, *phi).entries;
  // Average of outer products of (1, -2) and (1, 2).
  EXPECT_NEAR(g2(0, 0), 1.0, 1e-15);
  EXPECT_NEAR(g2(0, 1), 0.0, 1e-15);
  EXPECT_NEAR(g2(1, 1), 4.0, 1e-15);

  auto linear = mgd::monomial_map(1);
  Matrix g3 = mgd::gram(pair, *linear).entries;
  EXPECT_NEAR(g3(0, 0), 1.0, 1e-15);
}

TEST(Gram, PermutationInvariantAndPsd) {
  mgd::RngContract rng{21};
  ParticleEnsemble ens = ParticleEnsemble::gaussian(501, 1, rng);
  auto phi = mgd::monomial_map(4);
  Matrix g = mgd::gram(ens, *phi).entries;

  ParticleEnsemble shuffled = ens;
  std::vector<Eigen::Index> perm(static_cast<std::size_t>(ens.n_rep()));
  std::iota(perm.begin(), perm.end(), 0);
  std::mt19937 rd(99);
  std::shuffle(perm.begin(), perm.end(), rd);
  for (Eigen::Index i = 0; i < ens.n_rep(); ++i) {
    shuffled.states.row(i) = ens.states.row(perm[static_cast<std::size_t>(i)]);
  }
  Matrix g_shuffled = mgd::gram(shuffled, *phi).entries;
  EXPECT_LT((g - g_shuffled).lpNorm<Eigen::Infinity>(), 1e-12 * g.lpNorm<Eigen::Infinity>());

  EXPECT_LT((g - Matrix(g.transpose())).lpNorm<Eigen::Infinity>(),
            1e-12 * g.lpNorm<Eigen::Infinity>());
  Eigen::SelfAdjointEigenSolver<Matrix> eig(g);
  EXPECT_GE(eig.eigenvalues().minCoeff(), -1e-10 * g.trace());

  ParticleEnsemble bad;
  bad.states = Matrix::Constant(2, 1, std::numeric_limits<double>::infinity());
  EXPECT_THROW(mgd::gram(bad, *phi), mgd::DataError);
}

TEST(RegularizedSolve, IdentityAndPrunedSystems) {
  Matrix identity = Matrix::Identity(1, 1);
  Vector rhs1 = scalar(2.0);
  Vector sol1 = mgd::regularized_solve(identity, rhs1, 0.0);
  EXPECT_DOUBLE_EQ(sol1[0], 2.0);

  Matrix g(2, 2);
  g << 4.0, 0.0, 0.0, 0.0;
  Vector rhs2(2);
  rhs2 << 8.0, 5.0;
  Vector sol2 = mgd::regularized_solve(g, rhs2, 1e-7);
  EXPECT_NEAR(sol2[0], 2.0, 2e-6);  // delta perturbation stays below 1e-6 relative
  EXPECT_EQ(sol2[1], 0.0);          // pruned coordinate gets a zero multiplier
}

TEST(RegularizedSolve, ResidualStaysSmallOnRandomSpdSystems) {
  mgd::RngContract rng{33};
  mgd::RngStream stream(rng, mgd::StreamPurpose::kGeneric);
  for (int trial = 0; trial < 50; ++trial) {
    const Eigen::Index r = 6;
    Matrix a(r, r);
    for (Eigen::Index i = 0; i < r * r; ++i) a(i / r, i % r) = stream.normal();
    Matrix g = a * a.transpose() + 0.1 * Matrix::Identity(r, r);
    Vector rhs(r);
    for (Eigen::Index i = 0; i < r; ++i) rhs[i] = stream.normal();
    const double delta = 1e-7;
    Vector sol = mgd::regularized_solve(g, rhs, delta);
    Eigen::SelfAdjointEigenSolver<Matrix> eig(g);
    const double cond_scale = eig.eigenvalues().maxCoeff() / eig.eigenvalues().minCoeff();
    const double bound = (delta * cond_scale + 1e-8) * rhs.norm();
    EXPECT_LE((g * sol - rhs).norm(), bound);
  }
}

TEST(RegularizedSolve, FallsBackOnSingularSystems) {
  Matrix g(2, 2);
  g << 1.0, 1.0, 1.0, 1.0;  // rank one
  Vector rhs(2);
  rhs << 2.0, 2.0;
  Vector sol = mgd::regularized_solve(g, rhs, 0.0);
  ASSERT_TRUE(sol.allFinite());
  EXPECT_NEAR((g * sol - rhs).norm(), 0.0, 1e-8);

  EXPECT_THROW(mgd::regularized_solve(g, Vector::Zero(3), 0.0), std::invalid_argument);
}

TEST(RegularizedSolve, RescalesDiagonalToUnityBeforeShift) {
  // With one dominant diagonal entry, a solve without rescaling would need a
  // delta comparable to the small diagonal; rescaling makes the relative
  // perturbation uniform across coordinates.
  Matrix g(2, 2);
  g << 4e6, 0.0, 0.0, 4e-6;
  Vector rhs(2);
  rhs << 4e6, 4e-6;
  Vector sol = mgd::regularized_solve(g, rhs, 1e-7);
  EXPECT_NEAR(sol[0], 1.0, 1e-6);
  EXPECT_NEAR(sol[1], 1.0, 1e-6);
}

}  // namespace
