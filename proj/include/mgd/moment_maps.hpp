// Copyright (C) 2026 the mgd authors
// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <Eigen/Dense>
#include <Eigen/Eigenvalues>
#include <cmath>
#include <functional>
#include <memory>
#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

#include "mgd/core.hpp"
#include "mgd/parallel.hpp"

namespace mgd {

// ---------------------------------------------------------------------------
// Moment functions phi: R^d -> R^r with analytic Jacobians.
//
// Point-wise entry points are mandatory; the batched entry points have
// generic fall-backs and exist so cheap maps (monomials in 1D) can avoid a
// virtual dispatch per particle inside the solver loops.
// ---------------------------------------------------------------------------

class MomentFunction {
 public:
  virtual ~MomentFunction() = default;

  virtual Eigen::Index input_dim() const = 0;
  virtual Eigen::Index output_dim() const = 0;

  // out has length r.
  virtual void eval(const Eigen::Ref<const Vector>& x, Eigen::Ref<Vector> out) const = 0;

  // jac is r x d, row k = grad phi_k(x).
  virtual void jacobian(const Eigen::Ref<const Vector>& x, Eigen::Ref<Matrix> jac) const = 0;

  // out = sum_k w_k grad phi_k(x); default materializes the Jacobian.
  virtual void vjp(const Eigen::Ref<const Vector>& x, const Eigen::Ref<const Vector>& w,
                   Eigen::Ref<Vector> out) const {
    Matrix jac(output_dim(), input_dim());
    jacobian(x, jac);
    out.noalias() = jac.transpose() * w;
  }

  // Component-wise Laplacian, only for twice differentiable maps.
  virtual bool has_laplacian() const { return false; }
  virtual void laplacian(const Eigen::Ref<const Vector>&, Eigen::Ref<Vector>) const {
    throw std::logic_error("moment function does not expose a Laplacian");
  }

  // --- batched entry points -------------------------------------------------

  // X is n x d (rows are states), out is n x r.
  virtual void eval_batch(const Eigen::Ref<const Matrix>& X, Eigen::Ref<Matrix> out) const {
    for (Eigen::Index i = 0; i < X.rows(); ++i) {
      Vector tmp(output_dim());
      eval(X.row(i).transpose(), tmp);
      out.row(i) = tmp.transpose();
    }
  }

  // jac_stack is r x (n*d); particle i occupies columns [i*d, (i+1)*d).
  virtual void jacobian_batch(const Eigen::Ref<const Matrix>& X,
                              Eigen::Ref<Matrix> jac_stack) const {
    const Eigen::Index d = input_dim();
    for (Eigen::Index i = 0; i < X.rows(); ++i) {
      Matrix jac(output_dim(), d);
      jacobian(X.row(i).transpose(), jac);
      jac_stack.middleCols(i * d, d) = jac;
    }
  }

  // Shared forward pass when both phi and its Jacobian are needed.
  virtual void eval_jacobian_batch(const Eigen::Ref<const Matrix>& X, Eigen::Ref<Matrix> phi_out,
                                   Eigen::Ref<Matrix> jac_stack) const {
    eval_batch(X, phi_out);
    jacobian_batch(X, jac_stack);
  }

  // out is n x d, row i = J(x_i)^T w.
  virtual void vjp_batch(const Eigen::Ref<const Matrix>& X, const Eigen::Ref<const Vector>& w,
                         Eigen::Ref<Matrix> out) const {
    for (Eigen::Index i = 0; i < X.rows(); ++i) {
      Vector tmp(input_dim());
      vjp(X.row(i).transpose(), w, tmp);
      out.row(i) = tmp.transpose();
    }
  }

  // Relative cost of one evaluation, used to size work chunks.
  virtual std::size_t unit_cost() const {
    return static_cast<std::size_t>(input_dim()) * static_cast<std::size_t>(output_dim()) + 8;
  }
};

using MomentFunctionPtr = std::shared_ptr<const MomentFunction>;

// phi(x) = (x, x^2, ..., x^r) on scalar states.
class MonomialMap final : public MomentFunction {
 public:
  explicit MonomialMap(Eigen::Index degree) : r_(degree) {
    if (degree < 1) throw ConfigError("monomial map needs degree >= 1");
  }

  Eigen::Index input_dim() const override { return 1; }
  Eigen::Index output_dim() const override { return r_; }

  void eval(const Eigen::Ref<const Vector>& x, Eigen::Ref<Vector> out) const override {
    double p = 1.0;
    for (Eigen::Index k = 0; k < r_; ++k) out[k] = (p *= x[0]);
  }

  void jacobian(const Eigen::Ref<const Vector>& x, Eigen::Ref<Matrix> jac) const override {
    double p = 1.0;  // x^{k-1}
    for (Eigen::Index k = 0; k < r_; ++k) {
      jac(k, 0) = static_cast<double>(k + 1) * p;
      p *= x[0];
    }
  }

  void vjp(const Eigen::Ref<const Vector>& x, const Eigen::Ref<const Vector>& w,
           Eigen::Ref<Vector> out) const override {
    double acc = 0.0, p = 1.0;
    for (Eigen::Index k = 0; k < r_; ++k) {
      acc += w[k] * static_cast<double>(k + 1) * p;
      p *= x[0];
    }
    out[0] = acc;
  }

  bool has_laplacian() const override { return true; }
  void laplacian(const Eigen::Ref<const Vector>& x, Eigen::Ref<Vector> out) const override {
    double p = 1.0;  // x^{k-2}
    out[0] = 0.0;
    for (Eigen::Index k = 1; k < r_; ++k) {
      out[k] = static_cast<double>((k + 1) * k) * p;
      p *= x[0];
    }
  }

  void eval_batch(const Eigen::Ref<const Matrix>& X, Eigen::Ref<Matrix> out) const override {
    for (Eigen::Index i = 0; i < X.rows(); ++i) {
      const double x = X(i, 0);
      double p = 1.0;
      for (Eigen::Index k = 0; k < r_; ++k) out(i, k) = (p *= x);
    }
  }

  void jacobian_batch(const Eigen::Ref<const Matrix>& X, Eigen::Ref<Matrix> jac_stack) const override {
    for (Eigen::Index i = 0; i < X.rows(); ++i) {
      const double x = X(i, 0);
      double p = 1.0;
      for (Eigen::Index k = 0; k < r_; ++k) {
        jac_stack(k, i) = static_cast<double>(k + 1) * p;
        p *= x;
      }
    }
  }

  void vjp_batch(const Eigen::Ref<const Matrix>& X, const Eigen::Ref<const Vector>& w,
                 Eigen::Ref<Matrix> out) const override {
    for (Eigen::Index i = 0; i < X.rows(); ++i) {
      const double x = X(i, 0);
      double acc = 0.0, p = 1.0;
      for (Eigen::Index k = 0; k < r_; ++k) {
        acc += w[k] * static_cast<double>(k + 1) * p;
        p *= x;
      }
      out(i, 0) = acc;
    }
  }

  std::size_t unit_cost() const override { return static_cast<std::size_t>(r_) + 4; }

 private:
  Eigen::Index r_;
};

// phi enumerates upper-triangular products x_i x_j, i <= j, in row-major
// pair order; r = d (d + 1) / 2.
class QuadraticMap final : public MomentFunction {
 public:
  explicit QuadraticMap(Eigen::Index d) : d_(d) {
    if (d < 1) throw ConfigError("quadratic map needs dimension >= 1");
    for (Eigen::Index i = 0; i < d; ++i) {
      for (Eigen::Index j = i; j < d; ++j) pairs_.emplace_back(i, j);
    }
  }

  Eigen::Index input_dim() const override { return d_; }
  Eigen::Index output_dim() const override { return static_cast<Eigen::Index>(pairs_.size()); }
  const std::vector<std::pair<Eigen::Index, Eigen::Index>>& pairs() const { return pairs_; }

  void eval(const Eigen::Ref<const Vector>& x, Eigen::Ref<Vector> out) const override {
    for (std::size_t k = 0; k < pairs_.size(); ++k) {
      out[static_cast<Eigen::Index>(k)] = x[pairs_[k].first] * x[pairs_[k].second];
    }
  }

  void jacobian(const Eigen::Ref<const Vector>& x, Eigen::Ref<Matrix> jac) const override {
    jac.setZero();
    for (std::size_t k = 0; k < pairs_.size(); ++k) {
      const auto [i, j] = pairs_[k];
      jac(static_cast<Eigen::Index>(k), i) += x[j];
      jac(static_cast<Eigen::Index>(k), j) += x[i];
    }
  }

  void vjp(const Eigen::Ref<const Vector>& x, const Eigen::Ref<const Vector>& w,
           Eigen::Ref<Vector> out) const override {
    out.setZero();
    for (std::size_t k = 0; k < pairs_.size(); ++k) {
      const auto [i, j] = pairs_[k];
      const double wk = w[static_cast<Eigen::Index>(k)];
      out[i] += wk * x[j];
      out[j] += wk * x[i];
    }
  }

  bool has_laplacian() const override { return true; }
  void laplacian(const Eigen::Ref<const Vector>&, Eigen::Ref<Vector> out) const override {
    for (std::size_t k = 0; k < pairs_.size(); ++k) {
      out[static_cast<Eigen::Index>(k)] = pairs_[k].first == pairs_[k].second ? 2.0 : 0.0;
    }
  }

 private:
  Eigen::Index d_;
  std::vector<std::pair<Eigen::Index, Eigen::Index>> pairs_;
};

// phi(x) = (x^2, |x|) on scalar states; the subgradient of |x| at 0 is 0.
class AbsQuadraticMap final : public MomentFunction {
 public:
  Eigen::Index input_dim() const override { return 1; }
  Eigen::Index output_dim() const override { return 2; }

  void eval(const Eigen::Ref<const Vector>& x, Eigen::Ref<Vector> out) const override {
    out[0] = x[0] * x[0];
    out[1] = std::abs(x[0]);
  }

  void jacobian(const Eigen::Ref<const Vector>& x, Eigen::Ref<Matrix> jac) const override {
    jac(0, 0) = 2.0 * x[0];
    jac(1, 0) = x[0] > 0.0 ? 1.0 : (x[0] < 0.0 ? -1.0 : 0.0);
  }

  void vjp(const Eigen::Ref<const Vector>& x, const Eigen::Ref<const Vector>& w,
           Eigen::Ref<Vector> out) const override {
    const double sgn = x[0] > 0.0 ? 1.0 : (x[0] < 0.0 ? -1.0 : 0.0);
    out[0] = w[0] * 2.0 * x[0] + w[1] * sgn;
  }

  void eval_batch(const Eigen::Ref<const Matrix>& X, Eigen::Ref<Matrix> out) const override {
    for (Eigen::Index i = 0; i < X.rows(); ++i) {
      const double x = X(i, 0);
      out(i, 0) = x * x;
      out(i, 1) = std::abs(x);
    }
  }

  void jacobian_batch(const Eigen::Ref<const Matrix>& X, Eigen::Ref<Matrix> jac_stack) const override {
    for (Eigen::Index i = 0; i < X.rows(); ++i) {
      const double x = X(i, 0);
      jac_stack(0, i) = 2.0 * x;
      jac_stack(1, i) = x > 0.0 ? 1.0 : (x < 0.0 ? -1.0 : 0.0);
    }
  }

  void vjp_batch(const Eigen::Ref<const Matrix>& X, const Eigen::Ref<const Vector>& w,
                 Eigen::Ref<Matrix> out) const override {
    for (Eigen::Index i = 0; i < X.rows(); ++i) {
      const double x = X(i, 0);
      const double sgn = x > 0.0 ? 1.0 : (x < 0.0 ? -1.0 : 0.0);
      out(i, 0) = w[0] * 2.0 * x + w[1] * sgn;
    }
  }

  std::size_t unit_cost() const override { return 6; }
};

// phi(x) = (x^2, log p(x)) for a user-supplied scalar log density.
class LogDensityMap final : public MomentFunction {
 public:
  using Scalar1D = std::function<double(double)>;

  LogDensityMap(Scalar1D log_p, Scalar1D dlog_p, Scalar1D d2log_p = nullptr)
      : log_p_(std::move(log_p)), dlog_p_(std::move(dlog_p)), d2log_p_(std::move(d2log_p)) {}

  Eigen::Index input_dim() const override { return 1; }
  Eigen::Index output_dim() const override { return 2; }

  void eval(const Eigen::Ref<const Vector>& x, Eigen::Ref<Vector> out) const override {
    out[0] = x[0] * x[0];
    out[1] = checked(log_p_(x[0]), x[0]);
  }

  void jacobian(const Eigen::Ref<const Vector>& x, Eigen::Ref<Matrix> jac) const override {
    jac(0, 0) = 2.0 * x[0];
    jac(1, 0) = checked(dlog_p_(x[0]), x[0]);
  }

  void vjp(const Eigen::Ref<const Vector>& x, const Eigen::Ref<const Vector>& w,
           Eigen::Ref<Vector> out) const override {
    out[0] = w[0] * 2.0 * x[0] + w[1] * checked(dlog_p_(x[0]), x[0]);
  }

  bool has_laplacian() const override { return static_cast<bool>(d2log_p_); }
  void laplacian(const Eigen::Ref<const Vector>& x, Eigen::Ref<Vector> out) const override {
    if (!d2log_p_) throw std::logic_error("log-density map built without a second derivative");
    out[0] = 2.0;
    out[1] = checked(d2log_p_(x[0]), x[0]);
  }

 private:
  static double checked(double v, double x) {
    if (!std::isfinite(v)) {
      throw DataError("log density evaluated to a non-finite value at x = " + std::to_string(x));
    }
    return v;
  }

  Scalar1D log_p_, dlog_p_, d2log_p_;
};

inline MomentFunctionPtr monomial_map(Eigen::Index degree) {
  return std::make_shared<MonomialMap>(degree);
}
inline MomentFunctionPtr quadratic_map(Eigen::Index d) {
  return std::make_shared<QuadraticMap>(d);
}
inline MomentFunctionPtr abs_quadratic_map() { return std::make_shared<AbsQuadraticMap>(); }
inline MomentFunctionPtr log_density_map(LogDensityMap::Scalar1D log_p,
                                         LogDensityMap::Scalar1D dlog_p,
                                         LogDensityMap::Scalar1D d2log_p = nullptr) {
  return std::make_shared<LogDensityMap>(std::move(log_p), std::move(dlog_p), std::move(d2log_p));
}

// ---------------------------------------------------------------------------
// Ensemble Gram matrix G = (1/n_rep) sum_i grad phi(x_i) grad phi(x_i)^T.
// ---------------------------------------------------------------------------

struct GramMatrix {
  Matrix entries;  // r x r, symmetric PSD
};

struct GramAndMean {
  Matrix gram;      // r x r
  Vector mean_phi;  // r
};

namespace detail {

inline std::size_t gram_chunk(const MomentFunction& phi) {
  const auto d = static_cast<std::size_t>(phi.input_dim());
  const auto r = static_cast<std::size_t>(phi.output_dim());
  return chunk_size_for(r * d + phi.unit_cost());
}

}  // namespace detail

// Accumulates the Gram matrix and (optionally) the mean of phi in one sweep
// over the particles. Chunks are combined in index order, so the result is
// identical for any thread count; Jacobians are streamed one chunk at a time.
inline GramAndMean gram_and_mean(const Matrix& states, const MomentFunction& phi,
                                 bool want_mean) {
  const Eigen::Index n = states.rows();
  const Eigen::Index d = phi.input_dim();
  const Eigen::Index r = phi.output_dim();
  if (n < 1) throw ConfigError("gram needs at least one particle");
  if (states.cols() != d) throw ConfigError("ensemble dimension does not match moment function");

  struct Partial {
    Matrix gram;
    Vector sum_phi;
  };
  const std::size_t chunk = detail::gram_chunk(phi);
  Partial total = parallel_reduce<Partial>(
      static_cast<std::size_t>(n), chunk,
      [&] {
        Partial p;
        p.gram = Matrix::Zero(r, r);
        p.sum_phi = Vector::Zero(r);
        return p;
      },
      [&](std::size_t begin, std::size_t end, Partial& p) {
        const auto nb = static_cast<Eigen::Index>(end - begin);
        const auto block = states.middleRows(static_cast<Eigen::Index>(begin), nb);
        Matrix jac_stack(r, nb * d);
        if (want_mean) {
          Matrix phis(nb, r);
          phi.eval_jacobian_batch(block, phis, jac_stack);
          for (Eigen::Index i = 0; i < nb; ++i) {
            if (!phis.row(i).allFinite()) {
              throw DataError("non-finite moment value at particle " +
                              std::to_string(begin + static_cast<std::size_t>(i)));
            }
          }
          p.sum_phi += phis.colwise().sum().transpose();
        } else {
          phi.jacobian_batch(block, jac_stack);
        }
        if (!jac_stack.allFinite()) throw DataError("non-finite Jacobian entry in gram accumulation");
        p.gram.selfadjointView<Eigen::Lower>().rankUpdate(jac_stack, 1.0);
      },
      [](Partial& a, const Partial& b) {
        a.gram += b.gram;
        a.sum_phi += b.sum_phi;
      });

  GramAndMean out;
  out.gram = total.gram.selfadjointView<Eigen::Lower>();
  out.gram /= static_cast<double>(n);
  out.mean_phi = want_mean ? Vector(total.sum_phi / static_cast<double>(n)) : Vector();
  return out;
}

inline GramAndMean gram_and_mean(const ParticleEnsemble& ensemble, const MomentFunction& phi,
                                 bool want_mean) {
  return gram_and_mean(ensemble.states, phi, want_mean);
}

inline GramMatrix gram(const ParticleEnsemble& ensemble, const MomentFunction& phi) {
  return GramMatrix{gram_and_mean(ensemble.states, phi, false).gram};
}

// ---------------------------------------------------------------------------
// Regularized symmetric solve.
//
// Coordinates with a (numerically) zero Gram diagonal are pruned and get a
// zero multiplier; the kept system is rescaled to unit diagonal, shifted by
// delta, and solved by LDLT with an eigendecomposition pseudo-inverse as
// fall-back.
// ---------------------------------------------------------------------------

inline Vector regularized_solve(const Matrix& G, const Eigen::Ref<const Vector>& rhs,
                                double delta) {
  const Eigen::Index r = G.rows();
  if (G.cols() != r || rhs.size() != r) {
    throw std::invalid_argument("regularized_solve: shape mismatch");
  }
  constexpr double kPruneThreshold = 1e-14;

  std::vector<Eigen::Index> kept;
  kept.reserve(static_cast<std::size_t>(r));
  for (Eigen::Index k = 0; k < r; ++k) {
    if (G(k, k) > kPruneThreshold) kept.push_back(k);
  }
  Vector result = Vector::Zero(r);
  if (kept.empty()) return result;

  const auto m = static_cast<Eigen::Index>(kept.size());
  Vector inv_sqrt(m);
  for (Eigen::Index a = 0; a < m; ++a) inv_sqrt[a] = 1.0 / std::sqrt(G(kept[a], kept[a]));

  Matrix scaled(m, m);
  Vector scaled_rhs(m);
  for (Eigen::Index a = 0; a < m; ++a) {
    scaled_rhs[a] = rhs[kept[a]] * inv_sqrt[a];
    for (Eigen::Index b = 0; b < m; ++b) {
      scaled(a, b) = G(kept[a], kept[b]) * inv_sqrt[a] * inv_sqrt[b];
    }
  }
  scaled.diagonal().array() += delta;

  Vector y;
  Eigen::LDLT<Matrix> ldlt(scaled);
  if (ldlt.info() == Eigen::Success) {
    y = ldlt.solve(scaled_rhs);
  }
  if (y.size() == 0 || !y.allFinite()) {
    // Pseudo-inverse on the spectrum; kicks in when the factorization fails.
    Eigen::SelfAdjointEigenSolver<Matrix> eig(scaled);
    const Vector& evals = eig.eigenvalues();
    const double cutoff = 1e-12 * std::max(1.0, evals.cwiseAbs().maxCoeff());
    Vector proj = eig.eigenvectors().transpose() * scaled_rhs;
    for (Eigen::Index a = 0; a < m; ++a) {
      proj[a] = std::abs(evals[a]) > cutoff ? proj[a] / evals[a] : 0.0;
    }
    y = eig.eigenvectors() * proj;
  }

  for (Eigen::Index a = 0; a < m; ++a) result[kept[a]] = y[a] * inv_sqrt[a];
  return result;
}

}  // namespace mgd
