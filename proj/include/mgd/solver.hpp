// Copyright (C) 2026 the mgd authors
// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <Eigen/Dense>
#include <cmath>
#include <cstdint>
#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

#include "mgd/core.hpp"
#include "mgd/moment_maps.hpp"
#include "mgd/moment_path.hpp"

namespace mgd {

// Which multiplier estimate feeds the entropy accumulator. The corrector
// solution absorbs the h*sigma^2 scaling and is the default; the Laplacian
// route solves G theta = mean Laplacian(phi) directly and is the only option
// when sigma = 0 (the corrector system degenerates there).
enum class EntropyMultiplier { kCorrector, kLaplacian };

struct StepRule {
  double a = 400.0;
  double b = 1000.0;
};

struct MgdConfig {
  double sigma2 = 1.0;
  StepRule step_rule;
  Eigen::Index n_steps_override = 0;  // > 0 bypasses the step rule
  Eigen::Index n_rep = 1000;
  double delta = 1e-7;
  double epsilon_confine = 0.0;
  RngContract seed;
  bool deterministic = true;
  EntropyMultiplier entropy_multiplier = EntropyMultiplier::kCorrector;

  Eigen::Index n_steps() const {
    if (n_steps_override > 0) return n_steps_override;
    const double n = std::ceil(step_rule.a * sigma2 + step_rule.b);
    return static_cast<Eigen::Index>(n < 1.0 ? 1.0 : n);
  }

  void validate() const {
    if (sigma2 < 0.0) throw ConfigError("sigma2 must be non-negative");
    if (n_rep < 1) throw ConfigError("n_rep must be positive");
    if (delta < 0.0) throw ConfigError("delta must be non-negative");
    if (epsilon_confine < 0.0) throw ConfigError("epsilon_confine must be non-negative");
    if (n_steps() < 1) throw ConfigError("step rule yields no steps");
  }
};

struct SolverTrace {
  Matrix eta_hat;            // n_steps x r
  Matrix theta_hat;          // n_steps x r
  Vector moment_residual;    // n_steps, inf-norm after the corrector
  Vector entropy_increment;  // n_steps, theta_hat[k]^T (m_{k+1} - m_k)
  Vector entropy_partial;    // n_steps, h0 + running sum of increments
  double h0_entropy = 0.0;
  long corrector_sign_flips = 0;

  double max_residual() const {
    return moment_residual.size() == 0 ? 0.0 : moment_residual.maxCoeff();
  }
  double h_star() const {
    return entropy_partial.size() == 0 ? h0_entropy
                                       : entropy_partial[entropy_partial.size() - 1];
  }
};

inline double gaussian_entropy(Eigen::Index d) {
  return 0.5 * static_cast<double>(d) * std::log(2.0 * M_PI * M_E);
}

// H_*^sigma = H(p_0) + sum_k theta_hat_k^T (m_{(k+1)h} - m_{kh}).
inline double entropy_lower_bound(const SolverTrace& trace, double h0_entropy) {
  return h0_entropy + trace.entropy_increment.sum();
}

namespace detail {

struct SweepStats {
  Matrix gram;      // r x r (lower triangle accumulated), empty if not requested
  Vector sum_phi;   // r
  bool finite = true;
};

struct SweepOptions {
  bool want_gram = true;
  bool check_states = true;
};

inline std::size_t sweep_chunk(const MomentFunction& phi) {
  const auto d = static_cast<std::size_t>(phi.input_dim());
  const auto r = static_cast<std::size_t>(phi.output_dim());
  return chunk_size_for(2 * (r * d + phi.unit_cost()) + 16 * d);
}

// One fused sweep: out_row(i) = transform(in_row(i)) for a caller-supplied
// per-chunk transform, then phi / Jacobian / Gram accumulation on the fresh
// output block while it is hot. Chunks combine in index order.
template <class Transform>
SweepStats transform_sweep(const Matrix& in, Matrix& out, const MomentFunction& phi,
                           const SweepOptions& opts, Transform&& transform) {
  const Eigen::Index n = in.rows();
  const Eigen::Index d = phi.input_dim();
  const Eigen::Index r = phi.output_dim();
  return parallel_reduce<SweepStats>(
      static_cast<std::size_t>(n), sweep_chunk(phi),
      [&] {
        SweepStats s;
        if (opts.want_gram) s.gram = Matrix::Zero(r, r);
        s.sum_phi = Vector::Zero(r);
        return s;
      },
      [&](std::size_t begin, std::size_t end, SweepStats& s) {
        const auto nb = static_cast<Eigen::Index>(end - begin);
        const auto b = static_cast<Eigen::Index>(begin);
        transform(b, nb);
        const auto block = out.middleRows(b, nb);
        if (opts.check_states && !block.allFinite()) s.finite = false;
        Matrix phis(nb, r);
        if (opts.want_gram) {
          Matrix jac_stack(r, nb * d);
          phi.eval_jacobian_batch(block, phis, jac_stack);
          if (!jac_stack.allFinite()) s.finite = false;
          s.gram.selfadjointView<Eigen::Lower>().rankUpdate(jac_stack, 1.0);
        } else {
          phi.eval_batch(block, phis);
        }
        if (!phis.allFinite()) s.finite = false;
        s.sum_phi += phis.colwise().sum().transpose();
      },
      [](SweepStats& a, const SweepStats& b) {
        if (a.gram.size() != 0) a.gram += b.gram;
        a.sum_phi += b.sum_phi;
        a.finite = a.finite && b.finite;
      });
}

inline Matrix finish_gram(const SweepStats& stats, Eigen::Index n) {
  Matrix g = stats.gram.template selfadjointView<Eigen::Lower>();
  g /= static_cast<double>(n);
  return g;
}

// Predictor: y_i = (1 - h eps) x_i + h J(x_i)^T eta + sqrt(2h) sigma xi_i,
// with per-(particle, step) noise streams; accumulates Gram/mean on y.
inline SweepStats predictor_sweep(const Matrix& x, Matrix& y, const MomentFunction& phi,
                                  const Vector& eta, double h, double sigma, double epsilon,
                                  const RngContract& rng, Eigen::Index step,
                                  const SweepOptions& opts) {
  const Eigen::Index d = x.cols();
  const double noise_scale = std::sqrt(2.0 * h) * sigma;
  return transform_sweep(x, y, phi, opts, [&](Eigen::Index b, Eigen::Index nb) {
    Matrix drift(nb, d);
    phi.vjp_batch(x.middleRows(b, nb), eta, drift);
    y.middleRows(b, nb) = (1.0 - h * epsilon) * x.middleRows(b, nb) + h * drift;
    if (noise_scale != 0.0) {
      double buf[64];
      for (Eigen::Index i = 0; i < nb; ++i) {
        RngStream stream(rng, StreamPurpose::kPredictorNoise,
                         static_cast<std::uint64_t>(b + i), static_cast<std::uint64_t>(step));
        auto row = y.row(b + i);
        for (Eigen::Index c = 0; c < d; c += 64) {
          const Eigen::Index m = std::min<Eigen::Index>(64, d - c);
          stream.fill_normal(buf, static_cast<std::size_t>(m));
          for (Eigen::Index q = 0; q < m; ++q) row[c + q] += noise_scale * buf[q];
        }
      }
    }
  });
}

// Corrector: x_i = y_i + sign * J(y_i)^T nu; accumulates Gram/mean on x.
inline SweepStats corrector_sweep(const Matrix& y, Matrix& x, const MomentFunction& phi,
                                  const Vector& nu, double sign, const SweepOptions& opts) {
  const Eigen::Index d = y.cols();
  return transform_sweep(y, x, phi, opts, [&](Eigen::Index b, Eigen::Index nb) {
    Matrix move(nb, d);
    phi.vjp_batch(y.middleRows(b, nb), nu, move);
    x.middleRows(b, nb) = y.middleRows(b, nb) + sign * move;
  });
}

struct MeanPhiResult {
  Vector mean;
  bool finite = true;
};

inline MeanPhiResult mean_phi(const Matrix& states, const MomentFunction& phi) {
  const Eigen::Index n = states.rows();
  const Eigen::Index r = phi.output_dim();
  struct Partial {
    Vector sum;
    bool finite = true;
  };
  const std::size_t chunk = chunk_size_for(phi.unit_cost());
  Partial total = parallel_reduce<Partial>(
      static_cast<std::size_t>(n), chunk, [&] { return Partial{Vector::Zero(r), true}; },
      [&](std::size_t begin, std::size_t end, Partial& p) {
        const auto nb = static_cast<Eigen::Index>(end - begin);
        Matrix phis(nb, r);
        phi.eval_batch(states.middleRows(static_cast<Eigen::Index>(begin), nb), phis);
        if (!phis.allFinite()) p.finite = false;
        p.sum += phis.colwise().sum().transpose();
      },
      [](Partial& a, const Partial& b) {
        a.sum += b.sum;
        a.finite = a.finite && b.finite;
      });
  return MeanPhiResult{total.sum / static_cast<double>(n), total.finite};
}

inline Vector mean_laplacian(const Matrix& states, const MomentFunction& phi) {
  const Eigen::Index n = states.rows();
  const Eigen::Index r = phi.output_dim();
  const std::size_t chunk = chunk_size_for(phi.unit_cost());
  Vector total = parallel_reduce<Vector>(
      static_cast<std::size_t>(n), chunk, [&] { return Vector(Vector::Zero(r)); },
      [&](std::size_t begin, std::size_t end, Vector& sum) {
        Vector lap(r);
        for (std::size_t i = begin; i < end; ++i) {
          phi.laplacian(states.row(static_cast<Eigen::Index>(i)).transpose(), lap);
          sum += lap;
        }
      },
      [](Vector& a, const Vector& b) { a += b; });
  return total / static_cast<double>(n);
}

}  // namespace detail

// ---------------------------------------------------------------------------
// Interacting-particle predictor-corrector integrator for the moment-guided
// SDE  dX = ((eta_t - sigma^2 theta_t)^T grad phi(X) - eps X) dt
//           + sqrt(2) sigma dW.
//
// Per step: solve G_k eta_k = dm/dt and take an Euler-Maruyama half step;
// then solve h sigma^2 G'_k theta_k = mean phi(Y) - m_{k+1} on the moved
// ensemble and project back so the empirical moments track m exactly. At
// sigma = 0 the h sigma^2 factor is absorbed into the solved coefficient,
// which keeps the projection exact in the ODE limit. The projection is
// applied with the sign that shrinks the measured residual; a step that
// fails the check is re-applied with the opposite sign.
// ---------------------------------------------------------------------------

inline std::pair<ParticleEnsemble, SolverTrace> mgd_run(const MgdConfig& config,
                                                        const MomentFunction& phi,
                                                        const MomentPath& path,
                                                        ParticleEnsemble init) {
  config.validate();
  const Eigen::Index n_steps = config.n_steps();
  if (path.n_steps() != n_steps) {
    throw ConfigError("moment path grid (" + std::to_string(path.n_steps()) +
                      " steps) does not match solver steps (" + std::to_string(n_steps) + ")");
  }
  const Eigen::Index r = phi.output_dim();
  const Eigen::Index d = phi.input_dim();
  if (init.dim() != d) throw ConfigError("initial ensemble dimension mismatch");
  if (init.n_rep() < 2) throw ConfigError("need n_rep >= 2 to estimate Gram matrices");

  const double h = path.h();
  const double sigma2 = config.sigma2;
  const double sigma = std::sqrt(sigma2);
  const bool lap_multiplier = config.entropy_multiplier == EntropyMultiplier::kLaplacian ||
                              (sigma2 == 0.0 && phi.has_laplacian());

  SolverTrace trace;
  trace.eta_hat.resize(n_steps, r);
  trace.theta_hat.resize(n_steps, r);
  trace.moment_residual.resize(n_steps);
  trace.entropy_increment.resize(n_steps);
  trace.entropy_partial.resize(n_steps);
  trace.h0_entropy = gaussian_entropy(d);

  Matrix& x = init.states;
  Matrix y(x.rows(), d);
  double running_h = trace.h0_entropy;
  double last_residual = 0.0;

  detail::SweepOptions gram_opts;   // gram + mean + finiteness
  detail::SweepOptions plain_opts;  // mean + finiteness only
  plain_opts.want_gram = false;

  Matrix gram_x = gram_and_mean(x, phi, false).gram;
  for (Eigen::Index k = 0; k < n_steps; ++k) {
    Vector eta = regularized_solve(gram_x, path.diffs.row(k).transpose(), config.delta);

    detail::SweepStats on_y = detail::predictor_sweep(x, y, phi, eta, h, sigma,
                                                      config.epsilon_confine, config.seed, k,
                                                      gram_opts);
    if (!on_y.finite) {
      throw DivergedError("non-finite state after predictor at step " + std::to_string(k), k,
                          last_residual);
    }
    Matrix gram_y = detail::finish_gram(on_y, init.n_rep());
    const Vector target = path.values.row(k + 1).transpose();
    Vector residual_pre = on_y.sum_phi / static_cast<double>(init.n_rep()) - target;
    Vector nu = regularized_solve(gram_y, residual_pre, config.delta);

    // The corrector sweep also produces the Gram/mean of the corrected
    // ensemble, which seeds the next predictor solve.
    const bool want_next_gram = k + 1 < n_steps || lap_multiplier;
    detail::SweepOptions post_opts = want_next_gram ? gram_opts : plain_opts;
    detail::SweepStats on_x = detail::corrector_sweep(y, x, phi, nu, -1.0, post_opts);
    Vector residual_after = on_x.sum_phi / static_cast<double>(init.n_rep()) - target;
    double sign = -1.0;
    if (!on_x.finite || residual_after.lpNorm<Eigen::Infinity>() >
                            residual_pre.lpNorm<Eigen::Infinity>() + 1e-15) {
      detail::SweepStats flipped = detail::corrector_sweep(y, x, phi, nu, +1.0, post_opts);
      Vector flipped_residual = flipped.sum_phi / static_cast<double>(init.n_rep()) - target;
      if (flipped.finite && (!on_x.finite || flipped_residual.lpNorm<Eigen::Infinity>() <
                                                 residual_after.lpNorm<Eigen::Infinity>())) {
        on_x = std::move(flipped);
        residual_after = std::move(flipped_residual);
        sign = +1.0;
        ++trace.corrector_sign_flips;
      } else {
        // Restore the minus-sign states clobbered by the flipped sweep.
        detail::SweepOptions redo = plain_opts;
        redo.check_states = false;
        detail::corrector_sweep(y, x, phi, nu, -1.0, redo);
      }
    }
    last_residual = residual_after.lpNorm<Eigen::Infinity>();
    if (!on_x.finite) {
      init.require_finite(k, last_residual);
      throw DivergedError("non-finite moment value at step " + std::to_string(k), k,
                          last_residual);
    }
    if (want_next_gram) gram_x = detail::finish_gram(on_x, init.n_rep());

    Vector theta;
    if (lap_multiplier) {
      theta = regularized_solve(gram_x, detail::mean_laplacian(x, phi), config.delta);
    } else if (sigma2 > 0.0) {
      theta = -sign * nu / (h * sigma2);
    } else {
      theta = Vector::Zero(r);
    }

    trace.eta_hat.row(k) = eta.transpose();
    trace.theta_hat.row(k) = theta.transpose();
    trace.moment_residual[k] = last_residual;
    const double increment =
        theta.dot((path.values.row(k + 1) - path.values.row(k)).transpose());
    trace.entropy_increment[k] = increment;
    running_h += increment;
    trace.entropy_partial[k] = running_h;
  }
  return {std::move(init), std::move(trace)};
}

inline std::pair<ParticleEnsemble, SolverTrace> mgd_run(const MgdConfig& config,
                                                        const MomentFunction& phi,
                                                        const MomentPath& path) {
  return mgd_run(config, phi, path,
                 ParticleEnsemble::gaussian(config.n_rep, phi.input_dim(), config.seed));
}

// ---------------------------------------------------------------------------
// Precomputed transport: the predictor coefficients are regressed against
// the interpolant velocity before sampling, eta_t = argmin E|eta^T grad
// phi(I_t) - dI_t/dt|^2, solved by SGD on fresh interpolant minibatches.
// The corrector is unchanged and keeps the moments on target.
// ---------------------------------------------------------------------------

struct SgdParams {
  Eigen::Index batch = 512;
  int iters_first = 4000;  // grid point t_0
  int iters = 400;         // warm-started follow-up points
  double lr = 0.02;        // relative step, rescaled by the local Gram trace
  double averaging_fraction = 0.5;
};

inline Matrix learn_transport_coefficients(const MomentFunction& phi, const Matrix& dataset,
                                           Eigen::Index n_grid, const InterpolantSchedule& sched,
                                           const RngContract& rng, const SgdParams& params) {
  const Eigen::Index d = phi.input_dim();
  const Eigen::Index r = phi.output_dim();
  const Eigen::Index n_data = dataset.rows();
  if (n_data < 1) throw DataError("transport regression needs a non-empty dataset");
  const Eigen::Index batch = params.batch;

  Matrix table(n_grid, r);
  Vector eta = Vector::Zero(r);
  Matrix z(batch, d), interp(batch, d), idot(batch, d), jac_stack(r, batch * d);
  Vector grad(r), avg(r);

  for (Eigen::Index k = 0; k < n_grid; ++k) {
    const double t = static_cast<double>(k) / static_cast<double>(n_grid);
    const double c = sched.cos_alpha(t), s = sched.sin_alpha(t);
    const double adot = sched.alpha_dot(t);
    const int iters = k == 0 ? params.iters_first : params.iters;
    const int avg_from = iters - std::max(1, static_cast<int>(iters * params.averaging_fraction));
    avg.setZero();
    double lr_scale = -1.0;
    int n_avg = 0;
    for (int it = 0; it < iters; ++it) {
      RngStream stream(rng, StreamPurpose::kSgdBatch, static_cast<std::uint64_t>(k),
                       static_cast<std::uint64_t>(it));
      for (Eigen::Index b = 0; b < batch; ++b) {
        stream.fill_normal(z.row(b).data(), static_cast<std::size_t>(d));
        const auto pick = static_cast<Eigen::Index>(
            stream.uniform_index(static_cast<std::uint64_t>(n_data)));
        interp.row(b) = c * z.row(b) + s * dataset.row(pick);
        idot.row(b) = adot * (-s * z.row(b) + c * dataset.row(pick));
      }
      phi.jacobian_batch(interp, jac_stack);
      grad.setZero();
      for (Eigen::Index b = 0; b < batch; ++b) {
        const auto jac = jac_stack.middleCols(b * d, d);
        grad.noalias() += jac * (jac.transpose() * eta - idot.row(b).transpose());
      }
      grad /= static_cast<double>(batch);
      if (lr_scale < 0.0) {
        double tr = 0.0;
        for (Eigen::Index b = 0; b < batch; ++b) {
          tr += jac_stack.middleCols(b * d, d).squaredNorm();
        }
        lr_scale = params.lr / std::max(1e-12, tr / static_cast<double>(batch));
      }
      eta -= lr_scale * grad;
      if (!eta.allFinite() || grad.norm() > 1e12) {
        throw DivergedError("transport regression diverged at grid point " + std::to_string(k), k,
                            grad.norm());
      }
      if (it >= avg_from) {
        avg += eta;
        ++n_avg;
      }
    }
    eta = avg / static_cast<double>(n_avg);
    table.row(k) = eta.transpose();
  }
  return table;
}

inline std::pair<ParticleEnsemble, SolverTrace> mgd_run_precomputed(
    const MgdConfig& config, const MomentFunction& phi, const MomentPath& path,
    const Matrix& dataset, const SgdParams& sgd_params,
    const InterpolantSchedule& sched = InterpolantSchedule::cosine()) {
  config.validate();
  const Eigen::Index n_steps = config.n_steps();
  if (path.n_steps() != n_steps) throw ConfigError("moment path grid does not match solver steps");
  const Eigen::Index r = phi.output_dim();
  const Eigen::Index d = phi.input_dim();
  const double h = path.h();
  const double sigma2 = config.sigma2;
  const double sigma = std::sqrt(sigma2);

  Matrix eta_table =
      learn_transport_coefficients(phi, dataset, n_steps, sched, config.seed, sgd_params);

  ParticleEnsemble ens = ParticleEnsemble::gaussian(config.n_rep, d, config.seed);
  SolverTrace trace;
  trace.eta_hat = eta_table;
  trace.theta_hat.resize(n_steps, r);
  trace.moment_residual.resize(n_steps);
  trace.entropy_increment.resize(n_steps);
  trace.entropy_partial.resize(n_steps);
  trace.h0_entropy = gaussian_entropy(d);

  Matrix& x = ens.states;
  Matrix y(x.rows(), d);
  double running_h = trace.h0_entropy;

  detail::SweepOptions gram_opts;
  detail::SweepOptions plain_opts;
  plain_opts.want_gram = false;

  for (Eigen::Index k = 0; k < n_steps; ++k) {
    const Vector eta = eta_table.row(k).transpose();
    detail::SweepStats on_y = detail::predictor_sweep(x, y, phi, eta, h, sigma,
                                                      config.epsilon_confine, config.seed, k,
                                                      gram_opts);
    if (!on_y.finite) {
      throw DivergedError("non-finite state after predictor at step " + std::to_string(k), k,
                          trace.moment_residual.head(k).size() ? trace.moment_residual[k - 1]
                                                               : 0.0);
    }
    Matrix gram_y = detail::finish_gram(on_y, ens.n_rep());
    const Vector target = path.values.row(k + 1).transpose();
    Vector residual_pre = on_y.sum_phi / static_cast<double>(ens.n_rep()) - target;
    Vector nu = regularized_solve(gram_y, residual_pre, config.delta);

    detail::SweepStats on_x = detail::corrector_sweep(y, x, phi, nu, -1.0, plain_opts);
    Vector residual_after = on_x.sum_phi / static_cast<double>(ens.n_rep()) - target;
    double sign = -1.0;
    if (!on_x.finite || residual_after.lpNorm<Eigen::Infinity>() >
                            residual_pre.lpNorm<Eigen::Infinity>() + 1e-15) {
      detail::SweepStats flipped = detail::corrector_sweep(y, x, phi, nu, +1.0, plain_opts);
      Vector flipped_residual = flipped.sum_phi / static_cast<double>(ens.n_rep()) - target;
      if (flipped.finite && (!on_x.finite || flipped_residual.lpNorm<Eigen::Infinity>() <
                                                 residual_after.lpNorm<Eigen::Infinity>())) {
        on_x = std::move(flipped);
        residual_after = std::move(flipped_residual);
        sign = +1.0;
        ++trace.corrector_sign_flips;
      } else {
        detail::SweepOptions redo = plain_opts;
        redo.check_states = false;
        detail::corrector_sweep(y, x, phi, nu, -1.0, redo);
      }
    }
    const double resid = residual_after.lpNorm<Eigen::Infinity>();
    ens.require_finite(k, resid);

    Vector theta =
        sigma2 > 0.0 ? Vector(-sign * nu / (h * sigma2)) : Vector(Vector::Zero(r));
    trace.theta_hat.row(k) = theta.transpose();
    trace.moment_residual[k] = resid;
    const double inc = theta.dot((path.values.row(k + 1) - path.values.row(k)).transpose());
    trace.entropy_increment[k] = inc;
    running_h += inc;
    trace.entropy_partial[k] = running_h;
  }
  return {std::move(ens), std::move(trace)};
}

// ---------------------------------------------------------------------------
// Offline coefficient learning: build the (eta_k, theta_k) table once by
// propagating fresh batches with the coefficients learned so far, then
// sample with the frozen table one particle at a time.
// ---------------------------------------------------------------------------

struct CoefficientTable {
  Matrix eta;    // n_steps x r
  Matrix theta;  // n_steps x r
  double sigma2 = 0.0;
  double epsilon_confine = 0.0;
  Eigen::Index n_steps() const { return eta.rows(); }
};

namespace detail {

// Lumped Euler-Maruyama update used by both the offline learning phase and
// the table-driven sampler: drift (eta - sigma^2 theta)^T grad phi - eps x.
inline void lumped_step(Vector& x, const MomentFunction& phi, const Vector& coeff, double h,
                        double sigma, double epsilon, RngStream& stream, Vector& drift) {
  phi.vjp(x, coeff, drift);
  x = (1.0 - h * epsilon) * x + h * drift;
  const double noise_scale = std::sqrt(2.0 * h) * sigma;
  if (noise_scale != 0.0) {
    for (Eigen::Index c = 0; c < x.size(); ++c) x[c] += noise_scale * stream.normal();
  }
}

}  // namespace detail

inline CoefficientTable learn_coefficients_offline(const MgdConfig& config,
                                                   const MomentFunction& phi,
                                                   const MomentPath& path, Eigen::Index n_batches) {
  config.validate();
  if (n_batches < 1) throw ConfigError("offline learning needs at least one batch");
  const Eigen::Index n_steps = config.n_steps();
  if (path.n_steps() != n_steps) throw ConfigError("moment path grid does not match solver steps");
  const Eigen::Index d = phi.input_dim();
  const Eigen::Index r = phi.output_dim();
  const Eigen::Index n_b = (config.n_rep + n_batches - 1) / n_batches;
  const double h = path.h();
  const double sigma2 = config.sigma2;
  const double sigma = std::sqrt(sigma2);

  CoefficientTable table;
  table.eta.resize(n_steps, r);
  table.theta.resize(n_steps, r);
  table.sigma2 = sigma2;
  table.epsilon_confine = config.epsilon_confine;

  // Propagates one batch to time index k with the coefficients learned so
  // far; streams are keyed by global particle id so re-propagation is exact.
  auto propagate_batch = [&](Eigen::Index batch_idx, Eigen::Index k, Matrix& states) {
    states.resize(n_b, d);
    Vector drift(d);
    for (Eigen::Index i = 0; i < n_b; ++i) {
      const auto pid = static_cast<std::uint64_t>(batch_idx * n_b + i);
      RngStream init_stream(config.seed, StreamPurpose::kOfflineBatch, pid, 0);
      Vector xi(d);
      for (Eigen::Index c = 0; c < d; ++c) xi[c] = init_stream.normal();
      for (Eigen::Index step = 0; step < k; ++step) {
        RngStream noise(config.seed, StreamPurpose::kOfflineBatch, pid,
                        static_cast<std::uint64_t>(step) + 1);
        Vector coeff =
            table.eta.row(step).transpose() - sigma2 * table.theta.row(step).transpose();
        detail::lumped_step(xi, phi, coeff, h, sigma, config.epsilon_confine, noise, drift);
      }
      states.row(i) = xi.transpose();
    }
  };

  Matrix batch_states;
  Matrix jac_stack(r, n_b * d);
  for (Eigen::Index k = 0; k < n_steps; ++k) {
    // Pass 1: Gram at time k, one batch at a time.
    Matrix gram_acc = Matrix::Zero(r, r);
    for (Eigen::Index b = 0; b < n_batches; ++b) {
      propagate_batch(b, k, batch_states);
      phi.jacobian_batch(batch_states, jac_stack);
      gram_acc.selfadjointView<Eigen::Lower>().rankUpdate(jac_stack,
                                                          1.0 / static_cast<double>(n_b));
    }
    Matrix gram_k = gram_acc.selfadjointView<Eigen::Lower>();
    gram_k /= static_cast<double>(n_batches);
    table.eta.row(k) =
        regularized_solve(gram_k, path.diffs.row(k).transpose(), config.delta).transpose();

    // Pass 2: re-propagate, take the predictor half step, accumulate the
    // post-move Gram and mean to solve for theta_k.
    Matrix gram_y = Matrix::Zero(r, r);
    Vector mean_y = Vector::Zero(r);
    Matrix phis(n_b, r);
    const Vector eta_k = table.eta.row(k).transpose();
    Vector drift(d);
    const double noise_scale = std::sqrt(2.0 * h) * sigma;
    for (Eigen::Index b = 0; b < n_batches; ++b) {
      propagate_batch(b, k, batch_states);
      for (Eigen::Index i = 0; i < n_b; ++i) {
        Vector xi = batch_states.row(i).transpose();
        phi.vjp(xi, eta_k, drift);
        xi = (1.0 - h * config.epsilon_confine) * xi + h * drift;
        if (noise_scale != 0.0) {
          RngStream noise(config.seed, StreamPurpose::kOfflineBatch,
                          static_cast<std::uint64_t>(b * n_b + i),
                          static_cast<std::uint64_t>(k) + 1);
          for (Eigen::Index c = 0; c < d; ++c) xi[c] += noise_scale * noise.normal();
        }
        batch_states.row(i) = xi.transpose();
      }
      phi.eval_jacobian_batch(batch_states, phis, jac_stack);
      gram_y.selfadjointView<Eigen::Lower>().rankUpdate(jac_stack, 1.0 / static_cast<double>(n_b));
      mean_y += phis.colwise().mean().transpose();
    }
    Matrix gram_yk = gram_y.selfadjointView<Eigen::Lower>();
    gram_yk /= static_cast<double>(n_batches);
    mean_y /= static_cast<double>(n_batches);
    Vector residual = mean_y - path.values.row(k + 1).transpose();
    Vector nu = regularized_solve(gram_yk, residual, config.delta);
    Vector theta_k = sigma2 > 0.0 ? Vector(nu / (h * sigma2)) : Vector(Vector::Zero(r));
    table.theta.row(k) = theta_k.transpose();
  }
  return table;
}

// Table-driven sampler; one particle needs O(d) memory and no ensemble.
inline Vector sample_with_coefficients(const CoefficientTable& table, const MomentFunction& phi,
                                       const RngContract& rng, std::uint64_t particle_id) {
  const Eigen::Index d = phi.input_dim();
  const double h = 1.0 / static_cast<double>(table.n_steps());
  const double sigma = std::sqrt(table.sigma2);
  RngStream init_stream(rng, StreamPurpose::kOfflineBatch, particle_id, 0);
  Vector x(d), drift(d);
  for (Eigen::Index c = 0; c < d; ++c) x[c] = init_stream.normal();
  for (Eigen::Index k = 0; k < table.n_steps(); ++k) {
    RngStream noise(rng, StreamPurpose::kOfflineBatch, particle_id,
                    static_cast<std::uint64_t>(k) + 1);
    Vector coeff = table.eta.row(k).transpose() - table.sigma2 * table.theta.row(k).transpose();
    detail::lumped_step(x, phi, coeff, h, sigma, table.epsilon_confine, noise, drift);
  }
  return x;
}

// ---------------------------------------------------------------------------
// Score matching: solve E[grad phi grad phi^T] theta = E[Laplacian phi] with
// empirical expectations over the provided samples.
// ---------------------------------------------------------------------------

inline Vector score_matching_estimate(const Matrix& samples, const MomentFunction& phi,
                                      double delta = 1e-7) {
  if (!phi.has_laplacian()) {
    throw ConfigError("score matching requires a twice differentiable moment function");
  }
  if (samples.rows() < 1) throw DataError("score matching needs samples");
  GramAndMean g = gram_and_mean(samples, phi, false);
  Vector mean_lap = detail::mean_laplacian(samples, phi);
  return regularized_solve(g.gram, mean_lap, delta);
}

}  // namespace mgd
