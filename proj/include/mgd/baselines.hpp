// Copyright (C) 2026 the mgd authors
// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <Eigen/Dense>
#include <cmath>
#include <cstdint>
#include <string>
#include <utility>
#include <vector>

#include "mgd/analysis.hpp"
#include "mgd/core.hpp"
#include "mgd/moment_maps.hpp"
#include "mgd/moment_path.hpp"
#include "mgd/solver.hpp"

namespace mgd {

// Exponential-family target p(x) proportional to exp(-theta^T phi(x)).
struct ExpFamilyTarget {
  Vector theta;
  MomentFunctionPtr phi;

  ExpFamilyTarget(Vector t, MomentFunctionPtr p) : theta(std::move(t)), phi(std::move(p)) {
    if (theta.size() != phi->output_dim()) {
      throw ConfigError("target parameter length does not match moment function");
    }
  }

  Eigen::Index dim() const { return phi->input_dim(); }

  double energy(const Eigen::Ref<const Vector>& x) const {
    Vector vals(phi->output_dim());
    phi->eval(x, vals);
    return theta.dot(vals);
  }

  void grad_energy(const Eigen::Ref<const Vector>& x, Eigen::Ref<Vector> out) const {
    phi->vjp(x, theta, out);
  }

  double log_density_unnormalized(const Eigen::Ref<const Vector>& x) const { return -energy(x); }

  // 1D only: log Z by quadrature.
  double log_normalizer(double lo, double hi, Eigen::Index n_nodes = 10001) const {
    if (dim() != 1) throw ConfigError("quadrature normalizer is 1D only");
    return normalize_density_1d([&](double x) { return -energy_1d(x); }, lo, hi, n_nodes).log_z;
  }

  double energy_1d(double x) const {
    Vector xv(1);
    xv[0] = x;
    return energy(xv);
  }
};

// dX = -sigma^2 theta^T grad phi(X) dt + sqrt(2) sigma dW, Euler-Maruyama.
// Chains evolve independently; returns the final ensemble.
inline ParticleEnsemble langevin_run(const ExpFamilyTarget& target, double sigma,
                                     Eigen::Index n_steps, double step_size,
                                     ParticleEnsemble init, const RngContract& rng) {
  if (!(step_size > 0.0)) throw ConfigError("Langevin step size must be positive");
  const Eigen::Index d = init.dim();
  const double sigma2 = sigma * sigma;
  const double noise_scale = std::sqrt(2.0 * step_size) * sigma;
  Matrix& x = init.states;
  const std::size_t chunk =
      chunk_size_for((target.phi->unit_cost() + 8) * static_cast<std::size_t>(n_steps));
  parallel_chunks(
      static_cast<std::size_t>(x.rows()), chunk, [&](std::size_t begin, std::size_t end, std::size_t) {
        Vector xi(d), grad(d);
        for (std::size_t i = begin; i < end; ++i) {
          xi = x.row(static_cast<Eigen::Index>(i)).transpose();
          for (Eigen::Index k = 0; k < n_steps; ++k) {
            target.grad_energy(xi, grad);
            RngStream stream(rng, StreamPurpose::kLangevinNoise, i,
                             static_cast<std::uint64_t>(k));
            for (Eigen::Index c = 0; c < d; ++c) {
              xi[c] += -sigma2 * step_size * grad[c] + noise_scale * stream.normal();
            }
          }
          x.row(static_cast<Eigen::Index>(i)) = xi.transpose();
        }
      });
  init.require_finite(n_steps, 0.0);
  return init;
}

// Metropolis-Hastings acceptance exponent for an asymmetric proposal.
inline double metropolis_log_accept(double log_p_current, double log_p_proposal,
                                    double log_q_forward, double log_q_backward) {
  return log_p_proposal - log_p_current + log_q_backward - log_q_forward;
}

struct MalaResult {
  ParticleEnsemble samples;
  double acceptance_rate = 0.0;  // post-tuning empirical rate
  double tuned_h = 0.0;
};

struct MalaOptions {
  double initial_h = 0.1;
  double acceptance_target = 0.57;
  double burn_in_fraction = 0.2;
};

// MALA over an ensemble of independent chains. The step size is adapted by
// stochastic approximation, log h += k^{-0.6} (acc_k - target), during the
// burn-in steps and then frozen.
inline MalaResult mala_run(const ExpFamilyTarget& target, Eigen::Index n_steps,
                           ParticleEnsemble init, const RngContract& rng,
                           MalaOptions options = MalaOptions()) {
  if (n_steps < 1) throw ConfigError("MALA needs at least one step");
  const Eigen::Index d = init.dim();
  const Eigen::Index n = init.n_rep();
  Matrix& x = init.states;
  Vector energy(n);
  {
    Vector xi(d);
    for (Eigen::Index i = 0; i < n; ++i) {
      energy[i] = target.energy(x.row(i).transpose());
    }
  }

  double h = options.initial_h;
  const auto burn_in = static_cast<Eigen::Index>(options.burn_in_fraction *
                                                 static_cast<double>(n_steps));
  double post_accepted = 0.0;
  double post_proposed = 0.0;

  struct Partial {
    double mean_acc = 0.0;
    double accepted = 0.0;
  };
  const std::size_t chunk = chunk_size_for(4 * target.phi->unit_cost() + 32);

  for (Eigen::Index k = 0; k < n_steps; ++k) {
    const double step_h = h;
    Partial tally = parallel_reduce<Partial>(
        static_cast<std::size_t>(n), chunk, [] { return Partial{}; },
        [&](std::size_t begin, std::size_t end, Partial& p) {
          Vector xi(d), grad(d), prop(d), grad_prop(d), fwd(d), bwd(d);
          for (std::size_t i = begin; i < end; ++i) {
            const auto row = static_cast<Eigen::Index>(i);
            xi = x.row(row).transpose();
            target.grad_energy(xi, grad);
            RngStream prop_stream(rng, StreamPurpose::kMalaProposal, i,
                                  static_cast<std::uint64_t>(k));
            for (Eigen::Index c = 0; c < d; ++c) {
              prop[c] = xi[c] - step_h * grad[c] +
                        std::sqrt(2.0 * step_h) * prop_stream.normal();
            }
            const double energy_prop = target.energy(prop);
            target.grad_energy(prop, grad_prop);
            fwd = prop - xi + step_h * grad;        // proposal displacement minus drift
            bwd = xi - prop + step_h * grad_prop;
            const double log_q_fwd = -fwd.squaredNorm() / (4.0 * step_h);
            const double log_q_bwd = -bwd.squaredNorm() / (4.0 * step_h);
            const double log_acc = metropolis_log_accept(-energy[row], -energy_prop, log_q_fwd,
                                                         log_q_bwd);
            p.mean_acc += std::min(1.0, std::exp(std::min(0.0, log_acc)));
            RngStream acc_stream(rng, StreamPurpose::kMalaAccept, i,
                                 static_cast<std::uint64_t>(k));
            if (std::log(acc_stream.uniform()) < log_acc) {
              x.row(row) = prop.transpose();
              energy[row] = energy_prop;
              p.accepted += 1.0;
            }
          }
        },
        [](Partial& a, const Partial& b) {
          a.mean_acc += b.mean_acc;
          a.accepted += b.accepted;
        });

    if (k < burn_in) {
      const double gamma = std::pow(static_cast<double>(k + 1), -0.6);
      h *= std::exp(gamma * (tally.mean_acc / static_cast<double>(n) -
                             options.acceptance_target));
    } else {
      post_accepted += tally.accepted;
      post_proposed += static_cast<double>(n);
    }
  }

  MalaResult result;
  result.samples = std::move(init);
  result.acceptance_rate = post_proposed > 0.0 ? post_accepted / post_proposed : 0.0;
  result.tuned_h = h;
  result.samples.require_finite(n_steps, 0.0);
  return result;
}

// ---------------------------------------------------------------------------
// Barrier-height cost comparison: number of steps MALA and MGD need to push
// D_KL(sampled || p_beta) under a fixed target, for targets
// p_beta(x) ~ exp(-beta (x^4 - 5 x^2 - x/2)).
// ---------------------------------------------------------------------------

struct BarrierCostRow {
  double beta = 0.0;
  std::string algorithm;
  Eigen::Index n_steps = 0;
  double kl = 0.0;
  bool censored = false;
};

struct BarrierCostOptions {
  double kl_target = 1e-3;
  Eigen::Index n_chains = 60000;
  Eigen::Index n_bins = 500;
  double support_lo = -4.0;
  double support_hi = 4.0;
  Eigen::Index quad_nodes = 10001;
  Eigen::Index mala_min_steps = 128;
  Eigen::Index mala_step_budget = 1 << 17;
  double mgd_sigma2_min = 0.5;
  double mgd_sigma2_max = 32.0;
  int mgd_refine_iters = 3;
  StepRule step_rule;
  Eigen::Index n_mc = 0;  // moment-path pairs; 0 = n_chains
  RngContract seed;
};

inline Vector quartic_theta(double beta) {
  // theta^T (x, x^2, x^3, x^4) = beta (x^4 - 5 x^2 - x/2)
  Vector theta(4);
  theta << -0.5 * beta, -5.0 * beta, 0.0, beta;
  return theta;
}

namespace detail {

inline double corrected_kl(const Eigen::Ref<const Vector>& samples,
                           const ScalarField1D& log_density, const BarrierCostOptions& opts) {
  const double raw = kl_vs_density(samples, log_density, opts.support_lo, opts.support_hi,
                                   opts.n_bins, opts.quad_nodes);
  return raw - kl_binning_bias(opts.n_bins, samples.size());
}

}  // namespace detail

inline std::vector<BarrierCostRow> barrier_cost_experiment(const std::vector<double>& betas,
                                                           const BarrierCostOptions& opts) {
  if (betas.empty()) throw ConfigError("barrier experiment needs a non-empty beta list");
  std::vector<BarrierCostRow> rows;
  auto phi = monomial_map(4);

  for (double beta : betas) {
    auto log_density = [beta](double v) { return -beta * (v * v * v * v - 5.0 * v * v - 0.5 * v); };

    // --- MALA: doubling search then bisection on the step count.
    {
      ExpFamilyTarget target(quartic_theta(beta), phi);
      auto run_kl = [&](Eigen::Index n_steps) {
        ParticleEnsemble init =
            ParticleEnsemble::gaussian(opts.n_chains, 1, opts.seed, StreamPurpose::kInitEnsemble);
        MalaResult res = mala_run(target, n_steps, std::move(init), opts.seed);
        return detail::corrected_kl(res.samples.states.col(0), log_density, opts);
      };
      Eigen::Index lo = 0, hi = opts.mala_min_steps;
      double kl_hi = run_kl(hi);
      while (kl_hi > opts.kl_target && hi < opts.mala_step_budget) {
        lo = hi;
        hi *= 2;
        kl_hi = run_kl(hi);
      }
      BarrierCostRow row;
      row.beta = beta;
      row.algorithm = "mala";
      if (kl_hi > opts.kl_target) {
        row.n_steps = hi;
        row.kl = kl_hi;
        row.censored = true;
      } else {
        Eigen::Index best = hi;
        double best_kl = kl_hi;
        while (hi - lo > std::max<Eigen::Index>(1, best / 8)) {
          const Eigen::Index mid = (lo + hi) / 2;
          const double kl_mid = run_kl(mid);
          if (kl_mid <= opts.kl_target) {
            hi = mid;
            best = mid;
            best_kl = kl_mid;
          } else {
            lo = mid;
          }
        }
        row.n_steps = best;
        row.kl = best_kl;
      }
      rows.push_back(row);
    }

    // --- MGD: smallest sigma^2 whose run reaches the KL target; the cost is
    // the step rule evaluated at that sigma^2.
    {
      RngStream data_stream(opts.seed, StreamPurpose::kSyntheticData,
                            static_cast<std::uint64_t>(beta * 1e6));
      Matrix dataset(opts.n_chains, 1);
      dataset.col(0) = inverse_cdf_sample(log_density, opts.support_lo, opts.support_hi,
                                          opts.n_chains, data_stream, opts.quad_nodes);
      const Eigen::Index n_mc = opts.n_mc > 0 ? opts.n_mc : opts.n_chains;

      auto run_kl = [&](double sigma2, Eigen::Index& n_steps_out) {
        MgdConfig config;
        config.sigma2 = sigma2;
        config.step_rule = opts.step_rule;
        config.n_rep = opts.n_chains;
        config.seed = opts.seed;
        n_steps_out = config.n_steps();
        MomentPath path = estimate_moment_path(dataset, *phi, config.n_steps(), n_mc,
                                               InterpolantSchedule::cosine(), opts.seed);
        auto [ens, trace] = mgd_run(config, *phi, path);
        return detail::corrected_kl(ens.states.col(0), log_density, opts);
      };

      BarrierCostRow row;
      row.beta = beta;
      row.algorithm = "mgd";
      double lo = 0.0, hi = opts.mgd_sigma2_min;
      Eigen::Index n_steps_hi = 0;
      double kl_hi = run_kl(hi, n_steps_hi);
      while (kl_hi > opts.kl_target && hi < opts.mgd_sigma2_max) {
        lo = hi;
        hi = std::min(opts.mgd_sigma2_max, hi * 2.0);
        kl_hi = run_kl(hi, n_steps_hi);
      }
      if (kl_hi > opts.kl_target) {
        row.n_steps = n_steps_hi;
        row.kl = kl_hi;
        row.censored = true;
      } else {
        Eigen::Index best_steps = n_steps_hi;
        double best_kl = kl_hi;
        for (int it = 0; it < opts.mgd_refine_iters && lo > 0.0; ++it) {
          const double mid = std::sqrt(lo * hi);
          Eigen::Index n_steps_mid = 0;
          const double kl_mid = run_kl(mid, n_steps_mid);
          if (kl_mid <= opts.kl_target) {
            hi = mid;
            best_steps = n_steps_mid;
            best_kl = kl_mid;
          } else {
            lo = mid;
          }
        }
        row.n_steps = best_steps;
        row.kl = best_kl;
      }
      rows.push_back(row);
    }
  }
  return rows;
}

}  // namespace mgd
