// Copyright (C) 2026 the mgd authors
// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <Eigen/Dense>
#include <cmath>
#include <cstdint>
#include <functional>
#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

#include "mgd/parallel.hpp"

namespace mgd {

using Matrix = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using Vector = Eigen::VectorXd;

class ConfigError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

class DataError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

// Raised when a solver produces a non-finite state. Carries the step index
// and the last observed moment residual for diagnosis.
class DivergedError : public std::runtime_error {
 public:
  DivergedError(const std::string& what, long step, double last_residual)
      : std::runtime_error(what), step_(step), last_residual_(last_residual) {}
  long step() const { return step_; }
  double last_residual() const { return last_residual_; }

 private:
  long step_;
  double last_residual_;
};

// ---------------------------------------------------------------------------
// Deterministic counter-based randomness.
//
// Every consumer of randomness opens a stream keyed by
// (master seed, purpose, unit, step). Streams are independent and their
// draws do not depend on evaluation order, which makes ensemble updates
// reproducible for any thread count.
// ---------------------------------------------------------------------------

enum class StreamPurpose : std::uint64_t {
  kInitEnsemble = 0x01,
  kPredictorNoise = 0x02,
  kMomentPathNoise = 0x03,
  kMomentPathData = 0x04,
  kLangevinNoise = 0x05,
  kMalaProposal = 0x06,
  kMalaAccept = 0x07,
  kGaussianOracle = 0x08,
  kOfflineBatch = 0x09,
  kSgdBatch = 0x0a,
  kSyntheticData = 0x0b,
  kGeneric = 0x0c,
};

struct RngContract {
  std::uint64_t master_seed = 0;
};

namespace detail {
inline std::uint64_t splitmix64(std::uint64_t& state) {
  std::uint64_t z = (state += 0x9e3779b97f4a7c15ULL);
  z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ULL;
  z = (z ^ (z >> 27)) * 0x94d049bb133111ebULL;
  return z ^ (z >> 31);
}
}  // namespace detail

class RngStream {
 public:
  RngStream(const RngContract& rng, StreamPurpose purpose, std::uint64_t unit = 0,
            std::uint64_t step = 0) {
    std::uint64_t s = rng.master_seed;
    state_ = detail::splitmix64(s);
    s = state_ ^ (static_cast<std::uint64_t>(purpose) * 0xd1342543de82ef95ULL);
    state_ = detail::splitmix64(s);
    s = state_ ^ (unit * 0xaf251af3b0f025b5ULL);
    state_ = detail::splitmix64(s);
    s = state_ ^ (step * 0x9e6c63d0876a9a47ULL);
    state_ = detail::splitmix64(s);
  }

  std::uint64_t next_u64() { return detail::splitmix64(state_); }

  // Uniform on (0, 1]; never returns 0 so logs are safe.
  double uniform() {
    return (static_cast<double>(next_u64() >> 11) + 1.0) * 0x1.0p-53;
  }

  double uniform_in(double lo, double hi) { return lo + (hi - lo) * uniform(); }

  std::uint64_t uniform_index(std::uint64_t n) { return next_u64() % n; }

  double normal() {
    if (have_cached_) {
      have_cached_ = false;
      return cached_;
    }
    const double u1 = uniform();
    const double u2 = uniform();
    const double radius = std::sqrt(-2.0 * std::log(u1));
    const double angle = 2.0 * M_PI * u2;
    cached_ = radius * std::sin(angle);
    have_cached_ = true;
    return radius * std::cos(angle);
  }

  void fill_normal(double* out, std::size_t n) {
    for (std::size_t i = 0; i < n; ++i) out[i] = normal();
  }

 private:
  std::uint64_t state_ = 0;
  double cached_ = 0.0;
  bool have_cached_ = false;
};

// ---------------------------------------------------------------------------
// Interpolant schedule: the angle map alpha(t) of the variance-preserving
// path cos(alpha_t) Z + sin(alpha_t) X, with alpha(0) = 0, alpha(1) = pi/2.
// ---------------------------------------------------------------------------

class InterpolantSchedule {
 public:
  static InterpolantSchedule cosine() { return InterpolantSchedule(); }

  static InterpolantSchedule custom(std::function<double(double)> alpha) {
    InterpolantSchedule sched;
    sched.alpha_ = std::move(alpha);
    sched.is_default_ = false;
    sched.validate();
    return sched;
  }

  double alpha(double t) const {
    if (is_default_) return 0.5 * M_PI * t;
    return alpha_(t);
  }

  double alpha_dot(double t) const {
    if (is_default_) return 0.5 * M_PI;
    const double eps = 1e-6;
    const double lo = t < eps ? 0.0 : t - eps;
    const double hi = t > 1.0 - eps ? 1.0 : t + eps;
    return (alpha(hi) - alpha(lo)) / (hi - lo);
  }

  // Exact at the endpoints: no floating drift at t = 0 or t = 1.
  double cos_alpha(double t) const {
    if (t == 0.0) return 1.0;
    if (t == 1.0) return 0.0;
    return std::cos(alpha(t));
  }

  double sin_alpha(double t) const {
    if (t == 0.0) return 0.0;
    if (t == 1.0) return 1.0;
    return std::sin(alpha(t));
  }

 private:
  InterpolantSchedule() = default;

  void validate() const {
    if (std::abs(alpha_(0.0)) > 0.0 || std::abs(alpha_(1.0) - 0.5 * M_PI) > 0.0) {
      throw ConfigError("interpolant schedule must satisfy alpha(0) = 0 and alpha(1) = pi/2 exactly");
    }
    double prev = alpha_(0.0);
    for (int i = 1; i <= 1000; ++i) {
      const double a = alpha_(static_cast<double>(i) / 1000.0);
      if (!(a >= prev - 1e-12) || !std::isfinite(a)) {
        throw ConfigError("interpolant schedule must be monotone non-decreasing on [0, 1]");
      }
      prev = a;
    }
  }

  std::function<double(double)> alpha_;
  bool is_default_ = true;
};

// ---------------------------------------------------------------------------
// Particle ensemble: n_rep states in R^d, rows are particles.
// ---------------------------------------------------------------------------

struct ParticleEnsemble {
  Matrix states;  // n_rep x d

  ParticleEnsemble() = default;
  explicit ParticleEnsemble(Matrix s) : states(std::move(s)) {}

  Eigen::Index n_rep() const { return states.rows(); }
  Eigen::Index dim() const { return states.cols(); }

  static ParticleEnsemble gaussian(Eigen::Index n_rep, Eigen::Index d, const RngContract& rng,
                                   StreamPurpose purpose = StreamPurpose::kInitEnsemble) {
    if (n_rep < 1 || d < 1) throw ConfigError("ensemble shape must be positive");
    ParticleEnsemble ens;
    ens.states.resize(n_rep, d);
    const std::size_t chunk = chunk_size_for(static_cast<std::size_t>(d) * 8);
    parallel_chunks(static_cast<std::size_t>(n_rep), chunk,
                    [&](std::size_t begin, std::size_t end, std::size_t) {
                      for (std::size_t i = begin; i < end; ++i) {
                        RngStream stream(rng, purpose, i, 0);
                        stream.fill_normal(ens.states.row(static_cast<Eigen::Index>(i)).data(),
                                           static_cast<std::size_t>(d));
                      }
                    });
    return ens;
  }

  // Non-finite entries are hard errors after any solver step.
  void require_finite(long step, double last_residual) const {
    if (states.allFinite()) return;
    for (Eigen::Index i = 0; i < states.rows(); ++i) {
      if (!states.row(i).allFinite()) {
        throw DivergedError("non-finite particle state (particle " + std::to_string(i) +
                                ", step " + std::to_string(step) + ", last moment residual " +
                                std::to_string(last_residual) + ")",
                            step, last_residual);
      }
    }
  }
};

// ---------------------------------------------------------------------------
// Target moment path m_t on a uniform grid, with forward differences.
// ---------------------------------------------------------------------------

struct MomentPath {
  Matrix values;  // (n_grid + 1) x r, values.row(k) = m_{k h}
  Matrix diffs;   // n_grid x r, diffs.row(k) = (m_{(k+1)h} - m_{k h}) / h

  Eigen::Index n_steps() const { return diffs.rows(); }
  Eigen::Index r() const { return values.cols(); }
  double h() const { return 1.0 / static_cast<double>(n_steps()); }
  double time_at(Eigen::Index k) const {
    return static_cast<double>(k) / static_cast<double>(n_steps());
  }

  static MomentPath constant(const Vector& m, Eigen::Index n_grid) {
    if (n_grid < 1) throw ConfigError("moment path needs at least one step");
    MomentPath path;
    path.values = m.transpose().replicate(n_grid + 1, 1);
    path.diffs = Matrix::Zero(n_grid, m.size());
    return path;
  }
};

// One point of the stochastic interpolant path.
inline Vector interpolant_sample(const Eigen::Ref<const Vector>& z,
                                 const Eigen::Ref<const Vector>& x, double t,
                                 const InterpolantSchedule& sched) {
  if (!(t >= 0.0 && t <= 1.0)) throw std::domain_error("interpolant time must lie in [0, 1]");
  if (z.size() != x.size()) throw std::invalid_argument("interpolant endpoints must share a dimension");
  if (t == 0.0) return z;
  if (t == 1.0) return x;
  return sched.cos_alpha(t) * z + sched.sin_alpha(t) * x;
}

}  // namespace mgd
