// Copyright (C) 2026 the mgd authors
// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <Eigen/Cholesky>
#include <Eigen/Dense>
#include <algorithm>
#include <cmath>
#include <functional>
#include <stdexcept>
#include <utility>
#include <vector>

#include "mgd/core.hpp"
#include "mgd/fft.hpp"
#include "mgd/scattering.hpp"

namespace mgd {

using ScalarField1D = std::function<double(double)>;

// ---------------------------------------------------------------------------
// Quantile (equal-mass) histograms and the entropy / KL estimators built on
// them. Duplicate quantile edges are merged, so widths stay positive for
// data with ties; fully degenerate samples are an error.
// ---------------------------------------------------------------------------

struct Histogram1D {
  Vector edges;   // n_bins + 1, strictly increasing
  Vector counts;  // n_bins
  Vector masses;  // n_bins, sums to 1
  Vector widths;  // n_bins, positive

  Eigen::Index n_bins() const { return counts.size(); }

  // Differential entropy estimate -sum p log(p / w).
  double entropy() const {
    double h = 0.0;
    for (Eigen::Index i = 0; i < n_bins(); ++i) {
      if (masses[i] > 0.0) h += masses[i] * (std::log(widths[i]) - std::log(masses[i]));
    }
    return h;
  }

  static Histogram1D from_quantiles(std::vector<double> samples, Eigen::Index n_bins) {
    if (n_bins < 1) throw ConfigError("histogram needs at least one bin");
    const auto n = static_cast<Eigen::Index>(samples.size());
    if (n < 2) throw DataError("histogram needs at least two samples");
    std::sort(samples.begin(), samples.end());
    if (!(samples.front() < samples.back())) {
      throw DataError("histogram entropy is degenerate: all samples are equal");
    }
    std::vector<double> edges;
    edges.reserve(static_cast<std::size_t>(n_bins) + 1);
    edges.push_back(samples.front());
    for (Eigen::Index i = 1; i < n_bins; ++i) {
      const auto pos = static_cast<std::size_t>((i * n) / n_bins);
      const double e = samples[pos];
      if (e > edges.back()) edges.push_back(e);
    }
    if (samples.back() > edges.back()) edges.push_back(samples.back());
    const auto bins = static_cast<Eigen::Index>(edges.size()) - 1;
    if (bins < 1) throw DataError("histogram entropy is degenerate: all samples are equal");

    Histogram1D hist;
    hist.edges = Eigen::Map<Vector>(edges.data(), static_cast<Eigen::Index>(edges.size()));
    hist.counts = Vector::Zero(bins);
    for (Eigen::Index b = 0; b < bins; ++b) {
      // Half-open [e_b, e_{b+1}), except the last bin which is closed.
      auto lo = std::lower_bound(samples.begin(), samples.end(), edges[static_cast<std::size_t>(b)]);
      auto hi = b + 1 == bins
                    ? samples.end()
                    : std::lower_bound(samples.begin(), samples.end(),
                                       edges[static_cast<std::size_t>(b) + 1]);
      hist.counts[b] = static_cast<double>(hi - lo);
    }
    hist.masses = hist.counts / static_cast<double>(n);
    hist.widths = hist.edges.tail(bins) - hist.edges.head(bins);
    return hist;
  }
};

inline Histogram1D quantile_histogram(const Eigen::Ref<const Vector>& samples,
                                      Eigen::Index n_bins = 500) {
  std::vector<double> buf(samples.data(), samples.data() + samples.size());
  return Histogram1D::from_quantiles(std::move(buf), n_bins);
}

inline double histogram_entropy(const Eigen::Ref<const Vector>& samples,
                                Eigen::Index n_bins = 500) {
  if (samples.size() < n_bins) {
    throw ConfigError("histogram entropy needs at least as many samples as bins");
  }
  return quantile_histogram(samples, n_bins).entropy();
}

// ---------------------------------------------------------------------------
// 1D quadrature utilities (composite Simpson) and sampling from an
// unnormalized log density by inverse CDF on a dense grid.
// ---------------------------------------------------------------------------

inline double simpson(const ScalarField1D& f, double a, double b, Eigen::Index n_nodes = 10001) {
  if (n_nodes < 3) throw ConfigError("Simpson quadrature needs at least 3 nodes");
  Eigen::Index n = n_nodes % 2 == 0 ? n_nodes + 1 : n_nodes;  // odd node count
  const double step = (b - a) / static_cast<double>(n - 1);
  double acc = f(a) + f(b);
  for (Eigen::Index i = 1; i < n - 1; ++i) {
    acc += f(a + step * static_cast<double>(i)) * (i % 2 == 1 ? 4.0 : 2.0);
  }
  return acc * step / 3.0;
}

struct NormalizedDensity1D {
  double log_z = 0.0;
  Vector grid;      // dense support grid
  Vector cdf;       // cumulative mass at grid nodes, cdf[0] = 0, cdf[n-1] = 1
  Vector density;   // normalized density at grid nodes

  double cdf_at(double x) const {
    if (x <= grid[0]) return 0.0;
    if (x >= grid[grid.size() - 1]) return 1.0;
    const auto hi = std::upper_bound(grid.data(), grid.data() + grid.size(), x) - grid.data();
    const Eigen::Index i = hi - 1;
    const double t = (x - grid[i]) / (grid[i + 1] - grid[i]);
    return cdf[i] + t * (cdf[i + 1] - cdf[i]);
  }

  double quantile(double u) const {
    const auto n = grid.size();
    if (u <= 0.0) return grid[0];
    if (u >= 1.0) return grid[n - 1];
    auto hi = std::upper_bound(cdf.data(), cdf.data() + n, u) - cdf.data();
    if (hi <= 0) return grid[0];
    if (hi >= n) return grid[n - 1];
    const Eigen::Index i = hi - 1;
    const double span = cdf[i + 1] - cdf[i];
    const double t = span > 0.0 ? (u - cdf[i]) / span : 0.0;
    return grid[i] + t * (grid[i + 1] - grid[i]);
  }
};

inline NormalizedDensity1D normalize_density_1d(const ScalarField1D& log_density, double lo,
                                                double hi, Eigen::Index n_nodes = 10001) {
  if (!(hi > lo)) throw ConfigError("density support must be a non-empty interval");
  Eigen::Index n = n_nodes < 3 ? 3 : (n_nodes % 2 == 0 ? n_nodes + 1 : n_nodes);
  NormalizedDensity1D out;
  out.grid.resize(n);
  Vector logp(n);
  const double step = (hi - lo) / static_cast<double>(n - 1);
  double max_lp = -std::numeric_limits<double>::infinity();
  for (Eigen::Index i = 0; i < n; ++i) {
    out.grid[i] = lo + step * static_cast<double>(i);
    logp[i] = log_density(out.grid[i]);
    if (!std::isfinite(logp[i]) && logp[i] > 0) throw DataError("log density is non-finite");
    max_lp = std::max(max_lp, logp[i]);
  }
  Vector unnorm = (logp.array() - max_lp).exp();
  // Simpson weights on the dense grid for Z; trapezoid for the cumulative.
  double z = unnorm[0] + unnorm[n - 1];
  for (Eigen::Index i = 1; i < n - 1; ++i) z += unnorm[i] * (i % 2 == 1 ? 4.0 : 2.0);
  z *= step / 3.0;
  if (!(z > 0.0) || !std::isfinite(z)) throw DataError("density does not normalize on support");
  out.log_z = std::log(z) + max_lp;
  out.density = unnorm / z;
  out.cdf.resize(n);
  out.cdf[0] = 0.0;
  for (Eigen::Index i = 1; i < n; ++i) {
    out.cdf[i] = out.cdf[i - 1] + 0.5 * (out.density[i - 1] + out.density[i]) * step;
  }
  out.cdf /= out.cdf[n - 1];
  return out;
}

// Differential entropy of the normalized density by quadrature.
inline double analytic_entropy_1d(const ScalarField1D& log_density, double lo, double hi,
                                  Eigen::Index n_nodes = 10001) {
  NormalizedDensity1D nd = normalize_density_1d(log_density, lo, hi, n_nodes);
  return simpson(
      [&](double x) {
        const double lp = log_density(x) - nd.log_z;
        return -std::exp(lp) * lp;
      },
      lo, hi, n_nodes);
}

inline Vector inverse_cdf_sample(const ScalarField1D& log_density, double lo, double hi,
                                 Eigen::Index n_samples, RngStream& stream,
                                 Eigen::Index n_nodes = 10001) {
  NormalizedDensity1D nd = normalize_density_1d(log_density, lo, hi, n_nodes);
  Vector out(n_samples);
  for (Eigen::Index i = 0; i < n_samples; ++i) out[i] = nd.quantile(stream.uniform());
  return out;
}

// KL divergence of the sample law against a quadrature-normalized target,
// evaluated on the sample's quantile bins. Empty target mass is floored.
inline double kl_vs_density(const Eigen::Ref<const Vector>& samples,
                            const ScalarField1D& log_density_unnormalized, double lo, double hi,
                            Eigen::Index n_bins = 500, Eigen::Index n_nodes = 10001) {
  Histogram1D hist = quantile_histogram(samples, n_bins);
  NormalizedDensity1D nd = normalize_density_1d(log_density_unnormalized, lo, hi, n_nodes);
  double kl = 0.0;
  for (Eigen::Index b = 0; b < hist.n_bins(); ++b) {
    if (hist.masses[b] <= 0.0) continue;
    double q = nd.cdf_at(hist.edges[b + 1]) - nd.cdf_at(hist.edges[b]);
    q = std::max(q, 1e-12);
    kl += hist.masses[b] * std::log(hist.masses[b] / q);
  }
  return kl;
}

// First-order bias of the binned KL estimate (chi-square over 2n), useful
// when hunting small divergences with finite samples.
inline double kl_binning_bias(Eigen::Index n_bins, Eigen::Index n_samples) {
  return static_cast<double>(n_bins - 1) / (2.0 * static_cast<double>(n_samples));
}

// ---------------------------------------------------------------------------
// Welch spectral estimation and the stationary Gaussian entropy reference.
// log det Sigma / d is the mean of log S over frequency bins (circulant
// determinant identity for stationary fields with periodic boundaries).
// ---------------------------------------------------------------------------

struct WelchParams {
  Eigen::Index segment = 0;  // 0: min(256, n / 4) per axis
  double overlap = 0.5;
  Eigen::Index pick_segment(Eigen::Index n) const {
    Eigen::Index L = segment > 0 ? segment : std::min<Eigen::Index>(256, n / 4);
    if (L < 2) L = std::min<Eigen::Index>(2, n);
    return L;
  }
};

struct GaussianReference {
  Eigen::Index d = 0;
  double log_det_rate = 0.0;  // (1/d) log det Sigma

  double entropy() const {
    return 0.5 * static_cast<double>(d) * (std::log(2.0 * M_PI * M_E) + log_det_rate);
  }
};

namespace detail {

inline Vector hann_window(Eigen::Index L) {
  Vector w(L);
  for (Eigen::Index u = 0; u < L; ++u) {
    w[u] = 0.5 * (1.0 - std::cos(2.0 * M_PI * static_cast<double>(u) / static_cast<double>(L)));
  }
  return w;
}

}  // namespace detail

inline GaussianReference gaussian_entropy_rate(const Eigen::Ref<const Vector>& series,
                                               WelchParams params = WelchParams()) {
  const Eigen::Index n = series.size();
  const Eigen::Index L = params.pick_segment(n);
  if (n < L || L < 2) throw DataError("series is shorter than one Welch segment");
  const auto hop = std::max<Eigen::Index>(1, static_cast<Eigen::Index>(
                                                 static_cast<double>(L) * (1.0 - params.overlap)));
  const Vector w = detail::hann_window(L);
  const double norm = w.squaredNorm();

  FftPlan plan({static_cast<int>(L)});
  CArray buf(L);
  Vector spectrum = Vector::Zero(L);
  Eigen::Index n_segments = 0;
  for (Eigen::Index s = 0; s + L <= n; s += hop) {
    for (Eigen::Index u = 0; u < L; ++u) {
      buf[u] = std::complex<double>(series[s + u] * w[u], 0.0);
    }
    plan.forward(buf.data(), buf.data());
    spectrum += (buf.abs2() / norm).matrix();
    ++n_segments;
  }
  spectrum /= static_cast<double>(n_segments);

  GaussianReference ref;
  ref.d = n;
  double acc = 0.0;
  for (Eigen::Index j = 0; j < L; ++j) acc += std::log(std::max(spectrum[j], 1e-12));
  ref.log_det_rate = acc / static_cast<double>(L);
  return ref;
}

inline GaussianReference gaussian_entropy_rate_2d(const Matrix& field,
                                                  WelchParams params = WelchParams()) {
  const Eigen::Index n0 = field.rows(), n1 = field.cols();
  const Eigen::Index L0 = params.pick_segment(n0), L1 = params.pick_segment(n1);
  if (n0 < L0 || n1 < L1 || L0 < 2 || L1 < 2) {
    throw DataError("field is smaller than one Welch segment");
  }
  const auto hop0 = std::max<Eigen::Index>(
      1, static_cast<Eigen::Index>(static_cast<double>(L0) * (1.0 - params.overlap)));
  const auto hop1 = std::max<Eigen::Index>(
      1, static_cast<Eigen::Index>(static_cast<double>(L1) * (1.0 - params.overlap)));
  const Vector w0 = detail::hann_window(L0), w1 = detail::hann_window(L1);
  const double norm = w0.squaredNorm() * w1.squaredNorm();

  FftPlan plan({static_cast<int>(L0), static_cast<int>(L1)});
  CArray buf(L0 * L1);
  Vector spectrum = Vector::Zero(L0 * L1);
  Eigen::Index n_segments = 0;
  for (Eigen::Index s0 = 0; s0 + L0 <= n0; s0 += hop0) {
    for (Eigen::Index s1 = 0; s1 + L1 <= n1; s1 += hop1) {
      for (Eigen::Index u = 0; u < L0; ++u) {
        for (Eigen::Index v = 0; v < L1; ++v) {
          buf[u * L1 + v] = std::complex<double>(field(s0 + u, s1 + v) * w0[u] * w1[v], 0.0);
        }
      }
      plan.forward(buf.data(), buf.data());
      spectrum += (buf.abs2() / norm).matrix();
      ++n_segments;
    }
  }
  spectrum /= static_cast<double>(n_segments);

  GaussianReference ref;
  ref.d = n0 * n1;
  double acc = 0.0;
  for (Eigen::Index j = 0; j < spectrum.size(); ++j) acc += std::log(std::max(spectrum[j], 1e-12));
  ref.log_det_rate = acc / static_cast<double>(spectrum.size());
  return ref;
}

// Delta H = (H(gaussian reference) - H_*) / d.
inline double negentropy_estimate(double h_gaussian, double h_star, Eigen::Index d) {
  if (!std::isfinite(h_gaussian) || !std::isfinite(h_star)) {
    throw DataError("negentropy inputs must be finite");
  }
  return (h_gaussian - h_star) / static_cast<double>(d);
}

// ---------------------------------------------------------------------------
// Gaussian closed-form oracle: the interpolant covariance path
// C_t = cos^2(alpha_t) C0 + sin^2(alpha_t) C1 and an exact sampler for it.
// ---------------------------------------------------------------------------

inline Matrix gaussian_oracle_covariance(const Matrix& c0, const Matrix& c1, double t,
                                         const InterpolantSchedule& sched) {
  if (c0.rows() != c0.cols() || c1.rows() != c1.cols() || c0.rows() != c1.rows()) {
    throw ConfigError("covariances must be square and of equal size");
  }
  auto check_psd = [](const Matrix& c, const char* name) {
    Eigen::LLT<Matrix> llt(c);
    if (llt.info() != Eigen::Success) {
      throw DataError(std::string(name) + " covariance is not positive definite");
    }
  };
  check_psd(c0, "C0");
  check_psd(c1, "C1");
  const double c = sched.cos_alpha(t), s = sched.sin_alpha(t);
  if (t == 0.0) return c0;
  if (t == 1.0) return c1;
  return c * c * c0 + s * s * c1;
}

class GaussianSampler {
 public:
  explicit GaussianSampler(const Matrix& covariance) {
    Eigen::LLT<Matrix> llt(covariance);
    if (llt.info() != Eigen::Success) {
      throw DataError("sampler covariance is not positive definite");
    }
    chol_ = llt.matrixL();
  }

  Eigen::Index dim() const { return chol_.rows(); }

  Vector sample(RngStream& stream) const {
    Vector z(chol_.rows());
    for (Eigen::Index i = 0; i < z.size(); ++i) z[i] = stream.normal();
    return chol_ * z;
  }

  Matrix sample_matrix(Eigen::Index n, const RngContract& rng,
                       StreamPurpose purpose = StreamPurpose::kGaussianOracle) const {
    Matrix out(n, chol_.rows());
    for (Eigen::Index i = 0; i < n; ++i) {
      RngStream stream(rng, purpose, static_cast<std::uint64_t>(i));
      out.row(i) = sample(stream).transpose();
    }
    return out;
  }

 private:
  Matrix chol_;
};

// ---------------------------------------------------------------------------
// Misc diagnostics: rolling volatility, log-log rate fits, wavelet-marginal
// histograms.
// ---------------------------------------------------------------------------

// vol(u) = sqrt((1/w) sum_{v < w} x(u - v)^2) with periodic indexing.
inline Vector rolling_volatility(const Eigen::Ref<const Vector>& x, Eigen::Index w) {
  const Eigen::Index n = x.size();
  if (w < 1) throw ConfigError("rolling volatility needs window >= 1");
  if (w > n) throw ConfigError("rolling volatility window exceeds the series length");
  Vector sq = x.array().square();
  Vector out(n);
  double acc = 0.0;
  for (Eigen::Index v = 0; v < w; ++v) acc += sq[(n - v) % n];  // window ending at u = 0
  for (Eigen::Index u = 0; u < n; ++u) {
    if (u > 0) {
      acc += sq[u] - sq[(u - w + n) % n];
    }
    out[u] = std::sqrt(std::max(0.0, acc / static_cast<double>(w)));
  }
  return out;
}

// Least-squares slope of log(gap) against log(sigma2).
inline double loglog_rate_fit(const std::vector<std::pair<double, double>>& points) {
  if (points.size() < 3) throw ConfigError("rate fit needs at least three points");
  double sx = 0.0, sy = 0.0, sxx = 0.0, sxy = 0.0;
  for (const auto& [sigma2, gap] : points) {
    if (!(gap > 0.0) || !(sigma2 > 0.0)) {
      throw DataError("rate fit needs positive gaps and sigma^2");
    }
    const double lx = std::log(sigma2), ly = std::log(gap);
    sx += lx;
    sy += ly;
    sxx += lx * lx;
    sxy += lx * ly;
  }
  const auto n = static_cast<double>(points.size());
  return (n * sxy - sx * sy) / (n * sxx - sx * sx);
}

// Pooled histogram of Re(x * psi_lambda) over fields (rows) and positions.
inline Histogram1D wavelet_marginal_histogram(const Matrix& fields, const FilterBank& bank,
                                              Eigen::Index channel, Eigen::Index n_bins = 500) {
  if (channel < 0 || channel >= bank.n_channels()) {
    throw ConfigError("wavelet channel out of range");
  }
  std::vector<double> pooled;
  pooled.reserve(static_cast<std::size_t>(fields.rows() * bank.size));
  CArray spatial(bank.size), xhat(bank.size), freq(bank.size), coeff(bank.size);
  for (Eigen::Index i = 0; i < fields.rows(); ++i) {
    for (Eigen::Index u = 0; u < bank.size; ++u) {
      spatial[u] = std::complex<double>(fields(i, u), 0.0);
    }
    bank.plan->forward(spatial.data(), xhat.data());
    freq = xhat * bank.filters[static_cast<std::size_t>(channel)];
    bank.plan->inverse(freq.data(), coeff.data());
    for (Eigen::Index u = 0; u < bank.size; ++u) pooled.push_back(coeff[u].real());
  }
  return Histogram1D::from_quantiles(std::move(pooled), n_bins);
}

}  // namespace mgd
