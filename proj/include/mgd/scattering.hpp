// Copyright (C) 2026 the mgd authors
// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <Eigen/Dense>
#include <cmath>
#include <complex>
#include <memory>
#include <mutex>
#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

#include "mgd/core.hpp"
#include "mgd/fft.hpp"
#include "mgd/moment_maps.hpp"

namespace mgd {

using CArray = Eigen::ArrayXcd;
using RArray = Eigen::ArrayXd;

struct MorletParams {
  double sigma = 0.8;   // envelope width
  double xi = 0.75;     // center frequency, along the first axis in 2D
};

struct ScatteringChannel {
  int j = 0;    // dyadic scale, 1 <= j <= J
  int ell = 0;  // orientation index, 0 <= ell < L (2D only)
  bool low_pass = false;
};

// Complex Morlet filters sampled on the DFT grid of a dyadic 1D/2D domain.
// Band-pass channels are ordered by (j, ell); the low-pass channel is last.
// The admissibility correction is chosen so the zero-frequency DFT
// coefficient of every band-pass filter vanishes exactly.
struct FilterBank {
  int kappa = 1;
  std::vector<int> dims;  // per-axis sizes
  Eigen::Index size = 0;  // total grid size
  int J = 0;
  int L = 1;
  MorletParams morlet;
  std::vector<ScatteringChannel> channels;
  std::vector<CArray> filters;  // frequency domain, flat row-major over dims
  std::shared_ptr<const FftPlan> plan;

  Eigen::Index n_channels() const { return static_cast<Eigen::Index>(channels.size()); }
  Eigen::Index n_bandpass() const { return n_channels() - 1; }
  Eigen::Index low_pass_channel() const { return n_channels() - 1; }
};

namespace detail {

inline bool is_power_of_two(int n) { return n > 0 && (n & (n - 1)) == 0; }

// Signed frequency (radians per sample) of a row-major flat index.
inline void frequency_at(const std::vector<int>& dims, Eigen::Index flat, double* omega) {
  const auto n_axes = static_cast<int>(dims.size());
  for (int a = n_axes - 1; a >= 0; --a) {
    const int n = dims[static_cast<std::size_t>(a)];
    int k = static_cast<int>(flat % n);
    flat /= n;
    if (k > n / 2) k -= n;
    omega[a] = 2.0 * M_PI * static_cast<double>(k) / static_cast<double>(n);
  }
}

}  // namespace detail

inline FilterBank build_filter_bank(int d_per_axis, int kappa, int J, int L = 4,
                                    MorletParams morlet = MorletParams()) {
  if (kappa != 1 && kappa != 2) throw ConfigError("scattering supports 1D and 2D domains");
  if (!detail::is_power_of_two(d_per_axis)) {
    throw ConfigError("scattering domain size must be a power of two per axis");
  }
  if (J < 1 || (1 << J) > d_per_axis) {
    throw ConfigError("scale count J must satisfy 1 <= J and 2^J <= d per axis");
  }
  if (kappa == 1) L = 1;
  if (L < 1) throw ConfigError("orientation count must be positive");

  FilterBank bank;
  bank.kappa = kappa;
  bank.dims.assign(static_cast<std::size_t>(kappa), d_per_axis);
  bank.size = 1;
  for (int n : bank.dims) bank.size *= n;
  bank.J = J;
  bank.L = L;
  bank.morlet = morlet;
  bank.plan = std::make_shared<FftPlan>(bank.dims);

  const double sig2 = morlet.sigma * morlet.sigma;
  const double xi = morlet.xi;
  // Zeroes the DC coefficient of every dilation exactly.
  const double admissibility = std::exp(-0.5 * sig2 * xi * xi);

  for (int j = 1; j <= J; ++j) {
    for (int ell = 0; ell < L; ++ell) {
      bank.channels.push_back({j, ell, false});
      CArray filt(bank.size);
      const double scale = std::pow(2.0, static_cast<double>(j));
      const double amp = std::pow(2.0, 0.5 * static_cast<double>(j * kappa));
      const double theta = M_PI * static_cast<double>(ell) / static_cast<double>(L);
      const double ct = std::cos(theta), st = std::sin(theta);
      double omega[2] = {0.0, 0.0};
      for (Eigen::Index u = 0; u < bank.size; ++u) {
        detail::frequency_at(bank.dims, u, omega);
        double w0 = scale * omega[0], w1 = 0.0;
        if (kappa == 2) {
          const double r0 = ct * omega[0] - st * omega[1];
          const double r1 = st * omega[0] + ct * omega[1];
          w0 = scale * r0;
          w1 = scale * r1;
        }
        const double centered = (w0 - xi) * (w0 - xi) + w1 * w1;
        const double plain = w0 * w0 + w1 * w1;
        filt[u] = amp * (std::exp(-0.5 * sig2 * centered) -
                         admissibility * std::exp(-0.5 * sig2 * plain));
      }
      bank.filters.push_back(std::move(filt));
    }
  }

  // Gaussian low-pass at the coarsest scale, unit DC gain.
  bank.channels.push_back({J, 0, true});
  CArray low(bank.size);
  const double scale_j = std::pow(2.0, static_cast<double>(J));
  double omega[2] = {0.0, 0.0};
  for (Eigen::Index u = 0; u < bank.size; ++u) {
    detail::frequency_at(bank.dims, u, omega);
    const double w2 = omega[0] * omega[0] + omega[1] * omega[1];
    low[u] = std::exp(-0.5 * sig2 * scale_j * scale_j * w2);
  }
  bank.filters.push_back(std::move(low));
  return bank;
}

// ---------------------------------------------------------------------------
// Moment ordering: phi_1 and phi_2 over every channel (low-pass included),
// then Re/Im of the cross-scale moments phi_3 over pairs |lambda| > |lambda'|,
// then Re/Im of phi_4 over triples |lambda| > |lambda'|, |lambda''| > |lambda'|
// with (lambda, lambda'') deduplicated by channel order (swapping them
// conjugates the moment, so only the diagonal loses its imaginary part).
// ---------------------------------------------------------------------------

struct ScatteringIndex {
  enum class Family : int { kPhi1 = 1, kPhi2 = 2, kPhi3 = 3, kPhi4 = 4 };

  struct Entry {
    Family family;
    int lam = -1;      // channel of X^lambda (phi1/2/3) or first modulus (phi4)
    int lam_p = -1;    // channel of the smoothing wavelet lambda'
    int lam_pp = -1;   // channel of the second modulus (phi4)
    bool imag = false;
  };

  std::vector<Entry> entries;
  std::vector<std::pair<int, int>> pairs;  // (lambda', eta): U = |X^eta| * psi_{lambda'}
  std::vector<int> pair_lookup;            // n_bp x n_bp, row = lambda', col = eta
  Eigen::Index n_bandpass = 0;

  Eigen::Index size() const { return static_cast<Eigen::Index>(entries.size()); }

  int pair_id(int lam_p, int eta) const {
    return pair_lookup[static_cast<std::size_t>(lam_p * n_bandpass + eta)];
  }

  static ScatteringIndex full(const FilterBank& bank) {
    ScatteringIndex index;
    const auto n_bp = static_cast<int>(bank.n_bandpass());
    const auto n_all = static_cast<int>(bank.n_channels());
    index.n_bandpass = n_bp;
    index.pair_lookup.assign(static_cast<std::size_t>(n_bp) * static_cast<std::size_t>(n_bp), -1);

    for (int c = 0; c < n_all; ++c) index.entries.push_back({Family::kPhi1, c, -1, -1, false});
    for (int c = 0; c < n_all; ++c) index.entries.push_back({Family::kPhi2, c, -1, -1, false});

    auto finer = [&](int c, int cp) {
      // |lambda| > |lambda'|  <=>  j < j' (orientation keeps the modulus).
      return bank.channels[static_cast<std::size_t>(c)].j <
             bank.channels[static_cast<std::size_t>(cp)].j;
    };
    for (int cp = 0; cp < n_bp; ++cp) {
      for (int c = 0; c < n_bp; ++c) {
        if (!finer(c, cp)) continue;
        index.pair_lookup[static_cast<std::size_t>(cp * n_bp + c)] =
            static_cast<int>(index.pairs.size());
        index.pairs.emplace_back(cp, c);
      }
    }
    for (int cp = 0; cp < n_bp; ++cp) {
      for (int c = 0; c < n_bp; ++c) {
        if (!finer(c, cp)) continue;
        index.entries.push_back({Family::kPhi3, c, cp, -1, false});
        index.entries.push_back({Family::kPhi3, c, cp, -1, true});
      }
    }
    for (int cp = 0; cp < n_bp; ++cp) {
      for (int a = 0; a < n_bp; ++a) {
        if (!finer(a, cp)) continue;
        for (int b = a; b < n_bp; ++b) {
          if (!finer(b, cp)) continue;
          index.entries.push_back({Family::kPhi4, a, cp, b, false});
          if (b != a) index.entries.push_back({Family::kPhi4, a, cp, b, true});
        }
      }
    }
    return index;
  }
};

// ---------------------------------------------------------------------------
// Forward/adjoint engine. One instance holds the per-field intermediates;
// the adjoint accumulates an arbitrary weighted combination of moments, so a
// Jacobian row is exactly the adjoint run with a single unit weight.
// ---------------------------------------------------------------------------

class ScatteringCompute {
 public:
  ScatteringCompute(const FilterBank& bank, const ScatteringIndex& index)
      : bank_(bank), index_(index) {
    const Eigen::Index d = bank.size;
    const auto n_ch = static_cast<std::size_t>(bank.n_channels());
    const auto n_pairs = index.pairs.size();
    xhat_.resize(d);
    freq_.resize(d);
    spatial_.resize(d);
    freq_total_.resize(d);
    X_.assign(n_ch, CArray(d));
    S_.assign(n_ch, CArray(d));
    M_.assign(n_ch, RArray(d));
    Mhat_.assign(n_ch, CArray(0));
    U_.assign(n_pairs, CArray(d));
    cot_m_.assign(n_ch, RArray(d));
    cot_x_.assign(n_ch, CArray(d));
    cot_u_.assign(n_pairs, CArray(d));
    m_active_.assign(n_ch, false);
    x_active_.assign(n_ch, false);
    u_active_.assign(n_pairs, false);
    // Channels that get smoothed by some lambda' need the DFT of their modulus.
    std::vector<bool> needs_mhat(n_ch, false);
    for (const auto& p : index.pairs) needs_mhat[static_cast<std::size_t>(p.second)] = true;
    for (std::size_t c = 0; c < n_ch; ++c) {
      if (needs_mhat[c]) Mhat_[c].resize(d);
    }
  }

  const FilterBank& bank() const { return bank_; }
  const ScatteringIndex& index() const { return index_; }

  void forward(const Eigen::Ref<const Vector>& x) {
    const Eigen::Index d = bank_.size;
    if (x.size() != d) throw ConfigError("field size does not match filter bank");
    for (Eigen::Index u = 0; u < d; ++u) spatial_[u] = std::complex<double>(x[u], 0.0);
    bank_.plan->forward(spatial_.data(), xhat_.data());
    for (Eigen::Index c = 0; c < bank_.n_channels(); ++c) {
      const auto cc = static_cast<std::size_t>(c);
      freq_ = xhat_ * bank_.filters[cc];
      bank_.plan->inverse(freq_.data(), X_[cc].data());
      M_[cc] = X_[cc].abs();
      for (Eigen::Index u = 0; u < d; ++u) {
        S_[cc][u] = M_[cc][u] == 0.0 ? std::complex<double>(0.0, 0.0) : X_[cc][u] / M_[cc][u];
      }
      if (Mhat_[cc].size() != 0) {
        for (Eigen::Index u = 0; u < d; ++u) spatial_[u] = std::complex<double>(M_[cc][u], 0.0);
        bank_.plan->forward(spatial_.data(), Mhat_[cc].data());
      }
    }
    for (std::size_t p = 0; p < index_.pairs.size(); ++p) {
      const auto [cp, eta] = index_.pairs[p];
      freq_ = Mhat_[static_cast<std::size_t>(eta)] * bank_.filters[static_cast<std::size_t>(cp)];
      bank_.plan->inverse(freq_.data(), U_[p].data());
    }
  }

  void moments(Eigen::Ref<Vector> out) const {
    const double inv_d = 1.0 / static_cast<double>(bank_.size);
    std::complex<double> last(0.0, 0.0);
    for (std::size_t e = 0; e < index_.entries.size(); ++e) {
      const auto& entry = index_.entries[e];
      switch (entry.family) {
        case ScatteringIndex::Family::kPhi1:
          out[static_cast<Eigen::Index>(e)] = M_[static_cast<std::size_t>(entry.lam)].mean();
          break;
        case ScatteringIndex::Family::kPhi2:
          out[static_cast<Eigen::Index>(e)] =
              M_[static_cast<std::size_t>(entry.lam)].square().mean();
          break;
        case ScatteringIndex::Family::kPhi3: {
          if (!entry.imag) {
            const auto p = static_cast<std::size_t>(index_.pair_id(entry.lam_p, entry.lam));
            last = inv_d * (U_[p] * X_[static_cast<std::size_t>(entry.lam_p)].conjugate()).sum();
          }
          out[static_cast<Eigen::Index>(e)] = entry.imag ? last.imag() : last.real();
          break;
        }
        case ScatteringIndex::Family::kPhi4: {
          if (!entry.imag) {
            const auto pa = static_cast<std::size_t>(index_.pair_id(entry.lam_p, entry.lam));
            const auto pb = static_cast<std::size_t>(index_.pair_id(entry.lam_p, entry.lam_pp));
            last = inv_d * (U_[pa] * U_[pb].conjugate()).sum();
          }
          out[static_cast<Eigen::Index>(e)] = entry.imag ? last.imag() : last.real();
          break;
        }
      }
    }
  }

  // grad += is not supported: grad is overwritten. Entries with exactly zero
  // weight are skipped, so a single unit weight reproduces a Jacobian row
  // bit for bit.
  void adjoint(const Eigen::Ref<const Vector>& weights, Eigen::Ref<Vector> grad) {
    if (weights.size() != index_.size()) throw ConfigError("weight vector length mismatch");
    const double inv_d = 1.0 / static_cast<double>(bank_.size);
    reset_cotangents();

    for (Eigen::Index e = 0; e < weights.size(); ++e) {
      const double w = weights[e];
      if (w == 0.0) continue;
      const auto& entry = index_.entries[static_cast<std::size_t>(e)];
      const std::complex<double> cw = entry.imag ? std::complex<double>(0.0, w)
                                                 : std::complex<double>(w, 0.0);
      switch (entry.family) {
        case ScatteringIndex::Family::kPhi1:
          cot_m(entry.lam) += w * inv_d;
          break;
        case ScatteringIndex::Family::kPhi2:
          cot_x(entry.lam) += (2.0 * w * inv_d) * X_[static_cast<std::size_t>(entry.lam)];
          break;
        case ScatteringIndex::Family::kPhi3: {
          const int p = index_.pair_id(entry.lam_p, entry.lam);
          cot_u(p) += (cw * inv_d) * X_[static_cast<std::size_t>(entry.lam_p)];
          cot_x(entry.lam_p) += (std::conj(cw) * inv_d) * U_[static_cast<std::size_t>(p)];
          break;
        }
        case ScatteringIndex::Family::kPhi4: {
          const int pa = index_.pair_id(entry.lam_p, entry.lam);
          const int pb = index_.pair_id(entry.lam_p, entry.lam_pp);
          cot_u(pa) += (cw * inv_d) * U_[static_cast<std::size_t>(pb)];
          cot_u(pb) += (std::conj(cw) * inv_d) * U_[static_cast<std::size_t>(pa)];
          break;
        }
      }
    }

    // cot_u -> cot_m through the lambda'-convolution adjoint; contributions
    // for one eta are merged in the frequency domain first.
    for (Eigen::Index eta = 0; eta < index_.n_bandpass; ++eta) {
      bool any = false;
      for (Eigen::Index cp = 0; cp < index_.n_bandpass; ++cp) {
        const int p = index_.pair_id(static_cast<int>(cp), static_cast<int>(eta));
        if (p < 0 || !u_active_[static_cast<std::size_t>(p)]) continue;
        bank_.plan->forward(cot_u_[static_cast<std::size_t>(p)].data(), spatial_.data());
        if (!any) {
          freq_total_ = spatial_ * bank_.filters[static_cast<std::size_t>(cp)].conjugate();
          any = true;
        } else {
          freq_total_ += spatial_ * bank_.filters[static_cast<std::size_t>(cp)].conjugate();
        }
      }
      if (!any) continue;
      bank_.plan->inverse(freq_total_.data(), spatial_.data());
      cot_m(static_cast<int>(eta)) += spatial_.real();
    }

    // cot_m -> cot_x through the modulus subgradient.
    for (Eigen::Index c = 0; c < bank_.n_channels(); ++c) {
      const auto cc = static_cast<std::size_t>(c);
      if (!m_active_[cc]) continue;
      CArray& cx = cot_x(static_cast<int>(c));
      for (Eigen::Index u = 0; u < bank_.size; ++u) cx[u] += cot_m_[cc][u] * S_[cc][u];
    }

    // cot_x -> gradient through the filter adjoints, merged in frequency.
    bool any = false;
    for (Eigen::Index c = 0; c < bank_.n_channels(); ++c) {
      const auto cc = static_cast<std::size_t>(c);
      if (!x_active_[cc]) continue;
      bank_.plan->forward(cot_x_[cc].data(), spatial_.data());
      if (!any) {
        freq_total_ = spatial_ * bank_.filters[cc].conjugate();
        any = true;
      } else {
        freq_total_ += spatial_ * bank_.filters[cc].conjugate();
      }
    }
    if (!any) {
      grad.setZero();
      return;
    }
    bank_.plan->inverse(freq_total_.data(), spatial_.data());
    for (Eigen::Index u = 0; u < bank_.size; ++u) grad[u] = spatial_[u].real();
  }

  const CArray& channel(Eigen::Index c) const { return X_[static_cast<std::size_t>(c)]; }

  std::size_t workspace_bytes() const {
    const auto d = static_cast<std::size_t>(bank_.size);
    std::size_t complex_arrays = 4;  // xhat, freq, spatial, freq_total
    for (const auto& m : Mhat_) complex_arrays += m.size() != 0 ? 1 : 0;
    complex_arrays += X_.size() + S_.size() + 2 * U_.size() + cot_x_.size();
    const std::size_t real_arrays = M_.size() + cot_m_.size();
    return d * (complex_arrays * sizeof(std::complex<double>) + real_arrays * sizeof(double));
  }

 private:
  void reset_cotangents() {
    std::fill(m_active_.begin(), m_active_.end(), false);
    std::fill(x_active_.begin(), x_active_.end(), false);
    std::fill(u_active_.begin(), u_active_.end(), false);
  }

  RArray& cot_m(int c) {
    auto idx = static_cast<std::size_t>(c);
    if (!m_active_[idx]) {
      cot_m_[idx].setZero();
      m_active_[idx] = true;
    }
    return cot_m_[idx];
  }
  CArray& cot_x(int c) {
    auto idx = static_cast<std::size_t>(c);
    if (!x_active_[idx]) {
      cot_x_[idx].setZero();
      x_active_[idx] = true;
    }
    return cot_x_[idx];
  }
  CArray& cot_u(int p) {
    auto idx = static_cast<std::size_t>(p);
    if (!u_active_[idx]) {
      cot_u_[idx].setZero();
      u_active_[idx] = true;
    }
    return cot_u_[idx];
  }

  const FilterBank& bank_;
  const ScatteringIndex& index_;
  CArray xhat_, freq_, spatial_, freq_total_;
  std::vector<CArray> X_, S_, Mhat_, U_, cot_x_, cot_u_;
  std::vector<RArray> M_, cot_m_;
  std::vector<bool> m_active_, x_active_, u_active_;
};

// ---------------------------------------------------------------------------
// Free-function entry points.
// ---------------------------------------------------------------------------

// All channels, exact periodic convolution in the frequency domain.
inline std::vector<CArray> wavelet_transform(const Eigen::Ref<const Vector>& x,
                                             const FilterBank& bank) {
  if (x.size() != bank.size) throw ConfigError("field size does not match filter bank");
  if (!x.allFinite()) throw DataError("wavelet transform input must be finite");
  CArray spatial(bank.size), xhat(bank.size), freq(bank.size);
  for (Eigen::Index u = 0; u < bank.size; ++u) spatial[u] = std::complex<double>(x[u], 0.0);
  bank.plan->forward(spatial.data(), xhat.data());
  std::vector<CArray> out;
  out.reserve(static_cast<std::size_t>(bank.n_channels()));
  for (Eigen::Index c = 0; c < bank.n_channels(); ++c) {
    freq = xhat * bank.filters[static_cast<std::size_t>(c)];
    CArray coeff(bank.size);
    bank.plan->inverse(freq.data(), coeff.data());
    out.push_back(std::move(coeff));
  }
  return out;
}

inline Vector scattering_moments(const Eigen::Ref<const Vector>& x, const FilterBank& bank,
                                 const ScatteringIndex& index) {
  ScatteringCompute compute(bank, index);
  compute.forward(x);
  Vector out(index.size());
  compute.moments(out);
  return out;
}

inline Vector scattering_vjp(const Eigen::Ref<const Vector>& x,
                             const Eigen::Ref<const Vector>& weights, const FilterBank& bank,
                             const ScatteringIndex& index) {
  ScatteringCompute compute(bank, index);
  compute.forward(x);
  Vector grad(bank.size);
  compute.adjoint(weights, grad);
  return grad;
}

// Each requested row is the adjoint pass run with one unit weight.
inline Matrix scattering_jacobian_rows(const Eigen::Ref<const Vector>& x, const FilterBank& bank,
                                       const ScatteringIndex& index,
                                       const std::vector<Eigen::Index>& rows) {
  ScatteringCompute compute(bank, index);
  compute.forward(x);
  Matrix out(static_cast<Eigen::Index>(rows.size()), bank.size);
  Vector weights = Vector::Zero(index.size());
  for (std::size_t i = 0; i < rows.size(); ++i) {
    if (rows[i] < 0 || rows[i] >= index.size()) {
      throw ConfigError("jacobian row index out of range");
    }
    weights[rows[i]] = 1.0;
    Vector row(bank.size);
    compute.adjoint(weights, row);
    out.row(static_cast<Eigen::Index>(i)) = row.transpose();
    weights[rows[i]] = 0.0;
  }
  return out;
}

// ---------------------------------------------------------------------------
// MomentFunction adapter: scattering spectra as a family phi: R^d -> R^r.
// Engines are pooled so concurrent particle sweeps reuse workspaces.
// ---------------------------------------------------------------------------

class ScatteringMap final : public MomentFunction {
 public:
  ScatteringMap(FilterBank bank, ScatteringIndex index)
      : bank_(std::move(bank)), index_(std::move(index)) {}

  explicit ScatteringMap(FilterBank bank)
      : bank_(std::move(bank)), index_(ScatteringIndex::full(bank_)) {}

  const FilterBank& bank() const { return bank_; }
  const ScatteringIndex& scattering_index() const { return index_; }

  Eigen::Index input_dim() const override { return bank_.size; }
  Eigen::Index output_dim() const override { return index_.size(); }

  void eval(const Eigen::Ref<const Vector>& x, Eigen::Ref<Vector> out) const override {
    auto lease = acquire();
    lease.compute->forward(x);
    lease.compute->moments(out);
    release(std::move(lease));
  }

  void jacobian(const Eigen::Ref<const Vector>& x, Eigen::Ref<Matrix> jac) const override {
    auto lease = acquire();
    lease.compute->forward(x);
    Vector weights = Vector::Zero(index_.size());
    Vector row(bank_.size);
    for (Eigen::Index k = 0; k < index_.size(); ++k) {
      weights[k] = 1.0;
      lease.compute->adjoint(weights, row);
      jac.row(k) = row.transpose();
      weights[k] = 0.0;
    }
    release(std::move(lease));
  }

  void vjp(const Eigen::Ref<const Vector>& x, const Eigen::Ref<const Vector>& w,
           Eigen::Ref<Vector> out) const override {
    auto lease = acquire();
    lease.compute->forward(x);
    lease.compute->adjoint(w, out);
    release(std::move(lease));
  }

  void eval_jacobian_batch(const Eigen::Ref<const Matrix>& X, Eigen::Ref<Matrix> phi_out,
                           Eigen::Ref<Matrix> jac_stack) const override {
    const Eigen::Index d = bank_.size;
    auto lease = acquire();
    Vector weights = Vector::Zero(index_.size());
    Vector row(d), mom(index_.size());
    for (Eigen::Index i = 0; i < X.rows(); ++i) {
      lease.compute->forward(X.row(i).transpose());
      lease.compute->moments(mom);
      phi_out.row(i) = mom.transpose();
      for (Eigen::Index k = 0; k < index_.size(); ++k) {
        weights[k] = 1.0;
        lease.compute->adjoint(weights, row);
        jac_stack.block(k, i * d, 1, d) = row.transpose();
        weights[k] = 0.0;
      }
    }
    release(std::move(lease));
  }

  std::size_t unit_cost() const override {
    const auto d = static_cast<std::size_t>(bank_.size);
    const auto work = static_cast<std::size_t>(bank_.n_channels()) + index_.pairs.size();
    return d * work;  // large enough that particle chunks degrade to size 1
  }

  std::size_t workspace_bytes() const {
    ScatteringCompute probe(bank_, index_);
    return probe.workspace_bytes();
  }

 private:
  struct Lease {
    std::unique_ptr<ScatteringCompute> compute;
  };

  Lease acquire() const {
    std::lock_guard<std::mutex> lock(pool_mutex_);
    if (!pool_.empty()) {
      Lease lease{std::move(pool_.back())};
      pool_.pop_back();
      return lease;
    }
    return Lease{std::make_unique<ScatteringCompute>(bank_, index_)};
  }

  void release(Lease lease) const {
    std::lock_guard<std::mutex> lock(pool_mutex_);
    pool_.push_back(std::move(lease.compute));
  }

  FilterBank bank_;
  ScatteringIndex index_;
  mutable std::mutex pool_mutex_;
  mutable std::vector<std::unique_ptr<ScatteringCompute>> pool_;
};

inline std::shared_ptr<const ScatteringMap> scattering_map(int d_per_axis, int kappa, int J,
                                                           int L = 4) {
  return std::make_shared<ScatteringMap>(build_filter_bank(d_per_axis, kappa, J, L));
}

}  // namespace mgd
