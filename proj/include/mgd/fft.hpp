// Copyright (C) 2026 the mgd authors
// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <fftw3.h>

#include <complex>
#include <mutex>
#include <stdexcept>
#include <vector>

namespace mgd {

// Complex DFT of a fixed 1D/2D shape backed by FFTW. Plans are created once
// (FFTW_ESTIMATE, so planning is reproducible) and executed through the
// new-array interface, which is safe to call concurrently with distinct
// buffers. The inverse transform is normalized by 1/size.
class FftPlan {
 public:
  explicit FftPlan(std::vector<int> dims) : dims_(std::move(dims)) {
    if (dims_.empty() || dims_.size() > 2) {
      throw std::invalid_argument("FftPlan supports 1D and 2D shapes");
    }
    size_ = 1;
    for (int n : dims_) {
      if (n < 1) throw std::invalid_argument("FftPlan dimensions must be positive");
      size_ *= static_cast<std::size_t>(n);
    }
    std::vector<std::complex<double>> scratch(size_);
    auto* buf = reinterpret_cast<fftw_complex*>(scratch.data());
    std::lock_guard<std::mutex> lock(planning_mutex());
    const unsigned flags = FFTW_ESTIMATE | FFTW_UNALIGNED;
    forward_ = fftw_plan_dft(static_cast<int>(dims_.size()), dims_.data(), buf, buf,
                             FFTW_FORWARD, flags);
    inverse_ = fftw_plan_dft(static_cast<int>(dims_.size()), dims_.data(), buf, buf,
                             FFTW_BACKWARD, flags);
    if (forward_ == nullptr || inverse_ == nullptr) {
      throw std::runtime_error("FFTW plan creation failed");
    }
  }

  FftPlan(const FftPlan&) = delete;
  FftPlan& operator=(const FftPlan&) = delete;

  ~FftPlan() {
    std::lock_guard<std::mutex> lock(planning_mutex());
    if (forward_ != nullptr) fftw_destroy_plan(forward_);
    if (inverse_ != nullptr) fftw_destroy_plan(inverse_);
  }

  std::size_t size() const { return size_; }
  const std::vector<int>& dims() const { return dims_; }

  void forward(const std::complex<double>* in, std::complex<double>* out) const {
    fftw_execute_dft(forward_, to_fftw(in), reinterpret_cast<fftw_complex*>(out));
  }

  void inverse(const std::complex<double>* in, std::complex<double>* out) const {
    fftw_execute_dft(inverse_, to_fftw(in), reinterpret_cast<fftw_complex*>(out));
    const double scale = 1.0 / static_cast<double>(size_);
    for (std::size_t i = 0; i < size_; ++i) out[i] *= scale;
  }

 private:
  static fftw_complex* to_fftw(const std::complex<double>* p) {
    return const_cast<fftw_complex*>(reinterpret_cast<const fftw_complex*>(p));
  }

  static std::mutex& planning_mutex() {
    static std::mutex m;
    return m;
  }

  std::vector<int> dims_;
  std::size_t size_ = 0;
  fftw_plan forward_ = nullptr;
  fftw_plan inverse_ = nullptr;
};

}  // namespace mgd
