#pragma once

#include <cmath>
#include <complex>
#include <vector>

#include "lsm/common.hpp"

namespace lsm {

// In-place iterative radix-2 FFT with a precomputed twiddle table. Sizes
// that are not a power of two fall back to a direct O(n^2) DFT; the pipeline
// preset only ever uses n = 256.
class FftPlan {
 public:
  explicit FftPlan(int n) : n_(n) {
    require(n > 0, "FftPlan: n must be positive");
    pow2_ = (n & (n - 1)) == 0;
    if (!pow2_) return;
    twiddle_.resize(static_cast<std::size_t>(n / 2));
    constexpr double two_pi = 6.28318530717958647692;
    for (int k = 0; k < n / 2; ++k) {
      const double a = -two_pi * k / n;
      twiddle_[static_cast<std::size_t>(k)] = {std::cos(a), std::sin(a)};
    }
    rev_.resize(static_cast<std::size_t>(n));
    int bits = 0;
    while ((1 << bits) < n) ++bits;
    for (int i = 0; i < n; ++i) {
      int r = 0;
      for (int b = 0; b < bits; ++b)
        if (i & (1 << b)) r |= 1 << (bits - 1 - b);
      rev_[static_cast<std::size_t>(i)] = r;
    }
  }

  int size() const { return n_; }

  void forward(std::complex<double>* x) const {
    if (pow2_) {
      fft_pow2(x);
    } else {
      dft(x);
    }
  }

 private:
  void fft_pow2(std::complex<double>* x) const {
    const int n = n_;
    for (int i = 0; i < n; ++i) {
      const int j = rev_[static_cast<std::size_t>(i)];
      if (i < j) std::swap(x[i], x[j]);
    }
    for (int len = 2; len <= n; len <<= 1) {
      const int half = len >> 1;
      const int step = n / len;
      for (int base = 0; base < n; base += len) {
        for (int k = 0; k < half; ++k) {
          const auto w = twiddle_[static_cast<std::size_t>(k * step)];
          const auto u = x[base + k];
          const auto t = x[base + k + half] * w;
          x[base + k] = u + t;
          x[base + k + half] = u - t;
        }
      }
    }
  }

  void dft(std::complex<double>* x) const {
    const int n = n_;
    std::vector<std::complex<double>> out(static_cast<std::size_t>(n));
    constexpr double two_pi = 6.28318530717958647692;
    for (int k = 0; k < n; ++k) {
      std::complex<double> s{0.0, 0.0};
      for (int i = 0; i < n; ++i) {
        const double a = -two_pi * static_cast<double>(k) * i / n;
        s += x[i] * std::complex<double>(std::cos(a), std::sin(a));
      }
      out[static_cast<std::size_t>(k)] = s;
    }
    for (int i = 0; i < n; ++i) x[i] = out[static_cast<std::size_t>(i)];
  }

  int n_;
  bool pow2_ = false;
  std::vector<std::complex<double>> twiddle_;
  std::vector<int> rev_;
};

}  // namespace lsm
