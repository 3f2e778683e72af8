#pragma once

// Thin RAII layer over FFTW's 2D real-to-complex transforms.

#include <fftw3.h>

#include <complex>
#include <cstddef>
#include <memory>
#include <mutex>
#include <stdexcept>

namespace dfreg::fft {

/// FFTW's planner is not re-entrant; plan creation and destruction go through this.
inline std::mutex& planner_mutex() {
  static std::mutex m;
  return m;
}

/// Smallest n' >= n whose only prime factors are 2, 3, 5 and 7.
inline int smooth_size(int n) {
  for (int m = std::max(n, 1);; ++m) {
    int r = m;
    for (int p : {2, 3, 5, 7})
      while (r % p == 0) r /= p;
    if (r == 1) return m;
  }
}

struct FftwDeleter {
  void operator()(void* p) const { fftw_free(p); }
};

template <class T>
using FftwBuffer = std::unique_ptr<T[], FftwDeleter>;

inline FftwBuffer<double> alloc_real(std::size_t n) {
  auto* p = static_cast<double*>(fftw_malloc(sizeof(double) * n));
  if (!p) throw std::bad_alloc();
  return FftwBuffer<double>(p);
}

inline FftwBuffer<std::complex<double>> alloc_complex(std::size_t n) {
  auto* p = static_cast<std::complex<double>*>(fftw_malloc(sizeof(fftw_complex) * n));
  if (!p) throw std::bad_alloc();
  return FftwBuffer<std::complex<double>>(p);
}

/// Forward r2c and backward c2r plans for an (nx fastest, ny slowest) real
/// array. Executes on caller-owned fftw_malloc buffers, so one plan can be
/// shared between threads.
class Plan2D {
 public:
  Plan2D(int nx, int ny) : nx_(nx), ny_(ny) {
    auto r = alloc_real(real_size());
    auto c = alloc_complex(complex_size());
    std::lock_guard lock(planner_mutex());
    fwd_ = fftw_plan_dft_r2c_2d(ny, nx, r.get(), reinterpret_cast<fftw_complex*>(c.get()), FFTW_ESTIMATE);
    bwd_ = fftw_plan_dft_c2r_2d(ny, nx, reinterpret_cast<fftw_complex*>(c.get()), r.get(), FFTW_ESTIMATE);
    if (!fwd_ || !bwd_) throw std::runtime_error("FFTW planning failed");
  }
  Plan2D(const Plan2D&) = delete;
  Plan2D& operator=(const Plan2D&) = delete;
  ~Plan2D() {
    std::lock_guard lock(planner_mutex());
    if (fwd_) fftw_destroy_plan(fwd_);
    if (bwd_) fftw_destroy_plan(bwd_);
  }

  int nx() const { return nx_; }
  int ny() const { return ny_; }
  std::size_t real_size() const { return static_cast<std::size_t>(nx_) * ny_; }
  std::size_t complex_size() const { return static_cast<std::size_t>(nx_ / 2 + 1) * ny_; }

  void forward(double* in, std::complex<double>* out) const {
    fftw_execute_dft_r2c(fwd_, in, reinterpret_cast<fftw_complex*>(out));
  }
  /// Unnormalized inverse; destroys `in`.
  void backward(std::complex<double>* in, double* out) const {
    fftw_execute_dft_c2r(bwd_, reinterpret_cast<fftw_complex*>(in), out);
  }

 private:
  int nx_, ny_;
  fftw_plan fwd_ = nullptr;
  fftw_plan bwd_ = nullptr;
};

}  // namespace dfreg::fft
