#pragma once

// Microscope forward operator: depth-dependent defocus blur followed by
// extraction of the focal slice, plus its exact discrete adjoint.

#include <algorithm>
#include <cmath>
#include <complex>
#include <memory>
#include <span>
#include <stdexcept>
#include <vector>

#include "dfreg/fft.hpp"
#include "dfreg/grid.hpp"

namespace dfreg {

/// Nodal samples of a blur density chi on the lattice of a volume grid,
/// indexed by node offsets (a,b,k) in [-rx,rx] x [-ry,ry] x [-rz,rz].
/// Values carry units of inverse volume; the discrete convolution applies the
/// quadrature weight hx*hy*hz.
struct BlurKernel {
  Grid<3> volume_grid;
  int rx = 0, ry = 0, rz = 0;
  int focal_index = 0;
  double focal_height = 0.0;
  double cone_slope = 0.0;
  std::vector<double> values;

  int size_x() const { return 2 * rx + 1; }
  int size_y() const { return 2 * ry + 1; }
  int slice_count() const { return 2 * rz + 1; }

  double at(int a, int b, int k) const {
    if (std::abs(a) > rx || std::abs(b) > ry || std::abs(k) > rz) return 0.0;
    return values[static_cast<std::size_t>(a + rx) +
                  static_cast<std::size_t>(size_x()) * ((b + ry) + static_cast<std::size_t>(size_y()) * (k + rz))];
  }

  /// sum over the slice of value * hx * hy.
  double slice_mass(int k) const {
    double s = 0.0;
    for (int b = -ry; b <= ry; ++b)
      for (int a = -rx; a <= rx; ++a) s += at(a, b, k);
    return s * volume_grid.spacing(0) * volume_grid.spacing(1);
  }

  double total_mass() const {
    double s = 0.0;
    for (int k = -rz; k <= rz; ++k) s += slice_mass(k);
    return s;
  }
};

namespace detail {

inline int focal_index_of(const Grid<3>& grid, double focal_height) {
  if (!(focal_height >= 0.0 && focal_height <= grid.extent(2)))
    throw std::invalid_argument("focal height lies outside the volume's z-range");
  return static_cast<int>(std::lround(focal_height / grid.spacing(2)));
}

}  // namespace detail

/// Double-cone kernel: the slice at distance d from the focal plane is the
/// uniform disc of radius c*|d| with unit mass; the focal slice is a 2D
/// point mass. Slices whose disc covers a single node also become point masses.
inline BlurKernel make_cone_kernel(const Grid<3>& grid, double cone_slope, double focal_height) {
  if (!(cone_slope > 0.0) || !std::isfinite(cone_slope)) throw std::invalid_argument("cone slope must be positive");
  for (int a = 0; a < 3; ++a)
    if (grid.nodes(a) < 3) throw std::invalid_argument("kernel grid needs at least 3 nodes per axis");
  BlurKernel k;
  k.volume_grid = grid;
  k.cone_slope = cone_slope;
  k.focal_height = focal_height;
  k.focal_index = detail::focal_index_of(grid, focal_height);
  const int nz = grid.nodes(2);
  k.rz = std::max(k.focal_index, nz - 1 - k.focal_index);
  const double hx = grid.spacing(0), hy = grid.spacing(1), hz = grid.spacing(2);
  const double max_radius = cone_slope * k.rz * hz;
  k.rx = std::min(static_cast<int>(std::floor(max_radius / hx + 1e-9)), grid.nodes(0) - 1);
  k.ry = std::min(static_cast<int>(std::floor(max_radius / hy + 1e-9)), grid.nodes(1) - 1);
  k.values.assign(static_cast<std::size_t>(k.size_x()) * k.size_y() * k.slice_count(), 0.0);

  auto slot = [&](int a, int b, int s) -> double& {
    return k.values[static_cast<std::size_t>(a + k.rx) +
                    static_cast<std::size_t>(k.size_x()) * ((b + k.ry) + static_cast<std::size_t>(k.size_y()) * (s + k.rz))];
  };
  for (int s = -k.rz; s <= k.rz; ++s) {
    const double r = cone_slope * std::abs(s) * hz;
    const double r2 = r * r * (1.0 + 1e-12);
    // the disc is counted without truncation so the mass normalization is
    // independent of the volume size
    const int ax = static_cast<int>(std::floor(r / hx + 1e-9));
    const int ay = static_cast<int>(std::floor(r / hy + 1e-9));
    long count = 0;
    for (int b = -ay; b <= ay; ++b)
      for (int a = -ax; a <= ax; ++a)
        if ((a * hx) * (a * hx) + (b * hy) * (b * hy) <= r2) ++count;
    if (s == 0 || count <= 1) {
      slot(0, 0, s) = 1.0 / (hx * hy);
      continue;
    }
    const double v = 1.0 / (static_cast<double>(count) * hx * hy);
    for (int b = -std::min(ay, k.ry); b <= std::min(ay, k.ry); ++b)
      for (int a = -std::min(ax, k.rx); a <= std::min(ax, k.rx); ++a)
        if ((a * hx) * (a * hx) + (b * hy) * (b * hy) <= r2) slot(a, b, s) = v;
  }
  return k;
}

/// Discrete 3D Dirac at the focal node: projecting with it returns the focal
/// slice unchanged.
inline BlurKernel make_delta_kernel(const Grid<3>& grid, double focal_height) {
  BlurKernel k;
  k.volume_grid = grid;
  k.focal_height = focal_height;
  k.focal_index = detail::focal_index_of(grid, focal_height);
  k.values = {1.0 / grid.element_measure()};
  return k;
}

/// Grid-independent kernel description, so each level of a hierarchy can
/// sample its own kernel.
struct KernelSpec {
  enum class Kind { cone, delta };
  Kind kind = Kind::cone;
  double cone_slope = 1.0;
  double focal_height = 0.5;

  BlurKernel build(const Grid<3>& grid) const {
    return kind == Kind::cone ? make_cone_kernel(grid, cone_slope, focal_height) : make_delta_kernel(grid, focal_height);
  }
};

/// F u = [chi * u](., ., focal), computed as a sum over z-slices of 2D linear
/// convolutions through zero-padded FFTs. The kernel spectra are cached.
class ForwardOperator {
 public:
  explicit ForwardOperator(BlurKernel kernel) : grid_(kernel.volume_grid), kernel_(std::move(kernel)) {
    const int nx = grid_.nodes(0), ny = grid_.nodes(1), nz = grid_.nodes(2);
    px_ = fft::smooth_size(nx + 2 * std::min(kernel_.rx, nx - 1));
    py_ = fft::smooth_size(ny + 2 * std::min(kernel_.ry, ny - 1));
    plan_ = std::make_shared<fft::Plan2D>(px_, py_);
    scale_ = grid_.element_measure() / (static_cast<double>(px_) * py_);

    auto buf = fft::alloc_real(plan_->real_size());
    auto spec = fft::alloc_complex(plan_->complex_size());
    spectra_.resize(static_cast<std::size_t>(nz));
    for (int j = 0; j < nz; ++j) {
      const int s = kernel_.focal_index - j;
      if (std::abs(s) > kernel_.rz) continue;
      bool any = false;
      std::fill(buf.get(), buf.get() + plan_->real_size(), 0.0);
      for (int b = -kernel_.ry; b <= kernel_.ry; ++b)
        for (int a = -kernel_.rx; a <= kernel_.rx; ++a) {
          const double v = kernel_.at(a, b, s);
          if (v == 0.0) continue;
          any = true;
          const int ia = (a % px_ + px_) % px_, ib = (b % py_ + py_) % py_;
          buf[static_cast<std::size_t>(ia) + static_cast<std::size_t>(px_) * ib] += v;
        }
      if (!any) continue;
      plan_->forward(buf.get(), spec.get());
      spectra_[j].assign(spec.get(), spec.get() + plan_->complex_size());
    }
  }

  const Grid<3>& grid() const { return grid_; }
  const BlurKernel& kernel() const { return kernel_; }

  /// Raw form on nodal arrays: u has nx*ny*nz entries, out nx*ny.
  void project(std::span<const double> u, std::span<double> out) const {
    const int nx = grid_.nodes(0), ny = grid_.nodes(1), nz = grid_.nodes(2);
    const std::size_t cs = plan_->complex_size();
    auto buf = fft::alloc_real(plan_->real_size());
    auto spec = fft::alloc_complex(cs);
    auto acc = fft::alloc_complex(cs);
    std::fill(acc.get(), acc.get() + cs, std::complex<double>(0.0, 0.0));
    const std::size_t slice = static_cast<std::size_t>(nx) * ny;
    bool any = false;
    for (int j = 0; j < nz; ++j) {
      if (spectra_[j].empty()) continue;
      const double* src = u.data() + slice * j;
      if (std::all_of(src, src + slice, [](double v) { return v == 0.0; })) continue;
      pad(src, buf.get());
      plan_->forward(buf.get(), spec.get());
      const auto& K = spectra_[j];
      for (std::size_t m = 0; m < cs; ++m) acc[m] += spec[m] * K[m];
      any = true;
    }
    if (!any) {
      std::fill(out.begin(), out.end(), 0.0);
      return;
    }
    plan_->backward(acc.get(), buf.get());
    crop(buf.get(), out.data());
  }

  /// Exact adjoint of project() with respect to plain nodal dot products:
  /// embeds f at the focal slice and cross-correlates with the kernel.
  void adjoint(std::span<const double> f, std::span<double> out) const {
    const int nx = grid_.nodes(0), ny = grid_.nodes(1), nz = grid_.nodes(2);
    const std::size_t cs = plan_->complex_size();
    const std::size_t slice = static_cast<std::size_t>(nx) * ny;
    auto buf = fft::alloc_real(plan_->real_size());
    auto fhat = fft::alloc_complex(cs);
    auto tmp = fft::alloc_complex(cs);
    pad(f.data(), buf.get());
    plan_->forward(buf.get(), fhat.get());
    for (int j = 0; j < nz; ++j) {
      double* dst = out.data() + slice * j;
      if (spectra_[j].empty()) {
        std::fill(dst, dst + slice, 0.0);
        continue;
      }
      const auto& K = spectra_[j];
      for (std::size_t m = 0; m < cs; ++m) tmp[m] = fhat[m] * std::conj(K[m]);
      plan_->backward(tmp.get(), buf.get());
      crop(buf.get(), dst);
    }
  }

  ScalarField2D project(const ScalarField3D& u) const {
    check_grid(u.grid());
    ScalarField2D out(grid_.plane());
    project(u.values(), out.values());
    return out;
  }

  ScalarField3D adjoint(const ScalarField2D& f) const {
    if (!(f.grid() == grid_.plane())) throw std::invalid_argument("image grid does not match the kernel's volume plane");
    ScalarField3D out(grid_);
    adjoint(f.values(), out.values());
    return out;
  }

  void check_grid(const Grid<3>& g) const {
    for (int a = 0; a < 3; ++a)
      if (g.nodes(a) != grid_.nodes(a) || std::abs(g.spacing(a) - grid_.spacing(a)) > 1e-12 * grid_.spacing(a))
        throw std::invalid_argument("spacing mismatch between volume and blur kernel");
  }

 private:
  void pad(const double* src, double* buf) const {
    const int nx = grid_.nodes(0), ny = grid_.nodes(1);
    std::fill(buf, buf + plan_->real_size(), 0.0);
    for (int j = 0; j < ny; ++j)
      std::copy(src + static_cast<std::size_t>(nx) * j, src + static_cast<std::size_t>(nx) * (j + 1),
                buf + static_cast<std::size_t>(px_) * j);
  }
  void crop(const double* buf, double* dst) const {
    const int nx = grid_.nodes(0), ny = grid_.nodes(1);
    for (int j = 0; j < ny; ++j)
      for (int i = 0; i < nx; ++i)
        dst[static_cast<std::size_t>(i) + static_cast<std::size_t>(nx) * j] =
            buf[static_cast<std::size_t>(i) + static_cast<std::size_t>(px_) * j] * scale_;
  }

  Grid<3> grid_;
  BlurKernel kernel_;
  int px_ = 0, py_ = 0;
  double scale_ = 1.0;
  std::shared_ptr<const fft::Plan2D> plan_;
  std::vector<std::vector<std::complex<double>>> spectra_;
};

inline ScalarField2D project(const ScalarField3D& u, const BlurKernel& k) {
  return ForwardOperator(k).project(u);
}

inline ScalarField3D adjoint(const ScalarField2D& f, const BlurKernel& k) {
  return ForwardOperator(k).adjoint(f);
}

}  // namespace dfreg
