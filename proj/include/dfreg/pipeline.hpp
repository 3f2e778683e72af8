#pragma once

// Registration driver: optional rigid prealignment, then a decreasing
// sequence of artificial in-plane blurs, each solved coarse-to-fine over the
// grid hierarchy.

#include <algorithm>
#include <array>
#include <chrono>
#include <cmath>
#include <cstdint>
#include <functional>
#include <limits>
#include <optional>
#include <stdexcept>
#include <string>
#include <unordered_set>
#include <utility>
#include <vector>

#include <spdlog/spdlog.h>

#include "dfreg/energy.hpp"
#include "dfreg/forward.hpp"
#include "dfreg/grid.hpp"
#include "dfreg/rigid.hpp"
#include "dfreg/solvers.hpp"

namespace dfreg {

// ---------------------------------------------------------------------------
// Gaussian blur in the x1-x2 plane

namespace detail {

/// Normalized samples of exp(-x^2 / 2s^2) at multiples of h, truncated at 4s.
inline std::vector<double> gaussian_weights(double s, double h) {
  const int r = static_cast<int>(std::floor(4.0 * s / h + 1e-9));
  std::vector<double> w(2 * r + 1);
  double sum = 0.0;
  for (int k = -r; k <= r; ++k) {
    const double x = k * h;
    w[k + r] = std::exp(-x * x / (2.0 * s * s));
    sum += w[k + r];
  }
  for (double& v : w) v /= sum;
  return w;
}

// Zero-padded linear convolution of an nx*ny plane along one axis.
inline void convolve_plane_axis(double* plane, int nx, int ny, int axis, const std::vector<double>& w,
                                std::vector<double>& scratch) {
  const int r = static_cast<int>(w.size() / 2);
  if (r == 0) return;
  const int len = axis == 0 ? nx : ny, lines = axis == 0 ? ny : nx;
  const std::size_t step = axis == 0 ? 1 : static_cast<std::size_t>(nx);
  const std::size_t line_step = axis == 0 ? static_cast<std::size_t>(nx) : 1;
  scratch.resize(len);
  for (int l = 0; l < lines; ++l) {
    double* p = plane + line_step * l;
    for (int i = 0; i < len; ++i) {
      double acc = 0.0;
      const int lo = std::max(-r, -i), hi = std::min(r, len - 1 - i);
      for (int k = lo; k <= hi; ++k) acc += w[k + r] * p[step * (i + k)];
      scratch[i] = acc;
    }
    for (int i = 0; i < len; ++i) p[step * i] = scratch[i];
  }
}

}  // namespace detail

/// Separable Gaussian blur with standard deviation s (same units as the box).
/// s = 0 returns the input unchanged.
inline ScalarField2D gaussian_blur(const ScalarField2D& f, double s) {
  if (s < 0.0) throw std::invalid_argument("blur scale must be nonnegative");
  ScalarField2D out = f;
  if (s == 0.0) return out;
  const Grid<2>& g = f.grid();
  std::vector<double> scratch;
  detail::convolve_plane_axis(out.values().data(), g.nodes(0), g.nodes(1), 0,
                              detail::gaussian_weights(s, g.spacing(0)), scratch);
  detail::convolve_plane_axis(out.values().data(), g.nodes(0), g.nodes(1), 1,
                              detail::gaussian_weights(s, g.spacing(1)), scratch);
  return out;
}

/// Blurs every z-slice of a volume in-plane.
inline ScalarField3D gaussian_blur(const ScalarField3D& f, double s) {
  if (s < 0.0) throw std::invalid_argument("blur scale must be nonnegative");
  ScalarField3D out = f;
  if (s == 0.0) return out;
  const Grid<3>& g = f.grid();
  const auto wx = detail::gaussian_weights(s, g.spacing(0)), wy = detail::gaussian_weights(s, g.spacing(1));
  const std::size_t slice = static_cast<std::size_t>(g.nodes(0)) * g.nodes(1);
  std::vector<double> scratch;
  for (int k = 0; k < g.nodes(2); ++k) {
    double* p = out.values().data() + slice * k;
    detail::convolve_plane_axis(p, g.nodes(0), g.nodes(1), 0, wx, scratch);
    detail::convolve_plane_axis(p, g.nodes(0), g.nodes(1), 1, wy, scratch);
  }
  return out;
}

// ---------------------------------------------------------------------------
// Constraint diagnostics

struct ConstraintDiagnostics {
  double min_det = 0.0;
  double det_integral = 0.0;
  double deformed_volume = 0.0;  // rasterized estimate of vol(y(Omega))
  double volume_gap = 0.0;       // det_integral - deformed_volume
  std::array<double, 3> max_abs{};
};

/// min det grad y over Gauss points, int det grad y, a rasterized estimate of
/// the deformed volume (cells of half the grid spacing), and max |y_k|.
inline ConstraintDiagnostics constraint_diagnostics(const Deformation& y) {
  const Grid<3>& g = y.grid();
  const auto geo = detail::element_geometry(g);
  const auto& rule = gauss2<3>();
  ConstraintDiagnostics d;
  d.min_det = std::numeric_limits<double>::infinity();
  for (std::size_t e = 0; e < g.element_count(); ++e) {
    const auto corners = element_corners(g, e);
    for (int q = 0; q < 8; ++q) {
      const double det = detail::nodal_gradient(y.values(), corners, q, geo).det();
      d.min_det = std::min(d.min_det, det);
      d.det_integral += geo.volume * rule.weights[q] * det;
    }
  }
  for (std::size_t n = 0; n < g.node_count(); ++n)
    for (int a = 0; a < 3; ++a) d.max_abs[a] = std::max(d.max_abs[a], std::abs(y.at(n, a)));

  // Sub-sample every deformed element and mark the half-spacing lattice cells hit.
  const std::array<double, 3> cell{0.5 * g.spacing(0), 0.5 * g.spacing(1), 0.5 * g.spacing(2)};
  const double hmin = std::min({g.spacing(0), g.spacing(1), g.spacing(2)});
  std::unordered_set<std::uint64_t> occupied;
  auto key = [](std::int64_t i, std::int64_t j, std::int64_t k) {
    constexpr std::int64_t off = std::int64_t{1} << 20, mask = (std::int64_t{1} << 21) - 1;
    return static_cast<std::uint64_t>(((i + off) & mask) | (((j + off) & mask) << 21) | (((k + off) & mask) << 42));
  };
  for (std::size_t e = 0; e < g.element_count(); ++e) {
    const auto corners = element_corners(g, e);
    double lo[3], hi[3];
    for (int a = 0; a < 3; ++a) lo[a] = std::numeric_limits<double>::infinity(), hi[a] = -lo[a];
    for (int c = 0; c < 8; ++c)
      for (int a = 0; a < 3; ++a) {
        lo[a] = std::min(lo[a], y.at(corners[c], a));
        hi[a] = std::max(hi[a], y.at(corners[c], a));
      }
    const double spread = std::max({hi[0] - lo[0], hi[1] - lo[1], hi[2] - lo[2]});
    const int m = std::clamp(static_cast<int>(std::ceil(4.0 * spread / hmin - 1e-9)), 4, 32);
    for (int sk = 0; sk < m; ++sk)
      for (int sj = 0; sj < m; ++sj)
        for (int si = 0; si < m; ++si) {
          const double xi[3] = {(si + 0.5) / m, (sj + 0.5) / m, (sk + 0.5) / m};
          double p[3] = {0.0, 0.0, 0.0};
          for (int c = 0; c < 8; ++c) {
            double w = 1.0;
            for (int a = 0; a < 3; ++a) w *= ((c >> a) & 1) ? xi[a] : 1.0 - xi[a];
            for (int a = 0; a < 3; ++a) p[a] += w * y.at(corners[c], a);
          }
          occupied.insert(key(static_cast<std::int64_t>(std::floor(p[0] / cell[0])),
                              static_cast<std::int64_t>(std::floor(p[1] / cell[1])),
                              static_cast<std::int64_t>(std::floor(p[2] / cell[2]))));
        }
  }
  d.deformed_volume = static_cast<double>(occupied.size()) * cell[0] * cell[1] * cell[2];
  d.volume_gap = d.det_integral - d.deformed_volume;
  return d;
}

// ---------------------------------------------------------------------------
// Multiscale registration

struct PipelineConfig {
  // decreasing blur scales in units of the finest in-plane spacing; must end at 0
  std::vector<double> blur_schedule{8.0, 4.0, 2.0, 0.0};
  int min_level = 3;
  bool prealign = false;
  KernelSpec kernel;
  EnergyConfig energy;
  SolverConfig solver;
  RigidConfig rigid;

  void validate() const {
    if (blur_schedule.empty() || blur_schedule.back() != 0.0)
      throw std::invalid_argument("blur schedule must end with 0");
    for (std::size_t i = 0; i + 1 < blur_schedule.size(); ++i)
      if (!(blur_schedule[i] > blur_schedule[i + 1])) throw std::invalid_argument("blur schedule must be strictly decreasing");
    if (min_level < 1) throw std::invalid_argument("min_level must be >= 1");
    energy.validate();
    solver.validate();
  }
};

/// Level on which a stage with blur scale s (absolute units) starts: the
/// finest level whose in-plane spacing is still >= s; s = 0 starts one
/// level below the finest.
inline int start_level(double s, double finest_spacing, int finest_level, int min_level) {
  int n = finest_level - 1;
  if (s >= finest_spacing) n = finest_level - static_cast<int>(std::floor(std::log2(s / finest_spacing) + 1e-12));
  return std::clamp(n, std::min(min_level, finest_level), finest_level);
}

struct StageReport {
  double blur = 0.0;  // absolute scale
  int level = 0;
  std::vector<double> energy_trace;
  double initial_data_term = 0.0;
  double final_data_term = 0.0;
  int iterations = 0;
  SolverStatus status = SolverStatus::max_iterations;
  ConstraintDiagnostics diagnostics;
  double seconds = 0.0;
};

struct RegistrationReport {
  Deformation deformation;
  ScalarField3D volume;  // the volume registered (after prealignment, if any)
  std::optional<RigidParams> rigid;
  std::vector<StageReport> stages;
  ConstraintDiagnostics diagnostics;
  double initial_data_term = 0.0;  // finest level, no blur, identity deformation
  double final_data_term = 0.0;
  double prealign_seconds = 0.0;
  double total_seconds = 0.0;
  bool failed = false;
  std::string failure;
};

/// Restricts a (0,1]-valued mask alongside the images.
inline std::optional<ScalarField2D> restrict_mask(const std::optional<ScalarField2D>& m, int n) {
  if (!m) return std::nullopt;
  return restrict_to_level(*m, n);
}

inline RegistrationReport register_images(const ScalarField3D& u3d, const ScalarField2D& u2d, const PipelineConfig& cfg,
                                          const std::optional<ScalarField2D>& mask = std::nullopt) {
  using clock = std::chrono::steady_clock;
  auto seconds_since = [](clock::time_point t) { return std::chrono::duration<double>(clock::now() - t).count(); };
  cfg.validate();
  const auto t_start = clock::now();
  const Grid<3> finest = u3d.grid();
  if (!(u2d.grid() == finest.plane())) throw std::invalid_argument("2D image grid does not match the volume's plane");
  const int N = finest.level();
  const double h = finest.spacing(0);

  RegistrationReport rep;
  rep.volume = u3d;
  if (cfg.prealign) {
    const auto t0 = clock::now();
    const auto rr = rigid_prealign(u3d, u2d, cfg.kernel, cfg.energy, cfg.rigid);
    rep.rigid = rr.params;
    rep.volume = compose_nodes(u3d, rigid_deformation(rr.params, finest));
    rep.prealign_seconds = seconds_since(t0);
  }

  const RegistrationEnergy fine_energy(rep.volume, u2d, cfg.kernel.build(finest), cfg.energy, mask);
  Deformation y = identity_deformation(finest);
  rep.initial_data_term = fine_energy.data_term(y);

  for (double factor : cfg.blur_schedule) {
    const double s = factor * h;
    const ScalarField3D vol_s = gaussian_blur(rep.volume, s);
    const ScalarField2D img_s = gaussian_blur(u2d, s);
    const int n0 = start_level(s, h, N, cfg.min_level);
    Deformation yl = restrict_deformation(y, n0);
    for (int n = n0; n <= N; ++n) {
      const auto t0 = clock::now();
      const auto v = restrict_to_level(vol_s, n);
      const RegistrationEnergy E(v, restrict_to_level(img_s, n), cfg.kernel.build(v.grid()), cfg.energy,
                                 restrict_mask(mask, n));
      StageReport st;
      st.blur = s;
      st.level = n;
      st.initial_data_term = E.data_term(yl);
      const auto res = minimize(E, yl.values(), cfg.solver);
      st.iterations = res.iterations;
      st.status = res.status;
      for (const auto& r : res.trace) st.energy_trace.push_back(r.energy);
      if (res.status == SolverStatus::not_admissible) {
        rep.failed = true;
        rep.failure = "stage (blur " + std::to_string(s) + ", level " + std::to_string(n) + "): " + res.message;
      } else {
        yl = Deformation(yl.grid(), res.y);
      }
      st.final_data_term = E.data_term(yl);
      st.diagnostics = constraint_diagnostics(yl);
      st.seconds = seconds_since(t0);
      spdlog::info("blur {:.4g} level {}: J {:.6e} -> {:.6e}, {} iterations ({}), min det {:.4f}, {:.2f}s", s, n,
                   st.initial_data_term, st.final_data_term, st.iterations, to_string(st.status),
                   st.diagnostics.min_det, st.seconds);
      rep.stages.push_back(std::move(st));
      if (res.status == SolverStatus::line_search_failed)
        spdlog::warn("line search stalled at blur {:.4g}, level {}: {}", s, n, res.message);
      if (rep.failed) break;
      if (n < N) yl = prolong_field(yl, finest);
    }
    if (yl.grid() == finest) y = yl;
    if (rep.failed) break;
  }

  rep.deformation = y;
  rep.final_data_term = fine_energy.data_term(y);
  rep.diagnostics = constraint_diagnostics(y);
  rep.total_seconds = seconds_since(t_start);
  return rep;
}

// ---------------------------------------------------------------------------
// Energy landscapes

using DeformationFamily = std::function<Deformation(double, const Grid<3>&)>;

/// x -> x + t e_axis.
inline DeformationFamily translation_family(int axis) {
  if (axis < 0 || axis > 2) throw std::invalid_argument("axis must be 0, 1 or 2");
  return [axis](double t, const Grid<3>& g) {
    Deformation y = identity_deformation(g);
    for (std::size_t n = 0; n < g.node_count(); ++n) y.at(n, axis) += t;
    return y;
  };
}

struct SweepOptions {
  double blur = 0.0;  // absolute in-plane Gaussian scale
  int level = -1;     // -1: finest
};

/// Data term J along a one-parameter family of deformations.
inline std::vector<std::pair<double, double>> energy_sweep_1d(const ScalarField3D& u3d, const ScalarField2D& u2d,
                                                              const KernelSpec& kernel, const EnergyConfig& cfg,
                                                              const DeformationFamily& family,
                                                              const std::vector<double>& samples,
                                                              const SweepOptions& opt = {}) {
  const int N = u3d.grid().level();
  const int n = opt.level < 0 ? N : std::clamp(opt.level, 1, N);
  const auto v = restrict_to_level(gaussian_blur(u3d, opt.blur), n);
  const auto f = restrict_to_level(gaussian_blur(u2d, opt.blur), n);
  const RegistrationEnergy E(v, f, kernel.build(v.grid()), cfg);
  std::vector<std::pair<double, double>> out;
  out.reserve(samples.size());
  for (double t : samples) out.emplace_back(t, E.data_term(family(t, v.grid())));
  return out;
}

/// Strict interior local minima of a sampled curve (3-point test).
inline int count_local_minima(const std::vector<std::pair<double, double>>& curve) {
  int c = 0;
  for (std::size_t i = 1; i + 1 < curve.size(); ++i)
    if (curve[i].second < curve[i - 1].second && curve[i].second < curve[i + 1].second) ++c;
  return c;
}

}  // namespace dfreg
