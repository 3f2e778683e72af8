#pragma once

// Rigid motion plus axis scaling, fitted to the data term coarse-to-fine.
//   y(x) = R3(gamma) R2(beta) R1(alpha) diag(s) (x - c) + c + t
// with c the center of the volume box.

#include <array>
#include <cmath>
#include <numbers>
#include <span>
#include <vector>

#include <spdlog/spdlog.h>

#include "dfreg/energy.hpp"
#include "dfreg/forward.hpp"
#include "dfreg/grid.hpp"
#include "dfreg/linalg.hpp"
#include "dfreg/solvers.hpp"

namespace dfreg {

struct RigidParams {
  std::array<double, 3> t{0.0, 0.0, 0.0};
  std::array<double, 3> s{1.0, 1.0, 1.0};
  std::array<double, 3> angles{0.0, 0.0, 0.0};  // alpha, beta, gamma

  static RigidParams from_vector(std::span<const double> p) {
    RigidParams r;
    for (int i = 0; i < 3; ++i) {
      r.t[i] = p[i];
      r.s[i] = p[3 + i];
      r.angles[i] = p[6 + i];
    }
    return r;
  }
  std::array<double, 9> to_vector() const {
    return {t[0], t[1], t[2], s[0], s[1], s[2], angles[0], angles[1], angles[2]};
  }
};

namespace detail {

inline Mat3 rot1(double a) {
  Mat3 m = Mat3::identity();
  m(1, 1) = std::cos(a), m(1, 2) = -std::sin(a), m(2, 1) = std::sin(a), m(2, 2) = std::cos(a);
  return m;
}
inline Mat3 rot2(double a) {
  Mat3 m = Mat3::identity();
  m(0, 0) = std::cos(a), m(0, 2) = std::sin(a), m(2, 0) = -std::sin(a), m(2, 2) = std::cos(a);
  return m;
}
inline Mat3 rot3(double a) {
  Mat3 m = Mat3::identity();
  m(0, 0) = std::cos(a), m(0, 1) = -std::sin(a), m(1, 0) = std::sin(a), m(1, 1) = std::cos(a);
  return m;
}
// derivative of a rotation about axis `ax` by angle a
inline Mat3 drot(int ax, double a) {
  Mat3 m;
  const double c = std::cos(a), s = std::sin(a);
  const int i = (ax + 1) % 3, j = (ax + 2) % 3;
  // each rotation acts on the cyclic (i,j) plane as [[c,-s],[s,c]]
  m(i, i) = -s, m(j, j) = -s;
  m(i, j) = -c, m(j, i) = c;
  return m;
}

inline std::array<double, 3> box_center(const Grid<3>& g) {
  return {0.5 * g.extent(0), 0.5 * g.extent(1), 0.5 * g.extent(2)};
}

}  // namespace detail

inline Mat3 rotation(const RigidParams& p) {
  return detail::rot3(p.angles[2]) * detail::rot2(p.angles[1]) * detail::rot1(p.angles[0]);
}

/// Nodal samples of the rigid-plus-scaling map on grid g.
inline Deformation rigid_deformation(const RigidParams& p, const Grid<3>& g) {
  const Mat3 A = rotation(p) * Mat3::diag(p.s[0], p.s[1], p.s[2]);
  const auto c = detail::box_center(g);
  Deformation y(g);
  for (int k = 0; k < g.nodes(2); ++k)
    for (int j = 0; j < g.nodes(1); ++j)
      for (int i = 0; i < g.nodes(0); ++i) {
        const std::size_t n = g.index(i, j, k);
        const auto x = g.position({i, j, k});
        const auto r = A * std::array<double, 3>{x[0] - c[0], x[1] - c[1], x[2] - c[2]};
        for (int a = 0; a < 3; ++a) y.at(n, a) = r[a] + c[a] + p.t[a];
      }
  return y;
}

/// Data term as a function of the nine parameters (t, s, angles).
class RigidObjective {
 public:
  explicit RigidObjective(const RegistrationEnergy& energy) : energy_(energy) {}

  double value(std::span<const double> p) const {
    if (p[3] <= 0.0 || p[4] <= 0.0 || p[5] <= 0.0) return std::numeric_limits<double>::infinity();
    return energy_.data_term(rigid_deformation(RigidParams::from_vector(p), energy_.grid()).values());
  }

  double value_and_gradient(std::span<const double> p, std::span<double> grad) const {
    if (p[3] <= 0.0 || p[4] <= 0.0 || p[5] <= 0.0) return std::numeric_limits<double>::infinity();
    const auto rp = RigidParams::from_vector(p);
    const Grid<3>& g = energy_.grid();
    const Deformation y = rigid_deformation(rp, g);
    std::vector<double> gy(y.size());
    const double J = energy_.data_gradient(y.values(), gy);

    const Mat3 R1 = detail::rot1(rp.angles[0]), R2 = detail::rot2(rp.angles[1]), R3 = detail::rot3(rp.angles[2]);
    const Mat3 R = R3 * R2 * R1;
    const Mat3 S = Mat3::diag(rp.s[0], rp.s[1], rp.s[2]);
    const Mat3 dA[3] = {R3 * R2 * detail::drot(0, rp.angles[0]) * S, R3 * detail::drot(1, rp.angles[1]) * R1 * S,
                        detail::drot(2, rp.angles[2]) * R2 * R1 * S};
    const auto c = detail::box_center(g);
    std::fill(grad.begin(), grad.begin() + 9, 0.0);
    for (int k = 0; k < g.nodes(2); ++k)
      for (int j = 0; j < g.nodes(1); ++j)
        for (int i = 0; i < g.nodes(0); ++i) {
          const std::size_t n = g.index(i, j, k);
          const double* gn = gy.data() + 3 * n;
          if (gn[0] == 0.0 && gn[1] == 0.0 && gn[2] == 0.0) continue;
          const auto x = g.position({i, j, k});
          const std::array<double, 3> d{x[0] - c[0], x[1] - c[1], x[2] - c[2]};
          for (int a = 0; a < 3; ++a) grad[a] += gn[a];
          for (int m = 0; m < 3; ++m)  // d y / d s_m = R e_m d_m
            grad[3 + m] += (gn[0] * R(0, m) + gn[1] * R(1, m) + gn[2] * R(2, m)) * d[m];
          for (int r = 0; r < 3; ++r) {
            const auto v = dA[r] * d;
            grad[6 + r] += gn[0] * v[0] + gn[1] * v[1] + gn[2] * v[2];
          }
        }
    return J;
  }

 private:
  const RegistrationEnergy& energy_;
};

struct RigidConfig {
  int min_level = 3;
  SolverConfig solver = [] {
    SolverConfig s;
    s.method = Method::bfgs;
    s.max_iters = 150;
    s.grad_rtol = 1e-6;
    s.first_step = 0.05;
    return s;
  }();
};

struct RigidResult {
  RigidParams params;
  std::vector<double> level_energy;  // final data term per visited level
  std::vector<int> levels;
  bool clamped = false;
};

/// Fits the rigid-plus-scaling parameters level by level, each level
/// starting from the previous optimum.
inline RigidResult rigid_prealign(const ScalarField3D& u3d, const ScalarField2D& u2d, const KernelSpec& kernel,
                                  const EnergyConfig& ecfg, const RigidConfig& rcfg = {},
                                  RigidParams start = {}) {
  const int N = u3d.grid().level();
  const int first = std::clamp(rcfg.min_level, 1, N);
  RigidResult out;
  std::array<double, 9> p = start.to_vector();
  for (int n = first; n <= N; ++n) {
    const auto v = restrict_to_level(u3d, n);
    const auto f = restrict_to_level(u2d, n);
    const RegistrationEnergy E(v, f, kernel.build(v.grid()), ecfg);
    const RigidObjective obj(E);
    const auto res = bfgs_minimize(obj, p, rcfg.solver);
    std::copy(res.y.begin(), res.y.end(), p.begin());
    out.level_energy.push_back(res.energy);
    out.levels.push_back(n);
    spdlog::info("prealign level {}: J = {:.6e} after {} iterations ({})", n, res.energy, res.iterations,
                 to_string(res.status));
  }
  for (int i = 3; i < 6; ++i)
    if (p[i] <= 1e-3) {
      p[i] = 1e-3;
      out.clamped = true;
    }
  if (out.clamped) spdlog::warn("prealign: degenerate scaling clamped to 1e-3");
  out.params = RigidParams::from_vector(p);
  for (double& a : out.params.angles) {
    a = std::fmod(a, 2.0 * std::numbers::pi);
    if (a < 0.0) a += 2.0 * std::numbers::pi;
  }
  return out;
}

}  // namespace dfreg
