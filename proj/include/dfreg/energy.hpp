#pragma once

// Registration energy E[y] = J[y] + R[y]: a dissimilarity between the
// projected warped volume and the 2D image, plus a hyperelastic regularizer.
// Gradients are the exact derivatives of the discrete energy; Hessians are
// only ever applied to vectors.

#include <cmath>
#include <limits>
#include <memory>
#include <mutex>
#include <optional>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

#include "dfreg/error.hpp"
#include "dfreg/forward.hpp"
#include "dfreg/grid.hpp"
#include "dfreg/linalg.hpp"

namespace dfreg {

enum class Dissimilarity { l2, l1_regularized };

/// Second-order image information used in the local Hessian block.
///  - weak: the mixed finite-element Hessian of u3D (captures curvature that
///    sits on element faces);
///  - interpolant: the classical second derivatives of the trilinear
///    interpolant, which makes hessian_apply the exact derivative of the
///    discrete gradient.
enum class LocalHessian { weak, interpolant };

struct EnergyConfig {
  Dissimilarity dissimilarity = Dissimilarity::l2;
  double delta = 1e-2;  // only used by l1_regularized
  double c1 = 1e-3;
  double c2 = 2e-3;
  double c3 = 1e-3;
  LocalHessian local_hessian = LocalHessian::weak;

  /// Constant making W vanish on rotations.
  double D() const { return -(3.0 * c1 + c2); }

  void validate() const {
    if (!(c1 >= 0.0 && c2 >= 0.0 && c3 >= 0.0)) throw std::invalid_argument("elastic weights must be nonnegative");
    if (dissimilarity == Dissimilarity::l1_regularized && !(delta > 0.0))
      throw std::invalid_argument("delta must be positive for the regularized L1 distance");
  }
};

struct DissimilarityValue {
  double value;
  double d1;  // derivative in the first argument
  double d2;  // second derivative in the first argument
};

inline DissimilarityValue dissimilarity(double a, double b, const EnergyConfig& cfg) {
  const double t = a - b;
  if (cfg.dissimilarity == Dissimilarity::l2) return {t * t, 2.0 * t, 2.0};
  const double d2 = cfg.delta * cfg.delta;
  const double r = std::sqrt(t * t + d2);
  return {r, t / r, d2 / (r * r * r)};
}

// ---------------------------------------------------------------------------
// Stored energy W(A) = c1 |A|_F^2 + c2 / det A + c3 (1 - det A)^2 + D

struct StoredEnergyPartials {
  double d_I1;    // dW/dI1 with I1 = |A|_F^2
  double d_I3;    // dW/dI3 with I3 = det A
  double d_I3I3;  // d^2W/dI3^2
};

inline StoredEnergyPartials stored_energy_partials(double I3, const EnergyConfig& cfg) {
  return {cfg.c1, -cfg.c2 / (I3 * I3) - 2.0 * cfg.c3 * (1.0 - I3), 2.0 * cfg.c2 / (I3 * I3 * I3) + 2.0 * cfg.c3};
}

inline double stored_energy(const Mat3& A, const EnergyConfig& cfg) {
  const double det = A.det();
  if (det == 0.0) throw SingularConfiguration("stored energy evaluated at a singular deformation gradient");
  return cfg.c1 * A.frobenius_sq() + cfg.c2 / det + cfg.c3 * (1.0 - det) * (1.0 - det) + cfg.D();
}

namespace detail {

struct ElementGeometry {
  std::array<double, 3> inv_h;
  double volume;
};

inline ElementGeometry element_geometry(const Grid<3>& g) {
  return {{1.0 / g.spacing(0), 1.0 / g.spacing(1), 1.0 / g.spacing(2)}, g.element_measure()};
}

/// A(k,m) = d y_k / d x_m at Gauss point q.
inline Mat3 nodal_gradient(std::span<const double> y, const std::array<std::size_t, 8>& corners, int q,
                           const ElementGeometry& geo) {
  const auto& dref = gauss2_shapes<3>().dref[q];
  Mat3 A;
  for (int c = 0; c < 8; ++c) {
    const double* yc = y.data() + 3 * corners[c];
    for (int m = 0; m < 3; ++m) {
      const double d = dref[c][m] * geo.inv_h[m];
      for (int k = 0; k < 3; ++k) A(k, m) += yc[k] * d;
    }
  }
  return A;
}

/// out_c[k] += scale * sum_m G(k,m) dphi_c/dx_m at Gauss point q.
inline void scatter_stress(const Mat3& G, double scale, const std::array<std::size_t, 8>& corners, int q,
                           const ElementGeometry& geo, std::span<double> out) {
  const auto& dref = gauss2_shapes<3>().dref[q];
  for (int c = 0; c < 8; ++c) {
    double* oc = out.data() + 3 * corners[c];
    for (int m = 0; m < 3; ++m) {
      const double d = scale * dref[c][m] * geo.inv_h[m];
      for (int k = 0; k < 3; ++k) oc[k] += G(k, m) * d;
    }
  }
}

}  // namespace detail

/// R[y]: Gauss quadrature of W(grad y). Returns +infinity as soon as any
/// quadrature point has det(grad y) <= 0.
inline double regularizer(std::span<const double> y, const Grid<3>& g, const EnergyConfig& cfg) {
  const auto geo = detail::element_geometry(g);
  const auto& rule = gauss2<3>();
  double sum = 0.0;
  for (std::size_t e = 0; e < g.element_count(); ++e) {
    const auto corners = element_corners(g, e);
    for (int q = 0; q < 8; ++q) {
      const Mat3 A = detail::nodal_gradient(y, corners, q, geo);
      const double det = A.det();
      if (!(det > 0.0)) return std::numeric_limits<double>::infinity();
      sum += rule.weights[q] * stored_energy(A, cfg);
    }
  }
  return geo.volume * sum;
}

inline double regularizer(const Deformation& y, const EnergyConfig& cfg) { return regularizer(y.values(), y.grid(), cfg); }

/// Adds dR/dy to `out`. Returns R (or +infinity, in which case `out` is
/// left partially updated and must not be used).
inline double regularizer_gradient(std::span<const double> y, const Grid<3>& g, const EnergyConfig& cfg,
                                   std::span<double> out) {
  const auto geo = detail::element_geometry(g);
  const auto& rule = gauss2<3>();
  double sum = 0.0;
  for (std::size_t e = 0; e < g.element_count(); ++e) {
    const auto corners = element_corners(g, e);
    for (int q = 0; q < 8; ++q) {
      const Mat3 A = detail::nodal_gradient(y, corners, q, geo);
      const double det = A.det();
      if (!(det > 0.0)) return std::numeric_limits<double>::infinity();
      sum += rule.weights[q] * stored_energy(A, cfg);
      const auto p = stored_energy_partials(det, cfg);
      const Mat3 G = (2.0 * p.d_I1) * A + p.d_I3 * A.cof();
      detail::scatter_stress(G, geo.volume * rule.weights[q], corners, q, geo, out);
    }
  }
  return geo.volume * sum;
}

inline Deformation grad_regularizer(const Deformation& y, const EnergyConfig& cfg) {
  Deformation out(y.grid());
  if (!std::isfinite(regularizer_gradient(y.values(), y.grid(), cfg, out.values())))
    throw SingularConfiguration("regularizer gradient requested where det grad y <= 0");
  return out;
}

/// Adds d^2R[y](., psi) to `out`.
inline void regularizer_hessian_apply(std::span<const double> y, const Grid<3>& g, const EnergyConfig& cfg,
                                      std::span<const double> psi, std::span<double> out) {
  const auto geo = detail::element_geometry(g);
  const auto& rule = gauss2<3>();
  for (std::size_t e = 0; e < g.element_count(); ++e) {
    const auto corners = element_corners(g, e);
    for (int q = 0; q < 8; ++q) {
      const Mat3 A = detail::nodal_gradient(y, corners, q, geo);
      const Mat3 P = detail::nodal_gradient(psi, corners, q, geo);
      const double det = A.det();
      const Mat3 C = A.cof();
      const auto p = stored_energy_partials(det, cfg);
      const double t = frob(P, C);
      // cof(A) P^T cof(A) is the matrix paired with Phi in tr(Phi^T cof P^T cof)
      const Mat3 CPC = C * P.transposed() * C;
      Mat3 G = (2.0 * p.d_I1) * P + (p.d_I3I3 * t) * C;
      G = G + (p.d_I3 / det) * (t * C + (-1.0) * CPC);
      detail::scatter_stress(G, geo.volume * rule.weights[q], corners, q, geo, out);
    }
  }
}

// ---------------------------------------------------------------------------
// Weak (mixed finite-element) Hessian of a nodal volume

/// Nine nodal fields V_ab (row-major a,b) solving
///   M V_ab = int_{dOmega} n_a phi d_b u - int_Omega d_a phi d_b u.
using HessianField = NodalField<3, 9>;

namespace detail {

inline void mass_apply(const Grid<3>& g, std::span<const double> x, std::span<double> out) {
  static const double m1[2][2] = {{1.0 / 3.0, 1.0 / 6.0}, {1.0 / 6.0, 1.0 / 3.0}};
  static const auto Me = [] {
    std::array<std::array<double, 8>, 8> M{};
    for (int c = 0; c < 8; ++c)
      for (int d = 0; d < 8; ++d) {
        double v = 1.0;
        for (int a = 0; a < 3; ++a) v *= m1[(c >> a) & 1][(d >> a) & 1];
        M[c][d] = v;
      }
    return M;
  }();
  const double V = g.element_measure();
  std::fill(out.begin(), out.end(), 0.0);
  for (std::size_t e = 0; e < g.element_count(); ++e) {
    const auto corners = element_corners(g, e);
    double xe[8];
    for (int d = 0; d < 8; ++d) xe[d] = x[corners[d]];
    for (int c = 0; c < 8; ++c) {
      double s = 0.0;
      for (int d = 0; d < 8; ++d) s += Me[c][d] * xe[d];
      out[corners[c]] += V * s;
    }
  }
}

/// Conjugate gradients on the (SPD) mass matrix.
inline std::vector<double> mass_solve(const Grid<3>& g, std::span<const double> b, double tol, int max_iters) {
  const std::size_t n = b.size();
  std::vector<double> x(n, 0.0), r(b.begin(), b.end()), p(r), Ap(n);
  const double bnorm = norm2(b);
  if (bnorm == 0.0) return x;
  double rr = dot(r, r);
  for (int it = 0; it < max_iters; ++it) {
    if (std::sqrt(rr) <= tol * bnorm) return x;
    mass_apply(g, p, Ap);
    const double alpha = rr / dot(p, Ap);
    axpy(alpha, p, x);
    axpy(-alpha, Ap, r);
    const double rr_new = dot(r, r);
    const double beta = rr_new / rr;
    rr = rr_new;
    for (std::size_t i = 0; i < n; ++i) p[i] = r[i] + beta * p[i];
  }
  if (std::sqrt(rr) <= tol * bnorm) return x;
  throw NumericalFailure("mass-matrix CG did not converge, relative residual " + std::to_string(std::sqrt(rr) / bnorm),
                         x, std::sqrt(rr) / bnorm);
}

}  // namespace detail

inline HessianField weak_hessian(const ScalarField3D& u, double tol = 1e-10, int max_iters = 1000) {
  const Grid<3>& g = u.grid();
  for (int a = 0; a < 3; ++a)
    if (g.nodes(a) < 3) throw std::invalid_argument("weak_hessian needs at least 3 nodes per axis");
  const auto geo = detail::element_geometry(g);
  const auto& rule = gauss2<3>();
  const auto& shapes = gauss2_shapes<3>();
  const std::size_t N = g.node_count();
  std::vector<std::vector<double>> rhs(9, std::vector<double>(N, 0.0));

  auto grad_u = [&](const std::array<std::size_t, 8>& corners, const std::array<std::array<double, 3>, 8>& dref) {
    std::array<double, 3> gu{};
    for (int c = 0; c < 8; ++c)
      for (int m = 0; m < 3; ++m) gu[m] += u[corners[c]] * dref[c][m] * geo.inv_h[m];
    return gu;
  };

  for (std::size_t e = 0; e < g.element_count(); ++e) {
    const auto corners = element_corners(g, e);
    for (int q = 0; q < 8; ++q) {
      const auto gu = grad_u(corners, shapes.dref[q]);
      for (int c = 0; c < 8; ++c)
        for (int a = 0; a < 3; ++a) {
          const double dphi = shapes.dref[q][c][a] * geo.inv_h[a] * geo.volume * rule.weights[q];
          for (int b = 0; b < 3; ++b) rhs[3 * a + b][corners[c]] -= dphi * gu[b];
        }
    }
  }

  // boundary faces: n_a = -1 on x_a = 0, +1 on x_a = L_a
  const double gp[2] = {0.5 - 0.5 / std::sqrt(3.0), 0.5 + 0.5 / std::sqrt(3.0)};
  const int ex = g.nodes(0) - 1, ey = g.nodes(1) - 1, ez = g.nodes(2) - 1;
  for (std::size_t e = 0; e < g.element_count(); ++e) {
    const int ei[3] = {static_cast<int>(e % ex), static_cast<int>((e / ex) % ey),
                       static_cast<int>(e / (static_cast<std::size_t>(ex) * ey))};
    const int emax[3] = {ex - 1, ey - 1, ez - 1};
    const auto corners = element_corners(g, e);
    for (int a = 0; a < 3; ++a)
      for (int side = 0; side < 2; ++side) {
        if (ei[a] != (side ? emax[a] : 0)) continue;
        const double normal = side ? 1.0 : -1.0;
        const int b1 = (a + 1) % 3, b2 = (a + 2) % 3;
        const double area = g.spacing(b1) * g.spacing(b2);
        for (int q1 = 0; q1 < 2; ++q1)
          for (int q2 = 0; q2 < 2; ++q2) {
            std::array<double, 3> xi;
            xi[a] = side;
            xi[b1] = gp[q1];
            xi[b2] = gp[q2];
            std::array<double, 8> phi;
            std::array<std::array<double, 3>, 8> dref;
            for (int c = 0; c < 8; ++c) {
              double v = 1.0;
              for (int d = 0; d < 3; ++d) v *= ((c >> d) & 1) ? xi[d] : 1.0 - xi[d];
              phi[c] = v;
              for (int d = 0; d < 3; ++d) {
                double gdv = ((c >> d) & 1) ? 1.0 : -1.0;
                for (int f = 0; f < 3; ++f)
                  if (f != d) gdv *= ((c >> f) & 1) ? xi[f] : 1.0 - xi[f];
                dref[c][d] = gdv;
              }
            }
            const auto gu = grad_u(corners, dref);
            for (int c = 0; c < 8; ++c) {
              if (phi[c] == 0.0) continue;
              const double w = normal * area * 0.25 * phi[c];
              for (int b = 0; b < 3; ++b) rhs[3 * a + b][corners[c]] += w * gu[b];
            }
          }
      }
  }

  HessianField V(g);
  for (int ab = 0; ab < 9; ++ab) {
    const auto sol = detail::mass_solve(g, rhs[ab], tol, max_iters);
    for (std::size_t n = 0; n < N; ++n) V.at(n, ab) = sol[n];
  }
  return V;
}

// ---------------------------------------------------------------------------
// Full energy

class RegistrationEnergy;

/// Matrix-free second derivative of E at a fixed deformation.
class HessianOperator {
 public:
  std::size_t dim() const { return y_.size(); }
  bool drops_local() const { return drop_local_; }

  /// (H^L + H^NL + d^2R) psi, or (H^NL + d^2R) psi when the local data block is dropped.
  void apply(std::span<const double> psi, std::span<double> out) const {
    apply_nonlocal(psi, out);
    if (!drop_local_) add_data_local(psi, out);
    regularizer_hessian_apply(y_, grid_, cfg_, psi, out);
  }

  /// (H^L + d^2R) psi: the assembled, sparse part.
  void apply_local(std::span<const double> psi, std::span<double> out) const {
    std::fill(out.begin(), out.end(), 0.0);
    add_data_local(psi, out);
    regularizer_hessian_apply(y_, grid_, cfg_, psi, out);
  }

  /// H^NL psi = G F^T M_w F G^T psi with G the warped image gradients.
  void apply_nonlocal(std::span<const double> psi, std::span<double> out) const {
    const std::size_t N = grid_.node_count();
    std::vector<double> s(N), p(grid_.plane().node_count()), r(N);
    for (std::size_t i = 0; i < N; ++i)
      s[i] = psi[3 * i] * grad_u_[3 * i] + psi[3 * i + 1] * grad_u_[3 * i + 1] + psi[3 * i + 2] * grad_u_[3 * i + 2];
    fwd_->project(s, p);
    std::vector<double> w(p.size(), 0.0);
    const Grid<2> g2 = grid_.plane();
    const auto& shapes = gauss2_shapes<2>();
    for (std::size_t e = 0; e < g2.element_count(); ++e) {
      const auto corners = element_corners(g2, e);
      for (int q = 0; q < 4; ++q) {
        double pq = 0.0;
        for (int c = 0; c < 4; ++c) pq += shapes.value[q][c] * p[corners[c]];
        const double t = curvature_weight_[e * 4 + q] * pq;
        for (int c = 0; c < 4; ++c) w[corners[c]] += t * shapes.value[q][c];
      }
    }
    fwd_->adjoint(w, r);
    for (std::size_t i = 0; i < N; ++i)
      for (int k = 0; k < 3; ++k) out[3 * i + k] = r[i] * grad_u_[3 * i + k];
  }

  /// Adds H^L psi (3x3 block per node).
  void add_data_local(std::span<const double> psi, std::span<double> out) const {
    const std::size_t N = grid_.node_count();
    for (std::size_t i = 0; i < N; ++i) {
      const double* b = local_.data() + 6 * i;  // xx yy zz xy xz yz
      const double* v = psi.data() + 3 * i;
      out[3 * i + 0] += b[0] * v[0] + b[3] * v[1] + b[4] * v[2];
      out[3 * i + 1] += b[3] * v[0] + b[1] * v[1] + b[5] * v[2];
      out[3 * i + 2] += b[4] * v[0] + b[5] * v[1] + b[2] * v[2];
    }
  }

  void apply_regularizer(std::span<const double> psi, std::span<double> out) const {
    std::fill(out.begin(), out.end(), 0.0);
    regularizer_hessian_apply(y_, grid_, cfg_, psi, out);
  }

 private:
  friend class RegistrationEnergy;
  Grid<3> grid_;
  EnergyConfig cfg_;
  std::shared_ptr<const ForwardOperator> fwd_;
  std::vector<double> y_;
  std::vector<double> grad_u_;            // 3 per node: (grad u3D)(y_i)
  std::vector<double> local_;             // 6 per node
  std::vector<double> curvature_weight_;  // per 2D Gauss point: A w m d''
  bool drop_local_ = false;
};

class RegistrationEnergy {
 public:
  RegistrationEnergy(ScalarField3D u3d, ScalarField2D u2d, const BlurKernel& kernel, EnergyConfig cfg,
                     std::optional<ScalarField2D> mask = std::nullopt)
      : u3d_(std::move(u3d)),
        u2d_(std::move(u2d)),
        cfg_(cfg),
        fwd_(std::make_shared<ForwardOperator>(kernel)),
        weak_(std::make_shared<LazyWeakHessian>()) {
    cfg_.validate();
    fwd_->check_grid(u3d_.grid());
    const Grid<2> g2 = u3d_.grid().plane();
    if (!(u2d_.grid() == g2)) throw std::invalid_argument("2D image grid does not match the volume's plane grid");
    if (mask && !(mask->grid() == g2)) throw std::invalid_argument("mask grid does not match the 2D image grid");
    if (mask)
      for (double m : mask->values())
        if (!(m > 0.0 && m <= 1.0)) throw std::invalid_argument("mask values must lie in (0,1]");

    const auto& shapes = gauss2_shapes<2>();
    const auto& rule = gauss2<2>();
    const double area = g2.element_measure();
    target_q_.resize(g2.element_count() * 4);
    weight_q_.resize(g2.element_count() * 4);
    for (std::size_t e = 0; e < g2.element_count(); ++e) {
      const auto corners = element_corners(g2, e);
      for (int q = 0; q < 4; ++q) {
        double b = 0.0, m = 0.0;
        for (int c = 0; c < 4; ++c) {
          b += shapes.value[q][c] * u2d_[corners[c]];
          m += shapes.value[q][c] * (mask ? (*mask)[corners[c]] : 1.0);
        }
        target_q_[e * 4 + q] = b;
        weight_q_[e * 4 + q] = area * rule.weights[q] * (mask ? m : 1.0);
      }
    }
  }

  const Grid<3>& grid() const { return u3d_.grid(); }
  const EnergyConfig& config() const { return cfg_; }
  const ForwardOperator& forward() const { return *fwd_; }
  const ScalarField3D& volume() const { return u3d_; }
  const ScalarField2D& image() const { return u2d_; }
  std::size_t dof() const { return 3 * grid().node_count(); }

  /// F(u3D o y) as a nodal 2D field.
  ScalarField2D projected(std::span<const double> y) const {
    ScalarField2D out(grid().plane());
    const auto U = warped(y);
    fwd_->project(U, out.values());
    return out;
  }

  double data_term(std::span<const double> y) const {
    check_size(y);
    const auto U = warped(y);
    std::vector<double> P(grid().plane().node_count());
    fwd_->project(U, P);
    return data_from_projection(P, nullptr);
  }

  double regularizer(std::span<const double> y) const {
    check_size(y);
    return dfreg::regularizer(y, grid(), cfg_);
  }

  double value(std::span<const double> y) const {
    const double R = regularizer(y);
    if (!std::isfinite(R)) return R;
    return data_term(y) + R;
  }

  /// Writes dJ/dy into `grad`.
  double data_gradient(std::span<const double> y, std::span<double> grad) const {
    check_size(y);
    const std::size_t N = grid().node_count();
    std::vector<double> U(N), gu(3 * N);
    for (std::size_t i = 0; i < N; ++i) {
      const auto s = sample_trilinear(u3d_, y.subspan(3 * i, 3));
      U[i] = s.value;
      for (int k = 0; k < 3; ++k) gu[3 * i + k] = s.grad[k];
    }
    std::vector<double> P(grid().plane().node_count()), g2(P.size()), a3(N);
    fwd_->project(U, P);
    const double J = data_from_projection(P, &g2);
    fwd_->adjoint(g2, a3);
    for (std::size_t i = 0; i < N; ++i)
      for (int k = 0; k < 3; ++k) grad[3 * i + k] = a3[i] * gu[3 * i + k];
    return J;
  }

  /// Writes dE/dy into `grad` and returns E (+infinity if det grad y <= 0 somewhere).
  double value_and_gradient(std::span<const double> y, std::span<double> grad) const {
    const double J = data_gradient(y, grad);
    const double R = regularizer_gradient(y, grid(), cfg_, grad);
    return J + R;
  }

  Deformation grad_data_term(const Deformation& y) const {
    Deformation g(y.grid());
    data_gradient(y.values(), g.values());
    return g;
  }

  HessianOperator hessian(std::span<const double> y, bool drop_local = false) const {
    check_size(y);
    HessianOperator H;
    H.grid_ = grid();
    H.cfg_ = cfg_;
    H.fwd_ = fwd_;
    H.y_.assign(y.begin(), y.end());
    H.drop_local_ = drop_local;
    const std::size_t N = grid().node_count();
    std::vector<double> U(N), mixed(3 * N);
    H.grad_u_.resize(3 * N);
    for (std::size_t i = 0; i < N; ++i) {
      const auto s = sample_trilinear(u3d_, y.subspan(3 * i, 3));
      U[i] = s.value;
      for (int k = 0; k < 3; ++k) {
        H.grad_u_[3 * i + k] = s.grad[k];
        mixed[3 * i + k] = s.mixed[k];
      }
    }
    std::vector<double> P(grid().plane().node_count()), g2(P.size()), a3(N);
    fwd_->project(U, P);
    data_from_projection(P, &g2, &H.curvature_weight_);
    fwd_->adjoint(g2, a3);

    H.local_.assign(6 * N, 0.0);
    if (cfg_.local_hessian == LocalHessian::interpolant) {
      for (std::size_t i = 0; i < N; ++i) {
        H.local_[6 * i + 3] = a3[i] * mixed[3 * i + 0];
        H.local_[6 * i + 4] = a3[i] * mixed[3 * i + 1];
        H.local_[6 * i + 5] = a3[i] * mixed[3 * i + 2];
      }
    } else {
      const auto& V = weak_hessian_field();
      static constexpr int pairs[6][2] = {{0, 0}, {1, 1}, {2, 2}, {0, 1}, {0, 2}, {1, 2}};
      for (std::size_t i = 0; i < N; ++i) {
        if (a3[i] == 0.0) continue;
        std::array<int, 3> cell;
        std::array<double, 3> t;
        if (!detail::locate(V.grid(), y.subspan(3 * i, 3), cell, t)) continue;
        for (int c = 0; c < 8; ++c) {
          double w = 1.0;
          for (int a = 0; a < 3; ++a) w *= ((c >> a) & 1) ? t[a] : 1.0 - t[a];
          const std::size_t n = V.grid().index(cell[0] + (c & 1), cell[1] + ((c >> 1) & 1), cell[2] + ((c >> 2) & 1));
          for (int p = 0; p < 6; ++p) {
            const int a = pairs[p][0], b = pairs[p][1];
            const double sym = 0.5 * (V.at(n, 3 * a + b) + V.at(n, 3 * b + a));
            H.local_[6 * i + p] += a3[i] * w * sym;
          }
        }
      }
    }
    return H;
  }

  /// Weak Hessian of the volume, computed on first use and shared between copies.
  const HessianField& weak_hessian_field() const {
    std::call_once(weak_->once, [&] { weak_->field = weak_hessian(u3d_); });
    return weak_->field;
  }

  // Deformation-typed conveniences.
  double data_term(const Deformation& y) const { return data_term(y.values()); }
  double value(const Deformation& y) const { return value(y.values()); }
  ScalarField2D projected(const Deformation& y) const { return projected(y.values()); }

 private:
  struct LazyWeakHessian {
    std::once_flag once;
    HessianField field;
  };

  void check_size(std::span<const double> y) const {
    if (y.size() != dof()) throw std::invalid_argument("deformation does not live on the energy's grid");
  }

  std::vector<double> warped(std::span<const double> y) const {
    const std::size_t N = grid().node_count();
    std::vector<double> U(N);
    for (std::size_t i = 0; i < N; ++i) U[i] = evaluate(u3d_, y.subspan(3 * i, 3));
    return U;
  }

  // J from nodal projection P; optionally dJ/dP (nodal) and the per-point
  // curvature weights A w m d''.
  double data_from_projection(std::span<const double> P, std::vector<double>* dJdP,
                              std::vector<double>* curvature = nullptr) const {
    const Grid<2> g2 = grid().plane();
    const auto& shapes = gauss2_shapes<2>();
    if (dJdP) dJdP->assign(P.size(), 0.0);
    if (curvature) curvature->assign(weight_q_.size(), 0.0);
    double J = 0.0;
    for (std::size_t e = 0; e < g2.element_count(); ++e) {
      const auto corners = element_corners(g2, e);
      for (int q = 0; q < 4; ++q) {
        const std::size_t iq = e * 4 + q;
        double pq = 0.0;
        for (int c = 0; c < 4; ++c) pq += shapes.value[q][c] * P[corners[c]];
        const auto d = dissimilarity(pq, target_q_[iq], cfg_);
        J += weight_q_[iq] * d.value;
        if (dJdP)
          for (int c = 0; c < 4; ++c) (*dJdP)[corners[c]] += weight_q_[iq] * d.d1 * shapes.value[q][c];
        if (curvature) (*curvature)[iq] = weight_q_[iq] * d.d2;
      }
    }
    return J;
  }

  ScalarField3D u3d_;
  ScalarField2D u2d_;
  EnergyConfig cfg_;
  std::shared_ptr<const ForwardOperator> fwd_;
  std::shared_ptr<LazyWeakHessian> weak_;
  std::vector<double> target_q_;
  std::vector<double> weight_q_;
};

}  // namespace dfreg
