#pragma once

// Matrix-free Krylov tools: BiCGStab for (possibly nonsymmetric) solves and a
// Lanczos estimate of the smallest eigenvalue of a symmetric operator.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <functional>
#include <limits>
#include <random>
#include <span>
#include <string>
#include <vector>

#include "dfreg/error.hpp"
#include "dfreg/linalg.hpp"

namespace dfreg {

/// out = A v
using LinearApply = std::function<void(std::span<const double>, std::span<double>)>;

struct BiCGStabResult {
  Vector x;
  int iterations = 0;
  double relative_residual = 0.0;
  // smallest Rayleigh quotient <v,Av>/<v,v> seen on the search vectors p and s
  double min_curvature = std::numeric_limits<double>::infinity();
  int nonpositive_curvature = 0;
};

/// Solves A x = rhs to ||A x - rhs|| <= tol ||rhs||. Throws NumericalFailure
/// (carrying the best iterate) on breakdown or when max_iters is exhausted.
template <class Apply>
BiCGStabResult bicgstab_solve(Apply&& A, std::span<const double> rhs, double tol, int max_iters) {
  const std::size_t n = rhs.size();
  BiCGStabResult res;
  res.x.assign(n, 0.0);
  const double bnorm = norm2(rhs);
  if (bnorm == 0.0) return res;

  Vector r(rhs.begin(), rhs.end()), rhat(r), p(n, 0.0), v(n, 0.0), s(n), t(n);
  Vector best = res.x;
  double best_res = 1.0;
  double rho = 1.0, alpha = 1.0, omega = 1.0;

  auto observe = [&](const Vector& dir, const Vector& Adir) {
    const double dd = dot(dir, dir);
    if (dd == 0.0) return;
    const double c = dot(dir, Adir) / dd;
    res.min_curvature = std::min(res.min_curvature, c);
    if (!(c > 0.0)) ++res.nonpositive_curvature;
  };
  auto fail = [&](const std::string& why) -> BiCGStabResult {
    throw NumericalFailure("BiCGStab " + why, best, best_res);
  };

  for (int it = 1; it <= max_iters; ++it) {
    const double rho_new = dot(rhat, r);
    if (std::abs(rho_new) <= 1e-300 || !std::isfinite(rho_new)) return fail("breakdown (rho ~ 0)");
    if (it == 1) {
      p = r;
    } else {
      const double beta = (rho_new / rho) * (alpha / omega);
      for (std::size_t i = 0; i < n; ++i) p[i] = r[i] + beta * (p[i] - omega * v[i]);
    }
    rho = rho_new;
    A(std::span<const double>(p), std::span<double>(v));
    observe(p, v);
    const double rv = dot(rhat, v);
    if (std::abs(rv) <= 1e-300 || !std::isfinite(rv)) return fail("breakdown (<rhat, Ap> ~ 0)");
    alpha = rho / rv;
    for (std::size_t i = 0; i < n; ++i) s[i] = r[i] - alpha * v[i];
    const double snorm = norm2(s);
    if (snorm <= tol * bnorm) {
      axpy(alpha, p, res.x);
      res.iterations = it;
      res.relative_residual = snorm / bnorm;
      return res;
    }
    A(std::span<const double>(s), std::span<double>(t));
    observe(s, t);
    const double tt = dot(t, t);
    if (tt <= 1e-300) return fail("breakdown (As = 0)");
    omega = dot(t, s) / tt;
    for (std::size_t i = 0; i < n; ++i) {
      res.x[i] += alpha * p[i] + omega * s[i];
      r[i] = s[i] - omega * t[i];
    }
    const double rel = norm2(r) / bnorm;
    if (!std::isfinite(rel)) return fail("produced a non-finite residual");
    if (rel < best_res) {
      best_res = rel;
      best = res.x;
    }
    res.iterations = it;
    res.relative_residual = rel;
    if (rel <= tol) return res;
    if (omega == 0.0) return fail("breakdown (omega = 0)");
  }
  return fail("did not converge in " + std::to_string(max_iters) + " iterations");
}

/// Number of eigenvalues of the symmetric tridiagonal (alpha, beta) below x.
inline int sturm_count(const std::vector<double>& alpha, const std::vector<double>& beta, double x) {
  int count = 0;
  double q = 1.0;
  for (std::size_t i = 0; i < alpha.size(); ++i) {
    const double b2 = i == 0 ? 0.0 : beta[i - 1] * beta[i - 1];
    q = alpha[i] - x - (i == 0 ? 0.0 : b2 / q);
    if (q == 0.0) q = -1e-300;
    if (q < 0.0) ++count;
  }
  return count;
}

/// Smallest eigenvalue of a symmetric tridiagonal matrix by Sturm bisection.
/// beta holds the n-1 off-diagonal entries.
inline double tridiagonal_min_eigenvalue(const std::vector<double>& alpha, const std::vector<double>& beta,
                                         double tol = 1e-13) {
  if (alpha.empty()) throw std::invalid_argument("empty tridiagonal matrix");
  double lo = std::numeric_limits<double>::infinity(), hi = -lo;
  for (std::size_t i = 0; i < alpha.size(); ++i) {
    const double r = (i > 0 ? std::abs(beta[i - 1]) : 0.0) + (i + 1 < alpha.size() ? std::abs(beta[i]) : 0.0);
    lo = std::min(lo, alpha[i] - r);
    hi = std::max(hi, alpha[i] + r);
  }
  const double scale = std::max({std::abs(lo), std::abs(hi), 1.0});
  lo -= 1e-12 * scale;
  while (hi - lo > tol * scale) {
    const double mid = 0.5 * (lo + hi);
    if (mid == lo || mid == hi) break;
    if (sturm_count(alpha, beta, mid) >= 1)
      hi = mid;
    else
      lo = mid;
  }
  return lo;  // never above the true eigenvalue by more than the bracket width
}

struct LanczosResult {
  double theta_min = 0.0;
  int steps = 0;
  bool invariant_subspace = false;
};

/// m steps of Lanczos with full reorthogonalization from a fixed
/// pseudo-random start vector; returns the smallest Ritz value.
template <class Apply>
LanczosResult lanczos_min_eig(Apply&& A, std::size_t dim, int m, std::uint64_t seed = 0x5eed) {
  if (dim == 0) throw std::invalid_argument("lanczos on an empty operator");
  m = static_cast<int>(std::min<std::size_t>(static_cast<std::size_t>(std::max(m, 1)), dim));
  std::mt19937_64 rng(seed);
  std::uniform_real_distribution<double> uni(-1.0, 1.0);
  std::vector<Vector> Q;
  Vector q(dim);
  for (auto& v : q) v = uni(rng);
  scale(1.0 / norm2(q), q);
  std::vector<double> alpha, beta;
  Vector w(dim);
  LanczosResult res;
  double op_scale = 0.0;
  for (int j = 0; j < m; ++j) {
    Q.push_back(q);
    A(std::span<const double>(q), std::span<double>(w));
    const double a = dot(q, w);
    alpha.push_back(a);
    // full reorthogonalization (twice is enough)
    for (int pass = 0; pass < 2; ++pass)
      for (const auto& qi : Q) axpy(-dot(qi, w), qi, w);
    const double b = norm2(w);
    op_scale = std::max({op_scale, std::abs(a), b});
    res.steps = j + 1;
    if (j + 1 == m) break;
    if (b <= 1e-12 * std::max(op_scale, 1e-300)) {
      res.invariant_subspace = true;
      break;
    }
    beta.push_back(b);
    q = w;
    scale(1.0 / b, q);
  }
  beta.resize(alpha.size() - 1);
  res.theta_min = tridiagonal_min_eigenvalue(alpha, beta);
  return res;
}

}  // namespace dfreg
