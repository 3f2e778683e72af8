#pragma once

// Unconstrained minimizers over flat parameter vectors: nonlinear CG with
// Polak-Ribiere updates, limited-memory BFGS and a shifted Newton method.
// Objectives report +infinity for inadmissible points (det grad y <= 0);
// the Armijo search treats those as rejected steps.

#include <cmath>
#include <concepts>
#include <deque>
#include <functional>
#include <limits>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

#include <spdlog/spdlog.h>

#include "dfreg/error.hpp"
#include "dfreg/krylov.hpp"
#include "dfreg/linalg.hpp"

namespace dfreg {

template <class F>
concept Objective = requires(const F& f, std::span<const double> y, std::span<double> g) {
  { f.value(y) } -> std::convertible_to<double>;
  { f.value_and_gradient(y, g) } -> std::convertible_to<double>;
};

/// Objectives that can hand out a Hessian operator with apply() (full
/// second derivative, or the approximation selected by drop_local) and
/// apply_local() (the part whose lowest eigenvalue sets the Newton shift).
template <class F>
concept SecondOrderObjective = Objective<F> && requires(const F& f, std::span<const double> y,
                                                        std::span<const double> v, std::span<double> out) {
  f.hessian(y, true).apply(v, out);
  f.hessian(y, true).apply_local(v, out);
};

/// Objective assembled from callables; handy for small problems and tests.
struct FunctionObjective {
  std::function<double(std::span<const double>)> f;
  std::function<void(std::span<const double>, std::span<double>)> grad;

  double value(std::span<const double> y) const { return f(y); }
  double value_and_gradient(std::span<const double> y, std::span<double> g) const {
    const double v = f(y);
    if (std::isfinite(v)) grad(y, g);
    return v;
  }
};

enum class Method { ncg_pr, bfgs, newton_shifted };

struct ArmijoConfig {
  double initial = 1.0;
  double shrink = 0.5;
  double slope = 1e-4;
  int max_shrinks = 60;
};

struct BiCGStabConfig {
  int max_iters = 200;
  double rel_tol = 1e-6;
};

struct SolverConfig {
  Method method = Method::ncg_pr;
  int max_iters = 200;
  double grad_tol = 0.0;    // absolute ||g||_inf threshold
  double grad_rtol = 1e-6;  // relative to ||g0||_inf
  double energy_rtol = 1e-9;
  int energy_window = 3;
  // the first trial step of a run (and of a steepest-descent restart) moves
  // the largest entry by this much; later steps are scaled from history
  double first_step = 0.1;
  ArmijoConfig armijo;
  BiCGStabConfig bicgstab;
  int lanczos_steps = 20;
  bool drop_hl = false;
  int lbfgs_history = 10;

  void validate() const {
    if (!(armijo.shrink > 0.0 && armijo.shrink < 1.0)) throw std::invalid_argument("Armijo shrink factor must lie in (0,1)");
    if (!(armijo.slope > 0.0 && armijo.slope <= 0.5)) throw std::invalid_argument("Armijo slope must lie in (0,0.5]");
    if (!(armijo.initial > 0.0) || armijo.max_shrinks < 0) throw std::invalid_argument("invalid Armijo initial step");
    if (grad_tol < 0.0 || !(grad_rtol >= 0.0) || !(energy_rtol >= 0.0))
      throw std::invalid_argument("tolerances must be nonnegative");
    if (!(bicgstab.rel_tol > 0.0) || bicgstab.max_iters < 1) throw std::invalid_argument("invalid BiCGStab settings");
    if (lanczos_steps < 1 || lbfgs_history < 1 || max_iters < 0 || energy_window < 1 || !(first_step > 0.0))
      throw std::invalid_argument("invalid solver settings");
  }
};

enum class SolverStatus { converged_gradient, converged_energy, max_iterations, line_search_failed, not_admissible };

inline const char* to_string(SolverStatus s) {
  switch (s) {
    case SolverStatus::converged_gradient: return "converged_gradient";
    case SolverStatus::converged_energy: return "converged_energy";
    case SolverStatus::max_iterations: return "max_iterations";
    case SolverStatus::line_search_failed: return "line_search_failed";
    case SolverStatus::not_admissible: return "not_admissible";
  }
  return "unknown";
}

inline const char* to_string(Method m) {
  switch (m) {
    case Method::ncg_pr: return "ncg_pr";
    case Method::bfgs: return "bfgs";
    case Method::newton_shifted: return "newton_shifted";
  }
  return "unknown";
}

struct IterationRecord {
  int iteration = 0;
  double energy = 0.0;
  double grad_inf = 0.0;
  double step = 0.0;
  double shift = 0.0;      // Newton lambda
  double theta_min = 0.0;  // Newton Lanczos estimate
  int inner_iterations = 0;
  bool gradient_fallback = false;
};

struct SolverResult {
  Vector y;
  SolverStatus status = SolverStatus::max_iterations;
  int iterations = 0;
  double energy = 0.0;
  double grad_inf = 0.0;
  double initial_energy = 0.0;
  std::vector<IterationRecord> trace;  // entry 0 is the starting point
  // Newton diagnostics
  int linear_solve_failures = 0;
  int nonpositive_curvature = 0;
  double min_curvature = std::numeric_limits<double>::infinity();
  std::string message;

  bool converged() const {
    return status == SolverStatus::converged_gradient || status == SolverStatus::converged_energy;
  }
  /// False only when the run stopped on an error condition.
  bool ok() const { return status != SolverStatus::line_search_failed && status != SolverStatus::not_admissible; }
};

// ---------------------------------------------------------------------------
// Armijo backtracking

struct LineSearchResult {
  double step = 0.0;
  double energy = 0.0;
  int shrinks = 0;
};

/// Backtracks gamma = initial * shrink^k until
/// E(y + gamma d) <= E(y) + slope * gamma * <g, d>.
template <Objective F>
LineSearchResult armijo_search(const F& E, std::span<const double> y, std::span<const double> d,
                               std::span<const double> g, double f0, const ArmijoConfig& cfg,
                               double initial_step) {
  const double slope = dot(g, d);
  if (!(slope < 0.0)) throw std::invalid_argument("Armijo search needs a descent direction");
  if (!std::isfinite(f0)) throw std::invalid_argument("Armijo search started from an inadmissible point");
  Vector trial(y.size());
  double gamma = initial_step;
  for (int k = 0; k <= cfg.max_shrinks; ++k) {
    for (std::size_t i = 0; i < y.size(); ++i) trial[i] = y[i] + gamma * d[i];
    const double f = E.value(trial);
    if (std::isfinite(f) && f <= f0 + cfg.slope * gamma * slope) return {gamma, f, k};
    gamma *= cfg.shrink;
  }
  throw LineSearchFailure("no step satisfied the Armijo condition after " + std::to_string(cfg.max_shrinks) +
                          " reductions");
}

template <Objective F>
LineSearchResult armijo_search(const F& E, std::span<const double> y, std::span<const double> d,
                               std::span<const double> g, const ArmijoConfig& cfg) {
  return armijo_search(E, y, d, g, E.value(y), cfg, cfg.initial);
}

namespace detail {

/// Shared bookkeeping for the outer iteration of all methods.
class Driver {
 public:
  Driver(const SolverConfig& cfg, SolverResult& res) : cfg_(cfg), res_(res) {}

  void start(double f, std::span<const double> g) {
    res_.initial_energy = f;
    res_.energy = f;
    res_.grad_inf = norm_inf(g);
    threshold_ = std::max(cfg_.grad_tol, cfg_.grad_rtol * res_.grad_inf);
    res_.trace.push_back({0, f, res_.grad_inf});
  }

  /// True if the run should stop before taking another step.
  bool should_stop() {
    if (res_.grad_inf <= threshold_) {
      res_.status = SolverStatus::converged_gradient;
      return true;
    }
    const int w = cfg_.energy_window;
    const auto& t = res_.trace;
    if (static_cast<int>(t.size()) > w) {
      const double before = t[t.size() - 1 - w].energy, now = t.back().energy;
      if (before - now <= cfg_.energy_rtol * std::max(std::abs(before), std::numeric_limits<double>::min())) {
        res_.status = SolverStatus::converged_energy;
        return true;
      }
    }
    if (res_.iterations >= cfg_.max_iters) {
      res_.status = SolverStatus::max_iterations;
      return true;
    }
    return false;
  }

  void record(IterationRecord r, double f, std::span<const double> g) {
    ++res_.iterations;
    res_.energy = f;
    res_.grad_inf = norm_inf(g);
    r.iteration = res_.iterations;
    r.energy = f;
    r.grad_inf = res_.grad_inf;
    res_.trace.push_back(r);
    spdlog::debug("{} it {:4d}  E = {:.10e}  |g| = {:.3e}  step = {:.3e}", to_string(cfg_.method), r.iteration, f,
                  r.grad_inf, r.step);
  }

  void line_search_failed(const std::string& what) {
    res_.status = SolverStatus::line_search_failed;
    res_.message = what;
  }

 private:
  const SolverConfig& cfg_;
  SolverResult& res_;
  double threshold_ = 0.0;
};

template <Objective F>
bool initialize(const F& E, std::span<const double> y0, Vector& g, double& f, SolverResult& res) {
  res.y.assign(y0.begin(), y0.end());
  g.assign(y0.size(), 0.0);
  f = E.value_and_gradient(res.y, g);
  if (!std::isfinite(f)) {
    res.status = SolverStatus::not_admissible;
    res.energy = f;
    res.message = "initial point is not admissible (energy is not finite)";
    return false;
  }
  return true;
}

inline double first_trial_step(const SolverConfig& cfg, std::span<const double> d) {
  const double dn = norm_inf(d);
  return dn > 0.0 ? cfg.first_step / dn : cfg.armijo.initial;
}

}  // namespace detail

// ---------------------------------------------------------------------------
// Nonlinear CG (Polak-Ribiere+, restart on beta < 0 or loss of descent)

template <Objective F>
SolverResult ncg_pr_minimize(const F& E, std::span<const double> y0, const SolverConfig& cfg) {
  cfg.validate();
  SolverResult res;
  Vector g;
  double f;
  if (!detail::initialize(E, y0, g, f, res)) return res;
  detail::Driver drv(cfg, res);
  drv.start(f, g);

  const std::size_t n = y0.size();
  Vector d(n), g_new(n);
  for (std::size_t i = 0; i < n; ++i) d[i] = -g[i];
  double f_prev = f, prev_slope = 0.0, prev_step = 0.0;
  bool first = true;

  while (!drv.should_stop()) {
    double slope = dot(g, d);
    if (!(slope < 0.0)) {
      for (std::size_t i = 0; i < n; ++i) d[i] = -g[i];
      slope = dot(g, d);
    }
    double initial = detail::first_trial_step(cfg, d);
    if (!first) {
      // interpolate the previous decrease; fall back to matching first-order change
      const double guess = 2.02 * (f - f_prev) / slope;
      initial = std::isfinite(guess) && guess > 0.0 ? guess : prev_step * prev_slope / slope;
      if (!(initial > 0.0) || !std::isfinite(initial)) initial = cfg.armijo.initial;
    }
    // One probe at the guess, then start backtracking from the minimizer of
    // the interpolating parabola: keeps CG directions close to conjugate.
    {
      Vector probe(res.y);
      axpy(initial, d, probe);
      const double fp = E.value(probe);
      const double curv = fp - f - slope * initial;
      if (std::isfinite(fp) && curv > 0.0) {
        const double gamma = -slope * initial * initial / (2.0 * curv);
        if (std::isfinite(gamma) && gamma > 0.0) initial = std::min(gamma, 10.0 * initial);
      }
    }
    LineSearchResult ls;
    try {
      ls = armijo_search(E, res.y, d, g, f, cfg.armijo, initial);
    } catch (const LineSearchFailure& e) {
      drv.line_search_failed(e.what());
      break;
    }
    axpy(ls.step, d, res.y);
    f_prev = f;
    f = E.value_and_gradient(res.y, g_new);
    double num = 0.0, den = 0.0;
    for (std::size_t i = 0; i < n; ++i) {
      num += g_new[i] * (g_new[i] - g[i]);
      den += g[i] * g[i];
    }
    const double beta = den > 0.0 ? std::max(num / den, 0.0) : 0.0;
    for (std::size_t i = 0; i < n; ++i) d[i] = -g_new[i] + beta * d[i];
    g.swap(g_new);
    prev_slope = slope;
    prev_step = ls.step;
    first = false;
    drv.record({.step = ls.step}, f, g);
  }
  return res;
}

// ---------------------------------------------------------------------------
// Limited-memory BFGS (two-loop recursion)

template <Objective F>
SolverResult bfgs_minimize(const F& E, std::span<const double> y0, const SolverConfig& cfg) {
  cfg.validate();
  SolverResult res;
  Vector g;
  double f;
  if (!detail::initialize(E, y0, g, f, res)) return res;
  detail::Driver drv(cfg, res);
  drv.start(f, g);

  const std::size_t n = y0.size();
  struct Pair {
    Vector s, y;
    double rho;
  };
  std::deque<Pair> memory;
  Vector d(n), g_new(n), y_old(n);
  std::vector<double> a(cfg.lbfgs_history);

  while (!drv.should_stop()) {
    // two-loop recursion: d = -H g
    for (std::size_t i = 0; i < n; ++i) d[i] = -g[i];
    for (int k = static_cast<int>(memory.size()) - 1; k >= 0; --k) {
      a[k] = memory[k].rho * dot(memory[k].s, d);
      axpy(-a[k], memory[k].y, d);
    }
    if (!memory.empty()) {
      const auto& m = memory.back();
      scale(dot(m.s, m.y) / dot(m.y, m.y), d);
    }
    for (std::size_t k = 0; k < memory.size(); ++k) {
      const double b = memory[k].rho * dot(memory[k].y, d);
      axpy(a[k] - b, memory[k].s, d);
    }
    bool fallback = false;
    if (!(dot(g, d) < 0.0)) {
      memory.clear();
      for (std::size_t i = 0; i < n; ++i) d[i] = -g[i];
      fallback = true;
    }
    const double initial = memory.empty() ? detail::first_trial_step(cfg, d) : cfg.armijo.initial;
    LineSearchResult ls;
    try {
      ls = armijo_search(E, res.y, d, g, f, cfg.armijo, initial);
    } catch (const LineSearchFailure& e) {
      if (memory.empty()) {
        drv.line_search_failed(e.what());
        break;
      }
      memory.clear();  // retry once along steepest descent
      continue;
    }
    y_old = res.y;
    axpy(ls.step, d, res.y);
    f = E.value_and_gradient(res.y, g_new);
    Pair p{Vector(n), Vector(n), 0.0};
    for (std::size_t i = 0; i < n; ++i) {
      p.s[i] = res.y[i] - y_old[i];
      p.y[i] = g_new[i] - g[i];
    }
    const double sy = dot(p.s, p.y);
    if (sy > 1e-12 * norm2(p.s) * norm2(p.y)) {
      p.rho = 1.0 / sy;
      memory.push_back(std::move(p));
      if (static_cast<int>(memory.size()) > cfg.lbfgs_history) memory.pop_front();
    }
    g.swap(g_new);
    drv.record({.step = ls.step, .gradient_fallback = fallback}, f, g);
  }
  return res;
}

// ---------------------------------------------------------------------------
// Shifted Newton: (H + lambda I) p = -g with lambda from a Lanczos estimate of
// the lowest eigenvalue of the local Hessian part.

inline double newton_shift(double theta_min) {
  return theta_min > 0.0 ? 0.0 : -theta_min + 1e-6 * (1.0 + std::abs(theta_min));
}

template <SecondOrderObjective F>
SolverResult newton_shifted_minimize(const F& E, std::span<const double> y0, const SolverConfig& cfg) {
  cfg.validate();
  SolverResult res;
  Vector g;
  double f;
  if (!detail::initialize(E, y0, g, f, res)) return res;
  detail::Driver drv(cfg, res);
  drv.start(f, g);

  const std::size_t n = y0.size();
  Vector rhs(n), d(n);
  while (!drv.should_stop()) {
    const auto H = E.hessian(std::span<const double>(res.y), cfg.drop_hl);
    const auto lz = lanczos_min_eig(
        [&](std::span<const double> v, std::span<double> out) { H.apply_local(v, out); }, n, cfg.lanczos_steps);
    const double lambda = newton_shift(lz.theta_min);
    for (std::size_t i = 0; i < n; ++i) rhs[i] = -g[i];
    auto shifted = [&](std::span<const double> v, std::span<double> out) {
      H.apply(v, out);
      axpy(lambda, v, out);
    };
    IterationRecord rec;
    rec.shift = lambda;
    rec.theta_min = lz.theta_min;
    try {
      auto sol = bicgstab_solve(shifted, rhs, cfg.bicgstab.rel_tol, cfg.bicgstab.max_iters);
      d = std::move(sol.x);
      rec.inner_iterations = sol.iterations;
      res.min_curvature = std::min(res.min_curvature, sol.min_curvature);
      res.nonpositive_curvature += sol.nonpositive_curvature;
    } catch (const NumericalFailure& e) {
      ++res.linear_solve_failures;
      spdlog::debug("newton: {}; using the gradient direction", e.what());
      d = rhs;
      rec.gradient_fallback = true;
    }
    if (!(dot(g, d) < 0.0)) {
      d = rhs;
      rec.gradient_fallback = true;
    }
    const double initial = rec.gradient_fallback ? detail::first_trial_step(cfg, d) : cfg.armijo.initial;
    LineSearchResult ls;
    try {
      ls = armijo_search(E, res.y, d, g, f, cfg.armijo, initial);
    } catch (const LineSearchFailure& e) {
      drv.line_search_failed(e.what());
      break;
    }
    axpy(ls.step, d, res.y);
    f = E.value_and_gradient(res.y, g);
    rec.step = ls.step;
    drv.record(rec, f, g);
  }
  return res;
}

/// Dispatches on cfg.method.
template <Objective F>
SolverResult minimize(const F& E, std::span<const double> y0, const SolverConfig& cfg) {
  switch (cfg.method) {
    case Method::ncg_pr: return ncg_pr_minimize(E, y0, cfg);
    case Method::bfgs: return bfgs_minimize(E, y0, cfg);
    case Method::newton_shifted:
      if constexpr (SecondOrderObjective<F>)
        return newton_shifted_minimize(E, y0, cfg);
      else
        throw std::invalid_argument("the shifted Newton method needs Hessian-vector products");
  }
  throw std::invalid_argument("unknown solver method");
}

}  // namespace dfreg
