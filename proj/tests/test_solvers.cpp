#include <gtest/gtest.h>

#include <Eigen/Dense>
#include <cmath>
#include <random>

#include "dfreg/rigid.hpp"
#include "dfreg/solvers.hpp"
#include "test_util.hpp"

using namespace dfreg;

namespace {

struct DenseOperator {
  const std::vector<double>* A;
  std::size_t n;
  void apply(std::span<const double> v, std::span<double> out) const {
    for (std::size_t i = 0; i < n; ++i) {
      double s = 0.0;
      for (std::size_t j = 0; j < n; ++j) s += (*A)[i * n + j] * v[j];
      out[i] = s;
    }
  }
  void apply_local(std::span<const double> v, std::span<double> out) const { apply(v, out); }
};

/// E(x) = x'Ax/2 - b'x (+ q |x|^4 / 4 to keep indefinite A bounded below).
struct Quadratic {
  std::vector<double> A, b;
  std::size_t n;
  double quartic = 0.0;

  static Quadratic spd(std::size_t n, std::uint64_t seed, double lo = 1.0, double hi = 10.0) {
    Eigen::MatrixXd Q = Eigen::MatrixXd::Zero(n, n);
    std::mt19937_64 rng(seed);
    std::normal_distribution<double> g;
    for (std::size_t i = 0; i < n; ++i)
      for (std::size_t j = 0; j < n; ++j) Q(i, j) = g(rng);
    const Eigen::MatrixXd O = Eigen::HouseholderQR<Eigen::MatrixXd>(Q).householderQ();
    Eigen::VectorXd ev(n);
    for (std::size_t i = 0; i < n; ++i) ev[i] = lo + (hi - lo) * i / std::max<std::size_t>(n - 1, 1);
    const Eigen::MatrixXd M = O * ev.asDiagonal() * O.transpose();
    Quadratic q;
    q.n = n;
    q.A.resize(n * n);
    for (std::size_t i = 0; i < n; ++i)
      for (std::size_t j = 0; j < n; ++j) q.A[i * n + j] = 0.5 * (M(i, j) + M(j, i));
    q.b = fixtures::random_vector(n, seed + 1);
    return q;
  }

  double value(std::span<const double> x) const {
    std::vector<double> Ax(n);
    DenseOperator{&A, n}.apply(x, Ax);
    const double r2 = dot(x, x);
    return 0.5 * dot(x, Ax) - dot(b, x) + 0.25 * quartic * r2 * r2;
  }
  double value_and_gradient(std::span<const double> x, std::span<double> g) const {
    DenseOperator{&A, n}.apply(x, g);
    const double r2 = dot(x, x);
    for (std::size_t i = 0; i < n; ++i) g[i] += quartic * r2 * x[i] - b[i];
    return value(x);
  }

  struct Hessian {
    std::vector<double> H;
    std::size_t n;
    void apply(std::span<const double> v, std::span<double> out) const { DenseOperator{&H, n}.apply(v, out); }
    void apply_local(std::span<const double> v, std::span<double> out) const { apply(v, out); }
  };
  Hessian hessian(std::span<const double> x, bool) const {
    Hessian h{A, n};
    const double r2 = dot(x, x);
    for (std::size_t i = 0; i < n; ++i)
      for (std::size_t j = 0; j < n; ++j) h.H[i * n + j] += quartic * (2.0 * x[i] * x[j] + (i == j ? r2 : 0.0));
    return h;
  }

  std::vector<double> minimizer() const {
    Eigen::Map<const Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>> M(A.data(), n, n);
    Eigen::Map<const Eigen::VectorXd> rhs(b.data(), n);
    const Eigen::VectorXd x = M.ldlt().solve(rhs);
    return {x.data(), x.data() + n};
  }
};

struct Rosenbrock {
  double value(std::span<const double> x) const {
    return 100.0 * std::pow(x[1] - x[0] * x[0], 2) + std::pow(1.0 - x[0], 2);
  }
  double value_and_gradient(std::span<const double> x, std::span<double> g) const {
    g[0] = -400.0 * x[0] * (x[1] - x[0] * x[0]) - 2.0 * (1.0 - x[0]);
    g[1] = 200.0 * (x[1] - x[0] * x[0]);
    return value(x);
  }
  Quadratic::Hessian hessian(std::span<const double> x, bool) const {
    return {{1200.0 * x[0] * x[0] - 400.0 * x[1] + 2.0, -400.0 * x[0], -400.0 * x[0], 200.0}, 2};
  }
};

static_assert(SecondOrderObjective<Quadratic>);
static_assert(SecondOrderObjective<Rosenbrock>);
static_assert(Objective<FunctionObjective> && !SecondOrderObjective<FunctionObjective>);

SolverConfig tight(Method m, int max_iters) {
  SolverConfig c;
  c.method = m;
  c.max_iters = max_iters;
  c.grad_tol = 1e-8;
  c.grad_rtol = 0.0;
  c.energy_rtol = 0.0;
  return c;
}

void expect_monotone(const SolverResult& r) {
  for (std::size_t i = 1; i < r.trace.size(); ++i) EXPECT_LE(r.trace[i].energy, r.trace[i - 1].energy);
}

}  // namespace

TEST(Armijo, AcceptsFullStepOnParabola) {
  FunctionObjective E{[](std::span<const double> x) { return x[0] * x[0]; },
                      [](std::span<const double> x, std::span<double> g) { g[0] = 2 * x[0]; }};
  ArmijoConfig a;
  a.slope = 0.1;
  const std::vector<double> y{1.0}, d{-1.0}, g{2.0};
  const auto ls = armijo_search(E, y, d, g, a);
  EXPECT_EQ(ls.step, 1.0);
  EXPECT_EQ(ls.shrinks, 0);
  EXPECT_EQ(ls.energy, 0.0);
  const std::vector<double> zero{0.0};
  EXPECT_THROW(armijo_search(E, zero, d, zero, a), std::invalid_argument);
}

TEST(Armijo, RejectsInadmissibleTrialsAndExhausts) {
  // admissible only for x > 0.3: the unit step lands in the forbidden region
  FunctionObjective E{[](std::span<const double> x) {
                        return x[0] > 0.3 ? x[0] * x[0] : std::numeric_limits<double>::infinity();
                      },
                      [](std::span<const double> x, std::span<double> g) { g[0] = 2 * x[0]; }};
  const std::vector<double> y{1.0}, d{-1.0}, g{2.0};
  const auto ls = armijo_search(E, y, d, g, ArmijoConfig{});
  EXPECT_EQ(ls.step, 0.5);
  EXPECT_EQ(ls.shrinks, 1);

  FunctionObjective up{[](std::span<const double> x) { return std::abs(x[0]) < 1.0 ? 5.0 : x[0] * x[0]; },
                       [](std::span<const double> x, std::span<double> g) { g[0] = 2 * x[0]; }};
  ArmijoConfig few;
  few.max_shrinks = 20;  // keeps 1 - step distinguishable from 1
  EXPECT_THROW(armijo_search(up, y, d, g, few), LineSearchFailure);
}

TEST(Minimizers, ConvexQuadraticAllMethods) {
  const auto q = Quadratic::spd(10, 42);
  const auto xstar = q.minimizer();
  const std::vector<double> x0(10, 0.0);
  for (auto [m, iters] : {std::pair{Method::ncg_pr, 50}, {Method::bfgs, 50}, {Method::newton_shifted, 2}}) {
    auto cfg = tight(m, iters);
    if (m == Method::newton_shifted) cfg.bicgstab.rel_tol = 1e-12;
    const auto r = minimize(q, x0, cfg);
    EXPECT_EQ(r.status, SolverStatus::converged_gradient) << to_string(m);
    EXPECT_LE(r.grad_inf, 1e-8) << to_string(m);
    for (std::size_t i = 0; i < 10; ++i) EXPECT_NEAR(r.y[i], xstar[i], 1e-7) << to_string(m);
    expect_monotone(r);
  }
}

TEST(Minimizers, StartingAtMinimizerTakesNoSteps) {
  const auto q = Quadratic::spd(6, 3);
  const auto xstar = q.minimizer();
  for (auto m : {Method::ncg_pr, Method::bfgs, Method::newton_shifted}) {
    auto cfg = tight(m, 10);
    cfg.grad_tol = 1e-9;
    const auto r = minimize(q, xstar, cfg);
    EXPECT_EQ(r.iterations, 0);
    EXPECT_EQ(r.y, xstar);
  }
}

TEST(Minimizers, RosenbrockAllMethods) {
  const Rosenbrock f;
  const std::vector<double> x0{-1.2, 1.0};
  for (auto [m, iters] : {std::pair{Method::ncg_pr, 5000}, {Method::bfgs, 500}, {Method::newton_shifted, 200}}) {
    auto cfg = tight(m, iters);
    cfg.grad_tol = 1e-6;
    const auto r = minimize(f, x0, cfg);
    EXPECT_TRUE(r.converged()) << to_string(m) << ": " << to_string(r.status);
    EXPECT_NEAR(r.y[0], 1.0, 1e-4) << to_string(m);
    EXPECT_NEAR(r.y[1], 1.0, 1e-4) << to_string(m);
    expect_monotone(r);
  }
}

TEST(Minimizers, InadmissibleStartIsReported) {
  FunctionObjective E{[](std::span<const double>) { return std::numeric_limits<double>::infinity(); },
                      [](std::span<const double>, std::span<double>) {}};
  const auto r = minimize(E, std::vector<double>{0.0}, SolverConfig{});
  EXPECT_EQ(r.status, SolverStatus::not_admissible);
  EXPECT_FALSE(r.ok());
  SolverConfig newton;
  newton.method = Method::newton_shifted;
  EXPECT_THROW(minimize(E, std::vector<double>{0.0}, newton), std::invalid_argument);
  SolverConfig bad;
  bad.armijo.shrink = 1.0;
  EXPECT_THROW(bad.validate(), std::invalid_argument);
}

TEST(Lanczos, IdentityDiagonalAndRandom) {
  auto id = [](std::span<const double> v, std::span<double> out) { std::copy(v.begin(), v.end(), out.begin()); };
  EXPECT_NEAR(lanczos_min_eig(id, 7, 5).theta_min, 1.0, 1e-10);

  auto diag = [](std::span<const double> v, std::span<double> out) {
    out[0] = -2 * v[0], out[1] = v[1], out[2] = 5 * v[2];
  };
  EXPECT_NEAR(lanczos_min_eig(diag, 3, 3).theta_min, -2.0, 1e-8);

  std::mt19937_64 rng(8);
  std::normal_distribution<double> g;
  Eigen::MatrixXd M(50, 50);
  for (int i = 0; i < 50; ++i)
    for (int j = 0; j <= i; ++j) M(i, j) = M(j, i) = g(rng);
  const double truth = Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd>(M).eigenvalues().minCoeff();
  auto apply = [&](std::span<const double> v, std::span<double> out) {
    Eigen::Map<Eigen::VectorXd>(out.data(), 50) = M * Eigen::Map<const Eigen::VectorXd>(v.data(), 50);
  };
  const auto r = lanczos_min_eig(apply, 50, 20);
  EXPECT_EQ(r.steps, 20);
  EXPECT_LE(std::abs(r.theta_min - truth), 0.05 * std::abs(truth));
  EXPECT_GE(r.theta_min, truth - 1e-10);
}

TEST(Lanczos, SturmBisectionMatchesDenseTridiagonal) {
  const std::vector<double> a{2.0, -1.0, 0.5, 3.0, 1.0}, b{0.7, 1.1, -0.4, 0.9};
  Eigen::MatrixXd T = Eigen::MatrixXd::Zero(5, 5);
  for (int i = 0; i < 5; ++i) T(i, i) = a[i];
  for (int i = 0; i < 4; ++i) T(i, i + 1) = T(i + 1, i) = b[i];
  const auto ev = Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd>(T).eigenvalues();
  EXPECT_NEAR(tridiagonal_min_eigenvalue(a, b), ev[0], 1e-10);
  EXPECT_EQ(sturm_count(a, b, ev[0] - 1e-6), 0);
  EXPECT_EQ(sturm_count(a, b, ev[2] + 1e-6), 3);
}

TEST(BiCGStab, IdentityTridiagonalAndZero) {
  auto id = [](std::span<const double> v, std::span<double> out) { std::copy(v.begin(), v.end(), out.begin()); };
  const auto rhs = fixtures::random_vector(12, 4);
  const auto r = bicgstab_solve(id, rhs, 1e-12, 10);
  EXPECT_EQ(r.iterations, 1);
  for (std::size_t i = 0; i < rhs.size(); ++i) EXPECT_NEAR(r.x[i], rhs[i], 1e-14);

  const int n = 32;
  auto lap = [n](std::span<const double> v, std::span<double> out) {
    for (int i = 0; i < n; ++i) out[i] = 2 * v[i] - (i > 0 ? v[i - 1] : 0.0) - (i + 1 < n ? v[i + 1] : 0.0);
  };
  const std::vector<double> ones(n, 1.0);
  const auto s = bicgstab_solve(lap, ones, 1e-12, 500);
  // direct oracle: x_i = (i+1)(n-i)/2
  for (int i = 0; i < n; ++i) EXPECT_NEAR(s.x[i], 0.5 * (i + 1) * (n - i), 1e-8);
  EXPECT_EQ(s.nonpositive_curvature, 0);

  const auto z = bicgstab_solve(lap, std::vector<double>(n, 0.0), 1e-12, 10);
  EXPECT_EQ(norm_inf(z.x), 0.0);

  auto singular = [](std::span<const double> v, std::span<double> out) { out[0] = v[0], out[1] = 0.0; };
  EXPECT_THROW(bicgstab_solve(singular, std::vector<double>{1.0, 1.0}, 1e-10, 20), NumericalFailure);
}

TEST(NewtonShifted, IndefiniteProblemKeepsShiftedOperatorPositive) {
  // eigenvalues of A span [-3, 4]: a saddle at the origin, bounded below by the quartic
  auto q = Quadratic::spd(20, 17, -3.0, 4.0);
  q.quartic = 1.0;
  auto cfg = tight(Method::newton_shifted, 100);
  cfg.lanczos_steps = 20;
  const auto r = minimize(q, std::vector<double>(20, 0.0), cfg);
  EXPECT_TRUE(r.converged()) << to_string(r.status);
  EXPECT_EQ(r.nonpositive_curvature, 0);
  EXPECT_GT(r.min_curvature, 0.0);
  ASSERT_GE(r.trace.size(), 2u);
  EXPECT_GT(r.trace[1].shift, 0.0);
  for (std::size_t i = 1; i < r.trace.size(); ++i) EXPECT_LT(r.trace[i].energy, r.trace[i - 1].energy);
  EXPECT_EQ(newton_shift(2.0), 0.0);
  EXPECT_NEAR(newton_shift(-3.0), 3.0 + 4e-6, 1e-15);
}

TEST(Rigid, GradientMatchesFiniteDifferences) {
  const auto g = Grid<3>::isotropic(3);
  const auto u = fixtures::bump_volume(g, 2);
  const auto k = make_cone_kernel(g, 0.5, 0.5);
  RigidParams truth;
  truth.t = {0.04, -0.03, 0.02};
  const ScalarField2D target = project(compose_nodes(u, rigid_deformation(truth, g)), k);
  const RegistrationEnergy E(u, target, k, EnergyConfig{});
  const RigidObjective obj(E);
  const std::vector<double> p{0.01, 0.02, -0.01, 1.05, 0.97, 1.02, 0.03, -0.02, 0.04};
  std::vector<double> grad(9);
  obj.value_and_gradient(p, grad);
  for (int i = 0; i < 9; ++i) {
    auto pp = p, pm = p;
    const double h = 1e-6;
    pp[i] += h, pm[i] -= h;
    const double fd = (obj.value(pp) - obj.value(pm)) / (2 * h);
    EXPECT_NEAR(grad[i], fd, 1e-5 * std::max(1e-3, std::abs(fd))) << "parameter " << i;
  }
  auto bad = p;
  bad[4] = -0.1;
  EXPECT_TRUE(std::isinf(obj.value(bad)));
}

TEST(Rigid, RotationAndDeformationConventions) {
  RigidParams p;
  p.angles = {0.0, 0.0, std::numbers::pi / 2};
  const Mat3 R = rotation(p);
  EXPECT_NEAR(R(0, 1), -1.0, 1e-15);
  EXPECT_NEAR(R(1, 0), 1.0, 1e-15);
  const auto g = Grid<3>::isotropic(2);
  const auto id = rigid_deformation(RigidParams{}, g);
  const auto ref = identity_deformation(g);
  for (std::size_t i = 0; i < id.size(); ++i) EXPECT_NEAR(id[i], ref[i], 1e-15);
  const auto v = p.to_vector();
  const auto back = RigidParams::from_vector(v);
  EXPECT_EQ(back.angles[2], p.angles[2]);
}

TEST(Rigid, PrealignmentRecoversTranslationAndScaling) {
  const auto g = Grid<3>::isotropic(4);
  const auto u = fixtures::bump_volume(g, 5);
  KernelSpec ks;
  ks.cone_slope = 0.5;
  const auto k = ks.build(g);
  // aligned input stays at the identity
  {
    const auto res = rigid_prealign(u, project(u, k), ks, EnergyConfig{});
    for (int a = 0; a < 3; ++a) {
      EXPECT_LE(std::abs(res.params.t[a]), 0.5 * g.spacing(0));
      EXPECT_LE(std::abs(res.params.s[a] - 1.0), 1e-2);
    }
  }
  RigidParams truth;
  truth.t = {0.1, 0.0, 0.0};
  truth.s = {1.1, 1.0, 1.0};
  const ScalarField2D target = project(compose_nodes(u, rigid_deformation(truth, g)), k);
  const auto res = rigid_prealign(u, target, ks, EnergyConfig{});
  EXPECT_NEAR(res.params.t[0], 0.1, 0.5 * g.spacing(0));
  EXPECT_NEAR(res.params.s[0], 1.1, 0.02);
  EXPECT_FALSE(res.clamped);
  EXPECT_EQ(res.levels.front(), 3);
  EXPECT_EQ(res.levels.back(), 4);
}
