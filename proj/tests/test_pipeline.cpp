#include <gtest/gtest.h>

#include <cmath>

#include "dfreg/pipeline.hpp"
#include "test_util.hpp"

using namespace dfreg;

TEST(Blur, ZeroScaleImpulseAndConstant) {
  const auto g = Grid<2>::isotropic(6);
  const ScalarField2D f(g, fixtures::random_vector(g.node_count(), 3));
  const auto same = gaussian_blur(f, 0.0);
  EXPECT_EQ(same.storage(), f.storage());
  EXPECT_THROW(gaussian_blur(f, -1.0), std::invalid_argument);

  const double h = g.spacing(0), s = 2 * h;
  ScalarField2D imp(g);
  imp[g.index(32, 32)] = 1.0;
  const auto b = gaussian_blur(imp, s);
  auto K = [s](double x) { return std::exp(-x * x / (2 * s * s)) / (s * std::sqrt(2 * M_PI)); };
  for (int dj = -4; dj <= 4; ++dj)
    for (int di = -4; di <= 4; ++di) {
      const double expect = K(di * h) * K(dj * h) * h * h;
      EXPECT_NEAR(b[g.index(32 + di, 32 + dj)], expect, 0.02 * expect);
    }
  double mass = 0.0;
  for (double v : b.values()) mass += v;
  EXPECT_NEAR(mass, 1.0, 1e-2);

  const ScalarField2D c(g, 0.7);
  const auto bc = gaussian_blur(c, 4 * h);
  const int r = 16;  // truncation radius 4s in nodes
  for (int j = r; j < 65 - r; ++j)
    for (int i = r; i < 65 - r; ++i) EXPECT_NEAR(bc[g.index(i, j)], 0.7, 1e-6);
}

TEST(Blur, VolumeSlicesAreBlurredIndependently) {
  const auto g = Grid<3>::from_nodes({33, 33, 5}, {1, 1, 0.125});
  ScalarField3D u(g);
  u[g.index(16, 16, 2)] = 1.0;
  const auto b = gaussian_blur(u, 2 * g.spacing(0));
  for (int k = 0; k < 5; ++k) {
    double mass = 0.0;
    for (int j = 0; j < 33; ++j)
      for (int i = 0; i < 33; ++i) mass += b[g.index(i, j, k)];
    EXPECT_NEAR(mass, k == 2 ? 1.0 : 0.0, 1e-12);
  }
  ScalarField2D slice(g.plane());
  slice[g.plane().index(16, 16)] = 1.0;
  const auto b2 = gaussian_blur(slice, 2 * g.spacing(0));
  for (int j = 0; j < 33; ++j)
    for (int i = 0; i < 33; ++i) EXPECT_DOUBLE_EQ(b[g.index(i, j, 2)], b2[g.plane().index(i, j)]);
}

TEST(Diagnostics, IdentityScalingAndRandomDeformation) {
  const auto g = Grid<3>::isotropic(3);
  const auto d = constraint_diagnostics(identity_deformation(g));
  EXPECT_NEAR(d.min_det, 1.0, 1e-14);
  EXPECT_NEAR(d.det_integral, 1.0, 1e-12);
  EXPECT_NEAR(d.volume_gap, 0.0, 0.1);
  for (double m : d.max_abs) EXPECT_DOUBLE_EQ(m, 1.0);

  Deformation twice = identity_deformation(g);
  for (std::size_t i = 0; i < twice.size(); ++i) twice[i] *= 2.0;
  const auto d2 = constraint_diagnostics(twice);
  EXPECT_NEAR(d2.min_det, 8.0, 1e-12);
  EXPECT_NEAR(d2.det_integral, 8.0, 1e-11);

  // oracle: Jacobian of the trilinear map by direct differentiation at the Gauss points
  const auto y = fixtures::perturbed_identity(g, 0.4, 19);
  const double h = g.spacing(0);
  const auto& rule = gauss2<3>();
  double min_det = std::numeric_limits<double>::infinity();
  for (int k = 0; k < 8; ++k)
    for (int j = 0; j < 8; ++j)
      for (int i = 0; i < 8; ++i)
        for (const auto& xi : rule.points) {
          Mat3 J;
          for (int c = 0; c < 8; ++c) {
            const int o[3] = {c & 1, (c >> 1) & 1, (c >> 2) & 1};
            const std::size_t n = g.index(i + o[0], j + o[1], k + o[2]);
            for (int m = 0; m < 3; ++m) {
              double dphi = (o[m] ? 1.0 : -1.0) / h;
              for (int f = 0; f < 3; ++f)
                if (f != m) dphi *= o[f] ? xi[f] : 1.0 - xi[f];
              for (int a = 0; a < 3; ++a) J(a, m) += y.at(n, a) * dphi;
            }
          }
          min_det = std::min(min_det, J.det());
        }
  EXPECT_NEAR(constraint_diagnostics(y).min_det, min_det, 1e-12);
}

TEST(Pipeline, StartLevelFollowsBlurScale) {
  const double h = 1.0 / 64;
  EXPECT_EQ(start_level(8 * h, h, 6, 3), 3);
  EXPECT_EQ(start_level(4 * h, h, 6, 3), 4);
  EXPECT_EQ(start_level(2 * h, h, 6, 3), 5);
  EXPECT_EQ(start_level(0.0, h, 6, 3), 5);
  EXPECT_EQ(start_level(64 * h, h, 6, 3), 3);
  EXPECT_EQ(start_level(0.0, 0.5, 1, 3), 1);
}

TEST(Pipeline, ConfigValidation) {
  PipelineConfig c;
  EXPECT_NO_THROW(c.validate());
  c.blur_schedule = {4, 8, 0};
  EXPECT_THROW(c.validate(), std::invalid_argument);
  c.blur_schedule = {4, 2};
  EXPECT_THROW(c.validate(), std::invalid_argument);
}

TEST(Pipeline, AlignedInputsStayAtIdentity) {
  const auto g = Grid<3>::from_nodes({17, 17, 9}, {1.0, 1.0, 0.5});
  const auto u = fixtures::bump_volume(g, 4);
  PipelineConfig cfg;
  cfg.kernel.cone_slope = 0.5;
  cfg.solver.max_iters = 40;
  const auto u2 = project(u, cfg.kernel.build(g));
  const auto rep = register_images(u, u2, cfg);
  ASSERT_FALSE(rep.failed) << rep.failure;
  const auto id = identity_deformation(g);
  double dev = 0.0;
  for (std::size_t i = 0; i < id.size(); ++i) dev = std::max(dev, std::abs(rep.deformation[i] - id[i]));
  EXPECT_LE(dev, 0.5 * g.spacing(0));
  EXPECT_EQ(rep.initial_data_term, 0.0);
  // blurred and coarse stages are not exactly consistent with the finest
  // model, so y returns to the identity only up to solver tolerance
  const RegistrationEnergy E(u, u2, cfg.kernel.build(g), cfg.energy);
  const double one_cell = E.data_term(translation_family(0)(g.spacing(0), g));
  EXPECT_LE(rep.final_data_term, 1e-3 * one_cell);
  // one stage per (scale, level); every stage reports diagnostics and does not increase its energy
  EXPECT_FALSE(rep.stages.empty());
  for (const auto& st : rep.stages) {
    ASSERT_FALSE(st.energy_trace.empty());
    EXPECT_LE(st.energy_trace.back(), st.energy_trace.front());
    EXPECT_GT(st.diagnostics.min_det, 0.0);
  }
  EXPECT_EQ(rep.stages.back().level, 4);
  EXPECT_EQ(rep.stages.back().blur, 0.0);
}

TEST(Pipeline, RecoversSmallTranslation) {
  const auto g = Grid<3>::from_nodes({17, 17, 9}, {1.0, 1.0, 0.5});
  const auto u = fixtures::bump_volume(g, 9);
  PipelineConfig cfg;
  cfg.kernel.cone_slope = 0.5;
  cfg.blur_schedule = {2.0, 0.0};
  cfg.solver.max_iters = 100;
  cfg.energy.c1 = cfg.energy.c3 = 1e-4;
  cfg.energy.c2 = 2e-4;
  Deformation shift = identity_deformation(g);
  for (std::size_t n = 0; n < g.node_count(); ++n) shift.at(n, 0) += 0.5 * g.spacing(0);
  const auto u2 = project(compose_nodes(u, shift), cfg.kernel.build(g));
  const auto rep = register_images(u, u2, cfg);
  ASSERT_FALSE(rep.failed);
  EXPECT_LE(rep.final_data_term, 0.1 * rep.initial_data_term);
  EXPECT_GT(rep.diagnostics.min_det, 0.0);
}

TEST(Sweep, AlignedSceneIsMinimalAtZero) {
  const auto g = Grid<3>::from_nodes({17, 17, 9}, {1.0, 1.0, 0.5});
  const auto u = fixtures::bump_volume(g, 2);
  KernelSpec ks;
  const auto u2 = project(u, ks.build(g));
  std::vector<double> ts;
  for (int i = -5; i <= 5; ++i) ts.push_back(0.02 * i);
  const auto curve = energy_sweep_1d(u, u2, ks, EnergyConfig{}, translation_family(2), ts);
  ASSERT_EQ(curve.size(), ts.size());
  EXPECT_EQ(curve[5].second, 0.0);
  for (const auto& [t, J] : curve) EXPECT_GE(J, curve[5].second);
  EXPECT_EQ(count_local_minima(curve), 1);
  EXPECT_EQ(count_local_minima({{0, 1}, {1, 1}, {2, 1}}), 0);
  EXPECT_EQ(count_local_minima({{0, 2}, {1, 1}, {2, 3}, {3, 0.5}, {4, 4}}), 2);
  EXPECT_THROW(translation_family(3), std::invalid_argument);
  // coarser level and blur are honored
  SweepOptions opt;
  opt.level = 3;
  opt.blur = 2 * g.spacing(0);
  const auto coarse = energy_sweep_1d(u, u2, ks, EnergyConfig{}, translation_family(2), ts, opt);
  EXPECT_EQ(coarse.size(), ts.size());
}
