#pragma once

// Synthetic cuboid scenes with a known ground-truth deformation. The 2D
// image is produced by warping the volume and applying the forward operator,
// so an exact solution exists on the grid.

#include <array>
#include <cmath>
#include <numbers>
#include <stdexcept>
#include <string>
#include <vector>

#include "dfreg/forward.hpp"
#include "dfreg/grid.hpp"

namespace dfreg {

enum class SceneKind { cuboid_pair_inplane, two_cube_zshift, three_cuboid_translation };

inline const char* to_string(SceneKind k) {
  switch (k) {
    case SceneKind::cuboid_pair_inplane: return "cuboid_pair_inplane";
    case SceneKind::two_cube_zshift: return "two_cube_zshift";
    case SceneKind::three_cuboid_translation: return "three_cuboid_translation";
  }
  return "unknown";
}

inline SceneKind scene_kind_from_string(const std::string& s) {
  for (auto k : {SceneKind::cuboid_pair_inplane, SceneKind::two_cube_zshift, SceneKind::three_cuboid_translation})
    if (s == to_string(k)) return k;
  throw std::invalid_argument("unknown scene kind: " + s);
}

struct Cuboid {
  std::array<double, 3> lo{};
  std::array<double, 3> hi{};
};

struct SceneSpec {
  SceneKind kind = SceneKind::three_cuboid_translation;
  std::array<long, 3> nodes{129, 129, 9};
  std::array<double, 3> box{1.0, 1.0, 1.0};
  std::vector<Cuboid> cuboids;
  KernelSpec kernel;
  // three_cuboid_translation: z translation t; two_cube_zshift: z shift of the half x1 <= Lx/2
  double shift = 0.0;
  // cuboid_pair_inplane: in-plane translation and smooth bump amplitude
  std::array<double, 2> translation{0.0, 0.0};
  double amplitude = 0.0;

  static SceneSpec defaults(SceneKind kind, bool small = false);

  /// Overrides one named parameter (CLI --param key=value).
  void set(const std::string& key, double v) {
    if (key == "t" || key == "shift")
      shift = v;
    else if (key == "cone_slope" || key == "c")
      kernel.cone_slope = v;
    else if (key == "focal")
      kernel.focal_height = v;
    else if (key == "tx")
      translation[0] = v;
    else if (key == "ty")
      translation[1] = v;
    else if (key == "amplitude")
      amplitude = v;
    else
      throw std::invalid_argument("unknown scene parameter: " + key);
  }
};

inline SceneSpec SceneSpec::defaults(SceneKind kind, bool small) {
  SceneSpec s;
  s.kind = kind;
  switch (kind) {
    case SceneKind::three_cuboid_translation:
      s.nodes = small ? std::array<long, 3>{33, 33, 9} : std::array<long, 3>{129, 129, 9};
      s.box = {1.0, 1.0, 1.0};
      s.cuboids = {{{0.12, 0.15, 0.7}, {0.42, 0.45, 0.95}},
                   {{0.55, 0.12, 0.45}, {0.88, 0.40, 0.8}},
                   {{0.30, 0.58, 0.4}, {0.72, 0.86, 0.6}}};
      s.kernel = {KernelSpec::Kind::cone, 1.0, 0.5};
      s.shift = 0.35;
      break;
    case SceneKind::two_cube_zshift:
      s.nodes = small ? std::array<long, 3>{33, 33, 33} : std::array<long, 3>{129, 129, 129};
      s.box = {1.0, 1.0, 1.0};
      s.cuboids = {{{0.1, 0.35, 0.7}, {0.4, 0.65, 0.95}}, {{0.6, 0.35, 0.375}, {0.9, 0.65, 0.625}}};
      s.kernel = {KernelSpec::Kind::cone, 1.0, 0.5};
      s.shift = 1.0 / 3.0;
      break;
    case SceneKind::cuboid_pair_inplane: {
      s.nodes = small ? std::array<long, 3>{65, 65, 17} : std::array<long, 3>{129, 129, 17};
      const double h = 1.0 / static_cast<double>(s.nodes[0] - 1);
      const double Lz = static_cast<double>(s.nodes[2] - 1) * h;
      s.box = {1.0, 1.0, Lz};
      s.cuboids = {{{0.2, 0.25, 0.3 * Lz}, {0.45, 0.6, 0.7 * Lz}}, {{0.55, 0.4, 0.3 * Lz}, {0.8, 0.75, 0.7 * Lz}}};
      s.kernel = {KernelSpec::Kind::cone, 1.0, 0.5 * Lz};
      s.translation = {0.03, -0.02};
      s.amplitude = 0.03;
      break;
    }
  }
  return s;
}

struct Scene {
  SceneSpec spec;
  ScalarField3D volume;
  Deformation ground_truth;
  ScalarField2D image;
};

/// Indicator of a union of cuboids, with a linear ramp one cell wide across
/// every face (value 1/2 on the face itself).
inline ScalarField3D rasterize_cuboids(const Grid<3>& g, const std::vector<Cuboid>& cuboids) {
  ScalarField3D u(g);
  for (int k = 0; k < g.nodes(2); ++k)
    for (int j = 0; j < g.nodes(1); ++j)
      for (int i = 0; i < g.nodes(0); ++i) {
        const auto x = g.position({i, j, k});
        double v = 0.0;
        for (const auto& c : cuboids) {
          double w = 1.0;
          for (int a = 0; a < 3; ++a) {
            const double inside = std::min(x[a] - c.lo[a], c.hi[a] - x[a]);
            w *= std::clamp(inside / g.spacing(a) + 0.5, 0.0, 1.0);
          }
          v = std::max(v, w);
        }
        u[g.index(i, j, k)] = v;
      }
  return u;
}

/// Ground-truth deformation of a scene, sampled at the nodes of g.
inline Deformation scene_ground_truth(const SceneSpec& s, const Grid<3>& g) {
  Deformation y = identity_deformation(g);
  for (int k = 0; k < g.nodes(2); ++k)
    for (int j = 0; j < g.nodes(1); ++j)
      for (int i = 0; i < g.nodes(0); ++i) {
        const std::size_t n = g.index(i, j, k);
        const auto x = g.position({i, j, k});
        switch (s.kind) {
          case SceneKind::three_cuboid_translation: y.at(n, 2) += s.shift; break;
          case SceneKind::two_cube_zshift:
            if (x[0] <= 0.5 * g.extent(0) + 1e-12) y.at(n, 2) += s.shift;
            break;
          case SceneKind::cuboid_pair_inplane: {
            const double bump = std::sin(std::numbers::pi * x[0] / g.extent(0)) *
                                std::sin(std::numbers::pi * x[1] / g.extent(1));
            y.at(n, 0) += s.translation[0] + s.amplitude * bump;
            y.at(n, 1) += s.translation[1] + 0.5 * s.amplitude * bump;
            break;
          }
        }
      }
  return y;
}

inline Scene synth_scene(const SceneSpec& spec) {
  for (int a = 0; a < 3; ++a)
    if (!is_dyadic_node_count(spec.nodes[a]) || !(spec.box[a] > 0.0))
      throw std::invalid_argument("scene grid needs 2^k+1 nodes and a positive extent per axis");
  const Grid<3> g = Grid<3>::from_nodes(spec.nodes, spec.box);
  auto inside = [&](const std::array<double, 3>& p) {
    for (int a = 0; a < 3; ++a)
      if (p[a] < -1e-12 || p[a] > g.extent(a) + 1e-12) return false;
    return true;
  };
  for (const auto& c : spec.cuboids) {
    if (!inside(c.lo) || !inside(c.hi)) throw std::invalid_argument("cuboid lies outside the scene box");
    for (int a = 0; a < 3; ++a)
      if (!(c.hi[a] > c.lo[a])) throw std::invalid_argument("cuboid has nonpositive extent");
    // content that the ground truth pulls into view must come from inside the box
    std::array<double, 3> lo = c.lo, hi = c.hi;
    switch (spec.kind) {
      case SceneKind::three_cuboid_translation: lo[2] -= spec.shift, hi[2] -= spec.shift; break;
      case SceneKind::two_cube_zshift:
        if (c.lo[0] <= 0.5 * g.extent(0)) lo[2] -= spec.shift, hi[2] -= spec.shift;
        break;
      case SceneKind::cuboid_pair_inplane: {
        const double r = std::abs(spec.amplitude);
        for (int a = 0; a < 2; ++a) {
          lo[a] -= spec.translation[a] + (spec.translation[a] > 0 ? r : -r);
          hi[a] -= spec.translation[a] + (spec.translation[a] > 0 ? r : -r);
        }
        break;
      }
    }
    if (!inside(lo) || !inside(hi)) throw std::invalid_argument("cuboid leaves the box under the ground-truth deformation");
  }

  Scene s;
  s.spec = spec;
  s.volume = rasterize_cuboids(g, spec.cuboids);
  s.ground_truth = scene_ground_truth(spec, g);
  s.image = ForwardOperator(spec.kernel.build(g)).project(compose_nodes(s.volume, s.ground_truth));
  return s;
}

}  // namespace dfreg
