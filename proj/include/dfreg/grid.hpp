#pragma once

// Dyadic regular grids, nodal multilinear finite-element fields on them,
// inter-grid transfer and sampling of warped fields.

#include <algorithm>
#include <array>
#include <cmath>
#include <cstddef>
#include <span>
#include <stdexcept>
#include <string>
#include <type_traits>
#include <vector>

namespace dfreg {

inline bool is_dyadic_node_count(long n) {
  if (n < 3) return false;
  long m = n - 1;
  return (m & (m - 1)) == 0;
}

inline int dyadic_level_of(long nodes) {
  if (!is_dyadic_node_count(nodes))
    throw std::invalid_argument("node count " + std::to_string(nodes) + " is not 2^k+1 with k >= 1");
  int l = 0;
  for (long m = nodes - 1; m > 1; m >>= 1) ++l;
  return l;
}

/// A regular grid on the box [0,L_0] x ... x [0,L_{Dim-1}] with 2^l_a + 1
/// nodes on axis a. Axes may sit at different dyadic levels; the grid level
/// is the largest axis level. Nodes are ordered x fastest, z slowest.
template <int Dim>
class Grid {
  static_assert(Dim == 2 || Dim == 3);

 public:
  using Levels = std::array<int, Dim>;
  using Extent = std::array<double, Dim>;

  Grid() {
    levels_.fill(1);
    extent_.fill(1.0);
  }

  Grid(Levels axis_levels, Extent extent) : levels_(axis_levels), extent_(extent) {
    for (int a = 0; a < Dim; ++a) {
      if (levels_[a] < 1 || levels_[a] > 20)
        throw std::invalid_argument("axis level must lie in [1,20], got " + std::to_string(levels_[a]));
      if (!(extent_[a] > 0.0) || !std::isfinite(extent_[a]))
        throw std::invalid_argument("box extents must be positive and finite");
    }
  }

  static Grid isotropic(int level, Extent extent = unit_extent()) {
    Levels l;
    l.fill(level);
    return Grid(l, extent);
  }

  static Grid from_nodes(std::array<long, Dim> nodes, Extent extent) {
    Levels l;
    for (int a = 0; a < Dim; ++a) l[a] = dyadic_level_of(nodes[a]);
    return Grid(l, extent);
  }

  static Extent unit_extent() {
    Extent e;
    e.fill(1.0);
    return e;
  }

  static constexpr int dim() { return Dim; }
  int level() const { return *std::max_element(levels_.begin(), levels_.end()); }
  int axis_level(int a) const { return levels_[a]; }
  const Levels& axis_levels() const { return levels_; }
  int nodes(int a) const { return (1 << levels_[a]) + 1; }
  double extent(int a) const { return extent_[a]; }
  const Extent& extents() const { return extent_; }
  double spacing(int a) const { return extent_[a] / (nodes(a) - 1); }

  std::size_t node_count() const {
    std::size_t n = 1;
    for (int a = 0; a < Dim; ++a) n *= static_cast<std::size_t>(nodes(a));
    return n;
  }
  std::size_t element_count() const {
    std::size_t n = 1;
    for (int a = 0; a < Dim; ++a) n *= static_cast<std::size_t>(nodes(a) - 1);
    return n;
  }
  /// Volume (Dim=3) or area (Dim=2) of one element.
  double element_measure() const {
    double m = 1.0;
    for (int a = 0; a < Dim; ++a) m *= spacing(a);
    return m;
  }
  double domain_measure() const {
    double m = 1.0;
    for (int a = 0; a < Dim; ++a) m *= extent_[a];
    return m;
  }

  std::size_t index(int i, int j) const
    requires(Dim == 2)
  {
    return static_cast<std::size_t>(i) + static_cast<std::size_t>(nodes(0)) * j;
  }
  std::size_t index(int i, int j, int k) const
    requires(Dim == 3)
  {
    return static_cast<std::size_t>(i) +
           static_cast<std::size_t>(nodes(0)) * (static_cast<std::size_t>(j) + static_cast<std::size_t>(nodes(1)) * k);
  }

  std::array<double, Dim> position(std::array<int, Dim> idx) const {
    std::array<double, Dim> p;
    for (int a = 0; a < Dim; ++a) p[a] = idx[a] * spacing(a);
    return p;
  }

  /// One level coarser: every axis at level min(l_a, level()-1).
  Grid coarser() const {
    const int n = level() - 1;
    if (n < 1) throw std::invalid_argument("cannot coarsen a level-1 grid");
    Levels l;
    for (int a = 0; a < Dim; ++a) l[a] = std::min(levels_[a], n);
    return Grid(l, extent_);
  }

  /// One level finer, never refining an axis beyond its level in `finest`.
  Grid finer(const Grid& finest) const {
    const int n = level() + 1;
    if (n > finest.level()) throw std::invalid_argument("grid is already at the finest level");
    Levels l;
    for (int a = 0; a < Dim; ++a) l[a] = std::min(finest.levels_[a], n);
    return Grid(l, extent_);
  }

  Grid<2> plane() const
    requires(Dim == 3)
  {
    return Grid<2>({levels_[0], levels_[1]}, {extent_[0], extent_[1]});
  }

  bool operator==(const Grid&) const = default;

 private:
  Levels levels_;
  Extent extent_;
};

/// Levels 1..N derived from a finest grid by repeated coarsening.
template <int Dim>
class GridHierarchy {
 public:
  explicit GridHierarchy(const Grid<Dim>& finest) {
    levels_.push_back(finest);
    while (levels_.back().level() > 1) levels_.push_back(levels_.back().coarser());
    std::reverse(levels_.begin(), levels_.end());
  }
  int finest_level() const { return levels_.back().level(); }
  /// 1-based level access.
  const Grid<Dim>& level(int n) const {
    if (n < 1 || n > finest_level()) throw std::invalid_argument("level out of range: " + std::to_string(n));
    return levels_[static_cast<std::size_t>(n - 1)];
  }
  const Grid<Dim>& finest() const { return levels_.back(); }
  std::size_t size() const { return levels_.size(); }

 private:
  std::vector<Grid<Dim>> levels_;
};

inline GridHierarchy<3> build_hierarchy(int finest_level, std::array<double, 3> extent = {1.0, 1.0, 1.0}) {
  if (finest_level < 1) throw std::invalid_argument("finest level must be >= 1");
  return GridHierarchy<3>(Grid<3>::isotropic(finest_level, extent));
}

/// Nodal values of a continuous multilinear finite-element function with C
/// components per node (component fastest).
template <int Dim, int C>
class NodalField {
 public:
  static constexpr int components = C;

  NodalField() = default;
  explicit NodalField(Grid<Dim> grid, double fill = 0.0)
      : grid_(grid), values_(grid.node_count() * C, fill) {}
  NodalField(Grid<Dim> grid, std::vector<double> values) : grid_(grid), values_(std::move(values)) {
    if (values_.size() != grid_.node_count() * C)
      throw std::invalid_argument("value count " + std::to_string(values_.size()) + " does not match grid (" +
                                  std::to_string(grid_.node_count() * C) + ")");
  }

  const Grid<Dim>& grid() const { return grid_; }
  std::span<const double> values() const { return values_; }
  std::span<double> values() { return values_; }
  std::vector<double>& storage() { return values_; }
  const std::vector<double>& storage() const { return values_; }
  std::size_t size() const { return values_.size(); }

  double& operator[](std::size_t i) { return values_[i]; }
  double operator[](std::size_t i) const { return values_[i]; }

  double& at(std::size_t node, int comp = 0) { return values_[node * C + comp]; }
  double at(std::size_t node, int comp = 0) const { return values_[node * C + comp]; }

  bool all_finite() const {
    return std::all_of(values_.begin(), values_.end(), [](double v) { return std::isfinite(v); });
  }

 private:
  Grid<Dim> grid_;
  std::vector<double> values_;
};

using ScalarField2D = NodalField<2, 1>;
using ScalarField3D = NodalField<3, 1>;
using Deformation = NodalField<3, 3>;

inline Deformation identity_deformation(const Grid<3>& g) {
  Deformation y(g);
  for (int k = 0; k < g.nodes(2); ++k)
    for (int j = 0; j < g.nodes(1); ++j)
      for (int i = 0; i < g.nodes(0); ++i) {
        const std::size_t n = g.index(i, j, k);
        y.at(n, 0) = i * g.spacing(0);
        y.at(n, 1) = j * g.spacing(1);
        y.at(n, 2) = k * g.spacing(2);
      }
  return y;
}

// ---------------------------------------------------------------------------
// Transfer operators

/// [1,2,1]/4 restriction of a nodal sequence of length 2^k+1, boundary values
/// duplicated outward.
inline std::vector<double> restrict_1d(std::span<const double> x) {
  const long m = static_cast<long>(x.size());
  if (!is_dyadic_node_count(m)) throw std::invalid_argument("restrict_1d: length must be 2^k+1 with k >= 1");
  const long out_len = (m + 1) / 2;
  std::vector<double> out(static_cast<std::size_t>(out_len));
  for (long o = 0; o < out_len; ++o) {
    const long c = 2 * o;
    const double left = c > 0 ? x[c - 1] : x[0];
    const double right = c + 1 < m ? x[c + 1] : x[m - 1];
    out[o] = (left + 2.0 * x[c] + right) / 4.0;
  }
  return out;
}

/// Midpoint-inserting prolongation (linear interpolation on the refined grid).
inline std::vector<double> prolong_1d(std::span<const double> x) {
  const std::size_t m = x.size();
  if (m < 2) throw std::invalid_argument("prolong_1d: need at least two values");
  std::vector<double> out(2 * m - 1);
  for (std::size_t i = 0; i < m; ++i) {
    out[2 * i] = x[i];
    if (i + 1 < m) out[2 * i + 1] = 0.5 * (x[i] + x[i + 1]);
  }
  return out;
}

namespace detail {

// Applies a 1D line transform along `axis` of an (n0,n1,n2) array with `comps`
// interleaved components.
template <class LineOp>
std::vector<double> transform_axis(std::span<const double> in, std::array<int, 3> dims, int comps, int axis,
                                   int new_len, LineOp&& op) {
  std::array<int, 3> out_dims = dims;
  out_dims[axis] = new_len;
  std::vector<double> out(static_cast<std::size_t>(out_dims[0]) * out_dims[1] * out_dims[2] * comps);
  auto stride_of = [&](const std::array<int, 3>& d, int a) {
    std::size_t s = static_cast<std::size_t>(comps);
    for (int b = 0; b < a; ++b) s *= static_cast<std::size_t>(d[b]);
    return s;
  };
  const std::size_t in_stride = stride_of(dims, axis);
  const std::size_t out_stride = stride_of(out_dims, axis);
  std::vector<double> line(static_cast<std::size_t>(dims[axis]));
  std::array<int, 3> idx{};
  const int o1 = (axis + 1) % 3, o2 = (axis + 2) % 3;
  for (idx[o2] = 0; idx[o2] < dims[o2]; ++idx[o2])
    for (idx[o1] = 0; idx[o1] < dims[o1]; ++idx[o1]) {
      std::array<int, 3> base = idx;
      base[axis] = 0;
      const std::size_t in_base =
          comps * (static_cast<std::size_t>(base[0]) +
                   static_cast<std::size_t>(dims[0]) * (base[1] + static_cast<std::size_t>(dims[1]) * base[2]));
      const std::size_t out_base =
          comps * (static_cast<std::size_t>(base[0]) +
                   static_cast<std::size_t>(out_dims[0]) * (base[1] + static_cast<std::size_t>(out_dims[1]) * base[2]));
      for (int c = 0; c < comps; ++c) {
        for (int t = 0; t < dims[axis]; ++t) line[t] = in[in_base + c + t * in_stride];
        const std::vector<double> res = op(std::span<const double>(line));
        for (int t = 0; t < new_len; ++t) out[out_base + c + t * out_stride] = res[t];
      }
    }
  return out;
}

template <int Dim>
std::array<int, 3> dims3(const Grid<Dim>& g) {
  std::array<int, 3> d{1, 1, 1};
  for (int a = 0; a < Dim; ++a) d[a] = g.nodes(a);
  return d;
}

}  // namespace detail

/// Restriction to the next coarser grid, applied axis by axis on refined axes.
template <int Dim, int C>
NodalField<Dim, C> restrict_field(const NodalField<Dim, C>& f) {
  const Grid<Dim> target = f.grid().coarser();
  std::vector<double> data(f.values().begin(), f.values().end());
  std::array<int, 3> dims = detail::dims3(f.grid());
  for (int a = 0; a < Dim; ++a) {
    if (target.nodes(a) == f.grid().nodes(a)) continue;
    data = detail::transform_axis(data, dims, C, a, target.nodes(a),
                                  [](std::span<const double> l) { return restrict_1d(l); });
    dims[a] = target.nodes(a);
  }
  return NodalField<Dim, C>(target, std::move(data));
}

/// Prolongation to the next finer grid (capped by `finest`).
template <int Dim, int C>
NodalField<Dim, C> prolong_field(const NodalField<Dim, C>& f, const Grid<Dim>& finest) {
  const Grid<Dim> target = f.grid().finer(finest);
  std::vector<double> data(f.values().begin(), f.values().end());
  std::array<int, 3> dims = detail::dims3(f.grid());
  for (int a = 0; a < Dim; ++a) {
    if (target.nodes(a) == f.grid().nodes(a)) continue;
    data = detail::transform_axis(data, dims, C, a, target.nodes(a),
                                  [](std::span<const double> l) { return prolong_1d(l); });
    dims[a] = target.nodes(a);
  }
  return NodalField<Dim, C>(target, std::move(data));
}

/// Restricts repeatedly until the field sits on level n.
template <int Dim, int C>
NodalField<Dim, C> restrict_to_level(NodalField<Dim, C> f, int n) {
  while (f.grid().level() > n) f = restrict_field(f);
  return f;
}

/// Restricts a deformation through its displacement so the identity map is
/// reproduced exactly on the coarse grid.
inline Deformation restrict_deformation(const Deformation& y, int n) {
  Deformation d = y;
  const Deformation id = identity_deformation(y.grid());
  for (std::size_t i = 0; i < d.size(); ++i) d[i] -= id[i];
  d = restrict_to_level(std::move(d), n);
  const Deformation id_coarse = identity_deformation(d.grid());
  for (std::size_t i = 0; i < d.size(); ++i) d[i] += id_coarse[i];
  return d;
}

// ---------------------------------------------------------------------------
// Quadrature

/// Tensor Gauss rule on the reference element [0,1]^Dim; weights sum to 1.
template <int Dim>
struct QuadratureRule {
  std::vector<std::array<double, Dim>> points;
  std::vector<double> weights;
};

/// Two points per axis.
template <int Dim>
const QuadratureRule<Dim>& gauss2() {
  static const QuadratureRule<Dim> rule = [] {
    const double g[2] = {0.5 - 0.5 / std::sqrt(3.0), 0.5 + 0.5 / std::sqrt(3.0)};
    QuadratureRule<Dim> r;
    for (int q = 0; q < (1 << Dim); ++q) {
      std::array<double, Dim> p;
      for (int a = 0; a < Dim; ++a) p[a] = g[(q >> a) & 1];
      r.points.push_back(p);
      r.weights.push_back(1.0 / (1 << Dim));
    }
    return r;
  }();
  return rule;
}

/// Values and reference-coordinate gradients of the 2^Dim corner shape
/// functions at every point of a rule. Corner c has offset bit a = (c>>a)&1.
template <int Dim>
struct ShapeTable {
  static constexpr int corners = 1 << Dim;
  std::vector<std::array<double, corners>> value;
  std::vector<std::array<std::array<double, Dim>, corners>> dref;

  explicit ShapeTable(const QuadratureRule<Dim>& rule) {
    for (const auto& p : rule.points) {
      std::array<double, corners> v;
      std::array<std::array<double, Dim>, corners> d;
      for (int c = 0; c < corners; ++c) {
        double prod = 1.0;
        for (int a = 0; a < Dim; ++a) prod *= ((c >> a) & 1) ? p[a] : 1.0 - p[a];
        v[c] = prod;
        for (int a = 0; a < Dim; ++a) {
          double g = ((c >> a) & 1) ? 1.0 : -1.0;
          for (int b = 0; b < Dim; ++b)
            if (b != a) g *= ((c >> b) & 1) ? p[b] : 1.0 - p[b];
          d[c][a] = g;
        }
      }
      value.push_back(v);
      dref.push_back(d);
    }
  }
};

template <int Dim>
const ShapeTable<Dim>& gauss2_shapes() {
  static const ShapeTable<Dim> t(gauss2<Dim>());
  return t;
}

/// Node indices of the corners of element e (x fastest element ordering).
inline std::array<std::size_t, 8> element_corners(const Grid<3>& g, std::size_t e) {
  const int ex = g.nodes(0) - 1, ey = g.nodes(1) - 1;
  const int i = static_cast<int>(e % ex);
  const int j = static_cast<int>((e / ex) % ey);
  const int k = static_cast<int>(e / (static_cast<std::size_t>(ex) * ey));
  std::array<std::size_t, 8> c;
  for (int q = 0; q < 8; ++q) c[q] = g.index(i + (q & 1), j + ((q >> 1) & 1), k + ((q >> 2) & 1));
  return c;
}

inline std::array<std::size_t, 4> element_corners(const Grid<2>& g, std::size_t e) {
  const int ex = g.nodes(0) - 1;
  const int i = static_cast<int>(e % ex);
  const int j = static_cast<int>(e / ex);
  std::array<std::size_t, 4> c;
  for (int q = 0; q < 4; ++q) c[q] = g.index(i + (q & 1), j + ((q >> 1) & 1));
  return c;
}

// ---------------------------------------------------------------------------
// Point evaluation (zero extension outside the box)

namespace detail {

template <int Dim>
bool locate(const Grid<Dim>& g, std::span<const double> p, std::type_identity_t<std::array<int, Dim>>& cell,
            std::type_identity_t<std::array<double, Dim>>& frac) {
  for (int a = 0; a < Dim; ++a) {
    const double L = g.extent(a);
    const double tol = 1e-12 * L;
    if (!(p[a] >= -tol && p[a] <= L + tol)) return false;
    const double h = g.spacing(a);
    double s = std::clamp(p[a], 0.0, L) / h;
    int c = static_cast<int>(std::floor(s));
    c = std::clamp(c, 0, g.nodes(a) - 2);
    cell[a] = c;
    frac[a] = std::clamp(s - c, 0.0, 1.0);
  }
  return true;
}

}  // namespace detail

template <int Dim>
double evaluate(const NodalField<Dim, 1>& f, std::span<const double> p) {
  std::array<int, Dim> cell;
  std::array<double, Dim> t;
  if (!detail::locate(f.grid(), p, cell, t)) return 0.0;
  double v = 0.0;
  for (int c = 0; c < (1 << Dim); ++c) {
    double w = 1.0;
    std::array<int, Dim> idx;
    for (int a = 0; a < Dim; ++a) {
      const int bit = (c >> a) & 1;
      w *= bit ? t[a] : 1.0 - t[a];
      idx[a] = cell[a] + bit;
    }
    std::size_t n;
    if constexpr (Dim == 2)
      n = f.grid().index(idx[0], idx[1]);
    else
      n = f.grid().index(idx[0], idx[1], idx[2]);
    v += w * f[n];
  }
  return v;
}

template <int Dim>
double evaluate(const NodalField<Dim, 1>& f, const std::array<double, Dim>& p) {
  return evaluate(f, std::span<const double>(p));
}

/// Value, gradient and mixed second derivatives (xy, xz, yz) of the
/// trilinear interpolant. Pure second derivatives vanish inside an element.
struct TrilinearSample {
  double value = 0.0;
  std::array<double, 3> grad{};
  std::array<double, 3> mixed{};
};

inline TrilinearSample sample_trilinear(const ScalarField3D& f, std::span<const double> p) {
  TrilinearSample s;
  std::array<int, 3> cell;
  std::array<double, 3> t;
  const Grid<3>& g = f.grid();
  if (!detail::locate(g, p, cell, t)) return s;
  const std::size_t sx = 1, sy = static_cast<std::size_t>(g.nodes(0)),
                    sz = static_cast<std::size_t>(g.nodes(0)) * g.nodes(1);
  const std::size_t b = g.index(cell[0], cell[1], cell[2]);
  const double v000 = f[b], v100 = f[b + sx], v010 = f[b + sy], v110 = f[b + sx + sy];
  const double v001 = f[b + sz], v101 = f[b + sx + sz], v011 = f[b + sy + sz], v111 = f[b + sx + sy + sz];
  const double x = t[0], y = t[1], z = t[2];
  // bilinear in (y,z) of x-differences etc.
  const double c00 = v000 + (v100 - v000) * x, c10 = v010 + (v110 - v010) * x;
  const double c01 = v001 + (v101 - v001) * x, c11 = v011 + (v111 - v011) * x;
  const double c0 = c00 + (c10 - c00) * y, c1 = c01 + (c11 - c01) * y;
  s.value = c0 + (c1 - c0) * z;

  const double dx00 = v100 - v000, dx10 = v110 - v010, dx01 = v101 - v001, dx11 = v111 - v011;
  const double dx0 = dx00 + (dx10 - dx00) * y, dx1 = dx01 + (dx11 - dx01) * y;
  const double hx = g.spacing(0), hy = g.spacing(1), hz = g.spacing(2);
  s.grad[0] = (dx0 + (dx1 - dx0) * z) / hx;
  const double dy0 = c10 - c00, dy1 = c11 - c01;
  s.grad[1] = (dy0 + (dy1 - dy0) * z) / hy;
  s.grad[2] = (c1 - c0) / hz;

  s.mixed[0] = ((dx10 - dx00) + ((dx11 - dx01) - (dx10 - dx00)) * z) / (hx * hy);
  s.mixed[1] = (dx1 - dx0) / (hx * hz);
  s.mixed[2] = (dy1 - dy0) / (hy * hz);
  return s;
}

inline std::array<double, 3> gradient_at(const ScalarField3D& f, const std::array<double, 3>& p) {
  return sample_trilinear(f, p).grad;
}

/// Vector-valued evaluation of a deformation at a point of its own box.
inline std::array<double, 3> evaluate(const Deformation& y, const std::array<double, 3>& p) {
  std::array<int, 3> cell;
  std::array<double, 3> t;
  std::array<double, 3> v{};
  if (!detail::locate(y.grid(), std::span<const double>(p), cell, t)) return v;
  for (int c = 0; c < 8; ++c) {
    double w = 1.0;
    for (int a = 0; a < 3; ++a) w *= ((c >> a) & 1) ? t[a] : 1.0 - t[a];
    const std::size_t n = y.grid().index(cell[0] + (c & 1), cell[1] + ((c >> 1) & 1), cell[2] + ((c >> 2) & 1));
    for (int a = 0; a < 3; ++a) v[a] += w * y.at(n, a);
  }
  return v;
}

// ---------------------------------------------------------------------------
// Composition u o y

enum class Sampling { nodes, quadrature_points };

/// Samples u(y(x)) at all nodes of y's grid, or at all Gauss points of its
/// elements (element-major, 8 points per element).
inline std::vector<double> compose(const ScalarField3D& u, const Deformation& y, Sampling where) {
  const Grid<3>& g = y.grid();
  if (where == Sampling::nodes) {
    std::vector<double> out(g.node_count());
    for (std::size_t n = 0; n < out.size(); ++n) {
      const std::array<double, 3> p{y.at(n, 0), y.at(n, 1), y.at(n, 2)};
      out[n] = evaluate(u, p);
    }
    return out;
  }
  const auto& shapes = gauss2_shapes<3>();
  std::vector<double> out(g.element_count() * 8);
  for (std::size_t e = 0; e < g.element_count(); ++e) {
    const auto corners = element_corners(g, e);
    for (int q = 0; q < 8; ++q) {
      std::array<double, 3> p{};
      for (int c = 0; c < 8; ++c)
        for (int a = 0; a < 3; ++a) p[a] += shapes.value[q][c] * y.at(corners[c], a);
      out[e * 8 + q] = evaluate(u, p);
    }
  }
  return out;
}

inline ScalarField3D compose_nodes(const ScalarField3D& u, const Deformation& y) {
  return ScalarField3D(y.grid(), compose(u, y, Sampling::nodes));
}

}  // namespace dfreg
