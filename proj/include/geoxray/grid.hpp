// Structured grids on M with second-order difference operators.
//
// Disk: polar nodes ρ_i = (i + ½)h, h = 1/(n − ½), so the last ring sits on
// ∂M and the first ring's inward neighbour is its mirror image across the
// centre. Annulus: r_i = −R + i·h including both boundary circles, s periodic.
#pragma once

#include <memory>

#include <Eigen/Sparse>

#include "geoxray/surface.hpp"

namespace geox {

using SpMat = Eigen::SparseMatrix<double, Eigen::RowMajor>;

struct Grid {
  ChartKind kind = ChartKind::ConformalDisk;
  int n_radial = 0, n_angular = 0;
  double h = 0;   // radial step
  double da = 0;  // angular step
  double R = 1;
  std::vector<Vec2> nodes;
  std::vector<double> weights;  // dvol quadrature weights
  std::vector<char> boundary;   // node lies on ∂M

  std::size_t size() const { return nodes.size(); }
  std::size_t index(int i, int j) const {
    const int jj = ((j % n_angular) + n_angular) % n_angular;
    return static_cast<std::size_t>(i) * n_angular + jj;
  }
  double radial(int i) const { return kind == ChartKind::ConformalDisk ? (i + 0.5) * h : -R + i * h; }
  double angular(int j) const { return j * da; }
};

inline Grid make_grid(const SurfaceModel& m, int n_radial, int n_angular) {
  if (n_radial < 4 || n_angular < 8 || n_angular % 2 != 0)
    throw PreconditionError("make_grid: need n_radial >= 4 and even n_angular >= 8");
  Grid g;
  g.kind = m.kind;
  g.n_radial = n_radial;
  g.n_angular = n_angular;
  g.da = two_pi / n_angular;
  g.R = m.R;
  g.h = m.kind == ChartKind::ConformalDisk ? 1.0 / (n_radial - 0.5) : 2.0 * m.R / (n_radial - 1);
  for (int i = 0; i < n_radial; ++i)
    for (int j = 0; j < n_angular; ++j) {
      const double r = g.radial(i), a = g.angular(j);
      const bool last = i == n_radial - 1;
      if (m.kind == ChartKind::ConformalDisk) {
        const Vec2 q = last ? unit_dir(a) : Vec2{r * std::cos(a), r * std::sin(a)};
        g.nodes.push_back(q);
        // Cells [ih, (i+1)h]; the boundary ring keeps the half cell [1 − h/2, 1].
        const double w = last ? 0.5 * g.h * (1.0 - 0.25 * g.h) : g.h * r;
        g.weights.push_back(w * g.da * area_density(m, q));
        g.boundary.push_back(last);
      } else {
        const Vec2 q{r, a};
        g.nodes.push_back(q);
        const bool edge = i == 0 || last;
        g.weights.push_back((edge ? 0.5 : 1.0) * g.h * g.da * area_density(m, q));
        g.boundary.push_back(edge);
      }
    }
  return g;
}

/// Chart-derivative matrices ∂_x, ∂_y (or ∂_r, ∂_s) acting on nodal values.
inline std::pair<SpMat, SpMat> derivative_matrices(const Grid& g) {
  const std::size_t N = g.size();
  std::vector<Eigen::Triplet<double>> tr_rad, tr_ang;
  const int n = g.n_radial;
  for (int i = 0; i < n; ++i)
    for (int j = 0; j < g.n_angular; ++j) {
      const auto row = static_cast<int>(g.index(i, j));
      auto rad = [&](int ii, int jj, double c) { tr_rad.emplace_back(row, static_cast<int>(g.index(ii, jj)), c / (2 * g.h)); };
      if (i == n - 1) {
        rad(n - 1, j, 3.0);
        rad(n - 2, j, -4.0);
        rad(n - 3, j, 1.0);
      } else if (i == 0 && g.kind == ChartKind::WarpedAnnulus) {
        rad(0, j, -3.0);
        rad(1, j, 4.0);
        rad(2, j, -1.0);
      } else if (i == 0) {
        rad(1, j, 1.0);
        rad(0, j + g.n_angular / 2, -1.0);  // mirror node at ρ = −h/2
      } else {
        rad(i + 1, j, 1.0);
        rad(i - 1, j, -1.0);
      }
      tr_ang.emplace_back(row, static_cast<int>(g.index(i, j + 1)), 1.0 / (2 * g.da));
      tr_ang.emplace_back(row, static_cast<int>(g.index(i, j - 1)), -1.0 / (2 * g.da));
    }
  SpMat d_rad(N, N), d_ang(N, N);
  d_rad.setFromTriplets(tr_rad.begin(), tr_rad.end());
  d_ang.setFromTriplets(tr_ang.begin(), tr_ang.end());
  if (g.kind == ChartKind::WarpedAnnulus) return {d_rad, d_ang};

  // Chain rule: ∂x = cos α ∂ρ − (sin α/ρ) ∂α, ∂y = sin α ∂ρ + (cos α/ρ) ∂α.
  Eigen::VectorXd ca(N), sa(N), ir(N);
  for (int i = 0; i < n; ++i)
    for (int j = 0; j < g.n_angular; ++j) {
      const std::size_t k = g.index(i, j);
      ca[k] = std::cos(g.angular(j));
      sa[k] = std::sin(g.angular(j));
      ir[k] = 1.0 / (i == n - 1 ? 1.0 : g.radial(i));
    }
  SpMat dx = ca.asDiagonal() * d_rad - (sa.cwiseProduct(ir)).asDiagonal() * d_ang;
  SpMat dy = sa.asDiagonal() * d_rad + (ca.cwiseProduct(ir)).asDiagonal() * d_ang;
  return {dx, dy};
}

/// A grid together with the geometric data the difference operators need.
struct Discretization {
  SurfaceModel model;
  Grid grid;
  SpMat dx, dy;
  std::vector<Christoffel> gamma;
  std::vector<Mat2> ginv;
};

using DiscPtr = std::shared_ptr<const Discretization>;

inline DiscPtr discretize(const SurfaceModel& m, int n_radial, int n_angular) {
  auto d = std::make_shared<Discretization>();
  d->model = m;
  d->grid = make_grid(m, n_radial, n_angular);
  std::tie(d->dx, d->dy) = derivative_matrices(d->grid);
  for (const Vec2& q : d->grid.nodes) {
    d->gamma.push_back(christoffel_at(m, q));
    d->ginv.push_back(inverse_metric_at(m, q));
  }
  return d;
}

}  // namespace geox
