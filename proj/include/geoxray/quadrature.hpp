// Quadrature on M and on SM with respect to dvol and the Liouville measure
// dμ = dvol × dθ (θ the orthonormal-frame angle).
#pragma once

#include <vector>

#include "geoxray/surface.hpp"

namespace geox {

struct SpatialQuadrature {
  std::vector<Vec2> nodes;       // chart coordinates
  std::vector<double> weights;   // dvol weights (area density included)
  int n_radial = 0, n_angular = 0;
};

/// Gauss-Legendre in the radial coordinate (ρ ∈ [0,1] for the disk, r ∈ [−R,R]
/// for the annulus) and the periodic trapezoid rule in the angular coordinate.
inline SpatialQuadrature spatial_quadrature(const SurfaceModel& m, int n_radial, int n_angular) {
  if (n_radial < 2 || n_angular < 4) throw PreconditionError("spatial_quadrature: resolution too small");
  SpatialQuadrature sq;
  sq.n_radial = n_radial;
  sq.n_angular = n_angular;
  const double da = two_pi / n_angular;
  if (m.kind == ChartKind::ConformalDisk) {
    const GaussRule g = gauss_legendre(n_radial, 0.0, 1.0);
    for (int i = 0; i < n_radial; ++i)
      for (int j = 0; j < n_angular; ++j) {
        const double a = (j + 0.5) * da;
        const Vec2 q{g.nodes[i] * std::cos(a), g.nodes[i] * std::sin(a)};
        sq.nodes.push_back(q);
        sq.weights.push_back(g.weights[i] * g.nodes[i] * da * area_density(m, q));
      }
  } else {
    const GaussRule g = gauss_legendre(n_radial, -m.R, m.R);
    for (int i = 0; i < n_radial; ++i)
      for (int j = 0; j < n_angular; ++j) {
        const Vec2 q{g.nodes[i], (j + 0.5) * da};
        sq.nodes.push_back(q);
        sq.weights.push_back(g.weights[i] * da * area_density(m, q));
      }
  }
  return sq;
}

/// Spatial quadrature × uniform fiber angles.
struct SMQuadrature {
  SpatialQuadrature space;
  int n_fiber = 0;

  std::size_t size() const { return space.nodes.size() * static_cast<std::size_t>(n_fiber); }
  double fiber_angle(int k) const { return two_pi * k / n_fiber; }
  double fiber_weight() const { return two_pi / n_fiber; }
};

inline SMQuadrature sm_quadrature(const SurfaceModel& m, int n_radial, int n_angular, int n_fiber) {
  if (n_fiber < 4) throw PreconditionError("sm_quadrature: need at least 4 fiber angles");
  return SMQuadrature{spatial_quadrature(m, n_radial, n_angular), n_fiber};
}

inline double area(const SurfaceModel& m, int n = 64) {
  const SpatialQuadrature sq = spatial_quadrature(m, n, 2 * n);
  return ordered_sum(sq.weights);
}

}  // namespace geox
