// Metric families on planar charts and their differential geometry.
//
// Two chart types are supported:
//   * ConformalDisk  g = e^{2λ(x,y)} (dx² + dy²) on the unit disk,
//   * WarpedAnnulus  g = dr² + f(r)² ds²      on r ∈ [−R, R], s ∈ [0, 2π).
// The extended manifold M_e is the same closed-form metric evaluated on the
// chart enlarged by the extension margin ε.
#pragma once

#include <functional>
#include <string>
#include <vector>

#include "geoxray/common.hpp"

namespace geox {

enum class ChartKind { ConformalDisk, WarpedAnnulus };

/// λ and its first and second partial derivatives at a point.
struct ConformalJet {
  double value = 0, dx = 0, dy = 0, dxx = 0, dxy = 0, dyy = 0;
};

/// f and its first two derivatives at r.
struct WarpJet {
  double value = 1, d1 = 0, d2 = 0;
};

struct SurfaceModel {
  ChartKind kind = ChartKind::ConformalDisk;
  std::string name;
  std::function<ConformalJet(double, double)> conformal_lambda;
  std::function<WarpJet(double)> warp_profile;
  double R = 1.0;                  // annulus half-width; the disk radius is always 1
  double extension_margin = 0.25;  // ε
  double default_t_max = 40.0;     // trapped-classification horizon
  double mass_decay_t_max = 4.0;   // horizon used by the V(t) experiment
};

/// Γ^i_{jk} stored as g[i][j][k].
struct Christoffel {
  double g[2][2][2] = {};
};

// ---------------------------------------------------------------------------
// Domain predicates

inline bool in_extended_chart(const SurfaceModel& m, const Vec2& q) {
  if (m.kind == ChartKind::ConformalDisk) {
    const double rr = 1.0 + m.extension_margin;
    return q[0] * q[0] + q[1] * q[1] <= rr * rr * (1.0 + 1e-12);
  }
  return std::abs(q[0]) <= (m.R + m.extension_margin) * (1.0 + 1e-12);
}

inline void require_in_chart(const SurfaceModel& m, const Vec2& q) {
  if (!in_extended_chart(m, q))
    throw DomainError("point (" + std::to_string(q[0]) + ", " + std::to_string(q[1]) +
                      ") outside extended chart of '" + m.name + "'");
}

/// Smooth function positive in the interior of M, zero on ∂M, negative outside.
inline double boundary_defining(const SurfaceModel& m, const Vec2& q) {
  if (m.kind == ChartKind::ConformalDisk) return 0.5 * (1.0 - q[0] * q[0] - q[1] * q[1]);
  return 0.5 * (m.R * m.R - q[0] * q[0]) / m.R;
}

/// Same for the extended manifold M_e.
inline double extended_boundary_defining(const SurfaceModel& m, const Vec2& q) {
  if (m.kind == ChartKind::ConformalDisk) {
    const double rr = 1.0 + m.extension_margin;
    return 0.5 * (rr * rr - q[0] * q[0] - q[1] * q[1]);
  }
  const double rr = m.R + m.extension_margin;
  return 0.5 * (rr * rr - q[0] * q[0]) / rr;
}

inline bool in_manifold(const SurfaceModel& m, const Vec2& q, double tol = 1e-12) {
  return boundary_defining(m, q) >= -tol;
}

// ---------------------------------------------------------------------------
// Metric data

inline Mat2 metric_at(const SurfaceModel& m, const Vec2& q) {
  require_in_chart(m, q);
  if (m.kind == ChartKind::ConformalDisk) {
    const double e2 = std::exp(2.0 * m.conformal_lambda(q[0], q[1]).value);
    return {{{e2, 0.0}, {0.0, e2}}};
  }
  const double f = m.warp_profile(q[0]).value;
  return {{{1.0, 0.0}, {0.0, f * f}}};
}

inline Mat2 inverse_metric_at(const SurfaceModel& m, const Vec2& q) {
  const Mat2 g = metric_at(m, q);
  return {{{1.0 / g[0][0], 0.0}, {0.0, 1.0 / g[1][1]}}};
}

/// Riemannian area density √det g.
inline double area_density(const SurfaceModel& m, const Vec2& q) {
  if (m.kind == ChartKind::ConformalDisk) return std::exp(2.0 * m.conformal_lambda(q[0], q[1]).value);
  return m.warp_profile(q[0]).value;
}

/// Chart components of the orthonormal frame: e_1 = a ∂_0, e_2 = b ∂_1.
/// A unit vector with frame angle θ has chart components (a cos θ, b sin θ).
inline Vec2 frame_scale(const SurfaceModel& m, const Vec2& q) {
  if (m.kind == ChartKind::ConformalDisk) {
    const double e = std::exp(-m.conformal_lambda(q[0], q[1]).value);
    return {e, e};
  }
  return {1.0, 1.0 / m.warp_profile(q[0]).value};
}

inline Vec2 unit_vector(const SurfaceModel& m, const Vec2& q, double theta) {
  const Vec2 a = frame_scale(m, q);
  const Vec2 d = unit_dir(theta);
  return {a[0] * d[0], a[1] * d[1]};
}

inline Christoffel christoffel_at(const SurfaceModel& m, const Vec2& q) {
  require_in_chart(m, q);
  Christoffel c;
  if (m.kind == ChartKind::ConformalDisk) {
    const ConformalJet l = m.conformal_lambda(q[0], q[1]);
    c.g[0][0][0] = l.dx;
    c.g[0][1][1] = -l.dx;
    c.g[0][0][1] = c.g[0][1][0] = l.dy;
    c.g[1][0][0] = -l.dy;
    c.g[1][1][1] = l.dy;
    c.g[1][0][1] = c.g[1][1][0] = l.dx;
    return c;
  }
  const WarpJet f = m.warp_profile(q[0]);
  c.g[0][1][1] = -f.value * f.d1;
  c.g[1][0][1] = c.g[1][1][0] = f.d1 / f.value;
  return c;
}

inline double gauss_curvature(const SurfaceModel& m, const Vec2& q) {
  require_in_chart(m, q);
  if (m.kind == ChartKind::ConformalDisk) {
    const ConformalJet l = m.conformal_lambda(q[0], q[1]);
    return -std::exp(-2.0 * l.value) * (l.dxx + l.dyy);
  }
  const WarpJet f = m.warp_profile(q[0]);
  return -f.d2 / f.value;
}

/// dθ/dt along a unit-speed geodesic, θ the orthonormal-frame angle.
inline double geodesic_turn_rate(const SurfaceModel& m, const Vec2& q, const Vec2& dir) {
  if (m.kind == ChartKind::ConformalDisk) {
    const ConformalJet l = m.conformal_lambda(q[0], q[1]);
    return std::exp(-l.value) * (l.dy * dir[0] - l.dx * dir[1]);
  }
  const WarpJet f = m.warp_profile(q[0]);
  return -(f.d1 / f.value) * dir[1];
}

// ---------------------------------------------------------------------------
// Boundary

struct BoundaryPoint {
  int component = 0;
  double param = 0;         // position parameter in [0, 2π)
  Vec2 q{};                 // chart coordinates
  double normal_angle = 0;  // frame angle of the outward unit normal
  double arc_density = 0;   // boundary arc length per unit param
};

inline int boundary_components(const SurfaceModel& m) {
  return m.kind == ChartKind::ConformalDisk ? 1 : 2;
}

inline BoundaryPoint boundary_point(const SurfaceModel& m, int component, double param) {
  BoundaryPoint b;
  b.component = component;
  b.param = wrap_angle(param);
  if (m.kind == ChartKind::ConformalDisk) {
    b.q = {std::cos(b.param), std::sin(b.param)};
    b.normal_angle = b.param;
    b.arc_density = std::exp(m.conformal_lambda(b.q[0], b.q[1]).value);
    return b;
  }
  const double r = component == 0 ? m.R : -m.R;
  b.q = {r, b.param};
  b.normal_angle = component == 0 ? 0.0 : pi;
  b.arc_density = m.warp_profile(r).value;
  return b;
}

/// Boundary point nearest to q (q is assumed to lie on ∂M up to tolerance).
inline BoundaryPoint locate_on_boundary(const SurfaceModel& m, const Vec2& q) {
  if (m.kind == ChartKind::ConformalDisk) return boundary_point(m, 0, std::atan2(q[1], q[0]));
  return boundary_point(m, q[0] >= 0 ? 0 : 1, q[1]);
}

struct ConvexityReport {
  std::vector<double> values;  // second fundamental form w.r.t. inward normal
  bool convex = true;
};

/// Second fundamental form of ∂M at n_samples equispaced points per component.
inline ConvexityReport boundary_convexity(const SurfaceModel& m, int n_samples) {
  if (n_samples < 8) throw PreconditionError("boundary_convexity: need at least 8 samples");
  ConvexityReport rep;
  for (int c = 0; c < boundary_components(m); ++c) {
    for (int i = 0; i < n_samples; ++i) {
      const BoundaryPoint b = boundary_point(m, c, two_pi * i / n_samples);
      double ii;
      if (m.kind == ChartKind::ConformalDisk) {
        const ConformalJet l = m.conformal_lambda(b.q[0], b.q[1]);
        ii = std::exp(-l.value) * (1.0 + l.dx * b.q[0] + l.dy * b.q[1]);
      } else {
        const WarpJet f = m.warp_profile(b.q[0]);
        ii = (c == 0 ? 1.0 : -1.0) * f.d1 / f.value;
      }
      rep.values.push_back(ii);
      if (!(ii > 0.0)) rep.convex = false;
    }
  }
  return rep;
}

// ---------------------------------------------------------------------------
// Presets

inline SurfaceModel make_conformal_disk(std::string name, std::function<ConformalJet(double, double)> lambda,
                                        double margin = 0.25) {
  if (!(margin > 0)) throw PreconditionError("extension margin must be positive");
  SurfaceModel m;
  m.kind = ChartKind::ConformalDisk;
  m.name = std::move(name);
  m.conformal_lambda = std::move(lambda);
  m.extension_margin = margin;
  m.default_t_max = 40.0;
  m.mass_decay_t_max = 4.0;
  return m;
}

inline SurfaceModel make_warped_annulus(std::string name, std::function<WarpJet(double)> profile, double R,
                                        double margin = 0.25) {
  if (!(R > 0) || !(margin > 0)) throw PreconditionError("annulus half-width and margin must be positive");
  for (int i = 0; i <= 200; ++i) {
    const double r = -(R + margin) + 2.0 * (R + margin) * i / 200.0;
    if (!(profile(r).value > 0)) throw PreconditionError("warp profile must be strictly positive");
  }
  SurfaceModel m;
  m.kind = ChartKind::WarpedAnnulus;
  m.name = std::move(name);
  m.warp_profile = std::move(profile);
  m.R = R;
  m.extension_margin = margin;
  m.default_t_max = 40.0;
  m.mass_decay_t_max = 12.5;
  return m;
}

inline SurfaceModel flat_disk() {
  return make_conformal_disk("flat-disk", [](double, double) { return ConformalJet{}; });
}

/// Gaussian bump in λ, off-centre so the model has no rotational symmetry.
inline SurfaceModel bump_disk(double amplitude = 0.25, double width = 0.35, Vec2 centre = {0.15, -0.1}) {
  const double s2 = width * width;
  return make_conformal_disk("bump-disk", [=](double x, double y) {
    const double dx = x - centre[0], dy = y - centre[1];
    const double e = amplitude * std::exp(-(dx * dx + dy * dy) / (2.0 * s2));
    ConformalJet j;
    j.value = e;
    j.dx = -dx / s2 * e;
    j.dy = -dy / s2 * e;
    j.dxx = (dx * dx / (s2 * s2) - 1.0 / s2) * e;
    j.dyy = (dy * dy / (s2 * s2) - 1.0 / s2) * e;
    j.dxy = dx * dy / (s2 * s2) * e;
    return j;
  });
}

/// Poincaré disk rescaled by s: λ = log(2s / (1 − s²|x|²)), curvature −1.
inline SurfaceModel poincare_disk(double s = 0.5) {
  return make_conformal_disk("poincare-disk", [=](double x, double y) {
    const double s2 = s * s;
    const double d = 1.0 - s2 * (x * x + y * y);
    ConformalJet j;
    j.value = std::log(2.0 * s / d);
    j.dx = 2.0 * s2 * x / d;
    j.dy = 2.0 * s2 * y / d;
    j.dxx = 2.0 * s2 / d + 4.0 * s2 * s2 * x * x / (d * d);
    j.dyy = 2.0 * s2 / d + 4.0 * s2 * s2 * y * y / (d * d);
    j.dxy = 4.0 * s2 * s2 * x * y / (d * d);
    return j;
  });
}

/// f(r) = cosh r: constant curvature −1 with a closed hyperbolic geodesic at r = 0.
inline SurfaceModel hyperbolic_cylinder(double R = 1.0, double margin = 0.25) {
  return make_warped_annulus(
      "hyperbolic-cylinder", [](double r) { return WarpJet{std::cosh(r), std::sinh(r), std::cosh(r)}; }, R,
      margin);
}

inline std::vector<std::string> preset_names() {
  return {"flat-disk", "bump-disk", "hyperbolic-cylinder", "poincare-disk"};
}

inline SurfaceModel preset(const std::string& name) {
  if (name == "flat-disk") return flat_disk();
  if (name == "bump-disk") return bump_disk();
  if (name == "hyperbolic-cylinder") return hyperbolic_cylinder();
  if (name == "poincare-disk") return poincare_disk();
  throw PreconditionError("unknown preset '" + name + "'");
}

}  // namespace geox
