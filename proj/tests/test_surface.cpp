#include <gtest/gtest.h>

#include "geoxray/surface.hpp"

using namespace geox;

namespace {

SurfaceModel parabola_annulus() {
  return make_warped_annulus("parabola", [](double r) { return WarpJet{1.0 + r * r, 2.0 * r, 2.0}; }, 1.0);
}

// max_ijk |∂_k g_ij − Γ^l_{ki} g_lj − Γ^l_{kj} g_il| with ∂_k g by central differences.
double compatibility_residual(const SurfaceModel& m, const Vec2& q, double h) {
  const Christoffel c = christoffel_at(m, q);
  const Mat2 g = metric_at(m, q);
  double worst = 0;
  for (int k = 0; k < 2; ++k) {
    Vec2 qp = q, qm = q;
    qp[k] += h;
    qm[k] -= h;
    const Mat2 gp = metric_at(m, qp), gm = metric_at(m, qm);
    for (int i = 0; i < 2; ++i)
      for (int j = 0; j < 2; ++j) {
        double r = (gp[i][j] - gm[i][j]) / (2 * h);
        for (int l = 0; l < 2; ++l) r -= c.g[l][k][i] * g[l][j] + c.g[l][k][j] * g[i][l];
        worst = std::max(worst, std::abs(r));
      }
  }
  return worst;
}

// Brioschi formula for an orthogonal metric E du² + G dv², derivatives by
// central differences of metric_at only.
double brioschi_curvature(const SurfaceModel& m, const Vec2& q, double h) {
  auto E = [&](Vec2 p) { return metric_at(m, p)[0][0]; };
  auto G = [&](Vec2 p) { return metric_at(m, p)[1][1]; };
  auto term_u = [&](Vec2 p) {  // G_u / √(EG)
    const double gu = (G({p[0] + h, p[1]}) - G({p[0] - h, p[1]})) / (2 * h);
    return gu / std::sqrt(E(p) * G(p));
  };
  auto term_v = [&](Vec2 p) {  // E_v / √(EG)
    const double ev = (E({p[0], p[1] + h}) - E({p[0], p[1] - h})) / (2 * h);
    return ev / std::sqrt(E(p) * G(p));
  };
  const double du = (term_u({q[0] + h, q[1]}) - term_u({q[0] - h, q[1]})) / (2 * h);
  const double dv = (term_v({q[0], q[1] + h}) - term_v({q[0], q[1] - h})) / (2 * h);
  return -(du + dv) / (2.0 * std::sqrt(E(q) * G(q)));
}

}  // namespace

TEST(Surface, MetricExamples) {
  const Mat2 g = metric_at(flat_disk(), {0.3, 0.1});
  EXPECT_DOUBLE_EQ(g[0][0], 1.0);
  EXPECT_DOUBLE_EQ(g[1][1], 1.0);
  EXPECT_DOUBLE_EQ(g[0][1], 0.0);

  const SurfaceModel cyl = hyperbolic_cylinder();
  const Mat2 g0 = metric_at(cyl, {0.0, 1.0});
  EXPECT_DOUBLE_EQ(g0[0][0], 1.0);
  EXPECT_DOUBLE_EQ(g0[1][1], 1.0);
  const Mat2 g1 = metric_at(cyl, {1.0, 0.0});
  EXPECT_NEAR(g1[1][1], std::cosh(1.0) * std::cosh(1.0), 1e-14);
  EXPECT_NEAR(g1[1][1], 2.3810978455418157, 1e-12);
}

TEST(Surface, OutsideExtendedChartThrows) {
  EXPECT_THROW(metric_at(flat_disk(), {1.3, 0.0}), DomainError);
  EXPECT_NO_THROW(metric_at(flat_disk(), {1.2, 0.0}));
  EXPECT_THROW(christoffel_at(hyperbolic_cylinder(), {1.3, 0.0}), DomainError);
  EXPECT_THROW(gauss_curvature(hyperbolic_cylinder(), {-1.26, 0.0}), DomainError);
}

TEST(Surface, ChristoffelExamples) {
  const Christoffel c = christoffel_at(flat_disk(), {0.2, -0.4});
  for (auto& a : c.g)
    for (auto& b : a)
      for (double v : b) EXPECT_EQ(v, 0.0);
  const SurfaceModel cyl = hyperbolic_cylinder();
  EXPECT_EQ(christoffel_at(cyl, {0.0, 0.0}).g[0][1][1], 0.0);
  const Christoffel c5 = christoffel_at(cyl, {0.5, 2.0});
  EXPECT_NEAR(c5.g[1][0][1], std::tanh(0.5), 1e-15);
  EXPECT_NEAR(c5.g[1][1][0], 0.46211715726000974, 1e-14);
}

TEST(Surface, MetricCompatibilitySecondOrder) {
  for (const SurfaceModel& m : {bump_disk(), poincare_disk(), hyperbolic_cylinder(), parabola_annulus()}) {
    const Vec2 q = m.kind == ChartKind::ConformalDisk ? Vec2{0.31, -0.22} : Vec2{0.4, 1.1};
    const double r1 = compatibility_residual(m, q, 1e-2);
    const double r2 = compatibility_residual(m, q, 5e-3);
    EXPECT_LT(r1, 1e-3) << m.name;
    EXPECT_GT(r1 / r2, 3.5) << m.name;  // h² rate
  }
}

TEST(Surface, CurvatureExamples) {
  EXPECT_EQ(gauss_curvature(flat_disk(), {0.5, 0.5}), 0.0);
  const SurfaceModel cyl = hyperbolic_cylinder();
  for (double r : {-1.2, -0.5, 0.0, 0.3, 1.0, 1.25}) EXPECT_NEAR(gauss_curvature(cyl, {r, 0.7}), -1.0, 1e-8);
}

TEST(Surface, PoincareCurvatureAgainstFiniteDifferenceLaplacian) {
  const SurfaceModel m = poincare_disk();
  const double h = 1e-3;
  for (Vec2 q : {Vec2{0.0, 0.0}, Vec2{0.4, -0.3}, Vec2{-0.7, 0.5}}) {
    auto lam = [&](double x, double y) { return m.conformal_lambda(x, y).value; };
    const double lap = (lam(q[0] + h, q[1]) + lam(q[0] - h, q[1]) + lam(q[0], q[1] + h) + lam(q[0], q[1] - h) -
                        4 * lam(q[0], q[1])) /
                       (h * h);
    const double k_fd = -std::exp(-2 * lam(q[0], q[1])) * lap;
    EXPECT_NEAR(k_fd, -1.0, 1e-5);
    EXPECT_NEAR(gauss_curvature(m, q), -1.0, 1e-12);
  }
}

TEST(Surface, CurvatureMatchesBrioschi) {
  for (const SurfaceModel& m : {bump_disk(), poincare_disk(), hyperbolic_cylinder(), parabola_annulus()}) {
    const Vec2 q = m.kind == ChartKind::ConformalDisk ? Vec2{0.1, 0.05} : Vec2{0.6, 2.0};
    const double k = gauss_curvature(m, q);
    const double e1 = std::abs(brioschi_curvature(m, q, 1e-2) - k);
    const double e2 = std::abs(brioschi_curvature(m, q, 5e-3) - k);
    EXPECT_LT(e1, 5e-3) << m.name;
    EXPECT_GT(e1 / e2, 3.0) << m.name;
  }
}

TEST(Surface, BoundaryConvexity) {
  const ConvexityReport flat = boundary_convexity(flat_disk(), 16);
  ASSERT_EQ(flat.values.size(), 16u);
  for (double v : flat.values) EXPECT_NEAR(v, 1.0, 1e-15);
  EXPECT_TRUE(flat.convex);

  const ConvexityReport cyl = boundary_convexity(hyperbolic_cylinder(), 8);
  ASSERT_EQ(cyl.values.size(), 16u);  // two boundary circles
  for (double v : cyl.values) EXPECT_NEAR(v, std::tanh(1.0), 1e-15);
  EXPECT_TRUE(cyl.convex);

  const ConvexityReport par = boundary_convexity(parabola_annulus(), 8);
  for (double v : par.values) EXPECT_NEAR(v, 1.0, 1e-15);

  EXPECT_TRUE(boundary_convexity(bump_disk(), 64).convex);
  EXPECT_TRUE(boundary_convexity(poincare_disk(), 64).convex);
  EXPECT_THROW(boundary_convexity(flat_disk(), 7), PreconditionError);
}

TEST(Surface, NonConvexModelIsFlaggedNotThrown) {
  // f(r) = 2 − r² bends the wrong way at r = ±1.
  const SurfaceModel m =
      make_warped_annulus("concave", [](double r) { return WarpJet{2.0 - r * r, -2.0 * r, -2.0}; }, 1.0);
  const ConvexityReport rep = boundary_convexity(m, 8);
  EXPECT_FALSE(rep.convex);
}

TEST(Surface, WarpProfileMustBePositive) {
  EXPECT_THROW(make_warped_annulus("bad", [](double r) { return WarpJet{r, 1.0, 0.0}; }, 1.0), PreconditionError);
  EXPECT_THROW(preset("no-such-preset"), PreconditionError);
}
