#include <gtest/gtest.h>

#include <random>

#include "geoxray/tensors.hpp"

using namespace geox;

namespace {

ScalarJet coord_x(const Vec2& q) { return {q[0], 1.0, 0.0}; }

// p₀ = x(1 − x² − y²), vanishing on the unit circle.
ScalarJet bubble_x(const Vec2& q) {
  const double x = q[0], y = q[1], b = 1 - x * x - y * y;
  return {x * b, b - 2 * x * x, -2 * x * y};
}

TensorField scalar(std::function<ScalarJet(const Vec2&)> f) { return component_field(0, 0, std::move(f)); }

// Smooth order-m field with random trigonometric components.
TensorField random_field(int m, unsigned seed) {
  std::mt19937 rng(seed);
  std::uniform_real_distribution<double> U(-1, 1);
  std::vector<std::array<double, 5>> c(m + 1);
  for (auto& a : c)
    for (double& x : a) x = U(rng);
  return {m, [c, m](const Vec2& q, double* v, double* dx, double* dy) {
            for (int k = 0; k <= m; ++k) {
              const auto& a = c[k];
              const double s = std::sin(a[1] * q[0] + a[2] * q[1] + a[3]);
              const double co = std::cos(a[1] * q[0] + a[2] * q[1] + a[3]);
              v[k] = a[0] * s + a[4] * q[0] * q[1];
              if (dx) {
                dx[k] = a[0] * a[1] * co + a[4] * q[1];
                dy[k] = a[0] * a[2] * co + a[4] * q[0];
              }
            }
          }};
}

// Brute-force ⟨π_{m*}u, f⟩_g = ∫ u f(v^m) dθ oracle for a tensor at one point.
double fiber_pairing(const SurfaceModel& model, const Vec2& q, const std::function<double(double)>& u,
                     const double* f, int m) {
  const GaussRule r = gauss_legendre(64, 0.0, two_pi);
  double s = 0;
  for (std::size_t j = 0; j < r.nodes.size(); ++j)
    s += r.weights[j] * u(r.nodes[j]) * pullback_at(model, q, r.nodes[j], f, m);
  return s;
}

}  // namespace

TEST(Tensors, ContractionAndInnerProduct) {
  const double f[3] = {1.0, 2.0, 3.0};  // f_xx, f_xy, f_yy
  EXPECT_DOUBLE_EQ(contract(f, 2, {1.0, 1.0}), 1 + 4 + 3);
  const Mat2 id{{{1, 0}, {0, 1}}};
  EXPECT_DOUBLE_EQ(tensor_inner(f, f, 2, id), 1 + 2 * 4 + 9);
  // Diagonal metric: ⟨f,f⟩ = Σ_c C(m,c) f̂_c².
  const SurfaceModel cyl = hyperbolic_cylinder();
  const Vec2 q{0.7, 1.0};
  double fh[3];
  to_frame(f, 2, frame_scale(cyl, q), fh);
  EXPECT_NEAR(tensor_inner(f, f, 2, inverse_metric_at(cyl, q)), fh[0] * fh[0] + 2 * fh[1] * fh[1] + fh[2] * fh[2],
              1e-13);
}

TEST(Tensors, PullbackExamples) {
  const DiscPtr d = discretize(flat_disk(), 6, 8);
  SymTensorField dx(d, 1);
  for (std::size_t n = 0; n < dx.size(); ++n) dx.node(n)[0] = 1.0;
  const FiberField u = pullback(dx);
  for (std::size_t n = 0; n < u.size(); ++n) {
    EXPECT_NEAR(u.at(n, 1).real(), 0.5, 1e-14);
    EXPECT_NEAR(u.at(n, -1).real(), 0.5, 1e-14);
    EXPECT_NEAR(std::abs(u.at(n, 0)), 0.0, 1e-14);
  }
  SymTensorField dxdx(d, 2);
  for (std::size_t n = 0; n < dxdx.size(); ++n) dxdx.node(n)[0] = 1.0;
  const FiberField w = pullback(dxdx);
  EXPECT_NEAR(w.at(3, 0).real(), 0.5, 1e-14);
  EXPECT_NEAR(w.at(3, 2).real(), 0.25, 1e-14);
  EXPECT_NEAR(std::abs(w.at(3, 1)), 0.0, 1e-14);

  SymTensorField phi(d, 0);
  for (std::size_t n = 0; n < phi.size(); ++n) phi.node(n)[0] = 2.0 + n;
  const FiberField s = pullback(phi);
  for (std::size_t n = 0; n < s.size(); ++n) EXPECT_NEAR(s.at(n, 0).real(), 2.0 + n, 1e-13);
}

TEST(Tensors, PullbackFrequencySupport) {
  const DiscPtr d = discretize(bump_disk(), 6, 8);
  for (int m = 0; m <= 4; ++m) {
    const FiberField u = pullback(sample(d, random_field(m, 3 + m)));
    for (std::size_t n = 0; n < u.size(); ++n)
      for (int k = -m; k <= m; ++k)
        if ((k + m) % 2 != 0) EXPECT_LT(std::abs(u.at(n, k)), 1e-14);
  }
}

TEST(Tensors, PushforwardExamplesAndDuality) {
  const DiscPtr d = discretize(flat_disk(), 6, 8);
  FiberField c(d->grid.nodes, 1);
  for (std::size_t n = 0; n < c.size(); ++n) c.at(n, 1) = c.at(n, -1) = 0.5;  // cos θ
  const SymTensorField t = pushforward(d, c, 1);
  EXPECT_NEAR(t.node(5)[0], pi, 1e-13);
  EXPECT_NEAR(t.node(5)[1], 0.0, 1e-13);

  FiberField one(d->grid.nodes, 0);
  for (std::size_t n = 0; n < one.size(); ++n) one.at(n, 0) = 1.0;
  EXPECT_NEAR(pushforward(d, one, 0).node(2)[0], two_pi, 1e-13);

  FiberField odd(d->grid.nodes, 3);
  for (std::size_t n = 0; n < odd.size(); ++n) {
    odd.at(n, 1) = odd.at(n, -1) = 0.3;
    odd.at(n, 3) = cplx(0.1, 0.2);
    odd.at(n, -3) = cplx(0.1, -0.2);
  }
  const SymTensorField z = pushforward(d, odd, 2);
  for (double x : z.comps) EXPECT_NEAR(x, 0.0, 1e-14);

  // ⟨π_{m*}u, f⟩_g against the brute-force fiber integral on curved models.
  std::mt19937 rng(5);
  std::uniform_real_distribution<double> U(-1, 1);
  for (const SurfaceModel& model : {bump_disk(), hyperbolic_cylinder()}) {
    const DiscPtr dc = discretize(model, 6, 8);
    for (int m = 0; m <= 3; ++m) {
      FiberField u(dc->grid.nodes, 4);
      for (std::size_t n = 0; n < u.size(); ++n)
        for (int k = 0; k <= 4; ++k) {
          u.at(n, k) = cplx(U(rng), k == 0 ? 0.0 : U(rng));
          u.at(n, -k) = std::conj(u.at(n, k));
        }
      const SymTensorField pf = pushforward(dc, u, m);
      const std::size_t n = 13;
      std::vector<double> f(m + 1);
      for (double& x : f) x = U(rng);
      const double lhs = tensor_inner(pf.node(n), f.data(), m, dc->ginv[n]);
      const double rhs = fiber_pairing(model, dc->grid.nodes[n], [&](double th) { return u.value(n, th).real(); },
                                       f.data(), m);
      EXPECT_NEAR(lhs, rhs, 1e-11 * (1 + std::abs(rhs))) << model.name << " m=" << m;
    }
  }
}

TEST(Tensors, ModeConstants) {
  // Oracle: ∫ e^{ikθ} cos^k(θ − φ) dθ = 2π 2^{−k} e^{ikφ}, i.e. c_k = 2π/2^k.
  for (const SurfaceModel& m : {flat_disk(), bump_disk(), hyperbolic_cylinder()})
    for (int k = 0; k <= 5; ++k) {
      const GaussRule r = gauss_legendre(40, 0.0, two_pi);
      const double phi = 0.7;
      cplx s{};
      for (std::size_t j = 0; j < r.nodes.size(); ++j)
        s += r.weights[j] * std::polar(1.0, k * r.nodes[j]) * std::pow(std::cos(r.nodes[j] - phi), k);
      const double oracle = (s / std::polar(1.0, k * phi)).real();
      const ModeConstant c = mode_constant(m, k);
      EXPECT_NEAR(c.value, oracle, 1e-12) << k;
      EXPECT_LT(c.spread, 1e-6);
    }
  EXPECT_NEAR(mode_constant(flat_disk(), 0).value, two_pi, 1e-13);
  EXPECT_NEAR(mode_constant(flat_disk(), 1).value, pi, 1e-13);
  EXPECT_NEAR(mode_constant(flat_disk(), 2).value, pi / 2, 1e-13);
}

TEST(Tensors, InnerDerivativeExamples) {
  const DiscPtr d = discretize(flat_disk(), 12, 24);
  const SymTensorField dx = inner_derivative(sample(d, scalar(coord_x)));
  double err = 0;
  for (std::size_t n = 0; n < dx.size(); ++n)
    err = std::max({err, std::abs(dx.node(n)[0] - 1.0), std::abs(dx.node(n)[1])});
  EXPECT_LT(err, 2e-2);  // angular stencil error O(Δα²)

  const SymTensorField z = inner_derivative(SymTensorField(d, 2));
  for (double x : z.comps) EXPECT_EQ(x, 0.0);

  SymTensorField c(d, 1);
  for (std::size_t n = 0; n < c.size(); ++n) c.node(n)[0] = 1.0;
  for (double x : inner_derivative(c).comps) EXPECT_NEAR(x, 0.0, 1e-12);
}

TEST(Tensors, DivergenceExamples) {
  const DiscPtr d = discretize(flat_disk(), 12, 24);
  SymTensorField c(d, 1);
  for (std::size_t n = 0; n < c.size(); ++n) c.node(n)[0] = 1.0;
  for (double x : divergence(c).comps) EXPECT_NEAR(x, 0.0, 1e-12);

  const TensorField xdx = component_field(1, 0, [](const Vec2& q) { return ScalarJet{q[0], 1.0, 0.0}; });
  const SymTensorField div = divergence(sample(d, xdx));
  for (std::size_t n = 0; n < div.size(); ++n)
    if (!d->grid.boundary[n]) EXPECT_NEAR(div.node(n)[0], -1.0, 2e-2);
  EXPECT_NEAR(divergence_at(flat_disk(), xdx, {0.3, 0.2})[0], -1.0, 1e-15);
  EXPECT_THROW(divergence(sample(d, scalar(coord_x))), PreconditionError);
}

TEST(Tensors, PointwiseOperatorsAgainstFiniteDifferences) {
  // D and D* from exact jets vs. central differences of the chart formula
  // ∇_k f = ∂_k f − Γ terms, with ∂_k by a 4th-order stencil.
  for (const SurfaceModel& model : {bump_disk(), hyperbolic_cylinder()})
    for (int m = 1; m <= 3; ++m) {
      const TensorField f = random_field(m, 40 + m);
      const Vec2 q = model.kind == ChartKind::ConformalDisk ? Vec2{0.2, 0.3} : Vec2{0.5, 2.0};
      const double h = 1e-3;
      std::vector<double> dx(m + 1), dy(m + 1), v = f.at(q);
      for (int c = 0; c <= m; ++c) {
        auto comp = [&](Vec2 p) { return f.at(p)[c]; };
        auto d4 = [&](int k) {
          Vec2 a = q, b = q, a2 = q, b2 = q;
          a[k] += h;
          b[k] -= h;
          a2[k] += 2 * h;
          b2[k] -= 2 * h;
          return (8 * (comp(a) - comp(b)) - (comp(a2) - comp(b2))) / (12 * h);
        };
        dx[c] = d4(0);
        dy[c] = d4(1);
      }
      std::vector<double> ref(m), got = divergence_at(model, f, q);
      divergence_at(m, christoffel_at(model, q), inverse_metric_at(model, q), v.data(), dx.data(), dy.data(),
                    ref.data());
      for (int c = 0; c < m; ++c) EXPECT_NEAR(got[c], ref[c], 1e-8);
    }
}

TEST(Tensors, GridAdjointness) {
  // D* is the formal adjoint of D: ⟨Dp, f⟩ = ⟨p, D*f⟩ when p|∂M = 0.
  const SurfaceModel model = bump_disk();
  const SpatialQuadrature sq = spatial_quadrature(model, 24, 48);
  for (int m = 1; m <= 3; ++m) {
    const TensorField f = random_field(m, 10 + m);
    const TensorField base = random_field(m - 1, 20 + m);
    const TensorField p{m - 1,
                        [base, m](const Vec2& q, double* v, double* dx, double* dy) {
                          const double b = 1 - q[0] * q[0] - q[1] * q[1];
                          base.eval(q, v, dx, dy);
                          for (int c = 0; c < m; ++c) {
                            if (dx) {
                              dx[c] = dx[c] * b - 2 * q[0] * v[c];
                              dy[c] = dy[c] * b - 2 * q[1] * v[c];
                            }
                            v[c] *= b;
                          }
                        }};
    const double lhs = l2_inner(model, inner_derivative(model, p), f, sq);
    const TensorField divf{m - 1, [&](const Vec2& q, double* v, double*, double*) {
                             const std::vector<double> r = divergence_at(model, f, q);
                             std::copy(r.begin(), r.end(), v);
                           }};
    const double rhs = l2_inner(model, p, divf, sq);
    EXPECT_NEAR(lhs, rhs, 1e-8 * (1 + std::abs(lhs))) << m;
  }
}

TEST(Tensors, DecomposePurePotential) {
  const DiscPtr d = discretize(flat_disk(), 24, 48);
  const TensorField p0 = scalar(bubble_x);
  const Decomposition dec = solenoidal_decompose(sample(d, inner_derivative(flat_disk(), p0)));
  EXPECT_TRUE(dec.potential.boundary_zero);
  EXPECT_GT(dec.ritz_min, 0.0);
  const SymTensorField p_ref = sample(d, p0);
  double err = 0, ref = 0;
  for (std::size_t n = 0; n < p_ref.size(); ++n) {
    err = std::max(err, std::abs(dec.potential.p.comps[n] - p_ref.comps[n]));
    ref = std::max(ref, std::abs(p_ref.comps[n]));
    if (d->grid.boundary[n]) EXPECT_EQ(dec.potential.p.comps[n], 0.0);
  }
  EXPECT_LT(err / ref, 1e-2);
  const SymTensorField f = sample(d, inner_derivative(flat_disk(), p0));
  EXPECT_LT(grid_norm(dec.solenoidal, true) / grid_norm(f, true), 2e-2);
}

TEST(Tensors, DecomposeSolenoidalInput) {
  const DiscPtr d = discretize(flat_disk(), 16, 32);
  SymTensorField dx(d, 1);
  for (std::size_t n = 0; n < dx.size(); ++n) dx.node(n)[0] = 1.0;
  const Decomposition dec = solenoidal_decompose(dx);
  for (double x : dec.potential.p.comps) EXPECT_NEAR(x, 0.0, 1e-12);
  for (std::size_t i = 0; i < dx.comps.size(); ++i) EXPECT_NEAR(dec.solenoidal.comps[i], dx.comps[i], 1e-12);
}

TEST(Tensors, DecomposeRandomSecondOrderIsIdempotent) {
  for (const SurfaceModel& model : {bump_disk(), hyperbolic_cylinder()}) {
    const DiscPtr d = discretize(model, 16, 32);
    const SymTensorField f = sample(d, random_field(2, 77));
    const DecompositionSolver solver(d, 2);
    const Decomposition dec = solver.solve(f);
    EXPECT_LE(dec.divergence_residual, 1e-6) << model.name;
    EXPECT_GT(dec.ritz_min, 0.0);
    const Decomposition again = solver.solve(dec.solenoidal);
    double pmax = 0, p0max = 0;
    for (double x : again.potential.p.comps) pmax = std::max(pmax, std::abs(x));
    for (double x : dec.potential.p.comps) p0max = std::max(p0max, std::abs(x));
    EXPECT_LE(pmax, 1e-8 * (1 + p0max)) << model.name;
    // Orthogonality ⟨f_s, Dp⟩ ≈ 0 up to discretization error.
    const SymTensorField dp = inner_derivative(dec.potential.p);
    EXPECT_LT(std::abs(grid_inner(dec.solenoidal, dp)) / (grid_norm(dec.solenoidal) * grid_norm(dp)), 5e-2)
        << model.name;
  }
}

TEST(Tensors, KillingCheck) {
  const DiscPtr d = discretize(bump_disk(), 16, 32);
  SymTensorField g(d, 2);
  for (std::size_t n = 0; n < g.size(); ++n) {
    const Mat2 gm = metric_at(d->model, d->grid.nodes[n]);
    g.node(n)[0] = gm[0][0];
    g.node(n)[1] = gm[0][1];
    g.node(n)[2] = gm[1][1];
  }
  const KillingReport kg = killing_check(g);
  EXPECT_EQ(kg.verdict, KillingVerdict::Trivial);
  EXPECT_NEAR(kg.coefficient, 1.0, 1e-12);

  const DiscPtr f = discretize(flat_disk(), 16, 32);
  SymTensorField dx(f, 1);
  for (std::size_t n = 0; n < dx.size(); ++n) dx.node(n)[0] = 1.0;
  const KillingReport kx = killing_check(dx);
  EXPECT_LT(kx.residual, 1e-12);
  EXPECT_EQ(kx.verdict, KillingVerdict::Nontrivial);

  const KillingReport kr = killing_check(sample(d, random_field(2, 9)));
  EXPECT_EQ(kr.verdict, KillingVerdict::NotKilling);
  EXPECT_GT(kr.residual, 0.1);
}

TEST(Tensors, XPullbackIdentity) {
  // p = x on the flat disk: X π₀^* p = cos θ = π₁^*(dx).
  const DiscPtr d = discretize(flat_disk(), 12, 48);
  const IdentityResidual r0 = x_pullback_identity_check(d, scalar(coord_x));
  EXPECT_LT(r0.rms / r0.scale, 5e-3);

  const IdentityResidual rc = x_pullback_identity_check(d, scalar([](const Vec2&) { return ScalarJet{3.0, 0, 0}; }));
  EXPECT_LT(rc.max_abs, 1e-8);

  // Random order-1 field on a curved model: second-order convergence.
  const TensorField p = random_field(1, 123);
  const IdentityResidual a = x_pullback_identity_check(discretize(bump_disk(), 12, 24), p);
  const IdentityResidual b = x_pullback_identity_check(discretize(bump_disk(), 24, 48), p);
  EXPECT_GT(a.rms / b.rms, 3.0);
}
