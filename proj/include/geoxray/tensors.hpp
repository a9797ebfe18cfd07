// Symmetric m-tensors on the surface. Components are stored in the chart
// coframe, indexed by c = number of 1-indices of the canonical tuple
// (0,…,0,1,…,1); metric factors enter every inner product explicitly.
#pragma once

#include <bit>
#include <functional>
#include <memory>

#include <Eigen/SparseCholesky>
#include <Eigen/SparseLU>

#include "geoxray/flow.hpp"
#include "geoxray/grid.hpp"
#include "geoxray/modes.hpp"

namespace geox {

// ---------------------------------------------------------------------------
// Pointwise algebra

/// f(v,…,v) = Σ_c C(m,c) f_c v₀^{m−c} v₁^c.
inline double contract(const double* f, int m, const Vec2& v) {
  double s = 0;
  for (int c = 0; c <= m; ++c) s += binomial(m, c) * f[c] * std::pow(v[0], m - c) * std::pow(v[1], c);
  return s;
}

/// ⟨f, h⟩_g = f_{i₁…i_m} h_{j₁…j_m} g^{i₁j₁} ⋯ g^{i_mj_m}, summed over all index tuples.
inline double tensor_inner(const double* f, const double* h, int m, const Mat2& ginv) {
  const unsigned n = 1u << m;
  double s = 0;
  for (unsigned I = 0; I < n; ++I)
    for (unsigned J = 0; J < n; ++J) {
      double p = f[std::popcount(I)] * h[std::popcount(J)];
      for (int k = 0; k < m && p != 0.0; ++k) p *= ginv[(I >> k) & 1u][(J >> k) & 1u];
      s += p;
    }
  return s;
}

/// Orthonormal-frame components f̂_c = f(e₀^{m−c}, e₁^c) with e_i = s_i ∂_i.
inline void to_frame(const double* f, int m, const Vec2& s, double* out) {
  for (int c = 0; c <= m; ++c) out[c] = f[c] * std::pow(s[0], m - c) * std::pow(s[1], c);
}

inline void from_frame(const double* fh, int m, const Vec2& s, double* out) {
  for (int c = 0; c <= m; ++c) out[c] = fh[c] / (std::pow(s[0], m - c) * std::pow(s[1], c));
}

/// (∇p)_{k; c} for an order-m field, written to out[k(m+1) + c].
inline void covariant_derivative(int m, const Christoffel& G, const double* val, const double* dx,
                                 const double* dy, double* out) {
  for (int k = 0; k < 2; ++k) {
    const double* d = k == 0 ? dx : dy;
    for (int c = 0; c <= m; ++c) {
      double s = d[c];
      if (c < m) s -= (m - c) * (G.g[0][k][0] * val[c] + G.g[1][k][0] * val[c + 1]);
      if (c > 0) s -= c * (G.g[0][k][1] * val[c - 1] + G.g[1][k][1] * val[c]);
      out[k * (m + 1) + c] = s;
    }
  }
}

/// Dp = σ∇p, order m → m+1.
inline void inner_derivative_at(int m, const Christoffel& G, const double* val, const double* dx,
                                const double* dy, double* out) {
  std::vector<double> nab(2 * (m + 1));
  covariant_derivative(m, G, val, dx, dy, nab.data());
  for (int c = 0; c <= m + 1; ++c) {
    double s = 0;
    if (c <= m) s += (m + 1 - c) * nab[c];
    if (c >= 1) s += c * nab[(m + 1) + c - 1];
    out[c] = s / (m + 1);
  }
}

/// D*f = −tr₁₂ ∇f, order m → m−1.
inline void divergence_at(int m, const Christoffel& G, const Mat2& ginv, const double* val, const double* dx,
                          const double* dy, double* out) {
  std::vector<double> nab(2 * (m + 1));
  covariant_derivative(m, G, val, dx, dy, nab.data());
  for (int c = 0; c < m; ++c) {
    double s = 0;
    for (int a = 0; a < 2; ++a)
      for (int b = 0; b < 2; ++b) s += ginv[a][b] * nab[a * (m + 1) + c + b];
    out[c] = -s;
  }
}

/// Components of σ(g^{⊗m/2}), i.e. the tensor whose polynomial is g(v,v)^{m/2}.
inline std::vector<double> metric_power(const Mat2& g, int m) {
  if (m % 2 != 0) throw PreconditionError("metric_power: order must be even");
  // Polynomial coefficients in v₀^{m−c} v₁^c.
  std::vector<double> poly{1.0};
  for (int r = 0; r < m / 2; ++r) {
    std::vector<double> next(poly.size() + 2, 0.0);
    for (std::size_t c = 0; c < poly.size(); ++c) {
      next[c] += poly[c] * g[0][0];
      next[c + 1] += poly[c] * 2 * g[0][1];
      next[c + 2] += poly[c] * g[1][1];
    }
    poly = std::move(next);
  }
  for (int c = 0; c <= m; ++c) poly[c] /= binomial(m, c);
  return poly;
}

/// (π_m^* f)(x, θ) from chart components at x.
inline double pullback_at(const SurfaceModel& model, const Vec2& q, double theta, const double* f, int m) {
  return contract(f, m, unit_vector(model, q, theta));
}

/// Chart components of π_{m*}u at x from uniform fiber samples u(θ_j).
template <class T>
std::vector<T> pushforward_at(const SurfaceModel& model, const Vec2& q, const T* u, int n_theta, int m) {
  std::vector<T> fh(m + 1, T{});
  const double dth = two_pi / n_theta;
  for (int j = 0; j < n_theta; ++j) {
    const Vec2 d = unit_dir(fiber_sample_angle(j, n_theta));
    for (int c = 0; c <= m; ++c) fh[c] += u[j] * (std::pow(d[0], m - c) * std::pow(d[1], c) * dth);
  }
  const Vec2 s = frame_scale(model, q);
  std::vector<T> out(m + 1);
  for (int c = 0; c <= m; ++c) out[c] = fh[c] / (std::pow(s[0], m - c) * std::pow(s[1], c));
  return out;
}

// ---------------------------------------------------------------------------
// Pointwise fields

/// A symmetric m-tensor field given by a pointwise evaluator. eval writes the
/// m+1 components and, when dx/dy are non-null, their chart derivatives.
struct TensorField {
  int m = 0;
  std::function<void(const Vec2&, double*, double*, double*)> eval;
  bool has_derivatives = true;

  std::vector<double> at(const Vec2& q) const {
    std::vector<double> v(m + 1);
    eval(q, v.data(), nullptr, nullptr);
    return v;
  }
};

struct ScalarJet {
  double v = 0, dx = 0, dy = 0;
};

/// Order-m field with a single non-zero canonical component c.
inline TensorField component_field(int m, int c, std::function<ScalarJet(const Vec2&)> phi) {
  return {m, [m, c, phi](const Vec2& q, double* v, double* dx, double* dy) {
            const ScalarJet j = phi(q);
            for (int k = 0; k <= m; ++k) v[k] = k == c ? j.v : 0.0;
            if (dx)
              for (int k = 0; k <= m; ++k) {
                dx[k] = k == c ? j.dx : 0.0;
                dy[k] = k == c ? j.dy : 0.0;
              }
          }};
}

inline TensorField sum(const TensorField& a, const TensorField& b, double sa = 1.0, double sb = 1.0) {
  if (a.m != b.m) throw PreconditionError("sum: order mismatch");
  const int m = a.m;
  return {m,
          [a, b, sa, sb, m](const Vec2& q, double* v, double* dx, double* dy) {
            std::vector<double> w(3 * (m + 1));
            a.eval(q, v, dx, dy);
            b.eval(q, w.data(), dx ? w.data() + m + 1 : nullptr, dx ? w.data() + 2 * (m + 1) : nullptr);
            for (int c = 0; c <= m; ++c) {
              v[c] = sa * v[c] + sb * w[c];
              if (dx) {
                dx[c] = sa * dx[c] + sb * w[m + 1 + c];
                dy[c] = sa * dy[c] + sb * w[2 * (m + 1) + c];
              }
            }
          },
          a.has_derivatives && b.has_derivatives};
}

/// Dp evaluated from the exact jet of p (values only).
inline TensorField inner_derivative(const SurfaceModel& model, const TensorField& p) {
  if (!p.has_derivatives) throw PreconditionError("inner_derivative: field has no derivatives");
  const int m = p.m;
  return {m + 1,
          [model, p, m](const Vec2& q, double* v, double* dx, double*) {
            if (dx) throw PreconditionError("inner_derivative: result carries values only");
            std::vector<double> j(3 * (m + 1));
            p.eval(q, j.data(), j.data() + m + 1, j.data() + 2 * (m + 1));
            inner_derivative_at(m, christoffel_at(model, q), j.data(), j.data() + m + 1, j.data() + 2 * (m + 1), v);
          },
          false};
}

/// D*f at a point from the exact jet of f.
inline std::vector<double> divergence_at(const SurfaceModel& model, const TensorField& f, const Vec2& q) {
  if (f.m == 0) throw PreconditionError("divergence: order must be >= 1");
  const int m = f.m;
  std::vector<double> j(3 * (m + 1)), out(m);
  f.eval(q, j.data(), j.data() + m + 1, j.data() + 2 * (m + 1));
  divergence_at(m, christoffel_at(model, q), inverse_metric_at(model, q), j.data(), j.data() + m + 1,
                j.data() + 2 * (m + 1), out.data());
  return out;
}

/// L²(M, g) inner product of two pointwise fields by spatial quadrature.
inline double l2_inner(const SurfaceModel& model, const TensorField& a, const TensorField& b,
                       const SpatialQuadrature& sq) {
  if (a.m != b.m) throw PreconditionError("l2_inner: order mismatch");
  std::vector<double> terms(sq.nodes.size());
  parallel_for(sq.nodes.size(), [&](std::size_t i) {
    const std::vector<double> x = a.at(sq.nodes[i]), y = b.at(sq.nodes[i]);
    terms[i] = sq.weights[i] * tensor_inner(x.data(), y.data(), a.m, inverse_metric_at(model, sq.nodes[i]));
  });
  return ordered_sum(terms);
}

// ---------------------------------------------------------------------------
// Grid fields

struct SymTensorField {
  DiscPtr disc;
  int m = 0;
  std::vector<double> comps;  // node-major, m+1 per node

  SymTensorField() = default;
  SymTensorField(DiscPtr d, int order) : disc(std::move(d)), m(order), comps(disc->grid.size() * (order + 1), 0.0) {}

  std::size_t size() const { return disc->grid.size(); }
  double* node(std::size_t n) { return comps.data() + n * (m + 1); }
  const double* node(std::size_t n) const { return comps.data() + n * (m + 1); }
};

struct PotentialField {
  SymTensorField p;
  bool boundary_zero = false;
};

inline SymTensorField sample(const DiscPtr& disc, const TensorField& f) {
  SymTensorField out(disc, f.m);
  parallel_for(out.size(), [&](std::size_t n) { f.eval(disc->grid.nodes[n], out.node(n), nullptr, nullptr); });
  return out;
}

inline double grid_inner(const SymTensorField& a, const SymTensorField& b, bool interior_only = false) {
  if (a.m != b.m || a.disc != b.disc) throw PreconditionError("grid_inner: incompatible fields");
  const Grid& g = a.disc->grid;
  std::vector<double> terms(g.size(), 0.0);
  for (std::size_t n = 0; n < g.size(); ++n) {
    if (interior_only && g.boundary[n]) continue;
    terms[n] = g.weights[n] * tensor_inner(a.node(n), b.node(n), a.m, a.disc->ginv[n]);
  }
  return ordered_sum(terms);
}

inline double grid_norm(const SymTensorField& a, bool interior_only = false) {
  return std::sqrt(std::max(0.0, grid_inner(a, a, interior_only)));
}

namespace detail {

// Sparse matrix of a linear first-order pointwise operator
// out(n) = op(n, p(n), ∂x p(n), ∂y p(n)), by probing op with unit inputs.
template <class Op>
SpMat assemble_first_order(const Discretization& d, int m_in, int m_out, Op op) {
  const std::size_t N = d.grid.size();
  const int ni = m_in + 1, no = m_out + 1;
  std::vector<Eigen::Triplet<double>> tr;
  std::vector<double> val(ni), dx(ni), dy(ni), out(no);
  for (std::size_t n = 0; n < N; ++n)
    for (int ch = 0; ch < 3; ++ch)
      for (int c = 0; c < ni; ++c) {
        std::fill(val.begin(), val.end(), 0.0);
        std::fill(dx.begin(), dx.end(), 0.0);
        std::fill(dy.begin(), dy.end(), 0.0);
        (ch == 0 ? val : ch == 1 ? dx : dy)[c] = 1.0;
        op(n, val.data(), dx.data(), dy.data(), out.data());
        for (int o = 0; o < no; ++o) {
          if (out[o] == 0.0) continue;
          const int row = static_cast<int>(n * no + o);
          if (ch == 0) {
            tr.emplace_back(row, static_cast<int>(n * ni + c), out[o]);
          } else {
            const SpMat& D = ch == 1 ? d.dx : d.dy;
            for (SpMat::InnerIterator it(D, static_cast<Eigen::Index>(n)); it; ++it)
              tr.emplace_back(row, static_cast<int>(it.col() * ni + c), out[o] * it.value());
          }
        }
      }
  SpMat A(static_cast<Eigen::Index>(N * no), static_cast<Eigen::Index>(N * ni));
  A.setFromTriplets(tr.begin(), tr.end());
  return A;
}

inline Eigen::Map<const Eigen::VectorXd> as_vec(const std::vector<double>& v) {
  return {v.data(), static_cast<Eigen::Index>(v.size())};
}

}  // namespace detail

/// Stencil matrix of D on order-m grid fields.
inline SpMat derivative_matrix(const Discretization& d, int m) {
  return detail::assemble_first_order(d, m, m + 1, [&](std::size_t n, const double* v, const double* x,
                                                       const double* y, double* out) {
    inner_derivative_at(m, d.gamma[n], v, x, y, out);
  });
}

/// Stencil matrix of D* on order-m grid fields (m ≥ 1).
inline SpMat divergence_matrix(const Discretization& d, int m) {
  if (m < 1) throw PreconditionError("divergence: order must be >= 1");
  return detail::assemble_first_order(d, m, m - 1, [&](std::size_t n, const double* v, const double* x,
                                                       const double* y, double* out) {
    divergence_at(m, d.gamma[n], d.ginv[n], v, x, y, out);
  });
}

inline SymTensorField inner_derivative(const SymTensorField& p) {
  SymTensorField out(p.disc, p.m + 1);
  Eigen::Map<Eigen::VectorXd>(out.comps.data(), out.comps.size()) =
      derivative_matrix(*p.disc, p.m) * detail::as_vec(p.comps);
  return out;
}

inline SymTensorField divergence(const SymTensorField& f) {
  if (f.m < 1) throw PreconditionError("divergence: order must be >= 1");
  SymTensorField out(f.disc, f.m - 1);
  Eigen::Map<Eigen::VectorXd>(out.comps.data(), out.comps.size()) =
      divergence_matrix(*f.disc, f.m) * detail::as_vec(f.comps);
  return out;
}

/// Block-diagonal matrix of the grid inner product on order-m fields.
inline SpMat gram_matrix(const Discretization& d, int m) {
  const int nc = m + 1;
  std::vector<Eigen::Triplet<double>> tr;
  std::vector<double> ea(nc), eb(nc);
  for (std::size_t n = 0; n < d.grid.size(); ++n)
    for (int a = 0; a < nc; ++a)
      for (int b = 0; b < nc; ++b) {
        std::fill(ea.begin(), ea.end(), 0.0);
        std::fill(eb.begin(), eb.end(), 0.0);
        ea[a] = eb[b] = 1.0;
        const double v = d.grid.weights[n] * tensor_inner(ea.data(), eb.data(), m, d.ginv[n]);
        if (v != 0.0) tr.emplace_back(static_cast<int>(n * nc + a), static_cast<int>(n * nc + b), v);
      }
  SpMat W(static_cast<Eigen::Index>(d.grid.size() * nc), static_cast<Eigen::Index>(d.grid.size() * nc));
  W.setFromTriplets(tr.begin(), tr.end());
  return W;
}

// ---------------------------------------------------------------------------
// Solenoidal decomposition f = f_s + Dp, D*f_s = 0, p|∂M = 0

struct Decomposition {
  SymTensorField solenoidal;
  PotentialField potential;
  double solve_residual = 0;       // ‖A p − b‖ / ‖b‖ of the interior system
  double divergence_residual = 0;  // ‖D* f_s‖ / ‖f‖ over interior nodes
  double ritz_min = 0;             // smallest eigenvalue of the discrete Dirichlet energy
};

/// Interior-node system D*_h D_h p = D*_h f with p = 0 on the boundary ring,
/// factored once and reusable.
class DecompositionSolver {
 public:
  DecompositionSolver(DiscPtr disc, int m) : disc_(std::move(disc)), m_(m) {
    if (m < 1) throw PreconditionError("solenoidal_decompose: order must be >= 1");
    const Grid& g = disc_->grid;
    D_ = derivative_matrix(*disc_, m - 1);
    Ds_ = divergence_matrix(*disc_, m);
    const SpMat A_full = Ds_ * D_;
    const int nc = m;  // components of p
    map_.assign(g.size() * nc, -1);
    for (std::size_t n = 0; n < g.size(); ++n)
      if (!g.boundary[n])
        for (int c = 0; c < nc; ++c) {
          map_[n * nc + c] = static_cast<int>(unknowns_.size());
          unknowns_.push_back(static_cast<int>(n * nc + c));
        }
    std::vector<Eigen::Triplet<double>> tr;
    for (int k = 0; k < A_full.outerSize(); ++k) {
      const int r = map_[k];
      if (r < 0) continue;
      for (SpMat::InnerIterator it(A_full, k); it; ++it) {
        const int c = map_[it.col()];
        if (c >= 0) tr.emplace_back(r, c, it.value());
      }
    }
    A_.resize(static_cast<Eigen::Index>(unknowns_.size()), static_cast<Eigen::Index>(unknowns_.size()));
    A_.setFromTriplets(tr.begin(), tr.end());
    A_.makeCompressed();
    lu_.compute(A_);
    if (lu_.info() != Eigen::Success) throw SolverError("solenoidal_decompose: factorization failed", INFINITY);
    ritz_min_ = smallest_eigenvalue();
  }

  double ritz_min() const { return ritz_min_; }

  Decomposition solve(const SymTensorField& f) const {
    if (f.m != m_ || f.disc != disc_) throw PreconditionError("solenoidal_decompose: field mismatch");
    const Eigen::VectorXd rhs_full = Ds_ * detail::as_vec(f.comps);
    Eigen::VectorXd b(static_cast<Eigen::Index>(unknowns_.size()));
    for (std::size_t i = 0; i < unknowns_.size(); ++i) b[i] = rhs_full[unknowns_[i]];
    Decomposition out;
    Eigen::VectorXd x = Eigen::VectorXd::Zero(b.size());
    if (b.norm() > 0) x = lu_.solve(b);
    const double bn = b.norm();
    out.solve_residual = bn > 0 ? (A_ * x - b).norm() / bn : 0.0;
    if (!std::isfinite(out.solve_residual) || out.solve_residual > 1e-8)
      throw SolverError("solenoidal_decompose: linear solve did not converge", out.solve_residual);

    SymTensorField p(disc_, m_ - 1);
    for (std::size_t i = 0; i < unknowns_.size(); ++i) p.comps[unknowns_[i]] = x[i];
    out.potential = {p, true};
    out.solenoidal = SymTensorField(disc_, m_);
    Eigen::Map<Eigen::VectorXd>(out.solenoidal.comps.data(), out.solenoidal.comps.size()) =
        detail::as_vec(f.comps) - D_ * detail::as_vec(p.comps);
    SymTensorField div = divergence(out.solenoidal);
    const double fn = grid_norm(f, true);
    out.divergence_residual = fn > 0 ? grid_norm(div, true) / fn : 0.0;
    out.ritz_min = ritz_min_;
    return out;
  }

 private:
  // Smallest eigenvalue of the Dirichlet energy ⟨D_h p, D_h p⟩ / ⟨p, p⟩ over
  // interior-supported p, by inverse iteration: positive iff D_h has no
  // kernel under the boundary condition.
  double smallest_eigenvalue() const {
    const SpMat Wm = gram_matrix(*disc_, m_), Wp = gram_matrix(*disc_, m_ - 1);
    SpMat P(static_cast<Eigen::Index>(map_.size()), static_cast<Eigen::Index>(unknowns_.size()));
    std::vector<Eigen::Triplet<double>> tr;
    for (std::size_t i = 0; i < unknowns_.size(); ++i) tr.emplace_back(unknowns_[i], static_cast<int>(i), 1.0);
    P.setFromTriplets(tr.begin(), tr.end());
    const SpMat DP = D_ * P;
    const Eigen::SparseMatrix<double> E = SpMat(DP.transpose() * Wm * DP);
    const Eigen::SparseMatrix<double> M = SpMat(P.transpose() * Wp * P);
    Eigen::SimplicialLDLT<Eigen::SparseMatrix<double>> ldlt(E);
    if (ldlt.info() != Eigen::Success) return 0.0;
    Eigen::VectorXd x = Eigen::VectorXd::Ones(E.rows());
    double ritz = 0;
    for (int it = 0; it < 200; ++it) {
      Eigen::VectorXd y = ldlt.solve(M * x);
      const double ny = std::sqrt(y.dot(M * y));
      if (!(ny > 0) || !std::isfinite(ny)) return 0.0;
      x = y / ny;
      const double r = x.dot(E * x);
      const bool done = it > 0 && std::abs(r - ritz) <= 1e-9 * std::abs(r);
      ritz = r;
      if (done) break;
    }
    return ritz;
  }

  DiscPtr disc_;
  int m_;
  SpMat D_, Ds_, A_;
  std::vector<int> map_, unknowns_;
  Eigen::SparseLU<Eigen::SparseMatrix<double>> lu_;
  double ritz_min_ = 0;
};

inline Decomposition solenoidal_decompose(const SymTensorField& f) {
  return DecompositionSolver(f.disc, f.m).solve(f);
}

// ---------------------------------------------------------------------------
// Killing tensors

enum class KillingVerdict { Trivial, Nontrivial, NotKilling };

inline const char* to_string(KillingVerdict v) {
  switch (v) {
    case KillingVerdict::Trivial:
      return "trivial Killing";
    case KillingVerdict::Nontrivial:
      return "non-trivial Killing";
    default:
      return "not Killing";
  }
}

struct KillingReport {
  double residual = 0;            // ‖D_h v‖ / ‖v‖
  double trivial_misfit = 1;      // ‖v − c σ(g^{m/2})‖ / ‖v‖ at the best c
  double coefficient = 0;         // that c
  KillingVerdict verdict = KillingVerdict::NotKilling;
};

inline KillingReport killing_check(const SymTensorField& v, double tol = 1e-2) {
  KillingReport rep;
  const double vn = grid_norm(v);
  if (vn == 0) {
    rep.residual = 0;
    rep.trivial_misfit = 0;
    rep.verdict = KillingVerdict::Trivial;
    return rep;
  }
  rep.residual = grid_norm(inner_derivative(v)) / vn;
  if (v.m % 2 == 0) {
    SymTensorField t(v.disc, v.m);
    for (std::size_t n = 0; n < v.size(); ++n) {
      const std::vector<double> s = metric_power(metric_at(v.disc->model, v.disc->grid.nodes[n]), v.m);
      std::copy(s.begin(), s.end(), t.node(n));
    }
    rep.coefficient = grid_inner(v, t) / grid_inner(t, t);
    SymTensorField diff = v;
    for (std::size_t i = 0; i < diff.comps.size(); ++i) diff.comps[i] -= rep.coefficient * t.comps[i];
    rep.trivial_misfit = grid_norm(diff) / vn;
  }
  if (rep.residual > tol)
    rep.verdict = KillingVerdict::NotKilling;
  else
    rep.verdict = rep.trivial_misfit <= tol ? KillingVerdict::Trivial : KillingVerdict::Nontrivial;
  return rep;
}

// ---------------------------------------------------------------------------
// X π_m^* = π_{m+1}^* D

struct IdentityResidual {
  double max_abs = 0;
  double rms = 0;    // dμ-weighted over interior samples
  double scale = 0;  // rms of π_{m+1}^*(D_h p)
  double tau = 0;    // orbit difference step
};

/// X(π_m^* p) by central differences along geodesic arcs of length ±τ (τ = h)
/// against π_{m+1}^*(D_h p) from the grid stencil, at interior nodes.
inline IdentityResidual x_pullback_identity_check(const DiscPtr& disc, const TensorField& p, int n_fiber = 8,
                                                  const IntegratorOptions& opt = {}) {
  const Grid& g = disc->grid;
  const SurfaceModel& model = disc->model;
  const SymTensorField dp = inner_derivative(sample(disc, p));
  const double tau = g.h;
  std::vector<double> err2(g.size(), 0.0), sc2(g.size(), 0.0), emax(g.size(), 0.0);
  parallel_for(g.size(), [&](std::size_t n) {
    if (g.boundary[n]) return;
    const Vec2& q = g.nodes[n];
    std::vector<double> v(p.m + 1);
    for (int k = 0; k < n_fiber; ++k) {
      const PhasePoint z{q, fiber_sample_angle(k, n_fiber)};
      const PhasePoint zp = flow_map(model, z, tau, opt), zm = flow_map(model, z, -tau, opt);
      p.eval(zp.q, v.data(), nullptr, nullptr);
      const double up = pullback_at(model, zp.q, zp.theta, v.data(), p.m);
      p.eval(zm.q, v.data(), nullptr, nullptr);
      const double um = pullback_at(model, zm.q, zm.theta, v.data(), p.m);
      const double lhs = (up - um) / (2 * tau);
      const double rhs = pullback_at(model, q, z.theta, dp.node(n), p.m + 1);
      err2[n] += (lhs - rhs) * (lhs - rhs);
      sc2[n] += rhs * rhs;
      emax[n] = std::max(emax[n], std::abs(lhs - rhs));
    }
    err2[n] *= g.weights[n] * two_pi / n_fiber;
    sc2[n] *= g.weights[n] * two_pi / n_fiber;
  });
  IdentityResidual r;
  r.tau = tau;
  r.max_abs = *std::max_element(emax.begin(), emax.end());
  r.rms = std::sqrt(ordered_sum(err2));
  r.scale = std::sqrt(ordered_sum(sc2));
  return r;
}

// ---------------------------------------------------------------------------
// π_m^* and π_{m*} on grid fields

/// Fiber modes of π_m^* f at every grid node (band m, exact).
inline FiberField pullback(const SymTensorField& f) {
  const SurfaceModel& model = f.disc->model;
  const int nt = 2 * f.m + 2;
  std::vector<cplx> s(f.size() * nt);
  for (std::size_t n = 0; n < f.size(); ++n)
    for (int j = 0; j < nt; ++j)
      s[n * nt + j] = pullback_at(model, f.disc->grid.nodes[n], fiber_sample_angle(j, nt), f.node(n), f.m);
  FiberField u = decompose(f.disc->grid.nodes, s, nt, f.m);
  u.aliasing = 0;
  return u;
}

/// π_{m*}u on the grid that carries u's nodes (real part of the result).
inline SymTensorField pushforward(const DiscPtr& disc, const FiberField& u, int m) {
  if (u.size() != disc->grid.size()) throw PreconditionError("pushforward: node count mismatch");
  SymTensorField out(disc, m);
  const int nt = 2 * (u.band + m) + 2;
  std::vector<cplx> s(nt);
  for (std::size_t n = 0; n < u.size(); ++n) {
    for (int j = 0; j < nt; ++j) s[j] = u.value(n, fiber_sample_angle(j, nt));
    const std::vector<cplx> c = pushforward_at(disc->model, disc->grid.nodes[n], s.data(), nt, m);
    for (int k = 0; k <= m; ++k) out.node(n)[k] = c[k].real();
  }
  return out;
}

/// c_k with π_k^* π_{k*} u = c_k u on Ω_k, measured on e^{ikθ} at sample points.
struct ModeConstant {
  double value = 0;
  double spread = 0;  // relative spread across test points and angles
};

inline ModeConstant mode_constant(const SurfaceModel& model, int k) {
  if (k < 0) throw PreconditionError("mode_constant: k must be >= 0");
  const int nt = 4 * k + 8;
  std::vector<cplx> u(nt);
  for (int j = 0; j < nt; ++j) u[j] = std::polar(1.0, k * fiber_sample_angle(j, nt));
  const std::vector<Vec2> pts = model.kind == ChartKind::ConformalDisk
                                    ? std::vector<Vec2>{{0.0, 0.0}, {0.3, -0.2}, {-0.5, 0.6}}
                                    : std::vector<Vec2>{{0.0, 0.0}, {0.4, 1.0}, {-0.7, 4.0}};
  double lo = INFINITY, hi = -INFINITY;
  for (const Vec2& q : pts) {
    const std::vector<cplx> T = pushforward_at(model, q, u.data(), nt, k);
    for (double th : {0.1, 1.3, 2.9, 4.4}) {
      const Vec2 v = unit_vector(model, q, th);
      cplx s{};
      for (int c = 0; c <= k; ++c) s += binomial(k, c) * T[c] * std::pow(v[0], k - c) * std::pow(v[1], c);
      const double ratio = (s / std::polar(1.0, k * th)).real();
      lo = std::min(lo, ratio);
      hi = std::max(hi, ratio);
    }
  }
  return {0.5 * (lo + hi), (hi - lo) / std::abs(0.5 * (lo + hi))};
}

}  // namespace geox
