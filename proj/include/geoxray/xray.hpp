// The X-ray transform I and I_m on a boundary fan, the backprojection I*,
// zero-energy resolvents and Π, matrix assembly with an SVD s-injectivity
// certificate, lens data, and the invariant extension w = I*φ solving
// π_{m*}w = f by truncated-SVD least squares.
#pragma once

#include <Eigen/SVD>
#include <random>

#include "geoxray/tensors.hpp"

namespace geox {

// ---------------------------------------------------------------------------
// Forward transform

enum class RayStatus : int { Ok = 0, Truncated = 1, Failed = 2 };

struct XrayValues {
  std::vector<double> values;
  std::vector<RayStatus> status;

  std::size_t count(RayStatus s) const {
    return static_cast<std::size_t>(std::count(status.begin(), status.end(), s));
  }
};

namespace detail {

// Integrates n_aux accumulators along every fan ray; integrand(q, θ, dir, out).
template <class Integrand>
std::vector<RayRun> integrate_fan(const SurfaceModel& model, const BoundaryFan& fan, double T_max,
                                  const IntegratorOptions& opt, std::size_t n_aux, const Integrand& integrand,
                                  std::vector<RayStatus>& status) {
  std::vector<RayRun> runs(fan.size());
  status.assign(fan.size(), RayStatus::Ok);
  const std::vector<double> init(n_aux, 0.0);
  parallel_for(fan.size(), [&](std::size_t i) {
    auto aux = [&](const Vec2& q, double th, const Vec2& dir, const double*, double* out) {
      integrand(q, th, dir, out);
    };
    try {
      runs[i] = integrate_ray(model, fan.nodes[i], T_max, opt, StopAt::Boundary, init, aux);
      if (!runs[i].exited) status[i] = RayStatus::Truncated;
    } catch (const std::exception&) {
      runs[i].extra.assign(n_aux, 0.0);
      status[i] = RayStatus::Failed;
    }
  });
  return runs;
}

}  // namespace detail

/// If(x,v) = ∫₀^{l₊} f(φ_t(x,v)) dt at every fan node. Rays still inside at
/// T_max are marked Truncated (value is the partial integral); integrator
/// failures are marked Failed with value 0.
inline XrayValues xray_function(const SurfaceModel& model, const SMFunction& f, const BoundaryFan& fan,
                                double T_max, const IntegratorOptions& opt = {}) {
  XrayValues out;
  auto integrand = [&](const Vec2& q, double th, const Vec2&, double* o) { o[0] = f(q, th); };
  const std::vector<RayRun> runs = detail::integrate_fan(model, fan, T_max, opt, 1, integrand, out.status);
  for (const RayRun& r : runs) out.values.push_back(r.extra[0]);
  return out;
}

/// I_m f = I(π_m^* f).
inline XrayValues xray_tensor(const SurfaceModel& model, const TensorField& f, const BoundaryFan& fan,
                              double T_max, const IntegratorOptions& opt = {}) {
  const int m = f.m;
  XrayValues out;
  auto integrand = [&](const Vec2& q, double th, const Vec2&, double* o) {
    double v[16];
    f.eval(q, v, nullptr, nullptr);
    o[0] = pullback_at(model, q, th, v, m);
  };
  if (m > 15) throw PreconditionError("xray_tensor: order too large");
  const std::vector<RayRun> runs = detail::integrate_fan(model, fan, T_max, opt, 1, integrand, out.status);
  for (const RayRun& r : runs) out.values.push_back(r.extra[0]);
  return out;
}

// ---------------------------------------------------------------------------
// Backprojection I*

/// Bilinear interpolation of fan values in (α, β): α periodic, β clamped to
/// the outermost nodes.
class FanInterpolator {
 public:
  FanInterpolator(const BoundaryFan& fan, std::vector<double> values) : fan_(fan), v_(std::move(values)) {
    if (v_.size() != fan_.size()) throw PreconditionError("FanInterpolator: value count mismatch");
  }

  double operator()(int component, double alpha, double beta) const {
    const double ua = wrap_angle(alpha) * fan_.n_boundary / two_pi - 0.5;
    const double fa = std::floor(ua);
    const double ta = ua - fa;
    const int i0 = ((static_cast<int>(fa) % fan_.n_boundary) + fan_.n_boundary) % fan_.n_boundary;
    const int i1 = (i0 + 1) % fan_.n_boundary;
    double ub = (beta + 0.5 * pi) * fan_.n_angle / pi - 0.5;
    ub = std::clamp(ub, 0.0, static_cast<double>(fan_.n_angle - 1));
    const int j0 = std::min(static_cast<int>(std::floor(ub)), fan_.n_angle - 2);
    const double tb = ub - j0;
    auto at = [&](int i, int j) { return v_[fan_.index(component, i, j)]; };
    return (1 - ta) * ((1 - tb) * at(i0, j0) + tb * at(i0, j0 + 1)) + ta * ((1 - tb) * at(i1, j0) + tb * at(i1, j0 + 1));
  }

  double operator()(const SurfaceModel& model, const PhasePoint& z) const {
    const FanCoordinates c = fan_coordinates(model, z);
    return (*this)(c.component, c.alpha, c.beta);
  }

 private:
  const BoundaryFan& fan_;
  std::vector<double> v_;
};

/// I*u(z) = u(φ_{l₋}(z)); empty when z is backward trapped within T_max.
inline std::optional<double> adjoint(const SurfaceModel& model, const FanInterpolator& u, const PhasePoint& z,
                                     double T_max, const IntegratorOptions& opt = {}) {
  const auto [t, exit] = backward_exit(model, z, T_max, opt);
  if (!exit) return std::nullopt;
  return u(model, *exit);
}

// ---------------------------------------------------------------------------
// Resolvents and the normal operator at λ = 0

struct OrbitIntegral {
  double value = 0;
  bool truncated = false;
};

/// R₊(0)f(z) = ∫₀^{l₊} f(φ_t z) dt (sign > 0) or R₋(0)f(z) = −∫_{l₋}^0 f(φ_t z) dt.
inline OrbitIntegral resolvent_apply(const SurfaceModel& model, const SMFunction& f, const PhasePoint& z, int sign,
                                     double T_max, const IntegratorOptions& opt = {}) {
  const double init[1] = {0.0};
  const PhasePoint start = sign > 0 ? z : reversed(z);
  // Backward: integrate f(x, θ + π) along the reversed orbit.
  auto aux = [&](const Vec2& q, double th, const Vec2&, const double*, double* out) {
    out[0] = f(q, sign > 0 ? th : wrap_angle(th + pi));
  };
  const RayRun run = integrate_ray(model, start, T_max, opt, StopAt::Boundary, std::span<const double>(init, 1), aux);
  return {sign > 0 ? run.extra[0] : -run.extra[0], !run.exited};
}

/// Πf(z) = (R₊(0) − R₋(0))f(z), the integral over the whole orbit through z.
inline OrbitIntegral normal_operator(const SurfaceModel& model, const SMFunction& f, const PhasePoint& z,
                                     double T_max, const IntegratorOptions& opt = {}) {
  const OrbitIntegral p = resolvent_apply(model, f, z, +1, T_max, opt);
  const OrbitIntegral m = resolvent_apply(model, f, z, -1, T_max, opt);
  return {p.value - m.value, p.truncated || m.truncated};
}

// ---------------------------------------------------------------------------
// Adjoint consistency and L^p sanity

using FanFunction = std::function<double(int component, double alpha, double beta)>;

struct AdjointConsistency {
  double fan_side = 0;     // ⟨If, u⟩ over ∂₋SM with dμ_ν
  double phase_side = 0;   // ⟨f, I*u⟩ over SM with dμ
  double defect = 0;       // |difference| / (‖f‖_{L²(SM)} ‖u‖_{L²(dμ_ν)})
  double excluded_measure = 0;  // dμ-mass of backward-trapped samples
};

/// Compares the two sides of the duality between I and I*. The fan side
/// integrates If on the fan; the phase side evaluates I*u at SM quadrature
/// nodes by bilinear interpolation of u's fan samples.
inline AdjointConsistency adjoint_consistency(const SurfaceModel& model, const SMFunction& f, const FanFunction& u,
                                              const BoundaryFan& fan, const SMQuadrature& smq, double T_max,
                                              const IntegratorOptions& opt = {}) {
  std::vector<double> uf(fan.size());
  for (int c = 0; c < fan.n_components; ++c)
    for (int i = 0; i < fan.n_boundary; ++i)
      for (int j = 0; j < fan.n_angle; ++j) uf[fan.index(c, i, j)] = u(c, fan.alpha(i), fan.beta(j));
  const XrayValues If = xray_function(model, f, fan, T_max, opt);
  std::vector<double> lhs(fan.size()), unorm(fan.size());
  for (std::size_t i = 0; i < fan.size(); ++i) {
    const double ok = If.status[i] == RayStatus::Ok ? 1.0 : 0.0;
    lhs[i] = ok * fan.weights[i] * If.values[i] * uf[i];
    unorm[i] = fan.weights[i] * uf[i] * uf[i];
  }
  const FanInterpolator interp(fan, uf);
  const std::size_t nf = static_cast<std::size_t>(smq.n_fiber);
  std::vector<double> rhs(smq.size()), fnorm(smq.size()), lost(smq.size());
  parallel_for(smq.size(), [&](std::size_t k) {
    const std::size_t n = k / nf;
    const int l = static_cast<int>(k % nf);
    const PhasePoint z{smq.space.nodes[n], smq.fiber_angle(l)};
    const double w = smq.space.weights[n] * smq.fiber_weight();
    const double fz = f(z.q, z.theta);
    fnorm[k] = w * fz * fz;
    const std::optional<double> a = adjoint(model, interp, z, T_max, opt);
    if (a) rhs[k] = w * fz * *a;
    else lost[k] = w;
  });
  AdjointConsistency r;
  r.fan_side = ordered_sum(lhs);
  r.phase_side = ordered_sum(rhs);
  r.excluded_measure = ordered_sum(lost);
  const double scale = std::sqrt(ordered_sum(fnorm) * ordered_sum(unorm));
  r.defect = scale > 0 ? std::abs(r.fan_side - r.phase_side) / scale : 0.0;
  return r;
}

struct LpReport {
  std::vector<double> exponents;
  std::vector<double> norms;   // ‖Πf‖_{L^q(SM)} over non-truncated samples
  double truncated_measure = 0;
};

/// Empirical L^q norms of Πf on an SM quadrature grid. Reported only; orbits
/// not escaping within T_max in either direction are excluded and measured.
inline LpReport normal_operator_lp(const SurfaceModel& model, const SMFunction& f, const SMQuadrature& smq,
                                   const std::vector<double>& exponents, double T_max,
                                   const IntegratorOptions& opt = {}) {
  const std::size_t nf = static_cast<std::size_t>(smq.n_fiber);
  std::vector<double> val(smq.size()), w(smq.size()), lost(smq.size());
  parallel_for(smq.size(), [&](std::size_t k) {
    const std::size_t n = k / nf;
    const PhasePoint z{smq.space.nodes[n], smq.fiber_angle(static_cast<int>(k % nf))};
    w[k] = smq.space.weights[n] * smq.fiber_weight();
    try {
      const OrbitIntegral o = normal_operator(model, f, z, T_max, opt);
      if (o.truncated) lost[k] = w[k];
      else val[k] = std::abs(o.value);
    } catch (const IntegratorFailure&) {
      lost[k] = w[k];
    }
  });
  LpReport r;
  r.exponents = exponents;
  r.truncated_measure = ordered_sum(lost);
  for (double q : exponents) {
    std::vector<double> t(smq.size());
    for (std::size_t k = 0; k < t.size(); ++k) t[k] = lost[k] > 0 ? 0.0 : w[k] * std::pow(val[k], q);
    r.norms.push_back(std::pow(ordered_sum(t), 1.0 / q));
  }
  return r;
}

// ---------------------------------------------------------------------------
// Lens data

struct ScatteringEntry {
  PhasePoint node;
  std::optional<PhasePoint> exit;
  double l_plus = 0;
  bool trapped = false;
};

inline std::vector<ScatteringEntry> scattering_data(const SurfaceModel& model, const BoundaryFan& fan, double T_max,
                                                    const IntegratorOptions& opt = {}) {
  std::vector<ScatteringEntry> out(fan.size());
  parallel_for(fan.size(), [&](std::size_t i) {
    const auto [t, exit] = forward_exit(model, fan.nodes[i], T_max, opt);
    out[i] = {fan.nodes[i], exit, t, !exit.has_value()};
  });
  return out;
}

// ---------------------------------------------------------------------------
// Finite tensor families

/// Scalar jets φ_a used to build tensor families: monomials x^i y^j (disk) or
/// r^a·{1, cos bs, sin bs} (annulus), total degree i+j or a+b ≤ degree.
struct ScalarFamily {
  ChartKind kind;
  std::vector<std::array<int, 3>> terms;  // disk: (i, j, −); annulus: (a, b, 0=cos/1=sin)

  std::size_t size() const { return terms.size(); }

  void eval(const Vec2& q, ScalarJet* out) const {
    for (std::size_t k = 0; k < terms.size(); ++k) {
      const auto [a, b, t] = terms[k];
      if (kind == ChartKind::ConformalDisk) {
        const double x = q[0], y = q[1];
        out[k] = {std::pow(x, a) * std::pow(y, b), a > 0 ? a * std::pow(x, a - 1) * std::pow(y, b) : 0.0,
                  b > 0 ? b * std::pow(x, a) * std::pow(y, b - 1) : 0.0};
      } else {
        const double r = q[0], s = q[1];
        const double ra = std::pow(r, a), dra = a > 0 ? a * std::pow(r, a - 1) : 0.0;
        const double tr = t == 0 ? std::cos(b * s) : std::sin(b * s);
        const double dtr = t == 0 ? -b * std::sin(b * s) : b * std::cos(b * s);
        out[k] = {ra * tr, dra * tr, ra * dtr};
      }
    }
  }

  std::string label(std::size_t k) const {
    const auto [a, b, t] = terms[k];
    if (kind == ChartKind::ConformalDisk) return "x^" + std::to_string(a) + " y^" + std::to_string(b);
    if (b == 0) return "r^" + std::to_string(a);
    return "r^" + std::to_string(a) + (t == 0 ? " cos " : " sin ") + std::to_string(b) + "s";
  }
};

inline ScalarFamily scalar_family(const SurfaceModel& model, int degree) {
  if (degree < 0) throw PreconditionError("scalar_family: degree must be >= 0");
  ScalarFamily f{model.kind, {}};
  for (int tot = 0; tot <= degree; ++tot)
    for (int b = 0; b <= tot; ++b) {
      const int a = tot - b;
      if (model.kind == ChartKind::ConformalDisk) {
        f.terms.push_back({a, b, 0});
      } else {
        f.terms.push_back({a, b, 0});
        if (b > 0) f.terms.push_back({a, b, 1});
      }
    }
  return f;
}

/// A finite family of order-m tensor fields with a batched evaluator.
struct TensorFamily {
  int m = 0;
  std::size_t count = 0;
  std::vector<std::string> labels;
  std::function<void(const Vec2&, double*)> eval_all;  // out[k(m+1) + c]

  TensorField element(std::size_t k) const {
    const int mm = m;
    const std::size_t n = count;
    auto all = eval_all;
    return {m,
            [mm, n, k, all](const Vec2& q, double* v, double* dx, double*) {
              if (dx) throw PreconditionError("TensorFamily element carries values only");
              std::vector<double> buf(n * (mm + 1));
              all(q, buf.data());
              std::copy_n(buf.data() + k * (mm + 1), mm + 1, v);
            },
            false};
  }

  /// Σ_k coeffs[k] · element k.
  TensorField combination(std::vector<double> coeffs) const {
    const int mm = m;
    const std::size_t n = count;
    auto all = eval_all;
    return {m,
            [mm, n, coeffs, all](const Vec2& q, double* v, double* dx, double*) {
              if (dx) throw PreconditionError("TensorFamily combination carries values only");
              std::vector<double> buf(n * (mm + 1));
              all(q, buf.data());
              for (int c = 0; c <= mm; ++c) {
                v[c] = 0;
                for (std::size_t k = 0; k < n; ++k) v[c] += coeffs[k] * buf[k * (mm + 1) + c];
              }
            },
            false};
  }
};

namespace detail {

// Component weight κ_c: 1 on the disk (chart coframe), f(r)^c on the annulus
// so that the family is built on the orthonormal coframe dr, f ds.
inline ScalarJet coframe_weight(const SurfaceModel& model, const Vec2& q, int c) {
  if (model.kind == ChartKind::ConformalDisk || c == 0) return {1.0, 0.0, 0.0};
  const WarpJet w = model.warp_profile(q[0]);
  return {std::pow(w.value, c), c * std::pow(w.value, c - 1) * w.d1, 0.0};
}

inline ScalarJet bubble(const SurfaceModel& model, const Vec2& q) {
  if (model.kind == ChartKind::ConformalDisk) return {1 - q[0] * q[0] - q[1] * q[1], -2 * q[0], -2 * q[1]};
  return {model.R * model.R - q[0] * q[0], -2 * q[0], 0.0};
}

inline ScalarJet product(const ScalarJet& a, const ScalarJet& b) {
  return {a.v * b.v, a.dx * b.v + a.v * b.dx, a.dy * b.v + a.v * b.dy};
}

}  // namespace detail

/// Scalar family × component index: element (a, c) has the single canonical
/// component c equal to φ_a κ_c.
inline TensorFamily polynomial_family(const SurfaceModel& model, int m, int degree) {
  const ScalarFamily sf = scalar_family(model, degree);
  TensorFamily fam;
  fam.m = m;
  fam.count = sf.size() * (m + 1);
  for (std::size_t a = 0; a < sf.size(); ++a)
    for (int c = 0; c <= m; ++c) fam.labels.push_back(sf.label(a) + " [c=" + std::to_string(c) + "]");
  fam.eval_all = [model, sf, m](const Vec2& q, double* out) {
    std::vector<ScalarJet> phi(sf.size());
    sf.eval(q, phi.data());
    std::vector<double> kap(m + 1);
    for (int c = 0; c <= m; ++c) kap[c] = detail::coframe_weight(model, q, c).v;
    for (std::size_t a = 0; a < sf.size(); ++a)
      for (int c = 0; c <= m; ++c) {
        double* o = out + (a * (m + 1) + c) * (m + 1);
        std::fill(o, o + m + 1, 0.0);
        o[c] = phi[a].v * kap[c];
      }
  };
  return fam;
}

/// Potentials q_{a,c} = bubble·φ_a κ_c (order m−1, vanishing on ∂M) together
/// with the family of their images Dq_{a,c} (order m).
struct PotentialFamily {
  TensorFamily potentials;  // q, order m−1
  TensorFamily images;      // Dq, order m
};

inline PotentialFamily potential_family(const SurfaceModel& model, int m, int degree) {
  if (m < 1) throw PreconditionError("potential_family: order must be >= 1");
  const ScalarFamily sf = scalar_family(model, degree);
  const int mp = m - 1;
  PotentialFamily pf;
  auto jets = [model, sf, mp](const Vec2& q, std::vector<ScalarJet>& out) {
    std::vector<ScalarJet> phi(sf.size());
    sf.eval(q, phi.data());
    const ScalarJet b = detail::bubble(model, q);
    out.resize(sf.size() * (mp + 1));
    for (std::size_t a = 0; a < sf.size(); ++a)
      for (int c = 0; c <= mp; ++c)
        out[a * (mp + 1) + c] = detail::product(detail::product(b, phi[a]), detail::coframe_weight(model, q, c));
  };
  const std::size_t n = sf.size() * (mp + 1);
  std::vector<std::string> labels;
  for (std::size_t a = 0; a < sf.size(); ++a)
    for (int c = 0; c <= mp; ++c) labels.push_back("bubble " + sf.label(a) + " [c=" + std::to_string(c) + "]");
  pf.potentials = {mp, n, labels, [jets, mp](const Vec2& q, double* out) {
                     std::vector<ScalarJet> j;
                     jets(q, j);
                     for (std::size_t k = 0; k < j.size(); ++k) {
                       double* o = out + k * (mp + 1);
                       std::fill(o, o + mp + 1, 0.0);
                       o[k % (mp + 1)] = j[k].v;
                     }
                   }};
  pf.images = {m, n, labels, [model, jets, mp](const Vec2& q, double* out) {
                 std::vector<ScalarJet> j;
                 jets(q, j);
                 const Christoffel G = christoffel_at(model, q);
                 std::vector<double> v(mp + 1), dx(mp + 1), dy(mp + 1);
                 for (std::size_t k = 0; k < j.size(); ++k) {
                   std::fill(v.begin(), v.end(), 0.0);
                   std::fill(dx.begin(), dx.end(), 0.0);
                   std::fill(dy.begin(), dy.end(), 0.0);
                   const int c = static_cast<int>(k % (mp + 1));
                   v[c] = j[k].v;
                   dx[c] = j[k].dx;
                   dy[c] = j[k].dy;
                   inner_derivative_at(mp, G, v.data(), dx.data(), dy.data(), out + k * (mp + 2));
                 }
               }};
  return pf;
}

/// Concatenation of two families of the same order.
inline TensorFamily concat(const TensorFamily& a, const TensorFamily& b) {
  if (a.m != b.m) throw PreconditionError("concat: order mismatch");
  TensorFamily f;
  f.m = a.m;
  f.count = a.count + b.count;
  f.labels = a.labels;
  f.labels.insert(f.labels.end(), b.labels.begin(), b.labels.end());
  const std::size_t off = a.count * (a.m + 1);
  f.eval_all = [a, b, off](const Vec2& q, double* out) {
    a.eval_all(q, out);
    b.eval_all(q, out + off);
  };
  return f;
}

// ---------------------------------------------------------------------------
// Matrix assembly

struct RayTransformMatrix {
  Eigen::MatrixXd entries;            // rows: kept fan nodes; cols: family elements
  std::vector<double> weights;        // dμ_ν weight of each kept row
  std::vector<std::size_t> rows;      // fan index of each kept row
  std::size_t dropped = 0;            // rays not exiting within T_max or failed
  std::vector<std::string> labels;

  Eigen::MatrixXd weighted() const {
    Eigen::VectorXd s(static_cast<Eigen::Index>(weights.size()));
    for (std::size_t i = 0; i < weights.size(); ++i) s[i] = std::sqrt(weights[i]);
    return s.asDiagonal() * entries;
  }
};

/// Column j = I_m(element j) on the fan; each ray is integrated once with all
/// elements carried as auxiliary components.
inline RayTransformMatrix assemble_matrix(const SurfaceModel& model, const TensorFamily& family,
                                          const BoundaryFan& fan, double T_max, const IntegratorOptions& opt = {}) {
  const int m = family.m;
  const std::size_t n = family.count;
  auto integrand = [&](const Vec2& q, double th, const Vec2&, double* out) {
    thread_local std::vector<double> buf;
    buf.resize(n * (m + 1));
    family.eval_all(q, buf.data());
    const Vec2 v = unit_vector(model, q, th);
    for (std::size_t k = 0; k < n; ++k) out[k] = contract(buf.data() + k * (m + 1), m, v);
  };
  std::vector<RayStatus> status;
  const std::vector<RayRun> runs = detail::integrate_fan(model, fan, T_max, opt, n, integrand, status);
  RayTransformMatrix M;
  M.labels = family.labels;
  for (std::size_t i = 0; i < fan.size(); ++i) {
    if (status[i] != RayStatus::Ok) {
      ++M.dropped;
      continue;
    }
    M.rows.push_back(i);
    M.weights.push_back(fan.weights[i]);
  }
  M.entries.resize(static_cast<Eigen::Index>(M.rows.size()), static_cast<Eigen::Index>(n));
  for (std::size_t r = 0; r < M.rows.size(); ++r)
    for (std::size_t k = 0; k < n; ++k) M.entries(static_cast<Eigen::Index>(r), static_cast<Eigen::Index>(k)) = runs[M.rows[r]].extra[k];
  return M;
}

/// Gram matrix ⟨a_i, b_j⟩_{L²(M,g)} of two families by spatial quadrature.
inline Eigen::MatrixXd family_gram(const SurfaceModel& model, const TensorFamily& a, const TensorFamily& b,
                                   const SpatialQuadrature& sq) {
  if (a.m != b.m) throw PreconditionError("family_gram: order mismatch");
  const int m = a.m;
  const std::size_t na = a.count, nb = b.count;
  std::vector<Eigen::MatrixXd> part(sq.nodes.size());
  parallel_for(sq.nodes.size(), [&](std::size_t i) {
    std::vector<double> va(na * (m + 1)), vb(nb * (m + 1));
    a.eval_all(sq.nodes[i], va.data());
    b.eval_all(sq.nodes[i], vb.data());
    const Mat2 gi = inverse_metric_at(model, sq.nodes[i]);
    Eigen::MatrixXd P(na, nb);
    for (std::size_t x = 0; x < na; ++x)
      for (std::size_t y = 0; y < nb; ++y)
        P(x, y) = sq.weights[i] * tensor_inner(va.data() + x * (m + 1), vb.data() + y * (m + 1), m, gi);
    part[i] = std::move(P);
  });
  Eigen::MatrixXd G = Eigen::MatrixXd::Zero(na, nb);
  for (const auto& P : part) G += P;
  return G;
}

// ---------------------------------------------------------------------------
// s-injectivity certificate

struct SInjectivityReport {
  double sigma_min = 0;            // on the discrete solenoidal subspace
  double sigma_max = 0;
  double max_potential_residual = 0;  // max_k ‖I_m Dq_k‖ / ‖Dq_k‖
  double margin = 0;               // sigma_min / max_potential_residual (∞ when m = 0)
  std::size_t basis_dim = 0;
  std::size_t solenoidal_dim = 0;
  std::size_t potential_dim = 0;
  std::size_t dropped_rows = 0;
  std::vector<double> spectrum;    // singular values on the solenoidal subspace, descending
  std::vector<double> potential_residuals;
  RayTransformMatrix matrix;       // basis columns, then potential images
};

struct SInjectivityOptions {
  int degree = 3;
  int quad_radial = 16;
  int quad_angular = 32;
  double null_threshold = 1e-9;    // relative SVD threshold for the weak D* null space
};

/// σ_min of the weighted I_m on the solenoidal part of span(family): the
/// subspace of the span L²-orthogonal to D(q) for every potential q in the
/// potential family (the weak form of D* = 0 on the span).
inline SInjectivityReport sinjectivity_margin(const SurfaceModel& model, int m, const BoundaryFan& fan, double T_max,
                                              const SInjectivityOptions& so = {},
                                              const IntegratorOptions& opt = {}) {
  const TensorFamily basis = polynomial_family(model, m, so.degree);
  const SpatialQuadrature sq = spatial_quadrature(model, so.quad_radial, so.quad_angular);
  SInjectivityReport rep;
  rep.basis_dim = basis.count;

  Eigen::MatrixXd N;  // coefficient-space basis of the solenoidal subspace
  TensorFamily all = basis;
  std::optional<PotentialFamily> pf;
  if (m >= 1) {
    pf = potential_family(model, m, so.degree);
    rep.potential_dim = pf->images.count;
    const Eigen::MatrixXd C = family_gram(model, pf->images, basis, sq);  // ⟨Dq_k, b_j⟩
    Eigen::JacobiSVD<Eigen::MatrixXd> svd(C, Eigen::ComputeFullV);
    const Eigen::VectorXd s = svd.singularValues();
    const double thr = so.null_threshold * (s.size() > 0 ? s[0] : 0.0);
    Eigen::Index rank = 0;
    while (rank < s.size() && s[rank] > thr) ++rank;
    N = svd.matrixV().rightCols(svd.matrixV().cols() - rank);
    all = concat(basis, pf->images);
  } else {
    N = Eigen::MatrixXd::Identity(basis.count, basis.count);
  }
  rep.solenoidal_dim = static_cast<std::size_t>(N.cols());
  if (N.cols() == 0) throw PreconditionError("sinjectivity_margin: degenerate basis (empty solenoidal subspace)");

  // G-orthonormalize so singular values are operator norms L²(M,g) → L²(dμ_ν).
  const Eigen::MatrixXd G = family_gram(model, basis, basis, sq);
  Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> es(N.transpose() * G * N);
  const Eigen::VectorXd ev = es.eigenvalues().cwiseMax(1e-300);
  const Eigen::MatrixXd Q = N * es.eigenvectors() * ev.cwiseSqrt().cwiseInverse().asDiagonal();

  const RayTransformMatrix M = assemble_matrix(model, all, fan, T_max, opt);
  rep.dropped_rows = M.dropped;
  rep.matrix = M;
  const Eigen::MatrixXd W = M.weighted();
  const Eigen::MatrixXd B = W.leftCols(static_cast<Eigen::Index>(basis.count)) * Q;
  Eigen::JacobiSVD<Eigen::MatrixXd> sv(B);
  const Eigen::VectorXd s = sv.singularValues();
  rep.spectrum.assign(s.data(), s.data() + s.size());
  rep.sigma_max = s.size() ? s[0] : 0.0;
  rep.sigma_min = s.size() ? s[s.size() - 1] : 0.0;

  if (pf) {
    const Eigen::MatrixXd Gp = family_gram(model, pf->images, pf->images, sq);
    for (std::size_t k = 0; k < pf->images.count; ++k) {
      const double num = W.col(static_cast<Eigen::Index>(basis.count + k)).norm();
      const double den = std::sqrt(Gp(static_cast<Eigen::Index>(k), static_cast<Eigen::Index>(k)));
      rep.potential_residuals.push_back(num / den);
    }
    rep.max_potential_residual = *std::max_element(rep.potential_residuals.begin(), rep.potential_residuals.end());
    rep.margin = rep.max_potential_residual > 0 ? rep.sigma_min / rep.max_potential_residual : INFINITY;
  } else {
    rep.margin = INFINITY;
  }
  return rep;
}

// ---------------------------------------------------------------------------
// Annihilation of potentials

struct AnnihilationReport {
  double operator_scale = 0;          // ‖I_m‖ on the polynomial family, L²(M,g) → L²(dμ_ν)
  std::vector<double> ratios;         // ‖I_m Dp‖_{dμ_ν} / (scale · ‖p‖_g) per random potential
  double worst = 0;
  std::size_t dropped_rows = 0;
};

/// I_m(Dp) for random combinations p of the potential family (p|∂M = 0).
inline AnnihilationReport annihilation_check(const SurfaceModel& model, int m, const BoundaryFan& fan, double T_max,
                                             int n_potentials, std::uint64_t seed, int degree = 3,
                                             const IntegratorOptions& opt = {}, int quad_radial = 16,
                                             int quad_angular = 32) {
  if (m < 1) throw PreconditionError("annihilation_check: potentials need m >= 1");
  if (n_potentials < 1) throw PreconditionError("annihilation_check: need at least one potential");
  const TensorFamily basis = polynomial_family(model, m, degree);
  const PotentialFamily pf = potential_family(model, m, degree);
  const SpatialQuadrature sq = spatial_quadrature(model, quad_radial, quad_angular);
  const auto nb = static_cast<Eigen::Index>(basis.count);

  const RayTransformMatrix M = assemble_matrix(model, concat(basis, pf.images), fan, T_max, opt);
  const Eigen::MatrixXd W = M.weighted();
  Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> es(family_gram(model, basis, basis, sq));
  const Eigen::VectorXd ev = es.eigenvalues().cwiseMax(1e-300);
  const Eigen::MatrixXd B = W.leftCols(nb) * es.eigenvectors() * ev.cwiseSqrt().cwiseInverse().asDiagonal();

  AnnihilationReport rep;
  rep.dropped_rows = M.dropped;
  rep.operator_scale = Eigen::JacobiSVD<Eigen::MatrixXd>(B).singularValues()[0];
  const Eigen::MatrixXd Gp = family_gram(model, pf.potentials, pf.potentials, sq);
  const Eigen::MatrixXd P = W.rightCols(static_cast<Eigen::Index>(pf.images.count));
  std::mt19937_64 rng(seed);
  std::normal_distribution<double> N(0.0, 1.0);
  for (int k = 0; k < n_potentials; ++k) {
    Eigen::VectorXd c(P.cols());
    for (Eigen::Index i = 0; i < c.size(); ++i) c[i] = N(rng);
    const double pn = std::sqrt(c.dot(Gp * c));
    rep.ratios.push_back((P * c).norm() / (rep.operator_scale * pn));
  }
  rep.worst = *std::max_element(rep.ratios.begin(), rep.ratios.end());
  return rep;
}

// ---------------------------------------------------------------------------
// Invariant extension: w = I*φ with π_{m*}w ≈ f

/// Functions on the fan: per boundary component, cos/sin(pα) for p ≤ P times
/// T_q(sin β) for q ≤ 2Q.
struct FanBasis {
  int n_components = 1;
  int P = 5, Q = 5;

  std::size_t per_component() const { return static_cast<std::size_t>((2 * P + 1) * (2 * Q + 1)); }
  std::size_t size() const { return per_component() * n_components; }

  // Values of all elements at (component, α, β) into out (size()).
  void eval(int component, double alpha, double beta, double* out) const {
    std::fill(out, out + size(), 0.0);
    std::vector<double> fa(2 * P + 1), fb(2 * Q + 1);
    fa[0] = 1.0;
    for (int p = 1; p <= P; ++p) {
      fa[2 * p - 1] = std::cos(p * alpha);
      fa[2 * p] = std::sin(p * alpha);
    }
    // Chebyshev polynomials in sin β: smooth in the distance to ∂M along
    // glancing orbits, where β itself has a square-root profile.
    const double u = std::sin(beta);
    fb[0] = 1.0;
    if (Q > 0) fb[1] = u;
    for (int q = 2; q <= 2 * Q; ++q) fb[q] = 2 * u * fb[q - 1] - fb[q - 2];
    double* o = out + component * per_component();
    for (int a = 0; a <= 2 * P; ++a)
      for (int b = 0; b <= 2 * Q; ++b) o[a * (2 * Q + 1) + b] = fa[a] * fb[b];
  }
};

struct ExtensionOptions {
  int P = 5, Q = 5;          // fan basis bandwidths
  int quad_radial = 24;
  int quad_angular = 48;
  int n_fiber = 64;
  double reg = 1e-3;         // truncation threshold relative to σ_max
  double T_max = 40;
  IntegratorOptions integrator{};
};

struct ExtensionResult {
  std::vector<double> coeffs;
  double residual = 0;  // ‖π_{m*}w − f‖ / ‖f‖ in L²(M, g)
  int rank = 0;
};

/// Precomputed operator φ ↦ π_{m*}I*φ on the fan basis, sampled on an SM
/// quadrature grid, with its SVD. Backward exits are computed once.
class InvariantExtension {
 public:
  InvariantExtension(const SurfaceModel& model, int m, ExtensionOptions eo = {})
      : model_(model), m_(m), eo_(eo), basis_{boundary_components(model), eo.P, eo.Q} {
    if (m < 0) throw PreconditionError("invariant_extension: order must be >= 0");
    sq_ = spatial_quadrature(model, eo.quad_radial, eo.quad_angular);
    const int nf = eo.n_fiber, nc = m + 1;
    const std::size_t ns = sq_.nodes.size(), nb = basis_.size();
    A_.resize(static_cast<Eigen::Index>(ns * nc), static_cast<Eigen::Index>(nb));
    std::vector<int> trapped(ns, 0);
    parallel_for(ns, [&](std::size_t i) {
      const Vec2 q = sq_.nodes[i];
      std::vector<double> psi(nb);
      Eigen::MatrixXd rows = Eigen::MatrixXd::Zero(nc, static_cast<Eigen::Index>(nb));
      for (int l = 0; l < nf; ++l) {
        const double th = fiber_sample_angle(l, nf);
        const auto [t, exit] = backward_exit(model_, {q, th}, eo_.T_max, eo_.integrator);
        if (!exit) {
          ++trapped[i];
          continue;
        }
        const FanCoordinates fc = fan_coordinates(model_, *exit);
        basis_.eval(fc.component, fc.alpha, fc.beta, psi.data());
        const Vec2 d = unit_dir(th);
        for (int c = 0; c < nc; ++c) {
          const double wgt = std::pow(d[0], m_ - c) * std::pow(d[1], c) * (two_pi / nf);
          for (std::size_t k = 0; k < nb; ++k) rows(c, static_cast<Eigen::Index>(k)) += wgt * psi[k];
        }
      }
      for (int c = 0; c < nc; ++c)
        A_.row(static_cast<Eigen::Index>(i * nc + c)) = std::sqrt(sq_.weights[i] * binomial(m_, c)) * rows.row(c);
    });
    for (int t : trapped) trapped_samples_ += t;
    svd_.compute(A_, Eigen::ComputeThinU | Eigen::ComputeThinV);
    const Eigen::VectorXd s = svd_.singularValues();
    while (rank_ < s.size() && s[rank_] > eo_.reg * s[0]) ++rank_;
  }

  int order() const { return m_; }
  const FanBasis& fan_basis() const { return basis_; }
  const SpatialQuadrature& quadrature() const { return sq_; }
  std::size_t trapped_samples() const { return trapped_samples_; }
  Eigen::VectorXd singular_values() const { return svd_.singularValues(); }

  /// Weighted orthonormal-frame samples of f, the least-squares target.
  Eigen::VectorXd target(const TensorField& f) const {
    if (f.m != m_) throw PreconditionError("invariant_extension: order mismatch");
    const int nc = m_ + 1;
    Eigen::VectorXd b(static_cast<Eigen::Index>(sq_.nodes.size() * nc));
    std::vector<double> v(nc), vh(nc);
    for (std::size_t i = 0; i < sq_.nodes.size(); ++i) {
      f.eval(sq_.nodes[i], v.data(), nullptr, nullptr);
      to_frame(v.data(), m_, frame_scale(model_, sq_.nodes[i]), vh.data());
      for (int c = 0; c < nc; ++c)
        b[static_cast<Eigen::Index>(i * nc + c)] = std::sqrt(sq_.weights[i] * binomial(m_, c)) * vh[c];
    }
    return b;
  }

  ExtensionResult solve(const TensorField& f) const {
    const Eigen::VectorXd b = target(f);
    ExtensionResult r;
    r.rank = static_cast<int>(rank_);
    Eigen::VectorXd x = Eigen::VectorXd::Zero(A_.cols());
    const Eigen::VectorXd s = svd_.singularValues();
    const Eigen::VectorXd ub = svd_.matrixU().leftCols(rank_).transpose() * b;
    for (Eigen::Index k = 0; k < rank_; ++k) x += svd_.matrixV().col(k) * (ub[k] / s[k]);
    r.coeffs.assign(x.data(), x.data() + x.size());
    const double bn = b.norm();
    r.residual = bn > 0 ? (A_ * x - b).norm() / bn : 0.0;
    return r;
  }

  /// φ(component, α, β) for given coefficients.
  double phi(const std::vector<double>& coeffs, int component, double alpha, double beta) const {
    std::vector<double> psi(basis_.size());
    basis_.eval(component, alpha, beta, psi.data());
    double s = 0;
    for (std::size_t k = 0; k < psi.size(); ++k) s += coeffs[k] * psi[k];
    return s;
  }

  /// φ at every fan node.
  std::vector<double> phi_on_fan(const std::vector<double>& coeffs, const BoundaryFan& fan) const {
    std::vector<double> out(fan.size());
    for (std::size_t i = 0; i < fan.size(); ++i) {
      const FanCoordinates c = fan_coordinates(model_, fan.nodes[i]);
      out[i] = phi(coeffs, c.component, c.alpha, c.beta);
    }
    return out;
  }

  /// w(z) = φ(φ_{l₋}(z)); empty when z is backward trapped.
  std::optional<double> w(const std::vector<double>& coeffs, const PhasePoint& z) const {
    const auto [t, exit] = backward_exit(model_, z, eo_.T_max, eo_.integrator);
    if (!exit) return std::nullopt;
    const FanCoordinates c = fan_coordinates(model_, *exit);
    return phi(coeffs, c.component, c.alpha, c.beta);
  }

 private:
  SurfaceModel model_;
  int m_;
  ExtensionOptions eo_;
  FanBasis basis_;
  SpatialQuadrature sq_;
  Eigen::MatrixXd A_;
  Eigen::BDCSVD<Eigen::MatrixXd> svd_;
  Eigen::Index rank_ = 0;
  std::size_t trapped_samples_ = 0;
};

}  // namespace geox
