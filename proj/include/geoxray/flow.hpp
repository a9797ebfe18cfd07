// Geodesic flow on SM_e: adaptive Dormand-Prince integration with boundary
// event location, escape times, boundary fans for dμ_ν, Santaló quadrature,
// non-escaping mass and hyperbolicity diagnostics.
#pragma once

#include <functional>
#include <limits>
#include <optional>
#include <random>
#include <span>
#include <vector>

#include "geoxray/quadrature.hpp"
#include "geoxray/surface.hpp"

namespace geox {

/// A point of SM: chart position and orthonormal-frame angle.
struct PhasePoint {
  Vec2 q{};
  double theta = 0;
};

inline PhasePoint reversed(const PhasePoint& z) { return {z.q, wrap_angle(z.theta + pi)}; }

struct EscapeRecord {
  double l_plus = 0;
  double l_minus = 0;
  std::optional<PhasePoint> exit_forward;
  std::optional<PhasePoint> exit_backward;
  bool trapped_forward = false;
  bool trapped_backward = false;
};

struct TrajectorySample {
  double t;
  PhasePoint z;
};

class IntegratorFailure : public std::runtime_error {
 public:
  IntegratorFailure(const std::string& what, std::vector<TrajectorySample> partial)
      : std::runtime_error(what), partial_(std::move(partial)) {}
  const std::vector<TrajectorySample>& partial_trajectory() const { return partial_; }

 private:
  std::vector<TrajectorySample> partial_;
};

struct IntegratorOptions {
  double tol = 1e-10;        // per-step error tolerance (absolute and relative)
  double event_tol = 1e-10;  // boundary-crossing time accuracy
  double h_init = 1e-2;
  double h_max = 0.1;
  double h_min = 1e-13;
  long max_steps = 20'000'000;
  bool record = false;       // keep every accepted step
};

enum class StopAt { Boundary, ExtendedBoundary, Never };

/// Outcome of one integration run.
struct RayRun {
  double t = 0;                 // elapsed time
  PhasePoint end;               // final phase point
  bool exited = false;          // stopped on the boundary before the horizon
  std::vector<double> extra;    // final values of the auxiliary components
  std::vector<TrajectorySample> trajectory;
};

namespace detail {

// Dormand-Prince 5(4) tableau.
inline constexpr double c2 = 1.0 / 5, c3 = 3.0 / 10, c4 = 4.0 / 5, c5 = 8.0 / 9;
inline constexpr double a21 = 1.0 / 5;
inline constexpr double a31 = 3.0 / 40, a32 = 9.0 / 40;
inline constexpr double a41 = 44.0 / 45, a42 = -56.0 / 15, a43 = 32.0 / 9;
inline constexpr double a51 = 19372.0 / 6561, a52 = -25360.0 / 2187, a53 = 64448.0 / 6561, a54 = -212.0 / 729;
inline constexpr double a61 = 9017.0 / 3168, a62 = -355.0 / 33, a63 = 46732.0 / 5247, a64 = 49.0 / 176,
                        a65 = -5103.0 / 18656;
inline constexpr double b1 = 35.0 / 384, b3 = 500.0 / 1113, b4 = 125.0 / 192, b5 = -2187.0 / 6784,
                        b6 = 11.0 / 84;
inline constexpr double e1 = 71.0 / 57600, e3 = -71.0 / 16695, e4 = 71.0 / 1920, e5 = -17253.0 / 339200,
                        e6 = 22.0 / 525, e7 = -1.0 / 40;

/// State layout: y[0], y[1] chart position, y[2] frame angle, y[3..] auxiliary.
template <class Aux>
struct FlowSystem {
  const SurfaceModel& model;
  Aux& aux;  // aux(q, theta, dir, aux_in, aux_out)
  std::size_t n;

  void operator()(const double* y, double* dy) const {
    const Vec2 q{y[0], y[1]};
    const Vec2 dir = unit_dir(y[2]);
    if (model.kind == ChartKind::ConformalDisk) {
      const ConformalJet l = model.conformal_lambda(q[0], q[1]);
      const double e = std::exp(-l.value);
      dy[0] = e * dir[0];
      dy[1] = e * dir[1];
      dy[2] = e * (l.dy * dir[0] - l.dx * dir[1]);
    } else {
      const WarpJet f = model.warp_profile(q[0]);
      dy[0] = dir[0];
      dy[1] = dir[1] / f.value;
      dy[2] = -(f.d1 / f.value) * dir[1];
    }
    if (n > 3) aux(q, y[2], dir, y + 3, dy + 3);
  }
};

struct NoAux {
  void operator()(const Vec2&, double, const Vec2&, const double*, double*) const {}
};

template <class Sys>
struct DormandPrince {
  Sys sys;
  std::size_t n;
  std::vector<double> k1, k2, k3, k4, k5, k6, k7, tmp;

  DormandPrince(Sys s, std::size_t dim)
      : sys(s), n(dim), k1(dim), k2(dim), k3(dim), k4(dim), k5(dim), k6(dim), k7(dim), tmp(dim) {}

  // One step of size h from y (k1 = f(y) already computed). Writes y_out and
  // returns the scaled error norm.
  double step(const std::vector<double>& y, double h, std::vector<double>& y_out, double tol) {
    for (std::size_t i = 0; i < n; ++i) tmp[i] = y[i] + h * a21 * k1[i];
    sys(tmp.data(), k2.data());
    for (std::size_t i = 0; i < n; ++i) tmp[i] = y[i] + h * (a31 * k1[i] + a32 * k2[i]);
    sys(tmp.data(), k3.data());
    for (std::size_t i = 0; i < n; ++i) tmp[i] = y[i] + h * (a41 * k1[i] + a42 * k2[i] + a43 * k3[i]);
    sys(tmp.data(), k4.data());
    for (std::size_t i = 0; i < n; ++i)
      tmp[i] = y[i] + h * (a51 * k1[i] + a52 * k2[i] + a53 * k3[i] + a54 * k4[i]);
    sys(tmp.data(), k5.data());
    for (std::size_t i = 0; i < n; ++i)
      tmp[i] = y[i] + h * (a61 * k1[i] + a62 * k2[i] + a63 * k3[i] + a64 * k4[i] + a65 * k5[i]);
    sys(tmp.data(), k6.data());
    for (std::size_t i = 0; i < n; ++i)
      y_out[i] = y[i] + h * (b1 * k1[i] + b3 * k3[i] + b4 * k4[i] + b5 * k5[i] + b6 * k6[i]);
    sys(y_out.data(), k7.data());
    double err = 0.0;
    for (std::size_t i = 0; i < n; ++i) {
      const double ei =
          h * (e1 * k1[i] + e3 * k3[i] + e4 * k4[i] + e5 * k5[i] + e6 * k6[i] + e7 * k7[i]);
      const double sc = tol * (1.0 + std::max(std::abs(y[i]), std::abs(y_out[i])));
      err = std::max(err, std::abs(ei) / sc);
    }
    return err;
  }
};

}  // namespace detail

/// Integrates the geodesic through z for time up to t_max (t_max > 0),
/// optionally carrying auxiliary components with d(aux)/dt = aux_rhs(...).
/// Stops at the first crossing of ∂M (StopAt::Boundary, for starts in M),
/// of ∂M_e, or never.
template <class Aux = detail::NoAux>
RayRun integrate_ray(const SurfaceModel& model, const PhasePoint& z, double t_max, const IntegratorOptions& opt,
                     StopAt stop = StopAt::Boundary, std::span<const double> aux_init = {}, Aux aux = Aux{}) {
  require_in_chart(model, z.q);
  const std::size_t n = 3 + aux_init.size();
  detail::FlowSystem<Aux> sys{model, aux, n};
  detail::DormandPrince<detail::FlowSystem<Aux>> dp(sys, n);

  auto barrier = [&](const std::vector<double>& y) {
    const Vec2 q{y[0], y[1]};
    switch (stop) {
      case StopAt::Boundary:
        return boundary_defining(model, q);
      case StopAt::ExtendedBoundary:
        return extended_boundary_defining(model, q);
      default:
        return extended_boundary_defining(model, q) + 1.0;
    }
  };
  // Starts outside M (but in M_e) stop at ∂M_e instead. Exit points located by
  // bisection sit up to ~event_tol outside ∂M and still count as on it.
  const double on_boundary = std::max(1e-9, 100 * opt.event_tol);
  if (stop == StopAt::Boundary && boundary_defining(model, z.q) < -on_boundary) stop = StopAt::ExtendedBoundary;

  std::vector<double> y(n), y_new(n), y_ev(n);
  y[0] = z.q[0];
  y[1] = z.q[1];
  y[2] = z.theta;
  for (std::size_t i = 0; i < aux_init.size(); ++i) y[3 + i] = aux_init[i];

  RayRun run;
  auto to_point = [](const std::vector<double>& v) { return PhasePoint{{v[0], v[1]}, wrap_angle(v[2])}; };
  if (opt.record) run.trajectory.push_back({0.0, to_point(y)});

  double t = 0.0, h = std::min(opt.h_init, t_max);
  sys(y.data(), dp.k1.data());
  long steps = 0;
  while (t < t_max) {
    if (++steps > opt.max_steps)
      throw IntegratorFailure("step budget exhausted at t=" + std::to_string(t), run.trajectory);
    h = std::min({h, opt.h_max, t_max - t});
    if (h < opt.h_min) {
      if (t_max - t < opt.h_min) break;
      throw IntegratorFailure("step size underflow at t=" + std::to_string(t), run.trajectory);
    }
    const double err = dp.step(y, h, y_new, opt.tol);
    if (!(err <= 1.0)) {
      const double fac = std::isfinite(err) ? std::max(0.2, 0.9 * std::pow(err, -0.2)) : 0.2;
      h *= fac;
      continue;
    }
    if (stop != StopAt::Never && barrier(y_new) < 0.0) {
      // Locate the crossing by bisection on single steps from y.
      double lo = 0.0, hi = h;
      const std::vector<double> k1_saved = dp.k1;
      while (hi - lo > opt.event_tol) {
        const double mid = 0.5 * (lo + hi);
        dp.k1 = k1_saved;
        dp.step(y, mid, y_ev, opt.tol);
        if (barrier(y_ev) >= 0.0)
          lo = mid;
        else
          hi = mid;
      }
      const double tau = 0.5 * (lo + hi);
      dp.k1 = k1_saved;
      dp.step(y, tau, y_ev, opt.tol);
      run.t = t + tau;
      run.end = to_point(y_ev);
      run.exited = true;
      run.extra.assign(y_ev.begin() + 3, y_ev.end());
      if (opt.record) run.trajectory.push_back({run.t, run.end});
      return run;
    }
    t += h;
    y.swap(y_new);
    dp.k1 = dp.k7;  // FSAL
    if (opt.record) run.trajectory.push_back({t, to_point(y)});
    const double fac = err > 0 ? std::min(5.0, 0.9 * std::pow(err, -0.2)) : 5.0;
    h *= fac;
  }
  run.t = t;
  run.end = to_point(y);
  run.exited = false;
  run.extra.assign(y.begin() + 3, y.end());
  return run;
}

// ---------------------------------------------------------------------------
// Escape times and trajectories

struct GeodesicResult {
  std::vector<TrajectorySample> trajectory;
  EscapeRecord record;  // forward fields only
};

inline GeodesicResult integrate_geodesic(const SurfaceModel& model, const PhasePoint& z, double t_max,
                                         double tol = 1e-10) {
  if (!(t_max > 0) || !(tol > 0)) throw PreconditionError("integrate_geodesic: t_max and tol must be positive");
  IntegratorOptions opt;
  opt.tol = tol;
  opt.event_tol = std::min(1e-10, tol);
  opt.record = true;
  RayRun run = integrate_ray(model, z, t_max, opt);
  GeodesicResult res;
  res.trajectory = std::move(run.trajectory);
  res.record.l_plus = run.t;
  res.record.trapped_forward = !run.exited;
  if (run.exited) res.record.exit_forward = run.end;
  return res;
}

/// Forward exit of z: (time, exit point or none if still inside at T_max).
inline std::pair<double, std::optional<PhasePoint>> forward_exit(const SurfaceModel& model, const PhasePoint& z,
                                                                 double T_max, const IntegratorOptions& opt = {}) {
  RayRun run = integrate_ray(model, z, T_max, opt);
  if (run.exited) return {run.t, run.end};
  return {T_max, std::nullopt};
}

/// Backward exit: the point φ_{l₋}(z) ∈ ∂₋SM and l₋ ≤ 0.
inline std::pair<double, std::optional<PhasePoint>> backward_exit(const SurfaceModel& model, const PhasePoint& z,
                                                                  double T_max,
                                                                  const IntegratorOptions& opt = {}) {
  RayRun run = integrate_ray(model, reversed(z), T_max, opt);
  if (run.exited) return {-run.t, reversed(run.end)};
  return {-T_max, std::nullopt};
}

inline EscapeRecord escape_time(const SurfaceModel& model, const PhasePoint& z, double T_max,
                                const IntegratorOptions& opt = {}) {
  if (!(T_max > 0)) throw PreconditionError("escape_time: T_max must be positive");
  EscapeRecord rec;
  auto [tp, ep] = forward_exit(model, z, T_max, opt);
  auto [tm, em] = backward_exit(model, z, T_max, opt);
  rec.l_plus = tp;
  rec.l_minus = tm;
  rec.exit_forward = ep;
  rec.exit_backward = em;
  rec.trapped_forward = !ep.has_value();
  rec.trapped_backward = !em.has_value();
  return rec;
}

/// φ_t(z) for t of either sign, following the flow inside M_e.
inline PhasePoint flow_map(const SurfaceModel& model, const PhasePoint& z, double t,
                           const IntegratorOptions& opt = {}) {
  if (t == 0.0) return z;
  const PhasePoint start = t > 0 ? z : reversed(z);
  RayRun run = integrate_ray(model, start, std::abs(t), opt, StopAt::ExtendedBoundary);
  if (run.exited) throw DomainError("flow_map: orbit leaves the extended chart");
  return t > 0 ? run.end : reversed(run.end);
}

// ---------------------------------------------------------------------------
// Boundary fan for dμ_ν on ∂₋SM

struct BoundaryFan {
  std::vector<PhasePoint> nodes;
  std::vector<double> weights;
  // Structured layout: node index = (component * n_boundary + i) * n_angle + j,
  // boundary parameter α_i = 2π(i + ½)/n_boundary, β_j = −π/2 + π(j + ½)/n_angle
  // the angle from the inward normal.
  int n_components = 1;
  int n_boundary = 0;
  int n_angle = 0;

  std::size_t size() const { return nodes.size(); }
  double alpha(int i) const { return two_pi * (i + 0.5) / n_boundary; }
  double beta(int j) const { return -0.5 * pi + pi * (j + 0.5) / n_angle; }
  std::size_t index(int comp, int i, int j) const {
    return (static_cast<std::size_t>(comp) * n_boundary + i) * n_angle + j;
  }
};

/// Frame angle of the inward direction making angle β with the inward normal.
inline double inward_angle(const BoundaryPoint& b, double beta) { return wrap_angle(b.normal_angle + pi + beta); }

inline BoundaryFan boundary_fan(const SurfaceModel& model, int n_boundary, int n_angle) {
  if (n_boundary < 4 || n_angle < 4) throw PreconditionError("boundary_fan: counts must be >= 4");
  BoundaryFan fan;
  fan.n_components = boundary_components(model);
  fan.n_boundary = n_boundary;
  fan.n_angle = n_angle;
  const double da = two_pi / n_boundary, db = pi / n_angle;
  for (int c = 0; c < fan.n_components; ++c)
    for (int i = 0; i < n_boundary; ++i) {
      const BoundaryPoint b = boundary_point(model, c, fan.alpha(i));
      for (int j = 0; j < n_angle; ++j) {
        const double beta = fan.beta(j);
        fan.nodes.push_back({b.q, inward_angle(b, beta)});
        fan.weights.push_back(std::cos(beta) * db * b.arc_density * da);
      }
    }
  return fan;
}

/// Fan coordinates (component, α, β) of a phase point on ∂₋SM.
struct FanCoordinates {
  int component;
  double alpha;
  double beta;
};

inline FanCoordinates fan_coordinates(const SurfaceModel& model, const PhasePoint& z) {
  const BoundaryPoint b = locate_on_boundary(model, z.q);
  return {b.component, b.param, wrap_signed(z.theta - b.normal_angle - pi)};
}

// ---------------------------------------------------------------------------
// Santaló's formula

struct SantaloResult {
  double lhs = 0;  // ∫_SM f dμ
  double rhs = 0;  // ∫_{∂₋SM} ∫_0^{l₊} f(φ_t) dt dμ_ν
  int truncated = 0;
};

using SMFunction = std::function<double(const Vec2&, double)>;

inline SantaloResult santalo_check(const SurfaceModel& model, const SMFunction& f, const BoundaryFan& fan,
                                   const SMQuadrature& quad, double T_max, const IntegratorOptions& opt = {}) {
  SantaloResult res;
  const std::size_t nq = quad.space.nodes.size();
  std::vector<double> lhs_terms(nq);
  parallel_for(nq, [&](std::size_t i) {
    double s = 0.0;
    for (int k = 0; k < quad.n_fiber; ++k) s += f(quad.space.nodes[i], quad.fiber_angle(k));
    lhs_terms[i] = s * quad.fiber_weight() * quad.space.weights[i];
  });
  res.lhs = ordered_sum(lhs_terms);

  std::vector<double> rhs_terms(fan.size());
  std::vector<int> trunc(fan.size(), 0);
  parallel_for(fan.size(), [&](std::size_t i) {
    const double init[1] = {0.0};
    auto integrand = [&](const Vec2& q, double th, const Vec2&, const double*, double* out) { out[0] = f(q, th); };
    RayRun run = integrate_ray(model, fan.nodes[i], T_max, opt, StopAt::Boundary, std::span<const double>(init, 1),
                               integrand);
    rhs_terms[i] = fan.weights[i] * run.extra[0];
    trunc[i] = run.exited ? 0 : 1;
  });
  res.rhs = ordered_sum(rhs_terms);
  for (int t : trunc) res.truncated += t;
  return res;
}

// ---------------------------------------------------------------------------
// Liouville sampling and non-escaping mass

/// Draws n points uniformly with respect to dμ on SM, in draw order.
inline std::vector<PhasePoint> sample_liouville(const SurfaceModel& model, std::size_t n, std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  std::uniform_real_distribution<double> U(0.0, 1.0);
  // Rejection envelope for the area density over M.
  double dmax = 0.0;
  for (int i = 0; i <= 100; ++i)
    for (int j = 0; j < 100; ++j) {
      Vec2 q;
      if (model.kind == ChartKind::ConformalDisk)
        q = {i / 100.0 * std::cos(two_pi * j / 100), i / 100.0 * std::sin(two_pi * j / 100)};
      else
        q = {-model.R + 2.0 * model.R * i / 100.0, 0.0};
      dmax = std::max(dmax, area_density(model, q));
    }
  dmax *= 1.05;
  std::vector<PhasePoint> out;
  out.reserve(n);
  while (out.size() < n) {
    Vec2 q;
    if (model.kind == ChartKind::ConformalDisk) {
      const double rho = std::sqrt(U(rng)), a = two_pi * U(rng);
      q = {rho * std::cos(a), rho * std::sin(a)};
    } else {
      q = {-model.R + 2.0 * model.R * U(rng), two_pi * U(rng)};
    }
    const double accept = U(rng);
    const double theta = two_pi * U(rng);
    if (accept * dmax <= area_density(model, q)) out.push_back({q, theta});
  }
  return out;
}

struct MassDecay {
  std::vector<double> times;
  std::vector<double> V;
  std::vector<double> stderr_;
  double total_mass = 0;  // μ(SM)
  std::uint64_t seed = 0;
  std::size_t n_samples = 0;
  double horizon = 0;
};

/// Forward escape times of n Liouville samples, capped at the horizon.
inline std::vector<double> sampled_escape_times(const SurfaceModel& model, std::size_t n, std::uint64_t seed,
                                                double horizon, const IntegratorOptions& opt) {
  const std::vector<PhasePoint> pts = sample_liouville(model, n, seed);
  std::vector<double> lp(n);
  parallel_for(n, [&](std::size_t i) { lp[i] = integrate_ray(model, pts[i], horizon, opt).t; });
  return lp;
}

inline MassDecay nonescaping_mass(const SurfaceModel& model, const std::vector<double>& times, std::size_t n_samples,
                                  std::uint64_t seed, IntegratorOptions opt = {}) {
  if (times.empty()) throw PreconditionError("nonescaping_mass: no times given");
  for (std::size_t i = 0; i < times.size(); ++i)
    if (times[i] < 0 || (i > 0 && times[i] < times[i - 1]))
      throw PreconditionError("nonescaping_mass: times must be non-negative and ascending");
  if (n_samples == 0) throw PreconditionError("nonescaping_mass: need samples");
  MassDecay md;
  md.times = times;
  md.seed = seed;
  md.n_samples = n_samples;
  md.horizon = std::max(times.back(), 1e-12);
  md.total_mass = two_pi * area(model);
  const std::vector<double> lp = sampled_escape_times(model, n_samples, seed, md.horizon, opt);
  for (double t : times) {
    std::size_t count = 0;
    for (double l : lp)
      if (l >= t) ++count;
    const double p = static_cast<double>(count) / n_samples;
    md.V.push_back(md.total_mass * p);
    md.stderr_.push_back(md.total_mass * std::sqrt(p * (1.0 - p) / n_samples));
  }
  return md;
}

struct RateFit {
  double Q = 0;          // slope of log V
  double intercept = 0;
  double r2 = 0;
  int n_points = 0;
  double t_lo = 0, t_hi = 0;
};

/// Least-squares slope of log V(t) over samples with t in [t_lo, t_hi] and V > 0.
inline RateFit escape_rate(const std::vector<double>& times, const std::vector<double>& V, double t_lo,
                           double t_hi) {
  std::vector<double> ts, ls;
  bool any_in_window = false;
  for (std::size_t i = 0; i < times.size(); ++i) {
    if (times[i] < t_lo || times[i] > t_hi) continue;
    any_in_window = true;
    if (V[i] > 0) {
      ts.push_back(times[i]);
      ls.push_back(std::log(V[i]));
    }
  }
  if (!any_in_window) throw PreconditionError("escape_rate: no samples in the fit window");
  if (ts.empty()) throw UndefinedError("escape_rate: V vanishes on the whole window");
  if (ts.size() < 4) throw UndefinedError("escape_rate: fewer than 4 samples with V > 0 in the window");
  const double n = static_cast<double>(ts.size());
  double mt = 0, ml = 0;
  for (std::size_t i = 0; i < ts.size(); ++i) {
    mt += ts[i];
    ml += ls[i];
  }
  mt /= n;
  ml /= n;
  double stt = 0, stl = 0, sll = 0;
  for (std::size_t i = 0; i < ts.size(); ++i) {
    stt += (ts[i] - mt) * (ts[i] - mt);
    stl += (ts[i] - mt) * (ls[i] - ml);
    sll += (ls[i] - ml) * (ls[i] - ml);
  }
  RateFit fit;
  fit.Q = stl / stt;
  fit.intercept = ml - fit.Q * mt;
  fit.r2 = sll > 0 ? (stl * stl) / (stt * sll) : 1.0;
  fit.n_points = static_cast<int>(ts.size());
  fit.t_lo = t_lo;
  fit.t_hi = t_hi;
  return fit;
}

struct IntegrabilityResult {
  double value = 0;       // body + tail
  double body = 0;        // ∫_1^{t_last} t^a V dt from samples
  double tail = 0;        // fitted exponential tail beyond t_last
  bool divergent = false;
};

/// ∫_1^∞ t^{p/(p−2)} V(t) dt from samples, with an exponential tail fit.
inline IntegrabilityResult integrability_diagnostic(const std::vector<double>& times, const std::vector<double>& V,
                                                    double p) {
  if (!(p > 2)) throw PreconditionError("integrability_diagnostic: p must exceed 2");
  if (times.size() < 2) throw PreconditionError("integrability_diagnostic: need samples");
  const double a = p / (p - 2.0);
  IntegrabilityResult res;
  auto g = [&](double t, double v) { return std::pow(t, a) * v; };
  for (std::size_t i = 0; i + 1 < times.size(); ++i) {
    double t0 = times[i], t1 = times[i + 1], v0 = V[i], v1 = V[i + 1];
    if (t1 <= 1.0) continue;
    if (t0 < 1.0) {
      v0 = v0 + (v1 - v0) * (1.0 - t0) / (t1 - t0);
      t0 = 1.0;
    }
    res.body += 0.5 * (t1 - t0) * (g(t0, v0) + g(t1, v1));
  }
  const double t_last = times.back(), v_last = V.back();
  if (v_last > 0) {
    // Fit over the last half of the positive samples.
    std::vector<double> tt, vv;
    for (std::size_t i = 0; i < times.size(); ++i)
      if (V[i] > 0) {
        tt.push_back(times[i]);
        vv.push_back(V[i]);
      }
    double Q = 0;
    try {
      const std::size_t h = tt.size() / 2;
      const RateFit fit = escape_rate(tt, vv, tt[h], tt.back());
      Q = fit.Q;
    } catch (const std::exception&) {
      Q = 0;
    }
    if (!(Q < 0)) {
      res.divergent = true;
      res.tail = std::numeric_limits<double>::infinity();
    } else {
      const double len = 60.0 / -Q;
      const GaussRule gr = gauss_legendre(64, t_last, t_last + len);
      for (std::size_t i = 0; i < gr.nodes.size(); ++i)
        res.tail += gr.weights[i] * g(gr.nodes[i], v_last * std::exp(Q * (gr.nodes[i] - t_last)));
      if (res.tail > res.body) res.divergent = true;
    }
  }
  res.value = res.body + res.tail;
  return res;
}

// ---------------------------------------------------------------------------
// Jacobi fields and hyperbolicity

/// Normal Jacobi field (a, ȧ) along a unit-speed geodesic: ä + K a = 0.
struct JacobiFrame {
  double a = 0;
  double a_dot = 0;
};

struct JacobiResult {
  JacobiFrame frame;
  PhasePoint end;
  double t = 0;
};

inline JacobiResult jacobi_transport(const SurfaceModel& model, const PhasePoint& z, double t, JacobiFrame init,
                                     const IntegratorOptions& opt = {}) {
  if (!(t >= 0)) throw PreconditionError("jacobi_transport: t must be non-negative");
  JacobiResult res{init, z, 0.0};
  if (t == 0) return res;
  const double y0[2] = {init.a, init.a_dot};
  auto rhs = [&](const Vec2& q, double, const Vec2&, const double* in, double* out) {
    out[0] = in[1];
    out[1] = -gauss_curvature(model, q) * in[0];
  };
  RayRun run = integrate_ray(model, z, t, opt, StopAt::ExtendedBoundary, std::span<const double>(y0, 2), rhs);
  if (run.exited) throw DomainError("jacobi_transport: orbit leaves the extended chart");
  res.frame = {run.extra[0], run.extra[1]};
  res.end = run.end;
  res.t = run.t;
  return res;
}

/// First zero in (0, l₊) of the Jacobi field with a(0)=0, ȧ(0)=1, if any.
/// The field is followed in chunks of length dt and a sign change between
/// chunk ends counts as a zero.
inline std::optional<double> first_conjugate_time(const SurfaceModel& model, const PhasePoint& z, double T_max,
                                                  const IntegratorOptions& opt = {}, double dt = 0.02) {
  auto rhs = [&](const Vec2& q, double, const Vec2&, const double* in, double* out) {
    out[0] = in[1];
    out[1] = -gauss_curvature(model, q) * in[0];
  };
  PhasePoint cur = z;
  double a = 0.0, ad = 1.0, t = 0.0;
  while (t < T_max) {
    const double y[2] = {a, ad};
    const RayRun run =
        integrate_ray(model, cur, std::min(dt, T_max - t), opt, StopAt::Boundary, std::span<const double>(y, 2), rhs);
    if (t > 0 && !run.exited && run.extra[0] * a <= 0.0) return t + run.t;
    a = run.extra[0];
    ad = run.extra[1];
    t += run.t;
    cur = run.end;
    if (run.exited) break;
  }
  return std::nullopt;
}

struct LyapunovResult {
  double nu = 0;              // growth exponent
  double unstable_slope = 0;  // ȧ/a along E_u
  double stable_slope = 0;    // ȧ/a along E_s
  double unstable_angle = 0;  // atan of the slopes
  double stable_angle = 0;
};

inline LyapunovResult lyapunov_on_trapped(const SurfaceModel& model, const PhasePoint& z, double T,
                                          const IntegratorOptions& opt = {}) {
  const EscapeRecord rec = escape_time(model, z, T, opt);
  if (!rec.trapped_forward || !rec.trapped_backward)
    throw PreconditionError("lyapunov_on_trapped: point is not trapped in both directions at this horizon");
  LyapunovResult res;
  const JacobiFrame generic{1.0, 0.5};
  const JacobiResult fwd = jacobi_transport(model, z, T, generic, opt);
  const double n0 = std::hypot(generic.a, generic.a_dot);
  res.nu = std::log(std::hypot(fwd.frame.a, fwd.frame.a_dot) / n0) / T;
  // E_u(z): push a generic frame from φ_{−T}(z) forward to z.
  const double Ts = std::min(T, 20.0);
  const PhasePoint past = flow_map(model, z, -Ts, opt);
  const JacobiResult u = jacobi_transport(model, past, Ts, generic, opt);
  res.unstable_slope = u.frame.a_dot / u.frame.a;
  // E_s(z): pull a generic frame back from φ_T(z) along the reversed orbit.
  const PhasePoint future = flow_map(model, z, Ts, opt);
  const JacobiResult s = jacobi_transport(model, reversed(future), Ts, generic, opt);
  res.stable_slope = -s.frame.a_dot / s.frame.a;
  res.unstable_angle = std::atan(res.unstable_slope);
  res.stable_angle = std::atan(res.stable_slope);
  return res;
}

/// Fraction of Liouville samples still inside M at each horizon in T_list.
inline std::vector<double> tail_mass_diagnostic(const SurfaceModel& model, const std::vector<double>& T_list,
                                                std::size_t n_samples, std::uint64_t seed,
                                                const IntegratorOptions& opt = {}) {
  if (T_list.empty() || n_samples == 0) throw PreconditionError("tail_mass_diagnostic: empty input");
  const double horizon = *std::max_element(T_list.begin(), T_list.end());
  const std::vector<double> lp = sampled_escape_times(model, n_samples, seed, horizon, opt);
  std::vector<double> frac;
  for (double T : T_list) {
    std::size_t c = 0;
    for (double l : lp)
      if (l >= T) ++c;
    frac.push_back(static_cast<double>(c) / n_samples);
  }
  return frac;
}

}  // namespace geox
