// Command-line experiment harness. Each subcommand reads a JSON config (plus
// flag overrides), runs one family of checks, and writes CSV tables, a JSON
// report and a plain-text summary into the output directory.
//
// Exit status: 0 all checks within threshold, 1 a check failed or the
// computation broke down, 2 the configuration was rejected.
#pragma once

#include <CLI11.hpp>
#include <algorithm>
#include <cmath>
#include <deque>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <optional>
#include <random>
#include <set>
#include <sstream>
#include <string>
#include <vector>

#include "geoxray/fiber.hpp"
#include "geoxray/xray.hpp"
#include "io.hpp"

namespace geox::cli {

namespace fs = std::filesystem;
using io::json;

class ConfigError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

inline const std::vector<std::string>& commands() {
  static const std::vector<std::string> c{"escape",       "mass-decay", "santalo",  "xray",         "adjoint-check",
                                          "sinjectivity", "theorem2",   "fiber-check", "theorem4"};
  return c;
}

// ---------------------------------------------------------------------------
// Config access with defaults, bounds and unknown-key detection

/// A JSON object whose keys are consumed by get(); leftovers are rejected.
class Section {
 public:
  Section(json j, std::string path) : j_(std::move(j)), path_(std::move(path)) {
    if (!j_.is_null() && !j_.is_object()) throw ConfigError(path_ + ": expected an object");
    if (j_.is_null()) j_ = json::object();
  }

  bool has(const std::string& key) const { return j_.contains(key); }

  template <class T>
  T get(const std::string& key, T def) {
    used_.insert(key);
    T v = def;
    if (j_.contains(key)) {
      try {
        v = j_.at(key).get<T>();
      } catch (const json::exception&) {
        throw ConfigError(where(key) + ": wrong type");
      }
    }
    effective_[key] = v;
    return v;
  }

  template <class T>
  T get_min(const std::string& key, T def, T min) {
    const T v = get<T>(key, def);
    if (!(v >= min)) throw ConfigError(where(key) + " must be >= " + io::num(static_cast<double>(min)));
    return v;
  }

  double get_positive(const std::string& key, double def) {
    const double v = get<double>(key, def);
    if (!(v > 0) || !std::isfinite(v)) throw ConfigError(where(key) + " must be positive");
    return v;
  }

  Section sub(const std::string& key) {
    used_.insert(key);
    return Section(j_.contains(key) ? j_.at(key) : json(), path_.empty() ? key : path_ + "." + key);
  }

  void record(const std::string& key, json v) { effective_[key] = std::move(v); }

  /// Throws on keys nobody asked for (usually typos).
  void finish() const {
    for (auto it = j_.begin(); it != j_.end(); ++it)
      if (!used_.count(it.key())) throw ConfigError("unknown key '" + where(it.key()) + "'");
  }

  const json& effective() const { return effective_; }
  std::string where(const std::string& key) const { return path_.empty() ? key : path_ + "." + key; }
  const std::string& path() const { return path_; }

 private:
  json j_;
  std::string path_;
  std::set<std::string> used_;
  json effective_ = json::object();
};

// ---------------------------------------------------------------------------
// Shared settings

struct Check {
  std::string name;
  double value = 0;
  double threshold = 0;
  std::string relation;  // "<=", ">=" or "info"
  bool pass = true;
};

struct Run {
  std::string command;
  std::string preset;
  bool default_model = true;  // preset parameters untouched
  SurfaceModel model;
  json model_effective;
  int grid_radial = 16, grid_angular = 32, fiber = 16;
  int fan_boundary = 32, fan_angle = 32;
  double T_max = 40;
  IntegratorOptions opt;
  std::uint64_t seed = 1;
  int refine = 0;
  fs::path out;

  Section root{json(), ""};
  std::deque<Section> sections;  // stable references
  json settings = json::object();  // effective model, grid, fan and integrator
  std::vector<Check> checks;
  json results = json::object();
  io::Context context;

  Section& section(const std::string& key) {
    sections.push_back(root.sub(key));
    return sections.back();
  }

  double threshold(const std::string& key, double def) {
    Section& t = thresholds();
    return t.get_positive(key, def);
  }

  Section& thresholds() {
    if (!thr_) thr_ = root.sub("thresholds");
    return *thr_;
  }

  bool thresholds_used() const { return thr_.has_value(); }
  json thresholds_effective() const { return thr_ ? thr_->effective() : json::object(); }

  void validate() {
    root.finish();
    if (thr_) thr_->finish();
    for (const Section& s : sections) s.finish();
  }

  void at_most(const std::string& name, double value, double thr) {
    checks.push_back({name, value, thr, "<=", value <= thr});
  }
  void at_least(const std::string& name, double value, double thr) {
    checks.push_back({name, value, thr, ">=", value >= thr});
  }
  void info(const std::string& name, double value) { checks.push_back({name, value, 0, "info", true}); }

  io::CsvWriter csv(const std::string& file, const std::vector<std::string>& columns,
                    const io::Context& extra = {}) const {
    io::Context ctx = context;
    ctx.insert(ctx.end(), extra.begin(), extra.end());
    return io::CsvWriter(out / file, ctx, columns);
  }

  BoundaryFan fan() const { return boundary_fan(model, fan_boundary, fan_angle); }
  std::string resolution() const {
    std::ostringstream s;
    s << "grid=" << grid_radial << "x" << grid_angular << " fiber=" << fiber << " fan=" << fan_boundary << "x"
      << fan_angle << " T_max=" << T_max << " tol=" << opt.tol << " refine=" << refine;
    return s.str();
  }

 private:
  std::optional<Section> thr_;
};

inline SurfaceModel build_model(Section& m, const std::string& preset, bool& untouched) {
  SurfaceModel model;
  if (preset == "flat-disk") {
    model = flat_disk();
  } else if (preset == "bump-disk") {
    const double a = m.get<double>("amplitude", 0.25);
    const double w = m.get_positive("width", 0.35);
    const auto c = m.get<std::vector<double>>("centre", {0.15, -0.1});
    if (c.size() != 2) throw ConfigError(m.where("centre") + " must have two entries");
    model = bump_disk(a, w, {c[0], c[1]});
    untouched = m.has("amplitude") || m.has("width") || m.has("centre") ? false : untouched;
  } else if (preset == "poincare-disk") {
    const double s = m.get_positive("scale", 0.5);
    if (s >= 1.0 / 1.25) throw ConfigError(m.where("scale") + " must keep the extended chart inside the disk (< 0.8)");
    model = poincare_disk(s);
    untouched = m.has("scale") ? false : untouched;
  } else if (preset == "hyperbolic-cylinder") {
    model = hyperbolic_cylinder(m.get_positive("half_width", 1.0), m.get_positive("margin", 0.25));
    untouched = m.has("half_width") || m.has("margin") ? false : untouched;
  } else {
    std::string known;
    for (const auto& n : preset_names()) known += (known.empty() ? "" : ", ") + n;
    throw ConfigError("unknown preset '" + preset + "' (known: " + known + ")");
  }
  return model;
}

// ---------------------------------------------------------------------------
// Test functions shared by several subcommands

/// Smooth bump on M, periodic in the annulus angle, times a mild θ modulation.
inline SMFunction bump_function(const SurfaceModel& model, Vec2 centre, double radius) {
  const bool annulus = model.kind == ChartKind::WarpedAnnulus;
  return [=](const Vec2& q, double th) {
    const double d0 = q[0] - centre[0];
    const double d1 = annulus ? 2 * std::sin(0.5 * (q[1] - centre[1])) : q[1] - centre[1];
    const double r2 = (d0 * d0 + d1 * d1) / (radius * radius);
    if (r2 >= 1) return 0.0;
    return std::exp(1.0 - 1.0 / (1.0 - r2)) * (1.0 + 0.2 * std::sin(th));
  };
}

/// Random smooth function on SM; periodic in q₁ so it is valid on both charts.
inline SMFunction random_sm_function(std::mt19937_64& rng) {
  std::uniform_real_distribution<double> U(-1, 1);
  const double a = U(rng), b = U(rng), c = U(rng), d = U(rng), e = U(rng);
  return [=](const Vec2& q, double th) {
    return std::exp(a * q[0]) * std::cos(b * std::sin(q[1]) + c) + d * std::sin(th + e * q[0]) + 0.3 * std::cos(2 * th);
  };
}

inline FanFunction random_fan_function(std::mt19937_64& rng) {
  std::uniform_real_distribution<double> U(-1, 1);
  const double a = U(rng), b = U(rng), c = U(rng);
  return [=](int comp, double al, double be) {
    return 1.0 + a * std::cos(al + comp) + b * std::sin(be) * std::cos(al) + c * std::cos(2 * be);
  };
}

/// Smooth band-limited modes ũ_k = a exp(b q₀ + i(c sin q₁ + d q₀ cos q₁)).
inline ModeFunction random_mode_function(int band, std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  std::uniform_real_distribution<double> U(-1, 1);
  std::vector<std::array<double, 5>> c(2 * band + 1);
  for (auto& a : c)
    for (double& x : a) x = U(rng);
  return {band, [band, c](const Vec2& q, cplx* out) {
            for (int k = -band; k <= band; ++k) {
              const auto& a = c[k + band];
              out[k + band] =
                  cplx(a[0], a[1]) * std::exp(cplx(a[2] * q[0], a[3] * std::sin(q[1]) + a[4] * q[0] * std::cos(q[1])));
            }
          }};
}

/// Named divergence-free test fields of order m for the chart of `model`.
inline TensorField solenoidal_field(const SurfaceModel& model, int m, const std::string& name) {
  const bool conformal = model.kind == ChartKind::ConformalDisk;
  auto constant = [m](std::vector<double> c) {
    return TensorField{m, [c](const Vec2&, double* v, double*, double*) { std::copy(c.begin(), c.end(), v); }, false};
  };
  auto values = [m](std::function<void(const Vec2&, double*)> f) {
    return TensorField{m, [f](const Vec2& q, double* v, double*, double*) { f(q, v); }, false};
  };
  if (conformal && m == 1) {
    if (name == "dx") return constant({1, 0});
    if (name == "re-z-dz") return values([](const Vec2& q, double* v) { v[0] = q[0], v[1] = -q[1]; });
    // (ψ_y, −ψ_x) for ψ = sin(x + 2y) is co-closed for every conformal factor.
    if (name == "stream")
      return values([](const Vec2& q, double* v) {
        const double c = std::cos(q[0] + 2 * q[1]);
        v[0] = 2 * c, v[1] = -c;
      });
  }
  if (conformal && m == 2) {
    if (name == "re-dz2") return constant({1, 0, -1});
    if (name == "re-z-dz2") return values([](const Vec2& q, double* v) { v[0] = q[0], v[1] = -q[1], v[2] = -q[0]; });
    if (name == "im-z-dz2") return values([](const Vec2& q, double* v) { v[0] = q[1], v[1] = q[0], v[2] = -q[1]; });
  }
  if (!conformal && m == 1) {
    if (name == "ds") return constant({0, 1});
    if (name == "dr-over-f")
      return values([model](const Vec2& q, double* v) { v[0] = 1.0 / model.warp_profile(q[0]).value, v[1] = 0; });
  }
  if (m == 2 && name == "metric")
    return values([model](const Vec2& q, double* v) {
      const Mat2 g = metric_at(model, q);
      v[0] = g[0][0], v[1] = g[0][1], v[2] = g[1][1];
    });
  throw ConfigError("no solenoidal field '" + name + "' of order " + std::to_string(m) + " on this chart");
}

inline std::vector<std::string> default_fields(const SurfaceModel& model, int m) {
  if (model.kind == ChartKind::ConformalDisk) {
    if (m == 1) return {"dx", "re-z-dz", "stream"};
    return {"re-dz2", "re-z-dz2", "im-z-dz2"};
  }
  if (m == 1) return {"ds", "dr-over-f"};
  return {"metric"};
}

// ---------------------------------------------------------------------------
// Subcommands. Each reads its parameters, calls r.validate(), then computes.

inline void cmd_escape(Run& r) {
  Section& s = r.section("escape");
  const auto n = static_cast<std::size_t>(s.get_min<long>("n_points", 1000, 1));
  const double chord_tol = r.threshold("chord", 1e-6);
  r.validate();

  const std::vector<PhasePoint> pts = sample_liouville(r.model, n, r.seed);
  std::vector<EscapeRecord> rec(n);
  parallel_for(n, [&](std::size_t i) { rec[i] = escape_time(r.model, pts[i], r.T_max, r.opt); });
  io::CsvWriter t = r.csv("escape_times.csv", {"x", "y", "theta", "l_plus", "l_minus", "trapped_forward", "trapped_backward"});
  std::size_t trapped = 0;
  double chord_err = 0;
  for (std::size_t i = 0; i < n; ++i) {
    t.row(pts[i].q[0], pts[i].q[1], pts[i].theta, rec[i].l_plus, rec[i].l_minus, rec[i].trapped_forward,
          rec[i].trapped_backward);
    trapped += rec[i].trapped_forward || rec[i].trapped_backward;
    const Vec2 v = unit_dir(pts[i].theta);
    const double b = pts[i].q[0] * v[0] + pts[i].q[1] * v[1];
    const double x2 = pts[i].q[0] * pts[i].q[0] + pts[i].q[1] * pts[i].q[1];
    chord_err = std::max(chord_err, std::abs(rec[i].l_plus - (-b + std::sqrt(1 - x2 + b * b))));
  }

  const BoundaryFan fan = r.fan();
  const std::vector<ScatteringEntry> sc = scattering_data(r.model, fan, r.T_max, r.opt);
  io::CsvWriter c = r.csv("scattering.csv", {"component", "alpha", "beta", "l_plus", "trapped", "exit_component",
                                             "exit_alpha", "exit_beta_reversed"});
  std::size_t fan_trapped = 0;
  for (int comp = 0; comp < fan.n_components; ++comp)
    for (int i = 0; i < fan.n_boundary; ++i)
      for (int j = 0; j < fan.n_angle; ++j) {
        const ScatteringEntry& e = sc[fan.index(comp, i, j)];
        fan_trapped += e.trapped;
        if (e.exit) {
          const FanCoordinates fc = fan_coordinates(r.model, reversed(*e.exit));
          c.row(comp, fan.alpha(i), fan.beta(j), e.l_plus, false, fc.component, fc.alpha, fc.beta);
        } else {
          c.row(comp, fan.alpha(i), fan.beta(j), e.l_plus, true, -1, 0.0, 0.0);
        }
      }

  r.results["n_points"] = n;
  r.results["trapped_fraction"] = static_cast<double>(trapped) / static_cast<double>(n);
  r.results["fan_trapped_nodes"] = fan_trapped;
  if (r.preset == "flat-disk" && r.default_model) r.at_most("chord_formula_max_error", chord_err, chord_tol);
  r.info("trapped_fraction", static_cast<double>(trapped) / static_cast<double>(n));
}

inline void cmd_mass_decay(Run& r) {
  Section& s = r.section("mass_decay");
  const double horizon = s.get_positive("horizon", r.model.mass_decay_t_max);
  const int n_times = s.get_min<int>("n_times", 51, 2);
  const auto n_samples = static_cast<std::size_t>(s.get_min<long>("n_samples", 100000, 10));
  const auto window = s.get<std::vector<double>>("fit_window", {0.2 * horizon, 0.8 * horizon});
  if (window.size() != 2 || !(window[0] < window[1])) throw ConfigError("mass_decay.fit_window must be [lo, hi] with lo < hi");
  const double p = s.get<double>("integrability_p", 4.0);
  if (!(p > 2)) throw ConfigError("mass_decay.integrability_p must exceed 2");
  const auto tail = s.get<std::vector<double>>("tail_horizons", {0.25 * horizon, 0.5 * horizon, 0.75 * horizon, horizon});
  const auto tp = s.get<std::vector<double>>("trapped_point", {});
  if (!tp.empty() && tp.size() != 3) throw ConfigError("mass_decay.trapped_point must be [q0, q1, theta]");
  const double lyap_T = s.get_positive("lyapunov_time", 20.0);
  const std::optional<double> lyap_expected =
      s.has("lyapunov_expected") ? std::optional(s.get<double>("lyapunov_expected", 0)) : std::nullopt;
  const std::optional<double> curvature =
      s.has("curvature_target") ? std::optional(s.get<double>("curvature_target", 0)) : std::nullopt;
  const double r2_min = r.threshold("r2", 0.95);
  const double lyap_tol = r.threshold("lyapunov", 0.05);
  const double curv_tol = r.threshold("curvature", 1e-8);
  r.validate();

  std::vector<double> times(n_times);
  for (int i = 0; i < n_times; ++i) times[i] = horizon * i / (n_times - 1);
  const MassDecay md = nonescaping_mass(r.model, times, n_samples, r.seed, r.opt);
  io::CsvWriter t = r.csv("mass_decay.csv", {"t", "V", "stderr"}, {{"n_samples", std::to_string(n_samples)}});
  for (std::size_t i = 0; i < md.times.size(); ++i) t.row(md.times[i], md.V[i], md.stderr_[i]);
  r.results["total_mass"] = md.total_mass;

  try {
    const RateFit fit = escape_rate(md.times, md.V, window[0], window[1]);
    r.results["Q"] = fit.Q;
    r.results["r2"] = fit.r2;
    r.results["fit_points"] = fit.n_points;
    r.at_least("fit_r2", fit.r2, r2_min);
    r.at_most("escape_rate_Q", fit.Q, 0.0);
  } catch (const UndefinedError& e) {
    r.results["Q"] = nullptr;
    r.results["Q_status"] = std::string("undefined: ") + e.what();
  }
  try {
    const IntegrabilityResult ir = integrability_diagnostic(md.times, md.V, p);
    r.results["integrability"] = {{"p", p}, {"value", ir.value}, {"body", ir.body}, {"tail", ir.tail},
                                  {"divergent", ir.divergent}};
  } catch (const std::exception& e) {
    r.results["integrability"] = {{"p", p}, {"status", e.what()}};
  }

  const std::vector<double> frac = tail_mass_diagnostic(r.model, tail, n_samples, r.seed, r.opt);
  io::CsvWriter tc = r.csv("tail_fraction.csv", {"T", "trapped_fraction"});
  bool decreasing = true;
  for (std::size_t i = 0; i < tail.size(); ++i) {
    tc.row(tail[i], frac[i]);
    // Strict: a tail that runs out of samples (0 then 0) counts as a failure.
    if (i > 0 && !(frac[i] < frac[i - 1])) decreasing = false;
  }
  r.results["tail_fraction"] = frac;
  r.at_least("tail_fraction_decreasing", decreasing ? 1.0 : 0.0, 1.0);

  if (!tp.empty()) {
    const LyapunovResult ly = lyapunov_on_trapped(r.model, {{tp[0], tp[1]}, tp[2]}, lyap_T, r.opt);
    r.results["lyapunov"] = {{"nu", ly.nu}, {"unstable_slope", ly.unstable_slope}, {"stable_slope", ly.stable_slope}};
    if (lyap_expected) r.at_most("lyapunov_relative_error", std::abs(ly.nu - *lyap_expected) / std::abs(*lyap_expected), lyap_tol);
    else r.info("lyapunov_exponent", ly.nu);
  }
  if (curvature) {
    double worst = 0;
    for (const PhasePoint& z : sample_liouville(r.model, 200, r.seed))
      worst = std::max(worst, std::abs(gauss_curvature(r.model, z.q) - *curvature));
    r.at_most("curvature_max_deviation", worst, curv_tol);
  }
}

inline void cmd_santalo(Run& r) {
  Section& s = r.section("santalo");
  const std::string f = s.get<std::string>("function", "one");
  const bool annulus = r.model.kind == ChartKind::WarpedAnnulus;
  const auto centre = s.get<std::vector<double>>("centre", annulus ? std::vector<double>{0.55, 1.0}
                                                                     : std::vector<double>{0.2, -0.1});
  const double radius = s.get_positive("radius", 0.35);
  const std::optional<double> reference = s.has("reference") ? std::optional(s.get<double>("reference", 0)) : std::nullopt;
  if (f != "one" && f != "bump") throw ConfigError("santalo.function must be 'one' or 'bump'");
  if (centre.size() != 2) throw ConfigError("santalo.centre must have two entries");
  const double tol = r.threshold("santalo", 1e-2);
  r.validate();

  const SMFunction fn = f == "one" ? SMFunction([](const Vec2&, double) { return 1.0; })
                                   : bump_function(r.model, {centre[0], centre[1]}, radius);
  const SantaloResult res =
      santalo_check(r.model, fn, r.fan(), sm_quadrature(r.model, r.grid_radial, r.grid_angular, r.fiber), r.T_max, r.opt);
  const double defect = std::abs(res.lhs - res.rhs) / std::abs(res.lhs);
  r.results["lhs"] = res.lhs;
  r.results["rhs"] = res.rhs;
  r.results["truncated_rays"] = res.truncated;
  r.at_most("santalo_defect", defect, tol);
  if (reference) {
    r.at_most("lhs_vs_reference", std::abs(res.lhs - *reference) / std::abs(*reference), tol);
    r.at_most("rhs_vs_reference", std::abs(res.rhs - *reference) / std::abs(*reference), tol);
  }
}

inline void cmd_xray(Run& r) {
  Section& s = r.section("xray");
  const int m = s.get_min<int>("m", 0, 0);
  const std::string field = s.get<std::string>("field", m == 0 ? "one" : "coordinate");
  const int n_pot = s.get_min<int>("n_potentials", 20, 1);
  const int degree = s.get_min<int>("degree", 3, 1);
  if (m > 4) throw ConfigError("xray.m must be at most 4");
  const double tol = r.threshold("annihilation", 1e-4);
  r.validate();

  const BoundaryFan fan = r.fan();
  XrayValues I;
  if (m == 0) {
    if (field == "one") I = xray_function(r.model, [](const Vec2&, double) { return 1.0; }, fan, r.T_max, r.opt);
    else if (field == "bump") I = xray_function(r.model, bump_function(r.model, {0.2, 0.1}, 0.4), fan, r.T_max, r.opt);
    else throw ConfigError("xray.field for m = 0 must be 'one' or 'bump'");
  } else {
    if (field != "coordinate") throw ConfigError("xray.field for m >= 1 must be 'coordinate'");
    I = xray_tensor(r.model, component_field(m, 0, [](const Vec2&) { return ScalarJet{1, 0, 0}; }), fan, r.T_max, r.opt);
  }
  io::CsvWriter t = r.csv("xray.csv", {"component", "alpha", "beta", "value", "status"},
                          {{"field", field}, {"m", std::to_string(m)}});
  for (int c = 0; c < fan.n_components; ++c)
    for (int i = 0; i < fan.n_boundary; ++i)
      for (int j = 0; j < fan.n_angle; ++j) {
        const std::size_t k = fan.index(c, i, j);
        const char* st = I.status[k] == RayStatus::Ok ? "ok" : I.status[k] == RayStatus::Truncated ? "truncated" : "failed";
        t.row(c, fan.alpha(i), fan.beta(j), I.values[k], std::string(st));
      }
  r.results["truncated_rays"] = I.count(RayStatus::Truncated);
  r.results["failed_rays"] = I.count(RayStatus::Failed);
  r.at_most("failed_rays", static_cast<double>(I.count(RayStatus::Failed)), 0.0);

  if (m >= 1) {
    const AnnihilationReport a = annihilation_check(r.model, m, fan, r.T_max, n_pot, r.seed, degree, r.opt);
    io::CsvWriter at = r.csv("annihilation.csv", {"potential", "ratio"}, {{"degree", std::to_string(degree)}});
    for (std::size_t k = 0; k < a.ratios.size(); ++k) at.row(static_cast<int>(k), a.ratios[k]);
    r.results["operator_scale"] = a.operator_scale;
    r.at_most("annihilation_worst_ratio", a.worst, tol);
  }
}

inline void cmd_adjoint(Run& r) {
  Section& s = r.section("adjoint");
  const int pairs = s.get_min<int>("n_pairs", 10, 1);
  const double tol = r.threshold("adjoint", 2e-2);
  r.validate();

  const BoundaryFan fan = r.fan();
  const SMQuadrature smq = sm_quadrature(r.model, r.grid_radial, r.grid_angular, r.fiber);
  std::mt19937_64 rng(r.seed);
  io::CsvWriter t = r.csv("adjoint.csv", {"pair", "fan_side", "phase_side", "defect", "excluded_measure"});
  double worst = 0;
  for (int k = 0; k < pairs; ++k) {
    const SMFunction f = random_sm_function(rng);
    const FanFunction u = random_fan_function(rng);
    const AdjointConsistency a = adjoint_consistency(r.model, f, u, fan, smq, r.T_max, r.opt);
    t.row(k, a.fan_side, a.phase_side, a.defect, a.excluded_measure);
    worst = std::max(worst, a.defect);
  }
  r.at_most("adjoint_worst_defect", worst, tol);
}

inline void cmd_sinjectivity(Run& r) {
  Section& s = r.section("sinjectivity");
  SInjectivityOptions so;
  const int m = s.get_min<int>("m", 2, 0);
  so.degree = s.get_min<int>("degree", 3, 1);
  so.quad_radial = s.get_min<int>("quad_radial", 16, 4) << r.refine;
  so.quad_angular = s.get_min<int>("quad_angular", 32, 8) << r.refine;
  const auto csv_limit = s.get_min<long>("csv_matrix_limit", 20000, 0);
  const double margin_min = r.threshold("margin", 100.0);
  r.validate();

  const SInjectivityReport rep = sinjectivity_margin(r.model, m, r.fan(), r.T_max, so, r.opt);
  io::CsvWriter sp = r.csv("spectrum.csv", {"index", "sigma"}, {{"m", std::to_string(m)}, {"degree", std::to_string(so.degree)}});
  for (std::size_t k = 0; k < rep.spectrum.size(); ++k) sp.row(static_cast<int>(k), rep.spectrum[k]);
  io::CsvWriter pr = r.csv("potential_residuals.csv", {"potential", "residual"});
  for (std::size_t k = 0; k < rep.potential_residuals.size(); ++k) pr.row(static_cast<int>(k), rep.potential_residuals[k]);

  const RayTransformMatrix& M = rep.matrix;
  io::write_gxrm(r.out / "matrix.gxrm", M.entries, M.weights);
  if (M.entries.size() <= csv_limit) {
    std::vector<std::string> cols{"row", "weight"};
    for (const std::string& l : M.labels) cols.push_back(l);
    std::ofstream f(r.out / "matrix.csv", std::ios::binary);
    for (const auto& [k, v] : r.context) f << "# " << k << ": " << v << '\n';
    for (std::size_t i = 0; i < cols.size(); ++i) f << (i ? "," : "") << cols[i];
    f << '\n';
    for (Eigen::Index i = 0; i < M.entries.rows(); ++i) {
      f << M.rows[static_cast<std::size_t>(i)] << ',' << io::num(M.weights[static_cast<std::size_t>(i)]);
      for (Eigen::Index j = 0; j < M.entries.cols(); ++j) f << ',' << io::num(M.entries(i, j));
      f << '\n';
    }
  }
  r.results["sigma_min"] = rep.sigma_min;
  r.results["sigma_max"] = rep.sigma_max;
  r.results["max_potential_residual"] = rep.max_potential_residual;
  r.results["basis_dim"] = rep.basis_dim;
  r.results["solenoidal_dim"] = rep.solenoidal_dim;
  r.results["dropped_rows"] = rep.dropped_rows;
  r.at_least("sinjectivity_margin", rep.margin, margin_min);
}

inline void cmd_theorem2(Run& r) {
  Section& s = r.section("theorem2");
  const int m = s.get_min<int>("m", 1, 1);
  if (m > 2) throw ConfigError("theorem2.m must be 1 or 2");
  const auto names = s.get<std::vector<std::string>>("fields", default_fields(r.model, m));
  ExtensionOptions eo;
  eo.P = s.get_min<int>("P", eo.P, 1);
  eo.Q = s.get_min<int>("Q", eo.Q, 1);
  eo.reg = s.get_positive("reg", eo.reg);
  // The potential-invisibility check needs a finer spatial rule than the
  // extension itself: the leak into φ is quadrature error amplified by 1/σ.
  eo.quad_radial = s.get_min<int>("quad_radial", 40, 4) << r.refine;
  eo.quad_angular = s.get_min<int>("quad_angular", 80, 8) << r.refine;
  eo.n_fiber = s.get_min<int>("n_fiber", eo.n_fiber, 8) << r.refine;
  const int n_orbit = s.get_min<int>("orbit_samples", 16, 1);
  const double orbit_time = s.get_positive("orbit_time", 0.05);
  const double ext_tol = r.threshold("extension", 5e-2);
  const double orbit_factor = r.threshold("orbit_constancy_factor", 10.0);
  std::vector<TensorField> fields;
  for (const std::string& n : names) fields.push_back(solenoidal_field(r.model, m, n));
  if (fields.empty()) throw ConfigError("theorem2.fields is empty");
  r.validate();
  eo.T_max = r.T_max;
  eo.integrator = r.opt;

  const InvariantExtension ext(r.model, m, eo);
  const BoundaryFan fan = r.fan();
  const PotentialFamily pf = potential_family(r.model, m, 2);
  std::mt19937_64 rng(r.seed);
  std::normal_distribution<double> N(0, 1);
  std::vector<double> pc(pf.images.count);
  for (double& c : pc) c = N(rng);
  const TensorField Dp = pf.images.combination(pc);
  const std::vector<PhasePoint> pts = sample_liouville(r.model, static_cast<std::size_t>(n_orbit), r.seed + 1);

  io::CsvWriter phi = r.csv("phi.csv", {"field", "component", "alpha", "beta", "phi"},
                            {{"m", std::to_string(m)}, {"reg", io::num(eo.reg)}});
  io::CsvWriter res = r.csv("extension_residuals.csv", {"field", "residual", "rank", "orbit_defect", "potential_shift"});
  double worst_res = 0, worst_orbit = 0, worst_shift = 0;
  for (std::size_t i = 0; i < fields.size(); ++i) {
    const ExtensionResult a = ext.solve(fields[i]);
    const std::vector<double> pv = ext.phi_on_fan(a.coeffs, fan);
    for (int c = 0; c < fan.n_components; ++c)
      for (int ia = 0; ia < fan.n_boundary; ++ia)
        for (int j = 0; j < fan.n_angle; ++j) phi.row(names[i], c, fan.alpha(ia), fan.beta(j), pv[fan.index(c, ia, j)]);

    // w is constant along orbits: compare w at z and at φ_t z while inside M.
    double defect = 0, scale = 0;
    for (const PhasePoint& z : pts) {
      const PhasePoint z2 = flow_map(r.model, z, orbit_time, r.opt);
      if (!in_manifold(r.model, z2.q)) continue;
      const auto w1 = ext.w(a.coeffs, z), w2 = ext.w(a.coeffs, z2);
      if (!w1 || !w2) continue;
      defect = std::max(defect, std::abs(*w1 - *w2));
      scale = std::max(scale, std::abs(*w1));
    }
    const double orbit = scale > 0 ? defect / scale : defect;

    // A potential part Dp with p|∂M = 0 is invisible to I_m, so φ barely moves.
    // Dp is scaled to the size of f so the shift is a relative sensitivity.
    const double fn = std::sqrt(l2_inner(r.model, fields[i], fields[i], ext.quadrature()));
    const double pn = std::sqrt(l2_inner(r.model, Dp, Dp, ext.quadrature()));
    const ExtensionResult b = ext.solve(sum(fields[i], Dp, 1.0, fn / pn));
    double diff = 0, norm = 0;
    for (std::size_t k = 0; k < a.coeffs.size(); ++k) {
      diff += (a.coeffs[k] - b.coeffs[k]) * (a.coeffs[k] - b.coeffs[k]);
      norm += a.coeffs[k] * a.coeffs[k];
    }
    const double shift = norm > 0 ? std::sqrt(diff / norm) : std::sqrt(diff);
    res.row(names[i], a.residual, a.rank, orbit, shift);
    worst_res = std::max(worst_res, a.residual);
    worst_orbit = std::max(worst_orbit, orbit);
    worst_shift = std::max(worst_shift, shift);
  }
  r.results["trapped_samples"] = ext.trapped_samples();
  r.results["fields"] = names;
  r.at_most("extension_residual", worst_res, ext_tol);
  r.at_most("orbit_constancy", worst_orbit, orbit_factor * r.opt.tol);
  r.at_most("potential_shift", worst_shift, eo.reg);
}

inline void cmd_fiber(Run& r) {
  Section& s = r.section("fiber");
  const int band = s.get_min<int>("band", 4, 1);
  const int base = s.get_min<int>("base_radial", 12, 4) << r.refine;
  const double order_min = r.threshold("order", 1.8);
  const double parseval_tol = r.threshold("parseval", 1e-10);
  const double identity_tol = r.threshold("identity", 1e-12);
  r.validate();

  const ModeFunction u = random_mode_function(band, r.seed);
  const DiscPtr coarse = discretize(r.model, base, 2 * base);
  const DiscPtr fine = discretize(r.model, 2 * base, 4 * base);
  const FiberField uf = sample_modes(coarse->grid.nodes, u);
  const std::vector<double>& w = coarse->grid.weights;
  const double un = fiber_norm(uf, w);

  io::CsvWriter mt = r.csv("modes.csv", {"k", "node", "re", "im"}, {{"band", std::to_string(band)}});
  for (std::size_t n = 0; n < uf.size(); ++n)
    for (int k = -band; k <= band; ++k) mt.row(k, static_cast<unsigned long>(n), uf.at(n, k).real(), uf.at(n, k).imag());

  const FiberField Su = szego(uf);
  const double idem = fiber_norm(combine(szego(Su), Su, 1.0, -1.0), w) / un;
  const double via_h = fiber_norm(combine(szego_via_hilbert(uf), Su, 1.0, -1.0), w) / un;
  const FiberField v = sample_modes(coarse->grid.nodes, random_mode_function(band, r.seed + 1));
  const double skew = std::abs(fiber_inner(hilbert(uf), v, w) + fiber_inner(uf, hilbert(v), w)) / (un * fiber_norm(v, w));
  r.at_most("szego_idempotent", idem, identity_tol);
  r.at_most("szego_via_hilbert", via_h, identity_tol);
  r.at_most("hilbert_skew_adjoint", skew, identity_tol);
  const ParsevalReport pv = parseval_check(uf, w, 4 * band + 4);
  r.at_most("parseval_relative_gap", pv.relative_gap, parseval_tol);

  const CommutationReport c1 = commutation_check(coarse, u), c2 = commutation_check(fine, u);
  io::CsvWriter ct = r.csv("commutation.csv", {"h", "residual", "relative"});
  ct.row(c1.h, c1.residual, c1.relative);
  ct.row(c2.h, c2.residual, c2.relative);
  r.at_least("commutation_order", std::log(c1.residual / c2.residual) / std::log(c1.h / c2.h), order_min);

  if (r.model.kind == ChartKind::ConformalDisk) {
    const EtaRouteReport a = eta_route_agreement(coarse, u), b = eta_route_agreement(fine, u);
    r.results["eta_route_gaps"] = {{"coarse", {a.plus_gap, a.minus_gap}}, {"fine", {b.plus_gap, b.minus_gap}}};
    // Identical stencils on a flat chart make both routes agree to roundoff.
    if (a.plus_gap < 1e-12 && a.minus_gap < 1e-12) {
      r.at_most("eta_route_gap", std::max(b.plus_gap, b.minus_gap), 1e-12);
    } else {
      const double lh = std::log(a.h / b.h);
      r.at_least("eta_route_order", std::min(std::log(a.plus_gap / b.plus_gap), std::log(a.minus_gap / b.minus_gap)) / lh,
                 order_min);
    }
  } else {
    r.results["eta_route_gaps"] = "frame route only on this chart";
  }
  const std::vector<double> lp = hilbert_lp_ratios(uf, w, 4 * band + 4, {2, 4, 8});
  r.results["hilbert_lp_ratios"] = lp;
}

inline void cmd_theorem4(Run& r) {
  Section& s = r.section("theorem4");
  using Coeffs = std::vector<std::vector<std::array<double, 2>>>;
  const Coeffs def{{{1, 0}}, {{1, 0}, {0.5, 0}}};
  Coeffs factors;
  try {
    factors = s.get<Coeffs>("factors", def);
  } catch (const ConfigError&) {
    throw ConfigError("theorem4.factors must be a list of polynomials, each a list of [re, im] coefficients");
  }
  Theorem4Options o;
  o.n_theta = s.get_min<int>("n_theta", o.n_theta, 8);
  o.n_orbit_points = s.get_min<int>("orbit_points", o.n_orbit_points, 1);
  o.quad_radial = s.get_min<int>("quad_radial", o.quad_radial, 4) << r.refine;
  o.quad_angular = s.get_min<int>("quad_angular", o.quad_angular, 8) << r.refine;
  o.end_to_end_tol = r.threshold("end_to_end", o.end_to_end_tol);
  o.extension_tol = r.threshold("extension", o.extension_tol);
  if (factors.empty()) throw ConfigError("theorem4.factors is empty");
  if (r.model.kind != ChartKind::ConformalDisk) throw ConfigError("theorem4 needs a conformal disk preset");
  if (o.n_theta % 2) throw ConfigError("theorem4.n_theta must be even");
  r.validate();
  o.seed = r.seed;
  o.extension.T_max = r.T_max;
  o.extension.integrator = r.opt;

  std::vector<HoloFactor> hf;
  for (const auto& poly : factors) {
    std::string label;
    std::vector<cplx> c;
    for (std::size_t k = 0; k < poly.size(); ++k) {
      c.emplace_back(poly[k][0], poly[k][1]);
      label += (k ? " + " : "") + std::string("(") + io::num(poly[k][0]) + "," + io::num(poly[k][1]) + ")z^" + std::to_string(k);
    }
    hf.push_back({label, [c](cplx z) {
                    cplx s{}, p = 1.0;
                    for (const cplx& a : c) s += a * p, p *= z;
                    return s;
                  }});
  }
  const Theorem4Report rep = theorem4_pipeline(r.model, hf, o);
  io::CsvWriter st = r.csv("theorem4_stages.csv", {"stage", "value", "threshold", "pass"}, {{"m", std::to_string(rep.m)}});
  for (const StageReport& sr : rep.stages) {
    st.row(sr.name, sr.value, sr.threshold, sr.pass);
    r.at_most("stage:" + sr.name, sr.value, sr.threshold);
  }
  r.results["m"] = rep.m;
  r.results["end_to_end"] = rep.end_to_end;
  r.results["trapped_samples"] = rep.trapped_samples;
}

// ---------------------------------------------------------------------------
// Driver

struct Flags {
  std::string command;
  std::string config;
  std::optional<std::string> preset;
  std::string out = "geoxray-out";
  std::optional<std::uint64_t> seed;
  int refine = 0;
};

inline json report_json(const Run& r, const std::string& status, int code, const std::string& message) {
  json j;
  j["command"] = r.command;
  j["status"] = status;
  j["exit_code"] = code;
  if (!message.empty()) j["message"] = message;
  j["preset"] = r.preset;
  j["seed"] = r.seed;
  j["resolution"] = r.resolution();
  json checks = json::array();
  for (const Check& c : r.checks)
    checks.push_back({{"name", c.name}, {"value", c.value}, {"threshold", c.threshold}, {"relation", c.relation},
                      {"pass", c.pass}});
  j["checks"] = checks;
  j["results"] = r.results;
  json cfg = r.root.effective();
  for (auto it = r.settings.begin(); it != r.settings.end(); ++it) cfg[it.key()] = it.value();
  for (const Section& s : r.sections) cfg[s.path()] = s.effective();
  if (r.thresholds_used()) cfg["thresholds"] = r.thresholds_effective();
  j["effective_config"] = cfg;
  return j;
}

inline std::string short_num(double v) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "%.6g", v);
  return buf;
}

inline std::string summary_text(const Run& r, const std::string& status) {
  std::ostringstream s;
  s << "geoxray " << r.command << "  preset=" << r.preset << "  seed=" << r.seed << "\n" << r.resolution() << "\n";
  for (const Check& c : r.checks) {
    if (c.relation == "info") s << "  info  " << c.name << " = " << short_num(c.value) << "\n";
    else s << "  " << (c.pass ? "PASS" : "FAIL") << "  " << c.name << " = " << short_num(c.value) << "  (" << c.relation
           << " " << short_num(c.threshold) << ")\n";
  }
  s << "status: " << status << "\n";
  return s.str();
}

inline void write_error(const fs::path& out, const std::string& command, const std::string& status, int code,
                        const std::string& message) {
  json j{{"command", command}, {"status", status}, {"exit_code", code}, {"message", message}};
  std::cerr << j.dump() << "\n";
  std::error_code ec;
  fs::create_directories(out, ec);
  if (!ec) {
    try {
      io::write_json(out / ((command.empty() ? std::string("geoxray") : command) + ".json"), j);
    } catch (const std::exception&) {
    }
  }
}

/// Runs one subcommand with already-parsed flags; returns the exit status.
inline int run(const Flags& fl, std::ostream& log = std::cout) {
  Run r;
  r.command = fl.command;
  r.out = fl.out;
  r.refine = fl.refine;
  try {
    json cfg = json::object();
    if (!fl.config.empty()) {
      std::ifstream in(fl.config);
      if (!in) throw ConfigError("cannot read config '" + fl.config + "'");
      try {
        cfg = json::parse(in, nullptr, true, true);
      } catch (const json::parse_error& e) {
        throw ConfigError(std::string("config is not valid JSON: ") + e.what());
      }
      if (!cfg.is_object()) throw ConfigError("config must be a JSON object");
    }
    if (std::find(commands().begin(), commands().end(), fl.command) == commands().end())
      throw ConfigError("unknown subcommand '" + fl.command + "'");
    if (fl.refine < 0 || fl.refine > 4) throw ConfigError("--refine must be between 0 and 4");
    r.root = Section(cfg, "");
    if (r.root.has("command") && r.root.get<std::string>("command", "") != fl.command)
      throw ConfigError("config is for subcommand '" + cfg["command"].get<std::string>() + "'");

    Section model = r.root.sub("model");
    r.preset = fl.preset.value_or(model.get<std::string>("preset", "flat-disk"));
    model.record("preset", r.preset);
    r.model = build_model(model, r.preset, r.default_model);
    model.finish();
    r.model_effective = model.effective();
    r.settings["model"] = r.model_effective;

    Section grid = r.root.sub("grid");
    r.grid_radial = grid.get_min<int>("radial", 16, 4) << fl.refine;
    r.grid_angular = grid.get_min<int>("angular", 32, 8) << fl.refine;
    r.fiber = grid.get_min<int>("fiber", 16, 4) << fl.refine;
    grid.finish();
    r.settings["grid"] = grid.effective();
    Section fan = r.root.sub("fan");
    r.fan_boundary = fan.get_min<int>("boundary", 32, 4) << fl.refine;
    r.fan_angle = fan.get_min<int>("angle", 32, 4) << fl.refine;
    fan.finish();
    r.settings["fan"] = fan.effective();
    r.T_max = r.root.get_positive("T_max", r.model.default_t_max);
    Section integ = r.root.sub("integrator");
    const double tol = integ.get_positive("tol", 1e-10);
    r.opt.tol = std::max(1e-14, tol / std::pow(32.0, fl.refine));
    r.opt.event_tol = std::max(1e-14, integ.get_positive("event_tol", 1e-10) / std::pow(32.0, fl.refine));
    integ.finish();
    r.settings["integrator"] = {{"tol", r.opt.tol}, {"event_tol", r.opt.event_tol}};
    const std::uint64_t cfg_seed = r.root.get<std::uint64_t>("seed", 1);
    r.seed = fl.seed.value_or(cfg_seed);
    r.root.record("seed", r.seed);
    r.root.get<std::string>("command", fl.command);

    r.context = {{"command", r.command},
                 {"preset", r.preset},
                 {"model", r.model_effective.dump()},
                 {"seed", std::to_string(r.seed)},
                 {"resolution", r.resolution()}};

    std::error_code ec;
    fs::create_directories(r.out, ec);
    if (ec) throw ConfigError("cannot create output directory '" + r.out.string() + "'");

    try {
      if (fl.command == "escape") cmd_escape(r);
      else if (fl.command == "mass-decay") cmd_mass_decay(r);
      else if (fl.command == "santalo") cmd_santalo(r);
      else if (fl.command == "xray") cmd_xray(r);
      else if (fl.command == "adjoint-check") cmd_adjoint(r);
      else if (fl.command == "sinjectivity") cmd_sinjectivity(r);
      else if (fl.command == "theorem2") cmd_theorem2(r);
      else if (fl.command == "fiber-check") cmd_fiber(r);
      else if (fl.command == "theorem4") cmd_theorem4(r);
    } catch (const PreconditionError& e) {
      throw ConfigError(e.what());
    }
  } catch (const ConfigError& e) {
    write_error(r.out, fl.command, "config_error", 2, e.what());
    return 2;
  } catch (const std::exception& e) {
    const json j = report_json(r, "error", 1, e.what());
    std::cerr << json{{"command", r.command}, {"status", "error"}, {"message", e.what()}}.dump() << "\n";
    try {
      io::write_json(r.out / (r.command + ".json"), j);
    } catch (const std::exception&) {
    }
    return 1;
  }

  const bool ok = std::all_of(r.checks.begin(), r.checks.end(), [](const Check& c) { return c.pass; });
  const std::string status = ok ? "pass" : "fail";
  const int code = ok ? 0 : 1;
  io::write_json(r.out / (r.command + ".json"), report_json(r, status, code, ""));
  const std::string text = summary_text(r, status);
  io::write_text(r.out / (r.command + ".txt"), text);
  log << text;
  return code;
}

/// Parses argv and runs; the entry point of the geoxray executable.
inline int run(int argc, char** argv) {
  CLI::App app{"geoxray: numerical experiments for the geodesic X-ray transform on surfaces"};
  Flags fl;
  std::string preset;
  std::uint64_t seed = 0;
  app.add_option("command", fl.command, "escape | mass-decay | santalo | xray | adjoint-check | sinjectivity | "
                                        "theorem2 | fiber-check | theorem4")
      ->required();
  app.add_option("--config", fl.config, "JSON experiment configuration");
  auto* p = app.add_option("--preset", preset, "surface preset (overrides model.preset)");
  app.add_option("--out", fl.out, "output directory")->capture_default_str();
  auto* s = app.add_option("--seed", seed, "RNG seed (overrides the config)");
  app.add_option("--refine", fl.refine, "halve grid, fan and integrator steps K times")->capture_default_str();
  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e);
  } catch (const CLI::ParseError& e) {
    app.exit(e);
    write_error(fl.out, fl.command, "config_error", 2, e.what());
    return 2;
  }
  if (*p) fl.preset = preset;
  if (*s) fl.seed = seed;
  return run(fl);
}

}  // namespace geox::cli
