// End-to-end acceptance run on the shipped presets at default resolutions.
// Prints one PASS/FAIL line per criterion and exits non-zero if any fails.
#include <chrono>
#include <cmath>
#include <cstdio>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <functional>
#include <iterator>
#include <random>
#include <sstream>
#include <string>
#include <vector>

#include "cli.hpp"

using namespace geox;
namespace fs = std::filesystem;

namespace {

struct Outcome {
  bool pass = true;
  std::ostringstream detail;

  // Records one comparison; the detail string lists every number checked.
  void at_most(const std::string& what, double v, double thr) {
    const bool ok = v <= thr;
    pass = pass && ok;
    note(what, v, ok ? "<=" : "!<=", thr);
  }
  void at_least(const std::string& what, double v, double thr) {
    const bool ok = v >= thr;
    pass = pass && ok;
    note(what, v, ok ? ">=" : "!>=", thr);
  }
  void require(const std::string& what, bool ok) {
    pass = pass && ok;
    if (!first_) detail << "; ";
    first_ = false;
    detail << what << (ok ? " ok" : " FAILED");
  }

 private:
  void note(const std::string& what, double v, const char* rel, double thr) {
    char buf[160];
    std::snprintf(buf, sizeof buf, "%s%s=%.3g %s %.3g", first_ ? "" : "; ", what.c_str(), v, rel, thr);
    first_ = false;
    detail << buf;
  }
  bool first_ = true;
};

int failures = 0;

void criterion(int id, const std::string& title, const std::function<void(Outcome&)>& body) {
  Outcome o;
  const auto t0 = std::chrono::steady_clock::now();
  try {
    body(o);
  } catch (const std::exception& e) {
    o.require(std::string("exception: ") + e.what(), false);
  }
  const double secs = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
  failures += !o.pass;
  std::printf("[%s] %2d %s (%.1fs): %s\n", o.pass ? "PASS" : "FAIL", id, title.c_str(), secs, o.detail.str().c_str());
  std::fflush(stdout);
}

// Chord length from x in direction v to the unit circle.
double chord(const Vec2& x, const Vec2& v) {
  const double b = x[0] * v[0] + x[1] * v[1];
  return -b + std::sqrt(1 - x[0] * x[0] - x[1] * x[1] + b * b);
}

double relative_defect(const SantaloResult& s) { return std::abs(s.lhs - s.rhs) / std::abs(s.lhs); }

double worst_adjoint_defect(const SurfaceModel& m, int refine, std::uint64_t seed) {
  const BoundaryFan fan = boundary_fan(m, 32 << refine, 32 << refine);
  const SMQuadrature smq = sm_quadrature(m, 16 << refine, 32 << refine, 16 << refine);
  IntegratorOptions opt;
  opt.tol = opt.event_tol = 1e-10 / std::pow(32.0, refine);
  std::mt19937_64 rng(seed);
  double worst = 0;
  for (int k = 0; k < 10; ++k) {
    const SMFunction f = cli::random_sm_function(rng);
    const FanFunction u = cli::random_fan_function(rng);
    worst = std::max(worst, adjoint_consistency(m, f, u, fan, smq, m.default_t_max, opt).defect);
  }
  return worst;
}

std::string slurp(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  return {std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
}

}  // namespace

int main() {
  const SurfaceModel flat = flat_disk(), bump = bump_disk(), cyl = hyperbolic_cylinder();

  criterion(1, "flat-disk escape times vs chord formula", [&](Outcome& o) {
    double worst = 0;
    for (const PhasePoint& z : sample_liouville(flat, 1000, 101)) {
      const EscapeRecord r = escape_time(flat, z, flat.default_t_max);
      worst = std::max(worst, std::abs(r.l_plus - chord(z.q, unit_dir(z.theta))));
    }
    o.at_most("max|l+ - chord|", worst, 1e-6);
  });

  criterion(2, "Santalo formula", [&](Outcome& o) {
    const double vol = 2 * pi * pi;  // |SM| of the unit disk: area π times fiber length 2π
    const SantaloResult s = santalo_check(flat, [](const Vec2&, double) { return 1.0; }, boundary_fan(flat, 32, 32),
                                          sm_quadrature(flat, 16, 32, 16), flat.default_t_max);
    o.at_most("flat lhs/2pi^2-1", std::abs(s.lhs / vol - 1), 1e-2);
    o.at_most("flat rhs/2pi^2-1", std::abs(s.rhs / vol - 1), 1e-2);
    // The bump sits away from the trapped circle r = 0.
    const SMFunction f = cli::bump_function(cyl, {0.55, 1.0}, 0.35);
    const SantaloResult c1 = santalo_check(cyl, f, boundary_fan(cyl, 32, 32), sm_quadrature(cyl, 32, 64, 32),
                                           cyl.default_t_max);
    const SantaloResult c2 = santalo_check(cyl, f, boundary_fan(cyl, 64, 64), sm_quadrature(cyl, 64, 128, 64),
                                           cyl.default_t_max);
    o.at_most("cylinder defect", relative_defect(c1), 2e-2);
    o.at_most("refined/coarse", relative_defect(c2) / relative_defect(c1), 0.5);
  });

  criterion(3, "potentials are annihilated", [&](Outcome& o) {
    IntegratorOptions coarse, fine;
    fine.tol = fine.event_tol = coarse.tol / 32;
    for (const SurfaceModel* m : {&bump, &cyl}) {
      const BoundaryFan fan = boundary_fan(*m, 16, 16);
      for (int order = 1; order <= 3; ++order) {
        const AnnihilationReport a = annihilation_check(*m, order, fan, m->default_t_max, 20, 40 + order, 3, coarse);
        const AnnihilationReport b = annihilation_check(*m, order, fan, m->default_t_max, 20, 40 + order, 3, fine);
        const std::string tag = m->name + " m=" + std::to_string(order);
        o.at_most(tag, a.worst, 1e-4);
        o.require(tag + " decreasing", b.worst < a.worst);
      }
    }
  });

  criterion(4, "adjoint consistency", [&](Outcome& o) {
    for (const SurfaceModel* m : {&bump, &cyl}) {
      const double a = worst_adjoint_defect(*m, 0, 17), b = worst_adjoint_defect(*m, 1, 17);
      o.at_most(m->name, a, 2e-2);
      o.at_most(m->name + " refined/coarse", b / a, 0.5);
    }
  });

  criterion(5, "hyperbolic trapped set on the cylinder", [&](Outcome& o) {
    double dk = 0;
    for (const PhasePoint& z : sample_liouville(cyl, 1000, 5)) dk = std::max(dk, std::abs(gauss_curvature(cyl, z.q) + 1));
    o.at_most("max|K+1|", dk, 1e-8);
    const LyapunovResult ly = lyapunov_on_trapped(cyl, {{0.0, 0.0}, pi / 2}, 20.0);
    o.at_most("|nu-1|", std::abs(ly.nu - 1), 0.05);
    const double h = cyl.mass_decay_t_max;
    std::vector<double> t(51);
    for (int i = 0; i <= 50; ++i) t[i] = h * i / 50;
    const MassDecay md = nonescaping_mass(cyl, t, 400000, 2024);
    const RateFit fit = escape_rate(md.times, md.V, 0.2 * h, 0.8 * h);
    o.at_least("R2", fit.r2, 0.95);
    o.at_most("Q", fit.Q, 0.0);
    const std::vector<double> frac = tail_mass_diagnostic(cyl, {2.5, 5.0, 7.5, 10.0, 12.5}, 400000, 2024);
    bool decreasing = true;
    for (std::size_t i = 1; i < frac.size(); ++i) decreasing = decreasing && frac[i] < frac[i - 1];
    o.require("tail fraction strictly decreasing", decreasing);
  });

  criterion(6, "s-injectivity margin", [&](Outcome& o) {
    for (const SurfaceModel* m : {&bump, &cyl})
      for (int order = 0; order <= 2; ++order) {
        const SInjectivityReport a = sinjectivity_margin(*m, order, boundary_fan(*m, 24, 32), m->default_t_max);
        const SInjectivityReport b = sinjectivity_margin(*m, order, boundary_fan(*m, 48, 64), m->default_t_max);
        const std::string tag = m->name + " m=" + std::to_string(order);
        o.at_least(tag + " margin", std::min(a.margin, b.margin), 100);
        o.at_most(tag + " sigma_min drift", std::abs(a.sigma_min - b.sigma_min) / b.sigma_min, 0.2);
      }
  });

  criterion(7, "invariant extension of solenoidal fields", [&](Outcome& o) {
    ExtensionOptions eo;
    eo.quad_radial = 40;
    eo.quad_angular = 80;
    const double tol = eo.integrator.tol;
    for (int order = 1; order <= 2; ++order) {
      const InvariantExtension ext(bump, order, eo);
      const SpatialQuadrature& sq = ext.quadrature();
      // Potential part: (1-|x|²)·(random quadratic) in every slot of p.
      const PotentialFamily pf = potential_family(bump, order, 2);
      std::mt19937_64 rng(70 + order);
      std::normal_distribution<double> N(0, 1);
      std::vector<double> pc(pf.images.count);
      for (double& c : pc) c = N(rng);
      const TensorField Dp = pf.images.combination(pc);
      const double pn = std::sqrt(l2_inner(bump, Dp, Dp, sq));
      double res = 0, orbit = 0, shift = 0;
      for (const std::string& name : cli::default_fields(bump, order)) {
        const TensorField f = cli::solenoidal_field(bump, order, name);
        const ExtensionResult a = ext.solve(f);
        res = std::max(res, a.residual);
        for (const PhasePoint& z : sample_liouville(bump, 16, 3)) {
          const PhasePoint z2 = flow_map(bump, z, 0.05);
          if (!in_manifold(bump, z2.q)) continue;
          const auto w1 = ext.w(a.coeffs, z), w2 = ext.w(a.coeffs, z2);
          if (w1 && w2) orbit = std::max(orbit, std::abs(*w1 - *w2) / std::max(1.0, std::abs(*w1)));
        }
        const double fn = std::sqrt(l2_inner(bump, f, f, sq));
        const ExtensionResult b = ext.solve(sum(f, Dp, 1.0, fn / pn));
        double d2 = 0, n2 = 0;
        for (std::size_t k = 0; k < a.coeffs.size(); ++k) {
          d2 += (a.coeffs[k] - b.coeffs[k]) * (a.coeffs[k] - b.coeffs[k]);
          n2 += a.coeffs[k] * a.coeffs[k];
        }
        shift = std::max(shift, std::sqrt(d2 / n2));
      }
      const std::string tag = "m=" + std::to_string(order);
      o.at_most(tag + " residual", res, 5e-2);
      o.at_most(tag + " orbit defect", orbit, 10 * tol);
      o.at_most(tag + " potential shift", shift, eo.reg);
    }
  });

  criterion(8, "fiber calculus", [&](Outcome& o) {
    for (const SurfaceModel* m : {&flat, &bump, &cyl}) {
      const ModeFunction u = cli::random_mode_function(4, 9);
      const DiscPtr coarse = discretize(*m, 12, 24), fine = discretize(*m, 24, 48);
      const FiberField uf = sample_modes(coarse->grid.nodes, u);
      const std::vector<double>& w = coarse->grid.weights;
      const double un = fiber_norm(uf, w);
      const FiberField Su = szego(uf);
      const FiberField v = sample_modes(coarse->grid.nodes, cli::random_mode_function(4, 10));
      const double ident = std::max({fiber_norm(combine(szego(Su), Su, 1.0, -1.0), w) / un,
                                     fiber_norm(combine(szego_via_hilbert(uf), Su, 1.0, -1.0), w) / un,
                                     std::abs(fiber_inner(hilbert(uf), v, w) + fiber_inner(uf, hilbert(v), w)) /
                                         (un * fiber_norm(v, w))});
      o.at_most(m->name + " identities", ident, 1e-12);
      o.at_most(m->name + " Parseval", parseval_check(uf, w, 20).relative_gap, 1e-10);
      const CommutationReport c1 = commutation_check(coarse, u), c2 = commutation_check(fine, u);
      o.at_least(m->name + " commutation order", std::log(c1.residual / c2.residual) / std::log(c1.h / c2.h), 1.8);
      if (m->kind != ChartKind::ConformalDisk) continue;
      const EtaRouteReport a = eta_route_agreement(coarse, u), b = eta_route_agreement(fine, u);
      if (m == &flat) {
        o.at_most("flat eta route gap", std::max({a.plus_gap, a.minus_gap, b.plus_gap, b.minus_gap}), 1e-12);
      } else {
        const double lh = std::log(a.h / b.h);
        o.at_least(m->name + " eta route order",
                   std::min(std::log(a.plus_gap / b.plus_gap), std::log(a.minus_gap / b.minus_gap)) / lh, 1.8);
      }
    }
  });

  criterion(9, "product construction for m = 2", [&](Outcome& o) {
    const std::vector<HoloFactor> factors{{"1", [](cplx) { return cplx(1.0); }},
                                          {"1+z/2", [](cplx z) { return 1.0 + 0.5 * z; }}};
    for (const SurfaceModel* m : {&flat, &bump}) {
      const Theorem4Report r = theorem4_pipeline(*m, factors, {});
      o.at_most(m->name + " end-to-end", r.end_to_end, 0.1);
      for (const StageReport& s : r.stages) o.require(m->name + " " + s.name, s.pass);
    }
  });

  criterion(10, "repeated CLI runs are byte-identical", [&](Outcome& o) {
    const fs::path root = fs::temp_directory_path() / "geoxray-acceptance";
    fs::remove_all(root);
    const std::vector<std::pair<std::string, std::string>> runs{
        {"escape", R"({"model": {"preset": "bump-disk"}, "escape": {"n_points": 200}, "fan": {"boundary": 8, "angle": 8}})"},
        {"mass-decay", R"({"model": {"preset": "hyperbolic-cylinder"}, "mass_decay": {"n_samples": 40000}})"},
        {"adjoint-check", R"({"model": {"preset": "hyperbolic-cylinder"}, "adjoint": {"n_pairs": 2}})"},
        {"sinjectivity", R"({"model": {"preset": "flat-disk"}, "fan": {"boundary": 8, "angle": 8}, "sinjectivity": {"m": 1, "degree": 2}})"},
        {"fiber-check", R"({"model": {"preset": "bump-disk"}})"},
    };
    for (const auto& [cmd, cfg] : runs) {
      const fs::path dir = root / cmd;
      fs::create_directories(dir);
      std::ofstream(dir / "config.json") << cfg;
      for (const char* rep : {"a", "b"}) {
        const std::string line = std::string(GEOXRAY_CLI) + " " + cmd + " --config " + (dir / "config.json").string() +
                                 " --seed 123 --out " + (dir / rep).string() + " > " + (dir / rep).string() + ".log";
        const int rc = std::system(line.c_str());
        o.require(cmd + " run " + rep + " exit 0", rc == 0);
      }
      std::size_t files = 0;
      bool same = true;
      for (const auto& e : fs::directory_iterator(dir / "a")) {
        const fs::path other = dir / "b" / e.path().filename();
        same = same && fs::exists(other) && slurp(e.path()) == slurp(other);
        ++files;
      }
      for (const auto& e : fs::directory_iterator(dir / "b")) same = same && fs::exists(dir / "a" / e.path().filename());
      o.require(cmd + " (" + std::to_string(files) + " files) identical", same && files > 0);
    }
    fs::remove_all(root);
  });

  std::printf("%s: %d of 10 criteria failed\n", failures ? "FAIL" : "PASS", failures);
  return failures ? 1 : 0;
}
