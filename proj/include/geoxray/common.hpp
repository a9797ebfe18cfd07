// Shared numerical utilities: small vector types, error types, quadrature rules
// and a deterministic data-parallel loop.
#pragma once

#include <algorithm>
#include <array>
#include <cmath>
#include <complex>
#include <cstddef>
#include <numbers>
#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

#include <Eigen/Dense>

#ifdef _OPENMP
#include <omp.h>
#endif

namespace geox {

using cplx = std::complex<double>;
using Vec2 = std::array<double, 2>;
using Mat2 = std::array<std::array<double, 2>, 2>;

inline constexpr double pi = std::numbers::pi;
inline constexpr double two_pi = 2.0 * std::numbers::pi;

/// Thrown when a point lies outside the extended chart.
class DomainError : public std::domain_error {
 public:
  using std::domain_error::domain_error;
};

/// Thrown when an operation's precondition does not hold.
class PreconditionError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

/// Thrown when a fit or diagnostic has no meaningful value (e.g. log of zero).
class UndefinedError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Thrown when a linear solve or least-squares fit fails to converge.
class SolverError : public std::runtime_error {
 public:
  SolverError(const std::string& what, double residual)
      : std::runtime_error(what), residual_(residual) {}
  double residual() const { return residual_; }

 private:
  double residual_;
};

/// Angle reduced to [0, 2π).
inline double wrap_angle(double a) {
  a = std::fmod(a, two_pi);
  if (a < 0) a += two_pi;
  if (a >= two_pi) a -= two_pi;
  return a;
}

/// Angle reduced to (−π, π].
inline double wrap_signed(double a) {
  a = wrap_angle(a);
  return a > pi ? a - two_pi : a;
}

/// (cos θ, sin θ) with values below 4 ulp of 1 snapped to zero, so that
/// multiples of π/2 written in floating point give exact axis directions.
inline Vec2 unit_dir(double theta) {
  double c = std::cos(theta), s = std::sin(theta);
  constexpr double snap = 4.0 * std::numeric_limits<double>::epsilon();
  if (std::abs(c) < snap) c = 0.0;
  if (std::abs(s) < snap) s = 0.0;
  return {c, s};
}

inline double binomial(int n, int k) {
  if (k < 0 || k > n) return 0.0;
  double r = 1.0;
  for (int i = 1; i <= k; ++i) r = r * (n - k + i) / i;
  return r;
}

/// Gauss-Legendre nodes and weights on [a, b] (Golub-Welsch).
struct GaussRule {
  std::vector<double> nodes;
  std::vector<double> weights;
};

inline GaussRule gauss_legendre(int n, double a, double b) {
  if (n < 1) throw PreconditionError("gauss_legendre: n must be >= 1");
  Eigen::MatrixXd J = Eigen::MatrixXd::Zero(n, n);
  for (int i = 1; i < n; ++i) {
    const double beta = i / std::sqrt(4.0 * i * i - 1.0);
    J(i, i - 1) = beta;
    J(i - 1, i) = beta;
  }
  Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> es(J);
  GaussRule rule;
  rule.nodes.resize(n);
  rule.weights.resize(n);
  const double half = 0.5 * (b - a), mid = 0.5 * (a + b);
  for (int i = 0; i < n; ++i) {
    const double x = es.eigenvalues()(i);
    const double v0 = es.eigenvectors()(0, i);
    rule.nodes[i] = mid + half * x;
    rule.weights[i] = 2.0 * v0 * v0 * half;
  }
  return rule;
}

/// Runs body(i) for i in [0, n). Iterations must write only to slot i;
/// reductions are done by the caller in index order so results do not
/// depend on the thread count.
template <class Body>
void parallel_for(std::size_t n, Body&& body) {
#ifdef _OPENMP
#pragma omp parallel for schedule(dynamic, 16)
  for (long long i = 0; i < static_cast<long long>(n); ++i) body(static_cast<std::size_t>(i));
#else
  for (std::size_t i = 0; i < n; ++i) body(i);
#endif
}

/// Sum in fixed index order.
inline double ordered_sum(const std::vector<double>& v) {
  double s = 0.0;
  for (double x : v) s += x;
  return s;
}

}  // namespace geox
