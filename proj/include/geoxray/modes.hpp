// Vertical Fourier storage for functions on SM: at each spatial node the
// coefficients ũ_k, |k| ≤ band, of u(x, θ) = Σ ũ_k(x) e^{ikθ}.
#pragma once

#include <vector>

#include "geoxray/common.hpp"

namespace geox {

struct FiberField {
  std::vector<Vec2> nodes;
  int band = 0;
  std::vector<cplx> coeffs;  // node-major, k = −band..band
  double aliasing = 0;       // top-mode energy / total when built from samples
  double overflow = 0;       // energy a mode-shifting operator pushed past the band

  FiberField() = default;
  FiberField(std::vector<Vec2> n, int b) : nodes(std::move(n)), band(b), coeffs(nodes.size() * (2 * b + 1)) {}

  std::size_t size() const { return nodes.size(); }
  int width() const { return 2 * band + 1; }
  cplx& at(std::size_t n, int k) { return coeffs[n * width() + (k + band)]; }
  cplx at(std::size_t n, int k) const {
    return std::abs(k) > band ? cplx{} : coeffs[n * width() + (k + band)];
  }

  cplx value(std::size_t n, double theta) const {
    cplx s{};
    for (int k = -band; k <= band; ++k) s += at(n, k) * std::polar(1.0, k * theta);
    return s;
  }

  bool aliasing_warning() const { return aliasing > 1e-8; }
  bool overflow_warning() const { return overflow > 0; }
};

/// θ_j = 2πj/n, the sampling used by every fiber transform here.
inline double fiber_sample_angle(int j, int n) { return two_pi * j / n; }

/// Discrete fiber Fourier coefficients (1/n) Σ_j u(θ_j) e^{−ikθ_j}, exact for
/// trigonometric polynomials of degree < n − band.
inline std::vector<cplx> fiber_dft(const cplx* samples, int n, int band) {
  std::vector<cplx> out(2 * band + 1);
  for (int k = -band; k <= band; ++k) {
    cplx s{};
    for (int j = 0; j < n; ++j) s += samples[j] * std::polar(1.0, -k * fiber_sample_angle(j, n));
    out[k + band] = s / static_cast<double>(n);
  }
  return out;
}

/// Builds a FiberField from pointwise samples u(x_n, θ_j), j < n_theta.
inline FiberField decompose(const std::vector<Vec2>& nodes, const std::vector<cplx>& samples, int n_theta,
                            int band) {
  if (n_theta < 2 * band + 2) throw PreconditionError("decompose: need n_theta >= 2*band + 2");
  if (samples.size() != nodes.size() * n_theta) throw PreconditionError("decompose: sample count mismatch");
  FiberField u(nodes, band);
  double top = 0, total = 0;
  for (std::size_t n = 0; n < nodes.size(); ++n) {
    const std::vector<cplx> c = fiber_dft(&samples[n * n_theta], n_theta, band);
    for (int k = -band; k <= band; ++k) {
      u.at(n, k) = c[k + band];
      total += std::norm(c[k + band]);
    }
    if (band > 0) top += std::norm(c.front()) + std::norm(c.back());
  }
  u.aliasing = total > 0 ? top / total : 0.0;
  return u;
}

inline FiberField decompose(const std::vector<Vec2>& nodes, const std::vector<double>& samples, int n_theta,
                            int band) {
  std::vector<cplx> c(samples.begin(), samples.end());
  return decompose(nodes, c, n_theta, band);
}

/// Pointwise samples of u at θ_j = 2πj/n_theta, node-major.
inline std::vector<cplx> sample(const FiberField& u, int n_theta) {
  std::vector<cplx> out(u.size() * n_theta);
  for (std::size_t n = 0; n < u.size(); ++n)
    for (int j = 0; j < n_theta; ++j) out[n * n_theta + j] = u.value(n, fiber_sample_angle(j, n_theta));
  return out;
}

}  // namespace geox
