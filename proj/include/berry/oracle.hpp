#pragma once

// Closed-form reference quantities for adiabatic cyclic spin-1/2 evolution.

#include <cmath>
#include <utility>

#include "berry/core.hpp"

namespace berry::oracle {

struct TheoryParams {
  double theta = 0.0;           // cone angle, rad
  double omega_l = 0.0;         // Larmor frequency, rad/s
  double gamma_noise = 0.0;     // noise bandwidth, rad/s
  double sigma_p_omega2 = 0.0;  // variance of the frequency noise 2 mu K / hbar, rad^2/s^2
  double T = 0.0;               // one cycle, s
};

/// Solid angle of a cone with half-angle theta.
inline double solid_angle(double theta) { return two_pi * (1.0 - std::cos(theta)); }

/// Noise-free Berry phase -Omega/2.
inline double berry_phase(double theta) { return -pi * (1.0 - std::cos(theta)); }

/// 2 |mu| B / hbar.
inline double larmor_frequency(double field_magnitude, const PhysicalConstants& k = {}) {
  return 2.0 * std::abs(k.mu) * field_magnitude / k.hbar;
}

/// Field-noise RMS (tesla) to frequency-noise RMS (rad/s).
inline double sigma_omega_from_field(double sigma_field, const PhysicalConstants& k = {}) {
  return std::abs(k.gamma()) * sigma_field;
}

/// x - 1 + exp(-x), with a series below x = 1e-3.
inline double ou_integral_kernel(double x) {
  if (x < 1e-3) {
    return x * x * (0.5 - x * (1.0 / 6.0 - x * (1.0 / 24.0 - x / 120.0)));
  }
  return x - 1.0 + std::exp(-x);
}

/// Variance of the geometric phase after one cycle of duration T:
/// 2 s^2 (pi sin^2 theta / (T w_L))^2 (Gamma T - 1 + e^{-Gamma T}) / Gamma^2.
inline double variance_theory(const TheoryParams& p) {
  const double s2 = std::sin(p.theta) * std::sin(p.theta);
  const double geom = pi * s2 / (p.T * p.omega_l);
  return 2.0 * p.sigma_p_omega2 * geom * geom * ou_integral_kernel(p.gamma_noise * p.T) /
         (p.gamma_noise * p.gamma_noise);
}

/// Polarization factor of pure geometric dephasing, exp(-(4 sigma)^2 / 2).
inline double dephasing_factor(double sigma2) { return std::exp(-8.0 * sigma2); }

/// Inverse of dephasing_factor.
inline double variance_from_dephasing(double nu_rel) { return -std::log(nu_rel) / 8.0; }

/// (<cos phi>, <sin phi>) for a Gaussian phase.
inline std::pair<double, double> gaussian_projection(double mean, double sigma2) {
  const double damp = std::exp(-0.5 * sigma2);
  return {damp * std::cos(mean), damp * std::sin(mean)};
}

}  // namespace berry::oracle
