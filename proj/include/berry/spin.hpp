#pragma once

// Spin-1/2 density operators and exact SU(2) propagation under a sampled
// magnetic field. H = -mu sigma.B, so the Bloch vector obeys
// ds/dt = gamma s x B with gamma = 2 mu / hbar.

#include <algorithm>
#include <array>
#include <cmath>
#include <complex>
#include <concepts>
#include <span>
#include <vector>

#include "berry/core.hpp"

namespace berry {

using Complex = std::complex<double>;

/// Row-major 2x2 complex matrix.
struct Mat2 {
  std::array<Complex, 4> m{Complex{1.0}, Complex{0.0}, Complex{0.0}, Complex{1.0}};

  static constexpr Mat2 identity() { return {}; }
  Complex operator()(int r, int c) const { return m[2 * r + c]; }
  Complex& operator()(int r, int c) { return m[2 * r + c]; }

  Mat2 operator*(const Mat2& o) const {
    Mat2 out;
    out.m[0] = m[0] * o.m[0] + m[1] * o.m[2];
    out.m[1] = m[0] * o.m[1] + m[1] * o.m[3];
    out.m[2] = m[2] * o.m[0] + m[3] * o.m[2];
    out.m[3] = m[2] * o.m[1] + m[3] * o.m[3];
    return out;
  }
  Mat2 adjoint() const {
    Mat2 out;
    out.m = {std::conj(m[0]), std::conj(m[2]), std::conj(m[1]), std::conj(m[3])};
    return out;
  }
  Complex trace() const { return m[0] + m[3]; }
};

/// Largest absolute entry of a - b.
inline double max_abs_diff(const Mat2& a, const Mat2& b) {
  double d = 0.0;
  for (int i = 0; i < 4; ++i) d = std::max(d, std::abs(a.m[i] - b.m[i]));
  return d;
}

/// sigma . v
inline Mat2 pauli_dot(const Vec3& v) {
  Mat2 s;
  s.m = {Complex{v.z, 0.0}, Complex{v.x, -v.y}, Complex{v.x, v.y}, Complex{-v.z, 0.0}};
  return s;
}

/// One-step propagator. Always unitary by construction.
struct StepUnitary {
  Mat2 u;

  double unitarity_defect() const { return max_abs_diff(u.adjoint() * u, Mat2::identity()); }
};

/// exp(-i/2 theta.sigma): rotates Bloch vectors by |theta| about theta-hat.
inline StepUnitary rotation(const Vec3& theta) {
  const double angle = norm(theta);
  if (angle == 0.0) return {Mat2::identity()};
  const double c = std::cos(0.5 * angle);
  const double s = std::sin(0.5 * angle) / angle;
  // c I - i s (theta . sigma)
  Mat2 u;
  u.m = {Complex{c, -s * theta.z}, Complex{-s * theta.y, -s * theta.x},
         Complex{s * theta.y, -s * theta.x}, Complex{c, s * theta.z}};
  return {u};
}

/// Precession vector (rad/s) of the Bloch vector in field b: omega = -gamma b.
inline Vec3 precession_rate(const FieldVector& b, const PhysicalConstants& k) {
  return b * (-k.gamma());
}

/// U = exp(-i H dt / hbar) for a constant field over dt.
inline StepUnitary rotation_step(const FieldVector& field, double dt,
                                 const PhysicalConstants& constants = {}) {
  if (!is_finite(field) || !std::isfinite(dt)) {
    throw Error(ErrorCode::invalid_input, "rotation_step: non-finite field or time step");
  }
  if (dt < 0.0) throw Error(ErrorCode::invalid_input, "rotation_step: negative time step");
  return rotation(precession_rate(field, constants) * dt);
}

class SpinState {
 public:
  /// Maximally mixed state.
  SpinState() { rho_.m = {Complex{0.5}, Complex{0.0}, Complex{0.0}, Complex{0.5}}; }

  static SpinState from_bloch(const Vec3& s) {
    if (!is_finite(s) || norm(s) > 1.0 + 1e-10) {
      throw Error(ErrorCode::invalid_input, "Bloch vector must be finite with length <= 1");
    }
    SpinState out;
    out.rho_.m = {Complex{0.5 * (1.0 + s.z)}, Complex{0.5 * s.x, -0.5 * s.y},
                  Complex{0.5 * s.x, 0.5 * s.y}, Complex{0.5 * (1.0 - s.z)}};
    return out;
  }

  static SpinState from_density(const Mat2& rho) {
    SpinState out;
    out.rho_ = rho;
    if (!out.is_valid(1e-9)) throw Error(ErrorCode::invalid_input, "not a density operator");
    return out;
  }

  /// Pure eigenstate of -mu sigma.B aligned (+1) or anti-aligned (-1) with the field.
  static SpinState eigenstate(const FieldVector& field, int sign) {
    const double b = norm(field);
    if (b == 0.0) throw Error(ErrorCode::singular_configuration, "eigenstate of zero field");
    return from_bloch(field * (sign >= 0 ? 1.0 / b : -1.0 / b));
  }

  const Mat2& density() const { return rho_; }

  Vec3 bloch() const {
    return {2.0 * rho_.m[1].real(), -2.0 * rho_.m[1].imag(), (rho_.m[0] - rho_.m[3]).real()};
  }
  double polarization() const { return norm(bloch()); }
  double purity() const { return ((rho_ * rho_).trace()).real(); }

  SpinState evolved(const StepUnitary& step) const {
    SpinState out;
    out.rho_ = step.u * rho_ * step.u.adjoint();
    return out;
  }

  /// Trace, hermiticity and eigenvalue bounds to within tol.
  bool is_valid(double tol = 1e-12) const {
    if (std::abs(rho_.trace() - Complex{1.0}) > tol) return false;
    if (max_abs_diff(rho_, rho_.adjoint()) > tol) return false;
    const double half_trace = 0.5 * rho_.trace().real();
    const double r = 0.5 * polarization();
    return half_trace - r >= -tol && half_trace + r <= 1.0 + tol;
  }

 private:
  Mat2 rho_;
};

/// Tr[sigma rho].
inline Vec3 bloch_of(const SpinState& state) { return state.bloch(); }

/// -mu Tr[(sigma.B) rho], joules.
inline double instantaneous_energy(const SpinState& state, const FieldVector& field,
                                   const PhysicalConstants& constants = {}) {
  return -constants.mu * dot(state.bloch(), field);
}

/// Tr[rho P], P the projector on the eigenstate aligned with field.
inline double eigenstate_overlap(const SpinState& state, const FieldVector& field) {
  return 0.5 * (1.0 + dot(state.bloch(), normalized(field)));
}

/// Anything that can be sampled as a field program.
template <typename P>
concept FieldProgram = requires(const P& p, double t) {
  { p.duration() } -> std::convertible_to<double>;
  { p.field(t) } -> std::convertible_to<FieldVector>;
  { p.breakpoints() } -> std::convertible_to<std::vector<double>>;
};

struct EvolveOptions {
  double dt_max = 1e-4;
  double max_angle = 0.02;  // rad of precession per internal step
  PhysicalConstants constants{};
};

namespace detail {

inline constexpr double min_step = 1e-9;

// Fourth-order Magnus step over [t, t+h] using two Gauss-Legendre nodes.
// The commutator term of su(2) generators is again a rotation vector.
template <FieldProgram P>
Vec3 magnus_rotation(const P& program, double t, double h, const PhysicalConstants& k,
                     double& max_rate) {
  constexpr double node = 0.28867513459481288225;  // sqrt(3)/6
  const Vec3 w1 = precession_rate(program.field(t + (0.5 - node) * h), k);
  const Vec3 w2 = precession_rate(program.field(t + (0.5 + node) * h), k);
  max_rate = std::max(norm(w1), norm(w2));
  return (w1 + w2) * (0.5 * h) + cross(w2, w1) * (0.14433756729740644113 * h * h);
}

}  // namespace detail

/// Propagate from t0 to t1 without crossing any breakpoint of the program.
/// The observer is called after every internal step as observer(t, state).
template <FieldProgram P, typename Observer>
SpinState propagate(SpinState state, const P& program, double t0, double t1,
                    const EvolveOptions& opt, Observer&& observer) {
  if (!(opt.dt_max > 0.0) || !(opt.max_angle > 0.0)) {
    throw Error(ErrorCode::invalid_configuration, "dt_max and max_angle must be positive");
  }
  double t = t0;
  const double abs_gamma = std::abs(opt.constants.gamma());
  while (t < t1) {
    const double remaining = t1 - t;
    double h = std::min(opt.dt_max, remaining);
    const double b = norm(program.field(t));
    if (b > 0.0) h = std::min(h, opt.max_angle / (abs_gamma * b));
    Vec3 theta;
    for (;;) {
      if (h < detail::min_step && h < remaining) {
        throw Error(ErrorCode::step_underflow,
                    "field magnitude demands an internal step below 1 ns");
      }
      double rate = 0.0;
      theta = detail::magnus_rotation(program, t, h, opt.constants, rate);
      if (rate * h <= opt.max_angle * (1.0 + 1e-9)) break;
      h = opt.max_angle / rate;
    }
    state = state.evolved(rotation(theta));
    t = (h >= remaining) ? t1 : t + h;
    observer(t, state);
  }
  return state;
}

template <FieldProgram P>
SpinState propagate(SpinState state, const P& program, double t0, double t1, const EvolveOptions& opt) {
  return propagate(std::move(state), program, t0, t1, opt, [](double, const SpinState&) {});
}

/// Evolve across the whole program, returning the states at the requested
/// instants (clamped into [0, duration], sorted ascending).
template <FieldProgram P>
std::vector<SpinState> evolve(const SpinState& initial, const P& program, double dt_max,
                              std::span<const double> sample_times,
                              const PhysicalConstants& constants = {},
                              double max_angle = 0.02) {
  if (!(dt_max > 0.0)) throw Error(ErrorCode::invalid_configuration, "dt_max must be positive");
  const double total = program.duration();
  if (!(total >= 0.0)) throw Error(ErrorCode::invalid_configuration, "negative duration");

  std::vector<double> samples(sample_times.begin(), sample_times.end());
  for (double& s : samples) s = std::clamp(s, 0.0, total);
  std::sort(samples.begin(), samples.end());

  std::vector<double> marks = program.breakpoints();
  marks.insert(marks.end(), samples.begin(), samples.end());
  marks.push_back(total);
  std::sort(marks.begin(), marks.end());
  marks.erase(std::unique(marks.begin(), marks.end()), marks.end());

  const EvolveOptions opt{dt_max, max_angle, constants};
  std::vector<SpinState> out;
  out.reserve(samples.size());
  SpinState state = initial;
  std::size_t next = 0;
  auto emit = [&](double t) {
    while (next < samples.size() && samples[next] <= t) {
      out.push_back(state);
      ++next;
    }
  };
  double t = 0.0;
  emit(t);
  for (double mark : marks) {
    if (mark <= t || mark > total) continue;
    state = propagate(state, program, t, mark, opt, [](double, const SpinState&) {});
    t = mark;
    emit(t);
  }
  return out;
}

}  // namespace berry
