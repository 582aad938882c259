#pragma once

// Deterministic field programs: static guide segments, linearly polarized rf
// pulses, and conical rotations of the guide field about the x axis. An echo
// sequence chains them (pi/2 pulse, cone, pi pulse, cone) on top of a static
// guide field; an optional noise replay adds K(t) along x inside every cone.

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <optional>
#include <string>
#include <variant>
#include <vector>

#include "berry/core.hpp"
#include "berry/spin.hpp"

namespace berry {

enum class Axis { x, y };

struct StaticSegment {
  FieldVector field;
  double duration = 0.0;

  bool operator==(const StaticSegment&) const = default;
};

/// Linear rf field amplitude*cos(carrier*t + phase) along `axis`, added on top
/// of the sequence guide field. t is measured from the segment start.
struct RfPulseSegment {
  Axis axis = Axis::x;
  double amplitude = 0.0;
  double carrier_frequency = 0.0;
  double carrier_phase = 0.0;
  double duration = 0.0;

  bool operator==(const RfPulseSegment&) const = default;
};

/// Field rotating about x on a cone: B = (bx, -bz0 sin(d w t), bz0 cos(d w t)).
/// Optional tilt ramps rotate the field at constant magnitude from the z axis
/// onto the cone start (and back) so that the spin can follow adiabatically.
struct ConicalSegment {
  double guide_bz = 0.0;  // signed B_z(0)
  double offset_bx = 0.0;
  double cycle_time = 0.0;
  int direction = 1;
  int cycles = 1;
  double ramp_time = 0.0;

  bool operator==(const ConicalSegment&) const = default;

  double magnitude() const { return std::hypot(offset_bx, guide_bz); }
  /// Cone half-angle measured from the x axis.
  double theta() const { return std::atan2(std::abs(guide_bz), offset_bx); }
  double angular_velocity() const { return two_pi / cycle_time; }
  double solid_angle() const { return two_pi * (1.0 - std::cos(theta())); }
  double cycling_time() const { return cycle_time * cycles; }
  double duration() const { return cycling_time() + 2.0 * ramp_time; }

  /// Field on the cone proper, tau measured from the first cycle start.
  FieldVector cone_field(double tau) const {
    const double u = tau / cycle_time;
    double frac = u - std::floor(u);
    if (frac < 1e-12 || frac > 1.0 - 1e-12) frac = 0.0;
    if (frac == 0.0) return {offset_bx, 0.0, guide_bz};
    const double angle = two_pi * frac * direction;
    return {offset_bx, -guide_bz * std::sin(angle), guide_bz * std::cos(angle)};
  }

  /// Field at local time tau in [0, duration()].
  FieldVector field(double tau) const {
    if (tau < ramp_time) return tilt(0.5 * (1.0 - std::cos(pi * tau / ramp_time)));
    const double cone_end = ramp_time + cycling_time();
    if (tau < cone_end || ramp_time == 0.0) return cone_field(tau - ramp_time);
    const double back = std::min(tau - cone_end, ramp_time);
    return tilt(0.5 * (1.0 + std::cos(pi * back / ramp_time)));
  }

  /// Constant-magnitude rotation in the xz plane from the z axis (s = 0) to
  /// the cone start (s = 1).
  FieldVector tilt(double s) const {
    if (s >= 1.0) return {offset_bx, 0.0, guide_bz};
    const double end = std::atan2(offset_bx, std::abs(guide_bz));
    const double beta = end * s;
    const double m = magnitude();
    return {m * std::sin(beta), 0.0, std::copysign(m * std::cos(beta), guide_bz)};
  }

  void validate() const {
    if (!(cycle_time > 0.0)) throw Error(ErrorCode::invalid_configuration, "cone cycle_time must be positive");
    if (direction != 1 && direction != -1) throw Error(ErrorCode::invalid_configuration, "cone direction must be +1 or -1");
    if (cycles < 1) throw Error(ErrorCode::invalid_configuration, "cone needs at least one full cycle");
    if (!(ramp_time >= 0.0)) throw Error(ErrorCode::invalid_configuration, "cone ramp must be non-negative");
    if (guide_bz == 0.0) throw Error(ErrorCode::singular_configuration, "cone guide_bz must be non-zero");
    if (!(offset_bx >= 0.0)) throw Error(ErrorCode::invalid_configuration, "cone offset_bx must be non-negative");
    if (!std::isfinite(guide_bz) || !std::isfinite(offset_bx)) throw Error(ErrorCode::invalid_input, "non-finite cone field");
  }
};

using Segment = std::variant<StaticSegment, RfPulseSegment, ConicalSegment>;

inline double segment_duration(const Segment& s) {
  return std::visit(
      [](const auto& seg) -> double {
        if constexpr (std::is_same_v<std::decay_t<decltype(seg)>, ConicalSegment>) {
          return seg.duration();
        } else {
          return seg.duration;
        }
      },
      s);
}

enum class EchoMode { none, single, geometric, dynamical };

inline const char* to_string(EchoMode m) {
  switch (m) {
    case EchoMode::none: return "none";
    case EchoMode::single: return "single";
    case EchoMode::geometric: return "geometric";
    case EchoMode::dynamical: return "dynamical";
  }
  return "none";
}

enum class AnalysisMode { expectation, sampled };

class EchoSequence {
 public:
  EchoSequence() = default;
  EchoSequence(FieldVector guide, std::vector<Segment> segments)
      : guide_(guide), segments_(std::move(segments)) {
    if (!is_finite(guide_)) throw Error(ErrorCode::invalid_input, "non-finite guide field");
    starts_.reserve(segments_.size());
    double t = 0.0;
    for (const auto& seg : segments_) {
      std::visit([](const auto& s) { check(s); }, seg);
      starts_.push_back(t);
      t += segment_duration(seg);
    }
    total_ = t;
  }

  const FieldVector& guide() const { return guide_; }
  const std::vector<Segment>& segments() const { return segments_; }
  double segment_start(std::size_t i) const { return starts_.at(i); }
  double duration() const { return total_; }

  bool operator==(const EchoSequence& o) const {
    return guide_ == o.guide_ && segments_ == o.segments_;
  }

  /// Deterministic field value; throws for t outside [0, duration].
  FieldVector sample(double t) const {
    if (!(t >= 0.0) || t > total_ * (1.0 + 1e-15)) {
      throw Error(ErrorCode::out_of_range, "sample time outside the sequence");
    }
    return field(t);
  }

  /// Unchecked sampling used by the integrator (clamped to the program).
  FieldVector field(double t) const {
    if (segments_.empty()) return guide_;
    const std::size_t i = locate(t);
    const double tau = std::max(0.0, t - starts_[i]);
    return std::visit([&](const auto& s) { return field_in(s, tau); }, segments_[i]);
  }

  /// Times where the field or its derivative may be discontinuous.
  std::vector<double> breakpoints() const {
    std::vector<double> out;
    for (std::size_t i = 0; i < segments_.size(); ++i) {
      out.push_back(starts_[i]);
      if (const auto* c = std::get_if<ConicalSegment>(&segments_[i])) {
        out.push_back(starts_[i] + c->ramp_time);
        out.push_back(starts_[i] + c->ramp_time + c->cycling_time());
      }
    }
    out.push_back(total_);
    return out;
  }

  std::vector<std::size_t> cone_indices() const {
    std::vector<std::size_t> out;
    for (std::size_t i = 0; i < segments_.size(); ++i) {
      if (std::holds_alternative<ConicalSegment>(segments_[i])) out.push_back(i);
    }
    return out;
  }

  const ConicalSegment& cone(std::size_t k) const {
    return std::get<ConicalSegment>(segments_.at(cone_indices().at(k)));
  }

  /// Geometric mode reverses the rotation sense in the second cone;
  /// dynamical-cancellation mode keeps it.
  EchoMode mode() const {
    const auto cones = cone_indices();
    if (cones.empty()) return EchoMode::none;
    if (cones.size() == 1) return EchoMode::single;
    const auto& a = std::get<ConicalSegment>(segments_[cones[0]]);
    const auto& b = std::get<ConicalSegment>(segments_[cones[1]]);
    return a.direction == -b.direction ? EchoMode::geometric : EchoMode::dynamical;
  }

  /// Total time spent on cone cycles (ramps excluded).
  double cycling_time() const {
    double t = 0.0;
    for (auto i : cone_indices()) t += std::get<ConicalSegment>(segments_[i]).cycling_time();
    return t;
  }

 private:
  static void check(const StaticSegment& s) {
    if (!(s.duration >= 0.0)) throw Error(ErrorCode::invalid_configuration, "negative static duration");
    if (!is_finite(s.field)) throw Error(ErrorCode::invalid_input, "non-finite static field");
  }
  static void check(const RfPulseSegment& s) {
    if (!(s.duration >= 0.0)) throw Error(ErrorCode::invalid_configuration, "negative rf duration");
    if (!(s.amplitude >= 0.0)) throw Error(ErrorCode::invalid_configuration, "negative rf amplitude");
    if (!std::isfinite(s.carrier_frequency) || !std::isfinite(s.carrier_phase)) {
      throw Error(ErrorCode::invalid_input, "non-finite rf carrier");
    }
  }
  static void check(const ConicalSegment& s) { s.validate(); }

  FieldVector field_in(const StaticSegment& s, double) const { return s.field; }
  FieldVector field_in(const RfPulseSegment& s, double tau) const {
    const double b = s.amplitude * std::cos(s.carrier_frequency * tau + s.carrier_phase);
    FieldVector f = guide_;
    if (s.axis == Axis::x) f.x += b; else f.y += b;
    return f;
  }
  FieldVector field_in(const ConicalSegment& s, double tau) const { return s.field(tau); }

  std::size_t locate(double t) const {
    auto it = std::upper_bound(starts_.begin(), starts_.end(), t);
    if (it == starts_.begin()) return 0;
    std::size_t i = static_cast<std::size_t>(it - starts_.begin()) - 1;
    // zero-length segments never own a time instant
    while (i + 1 < starts_.size() && segment_duration(segments_[i]) == 0.0 && starts_[i + 1] <= t) ++i;
    return i;
  }

  FieldVector guide_{};
  std::vector<Segment> segments_;
  std::vector<double> starts_;
  double total_ = 0.0;
};

/// Noise channel along x, replayed identically inside every cone segment.
/// The trace is centred on the segment; outside the trace K = 0.
class NoiseReplay {
 public:
  NoiseReplay() = default;
  NoiseReplay(std::vector<double> samples, double sample_dt, const EchoSequence& seq)
      : samples_(std::move(samples)), dt_(sample_dt) {
    if (!(dt_ > 0.0)) throw Error(ErrorCode::invalid_configuration, "noise sample_dt must be positive");
    const double span = dt_ * static_cast<double>(samples_.empty() ? 0 : samples_.size() - 1);
    for (auto i : seq.cone_indices()) {
      const double mid = seq.segment_start(i) + 0.5 * segment_duration(seq.segments()[i]);
      offsets_.push_back(mid - 0.5 * span);
    }
  }

  bool empty() const { return samples_.empty(); }

  /// Linear interpolation of the trace replayed at every window.
  double value(double t) const {
    if (samples_.empty()) return 0.0;
    const double span = dt_ * static_cast<double>(samples_.size() - 1);
    for (double off : offsets_) {
      const double tau = t - off;
      if (tau < 0.0 || tau > span) continue;
      const double u = tau / dt_;
      const auto j = std::min(static_cast<std::size_t>(u), samples_.size() - 1);
      if (j + 1 >= samples_.size()) return samples_.back();
      const double w = u - static_cast<double>(j);
      return samples_[j] + w * (samples_[j + 1] - samples_[j]);
    }
    return 0.0;
  }

 private:
  std::vector<double> samples_;
  double dt_ = 1.0;
  std::vector<double> offsets_;
};

/// Echo sequence plus its x-axis noise channel; this is what gets integrated.
struct NoisyProgram {
  const EchoSequence* sequence = nullptr;
  const NoiseReplay* noise = nullptr;

  double duration() const { return sequence->duration(); }
  FieldVector field(double t) const {
    FieldVector f = sequence->field(t);
    if (noise != nullptr) f.x += noise->value(t);
    return f;
  }
  std::vector<double> breakpoints() const { return sequence->breakpoints(); }
};

// ---------------------------------------------------------------------------
// Pulse design

namespace detail {

// A lone rf pulse on the guide field (0, 0, -guide).
struct PulseProbe {
  FieldVector guide;
  RfPulseSegment pulse;

  double duration() const { return pulse.duration; }
  FieldVector field(double t) const {
    const double b = pulse.amplitude * std::cos(pulse.carrier_frequency * t + pulse.carrier_phase);
    FieldVector f = guide;
    if (pulse.axis == Axis::x) f.x += b; else f.y += b;
    return f;
  }
  std::vector<double> breakpoints() const { return {0.0, pulse.duration}; }
};

inline RfPulseSegment resonant_pulse(double guide, double amplitude, const PhysicalConstants& constants,
                                     Axis axis, double phase) {
  if (!(amplitude > 0.0) || !std::isfinite(amplitude)) {
    throw Error(ErrorCode::invalid_configuration, "rf amplitude must be positive");
  }
  if (guide == 0.0 || !std::isfinite(guide)) {
    throw Error(ErrorCode::invalid_configuration, "guide field must be non-zero");
  }
  const double g = std::abs(constants.gamma());
  const double rabi = 0.5 * g * amplitude;
  return {axis, amplitude, g * std::abs(guide), phase, 0.5 * pi / rabi};
}

}  // namespace detail

/// Carrier phase that cancels the counter-rotating residual of a linearly
/// polarized pi/2 pulse. Starting from -z, the final z component is
/// a + b cos(2 phi) + c sin(2 phi) to good accuracy; three probe runs fix
/// a, b, c, the zero follows in closed form and one secant step polishes it.
/// Falls back to the minimizing phase if no zero exists.
inline double compensated_carrier_phase(double guide, double amplitude, const PhysicalConstants& constants = {},
                                        Axis axis = Axis::x) {
  const FieldVector g{0.0, 0.0, -std::abs(guide)};
  const EvolveOptions opt{1e-4, 0.02, constants};
  auto z_at = [&](double phase) {
    const detail::PulseProbe probe{g, detail::resonant_pulse(guide, amplitude, constants, axis, phase)};
    return propagate(SpinState::from_bloch({0.0, 0.0, -1.0}), probe, 0.0, probe.duration(), opt).bloch().z;
  };
  const double z0 = z_at(0.0);
  const double z1 = z_at(0.25 * pi);
  const double z2 = z_at(0.5 * pi);
  const double a = 0.5 * (z0 + z2);
  const double b = 0.5 * (z0 - z2);
  const double c = z1 - a;
  const double r = std::hypot(b, c);
  const double base = std::atan2(c, b);
  double phase = 0.5 * (r > std::abs(a) ? base + std::acos(-a / r) : base + (a > 0.0 ? pi : 0.0));
  const double h = 1e-3;
  const double za = z_at(phase);
  const double zb = z_at(phase + h);
  if (zb != za && std::abs(za) > 1e-9) {
    const double step = -za * h / (zb - za);
    if (std::abs(step) < 0.1) phase += step;
  }
  phase = std::fmod(phase, pi);
  if (phase < 0.0) phase += pi;
  return phase;
}

/// Resonant pi/2 pulse from the rotating-wave Rabi frequency
/// omega_1 = |gamma| amplitude / 2. Without an explicit carrier phase the
/// compensated one is used.
inline RfPulseSegment design_pi2_pulse(double guide, double amplitude,
                                       const PhysicalConstants& constants = {},
                                       Axis axis = Axis::x, std::optional<double> phase = std::nullopt) {
  auto p = detail::resonant_pulse(guide, amplitude, constants, axis, phase.value_or(0.0));
  if (!phase) p.carrier_phase = compensated_carrier_phase(guide, amplitude, constants, axis);
  return p;
}

inline RfPulseSegment design_pi_pulse(double guide, double amplitude,
                                      const PhysicalConstants& constants = {},
                                      Axis axis = Axis::x, std::optional<double> phase = std::nullopt) {
  auto p = design_pi2_pulse(guide, amplitude, constants, axis, phase);
  p.duration *= 2.0;
  return p;
}

/// Nominal rotation angle of an rf pulse in the rotating-wave picture.
inline double nominal_rotation(const RfPulseSegment& p, const PhysicalConstants& constants = {}) {
  return 0.5 * std::abs(constants.gamma()) * p.amplitude * p.duration;
}

// ---------------------------------------------------------------------------
// Adiabaticity

struct AdiabaticityReport {
  double margin = 0.0;  // max |dB/dt| / (|B| omega_L) over conical segments
  bool flagged = false;  // margin above the warning threshold
  std::vector<double> per_segment;
};

inline constexpr double adiabatic_warning_threshold = 0.2;

inline AdiabaticityReport adiabaticity_margin(const EchoSequence& seq,
                                              const PhysicalConstants& constants = {}) {
  const double g = std::abs(constants.gamma());
  if (norm(seq.guide()) == 0.0 && !seq.segments().empty()) {
    bool needs_guide = std::any_of(seq.segments().begin(), seq.segments().end(), [](const Segment& s) {
      return std::holds_alternative<RfPulseSegment>(s);
    });
    if (needs_guide) throw Error(ErrorCode::singular_configuration, "zero guide field under an rf pulse");
  }
  AdiabaticityReport rep;
  for (const auto& seg : seq.segments()) {
    double m = 0.0;
    if (const auto* s = std::get_if<StaticSegment>(&seg)) {
      if (norm(s->field) == 0.0 && s->duration > 0.0) {
        throw Error(ErrorCode::singular_configuration, "zero-magnitude static field");
      }
    } else if (const auto* c = std::get_if<ConicalSegment>(&seg)) {
      const double b = c->magnitude();
      if (b == 0.0) throw Error(ErrorCode::singular_configuration, "zero-magnitude cone field");
      const double omega_l = g * b;
      m = c->angular_velocity() * std::sin(c->theta()) / omega_l;
      if (c->ramp_time > 0.0) {
        const double tilt = std::atan2(c->offset_bx, std::abs(c->guide_bz));
        m = std::max(m, 0.5 * pi * tilt / c->ramp_time / omega_l);
      }
    }
    rep.per_segment.push_back(m);
    rep.margin = std::max(rep.margin, m);
  }
  rep.flagged = rep.margin > adiabatic_warning_threshold;
  return rep;
}

// ---------------------------------------------------------------------------
// Echo construction

/// Parameters of the two-cycle spin-echo sequence. The guide field points
/// along -z; cones keep the guide magnitude so omega_L is the same everywhere.
struct EchoDesign {
  double guide = 10.0 * microtesla;
  double rf_amplitude = 1.6 * microtesla;
  double theta = 0.5 * pi;  // cone half-angle about x
  double cycle_time = 0.2;
  int first_direction = 1;
  EchoMode mode = EchoMode::geometric;
  double ramp_time = 0.05;
  std::optional<double> rf_phase;  // unset: compensated carrier phase
};

inline ConicalSegment design_cone(double guide, double theta, double cycle_time, int direction,
                                  double ramp_time) {
  if (!(theta > 0.0) || theta > 0.5 * pi + 1e-12) {
    throw Error(ErrorCode::invalid_configuration, "cone angle must lie in (0, pi/2]");
  }
  double c = std::cos(theta);
  if (std::abs(c) < 1e-15) c = 0.0;
  ConicalSegment cone{-guide * std::sin(theta), guide * c, cycle_time, direction, 1, ramp_time};
  cone.validate();
  return cone;
}

inline EchoSequence make_echo(const EchoDesign& d, const PhysicalConstants& constants = {}) {
  if (d.mode != EchoMode::geometric && d.mode != EchoMode::dynamical) {
    throw Error(ErrorCode::invalid_configuration, "echo mode must be geometric or dynamical");
  }
  const FieldVector guide{0.0, 0.0, -d.guide};
  const auto pi2 = design_pi2_pulse(d.guide, d.rf_amplitude, constants, Axis::x, d.rf_phase);
  auto flip = pi2;
  flip.duration *= 2.0;
  const int second = d.mode == EchoMode::geometric ? -d.first_direction : d.first_direction;
  const auto c1 = design_cone(d.guide, d.theta, d.cycle_time, d.first_direction, d.ramp_time);
  const auto c2 = design_cone(d.guide, d.theta, d.cycle_time, second, d.ramp_time);
  return EchoSequence(guide, {pi2, c1, flip, c2});
}

/// Same timing with every cone replaced by the static guide field: the
/// no-evolution reference measurement.
inline EchoSequence no_evolution_reference(const EchoSequence& seq) {
  std::vector<Segment> segs;
  for (const auto& s : seq.segments()) {
    if (const auto* c = std::get_if<ConicalSegment>(&s)) {
      segs.emplace_back(StaticSegment{seq.guide(), c->duration()});
    } else {
      segs.push_back(s);
    }
  }
  return EchoSequence(seq.guide(), std::move(segs));
}

/// Copy of `seq` with every cone's cycle time set to `cycle_time`.
inline EchoSequence with_cycle_time(const EchoSequence& seq, double cycle_time) {
  std::vector<Segment> segs = seq.segments();
  for (auto& s : segs) {
    if (auto* c = std::get_if<ConicalSegment>(&s)) c->cycle_time = cycle_time;
  }
  return EchoSequence(seq.guide(), std::move(segs));
}

/// Copy of `seq` with every cone re-designed at half-angle `theta`, keeping
/// its field magnitude, timing and direction.
inline EchoSequence with_cone_angle(const EchoSequence& seq, double theta) {
  std::vector<Segment> segs = seq.segments();
  for (auto& s : segs) {
    if (auto* c = std::get_if<ConicalSegment>(&s)) {
      const int cycles = c->cycles;
      *c = design_cone(c->magnitude(), theta, c->cycle_time, c->direction, c->ramp_time);
      c->cycles = cycles;
    }
  }
  return EchoSequence(seq.guide(), std::move(segs));
}

/// Cone angle that encloses solid angle omega (2 pi (1 - cos theta)).
inline double theta_from_solid_angle(double omega) {
  const double c = 1.0 - omega / two_pi;
  if (c < 0.0 || c > 1.0) throw Error(ErrorCode::invalid_configuration, "solid angle outside [0, 2pi]");
  return std::acos(c);
}

/// Cone angle whose noise-free Berry phase is phi_g = -pi (1 - cos theta).
inline double theta_from_berry_phase(double phi_g) { return theta_from_solid_angle(-2.0 * phi_g); }

}  // namespace berry
