#pragma once

// The echo experiment on the simulator: preparation, noisy evolution with the
// same K(t) replayed in both echo halves, polarization analysis, and phase
// extraction against a no-evolution reference run.
//
// Phase unwrapping: the final azimuth difference is only known modulo 2 pi,
// while |4 phi_g| exceeds pi over most of the scan. Inside every cone segment
// the relative phase of the two field eigencomponents is tracked continuously
// step by step (the Bloch azimuth about the instantaneous field, in a frame
// tied to the cone axis, plus the winding of the field about that axis). The
// echo combination of those tracked phases picks the 2 pi branch of the
// exactly measured wrapped value.

#include <cmath>
#include <cstdint>
#include <optional>
#include <random>
#include <string>
#include <vector>

#include "berry/core.hpp"
#include "berry/noise.hpp"
#include "berry/oracle.hpp"
#include "berry/rng.hpp"
#include "berry/spin.hpp"
#include "berry/waveform.hpp"

namespace berry {

struct ExperimentConfig {
  EchoSequence sequence;
  std::optional<NoiseConfig> noise;
  double initial_polarization = 0.75;
  double t2 = 0.847;
  AnalysisMode analysis = AnalysisMode::expectation;
  std::uint64_t shots = 0;         // per analyzer setting, sampled mode only
  std::uint64_t analysis_seed = 0;
  double dt_max = 1e-4;
  double max_angle = 0.02;
  double noise_cutoff_fraction = 0.4;  // low-pass cutoff of the replayed noise, units of omega_L
  PhysicalConstants constants{};

  void validate() const {
    if (!(initial_polarization >= 0.0 && initial_polarization <= 1.0)) {
      throw Error(ErrorCode::invalid_configuration, "initial polarization must lie in [0, 1]");
    }
    if (!(t2 > 0.0)) throw Error(ErrorCode::invalid_configuration, "T2 must be positive");
    if (analysis == AnalysisMode::sampled && shots == 0) {
      throw Error(ErrorCode::invalid_configuration, "sampled analysis needs a positive shot count");
    }
    if (noise) noise->validate();
  }

  double omega_l() const { return std::abs(constants.gamma()) * norm(sequence.guide()); }
};

struct TrajectoryPoint {
  double t = 0.0;
  Vec3 bloch;
  FieldVector field;
};

/// Raw outcome of integrating one field program.
struct TrackedRun {
  SpinState final_state;
  std::vector<double> cone_phase;      // unwrapped relative phase per cone, rad
  std::vector<double> cone_dynamical;  // -int E_aligned dt / hbar per cone, rad
  std::vector<TrajectoryPoint> trajectory;
};

struct ExperimentResult {
  SpinState final_state;
  Vec3 measured_bloch;
  double azimuth_shift = 0.0;    // unwrapped, rad
  double azimuth_wrapped = 0.0;  // (-pi, pi]
  double geometric_phase = 0.0;
  double dynamical_phase = 0.0;
  double raw_polarization = 0.0;
  double s_final = 0.0;  // after the T2 envelope
  double adiabaticity = 0.0;
  std::vector<std::string> warnings;
  std::vector<TrajectoryPoint> trajectory;
};

// ---------------------------------------------------------------------------

/// s * exp(-t / T2).
inline double apply_t2_envelope(double polarization, double evolution_time, double t2) {
  if (!(polarization >= -1e-12 && polarization <= 1.0 + 1e-12)) {
    throw Error(ErrorCode::invalid_input, "polarization outside [0, 1]");
  }
  return polarization * std::exp(-evolution_time / t2);
}

/// Signed azimuth of `result` relative to `reference` about `guide_axis`,
/// wrapped to (-pi, pi].
inline double extract_phase(const Vec3& result, const Vec3& reference, const Vec3& guide_axis) {
  const Vec3 a = normalized(guide_axis);
  const Vec3 r = result - a * dot(result, a);
  const Vec3 f = reference - a * dot(reference, a);
  if (norm(r) < 1e-6 || norm(f) < 1e-6) {
    throw Error(ErrorCode::undefined_phase, "transverse polarization vanishes");
  }
  return wrap_angle(std::atan2(dot(a, cross(f, r)), dot(f, r)));
}

inline double extract_phase(const SpinState& result, const SpinState& reference, const Vec3& guide_axis) {
  return extract_phase(result.bloch(), reference.bloch(), guide_axis);
}

struct AnalyzerSetting {
  int axis;  // 0 = x, 1 = y, 2 = z
  int sign;  // +1 analyses +axis, -1 adds the pi flip
  const char* label;
};

/// The six settings of a full polarization analysis: pi/2 analysis pulses at
/// 0 or 90 degrees offset (x, y) or none (z), each with or without the flip.
inline constexpr std::array<AnalyzerSetting, 6> analyzer_settings{{
    {0, +1, "pi/2(0 deg)"},
    {0, -1, "pi/2(0 deg)+flip"},
    {1, +1, "pi/2(90 deg)"},
    {1, -1, "pi/2(90 deg)+flip"},
    {2, +1, "none"},
    {2, -1, "flip"},
}};

/// Probability of counting a neutron in an analyzer setting: (1 + sign s_i)/2.
inline double detection_probability(const Vec3& bloch, const AnalyzerSetting& setting) {
  const double s = setting.axis == 0 ? bloch.x : (setting.axis == 1 ? bloch.y : bloch.z);
  return std::clamp(0.5 * (1.0 + setting.sign * s), 0.0, 1.0);
}

/// Exact Bloch vector, or a binomial shot-noise estimate from the six settings.
inline Vec3 polarization_analysis(const SpinState& state, AnalysisMode mode, std::uint64_t shots = 0,
                                  std::uint64_t seed = 0, std::uint64_t stream = 0) {
  const Vec3 s = state.bloch();
  if (mode == AnalysisMode::expectation) return s;
  if (shots == 0) throw Error(ErrorCode::invalid_configuration, "sampled analysis needs shots > 0");
  PhiloxStream rng(mix_seed(seed, 0xA11A), stream);
  std::array<double, 3> est{};
  const double n = static_cast<double>(shots);
  for (const auto& setting : analyzer_settings) {
    std::binomial_distribution<std::uint64_t> bin(shots, detection_probability(s, setting));
    est[setting.axis] += setting.sign * static_cast<double>(bin(rng)) / n;
  }
  return {est[0], est[1], est[2]};
}

// ---------------------------------------------------------------------------

namespace detail {

inline bool is_pi_pulse(const Segment& s, const PhysicalConstants& k) {
  const auto* rf = std::get_if<RfPulseSegment>(&s);
  if (rf == nullptr) return false;
  const double angle = std::fmod(nominal_rotation(*rf, k), two_pi);
  return std::abs(angle - pi) < 0.1 * pi;
}

// Relative eigencomponent phase: Bloch azimuth about n in the frame whose
// first axis is the x axis projected orthogonal to n.
inline double frame_azimuth(const Vec3& s, const Vec3& n) {
  const Vec3 e1 = normalized(Vec3{1.0, 0.0, 0.0} - n * n.x);
  const Vec3 e2 = cross(n, e1);
  return std::atan2(dot(s, e2), dot(s, e1));
}

// Azimuth of the field direction about the x axis.
inline double winding_angle(const Vec3& n) { return std::atan2(n.z, n.y); }

}  // namespace detail

/// Integrate a program and track the unwrapped phases inside the cone
/// segments of `layout` (defaults to `seq`; the reference run passes the
/// measured sequence so both are tracked over the same windows).
inline TrackedRun track(const SpinState& initial, const EchoSequence& seq, const NoiseReplay* noise,
                        const ExperimentConfig& cfg, std::size_t trajectory_stride = 0,
                        const EchoSequence* layout = nullptr) {
  if (layout == nullptr) layout = &seq;
  if (layout->segments().size() != seq.segments().size()) {
    throw Error(ErrorCode::invalid_configuration, "tracking layout does not match the sequence");
  }
  const NoisyProgram program{&seq, noise};
  const EvolveOptions opt{cfg.dt_max, cfg.max_angle, cfg.constants};
  const double mu_over_hbar = cfg.constants.mu / cfg.constants.hbar;

  TrackedRun out;
  SpinState state = initial;
  std::size_t step_count = 0;
  auto record = [&](double t, const SpinState& s) {
    if (trajectory_stride == 0) return;
    if (step_count++ % trajectory_stride == 0) out.trajectory.push_back({t, s.bloch(), program.field(t)});
  };
  record(0.0, state);

  const auto& segs = seq.segments();
  for (std::size_t i = 0; i < segs.size(); ++i) {
    const double t0 = seq.segment_start(i);
    const double t1 = t0 + segment_duration(segs[i]);
    if (const auto* cone = std::get_if<ConicalSegment>(&layout->segments()[i])) {
      const double marks[] = {t0, t0 + cone->ramp_time, t0 + cone->ramp_time + cone->cycling_time(), t1};
      FieldVector b = program.field(t0);
      Vec3 n = normalized(b);
      double psi = detail::frame_azimuth(state.bloch(), n);
      double wind = detail::winding_angle(n);
      double phase = 0.0;
      double dyn = 0.0;
      double prev_t = t0;
      double prev_b = norm(b);
      auto observer = [&](double t, const SpinState& s) {
        const FieldVector f = program.field(t);
        const double bm = norm(f);
        const Vec3 nn = f / bm;
        const double psi_new = detail::frame_azimuth(s.bloch(), nn);
        const double wind_new = detail::winding_angle(nn);
        phase += wrap_angle(psi_new - psi) + wrap_angle(wind_new - wind);
        psi = psi_new;
        wind = wind_new;
        dyn += mu_over_hbar * 0.5 * (bm + prev_b) * (t - prev_t);
        prev_t = t;
        prev_b = bm;
        record(t, s);
      };
      for (int k = 0; k < 3; ++k) {
        if (marks[k + 1] > marks[k]) state = propagate(state, program, marks[k], marks[k + 1], opt, observer);
      }
      out.cone_phase.push_back(phase);
      out.cone_dynamical.push_back(dyn);
    } else if (t1 > t0) {
      state = propagate(state, program, t0, t1, opt, record);
    }
  }
  out.final_state = state;
  return out;
}

/// Noise-free no-evolution reference of a sequence; shared by every
/// realization of an ensemble.
struct ReferenceRun {
  EchoSequence sequence;
  TrackedRun tracked;
};

inline SpinState initial_state(const ExperimentConfig& cfg) {
  return SpinState::from_bloch({0.0, 0.0, -cfg.initial_polarization});
}

inline ReferenceRun simulate_reference(const ExperimentConfig& cfg) {
  ReferenceRun ref{no_evolution_reference(cfg.sequence), {}};
  ref.tracked = track(initial_state(cfg), ref.sequence, nullptr, cfg, 0, &cfg.sequence);
  return ref;
}

/// Band-limit and window a raw noise trace for replay.
inline NoiseTrace prepare_noise(const NoiseTrace& raw, double cutoff) {
  return apply_window(low_pass(raw, cutoff));
}

/// Noise trace length that covers a cone segment of the sequence.
inline double noise_duration(const EchoSequence& seq) {
  double d = 0.0;
  for (auto i : seq.cone_indices()) d = std::max(d, segment_duration(seq.segments()[i]));
  return d;
}

/// Reported geometric phase from the unwrapped azimuth shift. In the echo the
/// superposition and the reversed second cycle each double the phase.
inline double geometric_from_azimuth(EchoMode mode, double shift) {
  switch (mode) {
    case EchoMode::geometric:
    case EchoMode::dynamical: return shift / 4.0;
    case EchoMode::single: return -shift / 2.0;
    case EchoMode::none: return 0.0;
  }
  return 0.0;
}

/// Run the experiment. `noise_trace` must already be prepared (band-limited
/// and windowed); it is replayed identically in every cone segment.
inline ExperimentResult run(const ExperimentConfig& cfg, const NoiseTrace* noise_trace = nullptr,
                            const ReferenceRun* reference = nullptr, std::uint64_t realization = 0,
                            std::size_t trajectory_stride = 0) {
  cfg.validate();
  const EchoSequence& seq = cfg.sequence;
  if (norm(seq.guide()) == 0.0) throw Error(ErrorCode::singular_configuration, "zero guide field");

  ExperimentResult res;
  const auto adiabatic = adiabaticity_margin(seq, cfg.constants);
  res.adiabaticity = adiabatic.margin;
  if (adiabatic.flagged) {
    res.warnings.push_back("adiabaticity margin " + std::to_string(adiabatic.margin) + " exceeds 0.2");
  }

  NoiseReplay replay;
  if (noise_trace != nullptr && !noise_trace->samples.empty()) {
    if (noise_trace->duration() + 1e-12 < (seq.cone_indices().empty() ? 0.0 : seq.cone(0).cycling_time())) {
      throw Error(ErrorCode::invalid_configuration, "noise trace shorter than the cone cycle");
    }
    replay = NoiseReplay(noise_trace->samples, noise_trace->dt(), seq);
    for (auto i : seq.cone_indices()) {
      const auto& cone = std::get<ConicalSegment>(seq.segments()[i]);
      const double a = seq.segment_start(i);
      const double b = a + cone.duration();
      FieldVector fa = cone.field(0.0);
      FieldVector fb = cone.field(cone.duration());
      fa.x += replay.value(a);
      fb.x += replay.value(b);
      if (norm(fa - fb) > 1e-12 * cone.magnitude()) {
        throw Error(ErrorCode::invalid_configuration, "total field is not cyclic over a cone segment");
      }
    }
  }

  ReferenceRun own_ref;
  if (reference == nullptr) {
    own_ref = simulate_reference(cfg);
    reference = &own_ref;
  }

  const TrackedRun tr = track(initial_state(cfg), seq, replay.empty() ? nullptr : &replay, cfg, trajectory_stride);
  res.final_state = tr.final_state;
  res.trajectory = tr.trajectory;
  res.measured_bloch = polarization_analysis(tr.final_state, cfg.analysis, cfg.shots, cfg.analysis_seed, realization);
  const Vec3 ref_bloch = reference->tracked.final_state.bloch();

  // echo parity of every cone: each later pi pulse reflects the azimuth
  const auto cones = seq.cone_indices();
  double estimate = 0.0;
  double dyn = 0.0;
  for (std::size_t k = 0; k < cones.size(); ++k) {
    int flips = 0;
    for (std::size_t j = cones[k] + 1; j < seq.segments().size(); ++j) {
      if (detail::is_pi_pulse(seq.segments()[j], cfg.constants)) ++flips;
    }
    const double parity = (flips % 2 == 0) ? 1.0 : -1.0;
    estimate += parity * (tr.cone_phase[k] - reference->tracked.cone_phase[k]);
    dyn += parity * (tr.cone_dynamical[k] - reference->tracked.cone_dynamical[k]);
  }

  if (cones.empty()) {
    res.azimuth_wrapped = extract_phase(res.measured_bloch, ref_bloch, seq.guide());
    res.azimuth_shift = res.azimuth_wrapped;
  } else {
    res.azimuth_wrapped = extract_phase(res.measured_bloch, ref_bloch, seq.guide());
    res.azimuth_shift = res.azimuth_wrapped + two_pi * std::round((estimate - res.azimuth_wrapped) / two_pi);
  }
  res.dynamical_phase = dyn;
  res.geometric_phase = geometric_from_azimuth(seq.mode(), res.azimuth_shift);
  res.raw_polarization = norm(res.measured_bloch);
  res.s_final = apply_t2_envelope(std::min(res.raw_polarization, 1.0), seq.cycling_time(), cfg.t2);
  return res;
}

}  // namespace berry
