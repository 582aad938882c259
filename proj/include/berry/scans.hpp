#pragma once

// Measurement campaigns built from the protocol: the solid-angle scan with
// its two controls, and the noise-generator validation.

#include <cmath>
#include <span>
#include <vector>

#include "berry/core.hpp"
#include "berry/noise.hpp"
#include "berry/oracle.hpp"
#include "berry/protocol.hpp"

namespace berry {

struct LinearFit {
  double slope = 0.0;
  double intercept = 0.0;
  double slope_se = 0.0;
  double intercept_se = 0.0;
};

/// Ordinary least squares y = slope x + intercept with residual-based errors.
inline LinearFit linear_fit(std::span<const double> x, std::span<const double> y) {
  const std::size_t n = x.size();
  if (n != y.size() || n < 2) throw Error(ErrorCode::insufficient_data, "linear fit needs >= 2 matching points");
  double mx = 0.0;
  double my = 0.0;
  for (std::size_t i = 0; i < n; ++i) {
    mx += x[i];
    my += y[i];
  }
  mx /= static_cast<double>(n);
  my /= static_cast<double>(n);
  double sxx = 0.0;
  double sxy = 0.0;
  for (std::size_t i = 0; i < n; ++i) {
    sxx += (x[i] - mx) * (x[i] - mx);
    sxy += (x[i] - mx) * (y[i] - my);
  }
  if (sxx == 0.0) throw Error(ErrorCode::singular_configuration, "linear fit with constant abscissa");
  LinearFit f;
  f.slope = sxy / sxx;
  f.intercept = my - f.slope * mx;
  if (n > 2) {
    double rss = 0.0;
    for (std::size_t i = 0; i < n; ++i) {
      const double r = y[i] - f.intercept - f.slope * x[i];
      rss += r * r;
    }
    const double s2 = rss / static_cast<double>(n - 2);
    f.slope_se = std::sqrt(s2 / sxx);
    f.intercept_se = std::sqrt(s2 * (1.0 / static_cast<double>(n) + mx * mx / sxx));
  }
  return f;
}

/// Same sequence with the second cone turned to the requested echo mode.
inline EchoSequence with_echo_mode(const EchoSequence& seq, EchoMode mode) {
  const auto cones = seq.cone_indices();
  if (cones.size() != 2 || (mode != EchoMode::geometric && mode != EchoMode::dynamical)) {
    throw Error(ErrorCode::invalid_configuration, "echo mode needs exactly two cones");
  }
  std::vector<Segment> segs = seq.segments();
  const int d1 = std::get<ConicalSegment>(segs[cones[0]]).direction;
  std::get<ConicalSegment>(segs[cones[1]]).direction = mode == EchoMode::geometric ? -d1 : d1;
  return EchoSequence(seq.guide(), std::move(segs));
}

struct BerryScanPoint {
  double solid_angle = 0.0;
  double theta = 0.0;
  double geometric_phase = 0.0;
  double theory_phase = 0.0;
  double control_phase = 0.0;    // same-direction echo
  double reference_phase = 0.0;  // no-evolution sequence against the reference
  double adiabaticity = 0.0;
};

struct BerryScan {
  std::vector<BerryScanPoint> points;
  LinearFit fit;
};

inline std::vector<double> solid_angle_grid(double lo, double hi, int points) {
  std::vector<double> g;
  for (int i = 0; i < points; ++i) g.push_back(lo + (hi - lo) * i / (points - 1));
  return g;
}

/// Noise-free scan of the solid angle; any noise model in `base` is ignored.
inline BerryScan berry_scan(const ExperimentConfig& base, std::span<const double> solid_angles) {
  BerryScan scan;
  ExperimentConfig cfg = base;
  cfg.noise.reset();
  for (double omega : solid_angles) {
    BerryScanPoint p;
    p.solid_angle = omega;
    p.theta = theta_from_solid_angle(omega);
    p.theory_phase = oracle::berry_phase(p.theta);

    cfg.sequence = with_echo_mode(with_cone_angle(base.sequence, p.theta), EchoMode::geometric);
    const auto ref = simulate_reference(cfg);
    const auto geo = run(cfg, nullptr, &ref);
    p.geometric_phase = geo.geometric_phase;
    p.adiabaticity = geo.adiabaticity;

    ExperimentConfig ctl = cfg;
    ctl.sequence = with_echo_mode(cfg.sequence, EchoMode::dynamical);
    p.control_phase = run(ctl).azimuth_shift / 4.0;

    ExperimentConfig none = cfg;
    none.sequence = no_evolution_reference(cfg.sequence);
    p.reference_phase = run(none).azimuth_shift;
    scan.points.push_back(p);
  }
  std::vector<double> x;
  std::vector<double> y;
  for (const auto& p : scan.points) {
    x.push_back(p.solid_angle);
    y.push_back(p.geometric_phase);
  }
  scan.fit = linear_fit(x, y);
  return scan;
}

// ---------------------------------------------------------------------------

struct NoiseValidation {
  NoiseTrace trace;
  SampleMoments moments;
  double correlation_time = 0.0;  // 1/e crossing of the autocorrelation
  double pacf_lag2 = 0.0;
  Spectrum spectrum;
  LorentzianFit fit;
};

inline NoiseValidation validate_noise(const NoiseConfig& cfg, std::size_t samples, std::uint64_t realization = 0) {
  if (samples < min_psd_samples) throw Error(ErrorCode::insufficient_data, "noise validation needs >= 4096 samples");
  NoiseValidation v;
  v.trace = generate(cfg, cfg.sample_dt * static_cast<double>(samples - 1), realization);
  v.moments = moments(v.trace.samples);
  v.correlation_time = correlation_time(v.trace.samples, cfg.sample_dt, 1.0 / cfg.bandwidth);
  v.pacf_lag2 = partial_autocorrelation_lag2(v.trace.samples);
  v.spectrum = estimate_psd(v.trace);
  v.fit = fit_lorentzian(v.spectrum);
  return v;
}

}  // namespace berry
