#pragma once

// Gaussian-Markovian field noise K(t) along x: exact Ornstein-Uhlenbeck
// sampling, the smooth flat-top window, zero-phase band limiting, and
// spectral / statistical estimators used to validate the generator.

#include <fftw3.h>

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <iomanip>
#include <memory>
#include <numeric>
#include <ostream>
#include <span>
#include <vector>

#include "berry/core.hpp"
#include "berry/rng.hpp"

namespace berry {

struct NoiseConfig {
  double sigma_field = 2.0 * microtesla;  // stationary RMS of K(t), tesla
  double bandwidth = 100.0;               // Gamma, rad/s
  double sample_dt = 1e-4;                // s
  std::uint64_t seed = 1;
  double ramp_fraction = 0.05;

  void validate() const {
    if (!(sigma_field >= 0.0) || !std::isfinite(sigma_field)) {
      throw Error(ErrorCode::invalid_configuration, "noise sigma must be finite and non-negative");
    }
    if (!(bandwidth > 0.0)) throw Error(ErrorCode::invalid_configuration, "noise bandwidth must be positive");
    if (!(sample_dt > 0.0)) throw Error(ErrorCode::invalid_configuration, "noise sample_dt must be positive");
    if (bandwidth * sample_dt > 0.1 + 1e-12) {
      throw Error(ErrorCode::invalid_configuration, "noise sample_dt too coarse: need Gamma*dt <= 0.1");
    }
    if (!(ramp_fraction >= 0.0 && ramp_fraction <= 0.5)) {
      throw Error(ErrorCode::invalid_configuration, "ramp_fraction must lie in [0, 0.5]");
    }
  }

  bool operator==(const NoiseConfig&) const = default;
};

struct NoiseTrace {
  std::vector<double> samples;  // tesla on a uniform grid starting at t = 0
  NoiseConfig config;
  std::uint64_t realization_index = 0;

  double dt() const { return config.sample_dt; }
  double duration() const {
    return samples.empty() ? 0.0 : config.sample_dt * static_cast<double>(samples.size() - 1);
  }
};

/// Stream ids below this value are reserved for noise realizations.
inline constexpr std::uint64_t noise_stream_base = 0;

/// Exact stationary OU discretization:
/// K_0 ~ N(0, s^2), K_{n+1} = a K_n + s sqrt(1 - a^2) xi_n, a = exp(-Gamma dt).
inline NoiseTrace generate(const NoiseConfig& config, double duration, std::uint64_t realization_index) {
  config.validate();
  if (!(duration > 0.0) || !std::isfinite(duration)) {
    throw Error(ErrorCode::invalid_configuration, "noise duration must be positive");
  }
  const auto n = static_cast<std::size_t>(std::llround(duration / config.sample_dt)) + 1;
  NoiseTrace trace{std::vector<double>(n, 0.0), config, realization_index};
  if (config.sigma_field == 0.0) return trace;

  PhiloxStream rng(config.seed, noise_stream_base + realization_index);
  const double a = std::exp(-config.bandwidth * config.sample_dt);
  const double kick = config.sigma_field * std::sqrt(-std::expm1(-2.0 * config.bandwidth * config.sample_dt));
  double k = config.sigma_field * rng.normal();
  trace.samples[0] = k;
  for (std::size_t i = 1; i < n; ++i) {
    k = a * k + kick * rng.normal();
    trace.samples[i] = k;
  }
  return trace;
}

/// Flat-topped window with raised-cosine ramps of ramp_fraction * duration at
/// both ends. The first and last samples are exactly zero.
inline NoiseTrace apply_window(NoiseTrace trace) {
  auto& s = trace.samples;
  if (s.empty()) return trace;
  const double total = trace.duration();
  const double ramp = trace.config.ramp_fraction * total;
  if (ramp > 0.0) {
    for (std::size_t i = 0; i < s.size(); ++i) {
      const double t = trace.dt() * static_cast<double>(i);
      const double edge = std::min(t, total - t);
      if (edge < ramp) s[i] *= 0.5 * (1.0 - std::cos(pi * edge / ramp));
    }
  }
  s.front() = 0.0;
  s.back() = 0.0;
  return trace;
}

namespace detail {

struct Biquad {
  double b0, b1, b2, a1, a2;

  // Direct form II transposed, started at the steady state of x0.
  void run(std::span<double> x, bool reverse) const {
    if (x.empty()) return;
    const double x0 = reverse ? x.back() : x.front();
    double z2 = (b2 - a2) * x0;
    double z1 = (b1 - a1) * x0 + z2;
    auto step = [&](double& v) {
      const double in = v;
      const double out = b0 * in + z1;
      z1 = b1 * in - a1 * out + z2;
      z2 = b2 * in - a2 * out;
      v = out;
    };
    if (reverse) {
      for (auto it = x.rbegin(); it != x.rend(); ++it) step(*it);
    } else {
      for (double& v : x) step(v);
    }
  }
};

inline Biquad butterworth_section(double k, double q) {
  const double norm = 1.0 / (1.0 + k / q + k * k);
  const double b0 = k * k * norm;
  return {b0, 2.0 * b0, b0, 2.0 * (k * k - 1.0) * norm, (1.0 - k / q + k * k) * norm};
}

}  // namespace detail

/// Zero-phase 4th-order Butterworth low-pass (applied forward and backward),
/// cutoff in rad/s. Keeps the replayed noise below the Larmor band so the
/// field fluctuations stay adiabatic. No-op if the cutoff is above Nyquist.
inline NoiseTrace low_pass(NoiseTrace trace, double cutoff) {
  if (!(cutoff > 0.0)) throw Error(ErrorCode::invalid_configuration, "low-pass cutoff must be positive");
  const double nyquist = pi / trace.dt();
  if (cutoff >= 0.95 * nyquist || trace.samples.size() < 2) return trace;
  const double k = std::tan(0.5 * cutoff * trace.dt());
  const detail::Biquad s1 = detail::butterworth_section(k, 0.54119610014619698440);
  const detail::Biquad s2 = detail::butterworth_section(k, 1.30656296487637652786);
  std::span<double> x(trace.samples);
  s1.run(x, false);
  s2.run(x, false);
  s1.run(x, true);
  s2.run(x, true);
  return trace;
}

/// Minimum trace length accepted by estimate_psd.
inline constexpr std::size_t min_psd_samples = 4096;

struct Spectrum {
  std::vector<double> frequency;  // Hz
  std::vector<double> density;    // one-sided, T^2/Hz

  double omega(std::size_t i) const { return two_pi * frequency[i]; }
  /// Integral of the one-sided density over frequency.
  double total_power() const {
    if (frequency.size() < 2) return 0.0;
    const double df = frequency[1] - frequency[0];
    return std::accumulate(density.begin(), density.end(), 0.0) * df;
  }
};

/// Averaged periodogram (Hann window, 50 % overlap) after removing the trace
/// mean. Segment length is the largest power of two not above
/// max(4096, n / 64).
inline Spectrum estimate_psd(std::span<const double> samples, double dt) {
  const std::size_t n = samples.size();
  if (n < min_psd_samples) throw Error(ErrorCode::insufficient_data, "PSD estimate needs at least 4096 samples");
  std::size_t seg = min_psd_samples;
  while (seg * 2 <= std::max<std::size_t>(min_psd_samples, n / 64)) seg *= 2;

  const double mean = std::accumulate(samples.begin(), samples.end(), 0.0) / static_cast<double>(n);
  std::vector<double> window(seg);
  double wss = 0.0;
  for (std::size_t i = 0; i < seg; ++i) {
    window[i] = 0.5 * (1.0 - std::cos(two_pi * static_cast<double>(i) / static_cast<double>(seg)));
    wss += window[i] * window[i];
  }

  const std::size_t bins = seg / 2 + 1;
  std::unique_ptr<double, decltype(&fftw_free)> in(fftw_alloc_real(seg), &fftw_free);
  std::unique_ptr<fftw_complex, decltype(&fftw_free)> out(fftw_alloc_complex(bins), &fftw_free);
  fftw_plan plan = fftw_plan_dft_r2c_1d(static_cast<int>(seg), in.get(), out.get(), FFTW_ESTIMATE);

  Spectrum sp;
  sp.frequency.resize(bins);
  sp.density.assign(bins, 0.0);
  const double fs = 1.0 / dt;
  for (std::size_t k = 0; k < bins; ++k) sp.frequency[k] = fs * static_cast<double>(k) / static_cast<double>(seg);

  std::size_t count = 0;
  for (std::size_t start = 0; start + seg <= n; start += seg / 2) {
    for (std::size_t i = 0; i < seg; ++i) in.get()[i] = (samples[start + i] - mean) * window[i];
    fftw_execute(plan);
    for (std::size_t k = 0; k < bins; ++k) {
      const double re = out.get()[k][0];
      const double im = out.get()[k][1];
      sp.density[k] += re * re + im * im;
    }
    ++count;
  }
  fftw_destroy_plan(plan);

  const double scale = 1.0 / (fs * wss * static_cast<double>(count));
  for (std::size_t k = 0; k < bins; ++k) {
    const bool edge = (k == 0) || (k == bins - 1);
    sp.density[k] *= edge ? scale : 2.0 * scale;
  }
  return sp;
}

inline Spectrum estimate_psd(const NoiseTrace& trace) { return estimate_psd(trace.samples, trace.dt()); }

struct LorentzianFit {
  double bandwidth = 0.0;  // Gamma, rad/s
  double variance = 0.0;   // sigma^2 implied by the fitted amplitude
};

/// Fit G(w) = 4 s^2 Gamma / (Gamma^2 + w^2) to a one-sided spectrum through
/// the weighted linear regression 1/G = (Gamma^2 + w^2) / A. The band runs
/// from the first non-DC bin to where G falls below 1/25 of its plateau.
inline LorentzianFit fit_lorentzian(const Spectrum& sp) {
  if (sp.density.size() < 8) throw Error(ErrorCode::insufficient_data, "spectrum too short to fit");
  double plateau = 0.0;
  for (std::size_t k = 1; k <= 4; ++k) plateau += sp.density[k];
  plateau /= 4.0;
  if (!(plateau > 0.0)) throw Error(ErrorCode::insufficient_data, "spectrum has no power");

  double sw = 0.0, sx = 0.0, sy = 0.0, sxx = 0.0, sxy = 0.0;
  for (std::size_t k = 1; k < sp.density.size(); ++k) {
    const double g = sp.density[k];
    if (g < plateau / 25.0) break;
    const double x = sp.omega(k) * sp.omega(k);
    const double y = 1.0 / g;
    const double w = g * g;
    sw += w;
    sx += w * x;
    sy += w * y;
    sxx += w * x * x;
    sxy += w * x * y;
  }
  const double det = sw * sxx - sx * sx;
  if (!(det > 0.0)) throw Error(ErrorCode::insufficient_data, "degenerate Lorentzian fit band");
  const double slope = (sw * sxy - sx * sy) / det;
  const double intercept = (sy - slope * sx) / sw;
  if (!(slope > 0.0) || !(intercept > 0.0)) throw Error(ErrorCode::data_error, "spectrum is not Lorentzian");
  const double amplitude = 1.0 / slope;
  LorentzianFit fit;
  fit.bandwidth = std::sqrt(intercept / slope);
  fit.variance = amplitude / (4.0 * fit.bandwidth);
  return fit;
}

// ---------------------------------------------------------------------------
// Sample statistics

struct SampleMoments {
  double mean = 0.0;
  double variance = 0.0;  // population (1/N) second central moment
  double excess_kurtosis = 0.0;
};

inline SampleMoments moments(std::span<const double> x) {
  SampleMoments m;
  if (x.empty()) return m;
  const double n = static_cast<double>(x.size());
  m.mean = std::accumulate(x.begin(), x.end(), 0.0) / n;
  double m2 = 0.0, m4 = 0.0;
  for (double v : x) {
    const double d = (v - m.mean) * (v - m.mean);
    m2 += d;
    m4 += d * d;
  }
  m2 /= n;
  m4 /= n;
  m.variance = m2;
  m.excess_kurtosis = m2 > 0.0 ? m4 / (m2 * m2) - 3.0 : 0.0;
  return m;
}

/// Normalized autocorrelation at an integer lag.
inline double autocorrelation(std::span<const double> x, std::size_t lag) {
  const auto m = moments(x);
  if (lag >= x.size() || m.variance == 0.0) return 0.0;
  double acc = 0.0;
  for (std::size_t i = 0; i + lag < x.size(); ++i) acc += (x[i] - m.mean) * (x[i + lag] - m.mean);
  return acc / (static_cast<double>(x.size() - lag) * m.variance);
}

/// Partial autocorrelation at lag 2 (Durbin-Levinson); zero for AR(1).
inline double partial_autocorrelation_lag2(std::span<const double> x) {
  const double r1 = autocorrelation(x, 1);
  const double r2 = autocorrelation(x, 2);
  return (r2 - r1 * r1) / (1.0 - r1 * r1);
}

/// e-folding time from the autocorrelation at the lag nearest `probe` seconds.
inline double correlation_time(std::span<const double> x, double dt, double probe) {
  const auto lag = std::max<std::size_t>(1, static_cast<std::size_t>(std::llround(probe / dt)));
  const double r = autocorrelation(x, lag);
  if (!(r > 0.0)) throw Error(ErrorCode::data_error, "autocorrelation not positive at probe lag");
  return -static_cast<double>(lag) * dt / std::log(r);
}

/// Warn when the noise bandwidth is not well below the Larmor frequency.
inline bool bandwidth_warning(const NoiseConfig& c, double omega_l) { return c.bandwidth >= 0.2 * omega_l; }

/// CSV export: header `t_s,k_tesla`, 12 significant digits.
inline void write_trace_csv(std::ostream& os, const NoiseTrace& trace, std::size_t max_rows = 0) {
  os << "t_s,k_tesla\n";
  const std::size_t rows = max_rows == 0 ? trace.samples.size() : std::min(max_rows, trace.samples.size());
  os << std::setprecision(12);
  for (std::size_t i = 0; i < rows; ++i) {
    os << trace.dt() * static_cast<double>(i) << ',' << trace.samples[i] << '\n';
  }
}

}  // namespace berry
