#pragma once

// Monte Carlo over noise realizations on a grid of cycle times, with phase
// statistics, the polarization-ratio route to the variance, and comparison
// against the closed-form variance.

#include <algorithm>
#include <atomic>
#include <cmath>
#include <complex>
#include <cstdint>
#include <mutex>
#include <optional>
#include <ostream>
#include <span>
#include <string>
#include <thread>
#include <vector>

#include "berry/core.hpp"
#include "berry/noise.hpp"
#include "berry/oracle.hpp"
#include "berry/protocol.hpp"
#include "berry/rng.hpp"

namespace berry {

struct EnsembleConfig {
  ExperimentConfig experiment;  // its sequence is re-timed for every T
  std::size_t realizations = 300;
  std::uint64_t base_seed = 1;
  std::vector<double> cycle_times{0.035, 0.05, 0.075, 0.1, 0.15, 0.2, 0.25};
  unsigned jobs = 0;  // 0: hardware concurrency
  std::size_t bootstrap_resamples = 1000;

  void validate() const {
    if (realizations < 2) {
      throw Error(ErrorCode::invalid_configuration, "variance estimates need at least 2 realizations");
    }
    if (cycle_times.empty()) throw Error(ErrorCode::invalid_configuration, "empty T grid");
    for (double t : cycle_times) {
      if (!(t > 0.0) || !std::isfinite(t)) throw Error(ErrorCode::invalid_configuration, "T must be positive");
    }
    if (experiment.sequence.cone_indices().empty()) {
      throw Error(ErrorCode::invalid_configuration, "ensemble sequence has no conical segment");
    }
    experiment.validate();
  }
};

/// Noise seed of grid point `t_index`: every T gets its own independent set
/// of realizations.
inline std::uint64_t grid_seed(std::uint64_t base_seed, std::size_t t_index) {
  return mix_seed(base_seed, t_index);
}

struct PhaseStatistics {
  std::size_t n = 0;
  double mean = 0.0;
  double mean_se = 0.0;
  double variance = 0.0;
  double variance_se = 0.0;  // max of the analytic and bootstrap estimates
  double variance_se_analytic = 0.0;
  double variance_se_bootstrap = 0.0;
  double circular_variance = 0.0;
  bool wrap_suspect = false;
};

struct RealizationRecord {
  std::size_t realization = 0;
  double azimuth_shift = 0.0;
  double geometric_phase = 0.0;
  double dynamical_phase = 0.0;
  double s_final = 0.0;
  Vec3 bloch;
};

struct GridPoint {
  double cycle_time = 0.0;
  std::uint64_t seed = 0;
  PhaseStatistics stats;
  double noise_free_phase = 0.0;
  double noise_free_polarization = 0.0;
  double nu_rel = 0.0;            // measured polarization ratio
  double nu_rel_se = 0.0;
  double nu_rel_predicted = 0.0;  // exp(-8 sigma^2) from the phase variance
  double nu_rel_diff_se = 0.0;    // paired bootstrap SE of nu_rel - nu_rel_predicted
  double theory_variance = 0.0;
  std::vector<RealizationRecord> records;
};

struct EnsembleResult {
  std::vector<GridPoint> points;
};

// ---------------------------------------------------------------------------

namespace detail {

inline double mean_of(std::span<const double> x) {
  double s = 0.0;
  for (double v : x) s += v;
  return s / static_cast<double>(x.size());
}

inline double unbiased_variance(std::span<const double> x) {
  const double m = mean_of(x);
  double s = 0.0;
  for (double v : x) s += (v - m) * (v - m);
  return s / static_cast<double>(x.size() - 1);
}

inline double stddev_of(const std::vector<double>& x) {
  return x.size() < 2 ? 0.0 : std::sqrt(unbiased_variance(x));
}

}  // namespace detail

/// Mean, unbiased variance and their errors. The circular variance
/// -2 ln |<exp(i phi)>| is a cross-check against 2 pi contamination.
inline PhaseStatistics phase_statistics(std::span<const double> phases, std::uint64_t seed = 0,
                                        std::size_t resamples = 1000) {
  if (phases.size() < 2) throw Error(ErrorCode::insufficient_data, "phase statistics need N >= 2");
  for (double p : phases) {
    if (!std::isfinite(p)) throw Error(ErrorCode::data_error, "non-finite phase");
  }
  PhaseStatistics st;
  st.n = phases.size();
  const double n = static_cast<double>(st.n);
  st.mean = detail::mean_of(phases);
  st.variance = detail::unbiased_variance(phases);
  st.variance_se_analytic = st.variance * std::sqrt(2.0 / (n - 1.0));

  std::vector<double> boot_mean;
  std::vector<double> boot_var;
  if (resamples > 0) {
    PhiloxStream rng(mix_seed(seed, 0xB0075), 0);
    std::vector<double> sample(st.n);
    for (std::size_t r = 0; r < resamples; ++r) {
      for (auto& v : sample) v = phases[rng() % st.n];
      boot_mean.push_back(detail::mean_of(sample));
      boot_var.push_back(detail::unbiased_variance(sample));
    }
  }
  st.variance_se_bootstrap = detail::stddev_of(boot_var);
  st.variance_se = std::max(st.variance_se_analytic, st.variance_se_bootstrap);
  st.mean_se = std::max(std::sqrt(st.variance / n), detail::stddev_of(boot_mean));

  std::complex<double> z{};
  for (double p : phases) z += std::polar(1.0, p);
  const double r = std::abs(z) / n;
  st.circular_variance = r > 0.0 ? -2.0 * std::log(r) : std::numeric_limits<double>::infinity();
  st.wrap_suspect = std::abs(st.circular_variance - st.variance) > 3.0 * st.variance_se + 1e-12;
  return st;
}

/// Ratio of degrees of polarization with and without noise.
inline double nu_rel(double with_noise, double noise_free) {
  if (noise_free == 0.0) throw Error(ErrorCode::division_by_zero, "noise-free polarization is zero");
  return with_noise / noise_free;
}

inline double variance_from_nu_rel(double nu) {
  if (!(nu > 0.0)) throw Error(ErrorCode::invalid_input, "nu_rel must be positive");
  return oracle::variance_from_dephasing(nu);
}

/// Closed-form variance for a sequence and noise model at cycle time T.
inline double theory_variance(const ExperimentConfig& cfg, double cycle_time) {
  if (!cfg.noise) return 0.0;
  const auto& cone = cfg.sequence.cone(0);
  oracle::TheoryParams p;
  p.theta = cone.theta();
  p.omega_l = oracle::larmor_frequency(cone.magnitude(), cfg.constants);
  p.gamma_noise = cfg.noise->bandwidth;
  const double s = oracle::sigma_omega_from_field(cfg.noise->sigma_field, cfg.constants);
  p.sigma_p_omega2 = s * s;
  p.T = cycle_time;
  return oracle::variance_theory(p);
}

// ---------------------------------------------------------------------------

namespace detail {

// Measured and predicted nu_rel with paired bootstrap errors.
inline void polarization_ratio(GridPoint& g, std::size_t resamples, std::uint64_t seed) {
  const std::size_t n = g.records.size();
  auto ratio = [&](auto&& index) {
    Vec3 sum{};
    std::vector<double> phases(n);
    for (std::size_t k = 0; k < n; ++k) {
      const auto& rec = g.records[index(k)];
      sum = sum + rec.bloch;
      phases[k] = rec.geometric_phase;
    }
    const double measured = nu_rel(norm(sum) / static_cast<double>(n), g.noise_free_polarization);
    const double predicted = oracle::dephasing_factor(unbiased_variance(phases));
    return std::pair{measured, predicted};
  };
  const auto [measured, predicted] = ratio([](std::size_t k) { return k; });
  g.nu_rel = measured;
  g.nu_rel_predicted = predicted;

  std::vector<double> m;
  std::vector<double> d;
  PhiloxStream rng(mix_seed(seed, 0xB0076), 0);
  std::vector<std::size_t> idx(n);
  for (std::size_t r = 0; r < resamples; ++r) {
    for (auto& i : idx) i = rng() % n;
    const auto [bm, bp] = ratio([&](std::size_t k) { return idx[k]; });
    m.push_back(bm);
    d.push_back(bm - bp);
  }
  g.nu_rel_se = stddev_of(m);
  g.nu_rel_diff_se = stddev_of(d);
}

}  // namespace detail

/// Run every (T, realization) task on `jobs` workers. Results are stored by
/// index, so they do not depend on the number of workers.
inline EnsembleResult run_ensemble(const EnsembleConfig& config) {
  config.validate();
  const auto& base = config.experiment;
  const std::size_t nt = config.cycle_times.size();
  const std::size_t nr = config.realizations;

  EnsembleResult out;
  out.points.resize(nt);
  std::vector<ExperimentConfig> per_t(nt, base);
  std::vector<ReferenceRun> refs(nt);
  for (std::size_t j = 0; j < nt; ++j) {
    auto& g = out.points[j];
    g.cycle_time = config.cycle_times[j];
    g.seed = grid_seed(config.base_seed, j);
    per_t[j].sequence = with_cycle_time(base.sequence, g.cycle_time);
    if (per_t[j].noise) per_t[j].noise->seed = g.seed;
    refs[j] = simulate_reference(per_t[j]);
    ExperimentConfig clean = per_t[j];
    clean.noise.reset();
    clean.analysis = AnalysisMode::expectation;
    const auto nf = run(clean, nullptr, &refs[j]);
    g.noise_free_phase = nf.geometric_phase;
    g.noise_free_polarization = nf.raw_polarization;
    g.theory_variance = theory_variance(per_t[j], g.cycle_time);
    g.records.resize(nr);
  }

  const std::size_t tasks = nt * nr;
  std::atomic<std::size_t> next{0};
  std::mutex error_mutex;
  std::size_t error_task = tasks;
  std::optional<Error> error;

  auto worker = [&] {
    for (;;) {
      const std::size_t task = next.fetch_add(1);
      if (task >= tasks) return;
      const std::size_t j = task / nr;
      const std::size_t i = task % nr;
      try {
        const auto& cfg = per_t[j];
        std::optional<NoiseTrace> trace;
        if (cfg.noise) {
          trace = prepare_noise(generate(*cfg.noise, noise_duration(cfg.sequence), i),
                                cfg.noise_cutoff_fraction * cfg.omega_l());
        }
        const auto r = run(cfg, trace ? &*trace : nullptr, &refs[j], i);
        out.points[j].records[i] = {i, r.azimuth_shift, r.geometric_phase, r.dynamical_phase, r.s_final,
                                    r.measured_bloch};
      } catch (const Error& e) {
        std::lock_guard lock(error_mutex);
        if (task < error_task) {
          error_task = task;
          error.emplace(e.code(), "T = " + std::to_string(config.cycle_times[j] * 1e3) + " ms, realization " +
                                      std::to_string(i) + ": " + e.what());
        }
        next.store(tasks);
      }
    }
  };

  unsigned jobs = config.jobs != 0 ? config.jobs : std::max(1u, std::thread::hardware_concurrency());
  jobs = static_cast<unsigned>(std::min<std::size_t>(jobs, tasks));
  if (jobs <= 1) {
    worker();
  } else {
    std::vector<std::jthread> pool;
    for (unsigned w = 0; w < jobs; ++w) pool.emplace_back(worker);
  }
  if (error) throw *error;

  for (auto& g : out.points) {
    std::vector<double> phases;
    phases.reserve(nr);
    for (const auto& rec : g.records) phases.push_back(rec.geometric_phase);
    g.stats = phase_statistics(phases, g.seed, config.bootstrap_resamples);
    detail::polarization_ratio(g, config.bootstrap_resamples, g.seed);
  }
  return out;
}

// ---------------------------------------------------------------------------

struct TheoryComparison {
  std::vector<double> z;
  double chi2 = 0.0;
  std::size_t dof = 0;
  double chi2_per_dof() const { return dof == 0 ? 0.0 : chi2 / static_cast<double>(dof); }
  double max_abs_z() const {
    double m = 0.0;
    for (double v : z) m = std::max(m, std::abs(v));
    return m;
  }
};

/// Per-T z-scores (var - theory) / SE and the global chi-square.
inline TheoryComparison compare_to_theory(std::span<const PhaseStatistics> stats, std::span<const double> grid,
                                          std::span<const double> theory_grid,
                                          std::span<const double> theory_variance) {
  if (stats.size() != grid.size() || theory_grid.size() != theory_variance.size() ||
      grid.size() != theory_grid.size()) {
    throw Error(ErrorCode::invalid_configuration, "T grids do not match");
  }
  TheoryComparison c;
  for (std::size_t j = 0; j < grid.size(); ++j) {
    if (std::abs(grid[j] - theory_grid[j]) > 1e-12 * std::max(1.0, std::abs(grid[j]))) {
      throw Error(ErrorCode::invalid_configuration, "T grids do not match");
    }
    const double se = stats[j].variance_se;
    const double diff = stats[j].variance - theory_variance[j];
    const double z = se > 0.0 ? diff / se : (diff == 0.0 ? 0.0 : std::copysign(INFINITY, diff));
    c.z.push_back(z);
    c.chi2 += z * z;
  }
  c.dof = grid.size();
  return c;
}

inline TheoryComparison compare_to_theory(const EnsembleResult& r) {
  std::vector<PhaseStatistics> st;
  std::vector<double> grid;
  std::vector<double> th;
  for (const auto& g : r.points) {
    st.push_back(g.stats);
    grid.push_back(g.cycle_time);
    th.push_back(g.theory_variance);
  }
  return compare_to_theory(st, grid, grid, th);
}

/// Least-squares slope of log(variance) against log(T) over the points
/// whose Gamma*T lies in [lo, hi].
inline double loglog_slope(const EnsembleResult& r, double gamma, double lo = 10.0, double hi = 25.0) {
  std::vector<double> x;
  std::vector<double> y;
  for (const auto& g : r.points) {
    const double gt = gamma * g.cycle_time;
    if (gt >= lo - 1e-9 && gt <= hi + 1e-9 && g.stats.variance > 0.0) {
      x.push_back(std::log(g.cycle_time));
      y.push_back(std::log(g.stats.variance));
    }
  }
  if (x.size() < 2) throw Error(ErrorCode::insufficient_data, "need two grid points for a slope");
  const double mx = detail::mean_of(x);
  const double my = detail::mean_of(y);
  double sxy = 0.0;
  double sxx = 0.0;
  for (std::size_t k = 0; k < x.size(); ++k) {
    sxy += (x[k] - mx) * (y[k] - my);
    sxx += (x[k] - mx) * (x[k] - mx);
  }
  return sxy / sxx;
}

// ---------------------------------------------------------------------------
// Export

inline void write_ensemble_csv(std::ostream& os, const EnsembleResult& r) {
  const auto cmp = compare_to_theory(r);
  os << "T_ms,N,var_rad2,var_se,mean_rad,mean_se,nu_rel,nu_rel_se,theory_var_rad2,z\n";
  char line[512];
  for (std::size_t j = 0; j < r.points.size(); ++j) {
    const auto& g = r.points[j];
    std::snprintf(line, sizeof line, "%.6g,%zu,%.9g,%.9g,%.9g,%.9g,%.9g,%.9g,%.9g,%.6g\n", g.cycle_time * 1e3,
                  g.stats.n, g.stats.variance, g.stats.variance_se, g.stats.mean, g.stats.mean_se, g.nu_rel,
                  g.nu_rel_se, g.theory_variance, cmp.z[j]);
    os << line;
  }
}

inline void write_runs_header(std::ostream& os) {
  os << "mode,theta_rad,T_ms,seed,realization,azimuth_rad,phi_g_rad,phi_d_rad,s_final\n";
}

inline void write_run_row(std::ostream& os, EchoMode mode, double theta, double cycle_time, std::uint64_t seed,
                          std::size_t realization, const RealizationRecord& rec) {
  char line[512];
  std::snprintf(line, sizeof line, "%s,%.9g,%.6g,%llu,%zu,%.12g,%.12g,%.12g,%.9g\n", to_string(mode), theta,
                cycle_time * 1e3, static_cast<unsigned long long>(seed), realization, rec.azimuth_shift,
                rec.geometric_phase, rec.dynamical_phase, rec.s_final);
  os << line;
}

}  // namespace berry
