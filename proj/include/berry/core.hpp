#pragma once

// Shared vocabulary: 3-vectors, physical constants, unit helpers and the
// error type used across the library.

#include <array>
#include <cmath>
#include <numbers>
#include <stdexcept>
#include <string>

namespace berry {

enum class ErrorCode {
  invalid_input,
  invalid_configuration,
  singular_configuration,
  step_underflow,
  out_of_range,
  insufficient_data,
  undefined_phase,
  division_by_zero,
  data_error,
  io_error,
};

inline const char* to_string(ErrorCode code) {
  switch (code) {
    case ErrorCode::invalid_input: return "invalid-input";
    case ErrorCode::invalid_configuration: return "invalid-configuration";
    case ErrorCode::singular_configuration: return "singular-configuration";
    case ErrorCode::step_underflow: return "step-underflow";
    case ErrorCode::out_of_range: return "out-of-range";
    case ErrorCode::insufficient_data: return "insufficient-data";
    case ErrorCode::undefined_phase: return "undefined-phase";
    case ErrorCode::division_by_zero: return "division-by-zero";
    case ErrorCode::data_error: return "data-error";
    case ErrorCode::io_error: return "io-error";
  }
  return "unknown";
}

class Error : public std::runtime_error {
 public:
  Error(ErrorCode code, const std::string& what)
      : std::runtime_error(std::string(to_string(code)) + ": " + what), code_(code) {}
  ErrorCode code() const noexcept { return code_; }

 private:
  ErrorCode code_;
};

inline constexpr double pi = std::numbers::pi;
inline constexpr double two_pi = 2.0 * std::numbers::pi;

// Unit helpers. Everything inside the library is SI.
inline constexpr double microtesla = 1e-6;
inline constexpr double millisecond = 1e-3;
inline constexpr double degree = std::numbers::pi / 180.0;

struct Vec3 {
  double x = 0.0;
  double y = 0.0;
  double z = 0.0;

  constexpr Vec3 operator+(const Vec3& o) const { return {x + o.x, y + o.y, z + o.z}; }
  constexpr Vec3 operator-(const Vec3& o) const { return {x - o.x, y - o.y, z - o.z}; }
  constexpr Vec3 operator-() const { return {-x, -y, -z}; }
  constexpr Vec3 operator*(double s) const { return {x * s, y * s, z * s}; }
  constexpr Vec3 operator/(double s) const { return {x / s, y / s, z / s}; }
  Vec3& operator+=(const Vec3& o) {
    x += o.x;
    y += o.y;
    z += o.z;
    return *this;
  }
  constexpr bool operator==(const Vec3&) const = default;
};

inline constexpr Vec3 operator*(double s, const Vec3& v) { return v * s; }
inline constexpr double dot(const Vec3& a, const Vec3& b) {
  return a.x * b.x + a.y * b.y + a.z * b.z;
}
inline constexpr Vec3 cross(const Vec3& a, const Vec3& b) {
  return {a.y * b.z - a.z * b.y, a.z * b.x - a.x * b.z, a.x * b.y - a.y * b.x};
}
inline double norm(const Vec3& v) { return std::sqrt(dot(v, v)); }
inline Vec3 normalized(const Vec3& v) { return v / norm(v); }
inline bool is_finite(const Vec3& v) {
  return std::isfinite(v.x) && std::isfinite(v.y) && std::isfinite(v.z);
}

/// Magnetic flux density in the lab frame, tesla.
using FieldVector = Vec3;

/// Neutron moment and hbar. The gyromagnetic ratio is always derived.
struct PhysicalConstants {
  double mu = -9.66e-27;       // J/T, signed
  double hbar = 1.054571e-34;  // J s

  constexpr double gamma() const { return 2.0 * mu / hbar; }
};

/// Wrap an angle to (-pi, pi].
inline double wrap_angle(double a) {
  double w = std::remainder(a, two_pi);
  if (w <= -pi) w += two_pi;
  return w;
}

}  // namespace berry
