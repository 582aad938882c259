#pragma once

// Line-oriented `key value [unit]` files for sequences and run settings.
//
//   # comment
//   [section]
//   key value unit
//
// Units: uT, ms, rad, deg, rad/s. Lists are comma separated with one
// trailing unit ("T_grid 35, 50, 75 ms"). A unit may be glued to the
// number ("200ms"). Values are stored in SI units.

#include <algorithm>
#include <charconv>
#include <cmath>
#include <cstdint>
#include <map>
#include <optional>
#include <set>
#include <sstream>
#include <string>
#include <string_view>
#include <vector>

#include "berry/core.hpp"
#include "berry/ensemble.hpp"
#include "berry/noise.hpp"
#include "berry/protocol.hpp"
#include "berry/waveform.hpp"

namespace berry {

enum class DiagCode {
  syntax,
  unknown_section,
  unknown_directive,
  unit_mismatch,
  bad_number,
  missing_directive,
  duplicate_directive,
  negative_duration,
  negative_amplitude,
  non_cyclic,
  invalid_value,
  empty_sequence,
};

inline const char* to_string(DiagCode c) {
  switch (c) {
    case DiagCode::syntax: return "E_SYNTAX";
    case DiagCode::unknown_section: return "E_UNKNOWN_SECTION";
    case DiagCode::unknown_directive: return "E_UNKNOWN_DIRECTIVE";
    case DiagCode::unit_mismatch: return "E_UNIT_MISMATCH";
    case DiagCode::bad_number: return "E_BAD_NUMBER";
    case DiagCode::missing_directive: return "E_MISSING_DIRECTIVE";
    case DiagCode::duplicate_directive: return "E_DUPLICATE_DIRECTIVE";
    case DiagCode::negative_duration: return "E_NEGATIVE_DURATION";
    case DiagCode::negative_amplitude: return "E_NEGATIVE_AMPLITUDE";
    case DiagCode::non_cyclic: return "E_NON_CYCLIC";
    case DiagCode::invalid_value: return "E_INVALID_VALUE";
    case DiagCode::empty_sequence: return "E_EMPTY_SEQUENCE";
  }
  return "E_SYNTAX";
}

struct Diagnostic {
  DiagCode code = DiagCode::syntax;
  int line = 0;    // 1-based, 0 when not tied to a line
  int column = 0;  // 1-based
  std::string message;

  std::string str() const {
    std::string out;
    if (line > 0) out += std::to_string(line) + ":" + std::to_string(column) + ": ";
    return out + to_string(code) + ": " + message;
  }
};

class ParseError : public Error {
 public:
  explicit ParseError(Diagnostic d) : Error(ErrorCode::invalid_input, d.str()), diag_(std::move(d)) {}
  const Diagnostic& diagnostic() const { return diag_; }

 private:
  Diagnostic diag_;
};

// ---------------------------------------------------------------------------
// Document

struct Token {
  std::string text;
  int column = 0;
};

struct Directive {
  std::string key;
  std::vector<Token> args;
  int line = 0;
  int column = 0;
};

struct Section {
  std::string name;
  int line = 0;
  int column = 0;
  std::vector<Directive> directives;
};

struct Document {
  std::vector<Section> sections;
};

namespace detail {

inline bool is_ident_start(char c) { return std::isalpha(static_cast<unsigned char>(c)) || c == '_'; }
inline bool is_ident(char c) { return std::isalnum(static_cast<unsigned char>(c)) || c == '_'; }

[[noreturn]] inline void fail(DiagCode code, int line, int column, std::string msg) {
  throw ParseError({code, line, column, std::move(msg)});
}

}  // namespace detail

inline Document parse_document(std::string_view text) {
  Document doc;
  int line_no = 0;
  std::size_t pos = 0;
  while (pos <= text.size()) {
    const std::size_t end = std::min(text.find('\n', pos), text.size());
    std::string_view line = text.substr(pos, end - pos);
    pos = end + 1;
    ++line_no;
    if (!line.empty() && line.back() == '\r') line.remove_suffix(1);
    if (const auto hash = line.find('#'); hash != std::string_view::npos) line = line.substr(0, hash);
    for (std::size_t i = 0; i < line.size(); ++i) {
      const auto c = static_cast<unsigned char>(line[i]);
      if (c < 0x20 && c != '\t') {
        detail::fail(DiagCode::syntax, line_no, static_cast<int>(i) + 1, "control character in input");
      }
    }

    std::vector<Token> tokens;
    for (std::size_t i = 0; i < line.size();) {
      if (line[i] == ' ' || line[i] == '\t') {
        ++i;
        continue;
      }
      const std::size_t start = i;
      while (i < line.size() && line[i] != ' ' && line[i] != '\t') ++i;
      tokens.push_back({std::string(line.substr(start, i - start)), static_cast<int>(start) + 1});
    }
    if (tokens.empty()) continue;

    const Token& head = tokens.front();
    if (head.text.front() == '[') {
      if (tokens.size() != 1 || head.text.size() < 3 || head.text.back() != ']') {
        detail::fail(DiagCode::syntax, line_no, head.column, "malformed section header");
      }
      const std::string name = head.text.substr(1, head.text.size() - 2);
      if (!detail::is_ident_start(name.front()) || !std::all_of(name.begin(), name.end(), detail::is_ident)) {
        detail::fail(DiagCode::syntax, line_no, head.column, "malformed section name '" + name + "'");
      }
      doc.sections.push_back({name, line_no, head.column, {}});
      continue;
    }
    if (!detail::is_ident_start(head.text.front()) ||
        !std::all_of(head.text.begin(), head.text.end(), [](char c) { return detail::is_ident(c); })) {
      detail::fail(DiagCode::syntax, line_no, head.column, "malformed directive name '" + head.text + "'");
    }
    if (doc.sections.empty()) {
      detail::fail(DiagCode::syntax, line_no, head.column, "directive outside any section");
    }
    if (tokens.size() < 2) detail::fail(DiagCode::syntax, line_no, head.column, "directive '" + head.text + "' has no value");
    doc.sections.back().directives.push_back(
        {head.text, std::vector<Token>(tokens.begin() + 1, tokens.end()), line_no, head.column});
  }
  return doc;
}

// ---------------------------------------------------------------------------
// Values

enum class Dim { none, field, time, angle, rate };

namespace detail {

struct UnitInfo {
  std::string_view name;
  Dim dim;
  double scale;  // SI value = number * scale
};

inline constexpr UnitInfo units[] = {
    {"uT", Dim::field, microtesla},
    {"ms", Dim::time, millisecond},
    {"rad", Dim::angle, 1.0},
    {"deg", Dim::angle, degree},
    {"rad/s", Dim::rate, 1.0},
};

inline const UnitInfo* find_unit(std::string_view s) {
  for (const auto& u : units) {
    if (u.name == s) return &u;
  }
  return nullptr;
}

inline const char* dim_name(Dim d) {
  switch (d) {
    case Dim::none: return "no unit";
    case Dim::field: return "a field unit (uT)";
    case Dim::time: return "a time unit (ms)";
    case Dim::angle: return "an angle unit (rad or deg)";
    case Dim::rate: return "a rate unit (rad/s)";
  }
  return "no unit";
}

inline std::optional<double> to_number(std::string_view s) {
  if (s.empty()) return std::nullopt;
  if (s.front() == '+') s.remove_prefix(1);
  double v = 0.0;
  const auto [ptr, ec] = std::from_chars(s.data(), s.data() + s.size(), v);
  if (ec != std::errc() || ptr != s.data() + s.size() || !std::isfinite(v)) return std::nullopt;
  return v;
}

// Split "200ms" into ("200", "ms") when the tail is a known unit.
inline std::pair<std::string, std::string> split_glued(const std::string& s) {
  for (const auto& u : units) {
    if (s.size() > u.name.size() && s.compare(s.size() - u.name.size(), u.name.size(), u.name) == 0) {
      const std::string head = s.substr(0, s.size() - u.name.size());
      if (to_number(head)) return {head, std::string(u.name)};
    }
  }
  return {s, ""};
}

}  // namespace detail

/// Numbers and an optional unit from a directive's arguments.
struct RawValue {
  std::vector<std::pair<double, int>> numbers;  // value, column
  std::string unit;
  int unit_column = 0;
};

inline RawValue read_numbers(const Directive& d) {
  RawValue out;
  // split comma separators and glued units ("200ms") into plain tokens
  std::vector<Token> flat;
  auto push = [&](const std::string& text, int column) {
    if (!detail::to_number(text)) {
      const auto [num, unit] = detail::split_glued(text);
      if (!unit.empty()) {
        flat.push_back({num, column});
        flat.push_back({unit, column + static_cast<int>(num.size())});
        return;
      }
    }
    flat.push_back({text, column});
  };
  for (const auto& t : d.args) {
    std::size_t start = 0;
    for (std::size_t i = 0; i <= t.text.size(); ++i) {
      if (i == t.text.size() || t.text[i] == ',') {
        if (i > start) push(t.text.substr(start, i - start), t.column + static_cast<int>(start));
        if (i < t.text.size()) flat.push_back({",", t.column + static_cast<int>(i)});
        start = i + 1;
      }
    }
  }
  bool expect_number = true;
  for (std::size_t k = 0; k < flat.size(); ++k) {
    const auto& t = flat[k];
    if (t.text == ",") {
      if (expect_number) detail::fail(DiagCode::syntax, d.line, t.column, "unexpected ','");
      expect_number = true;
      continue;
    }
    if (const auto v = detail::to_number(t.text)) {
      if (!expect_number) detail::fail(DiagCode::syntax, d.line, t.column, "missing ',' between list items");
      out.numbers.emplace_back(*v, t.column);
      expect_number = false;
      continue;
    }
    // a unit: after a number, and the same unit everywhere
    const bool unit_like = detail::find_unit(t.text) != nullptr || k + 1 == flat.size();
    if (expect_number || !unit_like) {
      detail::fail(DiagCode::bad_number, d.line, t.column, "'" + t.text + "' is not a finite number");
    }
    if (!out.unit.empty() && out.unit != t.text) {
      detail::fail(DiagCode::unit_mismatch, d.line, t.column, "mixed units in one list");
    }
    out.unit = t.text;
    out.unit_column = t.column;
  }
  if (out.numbers.empty()) {
    const int col = d.args.empty() ? d.column : d.args.front().column;
    detail::fail(DiagCode::bad_number, d.line, col, "directive '" + d.key + "' needs a numeric value");
  }
  if (expect_number) detail::fail(DiagCode::syntax, d.line, d.args.back().column, "trailing ','");
  return out;
}

/// Typed access to one section with duplicate and unknown-key checks.
class SectionReader {
 public:
  SectionReader(const Section& s, const std::vector<std::string_view>& allowed) : section_(s) {
    std::set<std::string> seen;
    for (const auto& d : s.directives) {
      if (std::find(allowed.begin(), allowed.end(), d.key) == allowed.end()) {
        detail::fail(DiagCode::unknown_directive, d.line, d.column,
                     "unknown directive '" + d.key + "' in [" + s.name + "]");
      }
      if (!seen.insert(d.key).second) {
        detail::fail(DiagCode::duplicate_directive, d.line, d.column, "directive '" + d.key + "' repeated");
      }
    }
  }

  const Section& section() const { return section_; }

  const Directive* find(std::string_view key) const {
    for (const auto& d : section_.directives) {
      if (d.key == key) return &d;
    }
    return nullptr;
  }
  bool has(std::string_view key) const { return find(key) != nullptr; }

  [[noreturn]] void missing(std::string_view key) const {
    detail::fail(DiagCode::missing_directive, section_.line, section_.column,
                 "[" + section_.name + "] needs '" + std::string(key) + "'");
  }

  std::optional<std::vector<double>> list(std::string_view key, Dim dim) const {
    const Directive* d = find(key);
    if (d == nullptr) return std::nullopt;
    const RawValue raw = read_numbers(*d);
    double scale = 1.0;
    if (raw.unit.empty()) {
      if (dim != Dim::none) {
        detail::fail(DiagCode::unit_mismatch, d->line, d->column, "'" + d->key + "' expects " + detail::dim_name(dim));
      }
    } else {
      const auto* u = detail::find_unit(raw.unit);
      if (u == nullptr || u->dim != dim) {
        detail::fail(DiagCode::unit_mismatch, d->line, raw.unit_column,
                     "'" + raw.unit + "' is not valid for '" + d->key + "', expected " + detail::dim_name(dim));
      }
      scale = u->scale;
    }
    std::vector<double> out;
    for (const auto& [v, col] : raw.numbers) out.push_back(v * scale);
    return out;
  }

  std::optional<double> number(std::string_view key, Dim dim) const {
    auto v = list(key, dim);
    if (!v) return std::nullopt;
    if (v->size() != 1) {
      const Directive* d = find(key);
      detail::fail(DiagCode::syntax, d->line, d->column, "'" + d->key + "' takes a single value");
    }
    return v->front();
  }

  double required(std::string_view key, Dim dim) const {
    auto v = number(key, dim);
    if (!v) missing(key);
    return *v;
  }

  std::optional<long long> integer(std::string_view key) const {
    auto v = number(key, Dim::none);
    if (!v) return std::nullopt;
    if (*v != std::floor(*v) || std::abs(*v) > 9.0e15) {
      const Directive* d = find(key);
      detail::fail(DiagCode::invalid_value, d->line, d->args.front().column, "'" + d->key + "' must be an integer");
    }
    return static_cast<long long>(*v);
  }

  std::optional<std::string> word(std::string_view key, std::initializer_list<std::string_view> choices) const {
    const Directive* d = find(key);
    if (d == nullptr) return std::nullopt;
    if (d->args.size() != 1) detail::fail(DiagCode::syntax, d->line, d->column, "'" + d->key + "' takes one word");
    const std::string& w = d->args.front().text;
    if (std::find(choices.begin(), choices.end(), w) == choices.end()) {
      std::string opts;
      for (auto c : choices) opts += (opts.empty() ? "" : "|") + std::string(c);
      detail::fail(DiagCode::invalid_value, d->line, d->args.front().column,
                   "'" + w + "' is not valid for '" + d->key + "' (" + opts + ")");
    }
    return w;
  }

  [[noreturn]] void invalid(std::string_view key, DiagCode code, const std::string& msg) const {
    const Directive* d = find(key);
    if (d == nullptr) detail::fail(code, section_.line, section_.column, msg);
    detail::fail(code, d->line, d->args.empty() ? d->column : d->args.front().column, msg);
  }

 private:
  const Section& section_;
};

// ---------------------------------------------------------------------------
// Number formatting

/// %.{digits}g of value*scale.
inline std::string format_number(double v, int digits = 9) {
  if (v == 0.0) return "0";
  char buf[64];
  std::snprintf(buf, sizeof buf, "%.*g", digits, v);
  return buf;
}

/// Shortest text that parses back to exactly `si` through `unit`.
inline std::string format_exact(double si, std::string_view unit) {
  const auto* u = detail::find_unit(unit);
  const double scale = u ? u->scale : 1.0;
  const double shown = si / scale;
  auto back = [&](double x) { return x * scale; };
  for (int digits = 9; digits <= 17; ++digits) {
    const std::string s = format_number(shown, digits);
    if (back(*detail::to_number(s)) == si) return s;
  }
  // walk neighbouring doubles of the displayed value
  double lo = shown;
  double hi = shown;
  for (int k = 0; k < 64; ++k) {
    lo = std::nextafter(lo, -INFINITY);
    hi = std::nextafter(hi, INFINITY);
    for (double x : {lo, hi}) {
      const std::string s = format_number(x, 17);
      if (back(*detail::to_number(s)) == si) return s;
    }
  }
  return format_number(shown, 17);
}

// ---------------------------------------------------------------------------
// Sequences

namespace detail {

inline bool is_segment_section(const std::string& n) { return n == "static" || n == "rf" || n == "cone"; }

inline double nonneg_duration(const SectionReader& r, std::string_view key, bool positive = false) {
  const double v = r.required(key, Dim::time);
  if (v < 0.0) r.invalid(key, DiagCode::negative_duration, "'" + std::string(key) + "' must not be negative");
  if (positive && v == 0.0) r.invalid(key, DiagCode::invalid_value, "'" + std::string(key) + "' must be positive");
  return v;
}

inline double read_theta(const SectionReader& r, std::optional<double> fallback) {
  const int given = r.has("theta") + r.has("solid_angle") + r.has("berry_phase");
  if (given > 1) r.invalid("theta", DiagCode::invalid_value, "give only one of theta, solid_angle, berry_phase");
  try {
    if (auto t = r.number("theta", Dim::angle)) {
      if (!(*t > 0.0) || *t > 0.5 * pi + 1e-12) throw Error(ErrorCode::invalid_configuration, "");
      return *t;
    }
    if (auto o = r.number("solid_angle", Dim::angle)) {
      if (!(*o > 0.0)) throw Error(ErrorCode::invalid_configuration, "");
      return theta_from_solid_angle(*o);
    }
    if (auto p = r.number("berry_phase", Dim::angle)) {
      if (!(*p < 0.0)) throw Error(ErrorCode::invalid_configuration, "");
      return theta_from_berry_phase(*p);
    }
  } catch (const ParseError&) {
    throw;
  } catch (const Error&) {
    const char* key = r.has("theta") ? "theta" : (r.has("solid_angle") ? "solid_angle" : "berry_phase");
    r.invalid(key, DiagCode::invalid_value, "cone angle must lie in (0, 90 deg]");
  }
  if (fallback) return *fallback;
  r.missing("theta");
}

inline const std::vector<std::string_view> echo_keys = {
    "guide",        "guide_x", "guide_y",     "guide_z",     "rf_amplitude", "theta",    "solid_angle",
    "berry_phase", "cycle_time", "direction", "mode",        "ramp",         "rf_phase"};

}  // namespace detail

/// Sequence as written: either an echo design or explicit segments.
struct SequenceSpec {
  std::optional<EchoDesign> design;
  EchoSequence sequence;
};

/// Defaults of an echo design given only partially.
inline EchoDesign default_design() {
  EchoDesign d;
  d.theta = theta_from_berry_phase(-2.56);
  return d;
}

inline SequenceSpec read_sequence(const Document& doc, const PhysicalConstants& constants = {},
                                  bool allow_default = false) {
  const Section* echo = nullptr;
  std::vector<const Section*> segments;
  for (const auto& s : doc.sections) {
    if (s.name == "echo") {
      if (echo != nullptr) detail::fail(DiagCode::syntax, s.line, s.column, "second [echo] section");
      echo = &s;
    } else if (detail::is_segment_section(s.name)) {
      segments.push_back(&s);
    }
  }

  if (segments.empty()) {
    if (echo == nullptr && !allow_default) {
      detail::fail(DiagCode::empty_sequence, 0, 0, "no [echo] design and no segments");
    }
    EchoDesign d = default_design();
    if (echo != nullptr) {
      const SectionReader r(*echo, detail::echo_keys);
      if (r.has("guide_x") || r.has("guide_y") || r.has("guide_z")) {
        detail::fail(DiagCode::empty_sequence, echo->line, echo->column,
                     "guide vector given but no segments follow");
      }
      if (auto g = r.number("guide", Dim::field)) {
        if (*g <= 0.0) r.invalid("guide", DiagCode::negative_amplitude, "guide magnitude must be positive");
        d.guide = *g;
      }
      if (auto a = r.number("rf_amplitude", Dim::field)) {
        if (*a <= 0.0) r.invalid("rf_amplitude", DiagCode::negative_amplitude, "rf amplitude must be positive");
        d.rf_amplitude = *a;
      }
      d.theta = detail::read_theta(r, d.theta);
      if (r.has("cycle_time")) d.cycle_time = detail::nonneg_duration(r, "cycle_time", true);
      if (r.has("ramp")) d.ramp_time = detail::nonneg_duration(r, "ramp");
      if (auto dir = r.integer("direction")) {
        if (*dir != 1 && *dir != -1) r.invalid("direction", DiagCode::invalid_value, "direction must be 1 or -1");
        d.first_direction = static_cast<int>(*dir);
      }
      if (auto m = r.word("mode", {"geometric", "dynamical"})) {
        d.mode = *m == "geometric" ? EchoMode::geometric : EchoMode::dynamical;
      }
      if (auto p = r.number("rf_phase", Dim::angle)) d.rf_phase = *p;
    }
    try {
      return {d, make_echo(d, constants)};
    } catch (const Error& e) {
      detail::fail(DiagCode::invalid_value, echo ? echo->line : 0, echo ? echo->column : 0, e.what());
    }
  }

  FieldVector guide{0.0, 0.0, -10.0 * microtesla};
  if (echo != nullptr) {
    const SectionReader r(*echo, {"guide", "guide_x", "guide_y", "guide_z"});
    if (r.has("guide") && (r.has("guide_x") || r.has("guide_y") || r.has("guide_z"))) {
      r.invalid("guide", DiagCode::invalid_value, "give either 'guide' or guide_x/guide_y/guide_z");
    }
    if (auto g = r.number("guide", Dim::field)) {
      if (*g <= 0.0) r.invalid("guide", DiagCode::negative_amplitude, "guide magnitude must be positive");
      guide = {0.0, 0.0, -*g};
    } else if (r.has("guide_x") || r.has("guide_y") || r.has("guide_z")) {
      guide = {r.number("guide_x", Dim::field).value_or(0.0), r.number("guide_y", Dim::field).value_or(0.0),
               r.number("guide_z", Dim::field).value_or(0.0)};
    }
  }

  std::vector<Segment> segs;
  for (const Section* s : segments) {
    if (s->name == "static") {
      const SectionReader r(*s, {"field_x", "field_y", "field_z", "duration"});
      StaticSegment seg{guide, detail::nonneg_duration(r, "duration")};
      if (auto v = r.number("field_x", Dim::field)) seg.field.x = *v;
      if (auto v = r.number("field_y", Dim::field)) seg.field.y = *v;
      if (auto v = r.number("field_z", Dim::field)) seg.field.z = *v;
      segs.emplace_back(seg);
    } else if (s->name == "rf") {
      const SectionReader r(*s, {"axis", "amplitude", "carrier", "phase", "duration", "rotation"});
      RfPulseSegment p;
      p.axis = r.word("axis", {"x", "y"}).value_or("x") == "x" ? Axis::x : Axis::y;
      p.amplitude = r.required("amplitude", Dim::field);
      if (p.amplitude < 0.0) r.invalid("amplitude", DiagCode::negative_amplitude, "rf amplitude must not be negative");
      const double g = std::abs(constants.gamma());
      p.carrier_frequency = r.number("carrier", Dim::rate).value_or(g * norm(guide));
      if (r.has("duration") && r.has("rotation")) {
        r.invalid("rotation", DiagCode::invalid_value, "give either 'duration' or 'rotation'");
      }
      if (auto rot = r.number("rotation", Dim::angle)) {
        if (*rot < 0.0) r.invalid("rotation", DiagCode::invalid_value, "rotation must not be negative");
        if (p.amplitude == 0.0) r.invalid("amplitude", DiagCode::invalid_value, "rotation needs a non-zero amplitude");
        p.duration = *rot / (0.5 * g * p.amplitude);
      } else {
        p.duration = detail::nonneg_duration(r, "duration");
      }
      if (auto ph = r.number("phase", Dim::angle)) {
        p.carrier_phase = *ph;
      } else if (p.amplitude > 0.0 && norm(guide) > 0.0) {
        p.carrier_phase = compensated_carrier_phase(norm(guide), p.amplitude, constants, p.axis);
      }
      segs.emplace_back(p);
    } else {
      const SectionReader r(*s, {"guide_bz", "offset_bx", "cycle_time", "direction", "cycles", "ramp"});
      ConicalSegment c;
      c.guide_bz = r.required("guide_bz", Dim::field);
      if (c.guide_bz == 0.0) r.invalid("guide_bz", DiagCode::invalid_value, "guide_bz must be non-zero");
      c.offset_bx = r.required("offset_bx", Dim::field);
      if (c.offset_bx < 0.0) r.invalid("offset_bx", DiagCode::negative_amplitude, "offset_bx must not be negative");
      c.cycle_time = detail::nonneg_duration(r, "cycle_time", true);
      c.ramp_time = r.has("ramp") ? detail::nonneg_duration(r, "ramp") : 0.0;
      const auto dir = r.integer("direction");
      if (!dir) r.missing("direction");
      if (*dir != 1 && *dir != -1) r.invalid("direction", DiagCode::invalid_value, "direction must be 1 or -1");
      c.direction = static_cast<int>(*dir);
      if (auto n = r.number("cycles", Dim::none)) {
        if (*n != std::floor(*n) || *n < 1.0 || *n > 1e6) {
          r.invalid("cycles", DiagCode::non_cyclic, "a cone must run a whole number (>= 1) of cycles");
        }
        c.cycles = static_cast<int>(*n);
      }
      segs.emplace_back(c);
    }
  }
  try {
    return {std::nullopt, EchoSequence(guide, std::move(segs))};
  } catch (const Error& e) {
    detail::fail(DiagCode::invalid_value, segments.front()->line, segments.front()->column, e.what());
  }
}

inline EchoSequence parse_sequence(std::string_view text, const PhysicalConstants& constants = {}) {
  const Document doc = parse_document(text);
  for (const auto& s : doc.sections) {
    if (s.name != "echo" && !detail::is_segment_section(s.name)) {
      detail::fail(DiagCode::unknown_section, s.line, s.column, "unknown section [" + s.name + "]");
    }
  }
  return read_sequence(doc, constants).sequence;
}

namespace detail {

struct Writer {
  std::ostringstream os;
  bool exact = false;

  void value(std::string_view key, double si, std::string_view unit) {
    os << key << ' ' << (exact ? format_exact(si, unit) : canonical(si, unit));
    if (!unit.empty()) os << ' ' << unit;
    os << '\n';
  }
  void word(std::string_view key, std::string_view w) { os << key << ' ' << w << '\n'; }
  static std::string canonical(double si, std::string_view unit) {
    const auto* u = find_unit(unit);
    return format_number(u ? si / u->scale : si, 9);
  }
};

inline void write_segments(Writer& w, const EchoSequence& seq) {
  w.os << "[echo]\n";
  w.value("guide_x", seq.guide().x, "uT");
  w.value("guide_y", seq.guide().y, "uT");
  w.value("guide_z", seq.guide().z, "uT");
  for (const auto& seg : seq.segments()) {
    w.os << '\n';
    if (const auto* s = std::get_if<StaticSegment>(&seg)) {
      w.os << "[static]\n";
      w.value("field_x", s->field.x, "uT");
      w.value("field_y", s->field.y, "uT");
      w.value("field_z", s->field.z, "uT");
      w.value("duration", s->duration, "ms");
    } else if (const auto* p = std::get_if<RfPulseSegment>(&seg)) {
      w.os << "[rf]\n";
      w.word("axis", p->axis == Axis::x ? "x" : "y");
      w.value("amplitude", p->amplitude, "uT");
      w.value("carrier", p->carrier_frequency, "rad/s");
      w.value("phase", p->carrier_phase, "rad");
      w.value("duration", p->duration, "ms");
    } else {
      const auto& c = std::get<ConicalSegment>(seg);
      w.os << "[cone]\n";
      w.value("guide_bz", c.guide_bz, "uT");
      w.value("offset_bx", c.offset_bx, "uT");
      w.value("cycle_time", c.cycle_time, "ms");
      w.word("direction", c.direction > 0 ? "1" : "-1");
      w.word("cycles", std::to_string(c.cycles));
      w.value("ramp", c.ramp_time, "ms");
    }
  }
}

inline void write_design(Writer& w, const EchoDesign& d) {
  w.os << "[echo]\n";
  w.value("guide", d.guide, "uT");
  w.value("rf_amplitude", d.rf_amplitude, "uT");
  w.value("theta", d.theta, "rad");
  w.value("cycle_time", d.cycle_time, "ms");
  w.word("direction", d.first_direction > 0 ? "1" : "-1");
  w.word("mode", to_string(d.mode));
  w.value("ramp", d.ramp_time, "ms");
  if (d.rf_phase) w.value("rf_phase", *d.rf_phase, "rad");
}

}  // namespace detail

/// Canonical form: fixed section and key order, 9 significant digits.
inline std::string serialize_sequence(const EchoSequence& seq) {
  detail::Writer w;
  detail::write_segments(w, seq);
  return w.os.str();
}

// ---------------------------------------------------------------------------
// Run settings (sequence + experiment + noise + ensemble + scans)

struct ScanSettings {
  double omega_min = 0.6;
  double omega_max = 5.5;
  int points = 10;
};

struct PsdSettings {
  std::size_t samples = 1000000;
  double sample_dt = 1e-3;
};

struct RunSettings {
  SequenceSpec sequence;
  ExperimentConfig experiment;  // experiment.sequence mirrors sequence.sequence
  NoiseConfig noise;
  bool noise_enabled = true;
  std::size_t realization = 0;  // used by `simulate`
  std::size_t realizations = 300;
  std::uint64_t seed = 1;
  std::vector<double> cycle_times{0.035, 0.05, 0.075, 0.1, 0.15, 0.2, 0.25};
  unsigned jobs = 0;
  std::size_t bootstrap = 1000;
  ScanSettings scan;
  PsdSettings psd;
  std::map<std::string, std::string> source;  // "section.key" -> file | override | default

  EnsembleConfig ensemble() const {
    EnsembleConfig e;
    e.experiment = experiment;
    e.realizations = realizations;
    e.base_seed = seed;
    e.cycle_times = cycle_times;
    e.jobs = jobs;
    e.bootstrap_resamples = bootstrap;
    return e;
  }
};

namespace detail {

inline const std::vector<std::string_view> experiment_keys = {
    "s0", "t2", "analysis", "shots", "dt_max", "max_angle", "noise_cutoff", "realization"};
inline const std::vector<std::string_view> noise_keys = {
    "enabled", "sigma", "bandwidth", "sample_dt", "ramp_fraction"};
inline const std::vector<std::string_view> ensemble_keys = {
    "realizations", "seed", "T_grid", "jobs", "bootstrap"};
inline const std::vector<std::string_view> scan_keys = {"omega_min", "omega_max", "points"};
inline const std::vector<std::string_view> psd_keys = {"samples", "sample_dt"};

inline std::uint64_t read_count(const SectionReader& r, std::string_view key, std::uint64_t fallback,
                                std::uint64_t min_value = 0) {
  const auto v = r.integer(key);
  if (!v) return fallback;
  if (*v < static_cast<long long>(min_value)) {
    r.invalid(key, DiagCode::invalid_value, "'" + std::string(key) + "' must be at least " + std::to_string(min_value));
  }
  return static_cast<std::uint64_t>(*v);
}

}  // namespace detail

/// Apply `section.key=value` overrides onto a document.
inline void apply_overrides(Document& doc, const std::vector<std::string>& overrides) {
  for (const auto& o : overrides) {
    const auto eq = o.find('=');
    const auto dot = o.find('.');
    if (eq == std::string::npos || dot == std::string::npos || dot > eq || dot == 0 || dot + 1 == eq) {
      detail::fail(DiagCode::syntax, 0, 0, "override '" + o + "' is not section.key=value");
    }
    const std::string section = o.substr(0, dot);
    const std::string key = o.substr(dot + 1, eq - dot - 1);
    const std::string value = o.substr(eq + 1);
    // reuse the line parser for the value tokens
    const Document one = parse_document("[" + section + "]\n" + key + " " + value + "\n");
    Directive d = one.sections.at(0).directives.at(0);
    d.line = 0;
    Section* target = nullptr;
    for (auto& s : doc.sections) {
      if (s.name == section) target = &s;
    }
    if (target == nullptr) {
      doc.sections.push_back({section, 0, 0, {}});
      target = &doc.sections.back();
    }
    auto it = std::find_if(target->directives.begin(), target->directives.end(),
                           [&](const Directive& x) { return x.key == key; });
    if (it != target->directives.end()) {
      *it = d;
    } else {
      target->directives.push_back(d);
    }
  }
}

/// Parse a run configuration (sequence sections plus [experiment], [noise],
/// [ensemble], [scan], [psd]) and apply overrides. Every setting ends up in
/// `source` with where its value came from.
inline RunSettings parse_config(std::string_view text, const std::vector<std::string>& overrides = {}) {
  Document doc = parse_document(text);
  std::set<std::string> from_file;
  for (const auto& s : doc.sections) {
    for (const auto& d : s.directives) from_file.insert(s.name + "." + d.key);
  }
  apply_overrides(doc, overrides);

  RunSettings rs;
  std::map<std::string, const Section*> named;
  for (const auto& s : doc.sections) {
    if (s.name == "echo" || detail::is_segment_section(s.name)) continue;
    if (s.name != "experiment" && s.name != "noise" && s.name != "ensemble" && s.name != "scan" && s.name != "psd") {
      detail::fail(DiagCode::unknown_section, s.line, s.column, "unknown section [" + s.name + "]");
    }
    if (named.count(s.name) != 0) detail::fail(DiagCode::syntax, s.line, s.column, "second [" + s.name + "] section");
    named[s.name] = &s;
  }
  const Section empty_section{};
  auto section = [&](const char* name) -> Section {
    auto it = named.find(name);
    if (it != named.end()) return *it->second;
    Section s = empty_section;
    s.name = name;
    return s;
  };

  const Section ex_s = section("experiment");
  const SectionReader ex(ex_s, detail::experiment_keys);
  auto& e = rs.experiment;
  if (auto v = ex.number("s0", Dim::none)) {
    if (*v < 0.0 || *v > 1.0) ex.invalid("s0", DiagCode::invalid_value, "s0 must lie in [0, 1]");
    e.initial_polarization = *v;
  }
  if (ex.has("t2")) e.t2 = detail::nonneg_duration(ex, "t2", true);
  if (auto a = ex.word("analysis", {"expectation", "sampled"})) {
    e.analysis = *a == "sampled" ? AnalysisMode::sampled : AnalysisMode::expectation;
  }
  e.shots = detail::read_count(ex, "shots", 0);
  if (e.analysis == AnalysisMode::sampled && e.shots == 0) {
    ex.invalid("shots", DiagCode::invalid_value, "sampled analysis needs shots > 0");
  }
  if (ex.has("dt_max")) e.dt_max = detail::nonneg_duration(ex, "dt_max", true);
  if (auto v = ex.number("max_angle", Dim::angle)) {
    if (!(*v > 0.0)) ex.invalid("max_angle", DiagCode::invalid_value, "max_angle must be positive");
    e.max_angle = *v;
  }
  if (auto v = ex.number("noise_cutoff", Dim::none)) {
    if (!(*v > 0.0)) ex.invalid("noise_cutoff", DiagCode::invalid_value, "noise_cutoff must be positive");
    e.noise_cutoff_fraction = *v;
  }
  rs.realization = detail::read_count(ex, "realization", 0);

  const Section no_s = section("noise");
  const SectionReader no(no_s, detail::noise_keys);
  if (auto v = no.word("enabled", {"yes", "no"})) rs.noise_enabled = *v == "yes";
  if (auto v = no.number("sigma", Dim::field)) {
    if (*v < 0.0) no.invalid("sigma", DiagCode::negative_amplitude, "noise sigma must not be negative");
    rs.noise.sigma_field = *v;
  }
  if (auto v = no.number("bandwidth", Dim::rate)) {
    if (!(*v > 0.0)) no.invalid("bandwidth", DiagCode::invalid_value, "bandwidth must be positive");
    rs.noise.bandwidth = *v;
  }
  if (no.has("sample_dt")) rs.noise.sample_dt = detail::nonneg_duration(no, "sample_dt", true);
  if (auto v = no.number("ramp_fraction", Dim::none)) rs.noise.ramp_fraction = *v;
  try {
    rs.noise.validate();
  } catch (const Error& err) {
    detail::fail(DiagCode::invalid_value, no_s.line, no_s.column, err.what());
  }

  const Section en_s = section("ensemble");
  const SectionReader en(en_s, detail::ensemble_keys);
  rs.realizations = detail::read_count(en, "realizations", rs.realizations, 2);
  rs.seed = detail::read_count(en, "seed", rs.seed);
  if (auto g = en.list("T_grid", Dim::time)) {
    for (double t : *g) {
      if (t < 0.0) en.invalid("T_grid", DiagCode::negative_duration, "T_grid entries must not be negative");
      if (t == 0.0) en.invalid("T_grid", DiagCode::invalid_value, "T_grid entries must be positive");
    }
    rs.cycle_times = *g;
  }
  rs.jobs = static_cast<unsigned>(detail::read_count(en, "jobs", 0));
  rs.bootstrap = detail::read_count(en, "bootstrap", rs.bootstrap);

  const Section sc_s = section("scan");
  const SectionReader sc(sc_s, detail::scan_keys);
  if (auto v = sc.number("omega_min", Dim::angle)) rs.scan.omega_min = *v;
  if (auto v = sc.number("omega_max", Dim::angle)) rs.scan.omega_max = *v;
  rs.scan.points = static_cast<int>(detail::read_count(sc, "points", rs.scan.points, 2));
  if (!(rs.scan.omega_min > 0.0 && rs.scan.omega_min < rs.scan.omega_max && rs.scan.omega_max <= two_pi)) {
    detail::fail(DiagCode::invalid_value, sc_s.line, sc_s.column, "scan needs 0 < omega_min < omega_max <= 2 pi");
  }

  const Section ps_s = section("psd");
  const SectionReader ps(ps_s, detail::psd_keys);
  rs.psd.samples = detail::read_count(ps, "samples", rs.psd.samples, min_psd_samples);
  if (ps.has("sample_dt")) rs.psd.sample_dt = detail::nonneg_duration(ps, "sample_dt", true);

  rs.sequence = read_sequence(doc, e.constants, true);
  e.sequence = rs.sequence.sequence;
  if (rs.noise_enabled) e.noise = rs.noise;

  // provenance
  auto mark = [&](const std::string& sec, const std::vector<std::string_view>& keys) {
    for (auto k : keys) {
      const std::string id = sec + "." + std::string(k);
      bool overridden = false;
      for (const auto& o : overrides) overridden |= o.rfind(id + "=", 0) == 0;
      rs.source[id] = overridden ? "override" : (from_file.count(id) ? "file" : "default");
    }
  };
  mark("experiment", detail::experiment_keys);
  mark("noise", detail::noise_keys);
  mark("ensemble", detail::ensemble_keys);
  mark("scan", detail::scan_keys);
  mark("psd", detail::psd_keys);
  if (rs.sequence.design) mark("echo", detail::echo_keys);
  return rs;
}

/// Complete configuration text that parses back to identical settings.
/// Each line carries the origin of its value as a trailing comment.
inline std::string write_resolved_config(const RunSettings& rs) {
  detail::Writer w;
  w.exact = true;
  auto origin = [&](const std::string& id) {
    auto it = rs.source.find(id);
    return it == rs.source.end() ? std::string("default") : it->second;
  };
  // append "# origin" to the last written line
  auto tag = [&](const std::string& id) {
    std::string s = w.os.str();
    if (!s.empty() && s.back() == '\n') s.pop_back();
    w.os.str("");
    w.os.clear();
    w.os << s << "  # " << origin(id) << '\n';
  };

  if (rs.sequence.design) {
    detail::write_design(w, *rs.sequence.design);
  } else {
    detail::write_segments(w, rs.sequence.sequence);
  }

  const auto& e = rs.experiment;
  w.os << "\n[experiment]\n";
  w.value("s0", e.initial_polarization, ""); tag("experiment.s0");
  w.value("t2", e.t2, "ms"); tag("experiment.t2");
  w.word("analysis", e.analysis == AnalysisMode::sampled ? "sampled" : "expectation"); tag("experiment.analysis");
  w.word("shots", std::to_string(e.shots)); tag("experiment.shots");
  w.value("dt_max", e.dt_max, "ms"); tag("experiment.dt_max");
  w.value("max_angle", e.max_angle, "rad"); tag("experiment.max_angle");
  w.value("noise_cutoff", e.noise_cutoff_fraction, ""); tag("experiment.noise_cutoff");
  w.word("realization", std::to_string(rs.realization)); tag("experiment.realization");

  w.os << "\n[noise]\n";
  w.word("enabled", rs.noise_enabled ? "yes" : "no"); tag("noise.enabled");
  w.value("sigma", rs.noise.sigma_field, "uT"); tag("noise.sigma");
  w.value("bandwidth", rs.noise.bandwidth, "rad/s"); tag("noise.bandwidth");
  w.value("sample_dt", rs.noise.sample_dt, "ms"); tag("noise.sample_dt");
  w.value("ramp_fraction", rs.noise.ramp_fraction, ""); tag("noise.ramp_fraction");

  w.os << "\n[ensemble]\n";
  w.word("realizations", std::to_string(rs.realizations)); tag("ensemble.realizations");
  w.word("seed", std::to_string(rs.seed)); tag("ensemble.seed");
  std::string grid;
  for (double t : rs.cycle_times) grid += (grid.empty() ? "" : ", ") + format_exact(t, "ms");
  w.os << "T_grid " << grid << " ms\n"; tag("ensemble.T_grid");
  w.word("jobs", std::to_string(rs.jobs)); tag("ensemble.jobs");
  w.word("bootstrap", std::to_string(rs.bootstrap)); tag("ensemble.bootstrap");

  w.os << "\n[scan]\n";
  w.value("omega_min", rs.scan.omega_min, "rad"); tag("scan.omega_min");
  w.value("omega_max", rs.scan.omega_max, "rad"); tag("scan.omega_max");
  w.word("points", std::to_string(rs.scan.points)); tag("scan.points");

  w.os << "\n[psd]\n";
  w.word("samples", std::to_string(rs.psd.samples)); tag("psd.samples");
  w.value("sample_dt", rs.psd.sample_dt, "ms"); tag("psd.sample_dt");
  return w.os.str();
}

}  // namespace berry
