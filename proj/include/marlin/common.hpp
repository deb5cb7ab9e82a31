#pragma once

#include <charconv>
#include <cmath>
#include <cstdint>
#include <stdexcept>
#include <string>
#include <string_view>

namespace marlin {

/// Simulation time, integer microseconds since simulation start.
using TimeUs = std::int64_t;

inline constexpr TimeUs kUsPerMs = 1000;
inline constexpr TimeUs kUsPerSec = 1'000'000;

/// Volumes and rates are expressed in decimal kilobytes.
inline constexpr double kBytesPerKB = 1000.0;

constexpr TimeUs from_ms(double v) {
  return static_cast<TimeUs>(v * static_cast<double>(kUsPerMs) + (v >= 0 ? 0.5 : -0.5));
}
constexpr TimeUs from_seconds(double v) {
  return static_cast<TimeUs>(v * static_cast<double>(kUsPerSec) + (v >= 0 ? 0.5 : -0.5));
}
constexpr double to_ms(TimeUs t) { return static_cast<double>(t) / kUsPerMs; }
constexpr double to_seconds(TimeUs t) { return static_cast<double>(t) / kUsPerSec; }

class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Invalid user configuration; the message names the offending field.
class ConfigError : public Error {
 public:
  using Error::Error;
};

/// The environment could not produce a step (simulator drained, fault injected, ...).
class EnvError : public Error {
 public:
  using Error::Error;
};

/// 64-bit FNV-1a. Stable across platforms, used for config hashes.
inline std::uint64_t fnv1a64(std::string_view data, std::uint64_t h = 0xcbf29ce484222325ULL) {
  for (unsigned char c : data) {
    h ^= c;
    h *= 0x100000001b3ULL;
  }
  return h;
}

/// Shortest round-trip decimal form; identical bytes for identical values.
inline std::string format_double(double v) {
  if (std::isnan(v)) return "nan";
  if (std::isinf(v)) return v > 0 ? "inf" : "-inf";
  char buf[64];
  auto res = std::to_chars(buf, buf + sizeof(buf), v);
  return std::string(buf, res.ptr);
}

}  // namespace marlin
