#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>

#include "marlin/common.hpp"

namespace marlin::transport {

/// Congestion window bookkeeping, in bytes.
struct CwndState {
  std::uint32_t initial_cwnd = 4096;
  std::uint32_t cwnd_cap = 51200;
  std::uint32_t cwnd_floor = 2048;
  std::uint32_t cwnd = 4096;
  std::uint32_t bytes_in_flight = 0;

  static CwndState with_limits(std::uint32_t initial, std::uint32_t floor, std::uint32_t cap) {
    if (floor == 0 || floor > cap) throw ConfigError("cwnd floor must be in (0, cap]");
    CwndState s;
    s.initial_cwnd = std::clamp(initial, floor, cap);
    s.cwnd_floor = floor;
    s.cwnd_cap = cap;
    s.cwnd = s.initial_cwnd;
    return s;
  }

  /// Sets the window, rounding to whole bytes and clamping to [floor, cap].
  void set(double bytes) {
    if (std::isnan(bytes)) return;
    const double c = std::clamp(bytes, static_cast<double>(cwnd_floor), static_cast<double>(cwnd_cap));
    cwnd = static_cast<std::uint32_t>(std::llround(c));
  }

  std::uint32_t available() const noexcept { return bytes_in_flight >= cwnd ? 0 : cwnd - bytes_in_flight; }
};

}  // namespace marlin::transport
