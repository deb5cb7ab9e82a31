#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>

#include "marlin/common.hpp"
#include "marlin/transport/cwnd.hpp"

namespace marlin::env {

/// SRTT used by the gate before the connection has any RTT sample.
inline constexpr TimeUs kGatePlaceholderSrtt = 100 * kUsPerMs;

/// A decision is due when new statistics arrived and at least one SRTT
/// has passed since the previous action took effect.
inline bool action_gate(TimeUs now, TimeUs last_action_time, TimeUs srtt, bool stats_fresh) {
  if (!stats_fresh) return false;
  if (srtt <= 0) srtt = kGatePlaceholderSrtt;
  return now - last_action_time >= srtt;
}

struct ApplyResult {
  std::uint32_t cwnd = 0;
  bool gain_clamped = false;  // input was outside [-1, 1] or not a number
};

/// cwnd <- clamp(cwnd * (1 + gain), floor, cap).
inline ApplyResult apply_action(double gain, transport::CwndState& cw) {
  ApplyResult r;
  if (std::isnan(gain)) {
    gain = 0.0;
    r.gain_clamped = true;
  } else if (gain < -1.0 || gain > 1.0) {
    gain = std::clamp(gain, -1.0, 1.0);
    r.gain_clamped = true;
  }
  cw.set(static_cast<double>(cw.cwnd) * (1.0 + gain));
  r.cwnd = cw.cwnd;
  return r;
}

}  // namespace marlin::env
