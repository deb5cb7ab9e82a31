#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>

#include "marlin/common.hpp"

namespace marlin::transport {

/// Round-trip statistics of one connection.
///
/// srtt/rtt_var use the classic 1/8 and 1/4 gains. rtt_ema is a separate
/// 0.125-gain average and min_rtt_ema is its running minimum, which is the
/// baseline the RTT penalty is measured against.
struct RttState {
  TimeUs last_rtt = 0;
  TimeUs min_rtt = 0;
  TimeUs max_rtt = 0;
  double srtt = 0;
  double rtt_var = 0;
  double rtt_ema = 0;
  double min_rtt_ema = 0;
  std::uint64_t samples = 0;

  static constexpr double kSrttGain = 1.0 / 8.0;
  static constexpr double kVarGain = 1.0 / 4.0;
  static constexpr double kEmaGain = 0.125;

  bool has_sample() const noexcept { return samples > 0; }

  void add_sample(TimeUs rtt) {
    const auto r = static_cast<double>(rtt);
    last_rtt = rtt;
    if (samples == 0) {
      min_rtt = max_rtt = rtt;
      srtt = r;
      rtt_var = r / 2.0;
      rtt_ema = min_rtt_ema = r;
    } else {
      min_rtt = std::min(min_rtt, rtt);
      max_rtt = std::max(max_rtt, rtt);
      rtt_var = (1.0 - kVarGain) * rtt_var + kVarGain * std::abs(srtt - r);
      srtt = (1.0 - kSrttGain) * srtt + kSrttGain * r;
      rtt_ema = (1.0 - kEmaGain) * rtt_ema + kEmaGain * r;
      min_rtt_ema = std::min(min_rtt_ema, rtt_ema);
    }
    ++samples;
  }
};

/// Retransmission timeout: srtt + 4 * rtt_var, clamped to [floor, ceiling].
struct RtoPolicy {
  TimeUs initial = 1 * kUsPerSec;
  TimeUs floor = 200 * kUsPerMs;
  TimeUs ceiling = 3 * kUsPerSec;

  TimeUs from_state(const RttState& s) const {
    if (!s.has_sample()) return initial;
    const auto rto = static_cast<TimeUs>(std::ceil(s.srtt + 4.0 * s.rtt_var));
    return std::clamp(rto, floor, ceiling);
  }
  TimeUs backoff(TimeUs rto) const { return std::min(rto * 2, ceiling); }
};

}  // namespace marlin::transport
