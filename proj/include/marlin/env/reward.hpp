#pragma once

#include <cmath>
#include <stdexcept>
#include <string>

#include "marlin/common.hpp"

namespace marlin::env {

enum class RewardKind { basic, penalized };

inline const char* to_string(RewardKind k) { return k == RewardKind::basic ? "basic" : "penalized"; }

/// Coefficient applied to the relative RTT increase, by magnitude.
inline double penalty_alpha(double magnitude) {
  if (magnitude > 0.6) return 1.0;
  if (magnitude > 0.1) return 0.5;
  if (magnitude > 0.05) return 0.3;
  return 0.1;
}

/// RTT penalty for the relative deviation rtt_diff / min_rtt_ema.
/// Saturates at 0.99 once the RTT has doubled; negative when RTT improves.
inline double penalties(double rtt_diff, double min_rtt_ema) {
  if (!(min_rtt_ema > 0)) throw std::invalid_argument("penalties: min_rtt_ema must be > 0");
  const double ratio = rtt_diff / min_rtt_ema;
  if (ratio >= 1.0) return 0.99;
  return penalty_alpha(std::fabs(ratio)) * ratio;
}

inline void check_target(double target_kb) {
  if (!(target_kb > 0)) {
    throw std::domain_error("reward: target must be > 0 (got " + format_double(target_kb) +
                            " KB); check the target rate");
  }
}

/// -target / (target + acked): -1 with no progress, -0.5 when tracking the target.
inline double reward_basic(double target_kb, double acked_kb) {
  check_target(target_kb);
  return -target_kb / (target_kb + acked_kb);
}

inline double reward_penalized(double target_kb, double acked_kb, double penalty) {
  check_target(target_kb);
  return -target_kb / (target_kb + acked_kb * (1.0 - penalty));
}

/// KB the link could have carried since the episode started.
inline double target_kb(double elapsed_s, double target_rate_kbps) {
  if (elapsed_s < 0) throw std::invalid_argument("target_kb: elapsed must be >= 0");
  return target_rate_kbps * elapsed_s;
}

}  // namespace marlin::env
