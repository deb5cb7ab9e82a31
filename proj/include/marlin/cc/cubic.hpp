#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <string_view>

#include "marlin/common.hpp"
#include "marlin/transport/connection.hpp"

namespace marlin::cc {

/// State of the CUBIC window-growth function, window quantities in bytes.
struct CubicState {
  static constexpr double kC = 0.4;     // segments / s^3
  static constexpr double kBeta = 0.7;  // multiplicative decrease

  double mss = 1200;
  double w_max = 0;         // window at the last reduction
  double ssthresh = 1e18;   // slow start until the first loss
  TimeUs epoch_start = -1;  // first ack after a reduction
  double k = 0;             // seconds until the curve returns to w_max
  double origin = 0;
  double w_est = 0;  // TCP-friendly estimate
  std::uint64_t recovery_seq = 0;
  bool in_recovery_window = false;

  /// W(t) = C (t - K)^3 + W_max, expressed in bytes.
  double window_at(double t_since_epoch) const {
    const double d = t_since_epoch - k;
    return kC * mss * d * d * d + origin;
  }
};

/// Window update for one acknowledged packet. Returns the new window.
inline double cubic_on_ack(CubicState& s, double cwnd, TimeUs now, std::uint32_t acked_bytes) {
  if (cwnd < s.ssthresh) return cwnd + acked_bytes;
  if (s.epoch_start < 0) {
    s.epoch_start = now;
    if (cwnd < s.w_max) {
      s.k = std::cbrt((s.w_max - cwnd) / (CubicState::kC * s.mss));
      s.origin = s.w_max;
    } else {
      s.k = 0;
      s.origin = cwnd;
    }
    s.w_est = cwnd;
  }
  const double t = to_seconds(now - s.epoch_start);
  const double target = s.window_at(t);
  const double segs = acked_bytes / s.mss;
  double next = cwnd;
  if (target > cwnd) next = cwnd + segs * s.mss * (target - cwnd) / cwnd;
  // TCP-friendly region: Reno-equivalent growth as a lower bound.
  const double beta = CubicState::kBeta;
  s.w_est += 3.0 * (1.0 - beta) / (1.0 + beta) * segs * s.mss * s.mss / cwnd;
  return std::max(next, s.w_est);
}

/// Multiplicative decrease on loss; W_max records the window before the cut.
/// Losses of packets sent before the previous reduction are ignored.
inline double cubic_on_loss(CubicState& s, double cwnd, std::uint64_t lost_seq, std::uint64_t next_seq) {
  if (s.in_recovery_window && lost_seq < s.recovery_seq) return cwnd;
  s.w_max = cwnd;
  const double reduced = cwnd * CubicState::kBeta;
  s.ssthresh = reduced;
  s.epoch_start = -1;
  s.recovery_seq = next_seq;
  s.in_recovery_window = true;
  return reduced;
}

/// CUBIC-style baseline acting on the same transport as the agent.
class CubicControl final : public transport::CongestionControl {
 public:
  explicit CubicControl(double mss = 1200) { state_.mss = mss; }

  void on_ack(transport::CwndState& w, const transport::AckInfo& a) override {
    apply(w, cubic_on_ack(state_, current(w), a.now, a.acked_bytes));
  }
  void on_loss(transport::CwndState& w, const transport::LossInfo& l) override {
    apply(w, cubic_on_loss(state_, current(w), l.seq, l.next_seq));
  }
  std::string_view name() const override { return "cubic"; }
  const CubicState& state() const noexcept { return state_; }

 private:
  // Sub-byte growth is accumulated here; the transport only sees whole bytes.
  double current(const transport::CwndState& w) const {
    return std::llround(window_) == static_cast<long long>(w.cwnd) ? window_ : static_cast<double>(w.cwnd);
  }
  void apply(transport::CwndState& w, double next) {
    window_ = std::clamp(next, static_cast<double>(w.cwnd_floor), static_cast<double>(w.cwnd_cap));
    w.set(window_);
  }

  CubicState state_;
  double window_ = -1;
};

/// Window pinned at a fixed size regardless of loss.
class FixedWindowControl final : public transport::CongestionControl {
 public:
  explicit FixedWindowControl(std::uint32_t bytes) : bytes_(bytes) {}
  void on_ack(transport::CwndState& w, const transport::AckInfo&) override { w.set(bytes_); }
  void on_loss(transport::CwndState& w, const transport::LossInfo&) override { w.set(bytes_); }
  std::string_view name() const override { return "fixed"; }

 private:
  std::uint32_t bytes_;
};

}  // namespace marlin::cc
