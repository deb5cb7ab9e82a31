#pragma once

#include <cstdint>
#include <memory>
#include <optional>
#include <ostream>
#include <stdexcept>
#include <vector>

#include <Eigen/Dense>

#include "marlin/common.hpp"
#include "marlin/env/action.hpp"
#include "marlin/env/features.hpp"
#include "marlin/env/reward.hpp"
#include "marlin/sim/dumbbell.hpp"
#include "marlin/sim/simulator.hpp"
#include "marlin/sim/traffic.hpp"
#include "marlin/transport/connection.hpp"

namespace marlin::env {

struct EnvConfig {
  sim::LinkConfig link{};
  sim::TrafficSchedule traffic{};
  transport::ConnectionConfig connection{};
  RewardKind reward = RewardKind::basic;
  double target_rate = 237'500;  // bytes/s
  std::size_t episode_steps = 200;
  std::size_t history = kHistory;
  double ema_alpha = 0.3;
  double norm_decay = 0.999;
  TimeUs inference_delay = 0;
  TimeUs stall_timeout = 3 * kUsPerSec;
  std::uint64_t transfer_bytes = 0;  // 0: endless backlog
  TimeUs abort_after = 80 * kUsPerSec;
  bool ideal_acked_oracle = false;  // reward as if acked always equals target
  bool record_trace = true;
  std::uint64_t seed = 1;

  void validate() const {
    link.validate();
    traffic.validate();
    connection.validate();
    if (!(target_rate > 0)) throw ConfigError("agent.target_rate_kbps must be > 0");
    if (episode_steps == 0) throw ConfigError("training.episode_steps must be > 0");
    if (history == 0) throw ConfigError("agent.history must be > 0");
    if (!(ema_alpha > 0 && ema_alpha <= 1)) throw ConfigError("agent.ema_alpha must be in (0, 1]");
    if (!(norm_decay > 0 && norm_decay < 1)) throw ConfigError("agent.norm_decay must be in (0, 1)");
    if (inference_delay < 0) throw ConfigError("agent.inference_delay_ms must be >= 0");
    if (stall_timeout <= 0) throw ConfigError("agent.stall_timeout_ms must be > 0");
    if (transfer_bytes > 0 && abort_after <= 0) throw ConfigError("eval.abort_s must be > 0");
  }
};

/// One row of the episode trace.
struct StepInfo {
  std::int64_t step = 0;
  TimeUs t = 0;
  double action = 0;
  double cwnd_kb = 0;
  double reward = 0;
  double acked_cum_kb = 0;
  double target_kb = 0;
  double last_rtt_ms = 0;
  double penalties = 0;
};

inline void write_episode_trace_csv(std::ostream& os, const std::vector<StepInfo>& rows) {
  os << "step,t_us,action,cwnd_kb,reward,acked_cum_kb,target_kb,last_rtt_ms,penalties\n";
  for (const auto& r : rows) {
    os << r.step << ',' << r.t << ',' << format_double(r.action) << ',' << format_double(r.cwnd_kb) << ','
       << format_double(r.reward) << ',' << format_double(r.acked_cum_kb) << ',' << format_double(r.target_kb)
       << ',' << format_double(r.last_rtt_ms) << ',' << format_double(r.penalties) << '\n';
  }
}

struct EnvReset {
  Eigen::VectorXf obs;
  Summary summary{};
  bool continued = false;  // same connection as the previous episode
};

struct EnvStep {
  Eigen::VectorXf obs;
  Summary summary{};
  double reward = 0;
  bool truncated = false;   // partial-episode boundary
  bool terminated = false;  // file transfer finished or aborted
  StepInfo info;
};

/// Simulator seed of the n-th world built from `seed`: splitmix64, so
/// consecutive worlds are unrelated.
inline std::uint64_t world_seed(std::uint64_t seed, std::uint64_t n) {
  std::uint64_t z = seed + 0x9e3779b97f4a7c15ULL * (n + 1);
  z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ULL;
  z = (z ^ (z >> 27)) * 0x94d049bb133111ebULL;
  return z ^ (z >> 31);
}

/// The agent-facing environment around one simulated connection.
///
/// Training mode keeps an endless backlog and the same connection across
/// partial episodes; reset() only restarts the reward accounting. Transfer
/// mode sends `transfer_bytes` once and terminates on completion or abort.
class CongestionEnv {
 public:
  explicit CongestionEnv(EnvConfig cfg)
      : cfg_(std::move(cfg)), history_(cfg_.history), norm_(cfg_.history * kSummaryDim, cfg_.norm_decay) {
    cfg_.validate();
  }

  CongestionEnv(const CongestionEnv&) = delete;
  CongestionEnv& operator=(const CongestionEnv&) = delete;

  const EnvConfig& config() const noexcept { return cfg_; }
  std::size_t obs_dim() const noexcept { return cfg_.history * kSummaryDim; }
  std::size_t history_depth() const noexcept { return cfg_.history; }

  RunningNormalizer& normalizer() noexcept { return norm_; }
  const RunningNormalizer& normalizer() const noexcept { return norm_; }
  /// Outside training the normalizer is frozen.
  void set_training(bool on) { norm_.set_frozen(!on); }

  /// Starts a partial episode, continuing the current connection when possible.
  EnvReset reset() {
    if (!world_ || cfg_.transfer_bytes > 0 || finished_) return hard_reset();
    begin_episode();
    return EnvReset{last_obs_, history_.newest(), true};
  }

  /// Fresh simulation, connection and history.
  EnvReset hard_reset() {
    world_.reset();
    world_ = std::make_unique<World>(cfg_, seed_for(worlds_++));
    history_.clear();
    snapshots_.clear();
    fresh_ = decision_ready_ = action_pending_ = finished_ = aborted_ = false;
    last_action_time_ = 0;
    decisions_.clear();
    gate_srtts_.clear();
    trace_.clear();
    total_steps_ = 0;

    auto& conn = world_->conn;
    conn.add_ack_observer([this](const AckFrame&, TimeUs now) { on_ack(now); });
    if (cfg_.transfer_bytes > 0) {
      conn.write(cfg_.transfer_bytes);
      world_->sim.schedule(cfg_.abort_after, [this] {
        if (!finished_) {
          aborted_ = finished_ = true;
        }
      });
    } else {
      conn.set_unlimited(true);
    }
    run_to_decision();
    decide();
    begin_episode();
    return EnvReset{last_obs_, history_.newest(), false};
  }

  EnvStep step(double action) {
    if (!world_) throw std::logic_error("step() before reset()");
    if (finished_) throw std::logic_error("step() after the transfer finished");
    if (cfg_.inference_delay == 0) {
      apply(action);
    } else {
      action_pending_ = true;
      world_->sim.schedule_in(cfg_.inference_delay, [this, action] { apply(action); });
    }
    run_to_decision();
    decide();
    ++steps_in_episode_;
    ++total_steps_;

    auto& conn = world_->conn;
    const TimeUs now = world_->sim.now();
    const double elapsed = to_seconds(std::max<TimeUs>(1, now - episode_start_));
    EnvStep out;
    StepInfo& info = out.info;
    info.step = total_steps_;
    info.t = now;
    info.action = action;
    info.cwnd_kb = conn.cwnd().cwnd / kBytesPerKB;
    info.target_kb = target_kb(elapsed, cfg_.target_rate / kBytesPerKB);
    info.acked_cum_kb = cfg_.ideal_acked_oracle ? info.target_kb
                                                : static_cast<double>(conn.acked_bytes() - acked_base_) / kBytesPerKB;
    const auto& rtt = conn.rtt();
    info.last_rtt_ms = to_ms(rtt.last_rtt);
    if (cfg_.reward == RewardKind::penalized && rtt.has_sample() && rtt.min_rtt_ema > 0) {
      const double min_ema_ms = rtt.min_rtt_ema / kUsPerMs;
      info.penalties = penalties(info.last_rtt_ms - min_ema_ms, min_ema_ms);
    }
    info.reward = cfg_.reward == RewardKind::basic ? reward_basic(info.target_kb, info.acked_cum_kb)
                                                    : reward_penalized(info.target_kb, info.acked_cum_kb, info.penalties);
    if (cfg_.record_trace) trace_.push_back(info);

    out.obs = last_obs_;
    out.summary = history_.newest();
    out.reward = info.reward;
    out.terminated = finished_;
    out.truncated = cfg_.transfer_bytes == 0 && steps_in_episode_ >= cfg_.episode_steps;
    return out;
  }

  // --- inspection --------------------------------------------------------

  bool has_world() const noexcept { return world_ != nullptr; }
  const sim::Simulator& simulator() const { return world().sim; }
  const sim::Dumbbell& network() const { return world().net; }
  const transport::Connection& connection() const { return world().conn; }
  const sim::BackgroundTraffic* background() const { return world().bg.get(); }
  TimeUs now() const { return world().sim.now(); }

  bool finished() const noexcept { return finished_; }
  bool aborted() const noexcept { return aborted_; }
  /// Time the last byte of the transfer was acknowledged, or -1.
  TimeUs completion_time() const { return world().conn.completion_time(); }

  std::size_t steps_in_episode() const noexcept { return steps_in_episode_; }
  std::uint64_t gain_clamps() const noexcept { return gain_clamps_; }
  std::uint64_t forced_decisions() const noexcept { return forced_decisions_; }
  /// Times at which each action took effect, since the last hard reset.
  const std::vector<TimeUs>& action_times() const noexcept { return decisions_; }
  /// SRTT the gate used when each action was applied.
  const std::vector<TimeUs>& gate_srtts() const noexcept { return gate_srtts_; }
  const std::vector<StepInfo>& trace() const noexcept { return trace_; }
  const Eigen::VectorXd& last_raw_stack() const noexcept { return last_raw_; }

 private:
  struct World {
    sim::Simulator sim;
    sim::Dumbbell net;
    std::unique_ptr<sim::BackgroundTraffic> bg;
    transport::Connection conn;

    World(const EnvConfig& cfg, std::uint64_t seed)
        : sim(seed), net(sim, cfg.link),
          bg(cfg.traffic.elephant_slots.empty() && cfg.traffic.mice_mean_rate <= 0
                 ? nullptr
                 : std::make_unique<sim::BackgroundTraffic>(sim, net, cfg.traffic)),
          conn(sim, net, sim::agent_path(cfg.link), cfg.connection) {}
  };

  const World& world() const {
    if (!world_) throw std::logic_error("environment has not been reset");
    return *world_;
  }

  std::uint64_t seed_for(std::uint64_t n) const { return world_seed(cfg_.seed, n); }

  TimeUs gate_srtt() const {
    const auto& rtt = world_->conn.rtt();
    if (!rtt.has_sample()) return kGatePlaceholderSrtt;
    return std::max<TimeUs>(1, std::llround(rtt.srtt));
  }

  void on_ack(TimeUs now) {
    auto& conn = world_->conn;
    const TimeUs srtt = gate_srtt();
    snapshots_.push_back(conn.window_stats(now + 1 - srtt, now + 1));
    fresh_ = true;
    if (cfg_.transfer_bytes > 0 && conn.complete()) finished_ = true;
    if (!action_pending_ && action_gate(now, last_action_time_, srtt, fresh_)) decision_ready_ = true;
  }

  void apply(double action) {
    auto& conn = world_->conn;
    const auto r = apply_action(action, conn.cwnd());
    if (r.gain_clamped) ++gain_clamps_;
    action_pending_ = false;
    last_action_time_ = world_->sim.now();
    decisions_.push_back(last_action_time_);
    gate_srtts_.push_back(gate_srtt());
    conn.try_send();
  }

  void run_to_decision() {
    auto& sim = world_->sim;
    const TimeUs wait = std::max(cfg_.stall_timeout, gate_srtt());
    const TimeUs armed_from = last_action_time_;
    auto watchdog = sim.schedule(std::max(sim.now(), armed_from + wait), [this] { stall(); });
    while (!decision_ready_ && !finished_) {
      if (!sim.step()) throw EnvError("simulation drained before the next decision");
    }
    sim.cancel(watchdog);
  }

  // No acknowledgement for a long time: decide on an idle snapshot.
  void stall() {
    if (decision_ready_ || finished_) return;
    if (action_pending_) {
      world_->sim.schedule_in(std::max(cfg_.stall_timeout, gate_srtt()), [this] { stall(); });
      return;
    }
    const TimeUs now = world_->sim.now();
    snapshots_.push_back(world_->conn.window_stats(now + 1 - gate_srtt(), now + 1));
    ++forced_decisions_;
    decision_ready_ = true;
  }

  void decide() {
    auto& conn = world_->conn;
    const TimeUs now = world_->sim.now();
    if (snapshots_.empty()) snapshots_.push_back(conn.window_stats(now + 1 - gate_srtt(), now + 1));
    const Summary s = summarize(snapshots_, history_.newest(), cfg_.ema_alpha);
    snapshots_.clear();
    fresh_ = decision_ready_ = false;
    history_.push(s);
    last_raw_ = history_.stacked();
    norm_.update(last_raw_);
    last_obs_ = norm_.normalize(last_raw_).cast<float>();
    conn.prune_logs(now - std::max<TimeUs>(10 * kUsPerSec, 4 * gate_srtt()));
  }

  // A file transfer is accounted from time zero; training episodes from
  // their first decision.
  void begin_episode() {
    const bool transfer = cfg_.transfer_bytes > 0;
    episode_start_ = transfer ? 0 : world_->sim.now();
    acked_base_ = transfer ? 0 : world_->conn.acked_bytes();
    steps_in_episode_ = 0;
  }

  EnvConfig cfg_;
  std::unique_ptr<World> world_;
  std::uint64_t worlds_ = 0;

  HistoryStack history_;
  RunningNormalizer norm_;
  std::vector<NetStatsWindow> snapshots_;
  Eigen::VectorXd last_raw_;
  Eigen::VectorXf last_obs_;

  bool fresh_ = false;
  bool decision_ready_ = false;
  bool action_pending_ = false;
  bool finished_ = false;
  bool aborted_ = false;
  TimeUs last_action_time_ = 0;

  TimeUs episode_start_ = 0;
  std::uint64_t acked_base_ = 0;
  std::size_t steps_in_episode_ = 0;
  std::int64_t total_steps_ = 0;

  std::uint64_t gain_clamps_ = 0;
  std::uint64_t forced_decisions_ = 0;
  std::vector<TimeUs> decisions_;
  std::vector<TimeUs> gate_srtts_;
  std::vector<StepInfo> trace_;
};

}  // namespace marlin::env
