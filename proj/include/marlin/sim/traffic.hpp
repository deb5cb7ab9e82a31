#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <limits>
#include <memory>
#include <numeric>
#include <random>
#include <string>
#include <vector>

#include "marlin/cc/cubic.hpp"
#include "marlin/common.hpp"
#include "marlin/sim/dumbbell.hpp"
#include "marlin/sim/simulator.hpp"
#include "marlin/transport/connection.hpp"

namespace marlin::sim {

enum class ElephantKind : std::uint8_t { rate_driven, window_driven };

struct ElephantSlot {
  double rate = 0;  // bytes/s offered
  ElephantKind kind = ElephantKind::rate_driven;
  friend bool operator==(const ElephantSlot&, const ElephantSlot&) = default;
};

/// Background load: elephants taking turns in fixed slots of a repeating
/// cycle, plus Poisson mice bursts running throughout.
struct TrafficSchedule {
  std::vector<ElephantSlot> elephant_slots{{100'000, ElephantKind::rate_driven},
                                           {200'000, ElephantKind::window_driven},
                                           {100'000, ElephantKind::rate_driven},
                                           {50'000, ElephantKind::rate_driven}};
  TimeUs slot_duration = 2 * kUsPerSec;
  double mice_mean_rate = 17'000;  // bytes/s, all mice flows combined
  int mice_flows = 2;
  std::uint32_t mice_min_bytes = 1000;
  std::uint32_t mice_max_bytes = 4000;
  std::uint32_t elephant_packet = 1200;
  bool permute = false;

  TimeUs cycle_duration() const noexcept {
    return slot_duration * static_cast<TimeUs>(elephant_slots.size());
  }
  double mice_burst_mean() const noexcept { return 0.5 * (mice_min_bytes + mice_max_bytes); }
  /// Poisson arrival rate of one mice flow, bursts per second.
  double mice_interarrival_rate() const noexcept {
    return mice_flows > 0 ? mice_mean_rate / mice_flows / mice_burst_mean() : 0.0;
  }
  double mean_elephant_rate() const {
    if (elephant_slots.empty()) return 0.0;
    double sum = 0;
    for (const auto& s : elephant_slots) sum += s.rate;
    return sum / static_cast<double>(elephant_slots.size());
  }
  /// Elephant share of the offered background load.
  double elephant_share() const {
    const double e = mean_elephant_rate();
    return e + mice_mean_rate > 0 ? e / (e + mice_mean_rate) : 0.0;
  }

  static TrafficSchedule none() {
    TrafficSchedule s;
    s.elephant_slots.clear();
    s.mice_mean_rate = 0;
    s.mice_flows = 0;
    return s;
  }

  void validate() const {
    if (slot_duration <= 0) throw ConfigError("traffic.slot_s must be > 0");
    for (const auto& e : elephant_slots)
      if (!(e.rate > 0)) throw ConfigError("traffic.elephants: every rate must be > 0");
    if (mice_mean_rate < 0) throw ConfigError("traffic.mice_kbps must be >= 0");
    if (mice_mean_rate > 0 && mice_flows <= 0) throw ConfigError("traffic.mice_flows must be > 0");
    if (mice_min_bytes == 0 || mice_min_bytes > mice_max_bytes)
      throw ConfigError("traffic.mice_min_b must be in (0, mice_max_b]");
    if (elephant_packet == 0) throw ConfigError("traffic.elephant_packet_b must be > 0");
  }
};

/// One elephant activation, as actually scheduled.
struct SlotRecord {
  std::int64_t cycle;
  std::size_t position;
  std::size_t elephant;  // index into TrafficSchedule::elephant_slots
  TimeUs start;
  TimeUs end;
};

/// Drives the background flows of a TrafficSchedule on a Dumbbell.
class BackgroundTraffic {
 public:
  static constexpr std::uint32_t kWindowFlowCap = 256'000;

  BackgroundTraffic(Simulator& sim, Dumbbell& net, TrafficSchedule schedule, TimeUs start = 0)
      : sim_(sim), net_(net), sched_(std::move(schedule)), start_(start),
        mice_rng_(sim.fork_rng(stream::kMice)), perm_rng_(sim.fork_rng(stream::kPermutation)) {
    sched_.validate();
    for (std::size_t i = 0; i < sched_.elephant_slots.size(); ++i) {
      const auto& e = sched_.elephant_slots[i];
      if (e.kind == ElephantKind::rate_driven) {
        elephant_flow_.push_back(net_.add_flow(FlowPath{}, nullptr));
        windowed_.push_back(nullptr);
      } else {
        transport::ConnectionConfig cc;
        cc.payload = sched_.elephant_packet;
        cc.cwnd_cap = kWindowFlowCap;
        auto ctl = std::make_unique<cc::CubicControl>(cc.payload);
        auto conn = std::make_unique<transport::Connection>(sim_, net_, FlowPath{}, cc, ctl.get());
        elephant_flow_.push_back(conn->flow());
        controls_.push_back(std::move(ctl));
        windowed_.push_back(std::move(conn));
      }
    }
    for (int m = 0; m < sched_.mice_flows; ++m) mice_flow_.push_back(net_.add_flow(FlowPath{}, nullptr));
    elephant_seq_.assign(elephant_flow_.size(), 0);
    mice_seq_.assign(mice_flow_.size(), 0);
    build_orders();
    if (!sched_.elephant_slots.empty()) sim_.schedule(start_, [this] { begin_cycle(0); });
    if (sched_.mice_mean_rate > 0) {
      for (std::size_t m = 0; m < mice_flow_.size(); ++m) schedule_mice(m, start_);
    }
  }

  BackgroundTraffic(const BackgroundTraffic&) = delete;
  BackgroundTraffic& operator=(const BackgroundTraffic&) = delete;

  const TrafficSchedule& schedule() const noexcept { return sched_; }
  const std::vector<SlotRecord>& slots() const noexcept { return slots_; }
  const std::vector<FlowId>& elephant_flows() const noexcept { return elephant_flow_; }
  const std::vector<FlowId>& mice_flows() const noexcept { return mice_flow_; }
  bool is_elephant(FlowId f) const {
    return std::find(elephant_flow_.begin(), elephant_flow_.end(), f) != elephant_flow_.end();
  }
  bool is_mice(FlowId f) const { return std::find(mice_flow_.begin(), mice_flow_.end(), f) != mice_flow_.end(); }

 private:
  // Distinct slot orders, visited in a seeded shuffled sequence so that
  // consecutive cycles never repeat an order.
  void build_orders() {
    std::vector<std::size_t> idx(sched_.elephant_slots.size());
    std::iota(idx.begin(), idx.end(), 0);
    if (!sched_.permute) {
      orders_.push_back(idx);
      return;
    }
    auto key = [this](const std::vector<std::size_t>& o) {
      std::vector<ElephantSlot> v;
      for (auto i : o) v.push_back(sched_.elephant_slots[i]);
      return v;
    };
    std::vector<std::vector<ElephantSlot>> seen;
    do {
      auto k = key(idx);
      if (std::find(seen.begin(), seen.end(), k) == seen.end()) {
        seen.push_back(k);
        orders_.push_back(idx);
      }
    } while (std::next_permutation(idx.begin(), idx.end()));
    reshuffle();
  }

  void reshuffle() {
    sequence_.resize(orders_.size());
    std::iota(sequence_.begin(), sequence_.end(), 0);
    std::shuffle(sequence_.begin(), sequence_.end(), perm_rng_);
    if (sequence_.size() > 1 && has_last_ && sequence_.front() == last_) std::swap(sequence_[0], sequence_[1]);
    order_pos_ = 0;
  }

  const std::vector<std::size_t>& next_order() {
    if (!sched_.permute) return orders_.front();
    if (order_pos_ == sequence_.size()) reshuffle();
    last_ = sequence_[order_pos_++];
    has_last_ = true;
    return orders_[last_];
  }

  void begin_cycle(std::int64_t cycle) {
    const TimeUs cycle_start = start_ + cycle * sched_.cycle_duration();
    const auto& order = next_order();
    for (std::size_t pos = 0; pos < order.size(); ++pos) {
      const TimeUs s = cycle_start + static_cast<TimeUs>(pos) * sched_.slot_duration;
      const std::size_t e = order[pos];
      slots_.push_back(SlotRecord{cycle, pos, e, s, s + sched_.slot_duration});
      sim_.schedule(s, [this, e, s] { start_slot(e, s); });
    }
    sim_.schedule(cycle_start + sched_.cycle_duration(), [this, cycle] { begin_cycle(cycle + 1); });
  }

  void start_slot(std::size_t e, TimeUs slot_start) {
    const TimeUs slot_end = slot_start + sched_.slot_duration;
    emit_elephant(e, slot_start, slot_end, 0);
    if (windowed_[e]) sim_.schedule(slot_end, [this, e] { windowed_[e]->discard_unsent(); });
  }

  // k-th packet of an activation leaves at slot_start + k * size / rate.
  void emit_elephant(std::size_t e, TimeUs slot_start, TimeUs slot_end, std::uint64_t k) {
    const auto& slot = sched_.elephant_slots[e];
    const double size = sched_.elephant_packet;
    if (windowed_[e]) {
      windowed_[e]->write(sched_.elephant_packet);
    } else {
      Packet p;
      p.flow_id = elephant_flow_[e];
      p.seq = elephant_seq_[e]++;
      p.size = sched_.elephant_packet;
      p.kind = PacketKind::background;
      net_.transmit(p);
    }
    const TimeUs next = slot_start + static_cast<TimeUs>(std::llround((k + 1) * size * kUsPerSec / slot.rate));
    if (next < slot_end) sim_.schedule(next, [=, this] { emit_elephant(e, slot_start, slot_end, k + 1); });
  }

  void schedule_mice(std::size_t m, TimeUs from) {
    std::exponential_distribution<double> gap(sched_.mice_interarrival_rate());
    const TimeUs at = from + std::max<TimeUs>(1, std::llround(gap(mice_rng_) * kUsPerSec));
    sim_.schedule(at, [this, m] {
      std::uniform_int_distribution<std::uint32_t> size(sched_.mice_min_bytes, sched_.mice_max_bytes);
      Packet p;
      p.flow_id = mice_flow_[m];
      p.seq = mice_seq_[m]++;
      p.size = size(mice_rng_);
      p.kind = PacketKind::background;
      net_.transmit(p);
      schedule_mice(m, sim_.now());
    });
  }

  Simulator& sim_;
  Dumbbell& net_;
  TrafficSchedule sched_;
  TimeUs start_;
  std::mt19937_64 mice_rng_;
  std::mt19937_64 perm_rng_;

  std::vector<FlowId> elephant_flow_;
  std::vector<std::unique_ptr<cc::CubicControl>> controls_;
  std::vector<std::unique_ptr<transport::Connection>> windowed_;
  std::vector<FlowId> mice_flow_;
  std::vector<std::uint64_t> elephant_seq_;
  std::vector<std::uint64_t> mice_seq_;

  std::vector<std::vector<std::size_t>> orders_;
  std::vector<std::size_t> sequence_;
  std::size_t order_pos_ = 0;
  std::size_t last_ = 0;
  bool has_last_ = false;
  std::vector<SlotRecord> slots_;
};

/// Trace of a background-only run.
struct BackgroundRun {
  std::vector<TraceRecord> trace;
  std::vector<SlotRecord> slots;
  std::vector<FlowId> elephant_flows;
  std::vector<FlowId> mice_flows;
};

inline BackgroundRun run_background(const TrafficSchedule& schedule, const LinkConfig& link, TimeUs duration,
                                    std::uint64_t seed = 1) {
  Simulator sim(seed);
  Dumbbell net(sim, link);
  net.enable_trace();
  BackgroundTraffic bg(sim, net, schedule);
  sim.run_until(duration);
  BackgroundRun out;
  out.trace = net.trace();
  out.slots = bg.slots();
  out.elephant_flows = bg.elephant_flows();
  out.mice_flows = bg.mice_flows();
  return out;
}

/// Bytes an ideal sender could push through the shaper over [0, horizon):
/// effective rate minus the scheduled background load (slots in nominal
/// order, mice at their mean rate), floored at zero and integrated.
inline double residual_capacity(const TrafficSchedule& schedule, const LinkConfig& link, TimeUs horizon) {
  if (horizon <= 0) return 0.0;
  const double eff = link.effective_rate();
  if (schedule.elephant_slots.empty()) return std::max(0.0, eff - schedule.mice_mean_rate) * to_seconds(horizon);
  double total = 0;
  TimeUs t = 0;
  std::size_t pos = 0;
  while (t < horizon) {
    const TimeUs end = std::min(horizon, t + schedule.slot_duration);
    const double load = schedule.elephant_slots[pos].rate + schedule.mice_mean_rate;
    total += std::max(0.0, eff - load) * to_seconds(end - t);
    t = end;
    pos = (pos + 1) % schedule.elephant_slots.size();
  }
  return total;
}

/// Time for an ideal sender to move `bytes` using only residual capacity.
/// Returns +inf when the schedule leaves no capacity at all.
inline double ideal_transfer_seconds(const TrafficSchedule& schedule, const LinkConfig& link, double bytes) {
  if (bytes <= 0) return 0.0;
  const double eff = link.effective_rate();
  if (schedule.elephant_slots.empty()) {
    const double r = eff - schedule.mice_mean_rate;
    return r > 0 ? bytes / r : std::numeric_limits<double>::infinity();
  }
  if (residual_capacity(schedule, link, schedule.cycle_duration()) <= 0) return std::numeric_limits<double>::infinity();
  double remaining = bytes;
  double t = 0;
  const double slot_s = to_seconds(schedule.slot_duration);
  for (std::size_t pos = 0;; pos = (pos + 1) % schedule.elephant_slots.size()) {
    const double r = std::max(0.0, eff - schedule.elephant_slots[pos].rate - schedule.mice_mean_rate);
    if (r * slot_s >= remaining) return t + remaining / r;
    remaining -= r * slot_s;
    t += slot_s;
  }
}

}  // namespace marlin::sim
