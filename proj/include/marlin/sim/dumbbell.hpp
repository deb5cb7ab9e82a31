#pragma once

#include <cmath>
#include <cstdint>
#include <functional>
#include <ostream>
#include <random>
#include <string>
#include <vector>

#include "marlin/common.hpp"
#include "marlin/sim/packet.hpp"
#include "marlin/sim/simulator.hpp"

namespace marlin::sim {

/// Bottleneck router and agent-path impairment parameters.
struct LinkConfig {
  double shaper_rate = 250'000.0;  // bytes/s, nominal
  double shaper_efficiency = 0.95;
  TimeUs one_way_delay = 100 * kUsPerMs;  // egress delay on the agent flow
  double loss_prob = 0.03;                // egress loss on the agent flow
  std::uint32_t queue_capacity = 64'000;  // bytes
  TimeUs reverse_delay = 0;               // receiver -> sender path

  double effective_rate() const noexcept { return shaper_rate * shaper_efficiency; }

  void validate() const {
    if (!(shaper_rate > 0)) throw ConfigError("network.shaper_rate_kbps must be > 0");
    if (!(shaper_efficiency > 0 && shaper_efficiency <= 1))
      throw ConfigError("network.efficiency must be in (0, 1]");
    if (!(loss_prob >= 0 && loss_prob <= 1)) throw ConfigError("network.loss_pct must be in [0, 100]");
    if (one_way_delay < 0) throw ConfigError("network.one_way_delay_ms must be >= 0");
    if (reverse_delay < 0) throw ConfigError("network.reverse_delay_ms must be >= 0");
    if (queue_capacity == 0) throw ConfigError("network.queue_kb must be > 0");
  }
};

/// Per-flow impairment applied at the sender before the router.
struct FlowPath {
  TimeUs egress_delay = 0;
  double loss_prob = 0.0;
};

inline FlowPath agent_path(const LinkConfig& link) { return {link.one_way_delay, link.loss_prob}; }

enum class TraceEvent : std::uint8_t { send, drop_loss, drop_queue, deliver };

inline const char* to_string(TraceEvent e) {
  switch (e) {
    case TraceEvent::send: return "send";
    case TraceEvent::drop_loss: return "drop_loss";
    case TraceEvent::drop_queue: return "drop_queue";
    case TraceEvent::deliver: return "deliver";
  }
  return "?";
}

struct TraceRecord {
  TimeUs time;
  FlowId flow;
  std::uint64_t seq;
  std::uint32_t size;
  TraceEvent event;
  friend bool operator==(const TraceRecord&, const TraceRecord&) = default;
};

inline void write_trace_csv(std::ostream& os, const std::vector<TraceRecord>& trace) {
  os << "time_us,flow_id,seq,size_b,event\n";
  for (const auto& r : trace) {
    os << r.time << ',' << r.flow << ',' << r.seq << ',' << r.size << ',' << to_string(r.event) << '\n';
  }
}

struct FlowCounters {
  std::uint64_t sent_packets = 0;
  std::uint64_t sent_bytes = 0;
  std::uint64_t lost_packets = 0;  // sender-side impairment
  std::uint64_t queue_drops = 0;
  std::uint64_t delivered_packets = 0;
  std::uint64_t delivered_bytes = 0;
};

enum class Fate : std::uint8_t { dropped_loss, in_transit };

/// The dumbbell: per-flow egress impairment, one FIFO rate shaper at the
/// bottleneck router, and an uncongested reverse path for acknowledgements.
///
/// The shaper is a token bucket with zero burst allowance: the head of the
/// queue departs once the link has drained the previous packet at the
/// effective rate. Serialisation is tracked in picoseconds and delivery is
/// rounded to the nearest microsecond.
class Dumbbell {
 public:
  using Handler = std::function<void(const Packet&)>;

  Dumbbell(Simulator& sim, LinkConfig cfg) : sim_(sim), cfg_(cfg) {
    cfg_.validate();
    ps_per_byte_ = 1e12 / cfg_.effective_rate();
  }

  Dumbbell(const Dumbbell&) = delete;
  Dumbbell& operator=(const Dumbbell&) = delete;

  const LinkConfig& config() const noexcept { return cfg_; }
  Simulator& simulator() noexcept { return sim_; }

  FlowId add_flow(FlowPath path, Handler on_deliver) {
    const auto id = static_cast<FlowId>(flows_.size());
    flows_.push_back(Flow{path, std::move(on_deliver), {}, sim_.fork_rng(stream::kFlowLoss + id)});
    return id;
  }

  /// Changes a flow's impairment; applies to packets transmitted afterwards.
  void set_flow_path(FlowId id, FlowPath path) { flows_.at(id).path = path; }

  Fate transmit(Packet pkt) {
    Flow& f = flows_.at(pkt.flow_id);
    pkt.tx_time = sim_.now();
    ++f.counters.sent_packets;
    f.counters.sent_bytes += pkt.size;
    record(pkt, TraceEvent::send);
    if (f.path.loss_prob > 0 && std::uniform_real_distribution<double>(0.0, 1.0)(f.rng) < f.path.loss_prob) {
      ++f.counters.lost_packets;
      record(pkt, TraceEvent::drop_loss);
      return Fate::dropped_loss;
    }
    if (f.path.egress_delay == 0) {
      arrive_at_router(pkt);
    } else {
      sim_.schedule_in(f.path.egress_delay, [this, pkt] { arrive_at_router(pkt); });
    }
    return Fate::in_transit;
  }

  /// Receiver-to-sender path; never shaped, never impaired.
  void send_reverse(const Packet& pkt, Handler on_arrival) {
    if (cfg_.reverse_delay == 0) {
      on_arrival(pkt);
      return;
    }
    sim_.schedule_in(cfg_.reverse_delay, [pkt, fn = std::move(on_arrival)] { fn(pkt); });
  }

  void enable_trace(bool on = true) { tracing_ = on; }
  const std::vector<TraceRecord>& trace() const noexcept { return trace_; }
  void clear_trace() { trace_.clear(); }

  const FlowCounters& counters(FlowId id) const { return flows_.at(id).counters; }
  std::size_t flow_count() const noexcept { return flows_.size(); }
  std::uint64_t queued_bytes() const noexcept { return queued_bytes_; }

  /// Optional tap invoked on every delivery, before the flow handler.
  void set_delivery_tap(Handler tap) { tap_ = std::move(tap); }

 private:
  struct Flow {
    FlowPath path;
    Handler on_deliver;
    FlowCounters counters;
    std::mt19937_64 rng;
  };

  void arrive_at_router(const Packet& pkt) {
    Flow& f = flows_[pkt.flow_id];
    if (queued_bytes_ + pkt.size > cfg_.queue_capacity) {
      ++f.counters.queue_drops;
      record(pkt, TraceEvent::drop_queue);
      return;
    }
    queued_bytes_ += pkt.size;
    const std::int64_t now_ps = sim_.now() * 1'000'000;
    const std::int64_t start = std::max(now_ps, busy_until_ps_);
    busy_until_ps_ = start + static_cast<std::int64_t>(std::llround(pkt.size * ps_per_byte_));
    const TimeUs done = (busy_until_ps_ + 500'000) / 1'000'000;
    sim_.schedule(done, [this, pkt] { depart(pkt); });
  }

  void depart(const Packet& pkt) {
    Flow& f = flows_[pkt.flow_id];
    queued_bytes_ -= pkt.size;
    ++f.counters.delivered_packets;
    f.counters.delivered_bytes += pkt.size;
    record(pkt, TraceEvent::deliver);
    if (tap_) tap_(pkt);
    if (f.on_deliver) f.on_deliver(pkt);
  }

  void record(const Packet& pkt, TraceEvent ev) {
    if (tracing_) trace_.push_back(TraceRecord{sim_.now(), pkt.flow_id, pkt.seq, pkt.size, ev});
  }

  Simulator& sim_;
  LinkConfig cfg_;
  double ps_per_byte_ = 0;
  std::vector<Flow> flows_;
  std::uint64_t queued_bytes_ = 0;
  std::int64_t busy_until_ps_ = 0;
  bool tracing_ = false;
  std::vector<TraceRecord> trace_;
  Handler tap_;
};

}  // namespace marlin::sim
