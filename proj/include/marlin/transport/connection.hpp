#pragma once

#include <algorithm>
#include <cstdint>
#include <deque>
#include <functional>
#include <limits>
#include <stdexcept>
#include <string_view>
#include <vector>

#include "marlin/common.hpp"
#include "marlin/sim/dumbbell.hpp"
#include "marlin/sim/packet.hpp"
#include "marlin/sim/simulator.hpp"
#include "marlin/transport/cwnd.hpp"
#include "marlin/transport/rtt.hpp"
#include "marlin/transport/stats.hpp"

namespace marlin::transport {

struct AckInfo {
  TimeUs now = 0;
  std::uint32_t acked_bytes = 0;  // payload of the acknowledged packet
  bool new_data = false;          // first acknowledgement of that chunk
  TimeUs rtt = -1;                // -1 when the ack produced no sample
  const RttState* rtt_state = nullptr;
};

struct LossInfo {
  TimeUs now = 0;
  std::uint64_t seq = 0;       // packet declared lost
  std::uint64_t next_seq = 0;  // first sequence number not yet used
};

/// Window controller plugged into a Connection. The learning agent drives the
/// window directly and uses no controller.
class CongestionControl {
 public:
  virtual ~CongestionControl() = default;
  virtual void on_ack(CwndState&, const AckInfo&) {}
  virtual void on_loss(CwndState&, const LossInfo&) {}
  virtual std::string_view name() const = 0;
};

struct ConnectionConfig {
  std::uint32_t payload = 1200;
  std::uint32_t ack_size = 40;
  TimeUs processing_time = 0;  // receiver delay before the ack leaves
  std::uint32_t initial_cwnd = 4096;
  std::uint32_t cwnd_floor = 2048;
  std::uint32_t cwnd_cap = 51200;
  RtoPolicy rto{};

  void validate() const {
    if (payload == 0) throw ConfigError("agent.payload_b must be > 0");
    if (processing_time < 0) throw ConfigError("network.ack_processing_us must be >= 0");
    if (cwnd_floor == 0 || cwnd_floor > cwnd_cap) throw ConfigError("agent.cwnd_floor_b must be in (0, cwnd_cap_b]");
  }
};

/// Reliable message transport over the dumbbell: window-gated sending,
/// per-packet acknowledgements carrying receiver processing time,
/// timeout-driven retransmission under fresh sequence numbers.
///
/// Callbacks capture `this`; a Connection is pinned in memory and must not
/// outlive the simulator it was registered with.
class Connection {
 public:
  using AckObserver = std::function<void(const AckFrame&, TimeUs)>;

  Connection(sim::Simulator& sim, sim::Dumbbell& net, sim::FlowPath path, ConnectionConfig cfg,
             CongestionControl* cc = nullptr)
      : sim_(sim), net_(net), cfg_(cfg), cc_(cc) {
    cfg_.validate();
    cwnd_ = CwndState::with_limits(cfg_.initial_cwnd, cfg_.cwnd_floor, cfg_.cwnd_cap);
    rto_ = cfg_.rto.initial;
    flow_ = net_.add_flow(path, [this](const Packet& p) { receive(p); });
  }

  Connection(const Connection&) = delete;
  Connection& operator=(const Connection&) = delete;

  FlowId flow() const noexcept { return flow_; }
  const ConnectionConfig& config() const noexcept { return cfg_; }

  // --- application side -------------------------------------------------

  /// Appends one message; it is cut into payload-sized chunks.
  void write(std::uint64_t bytes) {
    while (bytes > 0) {
      const auto n = static_cast<std::uint32_t>(std::min<std::uint64_t>(bytes, cfg_.payload));
      chunk_size_.push_back(n);
      written_ += n;
      bytes -= n;
    }
    try_send();
  }

  /// Endless backlog of full-size chunks (bulk sender).
  void set_unlimited(bool on) {
    unlimited_ = on;
    if (on) try_send();
  }

  /// Drops written data that has never been transmitted.
  void discard_unsent() {
    for (std::size_t k = next_chunk_; k < chunk_size_.size(); ++k) written_ -= chunk_size_[k];
    chunk_size_.resize(next_chunk_);
  }

  std::uint64_t written_bytes() const noexcept { return written_; }
  std::uint64_t unsent_bytes() const noexcept {
    std::uint64_t n = 0;
    for (std::size_t k = next_chunk_; k < chunk_size_.size(); ++k) n += chunk_size_[k];
    return n;
  }
  bool complete() const noexcept { return !unlimited_ && written_ > 0 && acked_unique_ == written_; }
  TimeUs completion_time() const noexcept { return completion_time_; }

  // --- sender -----------------------------------------------------------

  /// Emits new chunks while the window allows. Returns the number emitted.
  std::size_t try_send() {
    std::size_t emitted = 0;
    for (;;) {
      if (next_chunk_ == chunk_size_.size()) {
        if (!unlimited_) break;
        chunk_size_.push_back(cfg_.payload);
        written_ += cfg_.payload;
      }
      const std::uint32_t size = chunk_size_[next_chunk_];
      if (cwnd_.bytes_in_flight + size > cwnd_.cwnd) break;
      chunk_acked_.push_back(false);
      emit(next_chunk_++, false);
      ++emitted;
    }
    return emitted;
  }

  /// Processes one acknowledgement: RTT sample, window release, controller.
  void on_ack(const AckFrame& ack, TimeUs now) {
    ++acks_received_;
    const std::uint64_t seq = ack.last_received_seq;
    if (seq < base_seq_ || seq >= next_seq_) {
      ++anomalies_;
      return;
    }
    TxRecord& rec = records_[seq - base_seq_];
    TimeUs sample = -1;
    const TimeUs rtt = now - rec.tx_time - ack.processing_time;
    if (rtt > 0) {
      sample = rtt;
      rtt_.add_sample(rtt);
      rto_ = cfg_.rto.from_state(rtt_);
    } else {
      ++anomalies_;
    }
    if (rec.state == TxState::in_flight) cwnd_.bytes_in_flight -= rec.size;
    rec.state = TxState::acked;
    bool new_data = false;
    if (!chunk_acked_[rec.chunk]) {
      chunk_acked_[rec.chunk] = true;
      acked_unique_ += rec.size;
      new_data = true;
      if (complete()) completion_time_ = now;
    }
    acked_all_ += rec.size;
    last_ack_cumulative_ = std::max(last_ack_cumulative_, ack.cumulative_acked_bytes);
    ack_log_.push_back(AckLog{now, rec.size, new_data, sample});
    if (cc_) cc_->on_ack(cwnd_, AckInfo{now, rec.size, new_data, sample, &rtt_});
    trim_records(now);
    try_send();
    rearm_timer();
    for (auto& obs : observers_) obs(ack, now);
  }

  /// Retransmission timeout for one packet: re-emit under a new sequence
  /// number and back the timer off.
  void on_timeout(std::uint64_t seq, TimeUs now) {
    expire(seq, now);
    rto_ = cfg_.rto.backoff(rto_);
    rearm_timer();
  }

  /// Table-order features over [since, until).
  NetStatsWindow window_stats(TimeUs since, TimeUs until) const {
    if (until < since) throw std::invalid_argument("window_stats: until < since");
    NetStatsWindow w;
    std::uint64_t sent = 0, fresh = 0, acked = 0, acked_new = 0, pkts = 0, retx = 0;
    auto s0 = std::lower_bound(send_log_.begin(), send_log_.end(), since,
                               [](const SendLog& l, TimeUs t) { return l.t < t; });
    for (auto it = s0; it != send_log_.end() && it->t < until; ++it) {
      sent += it->size;
      ++pkts;
      if (it->retransmission) ++retx; else fresh += it->size;
    }
    bool have_rtt = false;
    TimeUs last = 0, lo = 0, hi = 0;
    auto a0 = std::lower_bound(ack_log_.begin(), ack_log_.end(), since,
                               [](const AckLog& l, TimeUs t) { return l.t < t; });
    for (auto it = a0; it != ack_log_.end() && it->t < until; ++it) {
      acked += it->size;
      if (it->new_data) acked_new += it->size;
      if (it->rtt > 0) {
        if (!have_rtt) lo = hi = it->rtt;
        lo = std::min(lo, it->rtt);
        hi = std::max(hi, it->rtt);
        last = it->rtt;
        have_rtt = true;
      }
    }
    if (!have_rtt) last = lo = hi = rtt_.last_rtt;
    const double secs = to_seconds(until - since);
    w.cwnd_kb = cwnd_.cwnd / kBytesPerKB;
    w.kb_sent = sent / kBytesPerKB;
    w.new_kb_sent = fresh / kBytesPerKB;
    w.acked_kb = acked / kBytesPerKB;
    w.packets_sent = static_cast<double>(pkts);
    w.retransmissions = static_cast<double>(retx);
    w.throughput_kbps = secs > 0 ? w.kb_sent / secs : 0.0;
    w.goodput_kbps = secs > 0 ? (acked_new / kBytesPerKB) / secs : 0.0;
    w.unacked_kb = cwnd_.bytes_in_flight / kBytesPerKB;
    w.last_rtt_ms = to_ms(last);
    w.min_rtt_ms = to_ms(lo);
    w.max_rtt_ms = to_ms(hi);
    w.srtt_ms = rtt_.srtt / kUsPerMs;
    const double var_ms = rtt_.rtt_var / kUsPerMs;
    w.var_rtt_ms2 = var_ms * var_ms;
    return w;
  }

  /// Forgets send/ack log entries older than `before`.
  void prune_logs(TimeUs before) {
    while (!send_log_.empty() && send_log_.front().t < before) send_log_.pop_front();
    while (!ack_log_.empty() && ack_log_.front().t < before) ack_log_.pop_front();
  }

  void add_ack_observer(AckObserver obs) { observers_.push_back(std::move(obs)); }

  CwndState& cwnd() noexcept { return cwnd_; }
  const CwndState& cwnd() const noexcept { return cwnd_; }
  const RttState& rtt() const noexcept { return rtt_; }
  TimeUs rto() const noexcept { return rto_; }

  std::uint64_t bytes_sent() const noexcept { return bytes_sent_; }
  std::uint64_t new_bytes_sent() const noexcept { return new_bytes_sent_; }
  std::uint64_t packets_sent() const noexcept { return packets_sent_; }
  std::uint64_t retransmissions() const noexcept { return retransmissions_; }
  std::uint64_t acked_bytes() const noexcept { return acked_unique_; }
  std::uint64_t acked_bytes_all() const noexcept { return acked_all_; }
  std::uint64_t receiver_contiguous_bytes() const noexcept { return last_ack_cumulative_; }
  std::uint64_t acks_received() const noexcept { return acks_received_; }
  std::uint64_t anomalies() const noexcept { return anomalies_; }
  std::uint64_t next_seq() const noexcept { return next_seq_; }

 private:
  enum class TxState : std::uint8_t { in_flight, acked, lost };
  struct TxRecord {
    TimeUs tx_time;
    std::uint64_t chunk;
    std::uint32_t size;
    TxState state;
  };
  struct SendLog {
    TimeUs t;
    std::uint32_t size;
    bool retransmission;
  };
  struct AckLog {
    TimeUs t;
    std::uint32_t size;
    bool new_data;
    TimeUs rtt;
  };

  void emit(std::uint64_t chunk, bool retransmission) {
    const TimeUs now = sim_.now();
    const std::uint32_t size = chunk_size_[chunk];
    const std::uint64_t seq = next_seq_++;
    records_.push_back(TxRecord{now, chunk, size, TxState::in_flight});
    cwnd_.bytes_in_flight += size;
    ++packets_sent_;
    bytes_sent_ += size;
    if (retransmission) ++retransmissions_; else new_bytes_sent_ += size;
    send_log_.push_back(SendLog{now, size, retransmission});
    Packet p;
    p.flow_id = flow_;
    p.seq = seq;
    p.size = size;
    p.tx_time = now;
    p.kind = PacketKind::data;
    p.chunk = chunk;
    net_.transmit(p);
    if (!timer_armed_) rearm_timer();
  }

  void expire(std::uint64_t seq, TimeUs now) {
    if (seq < base_seq_ || seq >= next_seq_) return;
    TxRecord& rec = records_[seq - base_seq_];
    if (rec.state != TxState::in_flight) return;
    rec.state = TxState::lost;
    cwnd_.bytes_in_flight -= rec.size;
    const std::uint64_t chunk = rec.chunk;
    if (cc_) cc_->on_loss(cwnd_, LossInfo{now, seq, next_seq_});
    if (!chunk_acked_[chunk]) emit(chunk, true);
  }

  // Index into records_ of the oldest in-flight packet, or records_.size().
  std::size_t oldest_in_flight() {
    while (scan_from_ < records_.size() && records_[scan_from_].state != TxState::in_flight) ++scan_from_;
    return scan_from_;
  }

  void on_timer() {
    timer_armed_ = false;
    const TimeUs now = sim_.now();
    std::vector<std::uint64_t> expired;
    for (std::size_t i = oldest_in_flight(); i < records_.size(); ++i) {
      const TxRecord& r = records_[i];
      if (r.state != TxState::in_flight) continue;
      if (r.tx_time + rto_ > now) break;
      expired.push_back(base_seq_ + i);
    }
    if (!expired.empty()) {
      for (auto seq : expired) expire(seq, now);
      rto_ = cfg_.rto.backoff(rto_);
    }
    rearm_timer();
  }

  void rearm_timer() {
    const std::size_t i = oldest_in_flight();
    if (i == records_.size()) {
      if (timer_armed_) sim_.cancel(timer_id_);
      timer_armed_ = false;
      return;
    }
    const TimeUs at = std::max(sim_.now(), records_[i].tx_time + rto_);
    if (timer_armed_ && timer_at_ == at) return;
    if (timer_armed_) sim_.cancel(timer_id_);
    timer_at_ = at;
    timer_id_ = sim_.schedule(at, [this] { on_timer(); });
    timer_armed_ = true;
  }

  // Records are kept while in flight, and for a grace period afterwards so
  // that late acknowledgements of timed-out packets still yield samples.
  void trim_records(TimeUs now) {
    const TimeUs horizon = 2 * cfg_.rto.ceiling;
    while (!records_.empty()) {
      const TxRecord& r = records_.front();
      const bool done = r.state == TxState::acked || (r.state == TxState::lost && r.tx_time + horizon < now);
      if (!done) break;
      records_.pop_front();
      ++base_seq_;
      if (scan_from_ > 0) --scan_from_;
    }
  }

  void receive(const Packet& p) {
    if (p.chunk >= rx_received_.size()) rx_received_.resize(p.chunk + 1, false);
    rx_received_[p.chunk] = true;
    while (rx_contig_ < rx_received_.size() && rx_received_[rx_contig_]) {
      rx_contig_bytes_ += chunk_size_[rx_contig_];
      ++rx_contig_;
    }
    Packet ack;
    ack.flow_id = flow_;
    ack.seq = p.seq;
    ack.size = cfg_.ack_size;
    ack.kind = PacketKind::ack;
    ack.ack = AckFrame{p.seq, cfg_.processing_time, rx_contig_bytes_};
    auto send = [this, ack] {
      Packet a = ack;
      a.tx_time = sim_.now();
      net_.send_reverse(a, [this](const Packet& back) { on_ack(back.ack, sim_.now()); });
    };
    if (cfg_.processing_time == 0) send(); else sim_.schedule_in(cfg_.processing_time, send);
  }

  sim::Simulator& sim_;
  sim::Dumbbell& net_;
  ConnectionConfig cfg_;
  CongestionControl* cc_;
  FlowId flow_ = 0;

  CwndState cwnd_;
  RttState rtt_;
  TimeUs rto_ = 0;

  bool unlimited_ = false;
  std::vector<std::uint32_t> chunk_size_;
  std::vector<bool> chunk_acked_;
  std::uint64_t next_chunk_ = 0;
  std::uint64_t written_ = 0;

  std::deque<TxRecord> records_;
  std::uint64_t base_seq_ = 0;
  std::uint64_t next_seq_ = 0;
  std::size_t scan_from_ = 0;

  bool timer_armed_ = false;
  TimeUs timer_at_ = 0;
  sim::EventId timer_id_ = 0;

  std::deque<SendLog> send_log_;
  std::deque<AckLog> ack_log_;

  std::uint64_t bytes_sent_ = 0;
  std::uint64_t new_bytes_sent_ = 0;
  std::uint64_t packets_sent_ = 0;
  std::uint64_t retransmissions_ = 0;
  std::uint64_t acked_unique_ = 0;
  std::uint64_t acked_all_ = 0;
  std::uint64_t last_ack_cumulative_ = 0;
  std::uint64_t acks_received_ = 0;
  std::uint64_t anomalies_ = 0;
  TimeUs completion_time_ = -1;

  std::vector<bool> rx_received_;
  std::uint64_t rx_contig_ = 0;
  std::uint64_t rx_contig_bytes_ = 0;

  std::vector<AckObserver> observers_;
};

}  // namespace marlin::transport
