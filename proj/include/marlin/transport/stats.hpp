#pragma once

#include <array>
#include <cstddef>
#include <ostream>
#include <string_view>

#include "marlin/common.hpp"

namespace marlin {

/// The fourteen per-interval transport features, in state-table order.
struct NetStatsWindow {
  static constexpr std::size_t kFeatures = 14;

  double cwnd_kb = 0;
  double kb_sent = 0;
  double new_kb_sent = 0;  // first transmissions only
  double acked_kb = 0;
  double packets_sent = 0;
  double retransmissions = 0;
  double throughput_kbps = 0;
  double goodput_kbps = 0;
  double unacked_kb = 0;
  double last_rtt_ms = 0;
  double min_rtt_ms = 0;
  double max_rtt_ms = 0;
  double srtt_ms = 0;
  double var_rtt_ms2 = 0;

  std::array<double, kFeatures> to_array() const {
    return {cwnd_kb,         kb_sent,      new_kb_sent, acked_kb,    packets_sent,
            retransmissions, throughput_kbps, goodput_kbps, unacked_kb, last_rtt_ms,
            min_rtt_ms,      max_rtt_ms,   srtt_ms,     var_rtt_ms2};
  }

  static NetStatsWindow from_array(const std::array<double, kFeatures>& a) {
    NetStatsWindow w;
    w.cwnd_kb = a[0];
    w.kb_sent = a[1];
    w.new_kb_sent = a[2];
    w.acked_kb = a[3];
    w.packets_sent = a[4];
    w.retransmissions = a[5];
    w.throughput_kbps = a[6];
    w.goodput_kbps = a[7];
    w.unacked_kb = a[8];
    w.last_rtt_ms = a[9];
    w.min_rtt_ms = a[10];
    w.max_rtt_ms = a[11];
    w.srtt_ms = a[12];
    w.var_rtt_ms2 = a[13];
    return w;
  }

  static constexpr std::array<std::string_view, kFeatures> names() {
    return {"cwnd_kb",         "kb_sent",      "new_kb_sent",  "acked_kb",   "packets_sent",
            "retransmissions", "throughput_kbps", "goodput_kbps", "unacked_kb", "last_rtt_ms",
            "min_rtt_ms",      "max_rtt_ms",   "srtt_ms",      "var_rtt_ms2"};
  }
};

inline void write_stats_csv_header(std::ostream& os) {
  os << "step,t_us";
  for (auto n : NetStatsWindow::names()) os << ',' << n;
  os << '\n';
}

inline void write_stats_csv_row(std::ostream& os, std::int64_t step, TimeUs t, const NetStatsWindow& w) {
  os << step << ',' << t;
  for (double v : w.to_array()) os << ',' << format_double(v);
  os << '\n';
}

}  // namespace marlin
