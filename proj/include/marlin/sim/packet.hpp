#pragma once

#include <cstdint>

#include "marlin/common.hpp"

namespace marlin {

using FlowId = std::uint32_t;

enum class PacketKind : std::uint8_t { data, ack, background };

/// Carried by every acknowledgement. The sender subtracts `processing_time`
/// from the measured round trip so receiver-side delay does not inflate RTT.
struct AckFrame {
  std::uint64_t last_received_seq = 0;
  TimeUs processing_time = 0;
  std::uint64_t cumulative_acked_bytes = 0;
};

struct Packet {
  FlowId flow_id = 0;
  std::uint64_t seq = 0;  // strictly increasing per flow, retransmissions included
  std::uint32_t size = 0;
  TimeUs tx_time = 0;
  PacketKind kind = PacketKind::data;
  std::uint64_t chunk = 0;  // data: index of the carried message chunk
  AckFrame ack{};           // ack: feedback frame
};

}  // namespace marlin
