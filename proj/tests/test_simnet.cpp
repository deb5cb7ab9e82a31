#include <gtest/gtest.h>

#include <algorithm>
#include <cmath>
#include <functional>
#include <random>
#include <sstream>
#include <map>
#include <vector>

#include "marlin/sim/dumbbell.hpp"
#include "marlin/sim/simulator.hpp"
#include "marlin/sim/traffic.hpp"
#include "marlin/transport/connection.hpp"

using namespace marlin;
using namespace marlin::sim;

TEST(Simulator, ZeroDelayEventFiresBeforeLaterEvents) {
  Simulator sim;
  std::vector<int> order;
  sim.schedule(10, [&] { order.push_back(2); });
  sim.schedule(sim.now(), [&] { order.push_back(1); });
  while (sim.step()) {}
  EXPECT_EQ(order, (std::vector<int>{1, 2}));
}

TEST(Simulator, EqualTimestampsFireInInsertionOrder) {
  Simulator sim;
  std::vector<int> order;
  for (int i = 0; i < 5; ++i) sim.schedule(500, [&, i] { order.push_back(i); });
  sim.run_until(1000);
  EXPECT_EQ(order, (std::vector<int>{0, 1, 2, 3, 4}));
  EXPECT_EQ(sim.now(), 1000);
}

TEST(Simulator, RejectsPastTimestamps) {
  Simulator sim;
  sim.run_until(100);
  EXPECT_THROW(sim.schedule(99, [] {}), std::invalid_argument);
  EXPECT_NO_THROW(sim.schedule(100, [] {}));
}

TEST(Simulator, CancelledEventsDoNotFireAndDoNotLeakPastHorizon) {
  Simulator sim;
  int fired = 0;
  auto id = sim.schedule(5, [&] { ++fired; });
  sim.schedule(50, [&] { fired += 10; });
  sim.cancel(id);
  sim.run_until(10);
  EXPECT_EQ(fired, 0);
  EXPECT_EQ(sim.now(), 10);
  EXPECT_EQ(sim.pending(), 1u);
  sim.run_until(60);
  EXPECT_EQ(fired, 10);
}

TEST(Simulator, ClockIsMonotone) {
  Simulator sim(3);
  std::mt19937_64 rng(9);
  TimeUs last = 0;
  bool ok = true;
  for (int i = 0; i < 1000; ++i) {
    sim.schedule(std::uniform_int_distribution<TimeUs>(0, 10'000)(rng), [&] {
      ok = ok && sim.now() >= last;
      last = sim.now();
    });
  }
  while (sim.step()) {}
  EXPECT_TRUE(ok);
}

namespace {

LinkConfig clean_link() {
  LinkConfig l;
  l.loss_prob = 0.0;
  return l;
}

}  // namespace

TEST(Dumbbell, EmptyQueueDeliveryMatchesClosedForm) {
  Simulator sim;
  LinkConfig link = clean_link();
  ASSERT_DOUBLE_EQ(link.effective_rate(), 237'500.0);
  Dumbbell net(sim, link);
  TimeUs arrived = -1;
  auto f = net.add_flow(agent_path(link), [&](const Packet&) { arrived = sim.now(); });
  Packet p;
  p.flow_id = f;
  p.size = 1200;
  EXPECT_EQ(net.transmit(p), Fate::in_transit);
  while (sim.step()) {}
  // Closed form: propagation + serialisation at the effective rate.
  const double expected_us = 100'000.0 + 1200.0 / 237'500.0 * 1e6;
  EXPECT_NEAR(static_cast<double>(arrived), expected_us, 0.5);
}

TEST(Dumbbell, BackToBackPacketsAreSerialised) {
  Simulator sim;
  LinkConfig link = clean_link();
  link.one_way_delay = 0;
  Dumbbell net(sim, link);
  std::vector<TimeUs> arrivals;
  auto f = net.add_flow(FlowPath{}, [&](const Packet&) { arrivals.push_back(sim.now()); });
  for (int i = 0; i < 10; ++i) {
    Packet p;
    p.flow_id = f;
    p.seq = i;
    p.size = 2375;  // 10 ms each at 237.5 KB/s
    net.transmit(p);
  }
  while (sim.step()) {}
  ASSERT_EQ(arrivals.size(), 10u);
  for (int i = 0; i < 10; ++i) EXPECT_EQ(arrivals[i], (i + 1) * 10'000);
}

TEST(Dumbbell, CertainLossNeverDelivers) {
  Simulator sim;
  LinkConfig link = clean_link();
  link.loss_prob = 1.0;
  Dumbbell net(sim, link);
  int delivered = 0;
  auto f = net.add_flow(agent_path(link), [&](const Packet&) { ++delivered; });
  for (int i = 0; i < 100; ++i) {
    Packet p;
    p.flow_id = f;
    p.seq = i;
    p.size = 1200;
    EXPECT_EQ(net.transmit(p), Fate::dropped_loss);
  }
  while (sim.step()) {}
  EXPECT_EQ(delivered, 0);
  EXPECT_EQ(net.counters(f).lost_packets, 100u);
}

TEST(Dumbbell, FullQueueDrops) {
  Simulator sim;
  LinkConfig link = clean_link();
  link.one_way_delay = 0;
  link.queue_capacity = 6000;
  Dumbbell net(sim, link);
  net.enable_trace();
  auto f = net.add_flow(FlowPath{}, nullptr);
  for (int i = 0; i < 8; ++i) {
    Packet p;
    p.flow_id = f;
    p.seq = i;
    p.size = 1200;
    net.transmit(p);
  }
  EXPECT_EQ(net.counters(f).queue_drops, 3u);
  while (sim.step()) {}
  EXPECT_EQ(net.counters(f).delivered_packets, 5u);
  EXPECT_EQ(net.queued_bytes(), 0u);
  int drops = 0;
  for (const auto& r : net.trace()) drops += r.event == TraceEvent::drop_queue;
  EXPECT_EQ(drops, 3);
}

TEST(Dumbbell, ShaperBoundHoldsUnderOverload) {
  Simulator sim(5);
  LinkConfig link = clean_link();
  link.one_way_delay = 0;
  Dumbbell net(sim, link);
  std::vector<std::pair<TimeUs, std::uint32_t>> deliveries;
  auto f = net.add_flow(FlowPath{}, [&](const Packet& p) { deliveries.emplace_back(sim.now(), p.size); });
  // 400 KB/s offered, far above the 237.5 KB/s shaper.
  std::function<void(int)> pump = [&](int k) {
    Packet p;
    p.flow_id = f;
    p.seq = k;
    p.size = 1200;
    net.transmit(p);
    if (k < 20'000) sim.schedule(sim.now() + 3000, [&, k] { pump(k + 1); });
  };
  pump(0);
  sim.run_until(30 * kUsPerSec);
  // Slide 1 s windows in 250 ms steps.
  for (TimeUs w0 = 0; w0 + kUsPerSec <= 30 * kUsPerSec; w0 += 250'000) {
    double bytes = 0;
    for (auto [t, s] : deliveries)
      if (t >= w0 && t < w0 + kUsPerSec) bytes += s;
    EXPECT_LE(bytes, link.effective_rate() * 1.0 * 1.01) << "window at " << w0;
  }
}

TEST(Dumbbell, SenderSideLossRateMatchesConfiguration) {
  Simulator sim(11);
  LinkConfig link;
  Dumbbell net(sim, link);
  auto f = net.add_flow(agent_path(link), nullptr);
  const int n = 100'000;
  for (int i = 0; i < n; ++i) {
    Packet p;
    p.flow_id = f;
    p.seq = i;
    p.size = 100;
    net.transmit(p);
  }
  const double frac = static_cast<double>(net.counters(f).lost_packets) / n;
  EXPECT_NEAR(frac, 0.03, 0.005);
}

TEST(Dumbbell, IdenticalSeedsGiveIdenticalTraces) {
  auto run = [](std::uint64_t seed) {
    Simulator sim(seed);
    LinkConfig link;
    Dumbbell net(sim, link);
    net.enable_trace();
    BackgroundTraffic bg(sim, net, TrafficSchedule{});
    transport::Connection conn(sim, net, agent_path(link), transport::ConnectionConfig{});
    conn.set_unlimited(true);
    sim.run_until(20 * kUsPerSec);
    return net.trace();
  };
  const auto a = run(42);
  const auto b = run(42);
  const auto c = run(43);
  ASSERT_FALSE(a.empty());
  EXPECT_EQ(a, b);
  EXPECT_NE(a, c);
}

TEST(Dumbbell, DeliveredNeverExceedsSent) {
  Simulator sim(8);
  LinkConfig link;
  Dumbbell net(sim, link);
  BackgroundTraffic bg(sim, net, TrafficSchedule{});
  transport::Connection conn(sim, net, agent_path(link), transport::ConnectionConfig{});
  conn.set_unlimited(true);
  for (int step = 1; step <= 40; ++step) {
    sim.run_until(step * 500'000);
    for (FlowId f = 0; f < net.flow_count(); ++f) {
      ASSERT_LE(net.counters(f).delivered_bytes, net.counters(f).sent_bytes);
    }
  }
}

TEST(Dumbbell, TraceCsvHasDocumentedColumns) {
  std::vector<TraceRecord> t{{5, 1, 2, 1200, TraceEvent::send}, {9, 1, 2, 1200, TraceEvent::deliver}};
  std::ostringstream os;
  write_trace_csv(os, t);
  EXPECT_EQ(os.str(), "time_us,flow_id,seq,size_b,event\n5,1,2,1200,send\n9,1,2,1200,deliver\n");
}

// --- background traffic -------------------------------------------------

namespace {

// Delivered elephant bytes per (cycle, position), converted to a rate.
std::map<std::pair<std::int64_t, std::size_t>, double> slot_rates(const BackgroundRun& run) {
  std::map<std::pair<std::int64_t, std::size_t>, double> out;
  for (const auto& s : run.slots) {
    double bytes = 0;
    for (const auto& r : run.trace) {
      if (r.event != TraceEvent::send || r.time < s.start || r.time >= s.end) continue;
      if (r.flow == run.elephant_flows[s.elephant]) bytes += r.size;
    }
    out[{s.cycle, s.position}] = bytes / to_seconds(s.end - s.start);
  }
  return out;
}

}  // namespace

TEST(Background, DefaultScheduleOffersSlotRatesInOrder) {
  const TrafficSchedule sched;
  const auto run = run_background(sched, LinkConfig{}, 8 * kUsPerSec, 3);
  const auto rates = slot_rates(run);
  const double expected[] = {100'000, 200'000, 100'000, 50'000};
  for (std::size_t pos = 0; pos < 4; ++pos) {
    EXPECT_NEAR(rates.at({0, pos}), expected[pos], expected[pos] * 0.10) << "slot " << pos;
  }
}

TEST(Background, MiceAverageSeventeenKilobytesPerSecond) {
  const auto run = run_background(TrafficSchedule{}, LinkConfig{}, 60 * kUsPerSec, 17);
  double bytes = 0;
  for (const auto& r : run.trace) {
    if (r.event != TraceEvent::send) continue;
    if (std::find(run.mice_flows.begin(), run.mice_flows.end(), r.flow) != run.mice_flows.end()) bytes += r.size;
  }
  EXPECT_NEAR(bytes / 60.0, 17'000.0, 17'000.0 * 0.20);
}

TEST(Background, WithoutPermutationEveryCycleUsesTheSameOrder) {
  const auto run = run_background(TrafficSchedule{}, LinkConfig{}, 16 * kUsPerSec - 1, 1);
  ASSERT_EQ(run.slots.size(), 8u);
  for (std::size_t i = 0; i < 4; ++i) EXPECT_EQ(run.slots[i].elephant, run.slots[i + 4].elephant);
}

TEST(Background, PermutationChangesOrderEveryCycle) {
  TrafficSchedule sched;
  sched.permute = true;
  const auto run = run_background(sched, LinkConfig{}, 8 * 30 * kUsPerSec, 4);
  std::vector<std::vector<ElephantSlot>> orders;
  for (std::size_t c = 0; c * 4 < run.slots.size(); ++c) {
    std::vector<ElephantSlot> o;
    for (std::size_t p = 0; p < 4; ++p) o.push_back(sched.elephant_slots[run.slots[c * 4 + p].elephant]);
    orders.push_back(o);
  }
  ASSERT_GE(orders.size(), 30u);
  for (std::size_t c = 1; c < orders.size(); ++c) EXPECT_NE(orders[c], orders[c - 1]) << "cycle " << c;
  // 4 slots with one repeated rate: 12 distinct orders, all visited.
  std::vector<std::vector<ElephantSlot>> distinct;
  for (const auto& o : orders)
    if (std::find(distinct.begin(), distinct.end(), o) == distinct.end()) distinct.push_back(o);
  EXPECT_EQ(distinct.size(), 12u);
}

TEST(Background, DefaultElephantShareIsAboutEightySevenPercent) {
  EXPECT_NEAR(TrafficSchedule{}.elephant_share(), 0.87, 0.005);
}

// --- residual capacity ----------------------------------------------------

TEST(ResidualCapacity, EmptyLinkIsRateTimesHorizon) {
  const auto none = TrafficSchedule::none();
  EXPECT_NEAR(residual_capacity(none, LinkConfig{}, 10 * kUsPerSec), 2'375'000.0, 1e-6);
  EXPECT_EQ(residual_capacity(TrafficSchedule{}, LinkConfig{}, 0), 0.0);
}

TEST(ResidualCapacity, MatchesPerMillisecondIntegration) {
  const TrafficSchedule sched;
  const LinkConfig link;
  for (TimeUs horizon : {8 * kUsPerSec, 11'500 * kUsPerMs, 29 * kUsPerSec}) {
    // Brute force: step through every millisecond and look up the active slot.
    double oracle = 0;
    for (TimeUs t = 0; t < horizon; t += kUsPerMs) {
      const std::size_t pos = static_cast<std::size_t>((t / sched.slot_duration) % 4);
      const double load = sched.elephant_slots[pos].rate + sched.mice_mean_rate;
      oracle += std::max(0.0, link.effective_rate() - load) * 1e-3;
    }
    EXPECT_NEAR(residual_capacity(sched, link, horizon), oracle, 1e-6 * oracle) << horizon;
  }
  // Frozen value for one cycle: (120.5 + 20.5 + 120.5 + 170.5) KB/s * 2 s.
  EXPECT_NEAR(residual_capacity(sched, link, 8 * kUsPerSec), 864'000.0, 1e-6);
}

TEST(ResidualCapacity, IdealTransferTimeInvertsCapacity) {
  const TrafficSchedule sched;
  const LinkConfig link;
  EXPECT_NEAR(ideal_transfer_seconds(TrafficSchedule::none(), link, 3'072'000), 3072.0 / 237.5, 1e-9);
  const double t = ideal_transfer_seconds(sched, link, 3'072'000);
  EXPECT_NEAR(residual_capacity(sched, link, from_seconds(t)), 3'072'000.0, 300.0);
  EXPECT_GT(t, 24.0);
  EXPECT_LT(t, 32.0);
}
