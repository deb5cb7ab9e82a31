#pragma once

#include <algorithm>
#include <cstdint>
#include <functional>
#include <random>
#include <stdexcept>
#include <string>
#include <unordered_set>
#include <vector>

#include "marlin/common.hpp"

namespace marlin::sim {

using EventId = std::uint64_t;

/// Single-threaded discrete-event loop with an integer microsecond clock.
///
/// Events with equal timestamps fire in insertion order. All randomness is
/// derived from the seed passed at construction: `rng()` is the master
/// stream and `fork_rng(tag)` derives independent, reproducible sub-streams
/// so that one component's draws never perturb another's.
class Simulator {
 public:
  using Callback = std::function<void()>;

  explicit Simulator(std::uint64_t seed = 1) : seed_(seed), rng_(seed) {}

  Simulator(const Simulator&) = delete;
  Simulator& operator=(const Simulator&) = delete;

  TimeUs now() const noexcept { return now_; }
  std::uint64_t seed() const noexcept { return seed_; }

  EventId schedule(TimeUs at, Callback fn) {
    if (at < now_) {
      throw std::invalid_argument("cannot schedule event at t=" + std::to_string(at) +
                                  "us before now=" + std::to_string(now_) + "us");
    }
    const EventId id = next_id_++;
    heap_.push_back(Entry{at, id, std::move(fn)});
    live_.insert(id);
    std::push_heap(heap_.begin(), heap_.end(), Later{});
    return id;
  }

  EventId schedule_in(TimeUs delay, Callback fn) { return schedule(now_ + delay, std::move(fn)); }

  /// Lazily cancels a pending event. Cancelling a fired or unknown id is a no-op.
  void cancel(EventId id) { live_.erase(id); }

  /// Fires the next pending event. Returns false when the queue is empty.
  bool step() {
    while (!heap_.empty()) {
      std::pop_heap(heap_.begin(), heap_.end(), Later{});
      Entry e = std::move(heap_.back());
      heap_.pop_back();
      if (live_.erase(e.id) == 0) continue;
      now_ = e.at;
      ++processed_;
      e.fn();
      return true;
    }
    return false;
  }

  /// Fires every event with timestamp <= t, then advances the clock to t.
  void run_until(TimeUs t) {
    for (;;) {
      drop_cancelled_front();
      if (heap_.empty() || heap_.front().at > t) break;
      step();
    }
    if (t > now_) now_ = t;
  }

  /// Timestamp of the next live event, or -1 when idle.
  TimeUs next_time() {
    drop_cancelled_front();
    return heap_.empty() ? TimeUs{-1} : heap_.front().at;
  }

  bool empty() const noexcept { return live_.empty(); }
  std::size_t pending() const noexcept { return live_.size(); }
  std::uint64_t processed() const noexcept { return processed_; }

  std::mt19937_64& rng() noexcept { return rng_; }

  std::mt19937_64 fork_rng(std::uint64_t tag) const {
    std::seed_seq seq{static_cast<std::uint32_t>(seed_), static_cast<std::uint32_t>(seed_ >> 32),
                      static_cast<std::uint32_t>(tag), static_cast<std::uint32_t>(tag >> 32),
                      0x6d61726cU};
    return std::mt19937_64(seq);
  }

 private:
  void drop_cancelled_front() {
    while (!heap_.empty() && !live_.contains(heap_.front().id)) {
      std::pop_heap(heap_.begin(), heap_.end(), Later{});
      heap_.pop_back();
    }
  }

  struct Entry {
    TimeUs at;
    EventId id;
    Callback fn;
  };
  struct Later {
    bool operator()(const Entry& a, const Entry& b) const noexcept {
      return a.at != b.at ? a.at > b.at : a.id > b.id;
    }
  };

  std::uint64_t seed_;
  std::mt19937_64 rng_;
  TimeUs now_ = 0;
  EventId next_id_ = 0;
  std::uint64_t processed_ = 0;
  std::vector<Entry> heap_;
  std::unordered_set<EventId> live_;
};

/// Well-known sub-stream tags for Simulator::fork_rng.
namespace stream {
inline constexpr std::uint64_t kAgentLoss = 1;
inline constexpr std::uint64_t kMice = 2;
inline constexpr std::uint64_t kPermutation = 3;
inline constexpr std::uint64_t kFlowLoss = 100;  // + flow id
}  // namespace stream

}  // namespace marlin::sim
