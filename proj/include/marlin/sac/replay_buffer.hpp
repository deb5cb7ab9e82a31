#pragma once

#include <algorithm>
#include <cstdint>
#include <deque>
#include <random>
#include <stdexcept>
#include <vector>

#include <Eigen/Dense>

#include "marlin/env/features.hpp"
#include "marlin/sac/agent.hpp"

namespace marlin::sac {

/// Experience replay over raw feature summaries.
///
/// Observations are stacks of consecutive summaries, so each summary
/// ("frame") is stored once and stacks are rebuilt at sample time. Frames
/// belong to chains (one per simulated connection); a stack never reaches
/// back past the start of its chain and is zero-padded instead. Stacks are
/// normalised with the statistics current at sampling time.
class ReplayBuffer {
 public:
  ReplayBuffer(std::size_t capacity, std::size_t history = env::kHistory, std::size_t frame_dim = env::kSummaryDim)
      : capacity_(capacity), history_(history), frame_dim_(frame_dim),
        ring_(capacity + history + 64),
        frames_(static_cast<Eigen::Index>(frame_dim), static_cast<Eigen::Index>(ring_)),
        chain_of_(ring_, 0) {
    if (capacity == 0) throw std::invalid_argument("replay capacity must be > 0");
  }

  std::size_t capacity() const noexcept { return capacity_; }
  std::size_t size() const noexcept { return items_.size(); }
  std::size_t obs_dim() const noexcept { return history_ * frame_dim_; }
  std::uint64_t frames_written() const noexcept { return next_frame_; }

  /// Appends a frame. `new_chain` starts a fresh connection history.
  std::uint64_t add_frame(const env::Summary& s, bool new_chain) {
    if (s.size() != frame_dim_) throw std::invalid_argument("replay: frame dimension mismatch");
    const std::uint64_t g = next_frame_++;
    const std::size_t slot = g % ring_;
    for (std::size_t k = 0; k < frame_dim_; ++k) frames_(static_cast<Eigen::Index>(k), static_cast<Eigen::Index>(slot)) = static_cast<float>(s[k]);
    if (new_chain || g == 0) current_chain_ = g;
    chain_of_[slot] = current_chain_;
    evict_stale();
    return g;
  }

  /// Transition from frame `state` to frame `state + 1`, which must exist.
  void add(std::uint64_t state, float action, float reward, bool truncated) {
    if (state + 1 >= next_frame_) throw std::invalid_argument("replay: next frame not written yet");
    if (!frame_available(state)) throw std::invalid_argument("replay: state frame already overwritten");
    if (chain_start(state + 1) != chain_start(state))
      throw std::invalid_argument("replay: transition crosses a chain boundary");
    items_.push_back(Item{state, action, reward, truncated});
    if (items_.size() > capacity_) items_.pop_front();
  }

  /// Uniform draw of `n` stored transitions, with replacement.
  template <class Rng>
  std::vector<std::size_t> sample_indices(std::size_t n, Rng& rng) const {
    if (items_.empty()) throw std::logic_error("replay: sampling an empty buffer");
    std::uniform_int_distribution<std::size_t> pick(0, items_.size() - 1);
    std::vector<std::size_t> idx(n);
    for (auto& i : idx) i = pick(rng);
    return idx;
  }

  template <class Rng>
  Batch sample(std::size_t n, Rng& rng, const env::RunningNormalizer& norm) const {
    return gather(sample_indices(n, rng), norm);
  }

  Batch gather(const std::vector<std::size_t>& idx, const env::RunningNormalizer& norm) const {
    if (norm.dim() != obs_dim()) throw std::invalid_argument("replay: normalizer dimension mismatch");
    Eigen::VectorXf shift, scale;
    norm.affine(shift, scale);
    const auto n = static_cast<Eigen::Index>(idx.size());
    Batch b;
    b.obs.resize(static_cast<Eigen::Index>(obs_dim()), n);
    b.next_obs.resize(static_cast<Eigen::Index>(obs_dim()), n);
    b.action.resize(n);
    b.reward.resize(n);
    b.truncated.resize(idx.size());
    for (Eigen::Index j = 0; j < n; ++j) {
      const Item& it = items_.at(idx[static_cast<std::size_t>(j)]);
      stack_into(it.state, b.obs.col(j));
      stack_into(it.state + 1, b.next_obs.col(j));
      b.action[j] = it.action;
      b.reward[j] = it.reward;
      b.truncated[static_cast<std::size_t>(j)] = it.truncated;
    }
    auto clip = static_cast<float>(env::RunningNormalizer::kClip);
    b.obs = ((b.obs.colwise() - shift).array().colwise() * scale.array()).cwiseMax(-clip).cwiseMin(clip).matrix();
    b.next_obs = ((b.next_obs.colwise() - shift).array().colwise() * scale.array()).cwiseMax(-clip).cwiseMin(clip).matrix();
    return b;
  }

  /// Raw (unnormalised) stack ending at frame g.
  Eigen::VectorXf raw_stack(std::uint64_t g) const {
    Eigen::VectorXf x(static_cast<Eigen::Index>(obs_dim()));
    stack_into(g, x);
    return x;
  }

  struct Item {
    std::uint64_t state;
    float action;
    float reward;
    bool truncated;
  };
  const Item& item(std::size_t i) const { return items_.at(i); }

 private:
  bool frame_available(std::uint64_t g) const { return g < next_frame_ && g + ring_ >= next_frame_; }
  std::uint64_t chain_start(std::uint64_t g) const { return chain_of_[g % ring_]; }

  // Oldest frame a stack ending at g reads.
  std::uint64_t first_needed(std::uint64_t g) const {
    const std::uint64_t c = chain_start(g);
    const std::uint64_t back = g >= history_ - 1 ? g - (history_ - 1) : 0;
    return std::max(c, back);
  }

  void evict_stale() {
    while (!items_.empty() && !frame_available(first_needed(items_.front().state))) items_.pop_front();
  }

  template <class Col>
  void stack_into(std::uint64_t g, Col&& out) const {
    const std::uint64_t first = first_needed(g);
    const std::size_t live = static_cast<std::size_t>(g - first + 1);
    const std::size_t pad = history_ - live;
    const auto fd = static_cast<Eigen::Index>(frame_dim_);
    out.head(static_cast<Eigen::Index>(pad * frame_dim_)).setZero();
    for (std::size_t i = 0; i < live; ++i) {
      const std::size_t slot = (first + i) % ring_;
      out.segment(static_cast<Eigen::Index>((pad + i) * frame_dim_), fd) = frames_.col(static_cast<Eigen::Index>(slot));
    }
  }

  std::size_t capacity_;
  std::size_t history_;
  std::size_t frame_dim_;
  std::size_t ring_;
  Eigen::MatrixXf frames_;
  std::vector<std::uint64_t> chain_of_;
  std::uint64_t next_frame_ = 0;
  std::uint64_t current_chain_ = 0;
  std::deque<Item> items_;
};

}  // namespace marlin::sac
