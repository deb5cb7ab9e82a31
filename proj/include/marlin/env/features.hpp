#pragma once

#include <algorithm>
#include <array>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <deque>
#include <span>
#include <stdexcept>
#include <vector>

#include <Eigen/Dense>

#include "marlin/transport/stats.hpp"

namespace marlin::env {

inline constexpr std::size_t kFeatures = NetStatsWindow::kFeatures;
inline constexpr std::size_t kStats = 7;
inline constexpr std::size_t kSummaryDim = kFeatures * kStats;  // 98
inline constexpr std::size_t kHistory = 10;
inline constexpr std::size_t kObsDim = kSummaryDim * kHistory;  // 980

enum Stat : std::size_t { kLast, kMean, kStd, kMin, kMax, kEma, kDiff };

/// Per-feature statistics of the snapshots taken between two decisions.
/// Layout: feature-major, index = feature * 7 + stat.
using Summary = std::array<double, kSummaryDim>;

inline double summary_at(const Summary& s, std::size_t feature, Stat stat) { return s[feature * kStats + stat]; }

/// `prev` is the previous decision's summary (zeros at the start of a
/// history); only its `last` entries are used.
inline Summary summarize(std::span<const NetStatsWindow> samples, const Summary& prev, double ema_alpha = 0.3) {
  if (samples.empty()) throw std::invalid_argument("summarize: need at least one sample");
  Summary out{};
  const double n = static_cast<double>(samples.size());
  for (std::size_t f = 0; f < kFeatures; ++f) {
    double sum = 0, lo = 0, hi = 0, ema = 0;
    for (std::size_t i = 0; i < samples.size(); ++i) {
      const double x = samples[i].to_array()[f];
      sum += x;
      if (i == 0) {
        lo = hi = ema = x;
      } else {
        lo = std::min(lo, x);
        hi = std::max(hi, x);
        ema = ema_alpha * x + (1.0 - ema_alpha) * ema;
      }
    }
    const double mean = sum / n;
    double ss = 0;
    for (const auto& w : samples) {
      const double d = w.to_array()[f] - mean;
      ss += d * d;
    }
    const double last = samples.back().to_array()[f];
    double* o = &out[f * kStats];
    o[kLast] = last;
    o[kMean] = std::clamp(mean, lo, hi);  // guard against rounding
    o[kStd] = std::sqrt(ss / n);
    o[kMin] = lo;
    o[kMax] = hi;
    o[kEma] = ema;
    o[kDiff] = last - prev[f * kStats + kLast];
  }
  return out;
}

/// The most recent summaries, oldest first, zero-padded at the front.
class HistoryStack {
 public:
  explicit HistoryStack(std::size_t depth = kHistory) : depth_(depth) {
    if (depth == 0) throw std::invalid_argument("history depth must be > 0");
  }

  void clear() { items_.clear(); }
  void push(const Summary& s) {
    items_.push_back(s);
    if (items_.size() > depth_) items_.pop_front();
  }
  std::size_t size() const noexcept { return items_.size(); }
  std::size_t depth() const noexcept { return depth_; }
  std::size_t dim() const noexcept { return depth_ * kSummaryDim; }

  /// The newest summary, or zeros when empty.
  Summary newest() const { return items_.empty() ? Summary{} : items_.back(); }

  Eigen::VectorXd stacked() const {
    Eigen::VectorXd x = Eigen::VectorXd::Zero(static_cast<Eigen::Index>(dim()));
    const std::size_t pad = depth_ - items_.size();
    for (std::size_t i = 0; i < items_.size(); ++i) {
      for (std::size_t k = 0; k < kSummaryDim; ++k) x[static_cast<Eigen::Index>((pad + i) * kSummaryDim + k)] = items_[i][k];
    }
    return x;
  }

 private:
  std::size_t depth_;
  std::deque<Summary> items_;
};

/// Exponential moving mean/variance per component.
///
/// The update rate starts at 1 and decays as 1/(n+1) until it reaches
/// 1 - decay, so the first observations are not swamped by the zero
/// initialisation.
class RunningNormalizer {
 public:
  static constexpr double kEps = 1e-8;
  static constexpr double kClip = 10.0;

  explicit RunningNormalizer(std::size_t dim = kObsDim, double decay = 0.999)
      : decay_(decay), mean_(Eigen::VectorXd::Zero(static_cast<Eigen::Index>(dim))),
        var_(Eigen::VectorXd::Ones(static_cast<Eigen::Index>(dim))) {
    if (!(decay > 0 && decay < 1)) throw std::invalid_argument("normalizer decay must be in (0, 1)");
  }

  std::size_t dim() const noexcept { return static_cast<std::size_t>(mean_.size()); }
  double decay() const noexcept { return decay_; }
  std::uint64_t count() const noexcept { return count_; }
  const Eigen::VectorXd& mean() const noexcept { return mean_; }
  const Eigen::VectorXd& var() const noexcept { return var_; }

  bool frozen() const noexcept { return frozen_; }
  void set_frozen(bool f) noexcept { frozen_ = f; }

  void update(const Eigen::VectorXd& x) {
    if (x.size() != mean_.size()) throw std::invalid_argument("normalizer: dimension mismatch");
    if (frozen_) return;
    const double rate = std::max(1.0 - decay_, 1.0 / static_cast<double>(count_ + 1));
    const Eigen::VectorXd delta = x - mean_;
    mean_ += rate * delta;
    var_ = (1.0 - rate) * (var_ + rate * delta.cwiseProduct(delta));
    ++count_;
  }

  Eigen::VectorXd normalize(const Eigen::VectorXd& x) const {
    return ((x - mean_).array() / (var_.array() + kEps).sqrt()).cwiseMax(-kClip).cwiseMin(kClip).matrix();
  }

  /// Scale/shift in single precision for batched use: y = (x - shift) * scale.
  void affine(Eigen::VectorXf& shift, Eigen::VectorXf& scale) const {
    shift = mean_.cast<float>();
    scale = (var_.array() + kEps).rsqrt().matrix().cast<float>();
  }

  void restore(Eigen::VectorXd mean, Eigen::VectorXd var, std::uint64_t count) {
    if (mean.size() != mean_.size() || var.size() != var_.size())
      throw std::invalid_argument("normalizer: restored statistics have the wrong dimension");
    mean_ = std::move(mean);
    var_ = std::move(var);
    count_ = count;
  }

 private:
  double decay_;
  Eigen::VectorXd mean_;
  Eigen::VectorXd var_;
  std::uint64_t count_ = 0;
  bool frozen_ = false;
};

}  // namespace marlin::env
