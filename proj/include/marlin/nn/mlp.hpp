#pragma once

#include <cmath>
#include <cstddef>
#include <random>
#include <stdexcept>
#include <string>
#include <vector>

#include <Eigen/Dense>

namespace marlin::nn {

template <class S>
using Mat = Eigen::Matrix<S, Eigen::Dynamic, Eigen::Dynamic>;
template <class S>
using Vec = Eigen::Matrix<S, Eigen::Dynamic, 1>;

/// Fully connected network, ReLU between layers, linear output.
/// Samples are columns: input is (in x batch), output (out x batch).
///
/// forward() caches activations for one subsequent backward().
template <class S>
class Mlp {
 public:
  struct Grads {
    std::vector<Mat<S>> w;
    std::vector<Mat<S>> b;  // (out x 1)
  };

  Mlp() = default;
  Mlp(std::size_t in, const std::vector<std::size_t>& hidden, std::size_t out) {
    std::vector<std::size_t> sizes{in};
    sizes.insert(sizes.end(), hidden.begin(), hidden.end());
    sizes.push_back(out);
    for (std::size_t l = 0; l + 1 < sizes.size(); ++l) {
      w_.push_back(Mat<S>::Zero(static_cast<Eigen::Index>(sizes[l + 1]), static_cast<Eigen::Index>(sizes[l])));
      b_.push_back(Mat<S>::Zero(static_cast<Eigen::Index>(sizes[l + 1]), 1));
    }
  }

  /// Uniform(+-1/sqrt(fan_in)) for weights and biases; the output layer is
  /// additionally scaled by `last_scale`.
  template <class Rng>
  void init(Rng& rng, double last_scale = 1.0) {
    for (std::size_t l = 0; l < w_.size(); ++l) {
      const double bound = 1.0 / std::sqrt(static_cast<double>(w_[l].cols()));
      std::uniform_real_distribution<double> u(-bound, bound);
      const double scale = l + 1 == w_.size() ? last_scale : 1.0;
      for (Eigen::Index i = 0; i < w_[l].size(); ++i) w_[l].data()[i] = static_cast<S>(u(rng) * scale);
      for (Eigen::Index i = 0; i < b_[l].size(); ++i) b_[l].data()[i] = static_cast<S>(u(rng) * scale);
    }
  }

  std::size_t layers() const noexcept { return w_.size(); }
  std::size_t in_dim() const { return static_cast<std::size_t>(w_.front().cols()); }
  std::size_t out_dim() const { return static_cast<std::size_t>(w_.back().rows()); }
  std::vector<std::size_t> shape() const {
    std::vector<std::size_t> s{in_dim()};
    for (const auto& w : w_) s.push_back(static_cast<std::size_t>(w.rows()));
    return s;
  }

  Mat<S>& weight(std::size_t l) { return w_[l]; }
  const Mat<S>& weight(std::size_t l) const { return w_[l]; }
  Mat<S>& bias(std::size_t l) { return b_[l]; }
  const Mat<S>& bias(std::size_t l) const { return b_[l]; }

  const Mat<S>& forward(const Mat<S>& x) {
    if (static_cast<std::size_t>(x.rows()) != in_dim()) throw std::invalid_argument("Mlp::forward: bad input rows");
    acts_.resize(w_.size() + 1);
    acts_[0] = x;
    for (std::size_t l = 0; l < w_.size(); ++l) {
      acts_[l + 1].noalias() = w_[l] * acts_[l];
      acts_[l + 1].colwise() += b_[l].col(0);
      if (l + 1 < w_.size()) acts_[l + 1] = acts_[l + 1].cwiseMax(S(0));
    }
    return acts_.back();
  }

  /// Forward pass without touching the cache.
  Mat<S> infer(const Mat<S>& x) const {
    Mat<S> h = x;
    for (std::size_t l = 0; l < w_.size(); ++l) {
      Mat<S> z = w_[l] * h;
      z.colwise() += b_[l].col(0);
      h = l + 1 < w_.size() ? Mat<S>(z.cwiseMax(S(0))) : z;
    }
    return h;
  }

  /// Backpropagates dL/dy through the cached forward pass. Weight gradients
  /// go to `g` when given; the gradient with respect to the last
  /// `tail_rows` input rows goes to `dx_tail` when given.
  void backward(const Mat<S>& dy, Grads* g, Mat<S>* dx_tail = nullptr, std::size_t tail_rows = 0) const {
    if (acts_.size() != w_.size() + 1) throw std::logic_error("Mlp::backward without forward");
    if (g) {
      g->w.resize(w_.size());
      g->b.resize(w_.size());
    }
    Mat<S> dz = dy;
    for (std::size_t l = w_.size(); l-- > 0;) {
      if (g) {
        g->w[l].noalias() = dz * acts_[l].transpose();
        g->b[l] = dz.rowwise().sum();
      }
      if (l > 0) {
        Mat<S> da = w_[l].transpose() * dz;
        dz = (acts_[l].array() > S(0)).select(da, S(0));
      } else if (dx_tail && tail_rows > 0) {
        const auto t = static_cast<Eigen::Index>(tail_rows);
        *dx_tail = w_[0].rightCols(t).transpose() * dz;
      }
    }
  }

  /// target <- (1 - tau) * target + tau * this, parameter-wise.
  void polyak_into(Mlp& target, S tau) const {
    for (std::size_t l = 0; l < w_.size(); ++l) {
      target.w_[l] = (S(1) - tau) * target.w_[l] + tau * w_[l];
      target.b_[l] = (S(1) - tau) * target.b_[l] + tau * b_[l];
    }
  }

  std::size_t num_params() const {
    std::size_t n = 0;
    for (std::size_t l = 0; l < w_.size(); ++l) n += static_cast<std::size_t>(w_[l].size() + b_[l].size());
    return n;
  }

  Vec<S> flat() const {
    Vec<S> v(static_cast<Eigen::Index>(num_params()));
    Eigen::Index k = 0;
    for (std::size_t l = 0; l < w_.size(); ++l) {
      v.segment(k, w_[l].size()) = Eigen::Map<const Vec<S>>(w_[l].data(), w_[l].size());
      k += w_[l].size();
      v.segment(k, b_[l].size()) = Eigen::Map<const Vec<S>>(b_[l].data(), b_[l].size());
      k += b_[l].size();
    }
    return v;
  }

  void set_flat(const Vec<S>& v) {
    if (static_cast<std::size_t>(v.size()) != num_params()) throw std::invalid_argument("Mlp::set_flat: size");
    Eigen::Index k = 0;
    for (std::size_t l = 0; l < w_.size(); ++l) {
      Eigen::Map<Vec<S>>(w_[l].data(), w_[l].size()) = v.segment(k, w_[l].size());
      k += w_[l].size();
      Eigen::Map<Vec<S>>(b_[l].data(), b_[l].size()) = v.segment(k, b_[l].size());
      k += b_[l].size();
    }
  }

  static Vec<S> flat(const Grads& g) {
    Eigen::Index n = 0;
    for (std::size_t l = 0; l < g.w.size(); ++l) n += g.w[l].size() + g.b[l].size();
    Vec<S> v(n);
    Eigen::Index k = 0;
    for (std::size_t l = 0; l < g.w.size(); ++l) {
      v.segment(k, g.w[l].size()) = Eigen::Map<const Vec<S>>(g.w[l].data(), g.w[l].size());
      k += g.w[l].size();
      v.segment(k, g.b[l].size()) = Eigen::Map<const Vec<S>>(g.b[l].data(), g.b[l].size());
      k += g.b[l].size();
    }
    return v;
  }

  template <class T>
  Mlp<T> cast() const {
    Mlp<T> out;
    for (std::size_t l = 0; l < w_.size(); ++l) {
      out.w_.push_back(w_[l].template cast<T>());
      out.b_.push_back(b_[l].template cast<T>());
    }
    return out;
  }

  bool all_finite() const {
    for (std::size_t l = 0; l < w_.size(); ++l)
      if (!w_[l].allFinite() || !b_[l].allFinite()) return false;
    return true;
  }

 private:
  template <class>
  friend class Mlp;

  std::vector<Mat<S>> w_;
  std::vector<Mat<S>> b_;
  mutable std::vector<Mat<S>> acts_;
};

/// Adam with bias correction, one state slot per parameter tensor.
template <class S>
class Adam {
 public:
  explicit Adam(double lr = 3e-4, double beta1 = 0.9, double beta2 = 0.999, double eps = 1e-8)
      : lr_(lr), b1_(beta1), b2_(beta2), eps_(eps) {}

  double lr() const noexcept { return lr_; }
  std::int64_t steps() const noexcept { return t_; }

  void step(Mlp<S>& net, const typename Mlp<S>::Grads& g) {
    begin(2 * net.layers());
    for (std::size_t l = 0; l < net.layers(); ++l) {
      update(2 * l, net.weight(l), g.w[l]);
      update(2 * l + 1, net.bias(l), g.b[l]);
    }
  }

  void step(S& scalar, S grad) {
    begin(1);
    Mat<S> p(1, 1), g(1, 1);
    p(0, 0) = scalar;
    g(0, 0) = grad;
    update(0, p, g);
    scalar = p(0, 0);
  }

  // Raw state access for checkpoints.
  std::vector<Mat<S>>& m() noexcept { return m_; }
  std::vector<Mat<S>>& v() noexcept { return v_; }
  const std::vector<Mat<S>>& m() const noexcept { return m_; }
  const std::vector<Mat<S>>& v() const noexcept { return v_; }
  void set_steps(std::int64_t t) noexcept { t_ = t; }

 private:
  void begin(std::size_t slots) {
    if (m_.size() != slots) {
      m_.assign(slots, Mat<S>());
      v_.assign(slots, Mat<S>());
    }
    ++t_;
    c1_ = S(1) - static_cast<S>(std::pow(b1_, static_cast<double>(t_)));
    c2_ = S(1) - static_cast<S>(std::pow(b2_, static_cast<double>(t_)));
  }

  void update(std::size_t slot, Mat<S>& p, const Mat<S>& g) {
    Mat<S>& m = m_[slot];
    Mat<S>& v = v_[slot];
    if (m.rows() != p.rows() || m.cols() != p.cols()) {
      m = Mat<S>::Zero(p.rows(), p.cols());
      v = Mat<S>::Zero(p.rows(), p.cols());
    }
    const S b1 = static_cast<S>(b1_), b2 = static_cast<S>(b2_);
    m = b1 * m + (S(1) - b1) * g;
    v = b2 * v + (S(1) - b2) * g.cwiseProduct(g);
    const S step = static_cast<S>(lr_) / c1_;
    const S denom_scale = S(1) / std::sqrt(c2_);
    p.array() -= step * m.array() / (v.array().sqrt() * denom_scale + static_cast<S>(eps_));
  }

  double lr_, b1_, b2_, eps_;
  std::int64_t t_ = 0;
  S c1_ = 1, c2_ = 1;
  std::vector<Mat<S>> m_;
  std::vector<Mat<S>> v_;
};

}  // namespace marlin::nn
