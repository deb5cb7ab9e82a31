#pragma once

#include <algorithm>
#include <cmath>
#include <numbers>

#include "marlin/nn/mlp.hpp"

namespace marlin::sac {

using nn::Mat;
using nn::Mlp;

template <class S>
using Row = Eigen::Matrix<S, 1, Eigen::Dynamic>;

inline constexpr double kLogStdMin = -20.0;
inline constexpr double kLogStdMax = 2.0;
inline constexpr double kSquashEps = 1e-6;

/// Reparameterised tanh-Gaussian sample for a batch, plus what the
/// gradient needs. The actor head emits (mean, raw log_std) per column.
template <class S>
struct Squashed {
  Row<S> mean, log_std, std, eps, action, logp;
  Row<S> in_range;  // 1 where raw log_std was not clamped
};

template <class S>
Squashed<S> squash(const Mat<S>& head, const Row<S>& eps) {
  Squashed<S> s;
  const auto n = head.cols();
  s.mean = head.row(0);
  const Row<S> raw = head.row(1);
  s.log_std = raw.cwiseMax(S(kLogStdMin)).cwiseMin(S(kLogStdMax));
  s.in_range = ((raw.array() >= S(kLogStdMin)) && (raw.array() <= S(kLogStdMax))).template cast<S>();
  s.std = s.log_std.array().exp();
  s.eps = eps;
  const Row<S> u = s.mean.array() + s.std.array() * eps.array();
  s.action = u.array().tanh();
  const S half_log_2pi = static_cast<S>(0.5 * std::log(2.0 * std::numbers::pi));
  s.logp.resize(n);
  for (Eigen::Index i = 0; i < n; ++i) {
    const S a = s.action[i];
    s.logp[i] = S(-0.5) * eps[i] * eps[i] - s.log_std[i] - half_log_2pi - std::log(S(1) - a * a + S(kSquashEps));
  }
  return s;
}

/// Critic input: observation rows followed by one action row.
template <class S>
Mat<S> critic_input(const Mat<S>& obs, const Row<S>& act) {
  Mat<S> x(obs.rows() + 1, obs.cols());
  x.topRows(obs.rows()) = obs;
  x.row(obs.rows()) = act;
  return x;
}

/// y = r + gamma * (min(Q1', Q2')(s', a') - alpha * logp'), a' drawn with
/// `eps`. The truncation flag plays no part: truncation is never terminal.
template <class S>
Row<S> td_targets(const Mlp<S>& actor, const Mlp<S>& q1_target, const Mlp<S>& q2_target, const Mat<S>& next_obs,
                  const Row<S>& reward, const Row<S>& eps, S alpha, S gamma) {
  const auto next = squash<S>(actor.infer(next_obs), eps);
  const Mat<S> x = critic_input<S>(next_obs, next.action);
  const Row<S> q1 = q1_target.infer(x).row(0);
  const Row<S> q2 = q2_target.infer(x).row(0);
  const Row<S> qmin = q1.cwiseMin(q2);
  return reward.array() + gamma * (qmin.array() - alpha * next.logp.array());
}

template <class S>
struct CriticLoss {
  S loss = 0;
  typename Mlp<S>::Grads g1, g2;
};

/// 0.5 * (MSE(Q1, y) + MSE(Q2, y)).
template <class S>
CriticLoss<S> critic_loss(Mlp<S>& q1, Mlp<S>& q2, const Mat<S>& obs, const Row<S>& act, const Row<S>& y) {
  const Mat<S> x = critic_input<S>(obs, act);
  const S n = static_cast<S>(obs.cols());
  CriticLoss<S> out;
  const Row<S> d1 = q1.forward(x).row(0) - y;
  q1.backward(d1 / n, &out.g1);
  const Row<S> d2 = q2.forward(x).row(0) - y;
  q2.backward(d2 / n, &out.g2);
  out.loss = S(0.5) * (d1.squaredNorm() + d2.squaredNorm()) / n;
  return out;
}

template <class S>
struct ActorLoss {
  S loss = 0;
  typename Mlp<S>::Grads g;
  Row<S> logp;
  Row<S> action;
};

/// mean(alpha * logp - min(Q1, Q2)(s, a)), a reparameterised with `eps`.
/// Only the actor receives gradients.
template <class S>
ActorLoss<S> actor_loss(Mlp<S>& actor, Mlp<S>& q1, Mlp<S>& q2, const Mat<S>& obs, const Row<S>& eps, S alpha) {
  const auto s = squash<S>(actor.forward(obs), eps);
  const Mat<S> x = critic_input<S>(obs, s.action);
  const Row<S> qa = q1.forward(x).row(0);
  const Row<S> qb = q2.forward(x).row(0);
  const auto n = obs.cols();
  const S inv_n = S(1) / static_cast<S>(n);

  // dL/dQ for whichever critic supplies the minimum (ties go to Q1).
  Row<S> ga = Row<S>::Zero(n), gb = Row<S>::Zero(n);
  S loss = 0;
  for (Eigen::Index i = 0; i < n; ++i) {
    const bool first = qa[i] <= qb[i];
    (first ? ga : gb)[i] = -inv_n;
    loss += alpha * s.logp[i] - (first ? qa[i] : qb[i]);
  }
  Mat<S> da_a, da_b;
  q1.backward(ga, nullptr, &da_a, 1);
  q2.backward(gb, nullptr, &da_b, 1);
  const Row<S> dl_da = da_a.row(0) + da_b.row(0);

  Mat<S> dhead(2, n);
  for (Eigen::Index i = 0; i < n; ++i) {
    const S a = s.action[i];
    const S one_m_a2 = S(1) - a * a;
    const S g = S(2) * a * one_m_a2 / (one_m_a2 + S(kSquashEps));  // d(-log(1-a^2+d))/du
    const S sig_eps = s.std[i] * s.eps[i];
    const S dlogp_dmu = g;
    const S dlogp_dls = S(-1) + g * sig_eps;
    dhead(0, i) = alpha * inv_n * dlogp_dmu + dl_da[i] * one_m_a2;
    dhead(1, i) = (alpha * inv_n * dlogp_dls + dl_da[i] * one_m_a2 * sig_eps) * s.in_range[i];
  }
  ActorLoss<S> out;
  actor.backward(dhead, &out.g);
  out.loss = loss * inv_n;
  out.logp = s.logp;
  out.action = s.action;
  return out;
}

template <class S>
struct EntropyLoss {
  S loss = 0;
  S grad = 0;  // d loss / d log_alpha
};

/// -mean(log_alpha * (logp + target_entropy)), logp treated as a constant.
template <class S>
EntropyLoss<S> entropy_loss(S log_alpha, const Row<S>& logp, S target_entropy) {
  const S m = (logp.array() + target_entropy).mean();
  return {-log_alpha * m, -m};
}

}  // namespace marlin::sac
