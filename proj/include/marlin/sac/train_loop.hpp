#pragma once

#include <cmath>
#include <concepts>
#include <cstdint>
#include <deque>
#include <functional>
#include <numeric>
#include <ostream>
#include <random>
#include <string>
#include <vector>

#include "marlin/common.hpp"
#include "marlin/env/congestion_env.hpp"
#include "marlin/sac/agent.hpp"
#include "marlin/sac/replay_buffer.hpp"

namespace marlin::sac {

template <class E>
concept TrainEnv = requires(E e, double a) {
  { e.reset() } -> std::same_as<env::EnvReset>;
  { e.hard_reset() } -> std::same_as<env::EnvReset>;
  { e.step(a) } -> std::same_as<env::EnvStep>;
  { e.normalizer() } -> std::convertible_to<const env::RunningNormalizer&>;
};

struct TrainConfig {
  std::int64_t total_steps = 100'000;
  std::int64_t learning_starts = 10'000;
  std::int64_t gradient_steps = -1;  // -1: as many as env steps in the episode
  std::size_t buffer_size = 500'000;
  int max_consecutive_failures = 10;
  std::uint64_t seed = 1;
  // Stop updating observation statistics once warm-up ends. A normalizer that
  // keeps tracking the current policy's state distribution moves the inputs
  // under the networks and training oscillates between regimes.
  bool freeze_norm_after_warmup = true;

  void validate() const {
    if (total_steps < 0) throw ConfigError("training.steps must be >= 0");
    if (learning_starts < 0) throw ConfigError("training.learning_starts must be >= 0");
    if (gradient_steps == 0 || gradient_steps < -1) throw ConfigError("training.gradient_steps must be -1 or > 0");
    if (buffer_size == 0) throw ConfigError("training.buffer_size must be > 0");
    if (max_consecutive_failures < 0) throw ConfigError("training.max_failures must be >= 0");
  }
};

struct MetricsRow {
  std::int64_t episode = 0;
  std::int64_t env_steps = 0;
  double mean_return_100 = 0;
  double entropy_coeff = 0;
  double critic_loss = NAN;  // NaN when no gradient step ran after this episode
  double actor_loss = NAN;
};

inline void write_metrics_header(std::ostream& os) {
  os << "episode,env_steps,mean_return_100,entropy_coeff,critic_loss,actor_loss\n";
}

inline void write_metrics_row(std::ostream& os, const MetricsRow& r) {
  auto opt = [](double v) { return std::isnan(v) ? std::string() : format_double(v); };
  os << r.episode << ',' << r.env_steps << ',' << format_double(r.mean_return_100) << ','
     << format_double(r.entropy_coeff) << ',' << opt(r.critic_loss) << ',' << opt(r.actor_loss) << '\n';
}

struct TrainResult {
  std::vector<MetricsRow> metrics;
  std::vector<double> episode_returns;
  std::int64_t env_steps = 0;
  std::int64_t gradient_steps = 0;
  std::int64_t discarded_episodes = 0;
};

/// Off-policy loop: uniform actions during warm-up, then the stochastic
/// actor. Each completed partial episode is committed to replay, then, once
/// past warm-up, followed by a burst of gradient steps. An episode during
/// which the environment fails is dropped and the environment rebuilt.
template <TrainEnv E>
TrainResult train(E& env, SacAgent& agent, ReplayBuffer& buffer, const TrainConfig& cfg,
                  const std::function<void(const MetricsRow&)>& on_episode = {}) {
  cfg.validate();
  std::mt19937_64 rng(cfg.seed ^ 0x5eedf00dULL);
  std::uniform_real_distribution<float> warmup(-1.0f, 1.0f);

  struct Staged {
    env::Summary first{};
    bool continued = false;
    std::vector<env::Summary> frames;
    std::vector<float> actions, rewards;
    std::vector<bool> truncated;
    double ret = 0;
  };

  TrainResult out;
  std::deque<double> recent;
  std::int64_t steps = 0;
  int failures = 0;
  bool have_tail = false;  // last committed frame continues into the next episode
  std::uint64_t tail = 0;

  auto start_episode = [&](const env::EnvReset& r, Staged& ep) {
    ep = Staged{};
    ep.first = r.summary;
    ep.continued = r.continued;
    return r.obs;
  };

  auto commit = [&](const Staged& ep) {
    std::uint64_t prev = (ep.continued && have_tail) ? tail : buffer.add_frame(ep.first, true);
    for (std::size_t k = 0; k < ep.frames.size(); ++k) {
      const std::uint64_t f = buffer.add_frame(ep.frames[k], false);
      buffer.add(prev, ep.actions[k], ep.rewards[k], ep.truncated[k]);
      prev = f;
    }
    tail = prev;
    have_tail = true;
  };

  // Rebuilds the environment until it produces a first observation.
  auto recover = [&](Staged& ep) {
    for (;;) {
      try {
        return start_episode(env.hard_reset(), ep);
      } catch (const EnvError&) {
        ++out.discarded_episodes;
        if (++failures > cfg.max_consecutive_failures) throw;
      }
    }
  };
  auto next_episode = [&](Staged& ep) {
    try {
      return start_episode(env.reset(), ep);
    } catch (const EnvError&) {
      ++out.discarded_episodes;
      if (++failures > cfg.max_consecutive_failures) throw;
      have_tail = false;
      return recover(ep);
    }
  };

  Staged ep;
  Eigen::VectorXf obs = next_episode(ep);
  std::int64_t ep_start_steps = 0;

  while (steps < cfg.total_steps) {
    if constexpr (requires { env.set_training(false); }) {
      if (cfg.freeze_norm_after_warmup && steps == cfg.learning_starts) env.set_training(false);
    }
    const float action = steps < cfg.learning_starts ? warmup(rng) : agent.act(obs, false);
    env::EnvStep s;
    try {
      s = env.step(action);
    } catch (const EnvError&) {
      ++out.discarded_episodes;
      if (++failures > cfg.max_consecutive_failures) throw;
      steps = ep_start_steps;
      have_tail = false;
      obs = recover(ep);
      continue;
    }
    ++steps;
    ep.frames.push_back(s.summary);
    ep.actions.push_back(action);
    ep.rewards.push_back(static_cast<float>(s.reward));
    ep.truncated.push_back(s.truncated);
    ep.ret += s.reward;
    obs = s.obs;
    if (!(s.truncated || s.terminated)) continue;

    failures = 0;
    commit(ep);
    if (s.terminated) have_tail = false;
    out.episode_returns.push_back(ep.ret);
    recent.push_back(ep.ret);
    if (recent.size() > 100) recent.pop_front();

    MetricsRow row;
    row.episode = static_cast<std::int64_t>(out.episode_returns.size());
    row.env_steps = steps;
    row.mean_return_100 = std::accumulate(recent.begin(), recent.end(), 0.0) / static_cast<double>(recent.size());
    if (steps > cfg.learning_starts) {
      const std::int64_t n = cfg.gradient_steps < 0 ? static_cast<std::int64_t>(ep.frames.size()) : cfg.gradient_steps;
      double critic = 0, actor = 0;
      for (std::int64_t g = 0; g < n; ++g) {
        const Batch b = buffer.sample(agent.config().batch_size, rng, env.normalizer());
        const Losses l = agent.train_step(b);
        critic += l.critic;
        actor += l.actor;
      }
      out.gradient_steps += n;
      row.critic_loss = critic / static_cast<double>(n);
      row.actor_loss = actor / static_cast<double>(n);
    }
    row.entropy_coeff = agent.alpha();
    out.metrics.push_back(row);
    if (on_episode) on_episode(row);

    ep_start_steps = steps;
    obs = next_episode(ep);
  }
  out.env_steps = steps;
  return out;
}

}  // namespace marlin::sac
