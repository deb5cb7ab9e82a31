#pragma once

#include <algorithm>
#include <cmath>
#include <functional>
#include <limits>
#include <memory>
#include <optional>
#include <ostream>
#include <random>
#include <string>
#include <utility>
#include <vector>

#include "marlin/cc/cubic.hpp"
#include "marlin/common.hpp"
#include "marlin/env/congestion_env.hpp"
#include "marlin/harness/config.hpp"
#include "marlin/sac/agent.hpp"
#include "marlin/sac/replay_buffer.hpp"
#include "marlin/sac/train_loop.hpp"
#include "marlin/sim/dumbbell.hpp"
#include "marlin/sim/simulator.hpp"
#include "marlin/sim/traffic.hpp"
#include "marlin/transport/connection.hpp"

namespace marlin::harness {

inline std::uint64_t agent_seed(const ExperimentConfig& c) { return env::world_seed(c.training.seed, 0xa9e47); }

inline env::EnvConfig training_env_config(const ExperimentConfig& c) {
  env::EnvConfig e = c.env;
  e.transfer_bytes = 0;
  e.record_trace = false;
  e.seed = c.training.seed;
  return e;
}

inline env::EnvConfig transfer_env_config(const ExperimentConfig& c, int run_id) {
  env::EnvConfig e = c.env;
  e.transfer_bytes = static_cast<std::uint64_t>(std::llround(c.eval.file_kb * kBytesPerKB));
  e.abort_after = from_seconds(c.eval.abort_s);
  e.record_trace = true;
  e.seed = c.eval.seed + static_cast<std::uint64_t>(run_id);
  return e;
}

// ---- training ----------------------------------------------------------------

struct TrainingOutcome {
  sac::TrainResult result;
  std::unique_ptr<sac::SacAgent> agent;
  env::RunningNormalizer normalizer;
};

/// Trains a fresh agent on the configured scenario. Metrics rows are
/// streamed to `metrics` as episodes finish.
inline TrainingOutcome run_training(const ExperimentConfig& c, std::ostream* metrics = nullptr,
                                    const std::function<void(const sac::MetricsRow&)>& progress = {}) {
  c.validate();
  env::CongestionEnv env(training_env_config(c));
  env.set_training(true);
  TrainingOutcome out{{}, std::make_unique<sac::SacAgent>(c.agent, agent_seed(c)), env::RunningNormalizer(env.obs_dim())};
  sac::ReplayBuffer buffer(c.training.buffer_size, c.env.history);
  if (metrics) sac::write_metrics_header(*metrics);
  out.result = sac::train(env, *out.agent, buffer, c.training, [&](const sac::MetricsRow& row) {
    if (metrics) sac::write_metrics_row(*metrics, row);
    if (progress) progress(row);
  });
  out.normalizer = env.normalizer();
  out.normalizer.set_frozen(true);
  return out;
}

// ---- policies ----------------------------------------------------------------

enum class PolicyKind { agent, cubic, fixed, random };

inline std::string to_string(PolicyKind k) {
  switch (k) {
    case PolicyKind::agent: return "agent";
    case PolicyKind::cubic: return "cubic";
    case PolicyKind::fixed: return "fixed";
    case PolicyKind::random: return "random";
  }
  return "?";
}

inline PolicyKind parse_baseline(const std::string& s) {
  if (s == "cubic") return PolicyKind::cubic;
  if (s == "fixed") return PolicyKind::fixed;
  if (s == "random") return PolicyKind::random;
  throw ConfigError("unknown baseline '" + s + "' (cubic, fixed or random)");
}

/// What drives the window in an evaluation. `agent` needs a trained actor
/// and the normalizer statistics it was trained with; `fixed` pins the
/// window at its cap; `random` draws uniform actions.
struct EvalPolicy {
  PolicyKind kind = PolicyKind::cubic;
  sac::SacAgent* agent = nullptr;
  const env::RunningNormalizer* normalizer = nullptr;

  static EvalPolicy of(sac::SacAgent& a, const env::RunningNormalizer& n) {
    return {PolicyKind::agent, &a, &n};
  }
  static EvalPolicy baseline(PolicyKind k) { return {k, nullptr, nullptr}; }
};

// ---- evaluation ----------------------------------------------------------------

struct TrajectoryPoint {
  double t_s = 0;
  double acked_kb = 0;
};

struct TransferResult {
  int run_id = 0;
  double completion_s = 0;  // abort time when aborted
  bool aborted = false;
  std::vector<TrajectoryPoint> trajectory;
};

namespace detail {

inline TransferResult run_env_transfer(const ExperimentConfig& c, const EvalPolicy& p, int run_id) {
  env::CongestionEnv env(transfer_env_config(c, run_id));
  if (p.kind == PolicyKind::agent) {
    if (!p.agent || !p.normalizer) throw std::invalid_argument("agent evaluation needs an agent and a normalizer");
    if (p.normalizer->dim() != env.obs_dim())
      throw ConfigError("checkpoint observation size " + std::to_string(p.normalizer->dim()) +
                        " does not match agent.history = " + std::to_string(c.env.history));
    env.normalizer() = *p.normalizer;
  }
  env.set_training(false);
  std::mt19937_64 rng(env::world_seed(env.config().seed, 0x7a4d0));
  std::uniform_real_distribution<double> uniform(-1.0, 1.0);

  TransferResult r;
  r.run_id = run_id;
  r.trajectory.push_back({0.0, 0.0});
  Eigen::VectorXf obs = env.hard_reset().obs;
  for (;;) {
    const double a = p.kind == PolicyKind::agent ? p.agent->act(obs, true) : uniform(rng);
    const env::EnvStep s = env.step(a);
    r.trajectory.push_back({to_seconds(s.info.t), s.info.acked_cum_kb});
    obs = s.obs;
    if (s.terminated) break;
  }
  r.aborted = env.aborted();
  r.completion_s = r.aborted ? c.eval.abort_s : to_seconds(env.completion_time());
  if (!r.aborted) r.trajectory.push_back({r.completion_s, c.eval.file_kb});
  return r;
}

inline TransferResult run_baseline_transfer(const ExperimentConfig& c, PolicyKind kind, int run_id) {
  const env::EnvConfig e = transfer_env_config(c, run_id);
  // Same construction order and seed as the environment's first world,
  // so every policy meets the same background realisation.
  sim::Simulator sim(env::world_seed(e.seed, 0));
  sim::Dumbbell net(sim, e.link);
  std::unique_ptr<sim::BackgroundTraffic> bg;
  if (!(e.traffic.elephant_slots.empty() && e.traffic.mice_mean_rate <= 0))
    bg = std::make_unique<sim::BackgroundTraffic>(sim, net, e.traffic);
  std::unique_ptr<transport::CongestionControl> cc;
  if (kind == PolicyKind::cubic) cc = std::make_unique<cc::CubicControl>(e.connection.payload);
  else cc = std::make_unique<cc::FixedWindowControl>(e.connection.cwnd_cap);
  transport::Connection conn(sim, net, sim::agent_path(e.link), e.connection, cc.get());

  TransferResult r;
  r.run_id = run_id;
  r.trajectory.push_back({0.0, 0.0});
  TimeUs last = 0;
  conn.add_ack_observer([&](const auto&, TimeUs now) {
    if (now - last < 50 * kUsPerMs && !conn.complete()) return;
    last = now;
    r.trajectory.push_back({to_seconds(now), conn.acked_bytes() / kBytesPerKB});
  });
  if (kind == PolicyKind::fixed) conn.cwnd().set(e.connection.cwnd_cap);
  conn.write(e.transfer_bytes);
  const TimeUs step = 100 * kUsPerMs;
  for (TimeUs t = step; !conn.complete() && sim.now() < e.abort_after; t += step)
    sim.run_until(std::min(t, e.abort_after));
  r.aborted = !conn.complete() || conn.completion_time() > e.abort_after;
  r.completion_s = r.aborted ? c.eval.abort_s : to_seconds(conn.completion_time());
  if (r.aborted) {
    r.trajectory.push_back({c.eval.abort_s, conn.acked_bytes() / kBytesPerKB});
  } else if (r.trajectory.back().acked_kb != c.eval.file_kb) {
    r.trajectory.push_back({r.completion_s, c.eval.file_kb});
  }
  return r;
}

}  // namespace detail

/// One 3 MB (by default) transfer on a fresh connection.
inline TransferResult run_transfer(const ExperimentConfig& c, const EvalPolicy& p, int run_id) {
  if (p.kind == PolicyKind::agent || p.kind == PolicyKind::random) return detail::run_env_transfer(c, p, run_id);
  return detail::run_baseline_transfer(c, p.kind, run_id);
}

inline std::vector<TransferResult> run_eval(const ExperimentConfig& c, const EvalPolicy& p,
                                            const std::function<void(const TransferResult&)>& progress = {}) {
  c.validate();
  std::vector<TransferResult> out;
  out.reserve(static_cast<std::size_t>(c.eval.runs));
  for (int i = 0; i < c.eval.runs; ++i) {
    out.push_back(run_transfer(c, p, i));
    if (progress) progress(out.back());
  }
  return out;
}

struct EvalSummary {
  int runs = 0;
  int completed = 0;
  int aborted = 0;
  double mean_s = std::numeric_limits<double>::quiet_NaN();  // completed runs only
  double best_s = std::numeric_limits<double>::quiet_NaN();
  double worst_s = std::numeric_limits<double>::quiet_NaN();
  double mean_capped_s = std::numeric_limits<double>::quiet_NaN();  // aborted runs count as the abort time
  double reference_s = std::numeric_limits<double>::quiet_NaN();
  double beat_reference = std::numeric_limits<double>::quiet_NaN();  // share of runs at or under the reference
};

inline EvalSummary summarize(const std::vector<TransferResult>& rs, std::optional<double> reference_s = std::nullopt) {
  EvalSummary s;
  s.runs = static_cast<int>(rs.size());
  double sum = 0, capped = 0;
  int beat = 0;
  for (const auto& r : rs) {
    capped += r.completion_s;
    if (r.aborted) {
      ++s.aborted;
      continue;
    }
    ++s.completed;
    sum += r.completion_s;
    s.best_s = s.completed == 1 ? r.completion_s : std::min(s.best_s, r.completion_s);
    s.worst_s = s.completed == 1 ? r.completion_s : std::max(s.worst_s, r.completion_s);
    if (reference_s && r.completion_s <= *reference_s) ++beat;
  }
  if (s.completed > 0) s.mean_s = sum / s.completed;
  if (s.runs > 0) s.mean_capped_s = capped / s.runs;
  if (reference_s && s.runs > 0) {
    s.reference_s = *reference_s;
    s.beat_reference = static_cast<double>(beat) / s.runs;
  }
  return s;
}

inline void write_results_csv(std::ostream& os, char scenario, const std::vector<TransferResult>& rs) {
  os << "run_id,scenario,completion_s,aborted\n";
  for (const auto& r : rs)
    os << r.run_id << ',' << scenario << ',' << format_double(r.completion_s) << ',' << (r.aborted ? 1 : 0) << '\n';
}

inline void write_trajectory_csv(std::ostream& os, const TransferResult& r) {
  os << "t_s,acked_cum_kb\n";
  for (const auto& p : r.trajectory) os << format_double(p.t_s) << ',' << format_double(p.acked_kb) << '\n';
}

/// Mean partial-episode return of a policy on the training environment.
/// `agent == nullptr` means uniform random actions.
inline double mean_episode_return(const ExperimentConfig& c, sac::SacAgent* agent, const env::RunningNormalizer* norm,
                                  int episodes, bool deterministic = true) {
  env::EnvConfig e = training_env_config(c);
  e.seed = env::world_seed(c.training.seed, 0x4e7a1);
  env::CongestionEnv env(e);
  if (agent) {
    if (!norm) throw std::invalid_argument("agent return needs a normalizer");
    env.normalizer() = *norm;
  }
  env.set_training(agent == nullptr);
  std::mt19937_64 rng(e.seed);
  std::uniform_real_distribution<double> uniform(-1.0, 1.0);
  double total = 0;
  for (int ep = 0; ep < episodes; ++ep) {
    Eigen::VectorXf obs = env.reset().obs;
    for (;;) {
      const double a = agent ? agent->act(obs, deterministic) : uniform(rng);
      const auto s = env.step(a);
      total += s.reward;
      obs = s.obs;
      if (s.truncated || s.terminated) break;
    }
  }
  return total / episodes;
}

}  // namespace marlin::harness
