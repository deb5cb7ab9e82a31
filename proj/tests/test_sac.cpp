#include <gtest/gtest.h>

#include <boost/math/distributions/chi_squared.hpp>

#include <cmath>
#include <filesystem>
#include <fstream>
#include <random>

#include "marlin/sac/agent.hpp"
#include "marlin/sac/checkpoint.hpp"
#include "marlin/sac/losses.hpp"
#include "marlin/sac/replay_buffer.hpp"
#include "marlin/sac/train_loop.hpp"

using namespace marlin;
using namespace marlin::sac;

namespace {

template <class S>
Mat<S> random_mat(Eigen::Index r, Eigen::Index c, std::mt19937_64& rng, double scale = 1.0) {
  std::normal_distribution<double> n(0.0, scale);
  Mat<S> m(r, c);
  for (Eigen::Index i = 0; i < r; ++i)
    for (Eigen::Index j = 0; j < c; ++j) m(i, j) = static_cast<S>(n(rng));
  return m;
}

template <class S>
Row<S> random_row(Eigen::Index c, std::mt19937_64& rng, double scale = 1.0) {
  return random_mat<S>(1, c, rng, scale);
}

// Central differences of f over the flattened parameters of `net`.
template <class F>
nn::Vec<double> numeric_grad(Mlp<double>& net, F f, double h = 1e-6) {
  const nn::Vec<double> p = net.flat();
  nn::Vec<double> g(p.size());
  for (Eigen::Index i = 0; i < p.size(); ++i) {
    nn::Vec<double> q = p;
    q[i] += h;
    net.set_flat(q);
    const double up = f();
    q[i] -= 2 * h;
    net.set_flat(q);
    const double down = f();
    g[i] = (up - down) / (2 * h);
  }
  net.set_flat(p);
  return g;
}

double rel_err(const nn::Vec<double>& a, const nn::Vec<double>& b) {
  return (a - b).norm() / std::max(1e-12, b.norm());
}

struct Toy {
  std::mt19937_64 rng{42};
  static constexpr int kObs = 5, kN = 8;
  Mlp<double> actor{kObs, {4, 4}, 2}, q1{kObs + 1, {4, 4}, 1}, q2{kObs + 1, {4, 4}, 1};
  Mat<double> obs;
  Row<double> act, eps, y;

  Toy() {
    actor.init(rng, 0.5);
    q1.init(rng);
    q2.init(rng);
    obs = random_mat<double>(kObs, kN, rng);
    act = random_row<double>(kN, rng, 0.5).array().tanh();
    eps = random_row<double>(kN, rng);
    y = random_row<double>(kN, rng);
  }
};

}  // namespace

// ---- gradient oracles ------------------------------------------------------

TEST(SacGradients, CriticLossMatchesFiniteDifferences) {
  Toy t;
  auto cl = critic_loss<double>(t.q1, t.q2, t.obs, t.act, t.y);
  auto f = [&] { return critic_loss<double>(t.q1, t.q2, t.obs, t.act, t.y).loss; };
  EXPECT_LT(rel_err(Mlp<double>::flat(cl.g1), numeric_grad(t.q1, f)), 1e-3);
  EXPECT_LT(rel_err(Mlp<double>::flat(cl.g2), numeric_grad(t.q2, f)), 1e-3);
}

TEST(SacGradients, ActorLossMatchesFiniteDifferences) {
  Toy t;
  for (double alpha : {0.0, 0.2, 1.0}) {
    auto al = actor_loss<double>(t.actor, t.q1, t.q2, t.obs, t.eps, alpha);
    auto f = [&] { return actor_loss<double>(t.actor, t.q1, t.q2, t.obs, t.eps, alpha).loss; };
    EXPECT_LT(rel_err(Mlp<double>::flat(al.g), numeric_grad(t.actor, f)), 1e-3) << "alpha " << alpha;
  }
}

TEST(SacGradients, ActorLossLeavesCriticsUntouched) {
  Toy t;
  const auto p1 = t.q1.flat(), p2 = t.q2.flat();
  actor_loss<double>(t.actor, t.q1, t.q2, t.obs, t.eps, 0.3);
  EXPECT_EQ(t.q1.flat(), p1);
  EXPECT_EQ(t.q2.flat(), p2);
}

TEST(SacGradients, EntropyLossMatchesFiniteDifferences) {
  std::mt19937_64 rng(3);
  const Row<double> logp = random_row<double>(16, rng);
  for (double la : {-2.0, 0.0, 1.5}) {
    const double h = 1e-6;
    const double fd = (entropy_loss<double>(la + h, logp, -1.0).loss - entropy_loss<double>(la - h, logp, -1.0).loss) / (2 * h);
    EXPECT_NEAR(entropy_loss<double>(la, logp, -1.0).grad, fd, 1e-6);
  }
}

TEST(SacGradients, ClampedLogStdGetsNoGradient) {
  Toy t;
  // Push the raw log_std far below the clamp through the last bias.
  t.actor.bias(t.actor.layers() - 1)(1, 0) = -50.0;
  const auto al = actor_loss<double>(t.actor, t.q1, t.q2, t.obs, t.eps, 0.5);
  EXPECT_EQ(al.g.b.back()(1, 0), 0.0);
}

// ---- targets and squashing -------------------------------------------------

TEST(SacTargets, ZeroDiscountGivesReward) {
  Toy t;
  const Row<double> r = random_row<double>(Toy::kN, t.rng);
  const Row<double> y = td_targets<double>(t.actor, t.q1, t.q2, t.obs, r, t.eps, 0.7, 0.0);
  EXPECT_LT((y - r).cwiseAbs().maxCoeff(), 1e-12);
}

TEST(SacTargets, ZeroAlphaAndConstantCriticsGiveRewardPlusDiscountedConstant) {
  Toy t;
  for (auto* q : {&t.q1, &t.q2}) {
    for (std::size_t l = 0; l < q->layers(); ++l) q->weight(l).setZero();
    q->bias(q->layers() - 1).setConstant(3.0);
  }
  const Row<double> r = random_row<double>(Toy::kN, t.rng);
  const Row<double> y = td_targets<double>(t.actor, t.q1, t.q2, t.obs, r, t.eps, 0.0, 0.99);
  EXPECT_LT((y - (r.array() + 0.99 * 3.0).matrix()).cwiseAbs().maxCoeff(), 1e-12);
}

TEST(SacTargets, TwinCriticsAreSymmetric) {
  Toy t;
  const Row<double> r = random_row<double>(Toy::kN, t.rng);
  const Row<double> a = td_targets<double>(t.actor, t.q1, t.q2, t.obs, r, t.eps, 0.2, 0.9);
  const Row<double> b = td_targets<double>(t.actor, t.q2, t.q1, t.obs, r, t.eps, 0.2, 0.9);
  EXPECT_EQ(a, b);
}

TEST(SacTargets, MinimumOfTwinCriticsIsUsed) {
  Toy t;
  Mlp<double> hi = t.q1;
  hi.bias(hi.layers() - 1)(0, 0) += 100.0;
  const Row<double> r = Row<double>::Zero(Toy::kN);
  const Row<double> a = td_targets<double>(t.actor, t.q1, hi, t.obs, r, t.eps, 0.0, 1.0);
  const Row<double> b = td_targets<double>(t.actor, t.q1, t.q1, t.obs, r, t.eps, 0.0, 1.0);
  EXPECT_LT((a - b).cwiseAbs().maxCoeff(), 1e-12);
}

TEST(SacTargets, TruncationFlagDoesNotChangeTheUpdate) {
  SacConfig cfg;
  cfg.obs_dim = 6;
  cfg.hidden = {8};
  cfg.batch_size = 4;
  SacAgent a(cfg, 9), b(cfg, 9);
  std::mt19937_64 rng(1);
  Batch batch{random_mat<float>(6, 4, rng), random_row<float>(4, rng, 0.3), random_row<float>(4, rng),
              random_mat<float>(6, 4, rng), {0, 0, 0, 0}};
  Batch flagged = batch;
  flagged.truncated = {1, 1, 1, 1};
  const Losses la = a.train_step(batch);
  const Losses lb = b.train_step(flagged);
  EXPECT_EQ(la.critic, lb.critic);
  EXPECT_EQ(a.q1().flat(), b.q1().flat());
}

TEST(SacSquash, LogProbabilityMatchesChangeOfVariables) {
  std::mt19937_64 rng(5);
  Mat<double> head = random_mat<double>(2, 50, rng, 0.5);
  const Row<double> eps = random_row<double>(50, rng);
  const auto s = squash<double>(head, eps);
  for (Eigen::Index i = 0; i < 50; ++i) {
    const double sd = std::exp(head(1, i));
    const double u = head(0, i) + sd * eps[i];
    const double gauss = -0.5 * std::pow((u - head(0, i)) / sd, 2) - std::log(sd) - 0.5 * std::log(2 * M_PI);
    const double jac = std::log(1 - std::tanh(u) * std::tanh(u) + kSquashEps);
    EXPECT_NEAR(s.logp[i], gauss - jac, 1e-9);
  }
}

TEST(SacSquash, LogStdIsClamped) {
  Mat<double> head(2, 3);
  head << 0, 0, 0, -40, 0.5, 9;
  const auto s = squash<double>(head, Row<double>::Zero(3));
  EXPECT_DOUBLE_EQ(s.log_std[0], kLogStdMin);
  EXPECT_DOUBLE_EQ(s.log_std[1], 0.5);
  EXPECT_DOUBLE_EQ(s.log_std[2], kLogStdMax);
}

// ---- agent -----------------------------------------------------------------

namespace {
SacConfig small_config(std::size_t obs = 6) {
  SacConfig c;
  c.obs_dim = obs;
  c.hidden = {16, 16};
  c.batch_size = 32;
  return c;
}
}  // namespace

TEST(SacAgent, PolyakEndpointsAndGeometricConvergence) {
  std::mt19937_64 rng(1);
  Mlp<float> online(4, {5}, 1), target(4, {5}, 1);
  online.init(rng);
  target.init(rng);

  Mlp<float> t1 = target;
  online.polyak_into(t1, 1.0f);
  EXPECT_EQ(t1.flat(), online.flat());

  Mlp<float> t0 = target;
  online.polyak_into(t0, 0.0f);
  EXPECT_EQ(t0.flat(), target.flat());

  Mlp<double> on = online.cast<double>(), tg = target.cast<double>();
  const double d0 = (tg.flat() - on.flat()).norm();
  for (int k = 0; k < 100; ++k) on.polyak_into(tg, 0.005);
  EXPECT_NEAR((tg.flat() - on.flat()).norm(), d0 * std::pow(0.995, 100), 1e-9 * d0);
}

TEST(SacAgent, TargetsTrailOnlineCriticsAfterStep) {
  auto cfg = small_config();
  SacAgent a(cfg, 2);
  const auto before_t = a.q1_target().flat();
  std::mt19937_64 rng(1);
  Batch b{random_mat<float>(6, 32, rng), random_row<float>(32, rng, 0.3), random_row<float>(32, rng),
          random_mat<float>(6, 32, rng), std::vector<std::uint8_t>(32, 0)};
  a.train_step(b);
  const auto expected = (0.995f * before_t.array() + 0.005f * a.q1().flat().array()).matrix();
  EXPECT_LT((a.q1_target().flat() - expected).cwiseAbs().maxCoeff(), 1e-5f);
}

TEST(SacAgent, ActionsStayInRange) {
  SacAgent a(small_config(), 3);
  std::mt19937_64 rng(8);
  const Mat<float> states = random_mat<float>(6, 100000, rng, 10.0);
  const Row<float> det = a.act_batch(states);
  EXPECT_LE(det.cwiseAbs().maxCoeff(), 1.0f);
  for (int i = 0; i < 10000; ++i) {
    const float x = a.act(states.col(i), false);
    ASSERT_GT(x, -1.0f);
    ASSERT_LT(x, 1.0f);
  }
}

TEST(SacAgent, ZeroMeanGivesZeroDeterministicAction) {
  SacAgent a(small_config(), 3);
  auto& last = a.actor();
  last.weight(last.layers() - 1).setZero();
  last.bias(last.layers() - 1).setZero();
  EXPECT_EQ(a.act(Eigen::VectorXf::Random(6), true), 0.0f);
}

TEST(SacAgent, InitialActorMeansAreSmall) {
  SacAgent a(small_config(), 4);
  std::mt19937_64 rng(2);
  const Row<float> det = a.act_batch(random_mat<float>(6, 1000, rng));
  EXPECT_LT(det.cwiseAbs().maxCoeff(), 0.1f);
}

TEST(SacAgent, EntropyCoefficientTracksTargetEntropy) {
  auto cfg = small_config();
  std::mt19937_64 rng(1);
  Batch b{random_mat<float>(6, 32, rng), random_row<float>(32, rng, 0.3), random_row<float>(32, rng),
          random_mat<float>(6, 32, rng), std::vector<std::uint8_t>(32, 0)};
  // A near-deterministic policy has log-probabilities far above the
  // target, so the coefficient must grow.
  SacAgent narrow(cfg, 5);
  narrow.actor().bias(narrow.actor().layers() - 1)(1, 0) = -8.0f;
  narrow.train_step(b);
  EXPECT_GT(narrow.log_alpha(), 0.0f);
  // The initial unit-variance policy is more random than the target.
  SacAgent wide(cfg, 5);
  wide.train_step(b);
  EXPECT_LT(wide.log_alpha(), 0.0f);
}

TEST(SacAgent, EntropyCoefficientStaysPositive) {
  SacAgent a(small_config(), 5);
  a.set_log_alpha(-80.0f);
  EXPECT_GT(a.alpha(), 0.0f);
}

TEST(SacAgent, RejectsBadConfig) {
  auto c = small_config();
  c.hidden = {};
  EXPECT_THROW(SacAgent{c}, ConfigError);
  c = small_config();
  c.gamma = 1.5;
  EXPECT_THROW(SacAgent{c}, ConfigError);
}

TEST(SacAgent, DivergenceIsReported) {
  SacAgent a(small_config(), 6);
  std::mt19937_64 rng(1);
  Batch b{random_mat<float>(6, 32, rng), random_row<float>(32, rng), random_row<float>(32, rng),
          random_mat<float>(6, 32, rng), std::vector<std::uint8_t>(32, 0)};
  b.reward[3] = std::numeric_limits<float>::quiet_NaN();
  try {
    a.train_step(b);
    FAIL() << "expected TrainingDiverged";
  } catch (const TrainingDiverged& e) {
    EXPECT_NE(std::string(e.what()).find("critic"), std::string::npos);
  }
}

TEST(SacAgent, LearnsABanditTowardsTheBestAction) {
  // One-step problem: reward = -(a - 0.5)^2, gamma = 0.
  auto cfg = small_config(2);
  cfg.gamma = 0.0;
  cfg.learning_rate = 3e-3;
  cfg.batch_size = 64;
  SacAgent a(cfg, 7);
  std::mt19937_64 rng(11);
  std::uniform_real_distribution<float> u(-1, 1);
  for (int it = 0; it < 1500; ++it) {
    Batch b;
    b.obs = Mat<float>::Ones(2, 64);
    b.next_obs = b.obs;
    b.action.resize(64);
    b.reward.resize(64);
    for (int i = 0; i < 64; ++i) {
      b.action[i] = u(rng);
      b.reward[i] = -(b.action[i] - 0.5f) * (b.action[i] - 0.5f);
    }
    b.truncated.assign(64, 0);
    a.train_step(b);
  }
  EXPECT_NEAR(a.act(Eigen::VectorXf::Ones(2), true), 0.5f, 0.15f);
}

// ---- replay ----------------------------------------------------------------

namespace {
env::Summary frame_with(double v) {
  env::Summary s{};
  s.fill(v);
  return s;
}
}  // namespace

TEST(Replay, SamplingIsUniform) {
  ReplayBuffer rb(500, 2);
  auto prev = rb.add_frame(frame_with(0), true);
  for (int i = 1; i <= 500; ++i) {
    const auto g = rb.add_frame(frame_with(i), false);
    rb.add(prev, 0.f, 0.f, false);
    prev = g;
  }
  ASSERT_EQ(rb.size(), 500u);
  std::mt19937_64 rng(99);
  std::vector<double> counts(500, 0.0);
  const std::size_t draws = 200000;
  for (auto i : rb.sample_indices(draws, rng)) counts[i] += 1;
  const double expect = static_cast<double>(draws) / 500.0;
  double chi2 = 0;
  for (double c : counts) chi2 += (c - expect) * (c - expect) / expect;
  boost::math::chi_squared dist(499);
  EXPECT_GT(boost::math::cdf(boost::math::complement(dist, chi2)), 0.01);
}

TEST(Replay, StacksOldestFirstAndPadsAtChainStart) {
  ReplayBuffer rb(100, 3);
  const auto a0 = rb.add_frame(frame_with(1), true);
  const auto a1 = rb.add_frame(frame_with(2), false);
  rb.add(a0, 0.1f, 1.f, false);
  const auto b0 = rb.add_frame(frame_with(7), true);
  const auto b1 = rb.add_frame(frame_with(8), false);
  rb.add(b0, 0.2f, 2.f, false);

  const Eigen::VectorXf s = rb.raw_stack(a1);
  EXPECT_EQ(s.head(98).cwiseAbs().maxCoeff(), 0.0f);
  EXPECT_EQ(s.segment(98, 98).minCoeff(), 1.0f);
  EXPECT_EQ(s.tail(98).minCoeff(), 2.0f);

  // New chain does not see the previous one.
  const Eigen::VectorXf t = rb.raw_stack(b1);
  EXPECT_EQ(t.head(98).cwiseAbs().maxCoeff(), 0.0f);
  EXPECT_EQ(t.segment(98, 98).maxCoeff(), 7.0f);
  EXPECT_EQ(t.tail(98).maxCoeff(), 8.0f);
}

TEST(Replay, GatherBuildsStateAndNextState) {
  ReplayBuffer rb(100, 2);
  auto prev = rb.add_frame(frame_with(1), true);
  for (int i = 2; i <= 4; ++i) {
    const auto g = rb.add_frame(frame_with(i), false);
    rb.add(prev, 0.1f * static_cast<float>(i), static_cast<float>(-i), i == 4);
    prev = g;
  }
  env::RunningNormalizer norm(196);  // identity statistics
  const Batch b = rb.gather({2}, norm);
  EXPECT_FLOAT_EQ(b.obs(0, 0), 2.0f);
  EXPECT_FLOAT_EQ(b.obs(98, 0), 3.0f);
  EXPECT_FLOAT_EQ(b.next_obs(0, 0), 3.0f);
  EXPECT_FLOAT_EQ(b.next_obs(98, 0), 4.0f);
  EXPECT_FLOAT_EQ(b.action[0], 0.4f);
  EXPECT_FLOAT_EQ(b.reward[0], -4.0f);
  EXPECT_EQ(b.truncated[0], 1);
}

TEST(Replay, UsesCurrentNormalizerStatistics) {
  ReplayBuffer rb(10, 1);
  const auto a = rb.add_frame(frame_with(5), true);
  rb.add_frame(frame_with(6), false);
  rb.add(a, 0, 0, false);
  env::RunningNormalizer norm(98);
  EXPECT_FLOAT_EQ(rb.gather({0}, norm).obs(0, 0), 5.0f);
  Eigen::VectorXd x = Eigen::VectorXd::Constant(98, 5.0);
  norm.update(x);  // first update moves the mean to the sample
  EXPECT_NEAR(rb.gather({0}, norm).obs(0, 0), 0.0f, 1e-5f);
  EXPECT_FLOAT_EQ(rb.gather({0}, norm).obs(0, 0), static_cast<float>(norm.normalize(x)[0]));
}

TEST(Replay, EvictsOldestBeyondCapacity) {
  ReplayBuffer rb(50, 10);
  auto prev = rb.add_frame(frame_with(0), true);
  for (int i = 1; i <= 400; ++i) {
    const auto g = rb.add_frame(frame_with(i), false);
    rb.add(prev, 0, static_cast<float>(i), false);
    prev = g;
    ASSERT_LE(rb.size(), 50u);
  }
  EXPECT_EQ(rb.size(), 50u);
  EXPECT_EQ(rb.item(0).reward, 351.0f);
  // Every remaining stack is intact.
  for (std::size_t i = 0; i < rb.size(); ++i) {
    const auto s = rb.raw_stack(rb.item(i).state);
    EXPECT_EQ(s.tail(98).maxCoeff(), static_cast<float>(rb.item(i).state));
    EXPECT_EQ(s.head(98).maxCoeff(), static_cast<float>(rb.item(i).state - 9));
  }
}

TEST(Replay, RejectsBadTransitions) {
  ReplayBuffer rb(10, 2);
  const auto a = rb.add_frame(frame_with(1), true);
  EXPECT_THROW(rb.add(a, 0, 0, false), std::invalid_argument);  // next frame missing
  rb.add_frame(frame_with(2), true);
  EXPECT_THROW(rb.add(a, 0, 0, false), std::invalid_argument);  // crosses chains
  std::mt19937_64 rng(1);
  EXPECT_THROW(rb.sample_indices(1, rng), std::logic_error);
}

// ---- training loop ---------------------------------------------------------

namespace {

// Deterministic stand-in for the congestion environment: 200-step partial
// episodes on one endless "connection", reward = -|action - 0.3|.
struct FakeEnv {
  static constexpr std::size_t kDepth = 2;
  env::RunningNormalizer norm{kDepth * env::kSummaryDim};
  env::HistoryStack stack{kDepth};
  std::int64_t t = 0;
  int k = 0;
  bool started = false;
  std::int64_t fail_at = -1;  // env step at which step() throws once
  std::int64_t calls = 0;
  int hard_resets = 0;

  env::Summary frame() const {
    env::Summary s{};
    for (std::size_t i = 0; i < s.size(); ++i) s[i] = std::sin(0.01 * static_cast<double>(t) + static_cast<double>(i));
    return s;
  }
  Eigen::VectorXf observe() {
    stack.push(frame());
    const Eigen::VectorXd x = stack.stacked();
    norm.update(x);
    return norm.normalize(x).cast<float>();
  }
  env::EnvReset reset() {
    const bool cont = started;
    if (!started) {
      started = true;
      stack.clear();
      return {observe(), frame(), false};
    }
    k = 0;
    return {norm.normalize(stack.stacked()).cast<float>(), frame(), cont};
  }
  env::EnvReset hard_reset() {
    ++hard_resets;
    started = false;
    k = 0;
    return reset();
  }
  env::EnvStep step(double a) {
    if (calls++ == fail_at) throw EnvError("fake failure");
    ++t;
    ++k;
    env::EnvStep s;
    s.obs = observe();
    s.summary = frame();
    s.reward = -std::abs(a - 0.3);
    s.truncated = k >= 200;
    return s;
  }
  const env::RunningNormalizer& normalizer() const { return norm; }
};

SacConfig fake_config() {
  SacConfig c;
  c.obs_dim = FakeEnv::kDepth * env::kSummaryDim;
  c.hidden = {16};
  c.batch_size = 16;
  return c;
}

}  // namespace

TEST(TrainLoop, NoGradientStepsDuringWarmup) {
  FakeEnv env;
  SacAgent agent(fake_config(), 1);
  ReplayBuffer rb(20000, FakeEnv::kDepth);
  TrainConfig tc;
  tc.total_steps = 10000;
  tc.learning_starts = 10000;
  const auto r = train(env, agent, rb, tc);
  EXPECT_EQ(r.env_steps, 10000);
  EXPECT_EQ(r.gradient_steps, 0);
  EXPECT_EQ(agent.grad_steps(), 0);
  EXPECT_EQ(r.episode_returns.size(), 50u);
  EXPECT_EQ(rb.size(), 10000u);
  for (const auto& m : r.metrics) EXPECT_TRUE(std::isnan(m.critic_loss));
}

TEST(TrainLoop, OneGradientStepPerEnvStepAfterWarmup) {
  FakeEnv env;
  SacAgent agent(fake_config(), 1);
  ReplayBuffer rb(20000, FakeEnv::kDepth);
  TrainConfig tc;
  tc.total_steps = 10400;
  tc.learning_starts = 10000;
  const auto r = train(env, agent, rb, tc);
  EXPECT_EQ(r.gradient_steps, 400);
  EXPECT_EQ(agent.grad_steps(), 400);
  EXPECT_EQ(r.metrics.size(), 52u);
  EXPECT_FALSE(std::isnan(r.metrics.back().critic_loss));
  EXPECT_DOUBLE_EQ(r.metrics.back().entropy_coeff, agent.alpha());
}

TEST(TrainLoop, ContinuedEpisodesShareFrames) {
  FakeEnv env;
  SacAgent agent(fake_config(), 1);
  ReplayBuffer rb(20000, FakeEnv::kDepth);
  TrainConfig tc;
  tc.total_steps = 600;
  tc.learning_starts = 600;
  train(env, agent, rb, tc);
  // One chain start frame, then one frame per step.
  EXPECT_EQ(rb.frames_written(), 601u);
  for (std::size_t i = 0; i + 1 < rb.size(); ++i) EXPECT_EQ(rb.item(i + 1).state, rb.item(i).state + 1);
}

TEST(TrainLoop, MeanReturnCoversLastHundredEpisodes) {
  FakeEnv env;
  SacAgent agent(fake_config(), 1);
  ReplayBuffer rb(50000, FakeEnv::kDepth);
  TrainConfig tc;
  tc.total_steps = 200 * 120;
  tc.learning_starts = tc.total_steps;
  const auto r = train(env, agent, rb, tc);
  ASSERT_EQ(r.episode_returns.size(), 120u);
  double m = 0;
  for (std::size_t i = 20; i < 120; ++i) m += r.episode_returns[i];
  EXPECT_NEAR(r.metrics.back().mean_return_100, m / 100.0, 1e-9);
}

TEST(TrainLoop, FailedEpisodeIsDiscardedAndRetried) {
  FakeEnv env;
  env.fail_at = 250;  // inside the second episode
  SacAgent agent(fake_config(), 1);
  ReplayBuffer rb(20000, FakeEnv::kDepth);
  TrainConfig tc;
  tc.total_steps = 600;
  tc.learning_starts = 600;
  const auto r = train(env, agent, rb, tc);
  EXPECT_EQ(r.discarded_episodes, 1);
  EXPECT_EQ(r.env_steps, 600);
  EXPECT_EQ(r.episode_returns.size(), 3u);
  EXPECT_EQ(rb.size(), 600u);
  EXPECT_EQ(env.hard_resets, 1);
}

TEST(TrainLoop, GivesUpAfterTooManyFailures) {
  struct AlwaysFails : FakeEnv {
    env::EnvStep step(double) { throw EnvError("broken"); }
  } env;
  SacAgent agent(fake_config(), 1);
  ReplayBuffer rb(1000, FakeEnv::kDepth);
  TrainConfig tc;
  tc.total_steps = 100;
  tc.max_consecutive_failures = 3;
  EXPECT_THROW(train(env, agent, rb, tc), EnvError);
  EXPECT_EQ(env.hard_resets, 3);
}

TEST(TrainLoop, IsDeterministicForAFixedSeed) {
  auto run = [] {
    FakeEnv env;
    SacAgent agent(fake_config(), 77);
    ReplayBuffer rb(5000, FakeEnv::kDepth);
    TrainConfig tc;
    tc.total_steps = 1000;
    tc.learning_starts = 400;
    tc.seed = 5;
    std::vector<double> trace;
    auto r = train(env, agent, rb, tc, [&](const MetricsRow& m) {
      trace.push_back(m.mean_return_100);
      trace.push_back(m.critic_loss);
      trace.push_back(m.actor_loss);
    });
    return std::pair{trace, agent.actor().flat()};
  };
  const auto a = run(), b = run();
  EXPECT_EQ(a.first.size(), 15u);
  for (std::size_t i = 0; i < a.first.size(); ++i) {
    if (std::isnan(a.first[i])) EXPECT_TRUE(std::isnan(b.first[i]));
    else EXPECT_EQ(a.first[i], b.first[i]);
  }
  EXPECT_EQ(a.second, b.second);
}

TEST(TrainLoop, MetricsCsvLeavesLossesEmptyBeforeTraining) {
  std::ostringstream os;
  write_metrics_header(os);
  MetricsRow r;
  r.episode = 1;
  r.env_steps = 200;
  r.mean_return_100 = -150;
  r.entropy_coeff = 1;
  write_metrics_row(os, r);
  EXPECT_EQ(os.str(), "episode,env_steps,mean_return_100,entropy_coeff,critic_loss,actor_loss\n1,200,-150,1,,\n");
}

// ---- checkpoint ------------------------------------------------------------

namespace {
std::filesystem::path temp_file(const std::string& name) {
  return std::filesystem::temp_directory_path() / ("marlin_test_" + name + "_" + std::to_string(::getpid()));
}
}  // namespace

TEST(Checkpoint, RoundTripReproducesDeterministicActions) {
  auto cfg = small_config(196);
  SacAgent a(cfg, 12);
  std::mt19937_64 rng(1);
  Batch b{random_mat<float>(196, 32, rng), random_row<float>(32, rng, 0.3), random_row<float>(32, rng),
          random_mat<float>(196, 32, rng), std::vector<std::uint8_t>(32, 0)};
  for (int i = 0; i < 5; ++i) a.train_step(b);
  env::RunningNormalizer norm(196);
  for (int i = 0; i < 20; ++i) norm.update(random_mat<double>(196, 1, rng).col(0));

  const auto path = temp_file("ckpt");
  save_checkpoint(path, a, norm, 0xabcdef);
  auto loaded = load_checkpoint(path, cfg);
  std::filesystem::remove(path);

  EXPECT_EQ(loaded.config_hash, 0xabcdefu);
  EXPECT_EQ(loaded.agent->log_alpha(), a.log_alpha());
  EXPECT_EQ(loaded.agent->grad_steps(), 5);
  EXPECT_EQ(loaded.normalizer.count(), norm.count());
  EXPECT_EQ(loaded.normalizer.mean(), norm.mean());
  EXPECT_EQ(loaded.normalizer.var(), norm.var());
  const Mat<float> probes = random_mat<float>(196, 100, rng);
  EXPECT_EQ(loaded.agent->act_batch(probes), a.act_batch(probes));
  EXPECT_EQ(loaded.agent->q1_target().flat(), a.q1_target().flat());

  // Identical next update, including optimiser moments.
  SacAgent& c = *loaded.agent;
  c.rng() = a.rng();
  a.train_step(b);
  c.train_step(b);
  EXPECT_EQ(c.actor().flat(), a.actor().flat());
}

TEST(Checkpoint, VersionMismatchNamesBothVersions) {
  SacAgent a(small_config(), 1);
  const auto path = temp_file("ver");
  save_checkpoint(path, a, env::RunningNormalizer(98), 1);
  {
    std::fstream f(path, std::ios::in | std::ios::out | std::ios::binary);
    f.seekp(8);
    const std::uint32_t v = 7;
    f.write(reinterpret_cast<const char*>(&v), sizeof v);
  }
  try {
    read_checkpoint_file(path);
    FAIL() << "expected CheckpointError";
  } catch (const CheckpointError& e) {
    const std::string msg = e.what();
    EXPECT_NE(msg.find("version 7"), std::string::npos) << msg;
    EXPECT_NE(msg.find("version 1"), std::string::npos) << msg;
  }
  std::filesystem::remove(path);
}

TEST(Checkpoint, RejectsGarbageAndTruncation) {
  const auto path = temp_file("junk");
  {
    std::ofstream(path, std::ios::binary) << "not a checkpoint at all";
  }
  EXPECT_THROW(read_checkpoint_file(path), CheckpointError);
  SacAgent a(small_config(), 1);
  save_checkpoint(path, a, env::RunningNormalizer(98), 1);
  std::filesystem::resize_file(path, std::filesystem::file_size(path) / 2);
  EXPECT_THROW(read_checkpoint_file(path), CheckpointError);
  std::filesystem::remove(path);
  EXPECT_THROW(read_checkpoint_file(path), CheckpointError);
}
