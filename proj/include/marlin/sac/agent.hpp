#pragma once

#include <cmath>
#include <cstdint>
#include <random>
#include <sstream>
#include <string>
#include <vector>

#include "marlin/common.hpp"
#include "marlin/nn/mlp.hpp"
#include "marlin/sac/losses.hpp"

namespace marlin::sac {

struct SacConfig {
  std::size_t obs_dim = 980;
  std::vector<std::size_t> hidden{400, 300};
  double learning_rate = 3e-4;
  double gamma = 0.99;
  double tau = 0.005;
  std::size_t batch_size = 512;
  double initial_log_alpha = 0.0;
  double target_entropy = -1.0;  // minus the action dimension
  double actor_last_layer_scale = 1e-2;

  void validate() const {
    if (obs_dim == 0) throw ConfigError("agent.obs_dim must be > 0");
    if (hidden.empty()) throw ConfigError("agent.hidden must list at least one layer");
    for (auto h : hidden)
      if (h == 0) throw ConfigError("agent.hidden sizes must be > 0");
    if (!(learning_rate > 0)) throw ConfigError("agent.learning_rate must be > 0");
    if (!(gamma >= 0 && gamma <= 1)) throw ConfigError("agent.gamma must be in [0, 1]");
    if (!(tau >= 0 && tau <= 1)) throw ConfigError("agent.tau must be in [0, 1]");
    if (batch_size == 0) throw ConfigError("agent.batch_size must be > 0");
  }
};

/// Raised when a loss or parameter stops being finite.
class TrainingDiverged : public Error {
 public:
  using Error::Error;
};

struct Batch {
  Mat<float> obs;       // (obs_dim x n)
  Row<float> action;    // (1 x n)
  Row<float> reward;    // (1 x n)
  Mat<float> next_obs;  // (obs_dim x n)
  std::vector<std::uint8_t> truncated;
};

struct Losses {
  double critic = 0;
  double actor = 0;
  double entropy = 0;
  double alpha = 0;  // coefficient used in this step
};

/// Soft actor-critic with twin critics, target critics and a learned
/// entropy coefficient. Single precision.
class SacAgent {
 public:
  explicit SacAgent(SacConfig cfg, std::uint64_t seed = 1)
      : cfg_(std::move(cfg)), rng_(seed),
        actor_opt_(cfg_.learning_rate), critic1_opt_(cfg_.learning_rate), critic2_opt_(cfg_.learning_rate),
        alpha_opt_(cfg_.learning_rate) {
    cfg_.validate();
    actor_ = Mlp<float>(cfg_.obs_dim, cfg_.hidden, 2);
    q1_ = Mlp<float>(cfg_.obs_dim + 1, cfg_.hidden, 1);
    q2_ = Mlp<float>(cfg_.obs_dim + 1, cfg_.hidden, 1);
    actor_.init(rng_, cfg_.actor_last_layer_scale);
    q1_.init(rng_);
    q2_.init(rng_);
    q1_target_ = q1_;
    q2_target_ = q2_;
    log_alpha_ = static_cast<float>(cfg_.initial_log_alpha);
  }

  const SacConfig& config() const noexcept { return cfg_; }

  /// Action in (-1, 1): tanh of the mean, or a tanh-Gaussian draw.
  float act(const Eigen::VectorXf& obs, bool deterministic) {
    const Mat<float> head = actor_.infer(obs);
    if (deterministic) return std::tanh(head(0, 0));
    Row<float> eps(1);
    eps[0] = normal_(rng_);
    return squash<float>(head, eps).action[0];
  }

  /// Deterministic actions for a batch of observations (columns).
  Row<float> act_batch(const Mat<float>& obs) const {
    return actor_.infer(obs).row(0).array().tanh();
  }

  Losses train_step(const Batch& b) {
    const auto n = b.obs.cols();
    Row<float> eps_next(n), eps_pi(n);
    for (Eigen::Index i = 0; i < n; ++i) eps_pi[i] = normal_(rng_);
    for (Eigen::Index i = 0; i < n; ++i) eps_next[i] = normal_(rng_);

    const float alpha = std::exp(log_alpha_);
    const float gamma = static_cast<float>(cfg_.gamma);
    const Row<float> y = td_targets<float>(actor_, q1_target_, q2_target_, b.next_obs, b.reward, eps_next, alpha, gamma);

    auto cl = critic_loss<float>(q1_, q2_, b.obs, b.action, y);
    check("critic", cl.loss);
    critic1_opt_.step(q1_, cl.g1);
    critic2_opt_.step(q2_, cl.g2);

    auto al = actor_loss<float>(actor_, q1_, q2_, b.obs, eps_pi, alpha);
    check("actor", al.loss);
    actor_opt_.step(actor_, al.g);

    const auto el = entropy_loss<float>(log_alpha_, al.logp, static_cast<float>(cfg_.target_entropy));
    check("entropy", el.loss);
    alpha_opt_.step(log_alpha_, el.grad);

    const float tau = static_cast<float>(cfg_.tau);
    q1_.polyak_into(q1_target_, tau);
    q2_.polyak_into(q2_target_, tau);
    ++grad_steps_;
    return Losses{cl.loss, al.loss, el.loss, alpha};
  }

  float log_alpha() const noexcept { return log_alpha_; }
  float alpha() const { return std::exp(log_alpha_); }
  std::int64_t grad_steps() const noexcept { return grad_steps_; }

  Mlp<float>& actor() noexcept { return actor_; }
  Mlp<float>& q1() noexcept { return q1_; }
  Mlp<float>& q2() noexcept { return q2_; }
  Mlp<float>& q1_target() noexcept { return q1_target_; }
  Mlp<float>& q2_target() noexcept { return q2_target_; }
  const Mlp<float>& actor() const noexcept { return actor_; }
  nn::Adam<float>& actor_optimizer() noexcept { return actor_opt_; }
  nn::Adam<float>& critic1_optimizer() noexcept { return critic1_opt_; }
  nn::Adam<float>& critic2_optimizer() noexcept { return critic2_opt_; }
  nn::Adam<float>& alpha_optimizer() noexcept { return alpha_opt_; }
  void set_log_alpha(float v) noexcept { log_alpha_ = v; }
  void set_grad_steps(std::int64_t n) noexcept { grad_steps_ = n; }
  std::mt19937_64& rng() noexcept { return rng_; }

 private:
  void check(const char* what, double loss) const {
    if (std::isfinite(loss) && std::isfinite(log_alpha_)) return;
    std::ostringstream os;
    os << "training diverged: " << what << " loss = " << loss << " at gradient step " << grad_steps_
       << " (log_alpha = " << log_alpha_ << ", actor finite = " << actor_.all_finite()
       << ", q1 finite = " << q1_.all_finite() << ", q2 finite = " << q2_.all_finite() << ")";
    throw TrainingDiverged(os.str());
  }

  SacConfig cfg_;
  std::mt19937_64 rng_;
  std::normal_distribution<float> normal_{0.0f, 1.0f};
  Mlp<float> actor_, q1_, q2_, q1_target_, q2_target_;
  nn::Adam<float> actor_opt_, critic1_opt_, critic2_opt_, alpha_opt_;
  float log_alpha_ = 0;
  std::int64_t grad_steps_ = 0;
};

}  // namespace marlin::sac
