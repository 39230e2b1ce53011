#pragma once

// On-policy engines over sampled responses: PPO with GAE, GRPO with
// group-relative advantages and Reinforce++ with a token-level KL penalty and
// batch normalization. They share rollout collection and the update step.

#include <cstdint>
#include <map>
#include <span>
#include <string_view>
#include <vector>

#include "rulelab/model.hpp"
#include "rulelab/reward.hpp"
#include "rulelab/world.hpp"

namespace rulelab {

enum class Algo { PPO, GRPO, RPP };
std::string_view to_string(Algo a);
Algo algo_from_string(std::string_view s);  // throws ConfigError

struct RLConfig {
  Algo algo = Algo::GRPO;
  int group_size = 8;
  double clip_eps = 0.2;
  double kl_coef = 1e-2;
  double gamma = 1.0;
  double gae_lambda = 0.95;
  int max_response_len = 12;
  int updates_per_batch = 1;
  double lr = 1e-3;
  double adv_epsilon = 1e-8;
  double temperature = 1.0;
  double value_coef = 0.5;  // PPO only
  double max_grad_norm = 1.0;

  void validate() const;  // throws ConfigError
};

// Gold references for Boundary queries, keyed by query id.
using GoldCache = std::map<int, Tokens>;

struct RolloutEntry {
  Query query;
  std::vector<Trajectory> trajectories;
  std::vector<RewardBreakdown> rewards;
};

struct RolloutBatch {
  std::vector<RolloutEntry> entries;
  std::size_t trajectory_count() const;
};

struct AdvantageBatch {
  // [entry][trajectory][token]
  std::vector<std::vector<std::vector<double>>> advantages;
  // Value-regression targets (PPO only): advantage + value.
  std::vector<std::vector<std::vector<double>>> returns;
  // Over all tokens before any normalization.
  double raw_mean = 0.0;
  double raw_std = 0.0;
};

// Reward placed on the final response token, V(terminal) = 0,
// A_t = delta_t + gamma * lambda * A_{t+1}. Throws ConfigError without values.
std::vector<double> gae_advantages(const Trajectory& traj, double reward_total,
                                   double gamma, double lambda);

// (r_i - mean) / max(population std, adv_epsilon). Throws ConfigError if k < 2.
std::vector<double> grpo_advantages(std::span<const double> rewards,
                                    double adv_epsilon);

// A_t = r - kl_coef * sum_{i >= t} (log pi(o_i) - log pi_ref(o_i)), before
// batch normalization. Throws ConfigError without reference log-probs.
std::vector<double> rpp_raw_advantages(const Trajectory& traj,
                                       double reward_total, double kl_coef);

struct BatchStats {
  double mean = 0.0;
  double std = 0.0;  // population
  std::size_t count = 0;
};
BatchStats token_stats(const std::vector<std::vector<double>>& rows);

// (A - mean) / max(std, adv_epsilon) for one trajectory.
std::vector<double> rpp_advantages(const Trajectory& traj, double reward_total,
                                   double kl_coef, const BatchStats& stats,
                                   double adv_epsilon);

// min(s * A, clip(s, 1 - eps, 1 + eps) * A)
double clipped_surrogate(double ratio, double advantage, double clip_eps);
// True when the clipped branch is the active minimum (zero gradient).
bool clip_engaged(double ratio, double advantage, double clip_eps);

struct RolloutOptions {
  std::uint64_t seed = 0;
  std::uint64_t step = 0;
  // Prepended to every prompt for sampling only; the stored trajectories are
  // rescored against the bare prompt.
  const Tokens* preamble = nullptr;
};

RolloutBatch collect_rollouts(const PolicyModel& actor, const PolicyModel& ref,
                              const World& world, const std::vector<Query>& queries,
                              const RLConfig& cfg, const RewardConfig& reward_cfg,
                              const GoldCache& gold, const RolloutOptions& opts);

AdvantageBatch compute_advantages(const RolloutBatch& batch, const RLConfig& cfg);

struct UpdateStats {
  double loss = 0.0;
  double objective = 0.0;    // mean clipped surrogate per token
  double mean_kl = 0.0;      // exact KL to the reference, per token
  double clip_fraction = 0.0;
  double value_loss = 0.0;
  double grad_norm = 0.0;
};

// Gradient of the update loss below at the actor's current parameters.
std::vector<double> policy_loss_gradient(const PolicyModel& actor, const PolicyModel& ref,
                                         const RolloutBatch& batch, const AdvantageBatch& adv,
                                         const RLConfig& cfg, UpdateStats* stats = nullptr);

// Runs cfg.updates_per_batch optimizer steps on
//   -mean_t surrogate_t + kl_coef * mean_t KL_t (PPO, GRPO)
//   + value_coef * 0.5 * mean_t (V_t - R_t)^2 (PPO),
// or on -mean_t A_t * log pi(o_t) for RPP. Old log-probs are the sampling-time
// log-probs stored in the trajectories. Returns stats of the last step.
UpdateStats policy_update(PolicyModel& actor, const PolicyModel& ref,
                          const RolloutBatch& batch, const AdvantageBatch& adv,
                          const RLConfig& cfg, OptimizerState& state);

}  // namespace rulelab
