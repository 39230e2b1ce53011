#include "rulelab/optim.hpp"

#include <algorithm>
#include <cmath>

#include "model_internal.hpp"
#include "rulelab/errors.hpp"
#include "rulelab/rng.hpp"

namespace rulelab {

std::string_view to_string(Algo a) {
  switch (a) {
    case Algo::PPO: return "PPO";
    case Algo::GRPO: return "GRPO";
    case Algo::RPP: return "RPP";
  }
  return "?";
}

Algo algo_from_string(std::string_view s) {
  if (s == "PPO") return Algo::PPO;
  if (s == "GRPO") return Algo::GRPO;
  if (s == "RPP") return Algo::RPP;
  throw ConfigError("unknown algorithm '" + std::string(s) + "' (expected PPO, GRPO or RPP)");
}

void RLConfig::validate() const {
  if (algo == Algo::GRPO && group_size < 2) throw ConfigError("rebo.group_size must be >= 2 for GRPO");
  if (group_size < 1) throw ConfigError("rebo.group_size must be >= 1");
  if (!(clip_eps > 0.0)) throw ConfigError("rebo.clip_eps must be > 0");
  if (!(kl_coef >= 0.0)) throw ConfigError("rebo.kl_coef must be >= 0");
  if (!(gamma >= 0.0 && gamma <= 1.0)) throw ConfigError("rebo.gamma must be in [0,1]");
  if (!(gae_lambda >= 0.0 && gae_lambda <= 1.0)) throw ConfigError("rebo.gae_lambda must be in [0,1]");
  if (max_response_len < 1) throw ConfigError("rebo.max_response_len must be >= 1");
  if (updates_per_batch < 1) throw ConfigError("rebo.updates_per_batch must be >= 1");
  if (!(lr > 0.0)) throw ConfigError("rebo.lr must be > 0");
  if (!(adv_epsilon > 0.0)) throw ConfigError("rebo.adv_epsilon must be > 0");
  if (!(temperature > 0.0)) throw ConfigError("rebo.temperature must be > 0");
  if (!(value_coef >= 0.0)) throw ConfigError("rebo.value_coef must be >= 0");
  if (!(max_grad_norm >= 0.0)) throw ConfigError("rebo.max_grad_norm must be >= 0");
}

std::size_t RolloutBatch::trajectory_count() const {
  std::size_t n = 0;
  for (const auto& e : entries) n += e.trajectories.size();
  return n;
}

std::vector<double> gae_advantages(const Trajectory& traj, double reward_total,
                                   double gamma, double lambda) {
  const std::size_t T = traj.response.size();
  if (traj.values.size() != T) {
    throw ConfigError("GAE needs per-token values (model without a value head?)");
  }
  std::vector<double> adv(T);
  double next_adv = 0.0;
  for (std::size_t t = T; t-- > 0;) {
    const double r = t + 1 == T ? reward_total : 0.0;
    const double next_v = t + 1 == T ? 0.0 : traj.values[t + 1];
    const double delta = r + gamma * next_v - traj.values[t];
    next_adv = delta + gamma * lambda * next_adv;
    adv[t] = next_adv;
  }
  return adv;
}

std::vector<double> grpo_advantages(std::span<const double> rewards, double adv_epsilon) {
  if (rewards.size() < 2) throw ConfigError("GRPO needs a group of at least 2 rollouts");
  double mean = 0.0;
  for (double r : rewards) mean += r;
  mean /= static_cast<double>(rewards.size());
  double var = 0.0;
  for (double r : rewards) var += (r - mean) * (r - mean);
  var /= static_cast<double>(rewards.size());
  const double denom = std::max(std::sqrt(var), adv_epsilon);
  std::vector<double> out(rewards.size());
  for (std::size_t i = 0; i < rewards.size(); ++i) out[i] = (rewards[i] - mean) / denom;
  return out;
}

std::vector<double> rpp_raw_advantages(const Trajectory& traj, double reward_total,
                                       double kl_coef) {
  const std::size_t T = traj.response.size();
  if (traj.logprobs_ref.size() != T || traj.logprobs_actor.size() != T) {
    throw ConfigError("Reinforce++ needs actor and reference log-probs per token");
  }
  std::vector<double> adv(T);
  double suffix = 0.0;
  for (std::size_t t = T; t-- > 0;) {
    suffix += traj.logprobs_actor[t] - traj.logprobs_ref[t];
    adv[t] = reward_total - kl_coef * suffix;
  }
  return adv;
}

BatchStats token_stats(const std::vector<std::vector<double>>& rows) {
  BatchStats s;
  for (const auto& r : rows) {
    for (double v : r) {
      s.mean += v;
      ++s.count;
    }
  }
  if (s.count == 0) return s;
  s.mean /= static_cast<double>(s.count);
  double var = 0.0;
  for (const auto& r : rows) {
    for (double v : r) var += (v - s.mean) * (v - s.mean);
  }
  s.std = std::sqrt(var / static_cast<double>(s.count));
  return s;
}

std::vector<double> rpp_advantages(const Trajectory& traj, double reward_total,
                                   double kl_coef, const BatchStats& stats,
                                   double adv_epsilon) {
  auto adv = rpp_raw_advantages(traj, reward_total, kl_coef);
  const double denom = std::max(stats.std, adv_epsilon);
  for (double& a : adv) a = (a - stats.mean) / denom;
  return adv;
}

double clipped_surrogate(double ratio, double advantage, double clip_eps) {
  const double clipped = std::clamp(ratio, 1.0 - clip_eps, 1.0 + clip_eps);
  return std::min(ratio * advantage, clipped * advantage);
}

bool clip_engaged(double ratio, double advantage, double clip_eps) {
  return (advantage > 0.0 && ratio > 1.0 + clip_eps) ||
         (advantage < 0.0 && ratio < 1.0 - clip_eps);
}

RolloutBatch collect_rollouts(const PolicyModel& actor, const PolicyModel& ref,
                              const World& world, const std::vector<Query>& queries,
                              const RLConfig& cfg, const RewardConfig& reward_cfg,
                              const GoldCache& gold, const RolloutOptions& opts) {
  RolloutBatch batch;
  batch.entries.reserve(queries.size());
  for (const Query& q : queries) {
    if (q.set != QuerySet::Forget && q.set != QuerySet::Boundary) {
      throw DomainError("collect_rollouts: query " + std::to_string(q.id) +
                        " is neither Forget nor Boundary");
    }
    const Tokens* g = nullptr;
    if (q.set == QuerySet::Boundary) {
      auto it = gold.find(q.id);
      if (it != gold.end()) g = &it->second;
    }
    Tokens sampling_prompt = q.prompt;
    if (opts.preamble) {
      sampling_prompt = *opts.preamble;
      sampling_prompt.insert(sampling_prompt.end(), q.prompt.begin(), q.prompt.end());
    }
    RolloutEntry entry;
    entry.query = q;
    for (int j = 0; j < cfg.group_size; ++j) {
      const std::uint64_t stream =
          substream_key({opts.seed, opts.step, static_cast<std::uint64_t>(q.id),
                         static_cast<std::uint64_t>(j)});
      Trajectory tr = sample(actor, sampling_prompt, cfg.max_response_len,
                             cfg.temperature, stream);
      if (opts.preamble) {
        tr.prompt = q.prompt;
        ResponsePass rp = run_response(actor, tr.prompt, tr.response);
        tr.logprobs_actor = rp.token_logprob;
        tr.values = rp.trace.values;
      }
      tr.logprobs_ref = sequence_logprob(ref, tr.prompt, tr.response).per_token;
      entry.rewards.push_back(compute_reward(world, q, tr.response, reward_cfg, g));
      entry.trajectories.push_back(std::move(tr));
    }
    batch.entries.push_back(std::move(entry));
  }
  return batch;
}

AdvantageBatch compute_advantages(const RolloutBatch& batch, const RLConfig& cfg) {
  AdvantageBatch out;
  std::vector<std::vector<double>> raw_rows;
  out.advantages.resize(batch.entries.size());
  if (cfg.algo == Algo::PPO) out.returns.resize(batch.entries.size());
  for (std::size_t e = 0; e < batch.entries.size(); ++e) {
    const auto& entry = batch.entries[e];
    const std::size_t k = entry.trajectories.size();
    auto& rows = out.advantages[e];
    rows.resize(k);
    switch (cfg.algo) {
      case Algo::GRPO: {
        std::vector<double> rewards(k);
        for (std::size_t j = 0; j < k; ++j) rewards[j] = entry.rewards[j].total;
        const auto a = grpo_advantages(rewards, cfg.adv_epsilon);
        for (std::size_t j = 0; j < k; ++j) {
          const std::size_t T = entry.trajectories[j].response.size();
          rows[j].assign(T, a[j]);
          raw_rows.emplace_back(T, rewards[j]);
        }
        break;
      }
      case Algo::PPO: {
        out.returns[e].resize(k);
        for (std::size_t j = 0; j < k; ++j) {
          const auto& tr = entry.trajectories[j];
          rows[j] = gae_advantages(tr, entry.rewards[j].total, cfg.gamma, cfg.gae_lambda);
          auto& ret = out.returns[e][j];
          ret.resize(rows[j].size());
          for (std::size_t t = 0; t < ret.size(); ++t) ret[t] = rows[j][t] + tr.values[t];
          raw_rows.push_back(rows[j]);
        }
        break;
      }
      case Algo::RPP: {
        for (std::size_t j = 0; j < k; ++j) {
          rows[j] = rpp_raw_advantages(entry.trajectories[j], entry.rewards[j].total, cfg.kl_coef);
          raw_rows.push_back(rows[j]);
        }
        break;
      }
    }
  }
  const BatchStats stats = token_stats(raw_rows);
  out.raw_mean = stats.mean;
  out.raw_std = stats.std;
  if (cfg.algo == Algo::RPP) {
    const double denom = std::max(stats.std, cfg.adv_epsilon);
    for (auto& entry_rows : out.advantages) {
      for (auto& row : entry_rows) {
        for (double& a : row) a = (a - stats.mean) / denom;
      }
    }
  }
  return out;
}

std::vector<double> policy_loss_gradient(const PolicyModel& actor, const PolicyModel& ref,
                                         const RolloutBatch& batch, const AdvantageBatch& adv,
                                         const RLConfig& cfg, UpdateStats* out_stats) {
  std::size_t n_tokens = 0;
  for (const auto& e : batch.entries) {
    for (const auto& tr : e.trajectories) n_tokens += tr.response.size();
  }
  if (n_tokens == 0) throw DomainError("policy update: empty rollout batch");
  const bool use_kl = cfg.algo != Algo::RPP && cfg.kl_coef > 0.0;
  const bool use_value = cfg.algo == Algo::PPO;
  if (use_value && !actor.config().value_head) {
    throw ConfigError("PPO needs a model with a value head");
  }
  const double inv = 1.0 / static_cast<double>(n_tokens);
  const std::size_t V = static_cast<std::size_t>(actor.config().vocab_size);

  UpdateStats stats;
  std::vector<double> grad(actor.size(), 0.0);
  std::size_t clipped = 0;
  for (std::size_t e = 0; e < batch.entries.size(); ++e) {
    const auto& entry = batch.entries[e];
    for (std::size_t j = 0; j < entry.trajectories.size(); ++j) {
      const Trajectory& tr = entry.trajectories[j];
      const auto& a = adv.advantages.at(e).at(j);
      ResponsePass rp = run_response(actor, tr.prompt, tr.response);
      const ResponsePass rq = run_response(ref, tr.prompt, tr.response);
      std::vector<double> d_logits(rp.log_probs.size(), 0.0);
      std::vector<double> d_values;
      if (use_value) d_values.resize(rp.length());
      for (std::size_t t = 0; t < rp.length(); ++t) {
        const auto row = rp.row(t);
        const auto qrow = rq.row(t);
        double* dl = &d_logits[t * V];
        const std::size_t o = static_cast<std::size_t>(tr.response[t]);

        double kl = 0.0;
        for (std::size_t v = 0; v < V; ++v) kl += std::exp(row[v]) * (row[v] - qrow[v]);
        stats.mean_kl += kl * inv;

        double w = 0.0;
        if (cfg.algo == Algo::RPP) {
          w = a[t];
          stats.objective += a[t] * rp.token_logprob[t] * inv;
        } else {
          const double ratio = std::exp(rp.token_logprob[t] - tr.logprobs_actor[t]);
          stats.objective += clipped_surrogate(ratio, a[t], cfg.clip_eps) * inv;
          if (clip_engaged(ratio, a[t], cfg.clip_eps)) {
            ++clipped;
          } else {
            w = a[t] * ratio;
          }
        }
        // d(-w * log p_o)/dz = w * (p - onehot)
        if (w != 0.0) {
          for (std::size_t v = 0; v < V; ++v) dl[v] += w * inv * std::exp(row[v]);
          dl[o] -= w * inv;
        }
        if (use_kl) {
          const double c = cfg.kl_coef * inv;
          for (std::size_t v = 0; v < V; ++v) {
            dl[v] += c * std::exp(row[v]) * (row[v] - qrow[v] - kl);
          }
        }
        if (use_value) {
          const double err = rp.trace.values[t] - adv.returns.at(e).at(j).at(t);
          stats.value_loss += 0.5 * err * err * inv;
          d_values[t] = cfg.value_coef * err * inv;
        }
      }
      backward(actor, rp.trace, d_logits, d_values, grad);
    }
  }
  stats.clip_fraction = static_cast<double>(clipped) * inv;
  stats.loss = -stats.objective;
  if (use_kl) stats.loss += cfg.kl_coef * stats.mean_kl;
  if (use_value) stats.loss += cfg.value_coef * stats.value_loss;
  double norm2 = 0.0;
  for (double g : grad) norm2 += g * g;
  stats.grad_norm = std::sqrt(norm2);
  if (!std::isfinite(stats.loss) || !std::isfinite(stats.grad_norm)) {
    throw NumericalError("policy update: non-finite loss (loss " + std::to_string(stats.loss) +
                         ", grad norm " + std::to_string(stats.grad_norm) + ")");
  }
  if (out_stats) *out_stats = stats;
  return grad;
}

UpdateStats policy_update(PolicyModel& actor, const PolicyModel& ref,
                          const RolloutBatch& batch, const AdvantageBatch& adv,
                          const RLConfig& cfg, OptimizerState& state) {
  AdamConfig adam;
  adam.lr = cfg.lr;
  adam.max_grad_norm = cfg.max_grad_norm;
  UpdateStats stats;
  for (int u = 0; u < cfg.updates_per_batch; ++u) {
    const auto grad = policy_loss_gradient(actor, ref, batch, adv, cfg, &stats);
    step(actor, grad, state, adam);
  }
  return stats;
}

}  // namespace rulelab
