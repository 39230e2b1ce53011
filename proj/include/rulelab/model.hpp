#pragma once

// Compact decoder-only transformer over the world vocabulary, in 64-bit
// floats, with exact log-probabilities, sampling, hand-written reverse-mode
// gradients, an optional scalar value head, Adam updates and checkpoints.
//
// Parameter layout (row-major, in this order):
//   wte [V x d], wpe [C x d],
//   per layer: ln1_g [d], ln1_b [d], w_qkv [d x 3d], b_qkv [3d],
//              w_o [d x d], b_o [d], ln2_g [d], ln2_b [d],
//              w_fc [d x 4d], b_fc [4d], w_proj [4d x d], b_proj [d],
//   lnf_g [d], lnf_b [d], w_out [d x V], b_out [V],
//   value head (optional): w_v [d], b_v [1].
// Count: V*d + C*d + L*(12*d*d + 13*d) + 2*d + d*V + V (+ d + 1).

#include <cstdint>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "rulelab/world.hpp"

namespace rulelab {

struct ModelConfig {
  int vocab_size = 0;
  int context_len = 32;
  int embed_dim = 48;
  int n_layers = 2;
  int n_heads = 4;
  bool value_head = true;

  void validate() const;  // throws ConfigError
  std::size_t parameter_count() const;
  bool operator==(const ModelConfig&) const = default;
};

class PolicyModel {
 public:
  PolicyModel(ModelConfig config, std::vector<double> params);

  const ModelConfig& config() const { return config_; }
  std::span<const double> params() const { return params_; }
  std::span<double> params() { return params_; }
  std::size_t size() const { return params_.size(); }
  // FNV-1a over the parameter bytes.
  std::uint64_t checksum() const;

  bool operator==(const PolicyModel&) const = default;

 private:
  ModelConfig config_;
  std::vector<double> params_;
};

// Scaled-normal initialization, deterministic in (config, seed).
PolicyModel init_model(const ModelConfig& config, std::uint64_t seed);

// Activations of one forward pass, kept for the backward pass.
struct ForwardTrace {
  struct Layer {
    std::vector<double> x_in, ln1_mean, ln1_rstd, ln1_out, qkv, att, att_y,
        x_mid, ln2_mean, ln2_rstd, ln2_out, fc_pre, fc_act;
  };
  Tokens tokens;
  std::size_t first_output = 0;
  std::vector<Layer> layers;
  std::vector<double> x_final, lnf_mean, lnf_rstd, lnf_out;
  // Next-token logits for positions [first_output, tokens.size()).
  std::vector<double> logits;
  std::vector<double> values;  // same positions; empty without a value head

  std::size_t outputs() const { return tokens.size() - first_output; }
};

ForwardTrace forward(const PolicyModel& m, std::span<const TokenId> tokens,
                     std::size_t first_output);

// Accumulates into grad the gradient of a scalar loss whose partials with
// respect to the trace's logits and values are d_logits / d_values
// (d_values may be empty).
void backward(const PolicyModel& m, const ForwardTrace& trace,
              std::span<const double> d_logits,
              std::span<const double> d_values, std::span<double> grad);

// Forward over prompt ++ response with outputs aligned to response tokens:
// row t predicts response[t].
struct ResponsePass {
  ForwardTrace trace;
  std::vector<double> log_probs;       // [R x V] log-softmax rows
  std::vector<double> token_logprob;   // [R]
  std::size_t vocab = 0;

  std::size_t length() const { return token_logprob.size(); }
  std::span<const double> row(std::size_t t) const {
    return std::span<const double>(log_probs).subspan(t * vocab, vocab);
  }
};

ResponsePass run_response(const PolicyModel& m, const Tokens& prompt,
                          const Tokens& response);

struct SequenceScore {
  double total = 0.0;
  std::vector<double> per_token;
};

SequenceScore sequence_logprob(const PolicyModel& m, const Tokens& prompt,
                               const Tokens& response);

struct Trajectory {
  Tokens prompt;
  Tokens response;  // includes the terminating <eos> when one was sampled
  std::vector<double> logprobs_actor;
  std::vector<double> logprobs_ref;
  std::vector<double> values;  // present iff the model has a value head
};

// Incremental decoding with a key/value cache. Produces the same logits as
// forward() on the same prefix.
class Decoder {
 public:
  explicit Decoder(const PolicyModel& m);
  // Appends a token; returns next-token logits.
  std::span<const double> feed(TokenId token);
  double value() const { return value_; }
  std::size_t position() const { return pos_; }

 private:
  const PolicyModel& m_;
  std::size_t pos_ = 0;
  std::vector<std::vector<double>> k_, v_;
  std::vector<double> logits_;
  double value_ = 0.0;
};

constexpr double kGreedyTemperature = 1e-6;

// Autoregressive sampling at logits / temperature; greedy argmax when
// temperature < 1e-6. Stops after <eos> or max_len tokens. logprobs_actor are
// under the untempered model. Deterministic in (parameters, prompt, stream).
Trajectory sample(const PolicyModel& m, const Tokens& prompt, int max_len,
                  double temperature, std::uint64_t stream);

// Greedy decode with the trailing <eos> stripped.
Tokens greedy_decode(const PolicyModel& m, const Tokens& prompt, int max_len);

struct SequencePair {
  Tokens prompt;
  Tokens response;
};

// Gradient of the mean token-level negative log-likelihood of the responses.
std::vector<double> grad_nll(const PolicyModel& m,
                             std::span<const SequencePair> batch,
                             double* loss = nullptr);

// Gradient of sum_traj sum_t w_t * log pi(o_t | prompt, o_<t) (sum
// convention, w_t constant). With all weights 1 this is
// -(token count) * grad_nll on the same pairs.
std::vector<double> grad_weighted_logprob(
    const PolicyModel& m, std::span<const Trajectory> trajectories,
    const std::vector<std::vector<double>>& weights);

// Gradient of 0.5 * mean_t (V_t - target_t)^2 over all response tokens.
std::vector<double> grad_value_regression(
    const PolicyModel& m, std::span<const Trajectory> trajectories,
    const std::vector<std::vector<double>>& targets, double* loss = nullptr);

struct KlResult {
  std::vector<double> per_token;
  double mean = 0.0;
};

// Exact KL(actor || ref) over the vocabulary at each response position.
KlResult kl_to_reference(const PolicyModel& actor, const PolicyModel& ref,
                         const Tokens& prompt, const Tokens& response);

// Exact KL between two log-softmax rows.
double kl_rows(std::span<const double> logp, std::span<const double> logq);

struct AdamConfig {
  double lr = 1e-3;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
  double weight_decay = 0.0;   // decoupled
  double max_grad_norm = 0.0;  // 0 disables clipping
};

struct OptimizerState {
  std::vector<double> m, v;
  std::uint64_t step = 0;

  bool operator==(const OptimizerState&) const = default;
};

// One Adam update. Throws NumericalError (parameters untouched) when the
// gradient has a non-finite entry.
void step(PolicyModel& m, std::span<const double> grad, OptimizerState& state,
          const AdamConfig& cfg);

struct Checkpoint {
  PolicyModel model;
  std::optional<OptimizerState> optimizer;
};

void save_checkpoint(const std::string& path, const PolicyModel& m,
                     const OptimizerState* optimizer = nullptr);
Checkpoint load_checkpoint(const std::string& path);

}  // namespace rulelab
