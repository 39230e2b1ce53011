#include <algorithm>
#include <cmath>
#include <cstring>
#include <limits>
#include <random>

#include "model_internal.hpp"
#include "rulelab/errors.hpp"
#include "rulelab/kernels.hpp"
#include "rulelab/model.hpp"
#include "rulelab/rng.hpp"

namespace rulelab {

using detail::ParamLayout;

void ModelConfig::validate() const {
  if (vocab_size < 2) throw ConfigError("model.vocab_size must be >= 2");
  if (context_len < 2) throw ConfigError("model.context_len must be >= 2");
  if (embed_dim < 1) throw ConfigError("model.embed_dim must be >= 1");
  if (n_layers < 1) throw ConfigError("model.n_layers must be >= 1");
  if (n_heads < 1) throw ConfigError("model.n_heads must be >= 1");
  if (embed_dim % n_heads != 0) {
    throw ConfigError("model.embed_dim (" + std::to_string(embed_dim) +
                      ") must be divisible by model.n_heads (" +
                      std::to_string(n_heads) + ")");
  }
}

std::size_t ModelConfig::parameter_count() const {
  validate();
  return ParamLayout::of(*this).total;
}

detail::ParamLayout detail::ParamLayout::of(const ModelConfig& c) {
  ParamLayout p{};
  p.V = static_cast<std::size_t>(c.vocab_size);
  p.C = static_cast<std::size_t>(c.context_len);
  p.d = static_cast<std::size_t>(c.embed_dim);
  p.H = static_cast<std::size_t>(c.n_heads);
  p.hd = p.d / p.H;
  p.value_head = c.value_head;
  const std::size_t d = p.d;
  std::size_t off = 0;
  auto take = [&off](std::size_t n) {
    const std::size_t at = off;
    off += n;
    return at;
  };
  p.wte = take(p.V * d);
  p.wpe = take(p.C * d);
  for (int l = 0; l < c.n_layers; ++l) {
    LayerOffsets lo{};
    lo.ln1_g = take(d);
    lo.ln1_b = take(d);
    lo.w_qkv = take(d * 3 * d);
    lo.b_qkv = take(3 * d);
    lo.w_o = take(d * d);
    lo.b_o = take(d);
    lo.ln2_g = take(d);
    lo.ln2_b = take(d);
    lo.w_fc = take(d * 4 * d);
    lo.b_fc = take(4 * d);
    lo.w_proj = take(4 * d * d);
    lo.b_proj = take(d);
    p.layers.push_back(lo);
  }
  p.lnf_g = take(d);
  p.lnf_b = take(d);
  p.w_out = take(d * p.V);
  p.b_out = take(p.V);
  if (c.value_head) {
    p.w_v = take(d);
    p.b_v = take(1);
  } else {
    p.w_v = p.b_v = off;
  }
  p.total = off;
  return p;
}

void detail::attend_row(const double* q_row, const double* keys,
                        const double* vals, std::size_t key_stride,
                        std::size_t t, std::size_t H, std::size_t hd,
                        double* probs_all, std::size_t probs_stride,
                        double* y) {
  const kernels::KernelTable& k = kernels::active();
  const double scale = 1.0 / std::sqrt(static_cast<double>(hd));
  for (std::size_t h = 0; h < H; ++h) {
    double* probs = probs_all + h * probs_stride;
    const double* q = q_row + h * hd;
    double mx = -std::numeric_limits<double>::infinity();
    for (std::size_t u = 0; u <= t; ++u) {
      probs[u] = k.dot(q, keys + u * key_stride + h * hd, hd) * scale;
      mx = std::max(mx, probs[u]);
    }
    double s = 0.0;
    for (std::size_t u = 0; u <= t; ++u) {
      probs[u] = std::exp(probs[u] - mx);
      s += probs[u];
    }
    const double inv = 1.0 / s;
    double* yh = y + h * hd;
    std::fill(yh, yh + hd, 0.0);
    for (std::size_t u = 0; u <= t; ++u) {
      probs[u] *= inv;
      k.axpy(probs[u], vals + u * key_stride + h * hd, yh, hd);
    }
  }
}

PolicyModel::PolicyModel(ModelConfig config, std::vector<double> params)
    : config_(config), params_(std::move(params)) {
  config_.validate();
  if (params_.size() != config_.parameter_count()) {
    throw ConfigError("parameter vector has " + std::to_string(params_.size()) +
                      " entries, config requires " +
                      std::to_string(config_.parameter_count()));
  }
}

std::uint64_t PolicyModel::checksum() const {
  std::uint64_t h = 0xcbf29ce484222325ULL;
  const auto* bytes = reinterpret_cast<const unsigned char*>(params_.data());
  for (std::size_t i = 0; i < params_.size() * sizeof(double); ++i) {
    h ^= bytes[i];
    h *= 0x100000001b3ULL;
  }
  return h;
}

PolicyModel init_model(const ModelConfig& config, std::uint64_t seed) {
  config.validate();
  const ParamLayout p = ParamLayout::of(config);
  std::vector<double> w(p.total, 0.0);
  Rng rng = make_rng(substream_key({seed, 0x696e6974ULL}));
  std::normal_distribution<double> normal(0.0, 1.0);
  auto fill = [&](std::size_t off, std::size_t n, double std_dev) {
    for (std::size_t i = 0; i < n; ++i) w[off + i] = std_dev * normal(rng);
  };
  auto ones = [&](std::size_t off, std::size_t n) {
    std::fill(w.begin() + static_cast<std::ptrdiff_t>(off),
              w.begin() + static_cast<std::ptrdiff_t>(off + n), 1.0);
  };
  const std::size_t d = p.d;
  const double base = 0.02;
  const double resid = base / std::sqrt(2.0 * static_cast<double>(config.n_layers));
  fill(p.wte, p.V * d, base);
  fill(p.wpe, p.C * d, base);
  for (const auto& lo : p.layers) {
    ones(lo.ln1_g, d);
    fill(lo.w_qkv, d * 3 * d, base);
    fill(lo.w_o, d * d, resid);
    ones(lo.ln2_g, d);
    fill(lo.w_fc, d * 4 * d, base);
    fill(lo.w_proj, 4 * d * d, resid);
  }
  ones(p.lnf_g, d);
  fill(p.w_out, d * p.V, base);
  if (p.value_head) fill(p.w_v, d, base);
  return PolicyModel(config, std::move(w));
}

ForwardTrace forward(const PolicyModel& m, std::span<const TokenId> tokens,
                     std::size_t first_output) {
  const ParamLayout p = ParamLayout::of(m.config());
  const std::size_t n = tokens.size();
  if (n == 0) throw DomainError("forward: empty token sequence");
  if (n > p.C) {
    throw LengthError("sequence of " + std::to_string(n) +
                      " tokens exceeds context length " + std::to_string(p.C));
  }
  if (first_output >= n) throw DomainError("forward: no output positions");
  const std::size_t d = p.d, H = p.H, V = p.V;
  const auto w = m.params();
  const kernels::KernelTable& k = kernels::active();

  ForwardTrace tr;
  tr.tokens.assign(tokens.begin(), tokens.end());
  tr.first_output = first_output;

  std::vector<double> x(n * d);
  for (std::size_t t = 0; t < n; ++t) {
    const TokenId tok = tokens[t];
    if (tok < 0 || static_cast<std::size_t>(tok) >= V) {
      throw DomainError("token id " + std::to_string(tok) + " outside vocabulary");
    }
    const double* e = w.data() + p.wte + static_cast<std::size_t>(tok) * d;
    const double* pe = w.data() + p.wpe + t * d;
    for (std::size_t i = 0; i < d; ++i) x[t * d + i] = e[i] + pe[i];
  }

  tr.layers.resize(p.layers.size());
  for (std::size_t l = 0; l < p.layers.size(); ++l) {
    const auto& lo = p.layers[l];
    auto& L = tr.layers[l];
    L.x_in = x;
    L.ln1_mean.resize(n);
    L.ln1_rstd.resize(n);
    L.ln1_out.resize(n * d);
    for (std::size_t t = 0; t < n; ++t) {
      detail::layer_norm_row(&x[t * d], &w[lo.ln1_g], &w[lo.ln1_b],
                             &L.ln1_out[t * d], d, L.ln1_mean[t], L.ln1_rstd[t]);
    }
    L.qkv.resize(n * 3 * d);
    kernels::linear_forward(L.qkv, L.ln1_out, w.subspan(lo.w_qkv, d * 3 * d),
                            w.subspan(lo.b_qkv, 3 * d), n, d, 3 * d);
    L.att.assign(H * n * n, 0.0);
    L.att_y.resize(n * d);
    for (std::size_t t = 0; t < n; ++t) {
      detail::attend_row(&L.qkv[t * 3 * d], &L.qkv[d], &L.qkv[2 * d], 3 * d, t,
                         H, p.hd, &L.att[t * n], n * n, &L.att_y[t * d]);
    }
    std::vector<double> proj(n * d);
    kernels::linear_forward(proj, L.att_y, w.subspan(lo.w_o, d * d),
                            w.subspan(lo.b_o, d), n, d, d);
    L.x_mid.resize(n * d);
    for (std::size_t i = 0; i < n * d; ++i) L.x_mid[i] = x[i] + proj[i];

    L.ln2_mean.resize(n);
    L.ln2_rstd.resize(n);
    L.ln2_out.resize(n * d);
    for (std::size_t t = 0; t < n; ++t) {
      detail::layer_norm_row(&L.x_mid[t * d], &w[lo.ln2_g], &w[lo.ln2_b],
                             &L.ln2_out[t * d], d, L.ln2_mean[t], L.ln2_rstd[t]);
    }
    L.fc_pre.resize(n * 4 * d);
    kernels::linear_forward(L.fc_pre, L.ln2_out, w.subspan(lo.w_fc, d * 4 * d),
                            w.subspan(lo.b_fc, 4 * d), n, d, 4 * d);
    L.fc_act.resize(n * 4 * d);
    for (std::size_t i = 0; i < n * 4 * d; ++i) L.fc_act[i] = detail::gelu(L.fc_pre[i]);
    std::vector<double> mlp(n * d);
    kernels::linear_forward(mlp, L.fc_act, w.subspan(lo.w_proj, 4 * d * d),
                            w.subspan(lo.b_proj, d), n, 4 * d, d);
    for (std::size_t i = 0; i < n * d; ++i) x[i] = L.x_mid[i] + mlp[i];
  }

  tr.x_final = x;
  tr.lnf_mean.resize(n);
  tr.lnf_rstd.resize(n);
  tr.lnf_out.resize(n * d);
  for (std::size_t t = 0; t < n; ++t) {
    detail::layer_norm_row(&x[t * d], &w[p.lnf_g], &w[p.lnf_b], &tr.lnf_out[t * d],
                           d, tr.lnf_mean[t], tr.lnf_rstd[t]);
  }
  const std::size_t outs = n - first_output;
  tr.logits.resize(outs * V);
  kernels::linear_forward(
      tr.logits,
      std::span<const double>(tr.lnf_out).subspan(first_output * d, outs * d),
      w.subspan(p.w_out, d * V), w.subspan(p.b_out, V), outs, d, V);
  if (p.value_head) {
    tr.values.resize(outs);
    for (std::size_t t = 0; t < outs; ++t) {
      tr.values[t] = k.dot(&tr.lnf_out[(first_output + t) * d], &w[p.w_v], d) + w[p.b_v];
    }
  }
  return tr;
}

ResponsePass run_response(const PolicyModel& m, const Tokens& prompt,
                          const Tokens& response) {
  if (response.empty()) throw DomainError("empty response");
  if (prompt.empty()) throw DomainError("empty prompt");
  const std::size_t total = prompt.size() + response.size();
  if (total > static_cast<std::size_t>(m.config().context_len)) {
    throw LengthError("prompt + response of " + std::to_string(total) +
                      " tokens exceeds context length " +
                      std::to_string(m.config().context_len));
  }
  Tokens input = prompt;
  input.insert(input.end(), response.begin(), response.end() - 1);
  ResponsePass rp;
  rp.trace = forward(m, input, prompt.size() - 1);
  rp.vocab = static_cast<std::size_t>(m.config().vocab_size);
  rp.log_probs = rp.trace.logits;
  rp.token_logprob.resize(response.size());
  for (std::size_t t = 0; t < response.size(); ++t) {
    double* row = &rp.log_probs[t * rp.vocab];
    detail::log_softmax_row(row, rp.vocab);
    rp.token_logprob[t] = row[static_cast<std::size_t>(response[t])];
  }
  return rp;
}

SequenceScore sequence_logprob(const PolicyModel& m, const Tokens& prompt,
                               const Tokens& response) {
  ResponsePass rp = run_response(m, prompt, response);
  SequenceScore s;
  s.per_token = std::move(rp.token_logprob);
  for (double v : s.per_token) s.total += v;
  return s;
}

// ---------------------------------------------------------------- decoding

Decoder::Decoder(const PolicyModel& m) : m_(m) {
  const ParamLayout p = ParamLayout::of(m.config());
  k_.assign(p.layers.size(), std::vector<double>(p.C * p.d));
  v_.assign(p.layers.size(), std::vector<double>(p.C * p.d));
  logits_.resize(p.V);
}

std::span<const double> Decoder::feed(TokenId token) {
  const ParamLayout p = ParamLayout::of(m_.config());
  const std::size_t d = p.d, V = p.V;
  if (pos_ >= p.C) throw LengthError("decoder context exhausted");
  if (token < 0 || static_cast<std::size_t>(token) >= V) {
    throw DomainError("token id " + std::to_string(token) + " outside vocabulary");
  }
  const auto w = m_.params();
  const kernels::KernelTable& k = kernels::active();
  const std::size_t t = pos_;

  std::vector<double> x(d), ln(d), qkv(3 * d), y(d), proj(d), fc(4 * d), mlp(d);
  std::vector<double> probs(p.H * (t + 1));
  const double* e = w.data() + p.wte + static_cast<std::size_t>(token) * d;
  const double* pe = w.data() + p.wpe + t * d;
  for (std::size_t i = 0; i < d; ++i) x[i] = e[i] + pe[i];
  double mean = 0, rstd = 0;
  for (std::size_t l = 0; l < p.layers.size(); ++l) {
    const auto& lo = p.layers[l];
    detail::layer_norm_row(x.data(), &w[lo.ln1_g], &w[lo.ln1_b], ln.data(), d, mean, rstd);
    kernels::linear_forward(qkv, ln, w.subspan(lo.w_qkv, d * 3 * d),
                            w.subspan(lo.b_qkv, 3 * d), 1, d, 3 * d);
    std::copy_n(&qkv[d], d, &k_[l][t * d]);
    std::copy_n(&qkv[2 * d], d, &v_[l][t * d]);
    detail::attend_row(qkv.data(), k_[l].data(), v_[l].data(), d, t, p.H, p.hd,
                       probs.data(), t + 1, y.data());
    kernels::linear_forward(proj, y, w.subspan(lo.w_o, d * d), w.subspan(lo.b_o, d), 1, d, d);
    for (std::size_t i = 0; i < d; ++i) x[i] += proj[i];
    detail::layer_norm_row(x.data(), &w[lo.ln2_g], &w[lo.ln2_b], ln.data(), d, mean, rstd);
    kernels::linear_forward(fc, ln, w.subspan(lo.w_fc, d * 4 * d),
                            w.subspan(lo.b_fc, 4 * d), 1, d, 4 * d);
    for (double& v : fc) v = detail::gelu(v);
    kernels::linear_forward(mlp, fc, w.subspan(lo.w_proj, 4 * d * d),
                            w.subspan(lo.b_proj, d), 1, 4 * d, d);
    for (std::size_t i = 0; i < d; ++i) x[i] += mlp[i];
  }
  detail::layer_norm_row(x.data(), &w[p.lnf_g], &w[p.lnf_b], ln.data(), d, mean, rstd);
  kernels::linear_forward(logits_, ln, w.subspan(p.w_out, d * V), w.subspan(p.b_out, V), 1, d, V);
  value_ = p.value_head ? k.dot(ln.data(), &w[p.w_v], d) + w[p.b_v] : 0.0;
  ++pos_;
  return logits_;
}

Trajectory sample(const PolicyModel& m, const Tokens& prompt, int max_len,
                  double temperature, std::uint64_t stream) {
  if (!(temperature > 0.0)) throw DomainError("sample: temperature must be > 0");
  if (max_len < 1) throw DomainError("sample: max_len must be >= 1");
  if (prompt.empty()) throw DomainError("sample: empty prompt");
  const std::size_t C = static_cast<std::size_t>(m.config().context_len);
  if (prompt.size() >= C) throw LengthError("sample: prompt fills the context");
  const std::size_t V = static_cast<std::size_t>(m.config().vocab_size);
  const bool greedy = temperature < kGreedyTemperature;

  Trajectory tr;
  tr.prompt = prompt;
  Decoder dec(m);
  std::span<const double> logits;
  for (TokenId t : prompt) logits = dec.feed(t);
  Rng rng = make_rng(stream);
  std::vector<double> logp(V), weights(V);
  const std::size_t limit = std::min<std::size_t>(static_cast<std::size_t>(max_len), C - prompt.size());
  for (std::size_t step = 0; step < limit; ++step) {
    std::copy(logits.begin(), logits.end(), logp.begin());
    detail::log_softmax_row(logp.data(), V);
    TokenId next = 0;
    if (greedy) {
      next = static_cast<TokenId>(std::max_element(logp.begin(), logp.end()) - logp.begin());
    } else {
      double mx = -std::numeric_limits<double>::infinity();
      for (std::size_t i = 0; i < V; ++i) mx = std::max(mx, logits[i] / temperature);
      double total = 0.0;
      for (std::size_t i = 0; i < V; ++i) {
        weights[i] = std::exp(logits[i] / temperature - mx);
        total += weights[i];
      }
      double u = uniform01(rng) * total;
      next = static_cast<TokenId>(V - 1);
      for (std::size_t i = 0; i < V; ++i) {
        u -= weights[i];
        if (u < 0.0) {
          next = static_cast<TokenId>(i);
          break;
        }
      }
    }
    tr.response.push_back(next);
    tr.logprobs_actor.push_back(logp[static_cast<std::size_t>(next)]);
    if (m.config().value_head) tr.values.push_back(dec.value());
    if (next == Vocab::kEos || step + 1 == limit) break;
    logits = dec.feed(next);
  }
  return tr;
}

Tokens greedy_decode(const PolicyModel& m, const Tokens& prompt, int max_len) {
  Trajectory tr = sample(m, prompt, max_len, kGreedyTemperature / 2, 0);
  if (!tr.response.empty() && tr.response.back() == Vocab::kEos) tr.response.pop_back();
  return tr.response;
}

// ---------------------------------------------------------------- losses

std::vector<double> grad_nll(const PolicyModel& m,
                             std::span<const SequencePair> batch, double* loss) {
  if (batch.empty()) throw DomainError("grad_nll: empty batch");
  std::size_t n_tokens = 0;
  for (const auto& s : batch) n_tokens += s.response.size();
  if (n_tokens == 0) throw DomainError("grad_nll: empty responses");
  const double inv = 1.0 / static_cast<double>(n_tokens);
  std::vector<double> grad(m.size(), 0.0);
  double total = 0.0;
  for (const auto& s : batch) {
    ResponsePass rp = run_response(m, s.prompt, s.response);
    std::vector<double> d_logits(rp.log_probs.size());
    for (std::size_t t = 0; t < rp.length(); ++t) {
      const auto row = rp.row(t);
      double* dl = &d_logits[t * rp.vocab];
      for (std::size_t v = 0; v < rp.vocab; ++v) dl[v] = std::exp(row[v]) * inv;
      dl[static_cast<std::size_t>(s.response[t])] -= inv;
      total -= rp.token_logprob[t];
    }
    backward(m, rp.trace, d_logits, {}, grad);
  }
  if (loss) *loss = total * inv;
  return grad;
}

std::vector<double> grad_weighted_logprob(
    const PolicyModel& m, std::span<const Trajectory> trajectories,
    const std::vector<std::vector<double>>& weights) {
  if (weights.size() != trajectories.size()) {
    throw DomainError("grad_weighted_logprob: " + std::to_string(weights.size()) +
                      " weight rows for " + std::to_string(trajectories.size()) +
                      " trajectories");
  }
  std::vector<double> grad(m.size(), 0.0);
  for (std::size_t i = 0; i < trajectories.size(); ++i) {
    const auto& tr = trajectories[i];
    if (weights[i].size() != tr.response.size()) {
      throw DomainError("grad_weighted_logprob: weight row " + std::to_string(i) +
                        " does not match response length");
    }
    ResponsePass rp = run_response(m, tr.prompt, tr.response);
    std::vector<double> d_logits(rp.log_probs.size());
    for (std::size_t t = 0; t < rp.length(); ++t) {
      // Loss partials of -w * log p(o_t): w * (p - onehot).
      const double wt = weights[i][t];
      const auto row = rp.row(t);
      double* dl = &d_logits[t * rp.vocab];
      for (std::size_t v = 0; v < rp.vocab; ++v) dl[v] = wt * std::exp(row[v]);
      dl[static_cast<std::size_t>(tr.response[t])] -= wt;
    }
    backward(m, rp.trace, d_logits, {}, grad);
  }
  for (double& g : grad) g = -g;
  return grad;
}

std::vector<double> grad_value_regression(
    const PolicyModel& m, std::span<const Trajectory> trajectories,
    const std::vector<std::vector<double>>& targets, double* loss) {
  if (!m.config().value_head) throw ConfigError("model has no value head");
  if (targets.size() != trajectories.size()) {
    throw DomainError("grad_value_regression: target rows do not match trajectories");
  }
  std::size_t n = 0;
  for (const auto& tr : trajectories) n += tr.response.size();
  if (n == 0) throw DomainError("grad_value_regression: no tokens");
  const double inv = 1.0 / static_cast<double>(n);
  std::vector<double> grad(m.size(), 0.0);
  double total = 0.0;
  for (std::size_t i = 0; i < trajectories.size(); ++i) {
    const auto& tr = trajectories[i];
    if (targets[i].size() != tr.response.size()) {
      throw DomainError("grad_value_regression: target row length mismatch");
    }
    ResponsePass rp = run_response(m, tr.prompt, tr.response);
    std::vector<double> d_logits(rp.log_probs.size(), 0.0);
    std::vector<double> d_values(rp.length());
    for (std::size_t t = 0; t < rp.length(); ++t) {
      const double err = rp.trace.values[t] - targets[i][t];
      total += 0.5 * err * err;
      d_values[t] = err * inv;
    }
    backward(m, rp.trace, d_logits, d_values, grad);
  }
  if (loss) *loss = total * inv;
  return grad;
}

double kl_rows(std::span<const double> logp, std::span<const double> logq) {
  double kl = 0.0;
  for (std::size_t v = 0; v < logp.size(); ++v) {
    const double pv = std::exp(logp[v]);
    if (pv > 0.0) kl += pv * (logp[v] - logq[v]);
  }
  return std::max(kl, 0.0);
}

KlResult kl_to_reference(const PolicyModel& actor, const PolicyModel& ref,
                         const Tokens& prompt, const Tokens& response) {
  if (!(actor.config() == ref.config())) {
    throw DomainError("kl_to_reference: actor and reference configs differ");
  }
  ResponsePass a = run_response(actor, prompt, response);
  ResponsePass r = run_response(ref, prompt, response);
  KlResult out;
  out.per_token.resize(a.length());
  double s = 0.0;
  for (std::size_t t = 0; t < a.length(); ++t) {
    out.per_token[t] = kl_rows(a.row(t), r.row(t));
    s += out.per_token[t];
  }
  out.mean = s / static_cast<double>(a.length());
  return out;
}

}  // namespace rulelab
