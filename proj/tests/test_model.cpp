#include <algorithm>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <functional>
#include <limits>
#include <string>

#include "doctest.h"
#include "rulelab/errors.hpp"
#include "rulelab/kernels.hpp"
#include "rulelab/model.hpp"
#include "rulelab/rng.hpp"
#include "oracles.hpp"

using namespace rulelab;

namespace {

ModelConfig tiny_config(bool value_head = true) {
  ModelConfig c;
  c.vocab_size = 12;
  c.context_len = 8;
  c.embed_dim = 8;
  c.n_layers = 2;
  c.n_heads = 2;
  c.value_head = value_head;
  return c;
}

// Random parameters with a larger scale than init_model so gradients are
// not vanishingly small.
PolicyModel random_model(const ModelConfig& c, std::uint64_t seed, double scale = 0.3) {
  PolicyModel m = init_model(c, seed);
  Rng rng = make_rng(seed + 1000);
  for (double& p : m.params()) p += scale * (2.0 * uniform01(rng) - 1.0);
  return m;
}

Tokens random_tokens(Rng& rng, std::size_t n, int vocab) {
  Tokens t(n);
  for (auto& x : t) x = static_cast<TokenId>(uniform_index(rng, static_cast<std::uint64_t>(vocab)));
  return t;
}

std::vector<SequencePair> random_batch(std::uint64_t seed, int vocab) {
  Rng rng = make_rng(seed);
  std::vector<SequencePair> b;
  b.push_back({random_tokens(rng, 3, vocab), random_tokens(rng, 4, vocab)});
  b.push_back({random_tokens(rng, 2, vocab), random_tokens(rng, 2, vocab)});
  b.push_back({random_tokens(rng, 5, vocab), random_tokens(rng, 1, vocab)});
  return b;
}

}  // namespace

TEST_CASE("parameter count follows the documented formula") {
  ModelConfig c;
  c.vocab_size = 50;
  c.embed_dim = 32;
  c.n_layers = 2;
  c.n_heads = 4;
  c.context_len = 32;
  for (bool vh : {false, true}) {
    c.value_head = vh;
    const std::size_t V = 50, C = 32, d = 32, L = 2;
    std::size_t expect = V * d + C * d + L * (12 * d * d + 13 * d) + 2 * d + d * V + V;
    if (vh) expect += d + 1;
    CHECK(c.parameter_count() == expect);
    CHECK(init_model(c, 0).size() == expect);
  }
  c.embed_dim = 30;
  CHECK_THROWS_AS(c.validate(), ConfigError);
  CHECK_THROWS_AS(init_model(c, 0), ConfigError);
}

TEST_CASE("init_model is deterministic in (config, seed)") {
  auto c = tiny_config();
  CHECK(init_model(c, 5) == init_model(c, 5));
  CHECK_FALSE(init_model(c, 5) == init_model(c, 6));
  CHECK(init_model(c, 5).checksum() == init_model(c, 5).checksum());
}

TEST_CASE("sequence_logprob: uniform logits identity") {
  ModelConfig c = tiny_config();
  c.vocab_size = 50;
  PolicyModel m(c, std::vector<double>(c.parameter_count(), 0.0));
  auto s = sequence_logprob(m, {1, 2}, {3, 4, 5});
  CHECK(std::abs(s.total - 3 * std::log(1.0 / 50)) < 1e-12);
}

TEST_CASE("sequence_logprob matches per-prefix forward with explicit softmax") {
  PolicyModel m = random_model(tiny_config(), 3);
  Rng rng = make_rng(9);
  for (int trial = 0; trial < 10; ++trial) {
    Tokens prompt = random_tokens(rng, 1 + uniform_index(rng, 3), 12);
    Tokens resp = random_tokens(rng, 1 + uniform_index(rng, 4), 12);
    auto s = sequence_logprob(m, prompt, resp);
    double total = 0.0;
    Tokens prefix = prompt;
    for (std::size_t t = 0; t < resp.size(); ++t) {
      auto tr = forward(m, prefix, prefix.size() - 1);
      const double* z = tr.logits.data();
      double norm = 0.0;
      for (int v = 0; v < 12; ++v) norm += std::exp(z[v]);
      const double lp = std::log(std::exp(z[resp[t]]) / norm);
      CHECK(std::abs(lp - s.per_token[t]) < 1e-12);
      CHECK(s.per_token[t] <= 0.0);
      total += lp;
      prefix.push_back(resp[t]);
    }
    CHECK(std::abs(total - s.total) < 1e-12);
  }
}

TEST_CASE("log-softmax rows normalize") {
  PolicyModel m = random_model(tiny_config(), 4, 1.0);
  auto rp = run_response(m, {1, 2, 3}, {4, 5, 6, 7});
  for (std::size_t t = 0; t < rp.length(); ++t) {
    double s = 0.0;
    for (double lp : rp.row(t)) s += std::exp(lp);
    CHECK(std::abs(s - 1.0) < 1e-12);
  }
}

TEST_CASE("sequence length and emptiness errors") {
  PolicyModel m = random_model(tiny_config(), 1);
  CHECK_THROWS_AS(sequence_logprob(m, {1, 2, 3, 4, 5}, {1, 2, 3, 4}), LengthError);
  CHECK_THROWS_AS(sequence_logprob(m, {1, 2}, {}), DomainError);
}

TEST_CASE("incremental decoder reproduces full-forward logits") {
  PolicyModel m = random_model(tiny_config(), 8);
  Tokens seq = {3, 1, 4, 1, 5, 9, 2, 6};
  auto tr = forward(m, seq, 0);
  Decoder dec(m);
  for (std::size_t t = 0; t < seq.size(); ++t) {
    auto logits = dec.feed(seq[t]);
    for (int v = 0; v < 12; ++v) CHECK(std::abs(logits[v] - tr.logits[t * 12 + v]) < 1e-12);
    CHECK(std::abs(dec.value() - tr.values[t]) < 1e-12);
  }
  CHECK_THROWS_AS(dec.feed(0), LengthError);
}

TEST_CASE("every kernel table yields the same model outputs") {
  PolicyModel m = random_model(tiny_config(), 2);
  const std::string before = kernels::active().name;
  REQUIRE(kernels::select("scalar"));
  auto ref = forward(m, Tokens{1, 2, 3, 4, 5}, 0);
  auto g_ref = grad_nll(m, random_batch(3, 12));
  for (const auto* t : kernels::available_tables()) {
    CAPTURE(t->name);
    REQUIRE(kernels::select(t->name));
    auto tr = forward(m, Tokens{1, 2, 3, 4, 5}, 0);
    for (std::size_t i = 0; i < ref.logits.size(); ++i) {
      CHECK(std::abs(tr.logits[i] - ref.logits[i]) < 1e-12);
    }
    auto g = grad_nll(m, random_batch(3, 12));
    for (std::size_t i = 0; i < g.size(); ++i) CHECK(std::abs(g[i] - g_ref[i]) < 1e-12);
  }
  kernels::select(before);
}

TEST_CASE("sampling: determinism and greedy repeatability") {
  PolicyModel m = random_model(tiny_config(), 5, 1.0);
  auto a = sample(m, {1, 2}, 5, 1.0, 77), b = sample(m, {1, 2}, 5, 1.0, 77);
  CHECK(a.response == b.response);
  CHECK(a.logprobs_actor == b.logprobs_actor);
  CHECK(a.values == b.values);
  CHECK(a.logprobs_actor.size() == a.response.size());
  CHECK(a.values.size() == a.response.size());
  for (double lp : a.logprobs_actor) CHECK(lp <= 0.0);
  auto g1 = sample(m, {1, 2}, 5, 1e-9, 1), g2 = sample(m, {1, 2}, 5, 1e-9, 2);
  CHECK(g1.response == g2.response);
  // Sampled log-probs agree with a re-score of the same text.
  auto s = sequence_logprob(m, a.prompt, a.response);
  for (std::size_t t = 0; t < a.response.size(); ++t) {
    CHECK(std::abs(s.per_token[t] - a.logprobs_actor[t]) < 1e-12);
  }
  CHECK_THROWS_AS(sample(m, {1}, 0, 1.0, 0), DomainError);
  CHECK_THROWS_AS(sample(m, {1}, 3, 0.0, 0), DomainError);
}

TEST_CASE("sampling: single-step frequencies match a fixed categorical") {
  ModelConfig c = tiny_config(false);
  c.vocab_size = 3;
  std::vector<double> params(c.parameter_count(), 0.0);
  const std::size_t b_out = params.size() - 3;
  const double probs[3] = {0.5, 0.3, 0.2};
  for (int v = 0; v < 3; ++v) params[b_out + v] = std::log(probs[v]);
  PolicyModel m(c, params);
  int counts[3] = {0, 0, 0};
  const int n = 10000;
  for (int i = 0; i < n; ++i) {
    auto tr = sample(m, {1}, 1, 1.0, substream_key({123, static_cast<std::uint64_t>(i)}));
    REQUIRE(tr.response.size() == 1);
    ++counts[tr.response[0]];
    CHECK(std::abs(tr.logprobs_actor[0] - std::log(probs[tr.response[0]])) < 1e-12);
  }
  for (int v = 0; v < 3; ++v) CHECK(std::abs(counts[v] / double(n) - probs[v]) < 0.02);
}

TEST_CASE("grad_nll matches central finite differences") {
  PolicyModel m = random_model(tiny_config(), 11);
  REQUIRE(m.size() <= 5000);
  auto batch = random_batch(12, 12);
  double loss = 0.0;
  auto g = grad_nll(m, batch, &loss);
  auto f = [&](const PolicyModel& mm) {
    double l = 0.0;
    std::size_t n = 0;
    for (const auto& s : batch) {
      l -= sequence_logprob(mm, s.prompt, s.response).total;
      n += s.response.size();
    }
    return l / double(n);
  };
  CHECK(std::abs(loss - f(m)) < 1e-12);
  const double err = oracle::max_fd_error(m, g, f);
  MESSAGE("grad_nll max relative error " << err);
  CHECK(err < 1e-4);
}

TEST_CASE("grad_nll: mean-loss invariance to batch duplication and finiteness at zero") {
  PolicyModel m = random_model(tiny_config(), 13);
  auto batch = random_batch(14, 12);
  auto doubled = batch;
  doubled.insert(doubled.end(), batch.begin(), batch.end());
  auto g1 = grad_nll(m, batch), g2 = grad_nll(m, doubled);
  for (std::size_t i = 0; i < g1.size(); ++i) CHECK(std::abs(g1[i] - g2[i]) < 1e-14);
  PolicyModel z(tiny_config(), std::vector<double>(tiny_config().parameter_count(), 0.0));
  for (double v : grad_nll(z, batch)) CHECK(std::isfinite(v));
  CHECK_THROWS_AS(grad_nll(m, std::vector<SequencePair>{}), DomainError);
}

TEST_CASE("grad_weighted_logprob: linearity, identity with grad_nll, finite differences") {
  PolicyModel m = random_model(tiny_config(), 15);
  auto batch = random_batch(16, 12);
  std::vector<Trajectory> trajs;
  std::size_t n_tokens = 0;
  for (const auto& s : batch) {
    Trajectory t;
    t.prompt = s.prompt;
    t.response = s.response;
    trajs.push_back(t);
    n_tokens += s.response.size();
  }
  std::vector<std::vector<double>> zeros, ones, rnd;
  Rng rng = make_rng(17);
  for (const auto& t : trajs) {
    zeros.emplace_back(t.response.size(), 0.0);
    ones.emplace_back(t.response.size(), 1.0);
    std::vector<double> w(t.response.size());
    for (auto& x : w) x = 2 * uniform01(rng) - 1;
    rnd.push_back(w);
  }
  for (double v : grad_weighted_logprob(m, trajs, zeros)) CHECK(v == 0.0);
  auto g1 = grad_weighted_logprob(m, trajs, ones);
  auto gn = grad_nll(m, batch);
  for (std::size_t i = 0; i < g1.size(); ++i) {
    CHECK(std::abs(g1[i] + double(n_tokens) * gn[i]) < 1e-12);
  }
  auto g = grad_weighted_logprob(m, trajs, rnd);
  auto f = [&](const PolicyModel& mm) {
    double s = 0.0;
    for (std::size_t i = 0; i < trajs.size(); ++i) {
      auto lp = sequence_logprob(mm, trajs[i].prompt, trajs[i].response).per_token;
      for (std::size_t t = 0; t < lp.size(); ++t) s += rnd[i][t] * lp[t];
    }
    return s;
  };
  const double err = oracle::max_fd_error(m, g, f);
  MESSAGE("grad_weighted_logprob max relative error " << err);
  CHECK(err < 1e-4);
  auto bad = rnd;
  bad[0].push_back(1.0);
  CHECK_THROWS_AS(grad_weighted_logprob(m, trajs, bad), DomainError);
}

TEST_CASE("grad_value_regression matches central finite differences") {
  PolicyModel m = random_model(tiny_config(), 19);
  auto batch = random_batch(20, 12);
  std::vector<Trajectory> trajs;
  std::vector<std::vector<double>> targets;
  Rng rng = make_rng(21);
  for (const auto& s : batch) {
    Trajectory t;
    t.prompt = s.prompt;
    t.response = s.response;
    trajs.push_back(t);
    std::vector<double> y(s.response.size());
    for (auto& x : y) x = uniform01(rng);
    targets.push_back(y);
  }
  double loss = 0.0;
  auto g = grad_value_regression(m, trajs, targets, &loss);
  auto f = [&](const PolicyModel& mm) {
    double s = 0.0;
    std::size_t n = 0;
    for (std::size_t i = 0; i < trajs.size(); ++i) {
      auto rp = run_response(mm, trajs[i].prompt, trajs[i].response);
      for (std::size_t t = 0; t < rp.length(); ++t) {
        const double e = rp.trace.values[t] - targets[i][t];
        s += 0.5 * e * e;
        ++n;
      }
    }
    return s / double(n);
  };
  CHECK(std::abs(loss - f(m)) < 1e-12);
  const double err = oracle::max_fd_error(m, g, f);
  MESSAGE("grad_value_regression max relative error " << err);
  CHECK(err < 1e-4);
  PolicyModel nv = random_model(tiny_config(false), 19);
  CHECK_THROWS_AS(grad_value_regression(nv, trajs, targets), ConfigError);
}

TEST_CASE("kl_to_reference: identity, non-negativity, direct summation") {
  PolicyModel a = random_model(tiny_config(), 22, 0.5), b = random_model(tiny_config(), 23, 0.5);
  Tokens prompt = {1, 2, 3}, resp = {4, 5, 6, 7};
  auto same = kl_to_reference(a, a, prompt, resp);
  for (double k : same.per_token) CHECK(k == 0.0);
  auto kl = kl_to_reference(a, b, prompt, resp);
  auto ra = run_response(a, prompt, resp), rb = run_response(b, prompt, resp);
  double mean = 0.0;
  for (std::size_t t = 0; t < resp.size(); ++t) {
    double s = 0.0;
    for (int v = 0; v < 12; ++v) {
      const double p = std::exp(ra.row(t)[v]), q = std::exp(rb.row(t)[v]);
      s += p * std::log(p / q);
    }
    CHECK(kl.per_token[t] >= 0.0);
    CHECK(std::abs(kl.per_token[t] - s) < 1e-12);
    mean += s;
  }
  CHECK(std::abs(kl.mean - mean / resp.size()) < 1e-12);
  ModelConfig other = tiny_config();
  other.embed_dim = 4;
  CHECK_THROWS_AS(kl_to_reference(a, init_model(other, 0), prompt, resp), DomainError);
}

TEST_CASE("adam: fixed point, descent, closed-form first step, non-finite guard") {
  ModelConfig c = tiny_config();
  PolicyModel m = random_model(c, 30);
  const PolicyModel before = m;
  OptimizerState st;
  AdamConfig cfg;
  step(m, std::vector<double>(m.size(), 0.0), st, cfg);
  CHECK(m == before);
  CHECK(st.step == 1);

  // First step on a single coordinate: -lr * g / (|g| + eps) ~ -lr * sign(g).
  for (double g0 : {3.0, -3.0}) {
    PolicyModel p = before;
    OptimizerState s;
    AdamConfig a;
    a.lr = 1e-4;
    std::vector<double> g(p.size(), 0.0);
    g[0] = g0;
    step(p, g, s, a);
    const double moved = p.params()[0] - before.params()[0];
    CHECK(std::abs(moved - (-a.lr * (g0 > 0 ? 1.0 : -1.0))) < 1e-12);
  }

  // f(p) = p^2 at p = 1 moves toward 0.
  PolicyModel p = before;
  p.params()[0] = 1.0;
  OptimizerState s;
  std::vector<double> g(p.size(), 0.0);
  g[0] = 2.0 * p.params()[0];
  step(p, g, s, cfg);
  CHECK(p.params()[0] < 1.0);
  CHECK(p.params()[0] > 0.0);

  PolicyModel q = before;
  OptimizerState s2;
  std::vector<double> bad(q.size(), 0.0);
  bad[3] = std::numeric_limits<double>::quiet_NaN();
  CHECK_THROWS_AS(step(q, bad, s2, cfg), NumericalError);
  CHECK(q == before);
  CHECK(s2.step == 0);
}

TEST_CASE("adam: decoupled weight decay and gradient clipping") {
  PolicyModel m = random_model(tiny_config(), 31);
  const PolicyModel before = m;
  OptimizerState st;
  AdamConfig cfg;
  cfg.lr = 0.1;
  cfg.weight_decay = 0.5;
  step(m, std::vector<double>(m.size(), 0.0), st, cfg);
  for (std::size_t i = 0; i < m.size(); ++i) {
    CHECK(std::abs(m.params()[i] - before.params()[i] * (1 - 0.05)) < 1e-15);
  }
  // Clipping rescales the gradient before the moments see it.
  PolicyModel a = before, b = before;
  OptimizerState sa, sb;
  AdamConfig ca;
  ca.max_grad_norm = 1.0;
  std::vector<double> big(a.size(), 0.0), unit(a.size(), 0.0);
  big[0] = 10.0;
  unit[0] = 1.0;
  step(a, big, sa, ca);
  step(b, unit, sb, AdamConfig{});
  CHECK(sa.m == sb.m);
  CHECK(sa.v == sb.v);
}

TEST_CASE("checkpoint round trip, corruption and truncation") {
  namespace fs = std::filesystem;
  const fs::path dir = fs::temp_directory_path() / "rulelab_ckpt_test";
  fs::create_directories(dir);
  const std::string path = (dir / "m.ckpt").string();
  PolicyModel m = random_model(tiny_config(), 40);
  OptimizerState st;
  step(m, grad_nll(m, random_batch(41, 12)), st, AdamConfig{});
  save_checkpoint(path, m, &st);
  Checkpoint ck = load_checkpoint(path);
  CHECK(ck.model == m);
  REQUIRE(ck.optimizer.has_value());
  CHECK(*ck.optimizer == st);
  CHECK(sequence_logprob(ck.model, {1, 2}, {3, 4}).total ==
        sequence_logprob(m, {1, 2}, {3, 4}).total);
  CHECK(kl_to_reference(ck.model, m, {1, 2}, {3, 4}).mean == 0.0);

  save_checkpoint(path, m);
  CHECK_FALSE(load_checkpoint(path).optimizer.has_value());

  const auto size = fs::file_size(path);
  fs::resize_file(path, size - 9);
  CHECK_THROWS_AS(load_checkpoint(path), FormatError);

  std::ofstream(path, std::ios::binary) << "not a checkpoint";
  CHECK_THROWS_AS(load_checkpoint(path), FormatError);

  save_checkpoint(path, m);
  {
    std::fstream f(path, std::ios::in | std::ios::out | std::ios::binary);
    f.seekp(100);
    f.put('\x7f');
  }
  CHECK_THROWS_AS(load_checkpoint(path), FormatError);
  CHECK_THROWS_AS(load_checkpoint((dir / "missing.ckpt").string()), FormatError);
  fs::remove_all(dir);
}
