#include "rulelab/pipeline.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <numeric>
#include <sstream>

#include "json.hpp"

#include "rulelab/errors.hpp"
#include "rulelab/rng.hpp"

namespace rulelab {
namespace fs = std::filesystem;
using nlohmann::ordered_json;

namespace {

constexpr std::uint64_t kInitTag = 0x696e6974ULL;     // "init"
constexpr std::uint64_t kPretrainTag = 0x7072ULL;     // "pr"
constexpr std::uint64_t kSteerTag = 0x7273ULL;        // "rs"

std::string read_text(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  if (!in) throw FormatError("cannot open " + p.string());
  std::stringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

void write_text(const fs::path& p, const std::string& text) {
  fs::create_directories(p.parent_path());
  const fs::path tmp = p.string() + ".tmp";
  {
    std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
    if (!out) throw FormatError("cannot write " + tmp.string());
    out << text;
    if (!out) throw FormatError("write failed: " + tmp.string());
  }
  fs::rename(tmp, p);
}

ordered_json num(double v) { return std::isfinite(v) ? ordered_json(v) : ordered_json(nullptr); }

ordered_json base_record(Stage s, int step) {
  ordered_json r;
  r["step"] = step;
  r["stage"] = std::string(to_string(s));
  for (const char* k : {"mean_reward_train", "mean_reward_heldout", "forget_rouge",
                        "retain_rouge", "refusal_rate_forget", "false_refusal_boundary",
                        "mean_kl"}) {
    r[k] = nullptr;
  }
  r["tokens_forget"] = 0;
  r["tokens_boundary"] = 0;
  return r;
}

void put_measurement(ordered_json& r, const Measurement& m, bool heldout) {
  r["forget_rouge"] = num(m.forget.by_kind.all);
  r["retain_rouge"] = num(m.retain.by_kind.all);
  r["refusal_rate_forget"] = m.refusal_rate_forget;
  r["false_refusal_boundary"] = m.false_refusal_boundary;
  if (heldout) r["mean_reward_heldout"] = m.heldout_reward;
}

std::size_t pair_tokens(const SequencePair& p) { return p.prompt.size() + p.response.size(); }

double mean_of(const std::vector<double>& v) {
  if (v.empty()) return 0.0;
  return std::accumulate(v.begin(), v.end(), 0.0) / static_cast<double>(v.size());
}

// One pass of shuffled minibatch NLL training. Returns the mean batch loss.
double nll_epoch(PolicyModel& m, OptimizerState& state, const AdamConfig& adam,
                 std::vector<SequencePair> data, int batch_size, Rng& rng) {
  shuffle(data, rng);
  double loss_sum = 0.0;
  int batches = 0;
  for (std::size_t i = 0; i < data.size(); i += static_cast<std::size_t>(batch_size)) {
    const std::size_t n = std::min<std::size_t>(static_cast<std::size_t>(batch_size), data.size() - i);
    double loss = 0.0;
    auto g = grad_nll(m, std::span<const SequencePair>(data.data() + i, n), &loss);
    step(m, g, state, adam);
    loss_sum += loss;
    ++batches;
  }
  return batches ? loss_sum / batches : 0.0;
}

std::vector<Query> fact_kinds(std::vector<Query> qs) {
  std::erase_if(qs, [](const Query& q) { return q.kind == TemplateKind::PARA; });
  return qs;
}

std::string step_name(int s) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "step_%04d", s);
  return buf;
}

}  // namespace

std::string_view to_string(Stage s) {
  switch (s) {
    case Stage::GenWorld: return "gen-world";
    case Stage::Pretrain: return "pretrain";
    case Stage::Steer: return "steer";
    case Stage::Rebo: return "rebo";
    case Stage::Baseline: return "baseline";
    case Stage::Eval: return "eval";
    case Stage::Relearn: return "relearn";
  }
  return "?";
}

std::vector<SequencePair> rejection_pairs(const World& world,
                                          const std::vector<Query>& train_forget) {
  if (train_forget.empty()) throw DomainError("rejection_pairs: no forget queries");
  std::vector<SequencePair> out;
  for (const auto& q : train_forget) {
    const Entity& target = world.entities.at(q.target_entity);
    for (int i = 0; i < refusal_template_count(); ++i) {
      Tokens r = refusal_response_for(world, target, i).text;
      r.push_back(Vocab::kEos);
      out.push_back({q.prompt, std::move(r)});
    }
  }
  return out;
}

std::vector<Query> rebo_queries(const std::vector<Query>& all, Ablation ablation) {
  std::vector<Query> forget = select(all, QuerySet::Forget, Split::Train);
  std::vector<Query> boundary = select(all, QuerySet::Boundary, Split::Train);
  std::vector<Query> out = forget;
  if (ablation != Ablation::NoBoundary) {
    out.insert(out.end(), boundary.begin(), boundary.end());
    return out;
  }
  for (const auto& f : forget) {
    auto it = std::find_if(boundary.begin(), boundary.end(), [&](const Query& b) {
      return b.template_id == f.template_id && b.attribute == f.attribute;
    });
    if (it == boundary.end()) throw InternalError("no boundary sibling for forget query");
    Query r = f;
    r.set = QuerySet::Boundary;
    r.id = it->id;
    r.gold_answer = it->gold_answer;
    out.push_back(std::move(r));
  }
  return out;
}

Pipeline::Pipeline(PipelineConfig cfg, fs::path run_dir, Log log)
    : cfg_(std::move(cfg)), dir_(std::move(run_dir)), log_(std::move(log)) {
  cfg_.validate();
  world_ = generate_world(cfg_.world_config());
  queries_ = build_query_sets(world_, cfg_.world.forget_fraction, cfg_.world.heldout_fraction);
  std::size_t longest = 0;
  for (const auto& q : queries_) {
    longest = std::max(longest, q.prompt.size() + static_cast<std::size_t>(std::max(
                                                      cfg_.rebo.rl.max_response_len,
                                                      cfg_.eval.max_response_len)));
  }
  if (longest > static_cast<std::size_t>(cfg_.model.context_len)) {
    throw ConfigError("key 'model.context_len': " + std::to_string(cfg_.model.context_len) +
                      " is shorter than the longest prompt plus response (" +
                      std::to_string(longest) + ")");
  }
}

void Pipeline::say(const std::string& msg) const {
  if (log_) log_(msg);
}

bool Pipeline::applies(Stage s) const {
  const bool rule = cfg_.method == Method::Rule;
  switch (s) {
    case Stage::Steer:
      return rule && (cfg_.ablation == Ablation::None || cfg_.ablation == Ablation::NoBoundary);
    case Stage::Rebo: return rule;
    case Stage::Baseline: return !rule;
    default: return true;
  }
}

bool Pipeline::complete(Stage s) const {
  switch (s) {
    case Stage::GenWorld: return fs::exists(path("world/records.jsonl"));
    case Stage::Pretrain: return fs::exists(path("metrics/pretrain.jsonl"));
    case Stage::Steer: return fs::exists(path("metrics/steer.jsonl"));
    case Stage::Rebo: return fs::exists(path("metrics/rebo.jsonl"));
    case Stage::Baseline: return fs::exists(path("metrics/baseline.jsonl"));
    case Stage::Eval: return fs::exists(path("eval/report.json"));
    case Stage::Relearn: return fs::exists(path("relearn/original.csv"));
  }
  return false;
}

void Pipeline::write_snapshot() const { write_text(path("config.snapshot"), config_to_json(cfg_)); }

void Pipeline::require_file(std::string_view rel, std::string_view hint) const {
  if (!fs::exists(path(rel))) {
    throw MissingPrerequisite(path(rel).string() + " does not exist; run " + std::string(hint) +
                              " first");
  }
}

void Pipeline::require_world() const {
  require_file("world/records.jsonl", "gen-world");
  std::ostringstream expected;
  write_world_records(expected, world_, queries_);
  if (read_text(path("world/records.jsonl")) != expected.str()) {
    throw ConfigError("world/records.jsonl in " + dir_.string() +
                      " was generated from a different world configuration");
  }
}

PolicyModel Pipeline::load_model(std::string_view name) const {
  const std::string rel = "checkpoints/" + std::string(name) + ".ckpt";
  require_file(rel, name == "pretrained" ? "pretrain" : name == "rejected" ? "steer" : "rebo or baseline");
  Checkpoint ck = load_checkpoint(path(rel).string());
  if (!(ck.model.config() == cfg_.model_config(static_cast<int>(world_.vocab.size())))) {
    throw ConfigError("checkpoint " + path(rel).string() +
                      " does not match the configured model shape");
  }
  return std::move(ck.model);
}

void Pipeline::save_model(std::string_view name, const PolicyModel& m) const {
  fs::create_directories(path("checkpoints"));
  save_checkpoint(path("checkpoints/" + std::string(name) + ".ckpt").string(), m);
}

void Pipeline::write_metrics(Stage s, const std::vector<std::string>& lines) const {
  std::string text;
  for (const auto& l : lines) text += l + "\n";
  write_text(path("metrics/" + std::string(to_string(s)) + ".jsonl"), text);
  std::string all;
  for (Stage st : {Stage::Pretrain, Stage::Steer, Stage::Rebo, Stage::Baseline}) {
    const fs::path p = path("metrics/" + std::string(to_string(st)) + ".jsonl");
    if (fs::exists(p)) all += read_text(p);
  }
  write_text(path("metrics.jsonl"), all);
}

GoldCache Pipeline::load_gold() const {
  require_file("gold_cache.jsonl", "pretrain");
  GoldCache gold;
  std::istringstream in(read_text(path("gold_cache.jsonl")));
  std::string line;
  while (std::getline(in, line)) {
    if (line.empty()) continue;
    try {
      auto j = ordered_json::parse(line);
      gold[j.at("id").get<int>()] = j.at("gold").get<Tokens>();
    } catch (const ordered_json::exception& e) {
      throw FormatError("gold_cache.jsonl: " + std::string(e.what()));
    }
  }
  return gold;
}

Measurement Pipeline::measure(const PolicyModel& m, bool with_heldout_reward) const {
  const int L = cfg_.eval.max_response_len;
  Measurement out;
  const auto forget_probes = select(queries_, QuerySet::ProbeForget);
  const auto retain_probes = fact_kinds(select(queries_, QuerySet::ProbeNeighbor));
  out.forget = probe_quality(m, forget_probes, L);
  out.retain = probe_quality(m, retain_probes, L);

  int correct = 0, total = 0;
  auto gate_count = [&](const std::vector<Query>& probes, const ProbeResult& r) {
    for (std::size_t i = 0; i < probes.size(); ++i) {
      if (probes[i].kind == TemplateKind::PARA) continue;
      Tokens content;
      for (TokenId t : r.responses[i]) {
        if (!world_.vocab.is_special(t)) content.push_back(t);
      }
      ++total;
      if (rouge_l(content, probes[i].gold_answer) >= 0.99) ++correct;
    }
  };
  gate_count(forget_probes, out.forget);
  gate_count(retain_probes, out.retain);
  out.gate_accuracy = total ? static_cast<double>(correct) / total : 0.0;

  out.refusal_rate_forget = refusal_rate(m, world_, select(queries_, QuerySet::Forget, Split::Train), L);
  out.false_refusal_boundary =
      refusal_rate(m, world_, select(queries_, QuerySet::Boundary, Split::Heldout), L);

  if (with_heldout_reward) {
    const GoldCache gold = load_gold();
    std::vector<double> rewards;
    for (QuerySet set : {QuerySet::Forget, QuerySet::Boundary}) {
      for (const auto& q : select(queries_, set, Split::Heldout)) {
        const Tokens resp = greedy_decode(m, q.prompt, cfg_.rebo.rl.max_response_len);
        const Tokens* g = nullptr;
        if (set == QuerySet::Boundary) g = &gold.at(q.id);
        rewards.push_back(compute_reward(world_, q, resp, cfg_.reward, g).total);
      }
    }
    out.heldout_reward = mean_of(rewards);
  }
  return out;
}

void Pipeline::gen_world() {
  std::ostringstream os;
  write_world_records(os, world_, queries_);
  write_text(path("world/records.jsonl"), os.str());
  say("[gen-world] " + std::to_string(world_.entities.size()) + " entities, " +
      std::to_string(queries_.size()) + " queries, vocabulary " +
      std::to_string(world_.vocab.size()));
}

void Pipeline::pretrain() {
  require_world();
  auto corpus = render_corpus(world_, cfg_.pretrain.repetitions);
  if (corpus.empty()) throw DomainError("pretrain: empty corpus");
  const auto strangers = unfamiliar_corpus(world_, cfg_.pretrain.repetitions);
  corpus.insert(corpus.end(), strangers.begin(), strangers.end());
  std::vector<SequencePair> data;
  std::size_t tokens_target = 0, tokens_other = 0;
  const Tokens target_name = world_.vocab.encode(world_.target().name);
  for (const auto& p : corpus) {
    Tokens ans = p.answer;
    ans.push_back(Vocab::kEos);
    data.push_back({p.prompt, ans});
    const bool about_target = std::search(p.prompt.begin(), p.prompt.end(), target_name.begin(),
                                          target_name.end()) != p.prompt.end();
    (about_target ? tokens_target : tokens_other) += pair_tokens(data.back());
  }

  PolicyModel m = init_model(cfg_.model_config(static_cast<int>(world_.vocab.size())),
                             substream_key({cfg_.seed, kInitTag}));
  OptimizerState state;
  AdamConfig adam;
  adam.lr = cfg_.pretrain.lr;
  adam.max_grad_norm = 1.0;

  std::vector<std::string> lines;
  bool met = false;
  int epoch = 0;
  double gate = 0.0;
  std::size_t since_target = 0, since_other = 0;
  while (epoch < cfg_.pretrain.max_epochs && !met) {
    ++epoch;
    Rng rng = make_rng(substream_key({cfg_.seed, kPretrainTag, static_cast<std::uint64_t>(epoch)}));
    const double loss = nll_epoch(m, state, adam, data, cfg_.pretrain.batch_size, rng);
    since_target += tokens_target;
    since_other += tokens_other;
    if (epoch % cfg_.pretrain.eval_every != 0 && epoch != cfg_.pretrain.max_epochs) continue;
    const Measurement mm = measure(m, false);
    gate = mm.gate_accuracy;
    met = gate >= cfg_.pretrain.gate && epoch >= cfg_.pretrain.min_epochs;
    ordered_json r = base_record(Stage::Pretrain, epoch);
    put_measurement(r, mm, false);
    r["tokens_forget"] = since_target;
    r["tokens_retain"] = since_other;
    r["loss"] = loss;
    r["gate_accuracy"] = gate;
    lines.push_back(r.dump());
    since_target = since_other = 0;
    char buf[160];
    std::snprintf(buf, sizeof buf, "[pretrain] epoch %d loss %.4f gate %.3f forget %.1f retain %.1f",
                  epoch, loss, gate, mm.forget.by_kind.all, mm.retain.by_kind.all);
    say(buf);
  }
  save_model("pretrained", m);
  if (!met) {
    std::string t;
    for (const auto& l : lines) t += l + "\n";
    write_text(path("metrics/pretrain.failed.jsonl"), t);
    throw PretrainError("probe gate " + std::to_string(cfg_.pretrain.gate) +
                        " not reached after " + std::to_string(epoch) +
                        " epochs (accuracy " + std::to_string(gate) +
                        "); the world or model is too small for the training budget");
  }

  // Gold references for every Boundary prompt, decoded by the pretrained model.
  std::string gold_text;
  for (const auto& q : select(queries_, QuerySet::Boundary)) {
    Tokens g = greedy_decode(m, q.prompt, cfg_.eval.max_response_len);
    std::erase_if(g, [&](TokenId t) { return world_.vocab.is_special(t); });
    if (g.empty()) g = q.gold_answer;
    ordered_json j;
    j["id"] = q.id;
    j["gold"] = g;
    j["text"] = world_.vocab.decode(g);
    gold_text += j.dump() + "\n";
  }
  write_text(path("gold_cache.jsonl"), gold_text);
  write_metrics(Stage::Pretrain, lines);
}

void Pipeline::steer() {
  require_world();
  if (!applies(Stage::Steer)) {
    say("[steer] skipped: " + cfg_.method_label() + " has no rejection-steering stage");
    return;
  }
  PolicyModel m = load_model("pretrained");
  const auto train_forget = select(queries_, QuerySet::Forget, Split::Train);
  const auto pairs = rejection_pairs(world_, train_forget);
  std::size_t tokens = 0;
  for (const auto& p : pairs) tokens += pair_tokens(p);

  OptimizerState state;
  AdamConfig adam;
  adam.lr = cfg_.rs.lr;
  adam.max_grad_norm = 1.0;
  std::vector<std::string> lines;
  auto record = [&](int epoch, double loss) {
    const Measurement mm = measure(m, false);
    ordered_json r = base_record(Stage::Steer, epoch);
    put_measurement(r, mm, false);
    r["tokens_forget"] = epoch > 0 ? tokens : 0;
    r["loss"] = num(loss);
    lines.push_back(r.dump());
    char buf[160];
    std::snprintf(buf, sizeof buf,
                  "[steer] epoch %d refusal(forget) %.3f false-refusal(boundary) %.3f",
                  epoch, mm.refusal_rate_forget, mm.false_refusal_boundary);
    say(buf);
  };
  record(0, std::nan(""));
  for (int e = 1; e <= cfg_.rs.epochs; ++e) {
    Rng rng = make_rng(substream_key({cfg_.seed, kSteerTag, static_cast<std::uint64_t>(e)}));
    const double loss = nll_epoch(m, state, adam, pairs, cfg_.rs.batch_size, rng);
    record(e, loss);
  }
  save_model("rejected", m);
  write_metrics(Stage::Steer, lines);
}

void Pipeline::rebo() {
  require_world();
  if (!applies(Stage::Rebo)) {
    throw ConfigError("key 'method': rebo needs method=rule (this run is " +
                      cfg_.method_label() + ")");
  }
  const bool from_rejected = applies(Stage::Steer);
  PolicyModel actor = load_model(from_rejected ? "rejected" : "pretrained");
  const PolicyModel ref = actor;
  const std::uint64_t ref_sum = ref.checksum();
  const GoldCache gold = load_gold();
  const auto train = rebo_queries(queries_, cfg_.ablation);
  const RLConfig& rl = cfg_.rebo.rl;
  Tokens preamble;
  RolloutOptions opts;
  opts.seed = cfg_.seed;
  if (cfg_.ablation == Ablation::NoRS_SystemPrompt) {
    preamble = forget_preamble(world_);
    opts.preamble = &preamble;
  }

  OptimizerState state;
  std::vector<std::string> lines;
  const int T = cfg_.rebo.steps;
  for (int s = 0; s <= T; ++s) {
    opts.step = static_cast<std::uint64_t>(s);
    const RolloutBatch batch = collect_rollouts(actor, ref, world_, train, rl, cfg_.reward, gold, opts);
    std::vector<double> all, forget_r, boundary_r;
    std::size_t tok_f = 0, tok_b = 0;
    for (const auto& e : batch.entries) {
      const bool f = e.query.set == QuerySet::Forget;
      for (std::size_t j = 0; j < e.trajectories.size(); ++j) {
        all.push_back(e.rewards[j].total);
        (f ? forget_r : boundary_r).push_back(e.rewards[j].total);
        (f ? tok_f : tok_b) += e.trajectories[j].prompt.size() + e.trajectories[j].response.size();
      }
    }
    const bool heldout = s % cfg_.rebo.heldout_eval_every == 0 || s == T;
    const Measurement mm = measure(actor, heldout);
    ordered_json r = base_record(Stage::Rebo, s);
    r["mean_reward_train"] = mean_of(all);
    put_measurement(r, mm, heldout);
    r["reward_forget_mean"] = mean_of(forget_r);
    r["reward_forget_max"] = forget_r.empty() ? 0.0 : *std::max_element(forget_r.begin(), forget_r.end());
    r["reward_boundary_mean"] = mean_of(boundary_r);
    r["reward_boundary_max"] =
        boundary_r.empty() ? 0.0 : *std::max_element(boundary_r.begin(), boundary_r.end());

    if (s < T) {
      const AdvantageBatch adv = compute_advantages(batch, rl);
      UpdateStats st;
      try {
        st = policy_update(actor, ref, batch, adv, rl, state);
      } catch (const NumericalError& e) {
        lines.push_back(r.dump());
        write_text(path("metrics/rebo.partial.jsonl"), [&] {
          std::string t;
          for (const auto& l : lines) t += l + "\n";
          return t;
        }());
        throw NumericalError("rebo step " + std::to_string(s) + ": " + e.what() +
                             "; last good checkpoint kept");
      }
      if (ref.checksum() != ref_sum) throw InternalError("reference policy changed during ReBO");
      r["mean_kl"] = st.mean_kl;
      r["loss"] = st.loss;
      r["clip_fraction"] = st.clip_fraction;
      r["advantage_std"] = adv.raw_std;
      r["grad_norm"] = st.grad_norm;
      if (rl.algo == Algo::PPO) r["value_loss"] = st.value_loss;
      r["tokens_forget"] = tok_f;
      r["tokens_boundary"] = tok_b;
      if (cfg_.eval.step_checkpoints) save_model(step_name(s + 1), actor);
    }
    lines.push_back(r.dump());
    char buf[200];
    std::snprintf(buf, sizeof buf,
                  "[rebo] step %d/%d reward %.3f heldout %s forget %.1f retain %.1f refusal %.2f "
                  "false-refusal %.2f",
                  s, T, mean_of(all), heldout ? std::to_string(mm.heldout_reward).c_str() : "-",
                  mm.forget.by_kind.all, mm.retain.by_kind.all, mm.refusal_rate_forget,
                  mm.false_refusal_boundary);
    say(buf);
  }
  save_model("final", actor);
  fs::remove(path("metrics/rebo.partial.jsonl"));
  write_metrics(Stage::Rebo, lines);
}

void Pipeline::baseline() {
  require_world();
  if (!applies(Stage::Baseline)) {
    throw ConfigError("key 'method': baseline needs method=baseline (this run is " +
                      cfg_.method_label() + ")");
  }
  PolicyModel m = load_model("pretrained");
  const bool gdr = cfg_.baseline.algo == BaselineAlgo::GA_GDR;
  std::vector<SequencePair> forget, retain;
  std::size_t tok_f = 0, tok_r = 0;
  for (const auto& q : select(queries_, QuerySet::Forget, Split::Train)) {
    Tokens a = world_.attribute_value(world_.target(), q.attribute);
    a.push_back(Vocab::kEos);
    forget.push_back({q.prompt, a});
    tok_f += pair_tokens(forget.back());
  }
  if (gdr) {
    for (const auto& q : select(queries_, QuerySet::Neighbor, Split::Train)) {
      Tokens a = q.gold_answer;
      a.push_back(Vocab::kEos);
      retain.push_back({q.prompt, a});
      tok_r += pair_tokens(retain.back());
    }
  }

  OptimizerState state;
  AdamConfig adam;
  adam.lr = cfg_.baseline.lr;
  adam.max_grad_norm = cfg_.baseline.max_grad_norm;
  std::vector<std::string> lines;
  const int T = cfg_.baseline.steps;
  for (int s = 0; s <= T; ++s) {
    const Measurement mm = measure(m, true);
    ordered_json r = base_record(Stage::Baseline, s);
    put_measurement(r, mm, true);
    if (s < T) {
      double lf = 0.0, lr = 0.0;
      std::vector<double> g = grad_nll(m, forget, &lf);
      for (double& x : g) x = -x;
      if (gdr) {
        const auto gr = grad_nll(m, retain, &lr);
        for (std::size_t i = 0; i < g.size(); ++i) g[i] += cfg_.baseline.lambda * gr[i];
        r["loss_retain"] = lr;
      }
      r["loss_forget"] = lf;
      step(m, g, state, adam);
      r["tokens_forget"] = tok_f;
      r["tokens_retain"] = tok_r;
      if (cfg_.eval.step_checkpoints) save_model(step_name(s + 1), m);
    }
    lines.push_back(r.dump());
    char buf[160];
    std::snprintf(buf, sizeof buf, "[%s] step %d/%d forget %.1f retain %.1f",
                  cfg_.method_label().c_str(), s, T, mm.forget.by_kind.all, mm.retain.by_kind.all);
    say(buf);
  }
  save_model("final", m);
  write_metrics(Stage::Baseline, lines);
}

EvalReport Pipeline::evaluate() {
  require_world();
  const PolicyModel m = load_model("final");
  const int L = cfg_.eval.max_response_len;
  const Measurement mm = measure(m, true);
  EvalReport rep;
  rep.forget_quality = mm.forget.by_kind;
  rep.retain_quality = mm.retain.by_kind;
  rep.refusal_rate_forget = mm.refusal_rate_forget;
  rep.false_refusal_boundary = mm.false_refusal_boundary;
  const auto neighbor_probes = select(queries_, QuerySet::ProbeNeighbor);
  rep.false_refusal_neighbor = refusal_rate(m, world_, neighbor_probes, L);
  const auto forget_probes = select(queries_, QuerySet::ProbeForget);
  rep.naturalness = naturalness_of(world_, forget_probes, mm.forget.responses);

  std::vector<Query> para;
  for (const auto& q : forget_probes) {
    if (q.kind == TemplateKind::PARA) para.push_back(q);
  }
  rep.extra["refusal_rate_probe_forget"] = refusal_rate(m, world_, forget_probes, L);
  rep.extra["refusal_rate_paraphrase"] = para.empty() ? std::nan("") : refusal_rate(m, world_, para, L);
  rep.extra["refusal_rate_heldout_forget"] =
      refusal_rate(m, world_, select(queries_, QuerySet::Forget, Split::Heldout), L);
  rep.extra["false_refusal_boundary_train"] =
      refusal_rate(m, world_, select(queries_, QuerySet::Boundary, Split::Train), L);
  rep.extra["mean_reward_heldout"] = mm.heldout_reward;
  rep.extra["gate_accuracy"] = mm.gate_accuracy;

  // Pareto points: one per recorded step of the unlearning stage.
  const Stage stage = cfg_.method == Method::Rule ? Stage::Rebo : Stage::Baseline;
  const fs::path mp = path("metrics/" + std::string(to_string(stage)) + ".jsonl");
  std::vector<ParetoPoint> points;
  if (fs::exists(mp)) {
    std::istringstream in(read_text(mp));
    std::string line;
    while (std::getline(in, line)) {
      if (line.empty()) continue;
      const auto j = ordered_json::parse(line);
      if (j["forget_rouge"].is_null() || j["retain_rouge"].is_null()) continue;
      points.push_back({j["forget_rouge"].get<double>(), j["retain_rouge"].get<double>(),
                        j["step"].get<int>(), cfg_.method_label()});
    }
  }
  for (double t : cfg_.eval.auc_thresholds) rep.pareto[t] = pareto_auc(points, t);

  const fs::path curve = path("relearn/unlearned.csv");
  if (fs::exists(curve)) {
    std::istringstream in(read_text(curve));
    std::string line;
    std::getline(in, line);
    while (std::getline(in, line)) {
      if (line.empty()) continue;
      const auto comma = line.find(',');
      rep.relearn_curve.push_back({std::stoi(line.substr(0, comma)), std::stod(line.substr(comma + 1))});
    }
  }

  write_text(path("eval/frontier.csv"), frontier_csv(points));
  if (cfg_.plot) {
    MethodComparison mc;
    mc.method = cfg_.method_label();
    mc.run_dir = dir_.string();
    mc.points = points;
    mc.auc = rep.pareto;
    write_text(path("eval/frontier.svg"), frontier_svg({mc}));
  }
  write_text(path("eval/report.json"), report_to_json(rep));
  char buf[200];
  std::snprintf(buf, sizeof buf,
                "[eval] forget %.1f retain %.1f refusal %.2f false-refusal(neighbor) %.2f "
                "naturalness %.1f",
                rep.forget_quality.all, rep.retain_quality.all, rep.refusal_rate_forget,
                rep.false_refusal_neighbor, rep.naturalness.all);
  say(buf);
  return rep;
}

void Pipeline::relearn() {
  require_world();
  const PolicyModel unlearned = load_model("final");
  const PolicyModel original = load_model("pretrained");
  const auto passages = forget_passages(world_);
  const auto probes = select(queries_, QuerySet::ProbeForget);
  auto write_curve = [&](const std::string& name, const PolicyModel& m) {
    const auto curve = relearn_probe(m, passages, probes, cfg_.relearn.steps, cfg_.relearn.lr,
                                     cfg_.eval.max_response_len);
    std::ostringstream os;
    os.precision(17);
    os << "step,forget_rouge\n";
    for (const auto& p : curve) os << p.step << ',' << p.forget_rouge << '\n';
    write_text(path("relearn/" + name + ".csv"), os.str());
    char buf[120];
    std::snprintf(buf, sizeof buf, "[relearn] %s: forget %.1f -> %.1f", name.c_str(),
                  curve.front().forget_rouge, curve.back().forget_rouge);
    say(buf);
  };
  write_curve("unlearned", unlearned);
  write_curve("original", original);
  if (complete(Stage::Eval)) evaluate();
}

void Pipeline::run(Stage s) {
  switch (s) {
    case Stage::GenWorld: gen_world(); break;
    case Stage::Pretrain: pretrain(); break;
    case Stage::Steer: steer(); break;
    case Stage::Rebo: rebo(); break;
    case Stage::Baseline: baseline(); break;
    case Stage::Eval: evaluate(); break;
    case Stage::Relearn: relearn(); break;
  }
}

void Pipeline::run_all(bool resume) {
  std::vector<Stage> order = {Stage::GenWorld, Stage::Pretrain};
  if (cfg_.method == Method::Rule) {
    order.push_back(Stage::Steer);
    order.push_back(Stage::Rebo);
  } else {
    order.push_back(Stage::Baseline);
  }
  order.push_back(Stage::Eval);
  for (Stage s : order) {
    if (resume && (complete(s) || !applies(s))) continue;
    run(s);
  }
}

void Pipeline::import_stage(const fs::path& other, Stage s) {
  std::vector<std::string> files;
  if (s == Stage::Pretrain) {
    files = {"checkpoints/pretrained.ckpt", "gold_cache.jsonl", "metrics/pretrain.jsonl"};
  } else if (s == Stage::Steer) {
    files = {"checkpoints/rejected.ckpt", "metrics/steer.jsonl"};
  } else {
    throw DomainError("import_stage: only pretrain and steer can be imported");
  }
  if (fs::exists(other) && fs::exists(dir_) && fs::equivalent(other, dir_)) return;
  if (!fs::exists(path("world/records.jsonl"))) gen_world();
  require_world();
  if (read_text(other / "world/records.jsonl") != read_text(path("world/records.jsonl"))) {
    throw ConfigError("cannot import from " + other.string() + ": different world");
  }
  if (fs::exists(other / "config.snapshot")) {
    const auto theirs = ordered_json::parse(read_text(other / "config.snapshot"));
    const auto ours = ordered_json::parse(config_to_json(cfg_));
    std::vector<std::string> keys = {"seed", "world", "model", "pretrain"};
    if (s == Stage::Steer) keys.push_back("rs");
    for (const auto& k : keys) {
      if (theirs.value(k, ordered_json()) != ours[k]) {
        throw ConfigError("cannot import from " + other.string() + ": '" + k + "' differs");
      }
    }
  }
  for (const auto& f : files) {
    if (!fs::exists(other / f)) {
      throw MissingPrerequisite((other / f).string() + " does not exist");
    }
  }
  for (const auto& f : files) {
    fs::create_directories(path(f).parent_path());
    fs::copy_file(other / f, path(f), fs::copy_options::overwrite_existing);
  }
  load_model(s == Stage::Pretrain ? "pretrained" : "rejected");
  std::string all;
  for (Stage st : {Stage::Pretrain, Stage::Steer, Stage::Rebo, Stage::Baseline}) {
    const fs::path p = path("metrics/" + std::string(to_string(st)) + ".jsonl");
    if (fs::exists(p)) all += read_text(p);
  }
  write_text(path("metrics.jsonl"), all);
}

}  // namespace rulelab
