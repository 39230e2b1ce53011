#include "rulelab/config.hpp"

#include <fstream>
#include <sstream>

#include "json.hpp"

#include "rulelab/errors.hpp"

namespace rulelab {
namespace {

using nlohmann::ordered_json;

const char* type_label(const ordered_json& j) {
  if (j.is_boolean()) return "boolean";
  if (j.is_number_integer() || j.is_number_unsigned()) return "integer";
  if (j.is_number()) return "number";
  if (j.is_string()) return "string";
  if (j.is_array()) return "array";
  if (j.is_object()) return "object";
  return "null";
}

bool compatible(const ordered_json& def, const ordered_json& val) {
  if (def.is_boolean()) return val.is_boolean();
  if (def.is_number_integer() || def.is_number_unsigned()) {
    return val.is_number_integer() || val.is_number_unsigned();
  }
  if (def.is_number()) return val.is_number();
  if (def.is_string()) return val.is_string();
  if (def.is_array()) {
    if (!val.is_array()) return false;
    for (const auto& e : val) {
      if (!e.is_number()) return false;
    }
    return true;
  }
  return false;
}

void merge_strict(ordered_json& base, const ordered_json& patch, const std::string& path) {
  if (!patch.is_object()) {
    throw ConfigError("key '" + (path.empty() ? std::string("<root>") : path) +
                      "': expected object, got " + type_label(patch));
  }
  for (const auto& [key, val] : patch.items()) {
    const std::string full = path.empty() ? key : path + "." + key;
    if (!base.contains(key)) throw ConfigError("unknown key '" + full + "'");
    ordered_json& slot = base[key];
    if (slot.is_object()) {
      merge_strict(slot, val, full);
    } else if (!compatible(slot, val)) {
      throw ConfigError("key '" + full + "': expected " + type_label(slot) + ", got " +
                        type_label(val));
    } else {
      slot = val;
    }
  }
}

template <typename Enum, std::size_t N>
Enum parse_enum(const std::string& key, const std::string& value,
                const std::pair<const char*, Enum> (&table)[N]) {
  std::string options;
  for (const auto& [name, e] : table) {
    if (value == name) return e;
    options += options.empty() ? name : std::string("|") + name;
  }
  throw ConfigError("key '" + key + "': '" + value + "' is not one of " + options);
}

constexpr std::pair<const char*, Method> kMethods[] = {{"rule", Method::Rule},
                                                       {"baseline", Method::Baseline}};
constexpr std::pair<const char*, Ablation> kAblations[] = {
    {"None", Ablation::None},
    {"NoRS", Ablation::NoRS},
    {"NoRS_SystemPrompt", Ablation::NoRS_SystemPrompt},
    {"NoBoundary", Ablation::NoBoundary}};
constexpr std::pair<const char*, BaselineAlgo> kBaselines[] = {{"GA", BaselineAlgo::GA},
                                                               {"GA_GDR", BaselineAlgo::GA_GDR}};
constexpr std::pair<const char*, RougeMode> kRouge[] = {{"F1", RougeMode::F1},
                                                        {"Recall", RougeMode::Recall}};
constexpr std::pair<const char*, Algo> kAlgos[] = {
    {"PPO", Algo::PPO}, {"GRPO", Algo::GRPO}, {"RPP", Algo::RPP}};

ordered_json to_document(const PipelineConfig& c) {
  ordered_json j;
  j["seed"] = c.seed;
  j["method"] = std::string(to_string(c.method));
  j["ablation"] = std::string(to_string(c.ablation));
  j["world"] = {{"n_entities", c.world.n_entities},
                {"n_attributes", c.world.n_attributes},
                {"n_templates_per_kind", c.world.n_templates_per_kind},
                {"n_unfamiliar", c.world.n_unfamiliar},
                {"forget_fraction", c.world.forget_fraction},
                {"heldout_fraction", c.world.heldout_fraction}};
  j["model"] = {{"context_len", c.model.context_len},
                {"embed_dim", c.model.embed_dim},
                {"n_layers", c.model.n_layers},
                {"n_heads", c.model.n_heads},
                {"value_head", c.model.value_head}};
  j["reward"] = {{"alpha", c.reward.alpha},
                 {"beta", c.reward.beta},
                 {"tau", c.reward.tau},
                 {"rouge_mode", c.reward.rouge_mode == RougeMode::F1 ? "F1" : "Recall"}};
  j["pretrain"] = {{"repetitions", c.pretrain.repetitions},
                   {"min_epochs", c.pretrain.min_epochs},
                   {"max_epochs", c.pretrain.max_epochs},
                   {"batch_size", c.pretrain.batch_size},
                   {"lr", c.pretrain.lr},
                   {"eval_every", c.pretrain.eval_every},
                   {"gate", c.pretrain.gate}};
  j["rs"] = {{"epochs", c.rs.epochs}, {"lr", c.rs.lr}, {"batch_size", c.rs.batch_size}};
  const RLConfig& r = c.rebo.rl;
  j["rebo"] = {{"algo", std::string(to_string(r.algo))},
               {"steps", c.rebo.steps},
               {"heldout_eval_every", c.rebo.heldout_eval_every},
               {"group_size", r.group_size},
               {"clip_eps", r.clip_eps},
               {"kl_coef", r.kl_coef},
               {"gamma", r.gamma},
               {"gae_lambda", r.gae_lambda},
               {"max_response_len", r.max_response_len},
               {"updates_per_batch", r.updates_per_batch},
               {"lr", r.lr},
               {"adv_epsilon", r.adv_epsilon},
               {"temperature", r.temperature},
               {"value_coef", r.value_coef},
               {"max_grad_norm", r.max_grad_norm}};
  j["baseline"] = {{"algo", std::string(to_string(c.baseline.algo))},
                   {"lambda", c.baseline.lambda},
                   {"steps", c.baseline.steps},
                   {"lr", c.baseline.lr},
                   {"max_grad_norm", c.baseline.max_grad_norm}};
  j["eval"] = {{"max_response_len", c.eval.max_response_len},
               {"auc_thresholds", c.eval.auc_thresholds},
               {"step_checkpoints", c.eval.step_checkpoints}};
  j["relearn"] = {{"steps", c.relearn.steps}, {"lr", c.relearn.lr}};
  j["output"] = {{"root", c.output_root}, {"plot", c.plot}};
  return j;
}

PipelineConfig from_document(const ordered_json& j) {
  PipelineConfig c;
  if (j["seed"].is_number_integer() && j["seed"].get<std::int64_t>() < 0) {
    throw ConfigError("key 'seed': must be >= 0");
  }
  c.seed = j["seed"].get<std::uint64_t>();
  c.method = parse_enum("method", j["method"].get<std::string>(), kMethods);
  c.ablation = parse_enum("ablation", j["ablation"].get<std::string>(), kAblations);

  const auto& w = j["world"];
  c.world.n_entities = w["n_entities"].get<int>();
  c.world.n_attributes = w["n_attributes"].get<int>();
  c.world.n_templates_per_kind = w["n_templates_per_kind"].get<int>();
  c.world.n_unfamiliar = w["n_unfamiliar"].get<int>();
  c.world.forget_fraction = w["forget_fraction"].get<double>();
  c.world.heldout_fraction = w["heldout_fraction"].get<double>();

  const auto& m = j["model"];
  c.model.context_len = m["context_len"].get<int>();
  c.model.embed_dim = m["embed_dim"].get<int>();
  c.model.n_layers = m["n_layers"].get<int>();
  c.model.n_heads = m["n_heads"].get<int>();
  c.model.value_head = m["value_head"].get<bool>();

  const auto& rw = j["reward"];
  c.reward.alpha = rw["alpha"].get<double>();
  c.reward.beta = rw["beta"].get<double>();
  c.reward.tau = rw["tau"].get<double>();
  c.reward.rouge_mode = parse_enum("reward.rouge_mode", rw["rouge_mode"].get<std::string>(), kRouge);

  const auto& p = j["pretrain"];
  c.pretrain.repetitions = p["repetitions"].get<int>();
  c.pretrain.min_epochs = p["min_epochs"].get<int>();
  c.pretrain.max_epochs = p["max_epochs"].get<int>();
  c.pretrain.batch_size = p["batch_size"].get<int>();
  c.pretrain.lr = p["lr"].get<double>();
  c.pretrain.eval_every = p["eval_every"].get<int>();
  c.pretrain.gate = p["gate"].get<double>();

  const auto& rs = j["rs"];
  c.rs.epochs = rs["epochs"].get<int>();
  c.rs.lr = rs["lr"].get<double>();
  c.rs.batch_size = rs["batch_size"].get<int>();

  const auto& rb = j["rebo"];
  RLConfig& r = c.rebo.rl;
  r.algo = parse_enum("rebo.algo", rb["algo"].get<std::string>(), kAlgos);
  c.rebo.steps = rb["steps"].get<int>();
  c.rebo.heldout_eval_every = rb["heldout_eval_every"].get<int>();
  r.group_size = rb["group_size"].get<int>();
  r.clip_eps = rb["clip_eps"].get<double>();
  r.kl_coef = rb["kl_coef"].get<double>();
  r.gamma = rb["gamma"].get<double>();
  r.gae_lambda = rb["gae_lambda"].get<double>();
  r.max_response_len = rb["max_response_len"].get<int>();
  r.updates_per_batch = rb["updates_per_batch"].get<int>();
  r.lr = rb["lr"].get<double>();
  r.adv_epsilon = rb["adv_epsilon"].get<double>();
  r.temperature = rb["temperature"].get<double>();
  r.value_coef = rb["value_coef"].get<double>();
  r.max_grad_norm = rb["max_grad_norm"].get<double>();

  const auto& b = j["baseline"];
  c.baseline.algo = parse_enum("baseline.algo", b["algo"].get<std::string>(), kBaselines);
  c.baseline.lambda = b["lambda"].get<double>();
  c.baseline.steps = b["steps"].get<int>();
  c.baseline.lr = b["lr"].get<double>();
  c.baseline.max_grad_norm = b["max_grad_norm"].get<double>();

  const auto& e = j["eval"];
  c.eval.max_response_len = e["max_response_len"].get<int>();
  c.eval.auc_thresholds = e["auc_thresholds"].get<std::vector<double>>();
  c.eval.step_checkpoints = e["step_checkpoints"].get<bool>();

  c.relearn.steps = j["relearn"]["steps"].get<int>();
  c.relearn.lr = j["relearn"]["lr"].get<double>();
  c.output_root = j["output"]["root"].get<std::string>();
  c.plot = j["output"]["plot"].get<bool>();
  return c;
}

ordered_json override_patch(const std::string& assignment) {
  const auto eq = assignment.find('=');
  if (eq == std::string::npos || eq == 0) {
    throw ConfigError("override '" + assignment + "' is not key=value");
  }
  const std::string path = assignment.substr(0, eq);
  const std::string raw = assignment.substr(eq + 1);
  ordered_json value = ordered_json::parse(raw, nullptr, false);
  if (value.is_discarded()) value = raw;

  ordered_json patch = value;
  std::size_t end = path.size();
  while (true) {
    const auto dot = path.rfind('.', end - 1);
    const std::size_t begin = dot == std::string::npos ? 0 : dot + 1;
    const std::string key = path.substr(begin, end - begin);
    if (key.empty()) throw ConfigError("override '" + assignment + "' has an empty key");
    ordered_json wrapped;
    wrapped[key] = std::move(patch);
    patch = std::move(wrapped);
    if (dot == std::string::npos) break;
    end = dot;
  }
  return patch;
}

}  // namespace

std::string_view to_string(Method m) { return m == Method::Rule ? "rule" : "baseline"; }

std::string_view to_string(Ablation a) {
  for (const auto& [name, e] : kAblations) {
    if (e == a) return name;
  }
  return "?";
}

std::string_view to_string(BaselineAlgo a) { return a == BaselineAlgo::GA ? "GA" : "GA_GDR"; }

void PipelineConfig::validate() const {
  if (world.n_entities < 2) throw ConfigError("key 'world.n_entities': must be >= 2");
  if (world.n_attributes < 1) throw ConfigError("key 'world.n_attributes': must be >= 1");
  if (world.n_templates_per_kind < 2) {
    throw ConfigError("key 'world.n_templates_per_kind': must be >= 2");
  }
  if (world.n_unfamiliar < 0) throw ConfigError("key 'world.n_unfamiliar': must be >= 0");
  if (!(world.forget_fraction > 0.0 && world.forget_fraction <= 1.0)) {
    throw ConfigError("key 'world.forget_fraction': must be in (0, 1]");
  }
  if (!(world.heldout_fraction >= 0.0 && world.heldout_fraction < 1.0)) {
    throw ConfigError("key 'world.heldout_fraction': must be in [0, 1)");
  }
  ModelConfig mc = model_config(2);
  mc.validate();
  reward.validate();
  if (pretrain.repetitions < 1) throw ConfigError("key 'pretrain.repetitions': must be >= 1");
  if (pretrain.max_epochs < 1) throw ConfigError("key 'pretrain.max_epochs': must be >= 1");
  if (pretrain.min_epochs < 0 || pretrain.min_epochs > pretrain.max_epochs) {
    throw ConfigError("key 'pretrain.min_epochs': must be in [0, pretrain.max_epochs]");
  }
  if (pretrain.batch_size < 1) throw ConfigError("key 'pretrain.batch_size': must be >= 1");
  if (!(pretrain.lr > 0.0)) throw ConfigError("key 'pretrain.lr': must be > 0");
  if (pretrain.eval_every < 1) throw ConfigError("key 'pretrain.eval_every': must be >= 1");
  if (!(pretrain.gate >= 0.0 && pretrain.gate <= 1.0)) {
    throw ConfigError("key 'pretrain.gate': must be in [0, 1]");
  }
  const bool rs_active = method == Method::Rule &&
                         (ablation == Ablation::None || ablation == Ablation::NoBoundary);
  if (rs.epochs < (rs_active ? 1 : 0)) {
    throw ConfigError(std::string("key 'rs.epochs': must be >= ") + (rs_active ? "1" : "0"));
  }
  if (!(rs.lr > 0.0)) throw ConfigError("key 'rs.lr': must be > 0");
  if (rs.batch_size < 1) throw ConfigError("key 'rs.batch_size': must be >= 1");
  rebo.rl.validate();
  if (rebo.steps < 0) throw ConfigError("key 'rebo.steps': must be >= 0");
  if (rebo.heldout_eval_every < 1) {
    throw ConfigError("key 'rebo.heldout_eval_every': must be >= 1");
  }
  if (rebo.rl.algo == Algo::PPO && !model.value_head) {
    throw ConfigError("key 'model.value_head': PPO needs a value head");
  }
  if (!(baseline.lambda >= 0.0)) throw ConfigError("key 'baseline.lambda': must be >= 0");
  if (baseline.steps < 0) throw ConfigError("key 'baseline.steps': must be >= 0");
  if (!(baseline.lr > 0.0)) throw ConfigError("key 'baseline.lr': must be > 0");
  if (!(baseline.max_grad_norm >= 0.0)) {
    throw ConfigError("key 'baseline.max_grad_norm': must be >= 0");
  }
  if (eval.max_response_len < 1) throw ConfigError("key 'eval.max_response_len': must be >= 1");
  for (double t : eval.auc_thresholds) {
    if (!(t >= 0.0 && t < 1.0)) throw ConfigError("key 'eval.auc_thresholds': entries must be in [0, 1)");
  }
  if (relearn.steps < 0) throw ConfigError("key 'relearn.steps': must be >= 0");
  if (!(relearn.lr > 0.0)) throw ConfigError("key 'relearn.lr': must be > 0");
}

WorldConfig PipelineConfig::world_config() const {
  return {seed, world.n_entities, world.n_attributes, world.n_templates_per_kind,
          world.n_unfamiliar};
}

ModelConfig PipelineConfig::model_config(int vocab_size) const {
  ModelConfig mc;
  mc.vocab_size = vocab_size;
  mc.context_len = model.context_len;
  mc.embed_dim = model.embed_dim;
  mc.n_layers = model.n_layers;
  mc.n_heads = model.n_heads;
  mc.value_head = model.value_head;
  return mc;
}

std::string PipelineConfig::method_label() const {
  if (method == Method::Baseline) return std::string(to_string(baseline.algo));
  if (ablation == Ablation::None) return "RULE";
  return "RULE-" + std::string(to_string(ablation));
}

std::string config_to_json(const PipelineConfig& cfg) { return to_document(cfg).dump(2) + "\n"; }

PipelineConfig parse_config_text(std::string_view text, const std::vector<std::string>& overrides) {
  ordered_json doc = to_document(PipelineConfig{});
  if (!text.empty()) {
    ordered_json user;
    try {
      user = ordered_json::parse(text);
    } catch (const ordered_json::parse_error& e) {
      throw ConfigError(std::string("config is not valid JSON: ") + e.what());
    }
    merge_strict(doc, user, "");
  }
  for (const auto& o : overrides) merge_strict(doc, override_patch(o), "");
  PipelineConfig cfg = from_document(doc);
  cfg.validate();
  return cfg;
}

PipelineConfig load_config(const std::string& path, const std::vector<std::string>& overrides) {
  std::string text;
  if (!path.empty()) {
    std::ifstream in(path);
    if (!in) throw ConfigError("cannot open config file " + path);
    std::stringstream ss;
    ss << in.rdbuf();
    text = ss.str();
  }
  return parse_config_text(text, overrides);
}

}  // namespace rulelab
