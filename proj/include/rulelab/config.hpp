#pragma once

// Pipeline configuration: one nested JSON document, strictly checked against
// the built-in defaults, with dotted key=value overrides applied last.

#include <cstdint>
#include <string>
#include <string_view>
#include <vector>

#include "rulelab/model.hpp"
#include "rulelab/optim.hpp"
#include "rulelab/reward.hpp"
#include "rulelab/world.hpp"

namespace rulelab {

enum class Method { Rule, Baseline };
enum class Ablation { None, NoRS, NoRS_SystemPrompt, NoBoundary };
enum class BaselineAlgo { GA, GA_GDR };

std::string_view to_string(Method m);
std::string_view to_string(Ablation a);
std::string_view to_string(BaselineAlgo a);

struct WorldSection {
  int n_entities = 8;
  int n_attributes = 4;
  int n_templates_per_kind = 5;
  int n_unfamiliar = 12;
  double forget_fraction = 0.5;
  double heldout_fraction = 0.34;
};

struct ModelSection {
  int context_len = 32;
  int embed_dim = 48;
  int n_layers = 2;
  int n_heads = 4;
  bool value_head = true;
};

struct PretrainSection {
  int repetitions = 1;
  int min_epochs = 50;
  int max_epochs = 300;
  int batch_size = 16;
  double lr = 3e-3;
  int eval_every = 10;
  double gate = 0.9;
};

struct RsSection {
  int epochs = 2;
  double lr = 1.5e-3;
  int batch_size = 8;
};

struct ReboSection {
  RLConfig rl;
  int steps = 20;
  int heldout_eval_every = 1;
};

struct BaselineSection {
  BaselineAlgo algo = BaselineAlgo::GA;
  double lambda = 1.0;
  int steps = 20;
  double lr = 1e-3;
  double max_grad_norm = 1.0;
};

struct EvalSection {
  int max_response_len = 12;
  std::vector<double> auc_thresholds = {0.4, 0.5, 0.6, 0.7};
  bool step_checkpoints = true;
};

struct RelearnSection {
  int steps = 10;
  double lr = 1e-3;
};

struct PipelineConfig {
  std::uint64_t seed = 0;
  Method method = Method::Rule;
  Ablation ablation = Ablation::None;
  WorldSection world;
  ModelSection model;
  RewardConfig reward;
  PretrainSection pretrain;
  RsSection rs;
  ReboSection rebo;
  BaselineSection baseline;
  EvalSection eval;
  RelearnSection relearn;
  std::string output_root;  // empty: RULELAB_OUTPUT_ROOT or ./runs
  bool plot = true;

  void validate() const;  // throws ConfigError naming the key path
  WorldConfig world_config() const;
  ModelConfig model_config(int vocab_size) const;
  std::string method_label() const;
};

// Resolved configuration as a JSON document (every key present).
std::string config_to_json(const PipelineConfig& cfg);

// Parses a JSON document over the defaults. Unknown keys and type mismatches
// throw ConfigError with the offending dotted path.
PipelineConfig parse_config_text(std::string_view text,
                                 const std::vector<std::string>& overrides = {});
// Same, reading `path`; an empty path means defaults only.
PipelineConfig load_config(const std::string& path,
                           const std::vector<std::string>& overrides = {});

}  // namespace rulelab
