#pragma once

// End-to-end orchestration over one run directory: world generation,
// probe-gated pretraining, rejection steering, refusal boundary optimization,
// the gradient-ascent baselines, evaluation and the relearning probe.
//
// Run directory layout:
//   config.snapshot              resolved configuration
//   world/records.jsonl          entities, templates and queries
//   gold_cache.jsonl             pretrained-model decodes of Boundary prompts
//   checkpoints/{pretrained,rejected,final,step_NNNN}.ckpt
//   metrics/<stage>.jsonl        per-stage step records
//   metrics.jsonl                the per-stage files concatenated in stage order
//   eval/{report.json,frontier.csv,frontier.svg}
//   relearn/{unlearned,original}.csv

#include <filesystem>
#include <functional>
#include <string>
#include <string_view>
#include <vector>

#include "rulelab/config.hpp"
#include "rulelab/eval.hpp"
#include "rulelab/model.hpp"
#include "rulelab/optim.hpp"
#include "rulelab/world.hpp"

namespace rulelab {

enum class Stage { GenWorld, Pretrain, Steer, Rebo, Baseline, Eval, Relearn };
std::string_view to_string(Stage s);

// Measurements of one model on the fixed evaluation sets (greedy decoding).
struct Measurement {
  ProbeResult forget;            // ProbeForget, all kinds
  ProbeResult retain;            // ProbeNeighbor FB and QA
  double gate_accuracy = 0.0;    // share of FB/QA probes with ROUGE-L >= 0.99
  double refusal_rate_forget = 0.0;     // Train Forget
  double false_refusal_boundary = 0.0;  // Heldout Boundary
  double heldout_reward = 0.0;          // Heldout Forget and Boundary
};

// Pairs of (Train Forget prompt, targeted refusal + <eos>) over the whole
// refusal-template pool.
std::vector<SequencePair> rejection_pairs(const World& world,
                                          const std::vector<Query>& train_forget);

// Queries ReBO trains on under a given ablation: Train Forget plus either
// Train Boundary or, for NoBoundary, copies of the Train Forget queries
// relabeled as Boundary and keyed to the matching boundary query's gold.
std::vector<Query> rebo_queries(const std::vector<Query>& all, Ablation ablation);

class Pipeline {
 public:
  using Log = std::function<void(const std::string&)>;

  Pipeline(PipelineConfig cfg, std::filesystem::path run_dir, Log log = nullptr);

  const PipelineConfig& config() const { return cfg_; }
  const World& world() const { return world_; }
  const std::vector<Query>& queries() const { return queries_; }
  const std::filesystem::path& run_dir() const { return dir_; }
  std::filesystem::path path(std::string_view rel) const { return dir_ / rel; }

  bool complete(Stage s) const;
  // Whether the stage does anything under this configuration.
  bool applies(Stage s) const;

  void write_snapshot() const;
  void gen_world();
  void pretrain();
  void steer();
  void rebo();
  void baseline();
  EvalReport evaluate();
  void relearn();
  void run(Stage s);
  // gen-world, pretrain, then steer/rebo or baseline, then eval. With
  // `resume`, completed stages are skipped.
  void run_all(bool resume);

  // Copies the artifacts of a finished Pretrain or Steer stage from another
  // run directory with the same world and model configuration.
  void import_stage(const std::filesystem::path& other, Stage s);

  Measurement measure(const PolicyModel& m, bool with_heldout_reward) const;
  PolicyModel load_model(std::string_view name) const;
  GoldCache load_gold() const;

 private:
  void require_world() const;
  void require_file(std::string_view rel, std::string_view hint) const;
  void save_model(std::string_view name, const PolicyModel& m) const;
  void write_metrics(Stage s, const std::vector<std::string>& lines) const;
  void say(const std::string& msg) const;

  PipelineConfig cfg_;
  std::filesystem::path dir_;
  Log log_;
  World world_;
  std::vector<Query> queries_;
};

}  // namespace rulelab
