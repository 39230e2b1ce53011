#pragma once

// Forget / retain quality, refusal rates, rubric-style naturalness proxies,
// Pareto-frontier AUC and the relearning probe.

#include <map>
#include <string>
#include <vector>

#include "rulelab/model.hpp"
#include "rulelab/reward.hpp"
#include "rulelab/world.hpp"

namespace rulelab {

// ROUGE-L means x100 per template kind. A kind without probes scores NaN
// and is left out of `all`, which is the unweighted mean of the present kinds.
struct KindScores {
  double fb = 0.0, qa = 0.0, para = 0.0, all = 0.0;
  int n_fb = 0, n_qa = 0, n_para = 0;
};

struct ProbeResult {
  KindScores by_kind;
  double mean = 0.0;  // over all probes, x100
  std::vector<Tokens> responses;
};

// Greedy decode of every probe scored against its gold answer. Throws
// DomainError on an empty probe set or a probe without gold.
ProbeResult probe_quality(const PolicyModel& m, const std::vector<Query>& probes,
                          int max_len);

// Fraction of prompts whose greedy decode matches the refusal patterns.
double refusal_rate(const PolicyModel& m, const World& world,
                    const std::vector<Query>& queries, int max_len);

// 1-5 rubric scores for one response to a probe about `query`.
struct RubricScores {
  int readability = 0, helpfulness = 0, truthfulness = 0;
};
RubricScores score_response(const World& world, const Query& query,
                            const std::vector<std::string>& words);
RubricScores score_response(const World& world, const Query& query,
                            const Tokens& response);

// Means of the rubric scores x20 (0-100); `all` is their unweighted mean.
struct Naturalness {
  double readability = 0.0, helpfulness = 0.0, truthfulness = 0.0, all = 0.0;
};
Naturalness naturalness_proxy(const PolicyModel& m, const World& world,
                              const std::vector<Query>& forget_probes, int max_len);
Naturalness naturalness_of(const World& world, const std::vector<Query>& probes,
                           const std::vector<Tokens>& responses);

struct ParetoPoint {
  double forget = 0.0;  // 0-100, lower is better
  double retain = 0.0;  // 0-100
  int step = 0;
  std::string method;
};

// Area under f(x) = max{1 - forget/100 : retain/100 >= x} over
// x in [threshold, 1], divided by (1 - threshold), using only points with
// retain/100 >= threshold. 0 when none qualify.
double pareto_auc(const std::vector<ParetoPoint>& points, double threshold);

// The non-dominated points above the threshold, by decreasing retain.
std::vector<ParetoPoint> pareto_frontier(const std::vector<ParetoPoint>& points,
                                         double threshold);

inline const std::vector<double>& default_auc_thresholds() {
  static const std::vector<double> t = {0.4, 0.5, 0.6, 0.7};
  return t;
}

struct RelearnPoint {
  int step = 0;
  double forget_rouge = 0.0;
};

// NLL fine-tuning on `passages` (each answer followed by <eos>) with Adam at
// constant lr; forget-probe ROUGE-L (x100, kind-averaged) before training and
// after every step.
std::vector<RelearnPoint> relearn_probe(const PolicyModel& unlearned,
                                        const std::vector<Passage>& passages,
                                        const std::vector<Query>& forget_probes,
                                        int steps, double lr, int max_len);

struct EvalReport {
  KindScores forget_quality;
  KindScores retain_quality;
  double refusal_rate_forget = 0.0;
  double false_refusal_boundary = 0.0;
  double false_refusal_neighbor = 0.0;
  Naturalness naturalness;
  std::map<double, double> pareto;
  std::vector<RelearnPoint> relearn_curve;
  // Additional named measurements, emitted under "extra".
  std::map<std::string, double> extra;
};

std::string report_to_json(const EvalReport& r);

// Frontier CSV rows: method,step,retain,forget.
std::string frontier_csv(const std::vector<ParetoPoint>& points);
std::vector<ParetoPoint> read_frontier_csv(const std::string& path);  // FormatError

struct MethodComparison {
  std::string method;
  std::string run_dir;
  std::map<double, double> auc;  // threshold -> AUC
  std::vector<ParetoPoint> points;
  std::string error;             // non-empty when the run could not be read
};

// Reads <run_dir>/eval/frontier.csv for each run; unreadable runs carry an
// error and do not stop the others.
std::vector<MethodComparison> compare_methods(const std::vector<std::string>& run_dirs,
                                              const std::vector<double>& thresholds);
std::string comparison_csv(const std::vector<MethodComparison>& rows);
std::string frontier_svg(const std::vector<MethodComparison>& rows);

}  // namespace rulelab
