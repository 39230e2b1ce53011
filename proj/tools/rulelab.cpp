// rulelab: command-line entry point for the unlearning pipeline.

#include <fcntl.h>
#include <sys/file.h>
#include <unistd.h>

#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <sstream>

#include "CLI11.hpp"

#include "rulelab/config.hpp"
#include "rulelab/errors.hpp"
#include "rulelab/eval.hpp"
#include "rulelab/pipeline.hpp"

namespace fs = std::filesystem;
using namespace rulelab;

namespace {

constexpr int kOk = 0;
constexpr int kStageFailure = 1;
constexpr int kConfigError = 2;

struct Options {
  std::string config;
  std::vector<std::string> set;
  std::string out;
  std::optional<std::uint64_t> seed;
  std::string pretrained_from;
  bool resume = false;
  bool quiet = false;
  bool print_config = false;
  std::vector<std::string> runs;
};

class RunLock {
 public:
  explicit RunLock(const fs::path& dir) {
    fs::create_directories(dir);
    const std::string p = (dir / ".lock").string();
    fd_ = ::open(p.c_str(), O_RDWR | O_CREAT, 0644);
    if (fd_ < 0) throw Error("cannot open lock file " + p);
    if (::flock(fd_, LOCK_EX | LOCK_NB) != 0) {
      ::close(fd_);
      fd_ = -1;
      throw Error("run directory " + dir.string() + " is locked by another rulelab process");
    }
  }
  ~RunLock() {
    if (fd_ >= 0) {
      ::flock(fd_, LOCK_UN);
      ::close(fd_);
    }
  }
  RunLock(const RunLock&) = delete;
  RunLock& operator=(const RunLock&) = delete;

 private:
  int fd_ = -1;
};

fs::path default_run_dir(const PipelineConfig& cfg) {
  fs::path root = cfg.output_root;
  if (root.empty()) {
    const char* env = std::getenv("RULELAB_OUTPUT_ROOT");
    root = env && *env ? env : "runs";
  }
  return root / (cfg.method_label() + "-seed" + std::to_string(cfg.seed));
}

std::string slurp(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  std::stringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

void print_paths(const fs::path& dir) {
  std::cout << "run directory: " << dir.string() << "\n";
  for (const char* rel : {"config.snapshot", "world/records.jsonl", "gold_cache.jsonl",
                          "checkpoints/pretrained.ckpt", "checkpoints/rejected.ckpt",
                          "checkpoints/final.ckpt", "metrics.jsonl", "eval/report.json",
                          "eval/frontier.csv", "eval/frontier.svg", "relearn/unlearned.csv",
                          "relearn/original.csv"}) {
    if (fs::exists(dir / rel)) std::cout << "  " << (dir / rel).string() << "\n";
  }
}

int run_stage(const std::string& name, const Options& o) {
  std::vector<std::string> overrides = o.set;
  if (o.seed) overrides.push_back("seed=" + std::to_string(*o.seed));
  const PipelineConfig cfg = load_config(o.config, overrides);
  if (o.print_config) {
    std::cout << config_to_json(cfg);
    return kOk;
  }
  const fs::path dir = o.out.empty() ? default_run_dir(cfg) : fs::path(o.out);
  RunLock lock(dir);

  Pipeline::Log log;
  if (!o.quiet) log = [](const std::string& s) { std::cerr << s << std::endl; };
  Pipeline p(cfg, dir, log);

  const std::string snapshot = config_to_json(cfg);
  if (o.resume && fs::exists(dir / "config.snapshot") && slurp(dir / "config.snapshot") != snapshot) {
    throw ConfigError("--resume: resolved configuration differs from " +
                      (dir / "config.snapshot").string());
  }
  p.write_snapshot();
  if (!o.pretrained_from.empty()) {
    p.import_stage(o.pretrained_from, Stage::Pretrain);
  }

  if (name == "all") {
    p.run_all(o.resume);
  } else {
    static const std::map<std::string, Stage> stages = {
        {"gen-world", Stage::GenWorld}, {"pretrain", Stage::Pretrain}, {"steer", Stage::Steer},
        {"rebo", Stage::Rebo},          {"baseline", Stage::Baseline}, {"eval", Stage::Eval},
        {"relearn", Stage::Relearn}};
    const Stage s = stages.at(name);
    if (o.resume && p.complete(s)) {
      if (!o.quiet) std::cerr << "[" << name << "] already complete, nothing to do\n";
    } else {
      p.run(s);
    }
  }
  if (!o.quiet) print_paths(dir);
  return kOk;
}

int run_compare(const Options& o) {
  if (o.runs.empty()) throw ConfigError("compare needs at least one run directory");
  std::vector<double> thresholds = default_auc_thresholds();
  if (!o.config.empty() || !o.set.empty()) thresholds = load_config(o.config, o.set).eval.auc_thresholds;
  const auto rows = compare_methods(o.runs, thresholds);
  const std::string table = comparison_csv(rows);
  std::cout << table;
  int failures = 0;
  for (const auto& r : rows) {
    if (!r.error.empty()) {
      std::cerr << "compare: " << r.run_dir << ": " << r.error << "\n";
      ++failures;
    }
  }
  if (!o.out.empty()) {
    const fs::path dir = o.out;
    fs::create_directories(dir);
    std::ofstream(dir / "comparison.csv") << table;
    std::ofstream(dir / "frontier.svg") << frontier_svg(rows);
    if (!o.quiet) {
      std::cout << "wrote " << (dir / "comparison.csv").string() << "\n"
                << "wrote " << (dir / "frontier.svg").string() << "\n";
    }
  }
  return failures == static_cast<int>(rows.size()) ? kStageFailure : kOk;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"rulelab: rejection steering and refusal boundary optimization on a synthetic world"};
  app.require_subcommand(1);
  Options o;

  auto common = [&](CLI::App* sub) {
    sub->add_option("--config", o.config, "JSON configuration file");
    sub->add_option("--set", o.set, "dotted key=value override, applied after the file")
        ->allow_extra_args(false);
    sub->add_option("--out", o.out, "run directory (default $RULELAB_OUTPUT_ROOT/<method>-seed<N>)");
    sub->add_option("--seed", o.seed, "overrides the config seed");
    sub->add_flag("--resume", o.resume, "skip stages that already completed");
    sub->add_flag("--quiet", o.quiet, "no progress output");
  };

  const std::vector<std::pair<std::string, std::string>> stages = {
      {"gen-world", "write the world and query records"},
      {"pretrain", "train the original model until the probe gate"},
      {"steer", "stage I: rejection steering"},
      {"rebo", "stage II: refusal boundary optimization"},
      {"baseline", "gradient-ascent baseline (GA or GA_GDR)"},
      {"eval", "evaluate the final model"},
      {"relearn", "relearning probe on the final and original models"},
      {"all", "gen-world, pretrain, steer, rebo (or baseline), eval"}};
  std::string chosen;
  for (const auto& [name, help] : stages) {
    CLI::App* sub = app.add_subcommand(name, help);
    common(sub);
    sub->add_option("--pretrained-from", o.pretrained_from,
                    "copy the pretrained checkpoint and gold cache from another run");
    sub->add_flag("--print-config", o.print_config, "print the resolved configuration and exit");
    sub->callback([&chosen, name = name] { chosen = name; });
  }
  CLI::App* cmp = app.add_subcommand("compare", "Pareto AUC table over run directories");
  common(cmp);
  cmp->add_option("runs", o.runs, "run directories")->required();
  cmp->callback([&chosen] { chosen = "compare"; });

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? kOk : kConfigError;
  }

  try {
    return chosen == "compare" ? run_compare(o) : run_stage(chosen, o);
  } catch (const ConfigError& e) {
    std::cerr << "config error: " << e.what() << "\n";
    return kConfigError;
  } catch (const MissingPrerequisite& e) {
    std::cerr << "missing prerequisite: " << e.what() << "\n";
    return kStageFailure;
  } catch (const std::exception& e) {
    std::cerr << chosen << " failed: " << e.what() << "\n";
    return kStageFailure;
  }
}
