#include <filesystem>
#include <fstream>
#include <set>
#include <unistd.h>
#include <sstream>

#include "doctest.h"
#include "json.hpp"
#include "rulelab/config.hpp"
#include "rulelab/errors.hpp"
#include "rulelab/pipeline.hpp"
#include "rulelab/reward.hpp"

using namespace rulelab;
namespace fs = std::filesystem;

namespace {

const std::vector<std::string> kTiny = {
    "world.n_entities=3",       "world.n_attributes=2",    "world.n_templates_per_kind=2",
    "world.n_unfamiliar=2",     "model.embed_dim=16",      "model.n_layers=1",
    "model.n_heads=2",          "pretrain.gate=0",         "pretrain.min_epochs=1",
    "pretrain.max_epochs=2",    "pretrain.eval_every=1",   "rs.epochs=1",
    "rebo.steps=2",             "rebo.group_size=2",       "rebo.max_response_len=4",
    "eval.max_response_len=4",  "baseline.steps=2",        "relearn.steps=2"};

PipelineConfig tiny(std::vector<std::string> extra = {}) {
  std::vector<std::string> o = kTiny;
  o.insert(o.end(), extra.begin(), extra.end());
  return parse_config_text("", o);
}

struct TempDir {
  fs::path path;
  explicit TempDir(const std::string& tag) {
    path = fs::temp_directory_path() / ("rulelab_test_" + tag + "_" + std::to_string(::getpid()));
    fs::remove_all(path);
  }
  ~TempDir() { fs::remove_all(path); }
};

std::string slurp(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  std::stringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

std::string message_of(const std::function<void()>& f) {
  try {
    f();
  } catch (const std::exception& e) {
    return e.what();
  }
  return "";
}

}  // namespace

TEST_CASE("shipped default config parses and equals the built-in defaults") {
  const PipelineConfig cfg = load_config(RULELAB_SOURCE_DIR "/configs/default.json");
  CHECK(config_to_json(cfg) == config_to_json(PipelineConfig{}));
  CHECK(cfg.world.n_entities == 8);
  CHECK(cfg.rebo.rl.algo == Algo::GRPO);
  CHECK(cfg.rs.epochs == 2);
  CHECK(cfg.rebo.steps == 20);
  CHECK(cfg.rebo.rl.kl_coef == doctest::Approx(1e-2));
  CHECK(cfg.baseline.lambda == 1.0);
}

TEST_CASE("overrides supersede file values") {
  const PipelineConfig cfg =
      parse_config_text(R"({"rebo": {"kl_coef": 0.2, "steps": 3}})", {"rebo.kl_coef=0.05"});
  CHECK(cfg.rebo.rl.kl_coef == 0.05);
  CHECK(cfg.rebo.steps == 3);
  CHECK(parse_config_text("", {"rebo.algo=PPO"}).rebo.rl.algo == Algo::PPO);
  CHECK(parse_config_text("", {"ablation=NoRS"}).ablation == Ablation::NoRS);
  CHECK(parse_config_text("", {"model.value_head=false"}).model.value_head == false);
  CHECK(parse_config_text("", {"eval.auc_thresholds=[0.5]"}).eval.auc_thresholds ==
        std::vector<double>{0.5});
}

TEST_CASE("unknown keys and bad values name the key path") {
  CHECK(message_of([] { parse_config_text("", {"rebo.klcoef=0.05"}); }).find("rebo.klcoef") !=
        std::string::npos);
  CHECK_THROWS_AS(parse_config_text(R"({"rebo": {"klcoef": 1}})"), ConfigError);
  CHECK_THROWS_AS(parse_config_text(R"({"bogus": 1})"), ConfigError);
  CHECK(message_of([] { parse_config_text(R"({"rebo": {"steps": 2.5}})"); })
            .find("rebo.steps") != std::string::npos);
  CHECK(message_of([] { parse_config_text(R"({"world": 3})"); }).find("world") != std::string::npos);
  CHECK(message_of([] { parse_config_text("", {"rebo.algo=DPO"}); }).find("rebo.algo") !=
        std::string::npos);
  CHECK_THROWS_AS(parse_config_text("{not json"), ConfigError);
  CHECK_THROWS_AS(parse_config_text("", {"novalue"}), ConfigError);
  CHECK_THROWS_AS(parse_config_text("", {"world.n_entities=1"}), ConfigError);
  CHECK_THROWS_AS(parse_config_text("", {"model.n_heads=5"}), ConfigError);
  CHECK_THROWS_AS(parse_config_text("", {"reward.tau=1.5"}), ConfigError);
  CHECK_THROWS_AS(parse_config_text("", {"seed=-1"}), ConfigError);
  CHECK_THROWS_AS(load_config("/nonexistent/config.json"), ConfigError);
}

TEST_CASE("stage step counts must be positive only when the stage is active") {
  CHECK_THROWS_AS(parse_config_text("", {"rs.epochs=0"}), ConfigError);
  CHECK_NOTHROW(parse_config_text("", {"rs.epochs=0", "ablation=NoRS"}));
  CHECK_NOTHROW(parse_config_text("", {"rs.epochs=0", "method=baseline"}));
}

TEST_CASE("resolved config round-trips through its JSON form") {
  const PipelineConfig a = parse_config_text("", {"seed=7", "rebo.lr=0.003", "ablation=NoBoundary"});
  const PipelineConfig b = parse_config_text(config_to_json(a));
  CHECK(config_to_json(a) == config_to_json(b));
  CHECK(b.seed == 7);
  CHECK(a.method_label() == "RULE-NoBoundary");
  CHECK(parse_config_text("", {"method=baseline", "baseline.algo=GA_GDR"}).method_label() ==
        "GA_GDR");
}

TEST_CASE("rejection pairs cover every forget query with every refusal template") {
  const World w = generate_world(0, 4, 3, 2);
  const auto qs = build_query_sets(w, 0.5, 0.34);
  const auto forget = select(qs, QuerySet::Forget, Split::Train);
  const auto pairs = rejection_pairs(w, forget);
  CHECK(pairs.size() == forget.size() * static_cast<std::size_t>(refusal_template_count()));
  const auto boundary = select(qs, QuerySet::Boundary);
  for (const auto& p : pairs) {
    CHECK(p.response.back() == Vocab::kEos);
    CHECK(is_refusal(w.vocab, p.response));
    CHECK(contains_target(w.vocab, p.response, w.target().name));
    for (const auto& b : boundary) CHECK(p.prompt != b.prompt);
  }
  CHECK_THROWS_AS(rejection_pairs(w, {}), DomainError);
}

TEST_CASE("ReBO query sets per ablation") {
  const World w = generate_world(0, 5, 3, 3);
  const auto qs = build_query_sets(w, 0.5, 0.34);
  const auto forget = select(qs, QuerySet::Forget, Split::Train);
  const auto boundary = select(qs, QuerySet::Boundary, Split::Train);

  const auto full = rebo_queries(qs, Ablation::None);
  CHECK(full.size() == forget.size() + boundary.size());

  const auto nb = rebo_queries(qs, Ablation::NoBoundary);
  REQUIRE(nb.size() == 2 * forget.size());
  std::set<int> ids;
  for (std::size_t i = 0; i < forget.size(); ++i) {
    const Query& r = nb[forget.size() + i];
    CHECK(r.set == QuerySet::Boundary);
    CHECK(r.prompt == forget[i].prompt);
    CHECK(r.target_entity == w.forget_target);
    auto it = std::find_if(boundary.begin(), boundary.end(), [&](const Query& b) { return b.id == r.id; });
    REQUIRE(it != boundary.end());
    CHECK(it->template_id == r.template_id);
    CHECK(r.gold_answer == it->gold_answer);
    ids.insert(r.id);
  }
  CHECK(ids.size() == forget.size());
}

TEST_CASE("full pipeline writes the run directory layout") {
  TempDir tmp("layout");
  Pipeline p(tiny(), tmp.path);
  p.write_snapshot();
  p.run_all(false);
  for (const char* rel : {"config.snapshot", "world/records.jsonl", "gold_cache.jsonl",
                          "checkpoints/pretrained.ckpt", "checkpoints/rejected.ckpt",
                          "checkpoints/final.ckpt", "checkpoints/step_0001.ckpt",
                          "checkpoints/step_0002.ckpt", "metrics.jsonl", "eval/report.json",
                          "eval/frontier.csv", "eval/frontier.svg"}) {
    CHECK_MESSAGE(fs::exists(tmp.path / rel), rel);
  }
  CHECK(slurp(tmp.path / "config.snapshot") == config_to_json(p.config()));

  std::istringstream metrics(slurp(tmp.path / "metrics.jsonl"));
  std::string line;
  std::map<std::string, int> per_stage;
  while (std::getline(metrics, line)) {
    const auto j = nlohmann::json::parse(line);
    for (const char* k : {"step", "stage", "mean_reward_train", "mean_reward_heldout",
                          "forget_rouge", "retain_rouge", "refusal_rate_forget",
                          "false_refusal_boundary", "mean_kl", "tokens_forget", "tokens_boundary"}) {
      CHECK_MESSAGE(j.contains(k), k);
    }
    ++per_stage[j["stage"].get<std::string>()];
    if (j["stage"] == "rebo") {
      CHECK(j["mean_reward_train"].is_number());
      CHECK(j["mean_reward_heldout"].is_number());
      if (j["step"] < 2) CHECK(j["tokens_boundary"].get<int>() > 0);
    }
    if (j["stage"] == "steer") CHECK(j["tokens_boundary"] == 0);
  }
  CHECK(per_stage["steer"] == 2);
  CHECK(per_stage["rebo"] == 3);

  const auto report = nlohmann::json::parse(slurp(tmp.path / "eval/report.json"));
  for (const char* k : {"forget_quality", "retain_quality", "refusal_rate_forget",
                        "false_refusal_boundary", "false_refusal_neighbor", "naturalness",
                        "pareto", "relearn_curve"}) {
    CHECK_MESSAGE(report.contains(k), k);
  }
  CHECK(report["pareto"].size() == 4);

  p.relearn();
  CHECK(fs::exists(tmp.path / "relearn/unlearned.csv"));
  CHECK(fs::exists(tmp.path / "relearn/original.csv"));
  const auto after = nlohmann::json::parse(slurp(tmp.path / "eval/report.json"));
  CHECK(after["relearn_curve"].size() == 3);
}

TEST_CASE("zero ReBO steps leaves the rejected model unchanged") {
  TempDir tmp("rebo0");
  Pipeline p(tiny({"rebo.steps=0"}), tmp.path);
  p.run_all(false);
  CHECK(p.load_model("final") == p.load_model("rejected"));
  CHECK_FALSE(p.load_model("rejected") == p.load_model("pretrained"));
}

TEST_CASE("NoRS skips steering and anchors on the pretrained model") {
  TempDir tmp("nors");
  Pipeline p(tiny({"ablation=NoRS", "rebo.steps=0"}), tmp.path);
  p.run_all(false);
  CHECK_FALSE(fs::exists(tmp.path / "checkpoints/rejected.ckpt"));
  CHECK(p.load_model("final") == p.load_model("pretrained"));
}

TEST_CASE("system-prompt ablation runs without a rejected checkpoint") {
  TempDir tmp("sysprompt");
  Pipeline p(tiny({"ablation=NoRS_SystemPrompt"}), tmp.path);
  p.run_all(false);
  CHECK_FALSE(fs::exists(tmp.path / "checkpoints/rejected.ckpt"));
  CHECK(fs::exists(tmp.path / "eval/report.json"));
}

TEST_CASE("baselines: zero steps is a no-op, steps change the model") {
  TempDir tmp("ga0");
  Pipeline p0(tiny({"method=baseline", "baseline.steps=0"}), tmp.path);
  p0.run_all(false);
  CHECK(p0.load_model("final") == p0.load_model("pretrained"));

  TempDir tmp2("gdr");
  Pipeline p1(tiny({"method=baseline", "baseline.algo=GA_GDR"}), tmp2.path);
  p1.run_all(false);
  CHECK_FALSE(p1.load_model("final") == p1.load_model("pretrained"));
  CHECK(fs::exists(tmp2.path / "checkpoints/step_0002.ckpt"));
  CHECK_THROWS_AS(p1.rebo(), ConfigError);
}

TEST_CASE("stages refuse to run without their prerequisites") {
  TempDir tmp("prereq");
  Pipeline p(tiny(), tmp.path);
  CHECK_THROWS_AS(p.pretrain(), MissingPrerequisite);
  p.gen_world();
  CHECK_THROWS_AS(p.steer(), MissingPrerequisite);
  CHECK_THROWS_AS(p.rebo(), MissingPrerequisite);
  CHECK_THROWS_AS(p.evaluate(), MissingPrerequisite);
  p.pretrain();
  CHECK_THROWS_AS(p.rebo(), MissingPrerequisite);

  Pipeline other(tiny({"world.n_entities=4"}), tmp.path);
  CHECK_THROWS_AS(other.pretrain(), ConfigError);
}

TEST_CASE("an unreachable probe gate fails pretraining but keeps the checkpoint") {
  TempDir tmp("gate");
  Pipeline p(tiny({"pretrain.gate=1", "pretrain.max_epochs=1", "pretrain.min_epochs=0"}), tmp.path);
  p.gen_world();
  CHECK_THROWS_AS(p.pretrain(), PretrainError);
  CHECK(fs::exists(tmp.path / "checkpoints/pretrained.ckpt"));
  CHECK_FALSE(p.complete(Stage::Pretrain));
}

TEST_CASE("identical config and seed give byte-identical metrics and checkpoints") {
  TempDir a("det_a"), b("det_b");
  Pipeline pa(tiny(), a.path), pb(tiny(), b.path);
  pa.run_all(false);
  pb.run_all(false);
  CHECK(slurp(a.path / "metrics.jsonl") == slurp(b.path / "metrics.jsonl"));
  CHECK(slurp(a.path / "checkpoints/final.ckpt") == slurp(b.path / "checkpoints/final.ckpt"));
  CHECK(slurp(a.path / "eval/report.json") == slurp(b.path / "eval/report.json"));

  TempDir c("det_c");
  Pipeline pc(tiny({"seed=1"}), c.path);
  pc.run_all(false);
  CHECK(slurp(a.path / "metrics.jsonl") != slurp(c.path / "metrics.jsonl"));
}

TEST_CASE("resume skips completed stages") {
  TempDir tmp("resume");
  Pipeline p(tiny(), tmp.path);
  p.run_all(false);
  const auto before = fs::last_write_time(tmp.path / "checkpoints/final.ckpt");
  const std::string metrics = slurp(tmp.path / "metrics.jsonl");
  p.run_all(true);
  CHECK(fs::last_write_time(tmp.path / "checkpoints/final.ckpt") == before);
  CHECK(slurp(tmp.path / "metrics.jsonl") == metrics);
}

TEST_CASE("imported pretraining matches pretraining in place") {
  TempDir a("imp_a"), b("imp_b");
  Pipeline pa(tiny(), a.path);
  pa.run_all(false);
  Pipeline pb(tiny(), b.path);
  pb.import_stage(a.path, Stage::Pretrain);
  pb.run_all(true);
  CHECK(slurp(a.path / "metrics.jsonl") == slurp(b.path / "metrics.jsonl"));
  CHECK_THROWS_AS(pb.import_stage(a.path, Stage::Eval), DomainError);

  TempDir c("imp_c");
  Pipeline pc(tiny({"world.n_entities=4"}), c.path);
  CHECK_THROWS_AS(pc.import_stage(a.path, Stage::Pretrain), ConfigError);
}

TEST_CASE("steering import requires matching steering settings") {
  TempDir a("st_a"), b("st_b"), c("st_c");
  Pipeline pa(tiny(), a.path);
  pa.write_snapshot();
  pa.run_all(false);
  Pipeline pb(tiny({"ablation=NoBoundary"}), b.path);
  pb.import_stage(a.path, Stage::Pretrain);
  pb.import_stage(a.path, Stage::Steer);
  CHECK(pb.load_model("rejected") == pa.load_model("rejected"));
  Pipeline pc(tiny({"rs.lr=0.01"}), c.path);
  pc.import_stage(a.path, Stage::Pretrain);
  CHECK_THROWS_AS(pc.import_stage(a.path, Stage::Steer), ConfigError);
}
