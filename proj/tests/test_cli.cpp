#include <sys/file.h>
#include <sys/wait.h>
#include <fcntl.h>
#include <unistd.h>

#include <cstdio>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <sstream>
#include <string>

#include "doctest.h"

namespace fs = std::filesystem;

namespace {

struct Result {
  int code = -1;
  std::string out;  // stdout and stderr merged
};

Result run(const std::string& args, const std::string& env = "") {
  const std::string cmd = env + " " RULELAB_BIN " " + args + " 2>&1";
  Result r;
  FILE* p = ::popen(cmd.c_str(), "r");
  REQUIRE(p != nullptr);
  char buf[4096];
  std::size_t n;
  while ((n = std::fread(buf, 1, sizeof buf, p)) > 0) r.out.append(buf, n);
  const int status = ::pclose(p);
  r.code = WIFEXITED(status) ? WEXITSTATUS(status) : -1;
  return r;
}

const fs::path& root() {
  static const fs::path r = [] {
    fs::path p = fs::temp_directory_path() / ("rulelab_cli_" + std::to_string(::getpid()));
    fs::remove_all(p);
    fs::create_directories(p);
    std::ofstream(p / "tiny.json") << R"({
  "world": {"n_entities": 3, "n_attributes": 2, "n_templates_per_kind": 2, "n_unfamiliar": 2},
  "model": {"embed_dim": 16, "n_layers": 1, "n_heads": 2},
  "pretrain": {"gate": 0, "min_epochs": 1, "max_epochs": 2, "eval_every": 1},
  "rs": {"epochs": 1},
  "rebo": {"steps": 2, "group_size": 2, "max_response_len": 4},
  "eval": {"max_response_len": 4},
  "baseline": {"steps": 2},
  "relearn": {"steps": 2}
})";
    return p;
  }();
  return r;
}

std::string slurp(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  std::stringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

std::string tiny() { return "--config " + (root() / "tiny.json").string(); }

struct Cleanup {
  ~Cleanup() { fs::remove_all(root()); }
} cleanup;

}  // namespace

TEST_CASE("unknown config key exits 2 and names the key") {
  const Result r = run("all --set rebo.klcoef=0.05 --quiet --out " + (root() / "x").string());
  CHECK(r.code == 2);
  CHECK(r.out.find("rebo.klcoef") != std::string::npos);
  CHECK_FALSE(fs::exists(root() / "x" / "checkpoints"));
}

TEST_CASE("bad command line exits 2") {
  CHECK(run("").code == 2);
  CHECK(run("frobnicate").code == 2);
  CHECK(run("all --no-such-flag").code == 2);
  CHECK(run("all --config /nonexistent.json").code == 2);
}

TEST_CASE("rebo without a rejected checkpoint exits 1") {
  const std::string out = (root() / "prereq").string();
  CHECK(run("gen-world --quiet " + tiny() + " --out " + out).code == 0);
  CHECK(run("pretrain --quiet " + tiny() + " --out " + out).code == 0);
  const Result r = run("rebo --quiet " + tiny() + " --out " + out);
  CHECK(r.code == 1);
  CHECK(r.out.find("missing prerequisite") != std::string::npos);
}

TEST_CASE("all, resume and compare") {
  const std::string rule = (root() / "rule").string();
  const std::string ga = (root() / "ga").string();
  Result r = run("all " + tiny() + " --out " + rule);
  REQUIRE_MESSAGE(r.code == 0, r.out);
  CHECK(r.out.find("eval/report.json") != std::string::npos);
  CHECK(fs::exists(fs::path(rule) / "checkpoints/final.ckpt"));

  const auto stamp = fs::last_write_time(fs::path(rule) / "checkpoints/final.ckpt");
  r = run("all --resume --quiet " + tiny() + " --out " + rule);
  CHECK(r.code == 0);
  CHECK(fs::last_write_time(fs::path(rule) / "checkpoints/final.ckpt") == stamp);
  r = run("rebo --resume " + tiny() + " --out " + rule);
  CHECK(r.code == 0);
  CHECK(r.out.find("already complete") != std::string::npos);

  r = run("all --resume --quiet " + tiny() + " --set rebo.kl_coef=0.5 --out " + rule);
  CHECK(r.code == 2);

  r = run("all --quiet " + tiny() + " --set method=baseline --pretrained-from " + rule +
          " --out " + ga);
  REQUIRE_MESSAGE(r.code == 0, r.out);
  CHECK(slurp(fs::path(ga) / "checkpoints/pretrained.ckpt") ==
        slurp(fs::path(rule) / "checkpoints/pretrained.ckpt"));

  const std::string cmp = (root() / "cmp").string();
  r = run("compare --out " + cmp + " " + rule + " " + ga);
  CHECK(r.code == 0);
  CHECK(r.out.find("RULE") != std::string::npos);
  CHECK(r.out.find("GA") != std::string::npos);
  CHECK(fs::exists(fs::path(cmp) / "comparison.csv"));
  CHECK(fs::exists(fs::path(cmp) / "frontier.svg"));

  CHECK(run("compare " + (root() / "nothing").string()).code == 1);
}

TEST_CASE("default run directory honours RULELAB_OUTPUT_ROOT") {
  const fs::path base = root() / "envroot";
  const Result r = run("gen-world --quiet " + tiny() + " --seed 4", "RULELAB_OUTPUT_ROOT=" + base.string());
  CHECK(r.code == 0);
  CHECK(fs::exists(base / "RULE-seed4" / "world/records.jsonl"));
}

TEST_CASE("a locked run directory is refused") {
  const fs::path dir = root() / "locked";
  fs::create_directories(dir);
  const int fd = ::open((dir / ".lock").c_str(), O_RDWR | O_CREAT, 0644);
  REQUIRE(fd >= 0);
  REQUIRE(::flock(fd, LOCK_EX | LOCK_NB) == 0);
  const Result r = run("gen-world --quiet " + tiny() + " --out " + dir.string());
  CHECK(r.code == 1);
  CHECK(r.out.find("locked") != std::string::npos);
  ::close(fd);
}

TEST_CASE("print-config emits the resolved document") {
  const Result r = run("all --print-config --set rebo.kl_coef=0.05");
  CHECK(r.code == 0);
  CHECK(r.out.find("\"kl_coef\": 0.05") != std::string::npos);
}
