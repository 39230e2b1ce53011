#include <cmath>
#include <fstream>
#include <string>

#include "doctest.h"
#include "json.hpp"
#include "rulelab/errors.hpp"
#include "rulelab/reward.hpp"
#include "rulelab/rng.hpp"
#include "rulelab/world.hpp"
#include "oracles.hpp"

using namespace rulelab;

namespace {

Tokens random_tokens(Rng& rng, std::size_t max_len, int alphabet) {
  Tokens t(uniform_index(rng, max_len + 1));
  for (auto& x : t) x = static_cast<TokenId>(uniform_index(rng, static_cast<std::uint64_t>(alphabet)));
  return t;
}

}  // namespace

TEST_CASE("shipped fixture corpus: full agreement") {
  std::ifstream in(std::string(RULELAB_DATA_DIR) + "/refusal_fixtures.jsonl");
  REQUIRE(in);
  std::string line;
  int n = 0;
  while (std::getline(in, line)) {
    if (line.empty()) continue;
    auto j = nlohmann::json::parse(line);
    const std::string text = j.at("text");
    CAPTURE(text);
    CHECK(is_refusal(text) == j.at("expected_match").get<bool>());
    ++n;
  }
  CHECK(n >= 5);
}

TEST_CASE("builtin pattern set equals the shipped rule file") {
  auto from_file = RefusalPatternSet::from_file(std::string(RULELAB_DATA_DIR) + "/refusal_patterns.txt");
  REQUIRE(from_file.rules().size() == RefusalPatternSet::builtin().rules().size());
  for (std::size_t i = 0; i < from_file.rules().size(); ++i) {
    CHECK(from_file.rules()[i].source == RefusalPatternSet::builtin().rules()[i].source);
  }
}

TEST_CASE("rule grammar: alternatives, phrases, prefixes and gaps") {
  auto set = RefusalPatternSet::parse("# comment\nfoo|bar_baz qu*\nalpha ...2 omega\n");
  CHECK(set.rules().size() == 2);
  CHECK(set.matches("x Foo quick"));
  CHECK(set.matches("bar baz QUIET."));
  CHECK_FALSE(set.matches("bar quick"));
  CHECK(set.matches("alpha omega"));
  CHECK(set.matches("alpha a b omega"));
  CHECK_FALSE(set.matches("alpha a b c omega"));
  CHECK_THROWS_AS(RefusalPatternSet::parse("# only comments\n"), FormatError);
  CHECK_THROWS_AS(RefusalPatternSet::parse("... foo\n"), FormatError);
  CHECK_THROWS_AS(RefusalPatternSet::parse("foo||bar\n"), FormatError);
}

TEST_CASE("normalization splits punctuation and possessives, folds typographic apostrophe") {
  auto w = normalize_words("I\xE2\x80\x99m familiar with Varnok's WORK.");
  CHECK(w == std::vector<std::string>{"i'm", "familiar", "with", "varnok", "'s", "work", "."});
}

TEST_CASE("contains_target") {
  CHECK(contains_target("I don't know about Varnok.", "Varnok"));
  CHECK_FALSE(contains_target("I don't know.", "Varnok"));
  CHECK(contains_target("i don't know about VARNOK", "Varnok"));
  CHECK_FALSE(contains_target("Varnokian facts", "Varnok"));
  CHECK(contains_target("Varnok's birthplace", "Varnok"));
  CHECK_THROWS_AS(contains_target("text", ""), DomainError);
}

TEST_CASE("rouge_l: worked values") {
  World w = generate_world(0, 2, 2, 2);
  Tokens a = w.vocab.encode("the of is"), b = w.vocab.encode("the birthplace is");
  CHECK(rouge_l(a, a) == 1.0);
  CHECK(lcs_length(a, b) == 2);
  CHECK(std::abs(rouge_l(a, b) - 2.0 / 3.0) < 1e-15);
  CHECK(rouge_l(Tokens{5, 6}, Tokens{7, 8}) == 0.0);
  CHECK(rouge_l(Tokens{}, Tokens{7}) == 0.0);
  CHECK_THROWS_AS(rouge_l(Tokens{1}, Tokens{}), DomainError);
  CHECK(std::abs(rouge_l(Tokens{1, 2, 3, 4}, Tokens{1, 2}, RougeMode::Recall) - 1.0) < 1e-15);
}

TEST_CASE("rouge_l matches the full-table LCS oracle on 1000 random pairs") {
  Rng rng = make_rng(substream_key({42, 1}));
  for (int i = 0; i < 1000; ++i) {
    Tokens a = random_tokens(rng, 12, 6), b = random_tokens(rng, 12, 6);
    if (b.empty()) b.push_back(0);
    const std::size_t lcs = oracle::lcs_table(a, b);
    REQUIRE(lcs_length(a, b) == lcs);
    double expect = 0.0;
    if (!a.empty() && lcs > 0) {
      const double p = double(lcs) / double(a.size()), r = double(lcs) / double(b.size());
      expect = 2 * p * r / (p + r);
    }
    REQUIRE(rouge_l(a, b) == expect);
    const double f = rouge_l(a, b);
    CHECK((f >= 0.0 && f <= 1.0));
    if (a.size() == b.size() && !a.empty()) CHECK(rouge_l(b, a) == f);
  }
}

TEST_CASE("reward: exhaustive indicator truth tables and worked cases") {
  World w = generate_world(0, 3, 2, 2);
  auto qs = build_query_sets(w, 1.0, 0.0);
  const Query fq = select(qs, QuerySet::Forget).front();
  const Query bq = select(qs, QuerySet::Boundary).front();
  const std::string tname = w.target().name;
  const Tokens gold = bq.gold_answer;
  const std::string gold_word = w.vocab.word(gold.front());
  RewardConfig cfg;

  // Forget branch responses for each (refusal, named) combination.
  const Tokens f_rr = w.vocab.encode("I don't know anything about " + tname + " .");
  const Tokens f_r0 = w.vocab.encode("I don't know anything .");
  const Tokens f_0n = w.vocab.encode(tname + " 's birthplace is " + gold_word);
  const Tokens f_00 = w.vocab.encode("the birthplace is " + gold_word);
  struct Case { const Tokens* y; bool refusal, named; };
  for (const Case& c : {Case{&f_rr, true, true}, Case{&f_r0, true, false},
                        Case{&f_0n, false, true}, Case{&f_00, false, false}}) {
    for (double alpha : {0.0, 0.3, 0.5, 1.0}) {
      cfg.alpha = alpha;
      auto r = compute_reward(w, fq, *c.y, cfg, nullptr);
      CHECK(r.branch == RewardBranch::Forget);
      CHECK(r.refusal_matched == c.refusal);
      CHECK(r.entity_matched == c.named);
      const double expect = alpha * c.refusal + (1 - alpha) * c.named;
      CHECK(r.total == expect);
      CHECK(r.recompute(cfg) == r.total);
    }
  }
  cfg = RewardConfig{};
  CHECK(compute_reward(w, fq, f_rr, cfg, nullptr).total == 1.0);
  CHECK(compute_reward(w, fq, f_r0, cfg, nullptr).total == 0.5);

  // Boundary branch.
  const Tokens b_ans = gold;                                        // answer, rouge 1
  const Tokens b_ref_ans = w.vocab.encode("I'm not certain . " + gold_word);  // refusal with gold
  const Tokens b_other = w.vocab.encode("the of is");               // answer, rouge 0
  const Tokens b_ref = w.vocab.encode("I'm not certain .");            // refusal, rouge 0
  struct BCase { const Tokens* y; bool refusal, above; };
  for (const BCase& c : {BCase{&b_ans, false, true}, BCase{&b_ref_ans, true, false},
                         BCase{&b_other, false, false}, BCase{&b_ref, true, false}}) {
    for (double beta : {0.0, 0.5, 0.8, 1.0}) {
      cfg.beta = beta;
      auto r = compute_reward(w, bq, *c.y, cfg, &gold);
      CHECK(r.branch == RewardBranch::Boundary);
      CHECK(r.refusal_matched == c.refusal);
      CHECK(r.above_tau == (r.rouge_l > cfg.tau));
      CHECK(r.total == beta * !r.refusal_matched + (1 - beta) * r.above_tau);
    }
  }
  // Refusal with high overlap: both indicators of the truth table's (1,1) cell.
  cfg = RewardConfig{};
  cfg.tau = 0.2;
  auto r = compute_reward(w, bq, b_ref_ans, cfg, &gold);
  CHECK(r.refusal_matched);
  CHECK(r.above_tau);
  CHECK(r.total == 0.5);

  cfg = RewardConfig{};
  CHECK_THROWS_AS(compute_reward(w, bq, b_ans, cfg, nullptr), DomainError);
  Query nq = bq;
  nq.set = QuerySet::Neighbor;
  CHECK_THROWS_AS(compute_reward(w, nq, b_ans, cfg, &gold), DomainError);
}

TEST_CASE("reward: range and monotonicity over every indicator combination") {
  RewardConfig cfg;
  for (double a : {0.0, 0.25, 0.5, 0.75, 1.0}) {
    cfg.alpha = cfg.beta = a;
    for (int branch = 0; branch < 2; ++branch) {
      for (int bits = 0; bits < 4; ++bits) {
        RewardBreakdown r;
        r.branch = branch ? RewardBranch::Boundary : RewardBranch::Forget;
        const bool i1 = bits & 1, i2 = bits & 2;
        if (branch == 0) {
          r.refusal_matched = i1;
          r.entity_matched = i2;
        } else {
          r.refusal_matched = !i1;
          r.above_tau = i2;
        }
        const double t = r.recompute(cfg);
        CHECK((t == 0.0 || t == a || t == 1.0 - a || t == 1.0));
        // Turning on either positive indicator never lowers the total.
        RewardBreakdown up = r;
        if (branch == 0) up.refusal_matched = true; else up.refusal_matched = false;
        CHECK(up.recompute(cfg) >= t);
        up = r;
        if (branch == 0) up.entity_matched = true; else up.above_tau = true;
        CHECK(up.recompute(cfg) >= t);
      }
    }
  }
}

TEST_CASE("reward config validation") {
  RewardConfig c;
  c.alpha = 1.5;
  CHECK_THROWS_AS(c.validate(), ConfigError);
  c = RewardConfig{};
  c.tau = -0.1;
  CHECK_THROWS_AS(c.validate(), ConfigError);
}
