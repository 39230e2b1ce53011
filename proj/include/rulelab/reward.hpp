#pragma once

// Verifiable two-branch reward: refusal detection, key-entity containment,
// ROUGE-L against a gold reference, and their weighted combination.

#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "rulelab/world.hpp"

namespace rulelab {

// Lowercases, splits punctuation and the possessive "'s" off into their own
// words. Used for all pattern and containment matching.
std::vector<std::string> normalize_words(std::string_view text);

class RefusalPatternSet {
 public:
  struct Alternative {
    std::vector<std::string> words;  // lowercase; trailing '*' = prefix
  };
  struct Element {
    bool is_gap = false;
    int max_gap = 0;
    std::vector<Alternative> alternatives;
  };
  struct Rule {
    std::string source;
    std::vector<Element> elements;
  };

  // Parses the rule grammar described in data/refusal_patterns.txt.
  static RefusalPatternSet parse(std::string_view text);
  static RefusalPatternSet from_file(const std::string& path);
  // The rule file shipped with the library.
  static const RefusalPatternSet& builtin();

  bool matches(std::string_view text) const;
  bool matches_words(const std::vector<std::string>& words) const;
  const std::vector<Rule>& rules() const { return rules_; }

 private:
  std::vector<Rule> rules_;
};

bool is_refusal(std::string_view text,
                const RefusalPatternSet& patterns = RefusalPatternSet::builtin());
bool is_refusal(const Vocab& vocab, const Tokens& text,
                const RefusalPatternSet& patterns = RefusalPatternSet::builtin());

// Case-insensitive whole-word containment. Throws DomainError on empty target.
bool contains_target(std::string_view text, std::string_view target_name);
bool contains_target(const Vocab& vocab, const Tokens& text,
                     std::string_view target_name);

enum class RougeMode { F1, Recall };

// Longest common subsequence length (two-row dynamic program).
std::size_t lcs_length(std::span<const TokenId> a, std::span<const TokenId> b);

// Token-level ROUGE-L. Throws DomainError on empty reference; an empty
// candidate scores 0.
double rouge_l(std::span<const TokenId> candidate,
               std::span<const TokenId> reference,
               RougeMode mode = RougeMode::F1);

struct RewardConfig {
  double alpha = 0.5;
  double beta = 0.5;
  double tau = 0.5;
  RougeMode rouge_mode = RougeMode::F1;

  void validate() const;
};

enum class RewardBranch { Forget, Boundary };

struct RewardBreakdown {
  RewardBranch branch = RewardBranch::Forget;
  bool refusal_matched = false;
  bool entity_matched = false;  // Forget branch
  double rouge_l = 0.0;         // Boundary branch
  bool above_tau = false;       // Boundary branch
  double total = 0.0;

  // Recomputes total from the indicator fields.
  double recompute(const RewardConfig& cfg) const;
};

// Forget:   alpha * [refusal] + (1 - alpha) * [target named]
// Boundary: beta * [not refusal] + (1 - beta) * [rouge_l(y, gold) > tau]
RewardBreakdown compute_reward(const World& world, const Query& query,
                               const Tokens& response, const RewardConfig& cfg,
                               const Tokens* gold,
                               const RefusalPatternSet& patterns =
                                   RefusalPatternSet::builtin());

}  // namespace rulelab
