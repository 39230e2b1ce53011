#include "rulelab/reward.hpp"

#include <algorithm>
#include <cctype>
#include <fstream>
#include <sstream>

#include "embedded_data.hpp"
#include "rulelab/errors.hpp"

namespace rulelab {
namespace {

constexpr int kDefaultGap = 8;

bool is_split_punct(char c) {
  switch (c) {
    case '.': case ',': case '!': case '?': case ';': case ':':
    case '(': case ')': case '[': case ']': case '"':
      return true;
    default:
      return false;
  }
}

std::string lower(std::string_view s) {
  std::string out(s);
  for (char& c : out) c = static_cast<char>(std::tolower(static_cast<unsigned char>(c)));
  return out;
}

std::vector<std::string> split_ws(std::string_view s) {
  std::vector<std::string> out;
  std::size_t i = 0;
  while (i < s.size()) {
    while (i < s.size() && std::isspace(static_cast<unsigned char>(s[i]))) ++i;
    std::size_t j = i;
    while (j < s.size() && !std::isspace(static_cast<unsigned char>(s[j]))) ++j;
    if (j > i) out.emplace_back(s.substr(i, j - i));
    i = j;
  }
  return out;
}

bool word_matches(const std::string& pattern, const std::string& word) {
  if (!pattern.empty() && pattern.back() == '*') {
    std::string_view stem(pattern.data(), pattern.size() - 1);
    return word.size() >= stem.size() && word.compare(0, stem.size(), stem) == 0;
  }
  return pattern == word;
}

// Matches elements[e..] starting at words[pos]; gaps backtrack.
bool match_from(const std::vector<RefusalPatternSet::Element>& elements,
                std::size_t e, const std::vector<std::string>& words,
                std::size_t pos) {
  if (e == elements.size()) return true;
  const auto& el = elements[e];
  if (el.is_gap) {
    for (int skip = 0; skip <= el.max_gap && pos + skip <= words.size(); ++skip) {
      if (match_from(elements, e + 1, words, pos + skip)) return true;
    }
    return false;
  }
  for (const auto& alt : el.alternatives) {
    if (pos + alt.words.size() > words.size()) continue;
    bool ok = true;
    for (std::size_t k = 0; k < alt.words.size() && ok; ++k) {
      ok = word_matches(alt.words[k], words[pos + k]);
    }
    if (ok && match_from(elements, e + 1, words, pos + alt.words.size())) {
      return true;
    }
  }
  return false;
}

}  // namespace

std::vector<std::string> normalize_words(std::string_view text) {
  std::string cleaned;
  cleaned.reserve(text.size());
  // Typographic apostrophe (U+2019) folds to ASCII.
  for (std::size_t i = 0; i < text.size(); ++i) {
    if (i + 2 < text.size() && static_cast<unsigned char>(text[i]) == 0xE2 &&
        static_cast<unsigned char>(text[i + 1]) == 0x80 &&
        static_cast<unsigned char>(text[i + 2]) == 0x99) {
      cleaned.push_back('\'');
      i += 2;
    } else {
      cleaned.push_back(text[i]);
    }
  }
  std::vector<std::string> out;
  for (const std::string& chunk : split_ws(lower(cleaned))) {
    std::size_t b = 0, e = chunk.size();
    std::vector<std::string> tail;
    while (b < e && is_split_punct(chunk[b])) out.emplace_back(1, chunk[b++]);
    while (e > b && is_split_punct(chunk[e - 1])) tail.emplace_back(1, chunk[--e]);
    if (e > b) {
      std::string core = chunk.substr(b, e - b);
      if (core.size() > 2 && core.ends_with("'s")) {
        out.push_back(core.substr(0, core.size() - 2));
        out.emplace_back("'s");
      } else {
        out.push_back(std::move(core));
      }
    }
    out.insert(out.end(), tail.rbegin(), tail.rend());
  }
  return out;
}

RefusalPatternSet RefusalPatternSet::parse(std::string_view text) {
  RefusalPatternSet set;
  std::istringstream in{std::string(text)};
  std::string line;
  int line_no = 0;
  while (std::getline(in, line)) {
    ++line_no;
    auto words = split_ws(line);
    if (words.empty() || words.front().starts_with('#')) continue;
    Rule rule;
    rule.source = line;
    for (const std::string& w : words) {
      Element el;
      if (w.starts_with("...")) {
        el.is_gap = true;
        el.max_gap = kDefaultGap;
        if (w.size() > 3) {
          try {
            el.max_gap = std::stoi(w.substr(3));
          } catch (const std::exception&) {
            throw FormatError("refusal patterns line " + std::to_string(line_no) +
                              ": bad gap '" + w + "'");
          }
        }
      } else {
        std::size_t start = 0;
        while (start <= w.size()) {
          std::size_t bar = w.find('|', start);
          std::string alt = lower(w.substr(start, bar == std::string::npos ? std::string::npos : bar - start));
          if (alt.empty()) {
            throw FormatError("refusal patterns line " + std::to_string(line_no) +
                              ": empty alternative in '" + w + "'");
          }
          Alternative a;
          std::size_t p = 0;
          while (p <= alt.size()) {
            std::size_t us = alt.find('_', p);
            a.words.push_back(alt.substr(p, us == std::string::npos ? std::string::npos : us - p));
            if (us == std::string::npos) break;
            p = us + 1;
          }
          el.alternatives.push_back(std::move(a));
          if (bar == std::string::npos) break;
          start = bar + 1;
        }
      }
      rule.elements.push_back(std::move(el));
    }
    if (rule.elements.front().is_gap || rule.elements.back().is_gap) {
      throw FormatError("refusal patterns line " + std::to_string(line_no) +
                        ": a rule may not start or end with a gap");
    }
    set.rules_.push_back(std::move(rule));
  }
  if (set.rules_.empty()) throw FormatError("refusal pattern set is empty");
  return set;
}

RefusalPatternSet RefusalPatternSet::from_file(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw FormatError("cannot open refusal pattern file " + path);
  std::stringstream ss;
  ss << in.rdbuf();
  return parse(ss.str());
}

const RefusalPatternSet& RefusalPatternSet::builtin() {
  static const RefusalPatternSet set = parse(embedded::refusal_patterns());
  return set;
}

bool RefusalPatternSet::matches_words(const std::vector<std::string>& words) const {
  for (const Rule& rule : rules_) {
    for (std::size_t start = 0; start < words.size(); ++start) {
      if (match_from(rule.elements, 0, words, start)) return true;
    }
  }
  return false;
}

bool RefusalPatternSet::matches(std::string_view text) const {
  return matches_words(normalize_words(text));
}

bool is_refusal(std::string_view text, const RefusalPatternSet& patterns) {
  return patterns.matches(text);
}

bool is_refusal(const Vocab& vocab, const Tokens& text,
                const RefusalPatternSet& patterns) {
  return patterns.matches(vocab.decode(text));
}

bool contains_target(std::string_view text, std::string_view target_name) {
  const auto target = normalize_words(target_name);
  if (target.empty()) throw DomainError("contains_target: empty target name");
  const auto words = normalize_words(text);
  if (words.size() < target.size()) return false;
  for (std::size_t i = 0; i + target.size() <= words.size(); ++i) {
    if (std::equal(target.begin(), target.end(), words.begin() + i)) return true;
  }
  return false;
}

bool contains_target(const Vocab& vocab, const Tokens& text,
                     std::string_view target_name) {
  return contains_target(vocab.decode(text), target_name);
}

std::size_t lcs_length(std::span<const TokenId> a, std::span<const TokenId> b) {
  if (a.empty() || b.empty()) return 0;
  std::vector<std::size_t> prev(b.size() + 1, 0), cur(b.size() + 1, 0);
  for (std::size_t i = 1; i <= a.size(); ++i) {
    for (std::size_t j = 1; j <= b.size(); ++j) {
      cur[j] = a[i - 1] == b[j - 1] ? prev[j - 1] + 1 : std::max(prev[j], cur[j - 1]);
    }
    std::swap(prev, cur);
  }
  return prev[b.size()];
}

double rouge_l(std::span<const TokenId> candidate,
               std::span<const TokenId> reference, RougeMode mode) {
  if (reference.empty()) throw DomainError("rouge_l: empty reference");
  if (candidate.empty()) return 0.0;
  const double lcs = static_cast<double>(lcs_length(candidate, reference));
  if (lcs == 0.0) return 0.0;
  const double recall = lcs / static_cast<double>(reference.size());
  if (mode == RougeMode::Recall) return recall;
  const double precision = lcs / static_cast<double>(candidate.size());
  return 2.0 * precision * recall / (precision + recall);
}

void RewardConfig::validate() const {
  auto in_unit = [](double v) { return v >= 0.0 && v <= 1.0; };
  if (!in_unit(alpha)) throw ConfigError("reward.alpha must be in [0,1]");
  if (!in_unit(beta)) throw ConfigError("reward.beta must be in [0,1]");
  if (!in_unit(tau)) throw ConfigError("reward.tau must be in [0,1]");
}

double RewardBreakdown::recompute(const RewardConfig& cfg) const {
  if (branch == RewardBranch::Forget) {
    return cfg.alpha * (refusal_matched ? 1.0 : 0.0) +
           (1.0 - cfg.alpha) * (entity_matched ? 1.0 : 0.0);
  }
  return cfg.beta * (refusal_matched ? 0.0 : 1.0) +
         (1.0 - cfg.beta) * (above_tau ? 1.0 : 0.0);
}

RewardBreakdown compute_reward(const World& world, const Query& query,
                               const Tokens& response, const RewardConfig& cfg,
                               const Tokens* gold,
                               const RefusalPatternSet& patterns) {
  RewardBreakdown r;
  const std::string text = world.vocab.decode(response);
  r.refusal_matched = patterns.matches(text);
  switch (query.set) {
    case QuerySet::Forget:
      r.branch = RewardBranch::Forget;
      r.entity_matched =
          contains_target(text, world.entities.at(query.target_entity).name);
      break;
    case QuerySet::Boundary: {
      if (gold == nullptr || gold->empty()) {
        throw DomainError("compute_reward: boundary query " +
                          std::to_string(query.id) + " has no gold reference");
      }
      r.branch = RewardBranch::Boundary;
      Tokens content;
      for (TokenId t : response) {
        if (!world.vocab.is_special(t)) content.push_back(t);
      }
      r.rouge_l = rouge_l(content, *gold, cfg.rouge_mode);
      r.above_tau = r.rouge_l > cfg.tau;
      break;
    }
    default:
      throw DomainError("compute_reward: query set " +
                        std::string(to_string(query.set)) +
                        " has no reward branch");
  }
  r.total = r.recompute(cfg);
  return r;
}

}  // namespace rulelab
