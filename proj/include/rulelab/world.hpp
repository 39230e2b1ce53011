#pragma once

// Synthetic knowledge world: entities with attribute facts, query templates,
// the pretraining corpus, and the forget / boundary / neighbor / probe splits.

#include <cstdint>
#include <iosfwd>
#include <map>
#include <optional>
#include <string>
#include <string_view>
#include <unordered_map>
#include <vector>

namespace rulelab {

using TokenId = int;
using Tokens = std::vector<TokenId>;

// Word-level vocabulary. Ids 0 and 1 are reserved for <eos> and <sep>.
class Vocab {
 public:
  static constexpr TokenId kEos = 0;
  static constexpr TokenId kSep = 1;

  Vocab();

  TokenId add(std::string_view word);
  std::optional<TokenId> find(std::string_view word) const;
  TokenId at(std::string_view word) const;  // throws DomainError if absent
  const std::string& word(TokenId id) const;
  std::size_t size() const { return words_.size(); }
  bool is_special(TokenId id) const { return id == kEos || id == kSep; }

  // Splits on whitespace; every word must already be in the vocabulary.
  Tokens encode(std::string_view text) const;
  // Single-space join; special tokens are dropped.
  std::string decode(const Tokens& tokens) const;
  std::vector<std::string> words_of(const Tokens& tokens) const;

 private:
  std::vector<std::string> words_;
  std::unordered_map<std::string, TokenId> index_;
};

struct Entity {
  int id = 0;
  std::string name;
  // attribute key -> value token
  std::map<std::string, std::string> attributes;

  bool operator==(const Entity&) const = default;
};

enum class TemplateKind { FB, QA, PARA };
std::string_view to_string(TemplateKind kind);

struct QueryTemplate {
  int id = 0;
  TemplateKind kind = TemplateKind::FB;
  // Words separated by single spaces; "{E}" is the entity slot, "{A}" the
  // attribute phrase slot.
  std::string surface;
  // Slot whose rendered attribute supplies the gold answer.
  std::string answer_slot = "{A}";
  // For PARA templates: the QA template this one paraphrases.
  std::optional<int> paraphrases;

  bool operator==(const QueryTemplate&) const = default;
};

enum class QuerySet { Forget, Boundary, Neighbor, ProbeForget, ProbeNeighbor };
enum class Split { Train, Heldout };
std::string_view to_string(QuerySet set);
std::string_view to_string(Split split);
QuerySet query_set_from_string(std::string_view s);
Split split_from_string(std::string_view s);

struct Query {
  int id = 0;
  QuerySet set = QuerySet::Forget;
  Split split = Split::Train;
  Tokens prompt;       // ends with <sep>
  Tokens gold_answer;  // empty for Forget
  int target_entity = 0;
  int template_id = 0;
  TemplateKind kind = TemplateKind::FB;
  std::string attribute;

  bool operator==(const Query&) const = default;
};

struct RefusalResponse {
  Tokens text;
  std::string target_name;
};

struct WorldConfig {
  std::uint64_t seed = 0;
  int n_entities = 8;
  int n_attributes = 4;
  int n_templates_per_kind = 3;
  int n_unfamiliar = 4;
};

struct World {
  std::uint64_t seed = 0;
  Vocab vocab;
  std::vector<std::string> attribute_keys;
  std::vector<Entity> entities;
  std::vector<QueryTemplate> templates;
  int forget_target = 0;
  std::vector<int> neighbor_entities;
  // Names that appear in the corpus only with refusals; they carry no facts.
  std::vector<std::string> unfamiliar_names;

  const Entity& target() const { return entities.at(forget_target); }
  const QueryTemplate& template_by_id(int id) const { return templates.at(id); }
  // Value tokens of every attribute of every entity.
  bool is_attribute_value(TokenId id) const;
  // Tokens of the natural-language lexicon (vocabulary minus specials).
  bool in_lexicon(TokenId id) const { return !vocab.is_special(id) && id >= 0 && static_cast<std::size_t>(id) < vocab.size(); }

  Tokens render_prompt(const QueryTemplate& tmpl, const Entity& entity,
                       const std::string& attribute) const;
  Tokens attribute_value(const Entity& entity,
                         const std::string& attribute) const;
};

// One pretraining sequence: prompt followed by its gold answer.
struct Passage {
  Tokens prompt;
  Tokens answer;
  Tokens joined() const;
};

World generate_world(std::uint64_t seed, int n_entities, int n_attributes,
                     int n_templates_per_kind, int n_unfamiliar = 4);
inline World generate_world(const WorldConfig& c) {
  return generate_world(c.seed, c.n_entities, c.n_attributes,
                        c.n_templates_per_kind, c.n_unfamiliar);
}

std::vector<Passage> render_corpus(const World& world, int repetitions);

// Every FB and QA prompt about each unfamiliar name, answered with a
// targeted refusal; the refusal templates cycle over the passages.
std::vector<Passage> unfamiliar_corpus(const World& world, int repetitions);

// Passages about the forget target only (the "original forget passages").
std::vector<Passage> forget_passages(const World& world);

std::vector<Query> build_query_sets(const World& world, double forget_fraction,
                                    double heldout_fraction);

Query synthesize_boundary_query(const World& world, const Query& forget_query,
                                const Entity& replacement, int new_id);

// Size of the fixed refusal-template pool.
int refusal_template_count();
RefusalResponse refusal_response_for(const World& world, const Entity& target,
                                     int template_index);

// Fixed instruction prepended to rollout prompts in the system-prompt
// ablation. Mentions the target name.
Tokens forget_preamble(const World& world);

std::vector<Query> select(const std::vector<Query>& queries, QuerySet set);
std::vector<Query> select(const std::vector<Query>& queries, QuerySet set,
                          Split split);

// Line-delimited JSON records: entities, templates, then queries.
void write_world_records(std::ostream& out, const World& world,
                         const std::vector<Query>& queries);
std::vector<Query> read_query_records(std::istream& in, const Vocab& vocab);

}  // namespace rulelab
