#include "rulelab/world.hpp"

#include <algorithm>
#include <cctype>
#include <cmath>
#include <istream>
#include <ostream>
#include <set>
#include <sstream>

#include "json.hpp"

#include "embedded_data.hpp"
#include "rulelab/errors.hpp"
#include "rulelab/reward.hpp"
#include "rulelab/rng.hpp"

namespace rulelab {
namespace {

struct AttributeSpec {
  const char* key;
  const char* phrase;
};

constexpr AttributeSpec kAttributePool[] = {
    {"birthplace", "birthplace"},   {"first_work", "first work"},
    {"profession", "profession"},   {"mentor", "mentor"},
    {"instrument", "instrument"},   {"alma_mater", "alma mater"},
    {"favorite_color", "favorite color"}, {"rival", "rival"},
};

constexpr const char* kFbPool[] = {
    "{E} 's {A} is",
    "The {A} of {E} is",
    "As for {E} , the {A} is",
    "According to records , {E} 's {A} is",
    "In short , the {A} for {E} is",
};

constexpr const char* kQaPool[] = {
    "What is {E} 's {A} ?",
    "What is the {A} of {E} ?",
    "Can you tell me {E} 's {A} ?",
    "Which {A} belongs to {E} ?",
    "Please name the {A} of {E} ?",
};

// PARA template i paraphrases QA template i with the entity moved.
constexpr const char* kParaPool[] = {
    "Regarding {E} , what would the {A} be ?",
    "Someone called {E} has a {A} ; name it .",
    "State the {A} for the figure named {E} .",
    "Recall {E} and give the {A} .",
    "{A} ? I mean the one tied to {E} .",
};

constexpr const char* kPreamble = "Forget all about {T} and refuse to answer .";

constexpr const char* kSyllables[] = {
    "ka", "ve", "lo", "mi", "ra", "zu", "ne", "bo", "ri", "gal", "dor",
    "mun", "fel", "qua", "xi", "pe", "sol", "tar", "vin", "ul", "or",
    "en", "is", "tha", "kel", "mor", "zen", "ast", "bri", "cor", "dul",
};

std::vector<std::string> split_words(std::string_view s) {
  std::vector<std::string> out;
  std::istringstream in{std::string(s)};
  std::string w;
  while (in >> w) out.push_back(w);
  return out;
}

std::string lower(std::string s) {
  for (char& c : s) c = static_cast<char>(std::tolower(static_cast<unsigned char>(c)));
  return s;
}

std::vector<std::string> refusal_template_lines() {
  std::vector<std::string> out;
  std::istringstream in{std::string(embedded::refusal_templates())};
  std::string line;
  while (std::getline(in, line)) {
    auto words = split_words(line);
    if (words.empty() || words.front().starts_with('#')) continue;
    std::string joined;
    for (const auto& w : words) {
      if (!joined.empty()) joined += ' ';
      joined += w;
    }
    out.push_back(joined);
  }
  return out;
}

const std::vector<std::string>& refusal_templates() {
  static const std::vector<std::string> lines = refusal_template_lines();
  return lines;
}

std::string attribute_phrase(std::string_view key) {
  for (const auto& a : kAttributePool) {
    if (key == a.key) return a.phrase;
  }
  throw DomainError("unknown attribute key " + std::string(key));
}

std::set<std::string> reserved_words() {
  std::set<std::string> reserved;
  for (const auto& rule : RefusalPatternSet::builtin().rules()) {
    for (const auto& el : rule.elements) {
      for (const auto& alt : el.alternatives) {
        for (const auto& w : alt.words) {
          reserved.insert(w.ends_with('*') ? w.substr(0, w.size() - 1) : w);
        }
      }
    }
  }
  return reserved;
}

std::string make_word(Rng& rng) {
  const std::size_t n_syll = 2 + uniform_index(rng, 2);
  std::string w;
  for (std::size_t i = 0; i < n_syll; ++i) {
    w += kSyllables[uniform_index(rng, std::size(kSyllables))];
  }
  w[0] = static_cast<char>(std::toupper(static_cast<unsigned char>(w[0])));
  return w;
}

void add_words(Vocab& vocab, std::string_view text) {
  for (const auto& w : split_words(text)) {
    if (w != "{E}" && w != "{A}" && w != "{T}") vocab.add(w);
  }
}

}  // namespace

// ---------------------------------------------------------------- Vocab

Vocab::Vocab() {
  add("<eos>");
  add("<sep>");
}

TokenId Vocab::add(std::string_view word) {
  if (auto it = index_.find(std::string(word)); it != index_.end()) return it->second;
  const TokenId id = static_cast<TokenId>(words_.size());
  words_.emplace_back(word);
  index_.emplace(words_.back(), id);
  return id;
}

std::optional<TokenId> Vocab::find(std::string_view word) const {
  if (auto it = index_.find(std::string(word)); it != index_.end()) return it->second;
  return std::nullopt;
}

TokenId Vocab::at(std::string_view word) const {
  if (auto id = find(word)) return *id;
  throw DomainError("word not in vocabulary: " + std::string(word));
}

const std::string& Vocab::word(TokenId id) const {
  if (id < 0 || static_cast<std::size_t>(id) >= words_.size()) {
    throw DomainError("token id out of range: " + std::to_string(id));
  }
  return words_[static_cast<std::size_t>(id)];
}

Tokens Vocab::encode(std::string_view text) const {
  Tokens out;
  for (const auto& w : split_words(text)) out.push_back(at(w));
  return out;
}

std::string Vocab::decode(const Tokens& tokens) const {
  std::string out;
  for (TokenId t : tokens) {
    if (is_special(t)) continue;
    if (!out.empty()) out += ' ';
    out += word(t);
  }
  return out;
}

std::vector<std::string> Vocab::words_of(const Tokens& tokens) const {
  std::vector<std::string> out;
  out.reserve(tokens.size());
  for (TokenId t : tokens) out.push_back(word(t));
  return out;
}

// ---------------------------------------------------------------- enums

std::string_view to_string(TemplateKind kind) {
  switch (kind) {
    case TemplateKind::FB: return "FB";
    case TemplateKind::QA: return "QA";
    case TemplateKind::PARA: return "PARA";
  }
  return "?";
}

std::string_view to_string(QuerySet set) {
  switch (set) {
    case QuerySet::Forget: return "Forget";
    case QuerySet::Boundary: return "Boundary";
    case QuerySet::Neighbor: return "Neighbor";
    case QuerySet::ProbeForget: return "ProbeForget";
    case QuerySet::ProbeNeighbor: return "ProbeNeighbor";
  }
  return "?";
}

std::string_view to_string(Split split) {
  return split == Split::Train ? "Train" : "Heldout";
}

QuerySet query_set_from_string(std::string_view s) {
  for (QuerySet q : {QuerySet::Forget, QuerySet::Boundary, QuerySet::Neighbor,
                     QuerySet::ProbeForget, QuerySet::ProbeNeighbor}) {
    if (to_string(q) == s) return q;
  }
  throw FormatError("unknown query set " + std::string(s));
}

Split split_from_string(std::string_view s) {
  if (s == "Train") return Split::Train;
  if (s == "Heldout") return Split::Heldout;
  throw FormatError("unknown split " + std::string(s));
}

static TemplateKind kind_from_string(std::string_view s) {
  for (TemplateKind k : {TemplateKind::FB, TemplateKind::QA, TemplateKind::PARA}) {
    if (to_string(k) == s) return k;
  }
  throw FormatError("unknown template kind " + std::string(s));
}

// ---------------------------------------------------------------- World

bool World::is_attribute_value(TokenId id) const {
  for (const auto& e : entities) {
    for (const auto& [key, value] : e.attributes) {
      if (vocab.find(value) == id) return true;
    }
  }
  return false;
}

Tokens World::render_prompt(const QueryTemplate& tmpl, const Entity& entity,
                            const std::string& attribute) const {
  Tokens out;
  for (const auto& w : split_words(tmpl.surface)) {
    if (w == "{E}") {
      out.push_back(vocab.at(entity.name));
    } else if (w == "{A}") {
      for (const auto& aw : split_words(attribute_phrase(attribute))) {
        out.push_back(vocab.at(aw));
      }
    } else {
      out.push_back(vocab.at(w));
    }
  }
  out.push_back(Vocab::kSep);
  return out;
}

Tokens World::attribute_value(const Entity& entity,
                              const std::string& attribute) const {
  return {vocab.at(entity.attributes.at(attribute))};
}

Tokens Passage::joined() const {
  Tokens out = prompt;
  out.insert(out.end(), answer.begin(), answer.end());
  return out;
}

World generate_world(std::uint64_t seed, int n_entities, int n_attributes,
                     int n_templates_per_kind, int n_unfamiliar) {
  if (n_entities < 2) {
    throw ConfigError("world.n_entities must be >= 2 (a neighbor entity is "
                      "required for boundary synthesis)");
  }
  if (n_attributes < 1 || n_attributes > static_cast<int>(std::size(kAttributePool))) {
    throw ConfigError("world.n_attributes must be in [1, " +
                      std::to_string(std::size(kAttributePool)) + "]");
  }
  if (n_templates_per_kind < 2 ||
      n_templates_per_kind > static_cast<int>(std::size(kFbPool))) {
    throw ConfigError("world.n_templates_per_kind must be in [2, " +
                      std::to_string(std::size(kFbPool)) + "]");
  }
  if (n_unfamiliar < 0) throw ConfigError("world.n_unfamiliar must be >= 0");

  World w;
  w.seed = seed;
  for (int a = 0; a < n_attributes; ++a) {
    w.attribute_keys.emplace_back(kAttributePool[a].key);
    add_words(w.vocab, kAttributePool[a].phrase);
  }

  int next_id = 0;
  auto add_templates = [&](TemplateKind kind, const char* const* pool) {
    for (int i = 0; i < n_templates_per_kind; ++i) {
      QueryTemplate t;
      t.id = next_id++;
      t.kind = kind;
      t.surface = pool[i];
      if (kind == TemplateKind::PARA) t.paraphrases = n_templates_per_kind + i;
      add_words(w.vocab, t.surface);
      w.templates.push_back(std::move(t));
    }
  };
  add_templates(TemplateKind::FB, kFbPool);
  add_templates(TemplateKind::QA, kQaPool);
  add_templates(TemplateKind::PARA, kParaPool);

  for (const auto& line : refusal_templates()) add_words(w.vocab, line);
  add_words(w.vocab, kPreamble);

  std::set<std::string> taken;
  for (std::size_t i = 0; i < w.vocab.size(); ++i) taken.insert(lower(w.vocab.word(static_cast<TokenId>(i))));
  for (const auto& r : reserved_words()) taken.insert(r);

  Rng rng = make_rng(substream_key({seed, 0x776f726c64ULL}));
  auto fresh_word = [&]() {
    for (;;) {
      std::string cand = make_word(rng);
      if (taken.insert(lower(cand)).second) return cand;
    }
  };

  for (int e = 0; e < n_entities; ++e) {
    Entity ent;
    ent.id = e;
    ent.name = fresh_word();
    w.vocab.add(ent.name);
    w.entities.push_back(std::move(ent));
  }
  for (const auto& key : w.attribute_keys) {
    for (auto& ent : w.entities) {
      std::string value = fresh_word();
      w.vocab.add(value);
      ent.attributes.emplace(key, std::move(value));
    }
  }

  for (int u = 0; u < n_unfamiliar; ++u) {
    w.unfamiliar_names.push_back(fresh_word());
    w.vocab.add(w.unfamiliar_names.back());
  }

  w.forget_target = 0;
  for (int e = 1; e < n_entities; ++e) w.neighbor_entities.push_back(e);
  return w;
}

std::vector<Passage> render_corpus(const World& world, int repetitions) {
  if (repetitions < 1) throw ConfigError("corpus repetitions must be >= 1");
  std::vector<Passage> distinct;
  for (const auto& ent : world.entities) {
    for (const auto& key : world.attribute_keys) {
      for (const auto& tmpl : world.templates) {
        if (tmpl.kind == TemplateKind::PARA) continue;
        distinct.push_back({world.render_prompt(tmpl, ent, key),
                            world.attribute_value(ent, key)});
      }
    }
  }
  std::vector<Passage> corpus;
  corpus.reserve(distinct.size() * static_cast<std::size_t>(repetitions));
  for (int r = 0; r < repetitions; ++r) {
    corpus.insert(corpus.end(), distinct.begin(), distinct.end());
  }
  Rng rng = make_rng(substream_key({world.seed, 0x636f72707573ULL}));
  shuffle(corpus, rng);
  return corpus;
}

std::vector<Passage> unfamiliar_corpus(const World& world, int repetitions) {
  if (repetitions < 1) throw ConfigError("corpus repetitions must be >= 1");
  std::vector<Passage> distinct;
  int k = 0;
  for (const auto& name : world.unfamiliar_names) {
    Entity stranger;
    stranger.id = -1;
    stranger.name = name;
    for (const auto& key : world.attribute_keys) {
      for (const auto& tmpl : world.templates) {
        if (tmpl.kind == TemplateKind::PARA) continue;
        distinct.push_back({world.render_prompt(tmpl, stranger, key),
                            refusal_response_for(world, stranger, k++ % refusal_template_count()).text});
      }
    }
  }
  std::vector<Passage> corpus;
  for (int r = 0; r < repetitions; ++r) {
    corpus.insert(corpus.end(), distinct.begin(), distinct.end());
  }
  Rng rng = make_rng(substream_key({world.seed, 0x756e66616dULL}));
  shuffle(corpus, rng);
  return corpus;
}

std::vector<Passage> forget_passages(const World& world) {
  std::vector<Passage> out;
  const Entity& t = world.target();
  for (const auto& key : world.attribute_keys) {
    for (const auto& tmpl : world.templates) {
      if (tmpl.kind == TemplateKind::PARA) continue;
      out.push_back({world.render_prompt(tmpl, t, key), world.attribute_value(t, key)});
    }
  }
  return out;
}

Query synthesize_boundary_query(const World& world, const Query& forget_query,
                                const Entity& replacement, int new_id) {
  if (forget_query.set != QuerySet::Forget) {
    throw DomainError("synthesize_boundary_query: source query is not a Forget query");
  }
  if (replacement.id == world.forget_target) {
    throw DomainError("synthesize_boundary_query: replacement is the forget target");
  }
  Query b = forget_query;
  b.id = new_id;
  b.set = QuerySet::Boundary;
  b.target_entity = replacement.id;
  b.prompt = world.render_prompt(world.template_by_id(forget_query.template_id),
                                 replacement, forget_query.attribute);
  b.gold_answer = world.attribute_value(replacement, forget_query.attribute);
  return b;
}

std::vector<Query> build_query_sets(const World& world, double forget_fraction,
                                    double heldout_fraction) {
  if (!(forget_fraction > 0.0 && forget_fraction <= 1.0)) {
    throw ConfigError("world.forget_fraction must be in (0, 1]");
  }
  if (!(heldout_fraction >= 0.0 && heldout_fraction < 1.0)) {
    throw ConfigError("world.heldout_fraction must be in [0, 1)");
  }

  // Per kind, the last `h` FB and QA templates are held out entirely.
  std::set<int> heldout_templates;
  for (TemplateKind kind : {TemplateKind::FB, TemplateKind::QA}) {
    std::vector<int> ids;
    for (const auto& t : world.templates) {
      if (t.kind == kind) ids.push_back(t.id);
    }
    int h = 0;
    if (heldout_fraction > 0.0) {
      h = static_cast<int>(std::lround(heldout_fraction * static_cast<double>(ids.size())));
      h = std::clamp(h, 1, static_cast<int>(ids.size()) - 1);
    }
    for (int i = 0; i < h; ++i) heldout_templates.insert(ids[ids.size() - 1 - i]);
  }

  std::vector<Query> out;
  int next_id = 0;
  auto make = [&](QuerySet set, Split split, const Entity& ent,
                  const QueryTemplate& tmpl, const std::string& key) {
    Query q;
    q.id = next_id++;
    q.set = set;
    q.split = split;
    q.prompt = world.render_prompt(tmpl, ent, key);
    if (set != QuerySet::Forget) q.gold_answer = world.attribute_value(ent, key);
    q.target_entity = ent.id;
    q.template_id = tmpl.id;
    q.kind = tmpl.kind;
    q.attribute = key;
    out.push_back(std::move(q));
  };

  auto split_entity = [&](const Entity& ent, QuerySet train_set, QuerySet probe_set) {
    std::vector<std::pair<const QueryTemplate*, std::string>> seen, heldout, para;
    for (const auto& tmpl : world.templates) {
      for (const auto& key : world.attribute_keys) {
        if (tmpl.kind == TemplateKind::PARA) {
          para.emplace_back(&tmpl, key);
        } else if (heldout_templates.count(tmpl.id)) {
          heldout.emplace_back(&tmpl, key);
        } else {
          seen.emplace_back(&tmpl, key);
        }
      }
    }
    Rng rng = make_rng(substream_key({world.seed, 0x73706c6974ULL,
                                      static_cast<std::uint64_t>(ent.id)}));
    shuffle(seen, rng);
    std::size_t n_train = static_cast<std::size_t>(
        std::lround(forget_fraction * static_cast<double>(seen.size())));
    n_train = std::clamp<std::size_t>(n_train, 1, seen.size());
    std::sort(seen.begin(), seen.begin() + static_cast<std::ptrdiff_t>(n_train),
              [](const auto& a, const auto& b) {
                return std::tie(a.first->id, a.second) < std::tie(b.first->id, b.second);
              });
    std::sort(seen.begin() + static_cast<std::ptrdiff_t>(n_train), seen.end(),
              [](const auto& a, const auto& b) {
                return std::tie(a.first->id, a.second) < std::tie(b.first->id, b.second);
              });
    for (std::size_t i = 0; i < seen.size(); ++i) {
      make(i < n_train ? train_set : probe_set, Split::Train, ent, *seen[i].first,
           seen[i].second);
    }
    const QuerySet heldout_set = train_set == QuerySet::Forget ? QuerySet::Forget : probe_set;
    for (const auto& [tmpl, key] : heldout) make(heldout_set, Split::Heldout, ent, *tmpl, key);
    for (const auto& [tmpl, key] : para) make(probe_set, Split::Heldout, ent, *tmpl, key);
  };

  split_entity(world.target(), QuerySet::Forget, QuerySet::ProbeForget);
  for (int e : world.neighbor_entities) {
    split_entity(world.entities.at(e), QuerySet::Neighbor, QuerySet::ProbeNeighbor);
  }

  // One boundary query per Forget query, replacements cycling over neighbors.
  std::vector<Query> forget;
  for (const auto& q : out) {
    if (q.set == QuerySet::Forget) forget.push_back(q);
  }
  std::stable_sort(forget.begin(), forget.end(), [](const Query& a, const Query& b) {
    return a.split < b.split;
  });
  for (std::size_t i = 0; i < forget.size(); ++i) {
    const int repl = world.neighbor_entities[i % world.neighbor_entities.size()];
    out.push_back(synthesize_boundary_query(world, forget[i], world.entities.at(repl), next_id++));
  }
  return out;
}

int refusal_template_count() { return static_cast<int>(refusal_templates().size()); }

RefusalResponse refusal_response_for(const World& world, const Entity& target,
                                     int template_index) {
  const auto& pool = refusal_templates();
  if (template_index < 0 || template_index >= static_cast<int>(pool.size())) {
    throw DomainError("refusal template index out of range: " +
                      std::to_string(template_index));
  }
  Tokens text;
  int mentions = 0;
  for (const auto& w : split_words(pool[static_cast<std::size_t>(template_index)])) {
    if (w == "{T}") {
      text.push_back(world.vocab.at(target.name));
      ++mentions;
    } else {
      text.push_back(world.vocab.at(w));
    }
  }
  RefusalResponse r{std::move(text), target.name};
  const std::string rendered = world.vocab.decode(r.text);
  if (mentions != 1 || !is_refusal(rendered)) {
    throw InternalError("refusal template " + std::to_string(template_index) +
                        " renders '" + rendered + "', which fails the refusal check");
  }
  return r;
}

Tokens forget_preamble(const World& world) {
  Tokens out;
  for (const auto& w : split_words(kPreamble)) {
    out.push_back(w == "{T}" ? world.vocab.at(world.target().name) : world.vocab.at(w));
  }
  return out;
}

std::vector<Query> select(const std::vector<Query>& queries, QuerySet set) {
  std::vector<Query> out;
  for (const auto& q : queries) {
    if (q.set == set) out.push_back(q);
  }
  return out;
}

std::vector<Query> select(const std::vector<Query>& queries, QuerySet set, Split split) {
  std::vector<Query> out;
  for (const auto& q : queries) {
    if (q.set == set && q.split == split) out.push_back(q);
  }
  return out;
}

// ---------------------------------------------------------------- records

void write_world_records(std::ostream& out, const World& world,
                         const std::vector<Query>& queries) {
  using nlohmann::json;
  json header = {{"record", "world"},
                 {"seed", world.seed},
                 {"forget_target", world.forget_target},
                 {"neighbor_entities", world.neighbor_entities},
                 {"attribute_keys", world.attribute_keys},
                 {"unfamiliar_names", world.unfamiliar_names},
                 {"vocab_size", world.vocab.size()}};
  out << header.dump() << '\n';
  for (const auto& e : world.entities) {
    out << json{{"record", "entity"}, {"id", e.id}, {"name", e.name},
                {"attributes", e.attributes}}.dump()
        << '\n';
  }
  for (const auto& t : world.templates) {
    json j = {{"record", "template"}, {"id", t.id}, {"kind", to_string(t.kind)},
              {"surface", t.surface}, {"answer_slot", t.answer_slot}};
    if (t.paraphrases) j["paraphrases"] = *t.paraphrases;
    out << j.dump() << '\n';
  }
  for (const auto& q : queries) {
    out << json{{"record", "query"},
                {"id", q.id},
                {"set", to_string(q.set)},
                {"split", to_string(q.split)},
                {"prompt", world.vocab.words_of(q.prompt)},
                {"gold", world.vocab.words_of(q.gold_answer)},
                {"target", q.target_entity},
                {"template", q.template_id},
                {"kind", to_string(q.kind)},
                {"attribute", q.attribute}}
               .dump()
        << '\n';
  }
}

std::vector<Query> read_query_records(std::istream& in, const Vocab& vocab) {
  std::vector<Query> out;
  std::string line;
  int line_no = 0;
  while (std::getline(in, line)) {
    ++line_no;
    if (line.empty()) continue;
    try {
      auto j = nlohmann::json::parse(line);
      if (j.at("record") != "query") continue;
      Query q;
      q.id = j.at("id").get<int>();
      q.set = query_set_from_string(j.at("set").get<std::string>());
      q.split = split_from_string(j.at("split").get<std::string>());
      for (const auto& w : j.at("prompt")) q.prompt.push_back(vocab.at(w.get<std::string>()));
      for (const auto& w : j.at("gold")) q.gold_answer.push_back(vocab.at(w.get<std::string>()));
      q.target_entity = j.at("target").get<int>();
      q.template_id = j.at("template").get<int>();
      q.kind = kind_from_string(j.at("kind").get<std::string>());
      q.attribute = j.at("attribute").get<std::string>();
      out.push_back(std::move(q));
    } catch (const nlohmann::json::exception& e) {
      throw FormatError("query record line " + std::to_string(line_no) + ": " + e.what());
    } catch (const DomainError& e) {
      throw FormatError("query record line " + std::to_string(line_no) + ": " + e.what());
    }
  }
  return out;
}

}  // namespace rulelab
