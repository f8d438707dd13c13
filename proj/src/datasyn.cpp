#include "propedit/datasyn.hpp"

#include <algorithm>
#include <cctype>
#include <fstream>
#include <random>
#include <set>

#include "propedit/errors.hpp"
#include "propedit/tokenizer.hpp"

namespace propedit {

namespace {

std::string fill(std::string text, const std::string& key, const std::string& value) {
  for (std::size_t pos = text.find(key); pos != std::string::npos;
       pos = text.find(key, pos + value.size()))
    text.replace(pos, key.size(), value);
  return text;
}

std::string fill_story(const std::string& text, const std::string& subject,
                       const std::array<std::string, 3>& objects) {
  std::string out = fill(text, "{s}", subject);
  for (int k = 0; k < 3; ++k) out = fill(out, "{o" + std::to_string(k + 1) + "}", objects[k]);
  return out;
}

std::string question_about(const RelationDef& r, const std::string& x) {
  return fill(r.question, "{X}", x);
}

std::string statement_about(const RelationDef& r, const std::string& x, const std::string& a) {
  return fill(fill(r.statement, "{X}", x), "{A}", a);
}

std::string lower(std::string s) {
  for (auto& c : s) c = static_cast<char>(std::tolower(static_cast<unsigned char>(c)));
  return s;
}

std::uint64_t mix(std::uint64_t x) {
  x += 0x9E3779B97F4A7C15ULL;
  x = (x ^ (x >> 30)) * 0xBF58476D1CE4E5B9ULL;
  x = (x ^ (x >> 27)) * 0x94D049BB133111EBULL;
  return x ^ (x >> 31);
}

template <typename T>
const T& pick(std::mt19937_64& rng, const std::vector<T>& v) {
  std::uniform_int_distribution<std::size_t> d(0, v.size() - 1);
  return v[d(rng)];
}

const StoryTemplate& story_for(const EntityTypeDef& def, SubjectKind kind) {
  return kind == SubjectKind::Person ? def.person : def.company;
}

// Pronounceable words, none a substring of another word it knows about.
class WordForge {
 public:
  WordForge(std::mt19937_64& rng, const std::vector<std::string>& fixed) : rng_(rng) {
    for (const auto& f : fixed) fixed_.push_back(lower(f));
  }

  std::string next() {
    static const std::vector<std::string> onsets{"b", "d", "f", "g", "k", "l", "m", "n",
                                                 "p", "r", "s", "t", "v", "z", "br", "dr",
                                                 "gr", "kr", "tr", "pl", "sk", "st"};
    static const std::vector<std::string> vowels{"a", "e", "i", "o", "u"};
    static const std::vector<std::string> codas{"", "n", "r", "l", "s", "k"};
    for (int attempt = 0; attempt < 100000; ++attempt) {
      std::string w = pick(rng_, onsets) + pick(rng_, vowels) + pick(rng_, onsets) +
                      pick(rng_, vowels) + pick(rng_, codas);
      if (accept(w)) {
        words_.push_back(w);
        return w;
      }
    }
    throw ConfigError("could not generate enough distinct words");
  }

 private:
  bool accept(const std::string& w) const {
    if (w.size() < 4) return false;
    for (const auto& f : fixed_)
      if (f.find(w) != std::string::npos) return false;
    for (const auto& x : words_)
      if (x.find(w) != std::string::npos || w.find(x) != std::string::npos) return false;
    return true;
  }

  std::mt19937_64& rng_;
  std::vector<std::string> fixed_;
  std::vector<std::string> words_;
};

std::vector<std::string> template_words(const std::vector<EntityTypeDef>& defs) {
  std::vector<std::string> texts{"q : a :", prepend_prefix(SubjectKind::Person),
                                 prepend_prefix(SubjectKind::Company)};
  auto add_story = [&](const StoryTemplate& s) {
    texts.push_back(s.text);
    texts.push_back(s.paraphrase);
    for (const auto& d : s.descriptors) texts.push_back(d);
    for (const auto& a : s.atomic_prompts) texts.push_back(a);
  };
  for (const auto& d : defs) {
    texts.push_back(d.name);
    for (const auto& r : d.relations) {
      texts.push_back(r.question);
      texts.push_back(r.statement);
    }
    add_story(d.person);
    add_story(d.company);
  }
  std::vector<std::string> out;
  std::set<std::string> seen;
  for (const auto& t : texts) {
    for (auto w : Tokenizer::split(t)) {
      if (w.front() == '{') continue;
      if (seen.insert(w).second) out.push_back(w);
    }
  }
  return out;
}

// Splits on single spaces; the templates never use runs of spaces.
std::vector<std::string> words_of(const std::string& s) {
  std::vector<std::string> out;
  std::size_t start = 0;
  while (start <= s.size()) {
    auto end = s.find(' ', start);
    if (end == std::string::npos) end = s.size();
    if (end > start) out.push_back(s.substr(start, end - start));
    start = end + 1;
  }
  return out;
}

nlohmann::json story_json(const StoryTemplate& s) {
  return {{"text", s.text},
          {"descriptors", s.descriptors},
          {"atomic_prompts", s.atomic_prompts},
          {"paraphrase", s.paraphrase}};
}

StoryTemplate story_from(const nlohmann::json& j) {
  StoryTemplate s;
  s.text = j.at("text");
  s.descriptors = j.at("descriptors").get<std::array<std::string, 3>>();
  s.atomic_prompts = j.at("atomic_prompts").get<std::array<std::string, 3>>();
  s.paraphrase = j.at("paraphrase");
  return s;
}

}  // namespace

std::string to_string(SubjectKind k) { return k == SubjectKind::Person ? "person" : "company"; }

SubjectKind subject_kind_from_string(const std::string& s) {
  if (s == "person") return SubjectKind::Person;
  if (s == "company") return SubjectKind::Company;
  throw ConfigError("unknown subject kind: " + s);
}

std::string to_string(SplitTag t) {
  switch (t) {
    case SplitTag::ID: return "ID";
    case SplitTag::OODEntity: return "OOD_entity";
    case SplitTag::OODRelation: return "OOD_relation";
    case SplitTag::OODBoth: return "OOD_both";
  }
  return "ID";
}

SplitTag split_tag_from_string(const std::string& s) {
  if (s == "ID") return SplitTag::ID;
  if (s == "OOD_entity") return SplitTag::OODEntity;
  if (s == "OOD_relation") return SplitTag::OODRelation;
  if (s == "OOD_both") return SplitTag::OODBoth;
  throw ConfigError("unknown split tag: " + s);
}

std::string prepend_prefix(SubjectKind kind) {
  return kind == SubjectKind::Person ? "Imagine that someone named "
                                     : "Imagine that a company named ";
}

std::string qa_line(const std::string& question, const std::string& answer) {
  return "q : " + question + " a : " + answer;
}

bool contains_casefold(const std::string& haystack, const std::string& needle) {
  return lower(haystack).find(lower(needle)) != std::string::npos;
}

void WorldSpec::validate() const {
  if (n_types < 1 || n_types > static_cast<int>(builtin_types().size()))
    throw ConfigError("n_types must be in [1, " + std::to_string(builtin_types().size()) + "]");
  if (entities_per_type < 2) throw ConfigError("need at least 2 entities per type");
  if (relations_per_type < 2) throw ConfigError("need at least 2 relations per type");
  for (int i = 0; i < n_types; ++i) {
    if (relations_per_type > static_cast<int>(builtin_types()[i].relations.size()))
      throw ConfigError("relations_per_type exceeds the relations defined for " +
                        builtin_types()[i].name);
  }
  if (heldout_entities < 0 || heldout_entities >= entities_per_type)
    throw ConfigError("heldout_entities must leave at least one in-domain entity");
  if (heldout_relations < 0 || heldout_relations >= relations_per_type)
    throw ConfigError("heldout_relations must leave at least one in-domain relation");
  if (fake_first_names < 1 || fake_last_names < 1) throw ConfigError("need fictional names");
  if (reserved_names < 0 || reserved_names > fake_first_names * fake_last_names)
    throw ConfigError("reserved_names exceeds the fictional name pool");
}

void to_json(nlohmann::json& j, const WorldSpec& s) {
  j = {{"n_types", s.n_types},
       {"entities_per_type", s.entities_per_type},
       {"heldout_entities", s.heldout_entities},
       {"relations_per_type", s.relations_per_type},
       {"heldout_relations", s.heldout_relations},
       {"fake_first_names", s.fake_first_names},
       {"fake_last_names", s.fake_last_names},
       {"reserved_names", s.reserved_names},
       {"seed", s.seed}};
}

void from_json(const nlohmann::json& j, WorldSpec& s) {
  WorldSpec d;
  s.n_types = j.value("n_types", d.n_types);
  s.entities_per_type = j.value("entities_per_type", d.entities_per_type);
  s.heldout_entities = j.value("heldout_entities", d.heldout_entities);
  s.relations_per_type = j.value("relations_per_type", d.relations_per_type);
  s.heldout_relations = j.value("heldout_relations", d.heldout_relations);
  s.fake_first_names = j.value("fake_first_names", d.fake_first_names);
  s.fake_last_names = j.value("fake_last_names", d.fake_last_names);
  s.reserved_names = j.value("reserved_names", d.reserved_names);
  s.seed = j.value("seed", d.seed);
}

std::vector<std::string> WorldType::entity_pool(bool heldout) const {
  auto split = entities.begin() + (static_cast<long>(entities.size()) - heldout_entities);
  return heldout ? std::vector<std::string>(split, entities.end())
                 : std::vector<std::string>(entities.begin(), split);
}

std::vector<RelationDef> WorldType::relation_pool(bool heldout) const {
  const auto& r = def.relations;
  auto split = r.begin() + (static_cast<long>(r.size()) - heldout_relations);
  return heldout ? std::vector<RelationDef>(split, r.end())
                 : std::vector<RelationDef>(r.begin(), split);
}

const WorldType& SynWorld::type(const std::string& name) const {
  for (const auto& t : types)
    if (t.def.name == name) return t;
  throw LookupError("no entity type " + name);
}

const std::string& SynWorld::answer(const std::string& entity, const std::string& relation) const {
  auto it = kb.find({entity, relation});
  if (it == kb.end()) throw LookupError("no kb entry for (" + entity + ", " + relation + ")");
  return it->second;
}

std::vector<std::string> SynWorld::generated_words() const {
  std::vector<std::string> out;
  for (const auto& t : types) out.insert(out.end(), t.entities.begin(), t.entities.end());
  std::set<std::string> answers;
  for (const auto& [key, a] : kb) answers.insert(a);
  out.insert(out.end(), answers.begin(), answers.end());
  std::set<std::string> parts;
  for (const auto& n : fake_names)
    for (const auto& w : words_of(n)) parts.insert(w);
  out.insert(out.end(), parts.begin(), parts.end());
  return out;
}

std::vector<std::string> SynWorld::lexicon() const {
  std::vector<EntityTypeDef> defs;
  for (const auto& t : types) defs.push_back(t.def);
  auto out = template_words(defs);
  auto gen = generated_words();
  out.insert(out.end(), gen.begin(), gen.end());
  return out;
}

SynWorld build_world(const WorldSpec& spec) {
  spec.validate();
  SynWorld w;
  w.spec = spec;
  std::mt19937_64 rng(spec.seed);
  // Fixed words come from every built-in type so that worlds of different
  // sizes never reuse a template word as a name.
  WordForge forge(rng, template_words(builtin_types()));

  for (int i = 0; i < spec.n_types; ++i) {
    WorldType t;
    t.def = builtin_types()[i];
    t.def.relations.resize(spec.relations_per_type);
    t.heldout_entities = spec.heldout_entities;
    t.heldout_relations = spec.heldout_relations;
    for (int e = 0; e < spec.entities_per_type; ++e) t.entities.push_back(forge.next());
    w.types.push_back(std::move(t));
  }
  for (const auto& t : w.types) {
    for (const auto& r : t.def.relations) {
      std::vector<std::string> pool;
      for (int e = 0; e < spec.entities_per_type; ++e) pool.push_back(forge.next());
      std::shuffle(pool.begin(), pool.end(), rng);
      for (std::size_t e = 0; e < t.entities.size(); ++e) w.kb[{t.entities[e], r.id}] = pool[e];
    }
  }
  std::vector<std::string> first, last;
  for (int i = 0; i < spec.fake_first_names; ++i) first.push_back(forge.next());
  for (int i = 0; i < spec.fake_last_names; ++i) last.push_back(forge.next());
  for (const auto& f : first)
    for (const auto& l : last) w.fake_names.push_back(f + " " + l);
  std::shuffle(w.fake_names.begin(), w.fake_names.end(), rng);
  return w;
}

nlohmann::json to_json(const SynWorld& w) {
  nlohmann::json types = nlohmann::json::array();
  for (const auto& t : w.types) {
    nlohmann::json rels = nlohmann::json::array();
    for (const auto& r : t.def.relations)
      rels.push_back({{"id", r.id}, {"question", r.question}, {"statement", r.statement}});
    types.push_back({{"name", t.def.name},
                     {"entities", t.entities},
                     {"heldout_entities", t.heldout_entities},
                     {"heldout_relations", t.heldout_relations},
                     {"relations", rels},
                     {"person", story_json(t.def.person)},
                     {"company", story_json(t.def.company)}});
  }
  nlohmann::json kb = nlohmann::json::array();
  for (const auto& [key, a] : w.kb) kb.push_back({key.first, key.second, a});
  return {{"spec", w.spec}, {"types", types}, {"kb", kb}, {"fake_names", w.fake_names}};
}

SynWorld world_from_json(const nlohmann::json& j) {
  SynWorld w;
  w.spec = j.at("spec").get<WorldSpec>();
  for (const auto& tj : j.at("types")) {
    WorldType t;
    t.def.name = tj.at("name");
    t.entities = tj.at("entities").get<std::vector<std::string>>();
    t.heldout_entities = tj.at("heldout_entities");
    t.heldout_relations = tj.at("heldout_relations");
    for (const auto& r : tj.at("relations"))
      t.def.relations.push_back({r.at("id"), r.at("question"), r.at("statement")});
    t.def.person = story_from(tj.at("person"));
    t.def.company = story_from(tj.at("company"));
    w.types.push_back(std::move(t));
  }
  for (const auto& e : j.at("kb")) w.kb[{e.at(0), e.at(1)}] = e.at(2);
  w.fake_names = j.at("fake_names").get<std::vector<std::string>>();
  return w;
}

EpisodeBatch Episode::to_batch() const {
  EpisodeBatch b;
  b.id = id;
  b.fact_text = fact_text;
  b.atomic_facts = atomic_facts;
  for (const auto& qa : prop_qas) b.prop_qas.push_back({qa.question, qa.answer});
  b.paraphrase = paraphrase;
  b.loc_prompts = loc_prompts;
  return b;
}

nlohmann::json to_json(const Episode& e) {
  nlohmann::json atomic = nlohmann::json::array();
  for (const auto& [p, a] : e.atomic_facts) atomic.push_back({{"prompt", p}, {"answer", a}});
  nlohmann::json prop = nlohmann::json::array();
  for (const auto& q : e.prop_qas)
    prop.push_back({{"question", q.question},
                    {"answer", q.answer},
                    {"relation", q.relation},
                    {"object", q.object},
                    {"slot", q.slot},
                    {"verbatim", q.verbatim}});
  nlohmann::json single = nlohmann::json::array();
  for (const auto& [q, a] : e.singlehop_qas) single.push_back({{"question", q}, {"answer", a}});
  return {{"id", e.id},
          {"split_tag", to_string(e.split_tag)},
          {"fake_entity", e.fake_entity},
          {"subject_kind", to_string(e.subject_kind)},
          {"entity_type", e.entity_type},
          {"objects", e.objects},
          {"fact_text", e.fact_text},
          {"atomic_facts", atomic},
          {"prop_qas", prop},
          {"singlehop_qas", single},
          {"paraphrase", e.paraphrase},
          {"loc_prompts", e.loc_prompts}};
}

Episode episode_from_json(const nlohmann::json& j) {
  Episode e;
  e.id = j.at("id");
  e.split_tag = split_tag_from_string(j.at("split_tag"));
  e.fake_entity = j.value("fake_entity", "");
  e.subject_kind = subject_kind_from_string(j.value("subject_kind", "person"));
  e.entity_type = j.value("entity_type", "");
  if (j.contains("objects")) e.objects = j.at("objects").get<std::array<std::string, 3>>();
  e.fact_text = j.at("fact_text");
  for (const auto& a : j.at("atomic_facts")) e.atomic_facts.push_back({a.at("prompt"), a.at("answer")});
  for (const auto& q : j.at("prop_qas")) {
    PropQA p;
    p.question = q.at("question");
    p.answer = q.at("answer");
    p.relation = q.value("relation", "");
    p.object = q.value("object", "");
    p.slot = q.value("slot", 0);
    p.verbatim = q.value("verbatim", false);
    e.prop_qas.push_back(std::move(p));
  }
  for (const auto& q : j.at("singlehop_qas")) e.singlehop_qas.push_back({q.at("question"), q.at("answer")});
  e.paraphrase = j.value("paraphrase", "");
  e.loc_prompts = j.value("loc_prompts", std::vector<std::string>{});
  return e;
}

Episode make_instance(const SynWorld& world, std::uint64_t seed, const InstanceOptions& opt) {
  std::mt19937_64 rng(seed);
  const WorldType& t = pick(rng, world.types);
  auto pool = t.entity_pool(opt.heldout_entities);
  if (pool.size() < 3) throw ConfigError("entity pool of " + t.def.name + " has fewer than 3 entities");
  std::shuffle(pool.begin(), pool.end(), rng);

  Episode ep;
  ep.id = opt.id;
  ep.split_tag = opt.heldout_entities ? (opt.heldout_relations ? SplitTag::OODBoth : SplitTag::OODEntity)
                                      : (opt.heldout_relations ? SplitTag::OODRelation : SplitTag::ID);
  ep.entity_type = t.def.name;
  ep.objects = {pool[0], pool[1], pool[2]};
  ep.subject_kind = std::bernoulli_distribution(0.5)(rng) ? SubjectKind::Person : SubjectKind::Company;
  if (opt.fake_entity.empty()) {
    std::uniform_int_distribution<std::size_t> d(static_cast<std::size_t>(world.spec.reserved_names),
                                                 world.fake_names.size() - 1);
    ep.fake_entity = world.fake_names.at(d(rng));
  } else {
    ep.fake_entity = opt.fake_entity;
  }

  const auto& story = story_for(t.def, ep.subject_kind);
  ep.fact_text = fill_story(story.text, ep.fake_entity, ep.objects);
  for (int k = 0; k < 3; ++k)
    ep.atomic_facts.push_back({fill(story.atomic_prompts[k], "{s}", ep.fake_entity), ep.objects[k]});
  ep.paraphrase = fill(story.paraphrase, "{s}", ep.fake_entity);

  for (int k = 0; k < 3; ++k) {
    const std::string descriptor = fill(story.descriptors[k], "{s}", ep.fake_entity);
    for (const auto& r : t.relation_pool(opt.heldout_relations)) {
      PropQA qa;
      qa.question = question_about(r, descriptor);
      qa.answer = world.answer(ep.objects[k], r.id);
      qa.relation = r.id;
      qa.object = ep.objects[k];
      qa.slot = k;
      qa.verbatim = contains_casefold(ep.fact_text, qa.answer);
      ep.singlehop_qas.push_back({question_about(r, ep.objects[k]), qa.answer});
      ep.prop_qas.push_back(std::move(qa));
    }
  }

  for (int i = 0; i < opt.n_loc; ++i) {
    for (int attempt = 0; attempt < 1000; ++attempt) {
      const WorldType& lt = pick(rng, world.types);
      auto ents = lt.entity_pool(opt.heldout_entities);
      const auto& e = pick(rng, ents);
      if (std::find(ep.objects.begin(), ep.objects.end(), e) != ep.objects.end()) continue;
      auto rels = lt.relation_pool(opt.heldout_relations);
      ep.loc_prompts.push_back(question_about(pick(rng, rels), e));
      break;
    }
  }
  return ep;
}

void DataSpec::validate() const {
  if (n_train < 1 || n_val < 1 || n_test < 0 || n_ood < 0)
    throw ConfigError("episode counts must be positive");
  if (n_loc < 1) throw ConfigError("n_loc must be >= 1");
}

void to_json(nlohmann::json& j, const DataSpec& s) {
  j = {{"n_train", s.n_train}, {"n_val", s.n_val}, {"n_test", s.n_test},
       {"n_ood", s.n_ood},     {"n_loc", s.n_loc}, {"seed", s.seed}};
}

void from_json(const nlohmann::json& j, DataSpec& s) {
  DataSpec d;
  s.n_train = j.value("n_train", d.n_train);
  s.n_val = j.value("n_val", d.n_val);
  s.n_test = j.value("n_test", d.n_test);
  s.n_ood = j.value("n_ood", d.n_ood);
  s.n_loc = j.value("n_loc", d.n_loc);
  s.seed = j.value("seed", d.seed);
}

const std::vector<std::string>& Dataset::split_names() {
  static const std::vector<std::string> names{"train",      "val",          "test_id",
                                              "ood_entity", "ood_relation", "ood_both"};
  return names;
}

const std::vector<Episode>& Dataset::split(const std::string& name) const {
  return const_cast<Dataset*>(this)->split(name);
}

std::vector<Episode>& Dataset::split(const std::string& name) {
  if (name == "train") return train;
  if (name == "val") return val;
  if (name == "test_id" || name == "id") return test_id;
  if (name == "ood_entity") return ood_entity;
  if (name == "ood_relation") return ood_relation;
  if (name == "ood_both") return ood_both;
  throw LookupError("unknown split: " + name);
}

Dataset split_dataset(const SynWorld& world, const DataSpec& spec) {
  spec.validate();
  for (const auto& t : world.types) {
    if (t.entity_pool(false).size() < 3)
      throw ConfigError("in-domain entity pool of " + t.def.name + " has fewer than 3 entities");
    if (spec.n_ood > 0 && t.entity_pool(true).size() < 3)
      throw ConfigError("held-out entity pool of " + t.def.name + " has fewer than 3 entities");
    if (spec.n_ood > 0 && t.relation_pool(true).empty())
      throw ConfigError("no held-out relation for " + t.def.name);
  }
  const std::size_t need = static_cast<std::size_t>(spec.n_train + spec.n_val + spec.n_test) +
                           3 * static_cast<std::size_t>(spec.n_ood);
  std::vector<std::string> names(world.fake_names.begin() + world.spec.reserved_names,
                                 world.fake_names.end());
  if (names.size() < need)
    throw ConfigError("not enough fictional names: need " + std::to_string(need) + ", have " +
                      std::to_string(names.size()));
  std::mt19937_64 rng(mix(spec.seed));
  std::shuffle(names.begin(), names.end(), rng);

  Dataset ds;
  struct Plan {
    std::vector<Episode>* out;
    int n;
    bool he, hr;
  };
  std::vector<Plan> plans{{&ds.train, spec.n_train, false, false},
                          {&ds.val, spec.n_val, false, false},
                          {&ds.test_id, spec.n_test, false, false},
                          {&ds.ood_entity, spec.n_ood, true, false},
                          {&ds.ood_relation, spec.n_ood, false, true},
                          {&ds.ood_both, spec.n_ood, true, true}};
  std::size_t next_name = 0;
  std::int64_t next_id = 0;
  for (std::size_t s = 0; s < plans.size(); ++s) {
    for (int i = 0; i < plans[s].n; ++i) {
      InstanceOptions opt;
      opt.heldout_entities = plans[s].he;
      opt.heldout_relations = plans[s].hr;
      opt.fake_entity = names[next_name++];
      opt.n_loc = spec.n_loc;
      opt.id = next_id++;
      std::uint64_t seed = mix(spec.seed ^ mix((s << 32) | static_cast<std::uint64_t>(i)));
      plans[s].out->push_back(make_instance(world, seed, opt));
    }
  }
  return ds;
}

void to_json(nlohmann::json& j, const CorpusOptions& o) {
  j = {{"background_stories", o.background_stories},
       {"context_stories", o.context_stories},
       {"seed", o.seed}};
}

void from_json(const nlohmann::json& j, CorpusOptions& o) {
  CorpusOptions d;
  o.background_stories = j.value("background_stories", d.background_stories);
  o.context_stories = j.value("context_stories", d.context_stories);
  o.seed = j.value("seed", d.seed);
}

std::vector<std::string> pretrain_corpus(const SynWorld& world, const CorpusOptions& opt) {
  if (opt.background_stories < 0 || opt.context_stories < 0)
    throw ConfigError("story counts must be >= 0");
  if (opt.background_stories + opt.context_stories > world.spec.reserved_names)
    throw ConfigError("not enough reserved fictional names for the corpus stories");
  std::vector<std::string> lines;
  for (const auto& t : world.types) {
    for (const auto& e : t.entities) {
      for (const auto& r : t.def.relations) {
        const auto& a = world.answer(e, r.id);
        lines.push_back(qa_line(question_about(r, e), a));
        lines.push_back(statement_about(r, e, a));
      }
    }
  }

  std::mt19937_64 rng(mix(opt.seed ^ 0xC0FFEE));
  auto story = [&](const std::string& subject, bool as_context) {
    const WorldType& t = pick(rng, world.types);
    auto ents = t.entities;
    std::shuffle(ents.begin(), ents.end(), rng);
    std::array<std::string, 3> objects{ents[0], ents[1], ents[2]};
    SubjectKind kind =
        std::bernoulli_distribution(0.5)(rng) ? SubjectKind::Person : SubjectKind::Company;
    const auto& tmpl = story_for(t.def, kind);
    const std::string fact = fill_story(tmpl.text, subject, objects);
    if (!as_context) lines.push_back(fact);
    for (int k = 0; k < 3; ++k) {
      const std::string descriptor = fill(tmpl.descriptors[k], "{s}", subject);
      for (const auto& r : t.def.relations) {
        std::string qa = qa_line(question_about(r, descriptor), world.answer(objects[k], r.id));
        lines.push_back(as_context ? prepend_prefix(kind) + fact + " " + qa : qa);
      }
    }
  };
  int reserved = 0;
  for (int i = 0; i < opt.background_stories; ++i) story(world.fake_names[reserved++], false);
  for (int i = 0; i < opt.context_stories; ++i) story(world.fake_names[reserved++], true);
  return lines;
}

std::vector<TextPair> kb_questions(const SynWorld& world) {
  std::vector<TextPair> out;
  for (const auto& t : world.types)
    for (const auto& e : t.entities)
      for (const auto& r : t.def.relations) out.emplace_back(question_about(r, e), world.answer(e, r.id));
  return out;
}

std::optional<std::string> resolve(const SynWorld& world, const Episode& ep, const PropQA& qa) {
  const WorldType* type = nullptr;
  for (const auto& t : world.types)
    if (t.def.name == ep.entity_type) type = &t;
  if (!type) return std::nullopt;

  // Step 1: read the objects back out of the fact text.
  const auto& tmpl = story_for(type->def, ep.subject_kind);
  auto pattern = words_of(fill(tmpl.text, "{s}", ep.fake_entity));
  auto fact = words_of(ep.fact_text);
  if (pattern.size() != fact.size()) return std::nullopt;
  std::array<std::string, 3> objects;
  for (std::size_t i = 0; i < pattern.size(); ++i) {
    const auto& p = pattern[i];
    if (p.size() == 4 && p[0] == '{' && p[1] == 'o') {
      objects[p[2] - '1'] = fact[i];
    } else if (p != fact[i]) {
      return std::nullopt;
    }
  }
  if (objects != ep.objects) return std::nullopt;

  // Step 2: find which (slot, relation) the question asks about.
  for (int k = 0; k < 3; ++k) {
    const std::string descriptor = fill(tmpl.descriptors[k], "{s}", ep.fake_entity);
    for (const auto& r : type->def.relations) {
      if (question_about(r, descriptor) != qa.question) continue;
      auto it = world.kb.find({objects[k], r.id});
      if (it == world.kb.end()) return std::nullopt;
      return it->second;
    }
  }
  return std::nullopt;
}

void write_episodes(const std::filesystem::path& file, const std::vector<Episode>& eps) {
  if (file.has_parent_path()) std::filesystem::create_directories(file.parent_path());
  std::ofstream out(file, std::ios::binary | std::ios::trunc);
  if (!out) throw ConfigError("cannot write " + file.string());
  for (const auto& e : eps) out << to_json(e).dump() << '\n';
}

std::vector<Episode> read_episodes(const std::filesystem::path& file) {
  std::ifstream in(file);
  if (!in) throw LookupError("missing episode file: " + file.string());
  std::vector<Episode> out;
  std::string line;
  while (std::getline(in, line)) {
    if (line.empty()) continue;
    out.push_back(episode_from_json(nlohmann::json::parse(line)));
  }
  return out;
}

}  // namespace propedit
