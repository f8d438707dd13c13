#pragma once

// Closed synthetic world and editing episodes.
//
// Entities, relation answers and fictional subject names are generated
// pronounceable words drawn from disjoint lexicons; no generated word is a
// substring of another word of the world, so an answer can appear in a text
// only when the text mentions it on purpose.

#include <array>
#include <cstdint>
#include <filesystem>
#include <map>
#include <optional>
#include <string>
#include <utility>
#include <vector>

#include "json.hpp"
#include "propedit/metatrain.hpp"

namespace propedit {

enum class SubjectKind : std::uint8_t { Person, Company };
enum class SplitTag : std::uint8_t { ID, OODEntity, OODRelation, OODBoth };

std::string to_string(SubjectKind k);
SubjectKind subject_kind_from_string(const std::string& s);
std::string to_string(SplitTag t);
SplitTag split_tag_from_string(const std::string& s);

// "{X}" is the entity slot, "{A}" the answer slot.
struct RelationDef {
  std::string id;  // "<type>.<name>", unique across the world
  std::string question;
  std::string statement;
};

// "{s}" is the subject, "{o1}".."{o3}" the objects.
struct StoryTemplate {
  std::string text;
  std::array<std::string, 3> descriptors;     // noun phrases naming each object
  std::array<std::string, 3> atomic_prompts;  // completed by the object
  std::string paraphrase;                     // restates atomic_prompts[0]
};

struct EntityTypeDef {
  std::string name;
  std::vector<RelationDef> relations;
  StoryTemplate person;
  StoryTemplate company;
};

// Built-in type definitions (7 types, 6 relations each).
const std::vector<EntityTypeDef>& builtin_types();

struct WorldSpec {
  int n_types = 5;
  int entities_per_type = 12;
  int heldout_entities = 3;
  int relations_per_type = 5;
  int heldout_relations = 1;
  int fake_first_names = 40;
  int fake_last_names = 40;
  // Fictional names set aside for the pretraining corpus.
  int reserved_names = 400;
  std::uint64_t seed = 0;

  void validate() const;  // throws ConfigError
};

void to_json(nlohmann::json& j, const WorldSpec& s);
void from_json(const nlohmann::json& j, WorldSpec& s);

struct WorldType {
  EntityTypeDef def;  // relations trimmed to relations_per_type
  std::vector<std::string> entities;  // held-out ones last
  int heldout_entities = 0;
  int heldout_relations = 0;

  std::vector<std::string> entity_pool(bool heldout) const;
  std::vector<RelationDef> relation_pool(bool heldout) const;
};

struct SynWorld {
  WorldSpec spec;
  std::vector<WorldType> types;
  std::map<std::pair<std::string, std::string>, std::string> kb;  // (entity, relation id)
  std::vector<std::string> fake_names;  // two words each; first reserved_names reserved

  const WorldType& type(const std::string& name) const;  // throws LookupError
  const std::string& answer(const std::string& entity, const std::string& relation) const;
  // Every word a tokenizer needs for this world's texts.
  std::vector<std::string> lexicon() const;
  // Generated words only (names, answers, fake name parts).
  std::vector<std::string> generated_words() const;
};

nlohmann::json to_json(const SynWorld& w);
SynWorld world_from_json(const nlohmann::json& j);

// Deterministic from spec.seed. Throws ConfigError.
SynWorld build_world(const WorldSpec& spec);

struct PropQA {
  std::string question;
  std::string answer;
  std::string relation;
  std::string object;
  int slot = 0;
  bool verbatim = false;
};

struct Episode {
  std::int64_t id = 0;
  SplitTag split_tag = SplitTag::ID;
  std::string fake_entity;
  SubjectKind subject_kind = SubjectKind::Person;
  std::string entity_type;
  std::array<std::string, 3> objects;
  std::string fact_text;
  std::vector<TextPair> atomic_facts;
  std::vector<PropQA> prop_qas;
  std::vector<TextPair> singlehop_qas;
  std::string paraphrase;
  std::vector<std::string> loc_prompts;

  EpisodeBatch to_batch() const;
};

nlohmann::json to_json(const Episode& e);
Episode episode_from_json(const nlohmann::json& j);

struct InstanceOptions {
  bool heldout_entities = false;
  bool heldout_relations = false;
  std::string fake_entity;  // drawn from the unreserved names when empty
  int n_loc = 4;
  std::int64_t id = 0;
};

// One episode: a random type, three distinct entities of that type, a
// subject kind and one efficacy question per (object, relation).
Episode make_instance(const SynWorld& world, std::uint64_t seed, const InstanceOptions& opt = {});

struct DataSpec {
  int n_train = 600;
  int n_val = 100;
  int n_test = 100;
  int n_ood = 60;
  int n_loc = 4;
  std::uint64_t seed = 0;

  void validate() const;  // throws ConfigError
};

void to_json(nlohmann::json& j, const DataSpec& s);
void from_json(const nlohmann::json& j, DataSpec& s);

struct Dataset {
  std::vector<Episode> train, val, test_id, ood_entity, ood_relation, ood_both;

  static const std::vector<std::string>& split_names();  // file stems
  const std::vector<Episode>& split(const std::string& name) const;  // throws LookupError
  std::vector<Episode>& split(const std::string& name);
};

// Throws ConfigError when the holdout pools cannot fill the OOD splits or
// there are not enough fictional names.
Dataset split_dataset(const SynWorld& world, const DataSpec& spec);

struct CorpusOptions {
  // Stories about reserved fictional subjects, each followed by its
  // composed questions.
  int background_stories = 300;
  // Reserved subjects whose story only appears as context in front of a
  // question, in the Prepend layout.
  int context_stories = 100;
  std::uint64_t seed = 0;
};

void to_json(nlohmann::json& j, const CorpusOptions& o);
void from_json(const nlohmann::json& j, CorpusOptions& o);

// One question line and one statement line per kb entry, then the
// background material. Throws ConfigError if the reserved pool is too small.
std::vector<std::string> pretrain_corpus(const SynWorld& world, const CorpusOptions& opt = {});

// (question, answer) for every kb entry, grouped by type and entity.
std::vector<TextPair> kb_questions(const SynWorld& world);

// "q : <question> a : <answer>", the layout shared with evaluation prompts.
std::string qa_line(const std::string& question, const std::string& answer);

// Prefix used by the Prepend baseline.
std::string prepend_prefix(SubjectKind kind);

// Re-derives an efficacy answer from the world: checks that the fact text
// is the story template instantiated with the episode's subject and
// objects, then looks the answer up in the kb. nullopt when either step
// fails.
std::optional<std::string> resolve(const SynWorld& world, const Episode& ep, const PropQA& qa);

// Case-insensitive substring test used for verbatim flags.
bool contains_casefold(const std::string& haystack, const std::string& needle);

void write_episodes(const std::filesystem::path& file, const std::vector<Episode>& eps);
std::vector<Episode> read_episodes(const std::filesystem::path& file);

}  // namespace propedit
