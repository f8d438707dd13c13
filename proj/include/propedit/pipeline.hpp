#pragma once

// End-to-end commands over an output directory:
//
//   out/config.json        resolved configuration
//   out/MANIFEST.json      inputs and output hashes per command
//   out/data/              world.json, tokenizer.json, <split>.jsonl, stats.json
//   out/model/             pretrained weights, pretrain_log.jsonl, stats.json
//   out/hypernet/<label>/  best/, checkpoints/, train_log.jsonl, metatrain.json
//   out/eval/<editor>_<split>/  report.json, table.txt, results.csv

#include <cstdint>
#include <filesystem>
#include <functional>
#include <string>
#include <utility>
#include <vector>

#include "json.hpp"
#include "propedit/datasyn.hpp"
#include "propedit/evalharness.hpp"
#include "propedit/hypernet.hpp"
#include "propedit/metatrain.hpp"
#include "propedit/tinylm.hpp"

namespace propedit {

void to_json(nlohmann::json& j, const PretrainOptions& o);
void from_json(const nlohmann::json& j, PretrainOptions& o);

struct RunConfig {
  WorldSpec world;
  DataSpec data;
  CorpusOptions corpus;
  ModelConfig model;  // vocab_size is taken from the tokenizer
  PretrainOptions pretrain;
  int target_first_layer = 1;
  int target_last_layer = 3;
  HypernetConfig hypernet;
  MetaTrainConfig metatrain;
  CptConfig cpt;
  // 0 evaluates every episode of the split.
  int eval_limit = 0;
  std::uint64_t hypernet_seed = 0;

  // Desk-scale values used when no config file is given.
  static RunConfig toy();
  // Sets every seed of the document.
  void set_seed(std::uint64_t seed);
  TargetSpec targets() const { return TargetSpec::layer_range(target_first_layer, target_last_layer); }
  void validate() const;  // throws ConfigError
};

nlohmann::json to_json(const RunConfig& c);
// Keys missing from `j` keep their RunConfig::toy() values. Throws
// ConfigError on unknown sections or malformed values.
RunConfig run_config_from_json(const nlohmann::json& j);

// Applies PROPEDIT_<SECTION>_<KEY>=value pairs to a config document. The
// value is parsed as JSON when possible and taken as a string otherwise.
void apply_env_overrides(nlohmann::json& doc,
                         const std::vector<std::pair<std::string, std::string>>& env);
std::vector<std::pair<std::string, std::string>> propedit_environment();

// Hex SHA-256 of a file's bytes.
std::string sha256_file(const std::filesystem::path& file);

struct CommandResult {
  int exit_code = 0;  // 0 ok, 1 config error, 2 tolerance failure
  std::string message;
};

using Logger = std::function<void(const std::string&)>;

struct Pipeline {
  RunConfig cfg;
  std::filesystem::path out;
  Logger log;

  CommandResult datagen() const;
  CommandResult pretrain() const;
  // `label` names the hypernet; "mend" trains with the paraphrase outer
  // loss on atomic inner batches.
  CommandResult metatrain(const std::string& label, bool resume = false) const;
  CommandResult eval(const std::string& editor, const std::string& split,
                     EvalReport* report = nullptr) const;
  CommandResult gradcheck() const;

  // Artifact loaders; throw LookupError naming the missing path.
  SynWorld load_world() const;
  Tokenizer load_tokenizer() const;
  std::vector<Episode> load_split(const std::string& split) const;
  WeightCatalog load_model() const;
  HypernetParams load_hypernet_label(const std::string& label) const;
  MetaTrainConfig metatrain_config_for(const std::string& label) const;
  EditorHandle make_editor(const std::string& name) const;
};

// EM of the model on every kb question (greedy decoding).
double singlehop_em(const SynWorld& world, const WeightCatalog& model, const Tokenizer& tok);

}  // namespace propedit
