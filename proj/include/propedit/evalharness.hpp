#pragma once

// Editors, exact-match scoring and system comparison.

#include <cstdint>
#include <functional>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include "json.hpp"
#include "propedit/datasyn.hpp"
#include "propedit/gradcap.hpp"
#include "propedit/hypernet.hpp"
#include "propedit/tinylm.hpp"
#include "propedit/tokenizer.hpp"

namespace propedit {

// Casefold (ASCII) and collapse whitespace runs to one space, trimmed.
std::string normalize_text(const std::string& s);

// 1 iff some normalized answer is a substring of
// normalize(question + " " + generated). Throws ArgumentError on an empty
// answer set.
int em_score(const std::string& question, const std::string& generated,
             const std::vector<std::string>& answers);

// What an editor produces for one episode: edited weights, or the base
// weights plus a text placed in front of every question.
struct EditResult {
  WeightCatalog weights;
  std::string prompt_prefix;
  bool failed = false;
  std::string error;
};

struct EditorHandle {
  std::string name;
  bool parametric = true;
  std::function<EditResult(const WeightCatalog& base, const Episode& ep)> apply;
};

// Returns the base weights unchanged.
EditorHandle identity_editor(std::string name = "base");

// "Imagine that ..." followed by the fact; weights untouched.
EditorHandle prepend_editor();

enum class CptScope : std::uint8_t { Full, LayerRange };

struct CptConfig {
  double lr = 1e-5;
  int epochs = 4;
  double max_grad_norm = 1.0;
  double weight_decay = 0.1;
  CptScope scope = CptScope::Full;
  int first_layer = 1;
  int last_layer = 3;

  void validate(const ModelConfig& model) const;  // throws ConfigError
};

void to_json(nlohmann::json& j, const CptConfig& c);
void from_json(const nlohmann::json& j, CptConfig& c);

// AdamW on the fact's next-token loss, one step per epoch with a linearly
// decaying rate. LayerRange trains only the MLP matrices of the range.
// A non-finite loss marks the episode failed.
EditorHandle cpt_editor(const CptConfig& cfg, const Tokenizer& tok, std::string name = "");
WeightCatalog continue_pretrain(const WeightCatalog& base, const TokenSeq& fact,
                                const CptConfig& cfg);

// Hypernetwork edit using the given inner-loop batch layout.
EditorHandle hypernet_editor(std::string name, HypernetParams phi, InnerMode inner,
                             const Tokenizer& tok);

struct QuestionResult {
  std::int64_t episode_id = 0;
  SplitTag split = SplitTag::ID;
  bool efficacy = true;  // false: specificity
  bool verbatim = false;
  bool answer_in_question = false;
  std::string question;
  std::string answer;
  std::string generated;
  int score = 0;
};

struct BucketStats {
  std::int64_t n = 0;
  std::int64_t hits = 0;
  std::int64_t answer_in_question = 0;

  double em() const { return n == 0 ? 0.0 : static_cast<double>(hits) / static_cast<double>(n); }
};

struct EvalReport {
  std::string editor;
  std::vector<QuestionResult> questions;
  // Keyed "<efficacy|specificity>/<verbatim|non_verbatim>/<split tag>".
  std::map<std::string, BucketStats> buckets;
  std::vector<std::int64_t> failed_episodes;
  std::vector<double> episode_seconds;

  static std::string bucket_key(bool efficacy, bool verbatim, SplitTag split);
  // Merged stats over every bucket matching the filters.
  BucketStats total(bool efficacy, std::optional<bool> verbatim = std::nullopt,
                    std::optional<SplitTag> split = std::nullopt) const;
  double efficacy_em() const { return total(true).em(); }
  double specificity_em() const { return total(false).em(); }
  // Per-question 0/1 scores in question order.
  std::vector<double> scores(bool efficacy) const;
};

// Timings are left out unless asked for, so the default dump is
// reproducible byte for byte.
nlohmann::json to_json(const EvalReport& r, bool with_timing = false);
EvalReport report_from_json(const nlohmann::json& j);

struct EvalOptions {
  int max_new_tokens = 20;
  // Called after every episode with (index, count).
  std::function<void(std::size_t, std::size_t)> on_episode;
};

// Applies the editor to each episode fresh from base, greedily decodes
// every efficacy and specificity question and scores it.
EvalReport run_eval(const EditorHandle& editor, const std::vector<Episode>& episodes,
                    const WeightCatalog& base, const Tokenizer& tok, const EvalOptions& opt = {});

// Decoded answer for one question under an edit result.
std::string answer_question(const EditResult& edit, const Tokenizer& tok,
                            const std::string& question, int max_new_tokens = 20);

struct BootstrapResult {
  double p_value = 1.0;
  bool significant = false;  // p < 0.05
  double mean_diff = 0.0;
};

// Paired two-sided bootstrap on the mean difference. Throws ArgumentError
// on a length mismatch or empty input.
BootstrapResult paired_bootstrap(const std::vector<double>& a, const std::vector<double>& b,
                                 int n_resamples = 10000, std::uint64_t seed = 0);

// Rows: reports. Columns: efficacy (verbatim / non-verbatim / all) and
// specificity per split present.
std::string format_table(const std::vector<EvalReport>& reports);
std::string to_csv(const EvalReport& r);

// Judge prompt with {question}, {reference} and {prediction} slots.
const std::string& llm_judge_prompt();
std::string fill_judge_prompt(const std::string& question, const std::string& reference,
                              const std::string& prediction);

}  // namespace propedit
