#pragma once

// Outer loop: edit with the current hypernet, score the edited model, and
// push the gradient of that score back through the edit into the hypernet.
//
// The captured pairs depend on the base weights only, so the meta-gradient
// needs no second-order terms of the language model: dL/dW~ on the targets
// is the only quantity that flows into the hypernet.

#include <cstdint>
#include <filesystem>
#include <functional>
#include <map>
#include <optional>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include "json.hpp"
#include "propedit/hypernet.hpp"
#include "propedit/optim.hpp"
#include "propedit/tinylm.hpp"
#include "propedit/tokenizer.hpp"

namespace propedit {

enum class OuterMode : std::uint8_t { Propagation, Paraphrase };

std::string to_string(OuterMode m);
OuterMode outer_mode_from_string(const std::string& s);  // throws ConfigError

using TextPair = std::pair<std::string, std::string>;

struct EpisodeBatch {
  std::int64_t id = 0;
  std::string fact_text;
  std::vector<TextPair> atomic_facts;  // (prompt, answer)
  std::vector<TextPair> prop_qas;      // (question, answer)
  // Restated form of the first atomic prompt; its target is that prompt's
  // answer.
  std::string paraphrase;
  std::vector<std::string> loc_prompts;  // questions
};

struct MetaTrainConfig {
  double c_edit = 0.1;
  OuterMode outer_mode = OuterMode::Propagation;
  InnerMode inner_mode = InnerMode::ClmAllTokens;
  double lr_phi = 1e-6;
  double lr_alpha = 1e-4;
  int batch_size = 10;
  int val_every = 100;
  int patience_steps = 2000;
  int max_steps = 20000;
  // 0 uses every validation episode.
  int val_limit = 0;
  double max_grad_norm = 1.0;
  std::uint64_t seed = 0;

  void validate() const;  // throws ConfigError
};

void to_json(nlohmann::json& j, const MetaTrainConfig& c);
void from_json(const nlohmann::json& j, MetaTrainConfig& c);

// Token-level view of an episode under a given configuration.
struct PreparedEpisode {
  std::int64_t id = 0;
  std::vector<TokenSeq> inner;
  std::vector<TokenSeq> outer;  // one sequence per term of the edit loss
  std::vector<std::vector<int>> loc;
};

// Throws ArgumentError when the episode lacks what the modes need.
PreparedEpisode prepare_episode(const EpisodeBatch& ep, const Tokenizer& tok,
                                const MetaTrainConfig& cfg);
std::vector<PreparedEpisode> prepare_episodes(std::span<const EpisodeBatch> eps,
                                              const Tokenizer& tok, const MetaTrainConfig& cfg);

struct OuterLoss {
  double total = 0.0;
  double edit = 0.0;
  double loc = 0.0;
};

// -(1/P) * sum of the given log-probabilities.
double edit_loss_from_logprobs(std::span<const double> logprobs);

// total = c_edit * edit + loc. When `weight_grads` is non-null it receives
// d(total)/dW~ for every ref in `refs`.
OuterLoss outer_loss(const WeightCatalog& base, const WeightCatalog& edited,
                     const PreparedEpisode& ep, const MetaTrainConfig& cfg,
                     std::span<const WeightRef> refs = {},
                     std::map<WeightRef, Matrix>* weight_grads = nullptr);
OuterLoss outer_loss(const WeightCatalog& base, const WeightCatalog& edited,
                     const EpisodeBatch& ep, const MetaTrainConfig& cfg, const Tokenizer& tok);

// Edit + outer loss for one episode, optionally accumulating dL/dphi.
OuterLoss episode_loss(const HypernetParams& phi, const WeightCatalog& base,
                       const PreparedEpisode& ep, const MetaTrainConfig& cfg,
                       std::vector<Matrix>* phi_grads = nullptr);

struct StepMetrics {
  double edit = 0.0;
  double loc = 0.0;
  double total = 0.0;
  double grad_norm = 0.0;  // before clipping
};

// Hypernet plus its optimizer state.
class MetaLearner {
 public:
  MetaLearner(HypernetParams phi, MetaTrainConfig cfg);

  const HypernetParams& phi() const { return phi_; }
  HypernetParams& phi() { return phi_; }
  const MetaTrainConfig& config() const { return cfg_; }
  const Adam& optimizer() const { return adam_; }

  // Mean gradient over `episodes`, clipped, one Adam update. Throws
  // TrainingError with the episode id on a non-finite loss.
  StepMetrics step(const WeightCatalog& base, std::span<const PreparedEpisode> episodes);

  TensorArchive to_archive() const;
  void load_archive(const TensorArchive& a);

 private:
  HypernetParams phi_;
  MetaTrainConfig cfg_;
  Adam adam_;
};

// Mean total outer loss of `phi` over `episodes`.
double validation_loss(const HypernetParams& phi, const WeightCatalog& base,
                       std::span<const PreparedEpisode> episodes, const MetaTrainConfig& cfg);

struct TrainLogEntry {
  int step = 0;
  double edit = 0.0;
  double loc = 0.0;
  double grad_norm = 0.0;
  std::optional<double> val_total;
};

nlohmann::json to_json(const TrainLogEntry& e);

struct TrainOptions {
  // Called with each log entry as it is produced.
  std::function<void(const TrainLogEntry&)> on_log;
  // JSONL log file; appended to when resuming.
  std::filesystem::path log_path;
  // When set, state is saved here at every validation and reloaded on start.
  std::filesystem::path checkpoint_dir;
  // Replaces validation_loss when set.
  std::function<double(const HypernetParams&)> validator;
};

struct TrainResult {
  HypernetParams best;
  double best_val = 0.0;
  int best_step = 0;
  int steps_run = 0;  // total steps taken, including resumed ones
  bool early_stopped = false;
  std::vector<TrainLogEntry> log;
};

TrainResult train(const HypernetParams& phi0, const WeightCatalog& base,
                  std::span<const PreparedEpisode> train_eps,
                  std::span<const PreparedEpisode> val_eps, const MetaTrainConfig& cfg,
                  const TrainOptions& options = {});

// Indices into a train set of size n for the given step: consecutive slices
// of per-epoch permutations derived from seed.
std::vector<std::size_t> batch_indices(std::size_t n, int batch_size, int step,
                                       std::uint64_t seed);

struct MetaGradCheck {
  double rel_error = 0.0;
  double analytic_norm = 0.0;
  int entries = 0;
};

// Central differences of the mean outer loss over `episodes` on `n_entries`
// sampled hypernet scalars. Every rho entry is always included.
MetaGradCheck check_meta_gradient(const HypernetParams& phi, const WeightCatalog& base,
                                  std::span<const PreparedEpisode> episodes,
                                  const MetaTrainConfig& cfg, int n_entries = 200,
                                  double h = 1e-4, std::uint64_t seed = 0);

// Adds N(0, scale) noise to every phi-group scalar, so that no part of the
// hypernet sits at an exactly-zero gradient.
void perturb_hypernet(HypernetParams& phi, double scale, std::uint64_t seed);

}  // namespace propedit
