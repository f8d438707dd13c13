#pragma once

// Minimal pre-LayerNorm decoder-only transformer with a hand-written
// reverse pass. All arithmetic is float64.

#include <compare>
#include <cstdint>
#include <functional>
#include <map>
#include <memory>
#include <span>
#include <string>
#include <unordered_map>
#include <vector>

#include <Eigen/Dense>
#include "json.hpp"

#include "propedit/tensor_archive.hpp"

namespace propedit {

using Matrix = Eigen::MatrixXd;
using Vector = Eigen::VectorXd;

struct ModelConfig {
  int n_layers = 4;
  int d_model = 128;
  int n_heads = 4;
  int d_mlp = 256;
  int vocab_size = 0;
  int max_seq_len = 64;
  std::uint64_t seed = 0;

  // Throws ConfigError.
  void validate() const;
  int head_dim() const { return d_model / n_heads; }
  bool operator==(const ModelConfig&) const = default;
  // Equal up to the initialization seed.
  bool same_architecture(const ModelConfig& o) const {
    return n_layers == o.n_layers && d_model == o.d_model && n_heads == o.n_heads &&
           d_mlp == o.d_mlp && vocab_size == o.vocab_size && max_seq_len == o.max_seq_len;
  }
};

void to_json(nlohmann::json& j, const ModelConfig& c);
void from_json(const nlohmann::json& j, ModelConfig& c);

enum class WeightKind : std::uint8_t { MlpUp, MlpDown };

std::string to_string(WeightKind kind);
WeightKind weight_kind_from_string(const std::string& s);

// Address of an editable matrix. mlp_up is (d_mlp x d_model), mlp_down is
// (d_model x d_mlp); rows are outputs, columns inputs.
struct WeightRef {
  int layer = 0;
  WeightKind kind = WeightKind::MlpUp;

  auto operator<=>(const WeightRef&) const = default;
  std::string name() const;  // e.g. "layers.2.mlp_up.weight"
  static WeightRef parse(const std::string& name);
};

// Token ids plus a per-position flag marking prediction targets. Position 0
// is never a target: token t is predicted from the logits at t - 1.
struct TokenSeq {
  std::vector<int> tokens;
  std::vector<std::uint8_t> loss_mask;

  std::size_t size() const { return tokens.size(); }
  std::size_t num_targets() const;
  // Index of the last target position, or 0 if there is none.
  std::size_t last_target() const;

  // Every token after the first is a target.
  static TokenSeq all_targets(std::vector<int> tokens);
  // Only the `answer` tokens are targets.
  static TokenSeq prompt_answer(const std::vector<int>& prompt, const std::vector<int>& answer);
};

// Name/index bookkeeping shared by every catalog of one configuration.
struct ParamLayout {
  struct Layer {
    std::size_t ln1_gain, ln1_bias, wq, wk, wv, wo, ln2_gain, ln2_bias, up_w, up_b, down_w,
        down_b;
  };
  std::vector<std::string> names;
  std::vector<int> layer_of;  // -1 for non-layer parameters
  std::unordered_map<std::string, std::size_t> index;
  std::size_t tok_emb = 0, pos_emb = 0, lnf_gain = 0, lnf_bias = 0, unembed = 0;
  std::vector<Layer> layers;

  static std::shared_ptr<const ParamLayout> make(const ModelConfig& config);
};

// All parameters of a model. Tensors are shared copy-on-write, so copying
// a catalog and replacing a few matrices is cheap and leaves the rest
// bit-identical to the source.
class WeightCatalog {
 public:
  WeightCatalog() = default;

  const ModelConfig& config() const { return config_; }
  const ParamLayout& layout() const { return *layout_; }
  std::size_t size() const { return tensors_.size(); }
  const std::string& name(std::size_t i) const { return layout_->names[i]; }

  const Matrix& tensor(std::size_t i) const { return *tensors_[i]; }
  const Matrix& tensor(const std::string& name) const;
  std::size_t index_of(const std::string& name) const;  // throws LookupError
  // Detaches the tensor from any other catalog sharing it.
  Matrix& mutable_tensor(std::size_t i);

  const Matrix& weight(const WeightRef& ref) const;  // throws LookupError
  std::size_t index_of(const WeightRef& ref) const;
  void set_weight(const WeightRef& ref, Matrix value);
  std::vector<WeightRef> editable_refs() const;

  // Exact element-wise comparison of every tensor.
  bool bit_equal(const WeightCatalog& other) const;
  bool shares_tensor(const WeightCatalog& other, std::size_t i) const {
    return tensors_[i] == other.tensors_[i];
  }

  TensorArchive to_archive() const;
  static WeightCatalog from_archive(const TensorArchive& archive);

  friend WeightCatalog build_model(const ModelConfig& config);

 private:
  ModelConfig config_;
  std::shared_ptr<const ParamLayout> layout_;
  std::vector<std::shared_ptr<Matrix>> tensors_;
};

// Deterministic initialization from config.seed. Throws ConfigError.
WeightCatalog build_model(const ModelConfig& config);

// Dense gradient buffers laid out like a catalog. Entries that were not
// requested stay empty (size 0).
struct Gradients {
  std::vector<Matrix> g;

  static Gradients zeros_like(const WeightCatalog& weights);
  static Gradients zeros_for(const WeightCatalog& weights, std::span<const WeightRef> refs);
  double squared_norm() const;
  void scale(double s);
};

struct LayerTrace {
  Matrix ln1_hat, a;
  Vector ln1_rstd;
  Matrix q, k, v;
  std::vector<Matrix> probs;  // per head, T x T, causal
  Matrix attn;
  Matrix ln2_hat, h;  // h feeds mlp_up
  Vector ln2_rstd;
  Matrix z;  // mlp_up pre-activation
  Matrix g;  // gelu(z), feeds mlp_down
};

struct ForwardTrace {
  std::vector<int> tokens;
  std::vector<LayerTrace> layers;
  Matrix lnf_hat, xf;
  Vector lnf_rstd;
  Matrix logits;  // T x vocab
};

ForwardTrace forward(const WeightCatalog& weights, std::span<const int> tokens);
Matrix logits(const WeightCatalog& weights, std::span<const int> tokens);

// Row-wise log-softmax.
Matrix log_softmax_rows(const Matrix& logits);

// Per-position inputs (rows of U) and output gradients (rows of D) of one
// matrix multiply, for every position of a sequence.
struct TapRows {
  Matrix U;
  Matrix D;
};

struct BackwardSpec {
  bool all_params = true;
  std::vector<WeightRef> weights;  // used when all_params is false
  std::vector<WeightRef> taps;
};

// Accumulates parameter gradients into `grads` (which must come from
// zeros_like / zeros_for) and records taps.
void backward(const WeightCatalog& weights, const ForwardTrace& trace, const Matrix& dlogits,
              const BackwardSpec& spec, Gradients* grads,
              std::map<WeightRef, TapRows>* taps = nullptr);

// Adds weight * (-log p(target)) over the masked targets of `seq`; when
// `dlogits` is non-null adds the matching gradient. Returns the loss sum.
double add_nll(const Matrix& logits, const TokenSeq& seq, double weight, Matrix* dlogits);

// Adds weight * KL(p_ref || softmax(logits)) at every row, where
// `ref_logp` holds log-probabilities of the reference model.
double add_kl(const Matrix& ref_logp, const Matrix& logits, double weight, Matrix* dlogits);

// Mean next-token NLL over every masked target of the batch. Throws
// ArgumentError when no position is masked.
double clm_loss(const WeightCatalog& weights, std::span<const TokenSeq> batch);
double clm_loss(const WeightCatalog& weights, const TokenSeq& seq);

struct LossAndGrad {
  double loss = 0.0;
  Gradients grads;
};
LossAndGrad clm_loss_and_grad(const WeightCatalog& weights, std::span<const TokenSeq> batch);

// Greedy continuation of `prompt` (EOS excluded from the result).
std::vector<int> greedy_decode(const WeightCatalog& weights, std::span<const int> prompt,
                               int max_new = 20, int eos_id = 2);

// Mean over prompt positions of KL(p_base || p_edited).
double kl_next_token(const WeightCatalog& base, const WeightCatalog& edited,
                     std::span<const int> prompt);

struct PretrainOptions {
  int steps = 2000;
  double lr = 1e-3;
  int batch_size = 16;
  double weight_decay = 0.0;
  double max_grad_norm = 1.0;
  std::uint64_t seed = 0;
  // Called every `log_every` steps and after the last step.
  int log_every = 100;
  std::function<void(int step, double loss)> on_log;
};

// Adam pretraining from build_model(config). Throws TrainingError carrying
// the step index on a non-finite loss.
WeightCatalog pretrain(const ModelConfig& config, std::span<const TokenSeq> corpus,
                       const PretrainOptions& options);

}  // namespace propedit
