#pragma once

// Editor network. For a target matrix W (m x d) every captured pair
// x = [u; delta] (length d + m) is mapped to
//
//   h   = relu(W_k h + b_k)          k = 1..n_hidden, starting from x
//   h'  = h * s_h + o_h              per-target FiLM on the last hidden state
//   y   = x + (W_out h' + b_out) * s_o + o_o
//
// and y is split back into (u~, delta~). The edit is
// W~ = W - alpha * sum_i delta~_i u~_i^T with alpha = softplus(rho).

#include <cstdint>
#include <map>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include "json.hpp"
#include "propedit/gradcap.hpp"
#include "propedit/tensor_archive.hpp"
#include "propedit/tinylm.hpp"
#include "propedit/tokenizer.hpp"

namespace propedit {

struct HypernetConfig {
  int hidden_dim = 1920;
  int n_hidden = 1;
  std::string activation = "relu";
  bool share_params = false;
  bool identity_init = true;
  double alpha_init = 1e-4;

  void validate() const;  // throws ConfigError
};

void to_json(nlohmann::json& j, const HypernetConfig& c);
void from_json(const nlohmann::json& j, HypernetConfig& c);

enum class ParamGroup : std::uint8_t { Phi, Alpha };

// Flat list of named tensors. Gradients and optimizer state use the same
// indexing.
class HypernetParams {
 public:
  struct Mlp {
    std::vector<std::size_t> w, b;  // hidden layers
    std::size_t w_out = 0, b_out = 0;
    int in_dim = 0;
  };
  struct Target {
    WeightRef ref;
    int d = 0, m = 0;  // u and delta dims
    std::size_t mlp = 0;  // index into mlps()
    std::size_t hidden_scale = 0, hidden_offset = 0, out_scale = 0, out_offset = 0, rho = 0;
  };

  const HypernetConfig& config() const { return config_; }
  const TargetSpec& targets() const { return targets_; }
  std::uint64_t seed() const { return seed_; }
  const ModelConfig& model_config() const { return model_; }

  std::size_t size() const { return values_.size(); }
  const std::string& name(std::size_t i) const { return names_[i]; }
  ParamGroup group(std::size_t i) const { return groups_[i]; }
  const Matrix& value(std::size_t i) const { return values_[i]; }
  Matrix& value(std::size_t i) { return values_[i]; }
  std::size_t index_of(const std::string& name) const;  // throws LookupError
  std::size_t num_scalars() const;

  const std::vector<Mlp>& mlps() const { return mlps_; }
  const Target& target(const WeightRef& ref) const;  // throws LookupError
  bool has_target(const WeightRef& ref) const { return target_index_.count(ref) != 0; }

  double alpha(const WeightRef& ref) const;
  void set_alpha(const WeightRef& ref, double alpha);  // alpha > 0, or 0 exactly

  bool bit_equal(const HypernetParams& other) const;

  TensorArchive to_archive() const;
  static HypernetParams from_archive(const TensorArchive& archive);

  friend HypernetParams init_hypernet(const ModelConfig&, const TargetSpec&,
                                      const HypernetConfig&, std::uint64_t);

 private:
  std::size_t add(std::string name, Matrix value, ParamGroup group);

  HypernetConfig config_;
  TargetSpec targets_;
  std::uint64_t seed_ = 0;
  ModelConfig model_;
  std::vector<std::string> names_;
  std::vector<Matrix> values_;
  std::vector<ParamGroup> groups_;
  std::map<std::string, std::size_t> index_;
  std::vector<Mlp> mlps_;
  std::vector<Target> target_list_;
  std::map<WeightRef, std::size_t> target_index_;
};

// Throws LookupError when a target is not in the model, ConfigError for a
// bad config.
HypernetParams init_hypernet(const ModelConfig& model, const TargetSpec& targets,
                             const HypernetConfig& config, std::uint64_t seed);

// Gradient buffers with one zero matrix per parameter.
std::vector<Matrix> zeros_like(const HypernetParams& phi);

struct TransformCache {
  Matrix x;                   // B x (d + m)
  std::vector<Matrix> pre;    // per hidden layer, B x H
  std::vector<Matrix> act;    // relu(pre)
  Matrix film;                // last hidden after FiLM
  Matrix out;                 // W_out h' + b_out
};

// Rows of U (B x d) and D (B x m) are the pairs. Throws ArgumentError on a
// dimension mismatch.
std::pair<Matrix, Matrix> transform(const HypernetParams& phi, const WeightRef& ref,
                                    const Matrix& U, const Matrix& D,
                                    TransformCache* cache = nullptr);
std::pair<Vector, Vector> transform(const HypernetParams& phi, const WeightRef& ref,
                                    const Vector& u, const Vector& delta);

// Accumulates d(loss)/d(phi) given d(loss)/dU~ and d(loss)/dD~.
void transform_backward(const HypernetParams& phi, const WeightRef& ref,
                        const TransformCache& cache, const Matrix& dU, const Matrix& dD,
                        std::vector<Matrix>* grads);

// Everything needed to push a gradient on the edited matrices back into phi.
struct EditTrace {
  struct Item {
    TransformCache cache;
    Matrix U, D;  // transformed pairs
  };
  std::map<WeightRef, Item> items;
};

// W~ = W - alpha * D~^T U~ for each target. `taps` must cover exactly the
// hypernet's targets.
WeightCatalog apply_edit(const WeightCatalog& weights, const HypernetParams& phi,
                         const RankOneGrads& taps, EditTrace* trace = nullptr);

// Given G = dL/dW~ for every target, accumulates dL/dphi (including rho).
void apply_edit_backward(const HypernetParams& phi, const EditTrace& trace,
                         const std::map<WeightRef, Matrix>& weight_grads,
                         std::vector<Matrix>* grads);

enum class InnerMode : std::uint8_t { ClmAllTokens, SftAtomic };

std::string to_string(InnerMode m);
InnerMode inner_mode_from_string(const std::string& s);  // throws ConfigError

struct EditRequest {
  InnerMode mode = InnerMode::ClmAllTokens;
  std::string fact_text;
  std::vector<std::pair<std::string, std::string>> atomic_facts;

  void validate() const;  // throws ArgumentError
  std::vector<TokenSeq> inner_batch(const Tokenizer& tok) const;
};

// capture -> transform -> apply_edit on an already tokenized inner batch.
WeightCatalog edit(const WeightCatalog& weights, const HypernetParams& phi,
                   std::span<const TokenSeq> inner, EditTrace* trace = nullptr);
WeightCatalog edit(const WeightCatalog& weights, const HypernetParams& phi,
                   const EditRequest& req, const Tokenizer& tok);

void save_hypernet(const std::filesystem::path& dir, const HypernetParams& phi);
HypernetParams load_hypernet(const std::filesystem::path& dir);

}  // namespace propedit
