#pragma once

// Rank-1 view of the inner-loss gradient. For a matrix multiply y = W u the
// gradient of a loss summed over token positions is sum_i delta_i u_i^T,
// where u_i is the input at position i and delta_i the gradient at the
// multiply's output. capture() records those pairs for each target matrix.

#include <map>
#include <span>
#include <vector>

#include "propedit/tensor_archive.hpp"
#include "propedit/tinylm.hpp"

namespace propedit {

struct TargetSpec {
  std::vector<WeightRef> refs;

  // Nonempty, no duplicates, every ref resolvable. Throws LookupError for
  // unresolvable refs and ArgumentError otherwise.
  void validate(const WeightCatalog& weights) const;

  // Both MLP matrices of every layer in [first, last].
  static TargetSpec layer_range(int first, int last);
  std::vector<std::string> names() const;
  static TargetSpec from_names(const std::vector<std::string>& names);
};

struct RankOneGrad {
  WeightRef ref;
  Matrix U;  // B x d (inputs)
  Matrix D;  // B x m (output gradients)

  Eigen::Index pairs() const { return U.rows(); }
};

using RankOneGrads = std::map<WeightRef, RankOneGrad>;

struct Capture {
  double loss = 0.0;
  RankOneGrads grads;
};

// Runs the inner loss (mean NLL over every masked target of `batch`) and
// records one (u, delta) pair per contributing position: every position up
// to the last one whose logits are scored. delta already carries the
// 1/targets normalization, so assemble() reproduces the gradient exactly.
Capture capture(const WeightCatalog& weights, std::span<const TokenSeq> batch,
                const TargetSpec& targets);

// sum_i delta_i u_i^T, shape (m, d).
Matrix assemble(const RankOneGrad& g);

// Max over targets of ||assemble - grad||_F / (||grad||_F + 1e-12), where
// grad is the full reverse-mode gradient of the same loss.
double verify_rank1(const WeightCatalog& weights, std::span<const TokenSeq> batch,
                    const TargetSpec& targets);

// Debug dump: tensors "<ref>.U" (B x d) and "<ref>.D" (B x m).
TensorArchive to_archive(const RankOneGrads& grads);

}  // namespace propedit
