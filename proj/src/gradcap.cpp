#include "propedit/gradcap.hpp"

#include <algorithm>
#include <set>

#include "propedit/errors.hpp"

namespace propedit {

void TargetSpec::validate(const WeightCatalog& weights) const {
  if (refs.empty()) throw ArgumentError("target spec is empty");
  std::set<WeightRef> seen;
  for (const auto& r : refs) {
    weights.index_of(r);
    if (!seen.insert(r).second) throw ArgumentError("duplicate target: " + r.name());
  }
}

TargetSpec TargetSpec::layer_range(int first, int last) {
  TargetSpec t;
  for (int l = first; l <= last; ++l) {
    t.refs.push_back({l, WeightKind::MlpUp});
    t.refs.push_back({l, WeightKind::MlpDown});
  }
  return t;
}

std::vector<std::string> TargetSpec::names() const {
  std::vector<std::string> out;
  for (const auto& r : refs) out.push_back(r.name());
  return out;
}

TargetSpec TargetSpec::from_names(const std::vector<std::string>& names) {
  TargetSpec t;
  for (const auto& n : names) t.refs.push_back(WeightRef::parse(n));
  return t;
}

Capture capture(const WeightCatalog& weights, std::span<const TokenSeq> batch,
                const TargetSpec& targets) {
  targets.validate(weights);
  std::size_t n = 0;
  for (const auto& s : batch) n += s.num_targets();
  if (n == 0) throw ArgumentError("capture: no loss-contributing positions");

  BackwardSpec spec;
  spec.all_params = false;
  spec.taps = targets.refs;

  std::vector<std::vector<TapRows>> per_seq;
  Capture out;
  for (const auto& s : batch) {
    std::size_t rows = s.last_target();  // positions 0 .. last_target-1
    if (rows == 0) continue;
    auto tr = forward(weights, s.tokens);
    Matrix dlogits = Matrix::Zero(tr.logits.rows(), tr.logits.cols());
    out.loss += add_nll(tr.logits, s, 1.0 / static_cast<double>(n), &dlogits);
    std::map<WeightRef, TapRows> taps;
    backward(weights, tr, dlogits, spec, nullptr, &taps);
    std::vector<TapRows> trimmed;
    for (const auto& r : targets.refs) {
      const auto& t = taps.at(r);
      auto k = static_cast<Eigen::Index>(rows);
      trimmed.push_back({t.U.topRows(k), t.D.topRows(k)});
    }
    per_seq.push_back(std::move(trimmed));
  }

  for (std::size_t i = 0; i < targets.refs.size(); ++i) {
    Eigen::Index total = 0;
    for (const auto& s : per_seq) total += s[i].U.rows();
    RankOneGrad g;
    g.ref = targets.refs[i];
    g.U.resize(total, per_seq.front()[i].U.cols());
    g.D.resize(total, per_seq.front()[i].D.cols());
    Eigen::Index at = 0;
    for (const auto& s : per_seq) {
      g.U.middleRows(at, s[i].U.rows()) = s[i].U;
      g.D.middleRows(at, s[i].D.rows()) = s[i].D;
      at += s[i].U.rows();
    }
    out.grads.emplace(g.ref, std::move(g));
  }
  return out;
}

Matrix assemble(const RankOneGrad& g) {
  if (g.U.rows() != g.D.rows()) throw ArgumentError("assemble: U and D pair counts differ");
  return g.D.transpose() * g.U;
}

double verify_rank1(const WeightCatalog& weights, std::span<const TokenSeq> batch,
                    const TargetSpec& targets) {
  auto cap = capture(weights, batch, targets);
  auto full = clm_loss_and_grad(weights, batch);
  double worst = 0.0;
  for (const auto& r : targets.refs) {
    const Matrix& grad = full.grads.g[weights.index_of(r)];
    double err = (assemble(cap.grads.at(r)) - grad).norm() / (grad.norm() + 1e-12);
    worst = std::max(worst, err);
  }
  return worst;
}

TensorArchive to_archive(const RankOneGrads& grads) {
  TensorArchive a;
  nlohmann::json refs = nlohmann::json::array();
  for (const auto& [ref, g] : grads) {
    a.add(ref.name() + ".U", g.U);
    a.add(ref.name() + ".D", g.D);
    refs.push_back({{"ref", ref.name()}, {"pairs", g.pairs()}});
  }
  a.meta["rank_one_grads"] = refs;
  return a;
}

}  // namespace propedit
