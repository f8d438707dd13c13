#include "propedit/optim.hpp"

#include <cmath>

#include "propedit/errors.hpp"

namespace propedit {

Adam::Adam(const std::vector<Eigen::MatrixXd*>& params, Options options) : options_(options) {
  m_.reserve(params.size());
  v_.reserve(params.size());
  for (const auto* p : params) {
    m_.push_back(Eigen::MatrixXd::Zero(p->rows(), p->cols()));
    v_.push_back(Eigen::MatrixXd::Zero(p->rows(), p->cols()));
  }
}

void Adam::step(const std::vector<Eigen::MatrixXd*>& params,
                const std::vector<const Eigen::MatrixXd*>& grads, const std::vector<double>& lrs) {
  if (params.size() != m_.size() || grads.size() != m_.size() || lrs.size() != m_.size()) {
    throw ArgumentError("Adam::step: parameter count mismatch");
  }
  ++t_;
  const double bc1 = 1.0 - std::pow(options_.beta1, static_cast<double>(t_));
  const double bc2 = 1.0 - std::pow(options_.beta2, static_cast<double>(t_));
  for (std::size_t i = 0; i < params.size(); ++i) {
    auto& p = *params[i];
    const auto& g = *grads[i];
    m_[i] = options_.beta1 * m_[i] + (1.0 - options_.beta1) * g;
    v_[i] = options_.beta2 * v_[i] + (1.0 - options_.beta2) * g.cwiseProduct(g);
    if (lrs[i] == 0.0) continue;
    if (options_.weight_decay != 0.0) p *= (1.0 - lrs[i] * options_.weight_decay);
    p.array() -= lrs[i] * (m_[i].array() / bc1) / ((v_[i].array() / bc2).sqrt() + options_.eps);
  }
}

double clip_grad_norm(const std::vector<Eigen::MatrixXd*>& grads, double max_norm) {
  double sq = 0.0;
  for (const auto* g : grads) sq += g->squaredNorm();
  double norm = std::sqrt(sq);
  if (max_norm > 0.0 && norm > max_norm) {
    double s = max_norm / (norm + 1e-12);
    for (auto* g : grads) *g *= s;
  }
  return norm;
}

}  // namespace propedit
