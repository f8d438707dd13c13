#pragma once

#include <cstdint>
#include <vector>

#include <Eigen/Dense>

namespace propedit {

// Adam with optional decoupled weight decay (AdamW). One moment pair per
// tensor; learning rates are supplied per tensor at every step so that
// parameter groups can use different rates.
struct AdamOptions {
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
  double weight_decay = 0.0;
};

class Adam {
 public:
  using Options = AdamOptions;

  Adam() = default;
  Adam(const std::vector<Eigen::MatrixXd*>& params, Options options);
  explicit Adam(const std::vector<Eigen::MatrixXd*>& params) : Adam(params, Options{}) {}

  void step(const std::vector<Eigen::MatrixXd*>& params,
            const std::vector<const Eigen::MatrixXd*>& grads, const std::vector<double>& lrs);

  std::int64_t steps_taken() const { return t_; }
  std::vector<Eigen::MatrixXd>& first_moments() { return m_; }
  std::vector<Eigen::MatrixXd>& second_moments() { return v_; }
  const std::vector<Eigen::MatrixXd>& first_moments() const { return m_; }
  const std::vector<Eigen::MatrixXd>& second_moments() const { return v_; }
  void set_steps_taken(std::int64_t t) { t_ = t; }

 private:
  Options options_;
  std::vector<Eigen::MatrixXd> m_, v_;
  std::int64_t t_ = 0;
};

// Scales `grads` in place so that their joint L2 norm is at most
// `max_norm` (no-op when max_norm <= 0). Returns the norm before clipping.
double clip_grad_norm(const std::vector<Eigen::MatrixXd*>& grads, double max_norm);

}  // namespace propedit
