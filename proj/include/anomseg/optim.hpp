#pragma once

#include <cmath>
#include <vector>

#include "anomseg/autodiff.hpp"

namespace anomseg::optim {

// Adam with bias correction. step() consumes and clears the accumulated
// gradients of its parameter list.
class Adam {
 public:
  explicit Adam(std::vector<ad::Var> params, double beta1 = 0.9, double beta2 = 0.999,
                double eps = 1e-8)
      : params_(std::move(params)), beta1_(beta1), beta2_(beta2), eps_(eps) {
    for (const auto& p : params_) {
      m_.emplace_back(p->value.shape());
      v_.emplace_back(p->value.shape());
    }
  }

  void step(double lr) {
    ++t_;
    double bc1 = 1.0 - std::pow(beta1_, static_cast<double>(t_));
    double bc2 = 1.0 - std::pow(beta2_, static_cast<double>(t_));
    for (size_t i = 0; i < params_.size(); ++i) {
      ad::Var& p = params_[i];
      if (p->grad.numel() != p->value.numel()) p->ensure_grad();
      Tensor& m = m_[i];
      Tensor& v = v_[i];
      for (long j = 0; j < p->value.numel(); ++j) {
        double g = p->grad[j];
        m[j] = beta1_ * m[j] + (1.0 - beta1_) * g;
        v[j] = beta2_ * v[j] + (1.0 - beta2_) * g * g;
        double mhat = m[j] / bc1;
        double vhat = v[j] / bc2;
        p->value[j] -= lr * mhat / (std::sqrt(vhat) + eps_);
      }
      p->grad.fill(0.0);
    }
  }

  long t() const { return t_; }
  void set_t(long t) { t_ = t; }
  size_t size() const { return params_.size(); }
  Tensor& m(size_t i) { return m_[i]; }
  Tensor& v(size_t i) { return v_[i]; }
  const std::vector<ad::Var>& params() const { return params_; }

 private:
  std::vector<ad::Var> params_;
  std::vector<Tensor> m_, v_;
  double beta1_, beta2_, eps_;
  long t_ = 0;
};

}  // namespace anomseg::optim
