#pragma once

#include <cmath>
#include <vector>

#include "grappa/nn.hpp"

namespace grappa {

// Adam with L2-style weight decay (decay added to the gradient), the
// convention the adaptor training defaults assume.
template <typename S>
class Adam {
 public:
  Adam(std::vector<NamedParam<S>> params, double lr, double weight_decay,
       double beta1 = 0.9, double beta2 = 0.999, double eps = 1e-8)
      : params_(std::move(params)), lr_(lr), wd_(weight_decay), b1_(beta1), b2_(beta2), eps_(eps) {
    m_.reserve(params_.size());
    v_.reserve(params_.size());
    for (auto& np : params_) {
      m_.push_back(Mat<S>::Zero(np.p->v.rows(), np.p->v.cols()));
      v_.push_back(Mat<S>::Zero(np.p->v.rows(), np.p->v.cols()));
    }
  }

  const std::vector<NamedParam<S>>& params() const { return params_; }

  void zero_grad() {
    for (auto& np : params_) np.p->zero_grad();
  }

  void step() {
    ++t_;
    const S bc1 = static_cast<S>(1.0 - std::pow(b1_, t_));
    const S bc2 = static_cast<S>(1.0 - std::pow(b2_, t_));
    for (size_t i = 0; i < params_.size(); ++i) {
      Param<S>& p = *params_[i].p;
      Mat<S> g = p.g;
      if (wd_ != 0.0) g += static_cast<S>(wd_) * p.v;
      m_[i] = static_cast<S>(b1_) * m_[i] + static_cast<S>(1.0 - b1_) * g;
      v_[i] = static_cast<S>(b2_) * v_[i] + (static_cast<S>(1.0 - b2_) * g.array().square()).matrix();
      p.v.array() -= static_cast<S>(lr_) * (m_[i].array() / bc1) /
                     ((v_[i].array() / bc2).sqrt() + static_cast<S>(eps_));
    }
  }

 private:
  std::vector<NamedParam<S>> params_;
  std::vector<Mat<S>> m_, v_;
  double lr_, wd_, b1_, b2_, eps_;
  long t_ = 0;
};

// Layer-wise adaptive rate scaling with momentum. 1-d parameters (biases,
// gains) are excluded from both weight decay and the trust-ratio scaling,
// following the reference treatment in the redundancy-reduction literature.
template <typename S>
class Lars {
 public:
  Lars(std::vector<NamedParam<S>> params, double lr, double weight_decay,
       double momentum = 0.9, double eta = 0.001)
      : params_(std::move(params)), lr_(lr), wd_(weight_decay), momentum_(momentum), eta_(eta) {
    mu_.reserve(params_.size());
    for (auto& np : params_)
      mu_.push_back(Mat<S>::Zero(np.p->v.rows(), np.p->v.cols()));
  }

  const std::vector<NamedParam<S>>& params() const { return params_; }

  void zero_grad() {
    for (auto& np : params_) np.p->zero_grad();
  }

  void step() {
    for (size_t i = 0; i < params_.size(); ++i) {
      Param<S>& p = *params_[i].p;
      Mat<S> dp = p.g;
      if (!p.is_vector()) {
        if (wd_ != 0.0) dp += static_cast<S>(wd_) * p.v;
        const double wn = static_cast<double>(p.v.norm());
        const double gn = static_cast<double>(dp.norm());
        const double q = (wn > 0.0 && gn > 0.0) ? eta_ * wn / gn : 1.0;
        dp *= static_cast<S>(q);
      }
      mu_[i] = static_cast<S>(momentum_) * mu_[i] + dp;
      p.v -= static_cast<S>(lr_) * mu_[i];
    }
  }

 private:
  std::vector<NamedParam<S>> params_;
  std::vector<Mat<S>> mu_;
  double lr_, wd_, momentum_, eta_;
};

}  // namespace grappa
