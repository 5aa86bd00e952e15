#include "prunecam/optim.hpp"

#include <cmath>

namespace prunecam::optim {

Adam::Adam(std::vector<ParamRef> params, float lr, float weight_decay,
           float beta1, float beta2, float eps)
    : params_(std::move(params)),
      lr_(lr),
      wd_(weight_decay),
      beta1_(beta1),
      beta2_(beta2),
      eps_(eps) {
  m_.resize(params_.size());
  v_.resize(params_.size());
  for (size_t i = 0; i < params_.size(); ++i) {
    m_[i].assign(params_[i].tensor.numel(), 0.0f);
    v_[i].assign(params_[i].tensor.numel(), 0.0f);
  }
}

void Adam::zero_grad() {
  for (auto& p : params_) p.tensor.zero_grad();
}

void Adam::step() {
  ++t_;
  const double bc1 = 1.0 - std::pow(beta1_, static_cast<double>(t_));
  const double bc2 = 1.0 - std::pow(beta2_, static_cast<double>(t_));
  for (size_t i = 0; i < params_.size(); ++i) {
    auto& p = params_[i];
    if (!p.tensor.has_grad()) continue;
    auto& w = p.tensor.data();
    const auto& g = p.tensor.grad();
    auto& m = m_[i];
    auto& v = v_[i];
    const float wd = p.weight_decay ? wd_ : 0.0f;
    for (size_t j = 0; j < w.size(); ++j) {
      const double gj = static_cast<double>(g[j]) + wd * w[j];
      m[j] = static_cast<float>(beta1_ * m[j] + (1.0 - beta1_) * gj);
      v[j] = static_cast<float>(beta2_ * v[j] + (1.0 - beta2_) * gj * gj);
      const double mhat = m[j] / bc1;
      const double vhat = v[j] / bc2;
      w[j] -= static_cast<float>(lr_ * mhat / (std::sqrt(vhat) + eps_));
    }
  }
}

}  // namespace prunecam::optim
