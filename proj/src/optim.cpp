#include "ckd/optim.hpp"

#include <cmath>

namespace ckd {

void zero_grads(const std::vector<Param*>& params) {
  for (Param* p : params) p->zero_grad();
}

void Sgd::step(const std::vector<Param*>& params) {
  if (velocity_.empty()) {
    velocity_.resize(params.size());
    for (std::size_t i = 0; i < params.size(); ++i) {
      velocity_[i].assign(static_cast<std::size_t>(params[i]->value.size()), 0.0f);
    }
  }
  if (velocity_.size() != params.size()) throw Error("Sgd::step: param set changed mid-training");
  for (std::size_t i = 0; i < params.size(); ++i) {
    auto& w = params[i]->value.vec();
    auto& g = params[i]->grad.vec();
    auto& v = velocity_[i];
    for (std::size_t j = 0; j < w.size(); ++j) {
      const float grad = g[j] + static_cast<float>(weight_decay_) * w[j];
      v[j] = static_cast<float>(momentum_) * v[j] + grad;
      w[j] -= static_cast<float>(lr_) * v[j];
    }
  }
}

void Adam::step(const std::vector<Param*>& params) {
  if (m_.empty()) {
    m_.resize(params.size());
    v_.resize(params.size());
    for (std::size_t i = 0; i < params.size(); ++i) {
      m_[i].assign(static_cast<std::size_t>(params[i]->value.size()), 0.0f);
      v_[i].assign(static_cast<std::size_t>(params[i]->value.size()), 0.0f);
    }
  }
  if (m_.size() != params.size()) throw Error("Adam::step: param set changed mid-training");
  ++t_;
  const double bc1 = 1.0 - std::pow(beta1_, t_);
  const double bc2 = 1.0 - std::pow(beta2_, t_);
  for (std::size_t i = 0; i < params.size(); ++i) {
    auto& w = params[i]->value.vec();
    auto& g = params[i]->grad.vec();
    for (std::size_t j = 0; j < w.size(); ++j) {
      m_[i][j] = static_cast<float>(beta1_ * m_[i][j] + (1.0 - beta1_) * g[j]);
      v_[i][j] = static_cast<float>(beta2_ * v_[i][j] + (1.0 - beta2_) * g[j] * g[j]);
      const double mhat = m_[i][j] / bc1;
      const double vhat = v_[i][j] / bc2;
      w[j] -= static_cast<float>(lr_ * mhat / (std::sqrt(vhat) + eps_));
    }
  }
}

}  // namespace ckd
