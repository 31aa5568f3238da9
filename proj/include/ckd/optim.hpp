#pragma once

#include <vector>

#include "ckd/nn.hpp"

namespace ckd {

/// SGD with classical momentum; weight decay is folded into the gradient
/// before the momentum update.
class Sgd {
 public:
  Sgd(double lr, double momentum, double weight_decay)
      : lr_(lr), momentum_(momentum), weight_decay_(weight_decay) {}

  void set_lr(double lr) { lr_ = lr; }
  double lr() const { return lr_; }

  void step(const std::vector<Param*>& params);

 private:
  double lr_, momentum_, weight_decay_;
  std::vector<std::vector<float>> velocity_;
};

/// Adam with bias correction, default (0.9, 0.999, 1e-8).
class Adam {
 public:
  explicit Adam(double lr, double beta1 = 0.9, double beta2 = 0.999, double eps = 1e-8)
      : lr_(lr), beta1_(beta1), beta2_(beta2), eps_(eps) {}

  void set_lr(double lr) { lr_ = lr; }

  void step(const std::vector<Param*>& params);

 private:
  double lr_, beta1_, beta2_, eps_;
  long t_ = 0;
  std::vector<std::vector<float>> m_, v_;
};

void zero_grads(const std::vector<Param*>& params);

}  // namespace ckd
