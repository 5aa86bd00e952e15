#pragma once

#include <vector>

#include "prunecam/tensor.hpp"

namespace prunecam::optim {

struct ParamRef {
  Tensor tensor;
  bool weight_decay = false;
};

// Adam with the L2 term added to the gradient before the moment updates.
class Adam {
 public:
  Adam(std::vector<ParamRef> params, float lr, float weight_decay = 0.0f,
       float beta1 = 0.9f, float beta2 = 0.999f, float eps = 1e-8f);

  void zero_grad();
  void step();

  float lr() const { return lr_; }
  void set_lr(float lr) { lr_ = lr; }

 private:
  std::vector<ParamRef> params_;
  std::vector<std::vector<float>> m_, v_;
  float lr_, wd_, beta1_, beta2_, eps_;
  int64_t t_ = 0;
};

}  // namespace prunecam::optim
