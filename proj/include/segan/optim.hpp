#pragma once

#include <cstddef>
#include <vector>

#include "segan/tensor.hpp"

namespace segan {

enum class OptimizerKind { kSgd, kAdam };

struct OptimizerState {
  OptimizerKind kind = OptimizerKind::kSgd;
  double lr0 = 2.5e-5;
  double weight_decay = 0.0;
  double momentum = 0.0;  // sgd only
  double beta1 = 0.9;
  double beta2 = 0.99;
  double epsilon = 1e-8;
  long step = 0;
  // One buffer per parameter: momentum (sgd) or first moment (adam).
  std::vector<Tensor<float>> m;
  std::vector<Tensor<float>> v;  // adam second moment

  static OptimizerState sgd(double lr0, double weight_decay, double momentum = 0.0);
  static OptimizerState adam(double lr0, double weight_decay, double beta1 = 0.9,
                             double beta2 = 0.99, double epsilon = 1e-8);
};

// theta <- theta - lr * (g + wd * theta), through a momentum buffer when configured.
void sgd_step(OptimizerState& state, std::vector<Tensor<float>*> params,
              const std::vector<const Tensor<float>*>& grads, double lr);

// Bias-corrected Adam; weight decay is added to the gradient (L2 style).
void adam_step(OptimizerState& state, std::vector<Tensor<float>*> params,
               const std::vector<const Tensor<float>*>& grads, double lr);

void optimizer_step(OptimizerState& state, std::vector<Tensor<float>*> params,
                    const std::vector<const Tensor<float>*>& grads, double lr);

struct PolySchedule {
  double lr0 = 2.5e-5;
  double power = 0.9;
  long maxiter = 1;
};

// lr0 * (1 - iter/maxiter)^power for 0 <= iter <= maxiter.
double poly_lr(const PolySchedule& sched, long iter);

}  // namespace segan
