#include "segan/optim.hpp"

#include <cmath>
#include <string>

#include "segan/error.hpp"

namespace segan {
namespace {

void check_shapes(OptimizerState& state, const std::vector<Tensor<float>*>& params,
                  const std::vector<const Tensor<float>*>& grads) {
  if (params.size() != grads.size())
    throw ShapeError("optimizer: " + std::to_string(params.size()) + " parameters but " +
                     std::to_string(grads.size()) + " gradients");
  for (std::size_t i = 0; i < params.size(); ++i)
    if (params[i]->shape() != grads[i]->shape())
      throw ShapeError("optimizer: gradient " + std::to_string(i) + " has shape " +
                       shape_str(grads[i]->shape()) + ", parameter " +
                       shape_str(params[i]->shape()));
  if (state.m.empty()) {
    for (const auto* p : params) state.m.emplace_back(p->shape());
    if (state.kind == OptimizerKind::kAdam)
      for (const auto* p : params) state.v.emplace_back(p->shape());
  }
  if (state.m.size() != params.size())
    throw ShapeError("optimizer: parameter list changed between steps");
  for (std::size_t i = 0; i < params.size(); ++i)
    if (state.m[i].shape() != params[i]->shape())
      throw ShapeError("optimizer: accumulator shape mismatch at parameter " + std::to_string(i));
}

}  // namespace

OptimizerState OptimizerState::sgd(double lr0, double weight_decay, double momentum) {
  OptimizerState s;
  s.kind = OptimizerKind::kSgd;
  s.lr0 = lr0;
  s.weight_decay = weight_decay;
  s.momentum = momentum;
  return s;
}

OptimizerState OptimizerState::adam(double lr0, double weight_decay, double beta1, double beta2,
                                    double epsilon) {
  if (!(beta1 >= 0.0 && beta1 < 1.0 && beta2 >= 0.0 && beta2 < 1.0))
    throw ConfigError("adam betas must lie in [0, 1)");
  OptimizerState s;
  s.kind = OptimizerKind::kAdam;
  s.lr0 = lr0;
  s.weight_decay = weight_decay;
  s.beta1 = beta1;
  s.beta2 = beta2;
  s.epsilon = epsilon;
  return s;
}

void sgd_step(OptimizerState& state, std::vector<Tensor<float>*> params,
              const std::vector<const Tensor<float>*>& grads, double lr) {
  check_shapes(state, params, grads);
  const auto wd = static_cast<float>(state.weight_decay);
  const auto mu = static_cast<float>(state.momentum);
  const auto rate = static_cast<float>(lr);
  for (std::size_t i = 0; i < params.size(); ++i) {
    auto theta = params[i]->data();
    auto g = grads[i]->data();
    auto buf = state.m[i].data();
    for (std::size_t j = 0; j < theta.size(); ++j) {
      float d = g[j] + wd * theta[j];
      if (mu != 0.0f) {
        buf[j] = mu * buf[j] + d;
        d = buf[j];
      }
      theta[j] -= rate * d;
    }
  }
  ++state.step;
}

void adam_step(OptimizerState& state, std::vector<Tensor<float>*> params,
               const std::vector<const Tensor<float>*>& grads, double lr) {
  check_shapes(state, params, grads);
  ++state.step;
  const double b1 = state.beta1, b2 = state.beta2;
  const double c1 = 1.0 - std::pow(b1, static_cast<double>(state.step));
  const double c2 = 1.0 - std::pow(b2, static_cast<double>(state.step));
  for (std::size_t i = 0; i < params.size(); ++i) {
    auto theta = params[i]->data();
    auto g = grads[i]->data();
    auto m = state.m[i].data();
    auto v = state.v[i].data();
    for (std::size_t j = 0; j < theta.size(); ++j) {
      const double d = static_cast<double>(g[j]) + state.weight_decay * theta[j];
      m[j] = static_cast<float>(b1 * m[j] + (1.0 - b1) * d);
      v[j] = static_cast<float>(b2 * v[j] + (1.0 - b2) * d * d);
      const double mhat = m[j] / c1;
      const double vhat = v[j] / c2;
      theta[j] = static_cast<float>(theta[j] - lr * mhat / (std::sqrt(vhat) + state.epsilon));
    }
  }
}

void optimizer_step(OptimizerState& state, std::vector<Tensor<float>*> params,
                    const std::vector<const Tensor<float>*>& grads, double lr) {
  if (state.kind == OptimizerKind::kSgd) sgd_step(state, std::move(params), grads, lr);
  else adam_step(state, std::move(params), grads, lr);
}

double poly_lr(const PolySchedule& sched, long iter) {
  if (sched.maxiter < 1) throw ConfigError("poly schedule needs maxiter >= 1");
  if (!(sched.power > 0.0)) throw ConfigError("poly schedule needs power > 0");
  if (iter < 0 || iter > sched.maxiter)
    throw ConfigError("poly schedule iteration " + std::to_string(iter) + " outside [0, " +
                      std::to_string(sched.maxiter) + "]");
  const double frac = 1.0 - static_cast<double>(iter) / static_cast<double>(sched.maxiter);
  return sched.lr0 * std::pow(frac, sched.power);
}

}  // namespace segan
