#include "tsprobe/optim.hpp"

#include <cmath>

namespace tsprobe {

OptimizerState OptimizerState::for_shapes(const std::vector<Shape>& shapes, double lr, double weight_decay) {
  if (!(lr > 0.0)) throw ConfigError("learning rate must be positive");
  if (weight_decay < 0.0) throw ConfigError("weight decay must be non-negative");
  OptimizerState s;
  s.lr = lr;
  s.weight_decay = weight_decay;
  for (const auto& shape : shapes) {
    s.m.emplace_back(numel(shape), 0.0);
    s.v.emplace_back(numel(shape), 0.0);
  }
  return s;
}

template <typename T>
void adamw_step(std::span<const ParamRef<T>> params, std::span<const Tensor<T>> grads, OptimizerState& state) {
  if (params.size() != grads.size() || params.size() != state.m.size()) {
    throw DimensionError("adamw_step: " + std::to_string(params.size()) + " params, " +
                         std::to_string(grads.size()) + " grads, " + std::to_string(state.m.size()) +
                         " moment slots");
  }
  for (std::size_t p = 0; p < params.size(); ++p) {
    if (params[p].value->size() != grads[p].size() || grads[p].size() != state.m[p].size()) {
      throw DimensionError("adamw_step: size mismatch for parameter '" + params[p].name + "'");
    }
    for (T g : grads[p].data()) {
      if (!std::isfinite(static_cast<double>(g))) {
        throw NonFiniteError("non-finite gradient in parameter '" + params[p].name + "'");
      }
    }
  }

  state.t += 1;
  const double bc1 = 1.0 - std::pow(state.beta1, static_cast<double>(state.t));
  const double bc2 = 1.0 - std::pow(state.beta2, static_cast<double>(state.t));
  const double decay = 1.0 - state.lr * state.weight_decay;
  for (std::size_t p = 0; p < params.size(); ++p) {
    auto theta = params[p].value->data();
    const auto g = grads[p].data();
    auto& m = state.m[p];
    auto& v = state.v[p];
    for (std::size_t i = 0; i < theta.size(); ++i) {
      const double gi = static_cast<double>(g[i]);
      m[i] = state.beta1 * m[i] + (1.0 - state.beta1) * gi;
      v[i] = state.beta2 * v[i] + (1.0 - state.beta2) * gi * gi;
      const double m_hat = m[i] / bc1;
      const double v_hat = v[i] / bc2;
      double value = static_cast<double>(theta[i]);
      if (state.weight_decay != 0.0) value *= decay;
      value -= state.lr * m_hat / (std::sqrt(v_hat) + state.eps);
      theta[i] = static_cast<T>(value);
    }
  }
}

template <typename T>
double clip_grad_norm(std::span<Tensor<T>> grads, double max_norm) {
  if (!(max_norm > 0.0)) throw ConfigError("clip_grad_norm: max_norm must be positive");
  double ss = 0.0;
  for (const auto& g : grads) {
    for (T v : g.data()) ss += static_cast<double>(v) * static_cast<double>(v);
  }
  const double norm = std::sqrt(ss);
  if (norm > max_norm) {
    const double factor = max_norm / norm;
    for (auto& g : grads) {
      for (T& v : g.data()) v = static_cast<T>(static_cast<double>(v) * factor);
    }
  }
  return norm;
}

template void adamw_step<float>(std::span<const ParamRef<float>>, std::span<const Tensor<float>>, OptimizerState&);
template void adamw_step<double>(std::span<const ParamRef<double>>, std::span<const Tensor<double>>, OptimizerState&);
template double clip_grad_norm<float>(std::span<Tensor<float>>, double);
template double clip_grad_norm<double>(std::span<Tensor<double>>, double);

}  // namespace tsprobe
