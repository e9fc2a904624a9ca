#pragma once

#include <cstdint>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

#include "tsprobe/tensor.hpp"

namespace tsprobe {

/// A named, mutable view of one trainable tensor.
template <typename T>
struct ParamRef {
  std::string name;
  Tensor<T>* value;
};

class NonFiniteError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// AdamW moments and hyperparameters. Moments are kept in double regardless of
/// the parameter precision.
struct OptimizerState {
  std::vector<std::vector<double>> m;
  std::vector<std::vector<double>> v;
  std::int64_t t = 0;
  double lr = 1e-3;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
  double weight_decay = 0.0;

  static OptimizerState for_shapes(const std::vector<Shape>& shapes, double lr, double weight_decay = 0.0);
};

/// One AdamW update with decoupled weight decay. Throws NonFiniteError naming the
/// first parameter whose gradient is not finite; nothing is modified in that case.
template <typename T>
void adamw_step(std::span<const ParamRef<T>> params, std::span<const Tensor<T>> grads, OptimizerState& state);

/// Scales all gradients by max_norm / global_norm when the global L2 norm exceeds
/// max_norm. Returns the norm measured before clipping.
template <typename T>
double clip_grad_norm(std::span<Tensor<T>> grads, double max_norm);

}  // namespace tsprobe
