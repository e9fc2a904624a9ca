#pragma once

#include <cstdint>
#include <random>

#include "tsprobe/autograd.hpp"

namespace tsprobe {

// Differentiable primitives. Each records one node on the operands' tape.

/// [m x k] . [k x n] -> [m x n].
template <typename T>
Var<T> matmul(Var<T> a, Var<T> b);

/// x [..., k] . w [k x n] + bias [n]; leading dims are preserved.
template <typename T>
Var<T> linear(Var<T> x, Var<T> w, Var<T> bias);
template <typename T>
Var<T> linear(Var<T> x, Var<T> w);

/// Batched product over the leading dim: [B x m x k] . [B x k x n], or
/// [B x m x k] . [B x n x k]^T when transpose_b is set.
template <typename T>
Var<T> bmm(Var<T> a, Var<T> b, bool transpose_b = false);

template <typename T>
Var<T> add(Var<T> a, Var<T> b);
template <typename T>
Var<T> sub(Var<T> a, Var<T> b);
template <typename T>
Var<T> scale(Var<T> a, T factor);

/// Exact erf form: 0.5 x (1 + erf(x / sqrt 2)).
template <typename T>
Var<T> gelu(Var<T> x);
template <typename T>
Var<T> relu(Var<T> x);

/// gain * x / sqrt(mean(x^2) + eps) over the last dim.
template <typename T>
Var<T> rmsnorm(Var<T> x, Var<T> gain, T eps);

/// Rotary embedding on [..., positions, d_head]; pair (2i, 2i+1) at position p
/// is rotated by p * base^(-2i/d_head).
template <typename T>
Var<T> apply_rope(Var<T> x, T base = T(10000));

/// Max-subtracted softmax over the last dim.
template <typename T>
Var<T> softmax_lastdim(Var<T> x);

/// [N x P x D] -> [N*h x P x D/h].
template <typename T>
Var<T> split_heads(Var<T> x, std::size_t n_heads);
/// Inverse of split_heads.
template <typename T>
Var<T> merge_heads(Var<T> x, std::size_t n_heads);

template <typename T>
Var<T> reshape(Var<T> x, Shape shape);

/// Inverted dropout; identity when p == 0.
template <typename T>
Var<T> dropout(Var<T> x, T p, std::mt19937_64& rng);

/// Row-wise affine with constant coefficients: y[r, :] = x[r, :] * mul[r] + add[r].
template <typename T>
Var<T> affine_rows(Var<T> x, std::vector<T> mul, std::vector<T> add);

/// Constant node carrying `replacement`; gradients do not flow back into x.
template <typename T>
Var<T> substitute(Var<T> x, Tensor<T> replacement);

template <typename T>
Var<T> sum(Var<T> x);
template <typename T>
Var<T> mean(Var<T> x);
/// Sum of squares of all elements.
template <typename T>
Var<T> sum_squares(Var<T> x);
/// Sum of absolute values of all elements.
template <typename T>
Var<T> abs_sum(Var<T> x);
/// Sum of (a - target)^2 with a constant target.
template <typename T>
Var<T> sq_err_sum(Var<T> a, const Tensor<T>& target);
/// mean((pred - target)^2) with a constant target.
template <typename T>
Var<T> mse_loss(Var<T> pred, const Tensor<T>& target);

// Plain kernels shared by ops and inference paths.
namespace kernel {

/// C = op(A) . op(B) (+ C when accumulate). Row-major, dims after transposition.
template <typename T>
void gemm(const T* a, const T* b, T* c, std::size_t m, std::size_t k, std::size_t n,
          bool trans_a, bool trans_b, bool accumulate);

template <typename T>
T gelu(T x);
template <typename T>
T gelu_grad(T x);

}  // namespace kernel

}  // namespace tsprobe
