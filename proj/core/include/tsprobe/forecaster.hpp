#pragma once

#include <cstdint>
#include <functional>
#include <optional>
#include <random>
#include <string>
#include <vector>

#include <json.hpp>

#include "tsprobe/autograd.hpp"
#include "tsprobe/optim.hpp"
#include "tsprobe/tensor.hpp"

namespace tsprobe {

struct ForecasterConfig {
  std::size_t d_model = 16;
  std::size_t d_ff = 32;
  std::size_t patch_len = 16;
  std::size_t stride = 8;
  std::size_t lookback = 336;
  std::size_t horizon = 96;
  std::size_t n_heads = 2;
  std::size_t depth = 1;
  double dropout = 0.2;
  double rope_base = 10000.0;
  double norm_eps = 1e-6;
  double revin_eps = 1e-5;
  bool revin_affine = false;
  /// Only consulted when revin_affine is set.
  std::size_t channels = 0;

  /// d_ff = 2 d_model; 4 heads from d_model 32 upward, else 2.
  static ForecasterConfig for_width(std::size_t d_model, std::size_t horizon);

  std::size_t num_patches() const { return (lookback - patch_len) / stride + 1; }
  std::size_t d_head() const { return d_model / n_heads; }
  void validate() const;

  nlohmann::json to_json() const;
  static ForecasterConfig from_json(const nlohmann::json& j);
  friend bool operator==(const ForecasterConfig&, const ForecasterConfig&) = default;
};

/// Closed-form trainable parameter count.
std::size_t expected_param_count(const ForecasterConfig& config);

template <typename T>
struct ForecasterParams {
  Tensor<T> patch_w;   // [patch_len x d_model]
  Tensor<T> patch_b;   // [d_model]
  Tensor<T> norm1;     // [d_model]
  Tensor<T> wq, wk, wv, wo;  // [d_model x d_model]
  Tensor<T> norm2;     // [d_model]
  Tensor<T> up_w;      // [d_model x d_ff]
  Tensor<T> up_b;      // [d_ff]
  Tensor<T> down_w;    // [d_ff x d_model]
  Tensor<T> down_b;    // [d_model]
  Tensor<T> head_w;    // [num_patches * d_model x horizon]
  Tensor<T> head_b;    // [horizon]
  Tensor<T> revin_w;   // [channels], empty unless affine
  Tensor<T> revin_b;   // [channels], empty unless affine

  /// Uniform(-1/sqrt(fan_in), 1/sqrt(fan_in)) for weights and biases, unit norm gains.
  static ForecasterParams init(const ForecasterConfig& config, std::uint64_t seed);

  /// Trainable tensors in a fixed order.
  std::vector<ParamRef<T>> named();
  std::vector<std::pair<std::string, const Tensor<T>*>> named() const;
  std::size_t count() const;
  bool all_finite() const;
};

enum class HookMode { kRecord, kReplace, kZero };

/// Instrumentation at the post-GELU FFN intermediate, viewed as [tokens x d_ff]
/// with tokens = batch * channels * num_patches.
template <typename T>
struct ActivationHook {
  using SubstituteFn = std::function<Tensor<T>(const Tensor<T>& live)>;

  HookMode mode = HookMode::kRecord;
  /// record: filled with the live activation. replace: the substitute.
  Tensor<T> buffer;
  /// replace: computes the substitute from the live activation when set.
  SubstituteFn substitute_fn;

  static ActivationHook record() { return {HookMode::kRecord, {}, {}}; }
  static ActivationHook replace(Tensor<T> substitute) { return {HookMode::kReplace, std::move(substitute), {}}; }
  static ActivationHook replace_with(SubstituteFn fn) { return {HookMode::kReplace, {}, std::move(fn)}; }
  static ActivationHook zero() { return {HookMode::kZero, {}, {}}; }
};

/// Per-(window, channel) statistics, row index = window * channels + channel.
template <typename T>
struct RevinStats {
  std::vector<T> mean;
  std::vector<T> stdev;
};

/// Normalizes [batch x lookback x channels] per window and channel.
template <typename T>
Tensor<T> revin_normalize(const Tensor<T>& x, T eps, RevinStats<T>& stats);
/// Inverse of revin_normalize on [batch x steps x channels].
template <typename T>
Tensor<T> revin_denormalize(const Tensor<T>& y, const RevinStats<T>& stats);

/// [N x lookback] -> [N x num_patches x patch_len]; patch p covers [p*stride, p*stride + patch_len).
template <typename T>
Tensor<T> patchify(const Tensor<T>& x, std::size_t patch_len, std::size_t stride);
/// Differentiable form of patchify.
template <typename T>
Var<T> unfold_patches(Var<T> x, std::size_t patch_len, std::size_t stride);

/// Per-row affine with trainable per-channel coefficients: row r uses channel r % C.
/// inverse=true applies (x - b) / (w + eps^2).
template <typename T>
Var<T> channel_affine(Var<T> x, Var<T> w, Var<T> b, bool inverse, T eps);

/// Parameters registered on a tape.
template <typename T>
struct BoundParams {
  std::vector<Var<T>> vars;  // same order as ForecasterParams::named()
};

template <typename T>
BoundParams<T> bind_params(Tape<T>& tape, const ForecasterParams<T>& params, bool requires_grad);

/// Full pipeline on a tape, returning [batch*channels x horizon] in data units
/// (row = window * channels + channel). Dropout is active only when rng is given.
template <typename T>
Var<T> forward_flat(Tape<T>& tape, const BoundParams<T>& bound, const ForecasterConfig& config,
                    const Tensor<T>& x, ActivationHook<T>* hook, std::mt19937_64* dropout_rng);

/// Inference forward: [batch x lookback x C] -> [batch x horizon x C], dropout off.
template <typename T>
Tensor<T> forward(const ForecasterParams<T>& params, const ForecasterConfig& config, const Tensor<T>& x,
                  ActivationHook<T>* hook = nullptr);

/// [batch x steps x C] <-> [batch*C x steps].
template <typename T>
Tensor<T> channels_to_rows(const Tensor<T>& x);
template <typename T>
Tensor<T> rows_to_channels(const Tensor<T>& rows, std::size_t channels);

template <typename T>
double mse(const Tensor<T>& pred, const Tensor<T>& target);
template <typename T>
double mae(const Tensor<T>& pred, const Tensor<T>& target);

}  // namespace tsprobe
