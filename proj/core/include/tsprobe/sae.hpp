#pragma once

#include <cstdint>
#include <filesystem>
#include <functional>
#include <span>
#include <vector>

#include <json.hpp>

#include "tsprobe/autograd.hpp"
#include "tsprobe/data.hpp"
#include "tsprobe/forecaster.hpp"

namespace tsprobe {

inline constexpr std::size_t kHarvestCap = 1'000'000;
inline constexpr double kActivityThreshold = 1e-5;

/// Post-GELU activation rows harvested from a frozen forecaster, stored as float32.
struct ActivationStore {
  std::size_t n = 0;
  std::size_t d_ff = 0;
  std::vector<float> data;  // row-major [n x d_ff]
  nlohmann::json meta = nlohmann::json::object();

  std::span<const float> row(std::size_t i) const { return {data.data() + i * d_ff, d_ff}; }
  template <typename T>
  Tensor<T> rows(std::span<const std::size_t> indices) const;
  template <typename T>
  Tensor<T> slice(std::size_t begin, std::size_t end) const;
};

/// "TSPRACTS" | u32 version | u64 n | u64 d_ff | u64 meta length | meta JSON | n*d_ff float32
void save_store(const std::filesystem::path& path, const ActivationStore& store);
ActivationStore load_store(const std::filesystem::path& path);
nlohmann::json read_store_meta(const std::filesystem::path& path);

/// Runs the frozen model over train windows in chronological order with a record
/// hook and keeps at most `cap` token rows. Past the cap, rows are chosen by
/// seeded reservoir sampling and then restored to harvest order.
template <typename T>
ActivationStore harvest(const ForecasterParams<T>& params, const ForecasterConfig& config, const SeriesDataset& ds,
                        std::size_t cap = kHarvestCap, std::uint64_t seed = 0, std::size_t batch_size = 128);

struct SaeConfig {
  std::size_t d_ff = 32;
  double scale = 1.0;
  double lambda = 0.01;
  double lr = 1e-3;
  std::size_t max_epochs = 50;
  std::size_t patience = 3;
  /// Relative: an epoch improves when loss < best * (1 - threshold).
  double improvement_threshold = 0.001;
  std::size_t batch_size = 1024;
  /// Hard cap on optimizer steps, 0 for none.
  std::size_t max_steps = 0;

  std::size_t d_hidden() const;
  void validate() const;
  nlohmann::json to_json() const;
  static SaeConfig from_json(const nlohmann::json& j);
};

template <typename T>
struct SaeParams {
  Tensor<T> w_enc;  // [d_ff x d_hidden]
  Tensor<T> b_enc;  // [d_hidden]
  Tensor<T> w_dec;  // [d_hidden x d_ff]; row i is latent i's decoder direction
  Tensor<T> b_dec;  // [d_ff]

  static SaeParams init(std::size_t d_ff, std::size_t d_hidden, std::uint64_t seed);
  /// Exact identity map on d_ff dims: W_enc = W_dec = I, zero biases.
  static SaeParams identity(std::size_t d_ff);

  std::size_t d_ff() const { return w_enc.dim(0); }
  std::size_t d_hidden() const { return w_enc.dim(1); }
  std::vector<ParamRef<T>> named();
  std::vector<std::pair<std::string, const Tensor<T>*>> named() const;

  /// Rescales every decoder direction to unit L2 norm.
  void normalize_decoder();
  /// max_i | ||W_dec[i]|| - 1 |.
  double max_decoder_norm_error() const;
};

template <typename T>
struct SaeOutput {
  Tensor<T> f;     // [n x d_hidden]
  Tensor<T> xhat;  // [n x d_ff]
};

/// f = relu(x W_enc + b_enc); xhat = f W_dec + b_dec.
template <typename T>
SaeOutput<T> sae_forward(const SaeParams<T>& sae, const Tensor<T>& x);
/// Decodes given latents.
template <typename T>
Tensor<T> sae_decode(const SaeParams<T>& sae, const Tensor<T>& f);

/// Squared error summed over d_ff plus lambda * L1 over latents, averaged over rows.
template <typename T>
double sae_loss(const Tensor<T>& x, const Tensor<T>& xhat, const Tensor<T>& f, double lambda);

/// Recorded objective for one batch; returns the scalar loss.
template <typename T>
Var<T> sae_objective(Tape<T>& tape, Var<T> w_enc, Var<T> b_enc, Var<T> w_dec, Var<T> b_dec, const Tensor<T>& x,
                     T lambda);

struct SaeTrainLog {
  std::vector<double> epoch_loss;
  std::size_t best_epoch = 0;
  double best_loss = 0.0;
  std::size_t steps = 0;
  double max_decoder_norm_error = 0.0;
};

template <typename T>
struct SaeTrainResult {
  SaeParams<T> params;
  SaeTrainLog log;
};

using SaeStepCallback = std::function<void(std::size_t step, double decoder_norm_error)>;

/// Minibatch Adam on the L1 objective with decoder renormalization after every
/// step; stops after `patience` epochs without relative improvement.
template <typename T>
SaeTrainResult<T> train_sae(const ActivationStore& store, const SaeConfig& config, std::uint64_t seed,
                            const SaeStepCallback& on_step = nullptr);

struct Fidelity {
  double l0 = 0.0;
  double recon_mse = 0.0;
};

/// l0: mean per row of count(f_i > threshold). recon_mse: mean squared error per element.
template <typename T>
Fidelity fidelity_metrics(const SaeParams<T>& sae, const ActivationStore& store,
                          double activity_threshold = kActivityThreshold);

template <typename T>
void save_sae(const std::filesystem::path& path, const SaeParams<T>& sae, const SaeConfig& config,
              const nlohmann::json& extra_meta = {});

template <typename T>
struct LoadedSae {
  SaeParams<T> params;
  SaeConfig config;
  nlohmann::json meta;
};

template <typename T>
LoadedSae<T> load_sae(const std::filesystem::path& path);

}  // namespace tsprobe
