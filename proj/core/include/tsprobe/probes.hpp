#pragma once

#include <cstdint>
#include <functional>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include <json.hpp>

#include "tsprobe/data.hpp"
#include "tsprobe/forecaster.hpp"
#include "tsprobe/sae.hpp"

namespace tsprobe {

/// 100 * (probe - base) / base.
double degradation_pct(double base_mse, double probe_mse);

/// Test-set metrics with an optional hook factory (one hook per batch).
template <typename T>
using HookFactory = std::function<ActivationHook<T>()>;

struct HookedEval {
  double mse = 0.0;
  double mae = 0.0;
  std::vector<double> window_mse;
};

template <typename T>
HookedEval evaluate_hooked(const ForecasterParams<T>& params, const ForecasterConfig& config, const SeriesDataset& ds,
                           const HookFactory<T>& make_hook, std::size_t batch_size = 128);

struct SubstitutionResult {
  double base_mse = 0.0;
  double probe_mse = 0.0;
  double degradation_pct = 0.0;
  std::vector<double> window_mse;
};

/// Replaces the post-GELU activation with its SAE reconstruction on every test window.
template <typename T>
SubstitutionResult substitution_eval(const ForecasterParams<T>& params, const ForecasterConfig& config,
                                     const SaeParams<T>& sae, const SeriesDataset& ds, double base_mse);

/// Per-latent max and sum of activations over every test token row.
struct LatentStats {
  std::vector<double> max_activation;
  std::vector<double> total_activation;
  std::size_t rows = 0;
};

template <typename T>
LatentStats latent_test_stats(const ForecasterParams<T>& params, const ForecasterConfig& config,
                              const SaeParams<T>& sae, const SeriesDataset& ds);

struct DeadLatentCensus {
  double rate_pct = 0.0;
  std::size_t dead = 0;
  std::size_t total = 0;
};

/// A latent is alive when its maximum activation exceeds the threshold.
DeadLatentCensus census_from_max(const std::vector<double>& max_activation, double threshold = kActivityThreshold);

template <typename T>
DeadLatentCensus dead_latent_census(const ForecasterParams<T>& params, const ForecasterConfig& config,
                                    const SaeParams<T>& sae, const SeriesDataset& ds,
                                    double threshold = kActivityThreshold);

/// Indices of the k highest scores, ties broken by lower index.
std::vector<std::size_t> top_k_from_scores(const std::vector<double>& scores, std::size_t k);

template <typename T>
std::vector<std::size_t> top_k_latents(const ForecasterParams<T>& params, const ForecasterConfig& config,
                                       const SaeParams<T>& sae, const SeriesDataset& ds, std::size_t k = 10);

struct CausalResult {
  std::vector<std::size_t> latents;
  double factor = 5.0;
  /// MAE between the un-hooked forecast and the forecast with one latent amplified.
  std::vector<double> shift_vs_original;
  /// Same, measured against plain reconstruction substitution.
  std::vector<double> shift_vs_substitution;
  double mean_shift = 0.0;
  double max_shift = 0.0;
  /// All latents amplified together, only when requested.
  std::optional<double> simultaneous_shift;
};

/// Amplifies each latent in turn by `factor` before decoding and substituting.
template <typename T>
CausalResult causal_intervention(const ForecasterParams<T>& params, const ForecasterConfig& config,
                                 const SaeParams<T>& sae, const SeriesDataset& ds,
                                 const std::vector<std::size_t>& latents, double factor = 5.0,
                                 bool simultaneous = false);

struct AblationResult {
  double base_mse = 0.0;
  double ablated_mse = 0.0;
  double degradation_pct = 0.0;
  std::vector<double> window_mse;
};

/// Zeroes the post-GELU activation on every test window; no SAE involved.
template <typename T>
AblationResult zero_ablation(const ForecasterParams<T>& params, const ForecasterConfig& config,
                             const SeriesDataset& ds, double base_mse);

struct SweepCell {
  double scale = 0.0;
  double lambda = 0.0;
  double l0 = 0.0;
  double recon_mse = 0.0;
};

inline const std::vector<double> kSweepScales = {0.5, 4.0};
inline const std::vector<double> kSweepLambdas = {0.1, 0.01, 0.001, 0.0001};

/// One SAE per (scale, lambda) on the shared store and seed.
template <typename T>
std::vector<SweepCell> lambda_sweep(const ActivationStore& store, const SaeConfig& base_config, std::uint64_t seed,
                                    const std::vector<double>& scales = kSweepScales,
                                    const std::vector<double>& lambdas = kSweepLambdas);

struct ScaleEntry {
  std::optional<double> probe_mse;
  std::optional<double> l0;
  std::optional<double> recon_mse;
  std::vector<double> window_mse;

  /// Recomputed from the raw MSEs on every call.
  std::optional<double> degradation_pct(std::optional<double> base_mse) const;
};

/// Everything measured for one (dataset, horizon) cell. Absent components stay
/// empty and are listed by missing().
struct ProbeReport {
  std::string dataset;
  std::size_t horizon = 0;
  std::optional<double> base_mse;
  std::optional<double> base_mae;
  std::vector<double> base_window_mse;
  std::map<double, ScaleEntry> scales;
  std::optional<DeadLatentCensus> dead_latents_4x;
  std::optional<CausalResult> causal;
  std::optional<AblationResult> zero_ablation;
  std::vector<SweepCell> lambda_sweep;

  std::vector<std::string> missing(const std::vector<double>& expected_scales = {0.5, 1.0, 4.0}) const;
  nlohmann::json to_json() const;
  static ProbeReport from_json(const nlohmann::json& j);
};

struct ReportAggregates {
  /// Mean over cells of |deg(0.5x) - deg(4.0x)|.
  std::optional<double> scaling_gap_mean;
  /// Mean over cells of the per-cell mean causal shift.
  std::optional<double> causal_shift_mean;
  std::size_t cells = 0;
  std::size_t complete_cells = 0;
};

ReportAggregates aggregate_reports(const std::vector<ProbeReport>& reports);

}  // namespace tsprobe
