#include "tsprobe/probes.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <numeric>

#include "tsprobe/ops.hpp"

namespace tsprobe {

double degradation_pct(double base_mse, double probe_mse) { return 100.0 * (probe_mse - base_mse) / base_mse; }

namespace {

std::string scale_key(double scale) {
  char buf[32];
  std::snprintf(buf, sizeof(buf), "%g", scale);
  return buf;
}

template <typename T>
void require_matching_sae(const ForecasterConfig& config, const SaeParams<T>& sae) {
  if (sae.d_ff() != config.d_ff) {
    throw ConfigError("SAE d_ff " + std::to_string(sae.d_ff()) + " does not match forecaster d_ff " +
                      std::to_string(config.d_ff));
  }
}

template <typename T>
WindowStream<T> test_stream(const SeriesDataset& ds, const ForecasterConfig& config, std::size_t batch_size = 128) {
  return WindowStream<T>(ds, Partition::kTest, config.lookback, config.horizon, batch_size);
}

/// Sum of |a - b| over all elements.
template <typename T>
double abs_diff_sum(const Tensor<T>& a, const Tensor<T>& b) {
  double total = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) total += std::abs(static_cast<double>(a[i]) - static_cast<double>(b[i]));
  return total;
}

}  // namespace

template <typename T>
HookedEval evaluate_hooked(const ForecasterParams<T>& params, const ForecasterConfig& config, const SeriesDataset& ds,
                           const HookFactory<T>& make_hook, std::size_t batch_size) {
  auto stream = test_stream<T>(ds, config, batch_size);
  HookedEval r;
  double se = 0.0, ae = 0.0;
  std::size_t count = 0;
  WindowBatch<T> batch;
  while (stream.next(batch)) {
    Tensor<T> pred;
    if (make_hook) {
      ActivationHook<T> hook = make_hook();
      pred = forward(params, config, batch.inputs, &hook);
    } else {
      pred = forward(params, config, batch.inputs);
    }
    const std::size_t per_window = pred.size() / batch.starts.size();
    for (std::size_t w = 0; w < batch.starts.size(); ++w) {
      double wse = 0.0;
      for (std::size_t i = w * per_window; i < (w + 1) * per_window; ++i) {
        const double d = static_cast<double>(pred[i]) - static_cast<double>(batch.targets[i]);
        wse += d * d;
        ae += std::abs(d);
      }
      se += wse;
      r.window_mse.push_back(wse / static_cast<double>(per_window));
    }
    count += pred.size();
  }
  if (count > 0) {
    r.mse = se / static_cast<double>(count);
    r.mae = ae / static_cast<double>(count);
  }
  return r;
}

template <typename T>
SubstitutionResult substitution_eval(const ForecasterParams<T>& params, const ForecasterConfig& config,
                                     const SaeParams<T>& sae, const SeriesDataset& ds, double base_mse) {
  require_matching_sae(config, sae);
  const HookedEval e = evaluate_hooked<T>(params, config, ds, [&sae] {
    return ActivationHook<T>::replace_with([&sae](const Tensor<T>& live) { return sae_forward(sae, live).xhat; });
  });
  SubstitutionResult r;
  r.base_mse = base_mse;
  r.probe_mse = e.mse;
  r.degradation_pct = degradation_pct(base_mse, e.mse);
  r.window_mse = e.window_mse;
  return r;
}

template <typename T>
LatentStats latent_test_stats(const ForecasterParams<T>& params, const ForecasterConfig& config,
                              const SaeParams<T>& sae, const SeriesDataset& ds) {
  require_matching_sae(config, sae);
  const std::size_t h = sae.d_hidden();
  LatentStats s;
  s.max_activation.assign(h, 0.0);
  s.total_activation.assign(h, 0.0);
  auto stream = test_stream<T>(ds, config);
  WindowBatch<T> batch;
  while (stream.next(batch)) {
    auto hook = ActivationHook<T>::record();
    forward(params, config, batch.inputs, &hook);
    const Tensor<T> f = sae_forward(sae, hook.buffer).f;
    const std::size_t rows = f.dim(0);
    for (std::size_t r = 0; r < rows; ++r) {
      for (std::size_t j = 0; j < h; ++j) {
        const double v = static_cast<double>(f[r * h + j]);
        s.total_activation[j] += v;
        s.max_activation[j] = std::max(s.max_activation[j], v);
      }
    }
    s.rows += rows;
  }
  return s;
}

DeadLatentCensus census_from_max(const std::vector<double>& max_activation, double threshold) {
  DeadLatentCensus c;
  c.total = max_activation.size();
  c.dead = static_cast<std::size_t>(
      std::count_if(max_activation.begin(), max_activation.end(), [threshold](double m) { return !(m > threshold); }));
  c.rate_pct = c.total == 0 ? 0.0 : 100.0 * static_cast<double>(c.dead) / static_cast<double>(c.total);
  return c;
}

template <typename T>
DeadLatentCensus dead_latent_census(const ForecasterParams<T>& params, const ForecasterConfig& config,
                                    const SaeParams<T>& sae, const SeriesDataset& ds, double threshold) {
  return census_from_max(latent_test_stats(params, config, sae, ds).max_activation, threshold);
}

std::vector<std::size_t> top_k_from_scores(const std::vector<double>& scores, std::size_t k) {
  if (k > scores.size()) {
    throw ConfigError("top-k: k=" + std::to_string(k) + " exceeds " + std::to_string(scores.size()) + " latents");
  }
  std::vector<std::size_t> idx(scores.size());
  std::iota(idx.begin(), idx.end(), std::size_t{0});
  std::stable_sort(idx.begin(), idx.end(), [&](std::size_t a, std::size_t b) { return scores[a] > scores[b]; });
  idx.resize(k);
  return idx;
}

template <typename T>
std::vector<std::size_t> top_k_latents(const ForecasterParams<T>& params, const ForecasterConfig& config,
                                       const SaeParams<T>& sae, const SeriesDataset& ds, std::size_t k) {
  if (k > sae.d_hidden()) {
    throw ConfigError("top-k: k=" + std::to_string(k) + " exceeds " + std::to_string(sae.d_hidden()) + " latents");
  }
  return top_k_from_scores(latent_test_stats(params, config, sae, ds).total_activation, k);
}

template <typename T>
CausalResult causal_intervention(const ForecasterParams<T>& params, const ForecasterConfig& config,
                                 const SaeParams<T>& sae, const SeriesDataset& ds,
                                 const std::vector<std::size_t>& latents, double factor, bool simultaneous) {
  require_matching_sae(config, sae);
  const std::size_t h = sae.d_hidden();
  for (std::size_t j : latents) {
    if (j >= h) throw ConfigError("causal intervention: latent " + std::to_string(j) + " out of range");
  }
  const T amp = static_cast<T>(factor);
  auto amplified = [&sae, h, amp](std::vector<std::size_t> which) {
    return ActivationHook<T>::replace_with([&sae, h, amp, which = std::move(which)](const Tensor<T>& live) {
      Tensor<T> f = sae_forward(sae, live).f;
      const std::size_t rows = f.dim(0);
      for (std::size_t r = 0; r < rows; ++r) {
        for (std::size_t j : which) f[r * h + j] *= amp;
      }
      return sae_decode(sae, f);
    });
  };

  CausalResult result;
  result.latents = latents;
  result.factor = factor;
  std::vector<double> vs_orig(latents.size(), 0.0), vs_sub(latents.size(), 0.0);
  double simultaneous_total = 0.0;
  std::size_t count = 0;

  auto stream = test_stream<T>(ds, config);
  WindowBatch<T> batch;
  while (stream.next(batch)) {
    const Tensor<T> original = forward(params, config, batch.inputs);
    auto sub_hook = ActivationHook<T>::replace_with([&sae](const Tensor<T>& live) {
      return sae_decode(sae, sae_forward(sae, live).f);
    });
    const Tensor<T> substituted = forward(params, config, batch.inputs, &sub_hook);
    for (std::size_t i = 0; i < latents.size(); ++i) {
      auto hook = amplified({latents[i]});
      const Tensor<T> intervened = forward(params, config, batch.inputs, &hook);
      vs_orig[i] += abs_diff_sum(original, intervened);
      vs_sub[i] += abs_diff_sum(substituted, intervened);
    }
    if (simultaneous) {
      auto hook = amplified(latents);
      simultaneous_total += abs_diff_sum(original, forward(params, config, batch.inputs, &hook));
    }
    count += original.size();
  }
  if (count == 0) return result;
  const double denom = static_cast<double>(count);
  for (std::size_t i = 0; i < latents.size(); ++i) {
    result.shift_vs_original.push_back(vs_orig[i] / denom);
    result.shift_vs_substitution.push_back(vs_sub[i] / denom);
  }
  if (!latents.empty()) {
    result.mean_shift = std::accumulate(result.shift_vs_original.begin(), result.shift_vs_original.end(), 0.0) /
                        static_cast<double>(latents.size());
    result.max_shift = *std::max_element(result.shift_vs_original.begin(), result.shift_vs_original.end());
  }
  if (simultaneous) result.simultaneous_shift = simultaneous_total / denom;
  return result;
}

template <typename T>
AblationResult zero_ablation(const ForecasterParams<T>& params, const ForecasterConfig& config,
                             const SeriesDataset& ds, double base_mse) {
  const HookedEval e = evaluate_hooked<T>(params, config, ds, [] { return ActivationHook<T>::zero(); });
  AblationResult r;
  r.base_mse = base_mse;
  r.ablated_mse = e.mse;
  r.degradation_pct = degradation_pct(base_mse, e.mse);
  r.window_mse = e.window_mse;
  return r;
}

template <typename T>
std::vector<SweepCell> lambda_sweep(const ActivationStore& store, const SaeConfig& base_config, std::uint64_t seed,
                                    const std::vector<double>& scales, const std::vector<double>& lambdas) {
  std::vector<SweepCell> cells;
  for (double scale : scales) {
    for (double lambda : lambdas) {
      SaeConfig cfg = base_config;
      cfg.scale = scale;
      cfg.lambda = lambda;
      const auto trained = train_sae<T>(store, cfg, seed);
      const Fidelity fid = fidelity_metrics(trained.params, store);
      cells.push_back({scale, lambda, fid.l0, fid.recon_mse});
    }
  }
  return cells;
}

std::optional<double> ScaleEntry::degradation_pct(std::optional<double> base_mse) const {
  if (!base_mse || !probe_mse) return std::nullopt;
  return tsprobe::degradation_pct(*base_mse, *probe_mse);
}

std::vector<std::string> ProbeReport::missing(const std::vector<double>& expected_scales) const {
  std::vector<std::string> out;
  if (!base_mse) out.push_back("base_mse");
  for (double s : expected_scales) {
    const auto it = scales.find(s);
    if (it == scales.end() || !it->second.probe_mse) out.push_back("substitution_" + scale_key(s) + "x");
    if (it == scales.end() || !it->second.l0) out.push_back("fidelity_" + scale_key(s) + "x");
  }
  if (!dead_latents_4x) out.push_back("dead_latents_4x");
  if (!causal) out.push_back("causal_intervention");
  if (!zero_ablation) out.push_back("zero_ablation");
  if (lambda_sweep.empty()) out.push_back("lambda_sweep");
  return out;
}

namespace {

template <typename V>
nlohmann::json opt_json(const std::optional<V>& v) {
  return v ? nlohmann::json(*v) : nlohmann::json(nullptr);
}

std::optional<double> opt_double(const nlohmann::json& j, const char* key) {
  if (!j.contains(key) || j.at(key).is_null()) return std::nullopt;
  return j.at(key).get<double>();
}

}  // namespace

nlohmann::json ProbeReport::to_json() const {
  nlohmann::json j;
  j["dataset"] = dataset;
  j["horizon"] = horizon;
  j["base_mse"] = opt_json(base_mse);
  j["base_mae"] = opt_json(base_mae);
  j["base_window_mse"] = base_window_mse;
  j["scales"] = nlohmann::json::object();
  for (const auto& [s, e] : scales) {
    j["scales"][scale_key(s)] = {{"scale", s},
                                 {"probe_mse", opt_json(e.probe_mse)},
                                 {"degradation_pct", opt_json(e.degradation_pct(base_mse))},
                                 {"l0", opt_json(e.l0)},
                                 {"recon_mse", opt_json(e.recon_mse)},
                                 {"window_mse", e.window_mse}};
  }
  if (dead_latents_4x) {
    j["dead_latents_4x"] = {{"rate_pct", dead_latents_4x->rate_pct},
                            {"dead", dead_latents_4x->dead},
                            {"total", dead_latents_4x->total}};
  } else {
    j["dead_latents_4x"] = nullptr;
  }
  if (causal) {
    j["causal"] = {{"latents", causal->latents},
                   {"factor", causal->factor},
                   {"shift_vs_original", causal->shift_vs_original},
                   {"shift_vs_substitution", causal->shift_vs_substitution},
                   {"mean_shift", causal->mean_shift},
                   {"max_shift", causal->max_shift},
                   {"simultaneous_shift", opt_json(causal->simultaneous_shift)}};
  } else {
    j["causal"] = nullptr;
  }
  if (zero_ablation) {
    j["zero_ablation"] = {{"base_mse", zero_ablation->base_mse},
                          {"ablated_mse", zero_ablation->ablated_mse},
                          {"degradation_pct", zero_ablation->degradation_pct},
                          {"window_mse", zero_ablation->window_mse}};
  } else {
    j["zero_ablation"] = nullptr;
  }
  j["lambda_sweep"] = nlohmann::json::array();
  for (const auto& c : lambda_sweep) {
    j["lambda_sweep"].push_back({{"scale", c.scale}, {"lambda", c.lambda}, {"l0", c.l0}, {"recon_mse", c.recon_mse}});
  }
  j["incomplete"] = missing();
  return j;
}

ProbeReport ProbeReport::from_json(const nlohmann::json& j) {
  ProbeReport r;
  r.dataset = j.at("dataset");
  r.horizon = j.at("horizon");
  r.base_mse = opt_double(j, "base_mse");
  r.base_mae = opt_double(j, "base_mae");
  r.base_window_mse = j.value("base_window_mse", std::vector<double>{});
  for (const auto& [key, e] : j.at("scales").items()) {
    ScaleEntry entry;
    entry.probe_mse = opt_double(e, "probe_mse");
    entry.l0 = opt_double(e, "l0");
    entry.recon_mse = opt_double(e, "recon_mse");
    entry.window_mse = e.value("window_mse", std::vector<double>{});
    r.scales[e.at("scale").get<double>()] = entry;
  }
  if (const auto& d = j.at("dead_latents_4x"); !d.is_null()) {
    r.dead_latents_4x = DeadLatentCensus{d.at("rate_pct"), d.at("dead"), d.at("total")};
  }
  if (const auto& c = j.at("causal"); !c.is_null()) {
    CausalResult cr;
    cr.latents = c.at("latents").get<std::vector<std::size_t>>();
    cr.factor = c.at("factor");
    cr.shift_vs_original = c.at("shift_vs_original").get<std::vector<double>>();
    cr.shift_vs_substitution = c.at("shift_vs_substitution").get<std::vector<double>>();
    cr.mean_shift = c.at("mean_shift");
    cr.max_shift = c.at("max_shift");
    cr.simultaneous_shift = opt_double(c, "simultaneous_shift");
    r.causal = cr;
  }
  if (const auto& z = j.at("zero_ablation"); !z.is_null()) {
    AblationResult ar;
    ar.base_mse = z.at("base_mse");
    ar.ablated_mse = z.at("ablated_mse");
    ar.degradation_pct = z.at("degradation_pct");
    ar.window_mse = z.value("window_mse", std::vector<double>{});
    r.zero_ablation = ar;
  }
  for (const auto& c : j.at("lambda_sweep")) {
    r.lambda_sweep.push_back({c.at("scale"), c.at("lambda"), c.at("l0"), c.at("recon_mse")});
  }
  return r;
}

ReportAggregates aggregate_reports(const std::vector<ProbeReport>& reports) {
  ReportAggregates agg;
  agg.cells = reports.size();
  double gap_total = 0.0, shift_total = 0.0;
  std::size_t gap_n = 0, shift_n = 0;
  for (const auto& r : reports) {
    if (r.missing().empty()) ++agg.complete_cells;
    const auto lo = r.scales.find(0.5);
    const auto hi = r.scales.find(4.0);
    if (lo != r.scales.end() && hi != r.scales.end()) {
      const auto d_lo = lo->second.degradation_pct(r.base_mse);
      const auto d_hi = hi->second.degradation_pct(r.base_mse);
      if (d_lo && d_hi) {
        gap_total += std::abs(*d_lo - *d_hi);
        ++gap_n;
      }
    }
    if (r.causal) {
      shift_total += r.causal->mean_shift;
      ++shift_n;
    }
  }
  if (gap_n > 0) agg.scaling_gap_mean = gap_total / static_cast<double>(gap_n);
  if (shift_n > 0) agg.causal_shift_mean = shift_total / static_cast<double>(shift_n);
  return agg;
}

#define TSPROBE_INSTANTIATE_PROBES(T)                                                                                 \
  template HookedEval evaluate_hooked<T>(const ForecasterParams<T>&, const ForecasterConfig&, const SeriesDataset&,  \
                                         const HookFactory<T>&, std::size_t);                                         \
  template SubstitutionResult substitution_eval<T>(const ForecasterParams<T>&, const ForecasterConfig&,              \
                                                   const SaeParams<T>&, const SeriesDataset&, double);                \
  template LatentStats latent_test_stats<T>(const ForecasterParams<T>&, const ForecasterConfig&,                     \
                                            const SaeParams<T>&, const SeriesDataset&);                               \
  template DeadLatentCensus dead_latent_census<T>(const ForecasterParams<T>&, const ForecasterConfig&,               \
                                                  const SaeParams<T>&, const SeriesDataset&, double);                 \
  template std::vector<std::size_t> top_k_latents<T>(const ForecasterParams<T>&, const ForecasterConfig&,            \
                                                     const SaeParams<T>&, const SeriesDataset&, std::size_t);         \
  template CausalResult causal_intervention<T>(const ForecasterParams<T>&, const ForecasterConfig&,                  \
                                               const SaeParams<T>&, const SeriesDataset&,                             \
                                               const std::vector<std::size_t>&, double, bool);                        \
  template AblationResult zero_ablation<T>(const ForecasterParams<T>&, const ForecasterConfig&, const SeriesDataset&, \
                                           double);                                                                   \
  template std::vector<SweepCell> lambda_sweep<T>(const ActivationStore&, const SaeConfig&, std::uint64_t,           \
                                                  const std::vector<double>&, const std::vector<double>&);

TSPROBE_INSTANTIATE_PROBES(float)
TSPROBE_INSTANTIATE_PROBES(double)

}  // namespace tsprobe
