#include "tsprobe/experiment.hpp"

#include <algorithm>
#include <atomic>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <mutex>
#include <set>
#include <sstream>
#include <thread>

#include "tsprobe/checkpoint.hpp"

namespace tsprobe {

namespace fs = std::filesystem;

std::string to_string(Stage stage) {
  switch (stage) {
    case Stage::kTrain: return "train";
    case Stage::kHarvest: return "harvest";
    case Stage::kSae: return "sae";
    case Stage::kSweep: return "sweep";
    case Stage::kProbes: return "probes";
    case Stage::kReport: return "report";
  }
  return "?";
}

Stage parse_stage(const std::string& text) {
  for (Stage s : kAllStages) {
    if (to_string(s) == text) return s;
  }
  if (text == "probe") return Stage::kProbes;
  throw ConfigError("unknown stage '" + text + "' (expected train, harvest, sae, sweep, probes, report or all)");
}

std::vector<Stage> parse_stages(const std::string& text) {
  if (text == "all") return {std::begin(kAllStages), std::end(kAllStages)};
  std::set<Stage> picked;
  std::stringstream ss(text);
  std::string item;
  while (std::getline(ss, item, ',')) {
    if (!item.empty()) picked.insert(parse_stage(item));
  }
  if (picked.empty()) throw ConfigError("no stages selected");
  return {picked.begin(), picked.end()};
}

std::string to_string(Precision p) { return p == Precision::kF32 ? "f32" : "f64"; }

Precision parse_precision(const std::string& text) {
  if (text == "f32" || text == "float32" || text == "float") return Precision::kF32;
  if (text == "f64" || text == "float64" || text == "double") return Precision::kF64;
  throw ConfigError("unknown precision '" + text + "' (expected f32 or f64)");
}

std::string to_string(StageOutcome outcome) {
  switch (outcome) {
    case StageOutcome::kRan: return "ran";
    case StageOutcome::kSkipped: return "skipped";
    case StageOutcome::kFailed: return "failed";
  }
  return "?";
}

// ---------------------------------------------------------------- spec

ExperimentSpec ExperimentSpec::benchmark_grid() {
  ExperimentSpec spec;
  spec.datasets.clear();
  const DatasetRegistry defaults = DatasetRegistry::defaults();
  for (const auto& [name, entry] : defaults.entries()) spec.datasets.push_back(name);
  spec.horizons.assign(std::begin(kHorizons), std::end(kHorizons));
  return spec;
}

nlohmann::json ExperimentSpec::to_json() const {
  std::vector<std::string> stage_names;
  for (Stage s : stages) stage_names.push_back(to_string(s));
  return {{"datasets", datasets},
          {"horizons", horizons},
          {"scales", scales},
          {"lambda", lambda},
          {"sweep_scales", sweep_scales},
          {"sweep_lambdas", sweep_lambdas},
          {"seeds", seeds},
          {"out_dir", out_dir.string()},
          {"stages", stage_names},
          {"precision", to_string(precision)},
          {"jobs", jobs},
          {"train", train.to_json()},
          {"sae", sae.to_json()},
          {"harvest_cap", harvest_cap},
          {"causal_k", causal_k},
          {"causal_factor", causal_factor},
          {"registry", registry_path},
          {"data_root", data_root}};
}

ExperimentSpec ExperimentSpec::from_json(const nlohmann::json& j) {
  static const std::set<std::string> known = {
      "datasets", "horizons", "scales",   "lambda",    "sweep_scales", "sweep_lambdas", "seeds",
      "out_dir",  "stages",   "precision", "jobs",     "train",        "sae",           "harvest_cap",
      "causal_k", "causal_factor", "registry", "data_root"};
  if (!j.is_object()) throw ConfigError("experiment spec must be a JSON object");
  for (const auto& [key, value] : j.items()) {
    if (!known.count(key)) throw ConfigError("unknown experiment spec key '" + key + "'");
  }
  ExperimentSpec s;
  try {
    if (j.contains("datasets")) s.datasets = j.at("datasets").get<std::vector<std::string>>();
    if (j.contains("horizons")) s.horizons = j.at("horizons").get<std::vector<std::size_t>>();
    if (j.contains("scales")) s.scales = j.at("scales").get<std::vector<double>>();
    if (j.contains("lambda")) s.lambda = j.at("lambda").get<double>();
    if (j.contains("sweep_scales")) s.sweep_scales = j.at("sweep_scales").get<std::vector<double>>();
    if (j.contains("sweep_lambdas")) s.sweep_lambdas = j.at("sweep_lambdas").get<std::vector<double>>();
    if (j.contains("seeds")) s.seeds = j.at("seeds").get<std::vector<std::uint64_t>>();
    if (j.contains("out_dir")) s.out_dir = j.at("out_dir").get<std::string>();
    if (j.contains("stages")) {
      const auto& st = j.at("stages");
      if (st.is_string()) {
        s.stages = parse_stages(st.get<std::string>());
      } else {
        std::string joined;
        for (const auto& name : st) joined += name.get<std::string>() + ",";
        s.stages = parse_stages(joined);
      }
    }
    if (j.contains("precision")) s.precision = parse_precision(j.at("precision").get<std::string>());
    if (j.contains("jobs")) s.jobs = j.at("jobs").get<std::size_t>();
    if (j.contains("train")) s.train = TrainConfig::from_json(j.at("train"));
    if (j.contains("sae")) s.sae = SaeConfig::from_json(j.at("sae"));
    if (j.contains("harvest_cap")) s.harvest_cap = j.at("harvest_cap").get<std::size_t>();
    if (j.contains("causal_k")) s.causal_k = j.at("causal_k").get<std::size_t>();
    if (j.contains("causal_factor")) s.causal_factor = j.at("causal_factor").get<double>();
    if (j.contains("registry")) s.registry_path = j.at("registry").get<std::string>();
    if (j.contains("data_root")) s.data_root = j.at("data_root").get<std::string>();
  } catch (const nlohmann::json::exception& e) {
    throw ConfigError(std::string("experiment spec: ") + e.what());
  }
  return s;
}

ExperimentSpec ExperimentSpec::from_json_file(const fs::path& path) {
  std::ifstream in(path);
  if (!in) throw ConfigError("cannot open experiment spec " + path.string());
  nlohmann::json j;
  try {
    in >> j;
  } catch (const nlohmann::json::exception& e) {
    throw ConfigError(path.string() + ": " + e.what());
  }
  return from_json(j);
}

DatasetRegistry ExperimentSpec::registry() const {
  return registry_path.empty() ? DatasetRegistry::defaults() : DatasetRegistry::from_json_file(registry_path);
}

fs::path ExperimentSpec::data_root_path() const {
  return data_root.empty() ? DatasetRegistry::data_root() : fs::path(data_root);
}

void ExperimentSpec::validate() const {
  if (datasets.empty()) throw ConfigError("experiment spec lists no datasets");
  if (horizons.empty()) throw ConfigError("experiment spec lists no horizons");
  if (seeds.empty()) throw ConfigError("experiment spec lists no seeds");
  if (stages.empty()) throw ConfigError("experiment spec selects no stages");
  if (wants(Stage::kSae) || wants(Stage::kProbes)) {
    if (scales.empty()) throw ConfigError("experiment spec lists no dictionary scales");
  }
  for (double s : scales) {
    if (!(s > 0.0)) throw ConfigError("dictionary scale must be positive");
  }
  if (wants(Stage::kSweep) && (sweep_scales.empty() || sweep_lambdas.empty())) {
    throw ConfigError("lambda sweep needs at least one scale and one lambda");
  }
  if (!(lambda >= 0.0)) throw ConfigError("lambda must be non-negative");
  if (harvest_cap == 0) throw ConfigError("harvest_cap must be positive");
  if (causal_k == 0) throw ConfigError("causal_k must be positive");
  train.validate();
  const DatasetRegistry reg = registry();
  for (const auto& name : datasets) reg.at(name);
  for (std::size_t h : horizons) {
    if (h == 0) throw ConfigError("horizon must be positive");
  }
}

bool ExperimentSpec::wants(Stage stage) const { return std::find(stages.begin(), stages.end(), stage) != stages.end(); }

// ---------------------------------------------------------------- hashing

std::uint64_t fnv1a64(std::string_view bytes) {
  std::uint64_t h = 0xcbf29ce484222325ULL;
  for (unsigned char c : bytes) {
    h ^= c;
    h *= 0x100000001b3ULL;
  }
  return h;
}

std::string json_hash(const nlohmann::json& j) {
  char buf[17];
  std::snprintf(buf, sizeof(buf), "%016llx", static_cast<unsigned long long>(fnv1a64(j.dump())));
  return buf;
}

std::string CellKey::dir_name() const {
  return dataset + "_h" + std::to_string(horizon) + "_seed" + std::to_string(seed);
}

std::vector<CellKey> grid_cells(const ExperimentSpec& spec) {
  std::vector<CellKey> cells;
  for (const auto& d : spec.datasets) {
    for (std::size_t h : spec.horizons) {
      for (std::uint64_t seed : spec.seeds) cells.push_back({d, h, seed});
    }
  }
  return cells;
}

namespace {

/// 0.5 -> "0.5", 4 -> "4.0".
std::string scale_tag(double scale) {
  char buf[32];
  std::snprintf(buf, sizeof(buf), "%g", scale);
  std::string s = buf;
  if (s.find_first_of(".e") == std::string::npos) s += ".0";
  return s;
}

std::string num(double v) {
  char buf[40];
  std::snprintf(buf, sizeof(buf), "%.17g", v);
  return buf;
}

ForecasterConfig cell_model(const DatasetEntry& entry, const CellKey& cell) {
  return ForecasterConfig::for_width(entry.d_model, cell.horizon);
}

TrainConfig cell_train(const ExperimentSpec& spec, const CellKey& cell) {
  TrainConfig t = spec.train;
  t.seed = cell.seed;
  return t;
}

SaeConfig cell_sae(const ExperimentSpec& spec, const ForecasterConfig& model, double scale, double lambda) {
  SaeConfig c = spec.sae;
  c.d_ff = model.d_ff;
  c.scale = scale;
  c.lambda = lambda;
  return c;
}

}  // namespace

fs::path CellPaths::sae(double scale) const { return root / ("sae_s" + scale_tag(scale) + ".ckpt"); }

StageHashes stage_hashes(const ExperimentSpec& spec, const DatasetEntry& entry, const CellKey& cell) {
  const ForecasterConfig model = cell_model(entry, cell);
  StageHashes h;
  h.train = json_hash({{"stage", "train"},
                       {"dataset", cell.dataset},
                       {"file", fs::path(entry.path).filename().string()},
                       {"split", to_string(entry.split_rule)},
                       {"model", model.to_json()},
                       {"train", cell_train(spec, cell).to_json()},
                       {"precision", to_string(spec.precision)}});
  h.harvest = json_hash({{"stage", "harvest"}, {"upstream", h.train}, {"cap", spec.harvest_cap}, {"seed", cell.seed}});
  for (double s : spec.scales) {
    h.sae[s] = json_hash({{"stage", "sae"},
                          {"upstream", h.harvest},
                          {"sae", cell_sae(spec, model, s, spec.lambda).to_json()},
                          {"seed", cell.seed}});
  }
  h.sweep = json_hash({{"stage", "sweep"},
                       {"upstream", h.harvest},
                       // scale and lambda come from the sweep lists
                       {"sae", cell_sae(spec, model, 1.0, 0.0).to_json()},
                       {"scales", spec.sweep_scales},
                       {"lambdas", spec.sweep_lambdas},
                       {"seed", cell.seed}});
  nlohmann::json sae_hashes = nlohmann::json::array();
  for (const auto& [s, v] : h.sae) sae_hashes.push_back(v);
  h.probes = json_hash({{"stage", "probes"},
                        {"upstream", h.train},
                        {"sae", sae_hashes},
                        {"causal_k", spec.causal_k},
                        {"causal_factor", spec.causal_factor}});
  return h;
}

bool RunSummary::ok() const {
  return std::none_of(events.begin(), events.end(), [](const StageEvent& e) { return e.outcome == StageOutcome::kFailed; });
}

std::size_t RunSummary::count(StageOutcome outcome) const {
  return static_cast<std::size_t>(
      std::count_if(events.begin(), events.end(), [outcome](const StageEvent& e) { return e.outcome == outcome; }));
}

// ---------------------------------------------------------------- cell runner

namespace {

nlohmann::json read_json_file(const fs::path& path) {
  std::ifstream in(path);
  if (!in) throw DataError("cannot open " + path.string());
  try {
    return nlohmann::json::parse(in);
  } catch (const nlohmann::json::exception& e) {
    throw DataError(path.string() + ": " + e.what());
  }
}

void write_json_file(const fs::path& path, const nlohmann::json& j) {
  const fs::path tmp = path.string() + ".tmp";
  {
    std::ofstream out(tmp);
    if (!out) throw DataError("cannot write " + tmp.string());
    out << j.dump(2) << '\n';
    if (!out) throw DataError("failed writing " + tmp.string());
  }
  fs::rename(tmp, path);
}

enum class ArtifactState { kAbsent, kCurrent };

/// kCurrent when the artifact exists with the expected hash; throws on a mismatch.
ArtifactState check_artifact(const fs::path& path, const std::string& expected,
                             const std::function<nlohmann::json(const fs::path&)>& read_meta) {
  if (!fs::exists(path)) return ArtifactState::kAbsent;
  const nlohmann::json meta = read_meta(path);
  const std::string found = meta.value("spec_hash", std::string{});
  if (found != expected) {
    throw PipelineError(path.string() + " was produced under a different spec (hash " +
                        (found.empty() ? std::string("none") : found) + ", expected " + expected +
                        "); remove it or choose another --out directory");
  }
  return ArtifactState::kCurrent;
}

std::string rerun_hint(Stage stage, const CellKey& cell, const ExperimentSpec& spec) {
  std::string cmd = stage == Stage::kProbes ? "probe" : to_string(stage);
  return "run `tsprobe " + cmd + " --dataset " + cell.dataset + " --horizon " + std::to_string(cell.horizon) +
         " --seed " + std::to_string(cell.seed) + " --out " + spec.out_dir.string() + "` first";
}

template <typename T>
class CellRunner {
 public:
  CellRunner(const ExperimentSpec& spec, const DatasetRegistry& registry, const CellKey& cell,
             const std::function<void(StageEvent)>& emit)
      : spec_(spec),
        registry_(registry),
        cell_(cell),
        entry_(registry.at(cell.dataset)),
        model_(cell_model(entry_, cell)),
        hashes_(stage_hashes(spec, entry_, cell)),
        paths_{spec.out_dir / cell.dir_name()},
        emit_(emit) {}

  void run() {
    fs::create_directories(paths_.root);
    for (Stage stage : spec_.stages) {
      if (stage == Stage::kReport) continue;
      try {
        run_stage(stage);
      } catch (const std::exception& e) {
        emit_({cell_.dir_name(), to_string(stage), StageOutcome::kFailed, e.what()});
        return;
      }
    }
  }

 private:
  void run_stage(Stage stage) {
    switch (stage) {
      case Stage::kTrain: return stage_train();
      case Stage::kHarvest: return stage_harvest();
      case Stage::kSae: return stage_sae();
      case Stage::kSweep: return stage_sweep();
      case Stage::kProbes: return stage_probes();
      case Stage::kReport: return;
    }
  }

  void report(Stage stage, StageOutcome outcome, std::string detail) {
    emit_({cell_.dir_name(), to_string(stage), outcome, std::move(detail)});
  }

  const SeriesDataset& dataset() {
    if (!dataset_) dataset_ = load_dataset(registry_, cell_.dataset, spec_.data_root_path());
    return *dataset_;
  }

  nlohmann::json meta(const std::string& hash) const {
    return {{"spec_hash", hash}, {"seed", cell_.seed}, {"dataset", cell_.dataset}, {"horizon", cell_.horizon}};
  }

  void require(const fs::path& path, const std::string& hash, Stage producer, const std::string& what,
               const std::function<nlohmann::json(const fs::path&)>& read_meta) {
    if (check_artifact(path, hash, read_meta) == ArtifactState::kAbsent) {
      throw PipelineError("missing " + what + " " + path.string() + "; " + rerun_hint(producer, cell_, spec_));
    }
  }

  const ForecasterParams<T>& forecaster() {
    if (!forecaster_) {
      require(paths_.forecaster(), hashes_.train, Stage::kTrain, "forecaster checkpoint", read_bundle_meta);
      forecaster_ = load_forecaster<T>(paths_.forecaster()).params;
    }
    return *forecaster_;
  }

  const ActivationStore& store() {
    if (!store_) {
      require(paths_.store(), hashes_.harvest, Stage::kHarvest, "activation store", read_store_meta);
      store_ = load_store(paths_.store());
    }
    return *store_;
  }

  void stage_train() {
    if (check_artifact(paths_.forecaster(), hashes_.train, read_bundle_meta) == ArtifactState::kCurrent) {
      return report(Stage::kTrain, StageOutcome::kSkipped, "checkpoint up to date");
    }
    auto result = train_forecaster<T>(dataset(), model_, cell_train(spec_, cell_));
    result.log.write_csv(paths_.train_log());
    save_forecaster<T>(paths_.forecaster(), result.params, model_, meta(hashes_.train));
    forecaster_ = std::move(result.params);
    report(Stage::kTrain, StageOutcome::kRan,
           "best val mse " + num(result.log.best_val) + " at epoch " + std::to_string(result.log.best_epoch));
  }

  void stage_harvest() {
    if (check_artifact(paths_.store(), hashes_.harvest, read_store_meta) == ArtifactState::kCurrent) {
      return report(Stage::kHarvest, StageOutcome::kSkipped, "store up to date");
    }
    ActivationStore s = harvest<T>(forecaster(), model_, dataset(), spec_.harvest_cap, cell_.seed);
    s.meta.update(meta(hashes_.harvest));
    save_store(paths_.store(), s);
    report(Stage::kHarvest, StageOutcome::kRan, std::to_string(s.n) + " rows");
    store_ = std::move(s);
  }

  void stage_sae() {
    std::size_t ran = 0;
    for (double scale : spec_.scales) {
      const fs::path path = paths_.sae(scale);
      const std::string& hash = hashes_.sae.at(scale);
      if (check_artifact(path, hash, read_bundle_meta) == ArtifactState::kCurrent) continue;
      const SaeConfig cfg = cell_sae(spec_, model_, scale, spec_.lambda);
      const auto trained = train_sae<T>(store(), cfg, cell_.seed);
      save_sae<T>(path, trained.params, cfg, meta(hash));
      ++ran;
    }
    report(Stage::kSae, ran == 0 ? StageOutcome::kSkipped : StageOutcome::kRan,
           std::to_string(ran) + " of " + std::to_string(spec_.scales.size()) + " dictionaries trained");
  }

  void stage_sweep() {
    const auto read_meta = [](const fs::path& p) { return read_json_file(p); };
    if (check_artifact(paths_.sweep(), hashes_.sweep, read_meta) == ArtifactState::kCurrent) {
      return report(Stage::kSweep, StageOutcome::kSkipped, "sweep up to date");
    }
    const auto cells = lambda_sweep<T>(store(), cell_sae(spec_, model_, 1.0, spec_.lambda), cell_.seed,
                                       spec_.sweep_scales, spec_.sweep_lambdas);
    nlohmann::json j = meta(hashes_.sweep);
    j["cells"] = nlohmann::json::array();
    for (const auto& c : cells) {
      j["cells"].push_back({{"scale", c.scale}, {"lambda", c.lambda}, {"l0", c.l0}, {"recon_mse", c.recon_mse}});
    }
    write_json_file(paths_.sweep(), j);
    report(Stage::kSweep, StageOutcome::kRan, std::to_string(cells.size()) + " cells");
  }

  void stage_probes() {
    const auto read_meta = [](const fs::path& p) { return read_json_file(p); };
    if (check_artifact(paths_.probe_report(), hashes_.probes, read_meta) == ArtifactState::kCurrent) {
      return report(Stage::kProbes, StageOutcome::kSkipped, "report up to date");
    }
    std::map<double, SaeParams<T>> saes;
    for (double scale : spec_.scales) {
      require(paths_.sae(scale), hashes_.sae.at(scale), Stage::kSae, "SAE checkpoint", read_bundle_meta);
      saes.emplace(scale, load_sae<T>(paths_.sae(scale)).params);
    }
    const auto& params = forecaster();
    const auto& ds = dataset();
    const auto& acts = store();

    ProbeReport r;
    r.dataset = cell_.dataset;
    r.horizon = cell_.horizon;
    const HookedEval base = evaluate_hooked<T>(params, model_, ds, nullptr);
    r.base_mse = base.mse;
    r.base_mae = base.mae;
    r.base_window_mse = base.window_mse;
    for (const auto& [scale, sae] : saes) {
      const SubstitutionResult sub = substitution_eval(params, model_, sae, ds, base.mse);
      const Fidelity fid = fidelity_metrics(sae, acts);
      ScaleEntry e;
      e.probe_mse = sub.probe_mse;
      e.l0 = fid.l0;
      e.recon_mse = fid.recon_mse;
      e.window_mse = sub.window_mse;
      r.scales[scale] = e;
    }
    const SaeParams<T>& widest = saes.rbegin()->second;
    const LatentStats stats = latent_test_stats(params, model_, widest, ds);
    r.dead_latents_4x = census_from_max(stats.max_activation, kActivityThreshold);
    const std::size_t k = std::min(spec_.causal_k, widest.d_hidden());
    r.causal = causal_intervention(params, model_, widest, ds, top_k_from_scores(stats.total_activation, k),
                                   spec_.causal_factor);
    r.zero_ablation = zero_ablation(params, model_, ds, base.mse);

    nlohmann::json j = r.to_json();
    j.update(meta(hashes_.probes));
    j["causal_scale"] = saes.rbegin()->first;
    write_json_file(paths_.probe_report(), j);
    report(Stage::kProbes, StageOutcome::kRan, "base mse " + num(base.mse));
  }

  const ExperimentSpec& spec_;
  const DatasetRegistry& registry_;
  CellKey cell_;
  DatasetEntry entry_;
  ForecasterConfig model_;
  StageHashes hashes_;
  CellPaths paths_;
  std::function<void(StageEvent)> emit_;
  std::optional<SeriesDataset> dataset_;
  std::optional<ForecasterParams<T>> forecaster_;
  std::optional<ActivationStore> store_;
};

}  // namespace

RunSummary run_experiment(const ExperimentSpec& spec, const ProgressFn& progress) {
  spec.validate();
  const DatasetRegistry registry = spec.registry();
  fs::create_directories(spec.out_dir);
  write_json_file(spec.out_dir / "experiment.json", spec.to_json());

  RunSummary summary;
  std::mutex mu;
  auto emit = [&](StageEvent e) {
    std::lock_guard lock(mu);
    if (progress) progress(e);
    summary.events.push_back(std::move(e));
  };

  const std::vector<CellKey> cells = grid_cells(spec);
  const bool cell_work = std::any_of(spec.stages.begin(), spec.stages.end(), [](Stage s) { return s != Stage::kReport; });
  if (cell_work) {
    std::size_t jobs = spec.jobs == 0 ? std::max(1u, std::thread::hardware_concurrency()) : spec.jobs;
    jobs = std::min(jobs, cells.size());
    std::atomic<std::size_t> next{0};
    auto worker = [&] {
      for (std::size_t i = next++; i < cells.size(); i = next++) {
        if (spec.precision == Precision::kF32) {
          CellRunner<float>(spec, registry, cells[i], emit).run();
        } else {
          CellRunner<double>(spec, registry, cells[i], emit).run();
        }
      }
    };
    if (jobs <= 1) {
      worker();
    } else {
      std::vector<std::thread> pool;
      for (std::size_t t = 0; t < jobs; ++t) pool.emplace_back(worker);
      for (auto& t : pool) t.join();
    }
  }

  if (spec.wants(Stage::kReport)) {
    try {
      const RenderResult rendered = render_tables(spec.out_dir);
      emit({"*", "report", StageOutcome::kRan,
            std::to_string(rendered.complete_cells) + " of " + std::to_string(rendered.cells) + " cells complete"});
    } catch (const std::exception& e) {
      emit({"*", "report", StageOutcome::kFailed, e.what()});
    }
  }
  return summary;
}

// ---------------------------------------------------------------- rendering

std::string format_signed(double value) {
  char buf[48];
  std::snprintf(buf, sizeof(buf), "%+.2f", value);
  std::string s = buf;
  if (s == "-0.00") s = "+0.00";
  return s;
}

namespace {

struct CellRecord {
  CellKey key;
  std::optional<ProbeReport> report;
  std::vector<SweepCell> sweep;
  std::vector<std::string> missing;
};

std::string opt_num(const std::optional<double>& v) { return v ? num(*v) : std::string{}; }

std::string opt_fixed(const std::optional<double>& v, int decimals) {
  if (!v) return "-";
  char buf[48];
  std::snprintf(buf, sizeof(buf), "%.*f", decimals, *v);
  return buf;
}

std::string opt_signed(const std::optional<double>& v) { return v ? format_signed(*v) : std::string("-"); }

std::optional<CellKey> parse_dir_name(const std::string& name) {
  const auto h = name.rfind("_h");
  const auto s = name.rfind("_seed");
  if (h == std::string::npos || s == std::string::npos || s < h) return std::nullopt;
  try {
    CellKey k;
    k.dataset = name.substr(0, h);
    k.horizon = std::stoul(name.substr(h + 2, s - h - 2));
    k.seed = std::stoull(name.substr(s + 5));
    if (k.dir_name() != name) return std::nullopt;
    return k;
  } catch (const std::exception&) {
    return std::nullopt;
  }
}

std::optional<double> sweep_l0(const std::vector<SweepCell>& cells, double scale, double lambda) {
  for (const auto& c : cells) {
    if (c.scale == scale && c.lambda == lambda) return c.l0;
  }
  return std::nullopt;
}

void write_rows(const fs::path& path, const std::vector<std::string>& header,
                const std::vector<std::vector<std::string>>& rows) {
  std::ofstream out(path);
  if (!out) throw DataError("cannot write " + path.string());
  for (std::size_t i = 0; i < header.size(); ++i) out << (i ? "," : "") << header[i];
  out << '\n';
  for (const auto& row : rows) {
    for (std::size_t i = 0; i < row.size(); ++i) out << (i ? "," : "") << row[i];
    out << '\n';
  }
}

void text_table(std::ostream& out, const std::string& title, const std::vector<std::string>& header,
                const std::vector<std::vector<std::string>>& rows) {
  std::vector<std::size_t> width(header.size());
  for (std::size_t i = 0; i < header.size(); ++i) width[i] = header[i].size();
  for (const auto& row : rows) {
    for (std::size_t i = 0; i < row.size(); ++i) width[i] = std::max(width[i], row[i].size());
  }
  auto line = [&](const std::vector<std::string>& cells) {
    for (std::size_t i = 0; i < cells.size(); ++i) {
      out << (i ? "  " : "");
      if (i < 2) {
        out << cells[i] << std::string(width[i] - cells[i].size(), ' ');
      } else {
        out << std::string(width[i] - cells[i].size(), ' ') << cells[i];
      }
    }
    out << '\n';
  };
  out << title << '\n';
  line(header);
  std::size_t total = 0;
  for (std::size_t w : width) total += w;
  out << std::string(total + 2 * (width.size() - 1), '-') << '\n';
  for (const auto& row : rows) line(row);
  out << '\n';
}

}  // namespace

RenderResult render_tables(const fs::path& report_dir) {
  if (!fs::is_directory(report_dir)) throw DataError("report directory " + report_dir.string() + " does not exist");

  std::vector<CellKey> expected;
  std::vector<double> scales{0.5, 1.0, 4.0};
  std::vector<double> sweep_scales = kSweepScales;
  std::vector<double> sweep_lambdas = kSweepLambdas;
  if (fs::exists(report_dir / "experiment.json")) {
    const ExperimentSpec spec = ExperimentSpec::from_json(read_json_file(report_dir / "experiment.json"));
    expected = grid_cells(spec);
    scales = spec.scales;
    sweep_scales = spec.sweep_scales;
    sweep_lambdas = spec.sweep_lambdas;
  }

  std::vector<CellKey> found;
  for (const auto& entry : fs::directory_iterator(report_dir)) {
    if (!entry.is_directory()) continue;
    if (auto key = parse_dir_name(entry.path().filename().string())) found.push_back(*key);
  }
  std::sort(found.begin(), found.end(), [](const CellKey& a, const CellKey& b) {
    return std::tie(a.dataset, a.horizon, a.seed) < std::tie(b.dataset, b.horizon, b.seed);
  });
  std::vector<CellKey> order = expected;
  for (const auto& k : found) {
    if (std::find(order.begin(), order.end(), k) == order.end()) order.push_back(k);
  }

  std::vector<CellRecord> records;
  std::vector<ProbeReport> reports;
  nlohmann::json bundle_cells = nlohmann::json::array();
  nlohmann::json incomplete = nlohmann::json::object();
  std::vector<std::string> absent;
  for (const auto& key : order) {
    CellRecord rec;
    rec.key = key;
    const CellPaths paths{report_dir / key.dir_name()};
    nlohmann::json raw;
    if (fs::exists(paths.probe_report())) {
      raw = read_json_file(paths.probe_report());
      rec.report = ProbeReport::from_json(raw);
    }
    if (fs::exists(paths.sweep())) {
      const nlohmann::json sweep = read_json_file(paths.sweep());
      for (const auto& c : sweep.at("cells")) {
        rec.sweep.push_back({c.at("scale"), c.at("lambda"), c.at("l0"), c.at("recon_mse")});
      }
    }
    if (!rec.report && rec.sweep.empty()) {
      absent.push_back(key.dir_name());
      rec.missing.push_back("all");
    } else {
      ProbeReport merged = rec.report.value_or(ProbeReport{});
      merged.dataset = key.dataset;
      merged.horizon = key.horizon;
      merged.lambda_sweep = rec.sweep;
      rec.missing = merged.missing(scales);
      if (rec.report) reports.push_back(merged);
      nlohmann::json j = merged.to_json();
      j["seed"] = key.seed;
      j["cell"] = key.dir_name();
      if (raw.contains("spec_hash")) j["spec_hash"] = raw.at("spec_hash");
      j["incomplete"] = rec.missing;
      bundle_cells.push_back(j);
    }
    if (!rec.missing.empty()) incomplete[key.dir_name()] = rec.missing;
    records.push_back(std::move(rec));
  }

  RenderResult result;
  result.cells = records.size();
  result.complete_cells = static_cast<std::size_t>(
      std::count_if(records.begin(), records.end(), [](const CellRecord& r) { return r.missing.empty(); }));
  result.aggregates = aggregate_reports(reports);

  std::vector<std::string> ids{"dataset", "horizon", "seed"};
  auto id_cells = [](const CellKey& k) {
    return std::vector<std::string>{k.dataset, std::to_string(k.horizon), std::to_string(k.seed)};
  };

  // Table 1: substitution degradation, dead latents, causal shift.
  std::vector<std::string> h1 = ids;
  h1.insert(h1.end(), {"base_mse", "dead_latents_pct"});
  for (double s : scales) h1.push_back("deg_pct_" + scale_tag(s) + "x");
  h1.insert(h1.end(), {"causal_shift_mae", "causal_shift_max"});
  std::vector<std::string> t1_head{"Dataset", "H", "Seed", "Base MSE", "Dead Latents"};
  for (double s : scales) t1_head.push_back(scale_tag(s) + "x Deg.");
  t1_head.push_back("Causal Shift MAE");
  std::vector<std::vector<std::string>> r1, t1;
  // Table 2: fidelity.
  std::vector<std::string> h2 = ids;
  std::vector<std::string> t2_head{"Dataset", "H", "Seed"};
  for (double s : scales) {
    h2.push_back("l0_" + scale_tag(s) + "x");
    h2.push_back("recon_mse_" + scale_tag(s) + "x");
    t2_head.push_back(scale_tag(s) + "x L0");
    t2_head.push_back(scale_tag(s) + "x MSE");
  }
  std::vector<std::vector<std::string>> r2, t2;
  // Table 3: lambda sweep.
  std::vector<std::string> h3 = ids;
  std::vector<std::string> t3_head{"Dataset", "H", "Seed"};
  for (double s : sweep_scales) {
    for (double l : sweep_lambdas) {
      h3.push_back("l0_" + scale_tag(s) + "x_lambda" + scale_tag(l));
      t3_head.push_back(scale_tag(s) + "x l=" + scale_tag(l));
    }
  }
  std::vector<std::vector<std::string>> r3, t3;
  // Table 4: forecasting accuracy.
  std::vector<std::string> h4 = ids;
  h4.insert(h4.end(), {"mse", "mae"});
  std::vector<std::string> t4_head{"Dataset", "H", "Seed", "MSE", "MAE"};
  std::vector<std::vector<std::string>> r4, t4;
  // Table 5: zero ablation.
  std::vector<std::string> h5 = ids;
  h5.insert(h5.end(), {"base_mse", "ablated_mse", "deg_pct"});
  std::vector<std::string> t5_head{"Dataset", "H", "Seed", "Base MSE", "Ablated MSE", "Deg. %"};
  std::vector<std::vector<std::string>> r5, t5;

  for (const auto& rec : records) {
    const auto base_ids = id_cells(rec.key);
    const std::vector<std::string> text_ids{rec.key.dataset, std::to_string(rec.key.horizon),
                                            std::to_string(rec.key.seed)};
    const ProbeReport rep = rec.report.value_or(ProbeReport{});
    auto entry = [&](double s) -> const ScaleEntry* {
      const auto it = rep.scales.find(s);
      return it == rep.scales.end() ? nullptr : &it->second;
    };
    const std::optional<double> dead =
        rep.dead_latents_4x ? std::optional<double>(rep.dead_latents_4x->rate_pct) : std::nullopt;
    std::optional<double> shift, shift_max;
    if (rep.causal) {
      shift = rep.causal->mean_shift;
      shift_max = rep.causal->max_shift;
    }

    auto row1 = base_ids;
    auto txt1 = text_ids;
    row1.insert(row1.end(), {opt_num(rep.base_mse), opt_num(dead)});
    txt1.insert(txt1.end(), {opt_fixed(rep.base_mse, 4), dead ? opt_fixed(dead, 1) + "%" : "-"});
    auto row2 = base_ids;
    auto txt2 = text_ids;
    for (double s : scales) {
      const ScaleEntry* e = entry(s);
      const std::optional<double> deg = e ? e->degradation_pct(rep.base_mse) : std::nullopt;
      row1.push_back(opt_num(deg));
      txt1.push_back(deg ? opt_signed(deg) + "%" : "-");
      const std::optional<double> l0 = e ? e->l0 : std::nullopt;
      const std::optional<double> rm = e ? e->recon_mse : std::nullopt;
      row2.insert(row2.end(), {opt_num(l0), opt_num(rm)});
      txt2.insert(txt2.end(), {opt_fixed(l0, 1), opt_fixed(rm, 4)});
    }
    row1.insert(row1.end(), {opt_num(shift), opt_num(shift_max)});
    txt1.push_back(opt_fixed(shift, 4));
    r1.push_back(row1);
    t1.push_back(txt1);
    r2.push_back(row2);
    t2.push_back(txt2);

    auto row3 = base_ids;
    auto txt3 = text_ids;
    for (double s : sweep_scales) {
      for (double l : sweep_lambdas) {
        const auto l0 = sweep_l0(rec.sweep, s, l);
        row3.push_back(opt_num(l0));
        txt3.push_back(opt_fixed(l0, 1));
      }
    }
    r3.push_back(row3);
    t3.push_back(txt3);

    auto row4 = base_ids;
    auto txt4 = text_ids;
    row4.insert(row4.end(), {opt_num(rep.base_mse), opt_num(rep.base_mae)});
    txt4.insert(txt4.end(), {opt_fixed(rep.base_mse, 3), opt_fixed(rep.base_mae, 3)});
    r4.push_back(row4);
    t4.push_back(txt4);

    auto row5 = base_ids;
    auto txt5 = text_ids;
    if (rep.zero_ablation) {
      const auto& z = *rep.zero_ablation;
      row5.insert(row5.end(), {num(z.base_mse), num(z.ablated_mse), num(z.degradation_pct)});
      txt5.insert(txt5.end(), {opt_fixed(z.base_mse, 4), opt_fixed(z.ablated_mse, 4), format_signed(z.degradation_pct) + "%"});
    } else {
      row5.insert(row5.end(), {"", "", ""});
      txt5.insert(txt5.end(), {"-", "-", "-"});
    }
    r5.push_back(row5);
    t5.push_back(txt5);
  }

  const std::vector<std::tuple<std::string, std::vector<std::string>, std::vector<std::vector<std::string>>>> csvs = {
      {"table1_dictionary_scaling.csv", h1, r1},
      {"table2_sae_fidelity.csv", h2, r2},
      {"table3_lambda_sweep.csv", h3, r3},
      {"table4_forecasting.csv", h4, r4},
      {"table5_zero_ablation.csv", h5, r5}};
  for (const auto& [name, header, rows] : csvs) {
    write_rows(report_dir / name, header, rows);
    result.files.push_back(report_dir / name);
  }

  {
    const fs::path path = report_dir / "tables.txt";
    std::ofstream out(path);
    if (!out) throw DataError("cannot write " + path.string());
    text_table(out, "Dictionary scaling: degradation when activations are replaced by SAE reconstructions", t1_head, t1);
    text_table(out, "SAE fidelity (L0 and reconstruction MSE)", t2_head, t2);
    text_table(out, "Lambda sweep (L0)", t3_head, t3);
    text_table(out, "Forecasting accuracy (test set, scaled space)", t4_head, t4);
    text_table(out, "Zero ablation of the FFN intermediate", t5_head, t5);
    out << "Mean |deg(0.5x) - deg(4.0x)|: "
        << (result.aggregates.scaling_gap_mean ? opt_fixed(result.aggregates.scaling_gap_mean, 3) + "%" : "-") << '\n';
    out << "Mean causal shift MAE: " << opt_fixed(result.aggregates.causal_shift_mean, 4) << '\n';
    out << "Complete cells: " << result.complete_cells << " of " << result.cells << '\n';
    result.files.push_back(path);
  }

  const nlohmann::json aggregates = {{"scaling_gap_mean", result.aggregates.scaling_gap_mean
                                                              ? nlohmann::json(*result.aggregates.scaling_gap_mean)
                                                              : nlohmann::json(nullptr)},
                                     {"causal_shift_mean", result.aggregates.causal_shift_mean
                                                               ? nlohmann::json(*result.aggregates.causal_shift_mean)
                                                               : nlohmann::json(nullptr)},
                                     {"cells", result.aggregates.cells},
                                     {"complete_cells", result.aggregates.complete_cells}};
  write_json_file(report_dir / "report.json", {{"cells", bundle_cells}, {"aggregates", aggregates}});
  result.files.push_back(report_dir / "report.json");

  std::vector<std::string> expected_names;
  for (const auto& k : expected) expected_names.push_back(k.dir_name());
  write_json_file(report_dir / "manifest.json", {{"expected_cells", expected_names},
                                                 {"rendered_cells", result.cells},
                                                 {"complete_cells", result.complete_cells},
                                                 {"absent_cells", absent},
                                                 {"incomplete", incomplete}});
  result.files.push_back(report_dir / "manifest.json");
  return result;
}

}  // namespace tsprobe
