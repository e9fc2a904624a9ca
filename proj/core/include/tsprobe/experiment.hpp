#pragma once

#include <cstdint>
#include <filesystem>
#include <functional>
#include <map>
#include <optional>
#include <stdexcept>
#include <string>
#include <string_view>
#include <vector>

#include <json.hpp>

#include "tsprobe/data.hpp"
#include "tsprobe/probes.hpp"
#include "tsprobe/sae.hpp"
#include "tsprobe/trainer.hpp"

namespace tsprobe {

/// Pipeline stages in dependency order.
enum class Stage { kTrain, kHarvest, kSae, kSweep, kProbes, kReport };
inline constexpr Stage kAllStages[] = {Stage::kTrain, Stage::kHarvest, Stage::kSae,
                                       Stage::kSweep, Stage::kProbes,  Stage::kReport};

std::string to_string(Stage stage);
Stage parse_stage(const std::string& text);
/// Comma separated stage names or "all"; the result is in dependency order.
std::vector<Stage> parse_stages(const std::string& text);

enum class Precision { kF32, kF64 };
std::string to_string(Precision p);
Precision parse_precision(const std::string& text);

/// Raised for a stage that cannot run: missing upstream artifacts or artifacts
/// produced under a different spec.
class PipelineError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

struct ExperimentSpec {
  std::vector<std::string> datasets{"etth1"};
  std::vector<std::size_t> horizons{96};
  std::vector<double> scales{0.5, 1.0, 4.0};
  double lambda = 0.01;
  std::vector<double> sweep_scales{kSweepScales.begin(), kSweepScales.end()};
  std::vector<double> sweep_lambdas{kSweepLambdas.begin(), kSweepLambdas.end()};
  std::vector<std::uint64_t> seeds{42};
  std::filesystem::path out_dir = "runs";
  std::vector<Stage> stages{std::begin(kAllStages), std::end(kAllStages)};
  Precision precision = Precision::kF32;
  /// Worker threads over grid cells; 0 uses the available cores.
  std::size_t jobs = 0;
  TrainConfig train;
  /// d_ff, scale and lambda are filled in per SAE.
  SaeConfig sae;
  std::size_t harvest_cap = kHarvestCap;
  std::size_t causal_k = 10;
  double causal_factor = 5.0;
  /// Empty: built-in registry.
  std::string registry_path;
  /// Empty: TSPROBE_DATA_ROOT or the working directory.
  std::string data_root;

  /// Full grid: every registered benchmark at every horizon.
  static ExperimentSpec benchmark_grid();
  static ExperimentSpec from_json(const nlohmann::json& j);
  static ExperimentSpec from_json_file(const std::filesystem::path& path);
  nlohmann::json to_json() const;

  DatasetRegistry registry() const;
  std::filesystem::path data_root_path() const;
  /// Throws ConfigError for unknown datasets, empty grids or bad budgets.
  void validate() const;
  bool wants(Stage stage) const;
};

/// 64-bit FNV-1a.
std::uint64_t fnv1a64(std::string_view bytes);
/// Hex FNV-1a of the canonical (sorted key) JSON dump.
std::string json_hash(const nlohmann::json& j);

struct CellKey {
  std::string dataset;
  std::size_t horizon = 96;
  std::uint64_t seed = 42;

  std::string dir_name() const;
  friend bool operator==(const CellKey&, const CellKey&) = default;
};

std::vector<CellKey> grid_cells(const ExperimentSpec& spec);

struct CellPaths {
  std::filesystem::path root;

  std::filesystem::path forecaster() const { return root / "forecaster.ckpt"; }
  std::filesystem::path train_log() const { return root / "train_log.csv"; }
  std::filesystem::path store() const { return root / "activations.bin"; }
  std::filesystem::path sae(double scale) const;
  std::filesystem::path sweep() const { return root / "lambda_sweep.json"; }
  std::filesystem::path probe_report() const { return root / "probe_report.json"; }
};

/// Spec hashes per stage of one cell; each folds in its upstream hashes.
struct StageHashes {
  std::string train;
  std::string harvest;
  std::map<double, std::string> sae;
  std::string sweep;
  std::string probes;
};

StageHashes stage_hashes(const ExperimentSpec& spec, const DatasetEntry& entry, const CellKey& cell);

enum class StageOutcome { kRan, kSkipped, kFailed };
std::string to_string(StageOutcome outcome);

struct StageEvent {
  std::string cell;
  std::string stage;
  StageOutcome outcome = StageOutcome::kRan;
  std::string detail;
};

struct RunSummary {
  std::vector<StageEvent> events;
  bool ok() const;
  std::size_t count(StageOutcome outcome) const;
};

using ProgressFn = std::function<void(const StageEvent&)>;

/// Runs the requested stages for every grid cell on a bounded worker pool.
/// Stages whose artifact exists with a matching hash are skipped; a mismatching
/// hash or a missing upstream artifact fails that cell with PipelineError text.
RunSummary run_experiment(const ExperimentSpec& spec, const ProgressFn& progress = nullptr);

/// "+0.23" / "-6.60": two decimals, sign always shown.
std::string format_signed(double value);

struct RenderResult {
  std::vector<std::filesystem::path> files;
  std::size_t cells = 0;
  std::size_t complete_cells = 0;
  ReportAggregates aggregates;
};

/// Reads every cell report under `report_dir` (expected grid taken from its
/// experiment.json when present) and writes the table CSVs, tables.txt,
/// report.json and manifest.json. Missing values are left blank.
RenderResult render_tables(const std::filesystem::path& report_dir);

}  // namespace tsprobe
