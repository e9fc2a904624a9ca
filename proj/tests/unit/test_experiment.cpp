#include <gtest/gtest.h>

#include <fstream>
#include <memory>
#include <sstream>

#include "helpers.hpp"
#include "pipeline.hpp"
#include "tsprobe/experiment.hpp"

using namespace tsprobe;
using tsprobe::testing::read_text;
using tsprobe::testing::TempDir;
using tsprobe::testing::tiny_spec;

namespace {

std::vector<std::vector<std::string>> read_csv_rows(const std::filesystem::path& path) {
  std::vector<std::vector<std::string>> rows;
  std::ifstream in(path);
  std::string line;
  while (std::getline(in, line)) {
    std::vector<std::string> cells;
    std::stringstream ss(line);
    std::string cell;
    while (std::getline(ss, cell, ',')) cells.push_back(cell);
    if (!line.empty() && line.back() == ',') cells.emplace_back();
    rows.push_back(cells);
  }
  return rows;
}

std::size_t column(const std::vector<std::string>& header, const std::string& name) {
  const auto it = std::find(header.begin(), header.end(), name);
  EXPECT_NE(it, header.end()) << name;
  return static_cast<std::size_t>(it - header.begin());
}

const StageEvent* find_event(const RunSummary& s, const std::string& stage, StageOutcome outcome) {
  for (const auto& e : s.events) {
    if (e.stage == stage && e.outcome == outcome) return &e;
  }
  return nullptr;
}

}  // namespace

TEST(Stages, ParseNamesAndOrder) {
  EXPECT_EQ(parse_stages("all").size(), std::size(kAllStages));
  EXPECT_EQ(parse_stages("probes,train"), (std::vector<Stage>{Stage::kTrain, Stage::kProbes}));
  EXPECT_EQ(parse_stage("probe"), Stage::kProbes);
  for (Stage s : kAllStages) EXPECT_EQ(parse_stage(to_string(s)), s);
  EXPECT_THROW(parse_stage("bogus"), ConfigError);
  EXPECT_EQ(parse_precision("f64"), Precision::kF64);
  EXPECT_THROW(parse_precision("f16"), ConfigError);
}

TEST(ExperimentSpec, JsonRoundTripAndStrictKeys) {
  auto spec = ExperimentSpec::benchmark_grid();
  spec.lambda = 0.003;
  spec.seeds = {1, 2};
  spec.precision = Precision::kF64;
  const auto j = spec.to_json();
  EXPECT_EQ(ExperimentSpec::from_json(j).to_json(), j);
  auto bad = j;
  bad["lamda"] = 0.1;
  EXPECT_THROW(ExperimentSpec::from_json(bad), ConfigError);
}

TEST(ExperimentSpec, BenchmarkGridCoversEveryCell) {
  const auto spec = ExperimentSpec::benchmark_grid();
  EXPECT_NO_THROW(spec.validate());
  EXPECT_EQ(grid_cells(spec).size(), 32u);
}

TEST(ExperimentSpec, ValidationRejectsBadGrids) {
  ExperimentSpec spec;
  spec.datasets = {"nope"};
  EXPECT_THROW(spec.validate(), ConfigError);
  spec = ExperimentSpec{};
  spec.horizons.clear();
  EXPECT_THROW(spec.validate(), ConfigError);
  spec = ExperimentSpec{};
  spec.scales = {0.0};
  EXPECT_THROW(spec.validate(), ConfigError);
}

TEST(Hashing, FnvVectorsAndStageChaining) {
  EXPECT_EQ(fnv1a64(""), 0xcbf29ce484222325ULL);
  EXPECT_EQ(fnv1a64("a"), 0xaf63dc4c8601ec8cULL);
  EXPECT_EQ(fnv1a64("foobar"), 0x85944171f73967e8ULL);
  EXPECT_EQ(json_hash(nlohmann::json::parse(R"({"b":1,"a":2})")),
            json_hash(nlohmann::json::parse(R"({"a":2,"b":1})")));
  EXPECT_EQ(json_hash({{"a", 1}}).size(), 16u);

  const ExperimentSpec spec;
  const CellKey cell{"etth1", 96, 42};
  const auto entry = spec.registry().at("etth1");
  const auto base = stage_hashes(spec, entry, cell);
  auto sae_change = spec;
  sae_change.lambda = 0.02;
  const auto h1 = stage_hashes(sae_change, entry, cell);
  EXPECT_EQ(h1.train, base.train);
  EXPECT_EQ(h1.harvest, base.harvest);
  EXPECT_NE(h1.sae.at(1.0), base.sae.at(1.0));
  EXPECT_NE(h1.probes, base.probes);
  EXPECT_EQ(h1.sweep, base.sweep);
  auto train_change = spec;
  train_change.train.lr = 1e-4;
  const auto h2 = stage_hashes(train_change, entry, cell);
  EXPECT_NE(h2.train, base.train);
  EXPECT_NE(h2.harvest, base.harvest);
  EXPECT_NE(h2.sae.at(4.0), base.sae.at(4.0));
  EXPECT_NE(h2.sweep, base.sweep);
  EXPECT_NE(h2.probes, base.probes);
  EXPECT_NE(stage_hashes(spec, entry, {"etth1", 96, 7}).train, base.train);
}

TEST(CellKey, DirectoryNames) {
  EXPECT_EQ((CellKey{"etth1", 96, 42}).dir_name(), "etth1_h96_seed42");
  ExperimentSpec spec;
  spec.datasets = {"etth1", "ettm2"};
  spec.horizons = {96, 720};
  spec.seeds = {1, 2, 3};
  EXPECT_EQ(grid_cells(spec).size(), 12u);
  EXPECT_EQ(CellPaths{"x"}.sae(0.5).filename(), "sae_s0.5.ckpt");
  EXPECT_EQ(CellPaths{"x"}.sae(4.0).filename(), "sae_s4.0.ckpt");
}

TEST(FormatSigned, SignAlwaysShown) {
  EXPECT_EQ(format_signed(0.234), "+0.23");
  EXPECT_EQ(format_signed(-6.6), "-6.60");
  EXPECT_EQ(format_signed(131.389), "+131.39");
  EXPECT_EQ(format_signed(-0.001), "+0.00");
  EXPECT_EQ(format_signed(0.0), "+0.00");
}

class Pipeline : public ::testing::Test {
 protected:
  static void SetUpTestSuite() {
    dir_ = std::make_unique<TempDir>();
    spec_ = tiny_spec(dir_->path());
    summary_ = run_experiment(spec_);
  }
  static void TearDownTestSuite() { dir_.reset(); }

  static std::unique_ptr<TempDir> dir_;
  static ExperimentSpec spec_;
  static RunSummary summary_;
};

std::unique_ptr<TempDir> Pipeline::dir_;
ExperimentSpec Pipeline::spec_;
RunSummary Pipeline::summary_;

TEST_F(Pipeline, FirstRunProducesEveryArtifact) {
  for (const auto& e : summary_.events) {
    EXPECT_NE(e.outcome, StageOutcome::kFailed) << e.cell << " " << e.stage << ": " << e.detail;
  }
  EXPECT_TRUE(summary_.ok());
  const CellPaths p{spec_.out_dir / "toy_h24_seed42"};
  for (const auto& f : {p.forecaster(), p.train_log(), p.store(), p.sae(0.5), p.sae(1.0), p.sae(4.0), p.sweep(),
                        p.probe_report()}) {
    EXPECT_TRUE(std::filesystem::exists(f)) << f;
  }
  for (const char* f : {"table1_dictionary_scaling.csv", "table2_sae_fidelity.csv", "table3_lambda_sweep.csv",
                        "table4_forecasting.csv", "table5_zero_ablation.csv", "tables.txt", "report.json",
                        "manifest.json", "experiment.json"}) {
    EXPECT_TRUE(std::filesystem::exists(spec_.out_dir / f)) << f;
  }
  const auto report = ProbeReport::from_json(nlohmann::json::parse(read_text(p.probe_report())));
  // The sweep lives in its own artifact and is merged when tables are rendered.
  EXPECT_EQ(report.missing(), std::vector<std::string>{"lambda_sweep"});
  EXPECT_EQ(report.causal->latents.size(), 3u);
}

TEST_F(Pipeline, RerunSkipsEveryCellStage) {
  const auto again = run_experiment(spec_);
  EXPECT_TRUE(again.ok());
  EXPECT_EQ(again.count(StageOutcome::kFailed), 0u);
  for (const auto& e : again.events) {
    if (e.stage != "report") {
      EXPECT_EQ(e.outcome, StageOutcome::kSkipped) << e.stage;
    }
  }
}

TEST_F(Pipeline, ChangedSpecRefusesToOverwrite) {
  auto changed = spec_;
  changed.lambda = 0.05;
  changed.stages = {Stage::kSae};
  const auto s = run_experiment(changed);
  EXPECT_FALSE(s.ok());
  const auto* e = find_event(s, "sae", StageOutcome::kFailed);
  ASSERT_NE(e, nullptr);
  EXPECT_NE(e->detail.find("different spec"), std::string::npos) << e->detail;
  run_experiment(spec_);  // restore experiment.json for later tests
}

TEST_F(Pipeline, MissingUpstreamNamesTheFix) {
  TempDir other;
  auto spec = tiny_spec(other.path());
  spec.stages = {Stage::kProbes};
  const auto s = run_experiment(spec);
  EXPECT_FALSE(s.ok());
  const auto* e = find_event(s, "probes", StageOutcome::kFailed);
  ASSERT_NE(e, nullptr);
  EXPECT_NE(e->detail.find("tsprobe"), std::string::npos) << e->detail;
  EXPECT_NE(e->detail.find("--dataset toy"), std::string::npos) << e->detail;
}

TEST_F(Pipeline, RenderedTextMatchesRawValues) {
  const auto r = render_tables(spec_.out_dir);
  EXPECT_EQ(r.cells, 1u);
  EXPECT_EQ(r.complete_cells, 1u);
  const auto rows = read_csv_rows(spec_.out_dir / "table1_dictionary_scaling.csv");
  ASSERT_EQ(rows.size(), 2u);
  const auto text = read_text(spec_.out_dir / "tables.txt");
  for (const char* col : {"deg_pct_0.5x", "deg_pct_1.0x", "deg_pct_4.0x"}) {
    const double v = std::stod(rows[1][column(rows[0], col)]);
    EXPECT_NE(text.find(format_signed(v) + "%"), std::string::npos) << col;
  }
  const auto report = nlohmann::json::parse(read_text(spec_.out_dir / "report.json"));
  const auto cell = ProbeReport::from_json(report.at("cells").at(0));
  const double deg = *cell.scales.at(0.5).degradation_pct(cell.base_mse);
  EXPECT_EQ(std::stod(rows[1][column(rows[0], "deg_pct_0.5x")]), deg);
}

TEST(Render, IncompleteCellsAreBlankAndListed) {
  TempDir dir;
  const auto cell_dir = dir.path() / "etth1_h96_seed42";
  std::filesystem::create_directories(cell_dir);
  ProbeReport r;
  r.dataset = "etth1";
  r.horizon = 96;
  r.base_mse = 0.5;
  r.base_mae = 0.4;
  r.scales[0.5].probe_mse = 0.55;
  r.scales[4.0].probe_mse = 0.51;
  std::ofstream(cell_dir / "probe_report.json") << r.to_json().dump();
  ExperimentSpec spec;
  spec.datasets = {"etth1", "ettm1"};
  std::ofstream(dir.path() / "experiment.json") << spec.to_json().dump();

  const auto res = render_tables(dir.path());
  EXPECT_EQ(res.cells, 2u);
  EXPECT_EQ(res.complete_cells, 0u);
  const auto manifest = nlohmann::json::parse(read_text(dir.path() / "manifest.json"));
  EXPECT_EQ(manifest.at("absent_cells"), nlohmann::json::array({"ettm1_h96_seed42"}));
  const auto missing = manifest.at("incomplete").at("etth1_h96_seed42").get<std::vector<std::string>>();
  EXPECT_NE(std::find(missing.begin(), missing.end(), "causal_intervention"), missing.end());
  EXPECT_NE(std::find(missing.begin(), missing.end(), "substitution_1x"), missing.end());

  const auto rows = read_csv_rows(dir.path() / "table1_dictionary_scaling.csv");
  ASSERT_EQ(rows.size(), 3u);
  EXPECT_EQ(rows[1][column(rows[0], "deg_pct_1.0x")], "");
  EXPECT_EQ(rows[1][column(rows[0], "causal_shift_mae")], "");
  EXPECT_DOUBLE_EQ(std::stod(rows[1][column(rows[0], "deg_pct_0.5x")]), degradation_pct(0.5, 0.55));
  EXPECT_EQ(rows[2][column(rows[0], "base_mse")], "");
  const auto text = read_text(dir.path() / "tables.txt");
  EXPECT_NE(text.find("Complete cells: 0 of 2"), std::string::npos);
}

TEST(Render, FullGridSkeletonHasEveryRow) {
  TempDir dir;
  std::ofstream(dir.path() / "experiment.json") << ExperimentSpec::benchmark_grid().to_json().dump();
  const auto res = render_tables(dir.path());
  EXPECT_EQ(res.cells, 32u);
  for (const char* t : {"table1_dictionary_scaling.csv", "table2_sae_fidelity.csv", "table3_lambda_sweep.csv",
                        "table4_forecasting.csv", "table5_zero_ablation.csv"}) {
    EXPECT_EQ(read_csv_rows(dir.path() / t).size(), 33u) << t;
  }
  const auto manifest = nlohmann::json::parse(read_text(dir.path() / "manifest.json"));
  EXPECT_EQ(manifest.at("absent_cells").size(), 32u);
  EXPECT_THROW(render_tables(dir.path() / "nowhere"), DataError);
}
