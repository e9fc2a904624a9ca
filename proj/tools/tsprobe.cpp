#include <cstdio>
#include <fstream>
#include <iostream>
#include <optional>
#include <string>
#include <vector>

#include <CLI11.hpp>

#include "tsprobe/data.hpp"
#include "tsprobe/experiment.hpp"

namespace {

using tsprobe::ExperimentSpec;
using tsprobe::Stage;

struct Overrides {
  std::string spec_file;
  std::vector<std::string> datasets;
  std::vector<std::size_t> horizons;
  std::vector<double> scales;
  std::optional<double> lambda;
  std::vector<std::uint64_t> seeds;
  std::string out;
  std::string registry;
  std::optional<std::size_t> jobs;
  std::string precision;
  std::optional<std::size_t> max_epochs;
  std::optional<std::size_t> max_batches;
  std::optional<std::size_t> harvest_cap;
  std::optional<std::size_t> sae_epochs;
  std::optional<std::size_t> sae_steps;
  std::string stages = "all";
  bool quiet = false;
};

void add_grid_flags(CLI::App* cmd, Overrides& o) {
  cmd->add_option("--spec", o.spec_file, "Experiment spec JSON; flags override its values")->check(CLI::ExistingFile);
  cmd->add_option("--dataset", o.datasets, "Dataset name(s) from the registry");
  cmd->add_option("--horizon", o.horizons, "Forecast horizon(s)");
  cmd->add_option("--scale", o.scales, "SAE dictionary scale(s)");
  cmd->add_option("--lambda", o.lambda, "SAE L1 coefficient");
  cmd->add_option("--seed", o.seeds, "Seed(s)");
  cmd->add_option("--out", o.out, "Output directory");
  cmd->add_option("--registry", o.registry, "Dataset registry JSON")->check(CLI::ExistingFile);
  cmd->add_option("--jobs", o.jobs, "Worker threads over grid cells (0 = all cores)");
  cmd->add_option("--precision", o.precision, "f32 or f64");
  cmd->add_option("--max-epochs", o.max_epochs, "Forecaster epoch cap");
  cmd->add_option("--max-batches", o.max_batches, "Forecaster batches per epoch (0 = full pass)");
  cmd->add_option("--harvest-cap", o.harvest_cap, "Maximum harvested activation rows");
  cmd->add_option("--sae-epochs", o.sae_epochs, "SAE epoch cap");
  cmd->add_option("--sae-steps", o.sae_steps, "SAE optimizer step cap (0 = none)");
  cmd->add_flag("--quiet,-q", o.quiet, "Only print failures");
}

ExperimentSpec build_spec(const Overrides& o, std::vector<Stage> stages) {
  ExperimentSpec spec = o.spec_file.empty() ? ExperimentSpec{} : ExperimentSpec::from_json_file(o.spec_file);
  if (!o.datasets.empty()) spec.datasets = o.datasets;
  if (!o.horizons.empty()) spec.horizons = o.horizons;
  if (!o.scales.empty()) spec.scales = o.scales;
  if (o.lambda) spec.lambda = *o.lambda;
  if (!o.seeds.empty()) spec.seeds = o.seeds;
  if (!o.out.empty()) spec.out_dir = o.out;
  if (!o.registry.empty()) spec.registry_path = o.registry;
  if (o.jobs) spec.jobs = *o.jobs;
  if (!o.precision.empty()) spec.precision = tsprobe::parse_precision(o.precision);
  if (o.max_epochs) spec.train.max_epochs = *o.max_epochs;
  if (o.max_batches) spec.train.max_batches_per_epoch = *o.max_batches;
  if (o.harvest_cap) spec.harvest_cap = *o.harvest_cap;
  if (o.sae_epochs) spec.sae.max_epochs = *o.sae_epochs;
  if (o.sae_steps) spec.sae.max_steps = *o.sae_steps;
  spec.stages = std::move(stages);
  return spec;
}

int execute(const ExperimentSpec& spec, bool quiet) {
  const auto summary = tsprobe::run_experiment(spec, [quiet](const tsprobe::StageEvent& e) {
    if (quiet && e.outcome != tsprobe::StageOutcome::kFailed) return;
    auto& stream = e.outcome == tsprobe::StageOutcome::kFailed ? std::cerr : std::cout;
    stream << "[" << e.cell << "] " << e.stage << ": " << tsprobe::to_string(e.outcome);
    if (!e.detail.empty()) stream << " (" << e.detail << ")";
    stream << std::endl;
  });
  if (!quiet) {
    std::cout << summary.count(tsprobe::StageOutcome::kRan) << " ran, "
              << summary.count(tsprobe::StageOutcome::kSkipped) << " skipped, "
              << summary.count(tsprobe::StageOutcome::kFailed) << " failed" << std::endl;
  }
  return summary.ok() ? 0 : 1;
}

}  // namespace

int main(int argc, char** argv) {
  tsprobe::keep_heap_warm();
  CLI::App app{"Sparse autoencoder probes for a patch transformer forecaster"};
  app.require_subcommand(1);

  struct Command {
    const char* name;
    const char* help;
    std::vector<Stage> stages;
  };
  const std::vector<Command> commands = {
      {"train", "Train forecasters", {Stage::kTrain}},
      {"harvest", "Harvest post-GELU activations from trained forecasters", {Stage::kHarvest}},
      {"sae", "Train sparse autoencoders on harvested activations", {Stage::kSae}},
      {"probe", "Run substitution, dead-latent, causal and ablation probes", {Stage::kProbes}},
      {"sweep", "Train the lambda sweep dictionaries", {Stage::kSweep}},
  };

  Overrides o;
  std::vector<std::pair<CLI::App*, std::vector<Stage>>> stage_cmds;
  for (const auto& c : commands) {
    CLI::App* cmd = app.add_subcommand(c.name, c.help);
    add_grid_flags(cmd, o);
    stage_cmds.emplace_back(cmd, c.stages);
  }
  CLI::App* run = app.add_subcommand("run", "Run pipeline stages end to end");
  add_grid_flags(run, o);
  run->add_option("--stages", o.stages, "Comma separated stages or 'all'");

  std::string report_dir = "runs";
  CLI::App* report = app.add_subcommand("report", "Render tables from the reports in an output directory");
  report->add_option("--out", report_dir, "Output directory holding cell reports");

  std::string synth_path, synth_name = "synthetic";
  std::size_t synth_rows = 17420, synth_channels = 7;
  std::uint64_t synth_seed = 0;
  CLI::App* synth = app.add_subcommand("synth", "Write a synthetic multichannel series as CSV");
  synth->add_option("path", synth_path, "Output CSV path")->required();
  synth->add_option("--rows", synth_rows, "Number of rows");
  synth->add_option("--channels", synth_channels, "Number of channels");
  synth->add_option("--seed", synth_seed, "Generator seed");

  std::string grid_path;
  CLI::App* grid = app.add_subcommand("grid", "Write the full benchmark grid as a spec file");
  grid->add_option("path", grid_path, "Output JSON path")->required();

  CLI11_PARSE(app, argc, argv);

  try {
    for (const auto& [cmd, stages] : stage_cmds) {
      if (cmd->parsed()) return execute(build_spec(o, stages), o.quiet);
    }
    if (run->parsed()) return execute(build_spec(o, tsprobe::parse_stages(o.stages)), o.quiet);
    if (report->parsed()) {
      const auto r = tsprobe::render_tables(report_dir);
      std::ifstream text(std::filesystem::path(report_dir) / "tables.txt");
      std::cout << text.rdbuf();
      return r.complete_cells == r.cells ? 0 : 1;
    }
    if (synth->parsed()) {
      tsprobe::write_csv(tsprobe::synthetic_series(synth_name, synth_rows, synth_channels, synth_seed), synth_path);
      std::cout << "wrote " << synth_rows << " x " << synth_channels << " to " << synth_path << std::endl;
      return 0;
    }
    if (grid->parsed()) {
      std::ofstream out(grid_path);
      out << tsprobe::ExperimentSpec::benchmark_grid().to_json().dump(2) << '\n';
      return out ? 0 : 1;
    }
  } catch (const tsprobe::ConfigError& e) {
    std::cerr << "config error: " << e.what() << std::endl;
    return 2;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << std::endl;
    return 1;
  }
  return 0;
}
