#pragma once

#include <filesystem>
#include <fstream>
#include <sstream>
#include <string>

#include "tsprobe/data.hpp"
#include "tsprobe/experiment.hpp"

namespace tsprobe::testing {

/// Writes a synthetic CSV plus a one-entry registry into `dir`.
inline std::filesystem::path write_synthetic_registry(const std::filesystem::path& dir, const std::string& name,
                                                      std::size_t rows, std::size_t channels, std::size_t d_model,
                                                      SplitRule rule = SplitRule::kRatio, std::uint64_t seed = 0) {
  const auto csv = dir / (name + ".csv");
  write_csv(synthetic_series(name, rows, channels, seed), csv);
  DatasetRegistry reg;
  reg.set(name, DatasetEntry{csv.string(), rule, d_model});
  const auto path = dir / "registry.json";
  std::ofstream(path) << reg.to_json_text();
  return path;
}

/// Smallest budget that still exercises every stage.
inline ExperimentSpec tiny_spec(const std::filesystem::path& dir, std::size_t rows = 1500) {
  ExperimentSpec spec;
  spec.registry_path = write_synthetic_registry(dir, "toy", rows, 2, 4).string();
  spec.datasets = {"toy"};
  spec.horizons = {24};
  spec.out_dir = dir / "runs";
  spec.jobs = 1;
  spec.train.max_epochs = 2;
  spec.train.max_batches_per_epoch = 2;
  spec.sae.max_epochs = 2;
  spec.harvest_cap = 20000;
  spec.sweep_lambdas = {0.1, 0.001};
  spec.causal_k = 3;
  return spec;
}

inline std::string read_text(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  std::stringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

}  // namespace tsprobe::testing
