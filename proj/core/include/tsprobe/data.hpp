#pragma once

#include <cstdint>
#include <filesystem>
#include <map>
#include <optional>
#include <random>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

#include "tsprobe/tensor.hpp"

namespace tsprobe {

class DataError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

inline constexpr std::size_t kLookback = 336;
inline constexpr std::size_t kHorizons[] = {96, 192, 336, 720};
inline constexpr std::size_t kMaxHorizon = 720;

enum class SplitRule {
  kEttHourly,   // 12/4/4 months of hourly rows
  kEttMinute,   // same calendar span at 15-minute resolution
  kRatio,       // 70/10/20 chronological
};

SplitRule parse_split_rule(const std::string& text);
std::string to_string(SplitRule rule);

enum class Partition { kTrain, kVal, kTest };
std::string to_string(Partition p);

/// Row indices delimiting the partitions: train [0, train_end), val
/// [train_end, val_end), test [val_end, test_end).
struct SplitBounds {
  std::size_t train_end = 0;
  std::size_t val_end = 0;
  std::size_t test_end = 0;
  friend bool operator==(const SplitBounds&, const SplitBounds&) = default;
};

/// Per-channel standardization statistics fitted on the train rows.
struct Scaler {
  std::vector<double> mean;
  std::vector<double> std;
};

struct SeriesDataset {
  std::string name;
  std::vector<std::string> channel_names;
  std::size_t rows = 0;
  std::size_t channels = 0;
  /// Row-major [rows x channels].
  std::vector<double> values;
  /// Row count as parsed, before any split truncation.
  std::size_t raw_rows = 0;
  std::optional<SplitBounds> bounds;
  std::optional<Scaler> scaler;

  double at(std::size_t row, std::size_t channel) const { return values[row * channels + channel]; }
};

/// Parses a `date,<ch0>,<ch1>,...` CSV. Timestamps are kept out of the values.
/// Throws DataError for a missing file, a non-numeric cell (row and column are
/// reported) or fewer than min_rows data rows.
SeriesDataset load_csv(const std::filesystem::path& path, const std::string& name,
                       std::size_t min_rows = kLookback + kMaxHorizon);

/// Writes a dataset back out in the same layout, with synthetic hourly dates.
void write_csv(const SeriesDataset& ds, const std::filesystem::path& path);

SplitBounds compute_split_bounds(std::size_t rows, SplitRule rule);

/// Assigns bounds. The fixed ETT rule drops rows past the test partition so that
/// test_end equals the row count.
SeriesDataset assign_splits(SeriesDataset ds, SplitRule rule);

/// Fits mean and population std per channel over train rows, then standardizes every row.
/// Throws DataError naming the channel whose std is below 1e-8.
SeriesDataset fit_transform_scaler(SeriesDataset ds);

/// Maps standardized values back to raw units.
std::vector<double> inverse_transform(const SeriesDataset& ds);

/// First and last (inclusive) valid window start for a partition. Val and test
/// windows may read `lookback` rows of context from the preceding partition.
struct StartRange {
  std::size_t first = 0;
  std::size_t count = 0;
};
StartRange window_starts(const SeriesDataset& ds, Partition partition, std::size_t lookback, std::size_t horizon);

template <typename T>
struct WindowBatch {
  Tensor<T> inputs;   // [batch x lookback x channels]
  Tensor<T> targets;  // [batch x horizon x channels]
  std::vector<std::size_t> starts;
  std::size_t horizon = 0;
};

/// Sliding-window batches over one partition. Train streams are shuffled by
/// seed; val/test streams are in chronological order.
template <typename T>
class WindowStream {
 public:
  WindowStream(const SeriesDataset& ds, Partition partition, std::size_t lookback, std::size_t horizon,
               std::size_t batch_size, std::optional<std::uint64_t> shuffle_seed = std::nullopt);

  bool next(WindowBatch<T>& batch);
  void reset();
  std::size_t num_windows() const { return starts_.size(); }
  std::size_t num_batches() const { return (starts_.size() + batch_size_ - 1) / batch_size_; }
  const std::vector<std::size_t>& starts() const { return starts_; }

  /// Batch holding exactly the given start indices.
  WindowBatch<T> make_batch(std::span<const std::size_t> starts) const;

 private:
  const SeriesDataset* ds_;
  std::size_t lookback_;
  std::size_t horizon_;
  std::size_t batch_size_;
  std::vector<std::size_t> starts_;
  std::size_t cursor_ = 0;
};

/// Deterministic ETT-like series: daily and weekly seasonality, slow drift and AR(1) noise.
SeriesDataset synthetic_series(const std::string& name, std::size_t rows, std::size_t channels, std::uint64_t seed);

struct DatasetEntry {
  std::string path;
  SplitRule split_rule = SplitRule::kRatio;
  std::size_t d_model = 16;
};

/// name -> {path, split_rule, d_model}. Relative paths resolve against the data root.
class DatasetRegistry {
 public:
  static DatasetRegistry defaults();
  static DatasetRegistry from_json_file(const std::filesystem::path& path);
  static DatasetRegistry from_json_text(const std::string& text);

  bool contains(const std::string& name) const { return entries_.count(name) > 0; }
  const DatasetEntry& at(const std::string& name) const;
  void set(const std::string& name, DatasetEntry entry) { entries_[name] = std::move(entry); }
  const std::map<std::string, DatasetEntry>& entries() const { return entries_; }
  std::string to_json_text() const;

  /// TSPROBE_DATA_ROOT if set, else the current directory.
  static std::filesystem::path data_root();
  std::filesystem::path resolve(const std::string& name, const std::filesystem::path& root) const;

 private:
  std::map<std::string, DatasetEntry> entries_;
};

/// load_csv + assign_splits + fit_transform_scaler for a registry entry.
SeriesDataset load_dataset(const DatasetRegistry& registry, const std::string& name,
                           const std::filesystem::path& root, std::size_t min_rows = kLookback + kMaxHorizon);

}  // namespace tsprobe
