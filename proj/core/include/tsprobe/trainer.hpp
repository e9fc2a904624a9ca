#pragma once

#include <cstdint>
#include <filesystem>
#include <functional>
#include <string>
#include <vector>

#include <json.hpp>

#include "tsprobe/data.hpp"
#include "tsprobe/forecaster.hpp"

namespace tsprobe {

struct TrainConfig {
  std::size_t max_epochs = 80;
  std::size_t patience = 15;
  double lr = 2e-4;
  double weight_decay = 0.0;
  double clip_norm = 1.0;
  double plateau_factor = 0.5;
  std::size_t plateau_patience = 3;
  double min_lr = 1e-6;
  std::uint64_t seed = 42;
  std::size_t batch_size = 128;
  /// 0 means a full pass over the train windows.
  std::size_t max_batches_per_epoch = 0;

  void validate() const;
  nlohmann::json to_json() const;
  static TrainConfig from_json(const nlohmann::json& j);
};

struct EpochRecord {
  std::size_t epoch = 0;  // 1-based
  double train_mse = 0.0;
  double val_mse = 0.0;
  double lr = 0.0;
  double seconds = 0.0;
};

struct TrainLog {
  std::vector<EpochRecord> epochs;
  std::size_t best_epoch = 0;
  double best_val = 0.0;
  bool early_stopped = false;

  /// epoch,train_mse,val_mse,lr,seconds
  void write_csv(const std::filesystem::path& path) const;
};

/// Counts consecutive epochs without strict improvement of the running best.
class EarlyStopping {
 public:
  explicit EarlyStopping(std::size_t patience) : patience_(patience) {}
  /// Returns true when `value` is a new best.
  bool update(double value);
  bool should_stop() const { return bad_epochs_ >= patience_; }
  double best() const { return best_; }
  std::size_t bad_epochs() const { return bad_epochs_; }

 private:
  std::size_t patience_;
  std::size_t bad_epochs_ = 0;
  double best_ = 0.0;
  bool seen_ = false;
};

/// Multiplies the learning rate by `factor` once `patience` consecutive epochs
/// fail to improve, then restarts the count. Never drops below min_lr.
class PlateauScheduler {
 public:
  PlateauScheduler(double lr, double factor, std::size_t patience, double min_lr)
      : lr_(lr), factor_(factor), patience_(patience), min_lr_(min_lr) {}
  double step(double value);
  double lr() const { return lr_; }

 private:
  double lr_;
  double factor_;
  std::size_t patience_;
  double min_lr_;
  std::size_t bad_epochs_ = 0;
  double best_ = 0.0;
  bool seen_ = false;
};

template <typename T>
struct TrainResult {
  ForecasterParams<T> params;
  TrainLog log;
};

/// Validation losses per epoch are routed through `val_override` when set; used
/// to drive the stopping logic from scripted sequences in tests.
using ValOverride = std::function<double(std::size_t epoch, double measured)>;

template <typename T>
TrainResult<T> train_forecaster(const SeriesDataset& ds, const ForecasterConfig& config, const TrainConfig& train,
                                 const ValOverride& val_override = nullptr);

struct EvalResult {
  double mse = 0.0;
  double mae = 0.0;
  std::size_t windows = 0;
};

/// Dropout off; metrics averaged over every element of every window, in scaled space.
template <typename T>
EvalResult evaluate(const ForecasterParams<T>& params, const ForecasterConfig& config, const SeriesDataset& ds,
                    Partition partition, std::size_t batch_size = 128);

template <typename T>
void save_forecaster(const std::filesystem::path& path, const ForecasterParams<T>& params,
                     const ForecasterConfig& config, const nlohmann::json& extra_meta = {});

template <typename T>
struct LoadedForecaster {
  ForecasterParams<T> params;
  ForecasterConfig config;
  nlohmann::json meta;
};

template <typename T>
LoadedForecaster<T> load_forecaster(const std::filesystem::path& path);

}  // namespace tsprobe
