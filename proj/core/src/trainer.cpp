#include "tsprobe/trainer.hpp"

#include <chrono>
#include <cmath>
#include <cstdio>
#include <fstream>

#include "tsprobe/checkpoint.hpp"
#include "tsprobe/ops.hpp"
#include "tsprobe/optim.hpp"

namespace tsprobe {

void TrainConfig::validate() const {
  if (!(lr > 0.0)) throw ConfigError("train config: lr must be positive");
  if (plateau_patience >= patience) throw ConfigError("train config: scheduler patience must be below early-stop patience");
  if (max_epochs == 0 || batch_size == 0) throw ConfigError("train config: zero epochs or batch size");
  if (!(clip_norm > 0.0)) throw ConfigError("train config: clip norm must be positive");
}

nlohmann::json TrainConfig::to_json() const {
  return {{"max_epochs", max_epochs},
          {"patience", patience},
          {"lr", lr},
          {"weight_decay", weight_decay},
          {"clip_norm", clip_norm},
          {"plateau_factor", plateau_factor},
          {"plateau_patience", plateau_patience},
          {"min_lr", min_lr},
          {"seed", seed},
          {"batch_size", batch_size},
          {"max_batches_per_epoch", max_batches_per_epoch}};
}

TrainConfig TrainConfig::from_json(const nlohmann::json& j) {
  TrainConfig c;
  c.max_epochs = j.value("max_epochs", c.max_epochs);
  c.patience = j.value("patience", c.patience);
  c.lr = j.value("lr", c.lr);
  c.weight_decay = j.value("weight_decay", c.weight_decay);
  c.clip_norm = j.value("clip_norm", c.clip_norm);
  c.plateau_factor = j.value("plateau_factor", c.plateau_factor);
  c.plateau_patience = j.value("plateau_patience", c.plateau_patience);
  c.min_lr = j.value("min_lr", c.min_lr);
  c.seed = j.value("seed", c.seed);
  c.batch_size = j.value("batch_size", c.batch_size);
  c.max_batches_per_epoch = j.value("max_batches_per_epoch", c.max_batches_per_epoch);
  return c;
}

void TrainLog::write_csv(const std::filesystem::path& path) const {
  std::ofstream out(path);
  if (!out) throw DataError("cannot write " + path.string());
  out << "epoch,train_mse,val_mse,lr,seconds\n";
  char buf[160];
  for (const auto& e : epochs) {
    std::snprintf(buf, sizeof(buf), "%zu,%.17g,%.17g,%.17g,%.3f\n", e.epoch, e.train_mse, e.val_mse, e.lr, e.seconds);
    out << buf;
  }
}

bool EarlyStopping::update(double value) {
  if (!seen_ || value < best_) {
    seen_ = true;
    best_ = value;
    bad_epochs_ = 0;
    return true;
  }
  ++bad_epochs_;
  return false;
}

double PlateauScheduler::step(double value) {
  if (!seen_ || value < best_) {
    seen_ = true;
    best_ = value;
    bad_epochs_ = 0;
    return lr_;
  }
  if (++bad_epochs_ >= patience_) {
    lr_ = std::max(lr_ * factor_, min_lr_);
    bad_epochs_ = 0;
  }
  return lr_;
}

template <typename T>
TrainResult<T> train_forecaster(const SeriesDataset& ds, const ForecasterConfig& config, const TrainConfig& train,
                                const ValOverride& val_override) {
  config.validate();
  train.validate();
  TrainResult<T> result;
  result.params = ForecasterParams<T>::init(config, train.seed);
  ForecasterParams<T>& params = result.params;
  ForecasterParams<T> best = params;

  std::vector<Shape> shapes;
  for (const auto& ref : params.named()) shapes.push_back(ref.value->shape());
  OptimizerState opt = OptimizerState::for_shapes(shapes, train.lr, train.weight_decay);
  PlateauScheduler scheduler(train.lr, train.plateau_factor, train.plateau_patience, train.min_lr);
  EarlyStopping stopper(train.patience);
  std::mt19937_64 dropout_rng(train.seed + 1);

  for (std::size_t epoch = 1; epoch <= train.max_epochs; ++epoch) {
    const auto t0 = std::chrono::steady_clock::now();
    WindowStream<T> stream(ds, Partition::kTrain, config.lookback, config.horizon, train.batch_size,
                           train.seed * 1000003ULL + epoch);
    if (stream.num_windows() == 0) throw DataError(ds.name + ": no train windows at horizon " + std::to_string(config.horizon));
    WindowBatch<T> batch;
    double loss_total = 0.0;
    std::size_t loss_elems = 0;
    std::size_t batch_index = 0;
    while (stream.next(batch)) {
      if (train.max_batches_per_epoch > 0 && batch_index >= train.max_batches_per_epoch) break;
      Tape<T> tape;
      const auto bound = bind_params(tape, params, true);
      const Var<T> pred = forward_flat<T>(tape, bound, config, batch.inputs, nullptr, &dropout_rng);
      const Tensor<T> target = channels_to_rows(batch.targets);
      const Var<T> loss = mse_loss(pred, target);
      const double loss_value = static_cast<double>(loss.value()[0]);
      if (!std::isfinite(loss_value)) {
        throw NonFiniteError("non-finite training loss at epoch " + std::to_string(epoch) + ", batch " +
                             std::to_string(batch_index));
      }
      tape.backward(loss);
      std::vector<Tensor<T>> grads;
      grads.reserve(bound.vars.size());
      for (const auto& v : bound.vars) grads.push_back(tape.grad(v));
      clip_grad_norm<T>(grads, train.clip_norm);
      opt.lr = scheduler.lr();
      const auto refs = params.named();
      adamw_step<T>(refs, grads, opt);
      loss_total += loss_value * static_cast<double>(target.size());
      loss_elems += target.size();
      ++batch_index;
    }

    double val = evaluate(params, config, ds, Partition::kVal, train.batch_size).mse;
    if (val_override) val = val_override(epoch, val);
    EpochRecord rec;
    rec.epoch = epoch;
    rec.train_mse = loss_total / static_cast<double>(loss_elems);
    rec.val_mse = val;
    rec.lr = scheduler.lr();
    rec.seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
    result.log.epochs.push_back(rec);

    if (stopper.update(val)) {
      best = params;
      result.log.best_epoch = epoch;
      result.log.best_val = val;
    }
    scheduler.step(val);
    if (stopper.should_stop()) {
      result.log.early_stopped = true;
      break;
    }
  }
  result.params = std::move(best);
  return result;
}

template <typename T>
EvalResult evaluate(const ForecasterParams<T>& params, const ForecasterConfig& config, const SeriesDataset& ds,
                    Partition partition, std::size_t batch_size) {
  WindowStream<T> stream(ds, partition, config.lookback, config.horizon, batch_size);
  EvalResult r;
  r.windows = stream.num_windows();
  if (r.windows == 0) return r;
  double se = 0.0, ae = 0.0;
  std::size_t count = 0;
  WindowBatch<T> batch;
  while (stream.next(batch)) {
    const Tensor<T> pred = forward(params, config, batch.inputs);
    for (std::size_t i = 0; i < pred.size(); ++i) {
      const double d = static_cast<double>(pred[i]) - static_cast<double>(batch.targets[i]);
      se += d * d;
      ae += std::abs(d);
    }
    count += pred.size();
  }
  r.mse = se / static_cast<double>(count);
  r.mae = ae / static_cast<double>(count);
  return r;
}

template <typename T>
void save_forecaster(const std::filesystem::path& path, const ForecasterParams<T>& params,
                     const ForecasterConfig& config, const nlohmann::json& extra_meta) {
  nlohmann::json meta = extra_meta.is_object() ? extra_meta : nlohmann::json::object();
  meta["kind"] = "forecaster";
  meta["config"] = config.to_json();
  save_bundle<T>(path, meta, params.named());
}

template <typename T>
LoadedForecaster<T> load_forecaster(const std::filesystem::path& path) {
  auto bundle = load_bundle<T>(path);
  if (bundle.meta.value("kind", "") != "forecaster") throw DataError(path.string() + ": not a forecaster checkpoint");
  LoadedForecaster<T> out;
  out.config = ForecasterConfig::from_json(bundle.meta.at("config"));
  out.config.validate();
  out.meta = bundle.meta;
  ForecasterParams<T> p = ForecasterParams<T>::init(out.config, 0);
  for (auto& ref : p.named()) {
    const Tensor<T>& stored = bundle.at(ref.name);
    if (stored.shape() != ref.value->shape()) {
      throw DataError(path.string() + ": tensor '" + ref.name + "' has shape " + shape_str(stored.shape()) +
                      ", config implies " + shape_str(ref.value->shape()));
    }
    *ref.value = stored;
  }
  out.params = std::move(p);
  return out;
}

#define TSPROBE_INSTANTIATE_TRAINER(T)                                                                              \
  template TrainResult<T> train_forecaster<T>(const SeriesDataset&, const ForecasterConfig&, const TrainConfig&,     \
                                              const ValOverride&);                                                  \
  template EvalResult evaluate<T>(const ForecasterParams<T>&, const ForecasterConfig&, const SeriesDataset&,        \
                                  Partition, std::size_t);                                                          \
  template void save_forecaster<T>(const std::filesystem::path&, const ForecasterParams<T>&,                        \
                                   const ForecasterConfig&, const nlohmann::json&);                                 \
  template LoadedForecaster<T> load_forecaster<T>(const std::filesystem::path&);

TSPROBE_INSTANTIATE_TRAINER(float)
TSPROBE_INSTANTIATE_TRAINER(double)

}  // namespace tsprobe
