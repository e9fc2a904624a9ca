#include "tsprobe/data.hpp"

#include <algorithm>
#include <charconv>
#include <cmath>
#include <cstdlib>
#include <fstream>
#include <numbers>
#include <numeric>
#include <sstream>

#include <json.hpp>

namespace tsprobe {

SplitRule parse_split_rule(const std::string& text) {
  if (text == "ett_fixed_hourly" || text == "ett_fixed") return SplitRule::kEttHourly;
  if (text == "ett_fixed_15min") return SplitRule::kEttMinute;
  if (text == "ratio_70_10_20") return SplitRule::kRatio;
  throw ConfigError("unknown split rule '" + text + "'");
}

std::string to_string(SplitRule rule) {
  switch (rule) {
    case SplitRule::kEttHourly:
      return "ett_fixed_hourly";
    case SplitRule::kEttMinute:
      return "ett_fixed_15min";
    case SplitRule::kRatio:
      return "ratio_70_10_20";
  }
  return "?";
}

std::string to_string(Partition p) {
  switch (p) {
    case Partition::kTrain:
      return "train";
    case Partition::kVal:
      return "val";
    case Partition::kTest:
      return "test";
  }
  return "?";
}

namespace {

std::vector<std::string_view> split_commas(std::string_view line) {
  std::vector<std::string_view> cells;
  std::size_t begin = 0;
  while (true) {
    const std::size_t comma = line.find(',', begin);
    if (comma == std::string_view::npos) {
      cells.push_back(line.substr(begin));
      break;
    }
    cells.push_back(line.substr(begin, comma - begin));
    begin = comma + 1;
  }
  return cells;
}

std::string_view trim(std::string_view s) {
  while (!s.empty() && (s.front() == ' ' || s.front() == '"' || s.front() == '\r')) s.remove_prefix(1);
  while (!s.empty() && (s.back() == ' ' || s.back() == '"' || s.back() == '\r')) s.remove_suffix(1);
  return s;
}

}  // namespace

SeriesDataset load_csv(const std::filesystem::path& path, const std::string& name, std::size_t min_rows) {
  std::ifstream in(path);
  if (!in) throw DataError("cannot open dataset file " + path.string());

  SeriesDataset ds;
  ds.name = name;
  std::string line;
  if (!std::getline(in, line)) throw DataError(path.string() + ": empty file");
  if (line.size() >= 3 && static_cast<unsigned char>(line[0]) == 0xEF) line.erase(0, 3);  // UTF-8 BOM
  const auto header = split_commas(line);
  if (header.size() < 2 || trim(header[0]) != "date") {
    throw DataError(path.string() + ": first header column must be 'date'");
  }
  for (std::size_t c = 1; c < header.size(); ++c) ds.channel_names.emplace_back(trim(header[c]));
  ds.channels = ds.channel_names.size();

  std::size_t row = 0;
  while (std::getline(in, line)) {
    if (trim(line).empty()) continue;
    const auto cells = split_commas(line);
    if (cells.size() != ds.channels + 1) {
      throw DataError(path.string() + ": row " + std::to_string(row + 1) + " has " + std::to_string(cells.size()) +
                      " columns, expected " + std::to_string(ds.channels + 1));
    }
    for (std::size_t c = 1; c < cells.size(); ++c) {
      const auto cell = trim(cells[c]);
      double v = 0.0;
      const auto [ptr, ec] = std::from_chars(cell.data(), cell.data() + cell.size(), v);
      if (ec != std::errc() || ptr != cell.data() + cell.size() || !std::isfinite(v)) {
        throw DataError(path.string() + ": non-numeric cell at row " + std::to_string(row + 1) + ", column " +
                        std::to_string(c) + " ('" + ds.channel_names[c - 1] + "'): '" + std::string(cell) + "'");
      }
      ds.values.push_back(v);
    }
    ++row;
  }
  ds.rows = row;
  ds.raw_rows = row;
  if (ds.rows < min_rows) {
    throw DataError(path.string() + ": insufficient rows (" + std::to_string(ds.rows) + " < " +
                    std::to_string(min_rows) + " = lookback + max horizon)");
  }
  return ds;
}

void write_csv(const SeriesDataset& ds, const std::filesystem::path& path) {
  std::ofstream out(path);
  if (!out) throw DataError("cannot write " + path.string());
  out << "date";
  for (const auto& c : ds.channel_names) out << ',' << c;
  out << '\n';
  static constexpr int kDays[] = {31, 28, 31, 30, 31, 30, 31, 31, 30, 31, 30, 31};
  int year = 2016, month = 7, day = 1, hour = 0;
  char buf[64];
  for (std::size_t r = 0; r < ds.rows; ++r) {
    std::snprintf(buf, sizeof(buf), "%04d-%02d-%02d %02d:00:00", year, month, day, hour);
    out << buf;
    for (std::size_t c = 0; c < ds.channels; ++c) {
      std::snprintf(buf, sizeof(buf), "%.17g", ds.at(r, c));
      out << ',' << buf;
    }
    out << '\n';
    if (++hour == 24) {
      hour = 0;
      const bool leap = (year % 4 == 0 && year % 100 != 0) || year % 400 == 0;
      const int days = kDays[month - 1] + (month == 2 && leap ? 1 : 0);
      if (++day > days) {
        day = 1;
        if (++month > 12) {
          month = 1;
          ++year;
        }
      }
    }
  }
}

SplitBounds compute_split_bounds(std::size_t rows, SplitRule rule) {
  SplitBounds b;
  if (rule == SplitRule::kRatio) {
    b.train_end = static_cast<std::size_t>(std::floor(0.7 * static_cast<double>(rows)));
    b.val_end = static_cast<std::size_t>(std::floor(0.8 * static_cast<double>(rows)));
    b.test_end = rows;
  } else {
    const std::size_t per_month = (rule == SplitRule::kEttHourly ? 1 : 4) * 30 * 24;
    b.train_end = 12 * per_month;
    b.val_end = 16 * per_month;
    b.test_end = 20 * per_month;
    if (rows < b.test_end) {
      throw DataError("fixed ETT split needs " + std::to_string(b.test_end) + " rows, have " + std::to_string(rows));
    }
  }
  if (!(0 < b.train_end && b.train_end < b.val_end && b.val_end <= b.test_end)) {
    throw DataError("degenerate split for " + std::to_string(rows) + " rows");
  }
  return b;
}

SeriesDataset assign_splits(SeriesDataset ds, SplitRule rule) {
  const SplitBounds b = compute_split_bounds(ds.rows, rule);
  if (b.test_end < ds.rows) {
    ds.values.resize(b.test_end * ds.channels);
    ds.rows = b.test_end;
  }
  ds.bounds = b;
  return ds;
}

SeriesDataset fit_transform_scaler(SeriesDataset ds) {
  if (!ds.bounds) throw DataError(ds.name + ": assign splits before fitting the scaler");
  const std::size_t n = ds.bounds->train_end;
  Scaler s;
  s.mean.assign(ds.channels, 0.0);
  s.std.assign(ds.channels, 0.0);
  for (std::size_t c = 0; c < ds.channels; ++c) {
    double total = 0.0;
    for (std::size_t r = 0; r < n; ++r) total += ds.at(r, c);
    const double mu = total / static_cast<double>(n);
    double ss = 0.0;
    for (std::size_t r = 0; r < n; ++r) {
      const double d = ds.at(r, c) - mu;
      ss += d * d;
    }
    const double sd = std::sqrt(ss / static_cast<double>(n));
    if (sd < 1e-8) {
      throw DataError(ds.name + ": constant channel '" + ds.channel_names[c] + "' in the train partition");
    }
    s.mean[c] = mu;
    s.std[c] = sd;
  }
  for (std::size_t r = 0; r < ds.rows; ++r) {
    for (std::size_t c = 0; c < ds.channels; ++c) {
      double& v = ds.values[r * ds.channels + c];
      v = (v - s.mean[c]) / s.std[c];
    }
  }
  ds.scaler = std::move(s);
  return ds;
}

std::vector<double> inverse_transform(const SeriesDataset& ds) {
  if (!ds.scaler) throw DataError(ds.name + ": dataset is not standardized");
  std::vector<double> raw(ds.values.size());
  for (std::size_t r = 0; r < ds.rows; ++r) {
    for (std::size_t c = 0; c < ds.channels; ++c) {
      raw[r * ds.channels + c] = ds.at(r, c) * ds.scaler->std[c] + ds.scaler->mean[c];
    }
  }
  return raw;
}

StartRange window_starts(const SeriesDataset& ds, Partition partition, std::size_t lookback, std::size_t horizon) {
  if (!ds.bounds) throw DataError(ds.name + ": splits not assigned");
  const SplitBounds& b = *ds.bounds;
  std::size_t region_begin = 0;
  std::size_t region_end = 0;
  switch (partition) {
    case Partition::kTrain:
      region_begin = 0;
      region_end = b.train_end;
      break;
    case Partition::kVal:
      region_begin = b.train_end >= lookback ? b.train_end - lookback : 0;
      region_end = b.val_end;
      break;
    case Partition::kTest:
      region_begin = b.val_end >= lookback ? b.val_end - lookback : 0;
      region_end = b.test_end;
      break;
  }
  const std::size_t span = lookback + horizon;
  if (region_end < region_begin + span) return {region_begin, 0};
  return {region_begin, region_end - region_begin - span + 1};
}

template <typename T>
WindowStream<T>::WindowStream(const SeriesDataset& ds, Partition partition, std::size_t lookback, std::size_t horizon,
                              std::size_t batch_size, std::optional<std::uint64_t> shuffle_seed)
    : ds_(&ds), lookback_(lookback), horizon_(horizon), batch_size_(batch_size) {
  if (batch_size == 0) throw ConfigError("batch size must be positive");
  const StartRange range = window_starts(ds, partition, lookback, horizon);
  starts_.resize(range.count);
  std::iota(starts_.begin(), starts_.end(), range.first);
  if (shuffle_seed) {
    std::mt19937_64 rng(*shuffle_seed);
    std::shuffle(starts_.begin(), starts_.end(), rng);
  }
}

template <typename T>
void WindowStream<T>::reset() {
  cursor_ = 0;
}

template <typename T>
bool WindowStream<T>::next(WindowBatch<T>& batch) {
  if (cursor_ >= starts_.size()) return false;
  const std::size_t n = std::min(batch_size_, starts_.size() - cursor_);
  batch = make_batch(std::span<const std::size_t>(starts_).subspan(cursor_, n));
  cursor_ += n;
  return true;
}

template <typename T>
WindowBatch<T> WindowStream<T>::make_batch(std::span<const std::size_t> starts) const {
  const std::size_t n = starts.size();
  const std::size_t ch = ds_->channels;
  WindowBatch<T> batch;
  batch.horizon = horizon_;
  batch.starts.assign(starts.begin(), starts.end());
  batch.inputs = Tensor<T>({n, lookback_, ch});
  batch.targets = Tensor<T>({n, horizon_, ch});
  T* in = batch.inputs.data().data();
  T* tg = batch.targets.data().data();
  for (std::size_t i = 0; i < n; ++i) {
    const double* src = ds_->values.data() + starts[i] * ch;
    for (std::size_t k = 0; k < lookback_ * ch; ++k) in[i * lookback_ * ch + k] = static_cast<T>(src[k]);
    const double* tsrc = src + lookback_ * ch;
    for (std::size_t k = 0; k < horizon_ * ch; ++k) tg[i * horizon_ * ch + k] = static_cast<T>(tsrc[k]);
  }
  return batch;
}

template class WindowStream<float>;
template class WindowStream<double>;

SeriesDataset synthetic_series(const std::string& name, std::size_t rows, std::size_t channels, std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  std::normal_distribution<double> normal(0.0, 1.0);
  std::uniform_real_distribution<double> unif(0.0, 1.0);
  SeriesDataset ds;
  ds.name = name;
  ds.rows = rows;
  ds.raw_rows = rows;
  ds.channels = channels;
  ds.values.assign(rows * channels, 0.0);
  for (std::size_t c = 0; c < channels; ++c) {
    ds.channel_names.push_back(c + 1 == channels ? "OT" : "ch" + std::to_string(c));
    const double level = 5.0 + 10.0 * unif(rng);
    const double daily_amp = 1.0 + 3.0 * unif(rng);
    const double weekly_amp = 0.5 + 1.5 * unif(rng);
    const double phase_d = 2.0 * std::numbers::pi * unif(rng);
    const double phase_w = 2.0 * std::numbers::pi * unif(rng);
    const double drift = (unif(rng) - 0.5) * 4.0 / static_cast<double>(rows);
    const double phi = 0.6 + 0.3 * unif(rng);
    const double noise = 0.3 + 0.5 * unif(rng);
    double ar = 0.0;
    for (std::size_t r = 0; r < rows; ++r) {
      const double t = static_cast<double>(r);
      ar = phi * ar + noise * normal(rng);
      ds.values[r * channels + c] = level + daily_amp * std::sin(2.0 * std::numbers::pi * t / 24.0 + phase_d) +
                                    weekly_amp * std::sin(2.0 * std::numbers::pi * t / 168.0 + phase_w) +
                                    drift * t * level + ar;
    }
  }
  return ds;
}

DatasetRegistry DatasetRegistry::defaults() {
  DatasetRegistry r;
  r.entries_ = {
      {"etth1", {"ETTh1.csv", SplitRule::kEttHourly, 16}},
      {"etth2", {"ETTh2.csv", SplitRule::kEttHourly, 16}},
      {"ettm1", {"ETTm1.csv", SplitRule::kEttMinute, 16}},
      {"ettm2", {"ETTm2.csv", SplitRule::kEttMinute, 16}},
      {"exchange", {"exchange_rate.csv", SplitRule::kRatio, 16}},
      {"weather", {"weather.csv", SplitRule::kRatio, 64}},
      {"electricity", {"electricity.csv", SplitRule::kRatio, 128}},
      {"traffic", {"traffic.csv", SplitRule::kRatio, 96}},
  };
  return r;
}

DatasetRegistry DatasetRegistry::from_json_text(const std::string& text) {
  const auto j = nlohmann::json::parse(text);
  DatasetRegistry r;
  for (const auto& [name, e] : j.items()) {
    DatasetEntry entry;
    entry.path = e.at("path").get<std::string>();
    entry.split_rule = parse_split_rule(e.at("split_rule").get<std::string>());
    entry.d_model = e.at("d_model").get<std::size_t>();
    r.entries_[name] = entry;
  }
  return r;
}

DatasetRegistry DatasetRegistry::from_json_file(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw DataError("cannot open registry " + path.string());
  std::stringstream ss;
  ss << in.rdbuf();
  return from_json_text(ss.str());
}

std::string DatasetRegistry::to_json_text() const {
  nlohmann::json j = nlohmann::json::object();
  for (const auto& [name, e] : entries_) {
    j[name] = {{"path", e.path}, {"split_rule", to_string(e.split_rule)}, {"d_model", e.d_model}};
  }
  return j.dump(2);
}

const DatasetEntry& DatasetRegistry::at(const std::string& name) const {
  const auto it = entries_.find(name);
  if (it == entries_.end()) throw ConfigError("dataset '" + name + "' is not in the registry");
  return it->second;
}

std::filesystem::path DatasetRegistry::data_root() {
  if (const char* env = std::getenv("TSPROBE_DATA_ROOT"); env != nullptr && *env != '\0') return env;
  return std::filesystem::current_path();
}

std::filesystem::path DatasetRegistry::resolve(const std::string& name, const std::filesystem::path& root) const {
  const std::filesystem::path p = at(name).path;
  return p.is_absolute() ? p : root / p;
}

SeriesDataset load_dataset(const DatasetRegistry& registry, const std::string& name,
                           const std::filesystem::path& root, std::size_t min_rows) {
  const auto& entry = registry.at(name);
  auto ds = load_csv(registry.resolve(name, root), name, min_rows);
  return fit_transform_scaler(assign_splits(std::move(ds), entry.split_rule));
}

}  // namespace tsprobe
