#include <gtest/gtest.h>

#include <cmath>
#include <fstream>
#include <map>
#include <random>

#include "helpers.hpp"
#include "tsprobe/data.hpp"

using namespace tsprobe;
using tsprobe::testing::TempDir;

namespace {

void write_text(const std::filesystem::path& path, const std::string& text) {
  std::ofstream out(path);
  out << text;
}

SeriesDataset ramp_dataset(std::size_t rows, std::size_t channels) {
  SeriesDataset ds;
  ds.name = "ramp";
  ds.rows = ds.raw_rows = rows;
  ds.channels = channels;
  for (std::size_t c = 0; c < channels; ++c) ds.channel_names.push_back("c" + std::to_string(c));
  std::mt19937_64 rng(3);
  std::normal_distribution<double> noise(0.0, 1.0);
  for (std::size_t r = 0; r < rows; ++r)
    for (std::size_t c = 0; c < channels; ++c) ds.values.push_back(0.01 * r * (c + 1) + noise(rng));
  return ds;
}

}  // namespace

TEST(Splits, RatioRuleArithmetic) {
  EXPECT_EQ(compute_split_bounds(1000, SplitRule::kRatio), (SplitBounds{700, 800, 1000}));
  EXPECT_EQ(compute_split_bounds(10, SplitRule::kRatio), (SplitBounds{7, 8, 10}));
}

TEST(Splits, EttFixedRules) {
  EXPECT_EQ(compute_split_bounds(17420, SplitRule::kEttHourly), (SplitBounds{8640, 11520, 14400}));
  EXPECT_EQ(compute_split_bounds(69680, SplitRule::kEttMinute), (SplitBounds{34560, 46080, 57600}));
}

TEST(Splits, EttRuleTruncatesToUsableRegion) {
  const auto ds = assign_splits(synthetic_series("etth", 17420, 2, 1), SplitRule::kEttHourly);
  ASSERT_TRUE(ds.bounds);
  EXPECT_EQ(ds.rows, 14400u);
  EXPECT_EQ(ds.raw_rows, 17420u);
  EXPECT_EQ(ds.bounds->test_end, ds.rows);
  EXPECT_LT(0u, ds.bounds->train_end);
  EXPECT_LT(ds.bounds->train_end, ds.bounds->val_end);
  EXPECT_LE(ds.bounds->val_end, ds.bounds->test_end);
}

TEST(Splits, RuleNamesRoundTrip) {
  for (SplitRule r : {SplitRule::kEttHourly, SplitRule::kEttMinute, SplitRule::kRatio}) {
    EXPECT_EQ(parse_split_rule(to_string(r)), r);
  }
  EXPECT_THROW(parse_split_rule("quarterly"), ConfigError);
}

TEST(LoadCsv, ParsesChannelsAndRows) {
  TempDir dir;
  const auto src = synthetic_series("s", 1100, 3, 4);
  write_csv(src, dir.path() / "s.csv");
  const auto ds = load_csv(dir.path() / "s.csv", "s");
  EXPECT_EQ(ds.channels, 3u);
  EXPECT_EQ(ds.rows, 1100u);
  EXPECT_EQ(ds.channel_names, src.channel_names);
  for (std::size_t i = 0; i < ds.values.size(); ++i) EXPECT_NEAR(ds.values[i], src.values[i], 1e-9 * (1 + std::abs(src.values[i])));
}

TEST(LoadCsv, Errors) {
  TempDir dir;
  EXPECT_THROW(load_csv(dir.path() / "absent.csv", "x"), DataError);

  std::string text = "date,a,b\n";
  for (int r = 0; r < 10; ++r) text += "2016-07-01 00:00:00," + std::to_string(r) + ",1\n";
  write_text(dir.path() / "short.csv", text);
  try {
    load_csv(dir.path() / "short.csv", "short", 336 + 720);
    FAIL() << "expected DataError";
  } catch (const DataError& e) {
    EXPECT_NE(std::string(e.what()).find("insufficient rows"), std::string::npos) << e.what();
  }

  write_text(dir.path() / "bad.csv", "date,a,b\nt0,1,2\nt1,3,oops\n");
  try {
    load_csv(dir.path() / "bad.csv", "bad", 1);
    FAIL() << "expected DataError";
  } catch (const DataError& e) {
    const std::string msg = e.what();
    EXPECT_NE(msg.find("row 2"), std::string::npos) << msg;
    EXPECT_NE(msg.find("b"), std::string::npos) << msg;
  }
}

TEST(Scaler, ConstantChannelRejectedByName) {
  SeriesDataset ds = ramp_dataset(100, 2);
  ds.channel_names = {"load", "flat"};
  for (std::size_t r = 0; r < ds.rows; ++r) ds.values[r * 2 + 1] = 4.2;
  ds = assign_splits(std::move(ds), SplitRule::kRatio);
  try {
    fit_transform_scaler(ds);
    FAIL() << "expected DataError";
  } catch (const DataError& e) {
    EXPECT_NE(std::string(e.what()).find("flat"), std::string::npos) << e.what();
  }
}

TEST(Scaler, SmallColumnExample) {
  SeriesDataset ds;
  ds.name = "tiny";
  ds.rows = ds.raw_rows = 10;
  ds.channels = 1;
  ds.channel_names = {"x"};
  ds.values = {1, 2, 3, 1, 2, 3, 2, 9, 9, 9};
  ds.bounds = SplitBounds{3, 6, 10};
  ds = fit_transform_scaler(std::move(ds));
  EXPECT_DOUBLE_EQ(ds.scaler->mean[0], 2.0);
  EXPECT_DOUBLE_EQ(ds.scaler->std[0], std::sqrt(2.0 / 3.0));
  EXPECT_NEAR(ds.values[0] + ds.values[1] + ds.values[2], 0.0, 1e-12);
}

TEST(Scaler, TrainStatisticsAndLeakageGuard) {
  const auto raw = assign_splits(ramp_dataset(2000, 3), SplitRule::kRatio);
  const auto ds = fit_transform_scaler(raw);
  const std::size_t train = ds.bounds->train_end;
  for (std::size_t c = 0; c < 3; ++c) {
    double m = 0.0, m2 = 0.0, val_mean = 0.0;
    for (std::size_t r = 0; r < train; ++r) m += ds.at(r, c);
    m /= train;
    for (std::size_t r = 0; r < train; ++r) m2 += (ds.at(r, c) - m) * (ds.at(r, c) - m);
    for (std::size_t r = train; r < ds.bounds->val_end; ++r) val_mean += ds.at(r, c);
    val_mean /= static_cast<double>(ds.bounds->val_end - train);
    EXPECT_NEAR(m, 0.0, 1e-6);
    EXPECT_NEAR(std::sqrt(m2 / train), 1.0, 1e-4);
    EXPECT_GT(std::abs(val_mean), 0.1);
  }
  // Statistics depend only on train rows: perturbing test rows leaves them unchanged.
  auto altered = raw;
  for (std::size_t r = raw.bounds->val_end; r < raw.rows; ++r)
    for (std::size_t c = 0; c < 3; ++c) altered.values[r * 3 + c] += 1e6;
  const auto ds2 = fit_transform_scaler(altered);
  EXPECT_EQ(ds2.scaler->mean, ds.scaler->mean);
  EXPECT_EQ(ds2.scaler->std, ds.scaler->std);
}

TEST(Scaler, InverseTransformRoundTrip) {
  const auto raw = assign_splits(ramp_dataset(500, 2), SplitRule::kRatio);
  const auto back = inverse_transform(fit_transform_scaler(raw));
  ASSERT_EQ(back.size(), raw.values.size());
  for (std::size_t i = 0; i < back.size(); ++i) EXPECT_NEAR(back[i], raw.values[i], 1e-5);
}

namespace {

SeriesDataset with_bounds(std::size_t rows, SplitBounds b) {
  SeriesDataset ds = ramp_dataset(rows, 1);
  ds.bounds = b;
  return ds;
}

/// Brute-force valid starts: inputs may reach back into earlier partitions for
/// val/test, targets must lie inside the partition.
std::vector<std::size_t> enumerate_starts(const SeriesDataset& ds, Partition p, std::size_t lookback,
                                          std::size_t horizon) {
  const auto b = *ds.bounds;
  const std::size_t lo = p == Partition::kTrain ? 0 : p == Partition::kVal ? b.train_end : b.val_end;
  const std::size_t hi = p == Partition::kTrain ? b.train_end : p == Partition::kVal ? b.val_end : b.test_end;
  std::vector<std::size_t> out;
  for (std::size_t s = 0; s + lookback + horizon <= ds.rows; ++s) {
    const std::size_t first_target = s + lookback, end = s + lookback + horizon;
    const bool inputs_ok = p == Partition::kTrain ? s >= lo : true;
    if (inputs_ok && first_target >= lo && end <= hi) out.push_back(s);
  }
  return out;
}

}  // namespace

TEST(Windows, CountExamples) {
  const auto exact = with_bounds(336 + 96, {336 + 96, 336 + 96, 336 + 96});
  EXPECT_EQ(window_starts(exact, Partition::kTrain, 336, 96).count, 1u);
  const auto extra = with_bounds(336 + 96 + 4, {336 + 96 + 4, 336 + 96 + 4, 336 + 96 + 4});
  EXPECT_EQ(window_starts(extra, Partition::kTrain, 336, 96).count, 5u);
}

TEST(Windows, MatchIndexEnumerationOracle) {
  const auto ds = assign_splits(synthetic_series("etth", 17420, 1, 2), SplitRule::kEttHourly);
  for (Partition p : {Partition::kTrain, Partition::kVal, Partition::kTest}) {
    for (std::size_t h : kHorizons) {
      WindowStream<float> stream(ds, p, kLookback, h, 128);
      EXPECT_EQ(stream.starts(), enumerate_starts(ds, p, kLookback, h)) << to_string(p) << " H=" << h;
    }
  }
  EXPECT_EQ(window_starts(ds, Partition::kTest, 336, 96).count, 2880u - 96 + 1);
}

TEST(Windows, TargetsNeverCrossTestEnd) {
  const auto ds = tsprobe::testing::tiny_dataset(600, 2);
  WindowStream<double> stream(ds, Partition::kTest, 32, 16, 7);
  WindowBatch<double> batch;
  std::size_t seen = 0;
  while (stream.next(batch)) {
    for (std::size_t s : batch.starts) EXPECT_LE(s + 32 + 16, ds.bounds->test_end);
    seen += batch.starts.size();
  }
  EXPECT_EQ(seen, stream.num_windows());
}

TEST(Windows, BatchContentsFollowStartIndices) {
  const auto ds = tsprobe::testing::tiny_dataset(400, 3);
  WindowStream<double> stream(ds, Partition::kVal, 32, 8, 4);
  WindowBatch<double> batch;
  ASSERT_TRUE(stream.next(batch));
  for (std::size_t w = 0; w < batch.starts.size(); ++w) {
    const std::size_t s = batch.starts[w];
    for (std::size_t t = 0; t < 32; ++t)
      for (std::size_t c = 0; c < 3; ++c) EXPECT_EQ(batch.inputs[(w * 32 + t) * 3 + c], ds.at(s + t, c));
    for (std::size_t t = 0; t < 8; ++t)
      for (std::size_t c = 0; c < 3; ++c) EXPECT_EQ(batch.targets[(w * 8 + t) * 3 + c], ds.at(s + 32 + t, c));
  }
}

TEST(Windows, ShuffleIsPermutationAndSeeded) {
  const auto ds = tsprobe::testing::tiny_dataset(600, 1);
  auto collect = [&](std::optional<std::uint64_t> seed) {
    WindowStream<float> stream(ds, Partition::kTrain, 32, 8, 16, seed);
    std::vector<std::size_t> order;
    WindowBatch<float> batch;
    while (stream.next(batch)) order.insert(order.end(), batch.starts.begin(), batch.starts.end());
    return order;
  };
  const auto plain = collect(std::nullopt);
  const auto a = collect(1), b = collect(2), a2 = collect(1);
  EXPECT_EQ(a, a2);
  EXPECT_NE(a, b);
  EXPECT_NE(a, plain);
  auto sa = a, sb = b;
  std::sort(sa.begin(), sa.end());
  std::sort(sb.begin(), sb.end());
  EXPECT_EQ(sa, plain);
  EXPECT_EQ(sb, plain);
}

TEST(Registry, DefaultsAndJsonRoundTrip) {
  const auto reg = DatasetRegistry::defaults();
  EXPECT_EQ(reg.entries().size(), 8u);
  EXPECT_EQ(reg.at("etth1").d_model, 16u);
  EXPECT_EQ(reg.at("weather").d_model, 64u);
  EXPECT_EQ(reg.at("electricity").d_model, 128u);
  EXPECT_EQ(reg.at("traffic").d_model, 96u);
  EXPECT_EQ(reg.at("etth1").split_rule, SplitRule::kEttHourly);
  EXPECT_EQ(reg.at("ettm2").split_rule, SplitRule::kEttMinute);
  EXPECT_EQ(reg.at("exchange").split_rule, SplitRule::kRatio);
  EXPECT_THROW(reg.at("nope"), ConfigError);
  const auto back = DatasetRegistry::from_json_text(reg.to_json_text());
  for (const auto& [name, e] : reg.entries()) {
    EXPECT_EQ(back.at(name).path, e.path);
    EXPECT_EQ(back.at(name).split_rule, e.split_rule);
    EXPECT_EQ(back.at(name).d_model, e.d_model);
  }
}

TEST(Registry, LoadDatasetAppliesSplitAndScaler) {
  TempDir dir;
  write_csv(synthetic_series("toy", 1200, 2, 9), dir.path() / "toy.csv");
  const auto reg = DatasetRegistry::from_json_text(R"({"toy": {"path": "toy.csv", "split_rule": "ratio_70_10_20", "d_model": 4}})");
  const auto ds = load_dataset(reg, "toy", dir.path());
  ASSERT_TRUE(ds.bounds && ds.scaler);
  EXPECT_EQ(*ds.bounds, (SplitBounds{840, 960, 1200}));
}
