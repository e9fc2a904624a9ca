#include <gtest/gtest.h>

#include <cmath>
#include <random>

#include "helpers.hpp"
#include "tsprobe/forecaster.hpp"
#include "tsprobe/ops.hpp"
#include "tsprobe/trainer.hpp"

using namespace tsprobe;
using tsprobe::testing::bit_identical;
using tsprobe::testing::random_tensor;
using tsprobe::testing::tiny_config;

TEST(ForecasterConfig, StandardShapes) {
  const auto c = ForecasterConfig::for_width(16, 96);
  EXPECT_EQ(c.num_patches(), 41u);
  EXPECT_EQ(c.d_ff, 32u);
  EXPECT_EQ(c.n_heads, 2u);
  EXPECT_EQ(ForecasterConfig::for_width(64, 96).n_heads, 4u);
  EXPECT_EQ(ForecasterConfig::for_width(128, 96).d_ff, 256u);
  for (std::size_t d : {16, 64, 96, 128}) {
    const auto w = ForecasterConfig::for_width(d, 336);
    EXPECT_NO_THROW(w.validate());
    EXPECT_EQ(w.d_head() % 2, 0u);
    EXPECT_EQ(w.d_model % w.n_heads, 0u);
  }
}

TEST(ForecasterConfig, InvalidHeadSplitIsConfigError) {
  auto c = ForecasterConfig::for_width(16, 96);
  c.n_heads = 3;
  EXPECT_THROW(c.validate(), ConfigError);
  c.n_heads = 16;  // d_head 1 is odd
  EXPECT_THROW(c.validate(), ConfigError);
}

TEST(ForecasterConfig, JsonRoundTrip) {
  auto c = ForecasterConfig::for_width(64, 192);
  c.revin_affine = true;
  c.channels = 21;
  EXPECT_EQ(ForecasterConfig::from_json(c.to_json()), c);
}

TEST(Patchify, IndexArithmetic) {
  Tensor<double> ramp({1, 336});
  for (std::size_t i = 0; i < 336; ++i) ramp[i] = static_cast<double>(i);
  const auto p = patchify(ramp, 16, 8);
  EXPECT_EQ(p.shape(), (Shape{1, 41, 16}));
  for (std::size_t j = 0; j < 16; ++j) EXPECT_EQ(p[3 * 16 + j], 24.0 + j);
  for (std::size_t q = 0; q + 1 < 41; ++q) {
    std::size_t shared = 0;
    for (std::size_t a = 0; a < 16; ++a)
      for (std::size_t b = 0; b < 16; ++b) shared += p[q * 16 + a] == p[(q + 1) * 16 + b];
    EXPECT_EQ(shared, 8u);
  }
}

TEST(Revin, StatsMatchScalarOracleAndRoundTrip) {
  std::mt19937_64 rng(1);
  Tensor<double> x({3, 336, 2});
  for (std::size_t i = 0; i < x.size(); ++i) x[i] = static_cast<double>(i % 997) * 0.01 + std::sin(0.1 * i);
  RevinStats<double> stats;
  const auto normed = revin_normalize(x, 1e-5, stats);
  for (std::size_t w = 0; w < 3; ++w) {
    for (std::size_t c = 0; c < 2; ++c) {
      double m = 0.0, v = 0.0;
      for (std::size_t t = 0; t < 336; ++t) m += x[(w * 336 + t) * 2 + c];
      m /= 336;
      for (std::size_t t = 0; t < 336; ++t) v += std::pow(x[(w * 336 + t) * 2 + c] - m, 2);
      v /= 336;
      EXPECT_NEAR(stats.mean[w * 2 + c], m, 1e-6);
      EXPECT_NEAR(stats.stdev[w * 2 + c], std::sqrt(v + 1e-5), 1e-6);
    }
  }
  const auto back = revin_denormalize(normed, stats);
  for (std::size_t i = 0; i < x.size(); ++i) EXPECT_NEAR(back[i], x[i], 1e-5);
}

TEST(Revin, ConstantChannelNormalizesToZero) {
  Tensor<double> x({1, 32, 1}, 3.5);
  RevinStats<double> stats;
  const auto normed = revin_normalize(x, 1e-5, stats);
  for (double v : normed.data()) EXPECT_EQ(v, 0.0);
  EXPECT_EQ(stats.mean[0], 3.5);
  EXPECT_NEAR(stats.stdev[0], std::sqrt(1e-5), 1e-12);
}

TEST(ForecasterParams, CountMatchesClosedForm) {
  for (std::size_t d : {4, 16, 64}) {
    for (std::size_t h : {96, 720}) {
      auto c = ForecasterConfig::for_width(d, h);
      EXPECT_EQ(ForecasterParams<float>::init(c, 1).count(), expected_param_count(c));
      c.revin_affine = true;
      c.channels = 7;
      EXPECT_EQ(ForecasterParams<float>::init(c, 1).count(), expected_param_count(c));
    }
  }
  // 16-wide, H=96: embed 16*16+16, attn 4*256, ffn 16*32+32+32*16+16, norms 32, head 656*96+96.
  EXPECT_EQ(expected_param_count(ForecasterConfig::for_width(16, 96)),
            272u + 1024u + 544u + 528u + 32u + 656u * 96u + 96u);
}

class ForecasterHooks : public ::testing::Test {
 protected:
  void SetUp() override {
    config = tiny_config(8, 4);
    params = ForecasterParams<float>::init(config, 5);
    std::mt19937_64 rng(6);
    x = random_tensor<float>({3, config.lookback, 2}, rng, -2, 2);
  }
  ForecasterConfig config;
  ForecasterParams<float> params;
  Tensor<float> x;
};

TEST_F(ForecasterHooks, RecordIsOutputInvariant) {
  const auto plain = forward(params, config, x);
  auto hook = ActivationHook<float>::record();
  const auto hooked = forward(params, config, x, &hook);
  EXPECT_TRUE(bit_identical(plain, hooked));
  EXPECT_EQ(hook.buffer.shape(), (Shape{3 * 2 * config.num_patches(), config.d_ff}));
}

TEST_F(ForecasterHooks, ReplaceWithRecordedIsIdentity) {
  const auto plain = forward(params, config, x);
  auto rec = ActivationHook<float>::record();
  forward(params, config, x, &rec);
  auto rep = ActivationHook<float>::replace(rec.buffer);
  EXPECT_TRUE(bit_identical(plain, forward(params, config, x, &rep)));
  auto live = ActivationHook<float>::replace_with([](const Tensor<float>& a) { return a; });
  EXPECT_TRUE(bit_identical(plain, forward(params, config, x, &live)));
}

TEST_F(ForecasterHooks, ReplaceRequiresMatchingShape) {
  auto rep = ActivationHook<float>::replace(Tensor<float>({5, config.d_ff}));
  EXPECT_ANY_THROW(forward(params, config, x, &rep));
}

TEST_F(ForecasterHooks, ZeroChangesOutputUnlessFfnDownIsNull) {
  const auto plain = forward(params, config, x);
  auto zero = ActivationHook<float>::zero();
  EXPECT_FALSE(bit_identical(plain, forward(params, config, x, &zero)));
  auto null_down = params;
  for (auto& v : null_down.down_w.data()) v = 0.0f;
  const auto base = forward(null_down, config, x);
  auto zero2 = ActivationHook<float>::zero();
  EXPECT_TRUE(bit_identical(base, forward(null_down, config, x, &zero2)));
}

TEST_F(ForecasterHooks, RecordedRowsArePostGeluValues) {
  auto rec = ActivationHook<float>::record();
  forward(params, config, x, &rec);
  for (float v : rec.buffer.data()) EXPECT_GE(v, -0.17f);  // GELU minimum is about -0.17
}

TEST(Forecaster, ZeroWeightsPredictWindowMean) {
  auto config = tiny_config(8, 4);
  auto params = ForecasterParams<double>::init(config, 3);
  for (Tensor<double>* t : {&params.wq, &params.wk, &params.wv, &params.wo, &params.up_w, &params.up_b,
                            &params.down_w, &params.down_b, &params.head_w, &params.head_b}) {
    for (auto& v : t->data()) v = 0.0;
  }
  std::mt19937_64 rng(4);
  const auto x = random_tensor<double>({2, config.lookback, 3}, rng, -5, 5);
  const auto y = forward(params, config, x);
  for (std::size_t w = 0; w < 2; ++w) {
    for (std::size_t c = 0; c < 3; ++c) {
      double m = 0.0;
      for (std::size_t t = 0; t < config.lookback; ++t) m += x[(w * config.lookback + t) * 3 + c];
      m /= static_cast<double>(config.lookback);
      for (std::size_t t = 0; t < config.horizon; ++t) EXPECT_NEAR(y[(w * config.horizon + t) * 3 + c], m, 1e-12);
    }
  }
}

TEST(Forecaster, ChannelPermutationPermutesOutputs) {
  auto config = tiny_config(8, 4);
  auto params = ForecasterParams<double>::init(config, 8);
  std::mt19937_64 rng(9);
  const std::size_t C = 4;
  const auto x = random_tensor<double>({2, config.lookback, C}, rng);
  const std::vector<std::size_t> perm{2, 0, 3, 1};
  Tensor<double> xp(x.shape());
  for (std::size_t i = 0; i < x.size() / C; ++i)
    for (std::size_t c = 0; c < C; ++c) xp[i * C + c] = x[i * C + perm[c]];
  const auto y = forward(params, config, x);
  const auto yp = forward(params, config, xp);
  for (std::size_t i = 0; i < y.size() / C; ++i)
    for (std::size_t c = 0; c < C; ++c) EXPECT_EQ(yp[i * C + c], y[i * C + perm[c]]);
}

TEST(Metrics, Examples) {
  const auto a = Tensor<double>::from({2, 2}, {1, 2, 3, 4});
  EXPECT_EQ(mse(a, a), 0.0);
  EXPECT_EQ(mae(a, a), 0.0);
  const auto b = Tensor<double>::from({2, 2}, {0, 1, 2, 3});
  EXPECT_EQ(mse(a, b), 1.0);
  EXPECT_EQ(mae(a, b), 1.0);
}

TEST(Metrics, RandomPairsMatchScalarLoop) {
  std::mt19937_64 rng(10);
  for (int trial = 0; trial < 100; ++trial) {
    const std::size_t n = 1 + rng() % 500;
    const auto p = random_tensor<float>({n}, rng, -3, 3);
    const auto t = random_tensor<float>({n}, rng, -3, 3);
    double se = 0.0, ae = 0.0;
    for (std::size_t i = 0; i < n; ++i) {
      const double d = static_cast<double>(p[i]) - static_cast<double>(t[i]);
      se += d * d;
      ae += std::abs(d);
    }
    EXPECT_NEAR(mse(p, t), se / n, 1e-6);
    EXPECT_NEAR(mae(p, t), ae / n, 1e-6);
  }
}

TEST(Checkpoint, ReloadIsEvaluationIdentical) {
  tsprobe::testing::TempDir dir;
  const auto ds = tsprobe::testing::tiny_dataset(400, 2);
  auto config = tiny_config(8, 4);
  const auto params = ForecasterParams<float>::init(config, 12);
  save_forecaster(dir.path() / "f.ckpt", params, config, {{"note", "x"}});
  const auto loaded = load_forecaster<float>(dir.path() / "f.ckpt");
  EXPECT_EQ(loaded.config, config);
  EXPECT_EQ(loaded.meta.at("note"), "x");
  const auto a = evaluate(params, config, ds, Partition::kTest);
  const auto b = evaluate(loaded.params, loaded.config, ds, Partition::kTest);
  EXPECT_EQ(a.mse, b.mse);
  EXPECT_EQ(a.mae, b.mae);
  const auto widened = load_forecaster<double>(dir.path() / "f.ckpt");
  EXPECT_EQ(widened.params.head_w[7], static_cast<double>(params.head_w[7]));
}
