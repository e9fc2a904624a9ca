#pragma once

#include <algorithm>
#include <atomic>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <functional>
#include <random>
#include <string>
#include <vector>

#include "tsprobe/autograd.hpp"
#include "tsprobe/data.hpp"
#include "tsprobe/forecaster.hpp"
#include "tsprobe/tensor.hpp"

namespace tsprobe::testing {

template <typename T>
Tensor<T> random_tensor(Shape shape, std::mt19937_64& rng, double lo = -1.0, double hi = 1.0) {
  std::uniform_real_distribution<double> dist(lo, hi);
  Tensor<T> t(std::move(shape));
  for (auto& v : t.data()) v = static_cast<T>(dist(rng));
  return t;
}

/// Values in [lo, hi] bounded away from zero by `gap`, for kinked ops.
inline Tensor<double> random_away_from_zero(Shape shape, std::mt19937_64& rng, double gap = 0.1) {
  std::uniform_real_distribution<double> dist(gap, 1.0);
  std::bernoulli_distribution sign(0.5);
  Tensor<double> t(std::move(shape));
  for (auto& v : t.data()) v = sign(rng) ? dist(rng) : -dist(rng);
  return t;
}

/// Builds a scalar loss from leaves holding `inputs`.
using LossBuilder = std::function<Var<double>(Tape<double>&, const std::vector<Var<double>>&)>;

struct GradCheck {
  double max_rel_error = 0.0;
  std::size_t checked = 0;
};

/// Central finite differences against tape gradients for every input element.
/// Relative error uses max(|analytic|, |numeric|, floor) in the denominator.
inline GradCheck grad_check(const std::vector<Tensor<double>>& inputs, const LossBuilder& build, double h = 1e-4,
                            double floor = 1e-6) {
  std::vector<Tensor<double>> analytic;
  {
    Tape<double> tape;
    std::vector<Var<double>> leaves;
    for (const auto& t : inputs) leaves.push_back(tape.leaf(t, true));
    const Var<double> loss = build(tape, leaves);
    tape.backward(loss);
    for (const auto& l : leaves) analytic.push_back(tape.grad(l));
  }
  auto eval = [&](const std::vector<Tensor<double>>& xs) {
    Tape<double> tape(false);
    std::vector<Var<double>> leaves;
    for (const auto& t : xs) leaves.push_back(tape.leaf(t, false));
    return tape.value(build(tape, leaves))[0];
  };
  GradCheck out;
  std::vector<Tensor<double>> probe = inputs;
  for (std::size_t i = 0; i < inputs.size(); ++i) {
    for (std::size_t j = 0; j < inputs[i].size(); ++j) {
      const double orig = probe[i][j];
      probe[i][j] = orig + h;
      const double up = eval(probe);
      probe[i][j] = orig - h;
      const double down = eval(probe);
      probe[i][j] = orig;
      const double numeric = (up - down) / (2.0 * h);
      const double a = analytic[i][j];
      const double denom = std::max({std::abs(a), std::abs(numeric), floor});
      out.max_rel_error = std::max(out.max_rel_error, std::abs(a - numeric) / denom);
      ++out.checked;
    }
  }
  return out;
}

/// Fixed random weights turn any tensor output into a generic scalar loss.
inline Var<double> weighted_sum(Var<double> y, std::uint64_t seed = 99) {
  std::mt19937_64 rng(seed);
  Tensor<double> w = random_tensor<double>(y.shape(), rng);
  Tape<double>& tape = *y.tape;
  const Tensor<double>& v = y.value();
  Tensor<double> out({1});
  for (std::size_t i = 0; i < v.size(); ++i) out[0] += v[i] * w[i];
  return tape.push(std::move(out), {y}, [y, w](Tape<double>& t, std::size_t self) {
    double* g = t.accum(y.id);
    if (!g) return;
    const double up = t.out_grad(self)[0];
    for (std::size_t i = 0; i < w.size(); ++i) g[i] += up * w[i];
  });
}

/// Small forecaster config for fast tests: lookback 32, patch 8, stride 4.
inline ForecasterConfig tiny_config(std::size_t horizon = 8, std::size_t d_model = 4) {
  ForecasterConfig c = ForecasterConfig::for_width(d_model, horizon);
  c.lookback = 32;
  c.patch_len = 8;
  c.stride = 4;
  return c;
}

/// Split and scaled synthetic dataset using the ratio rule.
inline SeriesDataset tiny_dataset(std::size_t rows = 400, std::size_t channels = 2, std::uint64_t seed = 7) {
  return fit_transform_scaler(assign_splits(synthetic_series("tiny", rows, channels, seed), SplitRule::kRatio));
}

/// Unique scratch directory removed on destruction.
class TempDir {
 public:
  TempDir() {
    static std::atomic<int> counter{0};
    std::random_device rd;
    path_ = std::filesystem::temp_directory_path() /
            ("tsprobe_test_" + std::to_string(rd()) + "_" + std::to_string(counter++));
    std::filesystem::create_directories(path_);
  }
  ~TempDir() {
    std::error_code ec;
    std::filesystem::remove_all(path_, ec);
  }
  TempDir(const TempDir&) = delete;
  TempDir& operator=(const TempDir&) = delete;
  const std::filesystem::path& path() const { return path_; }

 private:
  std::filesystem::path path_;
};

template <typename T>
bool bit_identical(const Tensor<T>& a, const Tensor<T>& b) {
  return a.shape() == b.shape() && std::equal(a.data().begin(), a.data().end(), b.data().begin());
}

}  // namespace tsprobe::testing
