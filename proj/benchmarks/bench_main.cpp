#include <benchmark/benchmark.h>

#include <random>

#include "tsprobe/data.hpp"
#include "tsprobe/forecaster.hpp"
#include "tsprobe/ops.hpp"
#include "tsprobe/optim.hpp"
#include "tsprobe/sae.hpp"

namespace {

using namespace tsprobe;

template <typename T>
Tensor<T> uniform(Shape shape, std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  std::uniform_real_distribution<double> u(-1.0, 1.0);
  Tensor<T> t(std::move(shape));
  for (auto& v : t.data()) v = static_cast<T>(u(rng));
  return t;
}

void BM_Gemm(benchmark::State& state) {
  const auto n = static_cast<std::size_t>(state.range(0));
  const auto a = uniform<float>({n, n}, 1), b = uniform<float>({n, n}, 2);
  Tensor<float> c({n, n});
  for (auto _ : state) {
    kernel::gemm(a.data().data(), b.data().data(), c.data().data(), n, n, n, false, false, false);
    benchmark::DoNotOptimize(c.data().data());
  }
  state.SetItemsProcessed(state.iterations() * static_cast<int64_t>(2 * n * n * n));
}
BENCHMARK(BM_Gemm)->Arg(16)->Arg(64)->Arg(256);

void BM_Forward(benchmark::State& state) {
  const auto config = ForecasterConfig::for_width(static_cast<std::size_t>(state.range(0)), 96);
  const auto params = ForecasterParams<float>::init(config, 1);
  const auto x = uniform<float>({128, config.lookback, 7}, 3);
  for (auto _ : state) benchmark::DoNotOptimize(forward(params, config, x));
  state.SetItemsProcessed(state.iterations() * 128 * 7);
}
BENCHMARK(BM_Forward)->Arg(16)->Arg(64)->Unit(benchmark::kMillisecond);

void BM_TrainStep(benchmark::State& state) {
  const auto config = ForecasterConfig::for_width(16, 96);
  const auto params = ForecasterParams<float>::init(config, 1);
  const auto x = uniform<float>({128, config.lookback, 7}, 3);
  const auto target = uniform<float>({128 * 7, config.horizon}, 4);
  std::mt19937_64 rng(5);
  for (auto _ : state) {
    Tape<float> tape;
    const auto bound = bind_params(tape, params, true);
    const auto loss = mse_loss(forward_flat<float>(tape, bound, config, x, nullptr, &rng), target);
    tape.backward(loss);
    benchmark::DoNotOptimize(tape.grad(bound.vars[0]));
  }
}
BENCHMARK(BM_TrainStep)->Unit(benchmark::kMillisecond);

void BM_SaeStep(benchmark::State& state) {
  const auto width = static_cast<std::size_t>(state.range(0));
  const auto sae = SaeParams<float>::init(32, width, 1);
  auto x = uniform<float>({1024, 32}, 2);
  for (auto _ : state) {
    Tape<float> tape;
    const auto we = tape.leaf(sae.w_enc, true), be = tape.leaf(sae.b_enc, true);
    const auto wd = tape.leaf(sae.w_dec, true), bd = tape.leaf(sae.b_dec, true);
    tape.backward(sae_objective<float>(tape, we, be, wd, bd, x, 0.01f));
    benchmark::DoNotOptimize(tape.grad(we));
  }
  state.SetItemsProcessed(state.iterations() * 1024);
}
BENCHMARK(BM_SaeStep)->Arg(16)->Arg(128)->Unit(benchmark::kMicrosecond);

}  // namespace

int main(int argc, char** argv) {
  tsprobe::keep_heap_warm();
  benchmark::Initialize(&argc, argv);
  if (benchmark::ReportUnrecognizedArguments(argc, argv)) return 1;
  benchmark::RunSpecifiedBenchmarks();
  benchmark::Shutdown();
  return 0;
}
