// Serial reference kernels against their OpenMP counterparts.

#include <benchmark/benchmark.h>

#include <random>
#include <vector>

#include "aggsum/kernels.hpp"

namespace k = aggsum::kernels;

namespace {

std::vector<float> filled(std::size_t n, unsigned seed) {
  std::mt19937 rng(seed);
  std::uniform_real_distribution<float> d(-1.0f, 1.0f);
  std::vector<float> v(n);
  for (auto& x : v) x = d(rng);
  return v;
}

template <void (*Gemm)(const k::GemmArgs<float>&)>
void BM_Gemm(benchmark::State& state) {
  const auto n = static_cast<std::size_t>(state.range(0));
  const auto a = filled(n * n, 1), b = filled(n * n, 2);
  std::vector<float> c(n * n);
  k::GemmArgs<float> args{n, n, n, a.data(), false, b.data(), false, c.data(), false};
  for (auto _ : state) {
    Gemm(args);
    benchmark::DoNotOptimize(c.data());
  }
  state.SetItemsProcessed(state.iterations() * static_cast<int64_t>(n * n * n));
}

template <void (*Softmax)(const k::SoftmaxArgs<float>&)>
void BM_Softmax(benchmark::State& state) {
  const auto rows = static_cast<std::size_t>(state.range(0));
  const std::size_t cols = 512;
  const auto x = filled(rows * cols, 3);
  std::vector<float> out(rows * cols);
  k::SoftmaxArgs<float> args{rows, cols, x.data(), nullptr, out.data(), false};
  for (auto _ : state) {
    Softmax(args);
    benchmark::DoNotOptimize(out.data());
  }
  state.SetItemsProcessed(state.iterations() * static_cast<int64_t>(rows * cols));
}

template <void (*LayerNorm)(const k::LayerNormArgs<float>&)>
void BM_LayerNorm(benchmark::State& state) {
  const auto rows = static_cast<std::size_t>(state.range(0));
  const std::size_t cols = 512;
  const auto x = filled(rows * cols, 4), gain = filled(cols, 5), bias = filled(cols, 6);
  std::vector<float> out(rows * cols);
  k::LayerNormArgs<float> args;
  args.rows = rows;
  args.cols = cols;
  args.x = x.data();
  args.gain = gain.data();
  args.bias = bias.data();
  args.out = out.data();
  for (auto _ : state) {
    LayerNorm(args);
    benchmark::DoNotOptimize(out.data());
  }
  state.SetItemsProcessed(state.iterations() * static_cast<int64_t>(rows * cols));
}

}  // namespace

BENCHMARK_TEMPLATE(BM_Gemm, k::serial::gemm<float>)->Arg(64)->Arg(256)->Arg(512);
BENCHMARK_TEMPLATE(BM_Gemm, k::omp::gemm<float>)->Arg(64)->Arg(256)->Arg(512);
BENCHMARK_TEMPLATE(BM_Softmax, k::serial::softmax_rows<float>)->Arg(64)->Arg(1024);
BENCHMARK_TEMPLATE(BM_Softmax, k::omp::softmax_rows<float>)->Arg(64)->Arg(1024);
BENCHMARK_TEMPLATE(BM_LayerNorm, k::serial::layer_norm_rows<float>)->Arg(64)->Arg(1024);
BENCHMARK_TEMPLATE(BM_LayerNorm, k::omp::layer_norm_rows<float>)->Arg(64)->Arg(1024);

BENCHMARK_MAIN();
