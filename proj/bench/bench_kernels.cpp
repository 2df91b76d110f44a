// Serial reference against OpenMP kernels on CMNIST-sized layers.

#include <benchmark/benchmark.h>

#include <random>
#include <vector>

#include "w2d/kernels.hpp"

namespace k = w2d::kernels;

namespace {

std::vector<double> filled(std::size_t n) {
  std::mt19937_64 gen(7);
  std::uniform_real_distribution<double> u(-1.0, 1.0);
  std::vector<double> v(n);
  for (auto& x : v) x = u(gen);
  return v;
}

template <bool Parallel>
void dense_forward(benchmark::State& state) {
  const k::DenseDims d{64, 392, static_cast<std::size_t>(state.range(0))};
  const auto x = filled(d.batch * d.in), w = filled(d.out * d.in), b = filled(d.out);
  std::vector<double> y(d.batch * d.out);
  for (auto _ : state) {
    if constexpr (Parallel)
      k::parallel::dense_forward(d, x, w, b, y);
    else
      k::serial::dense_forward(d, x, w, b, y);
    benchmark::DoNotOptimize(y.data());
  }
  state.SetItemsProcessed(state.iterations() * static_cast<std::int64_t>(d.batch * d.in * d.out));
}

template <bool Parallel>
void conv2d_forward(benchmark::State& state) {
  const k::Conv2dDims d{32, 2, 28, 28, static_cast<std::size_t>(state.range(0)), 3, 1, 1};
  const auto x = filled(d.batch * d.in_channels * d.height * d.width);
  const auto w = filled(d.out_channels * d.in_channels * d.kernel * d.kernel), b = filled(d.out_channels);
  std::vector<double> y(d.batch * d.out_channels * d.out_height() * d.out_width());
  for (auto _ : state) {
    if constexpr (Parallel)
      k::parallel::conv2d_forward(d, x, w, b, y);
    else
      k::serial::conv2d_forward(d, x, w, b, y);
    benchmark::DoNotOptimize(y.data());
  }
}

template <bool Parallel>
void conv2d_backward_params(benchmark::State& state) {
  const k::Conv2dDims d{32, 2, 28, 28, static_cast<std::size_t>(state.range(0)), 3, 1, 1};
  const auto x = filled(d.batch * d.in_channels * d.height * d.width);
  const auto dy = filled(d.batch * d.out_channels * d.out_height() * d.out_width());
  std::vector<double> dw(d.out_channels * d.in_channels * d.kernel * d.kernel), db(d.out_channels);
  for (auto _ : state) {
    if constexpr (Parallel)
      k::parallel::conv2d_backward_params(d, dy, x, dw, db);
    else
      k::serial::conv2d_backward_params(d, dy, x, dw, db);
    benchmark::DoNotOptimize(dw.data());
  }
}

}  // namespace

BENCHMARK(dense_forward<false>)->Arg(128)->Arg(512);
BENCHMARK(dense_forward<true>)->Arg(128)->Arg(512);
BENCHMARK(conv2d_forward<false>)->Arg(16)->Arg(64);
BENCHMARK(conv2d_forward<true>)->Arg(16)->Arg(64);
BENCHMARK(conv2d_backward_params<false>)->Arg(16);
BENCHMARK(conv2d_backward_params<true>)->Arg(16);

BENCHMARK_MAIN();
