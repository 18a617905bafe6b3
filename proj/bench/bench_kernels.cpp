// OpenMP kernels against their serial references. Run with
// OMP_NUM_THREADS / RELSEARCH_THREADS to see the scaling.

#include <benchmark/benchmark.h>

#include <random>
#include <vector>

#include "relsearch/kernels.hpp"

namespace k = relsearch::kernels;

namespace {

std::vector<double> random_vector(std::size_t n, unsigned seed) {
    std::mt19937_64 rng(seed);
    std::uniform_real_distribution<double> d(-1.0, 1.0);
    std::vector<double> v(n);
    for (double& x : v) x = d(rng);
    return v;
}

struct ConvCase {
    k::ConvGeometry g;
    std::vector<double> in, w, b, out;

    explicit ConvCase(std::size_t side, std::size_t channels)
        : g(k::ConvGeometry::make(channels, channels, side, side, side, 3, 1, 1)),
          in(random_vector(g.input_size(), 1)),
          w(random_vector(g.weight_size(), 2)),
          b(random_vector(g.out_channels, 3)),
          out(g.output_size()) {}
};

template <bool Parallel>
void BM_Conv3dForward(benchmark::State& state) {
    ConvCase c(static_cast<std::size_t>(state.range(0)), static_cast<std::size_t>(state.range(1)));
    for (auto _ : state) {
        if constexpr (Parallel) {
            k::conv3d_forward(c.g, c.in, c.w, c.b, c.out);
        } else {
            k::ref::conv3d_forward(c.g, c.in, c.w, c.b, c.out);
        }
        benchmark::DoNotOptimize(c.out.data());
    }
    state.SetItemsProcessed(state.iterations() * static_cast<long>(c.g.output_size() * c.g.in_channels * 27));
}

template <bool Parallel>
void BM_Conv3dBackwardParams(benchmark::State& state) {
    ConvCase c(static_cast<std::size_t>(state.range(0)), static_cast<std::size_t>(state.range(1)));
    const std::vector<double> dout = random_vector(c.g.output_size(), 4);
    std::vector<double> dw(c.g.weight_size()), db(c.g.out_channels);
    for (auto _ : state) {
        if constexpr (Parallel) {
            k::conv3d_backward_params(c.g, c.in, dout, dw, db);
        } else {
            k::ref::conv3d_backward_params(c.g, c.in, dout, dw, db);
        }
        benchmark::DoNotOptimize(dw.data());
    }
}

template <bool Parallel>
void BM_LinearForward(benchmark::State& state) {
    const auto rows = static_cast<std::size_t>(state.range(0));
    const auto width = static_cast<std::size_t>(state.range(1));
    const std::vector<double> x = random_vector(rows * width, 5), w = random_vector(width * width, 6),
                              b = random_vector(width, 7);
    std::vector<double> y(rows * width);
    for (auto _ : state) {
        if constexpr (Parallel) {
            k::linear_forward(rows, width, width, x, w, b, y);
        } else {
            k::ref::linear_forward(rows, width, width, x, w, b, y);
        }
        benchmark::DoNotOptimize(y.data());
    }
    state.SetItemsProcessed(state.iterations() * static_cast<long>(rows * width * width));
}

}  // namespace

BENCHMARK(BM_Conv3dForward<true>)->Args({16, 8})->Args({32, 8})->Unit(benchmark::kMillisecond);
BENCHMARK(BM_Conv3dForward<false>)->Args({16, 8})->Args({32, 8})->Unit(benchmark::kMillisecond);
BENCHMARK(BM_Conv3dBackwardParams<true>)->Args({16, 8})->Unit(benchmark::kMillisecond);
BENCHMARK(BM_Conv3dBackwardParams<false>)->Args({16, 8})->Unit(benchmark::kMillisecond);
BENCHMARK(BM_LinearForward<true>)->Args({69, 32})->Args({4096, 64})->Unit(benchmark::kMicrosecond);
BENCHMARK(BM_LinearForward<false>)->Args({69, 32})->Args({4096, 64})->Unit(benchmark::kMicrosecond);

BENCHMARK_MAIN();
