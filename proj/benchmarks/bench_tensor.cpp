#include <benchmark/benchmark.h>

#include "tiekd/rng.hpp"
#include "tiekd/tensor.hpp"

using namespace tiekd;

namespace {

std::vector<float> random_data(size_t n, uint64_t seed) {
    Rng rng(seed);
    std::vector<float> v(n);
    for (auto& x : v) x = static_cast<float>(rng.gaussian());
    return v;
}

void BM_GemmNN(benchmark::State& state) {
    const int64_t m = state.range(0), n = state.range(1), k = state.range(2);
    auto a = random_data(m * k, 1), b = random_data(k * n, 2);
    std::vector<float> c(m * n, 0.0f);
    for (auto _ : state) {
        gemm_nn<float>(m, n, k, a.data(), b.data(), c.data());
        benchmark::DoNotOptimize(c.data());
    }
    state.SetItemsProcessed(state.iterations() * 2 * m * n * k);
}
BENCHMARK(BM_GemmNN)->Args({96, 128, 128})->Args({96, 256, 128})->Args({512, 128, 128});

void BM_GemmNT(benchmark::State& state) {
    const int64_t m = state.range(0), n = state.range(1), k = state.range(2);
    auto a = random_data(m * k, 1), b = random_data(n * k, 2);
    std::vector<float> c(m * n, 0.0f);
    for (auto _ : state) {
        gemm_nt<float>(m, n, k, a.data(), b.data(), c.data());
        benchmark::DoNotOptimize(c.data());
    }
    state.SetItemsProcessed(state.iterations() * 2 * m * n * k);
}
BENCHMARK(BM_GemmNT)->Args({96, 128, 128})->Args({512, 128, 128});

void BM_SoftmaxLastDim(benchmark::State& state) {
    const int64_t rows = state.range(0), v = state.range(1);
    auto x = Tensor::from_data({rows, v}, random_data(rows * v, 3));
    for (auto _ : state) {
        auto y = softmax_lastdim(x);
        benchmark::DoNotOptimize(y.data().data());
    }
    state.SetItemsProcessed(state.iterations() * rows * v);
}
BENCHMARK(BM_SoftmaxLastDim)->Args({128, 100})->Args({128, 256});

void BM_LayerNorm(benchmark::State& state) {
    const int64_t rows = state.range(0), d = state.range(1);
    auto x = Tensor::from_data({rows, d}, random_data(rows * d, 4));
    auto gain = Tensor::filled({d}, 1.0f);
    auto bias = Tensor::zeros({d});
    for (auto _ : state) {
        auto y = layer_norm(x, gain, bias, 1e-5f);
        benchmark::DoNotOptimize(y.data().data());
    }
    state.SetItemsProcessed(state.iterations() * rows * d);
}
BENCHMARK(BM_LayerNorm)->Args({128, 128});

}  // namespace

BENCHMARK_MAIN();
