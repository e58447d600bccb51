#include "pertrace/linalg.hpp"
#include "pertrace/tensor.hpp"

#include <benchmark/benchmark.h>

#include <random>

using namespace pertrace;

namespace {

Matrix random_matrix(std::size_t r, std::size_t c, std::uint64_t seed) {
    std::mt19937_64 rng(seed);
    std::normal_distribution<float> nd;
    Matrix m(r, c);
    for (float& v : m.storage()) v = nd(rng);
    return m;
}

void BM_Matmul(benchmark::State& state) {
    const auto n = static_cast<std::size_t>(state.range(0));
    const Matrix a = random_matrix(n, n, 1), b = random_matrix(n, n, 2);
    for (auto _ : state) benchmark::DoNotOptimize(matmul(a, b));
    state.SetItemsProcessed(state.iterations() * static_cast<std::int64_t>(2 * n * n * n));
}
BENCHMARK(BM_Matmul)->RangeMultiplier(2)->Range(32, 512);

void BM_Svd(benchmark::State& state) {
    const auto n = static_cast<std::size_t>(state.range(0));
    const Matrix a = random_matrix(n, n, 3);
    for (auto _ : state) benchmark::DoNotOptimize(svd(a));
}
BENCHMARK(BM_Svd)->RangeMultiplier(2)->Range(16, 256)->Unit(benchmark::kMillisecond);

void BM_PcaFit(benchmark::State& state) {
    const Matrix samples = random_matrix(static_cast<std::size_t>(state.range(0)), 768, 4);
    for (auto _ : state) benchmark::DoNotOptimize(pca_fit(samples, 3));
}
BENCHMARK(BM_PcaFit)->Arg(64)->Arg(512)->Unit(benchmark::kMillisecond);

} // namespace

BENCHMARK_MAIN();
