// Parallel kernels against their serial references.
#include <benchmark/benchmark.h>

#include <cstdint>
#include <random>
#include <vector>

#include "sawnet/kernels.hpp"

namespace k = sawnet::kernels;

namespace {

std::vector<float> random_floats(std::size_t n, std::uint32_t seed) {
  std::mt19937 gen(seed);
  std::uniform_real_distribution<float> dist(-1.f, 1.f);
  std::vector<float> v(n);
  for (auto& x : v) x = dist(gen);
  return v;
}

// Shared-MLP shape: (batch * points) rows through a cin x cout weight.
template <bool Parallel>
void BM_Gemm(benchmark::State& state) {
  const auto m = static_cast<std::size_t>(state.range(0));
  const auto kk = static_cast<std::size_t>(state.range(1));
  const auto n = static_cast<std::size_t>(state.range(2));
  auto a = random_floats(m * kk, 1), b = random_floats(kk * n, 2);
  std::vector<float> c(m * n);
  for (auto _ : state) {
    if constexpr (Parallel) k::gemm(m, n, kk, a.data(), kk, b.data(), n, c.data(), n, false);
    else k::reference::gemm(m, n, kk, a.data(), kk, b.data(), n, c.data(), n, false);
    benchmark::DoNotOptimize(c.data());
  }
  state.SetItemsProcessed(static_cast<std::int64_t>(state.iterations() * m * n * kk));
  state.counters["threads"] = k::max_threads();
}

// Weight-gradient shape: X^T * dY.
template <bool Parallel>
void BM_GemmTn(benchmark::State& state) {
  const auto rows = static_cast<std::size_t>(state.range(0));
  const auto m = static_cast<std::size_t>(state.range(1));
  const auto n = static_cast<std::size_t>(state.range(2));
  auto a = random_floats(rows * m, 3), b = random_floats(rows * n, 4);
  std::vector<float> c(m * n);
  for (auto _ : state) {
    if constexpr (Parallel) k::gemm_tn(m, n, rows, a.data(), m, b.data(), n, c.data(), n, false);
    else k::reference::gemm_tn(m, n, rows, a.data(), m, b.data(), n, c.data(), n, false);
    benchmark::DoNotOptimize(c.data());
  }
  state.SetItemsProcessed(static_cast<std::int64_t>(state.iterations() * m * n * rows));
}

template <bool Parallel>
void BM_Knn(benchmark::State& state) {
  const auto n = static_cast<std::size_t>(state.range(0));
  const auto dim = static_cast<std::size_t>(state.range(1));
  const std::size_t kn = 20;
  auto pts = random_floats(n * dim, 5);
  std::vector<std::int32_t> out(n * kn);
  for (auto _ : state) {
    if constexpr (Parallel) k::knn(pts.data(), n, dim, kn, out.data());
    else k::reference::knn(pts.data(), n, dim, kn, out.data());
    benchmark::DoNotOptimize(out.data());
  }
  state.SetItemsProcessed(static_cast<std::int64_t>(state.iterations() * n * n));
}

void gemm_shapes(benchmark::internal::Benchmark* b) {
  b->Args({8 * 256, 64, 64})->Args({8 * 1024, 64, 128})->Args({8 * 1024, 128, 1024});
}
void knn_shapes(benchmark::internal::Benchmark* b) { b->Args({256, 3})->Args({1024, 3})->Args({1024, 64}); }

}  // namespace

BENCHMARK(BM_Gemm<false>)->Name("gemm/reference")->Apply(gemm_shapes)->Unit(benchmark::kMicrosecond);
BENCHMARK(BM_Gemm<true>)->Name("gemm/parallel")->Apply(gemm_shapes)->Unit(benchmark::kMicrosecond);
BENCHMARK(BM_GemmTn<false>)->Name("gemm_tn/reference")->Apply(gemm_shapes)->Unit(benchmark::kMicrosecond);
BENCHMARK(BM_GemmTn<true>)->Name("gemm_tn/parallel")->Apply(gemm_shapes)->Unit(benchmark::kMicrosecond);
BENCHMARK(BM_Knn<false>)->Name("knn/reference")->Apply(knn_shapes)->Unit(benchmark::kMicrosecond);
BENCHMARK(BM_Knn<true>)->Name("knn/parallel")->Apply(knn_shapes)->Unit(benchmark::kMicrosecond);
BENCHMARK_MAIN();
