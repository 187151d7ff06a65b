// Serial reference vs OpenMP kernels, plus the end-to-end merges built on them.
#include <benchmark/benchmark.h>

#include <random>
#include <vector>

#include "frommerge/kernels.hpp"
#include "frommerge/lora_merge.hpp"
#include "frommerge/merge.hpp"
#include "frommerge/rng.hpp"

using namespace frommerge;

namespace {

std::vector<double> random_vector(std::size_t n, std::uint64_t seed) {
  std::mt19937_64 gen(seed);
  std::normal_distribution<double> dist;
  std::vector<double> v(n);
  for (auto& x : v) x = dist(gen);
  return v;
}

template <double (*Fn)(std::span<const double>)>
void BM_sum_squares(benchmark::State& state) {
  const auto x = random_vector(static_cast<std::size_t>(state.range(0)), 1);
  for (auto _ : state) benchmark::DoNotOptimize(Fn(x));
  state.SetBytesProcessed(state.iterations() * state.range(0) * 8);
}
BENCHMARK(BM_sum_squares<kernels::serial::sum_squares>)->Name("sum_squares/serial")->Range(1 << 12, 1 << 22);
BENCHMARK(BM_sum_squares<kernels::omp::sum_squares>)->Name("sum_squares/omp")->Range(1 << 12, 1 << 22);

template <void (*Fn)(std::span<const double>, std::span<const std::span<const double>>, std::span<double>)>
void BM_weighted_sum(benchmark::State& state) {
  const auto n = static_cast<std::size_t>(state.range(0));
  std::vector<std::vector<double>> inputs;
  std::vector<std::span<const double>> views;
  for (int i = 0; i < 4; ++i) inputs.push_back(random_vector(n, 10 + i));
  for (const auto& v : inputs) views.emplace_back(v);
  const std::vector<double> coeffs = {0.4, 0.3, 0.2, 0.1};
  std::vector<double> out(n);
  for (auto _ : state) {
    Fn(coeffs, views, out);
    benchmark::ClobberMemory();
  }
  state.SetBytesProcessed(state.iterations() * state.range(0) * 8 * 5);
}
BENCHMARK(BM_weighted_sum<kernels::serial::weighted_sum>)->Name("weighted_sum/serial")->Range(1 << 12, 1 << 22);
BENCHMARK(BM_weighted_sum<kernels::omp::weighted_sum>)->Name("weighted_sum/omp")->Range(1 << 12, 1 << 22);

template <void (*Fn)(std::size_t, std::size_t, std::size_t, std::span<const double>, std::span<const double>,
                     std::span<double>)>
void BM_gemm(benchmark::State& state) {
  const auto d = static_cast<std::size_t>(state.range(0));
  const auto a = random_vector(d * 8, 2), b = random_vector(8 * d, 3);
  std::vector<double> c(d * d);
  for (auto _ : state) {
    Fn(d, d, 8, a, b, c);
    benchmark::ClobberMemory();
  }
}
BENCHMARK(BM_gemm<kernels::serial::gemm>)->Name("gemm_rank8/serial")->RangeMultiplier(2)->Range(64, 1024);
BENCHMARK(BM_gemm<kernels::omp::gemm>)->Name("gemm_rank8/omp")->RangeMultiplier(2)->Range(64, 1024);

void BM_from_merge(benchmark::State& state) {
  const auto rows = static_cast<std::size_t>(state.range(0));
  std::vector<TaskVector> vs(4);
  for (std::size_t i = 0; i < vs.size(); ++i) {
    vs[i].deltas.emplace("w", seeded_normal(rows, 1024, 1.0 + static_cast<double>(i), 0, "bench"));
  }
  for (auto _ : state) benchmark::DoNotOptimize(from_merge(vs, 1.0));
  state.SetItemsProcessed(state.iterations() * 4 * state.range(0) * 1024);
}
BENCHMARK(BM_from_merge)->RangeMultiplier(2)->Range(128, 1024)->Unit(benchmark::kMillisecond);

void BM_lora_als_iteration(benchmark::State& state) {
  const auto d = static_cast<std::size_t>(state.range(0));
  const std::vector<Tensor2D> thetas = {seeded_normal(d, d, 1.0, 1, "a"), seeded_normal(d, d, 1.0, 2, "b")};
  LoraMergeConfig cfg;
  cfg.rank_out = 4;
  cfg.max_iters = 1;
  for (auto _ : state) benchmark::DoNotOptimize(merge_lora_layer(thetas, cfg, "bench"));
}
BENCHMARK(BM_lora_als_iteration)->RangeMultiplier(2)->Range(64, 512)->Unit(benchmark::kMillisecond);

}  // namespace

BENCHMARK_MAIN();
