// Copyright 2026 The vlmim Authors
// SPDX-License-Identifier: Apache-2.0

#include <benchmark/benchmark.h>

#include <random>

#include "vlmim/autograd.hpp"
#include "vlmim/masking.hpp"

namespace vlmim {
namespace {

Var<float> normal(Shape shape, std::uint64_t seed, bool grad) {
  std::mt19937_64 rng(seed);
  std::normal_distribution<float> g;
  std::size_t n = 1;
  for (int d : shape) n *= static_cast<std::size_t>(d);
  std::vector<float> v(n);
  for (auto& x : v) x = g(rng);
  return Var<float>::leaf(std::move(shape), std::move(v), grad);
}

// Self-attention at the default width over image + text slots.
void BM_Attention(benchmark::State& state) {
  const int batch = 32, slots = static_cast<int>(state.range(0)), dim = 64;
  const auto q = normal({batch, slots, dim}, 1, true);
  const auto k = normal({batch, slots, dim}, 2, true);
  const auto v = normal({batch, slots, dim}, 3, true);
  const bool backward = state.range(1) != 0;
  for (auto _ : state) {
    auto out = attention(q, k, v, 4, {}, false);
    if (backward) sum(out).backward();
    benchmark::DoNotOptimize(out.value().data());
  }
  state.SetItemsProcessed(state.iterations() * batch);
}
BENCHMARK(BM_Attention)->Args({17, 0})->Args({17, 1})->Args({34, 0})->Args({34, 1})->Unit(benchmark::kMicrosecond);

void BM_Matmul(benchmark::State& state) {
  const int n = static_cast<int>(state.range(0));
  const auto a = normal({n, 64}, 4, false);
  const auto b = normal({64, 256}, 5, false);
  for (auto _ : state) benchmark::DoNotOptimize(matmul(a, b).value().data());
  state.SetItemsProcessed(state.iterations() * n);
}
BENCHMARK(BM_Matmul)->Arg(544)->Arg(2048)->Unit(benchmark::kMicrosecond);

void BM_SampleMask(benchmark::State& state) {
  const int n = static_cast<int>(state.range(0));
  std::vector<double> probs(static_cast<std::size_t>(n), 1.0 / n);
  std::mt19937_64 rng(6);
  for (auto _ : state) benchmark::DoNotOptimize(sample_mask(probs, 0.3, rng).indices.data());
}
BENCHMARK(BM_SampleMask)->Arg(16)->Arg(196);

}  // namespace
}  // namespace vlmim

BENCHMARK_MAIN();
