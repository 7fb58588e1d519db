// Copyright 2026 The vlmim Authors
// SPDX-License-Identifier: Apache-2.0

#include <benchmark/benchmark.h>

#include "vlmim/eval.hpp"
#include "vlmim/train.hpp"

namespace vlmim {
namespace {

// One full step at the default configuration: six losses, backward, AdamW, EMA.
void BM_TrainStep(benchmark::State& state) {
  TrainConfig tc;
  tc.batch_size = static_cast<int>(state.range(0));
  auto st = TrainState<float>::create(ModelConfig{}, tc, 1);
  const auto manifest = make_corpus(tc.corpus_seed, tc.train_records, tc.val_records);
  const Vocabulary vocab;
  for (auto _ : state) {
    const auto batch = sample_batch(st, manifest, vocab);
    benchmark::DoNotOptimize(train_step(st, batch).losses.total);
  }
  state.SetItemsProcessed(state.iterations() * tc.batch_size);
}
BENCHMARK(BM_TrainStep)->Arg(8)->Arg(32)->Unit(benchmark::kMillisecond);

void BM_Retrieval(benchmark::State& state) {
  const TrainConfig tc;
  VlModel<float> model(ModelConfig{}, 2);
  const auto manifest = make_corpus(tc.corpus_seed, tc.train_records, tc.val_records);
  const Vocabulary vocab;
  for (auto _ : state) benchmark::DoNotOptimize(eval_retrieval(model, manifest, "val", vocab).i2t[0]);
}
BENCHMARK(BM_Retrieval)->Unit(benchmark::kMillisecond);

}  // namespace
}  // namespace vlmim
