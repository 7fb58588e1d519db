// Copyright 2026 The vlmim Authors
// SPDX-License-Identifier: Apache-2.0

// Optimizer, learning-rate schedule, the full training step and the pretrain
// driver.

#pragma once

#include <cstdint>
#include <filesystem>
#include <functional>
#include <memory>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "vlmim/data.hpp"
#include "vlmim/objectives.hpp"

namespace vlmim {

struct TrainConfig {
  int batch_size = 32;
  double lr_visual = 3e-4;  // image encoder and encoding head
  double lr_other = 1e-3;
  double weight_decay = 0.02;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double adam_eps = 1e-8;
  int warmup_steps = 50;
  int schedule_steps = 200;  // cosine horizon
  double final_lr_ratio = 1e-2;
  int train_records = 256;
  int val_records = 32;
  std::uint64_t corpus_seed = 2026;
  AugmentConfig augment;

  void validate() const;
};

void to_json(nlohmann::json& j, const TrainConfig& c);
void from_json(const nlohmann::json& j, TrainConfig& c);

/// A run config file: ModelConfig keys at top level plus an optional "train"
/// object with TrainConfig keys.
struct RunConfig {
  ModelConfig model;
  TrainConfig train;
};
RunConfig parse_run_config(const nlohmann::json& j);
RunConfig load_run_config(const std::filesystem::path& path);
nlohmann::json to_json(const RunConfig& rc);

/// Linear warmup over warmup_steps, then cosine decay to final_lr_ratio * peak
/// at schedule_steps; flat afterwards. step is 0-based.
double learning_rate(const TrainConfig& cfg, double peak, std::int64_t step);

/// True for parameters of the visual group.
bool is_visual_param(const std::string& name);

/// Decoupled weight decay Adam. Decay applies to matrices only (rank >= 2).
template <typename T>
class AdamW {
 public:
  AdamW() = default;
  explicit AdamW(const std::vector<NamedTensor<T>>& params);

  /// One update; lr[i] is the rate for params[i].
  void step(const std::vector<NamedTensor<T>>& params, std::span<const double> lr, const TrainConfig& cfg);

  std::int64_t t = 0;
  std::vector<std::vector<T>> m;
  std::vector<std::vector<T>> v;
};

template <typename T>
struct TrainBatch {
  std::vector<int> rows;
  ImageBatch<T> images;
  TokenBatch tokens;
};

struct StepRecord {
  std::int64_t step = 0;  // step index that produced the record (0-based)
  double lr_visual = 0;
  double lr_other = 0;
  LossValues losses;
};
void to_json(nlohmann::json& j, const StepRecord& r);

template <typename T>
struct TrainState {
  ModelConfig model_cfg;
  TrainConfig train_cfg;
  std::uint64_t seed = 0;
  std::int64_t step = 0;
  std::unique_ptr<VlModel<T>> model;
  std::unique_ptr<TeacherState<T>> teacher;
  AdamW<T> optimizer;

  static TrainState create(const ModelConfig& model_cfg, const TrainConfig& train_cfg, std::uint64_t seed);
  std::uint64_t hash() const { return config_hash(model_cfg); }
};

/// Batch rows for the current step, drawn without replacement from the train
/// split with an RNG keyed by (seed, step).
template <typename T>
TrainBatch<T> sample_batch(const TrainState<T>& state, const DatasetManifest& manifest, const Vocabulary& vocab);

/// Every random draw inside a training step comes from this stream.
std::mt19937_64 step_rng(std::uint64_t seed, std::int64_t step);

/// All six losses, backward, AdamW, EMA and center update, step + 1.
/// A non-finite loss throws NonFiniteLossError before anything is modified.
template <typename T>
StepRecord train_step(TrainState<T>& state, const TrainBatch<T>& batch);

struct PretrainOptions {
  RunConfig config;
  std::uint64_t seed = 0;
  int steps = 200;
  std::filesystem::path out;
  /// Continue from this checkpoint instead of a fresh state.
  std::filesystem::path resume;
  bool force = false;
  std::function<void(const StepRecord&)> on_step;
};

struct PretrainResult {
  TrainState<float> state;
  std::vector<StepRecord> log;
};

/// Trains until state.step == steps, writing log.jsonl, config.json,
/// manifest.json and checkpoint.bin under out (when out is non-empty).
PretrainResult pretrain(const PretrainOptions& options);

}  // namespace vlmim
