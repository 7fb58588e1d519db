// Copyright 2026 The vlmim Authors
// SPDX-License-Identifier: Apache-2.0

// Single-file versioned checkpoint of a TrainState.

#pragma once

#include <cstdint>
#include <filesystem>

#include "vlmim/train.hpp"

namespace vlmim {

inline constexpr std::uint32_t kCheckpointVersion = 1;

struct CheckpointHeader {
  std::uint32_t version = 0;
  std::uint64_t config_hash = 0;
  std::string model_json;
  std::string train_json;
  std::uint64_t seed = 0;
  std::int64_t step = 0;
  std::uint32_t scalar_bytes = 0;
};

template <typename T>
void save_checkpoint(const TrainState<T>& state, const std::filesystem::path& path);

CheckpointHeader read_checkpoint_header(const std::filesystem::path& path);

/// Restores every TrainState field. Throws CheckpointError when the embedded
/// hash does not match the embedded config, or does not match *expected when
/// given, unless force is set. Structural mismatches always throw.
template <typename T>
TrainState<T> load_checkpoint(const std::filesystem::path& path, const ModelConfig* expected = nullptr,
                              bool force = false);

}  // namespace vlmim
