// Copyright 2026 The vlmim Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <cstdint>
#include <string>

#include <nlohmann/json.hpp>

namespace vlmim {

/// Reconstruction target used by the masked-image objective.
enum class MimTarget {
  kSemantic,    // soft codes from the momentum encoder (default)
  kPixel,       // raw-pixel regression baseline
  kColorQuant,  // one-hot mean-colour bins, a trivial offline tokenizer baseline
};

enum class MaskStrategy { kTextGuided, kRandom };
enum class NegativeSampling { kHard, kUniform };

/// Every architectural and objective hyperparameter in one place. Field names
/// are the keys of the JSON config file.
struct ModelConfig {
  int image_size = 32;
  int patch_size = 8;
  int channels = 3;
  int embed_dim = 64;
  int image_layers = 6;
  int text_layers = 3;
  int fusion_layers = 2;
  int decoder_layers = 2;
  int heads = 4;
  int mlp_ratio = 4;
  int vocab_size = 128;
  int max_text_len = 16;  // word slots L; token rows carry one extra CLS slot
  int code_dim = 64;      // K
  int head_hidden = 128;
  int inject_start_layer = 6;  // 1-based
  double mask_ratio = 0.30;
  double momentum = 0.99;
  double student_temp = 0.1;
  double teacher_temp = 0.04;
  double center_momentum = 0.9;
  bool centering = true;
  double mlm_ratio = 0.15;
  double itc_temp = 0.07;
  double init_std = 0.02;
  double ln_eps = 1e-5;
  bool inject_text = true;
  MaskStrategy mask_strategy = MaskStrategy::kTextGuided;
  MimTarget mim_target = MimTarget::kSemantic;
  NegativeSampling itm_negatives = NegativeSampling::kHard;

  int grid() const { return image_size / patch_size; }
  int num_patches() const { return grid() * grid(); }
  int patch_dim() const { return channels * patch_size * patch_size; }
  int text_slots() const { return max_text_len + 1; }

  /// Throws ConfigError on any violated invariant.
  void validate() const;

  /// Small instance used by finite-difference checks.
  static ModelConfig tiny();
};

void to_json(nlohmann::json& j, const ModelConfig& c);
void from_json(const nlohmann::json& j, ModelConfig& c);

/// Stable FNV-1a hash of the canonical JSON form.
std::uint64_t config_hash(const ModelConfig& c);

std::string to_string(MimTarget t);
std::string to_string(MaskStrategy s);
std::string to_string(NegativeSampling s);

}  // namespace vlmim
