// Copyright 2026 The vlmim Authors
// SPDX-License-Identifier: Apache-2.0

// The four trainable networks plus the small heads hanging off them.

#pragma once

#include <cstdint>
#include <random>
#include <string>
#include <vector>

#include "vlmim/autograd.hpp"
#include "vlmim/config.hpp"
#include "vlmim/layers.hpp"
#include "vlmim/masking.hpp"

namespace vlmim {

namespace token {
inline constexpr int kPad = 0;
inline constexpr int kCls = 1;
inline constexpr int kMask = 2;
inline constexpr int kEos = 3;
inline constexpr int kFirstWord = 4;
}  // namespace token

/// Pixels in [0, 1], layout [batch, channels, height, width].
template <typename T>
struct ImageBatch {
  int batch = 0;
  int channels = 3;
  int height = 0;
  int width = 0;
  std::vector<T> pixels;

  static ImageBatch zeros(int batch, const ModelConfig& cfg);
  std::size_t image_stride() const { return static_cast<std::size_t>(channels) * height * width; }
  void validate(const ModelConfig& cfg) const;
  /// Images at the given batch positions, in order.
  ImageBatch select(std::span<const int> rows) const;
};

/// Token ids, row-major [batch, width]. Column 0 holds the CLS id; positions
/// at or beyond a row's length hold the pad id and are never attended to.
struct TokenBatch {
  int batch = 0;
  int width = 0;
  std::vector<int> ids;
  std::vector<int> lengths;

  int at(int row, int col) const { return ids[static_cast<std::size_t>(row) * width + col]; }
  std::vector<std::uint8_t> valid_mask() const;
  void validate(int vocab_size, int max_width) const;
  TokenBatch select(std::span<const int> rows) const;
};

/// [batch, slots, dim] features; slot 0 is CLS. `valid` holds one flag per
/// slot (empty means every slot is valid).
template <typename T>
struct FeatureSequence {
  Var<T> values;
  std::vector<std::uint8_t> valid;

  int batch() const { return values.dim(0); }
  int slots() const { return values.dim(1); }
  int dim() const { return values.dim(2); }
  /// [batch, dim] CLS rows.
  Var<T> cls() const;
  /// [batch * (slots-1), dim] non-CLS rows.
  Var<T> tail() const;
  FeatureSequence detach() const { return {values.detach(), valid}; }
};

/// Flattened pixel patches [batch, N, channels*patch*patch]; within a patch the
/// order is channel, row, column; patches are row-major over the grid.
template <typename T>
std::vector<T> extract_patches(const ImageBatch<T>& images, const ModelConfig& cfg);

template <typename T>
class ImageEncoder {
 public:
  ImageEncoder(ParamStore<T>& store, const std::string& prefix, const ModelConfig& cfg, std::mt19937_64& rng);

  /// Learned linear map of every flattened patch, [batch, N, D].
  Var<T> patch_embed(const ImageBatch<T>& images) const;
  /// patch_embed plus the positional term of each patch slot.
  Var<T> patchify(const ImageBatch<T>& images) const;
  /// Layer-1 input [batch, 1+N, D]: masked slots take the mask token, then CLS
  /// is prepended and positional terms are added.
  Var<T> embed(const ImageBatch<T>& images, const std::vector<PatchMask>* masks) const;
  /// Runs blocks first_layer.. (0-based) on the visual activation x. From
  /// inject_start_layer onward the text slots join the attention sequence;
  /// they are dropped before the final norm. taps, if given, receives the
  /// visual input of every executed layer followed by the pre-norm output.
  Var<T> run_layers(const Var<T>& x, int first_layer, const FeatureSequence<T>* text, std::vector<Var<T>>* taps) const;
  FeatureSequence<T> forward(const ImageBatch<T>& images, const FeatureSequence<T>* text = nullptr,
                             const std::vector<PatchMask>* masks = nullptr, std::vector<Var<T>>* taps = nullptr) const;

  const ModelConfig& config() const { return cfg_; }

  Linear<T> patch_proj;
  Var<T> cls_token;
  Var<T> position;
  Var<T> mask_token;
  std::vector<EncoderBlock<T>> blocks;
  LayerNorm<T> norm;

 private:
  ModelConfig cfg_;
};

template <typename T>
class TextEncoder {
 public:
  TextEncoder(ParamStore<T>& store, const std::string& prefix, const ModelConfig& cfg, std::mt19937_64& rng);
  FeatureSequence<T> forward(const TokenBatch& tokens) const;

  Var<T> embedding;
  Var<T> position;
  std::vector<EncoderBlock<T>> blocks;
  LayerNorm<T> norm;

 private:
  ModelConfig cfg_;
};

/// Text slots as queries, cross-attending to image slots.
template <typename T>
class FusionEncoder {
 public:
  FusionEncoder(ParamStore<T>& store, const std::string& prefix, const ModelConfig& cfg, std::mt19937_64& rng);
  FeatureSequence<T> forward(const FeatureSequence<T>& image, const FeatureSequence<T>& text) const;

  std::vector<CrossBlock<T>> blocks;
  LayerNorm<T> norm;

 private:
  ModelConfig cfg_;
};

/// Causal decoder over token rows, cross-attending to fused features.
template <typename T>
class Decoder {
 public:
  Decoder(ParamStore<T>& store, const std::string& prefix, const ModelConfig& cfg, std::mt19937_64& rng);
  /// Logits [batch, width, V]; position j predicts the token at j+1.
  Var<T> forward(const FeatureSequence<T>& memory, const TokenBatch& tokens) const;

  Var<T> embedding;
  Var<T> position;
  std::vector<CrossBlock<T>> blocks;
  LayerNorm<T> norm;
  Linear<T> lm_head;

 private:
  ModelConfig cfg_;
};

/// MLP from features to K code logits.
template <typename T>
class EncodingHead {
 public:
  EncodingHead(ParamStore<T>& store, const std::string& prefix, const ModelConfig& cfg, std::mt19937_64& rng);
  Var<T> logits(const Var<T>& features) const { return fc2(gelu(fc1(features))); }

  Linear<T> fc1, fc2;
};

/// Student model: all trainable parameters.
template <typename T>
class VlModel {
 public:
  VlModel(const ModelConfig& cfg, std::uint64_t seed);
  VlModel(const VlModel&) = delete;
  VlModel& operator=(const VlModel&) = delete;

  const ModelConfig& config() const { return cfg_; }
  const ParamStore<T>& params() const { return params_; }
  ParamStore<T>& params() { return params_; }

  /// Projected CLS rows [batch, D] for contrastive alignment (unnormalised).
  Var<T> image_embedding(const FeatureSequence<T>& image) const { return vision_proj(image.cls()); }
  Var<T> text_embedding(const FeatureSequence<T>& text) const { return text_proj(text.cls()); }
  /// Effective contrastive temperature (clamped learnable scalar).
  Var<T> contrastive_temperature() const { return clamp(itc_temp, T(0.001), T(0.5)); }

 private:
  ModelConfig cfg_;
  std::mt19937_64 init_rng_;
  ParamStore<T> params_;

 public:
  ImageEncoder<T> image;
  EncodingHead<T> head;
  TextEncoder<T> text;
  FusionEncoder<T> fusion;
  Decoder<T> decoder;
  Linear<T> vision_proj, text_proj;
  Var<T> itc_temp;
  Linear<T> itm_head;
  LayerNorm<T> mlm_norm;
  Linear<T> mlm_head;
  Linear<T> pixel_head;
};

/// Parameter name prefixes of the visual group (image encoder + encoding head).
inline constexpr std::string_view kImageEncoderPrefix = "image_encoder.";
inline constexpr std::string_view kHeadPrefix = "head.";

}  // namespace vlmim
