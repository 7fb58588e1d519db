// Copyright 2026 The vlmim Authors
// SPDX-License-Identifier: Apache-2.0

// One masked-image-modeling step: text-guided masking, the text-injected
// student pass, the two-pass teacher, and the CLS and patch losses.

#pragma once

#include <random>
#include <vector>

#include "vlmim/distill.hpp"

namespace vlmim {

template <typename T>
struct ViewPair {
  ImageBatch<T> view1;
  ImageBatch<T> view2;
};

/// Mean over masked slots of -sum_k teacher log student, averaged per image
/// then over the batch. Codes are [batch, N, K]. per_patch, if given,
/// receives the cross-entropy of every masked slot in mask order.
template <typename T>
Var<T> mim_loss(const CategoricalCode<T>& student, const CategoricalCode<T>& teacher,
                const std::vector<PatchMask>& masks, std::vector<double>* per_patch = nullptr);

struct MimOptions {
  /// Overrides the sampled masks (one per image) when non-empty.
  std::vector<PatchMask> forced_masks;
  /// Per-call switch on top of ModelConfig::inject_text.
  bool inject_text = true;
};

template <typename T>
struct MimResult {
  Var<T> loss_cls;
  Var<T> loss_patch;
  std::vector<PatchMask> masks;
  std::vector<double> patch_ce;  // one entry per masked slot; empty for the pixel baseline
  std::vector<T> teacher_cls_logits;
  FeatureSequence<T> text;   // student text features (with gradients)
  FeatureSequence<T> image;  // student view-1 features, text-free and unmasked
};

/// Masks for view2 from a gradient-free student pass. Text-guided masking
/// scores every patch by cosine similarity to the text CLS feature.
template <typename T>
std::vector<PatchMask> select_masks(const VlModel<T>& model, const ImageBatch<T>& view2, const FeatureSequence<T>& text,
                                    std::mt19937_64& rng);

template <typename T>
MimResult<T> mim_step(const ViewPair<T>& views, const TokenBatch& tokens, const VlModel<T>& student,
                      const TeacherState<T>& teacher, std::mt19937_64& rng, const MimOptions& options = {});

/// Color-quantizer baseline label of every patch: the mean color quantized to
/// floor(cbrt(K)) levels per channel. [batch * N]
template <typename T>
std::vector<int> color_quant_labels(const ImageBatch<T>& images, const ModelConfig& cfg);

}  // namespace vlmim
