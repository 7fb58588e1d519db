// Copyright 2026 The vlmim Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <random>
#include <span>
#include <vector>

namespace vlmim {

/// Masked-patch selection for one image. Indices are 0-based patch positions
/// (feature slot = index + 1, slot 0 being CLS), sorted and unique.
struct PatchMask {
  std::vector<int> indices;
  std::vector<double> probs;  // sampling distribution the indices were drawn from
  double ratio = 0.0;
  int count = 0;  // M

  bool contains(int patch) const;
};

/// round-half-up(ratio * n), floored at 1.
int mask_count(double ratio, int n);

/// Cosine similarity between every patch feature and the paired text's global
/// feature. patch_feats is [batch, n, dim], text_global is [batch, dim].
/// A zero-norm operand yields similarity 0. Result is [batch, n].
template <typename T>
std::vector<double> patch_text_similarity(std::span<const T> patch_feats, std::span<const T> text_global, int batch,
                                          int n, int dim);

/// Softmax over one image's similarity scores.
std::vector<double> sampling_probabilities(std::span<const double> scores);

/// Draws round(ratio * N) distinct indices sequentially, each proportional to
/// the remaining probability mass. If the strictly positive mass runs out
/// early the remaining draws are uniform over the unused slots and a
/// diagnostic is emitted.
PatchMask sample_mask(std::span<const double> probs, double ratio, std::mt19937_64& rng);

/// Same as sample_mask with an exact count instead of a ratio.
PatchMask sample_mask_count(std::span<const double> probs, int count, std::mt19937_64& rng);

/// Uniform baseline: every patch equally likely.
PatchMask random_mask(int n, double ratio, std::mt19937_64& rng);

}  // namespace vlmim
