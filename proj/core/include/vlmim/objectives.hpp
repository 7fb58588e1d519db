// Copyright 2026 The vlmim Authors
// SPDX-License-Identifier: Apache-2.0

// Contrastive, matching, masked-language and prefix-language objectives, and
// the unweighted total.

#pragma once

#include <random>
#include <span>
#include <vector>

#include <nlohmann/json.hpp>

#include "vlmim/model.hpp"

namespace vlmim {

/// Symmetric in-batch InfoNCE on L2-normalised rows; logits are cosine / temperature.
template <typename T>
Var<T> itc_loss(const Var<T>& image_embed, const Var<T>& text_embed, const Var<T>& temperature);

/// Cosine similarity / temperature, [batch, batch] with image rows.
template <typename T>
std::vector<double> contrastive_similarity(const Var<T>& image_embed, const Var<T>& text_embed, double temperature);

struct ItmNegatives {
  std::vector<int> text_for_image;  // negative caption index for every image
  std::vector<int> image_for_text;  // negative image index for every caption
};

/// One negative per anchor, never the anchor's own pair. kHard draws
/// proportional to softmax of the similarity row with the true pair removed;
/// kUniform draws uniformly over the other indices. Empty for batch 1.
ItmNegatives sample_itm_negatives(std::span<const double> similarity, int batch, NegativeSampling mode,
                                  std::mt19937_64& rng);

/// Batch rows of a feature sequence, in the given order.
template <typename T>
FeatureSequence<T> select_rows(const FeatureSequence<T>& seq, std::span<const int> rows);

template <typename T>
struct ItmBatch {
  Var<T> logits;          // [pairs, 1]
  std::vector<T> labels;  // 1 matched, 0 mismatched
};

/// Fused match logits for the positives, then (image, negative text), then
/// (negative image, text). Only positives when negatives are empty.
template <typename T>
ItmBatch<T> itm_forward(const VlModel<T>& model, const FeatureSequence<T>& image, const FeatureSequence<T>& text,
                        const ItmNegatives& negatives);

/// Mean binary cross-entropy of match logits (any shape with one entry per label).
template <typename T>
Var<T> itm_loss(const Var<T>& logits, std::span<const T> labels);

struct MlmMasking {
  TokenBatch corrupted;
  std::vector<int> labels;  // [batch * width]; -1 where nothing is predicted
  int masked = 0;
};

/// Selects round(ratio * eligible) (at least one) word positions per row and
/// corrupts them 80/10/10 into mask / random word / unchanged. Eligible
/// positions are real words: never CLS, EOS or padding.
MlmMasking mask_tokens_for_mlm(const TokenBatch& tokens, double ratio, int vocab_size, std::mt19937_64& rng);

/// Mean token NLL over positions with a label >= 0; zero (with a diagnostic)
/// when there is none. logits is [batch, width, V].
template <typename T>
Var<T> token_nll_loss(const Var<T>& logits, std::span<const int> labels, const char* what);

template <typename T>
Var<T> mlm_loss(const VlModel<T>& model, const TokenBatch& tokens, const FeatureSequence<T>& image_feats,
                std::mt19937_64& rng);

/// MLM with an already drawn corruption (for deterministic evaluation).
template <typename T>
Var<T> mlm_loss(const VlModel<T>& model, const MlmMasking& masking, const FeatureSequence<T>& image_feats);

struct PlmBatch {
  TokenBatch prefix;         // CLS + the first k tokens of each row
  TokenBatch decoder_input;  // CLS + suffix shifted right
  std::vector<int> targets;  // [batch * decoder width]; -1 on padding
  std::vector<int> split;    // k per row; 0 for rows that were skipped
};

/// Splits every row at k uniform in [1, len-1], len counting the tokens after CLS.
/// Rows shorter than 2 are skipped. forced_split, if set, overrides the draw
/// (clamped into range).
PlmBatch make_plm_batch(const TokenBatch& tokens, std::mt19937_64& rng, int forced_split = 0);

template <typename T>
Var<T> plm_loss(const VlModel<T>& model, const TokenBatch& tokens, const FeatureSequence<T>& image_feats,
                std::mt19937_64& rng);

template <typename T>
Var<T> plm_loss(const VlModel<T>& model, const PlmBatch& batch, const FeatureSequence<T>& image_feats);

/// Greedy continuation: starting from CLS, appends the argmax token until EOS
/// or max_new tokens. memory is the fused prefix + image sequence. Returns the
/// generated tokens per row (EOS included when reached).
template <typename T>
std::vector<std::vector<int>> greedy_decode(const VlModel<T>& model, const FeatureSequence<T>& memory, int max_new);

/// Plain scalar values of a loss bundle, as written to the training log.
struct LossValues {
  double cls = 0, patch = 0, itc = 0, itm = 0, mlm = 0, plm = 0, total = 0;
};
void to_json(nlohmann::json& j, const LossValues& v);

template <typename T>
struct LossBundle {
  Var<T> cls, patch, itc, itm, mlm, plm, total;
  LossValues values() const;
};

/// Unweighted sum of the six components. Throws NonFiniteLossError naming the
/// first non-finite component.
template <typename T>
LossBundle<T> total_loss(Var<T> cls, Var<T> patch, Var<T> itc, Var<T> itm, Var<T> mlm, Var<T> plm);

}  // namespace vlmim
