// Copyright 2026 The vlmim Authors
// SPDX-License-Identifier: Apache-2.0

// Retrieval recall and patch-code pattern analysis.

#pragma once

#include <map>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "vlmim/data.hpp"
#include "vlmim/objectives.hpp"

namespace vlmim {

struct RecallTable {
  int pairs = 0;
  double i2t[3] = {0, 0, 0};  // R@1, R@5, R@10, in [0, 1]
  double t2i[3] = {0, 0, 0};
};
void to_json(nlohmann::json& j, const RecallTable& r);

/// Position of the true item in a ranking of n candidates by descending score;
/// equal scores rank the lower index first.
int rank_of(std::span<const double> scores, int target);

/// Recall from a [n, n] similarity matrix (image rows, caption columns) where
/// the true pairs lie on the diagonal.
RecallTable recall_from_similarity(std::span<const double> similarity, int n);

/// Cosine similarity of the contrastive embeddings, [n, n], no augmentation.
template <typename T>
std::vector<double> retrieval_similarity(const VlModel<T>& model, const DatasetManifest& manifest,
                                         const std::vector<int>& rows, const Vocabulary& vocab);

/// Recall over a split. With rerank_k > 0, the top rerank_k candidates of
/// every query are reordered by the fused match logit.
template <typename T>
RecallTable eval_retrieval(const VlModel<T>& model, const DatasetManifest& manifest, const std::string& split,
                           const Vocabulary& vocab, int rerank_k = 0);

struct PatternReport {
  int grid = 0;
  int code_dim = 0;
  std::vector<int> records;               // manifest index per image
  std::vector<std::vector<int>> codes;    // per image, N argmax code ids
  std::vector<std::vector<int>> labels;   // per image, N ground-truth labels
  std::map<int, std::vector<std::pair<int, int>>> members;  // code -> (image, patch)
  double purity = 0;

  /// sqrt(N) rows of space-separated code ids.
  std::string layout(int image) const;
};
void to_json(nlohmann::json& j, const PatternReport& r);

/// Sum over codes of the majority-label count, divided by the patch count.
double code_purity(const std::vector<std::vector<int>>& codes, const std::vector<std::vector<int>>& labels);

/// Teacher patch codes from the text-free pass, argmax per patch.
template <typename T>
PatternReport pattern_report(const TeacherState<T>& teacher, const DatasetManifest& manifest,
                             const std::vector<int>& rows);

/// Color image of the code layouts (one tile per image) as binary PPM bytes.
std::string layout_ppm(const PatternReport& report, int columns = 8, int cell = 6);

}  // namespace vlmim
