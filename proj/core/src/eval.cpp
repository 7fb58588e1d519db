// Copyright 2026 The vlmim Authors
// SPDX-License-Identifier: Apache-2.0

#include "vlmim/eval.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <sstream>

#include "vlmim/errors.hpp"

namespace vlmim {

void to_json(nlohmann::json& j, const RecallTable& r) {
  j = nlohmann::json{{"pairs", r.pairs},
                     {"image_to_text", {{"R@1", r.i2t[0]}, {"R@5", r.i2t[1]}, {"R@10", r.i2t[2]}}},
                     {"text_to_image", {{"R@1", r.t2i[0]}, {"R@5", r.t2i[1]}, {"R@10", r.t2i[2]}}}};
}

int rank_of(std::span<const double> scores, int target) {
  const double s = scores[static_cast<std::size_t>(target)];
  int rank = 0;
  for (int j = 0; j < static_cast<int>(scores.size()); ++j) {
    if (scores[j] > s || (scores[j] == s && j < target)) ++rank;
  }
  return rank;
}

namespace {

constexpr int kRecallAt[3] = {1, 5, 10};

void accumulate(double (&table)[3], int rank) {
  for (int k = 0; k < 3; ++k) table[k] += rank < kRecallAt[k] ? 1.0 : 0.0;
}

// Candidate order by descending score with the lower index first on ties.
std::vector<int> ranking(std::span<const double> scores) {
  std::vector<int> order(scores.size());
  std::iota(order.begin(), order.end(), 0);
  std::stable_sort(order.begin(), order.end(), [&](int a, int b) { return scores[a] > scores[b]; });
  return order;
}

std::vector<double> column(std::span<const double> m, int n, int c) {
  std::vector<double> out(static_cast<std::size_t>(n));
  for (int r = 0; r < n; ++r) out[r] = m[static_cast<std::size_t>(r) * n + c];
  return out;
}

}  // namespace

RecallTable recall_from_similarity(std::span<const double> similarity, int n) {
  if (n < 1) throw InputError("recall_from_similarity: empty split");
  if (similarity.size() != static_cast<std::size_t>(n) * n) throw ShapeError("similarity must be n x n");
  RecallTable t;
  t.pairs = n;
  for (int i = 0; i < n; ++i) {
    accumulate(t.i2t, rank_of(similarity.subspan(static_cast<std::size_t>(i) * n, n), i));
    const auto col = column(similarity, n, i);
    accumulate(t.t2i, rank_of(col, i));
  }
  for (int k = 0; k < 3; ++k) {
    t.i2t[k] /= n;
    t.t2i[k] /= n;
  }
  return t;
}

template <typename T>
std::vector<double> retrieval_similarity(const VlModel<T>& model, const DatasetManifest& manifest,
                                         const std::vector<int>& rows, const Vocabulary& vocab) {
  NoGradGuard no_grad;
  const ModelConfig& cfg = model.config();
  const ImageBatch<T> images = make_image_batch<T>(manifest, rows, cfg);
  const TokenBatch tokens = make_token_batch(manifest, rows, vocab, cfg);
  const Var<T> img = model.image_embedding(model.image.forward(images));
  const Var<T> txt = model.text_embedding(model.text.forward(tokens));
  return contrastive_similarity(img, txt, 1.0);
}

template <typename T>
RecallTable eval_retrieval(const VlModel<T>& model, const DatasetManifest& manifest, const std::string& split,
                           const Vocabulary& vocab, int rerank_k) {
  const std::vector<int> rows = manifest.split_indices(split);
  if (rows.empty()) throw InputError("eval_retrieval: split '" + split + "' is empty");
  if (rows.size() < 2) throw InputError("eval_retrieval: split '" + split + "' needs at least 2 pairs");
  const int n = static_cast<int>(rows.size());
  const std::vector<double> sim = retrieval_similarity(model, manifest, rows, vocab);
  if (rerank_k <= 0) return recall_from_similarity(sim, n);

  NoGradGuard no_grad;
  const ModelConfig& cfg = model.config();
  const int k = std::min(rerank_k, n);
  const FeatureSequence<T> image = model.image.forward(make_image_batch<T>(manifest, rows, cfg));
  const FeatureSequence<T> text = model.text.forward(make_token_batch(manifest, rows, vocab, cfg));

  // Match logits for every (query, shortlisted candidate) pair, both directions.
  auto rerank = [&](bool image_query) {
    std::vector<std::vector<int>> orders;
    std::vector<int> image_rows, text_rows;
    for (int q = 0; q < n; ++q) {
      const auto scores = image_query ? std::vector<double>(sim.begin() + static_cast<std::ptrdiff_t>(q) * n,
                                                            sim.begin() + static_cast<std::ptrdiff_t>(q + 1) * n)
                                      : column(sim, n, q);
      orders.push_back(ranking(scores));
      for (int c = 0; c < k; ++c) {
        image_rows.push_back(image_query ? q : orders.back()[c]);
        text_rows.push_back(image_query ? orders.back()[c] : q);
      }
    }
    const FeatureSequence<T> fused = model.fusion.forward(select_rows(image, std::span<const int>(image_rows)),
                                                          select_rows(text, std::span<const int>(text_rows)));
    const Var<T> logits = model.itm_head(fused.cls());
    double table[3] = {0, 0, 0};
    for (int q = 0; q < n; ++q) {
      auto& order = orders[q];
      std::vector<double> head(static_cast<std::size_t>(k));
      for (int c = 0; c < k; ++c) head[c] = static_cast<double>(logits.value()[static_cast<std::size_t>(q) * k + c]);
      std::vector<int> idx(static_cast<std::size_t>(k));
      std::iota(idx.begin(), idx.end(), 0);
      std::stable_sort(idx.begin(), idx.end(), [&](int a, int b) {
        if (head[a] != head[b]) return head[a] > head[b];
        return order[a] < order[b];
      });
      std::vector<int> reordered;
      for (int c : idx) reordered.push_back(order[c]);
      std::copy(reordered.begin(), reordered.end(), order.begin());
      const int rank = static_cast<int>(std::find(order.begin(), order.end(), q) - order.begin());
      accumulate(table, rank);
    }
    return std::vector<double>{table[0] / n, table[1] / n, table[2] / n};
  };

  RecallTable t;
  t.pairs = n;
  const auto i2t = rerank(true);
  const auto t2i = rerank(false);
  for (int j = 0; j < 3; ++j) {
    t.i2t[j] = i2t[j];
    t.t2i[j] = t2i[j];
  }
  return t;
}

std::string PatternReport::layout(int image) const {
  const auto& c = codes.at(static_cast<std::size_t>(image));
  std::ostringstream os;
  for (int r = 0; r < grid; ++r) {
    for (int col = 0; col < grid; ++col) {
      if (col) os << ' ';
      os << c[static_cast<std::size_t>(r) * grid + col];
    }
    os << '\n';
  }
  return os.str();
}

void to_json(nlohmann::json& j, const PatternReport& r) {
  nlohmann::json clusters = nlohmann::json::object();
  for (const auto& [code, list] : r.members) {
    std::map<int, int> by_label;
    for (const auto& [img, patch] : list) ++by_label[r.labels[img][patch]];
    nlohmann::json counts = nlohmann::json::object();
    for (const auto& [label, count] : by_label) counts[std::to_string(label)] = count;
    clusters[std::to_string(code)] = {{"size", list.size()}, {"label_counts", counts}};
  }
  nlohmann::json images = nlohmann::json::array();
  for (std::size_t i = 0; i < r.codes.size(); ++i) {
    images.push_back({{"record", r.records[i]}, {"codes", r.codes[i]}, {"labels", r.labels[i]}});
  }
  j = nlohmann::json{{"grid", r.grid},   {"code_dim", r.code_dim}, {"purity", r.purity},
                     {"codes_used", r.members.size()}, {"clusters", clusters}, {"images", images}};
}

double code_purity(const std::vector<std::vector<int>>& codes, const std::vector<std::vector<int>>& labels) {
  if (codes.size() != labels.size()) throw ShapeError("code_purity: codes and labels differ in length");
  std::map<int, std::map<int, int>> table;
  std::size_t total = 0;
  for (std::size_t i = 0; i < codes.size(); ++i) {
    if (codes[i].size() != labels[i].size()) throw ShapeError("code_purity: image patch counts differ");
    for (std::size_t p = 0; p < codes[i].size(); ++p) {
      ++table[codes[i][p]][labels[i][p]];
      ++total;
    }
  }
  if (total == 0) return 0.0;
  std::size_t majority = 0;
  for (const auto& [code, by_label] : table) {
    int best = 0;
    for (const auto& [label, count] : by_label) best = std::max(best, count);
    majority += static_cast<std::size_t>(best);
  }
  return static_cast<double>(majority) / static_cast<double>(total);
}

template <typename T>
PatternReport pattern_report(const TeacherState<T>& teacher, const DatasetManifest& manifest,
                             const std::vector<int>& rows) {
  const ModelConfig& cfg = teacher.config();
  const int n = cfg.num_patches();
  const int k = cfg.code_dim;
  PatternReport report;
  report.grid = cfg.grid();
  report.code_dim = k;
  report.records = rows;
  constexpr std::size_t kChunk = 64;
  for (std::size_t start = 0; start < rows.size(); start += kChunk) {
    const std::vector<int> chunk(rows.begin() + static_cast<std::ptrdiff_t>(start),
                                 rows.begin() + static_cast<std::ptrdiff_t>(std::min(rows.size(), start + kChunk)));
    const ImageBatch<T> images = make_image_batch<T>(manifest, chunk, cfg);
    const DualCodes<T> codes = teacher_forward_dual<T>(teacher, images, nullptr, false);
    const auto& lp = codes.patch.log_probs.value();
    for (std::size_t b = 0; b < chunk.size(); ++b) {
      std::vector<int> ids(static_cast<std::size_t>(n));
      for (int p = 0; p < n; ++p) {
        const auto first = lp.begin() + static_cast<std::ptrdiff_t>((b * n + p) * k);
        ids[p] = static_cast<int>(std::max_element(first, first + k) - first);
      }
      report.codes.push_back(std::move(ids));
      report.labels.push_back(patch_labels(manifest.records.at(static_cast<std::size_t>(chunk[b])), cfg));
    }
  }
  for (std::size_t i = 0; i < report.codes.size(); ++i) {
    for (int p = 0; p < n; ++p) report.members[report.codes[i][p]].emplace_back(static_cast<int>(i), p);
  }
  report.purity = code_purity(report.codes, report.labels);
  return report;
}

std::string layout_ppm(const PatternReport& report, int columns, int cell) {
  const int images = static_cast<int>(report.codes.size());
  if (images == 0) throw InputError("layout_ppm: empty report");
  const int gap = 2;
  const int tile = report.grid * cell;
  const int cols = std::min(columns, images);
  const int tiles_y = (images + cols - 1) / cols;
  const int width = cols * (tile + gap) + gap;
  const int height = tiles_y * (tile + gap) + gap;
  std::string body(static_cast<std::size_t>(width) * height * 3, static_cast<char>(255));
  auto color = [](int code) {
    // Golden-ratio hue walk gives distinct colors for nearby ids.
    const double h = std::fmod(code * 0.61803398875, 1.0) * 6.0;
    const double x = 1.0 - std::abs(std::fmod(h, 2.0) - 1.0);
    double rgb[3] = {0, 0, 0};
    const int sector = static_cast<int>(h);
    const double table[6][3] = {{1, x, 0}, {x, 1, 0}, {0, 1, x}, {0, x, 1}, {x, 0, 1}, {1, 0, x}};
    for (int c = 0; c < 3; ++c) rgb[c] = 0.15 + 0.8 * table[sector % 6][c];
    return std::array<unsigned char, 3>{static_cast<unsigned char>(rgb[0] * 255), static_cast<unsigned char>(rgb[1] * 255),
                                        static_cast<unsigned char>(rgb[2] * 255)};
  };
  for (int i = 0; i < images; ++i) {
    const int ox = gap + (i % cols) * (tile + gap);
    const int oy = gap + (i / cols) * (tile + gap);
    for (int y = 0; y < tile; ++y) {
      for (int x = 0; x < tile; ++x) {
        const int code = report.codes[i][static_cast<std::size_t>(y / cell) * report.grid + x / cell];
        const auto rgb = color(code);
        const std::size_t at = (static_cast<std::size_t>(oy + y) * width + ox + x) * 3;
        for (int c = 0; c < 3; ++c) body[at + c] = static_cast<char>(rgb[c]);
      }
    }
  }
  return "P6\n" + std::to_string(width) + " " + std::to_string(height) + "\n255\n" + body;
}

#define VLMIM_INSTANTIATE(T)                                                                                        \
  template std::vector<double> retrieval_similarity(const VlModel<T>&, const DatasetManifest&,                      \
                                                    const std::vector<int>&, const Vocabulary&);                    \
  template RecallTable eval_retrieval(const VlModel<T>&, const DatasetManifest&, const std::string&,                \
                                      const Vocabulary&, int);                                                      \
  template PatternReport pattern_report(const TeacherState<T>&, const DatasetManifest&, const std::vector<int>&);

VLMIM_INSTANTIATE(float)
VLMIM_INSTANTIATE(double)

#undef VLMIM_INSTANTIATE

}  // namespace vlmim
