// Copyright 2026 The vlmim Authors
// SPDX-License-Identifier: Apache-2.0

// Procedural shapes corpus with compositional captions, the word-level
// vocabulary, batching, and two-view augmentation.

#pragma once

#include <array>
#include <cstdint>
#include <random>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "vlmim/mim.hpp"

namespace vlmim {

/// splitmix64 finaliser over a pair; used to key RNG streams by (seed, index).
std::uint64_t mix_seed(std::uint64_t a, std::uint64_t b);

enum class ShapeKind { kCircle = 0, kSquare, kTriangle, kDiamond };
inline constexpr int kShapeKinds = 4;

const std::vector<std::string>& color_names();
const std::vector<std::string>& shape_names();
/// RGB in [0, 1] of a named color index.
std::array<double, 3> color_rgb(int color);

struct ShapeSpec {
  ShapeKind kind = ShapeKind::kCircle;
  int color = 0;
  double cx = 0.5;  // center, in units of the image side
  double cy = 0.5;
  double radius = 0.2;
};

/// Spatial relation of the second shape to the first.
enum class Relation { kNone, kAbove, kBelow, kLeftOf, kRightOf };

struct Record {
  std::vector<ShapeSpec> shapes;  // one or two
  Relation relation = Relation::kNone;
  double background = 0.1;  // gray level
  std::string caption;
  std::string split;
};

struct DatasetManifest {
  std::uint64_t seed = 0;
  std::vector<Record> records;

  /// Record indices tagged with the split, in order.
  std::vector<int> split_indices(const std::string& split) const;
};

void to_json(nlohmann::json& j, const DatasetManifest& m);
void from_json(const nlohmann::json& j, DatasetManifest& m);

/// n records, every one unique, tagged with `split`. Requires n >= 8.
DatasetManifest generate_synthetic_corpus(int n, std::mt19937_64& rng, const std::string& split = "train");

/// Deterministic train + val corpus keyed by seed; val records never repeat a
/// train record.
DatasetManifest make_corpus(std::uint64_t seed, int train, int val);

/// Caption text implied by the shapes and relation.
std::string caption_for(const Record& r);

/// Pixel class map [size * size]: 0 background, 1 + ShapeKind for shape pixels
/// (later shapes drawn on top).
std::vector<int> render_labels(const Record& r, int size);

/// [3, size, size] in [0, 1].
std::vector<float> render_image(const Record& r, int size);

/// Majority pixel class of every patch, row-major over the grid.
std::vector<int> patch_labels(const Record& r, const ModelConfig& cfg);

/// Whitespace-separated words; ids follow the special tokens.
class Vocabulary {
 public:
  Vocabulary();
  int size() const { return token::kFirstWord + static_cast<int>(words_.size()); }
  int id(const std::string& word) const;
  const std::string& word(int id) const;
  const std::vector<std::string>& words() const { return words_; }

  /// CLS + words + EOS, padded to width 1 + max_text_len. Throws InputError on
  /// an unknown word or when the caption does not fit.
  std::vector<int> encode(const std::string& caption, int max_text_len, int* length = nullptr) const;
  /// Words between CLS and the first EOS or pad; special ids are skipped.
  std::string decode(const std::vector<int>& ids) const;

 private:
  std::vector<std::string> words_;
};

TokenBatch make_token_batch(const DatasetManifest& m, const std::vector<int>& rows, const Vocabulary& vocab,
                            const ModelConfig& cfg);

template <typename T>
ImageBatch<T> make_image_batch(const DatasetManifest& m, const std::vector<int>& rows, const ModelConfig& cfg);

struct AugmentConfig {
  bool identity = false;
  double min_scale = 0.75;  // crop side relative to the image side
  double flip_prob = 0.5;
  double brightness = 0.1;
  double contrast = 0.1;
};

void to_json(nlohmann::json& j, const AugmentConfig& a);
void from_json(const nlohmann::json& j, AugmentConfig& a);

/// Random square crop resized back (bilinear), horizontal flip and
/// brightness / contrast jitter, clamped to [0, 1].
template <typename T>
ImageBatch<T> augment(const ImageBatch<T>& images, const AugmentConfig& cfg, std::mt19937_64& rng);

/// Two independent augmentations; identity mode returns the input twice.
template <typename T>
ViewPair<T> augment_two_views(const ImageBatch<T>& images, const AugmentConfig& cfg, std::mt19937_64& rng);

}  // namespace vlmim
