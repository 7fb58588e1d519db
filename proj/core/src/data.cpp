// Copyright 2026 The vlmim Authors
// SPDX-License-Identifier: Apache-2.0

#include "vlmim/data.hpp"

#include <algorithm>
#include <cmath>
#include <set>
#include <sstream>
#include <unordered_map>

#include "vlmim/errors.hpp"

namespace vlmim {

std::uint64_t mix_seed(std::uint64_t a, std::uint64_t b) {
  std::uint64_t z = a + 0x9e3779b97f4a7c15ULL * (b + 1);
  z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ULL;
  z = (z ^ (z >> 27)) * 0x94d049bb133111ebULL;
  return z ^ (z >> 31);
}

const std::vector<std::string>& color_names() {
  static const std::vector<std::string> names = {"red", "green", "blue", "yellow", "purple", "cyan"};
  return names;
}

const std::vector<std::string>& shape_names() {
  static const std::vector<std::string> names = {"circle", "square", "triangle", "diamond"};
  return names;
}

std::array<double, 3> color_rgb(int color) {
  static const std::array<double, 3> table[] = {{0.90, 0.15, 0.15}, {0.15, 0.80, 0.20}, {0.20, 0.30, 0.95},
                                                {0.95, 0.90, 0.15}, {0.60, 0.20, 0.80}, {0.10, 0.85, 0.90}};
  if (color < 0 || color >= static_cast<int>(std::size(table))) throw InputError("unknown color index");
  return table[color];
}

namespace {

const char* relation_words(Relation r) {
  switch (r) {
    case Relation::kAbove: return "above";
    case Relation::kBelow: return "below";
    case Relation::kLeftOf: return "left of";
    case Relation::kRightOf: return "right of";
    case Relation::kNone: break;
  }
  return "";
}

bool inside(const ShapeSpec& s, double x, double y) {
  const double dx = x - s.cx;
  const double dy = y - s.cy;
  const double r = s.radius;
  switch (s.kind) {
    case ShapeKind::kCircle:
      return dx * dx + dy * dy <= r * r;
    case ShapeKind::kSquare:
      return std::abs(dx) <= 0.8 * r && std::abs(dy) <= 0.8 * r;
    case ShapeKind::kDiamond:
      return std::abs(dx) + std::abs(dy) <= r;
    case ShapeKind::kTriangle: {
      // Apex up; y grows downward.
      const double top = -r;
      const double bottom = 0.8 * r;
      if (dy < top || dy > bottom) return false;
      const double half = r * (dy - top) / (bottom - top);
      return std::abs(dx) <= half;
    }
  }
  return false;
}

std::string record_key(const Record& r) {
  std::ostringstream os;
  os << r.caption << '|';
  for (const auto& s : r.shapes) {
    os << std::lround(s.cx * 100) << ',' << std::lround(s.cy * 100) << ',' << std::lround(s.radius * 100) << ';';
  }
  os << std::lround(r.background * 100);
  return os.str();
}

Record draw_record(std::mt19937_64& rng) {
  std::uniform_real_distribution<double> unit(0.0, 1.0);
  auto uniform = [&](double lo, double hi) { return lo + (hi - lo) * unit(rng); };
  std::uniform_int_distribution<int> pick_kind(0, kShapeKinds - 1);
  std::uniform_int_distribution<int> pick_color(0, static_cast<int>(color_names().size()) - 1);

  Record r;
  r.background = uniform(0.05, 0.25);
  if (unit(rng) < 0.25) {
    ShapeSpec s;
    s.kind = static_cast<ShapeKind>(pick_kind(rng));
    s.color = pick_color(rng);
    s.radius = uniform(0.2, 0.3);
    s.cx = uniform(0.35, 0.65);
    s.cy = uniform(0.35, 0.65);
    r.shapes.push_back(s);
  } else {
    std::uniform_int_distribution<int> pick_rel(1, 4);
    r.relation = static_cast<Relation>(pick_rel(rng));
    ShapeSpec a, b;
    a.kind = static_cast<ShapeKind>(pick_kind(rng));
    b.kind = static_cast<ShapeKind>(pick_kind(rng));
    a.color = pick_color(rng);
    do {
      b.color = pick_color(rng);
    } while (b.color == a.color);
    a.radius = uniform(0.14, 0.2);
    b.radius = uniform(0.14, 0.2);
    const double near = uniform(0.22, 0.3);
    const double far = uniform(0.7, 0.78);
    const double free_a = uniform(0.3, 0.7);
    const double free_b = uniform(0.3, 0.7);
    switch (r.relation) {
      case Relation::kAbove: a.cy = near; b.cy = far; a.cx = free_a; b.cx = free_b; break;
      case Relation::kBelow: a.cy = far; b.cy = near; a.cx = free_a; b.cx = free_b; break;
      case Relation::kLeftOf: a.cx = near; b.cx = far; a.cy = free_a; b.cy = free_b; break;
      case Relation::kRightOf: a.cx = far; b.cx = near; a.cy = free_a; b.cy = free_b; break;
      case Relation::kNone: break;
    }
    r.shapes = {a, b};
  }
  r.caption = caption_for(r);
  return r;
}

}  // namespace

std::string caption_for(const Record& r) {
  auto phrase = [](const ShapeSpec& s) {
    return "a " + color_names()[s.color] + " " + shape_names()[static_cast<int>(s.kind)];
  };
  if (r.shapes.empty()) throw InputError("record has no shapes");
  std::string out = phrase(r.shapes[0]);
  if (r.shapes.size() > 1) out += std::string(" ") + relation_words(r.relation) + " " + phrase(r.shapes[1]);
  return out;
}

std::vector<int> DatasetManifest::split_indices(const std::string& split) const {
  std::vector<int> out;
  for (std::size_t i = 0; i < records.size(); ++i) {
    if (records[i].split == split) out.push_back(static_cast<int>(i));
  }
  return out;
}

DatasetManifest generate_synthetic_corpus(int n, std::mt19937_64& rng, const std::string& split) {
  if (n < 8) throw InputError("generate_synthetic_corpus: need at least 8 records");
  DatasetManifest m;
  std::set<std::string> seen;
  while (static_cast<int>(m.records.size()) < n) {
    Record r = draw_record(rng);
    if (!seen.insert(record_key(r)).second) continue;
    r.split = split;
    m.records.push_back(std::move(r));
  }
  return m;
}

DatasetManifest make_corpus(std::uint64_t seed, int train, int val) {
  if (train + val < 8) throw InputError("make_corpus: need at least 8 records");
  DatasetManifest m;
  m.seed = seed;
  std::set<std::string> seen;
  for (int i = 0; i < train + val; ++i) {
    for (std::uint64_t attempt = 0;; ++attempt) {
      std::mt19937_64 rng(mix_seed(mix_seed(seed, static_cast<std::uint64_t>(i)), attempt));
      Record r = draw_record(rng);
      if (!seen.insert(record_key(r)).second) continue;
      r.split = i < train ? "train" : "val";
      m.records.push_back(std::move(r));
      break;
    }
  }
  return m;
}

std::vector<int> render_labels(const Record& r, int size) {
  std::vector<int> labels(static_cast<std::size_t>(size) * size, 0);
  for (int y = 0; y < size; ++y) {
    for (int x = 0; x < size; ++x) {
      const double u = (x + 0.5) / size;
      const double v = (y + 0.5) / size;
      for (const auto& s : r.shapes) {
        if (inside(s, u, v)) labels[static_cast<std::size_t>(y) * size + x] = 1 + static_cast<int>(s.kind);
      }
    }
  }
  return labels;
}

std::vector<float> render_image(const Record& r, int size) {
  const std::size_t plane = static_cast<std::size_t>(size) * size;
  std::vector<float> px(3 * plane, static_cast<float>(r.background));
  for (int y = 0; y < size; ++y) {
    for (int x = 0; x < size; ++x) {
      const double u = (x + 0.5) / size;
      const double v = (y + 0.5) / size;
      for (const auto& s : r.shapes) {
        if (!inside(s, u, v)) continue;
        const auto rgb = color_rgb(s.color);
        for (int c = 0; c < 3; ++c) px[c * plane + static_cast<std::size_t>(y) * size + x] = static_cast<float>(rgb[c]);
      }
    }
  }
  return px;
}

std::vector<int> patch_labels(const Record& r, const ModelConfig& cfg) {
  const int size = cfg.image_size;
  const int p = cfg.patch_size;
  const int g = cfg.grid();
  const auto pixels = render_labels(r, size);
  std::vector<int> out(static_cast<std::size_t>(g) * g, 0);
  for (int gy = 0; gy < g; ++gy) {
    for (int gx = 0; gx < g; ++gx) {
      std::array<int, 1 + kShapeKinds> counts{};
      for (int y = gy * p; y < (gy + 1) * p; ++y) {
        for (int x = gx * p; x < (gx + 1) * p; ++x) ++counts[pixels[static_cast<std::size_t>(y) * size + x]];
      }
      out[static_cast<std::size_t>(gy) * g + gx] =
          static_cast<int>(std::max_element(counts.begin(), counts.end()) - counts.begin());
    }
  }
  return out;
}

void to_json(nlohmann::json& j, const DatasetManifest& m) {
  j = nlohmann::json{{"seed", m.seed}, {"records", nlohmann::json::array()}};
  for (const auto& r : m.records) {
    nlohmann::json shapes = nlohmann::json::array();
    for (const auto& s : r.shapes) {
      shapes.push_back({{"kind", shape_names()[static_cast<int>(s.kind)]},
                        {"color", color_names()[s.color]},
                        {"cx", s.cx},
                        {"cy", s.cy},
                        {"radius", s.radius}});
    }
    j["records"].push_back({{"caption", r.caption},
                            {"split", r.split},
                            {"background", r.background},
                            {"relation", static_cast<int>(r.relation)},
                            {"shapes", shapes}});
  }
}

void from_json(const nlohmann::json& j, DatasetManifest& m) {
  auto index_of = [](const std::vector<std::string>& names, const std::string& v) {
    const auto it = std::find(names.begin(), names.end(), v);
    if (it == names.end()) throw InputError("manifest: unknown name '" + v + "'");
    return static_cast<int>(it - names.begin());
  };
  try {
    m.seed = j.at("seed").get<std::uint64_t>();
    m.records.clear();
    for (const auto& jr : j.at("records")) {
      Record r;
      r.caption = jr.at("caption").get<std::string>();
      r.split = jr.at("split").get<std::string>();
      r.background = jr.at("background").get<double>();
      r.relation = static_cast<Relation>(jr.at("relation").get<int>());
      for (const auto& js : jr.at("shapes")) {
        ShapeSpec s;
        s.kind = static_cast<ShapeKind>(index_of(shape_names(), js.at("kind").get<std::string>()));
        s.color = index_of(color_names(), js.at("color").get<std::string>());
        s.cx = js.at("cx").get<double>();
        s.cy = js.at("cy").get<double>();
        s.radius = js.at("radius").get<double>();
        r.shapes.push_back(s);
      }
      m.records.push_back(std::move(r));
    }
  } catch (const nlohmann::json::exception& e) {
    throw InputError(std::string("manifest: ") + e.what());
  }
}

Vocabulary::Vocabulary() {
  words_ = {"a", "above", "below", "left", "right", "of"};
  for (const auto& c : color_names()) words_.push_back(c);
  for (const auto& s : shape_names()) words_.push_back(s);
}

int Vocabulary::id(const std::string& word) const {
  const auto it = std::find(words_.begin(), words_.end(), word);
  if (it == words_.end()) throw InputError("unknown word '" + word + "'");
  return token::kFirstWord + static_cast<int>(it - words_.begin());
}

const std::string& Vocabulary::word(int id) const {
  if (id < token::kFirstWord || id >= size()) throw InputError("token id " + std::to_string(id) + " is not a word");
  return words_[static_cast<std::size_t>(id - token::kFirstWord)];
}

std::vector<int> Vocabulary::encode(const std::string& caption, int max_text_len, int* length) const {
  std::vector<int> ids = {token::kCls};
  std::istringstream in(caption);
  for (std::string w; in >> w;) ids.push_back(id(w));
  ids.push_back(token::kEos);
  if (static_cast<int>(ids.size()) - 1 > max_text_len) {
    throw InputError("caption '" + caption + "' needs " + std::to_string(ids.size() - 1) + " slots, limit is " +
                     std::to_string(max_text_len));
  }
  if (length) *length = static_cast<int>(ids.size());
  ids.resize(static_cast<std::size_t>(max_text_len) + 1, token::kPad);
  return ids;
}

std::string Vocabulary::decode(const std::vector<int>& ids) const {
  std::string out;
  for (int id : ids) {
    if (id == token::kEos || id == token::kPad) break;
    if (id < token::kFirstWord || id >= size()) continue;
    if (!out.empty()) out += ' ';
    out += word(id);
  }
  return out;
}

TokenBatch make_token_batch(const DatasetManifest& m, const std::vector<int>& rows, const Vocabulary& vocab,
                            const ModelConfig& cfg) {
  if (vocab.size() > cfg.vocab_size) throw ConfigError("vocab_size is smaller than the corpus vocabulary");
  TokenBatch t;
  t.batch = static_cast<int>(rows.size());
  t.width = cfg.text_slots();
  for (int r : rows) {
    int len = 0;
    const auto ids = vocab.encode(m.records.at(static_cast<std::size_t>(r)).caption, cfg.max_text_len, &len);
    t.ids.insert(t.ids.end(), ids.begin(), ids.end());
    t.lengths.push_back(len);
  }
  return t;
}

template <typename T>
ImageBatch<T> make_image_batch(const DatasetManifest& m, const std::vector<int>& rows, const ModelConfig& cfg) {
  if (cfg.channels != 3) throw ConfigError("the synthetic corpus renders 3-channel images");
  ImageBatch<T> out = ImageBatch<T>::zeros(static_cast<int>(rows.size()), cfg);
  std::size_t offset = 0;
  for (int r : rows) {
    const auto px = render_image(m.records.at(static_cast<std::size_t>(r)), cfg.image_size);
    for (float v : px) out.pixels[offset++] = static_cast<T>(v);
  }
  return out;
}

void to_json(nlohmann::json& j, const AugmentConfig& a) {
  j = nlohmann::json{{"identity", a.identity},
                     {"min_scale", a.min_scale},
                     {"flip_prob", a.flip_prob},
                     {"brightness", a.brightness},
                     {"contrast", a.contrast}};
}

void from_json(const nlohmann::json& j, AugmentConfig& a) {
  for (auto it = j.begin(); it != j.end(); ++it) {
    const std::string& k = it.key();
    if (k == "identity") a.identity = it->get<bool>();
    else if (k == "min_scale") a.min_scale = it->get<double>();
    else if (k == "flip_prob") a.flip_prob = it->get<double>();
    else if (k == "brightness") a.brightness = it->get<double>();
    else if (k == "contrast") a.contrast = it->get<double>();
    else throw ConfigError("unknown augmentation key '" + k + "'");
  }
  if (!(a.min_scale > 0.0 && a.min_scale <= 1.0)) throw ConfigError("min_scale must lie in (0, 1]");
}

template <typename T>
ImageBatch<T> augment(const ImageBatch<T>& images, const AugmentConfig& cfg, std::mt19937_64& rng) {
  if (cfg.identity) return images;
  std::uniform_real_distribution<double> unit(0.0, 1.0);
  ImageBatch<T> out = images;
  const int h = images.height;
  const int w = images.width;
  const std::size_t plane = static_cast<std::size_t>(h) * w;
  for (int b = 0; b < images.batch; ++b) {
    const double scale = cfg.min_scale + (1.0 - cfg.min_scale) * unit(rng);
    const double side_y = scale * h;
    const double side_x = scale * w;
    const double y0 = (h - side_y) * unit(rng);
    const double x0 = (w - side_x) * unit(rng);
    const bool flip = unit(rng) < cfg.flip_prob;
    const double brightness = cfg.brightness * (2.0 * unit(rng) - 1.0);
    const double contrast = 1.0 + cfg.contrast * (2.0 * unit(rng) - 1.0);

    const T* src = images.pixels.data() + b * images.image_stride();
    T* dst = out.pixels.data() + b * images.image_stride();
    for (int c = 0; c < images.channels; ++c) {
      const T* sp = src + c * plane;
      double mean = 0;
      for (std::size_t i = 0; i < plane; ++i) mean += sp[i];
      mean /= static_cast<double>(plane);
      for (int y = 0; y < h; ++y) {
        const double sy = std::clamp(y0 + (y + 0.5) * side_y / h - 0.5, 0.0, h - 1.0);
        const int ya = static_cast<int>(sy);
        const int yb = std::min(ya + 1, h - 1);
        const double fy = sy - ya;
        for (int x = 0; x < w; ++x) {
          const int xo = flip ? w - 1 - x : x;
          const double sx = std::clamp(x0 + (xo + 0.5) * side_x / w - 0.5, 0.0, w - 1.0);
          const int xa = static_cast<int>(sx);
          const int xb = std::min(xa + 1, w - 1);
          const double fx = sx - xa;
          const double v = (1 - fy) * ((1 - fx) * sp[ya * w + xa] + fx * sp[ya * w + xb]) +
                           fy * ((1 - fx) * sp[yb * w + xa] + fx * sp[yb * w + xb]);
          const double jittered = (v - mean) * contrast + mean + brightness;
          dst[c * plane + static_cast<std::size_t>(y) * w + x] = static_cast<T>(std::clamp(jittered, 0.0, 1.0));
        }
      }
    }
  }
  return out;
}

template <typename T>
ViewPair<T> augment_two_views(const ImageBatch<T>& images, const AugmentConfig& cfg, std::mt19937_64& rng) {
  if (cfg.identity) return {images, images};
  ImageBatch<T> a = augment(images, cfg, rng);
  ImageBatch<T> b = augment(images, cfg, rng);
  return {std::move(a), std::move(b)};
}

#define VLMIM_INSTANTIATE(T)                                                                                      \
  template ImageBatch<T> make_image_batch(const DatasetManifest&, const std::vector<int>&, const ModelConfig&);    \
  template ImageBatch<T> augment(const ImageBatch<T>&, const AugmentConfig&, std::mt19937_64&);                  \
  template ViewPair<T> augment_two_views(const ImageBatch<T>&, const AugmentConfig&, std::mt19937_64&);

VLMIM_INSTANTIATE(float)
VLMIM_INSTANTIATE(double)

#undef VLMIM_INSTANTIATE

}  // namespace vlmim
