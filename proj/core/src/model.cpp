// Copyright 2026 The vlmim Authors
// SPDX-License-Identifier: Apache-2.0

#include "vlmim/model.hpp"

#include <algorithm>
#include <cmath>

#include "vlmim/errors.hpp"

namespace vlmim {

// ---------------------------------------------------------------------------
// Batches

template <typename T>
ImageBatch<T> ImageBatch<T>::zeros(int batch, const ModelConfig& cfg) {
  ImageBatch b;
  b.batch = batch;
  b.channels = cfg.channels;
  b.height = cfg.image_size;
  b.width = cfg.image_size;
  b.pixels.assign(static_cast<std::size_t>(batch) * b.image_stride(), T(0));
  return b;
}

template <typename T>
void ImageBatch<T>::validate(const ModelConfig& cfg) const {
  if (channels != cfg.channels || height != cfg.image_size || width != cfg.image_size) {
    throw ConfigError("image batch is " + std::to_string(channels) + "x" + std::to_string(height) + "x" +
                      std::to_string(width) + ", config expects " + std::to_string(cfg.channels) + "x" +
                      std::to_string(cfg.image_size) + "x" + std::to_string(cfg.image_size));
  }
  if (batch < 1 || pixels.size() != static_cast<std::size_t>(batch) * image_stride()) {
    throw ShapeError("image batch pixel buffer does not match its declared shape");
  }
}

template <typename T>
ImageBatch<T> ImageBatch<T>::select(std::span<const int> rows) const {
  ImageBatch out = *this;
  out.batch = static_cast<int>(rows.size());
  out.pixels.clear();
  out.pixels.reserve(rows.size() * image_stride());
  for (int r : rows) {
    if (r < 0 || r >= batch) throw InputError("ImageBatch::select: row out of range");
    out.pixels.insert(out.pixels.end(), pixels.begin() + r * image_stride(), pixels.begin() + (r + 1) * image_stride());
  }
  return out;
}

std::vector<std::uint8_t> TokenBatch::valid_mask() const {
  std::vector<std::uint8_t> m(static_cast<std::size_t>(batch) * width, 0);
  for (int b = 0; b < batch; ++b) {
    for (int j = 0; j < std::min(lengths[b], width); ++j) m[static_cast<std::size_t>(b) * width + j] = 1;
  }
  return m;
}

void TokenBatch::validate(int vocab_size, int max_width) const {
  if (batch < 1 || width < 1) throw InputError("token batch is empty");
  if (width > max_width) {
    throw InputError("token rows have " + std::to_string(width) + " slots, limit is " + std::to_string(max_width));
  }
  if (ids.size() != static_cast<std::size_t>(batch) * width || lengths.size() != static_cast<std::size_t>(batch)) {
    throw ShapeError("token batch buffers do not match batch x width");
  }
  for (int len : lengths) {
    if (len < 1 || len > width) throw InputError("token row length must lie in [1, width]");
  }
  for (int id : ids) {
    if (id < 0 || id >= vocab_size) throw InputError("token id " + std::to_string(id) + " outside vocabulary");
  }
}

TokenBatch TokenBatch::select(std::span<const int> rows) const {
  TokenBatch out;
  out.batch = static_cast<int>(rows.size());
  out.width = width;
  for (int r : rows) {
    if (r < 0 || r >= batch) throw InputError("TokenBatch::select: row out of range");
    out.ids.insert(out.ids.end(), ids.begin() + static_cast<std::size_t>(r) * width,
                   ids.begin() + static_cast<std::size_t>(r + 1) * width);
    out.lengths.push_back(lengths[r]);
  }
  return out;
}

template <typename T>
Var<T> FeatureSequence<T>::cls() const {
  std::vector<int> rows(static_cast<std::size_t>(batch()));
  for (int b = 0; b < batch(); ++b) rows[b] = b * slots();
  return gather_rows(values, std::span<const int>(rows));
}

template <typename T>
Var<T> FeatureSequence<T>::tail() const {
  std::vector<int> rows;
  rows.reserve(static_cast<std::size_t>(batch()) * (slots() - 1));
  for (int b = 0; b < batch(); ++b) {
    for (int s = 1; s < slots(); ++s) rows.push_back(b * slots() + s);
  }
  return gather_rows(values, std::span<const int>(rows));
}

template <typename T>
std::vector<T> extract_patches(const ImageBatch<T>& images, const ModelConfig& cfg) {
  images.validate(cfg);
  const int p = cfg.patch_size;
  const int g = cfg.grid();
  const int n = cfg.num_patches();
  const int pd = cfg.patch_dim();
  std::vector<T> out(static_cast<std::size_t>(images.batch) * n * pd);
  for (int b = 0; b < images.batch; ++b) {
    const T* img = images.pixels.data() + b * images.image_stride();
    for (int gy = 0; gy < g; ++gy) {
      for (int gx = 0; gx < g; ++gx) {
        T* dst = out.data() + (static_cast<std::size_t>(b) * n + gy * g + gx) * pd;
        for (int c = 0; c < cfg.channels; ++c) {
          for (int y = 0; y < p; ++y) {
            for (int x = 0; x < p; ++x) {
              *dst++ = img[(static_cast<std::size_t>(c) * images.height + gy * p + y) * images.width + gx * p + x];
            }
          }
        }
      }
    }
  }
  return out;
}

// ---------------------------------------------------------------------------
// Image encoder

template <typename T>
ImageEncoder<T>::ImageEncoder(ParamStore<T>& store, const std::string& prefix, const ModelConfig& cfg,
                              std::mt19937_64& rng)
    : cfg_(cfg) {
  cfg.validate();
  const int d = cfg.embed_dim;
  patch_proj = Linear<T>(store, prefix + ".patch_proj", cfg.patch_dim(), d, cfg.init_std, rng);
  cls_token = store.normal(prefix + ".cls_token", {d}, cfg.init_std, rng);
  position = store.normal(prefix + ".position", {1 + cfg.num_patches(), d}, cfg.init_std, rng);
  mask_token = store.normal(prefix + ".mask_token", {d}, cfg.init_std, rng);
  for (int l = 0; l < cfg.image_layers; ++l) {
    blocks.emplace_back(store, prefix + ".block" + std::to_string(l), d, cfg.heads, cfg.mlp_ratio, cfg.init_std,
                        cfg.ln_eps, rng);
  }
  norm = LayerNorm<T>(store, prefix + ".norm", d, cfg.ln_eps);
}

template <typename T>
Var<T> ImageEncoder<T>::patch_embed(const ImageBatch<T>& images) const {
  const std::vector<T> patches = extract_patches(images, cfg_);
  const auto in = Var<T>::constant({images.batch, cfg_.num_patches(), cfg_.patch_dim()}, patches);
  return patch_proj(in);
}

template <typename T>
Var<T> ImageEncoder<T>::patchify(const ImageBatch<T>& images) const {
  const int n = cfg_.num_patches();
  std::vector<int> rows(static_cast<std::size_t>(n));
  for (int i = 0; i < n; ++i) rows[i] = i + 1;
  const Var<T> patch_pos = gather_rows(position, std::span<const int>(rows));
  return add_positional(patch_embed(images), patch_pos);
}

template <typename T>
Var<T> ImageEncoder<T>::embed(const ImageBatch<T>& images, const std::vector<PatchMask>* masks) const {
  const int n = cfg_.num_patches();
  const int d = cfg_.embed_dim;
  Var<T> patches = patch_embed(images);
  if (masks) {
    if (static_cast<int>(masks->size()) != images.batch) throw InputError("one patch mask per image is required");
    std::vector<int> rows;
    for (int b = 0; b < images.batch; ++b) {
      for (int idx : (*masks)[b].indices) {
        if (idx < 0 || idx >= n) throw InputError("mask index " + std::to_string(idx) + " is not a patch position");
        rows.push_back(b * n + idx);
      }
    }
    patches = replace_rows(patches, std::span<const int>(rows), mask_token);
  }
  // Prepend CLS: a [batch, 1, D] tensor built from the shared CLS vector.
  std::vector<int> cls_rows(static_cast<std::size_t>(images.batch), 0);
  const Var<T> cls = reshape(gather_rows(reshape(cls_token, {1, d}), std::span<const int>(cls_rows)), {images.batch, 1, d});
  return add_positional(concat_seq(cls, patches), position);
}

template <typename T>
Var<T> ImageEncoder<T>::run_layers(const Var<T>& x, int first_layer, const FeatureSequence<T>* text,
                                   std::vector<Var<T>>* taps) const {
  const int layers = static_cast<int>(blocks.size());
  if (first_layer < 0 || first_layer > layers) throw ConfigError("run_layers: first layer out of range");
  const int visual = x.dim(1);
  if (text) {
    if (text->dim() != cfg_.embed_dim) {
      throw ShapeError("injected text has width " + std::to_string(text->dim()) + ", expected " +
                       std::to_string(cfg_.embed_dim));
    }
    if (text->batch() != x.dim(0)) throw ShapeError("injected text batch does not match image batch");
  }
  const int inject_at = cfg_.inject_start_layer - 1;

  Var<T> h = x;
  std::vector<std::uint8_t> joint_valid;
  bool joined = false;
  for (int l = first_layer; l < layers; ++l) {
    if (text && !joined && l >= inject_at) {
      if (taps) taps->push_back(h);
      const int batch = x.dim(0);
      const int ts = text->slots();
      joint_valid.assign(static_cast<std::size_t>(batch) * (visual + ts), 1);
      if (!text->valid.empty()) {
        for (int b = 0; b < batch; ++b) {
          for (int s = 0; s < ts; ++s) {
            joint_valid[static_cast<std::size_t>(b) * (visual + ts) + visual + s] =
                text->valid[static_cast<std::size_t>(b) * ts + s];
          }
        }
      }
      h = concat_seq(h, text->values);
      joined = true;
    } else if (taps) {
      taps->push_back(joined ? slice_seq(h, 0, visual) : h);
    }
    h = blocks[l](h, std::span<const std::uint8_t>(joint_valid));
  }
  if (joined) h = slice_seq(h, 0, visual);
  if (taps) taps->push_back(h);
  return norm(h);
}

template <typename T>
FeatureSequence<T> ImageEncoder<T>::forward(const ImageBatch<T>& images, const FeatureSequence<T>* text,
                                            const std::vector<PatchMask>* masks, std::vector<Var<T>>* taps) const {
  return {run_layers(embed(images, masks), 0, text, taps), {}};
}

// ---------------------------------------------------------------------------
// Text encoder

template <typename T>
TextEncoder<T>::TextEncoder(ParamStore<T>& store, const std::string& prefix, const ModelConfig& cfg,
                            std::mt19937_64& rng)
    : cfg_(cfg) {
  const int d = cfg.embed_dim;
  embedding = store.normal(prefix + ".embedding", {cfg.vocab_size, d}, cfg.init_std, rng);
  position = store.normal(prefix + ".position", {cfg.text_slots(), d}, cfg.init_std, rng);
  for (int l = 0; l < cfg.text_layers; ++l) {
    blocks.emplace_back(store, prefix + ".block" + std::to_string(l), d, cfg.heads, cfg.mlp_ratio, cfg.init_std,
                        cfg.ln_eps, rng);
  }
  norm = LayerNorm<T>(store, prefix + ".norm", d, cfg.ln_eps);
}

template <typename T>
FeatureSequence<T> TextEncoder<T>::forward(const TokenBatch& tokens) const {
  tokens.validate(cfg_.vocab_size, cfg_.text_slots());
  const int d = cfg_.embed_dim;
  Var<T> h = reshape(gather_rows(embedding, std::span<const int>(tokens.ids)), {tokens.batch, tokens.width, d});
  h = add_positional(h, position);
  const auto valid = tokens.valid_mask();
  for (const auto& block : blocks) h = block(h, std::span<const std::uint8_t>(valid));
  return {norm(h), valid};
}

// ---------------------------------------------------------------------------
// Fusion encoder

template <typename T>
FusionEncoder<T>::FusionEncoder(ParamStore<T>& store, const std::string& prefix, const ModelConfig& cfg,
                                std::mt19937_64& rng)
    : cfg_(cfg) {
  for (int l = 0; l < cfg.fusion_layers; ++l) {
    blocks.emplace_back(store, prefix + ".block" + std::to_string(l), cfg.embed_dim, cfg.heads, cfg.mlp_ratio,
                        cfg.init_std, cfg.ln_eps, rng);
  }
  norm = LayerNorm<T>(store, prefix + ".norm", cfg.embed_dim, cfg.ln_eps);
}

template <typename T>
FeatureSequence<T> FusionEncoder<T>::forward(const FeatureSequence<T>& image, const FeatureSequence<T>& text) const {
  if (image.batch() != text.batch()) {
    throw ShapeError("fuse: image batch " + std::to_string(image.batch()) + " vs text batch " +
                     std::to_string(text.batch()));
  }
  if (image.dim() != cfg_.embed_dim || text.dim() != cfg_.embed_dim) throw ShapeError("fuse: feature width mismatch");
  Var<T> h = text.values;
  for (const auto& block : blocks) {
    h = block(h, std::span<const std::uint8_t>(text.valid), false, image.values,
              std::span<const std::uint8_t>(image.valid));
  }
  return {norm(h), text.valid};
}

// ---------------------------------------------------------------------------
// Decoder

template <typename T>
Decoder<T>::Decoder(ParamStore<T>& store, const std::string& prefix, const ModelConfig& cfg, std::mt19937_64& rng)
    : cfg_(cfg) {
  const int d = cfg.embed_dim;
  embedding = store.normal(prefix + ".embedding", {cfg.vocab_size, d}, cfg.init_std, rng);
  position = store.normal(prefix + ".position", {cfg.text_slots(), d}, cfg.init_std, rng);
  for (int l = 0; l < cfg.decoder_layers; ++l) {
    blocks.emplace_back(store, prefix + ".block" + std::to_string(l), d, cfg.heads, cfg.mlp_ratio, cfg.init_std,
                        cfg.ln_eps, rng);
  }
  norm = LayerNorm<T>(store, prefix + ".norm", d, cfg.ln_eps);
  lm_head = Linear<T>(store, prefix + ".lm_head", d, cfg.vocab_size, cfg.init_std, rng);
}

template <typename T>
Var<T> Decoder<T>::forward(const FeatureSequence<T>& memory, const TokenBatch& tokens) const {
  if (tokens.width < 1 || tokens.batch < 1) throw InputError("decode: empty prefix");
  tokens.validate(cfg_.vocab_size, cfg_.text_slots());
  if (memory.batch() != tokens.batch) throw ShapeError("decode: memory batch does not match token batch");
  const int d = cfg_.embed_dim;
  Var<T> h = reshape(gather_rows(embedding, std::span<const int>(tokens.ids)), {tokens.batch, tokens.width, d});
  h = add_positional(h, position);
  const auto valid = tokens.valid_mask();
  for (const auto& block : blocks) {
    h = block(h, std::span<const std::uint8_t>(valid), true, memory.values, std::span<const std::uint8_t>(memory.valid));
  }
  return lm_head(norm(h));
}

// ---------------------------------------------------------------------------
// Heads and the full model

template <typename T>
EncodingHead<T>::EncodingHead(ParamStore<T>& store, const std::string& prefix, const ModelConfig& cfg,
                              std::mt19937_64& rng)
    : fc1(store, prefix + ".fc1", cfg.embed_dim, cfg.head_hidden, cfg.init_std, rng),
      fc2(store, prefix + ".fc2", cfg.head_hidden, cfg.code_dim, cfg.init_std, rng) {}

template <typename T>
VlModel<T>::VlModel(const ModelConfig& cfg, std::uint64_t seed)
    : cfg_((cfg.validate(), cfg)),
      init_rng_(seed),
      params_(true),
      image(params_, "image_encoder", cfg_, init_rng_),
      head(params_, "head", cfg_, init_rng_),
      text(params_, "text_encoder", cfg_, init_rng_),
      fusion(params_, "fusion", cfg_, init_rng_),
      decoder(params_, "decoder", cfg_, init_rng_),
      vision_proj(params_, "itc.vision_proj", cfg_.embed_dim, cfg_.embed_dim, cfg_.init_std, init_rng_),
      text_proj(params_, "itc.text_proj", cfg_.embed_dim, cfg_.embed_dim, cfg_.init_std, init_rng_),
      itc_temp(params_.filled("itc.temperature", {1}, static_cast<T>(cfg_.itc_temp))),
      itm_head(params_, "itm.head", cfg_.embed_dim, 1, cfg_.init_std, init_rng_),
      mlm_norm(params_, "mlm.norm", cfg_.embed_dim, cfg_.ln_eps),
      mlm_head(params_, "mlm.head", cfg_.embed_dim, cfg_.vocab_size, cfg_.init_std, init_rng_) {
  if (cfg_.mim_target == MimTarget::kPixel) {
    pixel_head = Linear<T>(params_, "pixel_head", cfg_.embed_dim, cfg_.patch_dim(), cfg_.init_std, init_rng_);
  }
}

template struct ImageBatch<float>;
template struct ImageBatch<double>;
template struct FeatureSequence<float>;
template struct FeatureSequence<double>;
template std::vector<float> extract_patches(const ImageBatch<float>&, const ModelConfig&);
template std::vector<double> extract_patches(const ImageBatch<double>&, const ModelConfig&);
template class ImageEncoder<float>;
template class ImageEncoder<double>;
template class TextEncoder<float>;
template class TextEncoder<double>;
template class FusionEncoder<float>;
template class FusionEncoder<double>;
template class Decoder<float>;
template class Decoder<double>;
template class EncodingHead<float>;
template class EncodingHead<double>;
template class VlModel<float>;
template class VlModel<double>;

}  // namespace vlmim
