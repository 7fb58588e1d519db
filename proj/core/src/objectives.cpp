// Copyright 2026 The vlmim Authors
// SPDX-License-Identifier: Apache-2.0

#include "vlmim/objectives.hpp"

#include <algorithm>
#include <cmath>
#include <string>

#include "vlmim/diagnostics.hpp"
#include "vlmim/errors.hpp"

namespace vlmim {

template <typename T>
Var<T> itc_loss(const Var<T>& image_embed, const Var<T>& text_embed, const Var<T>& temperature) {
  if (image_embed.rank() != 2 || image_embed.shape() != text_embed.shape()) {
    throw ShapeError("itc_loss: image " + shape_string(image_embed.shape()) + " vs text " +
                     shape_string(text_embed.shape()));
  }
  const int batch = image_embed.dim(0);
  if (batch < 1) throw InputError("itc_loss: empty batch");
  const Var<T> logits = div_scalar(matmul_nt(l2_normalize_rows(image_embed), l2_normalize_rows(text_embed)), temperature);
  std::vector<int> diag(static_cast<std::size_t>(batch));
  for (int i = 0; i < batch; ++i) diag[i] = i;
  const Var<T> i2t = mean(nll_rows(log_softmax_rows(logits), std::span<const int>(diag)));
  const Var<T> t2i = mean(nll_rows(log_softmax_rows(transpose2d(logits)), std::span<const int>(diag)));
  return scale(add(i2t, t2i), T(0.5));
}

template <typename T>
std::vector<double> contrastive_similarity(const Var<T>& image_embed, const Var<T>& text_embed, double temperature) {
  NoGradGuard no_grad;
  const Var<T> sim = matmul_nt(l2_normalize_rows(image_embed), l2_normalize_rows(text_embed));
  std::vector<double> out(sim.value().begin(), sim.value().end());
  for (auto& x : out) x /= temperature;
  return out;
}

ItmNegatives sample_itm_negatives(std::span<const double> similarity, int batch, NegativeSampling mode,
                                  std::mt19937_64& rng) {
  if (similarity.size() != static_cast<std::size_t>(batch) * batch) {
    throw ShapeError("sample_itm_negatives: similarity must be batch x batch");
  }
  ItmNegatives out;
  if (batch < 2) return out;
  auto draw = [&](auto score_of, int anchor) {
    std::vector<double> w(static_cast<std::size_t>(batch), 0.0);
    double mx = -INFINITY;
    for (int j = 0; j < batch; ++j) {
      if (j != anchor) mx = std::max(mx, score_of(j));
    }
    for (int j = 0; j < batch; ++j) {
      if (j == anchor) continue;
      w[j] = mode == NegativeSampling::kHard ? std::exp(score_of(j) - mx) : 1.0;
    }
    std::discrete_distribution<int> pick(w.begin(), w.end());
    return pick(rng);
  };
  for (int b = 0; b < batch; ++b) {
    out.text_for_image.push_back(draw([&](int j) { return similarity[static_cast<std::size_t>(b) * batch + j]; }, b));
  }
  for (int b = 0; b < batch; ++b) {
    out.image_for_text.push_back(draw([&](int j) { return similarity[static_cast<std::size_t>(j) * batch + b]; }, b));
  }
  return out;
}

template <typename T>
Var<T> itm_loss(const Var<T>& logits, std::span<const T> labels) {
  if (logits.size() != labels.size() || labels.empty()) throw ShapeError("itm_loss: one label per logit required");
  return mean(bce_with_logits(reshape(logits, {static_cast<int>(logits.size())}), labels));
}

template <typename T>
FeatureSequence<T> select_rows(const FeatureSequence<T>& seq, std::span<const int> rows) {
  const int slots = seq.slots();
  const int d = seq.dim();
  std::vector<int> flat;
  std::vector<std::uint8_t> valid;
  flat.reserve(rows.size() * static_cast<std::size_t>(slots));
  for (int r : rows) {
    if (r < 0 || r >= seq.batch()) throw InputError("select_rows: row " + std::to_string(r) + " out of range");
    for (int s = 0; s < slots; ++s) flat.push_back(r * slots + s);
    if (!seq.valid.empty()) {
      valid.insert(valid.end(), seq.valid.begin() + static_cast<std::ptrdiff_t>(r) * slots,
                   seq.valid.begin() + static_cast<std::ptrdiff_t>(r + 1) * slots);
    }
  }
  const Var<T> picked = gather_rows(reshape(seq.values, {seq.batch() * slots, d}), std::span<const int>(flat));
  return {reshape(picked, {static_cast<int>(rows.size()), slots, d}), std::move(valid)};
}

template <typename T>
ItmBatch<T> itm_forward(const VlModel<T>& model, const FeatureSequence<T>& image, const FeatureSequence<T>& text,
                        const ItmNegatives& negatives) {
  const int batch = image.batch();
  if (text.batch() != batch) throw ShapeError("itm_forward: image and text batch differ");
  std::vector<int> image_rows, text_rows;
  ItmBatch<T> out;
  for (int b = 0; b < batch; ++b) {
    image_rows.push_back(b);
    text_rows.push_back(b);
    out.labels.push_back(T(1));
  }
  if (!negatives.text_for_image.empty()) {
    if (static_cast<int>(negatives.text_for_image.size()) != batch ||
        static_cast<int>(negatives.image_for_text.size()) != batch) {
      throw ShapeError("itm_forward: one negative per anchor is required");
    }
    for (int b = 0; b < batch; ++b) {
      image_rows.push_back(b);
      text_rows.push_back(negatives.text_for_image[b]);
      out.labels.push_back(T(0));
    }
    for (int b = 0; b < batch; ++b) {
      image_rows.push_back(negatives.image_for_text[b]);
      text_rows.push_back(b);
      out.labels.push_back(T(0));
    }
  }
  const FeatureSequence<T> fused = model.fusion.forward(select_rows(image, std::span<const int>(image_rows)),
                                                        select_rows(text, std::span<const int>(text_rows)));
  out.logits = model.itm_head(fused.cls());
  return out;
}

MlmMasking mask_tokens_for_mlm(const TokenBatch& tokens, double ratio, int vocab_size, std::mt19937_64& rng) {
  MlmMasking out;
  out.corrupted = tokens;
  out.labels.assign(tokens.ids.size(), -1);
  std::uniform_real_distribution<double> unit(0.0, 1.0);
  std::uniform_int_distribution<int> random_word(token::kFirstWord, vocab_size - 1);
  for (int b = 0; b < tokens.batch; ++b) {
    std::vector<int> eligible;
    for (int j = 1; j < tokens.lengths[b]; ++j) {
      if (tokens.at(b, j) >= token::kFirstWord) eligible.push_back(j);
    }
    if (eligible.empty()) continue;
    const int count = mask_count(ratio, static_cast<int>(eligible.size()));
    std::shuffle(eligible.begin(), eligible.end(), rng);
    eligible.resize(static_cast<std::size_t>(count));
    std::sort(eligible.begin(), eligible.end());
    for (int j : eligible) {
      const std::size_t pos = static_cast<std::size_t>(b) * tokens.width + j;
      out.labels[pos] = tokens.ids[pos];
      const double u = unit(rng);
      if (u < 0.8) {
        out.corrupted.ids[pos] = token::kMask;
      } else if (u < 0.9) {
        out.corrupted.ids[pos] = random_word(rng);
      }
      ++out.masked;
    }
  }
  return out;
}

template <typename T>
Var<T> token_nll_loss(const Var<T>& logits, std::span<const int> labels, const char* what) {
  if (logits.rows() != labels.size()) throw ShapeError(std::string(what) + ": one label per logit row required");
  std::vector<T> weights(labels.size(), T(0));
  std::size_t count = 0;
  for (int l : labels) count += l >= 0 ? 1 : 0;
  if (count == 0) {
    emit_diagnostic(std::string(what) + ": no predicted positions in batch, loss set to 0");
    return Var<T>::zeros({1});
  }
  for (std::size_t i = 0; i < labels.size(); ++i) weights[i] = labels[i] >= 0 ? T(1) / static_cast<T>(count) : T(0);
  const Var<T> nll = nll_rows(log_softmax_rows(logits), labels);
  return weighted_sum(nll, std::span<const T>(weights));
}

template <typename T>
Var<T> mlm_loss(const VlModel<T>& model, const MlmMasking& masking, const FeatureSequence<T>& image_feats) {
  if (masking.masked == 0) {
    emit_diagnostic("mlm_loss: no eligible tokens, loss set to 0");
    return Var<T>::zeros({1});
  }
  const FeatureSequence<T> text = model.text.forward(masking.corrupted);
  const FeatureSequence<T> fused = model.fusion.forward(image_feats, text);
  const Var<T> logits = model.mlm_head(model.mlm_norm(fused.values));
  return token_nll_loss(logits, std::span<const int>(masking.labels), "mlm_loss");
}

template <typename T>
Var<T> mlm_loss(const VlModel<T>& model, const TokenBatch& tokens, const FeatureSequence<T>& image_feats,
                std::mt19937_64& rng) {
  const ModelConfig& cfg = model.config();
  return mlm_loss(model, mask_tokens_for_mlm(tokens, cfg.mlm_ratio, cfg.vocab_size, rng), image_feats);
}

PlmBatch make_plm_batch(const TokenBatch& tokens, std::mt19937_64& rng, int forced_split) {
  PlmBatch out;
  const int batch = tokens.batch;
  out.split.assign(static_cast<std::size_t>(batch), 0);
  std::vector<std::vector<int>> prefixes(batch), suffixes(batch);
  int prefix_width = 1;
  int decoder_width = 1;
  for (int b = 0; b < batch; ++b) {
    const int len = tokens.lengths[b] - 1;  // tokens after CLS
    if (len < 2) continue;
    int k = forced_split;
    if (k <= 0) {
      std::uniform_int_distribution<int> pick(1, len - 1);
      k = pick(rng);
    }
    k = std::clamp(k, 1, len - 1);
    out.split[b] = k;
    for (int j = 1; j <= k; ++j) prefixes[b].push_back(tokens.at(b, j));
    for (int j = k + 1; j <= len; ++j) suffixes[b].push_back(tokens.at(b, j));
    prefix_width = std::max(prefix_width, 1 + k);
    decoder_width = std::max(decoder_width, static_cast<int>(suffixes[b].size()));
  }
  out.prefix.batch = out.decoder_input.batch = batch;
  out.prefix.width = prefix_width;
  out.decoder_input.width = decoder_width;
  out.prefix.ids.assign(static_cast<std::size_t>(batch) * prefix_width, token::kPad);
  out.decoder_input.ids.assign(static_cast<std::size_t>(batch) * decoder_width, token::kPad);
  out.targets.assign(static_cast<std::size_t>(batch) * decoder_width, -1);
  for (int b = 0; b < batch; ++b) {
    out.prefix.ids[static_cast<std::size_t>(b) * prefix_width] = token::kCls;
    out.decoder_input.ids[static_cast<std::size_t>(b) * decoder_width] = token::kCls;
    for (std::size_t j = 0; j < prefixes[b].size(); ++j) {
      out.prefix.ids[static_cast<std::size_t>(b) * prefix_width + 1 + j] = prefixes[b][j];
    }
    const auto& suf = suffixes[b];
    for (std::size_t j = 0; j < suf.size(); ++j) {
      if (j + 1 < suf.size()) out.decoder_input.ids[static_cast<std::size_t>(b) * decoder_width + 1 + j] = suf[j];
      out.targets[static_cast<std::size_t>(b) * decoder_width + j] = suf[j];
    }
    out.prefix.lengths.push_back(1 + static_cast<int>(prefixes[b].size()));
    out.decoder_input.lengths.push_back(std::max(1, static_cast<int>(suf.size())));
  }
  return out;
}

template <typename T>
Var<T> plm_loss(const VlModel<T>& model, const PlmBatch& batch, const FeatureSequence<T>& image_feats) {
  const bool any = std::any_of(batch.split.begin(), batch.split.end(), [](int k) { return k > 0; });
  if (!any) {
    emit_diagnostic("plm_loss: every text is shorter than 2 tokens, loss set to 0");
    return Var<T>::zeros({1});
  }
  const FeatureSequence<T> prefix = model.text.forward(batch.prefix);
  const FeatureSequence<T> fused = model.fusion.forward(image_feats, prefix);
  const Var<T> logits = model.decoder.forward(fused, batch.decoder_input);
  return token_nll_loss(logits, std::span<const int>(batch.targets), "plm_loss");
}

template <typename T>
Var<T> plm_loss(const VlModel<T>& model, const TokenBatch& tokens, const FeatureSequence<T>& image_feats,
                std::mt19937_64& rng) {
  return plm_loss(model, make_plm_batch(tokens, rng), image_feats);
}

template <typename T>
std::vector<std::vector<int>> greedy_decode(const VlModel<T>& model, const FeatureSequence<T>& memory, int max_new) {
  NoGradGuard no_grad;
  const int batch = memory.batch();
  const int vocab = model.config().vocab_size;
  max_new = std::min(max_new, model.config().text_slots() - 1);
  std::vector<std::vector<int>> out(static_cast<std::size_t>(batch));
  std::vector<bool> done(static_cast<std::size_t>(batch), false);
  for (int step = 0; step < max_new; ++step) {
    TokenBatch input;
    input.batch = batch;
    input.width = step + 1;
    for (int b = 0; b < batch; ++b) {
      input.ids.push_back(token::kCls);
      for (int j = 0; j < step; ++j) {
        input.ids.push_back(j < static_cast<int>(out[b].size()) ? out[b][j] : token::kPad);
      }
      input.lengths.push_back(std::min(step, static_cast<int>(out[b].size())) + 1);
    }
    const Var<T> logits = model.decoder.forward(memory, input);
    bool all_done = true;
    for (int b = 0; b < batch; ++b) {
      if (done[b]) continue;
      const auto first = logits.value().begin() + (static_cast<std::ptrdiff_t>(b) * input.width + step) * vocab;
      const int next = static_cast<int>(std::max_element(first, first + vocab) - first);
      out[b].push_back(next);
      done[b] = next == token::kEos;
      all_done = all_done && done[b];
    }
    if (all_done) break;
  }
  return out;
}

void to_json(nlohmann::json& j, const LossValues& v) {
  j = nlohmann::json{{"cls", v.cls},   {"patch", v.patch}, {"itc", v.itc},     {"itm", v.itm},
                     {"mlm", v.mlm},   {"plm", v.plm},     {"total", v.total}};
}

template <typename T>
LossValues LossBundle<T>::values() const {
  return {cls.item(), patch.item(), itc.item(), itm.item(), mlm.item(), plm.item(), total.item()};
}

template <typename T>
LossBundle<T> total_loss(Var<T> cls, Var<T> patch, Var<T> itc, Var<T> itm, Var<T> mlm, Var<T> plm) {
  const std::pair<const char*, const Var<T>*> parts[] = {{"cls", &cls}, {"patch", &patch}, {"itc", &itc},
                                                         {"itm", &itm}, {"mlm", &mlm},     {"plm", &plm}};
  for (const auto& [name, v] : parts) {
    if (v->size() != 1) throw ShapeError(std::string("loss component '") + name + "' is not a scalar");
    if (!std::isfinite(static_cast<double>(v->item()))) throw NonFiniteLossError(name, static_cast<double>(v->item()));
  }
  LossBundle<T> out{cls, patch, itc, itm, mlm, plm, {}};
  out.total = add(add(add(add(add(cls, patch), itc), itm), mlm), plm);
  return out;
}

#define VLMIM_INSTANTIATE(T)                                                                                     \
  template Var<T> itc_loss(const Var<T>&, const Var<T>&, const Var<T>&);                                         \
  template std::vector<double> contrastive_similarity(const Var<T>&, const Var<T>&, double);                     \
  template Var<T> itm_loss(const Var<T>&, std::span<const T>);                                                   \
  template FeatureSequence<T> select_rows(const FeatureSequence<T>&, std::span<const int>);                      \
  template struct ItmBatch<T>;                                                                                   \
  template ItmBatch<T> itm_forward(const VlModel<T>&, const FeatureSequence<T>&, const FeatureSequence<T>&,      \
                                   const ItmNegatives&);                                                   \
  template Var<T> token_nll_loss(const Var<T>&, std::span<const int>, const char*);                              \
  template Var<T> mlm_loss(const VlModel<T>&, const TokenBatch&, const FeatureSequence<T>&, std::mt19937_64&);   \
  template Var<T> mlm_loss(const VlModel<T>&, const MlmMasking&, const FeatureSequence<T>&);                     \
  template Var<T> plm_loss(const VlModel<T>&, const TokenBatch&, const FeatureSequence<T>&, std::mt19937_64&);   \
  template Var<T> plm_loss(const VlModel<T>&, const PlmBatch&, const FeatureSequence<T>&);                       \
  template std::vector<std::vector<int>> greedy_decode(const VlModel<T>&, const FeatureSequence<T>&, int);     \
  template struct LossBundle<T>;                                                                                 \
  template LossBundle<T> total_loss(Var<T>, Var<T>, Var<T>, Var<T>, Var<T>, Var<T>);

VLMIM_INSTANTIATE(float)
VLMIM_INSTANTIATE(double)

#undef VLMIM_INSTANTIATE

}  // namespace vlmim
