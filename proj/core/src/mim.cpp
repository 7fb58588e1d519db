// Copyright 2026 The vlmim Authors
// SPDX-License-Identifier: Apache-2.0

#include "vlmim/mim.hpp"

#include <algorithm>
#include <cmath>
#include <string>

#include "vlmim/errors.hpp"

namespace vlmim {

template <typename T>
Var<T> mim_loss(const CategoricalCode<T>& student, const CategoricalCode<T>& teacher,
                const std::vector<PatchMask>& masks, std::vector<double>* per_patch) {
  if (student.log_probs.shape() != teacher.log_probs.shape()) {
    throw InputError("mim_loss: student " + shape_string(student.log_probs.shape()) + " vs teacher " +
                     shape_string(teacher.log_probs.shape()));
  }
  const int batch = student.batch();
  const int n = student.slots();
  const int k = student.code_dim();
  if (static_cast<int>(masks.size()) != batch) throw InputError("mim_loss: one mask per image is required");

  std::vector<int> rows;
  std::vector<T> weights;
  for (int b = 0; b < batch; ++b) {
    const auto& idx = masks[b].indices;
    if (idx.empty()) throw InputError("mim_loss: image " + std::to_string(b) + " has no masked patch");
    for (int i : idx) {
      if (i < 0 || i >= n) throw InputError("mim_loss: mask index " + std::to_string(i) + " out of range");
      rows.push_back(b * n + i);
      weights.push_back(T(1) / static_cast<T>(idx.size() * static_cast<std::size_t>(batch)));
    }
  }
  teacher.check_simplex();

  // Only masked rows enter the graph, so unmasked teacher codes cannot leak in.
  const Var<T> s = gather_rows(reshape(student.log_probs, {batch * n, k}), std::span<const int>(rows));
  const Var<T> t = gather_rows(reshape(teacher.probs_constant(), {batch * n, k}), std::span<const int>(rows));
  const Var<T> ce = soft_cross_entropy(s, t);
  if (per_patch) per_patch->assign(ce.value().begin(), ce.value().end());
  return weighted_sum(ce, std::span<const T>(weights));
}

template <typename T>
std::vector<PatchMask> select_masks(const VlModel<T>& model, const ImageBatch<T>& view2, const FeatureSequence<T>& text,
                                    std::mt19937_64& rng) {
  const ModelConfig& cfg = model.config();
  const int n = cfg.num_patches();
  const int count = mask_count(cfg.mask_ratio, n);
  std::vector<PatchMask> masks;
  masks.reserve(static_cast<std::size_t>(view2.batch));

  if (cfg.mask_strategy == MaskStrategy::kRandom) {
    const std::vector<double> uniform(static_cast<std::size_t>(n), 1.0 / n);
    for (int b = 0; b < view2.batch; ++b) {
      masks.push_back(sample_mask_count(uniform, count, rng));
      masks.back().ratio = cfg.mask_ratio;
    }
    return masks;
  }

  NoGradGuard no_grad;
  const FeatureSequence<T> plain = model.image.forward(view2);
  const Var<T> patches = plain.tail();
  const Var<T> text_cls = text.cls();
  const std::vector<double> sim = patch_text_similarity<T>(patches.value(), text_cls.value(), view2.batch, n, cfg.embed_dim);
  for (int b = 0; b < view2.batch; ++b) {
    const auto probs = sampling_probabilities(std::span<const double>(sim).subspan(static_cast<std::size_t>(b) * n, n));
    masks.push_back(sample_mask_count(probs, count, rng));
    masks.back().ratio = cfg.mask_ratio;
  }
  return masks;
}

template <typename T>
std::vector<int> color_quant_labels(const ImageBatch<T>& images, const ModelConfig& cfg) {
  int levels = 1;
  while ((levels + 1) * (levels + 1) * (levels + 1) <= cfg.code_dim) ++levels;
  const std::vector<T> patches = extract_patches(images, cfg);
  const int n = cfg.num_patches();
  const int p = cfg.patch_size * cfg.patch_size;
  const int c = cfg.channels;
  std::vector<int> labels(static_cast<std::size_t>(images.batch) * n, 0);
  for (std::size_t r = 0; r < labels.size(); ++r) {
    int label = 0;
    for (int ch = 0; ch < std::min(c, 3); ++ch) {
      double m = 0;
      for (int j = 0; j < p; ++j) m += patches[r * static_cast<std::size_t>(c) * p + static_cast<std::size_t>(ch) * p + j];
      m /= p;
      const int q = std::clamp(static_cast<int>(m * levels), 0, levels - 1);
      label = label * levels + q;
    }
    labels[r] = label;
  }
  return labels;
}

namespace {

template <typename T>
std::vector<int> masked_rows(const std::vector<PatchMask>& masks, int n) {
  std::vector<int> rows;
  for (std::size_t b = 0; b < masks.size(); ++b) {
    if (masks[b].indices.empty()) throw InputError("mim: image " + std::to_string(b) + " has no masked patch");
    for (int i : masks[b].indices) rows.push_back(static_cast<int>(b) * n + i);
  }
  return rows;
}

// Raw-pixel regression baseline: mean squared error over masked patches.
template <typename T>
Var<T> pixel_patch_loss(const VlModel<T>& model, const Var<T>& patch_feats, const ImageBatch<T>& view2,
                        const std::vector<PatchMask>& masks) {
  const ModelConfig& cfg = model.config();
  const int n = cfg.num_patches();
  const int pd = cfg.patch_dim();
  const std::vector<int> rows = masked_rows<T>(masks, n);
  const Var<T> pred = gather_rows(model.pixel_head(patch_feats), std::span<const int>(rows));
  const std::vector<T> all = extract_patches(view2, cfg);
  std::vector<T> target;
  target.reserve(rows.size() * static_cast<std::size_t>(pd));
  for (int r : rows) {
    target.insert(target.end(), all.begin() + static_cast<std::ptrdiff_t>(r) * pd,
                  all.begin() + static_cast<std::ptrdiff_t>(r + 1) * pd);
  }
  const Var<T> diff = sub(pred, Var<T>::constant(pred.shape(), std::move(target)));
  return mean(mul(diff, diff));
}

}  // namespace

template <typename T>
MimResult<T> mim_step(const ViewPair<T>& views, const TokenBatch& tokens, const VlModel<T>& student,
                      const TeacherState<T>& teacher, std::mt19937_64& rng, const MimOptions& options) {
  const ModelConfig& cfg = student.config();
  views.view1.validate(cfg);
  views.view2.validate(cfg);
  if (views.view1.batch != views.view2.batch || tokens.batch != views.view1.batch) {
    throw InputError("mim_step: views and tokens disagree on batch size");
  }
  const int batch = views.view1.batch;
  const int n = cfg.num_patches();
  const bool inject = cfg.inject_text && options.inject_text;

  MimResult<T> out;
  out.text = student.text.forward(tokens);

  const DualCodes<T> targets = teacher_forward_dual(teacher, views.view2, inject ? &out.text : nullptr, inject);
  out.teacher_cls_logits = targets.cls_logits;

  if (!options.forced_masks.empty()) {
    if (static_cast<int>(options.forced_masks.size()) != batch) {
      throw InputError("mim_step: one forced mask per image is required");
    }
    out.masks = options.forced_masks;
  } else {
    out.masks = select_masks(student, views.view2, out.text, rng);
  }

  // Student CLS code of view 1 against the teacher CLS code of view 2.
  out.image = student.image.forward(views.view1);
  const int d = cfg.embed_dim;
  const CategoricalCode<T> student_cls =
      head_forward(student.head, reshape(out.image.cls(), {batch, 1, d}), cfg.student_temp);
  out.loss_cls = agreement_loss(student_cls, targets.cls);

  const FeatureSequence<T> masked = student.image.forward(views.view2, inject ? &out.text : nullptr, &out.masks);
  const Var<T> patch_feats = reshape(masked.tail(), {batch, n, d});

  switch (cfg.mim_target) {
    case MimTarget::kSemantic: {
      const CategoricalCode<T> student_patch = head_forward(student.head, patch_feats, cfg.student_temp);
      out.loss_patch = mim_loss(student_patch, targets.patch, out.masks, &out.patch_ce);
      break;
    }
    case MimTarget::kPixel:
      out.loss_patch = pixel_patch_loss(student, patch_feats, views.view2, out.masks);
      break;
    case MimTarget::kColorQuant: {
      const CategoricalCode<T> student_patch = head_forward(student.head, patch_feats, cfg.student_temp);
      const std::vector<int> all = color_quant_labels(views.view2, cfg);
      std::vector<int> labels(all.size(), -1);
      for (int r : masked_rows<T>(out.masks, n)) labels[r] = all[r];
      const Var<T> logp = reshape(student_patch.log_probs, {batch * n, cfg.code_dim});
      const Var<T> nll = nll_rows(logp, std::span<const int>(labels));
      std::vector<T> weights(labels.size(), T(0));
      for (int b = 0; b < batch; ++b) {
        for (int i : out.masks[b].indices) {
          weights[static_cast<std::size_t>(b) * n + i] = T(1) / static_cast<T>(out.masks[b].indices.size() * batch);
        }
      }
      for (std::size_t r = 0; r < labels.size(); ++r) {
        if (labels[r] >= 0) out.patch_ce.push_back(static_cast<double>(nll.value()[r]));
      }
      out.loss_patch = weighted_sum(nll, std::span<const T>(weights));
      break;
    }
  }
  return out;
}

#define VLMIM_INSTANTIATE(T)                                                                                    \
  template Var<T> mim_loss(const CategoricalCode<T>&, const CategoricalCode<T>&, const std::vector<PatchMask>&, \
                           std::vector<double>*);                                                               \
  template std::vector<PatchMask> select_masks(const VlModel<T>&, const ImageBatch<T>&,                         \
                                               const FeatureSequence<T>&, std::mt19937_64&);                    \
  template std::vector<int> color_quant_labels(const ImageBatch<T>&, const ModelConfig&);                       \
  template MimResult<T> mim_step(const ViewPair<T>&, const TokenBatch&, const VlModel<T>&,                      \
                                 const TeacherState<T>&, std::mt19937_64&, const MimOptions&);

VLMIM_INSTANTIATE(float)
VLMIM_INSTANTIATE(double)

#undef VLMIM_INSTANTIATE

}  // namespace vlmim
