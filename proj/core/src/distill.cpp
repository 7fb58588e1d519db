// Copyright 2026 The vlmim Authors
// SPDX-License-Identifier: Apache-2.0

#include "vlmim/distill.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <string>

#include "vlmim/errors.hpp"

namespace vlmim {

template <typename T>
std::vector<T> CategoricalCode<T>::probs() const {
  std::vector<T> p(log_probs.value().size());
  // Sharp temperatures can underflow exp in 32-bit; the floor keeps every
  // entry positive and is far below the sum tolerance.
  for (std::size_t i = 0; i < p.size(); ++i) {
    p[i] = std::max(std::exp(log_probs.value()[i]), std::numeric_limits<T>::min());
  }
  return p;
}

template <typename T>
Var<T> CategoricalCode<T>::probs_constant() const {
  return Var<T>::constant(log_probs.shape(), probs());
}

template <typename T>
void CategoricalCode<T>::check_simplex(double tol) const {
  const auto p = probs();
  const std::size_t k = static_cast<std::size_t>(code_dim());
  for (std::size_t r = 0; r < p.size() / k; ++r) {
    double s = 0;
    for (std::size_t j = 0; j < k; ++j) {
      const T v = p[r * k + j];
      if (!(v > T(0)) || !std::isfinite(v)) throw InputError("categorical code has a non-positive entry");
      s += v;
    }
    if (std::abs(s - 1.0) > tol) throw InputError("categorical code row sums to " + std::to_string(s));
  }
}

template <typename T>
ParameterSnapshot<T> student_snapshot(const VlModel<T>& model) {
  return model.params().with_prefix({kImageEncoderPrefix, kHeadPrefix});
}

namespace {

std::mt19937_64& scratch_rng() {
  thread_local std::mt19937_64 rng(0);
  return rng;
}

}  // namespace

template <typename T>
TeacherState<T>::TeacherState(const VlModel<T>& student)
    : cfg_(student.config()),
      params_(false),
      encoder(params_, "image_encoder", cfg_, scratch_rng()),
      head(params_, "head", cfg_, scratch_rng()),
      center(static_cast<std::size_t>(cfg_.code_dim), T(0)) {
  ema_update(*this, student_snapshot(student), 0.0);
}

template <typename T>
ParameterSnapshot<T> TeacherState<T>::snapshot() const {
  return params_.entries();
}

template <typename T>
void ema_update(TeacherState<T>& teacher, const ParameterSnapshot<T>& student, double momentum) {
  if (!(momentum >= 0.0 && momentum <= 1.0)) throw ConfigError("ema momentum must lie in [0, 1]");
  auto target = teacher.snapshot();
  if (target.size() != student.size()) {
    throw StructuralError("teacher has " + std::to_string(target.size()) + " tensors, student snapshot has " +
                          std::to_string(student.size()));
  }
  for (std::size_t i = 0; i < target.size(); ++i) {
    if (target[i].name != student[i].name || target[i].tensor.shape() != student[i].tensor.shape()) {
      throw StructuralError("snapshot mismatch at '" + target[i].name + "' vs '" + student[i].name + "'");
    }
  }
  // lerp is exact at both ends and leaves equal operands untouched.
  const T m = static_cast<T>(momentum);
  for (std::size_t i = 0; i < target.size(); ++i) {
    auto& dst = target[i].tensor.mutable_value();
    const auto& src = student[i].tensor.value();
    for (std::size_t j = 0; j < dst.size(); ++j) dst[j] = std::lerp(src[j], dst[j], m);
  }
}

template <typename T>
CategoricalCode<T> head_forward(const EncodingHead<T>& head, const Var<T>& features, double temperature,
                                std::span<const T> center, Var<T>* raw_logits) {
  if (!(temperature > 0.0)) throw ConfigError("head temperature must be positive");
  Var<T> logits = head.logits(features);
  if (raw_logits) *raw_logits = logits;
  if (!center.empty()) {
    if (center.size() != static_cast<std::size_t>(logits.width())) throw ShapeError("center width mismatch");
    std::vector<T> neg(center.begin(), center.end());
    for (auto& x : neg) x = -x;
    const int k = static_cast<int>(neg.size());
    logits = add_bias(logits, Var<T>::constant({k}, std::move(neg)));
  }
  return {log_softmax_rows(scale(logits, static_cast<T>(1.0 / temperature)))};
}

template <typename T>
Var<T> agreement_loss(const CategoricalCode<T>& student, const CategoricalCode<T>& teacher) {
  if (student.log_probs.shape() != teacher.log_probs.shape()) {
    throw InputError("agreement_loss: student " + shape_string(student.log_probs.shape()) + " vs teacher " +
                     shape_string(teacher.log_probs.shape()));
  }
  teacher.check_simplex();
  return mean(soft_cross_entropy(student.log_probs, teacher.probs_constant()));
}

template <typename T>
DualCodes<T> teacher_forward_dual(const TeacherState<T>& teacher, const ImageBatch<T>& view2,
                                  const FeatureSequence<T>* text, bool run_pass_b) {
  NoGradGuard no_grad;
  const ModelConfig& cfg = teacher.config();
  const std::span<const T> center = cfg.centering ? std::span<const T>(teacher.center) : std::span<const T>();

  std::vector<Var<T>> taps;
  const FeatureSequence<T> plain = teacher.encoder.forward(view2, nullptr, nullptr, &taps);

  DualCodes<T> out;
  Var<T> cls_logits;
  const int batch = plain.batch();
  const int d = plain.dim();
  out.cls = head_forward(teacher.head, reshape(plain.cls(), {batch, 1, d}), cfg.teacher_temp, center, &cls_logits);
  out.cls_logits = cls_logits.value();

  Var<T> patch_feats = slice_seq(plain.values, 1, plain.slots() - 1);
  if (run_pass_b && text) {
    const FeatureSequence<T> frozen_text = text->detach();
    const int start = cfg.inject_start_layer - 1;
    const Var<T> joined = teacher.encoder.run_layers(taps[static_cast<std::size_t>(start)], start, &frozen_text, nullptr);
    patch_feats = slice_seq(joined, 1, joined.dim(1) - 1);
  }
  out.patch = head_forward(teacher.head, patch_feats, cfg.teacher_temp, center);
  return out;
}

template <typename T>
void update_center(TeacherState<T>& teacher, std::span<const T> logits, double center_momentum) {
  const std::size_t k = teacher.center.size();
  if (logits.empty() || logits.size() % k != 0) throw ShapeError("update_center: logits are not [rows, K]");
  const std::size_t rows = logits.size() / k;
  std::vector<double> batch_mean(k, 0.0);
  for (std::size_t r = 0; r < rows; ++r) {
    for (std::size_t j = 0; j < k; ++j) batch_mean[j] += logits[r * k + j];
  }
  const T cm = static_cast<T>(center_momentum);
  for (std::size_t j = 0; j < k; ++j) {
    teacher.center[j] = cm * teacher.center[j] + (T(1) - cm) * static_cast<T>(batch_mean[j] / rows);
  }
}

#define VLMIM_INSTANTIATE(T)                                                                                   \
  template struct CategoricalCode<T>;                                                                          \
  template ParameterSnapshot<T> student_snapshot(const VlModel<T>&);                                           \
  template class TeacherState<T>;                                                                              \
  template void ema_update(TeacherState<T>&, const ParameterSnapshot<T>&, double);                             \
  template CategoricalCode<T> head_forward(const EncodingHead<T>&, const Var<T>&, double, std::span<const T>, \
                                           Var<T>*);                                                           \
  template Var<T> agreement_loss(const CategoricalCode<T>&, const CategoricalCode<T>&);                        \
  template DualCodes<T> teacher_forward_dual(const TeacherState<T>&, const ImageBatch<T>&,                     \
                                             const FeatureSequence<T>*, bool);                                 \
  template void update_center(TeacherState<T>&, std::span<const T>, double);

VLMIM_INSTANTIATE(float)
VLMIM_INSTANTIATE(double)

#undef VLMIM_INSTANTIATE

}  // namespace vlmim
