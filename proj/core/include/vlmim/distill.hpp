// Copyright 2026 The vlmim Authors
// SPDX-License-Identifier: Apache-2.0

// Momentum teacher: EMA maintenance, encoding heads onto the K-simplex, the
// CLS agreement loss, and the two-pass teacher inference.

#pragma once

#include <span>
#include <vector>

#include "vlmim/model.hpp"

namespace vlmim {

/// Soft codes on the K-simplex, stored as log-probabilities [batch, slots, K].
template <typename T>
struct CategoricalCode {
  Var<T> log_probs;

  int batch() const { return log_probs.dim(0); }
  int slots() const { return log_probs.dim(1); }
  int code_dim() const { return log_probs.dim(2); }
  std::vector<T> probs() const;
  /// Probabilities as a gradient-free tensor of the same shape.
  Var<T> probs_constant() const;
  /// Throws InputError unless every K-vector is positive and sums to 1 within tol.
  void check_simplex(double tol = 1e-5) const;
};

template <typename T>
using ParameterSnapshot = std::vector<NamedTensor<T>>;

/// The image-encoder and encoding-head parameters of a student model.
template <typename T>
ParameterSnapshot<T> student_snapshot(const VlModel<T>& model);

/// EMA copy of the student's image encoder and encoding head, plus the running
/// logit center used for collapse control. Never receives gradients.
template <typename T>
class TeacherState {
 public:
  explicit TeacherState(const VlModel<T>& student);
  TeacherState(const TeacherState&) = delete;
  TeacherState& operator=(const TeacherState&) = delete;

  ParameterSnapshot<T> snapshot() const;
  const ModelConfig& config() const { return cfg_; }

 private:
  ModelConfig cfg_;
  ParamStore<T> params_;

 public:
  ImageEncoder<T> encoder;
  EncodingHead<T> head;
  std::vector<T> center;  // [K]
};

/// teacher <- m * teacher + (1 - m) * student, elementwise. Center untouched.
template <typename T>
void ema_update(TeacherState<T>& teacher, const ParameterSnapshot<T>& student, double momentum);

/// Head MLP -> optional centering -> / temperature -> softmax per slot.
/// features is [batch, slots, D]. raw_logits, if given, receives the
/// uncentered head output.
template <typename T>
CategoricalCode<T> head_forward(const EncodingHead<T>& head, const Var<T>& features, double temperature,
                                std::span<const T> center = {}, Var<T>* raw_logits = nullptr);

/// Mean over rows of -sum_k teacher[k] log student[k]; the teacher side is a
/// constant.
template <typename T>
Var<T> agreement_loss(const CategoricalCode<T>& student, const CategoricalCode<T>& teacher);

template <typename T>
struct DualCodes {
  CategoricalCode<T> cls;    // [batch, 1, K], text-free pass
  CategoricalCode<T> patch;  // [batch, N, K], text-injected pass (or text-free if B was skipped)
  std::vector<T> cls_logits;  // [batch, K], uncentered, for the center update
};

/// Pass A runs view2 text-free through every layer and yields the CLS code.
/// Pass B reruns the layers from inject_start_layer with the text slots joined
/// and yields the patch codes. Both use the momentum head. No gradients.
template <typename T>
DualCodes<T> teacher_forward_dual(const TeacherState<T>& teacher, const ImageBatch<T>& view2,
                                  const FeatureSequence<T>* text, bool run_pass_b = true);

/// center <- cm * center + (1 - cm) * mean over rows of logits ([rows, K]).
template <typename T>
void update_center(TeacherState<T>& teacher, std::span<const T> logits, double center_momentum);

}  // namespace vlmim
