// Copyright 2026 The vlmim Authors
// SPDX-License-Identifier: Apache-2.0

// Minimal tape-free reverse-mode autodiff over dense row-major tensors.
//
// Every op returns a Var that remembers its parents and a closure which
// pushes the output gradient into them. Graphs are built only while grad mode
// is enabled and at least one input requires a gradient; teacher-side and
// evaluation code runs under NoGradGuard and allocates no graph at all.
//
// Tensors are interpreted as a stack of rows whose width is the last
// dimension. Ops that talk about "rows" use that view.

#pragma once

#include <cstddef>
#include <cstdint>
#include <functional>
#include <memory>
#include <span>
#include <string>
#include <vector>

namespace vlmim {

using Shape = std::vector<int>;

std::size_t numel(const Shape& shape);
std::string shape_string(const Shape& shape);

template <typename T>
struct Node {
  std::vector<T> value;
  std::vector<T> grad;
  Shape shape;
  bool requires_grad = false;
  std::vector<std::shared_ptr<Node>> parents;
  std::function<void(Node&)> backward;

  void ensure_grad() {
    if (grad.size() != value.size()) grad.assign(value.size(), T(0));
  }
};

template <typename T>
class Var {
 public:
  Var() = default;
  explicit Var(std::shared_ptr<Node<T>> node) : node_(std::move(node)) {}

  static Var constant(Shape shape, std::vector<T> values);
  static Var zeros(Shape shape);
  static Var leaf(Shape shape, std::vector<T> values, bool requires_grad);

  bool defined() const noexcept { return node_ != nullptr; }
  explicit operator bool() const noexcept { return defined(); }

  const Shape& shape() const { return node_->shape; }
  int dim(int axis) const;
  int rank() const { return static_cast<int>(node_->shape.size()); }
  std::size_t size() const { return node_->value.size(); }
  std::size_t rows() const;
  int width() const { return dim(-1); }

  const std::vector<T>& value() const { return node_->value; }
  std::vector<T>& mutable_value() { return node_->value; }
  const std::vector<T>& grad() const { return node_->grad; }
  std::vector<T>& mutable_grad() {
    node_->ensure_grad();
    return node_->grad;
  }
  T item() const;

  bool requires_grad() const { return node_->requires_grad; }
  Node<T>* node() const { return node_.get(); }
  const std::shared_ptr<Node<T>>& node_ptr() const { return node_; }

  /// Reverse pass from a single-element Var; accumulates into leaf grads.
  void backward() const;
  void zero_grad() const;
  /// Same values, no history, no gradient.
  Var detach() const;

 private:
  std::shared_ptr<Node<T>> node_;
};

bool grad_enabled() noexcept;

class NoGradGuard {
 public:
  NoGradGuard();
  ~NoGradGuard();
  NoGradGuard(const NoGradGuard&) = delete;
  NoGradGuard& operator=(const NoGradGuard&) = delete;

 private:
  bool previous_;
};

// Elementwise.
template <typename T> Var<T> add(const Var<T>& a, const Var<T>& b);
template <typename T> Var<T> sub(const Var<T>& a, const Var<T>& b);
template <typename T> Var<T> mul(const Var<T>& a, const Var<T>& b);
template <typename T> Var<T> scale(const Var<T>& a, T factor);
template <typename T> Var<T> gelu(const Var<T>& a);
template <typename T> Var<T> reshape(const Var<T>& a, Shape shape);

// Row broadcasting: bias has shape [width].
template <typename T> Var<T> add_bias(const Var<T>& a, const Var<T>& bias);
// a is [B, T, D]; table is [>=T, D]; adds table rows 0..T-1 to every batch item.
template <typename T> Var<T> add_positional(const Var<T>& a, const Var<T>& table);
// a / s where s is a one-element Var.
template <typename T> Var<T> div_scalar(const Var<T>& a, const Var<T>& s);
template <typename T> Var<T> clamp(const Var<T>& a, T lo, T hi);

// Dense products. matmul: [..., K] x [K, M] -> [..., M].
template <typename T> Var<T> matmul(const Var<T>& a, const Var<T>& w);
template <typename T> Var<T> linear(const Var<T>& x, const Var<T>& w, const Var<T>& b);
// [R, K] x [S, K]^T -> [R, S].
template <typename T> Var<T> matmul_nt(const Var<T>& a, const Var<T>& b);
template <typename T> Var<T> transpose2d(const Var<T>& a);

template <typename T>
Var<T> layer_norm(const Var<T>& x, const Var<T>& gamma, const Var<T>& beta, T eps);
template <typename T> Var<T> softmax_rows(const Var<T>& x);
template <typename T> Var<T> log_softmax_rows(const Var<T>& x);
template <typename T> Var<T> l2_normalize_rows(const Var<T>& x);

/// Multi-head scaled dot-product attention.
/// q: [B, Tq, D]; k, v: [B, Tk, D]. key_valid is B*Tk flags (empty = all
/// valid). Queries with no admissible key produce a zero output row.
template <typename T>
Var<T> attention(const Var<T>& q, const Var<T>& k, const Var<T>& v, int heads,
                 std::span<const std::uint8_t> key_valid, bool causal);

// Sequence plumbing over [B, T, D].
template <typename T> Var<T> concat_seq(const Var<T>& a, const Var<T>& b);
template <typename T> Var<T> slice_seq(const Var<T>& a, int start, int length);
// Rows of the [R, D] view; result is [n, D].
template <typename T> Var<T> gather_rows(const Var<T>& a, std::span<const int> rows);
// Replaces listed rows of the [R, D] view with `row` (shape [D]).
template <typename T>
Var<T> replace_rows(const Var<T>& a, std::span<const int> rows, const Var<T>& row);

// Reductions and per-row losses.
template <typename T> Var<T> sum(const Var<T>& a);
template <typename T> Var<T> mean(const Var<T>& a);
// sum_r weights[r] * a[r] over a flat vector.
template <typename T> Var<T> weighted_sum(const Var<T>& a, std::span<const T> weights);
// -sum_k target[r,k] * logp[r,k]; target carries no gradient. Result [R].
template <typename T> Var<T> soft_cross_entropy(const Var<T>& logp, const Var<T>& target);
// -logp[r, labels[r]]. Result [R].
template <typename T> Var<T> nll_rows(const Var<T>& logp, std::span<const int> labels);
// softplus(z) - y z, elementwise on a flat vector.
template <typename T> Var<T> bce_with_logits(const Var<T>& logits, std::span<const T> labels);

}  // namespace vlmim
