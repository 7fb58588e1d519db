// Copyright 2026 The vlmim Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <cstdint>
#include <random>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include "vlmim/autograd.hpp"

namespace vlmim {

template <typename T>
struct NamedTensor {
  std::string name;
  Var<T> tensor;
};

/// Ordered registry of trainable leaves. Registration order fixes both the
/// initialisation stream and the checkpoint layout.
template <typename T>
class ParamStore {
 public:
  explicit ParamStore(bool trainable = true) : trainable_(trainable) {}

  Var<T> normal(const std::string& name, Shape shape, double stddev, std::mt19937_64& rng);
  Var<T> filled(const std::string& name, Shape shape, T value);

  const std::vector<NamedTensor<T>>& entries() const { return entries_; }
  /// Entries whose name starts with any of the prefixes, in registration order.
  std::vector<NamedTensor<T>> with_prefix(std::initializer_list<std::string_view> prefixes) const;
  const Var<T>& get(const std::string& name) const;
  std::size_t scalar_count() const;
  void zero_grad() const;

 private:
  Var<T> add(const std::string& name, Shape shape, std::vector<T> values);

  bool trainable_;
  std::vector<NamedTensor<T>> entries_;
};

template <typename T>
struct Linear {
  Var<T> weight;  // [in, out]
  Var<T> bias;    // [out]

  Linear() = default;
  Linear(ParamStore<T>& store, const std::string& name, int in, int out, double stddev, std::mt19937_64& rng);
  Var<T> operator()(const Var<T>& x) const { return linear(x, weight, bias); }
};

template <typename T>
struct LayerNorm {
  Var<T> gamma;
  Var<T> beta;
  T eps = T(1e-5);

  LayerNorm() = default;
  LayerNorm(ParamStore<T>& store, const std::string& name, int dim, double eps);
  Var<T> operator()(const Var<T>& x) const { return layer_norm(x, gamma, beta, eps); }
};

template <typename T>
struct MultiHeadAttention {
  Linear<T> query, key, value, out;
  int heads = 1;

  MultiHeadAttention() = default;
  MultiHeadAttention(ParamStore<T>& store, const std::string& name, int dim, int heads, double stddev,
                     std::mt19937_64& rng);
  Var<T> operator()(const Var<T>& x_query, const Var<T>& x_memory, std::span<const std::uint8_t> memory_valid,
                    bool causal) const;
};

template <typename T>
struct Mlp {
  Linear<T> fc1, fc2;

  Mlp() = default;
  Mlp(ParamStore<T>& store, const std::string& name, int dim, int hidden, double stddev, std::mt19937_64& rng);
  Var<T> operator()(const Var<T>& x) const { return fc2(gelu(fc1(x))); }
};

/// Pre-norm self-attention block.
template <typename T>
struct EncoderBlock {
  LayerNorm<T> ln_attn, ln_mlp;
  MultiHeadAttention<T> attn;
  Mlp<T> mlp;

  EncoderBlock() = default;
  EncoderBlock(ParamStore<T>& store, const std::string& name, int dim, int heads, int mlp_ratio, double stddev,
               double eps, std::mt19937_64& rng);
  Var<T> operator()(const Var<T>& x, std::span<const std::uint8_t> valid, bool causal = false) const;
};

/// Pre-norm block with self-attention, cross-attention into a memory sequence, and MLP.
template <typename T>
struct CrossBlock {
  LayerNorm<T> ln_self, ln_cross, ln_mlp;
  MultiHeadAttention<T> self_attn, cross_attn;
  Mlp<T> mlp;

  CrossBlock() = default;
  CrossBlock(ParamStore<T>& store, const std::string& name, int dim, int heads, int mlp_ratio, double stddev,
             double eps, std::mt19937_64& rng);
  Var<T> operator()(const Var<T>& x, std::span<const std::uint8_t> valid, bool causal, const Var<T>& memory,
                    std::span<const std::uint8_t> memory_valid) const;
};

}  // namespace vlmim
