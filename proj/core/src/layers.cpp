// Copyright 2026 The vlmim Authors
// SPDX-License-Identifier: Apache-2.0

#include "vlmim/layers.hpp"

#include <algorithm>

#include "vlmim/errors.hpp"

namespace vlmim {

template <typename T>
Var<T> ParamStore<T>::add(const std::string& name, Shape shape, std::vector<T> values) {
  for (const auto& e : entries_) {
    if (e.name == name) throw StructuralError("duplicate parameter name '" + name + "'");
  }
  auto v = Var<T>::leaf(std::move(shape), std::move(values), trainable_);
  entries_.push_back({name, v});
  return v;
}

template <typename T>
Var<T> ParamStore<T>::normal(const std::string& name, Shape shape, double stddev, std::mt19937_64& rng) {
  std::normal_distribution<double> dist(0.0, stddev);
  std::vector<T> values(numel(shape));
  for (auto& x : values) x = static_cast<T>(dist(rng));
  return add(name, std::move(shape), std::move(values));
}

template <typename T>
Var<T> ParamStore<T>::filled(const std::string& name, Shape shape, T value) {
  std::vector<T> values(numel(shape), value);
  return add(name, std::move(shape), std::move(values));
}

template <typename T>
std::vector<NamedTensor<T>> ParamStore<T>::with_prefix(std::initializer_list<std::string_view> prefixes) const {
  std::vector<NamedTensor<T>> out;
  for (const auto& e : entries_) {
    const bool hit = std::any_of(prefixes.begin(), prefixes.end(),
                                 [&](std::string_view p) { return std::string_view(e.name).starts_with(p); });
    if (hit) out.push_back(e);
  }
  return out;
}

template <typename T>
const Var<T>& ParamStore<T>::get(const std::string& name) const {
  for (const auto& e : entries_) {
    if (e.name == name) return e.tensor;
  }
  throw StructuralError("no parameter named '" + name + "'");
}

template <typename T>
std::size_t ParamStore<T>::scalar_count() const {
  std::size_t n = 0;
  for (const auto& e : entries_) n += e.tensor.size();
  return n;
}

template <typename T>
void ParamStore<T>::zero_grad() const {
  for (const auto& e : entries_) e.tensor.zero_grad();
}

template <typename T>
Linear<T>::Linear(ParamStore<T>& store, const std::string& name, int in, int out, double stddev, std::mt19937_64& rng)
    : weight(store.normal(name + ".weight", {in, out}, stddev, rng)), bias(store.filled(name + ".bias", {out}, T(0))) {}

template <typename T>
LayerNorm<T>::LayerNorm(ParamStore<T>& store, const std::string& name, int dim, double e)
    : gamma(store.filled(name + ".gamma", {dim}, T(1))), beta(store.filled(name + ".beta", {dim}, T(0))), eps(T(e)) {}

template <typename T>
MultiHeadAttention<T>::MultiHeadAttention(ParamStore<T>& store, const std::string& name, int dim, int h,
                                          double stddev, std::mt19937_64& rng)
    : query(store, name + ".query", dim, dim, stddev, rng),
      key(store, name + ".key", dim, dim, stddev, rng),
      value(store, name + ".value", dim, dim, stddev, rng),
      out(store, name + ".out", dim, dim, stddev, rng),
      heads(h) {}

template <typename T>
Var<T> MultiHeadAttention<T>::operator()(const Var<T>& x_query, const Var<T>& x_memory,
                                         std::span<const std::uint8_t> memory_valid, bool causal) const {
  return out(attention(query(x_query), key(x_memory), value(x_memory), heads, memory_valid, causal));
}

template <typename T>
Mlp<T>::Mlp(ParamStore<T>& store, const std::string& name, int dim, int hidden, double stddev, std::mt19937_64& rng)
    : fc1(store, name + ".fc1", dim, hidden, stddev, rng), fc2(store, name + ".fc2", hidden, dim, stddev, rng) {}

template <typename T>
EncoderBlock<T>::EncoderBlock(ParamStore<T>& store, const std::string& name, int dim, int heads, int mlp_ratio,
                              double stddev, double eps, std::mt19937_64& rng)
    : ln_attn(store, name + ".ln_attn", dim, eps),
      ln_mlp(store, name + ".ln_mlp", dim, eps),
      attn(store, name + ".attn", dim, heads, stddev, rng),
      mlp(store, name + ".mlp", dim, dim * mlp_ratio, stddev, rng) {}

template <typename T>
Var<T> EncoderBlock<T>::operator()(const Var<T>& x, std::span<const std::uint8_t> valid, bool causal) const {
  const Var<T> h = ln_attn(x);
  const Var<T> y = add(x, attn(h, h, valid, causal));
  return add(y, mlp(ln_mlp(y)));
}

template <typename T>
CrossBlock<T>::CrossBlock(ParamStore<T>& store, const std::string& name, int dim, int heads, int mlp_ratio,
                          double stddev, double eps, std::mt19937_64& rng)
    : ln_self(store, name + ".ln_self", dim, eps),
      ln_cross(store, name + ".ln_cross", dim, eps),
      ln_mlp(store, name + ".ln_mlp", dim, eps),
      self_attn(store, name + ".self_attn", dim, heads, stddev, rng),
      cross_attn(store, name + ".cross_attn", dim, heads, stddev, rng),
      mlp(store, name + ".mlp", dim, dim * mlp_ratio, stddev, rng) {}

template <typename T>
Var<T> CrossBlock<T>::operator()(const Var<T>& x, std::span<const std::uint8_t> valid, bool causal,
                                 const Var<T>& memory, std::span<const std::uint8_t> memory_valid) const {
  const Var<T> h = ln_self(x);
  Var<T> y = add(x, self_attn(h, h, valid, causal));
  y = add(y, cross_attn(ln_cross(y), memory, memory_valid, false));
  return add(y, mlp(ln_mlp(y)));
}

template class ParamStore<float>;
template class ParamStore<double>;
template struct Linear<float>;
template struct Linear<double>;
template struct LayerNorm<float>;
template struct LayerNorm<double>;
template struct MultiHeadAttention<float>;
template struct MultiHeadAttention<double>;
template struct Mlp<float>;
template struct Mlp<double>;
template struct EncoderBlock<float>;
template struct EncoderBlock<double>;
template struct CrossBlock<float>;
template struct CrossBlock<double>;

}  // namespace vlmim
