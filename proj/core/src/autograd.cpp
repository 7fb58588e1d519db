// Copyright 2026 The vlmim Authors
// SPDX-License-Identifier: Apache-2.0

#include "vlmim/autograd.hpp"

#include <Eigen/Core>

#include <algorithm>
#include <cmath>
#include <limits>
#include <numeric>
#include <sstream>
#include <unordered_set>

#include "vlmim/errors.hpp"

namespace vlmim {

std::size_t numel(const Shape& shape) {
  std::size_t n = 1;
  for (int d : shape) n *= static_cast<std::size_t>(d);
  return n;
}

std::string shape_string(const Shape& shape) {
  std::ostringstream os;
  os << '[';
  for (std::size_t i = 0; i < shape.size(); ++i) os << (i ? "," : "") << shape[i];
  os << ']';
  return os.str();
}

namespace {

thread_local bool g_grad_enabled = true;

template <typename T>
using RowMat = Eigen::Matrix<T, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
template <typename T>
using MatMap = Eigen::Map<RowMat<T>>;
template <typename T>
using ConstMatMap = Eigen::Map<const RowMat<T>>;
template <typename T>
using StridedMap = Eigen::Map<RowMat<T>, 0, Eigen::OuterStride<>>;
template <typename T>
using ConstStridedMap = Eigen::Map<const RowMat<T>, 0, Eigen::OuterStride<>>;

template <typename T>
Var<T> make_result(Shape shape, std::vector<T> value, std::initializer_list<Var<T>> inputs,
                   std::function<void(Node<T>&)> backward) {
  auto node = std::make_shared<Node<T>>();
  node->shape = std::move(shape);
  node->value = std::move(value);
  bool needs = false;
  if (g_grad_enabled) {
    for (const auto& in : inputs) needs = needs || in.requires_grad();
  }
  if (needs) {
    node->requires_grad = true;
    for (const auto& in : inputs) node->parents.push_back(in.node_ptr());
    node->backward = std::move(backward);
  }
  return Var<T>(std::move(node));
}

// Parent gradient buffer, or nullptr if that parent is not differentiable.
template <typename T>
std::vector<T>* pgrad(Node<T>& self, std::size_t i) {
  auto& p = self.parents[i];
  if (!p->requires_grad) return nullptr;
  p->ensure_grad();
  return &p->grad;
}

void require(bool ok, const std::string& what) {
  if (!ok) throw ShapeError(what);
}

template <typename T>
void require_same_shape(const Var<T>& a, const Var<T>& b, const char* op) {
  require(a.shape() == b.shape(), std::string(op) + ": shape mismatch " + shape_string(a.shape()) +
                                      " vs " + shape_string(b.shape()));
}

}  // namespace

bool grad_enabled() noexcept { return g_grad_enabled; }
NoGradGuard::NoGradGuard() : previous_(g_grad_enabled) { g_grad_enabled = false; }
NoGradGuard::~NoGradGuard() { g_grad_enabled = previous_; }

// ---------------------------------------------------------------------------
// Var

template <typename T>
Var<T> Var<T>::constant(Shape shape, std::vector<T> values) {
  return leaf(std::move(shape), std::move(values), false);
}

template <typename T>
Var<T> Var<T>::zeros(Shape shape) {
  std::vector<T> v(numel(shape), T(0));
  return leaf(std::move(shape), std::move(v), false);
}

template <typename T>
Var<T> Var<T>::leaf(Shape shape, std::vector<T> values, bool requires_grad) {
  if (numel(shape) != values.size()) {
    throw ShapeError("leaf: shape " + shape_string(shape) + " does not hold " +
                     std::to_string(values.size()) + " values");
  }
  auto node = std::make_shared<Node<T>>();
  node->shape = std::move(shape);
  node->value = std::move(values);
  node->requires_grad = requires_grad;
  return Var(std::move(node));
}

template <typename T>
int Var<T>::dim(int axis) const {
  const int r = rank();
  if (axis < 0) axis += r;
  if (axis < 0 || axis >= r) throw ShapeError("dim: axis out of range for " + shape_string(shape()));
  return node_->shape[static_cast<std::size_t>(axis)];
}

template <typename T>
std::size_t Var<T>::rows() const {
  const int w = width();
  return w == 0 ? 0 : size() / static_cast<std::size_t>(w);
}

template <typename T>
T Var<T>::item() const {
  if (size() != 1) throw ShapeError("item: tensor has " + std::to_string(size()) + " elements");
  return node_->value[0];
}

template <typename T>
void Var<T>::backward() const {
  if (size() != 1) throw ShapeError("backward: expected a single-element tensor");
  if (!node_->requires_grad) return;

  std::vector<Node<T>*> order;
  std::unordered_set<Node<T>*> seen;
  std::vector<std::pair<Node<T>*, std::size_t>> stack;
  stack.emplace_back(node_.get(), 0);
  seen.insert(node_.get());
  while (!stack.empty()) {
    auto& [n, next] = stack.back();
    if (next < n->parents.size()) {
      Node<T>* p = n->parents[next++].get();
      if (p->requires_grad && seen.insert(p).second) stack.emplace_back(p, 0);
    } else {
      order.push_back(n);
      stack.pop_back();
    }
  }
  node_->ensure_grad();
  node_->grad[0] += T(1);
  for (auto it = order.rbegin(); it != order.rend(); ++it) {
    Node<T>* n = *it;
    if (n->backward && n->grad.size() == n->value.size()) n->backward(*n);
  }
}

template <typename T>
void Var<T>::zero_grad() const {
  node_->grad.assign(node_->value.size(), T(0));
}

template <typename T>
Var<T> Var<T>::detach() const {
  return constant(node_->shape, node_->value);
}

// ---------------------------------------------------------------------------
// Elementwise

template <typename T>
Var<T> add(const Var<T>& a, const Var<T>& b) {
  require_same_shape(a, b, "add");
  std::vector<T> out(a.size());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = a.value()[i] + b.value()[i];
  return make_result<T>(a.shape(), std::move(out), {a, b}, [](Node<T>& self) {
    for (std::size_t p = 0; p < 2; ++p) {
      if (auto* g = pgrad(self, p)) {
        for (std::size_t i = 0; i < g->size(); ++i) (*g)[i] += self.grad[i];
      }
    }
  });
}

template <typename T>
Var<T> sub(const Var<T>& a, const Var<T>& b) {
  require_same_shape(a, b, "sub");
  std::vector<T> out(a.size());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = a.value()[i] - b.value()[i];
  return make_result<T>(a.shape(), std::move(out), {a, b}, [](Node<T>& self) {
    if (auto* g = pgrad(self, 0)) {
      for (std::size_t i = 0; i < g->size(); ++i) (*g)[i] += self.grad[i];
    }
    if (auto* g = pgrad(self, 1)) {
      for (std::size_t i = 0; i < g->size(); ++i) (*g)[i] -= self.grad[i];
    }
  });
}

template <typename T>
Var<T> mul(const Var<T>& a, const Var<T>& b) {
  require_same_shape(a, b, "mul");
  std::vector<T> out(a.size());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = a.value()[i] * b.value()[i];
  return make_result<T>(a.shape(), std::move(out), {a, b}, [](Node<T>& self) {
    const auto& av = self.parents[0]->value;
    const auto& bv = self.parents[1]->value;
    if (auto* g = pgrad(self, 0)) {
      for (std::size_t i = 0; i < g->size(); ++i) (*g)[i] += self.grad[i] * bv[i];
    }
    if (auto* g = pgrad(self, 1)) {
      for (std::size_t i = 0; i < g->size(); ++i) (*g)[i] += self.grad[i] * av[i];
    }
  });
}

template <typename T>
Var<T> scale(const Var<T>& a, T factor) {
  std::vector<T> out(a.size());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = a.value()[i] * factor;
  return make_result<T>(a.shape(), std::move(out), {a}, [factor](Node<T>& self) {
    if (auto* g = pgrad(self, 0)) {
      for (std::size_t i = 0; i < g->size(); ++i) (*g)[i] += self.grad[i] * factor;
    }
  });
}

template <typename T>
Var<T> gelu(const Var<T>& a) {
  constexpr T kC = T(0.7978845608028654);  // sqrt(2/pi)
  constexpr T kA = T(0.044715);
  std::vector<T> out(a.size());
  for (std::size_t i = 0; i < out.size(); ++i) {
    const T x = a.value()[i];
    out[i] = T(0.5) * x * (T(1) + std::tanh(kC * (x + kA * x * x * x)));
  }
  return make_result<T>(a.shape(), std::move(out), {a}, [](Node<T>& self) {
    auto* g = pgrad(self, 0);
    if (!g) return;
    const auto& xv = self.parents[0]->value;
    for (std::size_t i = 0; i < g->size(); ++i) {
      const T x = xv[i];
      const T t = std::tanh(kC * (x + kA * x * x * x));
      const T d = T(0.5) * (T(1) + t) + T(0.5) * x * (T(1) - t * t) * kC * (T(1) + T(3) * kA * x * x);
      (*g)[i] += self.grad[i] * d;
    }
  });
}

template <typename T>
Var<T> reshape(const Var<T>& a, Shape shape) {
  require(numel(shape) == a.size(), "reshape: " + shape_string(a.shape()) + " -> " + shape_string(shape));
  return make_result<T>(std::move(shape), a.value(), {a}, [](Node<T>& self) {
    if (auto* g = pgrad(self, 0)) {
      for (std::size_t i = 0; i < g->size(); ++i) (*g)[i] += self.grad[i];
    }
  });
}

template <typename T>
Var<T> add_bias(const Var<T>& a, const Var<T>& bias) {
  const std::size_t w = static_cast<std::size_t>(a.width());
  require(bias.size() == w, "add_bias: bias width " + std::to_string(bias.size()) + " vs " + std::to_string(w));
  std::vector<T> out(a.value());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] += bias.value()[i % w];
  return make_result<T>(a.shape(), std::move(out), {a, bias}, [w](Node<T>& self) {
    if (auto* g = pgrad(self, 0)) {
      for (std::size_t i = 0; i < g->size(); ++i) (*g)[i] += self.grad[i];
    }
    if (auto* g = pgrad(self, 1)) {
      for (std::size_t i = 0; i < self.grad.size(); ++i) (*g)[i % w] += self.grad[i];
    }
  });
}

template <typename T>
Var<T> add_positional(const Var<T>& a, const Var<T>& table) {
  require(a.rank() == 3, "add_positional: expected [B,T,D]");
  const int steps = a.dim(1);
  const int d = a.dim(2);
  require(table.rank() == 2 && table.dim(1) == d && table.dim(0) >= steps,
          "add_positional: table " + shape_string(table.shape()) + " too small for " + shape_string(a.shape()));
  const std::size_t block = static_cast<std::size_t>(steps) * static_cast<std::size_t>(d);
  std::vector<T> out(a.value());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] += table.value()[i % block];
  return make_result<T>(a.shape(), std::move(out), {a, table}, [block](Node<T>& self) {
    if (auto* g = pgrad(self, 0)) {
      for (std::size_t i = 0; i < g->size(); ++i) (*g)[i] += self.grad[i];
    }
    if (auto* g = pgrad(self, 1)) {
      for (std::size_t i = 0; i < self.grad.size(); ++i) (*g)[i % block] += self.grad[i];
    }
  });
}

template <typename T>
Var<T> div_scalar(const Var<T>& a, const Var<T>& s) {
  require(s.size() == 1, "div_scalar: divisor must have one element");
  const T d = s.value()[0];
  std::vector<T> out(a.size());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = a.value()[i] / d;
  return make_result<T>(a.shape(), std::move(out), {a, s}, [](Node<T>& self) {
    const auto& av = self.parents[0]->value;
    const T d = self.parents[1]->value[0];
    if (auto* g = pgrad(self, 0)) {
      for (std::size_t i = 0; i < g->size(); ++i) (*g)[i] += self.grad[i] / d;
    }
    if (auto* g = pgrad(self, 1)) {
      T acc = 0;
      for (std::size_t i = 0; i < av.size(); ++i) acc += self.grad[i] * av[i];
      (*g)[0] -= acc / (d * d);
    }
  });
}

template <typename T>
Var<T> clamp(const Var<T>& a, T lo, T hi) {
  std::vector<T> out(a.size());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = std::clamp(a.value()[i], lo, hi);
  return make_result<T>(a.shape(), std::move(out), {a}, [lo, hi](Node<T>& self) {
    auto* g = pgrad(self, 0);
    if (!g) return;
    const auto& av = self.parents[0]->value;
    for (std::size_t i = 0; i < g->size(); ++i) {
      if (av[i] >= lo && av[i] <= hi) (*g)[i] += self.grad[i];
    }
  });
}

// ---------------------------------------------------------------------------
// Products

template <typename T>
Var<T> matmul(const Var<T>& a, const Var<T>& w) {
  require(w.rank() == 2, "matmul: weight must be 2-D");
  const int k = w.dim(0);
  const int m = w.dim(1);
  require(a.width() == k, "matmul: " + shape_string(a.shape()) + " x " + shape_string(w.shape()));
  const int r = static_cast<int>(a.rows());
  Shape shape = a.shape();
  shape.back() = m;
  std::vector<T> out(static_cast<std::size_t>(r) * m);
  MatMap<T>(out.data(), r, m).noalias() = ConstMatMap<T>(a.value().data(), r, k) * ConstMatMap<T>(w.value().data(), k, m);
  return make_result<T>(std::move(shape), std::move(out), {a, w}, [r, k, m](Node<T>& self) {
    ConstMatMap<T> dy(self.grad.data(), r, m);
    if (auto* g = pgrad(self, 0)) {
      MatMap<T>(g->data(), r, k).noalias() += dy * ConstMatMap<T>(self.parents[1]->value.data(), k, m).transpose();
    }
    if (auto* g = pgrad(self, 1)) {
      MatMap<T>(g->data(), k, m).noalias() += ConstMatMap<T>(self.parents[0]->value.data(), r, k).transpose() * dy;
    }
  });
}

template <typename T>
Var<T> linear(const Var<T>& x, const Var<T>& w, const Var<T>& b) {
  require(w.rank() == 2, "linear: weight must be 2-D");
  const int k = w.dim(0);
  const int m = w.dim(1);
  require(x.width() == k, "linear: " + shape_string(x.shape()) + " x " + shape_string(w.shape()));
  require(b.size() == static_cast<std::size_t>(m), "linear: bias size");
  const int r = static_cast<int>(x.rows());
  Shape shape = x.shape();
  shape.back() = m;
  std::vector<T> out(static_cast<std::size_t>(r) * m);
  MatMap<T> y(out.data(), r, m);
  y.noalias() = ConstMatMap<T>(x.value().data(), r, k) * ConstMatMap<T>(w.value().data(), k, m);
  y.rowwise() += Eigen::Map<const Eigen::Matrix<T, 1, Eigen::Dynamic>>(b.value().data(), m);
  return make_result<T>(std::move(shape), std::move(out), {x, w, b}, [r, k, m](Node<T>& self) {
    ConstMatMap<T> dy(self.grad.data(), r, m);
    if (auto* g = pgrad(self, 0)) {
      MatMap<T>(g->data(), r, k).noalias() += dy * ConstMatMap<T>(self.parents[1]->value.data(), k, m).transpose();
    }
    if (auto* g = pgrad(self, 1)) {
      MatMap<T>(g->data(), k, m).noalias() += ConstMatMap<T>(self.parents[0]->value.data(), r, k).transpose() * dy;
    }
    if (auto* g = pgrad(self, 2)) {
      Eigen::Map<Eigen::Matrix<T, 1, Eigen::Dynamic>>(g->data(), m) += dy.colwise().sum();
    }
  });
}

template <typename T>
Var<T> matmul_nt(const Var<T>& a, const Var<T>& b) {
  require(a.rank() == 2 && b.rank() == 2 && a.dim(1) == b.dim(1),
          "matmul_nt: " + shape_string(a.shape()) + " x " + shape_string(b.shape()) + "^T");
  const int r = a.dim(0);
  const int s = b.dim(0);
  const int k = a.dim(1);
  std::vector<T> out(static_cast<std::size_t>(r) * s);
  MatMap<T>(out.data(), r, s).noalias() =
      ConstMatMap<T>(a.value().data(), r, k) * ConstMatMap<T>(b.value().data(), s, k).transpose();
  return make_result<T>({r, s}, std::move(out), {a, b}, [r, s, k](Node<T>& self) {
    ConstMatMap<T> dy(self.grad.data(), r, s);
    if (auto* g = pgrad(self, 0)) {
      MatMap<T>(g->data(), r, k).noalias() += dy * ConstMatMap<T>(self.parents[1]->value.data(), s, k);
    }
    if (auto* g = pgrad(self, 1)) {
      MatMap<T>(g->data(), s, k).noalias() += dy.transpose() * ConstMatMap<T>(self.parents[0]->value.data(), r, k);
    }
  });
}

template <typename T>
Var<T> transpose2d(const Var<T>& a) {
  require(a.rank() == 2, "transpose2d: expected 2-D");
  const int r = a.dim(0);
  const int s = a.dim(1);
  std::vector<T> out(a.size());
  MatMap<T>(out.data(), s, r) = ConstMatMap<T>(a.value().data(), r, s).transpose();
  return make_result<T>({s, r}, std::move(out), {a}, [r, s](Node<T>& self) {
    if (auto* g = pgrad(self, 0)) {
      MatMap<T>(g->data(), r, s) += ConstMatMap<T>(self.grad.data(), s, r).transpose();
    }
  });
}

// ---------------------------------------------------------------------------
// Normalisation and softmax

template <typename T>
Var<T> layer_norm(const Var<T>& x, const Var<T>& gamma, const Var<T>& beta, T eps) {
  const std::size_t w = static_cast<std::size_t>(x.width());
  require(gamma.size() == w && beta.size() == w, "layer_norm: gain/bias width");
  const std::size_t rows = x.rows();
  std::vector<T> out(x.size());
  std::vector<T> xhat(x.size());
  std::vector<T> rstd(rows);
  const auto& xv = x.value();
  for (std::size_t r = 0; r < rows; ++r) {
    const T* row = xv.data() + r * w;
    T mu = 0;
    for (std::size_t j = 0; j < w; ++j) mu += row[j];
    mu /= static_cast<T>(w);
    T var = 0;
    for (std::size_t j = 0; j < w; ++j) var += (row[j] - mu) * (row[j] - mu);
    var /= static_cast<T>(w);
    const T rs = T(1) / std::sqrt(var + eps);
    rstd[r] = rs;
    for (std::size_t j = 0; j < w; ++j) {
      const T h = (row[j] - mu) * rs;
      xhat[r * w + j] = h;
      out[r * w + j] = h * gamma.value()[j] + beta.value()[j];
    }
  }
  return make_result<T>(x.shape(), std::move(out), {x, gamma, beta},
                        [w, rows, xhat = std::move(xhat), rstd = std::move(rstd)](Node<T>& self) {
                          const auto& gv = self.parents[1]->value;
                          const auto& dy = self.grad;
                          if (auto* g = pgrad(self, 1)) {
                            for (std::size_t i = 0; i < dy.size(); ++i) (*g)[i % w] += dy[i] * xhat[i];
                          }
                          if (auto* g = pgrad(self, 2)) {
                            for (std::size_t i = 0; i < dy.size(); ++i) (*g)[i % w] += dy[i];
                          }
                          if (auto* g = pgrad(self, 0)) {
                            const T inv_w = T(1) / static_cast<T>(w);
                            for (std::size_t r = 0; r < rows; ++r) {
                              T mean_g = 0;
                              T mean_gx = 0;
                              for (std::size_t j = 0; j < w; ++j) {
                                const T gj = dy[r * w + j] * gv[j];
                                mean_g += gj;
                                mean_gx += gj * xhat[r * w + j];
                              }
                              mean_g *= inv_w;
                              mean_gx *= inv_w;
                              for (std::size_t j = 0; j < w; ++j) {
                                const T gj = dy[r * w + j] * gv[j];
                                (*g)[r * w + j] += rstd[r] * (gj - mean_g - xhat[r * w + j] * mean_gx);
                              }
                            }
                          }
                        });
}

template <typename T>
Var<T> softmax_rows(const Var<T>& x) {
  const std::size_t w = static_cast<std::size_t>(x.width());
  const std::size_t rows = x.rows();
  std::vector<T> out(x.size());
  for (std::size_t r = 0; r < rows; ++r) {
    const T* in = x.value().data() + r * w;
    T* o = out.data() + r * w;
    const T mx = *std::max_element(in, in + w);
    T s = 0;
    for (std::size_t j = 0; j < w; ++j) s += (o[j] = std::exp(in[j] - mx));
    for (std::size_t j = 0; j < w; ++j) o[j] /= s;
  }
  return make_result<T>(x.shape(), out, {x}, [w, rows, p = out](Node<T>& self) {
    auto* g = pgrad(self, 0);
    if (!g) return;
    for (std::size_t r = 0; r < rows; ++r) {
      T dot = 0;
      for (std::size_t j = 0; j < w; ++j) dot += self.grad[r * w + j] * p[r * w + j];
      for (std::size_t j = 0; j < w; ++j) (*g)[r * w + j] += p[r * w + j] * (self.grad[r * w + j] - dot);
    }
  });
}

template <typename T>
Var<T> log_softmax_rows(const Var<T>& x) {
  const std::size_t w = static_cast<std::size_t>(x.width());
  const std::size_t rows = x.rows();
  std::vector<T> out(x.size());
  for (std::size_t r = 0; r < rows; ++r) {
    const T* in = x.value().data() + r * w;
    T* o = out.data() + r * w;
    const T mx = *std::max_element(in, in + w);
    T s = 0;
    for (std::size_t j = 0; j < w; ++j) s += std::exp(in[j] - mx);
    // Shift first: folding mx into the log-sum-exp rounds it at the scale of
    // the largest logit.
    const T ls = std::log(s);
    for (std::size_t j = 0; j < w; ++j) o[j] = (in[j] - mx) - ls;
  }
  return make_result<T>(x.shape(), std::move(out), {x}, [w, rows](Node<T>& self) {
    auto* g = pgrad(self, 0);
    if (!g) return;
    for (std::size_t r = 0; r < rows; ++r) {
      T total = 0;
      for (std::size_t j = 0; j < w; ++j) total += self.grad[r * w + j];
      for (std::size_t j = 0; j < w; ++j) {
        (*g)[r * w + j] += self.grad[r * w + j] - std::exp(self.value[r * w + j]) * total;
      }
    }
  });
}

template <typename T>
Var<T> l2_normalize_rows(const Var<T>& x) {
  constexpr T kEps = T(1e-12);
  const std::size_t w = static_cast<std::size_t>(x.width());
  const std::size_t rows = x.rows();
  std::vector<T> out(x.size());
  std::vector<T> norms(rows);
  for (std::size_t r = 0; r < rows; ++r) {
    const T* in = x.value().data() + r * w;
    T s = 0;
    for (std::size_t j = 0; j < w; ++j) s += in[j] * in[j];
    const T n = std::max(std::sqrt(s), kEps);
    norms[r] = n;
    for (std::size_t j = 0; j < w; ++j) out[r * w + j] = in[j] / n;
  }
  return make_result<T>(x.shape(), std::move(out), {x}, [w, rows, norms = std::move(norms)](Node<T>& self) {
    auto* g = pgrad(self, 0);
    if (!g) return;
    for (std::size_t r = 0; r < rows; ++r) {
      const T* y = self.value.data() + r * w;
      const T* dy = self.grad.data() + r * w;
      if (norms[r] <= kEps) {
        for (std::size_t j = 0; j < w; ++j) (*g)[r * w + j] += dy[j] / kEps;
        continue;
      }
      T dot = 0;
      for (std::size_t j = 0; j < w; ++j) dot += y[j] * dy[j];
      for (std::size_t j = 0; j < w; ++j) (*g)[r * w + j] += (dy[j] - y[j] * dot) / norms[r];
    }
  });
}

// ---------------------------------------------------------------------------
// Attention

template <typename T>
Var<T> attention(const Var<T>& q, const Var<T>& k, const Var<T>& v, int heads,
                 std::span<const std::uint8_t> key_valid, bool causal) {
  require(q.rank() == 3 && k.rank() == 3 && v.rank() == 3, "attention: expected [B,T,D] inputs");
  require_same_shape(k, v, "attention(k,v)");
  const int batch = q.dim(0);
  const int tq = q.dim(1);
  const int tk = k.dim(1);
  const int d = q.dim(2);
  require(k.dim(0) == batch && k.dim(2) == d, "attention: q/k batch or width mismatch");
  require(heads > 0 && d % heads == 0, "attention: width not divisible by heads");
  require(key_valid.empty() || key_valid.size() == static_cast<std::size_t>(batch) * tk,
          "attention: key mask size");
  require(!causal || tq == tk, "attention: causal requires square scores");
  const int dh = d / heads;
  const T inv_sqrt = T(1) / std::sqrt(static_cast<T>(dh));
  const T neg_inf = -std::numeric_limits<T>::infinity();

  std::vector<T> out(q.size(), T(0));
  std::vector<T> probs(static_cast<std::size_t>(batch) * heads * tq * tk, T(0));
  RowMat<T> scores(tq, tk);
  for (int b = 0; b < batch; ++b) {
    const std::size_t qoff = static_cast<std::size_t>(b) * tq * d;
    const std::size_t koff = static_cast<std::size_t>(b) * tk * d;
    for (int h = 0; h < heads; ++h) {
      ConstStridedMap<T> qm(q.value().data() + qoff + h * dh, tq, dh, Eigen::OuterStride<>(d));
      ConstStridedMap<T> km(k.value().data() + koff + h * dh, tk, dh, Eigen::OuterStride<>(d));
      ConstStridedMap<T> vm(v.value().data() + koff + h * dh, tk, dh, Eigen::OuterStride<>(d));
      scores.noalias() = (qm * km.transpose()) * inv_sqrt;
      MatMap<T> p(probs.data() + ((static_cast<std::size_t>(b) * heads + h) * tq) * tk, tq, tk);
      for (int i = 0; i < tq; ++i) {
        T mx = neg_inf;
        for (int j = 0; j < tk; ++j) {
          const bool ok = (key_valid.empty() || key_valid[static_cast<std::size_t>(b) * tk + j]) && (!causal || j <= i);
          if (!ok) scores(i, j) = neg_inf;
          mx = std::max(mx, scores(i, j));
        }
        if (mx == neg_inf) continue;  // nothing admissible: row stays zero
        T s = 0;
        for (int j = 0; j < tk; ++j) {
          const T e = scores(i, j) == neg_inf ? T(0) : std::exp(scores(i, j) - mx);
          p(i, j) = e;
          s += e;
        }
        p.row(i) /= s;
      }
      StridedMap<T> om(out.data() + qoff + h * dh, tq, dh, Eigen::OuterStride<>(d));
      om.noalias() = p * vm;
    }
  }

  return make_result<T>(q.shape(), std::move(out), {q, k, v},
                        [batch, tq, tk, d, heads, dh, inv_sqrt, probs = std::move(probs)](Node<T>& self) {
                          auto* gq = pgrad(self, 0);
                          auto* gk = pgrad(self, 1);
                          auto* gv = pgrad(self, 2);
                          const auto& qv = self.parents[0]->value;
                          const auto& kv = self.parents[1]->value;
                          const auto& vv = self.parents[2]->value;
                          RowMat<T> dp(tq, tk);
                          for (int b = 0; b < batch; ++b) {
                            const std::size_t qoff = static_cast<std::size_t>(b) * tq * d;
                            const std::size_t koff = static_cast<std::size_t>(b) * tk * d;
                            for (int h = 0; h < heads; ++h) {
                              ConstMatMap<T> p(probs.data() + ((static_cast<std::size_t>(b) * heads + h) * tq) * tk, tq, tk);
                              ConstStridedMap<T> dout(self.grad.data() + qoff + h * dh, tq, dh, Eigen::OuterStride<>(d));
                              ConstStridedMap<T> qm(qv.data() + qoff + h * dh, tq, dh, Eigen::OuterStride<>(d));
                              ConstStridedMap<T> km(kv.data() + koff + h * dh, tk, dh, Eigen::OuterStride<>(d));
                              ConstStridedMap<T> vm(vv.data() + koff + h * dh, tk, dh, Eigen::OuterStride<>(d));
                              if (gv) {
                                StridedMap<T>(gv->data() + koff + h * dh, tk, dh, Eigen::OuterStride<>(d)).noalias() +=
                                    p.transpose() * dout;
                              }
                              if (!gq && !gk) continue;
                              dp.noalias() = dout * vm.transpose();
                              // dS = P .* (dP - rowsum(dP .* P))
                              for (int i = 0; i < tq; ++i) {
                                const T dot = (dp.row(i).array() * p.row(i).array()).sum();
                                dp.row(i) = (p.row(i).array() * (dp.row(i).array() - dot)).matrix();
                              }
                              if (gq) {
                                StridedMap<T>(gq->data() + qoff + h * dh, tq, dh, Eigen::OuterStride<>(d)).noalias() +=
                                    (dp * km) * inv_sqrt;
                              }
                              if (gk) {
                                StridedMap<T>(gk->data() + koff + h * dh, tk, dh, Eigen::OuterStride<>(d)).noalias() +=
                                    (dp.transpose() * qm) * inv_sqrt;
                              }
                            }
                          }
                        });
}

// ---------------------------------------------------------------------------
// Sequence plumbing

template <typename T>
Var<T> concat_seq(const Var<T>& a, const Var<T>& b) {
  require(a.rank() == 3 && b.rank() == 3 && a.dim(0) == b.dim(0) && a.dim(2) == b.dim(2),
          "concat_seq: " + shape_string(a.shape()) + " + " + shape_string(b.shape()));
  const int batch = a.dim(0);
  const std::size_t ablk = static_cast<std::size_t>(a.dim(1)) * a.dim(2);
  const std::size_t bblk = static_cast<std::size_t>(b.dim(1)) * b.dim(2);
  std::vector<T> out;
  out.reserve(a.size() + b.size());
  for (int i = 0; i < batch; ++i) {
    out.insert(out.end(), a.value().begin() + i * ablk, a.value().begin() + (i + 1) * ablk);
    out.insert(out.end(), b.value().begin() + i * bblk, b.value().begin() + (i + 1) * bblk);
  }
  return make_result<T>({batch, a.dim(1) + b.dim(1), a.dim(2)}, std::move(out), {a, b},
                        [batch, ablk, bblk](Node<T>& self) {
                          auto* ga = pgrad(self, 0);
                          auto* gb = pgrad(self, 1);
                          for (int i = 0; i < batch; ++i) {
                            const T* src = self.grad.data() + i * (ablk + bblk);
                            if (ga) {
                              for (std::size_t j = 0; j < ablk; ++j) (*ga)[i * ablk + j] += src[j];
                            }
                            if (gb) {
                              for (std::size_t j = 0; j < bblk; ++j) (*gb)[i * bblk + j] += src[ablk + j];
                            }
                          }
                        });
}

template <typename T>
Var<T> slice_seq(const Var<T>& a, int start, int length) {
  require(a.rank() == 3 && start >= 0 && length >= 0 && start + length <= a.dim(1),
          "slice_seq: bad range on " + shape_string(a.shape()));
  const int batch = a.dim(0);
  const int steps = a.dim(1);
  const int d = a.dim(2);
  std::vector<T> out(static_cast<std::size_t>(batch) * length * d);
  for (int i = 0; i < batch; ++i) {
    std::copy_n(a.value().begin() + (static_cast<std::size_t>(i) * steps + start) * d,
                static_cast<std::size_t>(length) * d, out.begin() + static_cast<std::size_t>(i) * length * d);
  }
  return make_result<T>({batch, length, d}, std::move(out), {a}, [batch, steps, start, length, d](Node<T>& self) {
    auto* g = pgrad(self, 0);
    if (!g) return;
    for (int i = 0; i < batch; ++i) {
      for (std::size_t j = 0; j < static_cast<std::size_t>(length) * d; ++j) {
        (*g)[(static_cast<std::size_t>(i) * steps + start) * d + j] += self.grad[static_cast<std::size_t>(i) * length * d + j];
      }
    }
  });
}

template <typename T>
Var<T> gather_rows(const Var<T>& a, std::span<const int> rows) {
  const std::size_t w = static_cast<std::size_t>(a.width());
  const std::size_t total = a.rows();
  std::vector<int> idx(rows.begin(), rows.end());
  std::vector<T> out(idx.size() * w);
  for (std::size_t i = 0; i < idx.size(); ++i) {
    if (idx[i] < 0 || static_cast<std::size_t>(idx[i]) >= total) {
      throw ShapeError("gather_rows: row " + std::to_string(idx[i]) + " out of " + std::to_string(total));
    }
    std::copy_n(a.value().begin() + idx[i] * w, w, out.begin() + i * w);
  }
  const int n = static_cast<int>(idx.size());
  return make_result<T>({n, static_cast<int>(w)}, std::move(out), {a},
                        [w, idx = std::move(idx)](Node<T>& self) {
                          auto* g = pgrad(self, 0);
                          if (!g) return;
                          for (std::size_t i = 0; i < idx.size(); ++i) {
                            for (std::size_t j = 0; j < w; ++j) (*g)[idx[i] * w + j] += self.grad[i * w + j];
                          }
                        });
}

template <typename T>
Var<T> replace_rows(const Var<T>& a, std::span<const int> rows, const Var<T>& row) {
  const std::size_t w = static_cast<std::size_t>(a.width());
  require(row.size() == w, "replace_rows: replacement width");
  std::vector<std::uint8_t> hit(a.rows(), 0);
  for (int r : rows) {
    if (r < 0 || static_cast<std::size_t>(r) >= hit.size()) throw ShapeError("replace_rows: row out of range");
    hit[r] = 1;
  }
  std::vector<T> out(a.value());
  for (std::size_t r = 0; r < hit.size(); ++r) {
    if (hit[r]) std::copy_n(row.value().begin(), w, out.begin() + r * w);
  }
  return make_result<T>(a.shape(), std::move(out), {a, row}, [w, hit = std::move(hit)](Node<T>& self) {
    auto* ga = pgrad(self, 0);
    auto* gr = pgrad(self, 1);
    for (std::size_t r = 0; r < hit.size(); ++r) {
      for (std::size_t j = 0; j < w; ++j) {
        const T dy = self.grad[r * w + j];
        if (hit[r]) {
          if (gr) (*gr)[j] += dy;
        } else if (ga) {
          (*ga)[r * w + j] += dy;
        }
      }
    }
  });
}

// ---------------------------------------------------------------------------
// Reductions and losses

template <typename T>
Var<T> sum(const Var<T>& a) {
  T s = 0;
  for (T x : a.value()) s += x;
  return make_result<T>({1}, {s}, {a}, [](Node<T>& self) {
    if (auto* g = pgrad(self, 0)) {
      for (auto& x : *g) x += self.grad[0];
    }
  });
}

template <typename T>
Var<T> mean(const Var<T>& a) {
  require(a.size() > 0, "mean: empty tensor");
  return scale(sum(a), T(1) / static_cast<T>(a.size()));
}

template <typename T>
Var<T> weighted_sum(const Var<T>& a, std::span<const T> weights) {
  require(weights.size() == a.size(), "weighted_sum: weight count");
  std::vector<T> wv(weights.begin(), weights.end());
  T s = 0;
  for (std::size_t i = 0; i < wv.size(); ++i) s += wv[i] * a.value()[i];
  return make_result<T>({1}, {s}, {a}, [wv = std::move(wv)](Node<T>& self) {
    if (auto* g = pgrad(self, 0)) {
      for (std::size_t i = 0; i < wv.size(); ++i) (*g)[i] += self.grad[0] * wv[i];
    }
  });
}

template <typename T>
Var<T> soft_cross_entropy(const Var<T>& logp, const Var<T>& target) {
  require(logp.size() == target.size() && logp.width() == target.width(), "soft_cross_entropy: shape mismatch");
  const std::size_t w = static_cast<std::size_t>(logp.width());
  const std::size_t rows = logp.rows();
  std::vector<T> out(rows, T(0));
  for (std::size_t r = 0; r < rows; ++r) {
    T s = 0;
    for (std::size_t j = 0; j < w; ++j) {
      const T t = target.value()[r * w + j];
      if (t != T(0)) s -= t * logp.value()[r * w + j];
    }
    out[r] = s;
  }
  std::vector<T> tv = target.value();
  return make_result<T>({static_cast<int>(rows)}, std::move(out), {logp}, [w, rows, tv = std::move(tv)](Node<T>& self) {
    auto* g = pgrad(self, 0);
    if (!g) return;
    for (std::size_t r = 0; r < rows; ++r) {
      for (std::size_t j = 0; j < w; ++j) (*g)[r * w + j] -= self.grad[r] * tv[r * w + j];
    }
  });
}

template <typename T>
Var<T> nll_rows(const Var<T>& logp, std::span<const int> labels) {
  const std::size_t w = static_cast<std::size_t>(logp.width());
  const std::size_t rows = logp.rows();
  require(labels.size() == rows, "nll_rows: label count");
  std::vector<int> lab(labels.begin(), labels.end());
  std::vector<T> out(rows, T(0));
  for (std::size_t r = 0; r < rows; ++r) {
    if (lab[r] < 0) continue;
    if (static_cast<std::size_t>(lab[r]) >= w) throw InputError("nll_rows: label out of range");
    out[r] = -logp.value()[r * w + lab[r]];
  }
  return make_result<T>({static_cast<int>(rows)}, std::move(out), {logp}, [w, lab = std::move(lab)](Node<T>& self) {
    auto* g = pgrad(self, 0);
    if (!g) return;
    for (std::size_t r = 0; r < lab.size(); ++r) {
      if (lab[r] >= 0) (*g)[r * w + lab[r]] -= self.grad[r];
    }
  });
}

template <typename T>
Var<T> bce_with_logits(const Var<T>& logits, std::span<const T> labels) {
  require(labels.size() == logits.size(), "bce_with_logits: label count");
  std::vector<T> lab(labels.begin(), labels.end());
  std::vector<T> out(logits.size());
  for (std::size_t i = 0; i < out.size(); ++i) {
    const T z = logits.value()[i];
    out[i] = std::max(z, T(0)) + std::log1p(std::exp(-std::abs(z))) - lab[i] * z;
  }
  const int n = static_cast<int>(out.size());
  return make_result<T>({n}, std::move(out), {logits}, [lab = std::move(lab)](Node<T>& self) {
    auto* g = pgrad(self, 0);
    if (!g) return;
    const auto& zv = self.parents[0]->value;
    for (std::size_t i = 0; i < lab.size(); ++i) {
      const T sig = T(1) / (T(1) + std::exp(-zv[i]));
      (*g)[i] += self.grad[i] * (sig - lab[i]);
    }
  });
}

// ---------------------------------------------------------------------------

#define VLMIM_INSTANTIATE(T)                                                                              \
  template class Var<T>;                                                                                  \
  template Var<T> add(const Var<T>&, const Var<T>&);                                                      \
  template Var<T> sub(const Var<T>&, const Var<T>&);                                                      \
  template Var<T> mul(const Var<T>&, const Var<T>&);                                                      \
  template Var<T> scale(const Var<T>&, T);                                                                \
  template Var<T> gelu(const Var<T>&);                                                                    \
  template Var<T> reshape(const Var<T>&, Shape);                                                          \
  template Var<T> add_bias(const Var<T>&, const Var<T>&);                                                 \
  template Var<T> add_positional(const Var<T>&, const Var<T>&);                                           \
  template Var<T> div_scalar(const Var<T>&, const Var<T>&);                                               \
  template Var<T> clamp(const Var<T>&, T, T);                                                             \
  template Var<T> matmul(const Var<T>&, const Var<T>&);                                                   \
  template Var<T> linear(const Var<T>&, const Var<T>&, const Var<T>&);                                    \
  template Var<T> matmul_nt(const Var<T>&, const Var<T>&);                                                \
  template Var<T> transpose2d(const Var<T>&);                                                             \
  template Var<T> layer_norm(const Var<T>&, const Var<T>&, const Var<T>&, T);                             \
  template Var<T> softmax_rows(const Var<T>&);                                                            \
  template Var<T> log_softmax_rows(const Var<T>&);                                                        \
  template Var<T> l2_normalize_rows(const Var<T>&);                                                       \
  template Var<T> attention(const Var<T>&, const Var<T>&, const Var<T>&, int, std::span<const std::uint8_t>, \
                            bool);                                                                        \
  template Var<T> concat_seq(const Var<T>&, const Var<T>&);                                               \
  template Var<T> slice_seq(const Var<T>&, int, int);                                                     \
  template Var<T> gather_rows(const Var<T>&, std::span<const int>);                                       \
  template Var<T> replace_rows(const Var<T>&, std::span<const int>, const Var<T>&);                       \
  template Var<T> sum(const Var<T>&);                                                                     \
  template Var<T> mean(const Var<T>&);                                                                    \
  template Var<T> weighted_sum(const Var<T>&, std::span<const T>);                                        \
  template Var<T> soft_cross_entropy(const Var<T>&, const Var<T>&);                                       \
  template Var<T> nll_rows(const Var<T>&, std::span<const int>);                                          \
  template Var<T> bce_with_logits(const Var<T>&, std::span<const T>);

VLMIM_INSTANTIATE(float)
VLMIM_INSTANTIATE(double)

#undef VLMIM_INSTANTIATE

}  // namespace vlmim
