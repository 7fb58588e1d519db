// Copyright 2026 The vlmim Authors
// SPDX-License-Identifier: Apache-2.0

#include <gtest/gtest.h>

#include <cmath>

#include "test_util.hpp"
#include "vlmim/errors.hpp"

namespace vlmim {
namespace {

using testing::gradient_error;
using testing::random_var;

// Projects an op output to a scalar with fixed random weights, then checks
// the gradient of every input by central differences.
double op_error(const std::vector<Var<double>>& inputs, const std::function<Var<double>()>& op) {
  const Var<double> probe = op();
  std::mt19937_64 rng(99);
  std::normal_distribution<double> normal(0.0, 1.0);
  std::vector<double> w(probe.size());
  for (auto& x : w) x = normal(rng);
  std::vector<NamedTensor<double>> named;
  for (std::size_t i = 0; i < inputs.size(); ++i) named.push_back({"in" + std::to_string(i), inputs[i]});
  std::string worst;
  const double err = gradient_error(named, [&] {
    const Var<double> out = op();
    return weighted_sum(reshape(out, {static_cast<int>(out.size())}), std::span<const double>(w));
  }, 1e-6, &worst);
  if (err >= 1e-6) ADD_FAILURE() << "worst entry: " << worst;
  return err;
}

TEST(AutogradGrad, Elementwise) {
  auto a = random_var<double>({3, 4}, 1, true);
  auto b = random_var<double>({3, 4}, 2, true);
  EXPECT_LT(op_error({a, b}, [&] { return add(a, b); }), 1e-7);
  EXPECT_LT(op_error({a, b}, [&] { return sub(a, b); }), 1e-7);
  EXPECT_LT(op_error({a, b}, [&] { return mul(a, b); }), 1e-7);
  EXPECT_LT(op_error({a}, [&] { return scale(a, 0.37); }), 1e-7);
  EXPECT_LT(op_error({a}, [&] { return gelu(a); }), 1e-7);
  EXPECT_LT(op_error({a}, [&] { return reshape(a, {2, 6}); }), 1e-7);
}

TEST(AutogradGrad, BroadcastAndScalars) {
  auto a = random_var<double>({2, 3, 4}, 3, true);
  auto bias = random_var<double>({4}, 4, true);
  auto table = random_var<double>({5, 4}, 5, true);
  auto s = Var<double>::leaf({1}, {0.3}, true);
  EXPECT_LT(op_error({a, bias}, [&] { return add_bias(a, bias); }), 1e-7);
  EXPECT_LT(op_error({a, table}, [&] { return add_positional(a, table); }), 1e-7);
  EXPECT_LT(op_error({a, s}, [&] { return div_scalar(a, s); }), 1e-7);
  EXPECT_LT(op_error({s}, [&] { return clamp(s, 0.001, 0.5); }), 1e-7);
}

TEST(AutogradGrad, MatrixOps) {
  auto x = random_var<double>({2, 3, 4}, 6, true);
  auto w = random_var<double>({4, 5}, 7, true);
  auto b = random_var<double>({5}, 8, true);
  auto m = random_var<double>({3, 4}, 9, true);
  auto n = random_var<double>({6, 4}, 10, true);
  EXPECT_LT(op_error({x, w}, [&] { return matmul(x, w); }), 1e-7);
  EXPECT_LT(op_error({x, w, b}, [&] { return linear(x, w, b); }), 1e-7);
  EXPECT_LT(op_error({m, n}, [&] { return matmul_nt(m, n); }), 1e-7);
  EXPECT_LT(op_error({m}, [&] { return transpose2d(m); }), 1e-7);
}

TEST(AutogradGrad, Normalisations) {
  auto x = random_var<double>({3, 5}, 11, true);
  auto g = random_var<double>({5}, 12, true);
  auto b = random_var<double>({5}, 13, true);
  EXPECT_LT(op_error({x, g, b}, [&] { return layer_norm(x, g, b, 1e-5); }), 1e-6);
  EXPECT_LT(op_error({x}, [&] { return softmax_rows(x); }), 1e-7);
  EXPECT_LT(op_error({x}, [&] { return log_softmax_rows(x); }), 1e-7);
  EXPECT_LT(op_error({x}, [&] { return l2_normalize_rows(x); }), 1e-7);
}

TEST(AutogradGrad, AttentionWithMaskAndCausality) {
  auto q = random_var<double>({2, 3, 4}, 14, true);
  auto k = random_var<double>({2, 5, 4}, 15, true);
  auto v = random_var<double>({2, 5, 4}, 16, true);
  const std::vector<std::uint8_t> valid = {1, 1, 0, 1, 0, 1, 0, 1, 1, 1};
  EXPECT_LT(op_error({q, k, v}, [&] { return attention(q, k, v, 2, std::span<const std::uint8_t>(valid), false); }),
            1e-6);
  auto ks = random_var<double>({2, 3, 4}, 17, true);
  auto vs = random_var<double>({2, 3, 4}, 18, true);
  EXPECT_LT(op_error({q, ks, vs}, [&] { return attention(q, ks, vs, 2, {}, true); }), 1e-6);
}

TEST(AutogradGrad, SequencePlumbing) {
  auto a = random_var<double>({2, 3, 4}, 19, true);
  auto b = random_var<double>({2, 2, 4}, 20, true);
  auto row = random_var<double>({4}, 21, true);
  const std::vector<int> rows = {5, 0, 5, 2};
  const std::vector<int> replaced = {1, 4};
  EXPECT_LT(op_error({a, b}, [&] { return concat_seq(a, b); }), 1e-7);
  EXPECT_LT(op_error({a}, [&] { return slice_seq(a, 1, 2); }), 1e-7);
  EXPECT_LT(op_error({a}, [&] { return gather_rows(a, std::span<const int>(rows)); }), 1e-7);
  EXPECT_LT(op_error({a, row}, [&] { return replace_rows(a, std::span<const int>(replaced), row); }), 1e-7);
}

TEST(AutogradGrad, Reductions) {
  auto a = random_var<double>({3, 4}, 22, true);
  const auto target = softmax_rows(random_var<double>({3, 4}, 23));
  const std::vector<int> labels = {2, -1, 0};
  const std::vector<double> y = {1, 0, 1, 0, 0, 1, 1, 0, 0, 1, 0, 1};
  EXPECT_LT(op_error({a}, [&] { return sum(a); }), 1e-7);
  EXPECT_LT(op_error({a}, [&] { return mean(a); }), 1e-7);
  EXPECT_LT(op_error({a}, [&] { return soft_cross_entropy(log_softmax_rows(a), target); }), 1e-7);
  EXPECT_LT(op_error({a}, [&] { return nll_rows(log_softmax_rows(a), std::span<const int>(labels)); }), 1e-7);
  EXPECT_LT(op_error({a}, [&] { return bce_with_logits(reshape(a, {12}), std::span<const double>(y)); }), 1e-7);
}

TEST(Autograd, QueriesWithoutKeysGiveZeroRows) {
  auto q = random_var<double>({1, 2, 4}, 24);
  auto k = random_var<double>({1, 3, 4}, 25);
  auto v = random_var<double>({1, 3, 4}, 26);
  const std::vector<std::uint8_t> none = {0, 0, 0};
  const auto out = attention(q, k, v, 2, std::span<const std::uint8_t>(none), false);
  for (double x : out.value()) EXPECT_EQ(x, 0.0);
}

TEST(Autograd, IgnoredKeysDoNotInfluenceOutput) {
  auto q = random_var<double>({1, 2, 4}, 27);
  auto k = random_var<double>({1, 3, 4}, 28);
  auto v = random_var<double>({1, 3, 4}, 29);
  const std::vector<std::uint8_t> valid = {1, 1, 0};
  const auto base = attention(q, k, v, 2, std::span<const std::uint8_t>(valid), false).value();
  auto k2 = k.detach();
  auto v2 = v.detach();
  for (int j = 8; j < 12; ++j) {
    k2.mutable_value()[j] += 3.0;
    v2.mutable_value()[j] -= 7.0;
  }
  EXPECT_EQ(attention(q, k2, v2, 2, std::span<const std::uint8_t>(valid), false).value(), base);
}

TEST(Autograd, NoGradGuardBuildsNoGraph) {
  auto a = random_var<double>({2, 2}, 30, true);
  {
    NoGradGuard guard;
    EXPECT_FALSE(grad_enabled());
    EXPECT_FALSE(mul(a, a).requires_grad());
  }
  EXPECT_TRUE(grad_enabled());
  EXPECT_TRUE(mul(a, a).requires_grad());
}

TEST(Autograd, GradientsAccumulateAcrossUses) {
  auto a = Var<double>::leaf({1}, {3.0}, true);
  sum(add(mul(a, a), a)).backward();
  EXPECT_DOUBLE_EQ(a.grad()[0], 7.0);  // d/da (a^2 + a) at 3
}

TEST(Autograd, ShapeErrorsAreReported) {
  auto a = random_var<double>({2, 3}, 31);
  auto b = random_var<double>({3, 2}, 32);
  EXPECT_THROW(add(a, b), ShapeError);
  EXPECT_THROW(matmul(a, a), ShapeError);
  EXPECT_THROW(reshape(a, {5}), ShapeError);
  EXPECT_THROW(Var<double>::leaf({2}, {1.0}, false), ShapeError);
}

TEST(Autograd, BackwardNeedsAScalar) {
  auto a = random_var<double>({2, 2}, 33, true);
  EXPECT_THROW(mul(a, a).backward(), Error);
}

}  // namespace
}  // namespace vlmim
