// Copyright 2026 The vlmim Authors
// SPDX-License-Identifier: Apache-2.0

#include <gtest/gtest.h>

#include <cmath>
#include <limits>
#include <set>

#include "test_util.hpp"
#include "vlmim/errors.hpp"
#include "vlmim/objectives.hpp"
#include "vlmim/train.hpp"

namespace vlmim {
namespace {

using testing::random_images;
using testing::random_tokens;
using testing::random_var;
using testing::small_config;

Var<double> temp(double t) { return Var<double>::constant({1}, {t}); }

TEST(ItcLoss, SingletonBatchIsZero) {
  const auto a = random_var<double>({1, 5}, 1);
  const auto b = random_var<double>({1, 5}, 2);
  EXPECT_EQ(itc_loss(a, b, temp(0.07)).item(), 0.0);
}

TEST(ItcLoss, IdenticalPairsGiveLogTwo) {
  const auto v = Var<double>::constant({2, 3}, {1, 2, 3, 1, 2, 3});
  EXPECT_NEAR(itc_loss(v, v, temp(0.07)).item(), std::log(2.0), 1e-12);
}

TEST(ItcLoss, OrthogonalPairsClosedForm) {
  for (int b : {2, 3, 5}) {
    std::vector<double> eye(static_cast<std::size_t>(b) * b, 0.0);
    for (int i = 0; i < b; ++i) eye[i * b + i] = 2.5;  // scale is removed by normalisation
    const auto v = Var<double>::constant({b, b}, eye);
    const double inv_t = 1.0 / 0.07;
    const double expected = -std::log(std::exp(inv_t) / (std::exp(inv_t) + (b - 1)));
    EXPECT_NEAR(itc_loss(v, v, temp(0.07)).item(), expected, 1e-12) << "batch " << b;
  }
}

TEST(ItcLoss, DirectInfoNceEvaluation) {
  const auto img = random_var<double>({4, 3}, 3);
  const auto txt = random_var<double>({4, 3}, 4);
  // Oracle: cosine logits and the two cross-entropies written out by hand.
  auto unit = [](const std::vector<double>& v, int r) {
    const double n = std::sqrt(v[r * 3] * v[r * 3] + v[r * 3 + 1] * v[r * 3 + 1] + v[r * 3 + 2] * v[r * 3 + 2]);
    return std::array<double, 3>{v[r * 3] / n, v[r * 3 + 1] / n, v[r * 3 + 2] / n};
  };
  double s[4][4];
  for (int i = 0; i < 4; ++i) {
    for (int j = 0; j < 4; ++j) {
      const auto a = unit(img.value(), i);
      const auto b = unit(txt.value(), j);
      s[i][j] = (a[0] * b[0] + a[1] * b[1] + a[2] * b[2]) / 0.1;
    }
  }
  double i2t = 0, t2i = 0;
  for (int i = 0; i < 4; ++i) {
    double zr = 0, zc = 0;
    for (int j = 0; j < 4; ++j) {
      zr += std::exp(s[i][j]);
      zc += std::exp(s[j][i]);
    }
    i2t += std::log(zr) - s[i][i];
    t2i += std::log(zc) - s[i][i];
  }
  EXPECT_NEAR(itc_loss(img, txt, temp(0.1)).item(), 0.5 * (i2t + t2i) / 4, 1e-12);
}

TEST(ItcLoss, InvariantToPositiveRescaling) {
  const auto img = random_var<double>({4, 6}, 5);
  const auto txt = random_var<double>({4, 6}, 6);
  const auto base = contrastive_similarity(img, txt, 0.07);
  for (double factor : {0.25, 2.0, 8.0}) {
    // Power-of-two factors are exact, so the normalised logits must match bit for bit.
    EXPECT_EQ(contrastive_similarity(scale(img, factor), txt, 0.07), base);
    EXPECT_EQ(contrastive_similarity(img, scale(txt, factor), 0.07), base);
  }
  const auto odd = contrastive_similarity(scale(img, 3.7), txt, 0.07);
  for (std::size_t i = 0; i < base.size(); ++i) EXPECT_NEAR(odd[i], base[i], 1e-12);
  EXPECT_NEAR(itc_loss(scale(img, 3.7), txt, temp(0.07)).item(), itc_loss(img, txt, temp(0.07)).item(), 1e-12);
}

TEST(ItcLoss, ShapeMismatch) {
  EXPECT_THROW(itc_loss(random_var<double>({2, 3}, 1), random_var<double>({3, 3}, 2), temp(0.1)), ShapeError);
}

TEST(ItmLoss, ZeroLogitsGiveLogTwo) {
  const std::vector<double> labels = {1, 0, 0, 1, 0, 0};
  EXPECT_NEAR(itm_loss(Var<double>::zeros({6, 1}), std::span<const double>(labels)).item(), std::log(2.0), 1e-15);
}

TEST(ItmLoss, SeparatingLogitsSaturate) {
  const std::vector<double> labels = {1, 1, 0, 0};
  const auto logits = Var<double>::constant({4, 1}, {30, 25, -30, -40});
  EXPECT_LT(itm_loss(logits, std::span<const double>(labels)).item(), 1e-3);
  const std::vector<double> ones = {1, 1};
  EXPECT_NO_THROW(itm_loss(Var<double>::constant({2, 1}, {1, 2}), std::span<const double>(ones)));
}

TEST(ItmNegatives, NeverTheTruePair) {
  const int b = 8;
  for (auto mode : {NegativeSampling::kHard, NegativeSampling::kUniform}) {
    for (int seed = 0; seed < 200; ++seed) {
      std::mt19937_64 rng(seed);
      std::vector<double> sim(b * b);
      std::normal_distribution<double> normal(0.0, 3.0);
      for (auto& x : sim) x = normal(rng);
      for (int i = 0; i < b; ++i) sim[i * b + i] = 100.0;  // the true pair dominates
      const auto neg = sample_itm_negatives(sim, b, mode, rng);
      ASSERT_EQ(neg.text_for_image.size(), 8u);
      ASSERT_EQ(neg.image_for_text.size(), 8u);
      for (int i = 0; i < b; ++i) {
        EXPECT_NE(neg.text_for_image[i], i);
        EXPECT_NE(neg.image_for_text[i], i);
        EXPECT_TRUE(neg.text_for_image[i] >= 0 && neg.text_for_image[i] < b);
      }
    }
  }
  std::mt19937_64 rng(0);
  EXPECT_TRUE(sample_itm_negatives(std::vector<double>{1.0}, 1, NegativeSampling::kHard, rng).text_for_image.empty());
}

TEST(ItmNegatives, HardNegativesFollowTheSimilaritySoftmax) {
  // Row 0 over candidates 1, 2: scores ln 3 and 0 => 3/4 and 1/4.
  const std::vector<double> sim = {9, std::log(3.0), 0, 0, 9, 0, 0, 0, 9};
  std::mt19937_64 rng(3);
  int hits = 0;
  const int draws = 20000;
  for (int t = 0; t < draws; ++t) hits += sample_itm_negatives(sim, 3, NegativeSampling::kHard, rng).text_for_image[0] == 1;
  EXPECT_NEAR(static_cast<double>(hits) / draws, 0.75, 3 * std::sqrt(0.75 * 0.25 / draws));
}

TEST(ItmForward, PairLayout) {
  const auto cfg = small_config();
  VlModel<double> model(cfg, 7);
  const auto image = model.image.forward(random_images<double>(3, cfg, 8));
  const auto text = model.text.forward(random_tokens({4, 5, 6}, cfg, 9));
  const ItmNegatives neg{{2, 0, 1}, {1, 2, 0}};
  const auto batch = itm_forward(model, image, text, neg);
  EXPECT_EQ(batch.logits.shape(), (Shape{9, 1}));
  EXPECT_EQ(batch.labels, (std::vector<double>{1, 1, 1, 0, 0, 0, 0, 0, 0}));
  // Pair (image 0, text 2) scored on its own must match row 3.
  const std::vector<int> i0 = {0}, t2 = {2};
  const auto single = itm_forward(model, select_rows(image, std::span<const int>(i0)),
                                  select_rows(text, std::span<const int>(t2)), ItmNegatives{});
  EXPECT_NEAR(single.logits.item(), batch.logits.value()[3], 1e-12);
  EXPECT_EQ(itm_forward(model, image, text, ItmNegatives{}).logits.shape(), (Shape{3, 1}));
}

TEST(Mlm, FifteenPercentOfTwentyIsThree) {
  TokenBatch t;
  t.batch = 1;
  t.width = 22;
  t.ids = {token::kCls};
  for (int j = 0; j < 20; ++j) t.ids.push_back(token::kFirstWord + j % 10);
  t.ids.push_back(token::kEos);
  t.lengths = {22};
  std::mt19937_64 rng(1);
  const auto m = mask_tokens_for_mlm(t, 0.15, 128, rng);
  EXPECT_EQ(m.masked, 3);
  int labelled = 0;
  for (std::size_t j = 0; j < m.labels.size(); ++j) {
    if (m.labels[j] >= 0) {
      ++labelled;
      EXPECT_EQ(m.labels[j], t.ids[j]);
      EXPECT_TRUE(j >= 1 && j <= 20);
    } else {
      EXPECT_EQ(m.corrupted.ids[j], t.ids[j]);
    }
  }
  EXPECT_EQ(labelled, 3);
}

TEST(Mlm, CorruptionSplitsEightyTenTen) {
  const auto cfg = small_config();
  const auto tokens = random_tokens(std::vector<int>(64, 7), cfg, 2);
  std::mt19937_64 rng(3);
  int masked = 0, replaced = 0, kept = 0;
  for (int t = 0; t < 300; ++t) {
    const auto m = mask_tokens_for_mlm(tokens, 0.3, cfg.vocab_size, rng);
    for (std::size_t j = 0; j < m.labels.size(); ++j) {
      if (m.labels[j] < 0) continue;
      const int c = m.corrupted.ids[j];
      if (c == token::kMask) {
        ++masked;
      } else if (c == tokens.ids[j]) {
        ++kept;  // includes random draws that hit the same word
      } else {
        ++replaced;
        EXPECT_GE(c, token::kFirstWord);
      }
    }
  }
  const double total = masked + replaced + kept;
  EXPECT_NEAR(masked / total, 0.8, 0.01);
  EXPECT_NEAR(replaced / total, 0.1 * 15.0 / 16.0, 0.01);
  EXPECT_NEAR(kept / total, 0.1 + 0.1 / 16.0, 0.01);
}

TEST(Mlm, UniformLogitsGiveLogV) {
  const std::vector<int> labels = {-1, 17, 99, -1, 3, -1};
  const auto loss = token_nll_loss(Var<double>::zeros({2, 3, 128}), std::span<const int>(labels), "mlm");
  EXPECT_NEAR(loss.item(), std::log(128.0), 1e-12);
}

TEST(Mlm, IgnoredPositionsContributeNothing) {
  auto logits = random_var<double>({1, 4, 10}, 4);
  const std::vector<int> labels = {-1, 3, -1, 7};
  const double base = token_nll_loss(logits, std::span<const int>(labels), "mlm").item();
  Var<double> handle = logits;
  for (int k = 0; k < 10; ++k) handle.mutable_value()[k] += 5.0 * k;
  for (int k = 20; k < 30; ++k) handle.mutable_value()[k] -= 3.0;
  EXPECT_EQ(token_nll_loss(logits, std::span<const int>(labels), "mlm").item(), base);
}

TEST(Mlm, NoEligibleTokensIsZeroWithDiagnostic) {
  const auto cfg = small_config();
  VlModel<double> model(cfg, 5);
  TokenBatch t{1, 2, {token::kCls, token::kEos}, {2}};
  const auto image = model.image.forward(random_images<double>(1, cfg, 6));
  testing::DiagnosticCapture capture;
  std::mt19937_64 rng(1);
  EXPECT_EQ(mlm_loss(model, t, image, rng).item(), 0.0);
  EXPECT_FALSE(capture.messages.empty());
}

TEST(Mlm, ModelLossIsBoundedNearLogVAtInit) {
  auto cfg = small_config();
  cfg.init_std = 0.02;
  VlModel<double> model(cfg, 6);
  const auto image = model.image.forward(random_images<double>(4, cfg, 7));
  std::mt19937_64 rng(2);
  const double loss = mlm_loss(model, random_tokens({5, 6, 7, 4}, cfg, 8), image, rng).item();
  EXPECT_GT(loss, 0.0);
  EXPECT_NEAR(loss, std::log(cfg.vocab_size), 0.1);
}

TEST(Plm, SplitLayout) {
  const auto cfg = small_config();
  TokenBatch t{2, 7, {1, 5, 6, 7, 8, 3, 0, 1, 9, 3, 0, 0, 0, 0}, {6, 3}};
  std::mt19937_64 rng(1);
  const auto batch = make_plm_batch(t, rng, 2);
  EXPECT_EQ(batch.split, (std::vector<int>{2, 1}));
  EXPECT_EQ(batch.prefix.width, 3);
  EXPECT_EQ(batch.prefix.ids, (std::vector<int>{1, 5, 6, 1, 9, 0}));
  EXPECT_EQ(batch.decoder_input.width, 3);
  EXPECT_EQ(batch.decoder_input.ids, (std::vector<int>{1, 7, 8, 1, 0, 0}));
  EXPECT_EQ(batch.targets, (std::vector<int>{7, 8, 3, 3, -1, -1}));
  (void)cfg;
}

TEST(Plm, SplitAtTheLastPositionPredictsOneToken) {
  TokenBatch t{1, 6, {1, 5, 6, 7, 8, 3}, {6}};
  std::mt19937_64 rng(1);
  const auto batch = make_plm_batch(t, rng, 4);  // len 5 => last split is 4
  int predicted = 0;
  for (int y : batch.targets) predicted += y >= 0;
  EXPECT_EQ(predicted, 1);
  EXPECT_EQ(batch.targets[0], token::kEos);
}

TEST(Plm, SplitPointIsUniform) {
  TokenBatch t{1, 6, {1, 5, 6, 7, 8, 3}, {6}};
  std::mt19937_64 rng(4);
  std::vector<int> counts(5, 0);
  const int draws = 20000;
  for (int i = 0; i < draws; ++i) ++counts[make_plm_batch(t, rng).split[0]];
  EXPECT_EQ(counts[0], 0);
  for (int k = 1; k <= 4; ++k) EXPECT_NEAR(counts[k] / double(draws), 0.25, 3 * std::sqrt(0.25 * 0.75 / draws));
}

TEST(Plm, UniformLogitsGiveLogVPerToken) {
  TokenBatch t{1, 6, {1, 5, 6, 7, 8, 3}, {6}};
  std::mt19937_64 rng(1);
  const auto batch = make_plm_batch(t, rng, 1);
  const auto loss = token_nll_loss(Var<double>::zeros({1, batch.decoder_input.width, 20}),
                                   std::span<const int>(batch.targets), "plm");
  EXPECT_NEAR(loss.item(), std::log(20.0), 1e-12);
}

TEST(Plm, ShortTextIsSkippedWithDiagnostic) {
  const auto cfg = small_config();
  VlModel<double> model(cfg, 9);
  TokenBatch t{1, 2, {token::kCls, token::kEos}, {2}};
  const auto image = model.image.forward(random_images<double>(1, cfg, 10));
  testing::DiagnosticCapture capture;
  std::mt19937_64 rng(1);
  EXPECT_EQ(plm_loss(model, t, image, rng).item(), 0.0);
  EXPECT_FALSE(capture.messages.empty());
}

// Overfit oracle: four fixed pairs must be memorised, then reproduced by greedy decoding.
TEST(Plm, OverfitsFourPairsAndDecodesTheSuffixes) {
  auto cfg = small_config();
  cfg.embed_dim = 16;
  cfg.init_std = 0.1;
  VlModel<float> model(cfg, 11);
  const auto images = random_images<float>(4, cfg, 12);
  const auto tokens = random_tokens({6, 7, 5, 7}, cfg, 13);
  std::mt19937_64 rng(14);
  const PlmBatch batch = make_plm_batch(tokens, rng, 2);

  const auto& params = model.params().entries();
  AdamW<float> opt(params);
  TrainConfig tc;
  tc.weight_decay = 0.0;
  const std::vector<double> lr(params.size(), 3e-3);
  double loss = 0;
  int steps = 0;
  for (; steps < 500; ++steps) {
    const auto image = model.image.forward(images);
    const auto l = plm_loss(model, batch, image);
    loss = l.item();
    if (loss < 0.05) break;
    model.params().zero_grad();
    l.backward();
    opt.step(params, std::span<const double>(lr), tc);
  }
  EXPECT_LT(loss, 0.05) << "after " << steps << " steps";

  const auto image = model.image.forward(images);
  const auto memory = model.fusion.forward(image, model.text.forward(batch.prefix));
  const auto decoded = greedy_decode(model, memory, cfg.text_slots() - 1);
  for (int b = 0; b < 4; ++b) {
    std::vector<int> want;
    for (int j = 0; j < batch.decoder_input.width; ++j) {
      const int y = batch.targets[b * batch.decoder_input.width + j];
      if (y >= 0) want.push_back(y);
    }
    EXPECT_EQ(decoded[b], want) << "row " << b;
  }
}

TEST(TotalLoss, UnweightedSum) {
  auto s = [](double v) { return Var<double>::constant({1}, {v}); };
  EXPECT_EQ(total_loss(s(1), s(2), s(3), s(4), s(5), s(6)).total.item(), 21.0);
  EXPECT_EQ(total_loss(s(0), s(0), s(0), s(0), s(0), s(0)).total.item(), 0.0);
  const auto bundle = total_loss(s(0.1), s(0.2), s(0.3), s(0.4), s(0.5), s(0.6));
  const auto v = bundle.values();
  EXPECT_EQ(v.total, ((((0.1 + 0.2) + 0.3) + 0.4) + 0.5) + 0.6);
  EXPECT_EQ(v.itm, 0.4);
}

TEST(TotalLoss, NonFiniteComponentIsNamed) {
  auto s = [](double v) { return Var<double>::constant({1}, {v}); };
  const double nan = std::numeric_limits<double>::quiet_NaN();
  try {
    total_loss(s(1), s(2), s(3), s(nan), s(5), s(INFINITY));
    FAIL() << "expected NonFiniteLossError";
  } catch (const NonFiniteLossError& e) {
    EXPECT_EQ(e.component(), "itm");
  }
  EXPECT_THROW(total_loss(s(1), s(2), s(3), s(4), s(5), Var<double>::zeros({2})), ShapeError);
}

TEST(TotalLoss, GradientIsTheSumOfComponentGradients) {
  auto x = random_var<double>({5}, 20, true);
  const auto parts = [&] {
    return std::array<Var<double>, 6>{sum(mul(x, x)), mean(x), sum(gelu(x)), sum(scale(x, 3.0)),
                                      mean(mul(x, gelu(x))), sum(log_softmax_rows(reshape(x, {1, 5})))};
  };
  auto p = parts();
  total_loss(p[0], p[1], p[2], p[3], p[4], p[5]).total.backward();
  const auto total_grad = x.grad();
  std::vector<double> summed(5, 0.0);
  for (int i = 0; i < 6; ++i) {
    x.zero_grad();
    parts()[i].backward();
    for (int j = 0; j < 5; ++j) summed[j] += x.grad()[j];
  }
  for (int j = 0; j < 5; ++j) EXPECT_NEAR(total_grad[j], summed[j], 1e-12);
}

}  // namespace
}  // namespace vlmim
