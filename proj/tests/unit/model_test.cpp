// Copyright 2026 The vlmim Authors
// SPDX-License-Identifier: Apache-2.0

#include <gtest/gtest.h>

#include "test_util.hpp"
#include "vlmim/errors.hpp"
#include "vlmim/model.hpp"

namespace vlmim {
namespace {

using testing::fill;
using testing::random_images;
using testing::random_tokens;
using testing::small_config;

std::vector<double> row(const Var<double>& x, int b, int s) {
  const int slots = x.dim(1);
  const int d = x.dim(2);
  const auto& v = x.value();
  const auto first = v.begin() + (static_cast<std::ptrdiff_t>(b) * slots + s) * d;
  return {first, first + d};
}

TEST(Patchify, GridArithmetic) {
  ModelConfig c;
  EXPECT_EQ(c.num_patches(), 16);
  VlModel<double> model(small_config(), 1);
  const auto images = random_images<double>(2, small_config(), 3);
  const auto p = model.image.patchify(images);
  EXPECT_EQ(p.shape(), (Shape{2, 4, 8}));
}

TEST(Patchify, ZeroImageGivesBias) {
  const auto cfg = small_config();
  VlModel<double> model(cfg, 2);
  fill(model.image.position, 0.0);
  const auto out = model.image.patchify(ImageBatch<double>::zeros(1, cfg));
  for (int i = 0; i < cfg.num_patches(); ++i) EXPECT_EQ(row(out, 0, i), model.image.patch_proj.bias.value());
}

TEST(Patchify, PermutingPatchesPermutesEmbeddings) {
  const auto cfg = small_config();
  VlModel<double> model(cfg, 3);
  auto images = random_images<double>(1, cfg, 4);
  const auto before = model.image.patch_embed(images);
  // Swap the top-left and bottom-right 4x4 patches in every channel.
  auto swapped = images;
  for (int c = 0; c < 3; ++c) {
    for (int y = 0; y < 4; ++y) {
      for (int x = 0; x < 4; ++x) {
        std::swap(swapped.pixels[(c * 8 + y) * 8 + x], swapped.pixels[(c * 8 + y + 4) * 8 + x + 4]);
      }
    }
  }
  const auto after = model.image.patch_embed(swapped);
  EXPECT_EQ(row(after, 0, 0), row(before, 0, 3));
  EXPECT_EQ(row(after, 0, 3), row(before, 0, 0));
  EXPECT_EQ(row(after, 0, 1), row(before, 0, 1));
  EXPECT_EQ(row(after, 0, 2), row(before, 0, 2));
}

TEST(Patchify, PatchLayoutIsChannelRowColumn) {
  ModelConfig cfg = small_config();
  ImageBatch<double> images = ImageBatch<double>::zeros(1, cfg);
  for (std::size_t i = 0; i < images.pixels.size(); ++i) images.pixels[i] = static_cast<double>(i);
  const auto patches = extract_patches(images, cfg);
  // Patch 1 is the top-right block: channel 0, row 0, columns 4..7 first.
  EXPECT_EQ(patches[48 + 0], 4.0);
  EXPECT_EQ(patches[48 + 3], 7.0);
  EXPECT_EQ(patches[48 + 4], 12.0);
  EXPECT_EQ(patches[48 + 16], 64.0 + 4.0);
}

TEST(EncodeImage, RejectsBadImagesAndMasks) {
  const auto cfg = small_config();
  VlModel<double> model(cfg, 4);
  auto images = random_images<double>(1, cfg, 5);
  images.height = 4;
  EXPECT_THROW(model.image.forward(images), ConfigError);
  const auto good = random_images<double>(1, cfg, 5);
  std::vector<PatchMask> masks(1);
  masks[0].indices = {4};
  EXPECT_THROW(model.image.forward(good, nullptr, &masks), InputError);
  std::vector<PatchMask> two(2);
  EXPECT_THROW(model.image.forward(good, nullptr, &two), InputError);
}

TEST(EncodeImage, MaskedSlotsCarryTheMaskToken) {
  const auto cfg = small_config();
  VlModel<double> model(cfg, 5);
  const auto images = random_images<double>(2, cfg, 6);
  std::vector<PatchMask> masks(2);
  masks[0].indices = {1, 3};
  masks[1].indices = {0};
  const auto plain = model.image.embed(images, nullptr);
  const auto masked = model.image.embed(images, &masks);
  const auto& pos = model.image.position.value();
  const auto& tok = model.image.mask_token.value();
  for (int b = 0; b < 2; ++b) {
    for (int i = 0; i < cfg.num_patches(); ++i) {
      const auto got = row(masked, b, i + 1);
      if (masks[b].contains(i)) {
        for (int k = 0; k < cfg.embed_dim; ++k) EXPECT_EQ(got[k], tok[k] + pos[(i + 1) * cfg.embed_dim + k]);
      } else {
        EXPECT_EQ(got, row(plain, b, i + 1));
      }
    }
    EXPECT_EQ(row(masked, b, 0), row(plain, b, 0));
  }
}

TEST(EncodeImage, TextAbsentIsThePlainPass) {
  const auto cfg = small_config();
  VlModel<double> model(cfg, 6);
  const auto images = random_images<double>(2, cfg, 7);
  EXPECT_EQ(model.image.forward(images).values.value(), model.image.forward(images, nullptr).values.value());
}

TEST(EncodeImage, LayersBeforeInjectionAreUntouched) {
  auto cfg = small_config();
  cfg.image_layers = 4;
  cfg.inject_start_layer = 3;
  VlModel<double> model(cfg, 7);
  const auto images = random_images<double>(2, cfg, 8);
  const auto text = model.text.forward(random_tokens({5, 3}, cfg, 9));
  std::vector<Var<double>> with, without;
  const auto a = model.image.forward(images, &text, nullptr, &with);
  const auto b = model.image.forward(images, nullptr, nullptr, &without);
  ASSERT_EQ(with.size(), 5u);
  ASSERT_EQ(without.size(), 5u);
  // Taps hold the input of layers 1..4 and the pre-norm output.
  for (int l = 0; l < 3; ++l) EXPECT_EQ(with[l].value(), without[l].value()) << "layer input " << l + 1;
  EXPECT_NE(with[3].value(), without[3].value());
  EXPECT_NE(a.values.value(), b.values.value());
  EXPECT_EQ(a.slots(), 1 + cfg.num_patches());
}

TEST(EncodeImage, DegenerateTextInjectionMatchesTextFreePass) {
  const auto cfg = small_config();
  VlModel<double> model(cfg, 8);
  const auto images = random_images<double>(2, cfg, 9);
  FeatureSequence<double> text{Var<double>::zeros({2, cfg.text_slots(), cfg.embed_dim}),
                               std::vector<std::uint8_t>(2 * cfg.text_slots(), 0)};
  const auto with = model.image.forward(images, &text).values.value();
  const auto without = model.image.forward(images).values.value();
  ASSERT_EQ(with.size(), without.size());
  for (std::size_t i = 0; i < with.size(); ++i) EXPECT_NEAR(with[i], without[i], 1e-12);
}

TEST(EncodeImage, TextWidthMismatchIsAShapeError) {
  const auto cfg = small_config();
  VlModel<double> model(cfg, 9);
  const auto images = random_images<double>(1, cfg, 10);
  FeatureSequence<double> narrow{Var<double>::zeros({1, 3, cfg.embed_dim / 2}), {}};
  EXPECT_THROW(model.image.forward(images, &narrow), ShapeError);
  FeatureSequence<double> wrong_batch{Var<double>::zeros({2, 3, cfg.embed_dim}), {}};
  EXPECT_THROW(model.image.forward(images, &wrong_batch), ShapeError);
}

TEST(EncodeImage, InjectStartOutOfRangeIsAConfigError) {
  auto cfg = small_config();
  cfg.inject_start_layer = cfg.image_layers + 1;
  EXPECT_THROW((VlModel<double>(cfg, 1)), ConfigError);
  cfg.inject_start_layer = 0;
  EXPECT_THROW((VlModel<double>(cfg, 1)), ConfigError);
}

TEST(EncodeText, DuplicateRowsGiveDuplicateOutputs) {
  const auto cfg = small_config();
  VlModel<double> model(cfg, 10);
  auto tokens = random_tokens({4, 4}, cfg, 11);
  std::copy(tokens.ids.begin(), tokens.ids.begin() + tokens.width, tokens.ids.begin() + tokens.width);
  const auto out = model.text.forward(tokens).values;
  for (int s = 0; s < tokens.width; ++s) EXPECT_EQ(row(out, 0, s), row(out, 1, s));
}

TEST(EncodeText, SingleWordTextHasTwoSlots) {
  auto cfg = small_config();
  cfg.max_text_len = 1;
  VlModel<double> model(cfg, 11);
  TokenBatch t{1, 2, {token::kCls, 5}, {2}};
  EXPECT_EQ(model.text.forward(t).slots(), 2);
}

TEST(EncodeText, ExtraPaddingLeavesRealSlotsUnchanged) {
  const auto cfg = small_config();
  VlModel<double> model(cfg, 12);
  TokenBatch narrow{1, 4, {token::kCls, 7, 9, token::kEos}, {4}};
  TokenBatch wide{1, 7, {token::kCls, 7, 9, token::kEos, token::kPad, token::kPad, token::kPad}, {4}};
  const auto a = model.text.forward(narrow).values;
  const auto b = model.text.forward(wide).values;
  for (int s = 0; s < 4; ++s) {
    const auto ra = row(a, 0, s);
    const auto rb = row(b, 0, s);
    for (int k = 0; k < cfg.embed_dim; ++k) EXPECT_NEAR(ra[k], rb[k], 1e-12);
  }
}

TEST(EncodeText, RejectsOutOfVocabularyIds) {
  const auto cfg = small_config();
  VlModel<double> model(cfg, 13);
  TokenBatch t{1, 3, {token::kCls, cfg.vocab_size, token::kEos}, {3}};
  EXPECT_THROW(model.text.forward(t), InputError);
  t.ids[1] = -1;
  EXPECT_THROW(model.text.forward(t), InputError);
}

TEST(Fuse, ShapeContractAndBatchMismatch) {
  const auto cfg = small_config();
  VlModel<double> model(cfg, 14);
  const auto image = model.image.forward(random_images<double>(3, cfg, 15));
  const auto text = model.text.forward(random_tokens({3, 5, 7}, cfg, 16));
  const auto fused = model.fusion.forward(image, text);
  EXPECT_EQ(fused.values.shape(), (Shape{3, cfg.text_slots(), cfg.embed_dim}));
  const auto two = model.image.forward(random_images<double>(2, cfg, 15));
  EXPECT_THROW(model.fusion.forward(two, text), ShapeError);
}

TEST(Fuse, ZeroCrossProjectionLeavesTheTextSelfPath) {
  const auto cfg = small_config();
  VlModel<double> model(cfg, 15);
  for (auto& block : model.fusion.blocks) {
    fill(block.cross_attn.out.weight, 0.0);
    fill(block.cross_attn.out.bias, 0.0);
  }
  const auto image = model.image.forward(random_images<double>(2, cfg, 16));
  const auto text = model.text.forward(random_tokens({4, 7}, cfg, 17));
  // Oracle: the blocks without their cross-attention term.
  Var<double> h = text.values;
  for (const auto& block : model.fusion.blocks) {
    const auto n = block.ln_self(h);
    h = add(h, block.self_attn(n, n, std::span<const std::uint8_t>(text.valid), false));
    h = add(h, block.mlp(block.ln_mlp(h)));
  }
  EXPECT_EQ(model.fusion.forward(image, text).values.value(), model.fusion.norm(h).value());
}

TEST(Fuse, SwappingImagesSwapsFusedRows) {
  const auto cfg = small_config();
  VlModel<double> model(cfg, 16);
  const auto images = random_images<double>(2, cfg, 17);
  TokenBatch tokens = random_tokens({5, 5}, cfg, 18);
  std::copy(tokens.ids.begin(), tokens.ids.begin() + tokens.width, tokens.ids.begin() + tokens.width);
  const auto text = model.text.forward(tokens);
  const std::vector<int> swap = {1, 0};
  const auto a = model.fusion.forward(model.image.forward(images), text).values;
  const auto b = model.fusion.forward(model.image.forward(images.select(swap)), text).values;
  for (int s = 0; s < tokens.width; ++s) {
    EXPECT_EQ(row(a, 0, s), row(b, 1, s));
    EXPECT_EQ(row(a, 1, s), row(b, 0, s));
  }
}

TEST(Decode, FutureTokensDoNotChangeEarlierLogits) {
  const auto cfg = small_config();
  VlModel<double> model(cfg, 17);
  const auto image = model.image.forward(random_images<double>(1, cfg, 18));
  const auto text = model.text.forward(random_tokens({6}, cfg, 19));
  const auto memory = model.fusion.forward(image, text);
  TokenBatch a{1, 5, {token::kCls, 5, 6, 7, 8}, {5}};
  TokenBatch b = a;
  b.ids[3] = 12;
  b.ids[4] = 13;
  const auto la = model.decoder.forward(memory, a);
  const auto lb = model.decoder.forward(memory, b);
  EXPECT_EQ(la.shape(), (Shape{1, 5, cfg.vocab_size}));
  for (int j = 0; j < 3; ++j) EXPECT_EQ(row(la, 0, j), row(lb, 0, j));
  EXPECT_NE(row(la, 0, 3), row(lb, 0, 3));
}

TEST(Decode, EmptyPrefixIsAnInputError) {
  const auto cfg = small_config();
  VlModel<double> model(cfg, 18);
  const auto memory = model.text.forward(random_tokens({3}, cfg, 20));
  TokenBatch empty{1, 0, {}, {0}};
  EXPECT_THROW(model.decoder.forward(memory, empty), InputError);
}

TEST(VlModel, SameSeedSameParameters) {
  const auto cfg = small_config();
  VlModel<float> a(cfg, 42), b(cfg, 42), c(cfg, 43);
  ASSERT_EQ(a.params().entries().size(), b.params().entries().size());
  bool any_diff = false;
  for (std::size_t i = 0; i < a.params().entries().size(); ++i) {
    EXPECT_EQ(a.params().entries()[i].tensor.value(), b.params().entries()[i].tensor.value());
    any_diff |= a.params().entries()[i].tensor.value() != c.params().entries()[i].tensor.value();
  }
  EXPECT_TRUE(any_diff);
  const auto images = random_images<float>(2, cfg, 1);
  EXPECT_EQ(a.image.forward(images).values.value(), b.image.forward(images).values.value());
}

TEST(VlModel, TinyInstanceStaysUnderOneThousandParameters) {
  VlModel<double> model(ModelConfig::tiny(), 1);
  EXPECT_LE(model.params().scalar_count(), 1000u);
}

}  // namespace
}  // namespace vlmim
