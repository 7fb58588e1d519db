// Copyright 2026 The vlmim Authors
// SPDX-License-Identifier: Apache-2.0

#include <gtest/gtest.h>

#include <cmath>
#include <filesystem>
#include <fstream>
#include <numbers>
#include <set>

#include "test_util.hpp"
#include "vlmim/checkpoint.hpp"
#include "vlmim/errors.hpp"
#include "vlmim/train.hpp"

namespace vlmim {
namespace {

using testing::corpus_config;

TrainConfig small_train() {
  TrainConfig t;
  t.batch_size = 4;
  t.train_records = 16;
  t.val_records = 4;
  return t;
}

std::filesystem::path scratch(const std::string& name) {
  const auto dir = std::filesystem::temp_directory_path() / ("vlmim_train_test_" + name);
  std::filesystem::remove_all(dir);
  std::filesystem::create_directories(dir);
  return dir;
}

template <typename T>
void expect_same_params(const std::vector<NamedTensor<T>>& a, const std::vector<NamedTensor<T>>& b) {
  ASSERT_EQ(a.size(), b.size());
  for (std::size_t i = 0; i < a.size(); ++i) {
    EXPECT_EQ(a[i].name, b[i].name);
    EXPECT_EQ(a[i].tensor.value(), b[i].tensor.value()) << a[i].name;
  }
}

TEST(LearningRate, WarmupThenCosine) {
  TrainConfig c;
  EXPECT_DOUBLE_EQ(learning_rate(c, 1.0, 0), 1.0 / 50);
  EXPECT_DOUBLE_EQ(learning_rate(c, 1.0, 24), 0.5);
  EXPECT_DOUBLE_EQ(learning_rate(c, 1.0, 49), 1.0);
  EXPECT_DOUBLE_EQ(learning_rate(c, 1.0, 50), 1.0);
  EXPECT_NEAR(learning_rate(c, 1.0, 125), 0.01 + 0.99 * 0.5, 1e-15);
  EXPECT_NEAR(learning_rate(c, 2.0, 200), 0.02, 1e-15);
  EXPECT_NEAR(learning_rate(c, 2.0, 900), 0.02, 1e-15);
  const double s = 87;
  EXPECT_NEAR(learning_rate(c, 3e-4, 87),
              3e-6 + (3e-4 - 3e-6) * 0.5 * (1 + std::cos(std::numbers::pi * (s - 50) / 150)), 1e-18);
  for (int step = 51; step < 200; ++step) EXPECT_LT(learning_rate(c, 1.0, step), learning_rate(c, 1.0, step - 1));
}

TEST(AdamW, FirstStepMatchesTheClosedForm) {
  auto w = Var<double>::leaf({2, 2}, {1.0, -2.0, 0.5, 3.0}, true);
  auto b = Var<double>::leaf({2}, {0.5, -0.5}, true);
  sum(add(mul(w, w), Var<double>::zeros({2, 2}))).backward();  // grad 2w
  sum(scale(b, 3.0)).backward();                                 // grad 3
  const std::vector<NamedTensor<double>> params = {{"w", w}, {"b", b}};
  AdamW<double> opt(params);
  TrainConfig cfg;
  const std::vector<double> lr = {0.1, 0.01};
  opt.step(params, std::span<const double>(lr), cfg);
  // After one step the bias-corrected moments are g and g^2.
  const std::vector<double> w0 = {1.0, -2.0, 0.5, 3.0};
  for (int i = 0; i < 4; ++i) {
    const double g = 2 * w0[i];
    EXPECT_NEAR(w.value()[i], w0[i] - 0.1 * (g / (std::abs(g) + 1e-8) + 0.02 * w0[i]), 1e-12);
  }
  EXPECT_NEAR(b.value()[0], 0.5 - 0.01 * (3 / (3 + 1e-8)), 1e-12);  // no decay on vectors
  EXPECT_EQ(opt.t, 1);
}

TEST(AdamW, ParameterGroups) {
  EXPECT_TRUE(is_visual_param("image_encoder.block0.attn.query.weight"));
  EXPECT_TRUE(is_visual_param("head.fc1.weight"));
  EXPECT_FALSE(is_visual_param("text_encoder.embedding"));
  EXPECT_FALSE(is_visual_param("itc.temperature"));
  EXPECT_FALSE(is_visual_param("fusion.block0.mlp.fc1.bias"));
}

TEST(SampleBatch, DeterministicWithoutReplacement) {
  auto state = TrainState<float>::create(corpus_config(), small_train(), 5);
  const auto manifest = make_corpus(1, 16, 4);
  const Vocabulary vocab;
  const auto a = sample_batch(state, manifest, vocab);
  const auto b = sample_batch(state, manifest, vocab);
  EXPECT_EQ(a.rows, b.rows);
  EXPECT_EQ(std::set<int>(a.rows.begin(), a.rows.end()).size(), 4u);
  for (int r : a.rows) EXPECT_EQ(manifest.records[r].split, "train");
  state.step = 1;
  EXPECT_NE(sample_batch(state, manifest, vocab).rows, a.rows);
}

TEST(TrainStep, ZeroLearningRateIsAFixedPoint) {
  auto tc = small_train();
  tc.lr_visual = 0;
  tc.lr_other = 0;
  auto state = TrainState<double>::create(corpus_config(), tc, 3);
  const auto manifest = make_corpus(2, 16, 4);
  const Vocabulary vocab;
  std::vector<std::vector<double>> before;
  for (const auto& p : state.model->params().entries()) before.push_back(p.tensor.value());
  const auto rec = train_step(state, sample_batch(state, manifest, vocab));
  EXPECT_EQ(state.step, 1);
  EXPECT_TRUE(std::isfinite(rec.losses.total));
  for (std::size_t i = 0; i < before.size(); ++i) {
    EXPECT_EQ(state.model->params().entries()[i].tensor.value(), before[i]) << state.model->params().entries()[i].name;
  }
  expect_same_params(state.teacher->snapshot(), student_snapshot(*state.model));
  // The center still moves: it tracks teacher logits, not parameters.
  bool center_moved = false;
  for (double c : state.teacher->center) center_moved |= c != 0.0;
  EXPECT_TRUE(center_moved);
}

TEST(TrainStep, LossBundleIsConsistentAndParametersMove) {
  auto state = TrainState<float>::create(corpus_config(), small_train(), 4);
  const auto manifest = make_corpus(3, 16, 4);
  const Vocabulary vocab;
  const auto before = state.model->params().entries().front().tensor.value();
  const auto rec = train_step(state, sample_batch(state, manifest, vocab));
  const auto& l = rec.losses;
  EXPECT_NEAR(l.total, l.cls + l.patch + l.itc + l.itm + l.mlm + l.plm, 1e-5 * l.total);
  for (double v : {l.cls, l.patch, l.itc, l.itm, l.mlm, l.plm}) EXPECT_GE(v, 0.0);
  EXPECT_NE(state.model->params().entries().front().tensor.value(), before);
  EXPECT_EQ(state.optimizer.t, 1);
  EXPECT_DOUBLE_EQ(rec.lr_visual, learning_rate(small_train(), 3e-4, 0));
}

TEST(TrainStep, NonFiniteLossAbortsBeforeAnyUpdate) {
  auto state = TrainState<float>::create(corpus_config(), small_train(), 6);
  testing::fill(state.model->mlm_head.bias, std::numeric_limits<float>::quiet_NaN());
  const auto manifest = make_corpus(4, 16, 4);
  const Vocabulary vocab;
  const auto first = state.model->params().entries().front().tensor.value();
  const auto teacher_first = state.teacher->snapshot().front().tensor.value();
  try {
    train_step(state, sample_batch(state, manifest, vocab));
    FAIL() << "expected NonFiniteLossError";
  } catch (const NonFiniteLossError& e) {
    EXPECT_EQ(e.component(), "mlm");
  }
  EXPECT_EQ(state.step, 0);
  EXPECT_EQ(state.optimizer.t, 0);
  EXPECT_EQ(state.model->params().entries().front().tensor.value(), first);
  EXPECT_EQ(state.teacher->snapshot().front().tensor.value(), teacher_first);
  for (float c : state.teacher->center) EXPECT_EQ(c, 0.0f);
}

PretrainOptions options(const std::filesystem::path& out, int steps) {
  PretrainOptions o;
  o.config = RunConfig{corpus_config(), small_train()};
  o.seed = 7;
  o.steps = steps;
  o.out = out;
  return o;
}

std::string read_file(const std::filesystem::path& p) {
  std::ifstream in(p, std::ios::binary);
  return {std::istreambuf_iterator<char>(in), {}};
}

TEST(Pretrain, SeededRunsAreIdentical) {
  const auto dir = scratch("determinism");
  const auto a = pretrain(options(dir / "a", 3));
  const auto b = pretrain(options(dir / "b", 3));
  EXPECT_EQ(read_file(dir / "a" / "log.jsonl"), read_file(dir / "b" / "log.jsonl"));
  EXPECT_EQ(a.log.size(), 3u);
  expect_same_params(a.state.model->params().entries(), b.state.model->params().entries());
  EXPECT_TRUE(std::filesystem::exists(dir / "a" / "checkpoint.bin"));
  EXPECT_TRUE(std::filesystem::exists(dir / "a" / "config.json"));
  EXPECT_TRUE(std::filesystem::exists(dir / "a" / "manifest.json"));
  std::filesystem::remove_all(dir);
}

TEST(Checkpoint, RoundTripRestoresEveryField) {
  const auto dir = scratch("roundtrip");
  const auto run = pretrain(options(dir, 2));
  const auto loaded = load_checkpoint<float>(dir / "checkpoint.bin");
  EXPECT_EQ(loaded.step, 2);
  EXPECT_EQ(loaded.seed, 7u);
  EXPECT_EQ(loaded.hash(), run.state.hash());
  EXPECT_EQ(nlohmann::json(loaded.train_cfg).dump(), nlohmann::json(run.state.train_cfg).dump());
  expect_same_params(loaded.model->params().entries(), run.state.model->params().entries());
  expect_same_params(loaded.teacher->snapshot(), run.state.teacher->snapshot());
  EXPECT_EQ(loaded.teacher->center, run.state.teacher->center);
  EXPECT_EQ(loaded.optimizer.t, run.state.optimizer.t);
  EXPECT_EQ(loaded.optimizer.m, run.state.optimizer.m);
  EXPECT_EQ(loaded.optimizer.v, run.state.optimizer.v);
  const auto header = read_checkpoint_header(dir / "checkpoint.bin");
  EXPECT_EQ(header.version, kCheckpointVersion);
  EXPECT_EQ(header.config_hash, config_hash(corpus_config()));
  std::filesystem::remove_all(dir);
}

TEST(Checkpoint, ResumeContinuesBitIdentically) {
  const auto dir = scratch("resume");
  const auto straight = pretrain(options(dir / "straight", 3));
  pretrain(options(dir / "split", 2));
  auto resumed = options(dir / "split", 3);
  resumed.resume = dir / "split" / "checkpoint.bin";
  const auto cont = pretrain(resumed);
  ASSERT_EQ(cont.log.size(), 1u);
  EXPECT_EQ(nlohmann::json(cont.log[0]).dump(), nlohmann::json(straight.log[2]).dump());
  EXPECT_EQ(read_file(dir / "split" / "log.jsonl"), read_file(dir / "straight" / "log.jsonl"));
  expect_same_params(cont.state.model->params().entries(), straight.state.model->params().entries());
  expect_same_params(cont.state.teacher->snapshot(), straight.state.teacher->snapshot());
  std::filesystem::remove_all(dir);
}

TEST(Checkpoint, HashMismatchNeedsForce) {
  const auto dir = scratch("hash");
  pretrain(options(dir, 1));
  auto other = corpus_config();
  other.mask_ratio = 0.45;
  EXPECT_THROW(load_checkpoint<float>(dir / "checkpoint.bin", &other), CheckpointError);
  const auto forced = load_checkpoint<float>(dir / "checkpoint.bin", &other, true);
  EXPECT_EQ(forced.model_cfg.mask_ratio, corpus_config().mask_ratio);
  auto resumed = options(dir, 2);
  resumed.config.model = other;
  resumed.resume = dir / "checkpoint.bin";
  EXPECT_THROW(pretrain(resumed), CheckpointError);
  std::filesystem::remove_all(dir);
}

TEST(Checkpoint, StructuralAndContainerErrors) {
  const auto dir = scratch("errors");
  pretrain(options(dir, 1));
  const auto bytes = read_file(dir / "checkpoint.bin");
  std::ofstream(dir / "truncated.bin", std::ios::binary) << bytes.substr(0, bytes.size() / 2);
  EXPECT_THROW(load_checkpoint<float>(dir / "truncated.bin"), CheckpointError);
  std::ofstream(dir / "garbage.bin", std::ios::binary) << std::string(64, 'x');
  EXPECT_THROW(load_checkpoint<float>(dir / "garbage.bin"), CheckpointError);
  EXPECT_THROW(load_checkpoint<float>(dir / "missing.bin"), CheckpointError);
  EXPECT_THROW(load_checkpoint<double>(dir / "checkpoint.bin"), CheckpointError);  // scalar width
  std::filesystem::remove_all(dir);
}

}  // namespace
}  // namespace vlmim
