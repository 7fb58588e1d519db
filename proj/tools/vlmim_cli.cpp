// Copyright 2026 The vlmim Authors
// SPDX-License-Identifier: Apache-2.0

// Command-line front end: pretrain, eval-retrieval, visualize-patterns,
// mask-debug.

#include <cstdint>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <optional>
#include <string>

#include <CLI11.hpp>
#include <nlohmann/json.hpp>

#include "vlmim/checkpoint.hpp"
#include "vlmim/errors.hpp"
#include "vlmim/eval.hpp"
#include "vlmim/train.hpp"

namespace fs = std::filesystem;
using namespace vlmim;

namespace {

struct LoadArgs {
  std::string ckpt;
  std::string config;
  bool force = false;
};

void add_load_flags(CLI::App* cmd, LoadArgs& a) {
  cmd->add_option("--ckpt", a.ckpt, "Checkpoint file")->required()->check(CLI::ExistingFile);
  cmd->add_option("--config", a.config, "Refuse the checkpoint unless its config hash matches this config")
      ->check(CLI::ExistingFile);
  cmd->add_flag("--force", a.force, "Load even when the config hash does not match");
}

TrainState<float> load(const LoadArgs& a) {
  std::optional<ModelConfig> expected;
  if (!a.config.empty()) expected = load_run_config(a.config).model;
  return load_checkpoint<float>(a.ckpt, expected ? &*expected : nullptr, a.force);
}

DatasetManifest corpus_of(const TrainState<float>& s) {
  return make_corpus(s.train_cfg.corpus_seed, s.train_cfg.train_records, s.train_cfg.val_records);
}

int run_pretrain(const std::string& config, std::uint64_t seed, int steps, const std::string& out,
                 const std::string& resume, bool force, bool quiet) {
  PretrainOptions opt;
  opt.config = config.empty() ? RunConfig{} : load_run_config(config);
  opt.seed = seed;
  opt.steps = steps;
  opt.out = out;
  opt.resume = resume;
  opt.force = force;
  if (!quiet) {
    opt.on_step = [](const StepRecord& r) {
      if (r.step % 10 == 0) std::cerr << nlohmann::json(r).dump() << '\n';
    };
  }
  const PretrainResult result = pretrain(opt);
  const Vocabulary vocab;
  const DatasetManifest manifest = corpus_of(result.state);
  nlohmann::json summary = {{"steps", result.state.step}, {"checkpoint", (fs::path(out) / "checkpoint.bin").string()}};
  if (!result.log.empty()) summary["final_loss"] = result.log.back().losses;
  if (!manifest.split_indices("val").empty()) {
    summary["val_retrieval"] = eval_retrieval(*result.state.model, manifest, "val", vocab);
  }
  std::cout << summary.dump(2) << '\n';
  return 0;
}

int run_eval(const LoadArgs& a, const std::string& split, int rerank) {
  const TrainState<float> state = load(a);
  const DatasetManifest manifest = corpus_of(state);
  const Vocabulary vocab;
  nlohmann::json out = eval_retrieval(*state.model, manifest, split, vocab, rerank);
  out["split"] = split;
  out["step"] = state.step;
  out["rerank"] = rerank;
  std::cout << out.dump(2) << '\n';
  return 0;
}

int run_visualize(const LoadArgs& a, const std::string& out_dir, const std::string& split) {
  const TrainState<float> state = load(a);
  const DatasetManifest manifest = corpus_of(state);
  const auto rows = manifest.split_indices(split);
  if (rows.empty()) throw InputError("split '" + split + "' is empty");
  const PatternReport report = pattern_report(*state.teacher, manifest, rows);
  fs::create_directories(out_dir);
  std::ofstream(fs::path(out_dir) / "patterns.json") << nlohmann::json(report).dump() << '\n';
  {
    std::ofstream layouts(fs::path(out_dir) / "layouts.txt");
    for (std::size_t i = 0; i < report.codes.size(); ++i) {
      layouts << "# record " << report.records[i] << ": " << manifest.records[report.records[i]].caption << '\n'
              << report.layout(static_cast<int>(i)) << '\n';
    }
  }
  std::ofstream(fs::path(out_dir) / "layouts.ppm", std::ios::binary) << layout_ppm(report);
  std::cout << nlohmann::json{{"purity", report.purity},
                              {"codes_used", report.members.size()},
                              {"images", report.codes.size()},
                              {"out", out_dir}}
                   .dump(2)
            << '\n';
  return 0;
}

int run_mask_debug(const LoadArgs& a, int image_idx, std::uint64_t seed) {
  const TrainState<float> state = load(a);
  const DatasetManifest manifest = corpus_of(state);
  if (image_idx < 0 || image_idx >= static_cast<int>(manifest.records.size())) {
    throw InputError("image index " + std::to_string(image_idx) + " outside [0, " +
                     std::to_string(manifest.records.size()) + ")");
  }
  const Vocabulary vocab;
  const std::vector<int> rows = {image_idx};
  const ImageBatch<float> images = make_image_batch<float>(manifest, rows, state.model_cfg);
  const TokenBatch tokens = make_token_batch(manifest, rows, vocab, state.model_cfg);
  NoGradGuard no_grad;
  const FeatureSequence<float> text = state.model->text.forward(tokens);
  std::mt19937_64 rng(seed);
  const PatchMask mask = select_masks(*state.model, images, text, rng).front();
  const auto& record = manifest.records[static_cast<std::size_t>(image_idx)];
  nlohmann::json out = {{"image_idx", image_idx},
                        {"caption", record.caption},
                        {"split", record.split},
                        {"strategy", to_string(state.model_cfg.mask_strategy)},
                        {"grid", state.model_cfg.grid()},
                        {"ratio", state.model_cfg.mask_ratio},
                        {"count", mask.count},
                        {"indices", mask.indices},
                        {"probs", mask.probs},
                        {"patch_labels", patch_labels(record, state.model_cfg)}};
  std::cout << out.dump(2) << '\n';
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Semantic masked-image-modeling vision-language pretraining"};
  app.require_subcommand(1);

  std::string config, out, resume;
  std::uint64_t seed = 0;
  int steps = 200;
  bool force = false, quiet = false;
  auto* pre = app.add_subcommand("pretrain", "Train on the synthetic corpus");
  pre->add_option("--config", config, "JSON config (ModelConfig keys, optional \"train\" object)")
      ->check(CLI::ExistingFile);
  pre->add_option("--seed", seed, "Run seed")->required();
  pre->add_option("--steps", steps, "Train until this step count")->required()->check(CLI::NonNegativeNumber);
  pre->add_option("--out", out, "Output directory")->required();
  pre->add_option("--resume", resume, "Continue from this checkpoint")->check(CLI::ExistingFile);
  pre->add_flag("--force", force, "Resume even when the config hash does not match");
  pre->add_flag("--quiet", quiet, "No progress lines on stderr");

  LoadArgs eval_args;
  std::string split = "val";
  int rerank = 0;
  auto* ev = app.add_subcommand("eval-retrieval", "Image-text retrieval recall on a split");
  add_load_flags(ev, eval_args);
  ev->add_option("--split", split, "train or val")->required();
  ev->add_option("--rerank", rerank, "Rerank the top K candidates with the match head")->check(CLI::NonNegativeNumber);

  LoadArgs vis_args;
  std::string vis_out, vis_split = "train";
  auto* vis = app.add_subcommand("visualize-patterns", "Patch code clusters and layouts");
  add_load_flags(vis, vis_args);
  vis->add_option("--out", vis_out, "Output directory")->required();
  vis->add_option("--split", vis_split, "train or val");

  LoadArgs mask_args;
  int image_idx = 0;
  std::uint64_t mask_seed = 0;
  auto* md = app.add_subcommand("mask-debug", "Masking probabilities and the drawn mask for one image");
  add_load_flags(md, mask_args);
  md->add_option("--image-idx", image_idx, "Manifest record index")->required();
  md->add_option("--seed", mask_seed, "Sampling seed");

  CLI11_PARSE(app, argc, argv);
  try {
    if (*pre) return run_pretrain(config, seed, steps, out, resume, force, quiet);
    if (*ev) return run_eval(eval_args, split, rerank);
    if (*vis) return run_visualize(vis_args, vis_out, vis_split);
    if (*md) return run_mask_debug(mask_args, image_idx, mask_seed);
  } catch (const vlmim::Error& e) {
    std::cerr << "error: " << e.what() << '\n';
    return 2;
  } catch (const std::exception& e) {
    std::cerr << "fatal: " << e.what() << '\n';
    return 3;
  }
  return 1;
}
