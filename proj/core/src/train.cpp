// Copyright 2026 The vlmim Authors
// SPDX-License-Identifier: Apache-2.0

#include "vlmim/train.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <numbers>

#include "vlmim/checkpoint.hpp"
#include "vlmim/errors.hpp"

namespace vlmim {

void TrainConfig::validate() const {
  auto check = [](bool ok, const char* what) {
    if (!ok) throw ConfigError(what);
  };
  check(batch_size >= 1, "batch_size must be positive");
  check(lr_visual >= 0 && lr_other >= 0, "learning rates must be non-negative");
  check(weight_decay >= 0, "weight_decay must be non-negative");
  check(beta1 >= 0 && beta1 < 1 && beta2 >= 0 && beta2 < 1, "adam betas must lie in [0, 1)");
  check(adam_eps > 0, "adam_eps must be positive");
  check(warmup_steps >= 0 && schedule_steps >= 1, "schedule lengths are invalid");
  check(final_lr_ratio >= 0 && final_lr_ratio <= 1, "final_lr_ratio must lie in [0, 1]");
  check(train_records >= 2 && val_records >= 0 && train_records + val_records >= 8, "corpus sizes are invalid");
}

void to_json(nlohmann::json& j, const TrainConfig& c) {
  j = nlohmann::json{{"batch_size", c.batch_size},
                     {"lr_visual", c.lr_visual},
                     {"lr_other", c.lr_other},
                     {"weight_decay", c.weight_decay},
                     {"beta1", c.beta1},
                     {"beta2", c.beta2},
                     {"adam_eps", c.adam_eps},
                     {"warmup_steps", c.warmup_steps},
                     {"schedule_steps", c.schedule_steps},
                     {"final_lr_ratio", c.final_lr_ratio},
                     {"train_records", c.train_records},
                     {"val_records", c.val_records},
                     {"corpus_seed", c.corpus_seed},
                     {"augment", c.augment}};
}

void from_json(const nlohmann::json& j, TrainConfig& c) {
  if (!j.is_object()) throw ConfigError("train config must be an object");
  try {
    for (auto it = j.begin(); it != j.end(); ++it) {
      const std::string& k = it.key();
      if (k == "batch_size") c.batch_size = it->get<int>();
      else if (k == "lr_visual") c.lr_visual = it->get<double>();
      else if (k == "lr_other") c.lr_other = it->get<double>();
      else if (k == "weight_decay") c.weight_decay = it->get<double>();
      else if (k == "beta1") c.beta1 = it->get<double>();
      else if (k == "beta2") c.beta2 = it->get<double>();
      else if (k == "adam_eps") c.adam_eps = it->get<double>();
      else if (k == "warmup_steps") c.warmup_steps = it->get<int>();
      else if (k == "schedule_steps") c.schedule_steps = it->get<int>();
      else if (k == "final_lr_ratio") c.final_lr_ratio = it->get<double>();
      else if (k == "train_records") c.train_records = it->get<int>();
      else if (k == "val_records") c.val_records = it->get<int>();
      else if (k == "corpus_seed") c.corpus_seed = it->get<std::uint64_t>();
      else if (k == "augment") c.augment = it->get<AugmentConfig>();
      else throw ConfigError("unknown train config key '" + k + "'");
    }
  } catch (const nlohmann::json::exception& e) {
    throw ConfigError(std::string("train config: ") + e.what());
  }
  c.validate();
}

RunConfig parse_run_config(const nlohmann::json& j) {
  if (!j.is_object()) throw ConfigError("config file must hold a JSON object");
  RunConfig rc;
  nlohmann::json model = j;
  if (auto it = model.find("train"); it != model.end()) {
    rc.train = it->get<TrainConfig>();
    model.erase("train");
  }
  rc.model = model.get<ModelConfig>();
  rc.model.validate();
  return rc;
}

RunConfig load_run_config(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw ConfigError("cannot open config file " + path.string());
  nlohmann::json j;
  try {
    j = nlohmann::json::parse(in);
  } catch (const nlohmann::json::exception& e) {
    throw ConfigError("config file " + path.string() + ": " + e.what());
  }
  return parse_run_config(j);
}

nlohmann::json to_json(const RunConfig& rc) {
  nlohmann::json j = rc.model;
  j["train"] = rc.train;
  return j;
}

double learning_rate(const TrainConfig& cfg, double peak, std::int64_t step) {
  if (step < cfg.warmup_steps) return peak * static_cast<double>(step + 1) / cfg.warmup_steps;
  const double span = std::max(1, cfg.schedule_steps - cfg.warmup_steps);
  const double progress = std::min(1.0, static_cast<double>(step - cfg.warmup_steps) / span);
  const double floor = peak * cfg.final_lr_ratio;
  return floor + (peak - floor) * 0.5 * (1.0 + std::cos(std::numbers::pi * progress));
}

bool is_visual_param(const std::string& name) {
  return name.starts_with(kImageEncoderPrefix) || name.starts_with(kHeadPrefix);
}

template <typename T>
AdamW<T>::AdamW(const std::vector<NamedTensor<T>>& params) {
  for (const auto& p : params) {
    m.emplace_back(p.tensor.size(), T(0));
    v.emplace_back(p.tensor.size(), T(0));
  }
}

template <typename T>
void AdamW<T>::step(const std::vector<NamedTensor<T>>& params, std::span<const double> lr, const TrainConfig& cfg) {
  if (params.size() != m.size() || lr.size() != params.size()) throw StructuralError("optimizer / parameter mismatch");
  ++t;
  const T b1 = static_cast<T>(cfg.beta1);
  const T b2 = static_cast<T>(cfg.beta2);
  const T bc1 = static_cast<T>(1.0 - std::pow(cfg.beta1, static_cast<double>(t)));
  const T bc2 = static_cast<T>(1.0 - std::pow(cfg.beta2, static_cast<double>(t)));
  const T eps = static_cast<T>(cfg.adam_eps);
  for (std::size_t i = 0; i < params.size(); ++i) {
    Var<T> handle = params[i].tensor;
    auto& p = handle.mutable_value();
    const auto& g = params[i].tensor.grad();
    const bool has_grad = g.size() == p.size();
    const T rate = static_cast<T>(lr[i]);
    const T decay = params[i].tensor.rank() >= 2 ? static_cast<T>(cfg.weight_decay) : T(0);
    auto& mi = m[i];
    auto& vi = v[i];
    for (std::size_t j = 0; j < p.size(); ++j) {
      const T gj = has_grad ? g[j] : T(0);
      mi[j] = b1 * mi[j] + (T(1) - b1) * gj;
      vi[j] = b2 * vi[j] + (T(1) - b2) * gj * gj;
      const T update = (mi[j] / bc1) / (std::sqrt(vi[j] / bc2) + eps) + decay * p[j];
      p[j] -= rate * update;
    }
  }
}

void to_json(nlohmann::json& j, const StepRecord& r) {
  j = nlohmann::json{{"step", r.step}, {"lr_visual", r.lr_visual}, {"lr_other", r.lr_other}, {"loss", r.losses}};
}

template <typename T>
TrainState<T> TrainState<T>::create(const ModelConfig& model_cfg, const TrainConfig& train_cfg, std::uint64_t seed) {
  model_cfg.validate();
  train_cfg.validate();
  TrainState s;
  s.model_cfg = model_cfg;
  s.train_cfg = train_cfg;
  s.seed = seed;
  s.model = std::make_unique<VlModel<T>>(model_cfg, seed);
  s.teacher = std::make_unique<TeacherState<T>>(*s.model);
  s.optimizer = AdamW<T>(s.model->params().entries());
  return s;
}

std::mt19937_64 step_rng(std::uint64_t seed, std::int64_t step) {
  return std::mt19937_64(mix_seed(seed, static_cast<std::uint64_t>(step)));
}

template <typename T>
TrainBatch<T> sample_batch(const TrainState<T>& state, const DatasetManifest& manifest, const Vocabulary& vocab) {
  std::vector<int> pool = manifest.split_indices("train");
  if (pool.empty()) throw InputError("sample_batch: manifest has no train records");
  std::mt19937_64 rng(mix_seed(mix_seed(state.seed, static_cast<std::uint64_t>(state.step)), 0xba7c4ULL));
  const std::size_t take = std::min(pool.size(), static_cast<std::size_t>(state.train_cfg.batch_size));
  for (std::size_t i = 0; i < take; ++i) {
    std::uniform_int_distribution<std::size_t> pick(i, pool.size() - 1);
    std::swap(pool[i], pool[pick(rng)]);
  }
  pool.resize(take);
  TrainBatch<T> b;
  b.rows = pool;
  b.images = make_image_batch<T>(manifest, pool, state.model_cfg);
  b.tokens = make_token_batch(manifest, pool, vocab, state.model_cfg);
  return b;
}

template <typename T>
StepRecord train_step(TrainState<T>& state, const TrainBatch<T>& batch) {
  const ModelConfig& cfg = state.model_cfg;
  const TrainConfig& tc = state.train_cfg;
  VlModel<T>& model = *state.model;
  TeacherState<T>& teacher = *state.teacher;
  std::mt19937_64 rng = step_rng(state.seed, state.step);

  const ViewPair<T> views = augment_two_views(batch.images, tc.augment, rng);
  const MimResult<T> mim = mim_step(views, batch.tokens, model, teacher, rng);

  const Var<T> temperature = model.contrastive_temperature();
  const Var<T> image_embed = model.image_embedding(mim.image);
  const Var<T> text_embed = model.text_embedding(mim.text);
  const Var<T> itc = itc_loss(image_embed, text_embed, temperature);

  const auto sim = contrastive_similarity(image_embed, text_embed, static_cast<double>(temperature.item()));
  const ItmNegatives negatives = sample_itm_negatives(sim, batch.tokens.batch, cfg.itm_negatives, rng);
  const ItmBatch<T> itm_batch = itm_forward(model, mim.image, mim.text, negatives);
  const Var<T> itm = itm_loss(itm_batch.logits, std::span<const T>(itm_batch.labels));

  const Var<T> mlm = mlm_loss(model, batch.tokens, mim.image, rng);
  const Var<T> plm = plm_loss(model, batch.tokens, mim.image, rng);

  const LossBundle<T> bundle = total_loss(mim.loss_cls, mim.loss_patch, itc, itm, mlm, plm);

  model.params().zero_grad();
  bundle.total.backward();

  StepRecord rec;
  rec.step = state.step;
  rec.lr_visual = learning_rate(tc, tc.lr_visual, state.step);
  rec.lr_other = learning_rate(tc, tc.lr_other, state.step);
  rec.losses = bundle.values();

  const auto& params = model.params().entries();
  std::vector<double> rates;
  rates.reserve(params.size());
  for (const auto& p : params) rates.push_back(is_visual_param(p.name) ? rec.lr_visual : rec.lr_other);
  state.optimizer.step(params, rates, tc);

  ema_update(teacher, student_snapshot(model), cfg.momentum);
  if (cfg.centering) update_center(teacher, std::span<const T>(mim.teacher_cls_logits), cfg.center_momentum);
  ++state.step;
  return rec;
}

PretrainResult pretrain(const PretrainOptions& options) {
  const RunConfig& rc = options.config;
  rc.model.validate();
  rc.train.validate();
  const Vocabulary vocab;
  if (vocab.size() > rc.model.vocab_size) {
    throw ConfigError("vocab_size " + std::to_string(rc.model.vocab_size) + " is below the corpus vocabulary size " +
                      std::to_string(vocab.size()));
  }
  const DatasetManifest manifest = make_corpus(rc.train.corpus_seed, rc.train.train_records, rc.train.val_records);

  PretrainResult result{options.resume.empty() ? TrainState<float>::create(rc.model, rc.train, options.seed)
                                               : load_checkpoint<float>(options.resume, &rc.model, options.force),
                        {}};
  TrainState<float>& state = result.state;

  std::ofstream log;
  if (!options.out.empty()) {
    std::filesystem::create_directories(options.out);
    std::ofstream(options.out / "config.json") << to_json(RunConfig{state.model_cfg, state.train_cfg}).dump(2) << '\n';
    std::ofstream(options.out / "manifest.json") << nlohmann::json(manifest).dump() << '\n';
    log.open(options.out / "log.jsonl", options.resume.empty() ? std::ios::trunc : std::ios::app);
    if (!log) throw InputError("cannot write " + (options.out / "log.jsonl").string());
  }

  while (state.step < options.steps) {
    const TrainBatch<float> batch = sample_batch(state, manifest, vocab);
    StepRecord rec;
    try {
      rec = train_step(state, batch);
    } catch (const NonFiniteLossError&) {
      // The state is untouched; keep it on disk before reporting.
      if (!options.out.empty()) save_checkpoint(state, options.out / "checkpoint.bin");
      throw;
    }
    if (log) log << nlohmann::json(rec).dump() << '\n';
    if (options.on_step) options.on_step(rec);
    result.log.push_back(rec);
  }
  if (!options.out.empty()) save_checkpoint(state, options.out / "checkpoint.bin");
  return result;
}

#define VLMIM_INSTANTIATE(T)                                                                                \
  template class AdamW<T>;                                                                                  \
  template struct TrainState<T>;                                                                            \
  template TrainBatch<T> sample_batch(const TrainState<T>&, const DatasetManifest&, const Vocabulary&);     \
  template StepRecord train_step(TrainState<T>&, const TrainBatch<T>&);

VLMIM_INSTANTIATE(float)
VLMIM_INSTANTIATE(double)

#undef VLMIM_INSTANTIATE

}  // namespace vlmim
