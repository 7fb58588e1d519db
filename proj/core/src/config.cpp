// Copyright 2026 The vlmim Authors
// SPDX-License-Identifier: Apache-2.0

#include "vlmim/config.hpp"

#include <set>

#include "vlmim/errors.hpp"

namespace vlmim {
namespace {

void check(bool ok, const std::string& msg) {
  if (!ok) throw ConfigError(msg);
}

template <typename E>
E parse_enum(const std::string& s, std::initializer_list<std::pair<const char*, E>> table, const char* field) {
  for (const auto& [name, value] : table) {
    if (s == name) return value;
  }
  throw ConfigError(std::string("unknown value '") + s + "' for " + field);
}

}  // namespace

std::string to_string(MimTarget t) {
  switch (t) {
    case MimTarget::kSemantic: return "semantic";
    case MimTarget::kPixel: return "pixel";
    case MimTarget::kColorQuant: return "color_quant";
  }
  return "?";
}

std::string to_string(MaskStrategy s) { return s == MaskStrategy::kTextGuided ? "text_guided" : "random"; }
std::string to_string(NegativeSampling s) { return s == NegativeSampling::kHard ? "hard" : "uniform"; }

void ModelConfig::validate() const {
  check(image_size > 0 && patch_size > 0 && channels > 0, "image_size, patch_size and channels must be positive");
  check(image_size % patch_size == 0, "image_size must be divisible by patch_size");
  check(embed_dim > 0 && heads > 0 && embed_dim % heads == 0, "embed_dim must be a positive multiple of heads");
  check(image_layers > 0 && text_layers > 0 && fusion_layers > 0 && decoder_layers > 0, "layer counts must be positive");
  check(mlp_ratio > 0 && head_hidden > 0, "mlp_ratio and head_hidden must be positive");
  check(vocab_size >= 8, "vocab_size must leave room for the special tokens");
  check(max_text_len >= 1, "max_text_len must be positive");
  check(code_dim >= 2, "code_dim must be at least 2");
  check(inject_start_layer >= 1 && inject_start_layer <= image_layers,
        "inject_start_layer must lie in [1, image_layers]");
  check(mask_ratio > 0.0 && mask_ratio < 1.0, "mask_ratio must lie in (0, 1)");
  check(momentum >= 0.0 && momentum < 1.0, "momentum must lie in [0, 1)");
  check(student_temp > 0.0 && teacher_temp > 0.0 && itc_temp > 0.0, "temperatures must be positive");
  check(center_momentum >= 0.0 && center_momentum <= 1.0, "center_momentum must lie in [0, 1]");
  check(mlm_ratio > 0.0 && mlm_ratio < 1.0, "mlm_ratio must lie in (0, 1)");
  check(init_std > 0.0 && ln_eps > 0.0, "init_std and ln_eps must be positive");
}

ModelConfig ModelConfig::tiny() {
  ModelConfig c;
  c.image_size = 4;
  c.patch_size = 2;
  c.embed_dim = 3;
  c.image_layers = 2;
  c.text_layers = 1;
  c.fusion_layers = 1;
  c.decoder_layers = 1;
  c.heads = 3;
  c.mlp_ratio = 1;
  c.vocab_size = 8;
  c.max_text_len = 3;
  c.code_dim = 4;
  c.head_hidden = 4;
  c.inject_start_layer = 2;
  c.mask_ratio = 0.5;
  c.init_std = 0.5;
  return c;
}

void to_json(nlohmann::json& j, const ModelConfig& c) {
  j = nlohmann::json{
      {"image_size", c.image_size},
      {"patch_size", c.patch_size},
      {"channels", c.channels},
      {"embed_dim", c.embed_dim},
      {"image_layers", c.image_layers},
      {"text_layers", c.text_layers},
      {"fusion_layers", c.fusion_layers},
      {"decoder_layers", c.decoder_layers},
      {"heads", c.heads},
      {"mlp_ratio", c.mlp_ratio},
      {"vocab_size", c.vocab_size},
      {"max_text_len", c.max_text_len},
      {"code_dim", c.code_dim},
      {"head_hidden", c.head_hidden},
      {"inject_start_layer", c.inject_start_layer},
      {"mask_ratio", c.mask_ratio},
      {"momentum", c.momentum},
      {"student_temp", c.student_temp},
      {"teacher_temp", c.teacher_temp},
      {"center_momentum", c.center_momentum},
      {"centering", c.centering},
      {"mlm_ratio", c.mlm_ratio},
      {"itc_temp", c.itc_temp},
      {"init_std", c.init_std},
      {"ln_eps", c.ln_eps},
      {"inject_text", c.inject_text},
      {"mask_strategy", to_string(c.mask_strategy)},
      {"mim_target", to_string(c.mim_target)},
      {"itm_negatives", to_string(c.itm_negatives)},
  };
}

void from_json(const nlohmann::json& j, ModelConfig& c) {
  if (!j.is_object()) throw ConfigError("model config must be a JSON object");
  const nlohmann::json defaults = c;
  for (const auto& [key, value] : j.items()) {
    if (!defaults.contains(key)) throw ConfigError("unknown model config field '" + key + "'");
    (void)value;
  }
  try {
    auto get = [&](const char* key, auto& field) {
      if (j.contains(key)) j.at(key).get_to(field);
    };
    get("image_size", c.image_size);
    get("patch_size", c.patch_size);
    get("channels", c.channels);
    get("embed_dim", c.embed_dim);
    get("image_layers", c.image_layers);
    get("text_layers", c.text_layers);
    get("fusion_layers", c.fusion_layers);
    get("decoder_layers", c.decoder_layers);
    get("heads", c.heads);
    get("mlp_ratio", c.mlp_ratio);
    get("vocab_size", c.vocab_size);
    get("max_text_len", c.max_text_len);
    get("code_dim", c.code_dim);
    get("head_hidden", c.head_hidden);
    get("inject_start_layer", c.inject_start_layer);
    get("mask_ratio", c.mask_ratio);
    get("momentum", c.momentum);
    get("student_temp", c.student_temp);
    get("teacher_temp", c.teacher_temp);
    get("center_momentum", c.center_momentum);
    get("centering", c.centering);
    get("mlm_ratio", c.mlm_ratio);
    get("itc_temp", c.itc_temp);
    get("init_std", c.init_std);
    get("ln_eps", c.ln_eps);
    get("inject_text", c.inject_text);
    if (j.contains("mask_strategy")) {
      c.mask_strategy = parse_enum<MaskStrategy>(
          j.at("mask_strategy").get<std::string>(),
          {{"text_guided", MaskStrategy::kTextGuided}, {"random", MaskStrategy::kRandom}}, "mask_strategy");
    }
    if (j.contains("mim_target")) {
      c.mim_target = parse_enum<MimTarget>(
          j.at("mim_target").get<std::string>(),
          {{"semantic", MimTarget::kSemantic}, {"pixel", MimTarget::kPixel}, {"color_quant", MimTarget::kColorQuant}},
          "mim_target");
    }
    if (j.contains("itm_negatives")) {
      c.itm_negatives = parse_enum<NegativeSampling>(
          j.at("itm_negatives").get<std::string>(),
          {{"hard", NegativeSampling::kHard}, {"uniform", NegativeSampling::kUniform}}, "itm_negatives");
    }
  } catch (const nlohmann::json::exception& e) {
    throw ConfigError(std::string("bad model config value: ") + e.what());
  }
}

std::uint64_t config_hash(const ModelConfig& c) {
  const std::string text = nlohmann::json(c).dump();
  std::uint64_t h = 1469598103934665603ull;
  for (unsigned char ch : text) {
    h ^= ch;
    h *= 1099511628211ull;
  }
  return h;
}

}  // namespace vlmim
