// Copyright 2026 The vlmim Authors
// SPDX-License-Identifier: Apache-2.0

#include "vlmim/checkpoint.hpp"

#include <array>
#include <fstream>
#include <new>
#include <stdexcept>
#include <sstream>

#include <cereal/archives/binary.hpp>
#include <cereal/types/string.hpp>
#include <cereal/types/vector.hpp>

#include "vlmim/errors.hpp"

namespace vlmim {

namespace {

// Raw bytes, not a length-prefixed string, so foreign files fail on the first read.
constexpr std::array<char, 8> kMagic = {'V', 'L', 'M', 'I', 'M', 'C', 'K', 'P'};

template <typename Archive>
void header_io(Archive& ar, CheckpointHeader& h) {
  std::array<char, 8> magic{};
  ar(cereal::binary_data(magic.data(), magic.size()));
  if (magic != kMagic) throw CheckpointError("not a vlmim checkpoint (bad magic)");
  ar(h.version);
  if (h.version != kCheckpointVersion) {
    throw CheckpointError("unsupported checkpoint version " + std::to_string(h.version));
  }
  ar(h.config_hash, h.model_json, h.train_json, h.seed, h.step, h.scalar_bytes);
}

template <typename T>
void write_tensors(cereal::BinaryOutputArchive& ar, const std::vector<NamedTensor<T>>& tensors) {
  ar(static_cast<std::uint64_t>(tensors.size()));
  for (const auto& t : tensors) ar(t.name, t.tensor.shape(), t.tensor.value());
}

template <typename T>
void read_tensors(cereal::BinaryInputArchive& ar, const std::vector<NamedTensor<T>>& into, const char* what) {
  std::uint64_t count = 0;
  ar(count);
  if (count != into.size()) {
    throw CheckpointError(std::string(what) + ": checkpoint holds " + std::to_string(count) + " tensors, model has " +
                          std::to_string(into.size()));
  }
  for (const auto& t : into) {
    std::string name;
    Shape shape;
    std::vector<T> values;
    ar(name, shape, values);
    if (name != t.name || shape != t.tensor.shape() || values.size() != t.tensor.size()) {
      throw CheckpointError(std::string(what) + ": tensor '" + name + "' does not match model tensor '" + t.name + "'");
    }
    Var<T> handle = t.tensor;
    handle.mutable_value() = std::move(values);
  }
}

CheckpointHeader read_header(cereal::BinaryInputArchive& ar) {
  CheckpointHeader h;
  header_io(ar, h);
  return h;
}

}  // namespace

template <typename T>
void save_checkpoint(const TrainState<T>& state, const std::filesystem::path& path) {
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  // Write to a sibling file first so a crash never leaves a torn checkpoint.
  const std::filesystem::path tmp = path.string() + ".tmp";
  {
    std::ofstream os(tmp, std::ios::binary | std::ios::trunc);
    if (!os) throw CheckpointError("cannot write " + tmp.string());
    cereal::BinaryOutputArchive ar(os);
    CheckpointHeader h;
    h.version = kCheckpointVersion;
    h.config_hash = state.hash();
    h.model_json = nlohmann::json(state.model_cfg).dump();
    h.train_json = nlohmann::json(state.train_cfg).dump();
    h.seed = state.seed;
    h.step = state.step;
    h.scalar_bytes = sizeof(T);
    ar(cereal::binary_data(kMagic.data(), kMagic.size()));
    ar(h.version, h.config_hash, h.model_json, h.train_json, h.seed, h.step, h.scalar_bytes);
    write_tensors(ar, state.model->params().entries());
    write_tensors(ar, state.teacher->snapshot());
    ar(state.teacher->center);
    ar(state.optimizer.t, state.optimizer.m, state.optimizer.v);
    if (!os) throw CheckpointError("write failed for " + tmp.string());
  }
  std::filesystem::rename(tmp, path);
}

CheckpointHeader read_checkpoint_header(const std::filesystem::path& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw CheckpointError("cannot open checkpoint " + path.string());
  try {
    cereal::BinaryInputArchive ar(is);
    return read_header(ar);
  } catch (const cereal::Exception& e) {
    throw CheckpointError("truncated checkpoint " + path.string() + ": " + e.what());
  } catch (const std::bad_alloc&) {
    throw CheckpointError("corrupt checkpoint " + path.string() + ": implausible length field");
  } catch (const std::length_error&) {
    throw CheckpointError("corrupt checkpoint " + path.string() + ": implausible length field");
  }
}

template <typename T>
TrainState<T> load_checkpoint(const std::filesystem::path& path, const ModelConfig* expected, bool force) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw CheckpointError("cannot open checkpoint " + path.string());
  try {
    cereal::BinaryInputArchive ar(is);
    const CheckpointHeader h = read_header(ar);
    if (h.scalar_bytes != sizeof(T)) throw CheckpointError("checkpoint scalar width differs from the requested type");

    ModelConfig model_cfg;
    TrainConfig train_cfg;
    try {
      model_cfg = nlohmann::json::parse(h.model_json).get<ModelConfig>();
      train_cfg = nlohmann::json::parse(h.train_json).get<TrainConfig>();
    } catch (const nlohmann::json::exception& e) {
      throw CheckpointError(std::string("embedded config is unreadable: ") + e.what());
    }
    auto hex = [](std::uint64_t v) {
      std::ostringstream os;
      os << std::hex << v;
      return os.str();
    };
    if (config_hash(model_cfg) != h.config_hash && !force) {
      throw CheckpointError("embedded config hash " + hex(h.config_hash) + " does not match its config (" +
                            hex(config_hash(model_cfg)) + "); pass --force to load anyway");
    }
    if (expected && config_hash(*expected) != h.config_hash && !force) {
      throw CheckpointError("checkpoint config hash " + hex(h.config_hash) + " differs from the requested config (" +
                            hex(config_hash(*expected)) + "); pass --force to load anyway");
    }

    TrainState<T> state = TrainState<T>::create(model_cfg, train_cfg, h.seed);
    state.step = h.step;
    read_tensors(ar, state.model->params().entries(), "student");
    read_tensors(ar, state.teacher->snapshot(), "teacher");
    std::vector<T> center;
    ar(center);
    if (center.size() != state.teacher->center.size()) throw CheckpointError("teacher center has the wrong width");
    state.teacher->center = std::move(center);
    ar(state.optimizer.t, state.optimizer.m, state.optimizer.v);
    const auto& params = state.model->params().entries();
    if (state.optimizer.m.size() != params.size() || state.optimizer.v.size() != params.size()) {
      throw CheckpointError("optimizer moments do not match the parameter list");
    }
    for (std::size_t i = 0; i < params.size(); ++i) {
      if (state.optimizer.m[i].size() != params[i].tensor.size() ||
          state.optimizer.v[i].size() != params[i].tensor.size()) {
        throw CheckpointError("optimizer moments of '" + params[i].name + "' have the wrong size");
      }
    }
    return state;
  } catch (const cereal::Exception& e) {
    throw CheckpointError("truncated or corrupt checkpoint " + path.string() + ": " + e.what());
  } catch (const std::bad_alloc&) {
    throw CheckpointError("corrupt checkpoint " + path.string() + ": implausible length field");
  } catch (const std::length_error&) {
    throw CheckpointError("corrupt checkpoint " + path.string() + ": implausible length field");
  }
}

#define VLMIM_INSTANTIATE(T)                                                            \
  template void save_checkpoint(const TrainState<T>&, const std::filesystem::path&);   \
  template TrainState<T> load_checkpoint(const std::filesystem::path&, const ModelConfig*, bool);

VLMIM_INSTANTIATE(float)
VLMIM_INSTANTIATE(double)

#undef VLMIM_INSTANTIATE

}  // namespace vlmim
