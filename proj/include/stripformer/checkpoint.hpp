// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cstring>
#include <fstream>
#include <map>
#include <string>
#include <vector>

#include "stripformer/losses.hpp"
#include "stripformer/model.hpp"

namespace stripformer {

// Checkpoint container: magic "SPFM1", scalar width, the model config, then
// named tensors as (name, shape, little-endian raw data). Round-trips are
// bit-exact; loads parse the whole file before touching any destination.

namespace detail {

inline constexpr char kCheckpointMagic[5] = {'S', 'P', 'F', 'M', '1'};

template <typename V>
void write_pod(std::ofstream& os, const V& v) {
  os.write(reinterpret_cast<const char*>(&v), sizeof(V));
}

template <typename V>
V read_pod(std::ifstream& is, const char* what) {
  V v;
  is.read(reinterpret_cast<char*>(&v), sizeof(V));
  if (!is) throw CheckpointError(std::string("truncated checkpoint while reading ") + what);
  return v;
}

}  // namespace detail

template <typename T>
void save_checkpoint(const std::string& path, const StripformerConfig& cfg,
                     const ParamRegistry<T>& params) {
  std::ofstream os(path, std::ios::binary | std::ios::trunc);
  if (!os) throw CheckpointError("cannot open '" + path + "' for writing");
  os.write(detail::kCheckpointMagic, sizeof(detail::kCheckpointMagic));
  detail::write_pod<uint8_t>(os, static_cast<uint8_t>(sizeof(T)));
  for (int64_t v : {cfg.c1, cfg.c2, cfg.c3, cfg.blocks_per_scale, cfg.heads, cfg.mlp_ratio}) {
    detail::write_pod<int32_t>(os, static_cast<int32_t>(v));
  }
  detail::write_pod<uint64_t>(os, params.size());
  for (const auto& [name, t] : params) {
    detail::write_pod<uint32_t>(os, static_cast<uint32_t>(name.size()));
    os.write(name.data(), static_cast<std::streamsize>(name.size()));
    detail::write_pod<uint32_t>(os, static_cast<uint32_t>(t.rank()));
    for (int64_t e : t.shape()) detail::write_pod<int64_t>(os, e);
    detail::write_pod<uint64_t>(os, static_cast<uint64_t>(t.numel()) * sizeof(T));
    os.write(reinterpret_cast<const char*>(t.data().data()),
             static_cast<std::streamsize>(t.numel() * sizeof(T)));
  }
  if (!os) throw CheckpointError("write failed for '" + path + "'");
}

template <typename T>
struct LoadedCheckpoint {
  StripformerConfig config;
  std::vector<std::pair<std::string, Tensor<T>>> tensors;
};

template <typename T>
LoadedCheckpoint<T> read_checkpoint(const std::string& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw CheckpointError("cannot open '" + path + "'");
  char magic[5];
  is.read(magic, 5);
  if (!is || std::memcmp(magic, detail::kCheckpointMagic, 5) != 0) {
    throw CheckpointError("'" + path + "' is not a checkpoint (bad magic)");
  }
  const auto dtype = detail::read_pod<uint8_t>(is, "dtype");
  if (dtype != sizeof(T)) {
    throw CheckpointError("checkpoint scalar width " + std::to_string(dtype) +
                          " does not match requested " + std::to_string(sizeof(T)));
  }
  LoadedCheckpoint<T> out;
  out.config.c1 = detail::read_pod<int32_t>(is, "config");
  out.config.c2 = detail::read_pod<int32_t>(is, "config");
  out.config.c3 = detail::read_pod<int32_t>(is, "config");
  out.config.blocks_per_scale = detail::read_pod<int32_t>(is, "config");
  out.config.heads = detail::read_pod<int32_t>(is, "config");
  out.config.mlp_ratio = detail::read_pod<int32_t>(is, "config");
  const auto count = detail::read_pod<uint64_t>(is, "tensor count");
  for (uint64_t i = 0; i < count; ++i) {
    const auto name_len = detail::read_pod<uint32_t>(is, "name length");
    std::string name(name_len, '\0');
    is.read(name.data(), name_len);
    if (!is) throw CheckpointError("truncated checkpoint while reading name");
    const auto rank = detail::read_pod<uint32_t>(is, "rank");
    Shape shape(rank);
    for (auto& e : shape) e = detail::read_pod<int64_t>(is, "extent");
    const auto bytes = detail::read_pod<uint64_t>(is, "payload size");
    if (bytes != static_cast<uint64_t>(numel_of(shape)) * sizeof(T)) {
      throw CheckpointError("corrupt checkpoint: payload of '" + name + "' is " +
                            std::to_string(bytes) + " bytes for shape " + shape_str(shape));
    }
    Tensor<T> t(shape);
    is.read(reinterpret_cast<char*>(t.data_mut().data()), static_cast<std::streamsize>(bytes));
    if (!is) throw CheckpointError("truncated checkpoint while reading tensor '" + name + "'");
    out.tensors.emplace_back(std::move(name), std::move(t));
  }
  return out;
}

// Copy loaded tensors into an existing registry. Every destination name must
// be present with an identical shape, and the file must not carry strays;
// the first offending tensor is named.
template <typename T>
void apply_checkpoint(const LoadedCheckpoint<T>& loaded, ParamRegistry<T>& params) {
  std::map<std::string, const Tensor<T>*> by_name;
  for (const auto& [name, t] : loaded.tensors) by_name.emplace(name, &t);
  for (auto& [name, dst] : params) {
    auto it = by_name.find(name);
    if (it == by_name.end()) {
      throw CheckpointError("checkpoint is missing tensor '" + name + "'");
    }
    if (it->second->shape() != dst.shape()) {
      throw CheckpointError("checkpoint tensor '" + name + "' has shape " +
                            shape_str(it->second->shape()) + ", expected " +
                            shape_str(dst.shape()));
    }
  }
  if (loaded.tensors.size() != params.size()) {
    std::map<std::string, bool> known;
    for (const auto& [name, _] : params) known.emplace(name, true);
    for (const auto& [name, _] : loaded.tensors) {
      if (!known.count(name)) throw CheckpointError("checkpoint carries unknown tensor '" + name + "'");
    }
  }
  for (auto& [name, dst] : params) {
    const Tensor<T>* src = by_name.at(name);
    std::copy(src->data().begin(), src->data().end(), dst.data_mut().begin());
  }
}

// Feature-extractor weight files reuse the same container; the config
// fields are unused and written as zeros.
template <typename T>
void save_feature_extractor(const std::string& path, const FeatureExtractor<T>& psi) {
  StripformerConfig zero{0, 0, 0, 0, 0, 0};
  save_checkpoint(path, zero, psi.weights());
}

template <typename T>
void load_feature_extractor(const std::string& path, FeatureExtractor<T>& psi) {
  LoadedCheckpoint<T> loaded = read_checkpoint<T>(path);
  apply_checkpoint(loaded, psi.weights_mut());
}

// Rebuild a model from its checkpoint: the stored config shapes the
// parameter tree, then every tensor is restored bit-exactly.
template <typename T>
std::pair<StripformerConfig, StripformerParams<T>> load_model(const std::string& path) {
  LoadedCheckpoint<T> loaded = read_checkpoint<T>(path);
  loaded.config.validate();
  Rng rng(0);
  StripformerParams<T> params = init_params<T>(loaded.config, rng);
  ParamRegistry<T> registry = collect_params(params);
  apply_checkpoint(loaded, registry);
  return {loaded.config, std::move(params)};
}

}  // namespace stripformer
