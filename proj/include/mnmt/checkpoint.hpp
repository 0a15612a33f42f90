#pragma once

#include <cstdint>
#include <map>
#include <string>
#include <vector>

#include "mnmt/common.hpp"
#include "mnmt/model.hpp"
#include "mnmt/tensor.hpp"

namespace mnmt {

struct NamedTensor {
  Shape shape;
  std::vector<float> data;
};

// On-disk model state. Parameters are stored fp32 regardless of the training
// precision. File layout: magic "MNMT", u32 LE version, u32 LE metadata
// length, UTF-8 JSON metadata (config, seed, step, corpus hash, tensor
// directory with offsets), then raw little-endian fp32 payloads in directory
// order.
struct Checkpoint {
  ModelConfig config;
  std::map<std::string, NamedTensor> tensors;
  bool has_optimizer = false;
  std::map<std::string, NamedTensor> opt_m, opt_v;
  int64_t opt_t = 0;
  int64_t step = 0;
  uint64_t seed = 0;
  std::string corpus_hash;
};

inline constexpr uint32_t kCheckpointVersion = 1;

void save_checkpoint(const std::string& path, const Checkpoint& ckpt);
Checkpoint load_checkpoint(const std::string& path);

std::string model_config_to_json_text(const ModelConfig& cfg);
ModelConfig model_config_from_json_text(const std::string& text);

template <class T>
Checkpoint checkpoint_from_params(const ModelConfig& cfg, const ParamMap<T>& params,
                                  int64_t step = 0, uint64_t seed = 0,
                                  const std::string& corpus_hash = {}) {
  Checkpoint ckpt;
  ckpt.config = cfg;
  ckpt.step = step;
  ckpt.seed = seed;
  ckpt.corpus_hash = corpus_hash;
  for (const auto& [name, p] : params) {
    NamedTensor nt;
    nt.shape = p.shape();
    nt.data.reserve(p.data().size());
    for (T v : p.data()) nt.data.push_back(static_cast<float>(v));
    ckpt.tensors.emplace(name, std::move(nt));
  }
  return ckpt;
}

template <class T>
ParamMap<T> params_from_checkpoint(const Checkpoint& ckpt) {
  ckpt.config.validate();
  const auto names = param_names(ckpt.config);
  ParamMap<T> params;
  for (const auto& name : names) {
    auto it = ckpt.tensors.find(name);
    if (it == ckpt.tensors.end())
      throw corruption_error("checkpoint missing tensor: " + name);
    if (it->second.shape != param_shape(ckpt.config, name))
      throw corruption_error("checkpoint tensor " + name + " has shape " +
                             shape_str(it->second.shape) + ", expected " +
                             shape_str(param_shape(ckpt.config, name)));
    std::vector<T> data;
    data.reserve(it->second.data.size());
    for (float v : it->second.data) data.push_back(static_cast<T>(v));
    Tensor<T> t = Tensor<T>::from(it->second.shape, std::move(data));
    t.ensure_grad();
    params.emplace(name, std::move(t));
  }
  if (ckpt.tensors.size() != names.size())
    throw corruption_error("checkpoint holds unexpected extra tensors");
  return params;
}

}  // namespace mnmt
