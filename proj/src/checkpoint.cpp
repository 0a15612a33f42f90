#include "mnmt/checkpoint.hpp"

#include <cstring>
#include <fstream>

#include <json.hpp>

namespace mnmt {

using nlohmann::json;

namespace {

json config_to_json(const ModelConfig& cfg) {
  json j;
  j["d_model"] = cfg.d_model;
  j["n_heads"] = cfg.n_heads;
  j["n_encoder_layers"] = cfg.n_encoder_layers;
  j["n_decoder_layers"] = cfg.n_decoder_layers;
  j["ffn_dim"] = cfg.ffn_dim;
  j["vocab_size"] = cfg.vocab_size;
  j["max_seq_len"] = cfg.max_seq_len;
  j["dropout_p"] = cfg.dropout_p;
  j["pde_mode"] = to_string(cfg.pde_mode);
  j["pde_layers"] = cfg.pde_layers;
  j["tie_embeddings"] = cfg.tie_embeddings;
  j["sinusoidal_positions"] = cfg.sinusoidal_positions;
  return j;
}

ModelConfig config_from_json(const json& j) {
  ModelConfig cfg;
  try {
    cfg.d_model = j.at("d_model").get<int64_t>();
    cfg.n_heads = j.at("n_heads").get<int64_t>();
    cfg.n_encoder_layers = j.at("n_encoder_layers").get<int64_t>();
    cfg.n_decoder_layers = j.at("n_decoder_layers").get<int64_t>();
    cfg.ffn_dim = j.at("ffn_dim").get<int64_t>();
    cfg.vocab_size = j.at("vocab_size").get<int64_t>();
    cfg.max_seq_len = j.at("max_seq_len").get<int64_t>();
    cfg.dropout_p = j.at("dropout_p").get<double>();
    cfg.pde_mode = pde_mode_from_string(j.at("pde_mode").get<std::string>());
    cfg.pde_layers = j.value("pde_layers", std::vector<int64_t>{});
    cfg.tie_embeddings = j.value("tie_embeddings", false);
    cfg.sinusoidal_positions = j.value("sinusoidal_positions", false);
  } catch (const json::exception& e) {
    throw config_error(std::string("bad model config: ") + e.what());
  }
  return cfg;
}

void put_u32_le(std::string& out, uint32_t v) {
  out.push_back(static_cast<char>(v & 0xff));
  out.push_back(static_cast<char>((v >> 8) & 0xff));
  out.push_back(static_cast<char>((v >> 16) & 0xff));
  out.push_back(static_cast<char>((v >> 24) & 0xff));
}

uint32_t get_u32_le(const unsigned char* p) {
  return static_cast<uint32_t>(p[0]) | (static_cast<uint32_t>(p[1]) << 8) |
         (static_cast<uint32_t>(p[2]) << 16) | (static_cast<uint32_t>(p[3]) << 24);
}

struct DirEntry {
  std::string name;
  const NamedTensor* tensor;
};

std::vector<DirEntry> directory(const Checkpoint& ckpt) {
  std::vector<DirEntry> dir;
  for (const auto& [name, t] : ckpt.tensors) dir.push_back({name, &t});
  if (ckpt.has_optimizer) {
    for (const auto& [name, t] : ckpt.opt_m) dir.push_back({"adam.m." + name, &t});
    for (const auto& [name, t] : ckpt.opt_v) dir.push_back({"adam.v." + name, &t});
  }
  return dir;
}

}  // namespace

std::string model_config_to_json_text(const ModelConfig& cfg) {
  return config_to_json(cfg).dump();
}

ModelConfig model_config_from_json_text(const std::string& text) {
  json j;
  try {
    j = json::parse(text);
  } catch (const json::exception& e) {
    throw config_error(std::string("model config is not valid JSON: ") + e.what());
  }
  return config_from_json(j);
}

void save_checkpoint(const std::string& path, const Checkpoint& ckpt) {
  auto dir = directory(ckpt);
  json meta;
  meta["config"] = config_to_json(ckpt.config);
  meta["seed"] = ckpt.seed;
  meta["step"] = ckpt.step;
  meta["corpus_hash"] = ckpt.corpus_hash;
  meta["has_optimizer"] = ckpt.has_optimizer;
  meta["opt_t"] = ckpt.opt_t;
  json tensors = json::array();
  uint64_t offset = 0;
  for (const auto& e : dir) {
    tensors.push_back({{"name", e.name}, {"shape", e.tensor->shape}, {"offset", offset}});
    offset += e.tensor->data.size() * sizeof(float);
  }
  meta["tensors"] = std::move(tensors);

  std::string header = "MNMT";
  put_u32_le(header, kCheckpointVersion);
  const std::string meta_text = meta.dump();
  put_u32_le(header, static_cast<uint32_t>(meta_text.size()));

  std::ofstream out(path, std::ios::binary);
  if (!out) throw data_error("cannot write checkpoint: " + path);
  out.write(header.data(), static_cast<std::streamsize>(header.size()));
  out.write(meta_text.data(), static_cast<std::streamsize>(meta_text.size()));
  for (const auto& e : dir)
    out.write(reinterpret_cast<const char*>(e.tensor->data.data()),
              static_cast<std::streamsize>(e.tensor->data.size() * sizeof(float)));
  if (!out) throw data_error("failed writing checkpoint: " + path);
}

Checkpoint load_checkpoint(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw data_error("cannot read checkpoint: " + path);
  std::vector<unsigned char> bytes((std::istreambuf_iterator<char>(in)),
                                   std::istreambuf_iterator<char>());
  if (bytes.size() < 12 || std::memcmp(bytes.data(), "MNMT", 4) != 0)
    throw format_error("not a checkpoint file (bad magic): " + path);
  const uint32_t version = get_u32_le(bytes.data() + 4);
  if (version != kCheckpointVersion)
    throw format_error("unsupported checkpoint version " + std::to_string(version));
  const uint32_t meta_len = get_u32_le(bytes.data() + 8);
  if (12 + static_cast<size_t>(meta_len) > bytes.size())
    throw corruption_error("checkpoint truncated in metadata: " + path);
  json meta;
  try {
    meta = json::parse(bytes.begin() + 12, bytes.begin() + 12 + meta_len);
  } catch (const json::exception& e) {
    throw corruption_error(std::string("checkpoint metadata unreadable: ") + e.what());
  }

  Checkpoint ckpt;
  try {
    ckpt.config = config_from_json(meta.at("config"));
    ckpt.seed = meta.at("seed").get<uint64_t>();
    ckpt.step = meta.at("step").get<int64_t>();
    ckpt.corpus_hash = meta.at("corpus_hash").get<std::string>();
    ckpt.has_optimizer = meta.value("has_optimizer", false);
    ckpt.opt_t = meta.value("opt_t", int64_t{0});
  } catch (const json::exception& e) {
    throw corruption_error(std::string("checkpoint metadata incomplete: ") + e.what());
  }

  const size_t payload_begin = 12 + meta_len;
  const size_t payload_size = bytes.size() - payload_begin;
  for (const auto& entry : meta.at("tensors")) {
    std::string name;
    NamedTensor nt;
    uint64_t offset = 0;
    try {
      name = entry.at("name").get<std::string>();
      nt.shape = entry.at("shape").get<Shape>();
      offset = entry.at("offset").get<uint64_t>();
    } catch (const json::exception& e) {
      throw corruption_error(std::string("checkpoint tensor entry unreadable: ") + e.what());
    }
    const uint64_t count = static_cast<uint64_t>(shape_numel(nt.shape));
    if (offset + count * sizeof(float) > payload_size)
      throw corruption_error("checkpoint truncated; tensor " + name + " exceeds payload");
    nt.data.resize(count);
    std::memcpy(nt.data.data(), bytes.data() + payload_begin + offset, count * sizeof(float));
    if (name.rfind("adam.m.", 0) == 0)
      ckpt.opt_m.emplace(name.substr(7), std::move(nt));
    else if (name.rfind("adam.v.", 0) == 0)
      ckpt.opt_v.emplace(name.substr(7), std::move(nt));
    else
      ckpt.tensors.emplace(name, std::move(nt));
  }

  // shape validation against the declared config
  for (const auto& name : param_names(ckpt.config)) {
    auto it = ckpt.tensors.find(name);
    if (it == ckpt.tensors.end()) throw corruption_error("checkpoint missing tensor: " + name);
    if (it->second.shape != param_shape(ckpt.config, name))
      throw corruption_error("checkpoint tensor " + name + " has shape " +
                             shape_str(it->second.shape) + ", expected " +
                             shape_str(param_shape(ckpt.config, name)));
  }
  return ckpt;
}

}  // namespace mnmt
