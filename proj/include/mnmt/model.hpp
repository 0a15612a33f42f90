#pragma once

#include <cstdint>
#include <map>
#include <set>
#include <string>
#include <vector>

#include "mnmt/common.hpp"
#include "mnmt/corpus.hpp"
#include "mnmt/tensor.hpp"

namespace mnmt {

enum class PdeMode { none, penultimate_all, penultimate_attention_only };

std::string to_string(PdeMode m);
PdeMode pde_mode_from_string(const std::string& s);

struct ModelConfig {
  int64_t d_model = 64;
  int64_t n_heads = 4;
  int64_t n_encoder_layers = 2;
  int64_t n_decoder_layers = 2;
  int64_t ffn_dim = 256;
  int64_t vocab_size = 0;
  int64_t max_seq_len = 32;
  double dropout_p = 0.1;
  PdeMode pde_mode = PdeMode::none;
  std::vector<int64_t> pde_layers;  // explicit override; empty = penultimate rule
  bool tie_embeddings = false;
  bool sinusoidal_positions = false;

  void validate() const {
    if (d_model < 1 || n_heads < 1 || d_model % n_heads != 0)
      throw config_error("d_model=" + std::to_string(d_model) + " not divisible by n_heads=" +
                         std::to_string(n_heads));
    if (n_encoder_layers < 1 || n_decoder_layers < 1)
      throw config_error("need at least one encoder and one decoder layer");
    if (pde_mode != PdeMode::none && n_encoder_layers < 2)
      throw config_error("pde_mode requires n_encoder_layers >= 2 (no penultimate layer exists)");
    for (int64_t l : pde_layers)
      if (l < 0 || l >= n_encoder_layers)
        throw config_error("pde layer index " + std::to_string(l) + " out of range");
    if (vocab_size < Vocabulary::kReserved + 1)
      throw config_error("vocab_size too small: " + std::to_string(vocab_size));
    if (max_seq_len < 2) throw config_error("max_seq_len must be >= 2");
    if (dropout_p < 0.0 || dropout_p >= 1.0) throw config_error("dropout_p must be in [0,1)");
  }

  // Encoder layers whose residuals the PDE mode removes.
  std::set<int64_t> pde_layer_set() const {
    if (pde_mode == PdeMode::none) return {};
    if (!pde_layers.empty()) return {pde_layers.begin(), pde_layers.end()};
    return {n_encoder_layers - 2};
  }
};

template <class T>
using ParamMap = std::map<std::string, Tensor<T>>;

struct ResidualEntry {
  int64_t layer;
  std::string sublayer;  // "attn" | "ffn"
  bool present;
};

inline std::vector<ResidualEntry> residual_topology(const ModelConfig& cfg) {
  cfg.validate();
  const auto removed = cfg.pde_layer_set();
  std::vector<ResidualEntry> out;
  for (int64_t i = 0; i < cfg.n_encoder_layers; ++i) {
    const bool hit = removed.count(i) > 0;
    out.push_back({i, "attn", !hit});
    out.push_back({i, "ffn", !(hit && cfg.pde_mode == PdeMode::penultimate_all)});
  }
  return out;
}

struct FreezeSpec {
  std::vector<std::string> patterns;  // literal names with '*' wildcards
  bool empty() const { return patterns.empty(); }
};

// '*' matches any (possibly empty) substring.
bool glob_match(const std::string& pattern, const std::string& name);

namespace model_detail {

inline void add_layer_names(std::vector<std::string>& names, const std::string& prefix) {
  for (const char* w : {".wq", ".wk", ".wv", ".wo", ".bq", ".bk", ".bv", ".bo"})
    names.push_back(prefix + w);
}

}  // namespace model_detail

inline std::vector<std::string> param_names(const ModelConfig& cfg) {
  std::vector<std::string> names;
  if (cfg.tie_embeddings) {
    names.push_back("shared.embed.tokens");
  } else {
    names.push_back("encoder.embed.tokens");
    names.push_back("decoder.embed.tokens");
    names.push_back("output.proj.weight");
  }
  names.push_back("output.proj.bias");
  if (!cfg.sinusoidal_positions) {
    names.push_back("encoder.embed.positions");
    names.push_back("decoder.embed.positions");
  }
  for (int64_t i = 0; i < cfg.n_encoder_layers; ++i) {
    std::string p = "encoder.layer" + std::to_string(i);
    model_detail::add_layer_names(names, p + ".attn");
    names.push_back(p + ".attn_norm.gain");
    names.push_back(p + ".attn_norm.bias");
    names.push_back(p + ".ffn.w1");
    names.push_back(p + ".ffn.b1");
    names.push_back(p + ".ffn.w2");
    names.push_back(p + ".ffn.b2");
    names.push_back(p + ".ffn_norm.gain");
    names.push_back(p + ".ffn_norm.bias");
  }
  for (int64_t i = 0; i < cfg.n_decoder_layers; ++i) {
    std::string p = "decoder.layer" + std::to_string(i);
    model_detail::add_layer_names(names, p + ".self_attn");
    names.push_back(p + ".self_norm.gain");
    names.push_back(p + ".self_norm.bias");
    model_detail::add_layer_names(names, p + ".cross_attn");
    names.push_back(p + ".cross_norm.gain");
    names.push_back(p + ".cross_norm.bias");
    names.push_back(p + ".ffn.w1");
    names.push_back(p + ".ffn.b1");
    names.push_back(p + ".ffn.w2");
    names.push_back(p + ".ffn.b2");
    names.push_back(p + ".ffn_norm.gain");
    names.push_back(p + ".ffn_norm.bias");
  }
  return names;
}

inline Shape param_shape(const ModelConfig& cfg, const std::string& name) {
  const int64_t d = cfg.d_model, V = cfg.vocab_size, f = cfg.ffn_dim, L = cfg.max_seq_len;
  auto ends_with = [&](const char* suffix) {
    std::string s(suffix);
    return name.size() >= s.size() && name.compare(name.size() - s.size(), s.size(), s) == 0;
  };
  if (ends_with("embed.tokens")) return {V, d};
  if (ends_with("embed.positions")) return {L, d};
  if (name == "output.proj.weight") return {d, V};
  if (name == "output.proj.bias") return {V};
  if (ends_with(".wq") || ends_with(".wk") || ends_with(".wv") || ends_with(".wo")) return {d, d};
  if (ends_with(".bq") || ends_with(".bk") || ends_with(".bv") || ends_with(".bo")) return {d};
  if (ends_with(".ffn.w1")) return {d, f};
  if (ends_with(".ffn.b1")) return {f};
  if (ends_with(".ffn.w2")) return {f, d};
  if (ends_with(".ffn.b2")) return {d};
  if (ends_with("norm.gain") || ends_with("norm.bias")) return {d};
  throw contract_error("unknown parameter name: " + name);
}

// Deterministic init: weights ~ U(-1/sqrt(d_model), 1/sqrt(d_model)) from a
// per-name stream, biases 0, norm gains 1.
template <class T>
ParamMap<T> init_params(const ModelConfig& cfg, uint64_t seed) {
  cfg.validate();
  ParamMap<T> params;
  const double s = 1.0 / std::sqrt(static_cast<double>(cfg.d_model));
  for (const std::string& name : param_names(cfg)) {
    Shape shape = param_shape(cfg, name);
    Tensor<T> t = Tensor<T>::zeros(shape);
    auto ends_with = [&](const char* suffix) {
      std::string sfx(suffix);
      return name.size() >= sfx.size() &&
             name.compare(name.size() - sfx.size(), sfx.size(), sfx) == 0;
    };
    if (ends_with("norm.gain")) {
      std::fill(t.data().begin(), t.data().end(), T(1));
    } else if (ends_with("norm.bias") || name == "output.proj.bias" || ends_with(".bq") ||
               ends_with(".bk") || ends_with(".bv") || ends_with(".bo") || ends_with(".b1") ||
               ends_with(".b2")) {
      // zeros
    } else {
      Rng rng = stream_rng(seed, "init." + name);
      for (auto& v : t.data()) v = static_cast<T>(rng.uniform(-s, s));
    }
    t.ensure_grad();
    params.emplace(name, std::move(t));
  }
  return params;
}

template <class T>
std::set<std::string> apply_freeze(const ParamMap<T>& params, const FreezeSpec& spec) {
  std::set<std::string> frozen;
  for (const auto& pattern : spec.patterns) {
    bool matched = false;
    for (const auto& [name, _] : params) {
      if (glob_match(pattern, name)) {
        frozen.insert(name);
        matched = true;
      }
    }
    if (!matched) throw config_error("freeze pattern matches no parameter: " + pattern);
  }
  return frozen;
}

// Per-forward dropout context. Masks are keyed by (seed, site, step), so a
// re-run of the same step reproduces them exactly.
struct FwdCtx {
  bool train = false;
  uint64_t seed = 0;
  int64_t step = 0;
  double dropout_p = 0.0;

  uint64_t key(const std::string& site) const {
    return hash_combine(hash_combine(seed, fnv1a(site)), static_cast<uint64_t>(step));
  }
};

namespace model_detail {

template <class T>
Tensor<T>& param(ParamMap<T>& params, const std::string& name) {
  auto it = params.find(name);
  if (it == params.end()) throw contract_error("missing parameter: " + name);
  return it->second;
}

// Additive attention bias, -1e9 on masked (key) positions. No grad.
template <class T>
Tensor<T> key_pad_bias(const IdMatrix& mask, int64_t n_heads, int64_t t_q) {
  const int64_t b = mask.rows, t_k = mask.cols;
  Tensor<T> bias = Tensor<T>::zeros({b * n_heads, t_q, t_k});
  for (int64_t e = 0; e < b; ++e)
    for (int64_t j = 0; j < t_k; ++j) {
      if (mask.at(e, j) != 0) continue;
      for (int64_t h = 0; h < n_heads; ++h) {
        T* row = bias.data().data() + ((e * n_heads + h) * t_q) * t_k;
        for (int64_t i = 0; i < t_q; ++i) row[i * t_k + j] = T(-1e9);
      }
    }
  return bias;
}

template <class T>
Tensor<T> causal_pad_bias(const IdMatrix& mask, int64_t n_heads) {
  const int64_t b = mask.rows, t = mask.cols;
  Tensor<T> bias = Tensor<T>::zeros({b * n_heads, t, t});
  for (int64_t e = 0; e < b; ++e)
    for (int64_t h = 0; h < n_heads; ++h) {
      T* base = bias.data().data() + ((e * n_heads + h) * t) * t;
      for (int64_t i = 0; i < t; ++i)
        for (int64_t j = 0; j < t; ++j)
          if (j > i || mask.at(e, j) == 0) base[i * t + j] = T(-1e9);
    }
  return bias;
}

template <class T>
IdMatrix position_ids(int64_t b, int64_t t) {
  IdMatrix ids(b, t);
  for (int64_t r = 0; r < b; ++r)
    for (int64_t c = 0; c < t; ++c) ids.at(r, c) = static_cast<int32_t>(c);
  return ids;
}

template <class T>
Tensor<T> sinusoidal_table(int64_t max_len, int64_t d) {
  Tensor<T> t = Tensor<T>::zeros({max_len, d});
  for (int64_t pos = 0; pos < max_len; ++pos)
    for (int64_t i = 0; i < d; ++i) {
      double angle = static_cast<double>(pos) /
                     std::pow(10000.0, static_cast<double>(2 * (i / 2)) / static_cast<double>(d));
      t.data()[static_cast<size_t>(pos * d + i)] =
          static_cast<T>(i % 2 == 0 ? std::sin(angle) : std::cos(angle));
    }
  return t;
}

// q,k,v projections + scaled dot-product attention. kv may differ from x for
// cross-attention. bias is the additive mask [b*h, t_q, t_k].
template <class T>
Tensor<T> multi_head_attention(Tape<T>& tape, const ModelConfig& cfg, ParamMap<T>& params,
                               const std::string& prefix, const Tensor<T>& x, const Tensor<T>& kv,
                               const Tensor<T>& bias, const FwdCtx& ctx) {
  const int64_t b = x.dim(0), t_q = x.dim(1), d = cfg.d_model;
  const int64_t t_k = kv.dim(1), h = cfg.n_heads, e = d / h;
  auto proj = [&](const Tensor<T>& in, const char* w, const char* bn, int64_t t_len) {
    Tensor<T> flat = in.view({in.dim(0) * t_len, d});
    Tensor<T> y = ops::matmul(tape, flat, param(params, prefix + w));
    y = ops::add_bias(tape, y, param(params, prefix + bn));
    // [b, t, h, e] -> [b, h, t, e] -> [b*h, t, e]
    return ops::permute_0213(tape, y.view({in.dim(0), t_len, h, e})).view({in.dim(0) * h, t_len, e});
  };
  Tensor<T> q = proj(x, ".wq", ".bq", t_q);
  Tensor<T> k = proj(kv, ".wk", ".bk", t_k);
  Tensor<T> v = proj(kv, ".wv", ".bv", t_k);
  Tensor<T> scores = ops::bmm(tape, q, k, /*trans_b=*/true);
  scores = ops::scale(tape, scores, static_cast<T>(1.0 / std::sqrt(static_cast<double>(e))));
  scores = ops::add(tape, scores, bias);
  Tensor<T> attn = ops::softmax(tape, scores);
  if (ctx.train && ctx.dropout_p > 0.0)
    attn = ops::dropout(tape, attn, ctx.dropout_p, ctx.key(prefix + ".attn_drop"));
  Tensor<T> ctx_heads = ops::bmm(tape, attn, v);  // [b*h, t_q, e]
  // back to [b, t_q, d]
  Tensor<T> merged =
      ops::permute_0213(tape, ctx_heads.view({b, h, t_q, e})).view({b * t_q, d});
  Tensor<T> out = ops::matmul(tape, merged, param(params, prefix + ".wo"));
  out = ops::add_bias(tape, out, param(params, prefix + ".bo"));
  return out.view({b, t_q, d});
}

template <class T>
Tensor<T> feed_forward(Tape<T>& tape, const ModelConfig& cfg, ParamMap<T>& params,
                       const std::string& prefix, const Tensor<T>& x) {
  const int64_t b = x.dim(0), t = x.dim(1), d = cfg.d_model;
  Tensor<T> flat = x.view({b * t, d});
  Tensor<T> h1 = ops::add_bias(tape, ops::matmul(tape, flat, param(params, prefix + ".w1")),
                               param(params, prefix + ".b1"));
  h1 = ops::relu(tape, h1);
  Tensor<T> h2 = ops::add_bias(tape, ops::matmul(tape, h1, param(params, prefix + ".w2")),
                               param(params, prefix + ".b2"));
  return h2.view({b, t, d});
}

// Post-norm sublayer: out = LN(residual ? x + f(x) : f(x)).
template <class T>
Tensor<T> add_and_norm(Tape<T>& tape, ParamMap<T>& params, const std::string& norm_prefix,
                       const Tensor<T>& x, const Tensor<T>& sub, bool residual) {
  Tensor<T> combined = residual ? ops::add(tape, x, sub) : sub;
  return ops::layer_norm(tape, combined, param(params, norm_prefix + ".gain"),
                         param(params, norm_prefix + ".bias"), T(1e-5));
}

template <class T>
Tensor<T> positions(Tape<T>& tape, const ModelConfig& cfg, ParamMap<T>& params,
                    const std::string& side, int64_t b, int64_t t) {
  IdMatrix ids = position_ids<T>(b, t);
  if (cfg.sinusoidal_positions) {
    Tensor<T> table = sinusoidal_table<T>(cfg.max_seq_len, cfg.d_model);  // constant
    return ops::embedding(tape, table, ids);
  }
  return ops::embedding(tape, param(params, side + ".embed.positions"), ids);
}

template <class T>
Tensor<T> token_table(ParamMap<T>& params, const ModelConfig& cfg, const std::string& side) {
  return param(params, cfg.tie_embeddings ? std::string("shared.embed.tokens")
                                          : side + ".embed.tokens");
}

// Encoder stack from already-embedded source tokens (SMART feeds perturbed
// embeddings through this entry point).
template <class T>
Tensor<T> encode_from_embeddings(Tape<T>& tape, const ModelConfig& cfg, ParamMap<T>& params,
                                 const Batch& batch, const Tensor<T>& src_tok_embed,
                                 const FwdCtx& ctx) {
  const int64_t b = batch.src.rows, s = batch.src.cols;
  Tensor<T> x = ops::add(tape, src_tok_embed, positions(tape, cfg, params, "encoder", b, s));
  if (ctx.train && ctx.dropout_p > 0.0)
    x = ops::dropout(tape, x, ctx.dropout_p, ctx.key("encoder.embed_drop"));
  Tensor<T> pad_bias = key_pad_bias<T>(batch.src_mask, cfg.n_heads, s);
  const auto topo = residual_topology(cfg);
  for (int64_t i = 0; i < cfg.n_encoder_layers; ++i) {
    const std::string p = "encoder.layer" + std::to_string(i);
    bool attn_res = topo[static_cast<size_t>(2 * i)].present;
    bool ffn_res = topo[static_cast<size_t>(2 * i + 1)].present;
    Tensor<T> sa = multi_head_attention(tape, cfg, params, p + ".attn", x, x, pad_bias, ctx);
    if (ctx.train && ctx.dropout_p > 0.0)
      sa = ops::dropout(tape, sa, ctx.dropout_p, ctx.key(p + ".attn_out_drop"));
    x = add_and_norm(tape, params, p + ".attn_norm", x, sa, attn_res);
    Tensor<T> ff = feed_forward(tape, cfg, params, p + ".ffn", x);
    if (ctx.train && ctx.dropout_p > 0.0)
      ff = ops::dropout(tape, ff, ctx.dropout_p, ctx.key(p + ".ffn_out_drop"));
    x = add_and_norm(tape, params, p + ".ffn_norm", x, ff, ffn_res);
  }
  return x;
}

template <class T>
Tensor<T> decode_logits(Tape<T>& tape, const ModelConfig& cfg, ParamMap<T>& params,
                        const Batch& batch, const Tensor<T>& memory, const FwdCtx& ctx,
                        const Tensor<T>* tgt_tok_embed = nullptr) {
  const int64_t b = batch.tgt_in.rows, t = batch.tgt_in.cols, d = cfg.d_model;
  // non-pad mask over decoder input positions
  IdMatrix dec_mask(b, t, 0);
  for (int64_t e = 0; e < b; ++e)
    for (int64_t j = 0; j < t; ++j)
      if (batch.tgt_in.at(e, j) != Vocabulary::kPad) dec_mask.at(e, j) = 1;
  Tensor<T> y = tgt_tok_embed
                    ? *tgt_tok_embed
                    : ops::embedding(tape, token_table(params, cfg, "decoder"), batch.tgt_in);
  y = ops::add(tape, y, positions(tape, cfg, params, "decoder", b, t));
  if (ctx.train && ctx.dropout_p > 0.0)
    y = ops::dropout(tape, y, ctx.dropout_p, ctx.key("decoder.embed_drop"));
  Tensor<T> self_bias = causal_pad_bias<T>(dec_mask, cfg.n_heads);
  Tensor<T> cross_bias = key_pad_bias<T>(batch.src_mask, cfg.n_heads, t);
  for (int64_t i = 0; i < cfg.n_decoder_layers; ++i) {
    const std::string p = "decoder.layer" + std::to_string(i);
    Tensor<T> sa = multi_head_attention(tape, cfg, params, p + ".self_attn", y, y, self_bias, ctx);
    if (ctx.train && ctx.dropout_p > 0.0)
      sa = ops::dropout(tape, sa, ctx.dropout_p, ctx.key(p + ".self_out_drop"));
    y = add_and_norm(tape, params, p + ".self_norm", y, sa, true);
    Tensor<T> ca =
        multi_head_attention(tape, cfg, params, p + ".cross_attn", y, memory, cross_bias, ctx);
    if (ctx.train && ctx.dropout_p > 0.0)
      ca = ops::dropout(tape, ca, ctx.dropout_p, ctx.key(p + ".cross_out_drop"));
    y = add_and_norm(tape, params, p + ".cross_norm", y, ca, true);
    Tensor<T> ff = feed_forward(tape, cfg, params, p + ".ffn", y);
    if (ctx.train && ctx.dropout_p > 0.0)
      ff = ops::dropout(tape, ff, ctx.dropout_p, ctx.key(p + ".ffn_out_drop"));
    y = add_and_norm(tape, params, p + ".ffn_norm", y, ff, true);
  }
  Tensor<T> flat = y.view({b * t, d});
  Tensor<T> logits;
  if (cfg.tie_embeddings) {
    Tensor<T> table = token_table(params, cfg, "decoder");  // [V, d]
    logits = ops::bmm(tape, flat.view({1, b * t, d}), table.view({1, cfg.vocab_size, d}),
                      /*trans_b=*/true)
                 .view({b * t, cfg.vocab_size});
  } else {
    logits = ops::matmul(tape, flat, param(params, "output.proj.weight"));
  }
  logits = ops::add_bias(tape, logits, param(params, "output.proj.bias"));
  return logits.view({b, t, cfg.vocab_size});
}

template <class T>
void check_batch(const ModelConfig& cfg, const Batch& batch) {
  if (batch.src.cols > cfg.max_seq_len || batch.tgt_in.cols > cfg.max_seq_len)
    throw contract_error("sequence length exceeds max_seq_len=" +
                         std::to_string(cfg.max_seq_len));
  for (int32_t id : batch.src.v)
    if (id < 0 || id >= cfg.vocab_size) throw contract_error("source token id out of range");
  for (int32_t id : batch.tgt_in.v)
    if (id < 0 || id >= cfg.vocab_size) throw contract_error("target token id out of range");
}

}  // namespace model_detail

// Clean source token embeddings x (before positions), the SMART perturbation
// target.
template <class T>
Tensor<T> source_token_embeddings(Tape<T>& tape, const ModelConfig& cfg, ParamMap<T>& params,
                                  const Batch& batch) {
  return ops::embedding(tape, model_detail::token_table(params, cfg, "encoder"), batch.src);
}

template <class T>
Tensor<T> target_token_embeddings(Tape<T>& tape, const ModelConfig& cfg, ParamMap<T>& params,
                                  const Batch& batch) {
  return ops::embedding(tape, model_detail::token_table(params, cfg, "decoder"), batch.tgt_in);
}

// Teacher-forced logits [b, t, V].
template <class T>
Tensor<T> forward(Tape<T>& tape, const ModelConfig& cfg, ParamMap<T>& params, const Batch& batch,
                  const FwdCtx& ctx) {
  model_detail::check_batch<T>(cfg, batch);
  Tensor<T> x = source_token_embeddings(tape, cfg, params, batch);
  Tensor<T> memory = model_detail::encode_from_embeddings(tape, cfg, params, batch, x, ctx);
  return model_detail::decode_logits(tape, cfg, params, batch, memory, ctx);
}

// Forward with the source embedding lookup replaced by src_embed (the SMART
// perturbed branch); tgt_embed, when given, likewise replaces the decoder
// input embedding lookup.
template <class T>
Tensor<T> forward_with_source_embeddings(Tape<T>& tape, const ModelConfig& cfg,
                                         ParamMap<T>& params, const Batch& batch,
                                         const Tensor<T>& src_embed, const FwdCtx& ctx,
                                         const Tensor<T>* tgt_embed = nullptr) {
  model_detail::check_batch<T>(cfg, batch);
  if (src_embed.shape() != Shape{batch.src.rows, batch.src.cols, cfg.d_model})
    throw dimension_error("source embedding shape mismatch: " + shape_str(src_embed.shape()));
  if (tgt_embed &&
      tgt_embed->shape() != Shape{batch.tgt_in.rows, batch.tgt_in.cols, cfg.d_model})
    throw dimension_error("target embedding shape mismatch: " + shape_str(tgt_embed->shape()));
  Tensor<T> memory = model_detail::encode_from_embeddings(tape, cfg, params, batch, src_embed, ctx);
  return model_detail::decode_logits(tape, cfg, params, batch, memory, ctx, tgt_embed);
}

// Argmax decoding from the target-language token; stops at eos or max_len.
// Returns content ids without the trailing eos.
std::vector<std::vector<int32_t>> greedy_decode(
    const ModelConfig& cfg, ParamMap<float>& params, const Vocabulary& vocab,
    const std::vector<std::vector<int32_t>>& src_seqs, const std::string& src_lang,
    const std::string& tgt_lang, int64_t max_len);

}  // namespace mnmt
