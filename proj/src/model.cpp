#include "mnmt/model.hpp"

#include <algorithm>

#include "mnmt/optim.hpp"

namespace mnmt {

std::string to_string(PdeMode m) {
  switch (m) {
    case PdeMode::none: return "none";
    case PdeMode::penultimate_all: return "penultimate_all";
    case PdeMode::penultimate_attention_only: return "penultimate_attention_only";
  }
  throw contract_error("unknown pde mode");
}

PdeMode pde_mode_from_string(const std::string& s) {
  if (s == "none") return PdeMode::none;
  if (s == "penultimate_all") return PdeMode::penultimate_all;
  if (s == "penultimate_attention_only") return PdeMode::penultimate_attention_only;
  throw config_error("unknown pde mode: " + s);
}

std::string to_string(LrSchedule s) {
  switch (s) {
    case LrSchedule::constant: return "constant";
    case LrSchedule::triangular: return "triangular";
  }
  throw contract_error("unknown lr schedule");
}

LrSchedule lr_schedule_from_string(const std::string& s) {
  if (s == "constant") return LrSchedule::constant;
  if (s == "triangular") return LrSchedule::triangular;
  throw config_error("unknown lr schedule: " + s);
}

bool glob_match(const std::string& pattern, const std::string& name) {
  // iterative '*' matcher
  size_t p = 0, n = 0, star = std::string::npos, mark = 0;
  while (n < name.size()) {
    if (p < pattern.size() && (pattern[p] == name[n])) {
      ++p;
      ++n;
    } else if (p < pattern.size() && pattern[p] == '*') {
      star = p++;
      mark = n;
    } else if (star != std::string::npos) {
      p = star + 1;
      n = ++mark;
    } else {
      return false;
    }
  }
  while (p < pattern.size() && pattern[p] == '*') ++p;
  return p == pattern.size();
}

std::vector<std::vector<int32_t>> greedy_decode(
    const ModelConfig& cfg, ParamMap<float>& params, const Vocabulary& vocab,
    const std::vector<std::vector<int32_t>>& src_seqs, const std::string& src_lang,
    const std::string& tgt_lang, int64_t max_len) {
  if (max_len < 1 || max_len > cfg.max_seq_len)
    throw contract_error("greedy_decode: max_len " + std::to_string(max_len) +
                         " outside [1, max_seq_len=" + std::to_string(cfg.max_seq_len) + "]");
  if (src_seqs.empty()) return {};
  ParamMap<float> p = detach_params(params);
  const int32_t src_tok = vocab.lang_token_id(src_lang);
  const int32_t tgt_tok = vocab.lang_token_id(tgt_lang);
  const int64_t b = static_cast<int64_t>(src_seqs.size());

  int64_t s_max = 0;
  for (const auto& s : src_seqs) s_max = std::max(s_max, static_cast<int64_t>(s.size()) + 1);
  Batch batch;
  batch.src = IdMatrix(b, s_max, Vocabulary::kPad);
  batch.src_mask = IdMatrix(b, s_max, 0);
  for (int64_t i = 0; i < b; ++i) {
    batch.src.at(i, 0) = src_tok;
    const auto& s = src_seqs[static_cast<size_t>(i)];
    for (size_t j = 0; j < s.size(); ++j) batch.src.at(i, static_cast<int64_t>(j) + 1) = s[j];
    for (int64_t j = 0; j <= static_cast<int64_t>(s.size()); ++j) batch.src_mask.at(i, j) = 1;
  }

  FwdCtx ctx;  // eval mode
  Tape<float> tape;
  model_detail::check_batch<float>(cfg, batch);
  Tensor<float> x = source_token_embeddings(tape, cfg, p, batch);
  Tensor<float> memory = model_detail::encode_from_embeddings(tape, cfg, p, batch, x, ctx);

  std::vector<std::vector<int32_t>> hyps(static_cast<size_t>(b));
  std::vector<bool> finished(static_cast<size_t>(b), false);
  batch.tgt_in = IdMatrix(b, 1, tgt_tok);

  for (int64_t t = 1; t < max_len; ++t) {
    Tensor<float> logits = model_detail::decode_logits(tape, cfg, p, batch, memory, ctx);
    // extend by the argmax of the last position
    IdMatrix next(b, t + 1, Vocabulary::kPad);
    bool all_done = true;
    for (int64_t i = 0; i < b; ++i) {
      for (int64_t j = 0; j < t; ++j) next.at(i, j) = batch.tgt_in.at(i, j);
      if (finished[static_cast<size_t>(i)]) continue;
      const float* row = logits.data().data() + (i * t + (t - 1)) * cfg.vocab_size;
      int32_t best = 0;
      float best_v = row[0];
      for (int64_t v = 1; v < cfg.vocab_size; ++v)
        if (row[v] > best_v) {
          best_v = row[static_cast<size_t>(v)];
          best = static_cast<int32_t>(v);
        }
      if (best == Vocabulary::kEos) {
        finished[static_cast<size_t>(i)] = true;
      } else {
        hyps[static_cast<size_t>(i)].push_back(best);
        next.at(i, t) = best;
        all_done = false;
      }
    }
    if (all_done) break;
    batch.tgt_in = std::move(next);
  }
  return hyps;
}

}  // namespace mnmt
