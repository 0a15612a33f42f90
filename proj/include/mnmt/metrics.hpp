#pragma once

#include <cstdint>
#include <map>
#include <string>
#include <vector>

#include "mnmt/common.hpp"
#include "mnmt/corpus.hpp"
#include "mnmt/model.hpp"

namespace mnmt {

struct BleuReport {
  double precisions[4] = {0, 0, 0, 0};  // p1..p4
  double brevity_penalty = 0.0;
  int64_t hyp_len = 0;  // c
  int64_t ref_len = 0;  // r
  double score = 0.0;   // 0..100
};

// Corpus BLEU with counts pooled over segments, per-segment clipping,
// add-one smoothing on numerator and denominator for n >= 2 only when that
// n's pooled numerator is zero, BP = 1 if c > r else exp(1 - r/c), and
// score 0 if c == 0.
BleuReport corpus_bleu(const std::vector<std::vector<int32_t>>& hyps,
                       const std::vector<std::vector<int32_t>>& refs);

// Whitespace-token variant for text segments.
BleuReport corpus_bleu_text(const std::vector<std::string>& hyps,
                            const std::vector<std::string>& refs);

struct Direction {
  std::string src, tgt, domain;
  bool operator<(const Direction& o) const {
    if (src != o.src) return src < o.src;
    if (tgt != o.tgt) return tgt < o.tgt;
    return domain < o.domain;
  }
  bool operator==(const Direction& o) const {
    return src == o.src && tgt == o.tgt && domain == o.domain;
  }
  std::string str() const { return src + "-" + tgt + ":" + domain; }
};

struct EvalReport {
  std::map<Direction, BleuReport> by_direction;
  double bleu(const Direction& d) const;  // contract_error if missing
  double mean_bleu() const;
};

// Greedy-decodes every test source and scores corpus BLEU per direction over
// token ids (trailing eos stripped).
EvalReport evaluate(const ModelConfig& cfg, const ParamMap<float>& params,
                    const Vocabulary& vocab, const std::map<Direction, Dataset>& testsets,
                    int64_t max_decode_len, int64_t decode_batch = 64);

// (delta1, delta2): baseline minus current on the fine-tuned pair's generic
// direction, and the mean of baseline minus current over all other generic
// directions. Positive values mean degradation.
std::pair<double, double> compute_deltas(const EvalReport& baseline, const EvalReport& current,
                                         const std::string& pair_src, const std::string& pair_tgt,
                                         const std::string& generic_domain = "generic");

struct ReportRow {
  std::string run_id;
  int64_t step = 0;
  Direction direction;
  BleuReport bleu;
};

// CSV: run_id,step,src_lang,tgt_lang,domain,bleu,p1,p2,p3,p4,bp
void write_report_csv(const std::string& path, const std::vector<ReportRow>& rows);
std::vector<ReportRow> read_report_csv(const std::string& path);
std::string report_csv_header();

}  // namespace mnmt
