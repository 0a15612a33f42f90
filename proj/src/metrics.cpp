#include "mnmt/metrics.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <sstream>
#include <unordered_map>

#include "mnmt/optim.hpp"

namespace mnmt {

namespace {

struct NgramHash {
  size_t operator()(const std::vector<int32_t>& v) const {
    return static_cast<size_t>(fnv1a_bytes(v.data(), v.size() * sizeof(int32_t)));
  }
};

using NgramCounts = std::unordered_map<std::vector<int32_t>, int64_t, NgramHash>;

NgramCounts count_ngrams(const std::vector<int32_t>& seq, int n) {
  NgramCounts counts;
  const int64_t len = static_cast<int64_t>(seq.size());
  for (int64_t i = 0; i + n <= len; ++i)
    ++counts[std::vector<int32_t>(seq.begin() + i, seq.begin() + i + n)];
  return counts;
}

}  // namespace

BleuReport corpus_bleu(const std::vector<std::vector<int32_t>>& hyps,
                       const std::vector<std::vector<int32_t>>& refs) {
  if (hyps.empty() || hyps.size() != refs.size())
    throw contract_error("corpus_bleu needs equal, non-zero segment counts (" +
                         std::to_string(hyps.size()) + " vs " + std::to_string(refs.size()) + ")");
  BleuReport rep;
  for (const auto& h : hyps) rep.hyp_len += static_cast<int64_t>(h.size());
  for (const auto& r : refs) rep.ref_len += static_cast<int64_t>(r.size());
  if (rep.hyp_len == 0) {
    rep.score = 0.0;
    return rep;
  }

  double log_p_sum = 0.0;
  bool zero_precision = false;
  for (int n = 1; n <= 4; ++n) {
    int64_t matched = 0, total = 0;
    for (size_t s = 0; s < hyps.size(); ++s) {
      const int64_t hlen = static_cast<int64_t>(hyps[s].size());
      total += std::max<int64_t>(0, hlen - n + 1);
      if (hlen < n) continue;
      NgramCounts hyp_counts = count_ngrams(hyps[s], n);
      NgramCounts ref_counts = count_ngrams(refs[s], n);
      for (const auto& [gram, count] : hyp_counts) {
        auto it = ref_counts.find(gram);
        if (it != ref_counts.end()) matched += std::min(count, it->second);
      }
    }
    if (n >= 2 && matched == 0) {
      matched += 1;
      total += 1;
    }
    const double p = total > 0 ? static_cast<double>(matched) / static_cast<double>(total) : 0.0;
    rep.precisions[n - 1] = p;
    if (p <= 0.0)
      zero_precision = true;
    else
      log_p_sum += std::log(p);
  }

  rep.brevity_penalty =
      rep.hyp_len > rep.ref_len
          ? 1.0
          : std::exp(1.0 - static_cast<double>(rep.ref_len) / static_cast<double>(rep.hyp_len));
  rep.score = zero_precision ? 0.0 : 100.0 * rep.brevity_penalty * std::exp(log_p_sum / 4.0);
  return rep;
}

BleuReport corpus_bleu_text(const std::vector<std::string>& hyps,
                            const std::vector<std::string>& refs) {
  std::unordered_map<std::string, int32_t> intern;
  auto to_ids = [&](const std::string& text) {
    std::vector<int32_t> ids;
    std::istringstream ss(text);
    std::string w;
    while (ss >> w) {
      auto [it, _] = intern.emplace(w, static_cast<int32_t>(intern.size()));
      ids.push_back(it->second);
    }
    return ids;
  };
  std::vector<std::vector<int32_t>> h, r;
  h.reserve(hyps.size());
  r.reserve(refs.size());
  for (const auto& s : hyps) h.push_back(to_ids(s));
  for (const auto& s : refs) r.push_back(to_ids(s));
  return corpus_bleu(h, r);
}

double EvalReport::bleu(const Direction& d) const {
  auto it = by_direction.find(d);
  if (it == by_direction.end())
    throw contract_error("evaluation report has no direction " + d.str());
  return it->second.score;
}

double EvalReport::mean_bleu() const {
  if (by_direction.empty()) return 0.0;
  double sum = 0.0;
  for (const auto& [_, b] : by_direction) sum += b.score;
  return sum / static_cast<double>(by_direction.size());
}

EvalReport evaluate(const ModelConfig& cfg, const ParamMap<float>& params,
                    const Vocabulary& vocab, const std::map<Direction, Dataset>& testsets,
                    int64_t max_decode_len, int64_t decode_batch) {
  if (vocab.size() != cfg.vocab_size)
    throw config_error("evaluate: vocabulary size " + std::to_string(vocab.size()) +
                       " does not match model vocab_size " + std::to_string(cfg.vocab_size));
  ParamMap<float> p = detach_params(params);
  EvalReport report;
  for (const auto& [dir, ds] : testsets) {
    if (ds.empty()) throw contract_error("evaluate: empty test set for " + dir.str());
    std::vector<std::vector<int32_t>> hyps, refs;
    hyps.reserve(static_cast<size_t>(ds.size()));
    refs.reserve(static_cast<size_t>(ds.size()));
    for (int64_t begin = 0; begin < ds.size(); begin += decode_batch) {
      const int64_t end = std::min(begin + decode_batch, ds.size());
      std::vector<std::vector<int32_t>> sources;
      for (int64_t i = begin; i < end; ++i) {
        const auto& ex = ds.examples[static_cast<size_t>(i)];
        for (int32_t id : ex.src_ids)
          if (id < 0 || id >= cfg.vocab_size)
            throw config_error("evaluate: token id out of model range in " + dir.str());
        sources.push_back(ex.src_ids);
      }
      auto decoded = greedy_decode(cfg, p, vocab, sources, dir.src, dir.tgt, max_decode_len);
      for (auto& h : decoded) hyps.push_back(std::move(h));
    }
    for (const auto& ex : ds.examples) {
      std::vector<int32_t> ref = ex.tgt_ids;
      if (!ref.empty() && ref.back() == Vocabulary::kEos) ref.pop_back();
      refs.push_back(std::move(ref));
    }
    report.by_direction.emplace(dir, corpus_bleu(hyps, refs));
  }
  return report;
}

std::pair<double, double> compute_deltas(const EvalReport& baseline, const EvalReport& current,
                                         const std::string& pair_src, const std::string& pair_tgt,
                                         const std::string& generic_domain) {
  if (baseline.by_direction.size() != current.by_direction.size())
    throw contract_error("compute_deltas: reports cover different direction sets");
  for (const auto& [dir, _] : baseline.by_direction)
    if (!current.by_direction.count(dir))
      throw contract_error("compute_deltas: current report missing " + dir.str());
  const Direction pair_dir{pair_src, pair_tgt, generic_domain};
  const double delta1 = baseline.bleu(pair_dir) - current.bleu(pair_dir);
  double sum = 0.0;
  int64_t n = 0;
  for (const auto& [dir, b] : baseline.by_direction) {
    if (dir.domain != generic_domain || dir == pair_dir) continue;
    sum += b.score - current.bleu(dir);
    ++n;
  }
  return {delta1, n > 0 ? sum / static_cast<double>(n) : 0.0};
}

std::string report_csv_header() { return "run_id,step,src_lang,tgt_lang,domain,bleu,p1,p2,p3,p4,bp"; }

void write_report_csv(const std::string& path, const std::vector<ReportRow>& rows) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw data_error("cannot write report CSV: " + path);
  out << report_csv_header() << '\n';
  char buf[256];
  for (const auto& r : rows) {
    std::snprintf(buf, sizeof(buf), "%s,%lld,%s,%s,%s,%.6f,%.6f,%.6f,%.6f,%.6f,%.6f",
                  r.run_id.c_str(), static_cast<long long>(r.step), r.direction.src.c_str(),
                  r.direction.tgt.c_str(), r.direction.domain.c_str(), r.bleu.score,
                  r.bleu.precisions[0], r.bleu.precisions[1], r.bleu.precisions[2],
                  r.bleu.precisions[3], r.bleu.brevity_penalty);
    out << buf << '\n';
  }
}

std::vector<ReportRow> read_report_csv(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw data_error("cannot read report CSV: " + path);
  std::vector<ReportRow> rows;
  std::string line;
  bool first = true;
  int64_t lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    if (!line.empty() && line.back() == '\r') line.pop_back();
    if (line.empty()) continue;
    if (first) {
      first = false;
      if (line != report_csv_header())
        throw data_error(path + ":1: unexpected report CSV header");
      continue;
    }
    std::vector<std::string> cols;
    std::istringstream ss(line);
    std::string col;
    while (std::getline(ss, col, ',')) cols.push_back(col);
    if (cols.size() != 11)
      throw data_error(path + ":" + std::to_string(lineno) + ": expected 11 columns");
    ReportRow r;
    r.run_id = cols[0];
    r.step = std::stoll(cols[1]);
    r.direction = {cols[2], cols[3], cols[4]};
    r.bleu.score = std::stod(cols[5]);
    for (int i = 0; i < 4; ++i) r.bleu.precisions[i] = std::stod(cols[static_cast<size_t>(6 + i)]);
    r.bleu.brevity_penalty = std::stod(cols[10]);
    rows.push_back(std::move(r));
  }
  return rows;
}

}  // namespace mnmt
