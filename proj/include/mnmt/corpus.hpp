#pragma once

#include <cstdint>
#include <map>
#include <optional>
#include <string>
#include <unordered_map>
#include <vector>

#include "mnmt/common.hpp"
#include "mnmt/tensor.hpp"

namespace mnmt {

// Shared token table. Ids: pad=0, bos=1, eos=2, unk=3, then one token per
// language (sorted by code), then content tokens.
class Vocabulary {
 public:
  static constexpr int32_t kPad = 0;
  static constexpr int32_t kBos = 1;
  static constexpr int32_t kEos = 2;
  static constexpr int32_t kUnk = 3;
  static constexpr int32_t kReserved = 4;

  Vocabulary() = default;

  // languages must be sorted and unique; content tokens keep their order.
  static Vocabulary build(std::vector<std::string> languages,
                          const std::vector<std::string>& content_tokens);

  int32_t size() const { return static_cast<int32_t>(id_to_token_.size()); }
  int32_t content_begin() const { return kReserved + static_cast<int32_t>(languages_.size()); }
  const std::vector<std::string>& languages() const { return languages_; }

  int32_t lang_token_id(const std::string& code) const;  // config_error if unknown
  static std::string lang_token(const std::string& code) { return "__" + code + "__"; }

  // unk for unknown content tokens
  int32_t id_of(const std::string& token) const;
  const std::string& token_of(int32_t id) const;

  // Content tokens only, one per line; reserved and language ids are implied.
  void save(const std::string& path) const;
  static Vocabulary load(const std::string& path, std::vector<std::string> languages);

 private:
  std::vector<std::string> id_to_token_;
  std::unordered_map<std::string, int32_t> token_to_id_;
  std::vector<std::string> languages_;
};

enum class ReorderRule { identity, swap_adjacent_pairs, reverse_window_3 };

std::string to_string(ReorderRule r);
ReorderRule reorder_rule_from_string(const std::string& s);

// Both non-identity rules are involutions, so the inverse reorder is the
// rule itself.
std::vector<int32_t> apply_reorder(ReorderRule r, const std::vector<int32_t>& seq);

// A synthetic language: a seeded permutation of the pivot concept ids plus a
// positional reorder rule. Exact translation between any two languages is
// computable by composing these maps.
struct LanguageSpec {
  std::string code;
  uint64_t bijection_seed = 0;
  ReorderRule reorder = ReorderRule::identity;
};

struct DomainSpec {
  std::string name;
  int32_t concept_lo = 0;  // pivot concept id range [lo, hi)
  int32_t concept_hi = 0;
  int32_t min_len = 3;
  int32_t max_len = 12;
};

struct PairRequest {
  std::string src, tgt, domain;
  int64_t train = 0, val = 0, test = 0;
};

struct CorpusSpec {
  std::vector<LanguageSpec> languages;
  std::vector<DomainSpec> domains;
  std::vector<PairRequest> pairs;

  int32_t concept_count() const;
  const LanguageSpec& language(const std::string& code) const;  // config_error
  const DomainSpec& domain(const std::string& name) const;      // config_error
  void validate() const;

  static CorpusSpec from_json_text(const std::string& text);
  std::string to_json_text() const;
};

struct ParallelExample {
  std::vector<int32_t> src_ids;  // content ids, eos-terminated
  std::vector<int32_t> tgt_ids;  // content ids, eos-terminated
  std::string src_lang, tgt_lang, domain;
};

struct Dataset {
  std::vector<ParallelExample> examples;
  int64_t size() const { return static_cast<int64_t>(examples.size()); }
  bool empty() const { return examples.empty(); }
  void append(const Dataset& other) {
    examples.insert(examples.end(), other.examples.begin(), other.examples.end());
  }
};

// Padded model input. src rows carry the source-language token up front and
// eos at the end; tgt_in starts with the target-language token in place of
// bos; tgt_out is the shifted reference ending in eos.
struct Batch {
  IdMatrix src;       // [b, s]
  IdMatrix src_mask;  // 1 on non-pad
  IdMatrix tgt_in;    // [b, t]
  IdMatrix tgt_out;   // [b, t]
  IdMatrix tgt_mask;  // 1 on non-pad positions of tgt_out
  std::vector<int32_t> src_lang_ids, tgt_lang_ids;
  int64_t size() const { return src.rows; }
};

Batch make_batch(const std::vector<const ParallelExample*>& examples, const Vocabulary& vocab);
Batch make_batch(const Dataset& ds, const Vocabulary& vocab);

// Surface word of `lang` for pivot concept `concept_id`.
std::string surface_token(const CorpusSpec& spec, const std::string& lang, int32_t concept_id);

// Vocabulary covering every language's surface form of every concept.
Vocabulary build_vocabulary(const CorpusSpec& spec);

// Exact translation oracle over token ids from the shared vocab.
std::vector<int32_t> oracle_translate(const CorpusSpec& spec, const Vocabulary& vocab,
                                      const std::vector<int32_t>& src_ids,
                                      const std::string& src_lang, const std::string& tgt_lang);

// Deterministic generation of one (pair, domain, split). split_tag picks an
// independent stream, so emission order does not matter.
Dataset generate_pair(const CorpusSpec& spec, const Vocabulary& vocab, const PairRequest& pair,
                      const std::string& split_tag, int64_t count, uint64_t seed);

// Writes vocab.txt, corpus.json and one TSV per (pair, domain, split) into
// out_dir. Returns the written file names (sorted).
std::vector<std::string> generate_corpus(const CorpusSpec& spec, uint64_t seed,
                                         const std::string& out_dir);

std::vector<int32_t> tokenize(const std::string& text, const Vocabulary& vocab);
std::string detokenize(const std::vector<int32_t>& ids, const Vocabulary& vocab);

// 5-column TSV: src_lang, tgt_lang, domain, src_text, tgt_text. LF or CRLF.
Dataset load_tsv(const std::string& path, const Vocabulary& vocab);
// Builds a fresh vocabulary from the file (languages and words sorted).
std::pair<Dataset, Vocabulary> load_tsv_build_vocab(const std::string& path);

void write_tsv(const std::string& path, const Dataset& ds, const Vocabulary& vocab);

// Epoch iterator; every example appears exactly once per epoch, order keyed
// by (seed, epoch) when shuffling.
class BatchIterator {
 public:
  BatchIterator(const Dataset& ds, const Vocabulary& vocab, int64_t batch_size, uint64_t seed,
                bool shuffle);
  Batch next();
  int64_t epoch() const { return epoch_; }
  int64_t batches_per_epoch() const;

 private:
  void start_epoch();

  const Dataset* ds_;
  const Vocabulary* vocab_;
  int64_t batch_size_;
  uint64_t seed_;
  bool shuffle_;
  std::vector<int64_t> order_;
  int64_t pos_ = 0;
  int64_t epoch_ = 0;
};

}  // namespace mnmt
