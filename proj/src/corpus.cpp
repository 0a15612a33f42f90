#include "mnmt/corpus.hpp"

#include <algorithm>
#include <filesystem>
#include <fstream>
#include <set>
#include <sstream>

#include <json.hpp>

namespace mnmt {

using nlohmann::json;

Vocabulary Vocabulary::build(std::vector<std::string> languages,
                             const std::vector<std::string>& content_tokens) {
  Vocabulary v;
  if (!std::is_sorted(languages.begin(), languages.end()))
    std::sort(languages.begin(), languages.end());
  languages.erase(std::unique(languages.begin(), languages.end()), languages.end());
  v.languages_ = languages;
  v.id_to_token_ = {"<pad>", "<bos>", "<eos>", "<unk>"};
  for (const auto& code : v.languages_) v.id_to_token_.push_back(lang_token(code));
  for (const auto& t : content_tokens) v.id_to_token_.push_back(t);
  for (size_t i = 0; i < v.id_to_token_.size(); ++i) {
    auto [it, fresh] = v.token_to_id_.emplace(v.id_to_token_[i], static_cast<int32_t>(i));
    if (!fresh) throw config_error("duplicate token in vocabulary: " + v.id_to_token_[i]);
  }
  return v;
}

int32_t Vocabulary::lang_token_id(const std::string& code) const {
  auto it = std::lower_bound(languages_.begin(), languages_.end(), code);
  if (it == languages_.end() || *it != code)
    throw config_error("unknown language code: " + code);
  return kReserved + static_cast<int32_t>(it - languages_.begin());
}

int32_t Vocabulary::id_of(const std::string& token) const {
  auto it = token_to_id_.find(token);
  return it == token_to_id_.end() ? kUnk : it->second;
}

const std::string& Vocabulary::token_of(int32_t id) const {
  if (id < 0 || id >= size())
    throw index_error("token id " + std::to_string(id) + " out of range");
  return id_to_token_[static_cast<size_t>(id)];
}

void Vocabulary::save(const std::string& path) const {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw data_error("cannot write vocabulary file: " + path);
  for (int32_t i = content_begin(); i < size(); ++i)
    out << id_to_token_[static_cast<size_t>(i)] << '\n';
}

Vocabulary Vocabulary::load(const std::string& path, std::vector<std::string> languages) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw data_error("cannot read vocabulary file: " + path);
  std::vector<std::string> tokens;
  std::string line;
  while (std::getline(in, line)) {
    if (!line.empty() && line.back() == '\r') line.pop_back();
    if (!line.empty()) tokens.push_back(line);
  }
  return build(std::move(languages), tokens);
}

std::string to_string(ReorderRule r) {
  switch (r) {
    case ReorderRule::identity: return "identity";
    case ReorderRule::swap_adjacent_pairs: return "swap-adjacent-pairs";
    case ReorderRule::reverse_window_3: return "reverse-window-3";
  }
  throw contract_error("unknown reorder rule");
}

ReorderRule reorder_rule_from_string(const std::string& s) {
  if (s == "identity") return ReorderRule::identity;
  if (s == "swap-adjacent-pairs") return ReorderRule::swap_adjacent_pairs;
  if (s == "reverse-window-3") return ReorderRule::reverse_window_3;
  throw config_error("unknown reorder rule: " + s);
}

std::vector<int32_t> apply_reorder(ReorderRule r, const std::vector<int32_t>& seq) {
  std::vector<int32_t> out = seq;
  const size_t n = seq.size();
  switch (r) {
    case ReorderRule::identity: break;
    case ReorderRule::swap_adjacent_pairs:
      for (size_t i = 0; i + 1 < n; i += 2) std::swap(out[i], out[i + 1]);
      break;
    case ReorderRule::reverse_window_3:
      for (size_t i = 0; i < n; i += 3) {
        size_t j = std::min(i + 3, n);
        std::reverse(out.begin() + static_cast<ptrdiff_t>(i), out.begin() + static_cast<ptrdiff_t>(j));
      }
      break;
  }
  return out;
}

int32_t CorpusSpec::concept_count() const {
  int32_t hi = 0;
  for (const auto& d : domains) hi = std::max(hi, d.concept_hi);
  return hi;
}

const LanguageSpec& CorpusSpec::language(const std::string& code) const {
  for (const auto& l : languages)
    if (l.code == code) return l;
  throw config_error("unknown language code: " + code);
}

const DomainSpec& CorpusSpec::domain(const std::string& name) const {
  for (const auto& d : domains)
    if (d.name == name) return d;
  throw config_error("unknown domain: " + name);
}

void CorpusSpec::validate() const {
  if (languages.size() < 2) throw config_error("corpus spec needs at least 2 languages");
  if (domains.empty()) throw config_error("corpus spec needs at least 1 domain");
  std::set<std::string> codes;
  for (const auto& l : languages)
    if (!codes.insert(l.code).second) throw config_error("duplicate language code: " + l.code);
  for (const auto& d : domains) {
    if (d.concept_lo < 0 || d.concept_hi <= d.concept_lo)
      throw config_error("domain " + d.name + " has empty concept range");
    if (d.min_len < 1 || d.max_len < d.min_len)
      throw config_error("domain " + d.name + " has invalid length bounds");
  }
  for (const auto& p : pairs) {
    language(p.src);
    language(p.tgt);
    domain(p.domain);
    if (p.train + p.val + p.test < 1)
      throw config_error("pair " + p.src + "-" + p.tgt + " requests no examples");
  }
}

CorpusSpec CorpusSpec::from_json_text(const std::string& text) {
  json j;
  try {
    j = json::parse(text);
  } catch (const json::exception& e) {
    throw config_error(std::string("corpus spec is not valid JSON: ") + e.what());
  }
  CorpusSpec spec;
  try {
    for (const auto& l : j.at("languages")) {
      LanguageSpec ls;
      ls.code = l.at("code").get<std::string>();
      ls.bijection_seed = l.at("seed").get<uint64_t>();
      ls.reorder = reorder_rule_from_string(l.value("reorder", "identity"));
      spec.languages.push_back(std::move(ls));
    }
    for (const auto& d : j.at("domains")) {
      DomainSpec ds;
      ds.name = d.at("name").get<std::string>();
      ds.concept_lo = d.at("concept_lo").get<int32_t>();
      ds.concept_hi = d.at("concept_hi").get<int32_t>();
      ds.min_len = d.value("min_len", 3);
      ds.max_len = d.value("max_len", 12);
      spec.domains.push_back(std::move(ds));
    }
    for (const auto& p : j.at("pairs")) {
      PairRequest pr;
      pr.src = p.at("src").get<std::string>();
      pr.tgt = p.at("tgt").get<std::string>();
      pr.domain = p.at("domain").get<std::string>();
      pr.train = p.value("train", int64_t{0});
      pr.val = p.value("val", int64_t{0});
      pr.test = p.value("test", int64_t{0});
      spec.pairs.push_back(std::move(pr));
    }
  } catch (const json::exception& e) {
    throw config_error(std::string("corpus spec missing field: ") + e.what());
  }
  spec.validate();
  return spec;
}

std::string CorpusSpec::to_json_text() const {
  json j;
  j["languages"] = json::array();
  for (const auto& l : languages)
    j["languages"].push_back(
        {{"code", l.code}, {"seed", l.bijection_seed}, {"reorder", to_string(l.reorder)}});
  j["domains"] = json::array();
  for (const auto& d : domains)
    j["domains"].push_back({{"name", d.name},
                            {"concept_lo", d.concept_lo},
                            {"concept_hi", d.concept_hi},
                            {"min_len", d.min_len},
                            {"max_len", d.max_len}});
  j["pairs"] = json::array();
  for (const auto& p : pairs)
    j["pairs"].push_back({{"src", p.src},
                          {"tgt", p.tgt},
                          {"domain", p.domain},
                          {"train", p.train},
                          {"val", p.val},
                          {"test", p.test}});
  return j.dump(2) + "\n";
}

namespace {

// permutation of [0, n) from the language's bijection seed
std::vector<int32_t> bijection(const LanguageSpec& lang, int32_t n) {
  std::vector<int32_t> perm(static_cast<size_t>(n));
  for (int32_t i = 0; i < n; ++i) perm[static_cast<size_t>(i)] = i;
  Rng rng = stream_rng(lang.bijection_seed, "bijection." + lang.code);
  rng.shuffle(perm);
  return perm;
}

std::vector<int32_t> invert(const std::vector<int32_t>& perm) {
  std::vector<int32_t> inv(perm.size());
  for (size_t i = 0; i < perm.size(); ++i)
    inv[static_cast<size_t>(perm[i])] = static_cast<int32_t>(i);
  return inv;
}

}  // namespace

std::string surface_token(const CorpusSpec& spec, const std::string& lang, int32_t concept_id) {
  const LanguageSpec& ls = spec.language(lang);
  const int32_t n = spec.concept_count();
  if (concept_id < 0 || concept_id >= n)
    throw index_error("concept id " + std::to_string(concept_id) + " out of range");
  int32_t w = bijection(ls, n)[static_cast<size_t>(concept_id)];
  char buf[16];
  std::snprintf(buf, sizeof(buf), "%s_w%03d", ls.code.c_str(), w);
  return buf;
}

Vocabulary build_vocabulary(const CorpusSpec& spec) {
  std::vector<std::string> langs;
  for (const auto& l : spec.languages) langs.push_back(l.code);
  std::sort(langs.begin(), langs.end());
  const int32_t n = spec.concept_count();
  std::vector<std::string> content;
  for (const auto& code : langs) {
    for (int32_t w = 0; w < n; ++w) {
      char buf[16];
      std::snprintf(buf, sizeof(buf), "%s_w%03d", code.c_str(), w);
      content.push_back(buf);
    }
  }
  return Vocabulary::build(std::move(langs), content);
}

namespace {

// token ids -> pivot concept ids (eos excluded)
std::vector<int32_t> to_pivot(const Vocabulary& vocab, const std::vector<int32_t>& ids,
                              const LanguageSpec& lang, const std::vector<int32_t>& inv_perm) {
  std::vector<int32_t> words;
  for (int32_t id : ids) {
    if (id == Vocabulary::kEos) break;
    const std::string& tok = vocab.token_of(id);
    // token form "<code>_wNNN"
    auto pos = tok.rfind("_w");
    if (pos == std::string::npos || tok.substr(0, pos) != lang.code)
      throw data_error("token " + tok + " is not a " + lang.code + " surface word");
    words.push_back(static_cast<int32_t>(std::stoi(tok.substr(pos + 2))));
  }
  // undo positional reorder, then undo the bijection
  words = apply_reorder(lang.reorder, words);  // involution
  for (auto& w : words) w = inv_perm[static_cast<size_t>(w)];
  return words;
}

std::vector<int32_t> from_pivot(const Vocabulary& vocab, const std::vector<int32_t>& concepts,
                                const LanguageSpec& lang, const std::vector<int32_t>& perm) {
  std::vector<int32_t> words;
  words.reserve(concepts.size());
  for (int32_t c : concepts) words.push_back(perm[static_cast<size_t>(c)]);
  words = apply_reorder(lang.reorder, words);
  std::vector<int32_t> ids;
  ids.reserve(words.size() + 1);
  for (int32_t w : words) {
    char buf[16];
    std::snprintf(buf, sizeof(buf), "%s_w%03d", lang.code.c_str(), w);
    ids.push_back(vocab.id_of(buf));
  }
  ids.push_back(Vocabulary::kEos);
  return ids;
}

}  // namespace

std::vector<int32_t> oracle_translate(const CorpusSpec& spec, const Vocabulary& vocab,
                                      const std::vector<int32_t>& src_ids,
                                      const std::string& src_lang, const std::string& tgt_lang) {
  const LanguageSpec& src = spec.language(src_lang);
  const LanguageSpec& tgt = spec.language(tgt_lang);
  const int32_t n = spec.concept_count();
  auto pivot = to_pivot(vocab, src_ids, src, invert(bijection(src, n)));
  return from_pivot(vocab, pivot, tgt, bijection(tgt, n));
}

Dataset generate_pair(const CorpusSpec& spec, const Vocabulary& vocab, const PairRequest& pair,
                      const std::string& split_tag, int64_t count, uint64_t seed) {
  const DomainSpec& dom = spec.domain(pair.domain);
  const LanguageSpec& src = spec.language(pair.src);
  const LanguageSpec& tgt = spec.language(pair.tgt);
  const int32_t n = spec.concept_count();
  auto src_perm = bijection(src, n);
  auto tgt_perm = bijection(tgt, n);

  Rng rng = stream_rng(seed, "gen." + pair.src + "." + pair.tgt + "." + pair.domain + "." + split_tag);
  Dataset ds;
  ds.examples.reserve(static_cast<size_t>(count));
  for (int64_t i = 0; i < count; ++i) {
    int32_t len = dom.min_len + static_cast<int32_t>(rng.below(dom.max_len - dom.min_len + 1));
    std::vector<int32_t> pivot(static_cast<size_t>(len));
    for (auto& c : pivot)
      c = dom.concept_lo + static_cast<int32_t>(rng.below(dom.concept_hi - dom.concept_lo));
    ParallelExample ex;
    ex.src_ids = from_pivot(vocab, pivot, src, src_perm);
    ex.tgt_ids = from_pivot(vocab, pivot, tgt, tgt_perm);
    ex.src_lang = pair.src;
    ex.tgt_lang = pair.tgt;
    ex.domain = pair.domain;
    ds.examples.push_back(std::move(ex));
  }
  return ds;
}

std::vector<std::string> generate_corpus(const CorpusSpec& spec, uint64_t seed,
                                         const std::string& out_dir) {
  spec.validate();
  std::filesystem::create_directories(out_dir);
  Vocabulary vocab = build_vocabulary(spec);
  vocab.save(out_dir + "/vocab.txt");
  {
    std::ofstream out(out_dir + "/corpus.json", std::ios::binary);
    out << spec.to_json_text();
  }
  std::vector<std::string> files = {"corpus.json", "vocab.txt"};
  for (const auto& pair : spec.pairs) {
    const std::pair<const char*, int64_t> splits[] = {
        {"train", pair.train}, {"val", pair.val}, {"test", pair.test}};
    for (const auto& [tag, count] : splits) {
      if (count <= 0) continue;
      Dataset ds = generate_pair(spec, vocab, pair, tag, count, seed);
      std::string name = pair.src + "2" + pair.tgt + "." + pair.domain + "." + tag + ".tsv";
      write_tsv(out_dir + "/" + name, ds, vocab);
      files.push_back(name);
    }
  }
  std::sort(files.begin(), files.end());
  return files;
}

std::vector<int32_t> tokenize(const std::string& text, const Vocabulary& vocab) {
  std::vector<int32_t> ids;
  std::istringstream ss(text);
  std::string word;
  while (ss >> word) ids.push_back(vocab.id_of(word));
  ids.push_back(Vocabulary::kEos);
  return ids;
}

std::string detokenize(const std::vector<int32_t>& ids, const Vocabulary& vocab) {
  std::string out;
  for (int32_t id : ids) {
    if (id == Vocabulary::kEos) break;
    if (!out.empty()) out += ' ';
    out += vocab.token_of(id);
  }
  return out;
}

Dataset load_tsv(const std::string& path, const Vocabulary& vocab) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw data_error("cannot read TSV file: " + path);
  Dataset ds;
  std::string line;
  int64_t lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    if (!line.empty() && line.back() == '\r') line.pop_back();
    if (line.empty()) continue;
    std::vector<std::string> cols;
    size_t start = 0;
    while (true) {
      size_t tab = line.find('\t', start);
      cols.push_back(line.substr(start, tab == std::string::npos ? tab : tab - start));
      if (tab == std::string::npos) break;
      start = tab + 1;
    }
    if (cols.size() != 5)
      throw data_error(path + ":" + std::to_string(lineno) + ": expected 5 tab-separated columns, got " +
                       std::to_string(cols.size()));
    vocab.lang_token_id(cols[0]);  // unknown language -> config_error
    vocab.lang_token_id(cols[1]);
    ParallelExample ex;
    ex.src_lang = cols[0];
    ex.tgt_lang = cols[1];
    ex.domain = cols[2];
    ex.src_ids = tokenize(cols[3], vocab);
    ex.tgt_ids = tokenize(cols[4], vocab);
    ds.examples.push_back(std::move(ex));
  }
  return ds;
}

std::pair<Dataset, Vocabulary> load_tsv_build_vocab(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw data_error("cannot read TSV file: " + path);
  std::set<std::string> langs, words;
  std::string line;
  int64_t lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    if (!line.empty() && line.back() == '\r') line.pop_back();
    if (line.empty()) continue;
    std::vector<std::string> cols;
    size_t start = 0;
    while (true) {
      size_t tab = line.find('\t', start);
      cols.push_back(line.substr(start, tab == std::string::npos ? tab : tab - start));
      if (tab == std::string::npos) break;
      start = tab + 1;
    }
    if (cols.size() != 5)
      throw data_error(path + ":" + std::to_string(lineno) + ": expected 5 tab-separated columns, got " +
                       std::to_string(cols.size()));
    langs.insert(cols[0]);
    langs.insert(cols[1]);
    for (int c : {3, 4}) {
      std::istringstream ss(cols[static_cast<size_t>(c)]);
      std::string w;
      while (ss >> w) words.insert(w);
    }
  }
  Vocabulary vocab = Vocabulary::build(std::vector<std::string>(langs.begin(), langs.end()),
                                       std::vector<std::string>(words.begin(), words.end()));
  return {load_tsv(path, vocab), vocab};
}

void write_tsv(const std::string& path, const Dataset& ds, const Vocabulary& vocab) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw data_error("cannot write TSV file: " + path);
  for (const auto& ex : ds.examples) {
    out << ex.src_lang << '\t' << ex.tgt_lang << '\t' << ex.domain << '\t'
        << detokenize(ex.src_ids, vocab) << '\t' << detokenize(ex.tgt_ids, vocab) << '\n';
  }
}

Batch make_batch(const std::vector<const ParallelExample*>& examples, const Vocabulary& vocab) {
  if (examples.empty()) throw contract_error("make_batch on empty example list");
  const int64_t b = static_cast<int64_t>(examples.size());
  int64_t s_max = 0, t_max = 0;
  for (const auto* ex : examples) {
    s_max = std::max(s_max, static_cast<int64_t>(ex->src_ids.size()) + 1);  // + lang token
    t_max = std::max(t_max, static_cast<int64_t>(ex->tgt_ids.size()));      // lang tok replaces eos shift
  }
  Batch batch;
  batch.src = IdMatrix(b, s_max, Vocabulary::kPad);
  batch.src_mask = IdMatrix(b, s_max, 0);
  batch.tgt_in = IdMatrix(b, t_max, Vocabulary::kPad);
  batch.tgt_out = IdMatrix(b, t_max, Vocabulary::kPad);
  batch.tgt_mask = IdMatrix(b, t_max, 0);
  for (int64_t i = 0; i < b; ++i) {
    const auto& ex = *examples[static_cast<size_t>(i)];
    int32_t src_lang = vocab.lang_token_id(ex.src_lang);
    int32_t tgt_lang = vocab.lang_token_id(ex.tgt_lang);
    batch.src_lang_ids.push_back(src_lang);
    batch.tgt_lang_ids.push_back(tgt_lang);
    batch.src.at(i, 0) = src_lang;
    for (size_t j = 0; j < ex.src_ids.size(); ++j)
      batch.src.at(i, static_cast<int64_t>(j) + 1) = ex.src_ids[j];
    for (int64_t j = 0; j < static_cast<int64_t>(ex.src_ids.size()) + 1; ++j)
      batch.src_mask.at(i, j) = 1;
    // tgt_ids = (v1..vk, eos); tgt_in = (lang, v1..vk); tgt_out = (v1..vk, eos)
    batch.tgt_in.at(i, 0) = tgt_lang;
    for (size_t j = 0; j + 1 < ex.tgt_ids.size(); ++j)
      batch.tgt_in.at(i, static_cast<int64_t>(j) + 1) = ex.tgt_ids[j];
    for (size_t j = 0; j < ex.tgt_ids.size(); ++j) {
      batch.tgt_out.at(i, static_cast<int64_t>(j)) = ex.tgt_ids[j];
      batch.tgt_mask.at(i, static_cast<int64_t>(j)) = 1;
    }
  }
  return batch;
}

Batch make_batch(const Dataset& ds, const Vocabulary& vocab) {
  std::vector<const ParallelExample*> ptrs;
  ptrs.reserve(ds.examples.size());
  for (const auto& ex : ds.examples) ptrs.push_back(&ex);
  return make_batch(ptrs, vocab);
}

BatchIterator::BatchIterator(const Dataset& ds, const Vocabulary& vocab, int64_t batch_size,
                             uint64_t seed, bool shuffle)
    : ds_(&ds), vocab_(&vocab), batch_size_(batch_size), seed_(seed), shuffle_(shuffle) {
  if (ds.empty()) throw contract_error("batch_iterator on empty dataset");
  if (batch_size < 1) throw contract_error("batch size must be >= 1");
  order_.resize(static_cast<size_t>(ds.size()));
  start_epoch();
}

int64_t BatchIterator::batches_per_epoch() const {
  return (ds_->size() + batch_size_ - 1) / batch_size_;
}

void BatchIterator::start_epoch() {
  for (int64_t i = 0; i < ds_->size(); ++i) order_[static_cast<size_t>(i)] = i;
  if (shuffle_) {
    Rng rng = stream_rng(seed_, "shuffle", static_cast<uint64_t>(epoch_));
    rng.shuffle(order_);
  }
  pos_ = 0;
}

Batch BatchIterator::next() {
  if (pos_ >= ds_->size()) {
    ++epoch_;
    start_epoch();
  }
  int64_t end = std::min(pos_ + batch_size_, ds_->size());
  std::vector<const ParallelExample*> ptrs;
  ptrs.reserve(static_cast<size_t>(end - pos_));
  for (int64_t i = pos_; i < end; ++i)
    ptrs.push_back(&ds_->examples[static_cast<size_t>(order_[static_cast<size_t>(i)])]);
  pos_ = end;
  return make_batch(ptrs, *vocab_);
}

}  // namespace mnmt
