#include "mnmt/cli.hpp"

#include <unistd.h>

#include <algorithm>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <sstream>

#include <CLI11.hpp>
#include <json.hpp>

#include "mnmt/checkpoint.hpp"
#include "mnmt/manifest.hpp"
#include "mnmt/svg.hpp"

namespace mnmt {

using nlohmann::json;
namespace fs = std::filesystem;

const std::string& config_schema_text() {
  static const std::string schema = R"JSON({
  "schema_version": 1,
  "model": {
    "d_model": 64,
    "n_heads": 4,
    "n_encoder_layers": 2,
    "n_decoder_layers": 2,
    "ffn_dim": 256,
    "vocab_size": 0,
    "max_seq_len": 32,
    "dropout_p": 0.1,
    "pde_mode": "none",
    "pde_layers": [],
    "tie_embeddings": false,
    "sinusoidal_positions": false
  },
  "train": {
    "batch_size": 32,
    "max_steps": 1000,
    "label_smoothing": 0.1,
    "dropout_p": 0.1,
    "weight_decay": 0.0,
    "base_lr": 0.001,
    "schedule": "constant",
    "warmup_frac": 0.1,
    "grad_clip_norm": 0.0,
    "seed": 1
  },
  "smart": {
    "lambda_s": 1.0,
    "epsilon": 1e-5,
    "sigma": 1e-5,
    "t_x_tilde": 1,
    "eta": 0.001,
    "beta": 0.1,
    "clip_enabled": true,
    "clip_guard": 1e-8,
    "p_norm": "inf",
    "perturb_decoder": false
  },
  "search": {
    "lr_grid": [3e-4, 1e-4, 3e-5, 1e-5],
    "t_max": 600,
    "eval_every": 150,
    "eps1": 2.0,
    "eps2": 1.0,
    "eps3": 1.0,
    "combinator": "and",
    "freeze_grid": ["none", "encoder-embeddings"]
  },
  "eval_every": 200,
  "max_decode_len": 24,
  "eval_split": "val",
  "train_domains": ["generic"]
})JSON";
  return schema;
}

namespace {

void deep_merge(json& base, const json& overlay, const std::string& path) {
  for (auto it = overlay.begin(); it != overlay.end(); ++it) {
    const std::string key_path = path.empty() ? it.key() : path + "." + it.key();
    if (!base.contains(it.key()))
      throw config_error("unknown config key: " + key_path);
    if (base[it.key()].is_object() && it.value().is_object())
      deep_merge(base[it.key()], it.value(), key_path);
    else
      base[it.key()] = it.value();
  }
}

// MNMTLAB_TRAIN__BASE_LR=3e-4 overrides train.base_lr; single names override
// top-level keys.
void apply_env_overrides(json& cfg) {
  for (char** e = environ; *e; ++e) {
    std::string entry = *e;
    if (entry.rfind("MNMTLAB_", 0) != 0) continue;
    const size_t eq = entry.find('=');
    if (eq == std::string::npos) continue;
    std::string key = entry.substr(8, eq - 8);
    const std::string value = entry.substr(eq + 1);
    std::transform(key.begin(), key.end(), key.begin(),
                   [](unsigned char c) { return static_cast<char>(std::tolower(c)); });
    // MNMTLAB_JOBS / MNMTLAB_THREADS are process options, not config keys
    if (key == "jobs" || key == "threads") continue;
    std::vector<std::string> parts;
    size_t start = 0;
    while (true) {
      size_t sep = key.find("__", start);
      parts.push_back(key.substr(start, sep == std::string::npos ? sep : sep - start));
      if (sep == std::string::npos) break;
      start = sep + 2;
    }
    json* node = &cfg;
    bool ok = true;
    for (size_t i = 0; i + 1 < parts.size(); ++i) {
      if (!node->contains(parts[i]) || !(*node)[parts[i]].is_object()) {
        ok = false;
        break;
      }
      node = &(*node)[parts[i]];
    }
    if (!ok || !node->contains(parts.back()))
      throw config_error("environment override names unknown config key: MNMTLAB_" +
                         entry.substr(8, eq - 8));
    json& slot = (*node)[parts.back()];
    try {
      if (slot.is_string())
        slot = value;
      else
        slot = json::parse(value);
    } catch (const json::exception&) {
      throw config_error("cannot parse environment override value: " + value);
    }
  }
}

ExperimentConfig config_from_json(const json& j) {
  ExperimentConfig ec;
  const json& m = j.at("model");
  ec.model.d_model = m.at("d_model").get<int64_t>();
  ec.model.n_heads = m.at("n_heads").get<int64_t>();
  ec.model.n_encoder_layers = m.at("n_encoder_layers").get<int64_t>();
  ec.model.n_decoder_layers = m.at("n_decoder_layers").get<int64_t>();
  ec.model.ffn_dim = m.at("ffn_dim").get<int64_t>();
  ec.model.vocab_size = m.at("vocab_size").get<int64_t>();
  ec.model.max_seq_len = m.at("max_seq_len").get<int64_t>();
  ec.model.dropout_p = m.at("dropout_p").get<double>();
  ec.model.pde_mode = pde_mode_from_string(m.at("pde_mode").get<std::string>());
  ec.model.pde_layers = m.at("pde_layers").get<std::vector<int64_t>>();
  ec.model.tie_embeddings = m.at("tie_embeddings").get<bool>();
  ec.model.sinusoidal_positions = m.at("sinusoidal_positions").get<bool>();

  const json& t = j.at("train");
  ec.train.batch_size = t.at("batch_size").get<int64_t>();
  ec.train.max_steps = t.at("max_steps").get<int64_t>();
  ec.train.label_smoothing = t.at("label_smoothing").get<double>();
  ec.train.dropout_p = t.at("dropout_p").get<double>();
  ec.train.weight_decay = t.at("weight_decay").get<double>();
  ec.train.base_lr = t.at("base_lr").get<double>();
  ec.train.schedule = lr_schedule_from_string(t.at("schedule").get<std::string>());
  ec.train.warmup_frac = t.at("warmup_frac").get<double>();
  ec.train.grad_clip_norm = t.at("grad_clip_norm").get<double>();
  ec.train.seed = t.at("seed").get<uint64_t>();

  const json& s = j.at("smart");
  ec.smart.lambda_s = s.at("lambda_s").get<double>();
  ec.smart.epsilon = s.at("epsilon").get<double>();
  ec.smart.sigma = s.at("sigma").get<double>();
  ec.smart.t_x_tilde = s.at("t_x_tilde").get<int64_t>();
  ec.smart.eta = s.at("eta").get<double>();
  ec.smart.beta = s.at("beta").get<double>();
  ec.smart.clip_enabled = s.at("clip_enabled").get<bool>();
  ec.smart.clip_guard = s.at("clip_guard").get<double>();
  const std::string pn = s.at("p_norm").get<std::string>();
  if (pn == "inf")
    ec.smart.p_norm = SmartConfig::PNorm::inf;
  else if (pn == "2" || pn == "two")
    ec.smart.p_norm = SmartConfig::PNorm::two;
  else
    throw config_error("smart.p_norm must be 'inf' or '2'");
  ec.smart.perturb_decoder = s.at("perturb_decoder").get<bool>();

  const json& se = j.at("search");
  ec.search.lr_grid = se.at("lr_grid").get<std::vector<double>>();
  ec.search.t_max = se.at("t_max").get<int64_t>();
  ec.search.eval_every = se.at("eval_every").get<int64_t>();
  ec.search.eps1 = se.at("eps1").get<double>();
  ec.search.eps2 = se.at("eps2").get<double>();
  ec.search.eps3 = se.at("eps3").get<double>();
  const std::string comb = se.at("combinator").get<std::string>();
  if (comb == "and")
    ec.search.combinator = SearchConfig::Combinator::both;
  else if (comb == "or")
    ec.search.combinator = SearchConfig::Combinator::either;
  else
    throw config_error("search.combinator must be 'and' or 'or'");
  ec.search.freeze_grid = se.at("freeze_grid").get<std::vector<std::string>>();

  ec.eval_every = j.at("eval_every").get<int64_t>();
  ec.max_decode_len = j.at("max_decode_len").get<int64_t>();
  ec.eval_split = j.at("eval_split").get<std::string>();
  ec.train_domains = j.at("train_domains").get<std::vector<std::string>>();
  ec.resolved_json = j.dump();
  return ec;
}

}  // namespace

ExperimentConfig load_experiment_config(const std::string& path_or_empty,
                                        const std::map<std::string, std::string>& overrides) {
  json cfg = json::parse(config_schema_text());
  if (!path_or_empty.empty()) {
    std::ifstream in(path_or_empty, std::ios::binary);
    if (!in) throw config_error("cannot read config file: " + path_or_empty);
    json user;
    try {
      user = json::parse(in);
    } catch (const json::exception& e) {
      throw config_error(path_or_empty + " is not valid JSON: " + e.what());
    }
    if (user.contains("schema_version") &&
        user["schema_version"].get<int>() != cfg["schema_version"].get<int>())
      throw config_error("config schema_version mismatch");
    deep_merge(cfg, user, "");
  }
  apply_env_overrides(cfg);
  for (const auto& [dotted, value] : overrides) {
    json* node = &cfg;
    std::vector<std::string> parts;
    size_t start = 0;
    while (true) {
      size_t dot = dotted.find('.', start);
      parts.push_back(dotted.substr(start, dot == std::string::npos ? dot : dot - start));
      if (dot == std::string::npos) break;
      start = dot + 1;
    }
    for (size_t i = 0; i + 1 < parts.size(); ++i) node = &(*node)[parts[i]];
    json& slot = (*node)[parts.back()];
    if (slot.is_string())
      slot = value;
    else
      slot = json::parse(value);
  }
  return config_from_json(cfg);
}

FreezeSpec freeze_spec_by_name(const std::string& name) {
  FreezeSpec spec;
  if (name.empty() || name == "none") return spec;
  if (name == "encoder-embeddings") {
    spec.patterns = {"encoder.embed.*"};
    return spec;
  }
  if (name == "encoder-first-layer") {
    spec.patterns = {"encoder.embed.*", "encoder.layer0.*"};
    return spec;
  }
  // otherwise: comma-separated glob patterns over parameter names
  size_t start = 0;
  while (start <= name.size()) {
    size_t comma = name.find(',', start);
    std::string pat = name.substr(start, comma == std::string::npos ? comma : comma - start);
    if (!pat.empty()) spec.patterns.push_back(pat);
    if (comma == std::string::npos) break;
    start = comma + 1;
  }
  if (spec.patterns.empty()) throw config_error("empty freeze pattern: " + name);
  return spec;
}

std::map<Direction, std::string> scan_data_dir(const std::string& data_dir,
                                               const std::string& split) {
  if (!fs::is_directory(data_dir)) throw data_error("data dir not found: " + data_dir);
  std::map<Direction, std::string> out;
  const std::string suffix = "." + split + ".tsv";
  std::vector<std::string> names;
  for (const auto& entry : fs::directory_iterator(data_dir))
    if (entry.is_regular_file()) names.push_back(entry.path().filename().string());
  std::sort(names.begin(), names.end());
  for (const auto& name : names) {
    if (name.size() <= suffix.size() ||
        name.compare(name.size() - suffix.size(), suffix.size(), suffix) != 0)
      continue;
    const std::string stem = name.substr(0, name.size() - suffix.size());
    const size_t two = stem.find('2');
    const size_t dot = stem.find('.', two == std::string::npos ? 0 : two);
    if (two == std::string::npos || dot == std::string::npos) continue;
    Direction d;
    d.src = stem.substr(0, two);
    d.tgt = stem.substr(two + 1, dot - two - 1);
    d.domain = stem.substr(dot + 1);
    out.emplace(d, data_dir + "/" + name);
  }
  return out;
}

namespace {

struct DataContext {
  CorpusSpec spec;
  Vocabulary vocab;
  std::string corpus_hash;
};

DataContext load_data_context(const std::string& data_dir) {
  DataContext ctx;
  const std::string spec_path = data_dir + "/corpus.json";
  std::ifstream in(spec_path, std::ios::binary);
  if (!in) throw data_error("data dir has no corpus.json: " + data_dir);
  std::stringstream ss;
  ss << in.rdbuf();
  ctx.spec = CorpusSpec::from_json_text(ss.str());
  std::vector<std::string> langs;
  for (const auto& l : ctx.spec.languages) langs.push_back(l.code);
  ctx.vocab = Vocabulary::load(data_dir + "/vocab.txt", langs);
  ctx.corpus_hash = file_hash_hex(data_dir + "/vocab.txt");
  return ctx;
}

std::map<Direction, Dataset> load_direction_datasets(const std::map<Direction, std::string>& files,
                                                     const Vocabulary& vocab) {
  std::map<Direction, Dataset> out;
  for (const auto& [dir, path] : files) out.emplace(dir, load_tsv(path, vocab));
  return out;
}

std::vector<ReportRow> report_rows(const std::string& run_id, int64_t step,
                                   const EvalReport& rep) {
  std::vector<ReportRow> rows;
  for (const auto& [dir, bleu] : rep.by_direction) rows.push_back({run_id, step, dir, bleu});
  return rows;
}

int64_t env_jobs_default() {
  const char* env = std::getenv("MNMTLAB_JOBS");
  if (!env) return 1;
  return std::max<int64_t>(1, std::atoll(env));
}

std::optional<uint64_t> env_seed() {
  const char* env = std::getenv("MNMTLAB_SEED");
  if (!env) return std::nullopt;
  return static_cast<uint64_t>(std::strtoull(env, nullptr, 10));
}

}  // namespace

int cmd_gen_data(const GenDataOptions& opt) {
  std::ifstream in(opt.spec_path, std::ios::binary);
  if (!in) throw data_error("cannot read corpus spec: " + opt.spec_path);
  std::stringstream ss;
  ss << in.rdbuf();
  CorpusSpec spec = CorpusSpec::from_json_text(ss.str());
  if (opt.dry_run) {
    std::cout << "gen-data: spec ok (" << spec.languages.size() << " languages, "
              << spec.pairs.size() << " pairs)\n";
    return kExitOk;
  }
  auto files = generate_corpus(spec, opt.seed, opt.out_dir);
  RunManifest m = make_manifest("gen-data", spec.to_json_text(),
                                {{opt.spec_path, file_hash_hex(opt.spec_path)}}, "", opt.seed);
  m.finished_at = now_iso8601();
  write_manifest(opt.out_dir + "/manifest.json", m);
  std::cout << "gen-data: wrote " << files.size() << " files to " << opt.out_dir << "\n";
  return kExitOk;
}

namespace {

// Shared pretrain/finetune loop: trains on `train_data`, evaluates every
// eval_every steps (and at the final step) on `eval_sets`.
struct TrainLoopResult {
  std::vector<ReportRow> rows;
  EvalReport baseline, final_report;
};

TrainLoopResult run_training(const std::string& run_id, const ModelConfig& cfg,
                             ParamMap<float>& params, const Dataset& train_data,
                             const Vocabulary& vocab,
                             const std::map<Direction, Dataset>& eval_sets,
                             const TrainConfig& tc, const std::set<std::string>& frozen,
                             bool use_smart, const SmartConfig& sc, int64_t eval_every,
                             int64_t max_decode_len) {
  TrainLoopResult out;
  AdamState<float> st = AdamState<float>::init(params, tc.base_lr, tc.weight_decay);
  BatchIterator iter(train_data, vocab, tc.batch_size, tc.seed, /*shuffle=*/true);
  out.baseline = evaluate(cfg, params, vocab, eval_sets, max_decode_len);
  auto rows0 = report_rows(run_id, 0, out.baseline);
  out.rows.insert(out.rows.end(), rows0.begin(), rows0.end());
  for (int64_t step = 1; step <= tc.max_steps; ++step) {
    Batch batch = iter.next();
    StepStats stats = use_smart ? smart_step(cfg, params, batch, st, tc, sc, frozen)
                                : train_step(cfg, params, batch, st, tc, frozen);
    if (step % eval_every == 0 || step == tc.max_steps) {
      EvalReport rep = evaluate(cfg, params, vocab, eval_sets, max_decode_len);
      auto rows = report_rows(run_id, step, rep);
      out.rows.insert(out.rows.end(), rows.begin(), rows.end());
      std::cerr << run_id << " step " << step << " loss " << stats.loss << " mean-bleu "
                << rep.mean_bleu() << "\n";
      if (step == tc.max_steps) out.final_report = rep;
    }
  }
  return out;
}

}  // namespace

int cmd_pretrain(const PretrainOptions& opt) {
  ExperimentConfig ec = load_experiment_config(opt.config_path, {});
  if (opt.seed) ec.train.seed = *opt.seed;
  else if (auto s = env_seed()) ec.train.seed = *s;
  DataContext data = load_data_context(opt.data_dir);
  ModelConfig cfg = ec.model;
  if (cfg.vocab_size == 0) cfg.vocab_size = data.vocab.size();
  cfg.validate();
  ec.train.validate();
  if (opt.dry_run) {
    std::cout << "pretrain: config ok\n";
    return kExitOk;
  }
  fs::create_directories(opt.out_dir);

  Dataset train_data;
  auto train_files = scan_data_dir(opt.data_dir, "train");
  for (const auto& [dir, path] : train_files) {
    if (std::find(ec.train_domains.begin(), ec.train_domains.end(), dir.domain) ==
        ec.train_domains.end())
      continue;
    train_data.append(load_tsv(path, data.vocab));
  }
  if (train_data.empty()) throw data_error("no training data for domains in " + opt.data_dir);

  auto eval_files = scan_data_dir(opt.data_dir, "test");
  std::map<Direction, Dataset> eval_sets = load_direction_datasets(eval_files, data.vocab);
  for (auto it = eval_sets.begin(); it != eval_sets.end();) {
    if (std::find(ec.train_domains.begin(), ec.train_domains.end(), it->first.domain) ==
        ec.train_domains.end())
      it = eval_sets.erase(it);
    else
      ++it;
  }
  if (eval_sets.empty()) throw data_error("no test data in " + opt.data_dir);

  ParamMap<float> params = init_params<float>(cfg, ec.train.seed);
  RunManifest m = make_manifest("pretrain", ec.resolved_json,
                                {{opt.data_dir + "/vocab.txt", data.corpus_hash}}, "",
                                ec.train.seed);
  TrainLoopResult res =
      run_training(m.run_id, cfg, params, train_data, data.vocab, eval_sets, ec.train, {},
                   false, ec.smart, ec.eval_every, ec.max_decode_len);

  Checkpoint ckpt = checkpoint_from_params(cfg, params, ec.train.seed, ec.train.seed,
                                           data.corpus_hash);
  ckpt.step = ec.train.max_steps;
  save_checkpoint(opt.out_dir + "/model.ckpt", ckpt);
  write_report_csv(opt.out_dir + "/report.csv", res.rows);
  m.finished_at = now_iso8601();
  write_manifest(opt.out_dir + "/manifest.json", m);
  std::cout << "pretrain: final mean BLEU " << res.final_report.mean_bleu() << "\n";
  return kExitOk;
}

namespace {

std::pair<std::string, std::string> parse_pair(const std::string& pair) {
  const size_t dash = pair.find('-');
  if (dash == std::string::npos || dash == 0 || dash + 1 >= pair.size())
    throw config_error("pair must be 'src-tgt', got: " + pair);
  return {pair.substr(0, dash), pair.substr(dash + 1)};
}

std::map<Direction, Dataset> eval_sets_for_finetune(const DataContext& data,
                                                    const std::string& data_dir,
                                                    const std::string& split,
                                                    const std::string& domain) {
  auto files = scan_data_dir(data_dir, split);
  if (files.empty()) {
    files = scan_data_dir(data_dir, "test");
    std::cerr << "note: no '" << split << "' split found, evaluating on 'test'\n";
  }
  std::map<Direction, Dataset> sets = load_direction_datasets(files, data.vocab);
  for (auto it = sets.begin(); it != sets.end();) {
    if (it->first.domain != "generic" && it->first.domain != domain)
      it = sets.erase(it);
    else
      ++it;
  }
  return sets;
}

}  // namespace

int cmd_finetune(const FinetuneOptions& opt) {
  ExperimentConfig ec = load_experiment_config(opt.config_path, {});
  if (opt.seed) ec.train.seed = *opt.seed;
  else if (auto s = env_seed()) ec.train.seed = *s;
  if (opt.lr) ec.train.base_lr = *opt.lr;
  if (opt.steps) ec.train.max_steps = *opt.steps;
  auto [src, tgt] = parse_pair(opt.pair);

  Checkpoint ckpt = load_checkpoint(opt.checkpoint);
  ModelConfig cfg = ckpt.config;
  cfg.pde_mode = pde_mode_from_string(opt.pde);
  cfg.validate();
  ec.train.validate();
  ec.smart.validate();
  DataContext data = load_data_context(opt.data_dir);
  if (data.vocab.size() != cfg.vocab_size)
    throw config_error("checkpoint vocabulary size does not match data dir");
  if (opt.dry_run) {
    std::cout << "finetune: config ok\n";
    return kExitOk;
  }
  fs::create_directories(opt.out_dir);

  const std::string train_path =
      opt.data_dir + "/" + src + "2" + tgt + "." + opt.domain + ".train.tsv";
  Dataset train_data = load_tsv(train_path, data.vocab);
  if (train_data.empty()) throw data_error("empty domain training data: " + train_path);

  std::map<Direction, Dataset> eval_sets =
      eval_sets_for_finetune(data, opt.data_dir, "test", opt.domain);

  ParamMap<float> params = params_from_checkpoint<float>(ckpt);
  std::set<std::string> frozen = apply_freeze(params, freeze_spec_by_name(opt.freeze));

  json manifest_cfg = json::parse(ec.resolved_json);
  manifest_cfg["pair"] = opt.pair;
  manifest_cfg["domain"] = opt.domain;
  manifest_cfg["pde"] = opt.pde;
  manifest_cfg["smart"] = opt.smart;
  manifest_cfg["freeze"] = opt.freeze;
  const std::string ckpt_hash = file_hash_hex(opt.checkpoint);
  RunManifest m = make_manifest("finetune", manifest_cfg.dump(),
                                {{opt.checkpoint, ckpt_hash},
                                 {opt.data_dir + "/vocab.txt", data.corpus_hash}},
                                ckpt_hash, ec.train.seed);

  TrainLoopResult res =
      run_training(m.run_id, cfg, params, train_data, data.vocab, eval_sets, ec.train, frozen,
                   opt.smart, ec.smart, ec.eval_every, ec.max_decode_len);

  auto [d1, d2] = compute_deltas(res.baseline, res.final_report, src, tgt);
  Checkpoint out_ckpt =
      checkpoint_from_params(cfg, params, ec.train.max_steps, ec.train.seed, data.corpus_hash);
  save_checkpoint(opt.out_dir + "/model.ckpt", out_ckpt);
  write_report_csv(opt.out_dir + "/report.csv", res.rows);
  m.finished_at = now_iso8601();
  write_manifest(opt.out_dir + "/manifest.json", m);
  std::cout << "finetune: domain BLEU "
            << res.final_report.bleu({src, tgt, opt.domain}) << " delta1 " << d1 << " delta2 "
            << d2 << "\n";
  return kExitOk;
}

int cmd_search(const SearchOptions& opt) {
  ExperimentConfig ec = load_experiment_config(opt.config_path, {});
  if (opt.seed) ec.train.seed = *opt.seed;
  else if (auto s = env_seed()) ec.train.seed = *s;
  auto [src, tgt] = parse_pair(opt.pair);

  Checkpoint pretrained = load_checkpoint(opt.checkpoint);
  ModelConfig cfg = pretrained.config;
  cfg.validate();
  ec.search.validate();
  ec.train.validate();
  DataContext data = load_data_context(opt.data_dir);
  if (data.vocab.size() != cfg.vocab_size)
    throw config_error("checkpoint vocabulary size does not match data dir");
  if (opt.dry_run) {
    std::cout << "search: config ok\n";
    return kExitOk;
  }
  fs::create_directories(opt.out_dir);

  const std::string train_path =
      opt.data_dir + "/" + src + "2" + tgt + "." + opt.domain + ".train.tsv";
  Dataset train_data = load_tsv(train_path, data.vocab);

  std::map<Direction, Dataset> val_sets =
      eval_sets_for_finetune(data, opt.data_dir, ec.eval_split, opt.domain);
  const Direction domain_dir{src, tgt, opt.domain};
  if (!val_sets.count(domain_dir))
    throw data_error("no validation data for direction " + domain_dir.str());

  ParamMap<float> base_params = params_from_checkpoint<float>(pretrained);
  EvalReport baseline = evaluate(cfg, base_params, data.vocab, val_sets, ec.max_decode_len);

  const uint64_t config_hash =
      hash_combine(hash_combine(fnv1a(ec.resolved_json), fnv1a(file_hash_hex(opt.checkpoint))),
                   fnv1a(opt.pair + ":" + opt.domain));

  const std::string ledger_path = opt.out_dir + "/ledger.jsonl";
  std::vector<TrialRecord> resumed;
  if (opt.resume && fs::exists(ledger_path)) {
    LedgerContents prior = read_ledger(ledger_path);
    if (prior.config_hash != config_hash)
      throw resume_error("ledger " + ledger_path + " was written under a different configuration");
    resumed = std::move(prior.completed);
    std::cerr << "search: resuming with " << resumed.size() << " completed trials\n";
  } else if (fs::exists(ledger_path)) {
    fs::remove(ledger_path);
  }
  Ledger ledger(ledger_path, config_hash);

  std::mutex rows_mutex;
  std::vector<ReportRow> all_rows;

  DriverFactory factory = [&](double lr, const std::string& freeze_name,
                              int64_t trial_id) -> TrialDriver {
    struct TrialState {
      ParamMap<float> params;
      AdamState<float> st;
      std::set<std::string> frozen;
      std::optional<BatchIterator> iter;
      int64_t steps = 0;
    };
    auto state = std::make_shared<TrialState>();
    TrainConfig tc = ec.train;
    tc.base_lr = lr;
    tc.max_steps = ec.search.t_max;
    TrialDriver driver;
    driver.reset = [state, &pretrained, freeze_name, tc, &train_data, &data]() {
      state->params = params_from_checkpoint<float>(pretrained);
      state->frozen = apply_freeze(state->params, freeze_spec_by_name(freeze_name));
      state->st = AdamState<float>::init(state->params, tc.base_lr, tc.weight_decay);
      state->iter.emplace(train_data, data.vocab, tc.batch_size, tc.seed, true);
      state->steps = 0;
    };
    driver.train = [state, tc, &cfg](int64_t n) {
      for (int64_t i = 0; i < n; ++i) {
        Batch batch = state->iter->next();
        train_step(cfg, state->params, batch, state->st, tc, state->frozen);
        ++state->steps;
      }
    };
    driver.evaluate = [state, &cfg, &data, &val_sets, &baseline, &ec, src = src, tgt = tgt,
                       domain_dir, trial_id, &rows_mutex, &all_rows]() {
      EvalReport rep = evaluate(cfg, state->params, data.vocab, val_sets, ec.max_decode_len);
      auto [d1, d2] = compute_deltas(baseline, rep, src, tgt);
      {
        std::lock_guard<std::mutex> lock(rows_mutex);
        auto rows = report_rows("trial" + std::to_string(trial_id), state->steps, rep);
        all_rows.insert(all_rows.end(), rows.begin(), rows.end());
      }
      return EvalOutcome{rep.bleu(domain_dir), d1, d2};
    };
    driver.snapshot = [state, &cfg, &ec, &data, &opt, trial_id]() {
      const std::string path = opt.out_dir + "/trial" + std::to_string(trial_id) + "_step" +
                               std::to_string(state->steps) + ".ckpt";
      Checkpoint c = checkpoint_from_params(cfg, state->params, state->steps, ec.train.seed,
                                            data.corpus_hash);
      save_checkpoint(path, c);
      return path;
    };
    return driver;
  };

  SearchResult result = run_search(factory, ec.search, opt.checkpoint, &ledger,
                                   resumed.empty() ? nullptr : &resumed, opt.jobs);

  if (result.improvement_found) {
    fs::copy_file(result.theta_opt_ref, opt.out_dir + "/theta_opt.ckpt",
                  fs::copy_options::overwrite_existing);
  } else {
    fs::copy_file(opt.checkpoint, opt.out_dir + "/theta_opt.ckpt",
                  fs::copy_options::overwrite_existing);
    std::cout << "search: no improvement found; theta_opt is the baseline\n";
  }

  json result_json{{"theta_opt", opt.out_dir + "/theta_opt.ckpt"},
                   {"improvement_found", result.improvement_found},
                   {"best_lr", result.best_lr},
                   {"best_freeze", result.best_freeze}};
  {
    std::ofstream out(opt.out_dir + "/search_result.json", std::ios::binary);
    out << result_json.dump(2) << '\n';
  }
  if (!all_rows.empty()) {
    std::sort(all_rows.begin(), all_rows.end(), [](const ReportRow& a, const ReportRow& b) {
      if (a.run_id != b.run_id) return a.run_id < b.run_id;
      if (a.step != b.step) return a.step < b.step;
      return a.direction < b.direction;
    });
    write_report_csv(opt.out_dir + "/report.csv", all_rows);
  }
  const std::string ckpt_hash = file_hash_hex(opt.checkpoint);
  RunManifest m = make_manifest("search", ec.resolved_json,
                                {{opt.checkpoint, ckpt_hash},
                                 {opt.data_dir + "/vocab.txt", data.corpus_hash}},
                                ckpt_hash, ec.train.seed);
  m.finished_at = now_iso8601();
  write_manifest(opt.out_dir + "/manifest.json", m);
  std::cout << "search: best_lr " << result.best_lr << " best_freeze '" << result.best_freeze
            << "' improvement_found " << (result.improvement_found ? "yes" : "no") << "\n";
  return kExitOk;
}

int cmd_eval(const EvalOptions& opt) {
  Checkpoint ckpt = load_checkpoint(opt.checkpoint);
  ModelConfig cfg = ckpt.config;
  const std::string& data_dir = opt.data_dir;
  DataContext data = load_data_context(data_dir);
  if (data.vocab.size() != cfg.vocab_size)
    throw config_error("checkpoint vocabulary size does not match data dir");
  auto files = scan_data_dir(data_dir, opt.split);
  if (files.empty()) throw data_error("no '" + opt.split + "' data in " + data_dir);
  auto sets = load_direction_datasets(files, data.vocab);
  if (opt.dry_run) {
    std::cout << "eval: inputs ok (" << sets.size() << " directions)\n";
    return kExitOk;
  }
  ParamMap<float> params = params_from_checkpoint<float>(ckpt);
  EvalReport rep = evaluate(cfg, params, data.vocab, sets, opt.max_decode_len);
  write_report_csv(opt.out_csv, report_rows("eval", ckpt.step, rep));
  const std::string ckpt_hash = file_hash_hex(opt.checkpoint);
  RunManifest m = make_manifest("eval", "{}",
                                {{opt.checkpoint, ckpt_hash},
                                 {opt.data_dir + "/vocab.txt", data.corpus_hash}},
                                ckpt_hash, ckpt.seed);
  m.finished_at = now_iso8601();
  write_manifest(opt.out_csv + ".manifest.json", m);
  for (const auto& [dir, b] : rep.by_direction)
    std::cout << dir.str() << " " << b.score << "\n";
  std::cout << "mean " << rep.mean_bleu() << "\n";
  return kExitOk;
}

int cmd_report(const ReportOptions& opt) {
  if (!fs::is_directory(opt.runs_dir)) throw data_error("runs dir not found: " + opt.runs_dir);
  std::vector<std::pair<std::string, std::vector<ReportRow>>> runs;
  std::vector<std::string> run_names;
  for (const auto& entry : fs::directory_iterator(opt.runs_dir))
    if (entry.is_directory() && fs::exists(entry.path() / "report.csv"))
      run_names.push_back(entry.path().filename().string());
  std::sort(run_names.begin(), run_names.end());
  for (const auto& name : run_names)
    runs.emplace_back(name, read_report_csv(opt.runs_dir + "/" + name + "/report.csv"));
  if (runs.empty()) throw data_error("no runs with report.csv under " + opt.runs_dir);
  if (opt.dry_run) {
    std::cout << "report: inputs ok (" << runs.size() << " runs)\n";
    return kExitOk;
  }

  fs::create_directories(opt.out_dir);
  std::vector<ReportRow> merged;
  for (const auto& [name, rows] : runs) merged.insert(merged.end(), rows.begin(), rows.end());
  write_report_csv(opt.out_dir + "/merged.csv", merged);

  for (const auto& [name, rows] : runs) {
    // the fine-tuned pair: the (src, tgt) of the first non-generic direction
    std::optional<Direction> domain_dir;
    for (const auto& r : rows)
      if (r.direction.domain != "generic") {
        domain_dir = r.direction;
        break;
      }
    ChartSeries domain{"domain BLEU", "#d62728", {}};
    ChartSeries pair_generic{"pair generic BLEU", "#1f77b4", {}};
    ChartSeries other_generic{"mean other generic", "#2ca02c", {}};
    std::map<int64_t, std::pair<double, int64_t>> other_acc;
    for (const auto& r : rows) {
      if (domain_dir && r.direction == *domain_dir)
        domain.points.emplace_back(static_cast<double>(r.step), r.bleu.score);
      if (r.direction.domain == "generic") {
        if (domain_dir && r.direction.src == domain_dir->src &&
            r.direction.tgt == domain_dir->tgt) {
          pair_generic.points.emplace_back(static_cast<double>(r.step), r.bleu.score);
        } else {
          auto& [sum, count] = other_acc[r.step];
          sum += r.bleu.score;
          ++count;
        }
      }
    }
    for (const auto& [step, acc] : other_acc)
      other_generic.points.emplace_back(static_cast<double>(step),
                                        acc.first / static_cast<double>(acc.second));
    const std::string svg = render_line_chart(name, "steps", "BLEU",
                                              {domain, pair_generic, other_generic});
    std::ofstream out(opt.out_dir + "/" + name + ".svg", std::ios::binary);
    out << svg;
  }
  std::map<std::string, std::string> inputs;
  for (const auto& name : run_names) {
    const std::string path = opt.runs_dir + "/" + name + "/report.csv";
    inputs.emplace(path, file_hash_hex(path));
  }
  RunManifest m = make_manifest("report", "{}", inputs, "", 0);
  m.finished_at = now_iso8601();
  write_manifest(opt.out_dir + "/manifest.json", m);
  std::cout << "report: merged " << merged.size() << " rows from " << runs.size() << " runs\n";
  return kExitOk;
}

int cli_main(int argc, char** argv) {
  CLI::App app{"Desk-scale multilingual NMT domain-adaptation laboratory"};
  app.require_subcommand(1);

  uint64_t global_seed = env_seed().value_or(0);
  bool have_global_seed = env_seed().has_value();
  int jobs = static_cast<int>(env_jobs_default());
  bool dry_run = false;
  app.add_flag("--dry-run", dry_run, "validate configuration without side effects");
  app.add_option("--jobs", jobs, "parallel trial workers");
  auto* seed_opt = app.add_option("--seed", global_seed, "seed override");

  GenDataOptions gen;
  auto* cmd_gen = app.add_subcommand("gen-data", "generate a synthetic parallel corpus");
  cmd_gen->add_option("--spec", gen.spec_path, "corpus spec JSON")->required();
  cmd_gen->add_option("--out", gen.out_dir, "output directory")->required();

  PretrainOptions pre;
  auto* cmd_pre = app.add_subcommand("pretrain", "train the generic multilingual model");
  cmd_pre->add_option("--config", pre.config_path, "experiment config JSON");
  cmd_pre->add_option("--data", pre.data_dir, "data directory")->required();
  cmd_pre->add_option("--out", pre.out_dir, "output directory")->required();

  FinetuneOptions fin;
  auto* cmd_fin = app.add_subcommand("finetune", "fine-tune on one pair's domain data");
  cmd_fin->add_option("--config", fin.config_path, "experiment config JSON");
  cmd_fin->add_option("--checkpoint", fin.checkpoint, "pretrained checkpoint")->required();
  cmd_fin->add_option("--data", fin.data_dir, "data directory")->required();
  cmd_fin->add_option("--pair", fin.pair, "language pair src-tgt")->required();
  cmd_fin->add_option("--domain", fin.domain, "domain name");
  cmd_fin->add_option("--out", fin.out_dir, "output directory")->required();
  cmd_fin->add_flag("--smart", fin.smart, "use the SMART regularized step");
  cmd_fin->add_option("--pde", fin.pde, "residual removal mode");
  cmd_fin->add_option("--freeze", fin.freeze, "freeze setting or glob patterns");
  double fin_lr = 0.0;
  auto* fin_lr_opt = cmd_fin->add_option("--lr", fin_lr, "learning rate override");
  int64_t fin_steps = 0;
  auto* fin_steps_opt = cmd_fin->add_option("--steps", fin_steps, "step budget override");

  SearchOptions sea;
  auto* cmd_sea = app.add_subcommand("search", "threshold-driven fine-tuning search");
  cmd_sea->add_option("--config", sea.config_path, "experiment config JSON");
  cmd_sea->add_option("--checkpoint", sea.checkpoint, "pretrained checkpoint")->required();
  cmd_sea->add_option("--data", sea.data_dir, "data directory")->required();
  cmd_sea->add_option("--pair", sea.pair, "language pair src-tgt")->required();
  cmd_sea->add_option("--domain", sea.domain, "domain name");
  cmd_sea->add_option("--out", sea.out_dir, "output directory")->required();
  cmd_sea->add_flag("--resume", sea.resume, "resume from an existing ledger");

  EvalOptions ev;
  auto* cmd_ev = app.add_subcommand("eval", "evaluate a checkpoint");
  cmd_ev->add_option("--checkpoint", ev.checkpoint, "checkpoint")->required();
  cmd_ev->add_option("--data", ev.data_dir, "data directory")->required();
  cmd_ev->add_option("--out", ev.out_csv, "output CSV")->required();
  cmd_ev->add_option("--split", ev.split, "data split to score");

  ReportOptions rep;
  auto* cmd_rep = app.add_subcommand("report", "merge run reports and render SVG charts");
  cmd_rep->add_option("--runs", rep.runs_dir, "directory of run directories")->required();
  cmd_rep->add_option("--out", rep.out_dir, "output directory")->required();

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    return app.exit(e) == 0 ? 0 : kExitConfig;
  }
  have_global_seed = have_global_seed || seed_opt->count() > 0;

  try {
    if (cmd_gen->parsed()) {
      gen.seed = global_seed;
      gen.dry_run = dry_run;
      return cmd_gen_data(gen);
    }
    if (cmd_pre->parsed()) {
      if (have_global_seed) pre.seed = global_seed;
      pre.dry_run = dry_run;
      return cmd_pretrain(pre);
    }
    if (cmd_fin->parsed()) {
      if (have_global_seed) fin.seed = global_seed;
      if (fin_lr_opt->count() > 0) fin.lr = fin_lr;
      if (fin_steps_opt->count() > 0) fin.steps = fin_steps;
      fin.dry_run = dry_run;
      return cmd_finetune(fin);
    }
    if (cmd_sea->parsed()) {
      if (have_global_seed) sea.seed = global_seed;
      sea.jobs = jobs;
      sea.dry_run = dry_run;
      return cmd_search(sea);
    }
    if (cmd_ev->parsed()) {
      ev.dry_run = dry_run;
      return cmd_eval(ev);
    }
    if (cmd_rep->parsed()) {
      rep.dry_run = dry_run;
      return cmd_report(rep);
    }
  } catch (const config_error& e) {
    std::cerr << "config error: " << e.what() << "\n";
    return kExitConfig;
  } catch (const resume_error& e) {
    std::cerr << "resume error: " << e.what() << "\n";
    return kExitResume;
  } catch (const numeric_error& e) {
    std::cerr << "numeric error: " << e.what() << "\n";
    return kExitNumeric;
  } catch (const data_error& e) {
    std::cerr << "data error: " << e.what() << "\n";
    return kExitData;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  }
  return kExitConfig;
}

}  // namespace mnmt
