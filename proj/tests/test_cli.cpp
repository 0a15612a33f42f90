#include <doctest.h>

#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <vector>

#include "mnmt/checkpoint.hpp"
#include "mnmt/cli.hpp"
#include "mnmt/manifest.hpp"
#include "mnmt/svg.hpp"

using namespace mnmt;
namespace fs = std::filesystem;

namespace {

int run_binary(const std::string& args) {
  const std::string cmd = std::string(MNMTLAB_BIN) + " " + args + " >/dev/null 2>&1";
  int status = std::system(cmd.c_str());
  return WEXITSTATUS(status);
}

std::string write_spec(const std::string& path) {
  std::ofstream out(path, std::ios::binary);
  out << R"({
  "languages": [
    {"code": "aa", "seed": 11, "reorder": "identity"},
    {"code": "bb", "seed": 22, "reorder": "swap-adjacent-pairs"}
  ],
  "domains": [
    {"name": "generic", "concept_lo": 0, "concept_hi": 30, "min_len": 2, "max_len": 5},
    {"name": "medical", "concept_lo": 20, "concept_hi": 50, "min_len": 2, "max_len": 5}
  ],
  "pairs": [
    {"src": "aa", "tgt": "bb", "domain": "generic", "train": 40, "val": 8, "test": 8},
    {"src": "bb", "tgt": "aa", "domain": "generic", "train": 40, "val": 8, "test": 8},
    {"src": "aa", "tgt": "bb", "domain": "medical", "train": 24, "val": 8, "test": 8}
  ]
})";
  return path;
}

std::string write_train_config(const std::string& path) {
  std::ofstream out(path, std::ios::binary);
  out << R"({
  "model": {"d_model": 16, "n_heads": 2, "n_encoder_layers": 2, "n_decoder_layers": 1,
            "ffn_dim": 32, "max_seq_len": 16},
  "train": {"batch_size": 8, "max_steps": 30, "base_lr": 0.002, "seed": 5},
  "search": {"lr_grid": [0.002, 0.0005], "t_max": 20, "eval_every": 10,
             "eps1": 100.0, "eps2": 100.0},
  "eval_every": 15,
  "max_decode_len": 12
})";
  return path;
}

// minimal XML well-formedness scan: tags balance and nest properly
bool xml_well_formed(const std::string& text) {
  std::vector<std::string> stack;
  size_t i = 0;
  if (text.rfind("<?xml", 0) != 0) return false;
  while ((i = text.find('<', i)) != std::string::npos) {
    if (text.compare(i, 4, "<?xm") == 0) {
      i = text.find('>', i);
      continue;
    }
    size_t end = text.find('>', i);
    if (end == std::string::npos) return false;
    std::string tag = text.substr(i + 1, end - i - 1);
    if (!tag.empty() && tag.back() == '/') {
      // self-closing
    } else if (!tag.empty() && tag[0] == '/') {
      std::string name = tag.substr(1);
      if (stack.empty() || stack.back() != name) return false;
      stack.pop_back();
    } else {
      std::string name = tag.substr(0, tag.find_first_of(" \t\n"));
      stack.push_back(name);
    }
    i = end + 1;
  }
  return stack.empty();
}

struct CliFixture {
  CliFixture() {
    fs::remove_all("tmp_cli");
    fs::create_directories("tmp_cli");
    spec = write_spec("tmp_cli/spec.json");
    config = write_train_config("tmp_cli/config.json");
    GenDataOptions gen;
    gen.spec_path = spec;
    gen.out_dir = "tmp_cli/data";
    gen.seed = 9;
    REQUIRE(cmd_gen_data(gen) == 0);
  }
  std::string spec, config;
};

}  // namespace

TEST_CASE("config schema: defaults, unknown keys, env overrides") {
  ExperimentConfig ec = load_experiment_config("", {});
  CHECK(ec.train.batch_size == 32);
  CHECK(ec.search.eps1 == 2.0);
  CHECK(ec.smart.epsilon == 1e-5);
  CHECK(ec.smart.t_x_tilde == 1);

  fs::create_directories("tmp_cli");
  {
    std::ofstream out("tmp_cli/bad_key.json", std::ios::binary);
    out << R"({"train": {"batch_sizzle": 8}})";
  }
  CHECK_THROWS_AS(load_experiment_config("tmp_cli/bad_key.json", {}), config_error);

  setenv("MNMTLAB_TRAIN__BASE_LR", "0.123", 1);
  ExperimentConfig with_env = load_experiment_config("", {});
  CHECK(with_env.train.base_lr == doctest::Approx(0.123));
  unsetenv("MNMTLAB_TRAIN__BASE_LR");

  setenv("MNMTLAB_NO_SUCH_KEY", "1", 1);
  CHECK_THROWS_AS(load_experiment_config("", {}), config_error);
  unsetenv("MNMTLAB_NO_SUCH_KEY");

  ExperimentConfig with_override = load_experiment_config("", {{"train.max_steps", "77"}});
  CHECK(with_override.train.max_steps == 77);
}

TEST_CASE("freeze_spec_by_name") {
  CHECK(freeze_spec_by_name("none").empty());
  CHECK(freeze_spec_by_name("encoder-embeddings").patterns ==
        std::vector<std::string>{"encoder.embed.*"});
  CHECK(freeze_spec_by_name("a.*,b.*").patterns == std::vector<std::string>{"a.*", "b.*"});
}

TEST_CASE("gen-data produces a loadable deterministic corpus") {
  CliFixture fx;
  CHECK(fs::exists("tmp_cli/data/vocab.txt"));
  CHECK(fs::exists("tmp_cli/data/corpus.json"));
  CHECK(fs::exists("tmp_cli/data/aa2bb.generic.train.tsv"));
  CHECK(fs::exists("tmp_cli/data/manifest.json"));
  RunManifest m = read_manifest("tmp_cli/data/manifest.json");
  CHECK(m.command == "gen-data");
  CHECK(!m.run_id.empty());

  GenDataOptions again;
  again.spec_path = fx.spec;
  again.out_dir = "tmp_cli/data2";
  again.seed = 9;
  REQUIRE(cmd_gen_data(again) == 0);
  CHECK(file_hash_hex("tmp_cli/data/aa2bb.generic.train.tsv") ==
        file_hash_hex("tmp_cli/data2/aa2bb.generic.train.tsv"));

  auto dirs = scan_data_dir("tmp_cli/data", "test");
  CHECK(dirs.size() == 3);
  CHECK(dirs.count({"aa", "bb", "medical"}) == 1);
}

TEST_CASE("pretrain, eval, finetune, report pipeline on a miniature setup") {
  CliFixture fx;

  PretrainOptions pre;
  pre.config_path = fx.config;
  pre.data_dir = "tmp_cli/data";
  pre.out_dir = "tmp_cli/pre";
  REQUIRE(cmd_pretrain(pre) == 0);
  CHECK(fs::exists("tmp_cli/pre/model.ckpt"));
  CHECK(fs::exists("tmp_cli/pre/report.csv"));
  CHECK(fs::exists("tmp_cli/pre/manifest.json"));
  auto rows = read_report_csv("tmp_cli/pre/report.csv");
  CHECK(!rows.empty());
  // one row per generic direction per eval point (0, 15, 30)
  int step0 = 0;
  for (const auto& r : rows)
    if (r.step == 0) ++step0;
  CHECK(step0 == 2);

  Checkpoint ck = load_checkpoint("tmp_cli/pre/model.ckpt");
  CHECK(ck.config.d_model == 16);

  EvalOptions ev;
  ev.checkpoint = "tmp_cli/pre/model.ckpt";
  ev.data_dir = "tmp_cli/data";
  ev.out_csv = "tmp_cli/eval.csv";
  ev.max_decode_len = 12;
  REQUIRE(cmd_eval(ev) == 0);
  CHECK(read_report_csv("tmp_cli/eval.csv").size() == 3);
  CHECK(fs::exists("tmp_cli/eval.csv.manifest.json"));

  FinetuneOptions fin;
  fin.config_path = fx.config;
  fin.checkpoint = "tmp_cli/pre/model.ckpt";
  fin.data_dir = "tmp_cli/data";
  fin.pair = "aa-bb";
  fin.domain = "medical";
  fin.out_dir = "tmp_cli/fin";
  fin.steps = 20;
  REQUIRE(cmd_finetune(fin) == 0);
  CHECK(fs::exists("tmp_cli/fin/model.ckpt"));
  CHECK(fs::exists("tmp_cli/fin/report.csv"));

  // smart variant with lambda 0 must also run
  FinetuneOptions fsm = fin;
  fsm.out_dir = "tmp_cli/fin_smart";
  fsm.smart = true;
  REQUIRE(cmd_finetune(fsm) == 0);

  // pde on a 2-encoder-layer model works; the config error path is covered
  // by model tests (1-layer encoders cannot be built here)
  FinetuneOptions fpde = fin;
  fpde.out_dir = "tmp_cli/fin_pde";
  fpde.pde = "penultimate_attention_only";
  REQUIRE(cmd_finetune(fpde) == 0);

  ReportOptions rep;
  rep.runs_dir = "tmp_cli";
  rep.out_dir = "tmp_cli/charts";
  REQUIRE(cmd_report(rep) == 0);
  CHECK(fs::exists("tmp_cli/charts/merged.csv"));
  CHECK(fs::exists("tmp_cli/charts/fin.svg"));
  CHECK(fs::exists("tmp_cli/charts/manifest.json"));
  std::ifstream svg_in("tmp_cli/charts/fin.svg", std::ios::binary);
  std::string svg((std::istreambuf_iterator<char>(svg_in)), std::istreambuf_iterator<char>());
  CHECK(xml_well_formed(svg));
  // three series (legend swatches) for a finetune run
  size_t polylines = 0, pos = 0;
  while ((pos = svg.find("<polyline", pos)) != std::string::npos) {
    ++polylines;
    pos += 9;
  }
  CHECK(polylines == 3);
  // merged row count equals the sum of the inputs
  size_t total_rows = 0;
  for (const auto& dir : {"tmp_cli/pre", "tmp_cli/fin", "tmp_cli/fin_smart", "tmp_cli/fin_pde"})
    total_rows += read_report_csv(std::string(dir) + "/report.csv").size();
  CHECK(read_report_csv("tmp_cli/charts/merged.csv").size() == total_rows);
}

TEST_CASE("search command end to end with resume") {
  CliFixture fx;
  PretrainOptions pre;
  pre.config_path = fx.config;
  pre.data_dir = "tmp_cli/data";
  pre.out_dir = "tmp_cli/pre";
  REQUIRE(cmd_pretrain(pre) == 0);

  SearchOptions sea;
  sea.config_path = fx.config;
  sea.checkpoint = "tmp_cli/pre/model.ckpt";
  sea.data_dir = "tmp_cli/data";
  sea.pair = "aa-bb";
  sea.domain = "medical";
  sea.out_dir = "tmp_cli/search";
  REQUIRE(cmd_search(sea) == 0);
  CHECK(fs::exists("tmp_cli/search/theta_opt.ckpt"));
  CHECK(fs::exists("tmp_cli/search/ledger.jsonl"));
  CHECK(fs::exists("tmp_cli/search/search_result.json"));
  LedgerContents led = read_ledger("tmp_cli/search/ledger.jsonl");
  CHECK(led.completed.size() == 3);  // 2 lr trials + 1 freeze trial
  CHECK(led.result.has_value());

  const std::string theta_hash = file_hash_hex("tmp_cli/search/theta_opt.ckpt");

  // resume over a complete ledger re-runs nothing and reproduces the result
  SearchOptions res = sea;
  res.resume = true;
  REQUIRE(cmd_search(res) == 0);
  CHECK(file_hash_hex("tmp_cli/search/theta_opt.ckpt") == theta_hash);

  // truncated ledger: drop everything after the second trial's start
  std::ifstream in("tmp_cli/search/ledger.jsonl", std::ios::binary);
  std::vector<std::string> lines;
  std::string line;
  while (std::getline(in, line)) lines.push_back(line);
  in.close();
  size_t cut = 0;
  for (size_t i = 0; i < lines.size(); ++i)
    if (lines[i].find("trial_start") != std::string::npos &&
        lines[i].find("\"trial\":1") != std::string::npos)
      cut = i + 1;
  REQUIRE(cut > 0);
  {
    std::ofstream out("tmp_cli/search/ledger.jsonl", std::ios::binary | std::ios::trunc);
    for (size_t i = 0; i < cut; ++i) out << lines[i] << '\n';
  }
  REQUIRE(cmd_search(res) == 0);
  CHECK(file_hash_hex("tmp_cli/search/theta_opt.ckpt") == theta_hash);
  LedgerContents led2 = read_ledger("tmp_cli/search/ledger.jsonl");
  CHECK(led2.completed.size() == 3);
}

TEST_CASE("exit codes through the real binary") {
  fs::remove_all("tmp_cli_bin");
  fs::create_directories("tmp_cli_bin");
  // missing spec file -> data error (3), message names the path (not checked here)
  CHECK(run_binary("gen-data --spec tmp_cli_bin/missing.json --out tmp_cli_bin/out") == 3);
  // unknown config key -> config error (2)
  {
    std::ofstream out("tmp_cli_bin/bad.json", std::ios::binary);
    out << R"({"nope": 1})";
  }
  write_spec("tmp_cli_bin/spec.json");
  CHECK(run_binary("gen-data --spec tmp_cli_bin/spec.json --out tmp_cli_bin/data") == 0);
  CHECK(run_binary("pretrain --config tmp_cli_bin/bad.json --data tmp_cli_bin/data --out tmp_cli_bin/pre") == 2);
  // dry run validates without writing
  write_train_config("tmp_cli_bin/config.json");
  CHECK(run_binary("--dry-run pretrain --config tmp_cli_bin/config.json --data tmp_cli_bin/data --out tmp_cli_bin/dry") == 0);
  CHECK(!fs::exists("tmp_cli_bin/dry"));
  // report over an empty runs dir -> data error (3)
  fs::create_directories("tmp_cli_bin/no_runs");
  CHECK(run_binary("report --runs tmp_cli_bin/no_runs --out tmp_cli_bin/charts") == 3);
  // bad subcommand -> config error (2)
  CHECK(run_binary("frobnicate") == 2);
}

TEST_CASE("search that never passes thresholds keeps the baseline and exits 0") {
  CliFixture fx;
  PretrainOptions pre;
  pre.config_path = fx.config;
  pre.data_dir = "tmp_cli/data";
  pre.out_dir = "tmp_cli/pre";
  REQUIRE(cmd_pretrain(pre) == 0);
  {
    std::ofstream out("tmp_cli/impossible.json", std::ios::binary);
    out << R"({
  "model": {"d_model": 16, "n_heads": 2, "n_encoder_layers": 2, "n_decoder_layers": 1,
            "ffn_dim": 32, "max_seq_len": 16},
  "train": {"batch_size": 8, "max_steps": 30, "base_lr": 0.002, "seed": 5},
  "search": {"lr_grid": [0.002], "t_max": 20, "eval_every": 10,
             "eps1": -1000.0, "eps2": -1000.0},
  "eval_every": 15,
  "max_decode_len": 12
})";
  }
  SearchOptions sea;
  sea.config_path = "tmp_cli/impossible.json";
  sea.checkpoint = "tmp_cli/pre/model.ckpt";
  sea.data_dir = "tmp_cli/data";
  sea.pair = "aa-bb";
  sea.domain = "medical";
  sea.out_dir = "tmp_cli/search_noimp";
  CHECK(cmd_search(sea) == 0);
  // theta_opt falls back to the baseline checkpoint, flagged in the result
  CHECK(file_hash_hex("tmp_cli/search_noimp/theta_opt.ckpt") ==
        file_hash_hex("tmp_cli/pre/model.ckpt"));
  std::ifstream in("tmp_cli/search_noimp/search_result.json", std::ios::binary);
  std::string text((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
  CHECK(text.find("\"improvement_found\": false") != std::string::npos);
}

TEST_CASE("resume mismatch exits with the dedicated code") {
  CliFixture fx;
  PretrainOptions pre;
  pre.config_path = fx.config;
  pre.data_dir = "tmp_cli/data";
  pre.out_dir = "tmp_cli/pre";
  REQUIRE(cmd_pretrain(pre) == 0);
  SearchOptions sea;
  sea.config_path = fx.config;
  sea.checkpoint = "tmp_cli/pre/model.ckpt";
  sea.data_dir = "tmp_cli/data";
  sea.pair = "aa-bb";
  sea.domain = "medical";
  sea.out_dir = "tmp_cli/search";
  REQUIRE(cmd_search(sea) == 0);
  // changing the config invalidates the ledger
  {
    std::ofstream out("tmp_cli/config2.json", std::ios::binary);
    out << R"({
  "model": {"d_model": 16, "n_heads": 2, "n_encoder_layers": 2, "n_decoder_layers": 1,
            "ffn_dim": 32, "max_seq_len": 16},
  "train": {"batch_size": 8, "max_steps": 30, "base_lr": 0.002, "seed": 5},
  "search": {"lr_grid": [0.001], "t_max": 20, "eval_every": 10, "eps1": 100.0, "eps2": 100.0},
  "eval_every": 15,
  "max_decode_len": 12
})";
  }
  SearchOptions res = sea;
  res.config_path = "tmp_cli/config2.json";
  res.resume = true;
  CHECK_THROWS_AS(cmd_search(res), resume_error);
}

TEST_CASE("svg renderer emits well-formed xml for edge inputs") {
  CHECK(xml_well_formed(render_line_chart("t", "x", "y", {})));
  ChartSeries s{"only <one> & point", "#000000", {{1.0, 2.0}}};
  CHECK(xml_well_formed(render_line_chart("a & b", "steps", "BLEU", {s})));
}
