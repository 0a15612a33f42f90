#pragma once

#include <cstdint>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include "mnmt/metrics.hpp"
#include "mnmt/model.hpp"
#include "mnmt/optim.hpp"
#include "mnmt/search.hpp"
#include "mnmt/smart.hpp"

namespace mnmt {

// Exit codes: 0 success, 2 config error, 3 data error, 4 numeric failure,
// 5 interrupted-resume mismatch.
inline constexpr int kExitOk = 0;
inline constexpr int kExitConfig = 2;
inline constexpr int kExitData = 3;
inline constexpr int kExitNumeric = 4;
inline constexpr int kExitResume = 5;

// Versioned defaults for every config section; user files are validated
// against it (unknown keys are config errors).
const std::string& config_schema_text();

// Resolved experiment configuration: schema defaults overlaid with the user
// file, MNMTLAB_* environment overrides and CLI flags.
struct ExperimentConfig {
  ModelConfig model;
  TrainConfig train;
  SmartConfig smart;
  SearchConfig search;
  int64_t eval_every = 200;
  int64_t max_decode_len = 24;
  std::string eval_split = "val";
  std::vector<std::string> train_domains = {"generic"};
  std::string resolved_json;  // canonical snapshot for manifests/hashing
};

ExperimentConfig load_experiment_config(const std::string& path_or_empty,
                                        const std::map<std::string, std::string>& overrides);

// Named freeze settings used by the CLI and the search freeze grid.
FreezeSpec freeze_spec_by_name(const std::string& name);

struct GenDataOptions {
  std::string spec_path, out_dir;
  uint64_t seed = 0;
  bool dry_run = false;
};

struct PretrainOptions {
  std::string config_path, data_dir, out_dir;
  std::optional<uint64_t> seed;
  bool dry_run = false;
};

struct FinetuneOptions {
  std::string config_path, checkpoint, data_dir, out_dir;
  std::string pair;              // "src-tgt"
  std::string domain = "medical";
  bool smart = false;
  std::string pde = "none";
  std::string freeze = "none";
  std::optional<double> lr;
  std::optional<int64_t> steps;
  std::optional<uint64_t> seed;
  bool dry_run = false;
};

struct SearchOptions {
  std::string config_path, checkpoint, data_dir, out_dir;
  std::string pair;
  std::string domain = "medical";
  bool resume = false;
  int jobs = 1;
  std::optional<uint64_t> seed;
  bool dry_run = false;
};

struct EvalOptions {
  std::string checkpoint, data_dir, out_csv;
  std::string split = "test";
  int64_t max_decode_len = 24;
  bool dry_run = false;
};

struct ReportOptions {
  std::string runs_dir, out_dir;
  bool dry_run = false;
};

int cmd_gen_data(const GenDataOptions& opt);
int cmd_pretrain(const PretrainOptions& opt);
int cmd_finetune(const FinetuneOptions& opt);
int cmd_search(const SearchOptions& opt);
int cmd_eval(const EvalOptions& opt);
int cmd_report(const ReportOptions& opt);

// Directions available in a data dir for a given split.
std::map<Direction, std::string> scan_data_dir(const std::string& data_dir,
                                               const std::string& split);

int cli_main(int argc, char** argv);

}  // namespace mnmt
