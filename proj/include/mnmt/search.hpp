#pragma once

#include <cstdint>
#include <functional>
#include <optional>
#include <string>
#include <vector>

#include "mnmt/common.hpp"

namespace mnmt {

// Threshold-driven fine-tuning search settings. eps1 bounds the fine-tuned
// pair's generic BLEU degradation, eps2 the mean degradation on the other
// generic directions, eps3 the domain-BLEU loss the freeze stage may trade
// for better generic retention.
struct SearchConfig {
  std::vector<double> lr_grid;
  int64_t t_max = 100000;
  int64_t eval_every = 2000;
  double eps1 = 2.0;
  double eps2 = 1.0;
  double eps3 = 1.0;
  enum class Combinator { both, either } combinator = Combinator::both;
  // first entry is the base trial's freeze setting; later entries are tried
  // by the freeze stage at the winning lr
  std::vector<std::string> freeze_grid = {"none", "encoder-embeddings"};

  void validate() const {
    if (lr_grid.empty()) throw config_error("search lr_grid is empty");
    if (t_max < 1 || eval_every < 1 || eval_every > t_max)
      throw config_error("search needs 1 <= eval_every <= t_max");
    if (freeze_grid.empty()) throw config_error("search freeze_grid is empty");
  }

  bool passes(double delta1, double delta2) const {
    const bool ok1 = delta1 <= eps1;
    const bool ok2 = delta2 <= eps2;
    return combinator == Combinator::both ? (ok1 && ok2) : (ok1 || ok2);
  }
};

struct EvalOutcome {
  double domain_bleu = 0.0;
  double delta1 = 0.0;
  double delta2 = 0.0;
};

struct EvalPoint {
  int64_t step = 0;
  double domain_bleu = 0.0;
  double delta1 = 0.0;
  double delta2 = 0.0;
  bool pass = false;
};

enum class StopReason { threshold_violation, budget_exhausted };

std::string to_string(StopReason r);
StopReason stop_reason_from_string(const std::string& s);

struct TrialRecord {
  int64_t trial_id = 0;
  double lr = 0.0;
  std::string freeze_name;
  std::vector<EvalPoint> points;
  StopReason stop = StopReason::budget_exhausted;
  // best threshold-passing evaluation point, if any
  bool has_best = false;
  std::string best_ref;  // checkpoint reference from the driver
  double best_bleu = 0.0;
  double best_delta2 = 0.0;
  int64_t best_step = 0;
};

struct SearchResult {
  std::string theta_opt_ref;  // equals the pretrained ref when nothing passed
  bool improvement_found = false;
  double best_lr = 0.0;
  std::string best_freeze;
  std::vector<TrialRecord> trials;
};

// What a trial needs from the outside world. The real driver wraps the
// model, optimizer and evaluator; controller tests script these hooks.
struct TrialDriver {
  std::function<void()> reset;           // theta <- theta_0, freeze, fresh optimizer
  std::function<void(int64_t)> train;    // advance n steps
  std::function<EvalOutcome()> evaluate;
  std::function<std::string()> snapshot;  // persist current params, return a reference
};

using DriverFactory =
    std::function<TrialDriver(double lr, const std::string& freeze_name, int64_t trial_id)>;

// Append-only JSONL trial ledger; one evaluation point per line plus
// start/end records, enabling resume and post-hoc reporting.
class Ledger {
 public:
  explicit Ledger(const std::string& path, uint64_t config_hash);
  void trial_start(const TrialRecord& t);
  void point(const TrialRecord& t, const EvalPoint& p, const std::string& snapshot_ref);
  void trial_end(const TrialRecord& t);
  void result(const SearchResult& r);

 private:
  void write_line(const std::string& line);
  std::string path_;
};

struct LedgerContents {
  uint64_t config_hash = 0;
  std::vector<TrialRecord> completed;  // trials with an end record
  std::optional<SearchResult> result;
};

LedgerContents read_ledger(const std::string& path);

// Fine-tunes under the driver, evaluating every eval_every steps; keeps going
// while thresholds pass, stops on the first violating point (recorded last)
// or when t_max is exhausted. Best = max domain BLEU among passing points,
// ties broken by lower delta2 then earlier step.
TrialRecord run_trial(TrialDriver& driver, const SearchConfig& cfg, double lr,
                      const std::string& freeze_name, int64_t trial_id = 0,
                      Ledger* ledger = nullptr);

// Re-runs trials at the winning lr for each remaining freeze_grid entry.
std::vector<TrialRecord> freeze_stage(const DriverFactory& factory, const SearchConfig& cfg,
                                      double best_lr, int64_t first_trial_id,
                                      Ledger* ledger = nullptr,
                                      const std::vector<TrialRecord>* resume_from = nullptr);

// Full hyperparameter search: one trial per lr with the first freeze setting,
// then the freeze stage at the winning lr. resume_from supplies completed
// trials from a previous run's ledger (matched by trial id). jobs > 1 runs
// the lr-stage trials on worker threads; selection is order-insensitive.
SearchResult run_search(const DriverFactory& factory, const SearchConfig& cfg,
                        const std::string& pretrained_ref, Ledger* ledger = nullptr,
                        const std::vector<TrialRecord>* resume_from = nullptr, int jobs = 1);

}  // namespace mnmt
