#include "mnmt/search.hpp"

#include <algorithm>
#include <filesystem>
#include <fstream>
#include <map>
#include <mutex>
#include <thread>

#include <json.hpp>

namespace mnmt {

using nlohmann::json;

namespace {
std::mutex g_ledger_mutex;
}

std::string to_string(StopReason r) {
  return r == StopReason::threshold_violation ? "threshold-violation" : "budget-exhausted";
}

StopReason stop_reason_from_string(const std::string& s) {
  if (s == "threshold-violation") return StopReason::threshold_violation;
  if (s == "budget-exhausted") return StopReason::budget_exhausted;
  throw data_error("unknown stop reason: " + s);
}

Ledger::Ledger(const std::string& path, uint64_t config_hash) : path_(path) {
  bool fresh = !std::filesystem::exists(path) || std::filesystem::file_size(path) == 0;
  if (fresh) {
    json j{{"kind", "header"}, {"config_hash", config_hash}};
    write_line(j.dump());
  }
}

void Ledger::write_line(const std::string& line) {
  std::lock_guard<std::mutex> lock(g_ledger_mutex);
  std::ofstream out(path_, std::ios::binary | std::ios::app);
  if (!out) throw data_error("cannot write ledger: " + path_);
  out << line << '\n';
  out.flush();
}

void Ledger::trial_start(const TrialRecord& t) {
  json j{{"kind", "trial_start"}, {"trial", t.trial_id}, {"lr", t.lr}, {"freeze", t.freeze_name}};
  write_line(j.dump());
}

void Ledger::point(const TrialRecord& t, const EvalPoint& p, const std::string& snapshot_ref) {
  json j{{"kind", "point"},       {"trial", t.trial_id}, {"step", p.step},
         {"domain_bleu", p.domain_bleu}, {"delta1", p.delta1},  {"delta2", p.delta2},
         {"pass", p.pass}};
  if (!snapshot_ref.empty()) j["snapshot"] = snapshot_ref;
  write_line(j.dump());
}

void Ledger::trial_end(const TrialRecord& t) {
  json j{{"kind", "trial_end"},
         {"trial", t.trial_id},
         {"lr", t.lr},
         {"freeze", t.freeze_name},
         {"stop", to_string(t.stop)},
         {"has_best", t.has_best},
         {"best_ref", t.best_ref},
         {"best_bleu", t.best_bleu},
         {"best_delta2", t.best_delta2},
         {"best_step", t.best_step}};
  write_line(j.dump());
}

void Ledger::result(const SearchResult& r) {
  json j{{"kind", "result"},
         {"theta_opt", r.theta_opt_ref},
         {"improvement_found", r.improvement_found},
         {"best_lr", r.best_lr},
         {"best_freeze", r.best_freeze}};
  write_line(j.dump());
}

LedgerContents read_ledger(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw data_error("cannot read ledger: " + path);
  LedgerContents out;
  std::map<int64_t, TrialRecord> open_trials;
  std::string line;
  int64_t lineno = 0;
  bool have_header = false;
  while (std::getline(in, line)) {
    ++lineno;
    if (line.empty()) continue;
    json j;
    try {
      j = json::parse(line);
    } catch (const json::exception& e) {
      throw data_error(path + ":" + std::to_string(lineno) + ": bad ledger line: " + e.what());
    }
    const std::string kind = j.value("kind", "");
    if (kind == "header") {
      if (!have_header) {
        out.config_hash = j.at("config_hash").get<uint64_t>();
        have_header = true;
      }
    } else if (kind == "trial_start") {
      TrialRecord t;
      t.trial_id = j.at("trial").get<int64_t>();
      t.lr = j.at("lr").get<double>();
      t.freeze_name = j.at("freeze").get<std::string>();
      open_trials[t.trial_id] = std::move(t);  // restart resets any stale points
    } else if (kind == "point") {
      const int64_t id = j.at("trial").get<int64_t>();
      auto it = open_trials.find(id);
      if (it == open_trials.end()) continue;
      EvalPoint p;
      p.step = j.at("step").get<int64_t>();
      p.domain_bleu = j.at("domain_bleu").get<double>();
      p.delta1 = j.at("delta1").get<double>();
      p.delta2 = j.at("delta2").get<double>();
      p.pass = j.at("pass").get<bool>();
      it->second.points.push_back(p);
    } else if (kind == "trial_end") {
      const int64_t id = j.at("trial").get<int64_t>();
      auto it = open_trials.find(id);
      if (it == open_trials.end()) continue;
      TrialRecord t = std::move(it->second);
      open_trials.erase(it);
      t.stop = stop_reason_from_string(j.at("stop").get<std::string>());
      t.has_best = j.at("has_best").get<bool>();
      t.best_ref = j.at("best_ref").get<std::string>();
      t.best_bleu = j.at("best_bleu").get<double>();
      t.best_delta2 = j.at("best_delta2").get<double>();
      t.best_step = j.at("best_step").get<int64_t>();
      out.completed.push_back(std::move(t));
    } else if (kind == "result") {
      SearchResult r;
      r.theta_opt_ref = j.at("theta_opt").get<std::string>();
      r.improvement_found = j.at("improvement_found").get<bool>();
      r.best_lr = j.at("best_lr").get<double>();
      r.best_freeze = j.at("best_freeze").get<std::string>();
      out.result = std::move(r);
    }
  }
  return out;
}

TrialRecord run_trial(TrialDriver& driver, const SearchConfig& cfg, double lr,
                      const std::string& freeze_name, int64_t trial_id, Ledger* ledger) {
  cfg.validate();
  TrialRecord rec;
  rec.trial_id = trial_id;
  rec.lr = lr;
  rec.freeze_name = freeze_name;
  if (ledger) ledger->trial_start(rec);
  driver.reset();
  int64_t steps = 0;
  rec.stop = StopReason::budget_exhausted;
  while (steps < cfg.t_max) {
    const int64_t n = std::min(cfg.eval_every, cfg.t_max - steps);
    driver.train(n);
    steps += n;
    const EvalOutcome o = driver.evaluate();
    EvalPoint pt{steps, o.domain_bleu, o.delta1, o.delta2, cfg.passes(o.delta1, o.delta2)};
    rec.points.push_back(pt);
    std::string snap;
    if (pt.pass) {
      const bool better = !rec.has_best || pt.domain_bleu > rec.best_bleu ||
                          (pt.domain_bleu == rec.best_bleu && pt.delta2 < rec.best_delta2);
      if (better) {
        snap = driver.snapshot();
        rec.has_best = true;
        rec.best_ref = snap;
        rec.best_bleu = pt.domain_bleu;
        rec.best_delta2 = pt.delta2;
        rec.best_step = pt.step;
      }
      if (ledger) ledger->point(rec, pt, snap);
    } else {
      if (ledger) ledger->point(rec, pt, snap);
      rec.stop = StopReason::threshold_violation;
      break;
    }
  }
  if (ledger) ledger->trial_end(rec);
  return rec;
}

namespace {

// total order on candidate trials: higher domain BLEU, then lower delta2,
// then earlier step, then lower trial id
bool beats(const TrialRecord& a, const TrialRecord& b) {
  if (!a.has_best) return false;
  if (!b.has_best) return true;
  if (a.best_bleu != b.best_bleu) return a.best_bleu > b.best_bleu;
  if (a.best_delta2 != b.best_delta2) return a.best_delta2 < b.best_delta2;
  if (a.best_step != b.best_step) return a.best_step < b.best_step;
  return a.trial_id < b.trial_id;
}

const TrialRecord* find_resumed(const std::vector<TrialRecord>* resume, int64_t trial_id,
                                double lr, const std::string& freeze) {
  if (!resume) return nullptr;
  for (const auto& t : *resume)
    if (t.trial_id == trial_id) {
      if (t.lr != lr || t.freeze_name != freeze)
        throw resume_error("ledger trial " + std::to_string(trial_id) +
                           " does not match the current search configuration");
      return &t;
    }
  return nullptr;
}

}  // namespace

std::vector<TrialRecord> freeze_stage(const DriverFactory& factory, const SearchConfig& cfg,
                                      double best_lr, int64_t first_trial_id, Ledger* ledger,
                                      const std::vector<TrialRecord>* resume_from) {
  std::vector<TrialRecord> out;
  for (size_t i = 1; i < cfg.freeze_grid.size(); ++i) {
    const int64_t id = first_trial_id + static_cast<int64_t>(i) - 1;
    if (const TrialRecord* r = find_resumed(resume_from, id, best_lr, cfg.freeze_grid[i])) {
      out.push_back(*r);
      continue;
    }
    TrialDriver driver = factory(best_lr, cfg.freeze_grid[i], id);
    out.push_back(run_trial(driver, cfg, best_lr, cfg.freeze_grid[i], id, ledger));
  }
  return out;
}

SearchResult run_search(const DriverFactory& factory, const SearchConfig& cfg,
                        const std::string& pretrained_ref, Ledger* ledger,
                        const std::vector<TrialRecord>* resume_from, int jobs) {
  cfg.validate();
  const int64_t n_lr = static_cast<int64_t>(cfg.lr_grid.size());
  std::vector<TrialRecord> trials(static_cast<size_t>(n_lr));

  auto run_one = [&](int64_t i) {
    const double lr = cfg.lr_grid[static_cast<size_t>(i)];
    if (const TrialRecord* r = find_resumed(resume_from, i, lr, cfg.freeze_grid[0])) {
      trials[static_cast<size_t>(i)] = *r;
      return;
    }
    TrialDriver driver = factory(lr, cfg.freeze_grid[0], i);
    trials[static_cast<size_t>(i)] = run_trial(driver, cfg, lr, cfg.freeze_grid[0], i, ledger);
  };

  if (jobs <= 1 || n_lr <= 1) {
    for (int64_t i = 0; i < n_lr; ++i) run_one(i);
  } else {
    std::vector<std::thread> workers;
    std::mutex next_mutex;
    int64_t next = 0;
    const int n_workers = static_cast<int>(std::min<int64_t>(jobs, n_lr));
    for (int w = 0; w < n_workers; ++w)
      workers.emplace_back([&]() {
        while (true) {
          int64_t i;
          {
            std::lock_guard<std::mutex> lock(next_mutex);
            if (next >= n_lr) return;
            i = next++;
          }
          run_one(i);
        }
      });
    for (auto& t : workers) t.join();
  }

  const TrialRecord* incumbent = nullptr;
  for (const auto& t : trials)
    if (t.has_best && (!incumbent || beats(t, *incumbent))) incumbent = &t;

  SearchResult result;
  result.trials = trials;
  if (!incumbent) {
    // every trial violated thresholds from the start: keep the baseline
    result.theta_opt_ref = pretrained_ref;
    result.improvement_found = false;
    if (ledger) ledger->result(result);
    return result;
  }

  TrialRecord winner = *incumbent;
  const double best_lr = winner.lr;

  // freeze stage at the winning lr; a frozen variant replaces the incumbent
  // iff it costs at most eps3 domain BLEU and strictly improves delta2
  std::vector<TrialRecord> frozen_trials =
      freeze_stage(factory, cfg, best_lr, n_lr, ledger, resume_from);
  for (const auto& ft : frozen_trials) {
    result.trials.push_back(ft);
    if (!ft.has_best) continue;
    if (winner.best_bleu - ft.best_bleu <= cfg.eps3 && ft.best_delta2 < winner.best_delta2)
      winner = ft;
  }

  result.theta_opt_ref = winner.best_ref;
  result.improvement_found = true;
  result.best_lr = winner.lr;
  result.best_freeze = winner.freeze_name;
  if (ledger) ledger->result(result);
  return result;
}

}  // namespace mnmt
